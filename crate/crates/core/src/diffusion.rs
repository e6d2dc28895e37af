//! Denoising diffusion over latent matrices: the linear noise schedule,
//! the forward corruption process, noise-prediction losses, and the two
//! samplers (ancestral and the pseudo linear multistep solver used for
//! fast inference).

use ndarray::Array2;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::cond::{denoise_unet_with_plans, ConditionBundle, UnetConfig, UnetPlans};
use crate::graph::{Graph, Real, Var};
use crate::params::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { timesteps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 {
            return Err(Error::config("diffusion needs at least one timestep"));
        }
        if !(self.beta_start > 0.0 && self.beta_start < 1.0) {
            return Err(Error::config("beta_start must lie in (0, 1)"));
        }
        if !(self.beta_end > 0.0 && self.beta_end < 1.0) {
            return Err(Error::config("beta_end must lie in (0, 1)"));
        }
        if self.beta_end < self.beta_start {
            return Err(Error::config("beta_end must not be below beta_start"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Ancestral sampling over every schedule step.
    Ddpm,
    /// Pseudo linear multistep solver on a strided sub-schedule.
    #[default]
    Plms,
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::Plms => "plms",
        })
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(SamplerKind::Ddpm),
            "plms" => Ok(SamplerKind::Plms),
            other => Err(Error::config(format!(
                "unknown sampler {other:?}, expected ddpm or plms"
            ))),
        }
    }
}

/// Precomputed schedule quantities, all in f64. Steps are 1-based:
/// t ranges over [1, T], and step 0 is the clean data point where the
/// cumulative alpha is defined as exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear schedule: betas interpolate endpoint-inclusive from start
    /// to end. A single-step schedule uses beta_start alone.
    pub fn linear(cfg: &DiffusionConfig) -> Result<Self> {
        cfg.validate()?;
        let t = cfg.timesteps;
        let mut betas = Vec::with_capacity(t);
        for i in 0..t {
            let frac = if t == 1 { 0.0 } else { i as f64 / (t - 1) as f64 };
            betas.push(cfg.beta_start + (cfg.beta_end - cfg.beta_start) * frac);
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t);
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::config(format!(
                "step {t} outside the schedule range [1, {}]",
                self.timesteps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// Cumulative alpha one step earlier; 1 at the start of the chain.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t <= 1 {
            1.0
        } else {
            self.alpha_bars[t - 2]
        }
    }

    /// Posterior variance of the reverse step at t.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar_prev(t)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
pub fn forward_sample<T: Real>(
    schedule: &NoiseSchedule,
    x0: &Array2<T>,
    t: usize,
    eps: &Array2<T>,
) -> Result<Array2<T>> {
    schedule.check_t(t)?;
    if x0.dim() != eps.dim() {
        return Err(Error::shape(format!(
            "data {:?} and noise {:?} shapes differ",
            x0.dim(),
            eps.dim()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = x0.clone();
    out.zip_mut_with(eps, |x, e| {
        *x = T::from_f64(sa * (*x).to_f64() + sn * (*e).to_f64());
    });
    Ok(out)
}

/// Mean squared error between true and predicted noise, accumulated in f64.
pub fn noise_loss<T: Real>(eps: &Array2<T>, eps_hat: &Array2<T>) -> Result<f64> {
    if eps.dim() != eps_hat.dim() {
        return Err(Error::shape(format!(
            "noise {:?} and prediction {:?} shapes differ",
            eps.dim(),
            eps_hat.dim()
        )));
    }
    if eps.is_empty() {
        return Err(Error::Degenerate("noise loss over an empty tensor".into()));
    }
    let mut sum = 0.0;
    for (e, p) in eps.iter().zip(eps_hat.iter()) {
        let d = (*e).to_f64() - (*p).to_f64();
        sum += d * d;
    }
    Ok(sum / eps.len() as f64)
}

/// Graph-level counterpart of [`noise_loss`] for training.
pub fn noise_loss_graph<T: Real>(g: &mut Graph<T>, eps_hat: Var, eps: Var) -> Var {
    let d = g.sub(eps_hat, eps);
    let sq = g.mul(d, d);
    g.mean_all(sq)
}

/// Anything that predicts the noise component of a corrupted latent.
/// `cond: None` requests the unconditional path.
pub trait Denoiser<T: Real> {
    /// (rows, cols) of the latent matrices this denoiser works on.
    fn latent_shape(&self) -> (usize, usize);

    fn predict(
        &self,
        x_t: &Array2<T>,
        t: usize,
        cond: Option<&ConditionBundle<T>>,
    ) -> Result<Array2<T>>;
}

/// Noise-prediction objective on one example: corrupt, predict, score.
pub fn prediction_loss<T: Real, D: Denoiser<T>>(
    schedule: &NoiseSchedule,
    denoiser: &D,
    x0: &Array2<T>,
    t: usize,
    eps: &Array2<T>,
    cond: Option<&ConditionBundle<T>>,
) -> Result<f64> {
    let x_t = forward_sample(schedule, x0, t, eps)?;
    let eps_hat = denoiser.predict(&x_t, t, cond)?;
    noise_loss(eps, &eps_hat)
}

/// Exact denoiser for a known clean point: inverting the forward process
/// gives the noise in closed form. Converging samplers must land on the
/// point, which is what the sampler tests check.
pub struct OracleDenoiser<T: Real> {
    point: Array2<T>,
    schedule: NoiseSchedule,
}

impl<T: Real> OracleDenoiser<T> {
    pub fn new(point: Array2<T>, schedule: NoiseSchedule) -> Self {
        Self { point, schedule }
    }
}

impl<T: Real> Denoiser<T> for OracleDenoiser<T> {
    fn latent_shape(&self) -> (usize, usize) {
        self.point.dim()
    }

    fn predict(
        &self,
        x_t: &Array2<T>,
        t: usize,
        _cond: Option<&ConditionBundle<T>>,
    ) -> Result<Array2<T>> {
        self.schedule.check_t(t)?;
        let ab = self.schedule.alpha_bar(t);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut out = x_t.clone();
        out.zip_mut_with(&self.point, |x, p| {
            *x = T::from_f64(((*x).to_f64() - sa * (*p).to_f64()) / sn);
        });
        Ok(out)
    }
}

/// The trained UNet behind the [`Denoiser`] interface. Holds borrowed
/// weights and reuses gather plans across the whole sampling chain.
pub struct UnetDenoiser<'a, T: Real> {
    cfg: &'a UnetConfig,
    store: &'a ParamStore<T>,
    plans: UnetPlans,
}

impl<'a, T: Real> UnetDenoiser<'a, T> {
    pub fn new(cfg: &'a UnetConfig, store: &'a ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, store, plans: UnetPlans::new() })
    }
}

impl<T: Real> Denoiser<T> for UnetDenoiser<'_, T> {
    fn latent_shape(&self) -> (usize, usize) {
        (self.cfg.latent_pixels(), self.cfg.latent_c)
    }

    fn predict(
        &self,
        x_t: &Array2<T>,
        t: usize,
        cond: Option<&ConditionBundle<T>>,
    ) -> Result<Array2<T>> {
        denoise_unet_with_plans(self.cfg, self.store, &self.plans, x_t, t, cond)
    }
}

fn gaussian<T: Real>(rows: usize, cols: usize, rng: &mut ChaCha12Rng) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || T::standard_normal(rng))
}

/// Ancestral sampling: walk every schedule step from pure noise down to
/// the data estimate. Noise injection stops at the last step.
pub fn ddpm_sample<T: Real, D: Denoiser<T>>(
    schedule: &NoiseSchedule,
    denoiser: &D,
    cond: Option<&ConditionBundle<T>>,
    rng: &mut ChaCha12Rng,
) -> Result<Array2<T>> {
    let (rows, cols) = denoiser.latent_shape();
    let mut x = gaussian::<T>(rows, cols, rng);
    for t in (1..=schedule.timesteps()).rev() {
        let eps_hat = denoiser.predict(&x, t, cond)?;
        if eps_hat.dim() != (rows, cols) {
            return Err(Error::shape("denoiser changed the latent shape"));
        }
        let a = schedule.alpha(t);
        let ab = schedule.alpha_bar(t);
        let coeff = schedule.beta(t) / (1.0 - ab).sqrt();
        let inv_sqrt_a = 1.0 / a.sqrt();
        let sigma = if t > 1 { schedule.posterior_variance(t).sqrt() } else { 0.0 };
        for (xv, ev) in x.iter_mut().zip(eps_hat.iter()) {
            let mean = inv_sqrt_a * ((*xv).to_f64() - coeff * (*ev).to_f64());
            let z = if t > 1 { T::standard_normal(rng).to_f64() } else { 0.0 };
            *xv = T::from_f64(mean + sigma * z);
        }
    }
    ensure_finite(&x, "ancestral sampler output")?;
    Ok(x)
}

/// Evenly strided sub-schedule in descending order. The realized length
/// can exceed `steps` slightly when the stride does not divide the range.
pub fn sub_schedule(timesteps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::config("sampler needs at least one step"));
    }
    if steps > timesteps {
        return Err(Error::config(format!(
            "{steps} sampling steps exceed the {timesteps}-step schedule"
        )));
    }
    let stride = (timesteps / steps).max(1);
    let mut ts: Vec<usize> = (1..=timesteps).step_by(stride).collect();
    ts.reverse();
    Ok(ts)
}

fn multistep_eps<T: Real>(history: &[Array2<T>]) -> Array2<T> {
    let coeffs: &[f64] = match history.len() {
        1 => &[1.0],
        2 => &[3.0 / 2.0, -1.0 / 2.0],
        3 => &[23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0],
        _ => &[55.0 / 24.0, -59.0 / 24.0, 37.0 / 24.0, -9.0 / 24.0],
    };
    let (rows, cols) = history[0].dim();
    let mut out = Array2::zeros((rows, cols));
    for (c, e) in coeffs.iter().zip(history.iter()) {
        out.zip_mut_with(e, |o: &mut T, v| {
            *o = T::from_f64((*o).to_f64() + c * (*v).to_f64());
        });
    }
    out
}

/// Deterministic jump from step t to step t_prev (0 meaning the clean
/// point) using the combined noise estimate.
fn plms_transfer<T: Real>(
    schedule: &NoiseSchedule,
    x: &Array2<T>,
    t: usize,
    t_prev: usize,
    eps: &Array2<T>,
) -> Array2<T> {
    let ab = schedule.alpha_bar(t);
    let ab_prev = if t_prev == 0 { 1.0 } else { schedule.alpha_bar(t_prev) };
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (sa_p, sn_p) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let mut out = x.clone();
    out.zip_mut_with(eps, |xv, ev| {
        let x0 = ((*xv).to_f64() - sn * (*ev).to_f64()) / sa;
        *xv = T::from_f64(sa_p * x0 + sn_p * (*ev).to_f64());
    });
    out
}

/// Pseudo linear multistep sampling: deterministic after the initial
/// noise draw, with a linear-multistep combination of recent noise
/// estimates replacing the per-step ancestral noise.
pub fn plms_sample<T: Real, D: Denoiser<T>>(
    schedule: &NoiseSchedule,
    denoiser: &D,
    cond: Option<&ConditionBundle<T>>,
    steps: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Array2<T>> {
    let ts = sub_schedule(schedule.timesteps(), steps)?;
    if steps < 4 {
        log::warn!(
            "multistep sampler with {steps} steps cannot reach full order; \
             falling back to lower-order updates"
        );
    }
    let (rows, cols) = denoiser.latent_shape();
    let mut x = gaussian::<T>(rows, cols, rng);
    let mut history: Vec<Array2<T>> = Vec::with_capacity(4);
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps_hat = denoiser.predict(&x, t, cond)?;
        if eps_hat.dim() != (rows, cols) {
            return Err(Error::shape("denoiser changed the latent shape"));
        }
        history.insert(0, eps_hat);
        history.truncate(4);
        let eps_bar = multistep_eps(&history);
        x = plms_transfer(schedule, &x, t, t_prev, &eps_bar);
    }
    ensure_finite(&x, "multistep sampler output")?;
    Ok(x)
}

/// Sampler dispatch. The ancestral sampler walks every schedule step and
/// ignores `steps`; the multistep solver strides through `steps` of them.
pub fn sample<T: Real, D: Denoiser<T>>(
    kind: SamplerKind,
    schedule: &NoiseSchedule,
    denoiser: &D,
    cond: Option<&ConditionBundle<T>>,
    steps: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Array2<T>> {
    match kind {
        SamplerKind::Ddpm => ddpm_sample(schedule, denoiser, cond, rng),
        SamplerKind::Plms => plms_sample(schedule, denoiser, cond, steps, rng),
    }
}

fn ensure_finite<T: Real>(x: &Array2<T>, what: &str) -> Result<()> {
    if x.iter().any(|v| !(*v).to_f64().is_finite()) {
        return Err(Error::Numeric(format!("{what} contains non-finite values")));
    }
    Ok(())
}
