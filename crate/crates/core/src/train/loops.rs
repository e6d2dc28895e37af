//! The three training loops: masked-signal pretraining, unconditional
//! denoiser training on images, and paired finetuning under the freeze
//! policy. All loops derive their randomness from (seed, label, epoch,
//! sample) streams, so a resumed run walks the exact same path as an
//! uninterrupted one.

use ndarray::Array2;
use rand::Rng as _;

use crate::codec::{to_denoiser_range, Codec};
use crate::cond::{
    init_cond_params, project_condition, unet_forward, CondConfig, CondVars, UnetConfig,
    UnetPlans,
};
use crate::data::{random_crop_image, random_sparsify, Pair};
use crate::diffusion::{forward_sample, noise_loss_graph, DiffusionConfig, NoiseSchedule};
use crate::graph::{Graph, Real};
use crate::mbm::{
    encode_all, init_mbm_params, make_mask_plan, mbm_forward, patchify, MbmBatch, MbmConfig,
};
use crate::params::{Binder, ParamStore};
use crate::rng::stream;
use crate::train::{
    clip_gradients, ensure_finite_loss, lr_at_step, AdamW, LossCurve, OptimizerConfig,
};
use crate::{Error, Result};

/// Which tensors an optimization stage may move, by name prefix.
/// Everything else is frozen: never bound as a parameter, never handed
/// to the optimizer, and bit-checked after training.
#[derive(Debug, Clone, PartialEq)]
pub struct FreezePolicy {
    trainable: Vec<String>,
}

impl FreezePolicy {
    pub fn everything() -> Self {
        Self { trainable: vec![String::new()] }
    }

    /// Paired finetuning trains the signal encoder, the condition
    /// projectors, and the cross-attention sites; the rest of the
    /// denoiser keeps its unconditional weights.
    pub fn stage_b() -> Self {
        Self {
            trainable: vec![
                "mbm.".into(),
                "cond.".into(),
                "unet.attn0.".into(),
                "unet.attn1.".into(),
            ],
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn binder(&self) -> Binder {
        let prefixes: Vec<&str> = self.trainable.iter().map(|s| s.as_str()).collect();
        Binder::trainable_prefixes(&prefixes)
    }

    /// Classify every tensor in the store. The report is the printable
    /// record of what the stage was allowed to touch.
    pub fn classify(&self, store: &ParamStore<f32>) -> FreezeReport {
        let mut trainable = Vec::new();
        let mut frozen = Vec::new();
        for name in store.names() {
            if self.is_trainable(name) {
                trainable.push(name.clone());
            } else {
                frozen.push(name.clone());
            }
        }
        FreezeReport { trainable, frozen }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreezeReport {
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
}

impl std::fmt::Display for FreezeReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "freeze policy: {} trainable, {} frozen",
            self.trainable.len(),
            self.frozen.len()
        )?;
        for n in &self.trainable {
            writeln!(f, "  trainable {n}")?;
        }
        for n in &self.frozen {
            writeln!(f, "  frozen    {n}")?;
        }
        Ok(())
    }
}

/// Mid-run state for continuing an interrupted loop.
pub struct ResumePoint {
    pub params: ParamStore<f32>,
    pub optimizer: AdamW<f32>,
    /// First epoch the continued run should execute (0-based).
    pub next_epoch: usize,
}

#[derive(Debug)]
pub struct StageAArtifacts {
    pub params: ParamStore<f32>,
    pub optimizer: AdamW<f32>,
    pub curve: LossCurve,
}

#[derive(Debug)]
pub struct BaseDenoiserArtifacts {
    pub params: ParamStore<f32>,
    pub optimizer: AdamW<f32>,
    pub curve: LossCurve,
}

#[derive(Debug)]
pub struct FinetuneArtifacts {
    pub params: ParamStore<f32>,
    pub optimizer: AdamW<f32>,
    pub curve: LossCurve,
    pub freeze: FreezeReport,
}

/// Extra knobs for signal pretraining beyond the optimizer settings.
#[derive(Debug, Clone)]
pub struct StageAOptions {
    /// Fraction of voxels zeroed per sample per step.
    pub sparsify_fraction: f64,
    /// Per-patch region labels for the focus mask strategy.
    pub primary_patches: Option<Vec<bool>>,
}

impl Default for StageAOptions {
    fn default() -> Self {
        Self { sparsify_fraction: 0.2, primary_patches: None }
    }
}

/// Where this invocation stops: the schedule horizon, or earlier when a
/// caller interrupts for checkpointing.
fn run_end(start: usize, max_epochs: usize, limit: Option<usize>) -> usize {
    match limit {
        Some(k) => (start + k).min(max_epochs),
        None => max_epochs,
    }
}

fn epoch_order(count: usize, seed: u64, label: &str, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut stream(seed, label, &[epoch as u64]));
    order
}

struct StepSchedule {
    warmup_steps: u64,
    total_steps: u64,
    peak: f64,
    clip: f64,
}

impl StepSchedule {
    fn new(opt_cfg: &OptimizerConfig, batches_per_epoch: usize) -> Self {
        let b = batches_per_epoch as u64;
        Self {
            warmup_steps: opt_cfg.warmup_epochs as u64 * b,
            total_steps: opt_cfg.max_epochs as u64 * b,
            peak: opt_cfg.peak_lr,
            clip: opt_cfg.grad_clip_norm,
        }
    }

    fn lr(&self, step: u64) -> f64 {
        lr_at_step(step, self.warmup_steps, self.total_steps, self.peak)
    }
}

/// Masked-reconstruction pretraining over unlabeled signals.
pub fn pretrain_stage_a(
    mbm_cfg: &MbmConfig,
    opt_cfg: &OptimizerConfig,
    signals: &[Vec<f32>],
    options: &StageAOptions,
    seed: u64,
    resume: Option<ResumePoint>,
    epoch_limit: Option<usize>,
) -> Result<StageAArtifacts> {
    mbm_cfg.validate()?;
    opt_cfg.validate()?;
    if signals.is_empty() {
        return Err(Error::Degenerate("pretraining needs at least one signal".into()));
    }
    let len = signals[0].len();
    if signals.iter().any(|s| s.len() != len) {
        return Err(Error::shape("pretraining signals must share one length"));
    }
    if len == 0 || len % mbm_cfg.patch_size != 0 {
        return Err(Error::shape(format!(
            "signal length {len} is not a positive multiple of patch size {}",
            mbm_cfg.patch_size
        )));
    }
    if !(0.0..1.0).contains(&options.sparsify_fraction) {
        return Err(Error::config("sparsify fraction must lie in [0, 1)"));
    }
    let n_patches = len / mbm_cfg.patch_size;
    if let Some(flags) = &options.primary_patches {
        if flags.len() != n_patches {
            return Err(Error::shape(format!(
                "{} region labels for {} patches",
                flags.len(),
                n_patches
            )));
        }
    }

    let batch_size = opt_cfg.batch_size.min(signals.len()).max(1);
    let batches_per_epoch = signals.len().div_ceil(batch_size);
    let sched = StepSchedule::new(opt_cfg, batches_per_epoch);

    let (mut params, mut opt, start_epoch) = match resume {
        Some(r) => (r.params, r.optimizer, r.next_epoch),
        None => (
            init_mbm_params::<f32>(mbm_cfg, &mut stream(seed, "stage_a.init", &[])),
            AdamW::new(),
            0,
        ),
    };
    let mut curve = LossCurve::default();
    let end_epoch = run_end(start_epoch, opt_cfg.max_epochs, epoch_limit);

    for epoch in start_epoch..end_epoch {
        let order = epoch_order(signals.len(), seed, "stage_a.order", epoch);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(batch_size) {
            let mut augmented = Vec::with_capacity(chunk.len());
            let mut plans = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut v = signals[i].clone();
                if options.sparsify_fraction > 0.0 {
                    let mut r = stream(seed, "stage_a.aug", &[epoch as u64, i as u64]);
                    random_sparsify(&mut v, options.sparsify_fraction, &mut r)?;
                }
                let mut r = stream(seed, "stage_a.mask", &[epoch as u64, i as u64]);
                plans.push(make_mask_plan(
                    n_patches,
                    mbm_cfg.mask_ratio,
                    mbm_cfg.mask_strategy,
                    options.primary_patches.as_deref(),
                    &mut r,
                )?);
                augmented.push(v);
            }
            let refs: Vec<&[f32]> = augmented.iter().map(|v| v.as_slice()).collect();
            let batch = MbmBatch::from_signals(&refs, plans, mbm_cfg.patch_size)?;

            let mut g = Graph::new();
            let mut bind = Binder::all();
            let out = mbm_forward(&mut g, &params, &mut bind, mbm_cfg, &batch)?;
            let loss = g.scalar(out.loss).to_f64();
            ensure_finite_loss(loss, "stage A pretraining")?;
            epoch_loss += loss * chunk.len() as f64;
            seen += chunk.len();

            let grads = g.backward(out.loss);
            let mut named = bind.grads(&grads);
            clip_gradients(&mut named, sched.clip);
            let lr = sched.lr(opt.step_count());
            opt.step(&mut params, &named, lr, opt_cfg.weight_decay);
        }
        curve.push((epoch + 1) as u32, epoch_loss / seen as f64);
    }

    Ok(StageAArtifacts { params, optimizer: opt, curve })
}

/// Unconditional denoiser training on codec latents of plain images.
/// This is the base the paired stage finetunes from; it never sees a
/// signal, so one trained base per (seed, images, config) can back any
/// number of conditioning variants.
pub fn train_base_denoiser(
    unet_cfg: &UnetConfig,
    diff_cfg: &DiffusionConfig,
    opt_cfg: &OptimizerConfig,
    codec: &Codec,
    images: &[crate::data::Image],
    seed: u64,
    resume: Option<ResumePoint>,
    epoch_limit: Option<usize>,
) -> Result<BaseDenoiserArtifacts> {
    unet_cfg.validate()?;
    opt_cfg.validate()?;
    let schedule = NoiseSchedule::linear(diff_cfg)?;
    if images.is_empty() {
        return Err(Error::Degenerate("denoiser training needs at least one image".into()));
    }
    check_latent_geometry(unet_cfg, codec)?;

    let mut latents = Vec::with_capacity(images.len());
    for img in images {
        latents.push(to_denoiser_range(&codec.encode(img)?.data));
    }

    let batch_size = opt_cfg.batch_size.min(latents.len()).max(1);
    let batches_per_epoch = latents.len().div_ceil(batch_size);
    let sched = StepSchedule::new(opt_cfg, batches_per_epoch);

    let (mut params, mut opt, start_epoch) = match resume {
        Some(r) => (r.params, r.optimizer, r.next_epoch),
        None => (
            crate::cond::init_unet_params::<f32>(unet_cfg, &mut stream(seed, "base.init", &[])),
            AdamW::new(),
            0,
        ),
    };
    let plans = UnetPlans::new();
    let mut curve = LossCurve::default();
    let end_epoch = run_end(start_epoch, opt_cfg.max_epochs, epoch_limit);

    for epoch in start_epoch..end_epoch {
        let order = epoch_order(latents.len(), seed, "base.order", epoch);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(batch_size) {
            let (x_t, eps, ts) = corrupt_batch(
                &schedule,
                chunk.iter().map(|&i| &latents[i]),
                chunk.len(),
                seed,
                "base.noise",
                epoch,
                chunk,
            )?;

            let mut g = Graph::new();
            let mut bind = Binder::all();
            let xv = g.input(x_t);
            let ev = g.input(eps);
            let out = unet_forward(&mut g, &params, &mut bind, unet_cfg, &plans, xv, &ts, None, None)?;
            let loss_var = noise_loss_graph(&mut g, out, ev);
            let loss = g.scalar(loss_var).to_f64();
            ensure_finite_loss(loss, "base denoiser training")?;
            epoch_loss += loss * chunk.len() as f64;
            seen += chunk.len();

            let grads = g.backward(loss_var);
            let mut named = bind.grads(&grads);
            clip_gradients(&mut named, sched.clip);
            let lr = sched.lr(opt.step_count());
            opt.step(&mut params, &named, lr, opt_cfg.weight_decay);
        }
        curve.push((epoch + 1) as u32, epoch_loss / seen as f64);
    }

    Ok(BaseDenoiserArtifacts { params, optimizer: opt, curve })
}

/// Paired finetuning: the condition path trains, the denoiser trunk is
/// frozen bitwise. Any frozen tensor that moves is a bug, enforced by
/// assertion at the end of the run.
#[allow(clippy::too_many_arguments)]
pub fn finetune_stage_b(
    mbm_cfg: &MbmConfig,
    cond_cfg: &CondConfig,
    unet_cfg: &UnetConfig,
    diff_cfg: &DiffusionConfig,
    opt_cfg: &OptimizerConfig,
    codec: &Codec,
    encoder_params: &ParamStore<f32>,
    base_params: &ParamStore<f32>,
    pairs: &[Pair],
    crop_ratio: f64,
    seed: u64,
    resume: Option<ResumePoint>,
    epoch_limit: Option<usize>,
) -> Result<FinetuneArtifacts> {
    mbm_cfg.validate()?;
    cond_cfg.validate()?;
    unet_cfg.validate()?;
    opt_cfg.validate()?;
    let schedule = NoiseSchedule::linear(diff_cfg)?;
    if pairs.is_empty() {
        return Err(Error::Degenerate("finetuning needs at least one pair".into()));
    }
    check_latent_geometry(unet_cfg, codec)?;
    if cond_cfg.d_tau != unet_cfg.d_tau {
        return Err(Error::config(format!(
            "condition width {} does not match the attention width {}",
            cond_cfg.d_tau, unet_cfg.d_tau
        )));
    }
    if cond_cfg.d_t != unet_cfg.time_dim {
        return Err(Error::config(format!(
            "sigma width {} does not match the time embedding width {}",
            cond_cfg.d_t, unet_cfg.time_dim
        )));
    }
    let voxel_len = pairs[0].fmri.voxels.len();
    if pairs.iter().any(|p| p.fmri.voxels.len() != voxel_len) {
        return Err(Error::shape("paired signals must share one length"));
    }
    if voxel_len == 0 || voxel_len % mbm_cfg.patch_size != 0 {
        return Err(Error::shape(format!(
            "signal length {voxel_len} is not a positive multiple of patch size {}",
            mbm_cfg.patch_size
        )));
    }
    let n_tokens = voxel_len / mbm_cfg.patch_size;
    cond_cfg.pool_geometry(n_tokens)?;

    let policy = FreezePolicy::stage_b();
    let (mut params, mut opt, start_epoch) = match resume {
        Some(r) => (r.params, r.optimizer, r.next_epoch),
        None => {
            let mut p = ParamStore::new();
            copy_encoder_tensors(encoder_params, &mut p)?;
            p.absorb(init_cond_params::<f32>(
                cond_cfg,
                n_tokens,
                mbm_cfg.embed_dim,
                &mut stream(seed, "stage_b.init", &[]),
            )?);
            for (name, tensor) in base_params.iter() {
                if !name.starts_with("unet.") {
                    return Err(Error::config(format!(
                        "unexpected tensor {name} in the base denoiser"
                    )));
                }
                p.insert(name.clone(), tensor.clone());
            }
            (p, AdamW::new(), 0)
        }
    };

    let freeze = policy.classify(&params);
    log::info!("{freeze}");
    let frozen_before: Vec<(String, Array2<f32>)> = freeze
        .frozen
        .iter()
        .map(|n| (n.clone(), params.get(n).clone()))
        .collect();

    let batch_size = opt_cfg.batch_size.min(pairs.len()).max(1);
    let batches_per_epoch = pairs.len().div_ceil(batch_size);
    let sched = StepSchedule::new(opt_cfg, batches_per_epoch);
    let plans = UnetPlans::new();
    let mut curve = LossCurve::default();
    let end_epoch = run_end(start_epoch, opt_cfg.max_epochs, epoch_limit);

    for epoch in start_epoch..end_epoch {
        let order = epoch_order(pairs.len(), seed, "stage_b.order", epoch);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(batch_size) {
            // Image side: crop-augment, encode, corrupt.
            let mut latents = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let img = if crop_ratio > 0.0 {
                    let mut r = stream(seed, "stage_b.crop", &[epoch as u64, i as u64]);
                    random_crop_image(&pairs[i].image, crop_ratio, &mut r)?
                } else {
                    pairs[i].image.clone()
                };
                latents.push(to_denoiser_range(&codec.encode(&img)?.data));
            }
            let (x_t, eps, ts) = corrupt_batch(
                &schedule,
                latents.iter(),
                chunk.len(),
                seed,
                "stage_b.noise",
                epoch,
                chunk,
            )?;

            // Signal side: patchify and stack the batch.
            let mut patch_rows = Array2::zeros((chunk.len() * n_tokens, mbm_cfg.patch_size));
            for (s, &i) in chunk.iter().enumerate() {
                let p = patchify::<f32>(&pairs[i].fmri.voxels, mbm_cfg.patch_size)?;
                patch_rows
                    .slice_mut(ndarray::s![s * n_tokens..(s + 1) * n_tokens, ..])
                    .assign(&p);
            }

            let mut g = Graph::new();
            let mut bind = policy.binder();
            let pv = g.input(patch_rows);
            let tokens = encode_all(&mut g, &params, &mut bind, mbm_cfg, pv, chunk.len())?;
            let (tau, sigma) =
                project_condition(&mut g, &params, &mut bind, cond_cfg, tokens, chunk.len())?;
            let xv = g.input(x_t);
            let ev = g.input(eps);
            let cond = CondVars { tau, sigma: Some(sigma) };
            let out = unet_forward(
                &mut g, &params, &mut bind, unet_cfg, &plans, xv, &ts, Some(cond), None,
            )?;
            let loss_var = noise_loss_graph(&mut g, out, ev);
            let loss = g.scalar(loss_var).to_f64();
            ensure_finite_loss(loss, "stage B finetuning")?;
            epoch_loss += loss * chunk.len() as f64;
            seen += chunk.len();

            let grads = g.backward(loss_var);
            let mut named = bind.grads(&grads);
            debug_assert!(named.iter().all(|(n, _)| policy.is_trainable(n)));
            clip_gradients(&mut named, sched.clip);
            let lr = sched.lr(opt.step_count());
            opt.step(&mut params, &named, lr, opt_cfg.weight_decay);
        }
        curve.push((epoch + 1) as u32, epoch_loss / seen as f64);
    }

    for (name, before) in &frozen_before {
        let after = params.get(name);
        let unchanged = before
            .iter()
            .zip(after.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(unchanged, "freeze policy violation: {name} changed during finetuning");
    }

    Ok(FinetuneArtifacts { params, optimizer: opt, curve, freeze })
}

/// The finetuning store starts from the pretrained signal encoder:
/// embedding plus encoder blocks, not the reconstruction decoder.
fn copy_encoder_tensors(src: &ParamStore<f32>, dst: &mut ParamStore<f32>) -> Result<()> {
    let mut copied = 0usize;
    for (name, tensor) in src.iter() {
        if name.starts_with("mbm.embed") || name.starts_with("mbm.enc") {
            dst.insert(name.clone(), tensor.clone());
            copied += 1;
        }
    }
    if copied == 0 {
        return Err(Error::MissingArtifact(
            "no encoder tensors found; run signal pretraining first".into(),
        ));
    }
    Ok(())
}

fn check_latent_geometry(unet_cfg: &UnetConfig, codec: &Codec) -> Result<()> {
    let (h, w, c) = codec.latent_shape();
    if (h, w, c) != (unet_cfg.latent_h, unet_cfg.latent_w, unet_cfg.latent_c) {
        return Err(Error::config(format!(
            "codec latent {h}x{w}x{c} does not match the denoiser plane {}x{}x{}",
            unet_cfg.latent_h, unet_cfg.latent_w, unet_cfg.latent_c
        )));
    }
    Ok(())
}

/// Draw (t, eps) per sample and assemble the corrupted batch. Timestep
/// and noise come from one per-(epoch, sample) stream, so batch order
/// never changes what a sample sees.
fn corrupt_batch<'a>(
    schedule: &NoiseSchedule,
    latents: impl Iterator<Item = &'a Array2<f32>>,
    count: usize,
    seed: u64,
    label: &str,
    epoch: usize,
    sample_ids: &[usize],
) -> Result<(Array2<f32>, Array2<f32>, Vec<usize>)> {
    let mut x_t_rows: Option<Array2<f32>> = None;
    let mut eps_rows: Option<Array2<f32>> = None;
    let mut ts = Vec::with_capacity(count);
    for (s, x0) in latents.enumerate() {
        let (rows, cols) = x0.dim();
        let mut r = stream(seed, label, &[epoch as u64, sample_ids[s] as u64]);
        let t = r.random_range(1..=schedule.timesteps());
        let eps =
            Array2::from_shape_simple_fn((rows, cols), || f32::standard_normal(&mut r));
        let x_t = forward_sample(schedule, x0, t, &eps)?;
        let xt_all = x_t_rows.get_or_insert_with(|| Array2::zeros((count * rows, cols)));
        xt_all
            .slice_mut(ndarray::s![s * rows..(s + 1) * rows, ..])
            .assign(&x_t);
        let eps_all = eps_rows.get_or_insert_with(|| Array2::zeros((count * rows, cols)));
        eps_all
            .slice_mut(ndarray::s![s * rows..(s + 1) * rows, ..])
            .assign(&eps);
        ts.push(t);
    }
    Ok((x_t_rows.unwrap(), eps_rows.unwrap(), ts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{CodecConfig, CodecKind};
    use crate::cond::CondMode;
    use crate::data::Image;

    fn tiny_mbm() -> MbmConfig {
        MbmConfig {
            patch_size: 4,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            decoder_dim: 8,
            decoder_depth: 1,
            decoder_heads: 2,
            ..MbmConfig::desk()
        }
    }

    fn tiny_opt(epochs: usize) -> OptimizerConfig {
        OptimizerConfig {
            peak_lr: 1e-3,
            weight_decay: 0.01,
            warmup_epochs: 1,
            max_epochs: epochs,
            batch_size: 4,
            grad_clip_norm: 1.0,
        }
    }

    fn tiny_unet() -> UnetConfig {
        UnetConfig {
            latent_h: 4,
            latent_w: 4,
            latent_c: 3,
            ch0: 3,
            ch1: 4,
            time_dim: 8,
            d_tau: 6,
            mode: CondMode::Ct,
        }
    }

    fn tiny_cond() -> CondConfig {
        CondConfig { rows: 2, d_tau: 6, d_t: 8 }
    }

    fn tiny_codec() -> Codec {
        Codec::new(CodecConfig {
            kind: CodecKind::Identity,
            image_h: 4,
            image_w: 4,
            ..CodecConfig::default()
        })
        .unwrap()
    }

    fn test_signals(count: usize, len: usize, seed: u64) -> Vec<Vec<f32>> {
        (0..count)
            .map(|i| {
                let mut r = stream(seed, "loops.test.sig", &[i as u64]);
                (0..len).map(|_| f32::standard_normal(&mut r)).collect()
            })
            .collect()
    }

    fn test_images(count: usize, seed: u64) -> Vec<Image> {
        (0..count)
            .map(|i| {
                let mut r = stream(seed, "loops.test.img", &[i as u64]);
                let mut img = Image::new(4, 4);
                for v in &mut img.data {
                    *v = r.random_range(0.0..1.0);
                }
                img
            })
            .collect()
    }

    fn test_pairs(count: usize, seed: u64) -> Vec<Pair> {
        let signals = test_signals(count, 16, seed);
        let images = test_images(count, seed + 1);
        signals
            .into_iter()
            .zip(images)
            .enumerate()
            .map(|(i, (voxels, image))| Pair {
                fmri: crate::data::FmriSample {
                    subject_id: 0,
                    class_id: Some(i as u32 % 2),
                    voxels,
                },
                image,
            })
            .collect()
    }

    #[test]
    fn stage_a_runs_and_is_deterministic() {
        let signals = test_signals(6, 16, 1);
        let run = || {
            pretrain_stage_a(
                &tiny_mbm(),
                &tiny_opt(3),
                &signals,
                &StageAOptions::default(),
                7,
                None,
                None,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.curve.entries.len(), 3);
        assert!(a.curve.entries.iter().all(|(_, l)| l.is_finite()));
        for (name, t) in a.params.iter() {
            let u = b.params.get(name);
            assert!(
                t.iter().zip(u.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
                "{name} differs between identical runs"
            );
        }
    }

    #[test]
    fn stage_a_resume_matches_uninterrupted() {
        let signals = test_signals(5, 16, 2);
        let full = pretrain_stage_a(
            &tiny_mbm(),
            &tiny_opt(4),
            &signals,
            &StageAOptions::default(),
            11,
            None,
            None,
        )
        .unwrap();
        let half = pretrain_stage_a(
            &tiny_mbm(),
            &tiny_opt(4),
            &signals,
            &StageAOptions::default(),
            11,
            None,
            Some(2),
        )
        .unwrap();
        assert_eq!(half.curve.entries.len(), 2);
        let resumed = pretrain_stage_a(
            &tiny_mbm(),
            &tiny_opt(4),
            &signals,
            &StageAOptions::default(),
            11,
            Some(ResumePoint {
                params: half.params,
                optimizer: half.optimizer,
                next_epoch: 2,
            }),
            None,
        )
        .unwrap();
        for (name, t) in full.params.iter() {
            let u = resumed.params.get(name);
            assert!(
                t.iter().zip(u.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
                "{name} differs after resume"
            );
        }
    }

    #[test]
    fn stage_a_rejects_bad_inputs() {
        let err = pretrain_stage_a(
            &tiny_mbm(),
            &tiny_opt(1),
            &[],
            &StageAOptions::default(),
            1,
            None,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));

        let uneven = vec![vec![0.0f32; 16], vec![0.0f32; 12]];
        assert!(pretrain_stage_a(
            &tiny_mbm(),
            &tiny_opt(1),
            &uneven,
            &StageAOptions::default(),
            1,
            None,
            None
        )
        .is_err());

        let bad_frac = StageAOptions { sparsify_fraction: 1.0, ..Default::default() };
        assert!(pretrain_stage_a(
            &tiny_mbm(),
            &tiny_opt(1),
            &test_signals(2, 16, 3),
            &bad_frac,
            1,
            None,
            None
        )
        .is_err());
    }

    #[test]
    fn base_denoiser_trains_on_latents() {
        let images = test_images(6, 4);
        let diff = DiffusionConfig { timesteps: 10, ..Default::default() };
        let art = train_base_denoiser(
            &tiny_unet(),
            &diff,
            &tiny_opt(2),
            &tiny_codec(),
            &images,
            5,
            None,
            None,
        )
        .unwrap();
        assert_eq!(art.curve.entries.len(), 2);
        assert!(art.curve.entries.iter().all(|(_, l)| l.is_finite()));

        let again = train_base_denoiser(
            &tiny_unet(),
            &diff,
            &tiny_opt(2),
            &tiny_codec(),
            &images,
            5,
            None,
            None,
        )
        .unwrap();
        assert_eq!(art.curve.entries, again.curve.entries);
    }

    #[test]
    fn base_denoiser_rejects_geometry_mismatch() {
        let images = test_images(2, 6);
        let diff = DiffusionConfig { timesteps: 10, ..Default::default() };
        let wrong = UnetConfig { latent_h: 8, latent_w: 8, ..tiny_unet() };
        assert!(train_base_denoiser(
            &wrong,
            &diff,
            &tiny_opt(1),
            &tiny_codec(),
            &images,
            5,
            None,
            None
        )
        .is_err());
    }

    fn finetune_fixture(epochs: usize, seed: u64) -> FinetuneArtifacts {
        let pairs = test_pairs(6, seed);
        let signals: Vec<Vec<f32>> = pairs.iter().map(|p| p.fmri.voxels.clone()).collect();
        let stage_a = pretrain_stage_a(
            &tiny_mbm(),
            &tiny_opt(2),
            &signals,
            &StageAOptions::default(),
            seed,
            None,
            None,
        )
        .unwrap();
        let diff = DiffusionConfig { timesteps: 10, ..Default::default() };
        let images: Vec<Image> = pairs.iter().map(|p| p.image.clone()).collect();
        let base = train_base_denoiser(
            &tiny_unet(),
            &diff,
            &tiny_opt(2),
            &tiny_codec(),
            &images,
            seed,
            None,
            None,
        )
        .unwrap();
        finetune_stage_b(
            &tiny_mbm(),
            &tiny_cond(),
            &tiny_unet(),
            &diff,
            &tiny_opt(epochs),
            &tiny_codec(),
            &stage_a.params,
            &base.params,
            &pairs,
            0.2,
            seed,
            None,
            None,
        )
        .unwrap()
    }

    #[test]
    fn finetune_trains_the_condition_path_and_freezes_the_trunk() {
        let art = finetune_fixture(2, 21);
        assert_eq!(art.curve.entries.len(), 2);
        assert!(!art.freeze.trainable.is_empty());
        assert!(!art.freeze.frozen.is_empty());
        let total = art.freeze.trainable.len() + art.freeze.frozen.len();
        assert_eq!(total, art.params.len());
        for name in &art.freeze.frozen {
            assert!(
                name.starts_with("unet."),
                "unexpected frozen tensor {name}"
            );
            assert!(!name.starts_with("unet.attn"));
        }
        for name in &art.freeze.trainable {
            assert!(
                name.starts_with("mbm.")
                    || name.starts_with("cond.")
                    || name.starts_with("unet.attn"),
                "unexpected trainable tensor {name}"
            );
        }
        let printed = art.freeze.to_string();
        assert!(printed.contains("trainable cond.tau.w"));
        assert!(printed.contains("frozen    unet.conv_in.w"));
    }

    #[test]
    fn finetune_rejects_width_mismatches() {
        let pairs = test_pairs(2, 30);
        let signals: Vec<Vec<f32>> = pairs.iter().map(|p| p.fmri.voxels.clone()).collect();
        let stage_a = pretrain_stage_a(
            &tiny_mbm(),
            &tiny_opt(1),
            &signals,
            &StageAOptions::default(),
            30,
            None,
            None,
        )
        .unwrap();
        let diff = DiffusionConfig { timesteps: 10, ..Default::default() };
        let base_store =
            crate::cond::init_unet_params::<f32>(&tiny_unet(), &mut stream(30, "t", &[]));
        let bad_cond = CondConfig { d_tau: 7, ..tiny_cond() };
        let err = finetune_stage_b(
            &tiny_mbm(),
            &bad_cond,
            &tiny_unet(),
            &diff,
            &tiny_opt(1),
            &tiny_codec(),
            &stage_a.params,
            &base_store,
            &pairs,
            0.0,
            30,
            None,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn finetune_requires_encoder_tensors() {
        let pairs = test_pairs(2, 31);
        let empty = ParamStore::<f32>::new();
        let diff = DiffusionConfig { timesteps: 10, ..Default::default() };
        let base_store =
            crate::cond::init_unet_params::<f32>(&tiny_unet(), &mut stream(31, "t", &[]));
        let err = finetune_stage_b(
            &tiny_mbm(),
            &tiny_cond(),
            &tiny_unet(),
            &diff,
            &tiny_opt(1),
            &tiny_codec(),
            &empty,
            &base_store,
            &pairs,
            0.0,
            31,
            None,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
    }

    #[test]
    fn zero_learning_rate_step_changes_nothing() {
        let mut params = ParamStore::<f32>::new();
        params.insert("a.w", crate::params::normal_init(&mut stream(1, "z", &[]), 3, 3, 1.0));
        let before = params.get("a.w").clone();
        let grads = vec![("a.w".to_string(), Array2::from_elem((3, 3), 0.5f32))];
        let mut opt = AdamW::new();
        opt.step(&mut params, &grads, 0.0, 0.05);
        let after = params.get("a.w");
        assert!(before
            .iter()
            .zip(after.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
