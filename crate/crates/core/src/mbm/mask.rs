//! Mask planning: which patches are hidden from the encoder.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    /// Uniform choice of `floor(ratio * n)` patches.
    #[default]
    Random,
    /// Patches flagged as primary are masked with exactly twice the
    /// inclusion probability of the rest, keeping the total count fixed.
    Focus,
}

/// A fixed partition of `n` patches into hidden and visible sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
    n: usize,
}

impl MaskPlan {
    pub fn from_masked(mut masked: Vec<usize>, n: usize) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.len() >= n && n > 0 {
            return Err(Error::config("mask plan leaves no visible patches"));
        }
        if let Some(&last) = masked.last() {
            if last >= n {
                return Err(Error::shape(format!("masked index {last} >= {n} patches")));
            }
        }
        let mut is_masked = vec![false; n];
        for &i in &masked {
            is_masked[i] = true;
        }
        let visible = (0..n).filter(|&i| !is_masked[i]).collect();
        Ok(Self { masked, visible, n })
    }

    /// Total number of patches.
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn is_masked(&self, patch: usize) -> bool {
        self.masked.binary_search(&patch).is_ok()
    }
}

/// Choose `floor(ratio * n)` patches to hide. `primary` flags are required
/// by the focus strategy and ignored by the random one.
pub fn make_mask_plan(
    n: usize,
    ratio: f64,
    strategy: MaskStrategy,
    primary: Option<&[bool]>,
    rng: &mut ChaCha12Rng,
) -> Result<MaskPlan> {
    if n == 0 {
        return Err(Error::Degenerate("cannot mask an empty patch list".into()));
    }
    if !ratio.is_finite() || !(0.0..=1.0).contains(&ratio) {
        return Err(Error::config(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let m = (ratio * n as f64).floor() as usize;
    if m >= n {
        return Err(Error::config(format!(
            "mask ratio {ratio} leaves no visible patches at n = {n}"
        )));
    }

    let masked = match strategy {
        MaskStrategy::Random => sample_without_replacement(&(0..n).collect::<Vec<_>>(), m, rng),
        MaskStrategy::Focus => {
            let flags = primary.ok_or_else(|| {
                Error::config("focus masking requires primary-patch flags")
            })?;
            if flags.len() != n {
                return Err(Error::shape(format!(
                    "primary flags length {} != {} patches",
                    flags.len(),
                    n
                )));
            }
            focus_mask(flags, m, rng)
        }
    };
    MaskPlan::from_masked(masked, n)
}

/// Split the patches into primary and other strata, draw a per-call count
/// for the primary stratum by randomized rounding of its expected share,
/// then sample uniformly inside each stratum. The expected share is chosen
/// so a primary patch is hidden with exactly twice the probability of any
/// other patch while the total stays `m`; the rounding keeps that equality
/// in expectation rather than only approximately.
fn focus_mask(flags: &[bool], m: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    let primary: Vec<usize> = (0..flags.len()).filter(|&i| flags[i]).collect();
    let other: Vec<usize> = (0..flags.len()).filter(|&i| !flags[i]).collect();
    let (np, no) = (primary.len(), other.len());
    if np == 0 || no == 0 {
        // One stratum: nothing to bias, fall back to a uniform draw.
        let all: Vec<usize> = (0..flags.len()).collect();
        return sample_without_replacement(&all, m, rng);
    }

    let expected_primary = m as f64 * 2.0 * np as f64 / (2.0 * np as f64 + no as f64);
    let mut count_primary = expected_primary.floor() as usize;
    if rng.random::<f64>() < expected_primary.fract() {
        count_primary += 1;
    }
    // Feasibility clamps; they bind only when one stratum is too small to
    // absorb its share, in which case exact 2x is impossible anyway.
    count_primary = count_primary.min(np).min(m).max(m.saturating_sub(no));
    let count_other = m - count_primary;

    let mut masked = sample_without_replacement(&primary, count_primary, rng);
    masked.extend(sample_without_replacement(&other, count_other, rng));
    masked
}

fn sample_without_replacement(pool: &[usize], k: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    debug_assert!(k <= pool.len());
    rand::seq::index::sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect()
}
