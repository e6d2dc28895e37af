//! Masked modeling of 1D voxel signals.
//!
//! A signal vector is cut into fixed-size patches, each patch is embedded
//! into a token of much higher dimension than the patch itself, a random
//! subset of tokens is hidden, and an asymmetric encoder/decoder pair is
//! trained to predict the hidden patch values. The large embed-to-patch
//! ratio gives every patch far more representation capacity than masked
//! image modeling affords a pixel patch, which is what lets a small,
//! noisy signal corpus support aggressive masking.

mod mask;
mod model;

pub use mask::{make_mask_plan, MaskPlan, MaskStrategy};
pub use model::{encode_all, init_mbm_params, mbm_forward, patchify, unpatchify, MbmBatch, MbmOutput};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MbmConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: f64,
    pub mask_ratio: f64,
    pub mask_strategy: MaskStrategy,
    /// Score the reconstruction on every patch instead of only hidden ones.
    pub loss_on_all_patches: bool,
}

impl Default for MbmConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl MbmConfig {
    /// Small preset sized for single-core runs on synthetic data.
    pub fn desk() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            decoder_dim: 32,
            decoder_depth: 2,
            decoder_heads: 4,
            mlp_ratio: 1.0,
            mask_ratio: 0.75,
            mask_strategy: MaskStrategy::Random,
            loss_on_all_patches: false,
        }
    }

    /// Published-scale hyperparameters. Far too large to train here; kept so
    /// configs can express the reference setup and capacity numbers.
    pub fn full_scale() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 1024,
            depth: 24,
            heads: 16,
            decoder_dim: 512,
            decoder_depth: 8,
            decoder_heads: 16,
            mlp_ratio: 1.0,
            mask_ratio: 0.75,
            mask_strategy: MaskStrategy::Random,
            loss_on_all_patches: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::config("patch_size must be positive"));
        }
        if self.embed_dim == 0 || self.decoder_dim == 0 {
            return Err(Error::config("embedding dims must be positive"));
        }
        if self.depth == 0 || self.decoder_depth == 0 {
            return Err(Error::config("depths must be positive"));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 {
            return Err(Error::config(format!(
                "decoder_dim {} not divisible by decoder_heads {}",
                self.decoder_dim, self.decoder_heads
            )));
        }
        if !self.mlp_ratio.is_finite() || self.mlp_ratio <= 0.0 {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        if !self.mask_ratio.is_finite() || !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config(format!(
                "mask_ratio {} outside [0, 1)",
                self.mask_ratio
            )));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self, dim: usize) -> usize {
        ((dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    pub fn capacity(&self) -> CapacityReport {
        capacity_report(self.embed_dim, self.patch_size)
    }
}

/// Representation capacity of one patch: token dimension over raw patch
/// dimension. Above 1 the embedding widens information per patch; masked
/// image modeling at 768-dim tokens over 16x16x3 pixel patches sits at 1.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct CapacityReport {
    pub embed_dim: usize,
    pub patch_dim: usize,
    pub ratio: f64,
}

pub fn capacity_report(embed_dim: usize, patch_dim: usize) -> CapacityReport {
    CapacityReport {
        embed_dim,
        patch_dim,
        ratio: embed_dim as f64 / patch_dim as f64,
    }
}

/// Pearson correlation between the true signal and its reconstruction at
/// the positions the model never saw.
pub fn recovery_correlation(
    original: &[f32],
    reconstructed: &[f32],
    plan: &MaskPlan,
    patch_size: usize,
) -> Result<f64> {
    if original.len() != reconstructed.len() {
        return Err(Error::shape(format!(
            "signal lengths differ: {} vs {}",
            original.len(),
            reconstructed.len()
        )));
    }
    if original.len() != plan.len() * patch_size {
        return Err(Error::shape(format!(
            "signal length {} != {} patches x {}",
            original.len(),
            plan.len(),
            patch_size
        )));
    }
    let mut a = Vec::with_capacity(plan.masked.len() * patch_size);
    let mut b = Vec::with_capacity(plan.masked.len() * patch_size);
    for &p in &plan.masked {
        for j in 0..patch_size {
            a.push(original[p * patch_size + j] as f64);
            b.push(reconstructed[p * patch_size + j] as f64);
        }
    }
    crate::stats::pearson(&a, &b)
}
