//! Training machinery: the optimizer, learning-rate schedule, gradient
//! clipping, loss logging, and checkpoint persistence. The stage-specific
//! training loops live in [`loops`].

mod checkpoint;
mod loops;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use loops::{
    finetune_stage_b, pretrain_stage_a, train_base_denoiser, BaseDenoiserArtifacts,
    FinetuneArtifacts, FreezePolicy, FreezeReport, ResumePoint, StageAArtifacts, StageAOptions,
};
pub use optim::{clip_gradients, AdamW};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            peak_lr: 2.5e-4,
            weight_decay: 0.05,
            warmup_epochs: 40,
            max_epochs: 500,
            batch_size: 500,
            grad_clip_norm: 0.8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.peak_lr.is_finite() || self.peak_lr <= 0.0 {
            return Err(Error::config("peak_lr must be positive"));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if self.warmup_epochs > self.max_epochs {
            return Err(Error::config(format!(
                "warmup_epochs {} exceeds max_epochs {}",
                self.warmup_epochs, self.max_epochs
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !self.grad_clip_norm.is_finite() || self.grad_clip_norm <= 0.0 {
            return Err(Error::config("grad_clip_norm must be positive"));
        }
        Ok(())
    }
}

/// Linear warm-up to `peak` over `warmup_steps`, then half-cosine decay
/// reaching exactly zero on the last step. Steps are zero-indexed.
pub fn lr_at_step(step: u64, warmup_steps: u64, total_steps: u64, peak: f64) -> f64 {
    debug_assert!(warmup_steps <= total_steps && total_steps > 0);
    if step + 1 < warmup_steps {
        return peak * (step + 1) as f64 / warmup_steps as f64;
    }
    if step + 1 == warmup_steps {
        return peak;
    }
    if step + 1 >= total_steps {
        return 0.0;
    }
    let progress = (step + 1 - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Per-epoch loss record written alongside checkpoints.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct LossCurve {
    pub entries: Vec<(u32, f64)>,
}

impl LossCurve {
    pub fn push(&mut self, epoch: u32, loss: f64) {
        self.entries.push((epoch, loss));
    }

    pub fn first(&self) -> Option<f64> {
        self.entries.first().map(|&(_, l)| l)
    }

    pub fn last(&self) -> Option<f64> {
        self.entries.last().map(|&(_, l)| l)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss\n");
        for (e, l) in &self.entries {
            out.push_str(&format!("{e},{l:.10}\n"));
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Training aborts rather than continuing from a poisoned state.
pub fn ensure_finite_loss(loss: f64, context: &str) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numeric(format!(
            "{context}: loss became {loss}; training aborted"
        )))
    }
}
