//! Reconstruction quality metrics: n-way top-k identification against a
//! classifier oracle, Gaussian Fréchet distance over feature sets, pixel
//! error, and the stability of repeated samplings for one input.

mod classifier;
mod metrics;

pub use classifier::{ClassifierTrainConfig, ConvClassifier, RandomOracle};
pub use metrics::{fid, nway_topk_accuracy, pixel_mse, sampling_consistency, sqrtm_trace};

use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::{Error, Result};

/// Image -> probability vector over the class set, plus a feature
/// embedding for distributional metrics.
pub trait ClassifierOracle {
    fn num_classes(&self) -> usize;

    /// Probabilities over classes: nonnegative, summing to 1 within 1e-6.
    fn probabilities(&self, image: &Image) -> Result<Vec<f64>>;

    /// Feature vector for the Fréchet metric; any fixed-width embedding.
    fn features(&self, image: &Image) -> Result<Vec<f64>>;
}

pub(crate) fn checked_probabilities<O: ClassifierOracle + ?Sized>(
    oracle: &O,
    image: &Image,
) -> Result<Vec<f64>> {
    let probs = oracle.probabilities(image)?;
    if probs.len() != oracle.num_classes() {
        return Err(Error::shape(format!(
            "oracle returned {} probabilities for {} classes",
            probs.len(),
            oracle.num_classes()
        )));
    }
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Numeric(format!(
            "oracle probabilities invalid (sum {sum})"
        )));
    }
    Ok(probs)
}

/// Index of the largest probability; ties go to the lowest class.
pub(crate) fn top_class(probs: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, p) in probs.iter().enumerate().skip(1) {
        if *p > probs[best] {
            best = i;
        }
    }
    best
}

/// One evaluation's headline numbers.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub n: usize,
    pub k: usize,
    pub trials: usize,
    pub success_rate: f64,
    pub fid: f64,
    pub mse: f64,
    pub consistency_mean: f64,
    pub consistency_std: f64,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::config("metric report needs at least one trial"));
        }
        if !(0.0..=1.0).contains(&self.success_rate) {
            return Err(Error::Numeric(format!(
                "success rate {} outside [0, 1]",
                self.success_rate
            )));
        }
        Ok(())
    }

    pub fn csv_header() -> &'static str {
        "metric,n,k,trials,value,seed\n"
    }

    /// One row per metric, matching [`MetricReport::csv_header`].
    pub fn csv_rows(&self, seed: u64) -> String {
        let mut out = String::new();
        let mut row = |metric: &str, value: f64| {
            out.push_str(&format!(
                "{metric},{},{},{},{value:.10},{seed}\n",
                self.n, self.k, self.trials
            ));
        };
        row("nway_topk", self.success_rate);
        row("fid", self.fid);
        row("pixel_mse", self.mse);
        row("consistency_mean", self.consistency_mean);
        row("consistency_std", self.consistency_std);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
