//! Ablation grids: vary one axis of a base config, repeat each point over
//! consecutive seeds, and tabulate identification accuracy. A failing
//! point is recorded and the rest of the grid still runs.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::stats;
use crate::{Error, Result};

use super::run::{run_pipeline, StageAMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    EmbedDim,
    MaskRatio,
    PatchSize,
    EncoderDepth,
    MaskStrategy,
    CondMode,
    PadStrategy,
    CropRatio,
    StageA,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 9] = [
        AblationAxis::EmbedDim,
        AblationAxis::MaskRatio,
        AblationAxis::PatchSize,
        AblationAxis::EncoderDepth,
        AblationAxis::MaskStrategy,
        AblationAxis::CondMode,
        AblationAxis::PadStrategy,
        AblationAxis::CropRatio,
        AblationAxis::StageA,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::EmbedDim => "embed_dim",
            AblationAxis::MaskRatio => "mask_ratio",
            AblationAxis::PatchSize => "patch_size",
            AblationAxis::EncoderDepth => "encoder_depth",
            AblationAxis::MaskStrategy => "mask_strategy",
            AblationAxis::CondMode => "cond_mode",
            AblationAxis::PadStrategy => "pad_strategy",
            AblationAxis::CropRatio => "crop_ratio",
            AblationAxis::StageA => "stage_a",
        }
    }
}

impl std::fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .iter()
            .copied()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = AblationAxis::ALL.iter().map(|a| a.name()).collect();
                Error::config(format!("unknown axis {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// The sweep each axis runs when the caller does not pick values.
pub fn default_axis_values(axis: AblationAxis) -> Vec<Value> {
    use serde_json::json;
    match axis {
        AblationAxis::EmbedDim => vec![json!(32), json!(64), json!(128)],
        AblationAxis::MaskRatio => {
            vec![json!(0.35), json!(0.45), json!(0.55), json!(0.65), json!(0.75), json!(0.85)]
        }
        AblationAxis::PatchSize => vec![json!(8), json!(16), json!(32)],
        AblationAxis::EncoderDepth => vec![json!(1), json!(2), json!(4)],
        AblationAxis::MaskStrategy => vec![json!("random"), json!("focus")],
        AblationAxis::CondMode => vec![json!("c"), json!("ct")],
        AblationAxis::PadStrategy => vec![json!("wrap"), json!("constant"), json!("cut")],
        AblationAxis::CropRatio => vec![json!(0.0), json!(0.2), json!(0.4)],
        AblationAxis::StageA => vec![json!("on"), json!("off")],
    }
}

fn as_usize(axis: AblationAxis, value: &Value) -> Result<usize> {
    value
        .as_u64()
        .map(|v| v as usize)
        .ok_or_else(|| Error::config(format!("{axis} expects a positive integer, got {value}")))
}

fn as_float(axis: AblationAxis, value: &Value) -> Result<f64> {
    value
        .as_f64()
        .ok_or_else(|| Error::config(format!("{axis} expects a number, got {value}")))
}

/// Produce the config (and pretraining mode) for one grid point. The
/// returned config is validated, so impossible combinations fail here,
/// before any training starts.
pub fn apply_point(
    base: &RunConfig,
    axis: AblationAxis,
    value: &Value,
) -> Result<(RunConfig, StageAMode)> {
    let mut cfg = base.clone();
    let mut mode = StageAMode::Pretrained;
    match axis {
        AblationAxis::EmbedDim => cfg.mbm.embed_dim = as_usize(axis, value)?,
        AblationAxis::MaskRatio => cfg.mbm.mask_ratio = as_float(axis, value)?,
        AblationAxis::PatchSize => cfg.mbm.patch_size = as_usize(axis, value)?,
        AblationAxis::EncoderDepth => cfg.mbm.depth = as_usize(axis, value)?,
        AblationAxis::MaskStrategy => {
            cfg.mbm.mask_strategy = serde_json::from_value(value.clone())
                .map_err(|e| Error::config(format!("{axis}: {e}")))?;
        }
        AblationAxis::CondMode => {
            cfg.conditioning.mode = serde_json::from_value(value.clone())
                .map_err(|e| Error::config(format!("{axis}: {e}")))?;
        }
        AblationAxis::PadStrategy => {
            cfg.data.pad_strategy = serde_json::from_value(value.clone())
                .map_err(|e| Error::config(format!("{axis}: {e}")))?;
        }
        AblationAxis::CropRatio => cfg.trainer.crop_ratio = as_float(axis, value)?,
        AblationAxis::StageA => {
            mode = match value {
                Value::Bool(true) => StageAMode::Pretrained,
                Value::Bool(false) => StageAMode::RandomInit,
                Value::String(s) if s == "on" => StageAMode::Pretrained,
                Value::String(s) if s == "off" => StageAMode::RandomInit,
                other => {
                    return Err(Error::config(format!(
                        "{axis} expects on/off or a boolean, got {other}"
                    )))
                }
            };
        }
    }
    cfg.validate()?;
    Ok((cfg, mode))
}

/// One grid point's outcomes over its repeats.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CellOutcome {
    pub value: Value,
    /// Identification accuracy per successful repeat, in seed order.
    pub accuracies: Vec<f64>,
    /// Error messages of failed repeats.
    pub failures: Vec<String>,
}

impl CellOutcome {
    pub fn mean(&self) -> Option<f64> {
        if self.accuracies.is_empty() {
            None
        } else {
            Some(stats::mean(&self.accuracies))
        }
    }

    pub fn std(&self) -> Option<f64> {
        match self.accuracies.len() {
            0 => None,
            1 => Some(0.0),
            _ => Some(stats::sample_std(&self.accuracies)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub repeats: usize,
    pub cells: Vec<CellOutcome>,
}

impl AblationTable {
    /// CSV with one row per grid point: mean and spread of accuracy, how
    /// many repeats survived, and a two-sided Welch p-value against the
    /// first row (empty where it cannot be computed).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis,value,repeats_ok,repeats_failed,mean,std,p_vs_first\n");
        let first = &self.cells[0];
        for (i, cell) in self.cells.iter().enumerate() {
            let mean = cell.mean().map(|v| format!("{v:.6}")).unwrap_or_default();
            let std = cell.std().map(|v| format!("{v:.6}")).unwrap_or_default();
            let p = if i == 0 {
                String::new()
            } else {
                welch_p(&first.accuracies, &cell.accuracies)
                    .map(|v| format!("{v:.6}"))
                    .unwrap_or_default()
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.axis,
                value_label(&cell.value),
                cell.accuracies.len(),
                cell.failures.len(),
                mean,
                std,
                p
            ));
        }
        out
    }

    /// Plain-text table for terminal output.
    pub fn render(&self) -> String {
        let mut out = format!("ablation over {} ({} repeats per point)\n", self.axis, self.repeats);
        for cell in &self.cells {
            match cell.mean() {
                Some(m) => {
                    out.push_str(&format!(
                        "  {:>12}  accuracy {:.4} +/- {:.4}  ({} ok",
                        value_label(&cell.value),
                        m,
                        cell.std().unwrap_or(0.0),
                        cell.accuracies.len()
                    ));
                    if !cell.failures.is_empty() {
                        out.push_str(&format!(", {} failed", cell.failures.len()));
                    }
                    out.push_str(")\n");
                }
                None => {
                    out.push_str(&format!(
                        "  {:>12}  all {} repeats failed: {}\n",
                        value_label(&cell.value),
                        cell.failures.len(),
                        cell.failures.first().map(String::as_str).unwrap_or("?")
                    ));
                }
            }
        }
        out
    }
}

fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn welch_p(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    stats::welch_t_test(a, b).ok().map(|t| t.p)
}

/// Run the grid: `values` points, each repeated with seeds
/// base_seed..base_seed+repeats. Repeat 0 of any point is exactly the
/// pipeline run a standalone invocation of that config would produce.
/// Failures land in the point's outcome instead of aborting the sweep.
pub fn run_ablation(
    base: &RunConfig,
    axis: AblationAxis,
    values: &[Value],
    repeats: usize,
    threads: usize,
) -> Result<AblationTable> {
    if values.is_empty() {
        return Err(Error::config("ablation needs at least one value"));
    }
    if repeats == 0 {
        return Err(Error::config("ablation needs at least one repeat"));
    }

    struct Job {
        cell: usize,
        value: Value,
        repeat: usize,
    }
    let jobs: Vec<Job> = values
        .iter()
        .enumerate()
        .flat_map(|(cell, value)| {
            (0..repeats).map(move |repeat| Job { cell, value: value.clone(), repeat })
        })
        .collect();

    let results: Vec<Mutex<Option<std::result::Result<f64, String>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = threads.clamp(1, jobs.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::Relaxed);
                if j >= jobs.len() {
                    break;
                }
                let job = &jobs[j];
                let outcome = apply_point(base, axis, &job.value).and_then(|(mut cfg, mode)| {
                    cfg.seed = base.seed + job.repeat as u64;
                    run_pipeline(&cfg, mode).map(|out| out.report.success_rate)
                });
                *results[j].lock().unwrap() = Some(outcome.map_err(|e| e.to_string()));
            });
        }
    });

    let mut cells: Vec<CellOutcome> = values
        .iter()
        .map(|v| CellOutcome { value: v.clone(), accuracies: Vec::new(), failures: Vec::new() })
        .collect();
    for (j, slot) in results.into_iter().enumerate() {
        let outcome = slot.into_inner().unwrap().expect("every job ran");
        match outcome {
            Ok(acc) => cells[jobs[j].cell].accuracies.push(acc),
            Err(msg) => cells[jobs[j].cell].failures.push(msg),
        }
    }
    Ok(AblationTable { axis, repeats, cells })
}
