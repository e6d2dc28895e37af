//! Run configuration. One JSON document drives every stage; unknown keys
//! are rejected, absent keys take the desk-scale defaults, and the hash of
//! the fully resolved document is stamped into artifacts so checkpoints
//! and manifests can refuse mismatched configs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::CodecConfig;
use crate::cond::{CondConfig, CondMode, UnetConfig};
use crate::data::{PadStrategy, SynthSpec};
use crate::diffusion::{DiffusionConfig, SamplerKind};
use crate::eval::ClassifierTrainConfig;
use crate::mbm::MbmConfig;
use crate::train::OptimizerConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub mbm: MbmConfig,
    pub diffusion: DiffusionSection,
    pub conditioning: ConditioningSection,
    pub trainer: TrainerSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub synth: SynthSpec,
    /// How signals of uneven length are brought to a patch boundary.
    pub pad_strategy: PadStrategy,
    /// Standardize voxels with statistics fitted on the training split.
    pub normalize: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            pad_strategy: PadStrategy::Wrap,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    pub schedule: DiffusionConfig,
    /// The conditioning mode is not set here; it comes from the
    /// conditioning section.
    pub unet: UnetConfig,
    pub codec: CodecConfig,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            schedule: DiffusionConfig::default(),
            unet: UnetConfig::desk(),
            codec: CodecConfig::default(),
        }
    }
}

/// How encoder tokens become the diffusion model's two payloads, and
/// which of them the denoiser consumes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ConditioningSection {
    pub rows: usize,
    pub d_tau: usize,
    pub d_t: usize,
    pub mode: CondMode,
}

impl Default for ConditioningSection {
    fn default() -> Self {
        let c = CondConfig::desk();
        Self { rows: c.rows, d_tau: c.d_tau, d_t: c.d_t, mode: CondMode::Ct }
    }
}

impl ConditioningSection {
    pub fn cond_config(&self) -> CondConfig {
        CondConfig { rows: self.rows, d_tau: self.d_tau, d_t: self.d_t }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub stage_a: OptimizerConfig,
    pub base: OptimizerConfig,
    pub stage_b: OptimizerConfig,
    /// Fraction of voxels zeroed per sample during pretraining.
    pub sparsify_fraction: f64,
    /// Image crop augmentation during the paired stage.
    pub crop_ratio: f64,
}

impl Default for TrainerSection {
    fn default() -> Self {
        Self {
            stage_a: OptimizerConfig {
                peak_lr: 2.5e-4,
                warmup_epochs: 20,
                max_epochs: 200,
                batch_size: 64,
                ..OptimizerConfig::default()
            },
            base: OptimizerConfig {
                peak_lr: 1e-3,
                warmup_epochs: 10,
                max_epochs: 120,
                batch_size: 16,
                ..OptimizerConfig::default()
            },
            stage_b: OptimizerConfig {
                peak_lr: 5.3e-5,
                warmup_epochs: 10,
                max_epochs: 120,
                batch_size: 16,
                ..OptimizerConfig::default()
            },
            sparsify_fraction: 0.2,
            crop_ratio: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub classifier: ClassifierTrainConfig,
    /// Candidate-set size for identification.
    pub nway: usize,
    pub top_k: usize,
    /// Identification trials per test pair.
    pub trials: usize,
    /// Images generated per test input for the consistency protocol.
    pub samplings: usize,
    pub sampler: SamplerKind,
    /// Denoising steps for the multistep sampler.
    pub steps: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            classifier: ClassifierTrainConfig::default(),
            nway: 10,
            top_k: 1,
            trials: 25,
            samplings: 5,
            sampler: SamplerKind::Plms,
            steps: 50,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Defaults sized so the whole pipeline trains on one CPU core.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            data: DataSection::default(),
            mbm: MbmConfig::desk(),
            diffusion: DiffusionSection::default(),
            conditioning: ConditioningSection::default(),
            trainer: TrainerSection::default(),
            eval: EvalSection::default(),
        }
    }

    /// The denoiser config with the conditioning mode injected.
    pub fn unet_config(&self) -> UnetConfig {
        let mut cfg = self.diffusion.unet.clone();
        cfg.mode = self.conditioning.mode;
        cfg
    }

    pub fn cond_config(&self) -> CondConfig {
        self.conditioning.cond_config()
    }

    pub fn validate(&self) -> Result<()> {
        self.mbm.validate()?;
        self.diffusion.schedule.validate()?;
        self.unet_config().validate()?;
        self.diffusion.codec.validate()?;
        self.cond_config().validate()?;
        self.trainer.stage_a.validate()?;
        self.trainer.base.validate()?;
        self.trainer.stage_b.validate()?;
        self.eval.classifier.validate()?;

        if self.data.synth.class_count == 0 || self.data.synth.samples_per_class == 0 {
            return Err(Error::config("dataset needs classes and samples"));
        }
        if self.data.synth.voxel_count as usize % self.mbm.patch_size != 0 {
            return Err(Error::config(format!(
                "voxel count {} is not a multiple of patch size {}",
                self.data.synth.voxel_count, self.mbm.patch_size
            )));
        }
        if self.data.synth.image_size as usize != self.diffusion.codec.image_h
            || self.data.synth.image_size as usize != self.diffusion.codec.image_w
        {
            return Err(Error::config(format!(
                "dataset renders {0}x{0} images but the codec expects {1}x{2}",
                self.data.synth.image_size,
                self.diffusion.codec.image_h,
                self.diffusion.codec.image_w
            )));
        }
        if self.conditioning.d_tau != self.diffusion.unet.d_tau {
            return Err(Error::config(format!(
                "conditioning d_tau {} != denoiser d_tau {}",
                self.conditioning.d_tau, self.diffusion.unet.d_tau
            )));
        }
        if self.conditioning.d_t != self.diffusion.unet.time_dim {
            return Err(Error::config(format!(
                "conditioning d_t {} != denoiser time width {}",
                self.conditioning.d_t, self.diffusion.unet.time_dim
            )));
        }
        if !(0.0..1.0).contains(&self.trainer.sparsify_fraction) {
            return Err(Error::config("sparsify_fraction outside [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.trainer.crop_ratio) {
            return Err(Error::config("crop_ratio outside [0, 1)"));
        }
        if self.eval.nway == 0 || self.eval.nway > self.data.synth.class_count as usize {
            return Err(Error::config(format!(
                "{}-way identification over {} classes",
                self.eval.nway, self.data.synth.class_count
            )));
        }
        if self.eval.top_k == 0 || self.eval.top_k > self.eval.nway {
            return Err(Error::config("top_k outside [1, nway]"));
        }
        if self.eval.trials == 0 {
            return Err(Error::config("evaluation needs at least one trial"));
        }
        if self.eval.samplings < 2 {
            return Err(Error::config("consistency needs at least two samplings"));
        }
        if self.eval.steps == 0 || self.eval.steps > self.diffusion.schedule.timesteps {
            return Err(Error::config(format!(
                "{} sampling steps against a {}-step schedule",
                self.eval.steps, self.diffusion.schedule.timesteps
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// The fully resolved document, defaults included. Manifests embed
    /// this, so a run is reproducible from its manifest alone.
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the model identity: the resolved document minus the seed
    /// and the eval section. Those are run parameters, so checkpoints
    /// stay loadable when a later command reruns with a different seed,
    /// sampler, or step count.
    pub fn hash(&self) -> [u8; 32] {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        let obj = doc.as_object_mut().expect("config is an object");
        obj.remove("seed");
        obj.remove("eval");
        let mut h = Sha256::new();
        h.update(serde_json::to_string(&doc).expect("config serializes"));
        h.finalize().into()
    }

    pub fn hash_hex(&self) -> String {
        self.hash().iter().map(|b| format!("{b:02x}")).collect()
    }
}
