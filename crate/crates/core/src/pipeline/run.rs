//! The end-to-end path from a run config to evaluated samples. Every
//! function here is deterministic in (config, seed); stochastic choices
//! draw from labeled substreams so stages can rerun independently.

use ndarray::Array2;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{from_denoiser_range, Codec, CodecKind, Latent};
use crate::cond::{condition_bundle, CondConfig, ConditionBundle, UnetConfig};
use crate::config::RunConfig;
use crate::data::{
    apply_norm, fit_norm, generate_synthetic_dataset, unify_lengths, Image, PairedDataset,
};
use crate::diffusion::{self, NoiseSchedule, UnetDenoiser};
use crate::eval::{
    fid, nway_topk_accuracy, pixel_mse, sampling_consistency, ClassifierOracle, ConvClassifier,
    MetricReport,
};
use crate::graph::Graph;
use crate::mbm::{encode_all, init_mbm_params, patchify, MaskStrategy};
use crate::params::{Binder, ParamStore};
use crate::rng::stream;
use crate::train::{
    pretrain_stage_a, train_base_denoiser, finetune_stage_b, BaseDenoiserArtifacts,
    FinetuneArtifacts, LossCurve, StageAArtifacts, StageAOptions,
};
use crate::{Error, Result};

/// Epochs and learning rate for fitting the trainable codec. The default
/// codec is the identity map, so this path only runs when a config opts
/// into the autoencoder.
const CODEC_FIT_EPOCHS: usize = 40;
const CODEC_FIT_LR: f64 = 5e-3;

/// Whether the paired stage starts from a pretrained encoder or a fresh
/// random one. The random variant is the "no pretraining" ablation arm;
/// it uses the same initialization stream the pretrained run started
/// from, so the comparison isolates the effect of pretraining itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StageAMode {
    #[default]
    Pretrained,
    RandomInit,
}

/// Bring a freshly generated or loaded dataset to model-ready form:
/// lengths unified to a patch boundary across both splits, then global
/// normalization fitted on the training split only.
pub fn preprocess_dataset(cfg: &RunConfig, ds: &mut PairedDataset) -> Result<()> {
    if ds.norm.is_some() {
        return Err(Error::config("dataset is already normalized"));
    }
    let all: Vec<Vec<f32>> = ds.all_pairs().map(|p| p.fmri.voxels.clone()).collect();
    let unified = unify_lengths(&all, cfg.mbm.patch_size, cfg.data.pad_strategy)?;
    let n_train = ds.train.len();
    for (i, v) in unified.into_iter().enumerate() {
        if i < n_train {
            ds.train[i].fmri.voxels = v;
        } else {
            ds.test[i - n_train].fmri.voxels = v;
        }
    }
    if cfg.data.normalize {
        let stats = fit_norm(ds.train.iter().map(|p| p.fmri.voxels.as_slice()))?;
        for p in ds.train.iter_mut().chain(ds.test.iter_mut()) {
            apply_norm(&mut p.fmri.voxels, stats);
        }
        ds.norm = Some(stats);
    }
    Ok(())
}

/// Generate the synthetic corpus for this config and preprocess it.
pub fn prepare_dataset(cfg: &RunConfig) -> Result<PairedDataset> {
    let mut ds = generate_synthetic_dataset(&cfg.data.synth, cfg.seed)?;
    preprocess_dataset(cfg, &mut ds)?;
    Ok(ds)
}

/// Region labels for the focus mask strategy on synthetic data: the first
/// half of the patch sequence plays the densely sampled region that gets
/// double masking pressure.
pub fn primary_patch_flags(n_patches: usize) -> Vec<bool> {
    let cut = n_patches.div_ceil(2);
    (0..n_patches).map(|i| i < cut).collect()
}

fn stage_a_options(cfg: &RunConfig, voxel_len: usize) -> StageAOptions {
    StageAOptions {
        sparsify_fraction: cfg.trainer.sparsify_fraction,
        primary_patches: match cfg.mbm.mask_strategy {
            MaskStrategy::Focus => Some(primary_patch_flags(voxel_len / cfg.mbm.patch_size)),
            MaskStrategy::Random => None,
        },
    }
}

/// Masked-reconstruction pretraining on the training-split signals.
pub fn run_stage_a(cfg: &RunConfig, ds: &PairedDataset) -> Result<StageAArtifacts> {
    let signals: Vec<Vec<f32>> = ds.train.iter().map(|p| p.fmri.voxels.clone()).collect();
    let options = stage_a_options(cfg, ds.voxel_len());
    pretrain_stage_a(&cfg.mbm, &cfg.trainer.stage_a, &signals, &options, cfg.seed, None, None)
}

/// Encoder weights as they would look before any pretraining step ran.
pub fn random_encoder_params(cfg: &RunConfig) -> ParamStore<f32> {
    init_mbm_params::<f32>(&cfg.mbm, &mut stream(cfg.seed, "stage_a.init", &[]))
}

/// Construct the image codec, fitting it on training images when the
/// configured kind is trainable.
pub fn build_codec(cfg: &RunConfig, ds: &PairedDataset) -> Result<Codec> {
    let mut codec = Codec::new(cfg.diffusion.codec.clone())?;
    if cfg.diffusion.codec.kind == CodecKind::TinyAutoencoder {
        let images: Vec<&Image> = ds.train.iter().map(|p| &p.image).collect();
        codec.fit(&images, CODEC_FIT_EPOCHS, CODEC_FIT_LR, cfg.seed)?;
    }
    Ok(codec)
}

/// Unconditional denoiser training on the training-split images.
pub fn run_base(cfg: &RunConfig, codec: &Codec, ds: &PairedDataset) -> Result<BaseDenoiserArtifacts> {
    let images: Vec<Image> = ds.train.iter().map(|p| p.image.clone()).collect();
    train_base_denoiser(
        &cfg.unet_config(),
        &cfg.diffusion.schedule,
        &cfg.trainer.base,
        codec,
        &images,
        cfg.seed,
        None,
        None,
    )
}

/// Paired finetuning on (signal, image) training pairs.
pub fn run_stage_b(
    cfg: &RunConfig,
    codec: &Codec,
    encoder_params: &ParamStore<f32>,
    base_params: &ParamStore<f32>,
    ds: &PairedDataset,
) -> Result<FinetuneArtifacts> {
    finetune_stage_b(
        &cfg.mbm,
        &cfg.cond_config(),
        &cfg.unet_config(),
        &cfg.diffusion.schedule,
        &cfg.trainer.stage_b,
        codec,
        encoder_params,
        base_params,
        &ds.train,
        cfg.trainer.crop_ratio,
        cfg.seed,
        None,
        None,
    )
}

/// Everything needed to decode images from signals: the finetuned
/// parameter store (encoder, condition path, denoiser), the codec, and
/// the noise schedule, all pinned to one config.
#[derive(Debug, Clone)]
pub struct TrainedStack {
    config: RunConfig,
    codec: Codec,
    params: ParamStore<f32>,
    schedule: NoiseSchedule,
    unet_cfg: UnetConfig,
    cond_cfg: CondConfig,
}

impl TrainedStack {
    pub fn new(config: RunConfig, codec: Codec, params: ParamStore<f32>) -> Result<Self> {
        config.validate()?;
        let (lh, lw, lc) = codec.latent_shape();
        let unet_cfg = config.unet_config();
        if (unet_cfg.latent_h, unet_cfg.latent_w, unet_cfg.latent_c) != (lh, lw, lc) {
            return Err(Error::config(format!(
                "codec latent {lh}x{lw}x{lc} does not match the denoiser geometry {}x{}x{}",
                unet_cfg.latent_h, unet_cfg.latent_w, unet_cfg.latent_c
            )));
        }
        let schedule = NoiseSchedule::linear(&config.diffusion.schedule)?;
        let cond_cfg = config.cond_config();
        Ok(Self { config, codec, params, schedule, unet_cfg, cond_cfg })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    /// Encoded token matrix (n_patches x embed_dim) for one signal.
    pub fn encode_tokens(&self, voxels: &[f32]) -> Result<Array2<f32>> {
        let patches = patchify::<f32>(voxels, self.config.mbm.patch_size)?;
        let mut g = Graph::new();
        let mut bind = Binder::all();
        let pv = g.input(patches);
        let tok = encode_all(&mut g, &self.params, &mut bind, &self.config.mbm, pv, 1)?;
        Ok(g.val(tok).clone())
    }

    /// Condition payloads for one signal.
    pub fn condition(&self, voxels: &[f32]) -> Result<ConditionBundle<f32>> {
        let tokens = self.encode_tokens(voxels)?;
        condition_bundle(&self.cond_cfg, &self.params, &tokens)
    }

    /// Draw one image for a signal: condition, sample the latent with the
    /// configured sampler, and decode.
    pub fn decode(&self, voxels: &[f32], rng: &mut ChaCha12Rng) -> Result<Image> {
        let bundle = self.condition(voxels)?;
        let denoiser = UnetDenoiser::new(&self.unet_cfg, &self.params)?;
        let x0 = diffusion::sample(
            self.config.eval.sampler,
            &self.schedule,
            &denoiser,
            Some(&bundle),
            self.config.eval.steps,
            rng,
        )?;
        let (lh, lw, _) = self.codec.latent_shape();
        let latent = Latent::new(from_denoiser_range(&x0), lh, lw, self.codec.codec_id());
        let mut img = self.codec.decode(&latent)?;
        img.clamp01();
        Ok(img)
    }
}

/// Train the evaluation classifier on the training-split images.
pub fn train_eval_classifier(cfg: &RunConfig, ds: &PairedDataset) -> Result<ConvClassifier> {
    let images: Vec<Image> = ds.train.iter().map(|p| p.image.clone()).collect();
    let labels: Vec<u32> = ds
        .train
        .iter()
        .map(|p| {
            p.fmri
                .class_id
                .ok_or_else(|| Error::config("classifier training needs labeled pairs"))
        })
        .collect::<Result<_>>()?;
    ConvClassifier::train(&images, &labels, ds.class_count as usize, &cfg.eval.classifier, cfg.seed)
}

/// Ground truth plus the images decoded for it, per test input.
#[derive(Debug, Clone)]
pub struct GeneratedSet {
    pub truth: Vec<Image>,
    pub samples: Vec<Vec<Image>>,
}

impl GeneratedSet {
    /// (generated, ground truth) pairs flattened over inputs and
    /// samplings, in input-major order.
    pub fn flat_pairs(&self) -> (Vec<Image>, Vec<Image>) {
        let mut gen = Vec::new();
        let mut truth = Vec::new();
        for (i, per_input) in self.samples.iter().enumerate() {
            for img in per_input {
                gen.push(img.clone());
                truth.push(self.truth[i].clone());
            }
        }
        (gen, truth)
    }
}

/// Decode the configured number of samplings for every test input. The
/// sampling noise stream is keyed on (input, sampling), so any subset
/// can be regenerated independently.
pub fn generate_test_samples(stack: &TrainedStack, ds: &PairedDataset) -> Result<GeneratedSet> {
    if ds.test.is_empty() {
        return Err(Error::Degenerate("evaluation needs a test split".into()));
    }
    let mut truth = Vec::with_capacity(ds.test.len());
    let mut samples = Vec::with_capacity(ds.test.len());
    for (i, pair) in ds.test.iter().enumerate() {
        let mut per_input = Vec::with_capacity(stack.config.eval.samplings);
        for s in 0..stack.config.eval.samplings {
            let mut rng = stream(stack.config.seed, "eval.sample", &[i as u64, s as u64]);
            per_input.push(stack.decode(&pair.fmri.voxels, &mut rng)?);
        }
        truth.push(pair.image.clone());
        samples.push(per_input);
    }
    Ok(GeneratedSet { truth, samples })
}

fn feature_matrix<O: ClassifierOracle + ?Sized>(images: &[&Image], oracle: &O) -> Result<Array2<f64>> {
    let first = oracle.features(images[0])?;
    let width = first.len();
    let mut out = Array2::zeros((images.len(), width));
    for (r, img) in images.iter().enumerate() {
        let f = if r == 0 { first.clone() } else { oracle.features(img)? };
        if f.len() != width {
            return Err(Error::shape("oracle feature width changed between images"));
        }
        for (c, v) in f.into_iter().enumerate() {
            out[[r, c]] = v;
        }
    }
    Ok(out)
}

/// Score a generated set: identification accuracy, distributional
/// distance on oracle features, pixel error, and sampling consistency.
pub fn evaluate_generated<O: ClassifierOracle + ?Sized>(
    cfg: &RunConfig,
    set: &GeneratedSet,
    oracle: &O,
) -> Result<MetricReport> {
    let (gen_flat, truth_flat) = set.flat_pairs();
    let success_rate = nway_topk_accuracy(
        &gen_flat,
        &truth_flat,
        oracle,
        cfg.eval.nway,
        cfg.eval.top_k,
        cfg.eval.trials,
        cfg.seed,
    )?;

    // Distribution sides: each truth image once, every generated sample.
    let truth_refs: Vec<&Image> = set.truth.iter().collect();
    let gen_refs: Vec<&Image> = gen_flat.iter().collect();
    let fid_value = fid(&feature_matrix(&truth_refs, oracle)?, &feature_matrix(&gen_refs, oracle)?)?;

    let mut mse_sum = 0.0;
    for (g, t) in gen_flat.iter().zip(truth_flat.iter()) {
        mse_sum += pixel_mse(g, t)?;
    }
    let mse = mse_sum / gen_flat.len() as f64;

    let (consistency_mean, consistency_std) = sampling_consistency(&set.samples, oracle)?;

    let report = MetricReport {
        n: cfg.eval.nway,
        k: cfg.eval.top_k,
        trials: cfg.eval.trials,
        success_rate,
        fid: fid_value,
        mse,
        consistency_mean,
        consistency_std,
    };
    report.validate()?;
    Ok(report)
}

/// Everything a full run produces.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub stack: TrainedStack,
    pub dataset: PairedDataset,
    /// Absent when the run skipped pretraining.
    pub stage_a_curve: Option<LossCurve>,
    pub base_curve: LossCurve,
    pub stage_b_curve: LossCurve,
    pub report: MetricReport,
    pub generated: GeneratedSet,
}

/// Run the whole system in memory: data, the three stages, the
/// evaluation classifier, sampling, metrics.
pub fn run_pipeline(cfg: &RunConfig, mode: StageAMode) -> Result<PipelineOutput> {
    cfg.validate()?;
    let ds = prepare_dataset(cfg)?;

    let (encoder_params, stage_a_curve) = match mode {
        StageAMode::Pretrained => {
            let a = run_stage_a(cfg, &ds)?;
            (a.params, Some(a.curve))
        }
        StageAMode::RandomInit => (random_encoder_params(cfg), None),
    };

    let codec = build_codec(cfg, &ds)?;
    let base = run_base(cfg, &codec, &ds)?;
    let ft = run_stage_b(cfg, &codec, &encoder_params, &base.params, &ds)?;
    let stack = TrainedStack::new(cfg.clone(), codec, ft.params)?;

    let classifier = train_eval_classifier(cfg, &ds)?;
    let generated = generate_test_samples(&stack, &ds)?;
    let report = evaluate_generated(cfg, &generated, &classifier)?;

    Ok(PipelineOutput {
        stack,
        dataset: ds,
        stage_a_curve,
        base_curve: base.curve,
        stage_b_curve: ft.curve,
        report,
        generated,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::eval::ClassifierTrainConfig;

    pub(crate) fn micro_config() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.seed = 11;
        cfg.data.synth.class_count = 4;
        cfg.data.synth.samples_per_class = 5;
        cfg.data.synth.voxel_count = 64;
        cfg.data.synth.image_size = 16;
        cfg.mbm.patch_size = 8;
        cfg.mbm.embed_dim = 16;
        cfg.mbm.depth = 1;
        cfg.mbm.heads = 2;
        cfg.mbm.decoder_dim = 12;
        cfg.mbm.decoder_depth = 1;
        cfg.mbm.decoder_heads = 2;
        cfg.diffusion.schedule.timesteps = 24;
        cfg.diffusion.unet.latent_h = 16;
        cfg.diffusion.unet.latent_w = 16;
        cfg.diffusion.unet.latent_c = 3;
        cfg.diffusion.unet.ch0 = 6;
        cfg.diffusion.unet.ch1 = 8;
        cfg.diffusion.unet.time_dim = 8;
        cfg.diffusion.unet.d_tau = 10;
        cfg.diffusion.codec.image_h = 16;
        cfg.diffusion.codec.image_w = 16;
        cfg.conditioning.rows = 4;
        cfg.conditioning.d_tau = 10;
        cfg.conditioning.d_t = 8;
        cfg.trainer.stage_a.max_epochs = 2;
        cfg.trainer.stage_a.warmup_epochs = 1;
        cfg.trainer.base.max_epochs = 2;
        cfg.trainer.base.warmup_epochs = 1;
        cfg.trainer.base.batch_size = 8;
        cfg.trainer.stage_b.max_epochs = 2;
        cfg.trainer.stage_b.warmup_epochs = 1;
        cfg.trainer.stage_b.batch_size = 8;
        cfg.eval.classifier = ClassifierTrainConfig {
            epochs: 4,
            warmup_epochs: 1,
            conv1_channels: 4,
            conv2_channels: 6,
            feature_dim: 8,
            ..ClassifierTrainConfig::default()
        };
        cfg.eval.nway = 3;
        cfg.eval.trials = 5;
        cfg.eval.samplings = 2;
        cfg.eval.steps = 4;
        cfg.validate().expect("micro config must be valid");
        cfg
    }

    #[test]
    fn micro_pipeline_end_to_end() {
        let cfg = micro_config();
        let out = run_pipeline(&cfg, StageAMode::Pretrained).unwrap();
        assert!(out.stage_a_curve.is_some());
        assert_eq!(out.generated.truth.len(), out.dataset.test.len());
        assert_eq!(out.generated.samples[0].len(), cfg.eval.samplings);
        assert!(out.report.success_rate >= 0.0 && out.report.success_rate <= 1.0);
        assert!(out.report.fid.is_finite() && out.report.fid >= 0.0);
        let img = &out.generated.samples[0][0];
        assert_eq!((img.h, img.w), (16, 16));
        assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn identical_seeds_reproduce_bitwise() {
        let cfg = micro_config();
        let a = run_pipeline(&cfg, StageAMode::Pretrained).unwrap();
        let b = run_pipeline(&cfg, StageAMode::Pretrained).unwrap();
        assert_eq!(a.report.csv_rows(cfg.seed), b.report.csv_rows(cfg.seed));
        assert_eq!(a.generated.samples, b.generated.samples);
        for (name, t) in a.stack.params().iter() {
            assert_eq!(t, b.stack.params().get(name), "tensor {name} diverged");
        }
    }

    #[test]
    fn random_init_mode_skips_pretraining() {
        let cfg = micro_config();
        let out = run_pipeline(&cfg, StageAMode::RandomInit).unwrap();
        assert!(out.stage_a_curve.is_none());
        assert!(out.report.success_rate.is_finite());
    }

    #[test]
    fn preprocess_rejects_double_normalization() {
        let cfg = micro_config();
        let mut ds = prepare_dataset(&cfg).unwrap();
        assert!(ds.norm.is_some());
        assert!(preprocess_dataset(&cfg, &mut ds).is_err());
    }

    #[test]
    fn primary_flags_cover_first_half() {
        assert_eq!(primary_patch_flags(4), vec![true, true, false, false]);
        assert_eq!(primary_patch_flags(5), vec![true, true, true, false, false]);
    }
}
