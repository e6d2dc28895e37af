//! One-config orchestration of the whole system: dataset preparation, the
//! three training stages, sampling, metric evaluation, run manifests, and
//! the ablation grid runner.

mod ablate;
mod manifest;
mod run;

pub use ablate::{
    apply_point, default_axis_values, run_ablation, AblationAxis, AblationTable, CellOutcome,
};
pub use manifest::{sha256_file, Manifest};
pub use run::{
    build_codec, evaluate_generated, generate_test_samples, prepare_dataset, preprocess_dataset,
    primary_patch_flags, random_encoder_params, run_base, run_pipeline, run_stage_a, run_stage_b,
    train_eval_classifier, GeneratedSet, PipelineOutput, StageAMode, TrainedStack,
};
