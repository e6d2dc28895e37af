//! The six operator commands. Each one reads its dependencies from the
//! output directory, does its work, and writes artifacts plus a manifest
//! naming everything it touched.

use std::path::{Path, PathBuf};

use mindvis_core::codec::{Codec, CodecKind};
use mindvis_core::config::RunConfig;
use mindvis_core::data::{generate_synthetic_dataset, load_dataset, save_dataset, PairedDataset};
use mindvis_core::eval::MetricReport;
use mindvis_core::pipeline::{
    build_codec, default_axis_values, evaluate_generated, generate_test_samples,
    preprocess_dataset, run_ablation, run_base, run_stage_a, run_stage_b, train_eval_classifier,
    AblationAxis, Manifest, TrainedStack,
};
use mindvis_core::rng::{stream, RngState};
use mindvis_core::train::{load_checkpoint, save_checkpoint, AdamW, Checkpoint, LossCurve};
use mindvis_core::{Error, Result};

use crate::images::{image_grid, write_ppm};

pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn dataset_path(&self) -> PathBuf {
        self.path("dataset.bin")
    }

    fn require(&self, path: &Path, what: &str, produced_by: &str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::MissingArtifact(format!(
                "{what} not found at {}; run `{produced_by}` first",
                path.display()
            )))
        }
    }

    fn ensure_out_dir(&self) -> Result<()> {
        Ok(std::fs::create_dir_all(&self.out)?)
    }

    fn load_prepared_dataset(&self, manifest: &mut Manifest) -> Result<PairedDataset> {
        let path = self.dataset_path();
        self.require(&path, "dataset", "synth-data")?;
        manifest.record_input("dataset", &path)?;
        let mut ds = load_dataset(&path)?;
        preprocess_dataset(&self.cfg, &mut ds)?;
        Ok(ds)
    }

    fn save_stage(
        &self,
        manifest: &mut Manifest,
        name: &str,
        label: &str,
        epoch: usize,
        params: &mindvis_core::params::ParamStore<f32>,
        opt: &AdamW<f32>,
        curve: Option<&LossCurve>,
    ) -> Result<()> {
        let rng = RngState::capture(&stream(self.cfg.seed, label, &[epoch as u64]));
        let ckpt = Checkpoint::from_training_state(self.cfg.hash(), epoch as u32, rng, params, opt);
        let path = self.path(&format!("{name}.ckpt"));
        save_checkpoint(&ckpt, &path)?;
        manifest.record_output(name, &path)?;
        if let Some(c) = curve {
            let curve_path = self.path(&format!("{name}_loss.csv"));
            c.write_csv(&curve_path)?;
            manifest.record_output(&format!("{name}_loss"), &curve_path)?;
        }
        Ok(())
    }

    fn load_stage(&self, manifest: &mut Manifest, name: &str, produced_by: &str) -> Result<Checkpoint> {
        let path = self.path(&format!("{name}.ckpt"));
        self.require(&path, &format!("{name} checkpoint"), produced_by)?;
        manifest.record_input(name, &path)?;
        let ckpt = load_checkpoint(&path)?;
        ckpt.ensure_config(&self.cfg.hash())?;
        Ok(ckpt)
    }

    /// The codec the current config calls for, loading trained weights
    /// from disk instead of refitting.
    fn load_codec(&self, manifest: &mut Manifest) -> Result<Codec> {
        if self.cfg.diffusion.codec.kind == CodecKind::TinyAutoencoder {
            let ckpt = self.load_stage(manifest, "codec", "pretrain")?;
            Codec::with_weights(self.cfg.diffusion.codec.clone(), ckpt.params())
        } else {
            Codec::new(self.cfg.diffusion.codec.clone())
        }
    }

    fn finish(&self, manifest: &Manifest, command: &str) -> Result<()> {
        let path = self.path(&format!("{command}.manifest.json"));
        manifest.write(&path)?;
        println!("wrote {}", path.display());
        Ok(())
    }
}

pub fn synth_data(ctx: &Ctx) -> Result<()> {
    ctx.ensure_out_dir()?;
    let mut manifest = Manifest::new(&ctx.cfg);
    let ds = generate_synthetic_dataset(&ctx.cfg.data.synth, ctx.cfg.seed)?;
    let path = ctx.dataset_path();
    save_dataset(&ds, &path)?;
    manifest.record_output("dataset", &path)?;
    println!(
        "wrote {} ({} train / {} test pairs, {} classes)",
        path.display(),
        ds.train.len(),
        ds.test.len(),
        ds.class_count
    );
    ctx.finish(&manifest, "synth-data")
}

pub fn pretrain(ctx: &Ctx) -> Result<()> {
    ctx.ensure_out_dir()?;
    let mut manifest = Manifest::new(&ctx.cfg);
    let ds = ctx.load_prepared_dataset(&mut manifest)?;

    let a = run_stage_a(&ctx.cfg, &ds)?;
    let epochs_a = ctx.cfg.trainer.stage_a.max_epochs;
    println!(
        "signal pretraining: loss {:.5} -> {:.5} over {epochs_a} epochs",
        a.curve.first().unwrap_or(f64::NAN),
        a.curve.last().unwrap_or(f64::NAN)
    );
    ctx.save_stage(&mut manifest, "stage_a", "stage_a.ckpt", epochs_a, &a.params, &a.optimizer, Some(&a.curve))?;

    let codec = build_codec(&ctx.cfg, &ds)?;
    if let Some(weights) = codec.weights() {
        ctx.save_stage(&mut manifest, "codec", "codec.ckpt", 0, weights, &AdamW::new(), None)?;
    }

    let base = run_base(&ctx.cfg, &codec, &ds)?;
    let epochs_b = ctx.cfg.trainer.base.max_epochs;
    println!(
        "base denoiser: loss {:.5} -> {:.5} over {epochs_b} epochs",
        base.curve.first().unwrap_or(f64::NAN),
        base.curve.last().unwrap_or(f64::NAN)
    );
    ctx.save_stage(&mut manifest, "base", "base.ckpt", epochs_b, &base.params, &base.optimizer, Some(&base.curve))?;

    ctx.finish(&manifest, "pretrain")
}

pub fn finetune(ctx: &Ctx) -> Result<()> {
    ctx.ensure_out_dir()?;
    let mut manifest = Manifest::new(&ctx.cfg);
    let ds = ctx.load_prepared_dataset(&mut manifest)?;
    let stage_a = ctx.load_stage(&mut manifest, "stage_a", "pretrain")?;
    let base = ctx.load_stage(&mut manifest, "base", "pretrain")?;
    let codec = ctx.load_codec(&mut manifest)?;

    let ft = run_stage_b(&ctx.cfg, &codec, &stage_a.params(), &base.params(), &ds)?;
    let epochs = ctx.cfg.trainer.stage_b.max_epochs;
    println!(
        "paired finetuning: loss {:.5} -> {:.5} over {epochs} epochs",
        ft.curve.first().unwrap_or(f64::NAN),
        ft.curve.last().unwrap_or(f64::NAN)
    );
    ctx.save_stage(&mut manifest, "stage_b", "stage_b.ckpt", epochs, &ft.params, &ft.optimizer, Some(&ft.curve))?;

    ctx.finish(&manifest, "finetune")
}

fn load_stack(ctx: &Ctx, manifest: &mut Manifest) -> Result<(PairedDataset, TrainedStack)> {
    let ds = ctx.load_prepared_dataset(manifest)?;
    let stage_b = ctx.load_stage(manifest, "stage_b", "finetune")?;
    let codec = ctx.load_codec(manifest)?;
    let stack = TrainedStack::new(ctx.cfg.clone(), codec, stage_b.params())?;
    Ok((ds, stack))
}

pub fn sample(ctx: &Ctx) -> Result<()> {
    ctx.ensure_out_dir()?;
    let mut manifest = Manifest::new(&ctx.cfg);
    let (ds, stack) = load_stack(ctx, &mut manifest)?;
    let set = generate_test_samples(&stack, &ds)?;

    // One row per test input: ground truth first, then every sampling.
    let rows: Vec<Vec<&mindvis_core::data::Image>> = set
        .truth
        .iter()
        .zip(set.samples.iter())
        .map(|(t, per_input)| std::iter::once(t).chain(per_input.iter()).collect())
        .collect();
    let grid = image_grid(&rows, 2)?;

    let ppm = ctx.path("samples.ppm");
    write_ppm(&grid, &ppm)?;
    manifest.record_output("samples_ppm", &ppm)?;
    println!("wrote {} ({} inputs x {} samplings)", ppm.display(), rows.len(), ctx.cfg.eval.samplings);

    #[cfg(feature = "png")]
    {
        let png = ctx.path("samples.png");
        crate::images::write_png(&grid, &png)?;
        manifest.record_output("samples_png", &png)?;
        println!("wrote {}", png.display());
    }

    ctx.finish(&manifest, "sample")
}

pub fn evaluate(ctx: &Ctx) -> Result<()> {
    ctx.ensure_out_dir()?;
    let mut manifest = Manifest::new(&ctx.cfg);
    let (ds, stack) = load_stack(ctx, &mut manifest)?;
    let classifier = train_eval_classifier(&ctx.cfg, &ds)?;
    let set = generate_test_samples(&stack, &ds)?;
    let report = evaluate_generated(&ctx.cfg, &set, &classifier)?;

    let csv_path = ctx.path("metrics.csv");
    let mut csv = MetricReport::csv_header().to_string();
    csv.push_str(&report.csv_rows(ctx.cfg.seed));
    std::fs::write(&csv_path, csv)?;
    manifest.record_output("metrics_csv", &csv_path)?;

    let json_path = ctx.path("metrics.json");
    std::fs::write(&json_path, report.to_json())?;
    manifest.record_output("metrics_json", &json_path)?;

    println!(
        "{}-way top-{} accuracy {:.4} | fid {:.4} | pixel mse {:.5} | consistency {:.4} +/- {:.4}",
        report.n, report.k, report.success_rate, report.fid, report.mse,
        report.consistency_mean, report.consistency_std
    );
    println!("wrote {} and {}", csv_path.display(), json_path.display());
    ctx.finish(&manifest, "evaluate")
}

fn thread_budget() -> Result<usize> {
    match std::env::var("MINDVIS_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::config(format!("MINDVIS_THREADS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(1),
    }
}

fn parse_values(axis: AblationAxis, raw: Option<&str>) -> Result<Vec<serde_json::Value>> {
    let Some(raw) = raw else {
        return Ok(default_axis_values(axis));
    };
    let mut out = Vec::new();
    for tok in raw.split(',') {
        let tok = tok.trim();
        if tok.is_empty() {
            return Err(Error::config("empty value in --values"));
        }
        // Numbers and booleans parse as themselves, anything else is a
        // plain string (so `--values c,ct` works unquoted).
        out.push(
            serde_json::from_str(tok)
                .unwrap_or_else(|_| serde_json::Value::String(tok.to_string())),
        );
    }
    Ok(out)
}

pub fn ablate(ctx: &Ctx, axis: &str, values: Option<&str>, repeats: usize) -> Result<()> {
    ctx.ensure_out_dir()?;
    let mut manifest = Manifest::new(&ctx.cfg);
    let axis: AblationAxis = axis.parse()?;
    let values = parse_values(axis, values)?;
    let threads = thread_budget()?;

    let table = run_ablation(&ctx.cfg, axis, &values, repeats, threads)?;
    print!("{}", table.render());

    let path = ctx.path("ablation.csv");
    std::fs::write(&path, table.to_csv())?;
    manifest.record_output("ablation_csv", &path)?;
    println!("wrote {}", path.display());
    ctx.finish(&manifest, "ablate")
}
