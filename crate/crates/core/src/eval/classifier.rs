//! Scoring oracles. `ConvClassifier` is a small trained network whose
//! class probabilities drive identification metrics and whose penultimate
//! activations feed the distributional distance. `RandomOracle` is the
//! no-information baseline the chance-level checks calibrate against.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::Array2;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::{random_crop_image, Image};
use crate::eval::ClassifierOracle;
use crate::graph::{Graph, Real, Var};
use crate::nn::{self, Conv2dSpec};
use crate::params::{Binder, ParamStore};
use crate::rng::stream;
use crate::train::{clip_gradients, ensure_finite_loss, lr_at_step, AdamW, LossCurve};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    /// Crop augmentation strength; 0 disables it.
    pub crop_ratio: f64,
    /// Pixel noise augmentation; keeps the oracle tolerant of the
    /// imperfect images it will be asked to score.
    pub noise_std: f64,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub feature_dim: usize,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            peak_lr: 3e-3,
            warmup_epochs: 3,
            batch_size: 32,
            weight_decay: 1e-4,
            grad_clip_norm: 1.0,
            crop_ratio: 0.15,
            noise_std: 0.05,
            conv1_channels: 8,
            conv2_channels: 16,
            feature_dim: 32,
        }
    }
}

impl ClassifierTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("classifier needs epochs and batch size >= 1"));
        }
        if self.peak_lr <= 0.0 || self.grad_clip_norm <= 0.0 {
            return Err(Error::config("classifier learning rate and clip must be positive"));
        }
        if !(0.0..1.0).contains(&self.crop_ratio) || self.noise_std < 0.0 {
            return Err(Error::config("classifier augmentation knobs out of range"));
        }
        if self.conv1_channels == 0 || self.conv2_channels == 0 || self.feature_dim == 0 {
            return Err(Error::config("classifier widths must be positive"));
        }
        Ok(())
    }
}

/// Feature-map size after the two strided convs, plus the pool grid laid
/// over it: up to 4x4 cells per axis, halved until the axis divides evenly.
fn pool_geometry(h: usize, w: usize) -> (usize, usize, usize, usize) {
    let spec = Conv2dSpec::DOWN_3X3;
    let (h2, w2) = spec.output_size(h, w);
    let (h4, w4) = spec.output_size(h2, w2);
    let pick = |n: usize| {
        if n % 4 == 0 {
            4
        } else if n % 2 == 0 {
            2
        } else {
            1
        }
    };
    (h4, w4, pick(h4), pick(w4))
}

/// Two strided conv stages, a coarse spatial average pool (up to 4x4
/// cells, so shape layout survives pooling), then a feature layer and a
/// class head. Works at any image size divisible by four.
pub struct ConvClassifier {
    params: ParamStore<f32>,
    cfg: ClassifierTrainConfig,
    classes: usize,
    h: usize,
    w: usize,
    curve: LossCurve,
}

impl ConvClassifier {
    pub fn train(
        images: &[Image],
        labels: &[u32],
        classes: usize,
        cfg: &ClassifierTrainConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if classes < 2 {
            return Err(Error::config("classifier needs at least two classes"));
        }
        if images.is_empty() {
            return Err(Error::Degenerate("classifier needs training images".into()));
        }
        if images.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} images against {} labels",
                images.len(),
                labels.len()
            )));
        }
        let (h, w) = (images[0].h, images[0].w);
        if h % 4 != 0 || w % 4 != 0 || h == 0 {
            return Err(Error::shape(format!(
                "classifier image size {h}x{w} must be divisible by 4"
            )));
        }
        if images.iter().any(|i| i.h != h || i.w != w) {
            return Err(Error::shape("classifier images must share one size"));
        }
        if let Some(bad) = labels.iter().find(|l| **l as usize >= classes) {
            return Err(Error::config(format!(
                "label {bad} outside the {classes}-class range"
            )));
        }

        let mut params = ParamStore::new();
        let mut r = stream(seed, "clf.init", &[]);
        nn::init_conv2d(&mut params, &mut r, "clf.conv1", 3, cfg.conv1_channels, 3);
        nn::init_conv2d(&mut params, &mut r, "clf.conv2", cfg.conv1_channels, cfg.conv2_channels, 3);
        let (_, _, gh, gw) = pool_geometry(h, w);
        nn::init_linear(&mut params, &mut r, "clf.fc", gh * gw * cfg.conv2_channels, cfg.feature_dim);
        nn::init_linear(&mut params, &mut r, "clf.head", cfg.feature_dim, classes);

        let mut clf = Self {
            params,
            cfg: cfg.clone(),
            classes,
            h,
            w,
            curve: LossCurve::default(),
        };

        let batch_size = cfg.batch_size.min(images.len()).max(1);
        let batches_per_epoch = images.len().div_ceil(batch_size);
        let total = (cfg.epochs * batches_per_epoch) as u64;
        let warmup = ((cfg.warmup_epochs * batches_per_epoch) as u64).min(total);
        let mut opt = AdamW::new();

        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..images.len()).collect();
            use rand::seq::SliceRandom;
            order.shuffle(&mut stream(seed, "clf.order", &[epoch as u64]));

            let mut epoch_loss = 0.0;
            let mut seen = 0usize;
            for chunk in order.chunks(batch_size) {
                let mut rows = Array2::<f32>::zeros((chunk.len() * h * w, 3));
                let mut idx = Vec::with_capacity(chunk.len());
                for (slot, &i) in chunk.iter().enumerate() {
                    let mut img = images[i].clone();
                    if cfg.crop_ratio > 0.0 {
                        let mut r = stream(seed, "clf.crop", &[epoch as u64, i as u64]);
                        img = random_crop_image(&img, cfg.crop_ratio, &mut r)?;
                    }
                    if cfg.noise_std > 0.0 {
                        let mut r = stream(seed, "clf.noise", &[epoch as u64, i as u64]);
                        for v in &mut img.data {
                            *v = (*v + f32::standard_normal(&mut r) * cfg.noise_std as f32)
                                .clamp(0.0, 1.0);
                        }
                    }
                    rows.slice_mut(ndarray::s![slot * h * w..(slot + 1) * h * w, ..])
                        .assign(&img.to_rows());
                    idx.push((slot * classes + labels[i] as usize) as i64);
                }

                let mut g = Graph::new();
                let mut bind = Binder::all();
                let x = g.input(rows);
                let (_, logits) = clf.forward(&mut g, &mut bind, x, chunk.len());
                let logp = g.log_softmax_rows(logits);
                let picked = g.gather_flat(logp, std::rc::Rc::new(idx), chunk.len(), 1);
                let mean = g.mean_all(picked);
                let loss = g.scale(mean, -1.0);

                let value = g.scalar(loss).to_f64();
                ensure_finite_loss(value, "classifier training")?;
                epoch_loss += value * chunk.len() as f64;
                seen += chunk.len();

                let grads = g.backward(loss);
                let mut named = bind.grads(&grads);
                clip_gradients(&mut named, cfg.grad_clip_norm);
                let lr = lr_at_step(opt.step_count(), warmup, total, cfg.peak_lr);
                opt.step(&mut clf.params, &named, lr, cfg.weight_decay);
            }
            clf.curve.push((epoch + 1) as u32, epoch_loss / seen as f64);
        }
        Ok(clf)
    }

    pub fn curve(&self) -> &LossCurve {
        &self.curve
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.feature_dim
    }

    /// Top-1 accuracy on a labeled set.
    pub fn accuracy(&self, images: &[Image], labels: &[u32]) -> Result<f64> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::shape("accuracy needs matching nonempty images and labels"));
        }
        let mut hits = 0usize;
        for (img, label) in images.iter().zip(labels.iter()) {
            let probs = self.probabilities(img)?;
            if crate::eval::top_class(&probs) == *label as usize {
                hits += 1;
            }
        }
        Ok(hits as f64 / images.len() as f64)
    }

    /// (features, logits) for a batch laid out as stacked pixel rows.
    fn forward(&self, g: &mut Graph<f32>, bind: &mut Binder, x: Var, batch: usize) -> (Var, Var) {
        let spec = Conv2dSpec::DOWN_3X3;
        let idx1 = nn::im2col_indices(batch, self.h, self.w, 3, spec);
        let c1 = nn::conv2d(g, &self.params, bind, "clf.conv1", x, batch, self.h, self.w, spec, &idx1);
        let a1 = g.gelu(c1);

        let (h2, w2) = spec.output_size(self.h, self.w);
        let idx2 = nn::im2col_indices(batch, h2, w2, self.cfg.conv1_channels, spec);
        let c2 = nn::conv2d(g, &self.params, bind, "clf.conv2", a1, batch, h2, w2, spec, &idx2);
        let a2 = g.gelu(c2);

        let (h4, w4, gh, gw) = pool_geometry(self.h, self.w);
        let (cell_h, cell_w) = (h4 / gh, w4 / gw);
        let mut order = Vec::with_capacity(batch * h4 * w4);
        for s in 0..batch {
            for cy in 0..gh {
                for cx in 0..gw {
                    for py in 0..cell_h {
                        for px in 0..cell_w {
                            let row = (s * h4 + cy * cell_h + py) * w4 + cx * cell_w + px;
                            order.push(row as i64);
                        }
                    }
                }
            }
        }
        let cells = g.gather_rows(a2, Rc::new(order));
        let pooled = g.mean_rows_block(cells, cell_h * cell_w);
        let cols = gh * gw * self.cfg.conv2_channels;
        let flat: Vec<i64> = (0..(batch * cols) as i64).collect();
        let grid = g.gather_flat(pooled, Rc::new(flat), batch, cols);
        let fc = nn::linear(g, &self.params, bind, "clf.fc", grid);
        let features = g.gelu(fc);
        let logits = nn::linear(g, &self.params, bind, "clf.head", features);
        (features, logits)
    }

    fn forward_single(&self, image: &Image) -> Result<(Vec<f64>, Vec<f64>)> {
        if image.h != self.h || image.w != self.w {
            return Err(Error::shape(format!(
                "classifier trained at {}x{}, got {}x{}",
                self.h, self.w, image.h, image.w
            )));
        }
        let mut g = Graph::new();
        let mut bind = Binder::all();
        let x = g.input(image.to_rows());
        let (features, logits) = self.forward(&mut g, &mut bind, x, 1);
        let probs = g.softmax_rows(logits);
        let f = g.val(features).row(0).iter().map(|v| (*v).to_f64()).collect();
        let p = g.val(probs).row(0).iter().map(|v| (*v).to_f64()).collect();
        Ok((f, p))
    }
}

impl ClassifierOracle for ConvClassifier {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn probabilities(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self.forward_single(image)?.1)
    }

    fn features(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self.forward_single(image)?.0)
    }
}

/// Uniform-random scores, ignoring the image entirely.
pub struct RandomOracle {
    classes: usize,
    rng: RefCell<ChaCha12Rng>,
}

impl RandomOracle {
    pub fn new(classes: usize, seed: u64) -> Self {
        assert!(classes >= 1, "oracle needs at least one class");
        Self { classes, rng: RefCell::new(stream(seed, "eval.random_oracle", &[])) }
    }
}

impl ClassifierOracle for RandomOracle {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn probabilities(&self, _image: &Image) -> Result<Vec<f64>> {
        let mut rng = self.rng.borrow_mut();
        // Exponential draws normalized: uniform over the simplex, so the
        // argmax lands on each class with equal probability.
        let mut probs: Vec<f64> = (0..self.classes)
            .map(|_| -(1.0 - rand::Rng::random::<f64>(&mut *rng)).ln())
            .collect();
        let z: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= z;
        }
        Ok(probs)
    }

    fn features(&self, _image: &Image) -> Result<Vec<f64>> {
        let mut rng = self.rng.borrow_mut();
        Ok((0..4).map(|_| f64::standard_normal(&mut rng)).collect())
    }
}
