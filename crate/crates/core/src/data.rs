//! Paired signal/image data: a synthetic generator with known class
//! structure, the preprocessing steps applied before patch modeling, and a
//! small binary container format for datasets.

mod format;
mod preprocess;
mod synth;

pub use format::{export_csv, load_dataset, save_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use preprocess::{
    apply_norm, fit_norm, pad_to_patch_boundary, random_crop_image, random_sparsify,
    unify_lengths, wrap_pad, PadStrategy,
};
pub use synth::{generate_synthetic_dataset, render_class_image, MAX_RENDERABLE_CLASSES};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::graph::Real;

/// One recorded signal vector. `class_id` is `None` for unlabeled data.
#[derive(Debug, Clone, PartialEq)]
pub struct FmriSample {
    pub subject_id: u32,
    pub class_id: Option<u32>,
    pub voxels: Vec<f32>,
}

/// RGB image, row-major, interleaved channels, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Self {
        Image { h, w, data: vec![0.0; h * w * 3] }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.w + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// (h*w) x 3 matrix view for the numeric stack.
    pub fn to_rows<T: Real>(&self) -> Array2<T> {
        Array2::from_shape_fn((self.h * self.w, 3), |(p, c)| {
            T::from_f64(self.data[p * 3 + c] as f64)
        })
    }

    pub fn from_rows<T: Real>(h: usize, w: usize, rows: &Array2<T>) -> Self {
        assert_eq!(rows.dim(), (h * w, 3), "from_rows: shape mismatch");
        let mut img = Image::new(h, w);
        for p in 0..h * w {
            for c in 0..3 {
                img.data[p * 3 + c] = rows[[p, c]].to_f64() as f32;
            }
        }
        img
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// A signal paired with the image shown when it was recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub fmri: FmriSample,
    pub image: Image,
}

/// Global normalization constants fitted on the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f32,
    pub std: f32,
}

/// Aligned (signal, image, class) triplets with a train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub train: Vec<Pair>,
    pub test: Vec<Pair>,
    pub class_count: u32,
    pub image_h: usize,
    pub image_w: usize,
    pub norm: Option<NormStats>,
}

impl PairedDataset {
    pub fn voxel_len(&self) -> usize {
        self.train
            .first()
            .or_else(|| self.test.first())
            .map(|p| p.fmri.voxels.len())
            .unwrap_or(0)
    }

    pub fn all_pairs(&self) -> impl Iterator<Item = &Pair> {
        self.train.iter().chain(self.test.iter())
    }
}

/// Recipe for the synthetic corpus.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub class_count: u32,
    pub samples_per_class: u32,
    pub voxel_count: u32,
    pub image_size: u32,
    /// Signal-to-noise ratio: per-voxel noise has standard deviation 1/snr.
    pub snr: f64,
    pub train_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            class_count: 10,
            samples_per_class: 20,
            voxel_count: 256,
            image_size: 32,
            snr: 4.0,
            train_fraction: 0.8,
        }
    }
}
