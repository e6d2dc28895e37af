//! Signal preprocessing: wrap-around padding to a common patch-aligned
//! length, global z-scoring fitted on training data, and the two training
//! augmentations (voxel sparsification, image crop-and-resize).

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::Error;
use crate::{data::NormStats, Result};

/// How signals of unequal length are brought to a common patch-aligned one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadStrategy {
    /// Repeat the signal from its start (default).
    Wrap,
    /// Pad with zeros.
    Constant,
    /// Truncate everything to the shortest length, floored to a boundary.
    Cut,
}

/// Extend `input` to `target` values by repeating it from the start:
/// output[i] = input[i mod len]. Never truncates.
pub fn wrap_pad(input: &[f32], target: usize) -> Result<Vec<f32>> {
    if input.is_empty() {
        return Err(Error::Degenerate("wrap_pad: empty input".into()));
    }
    if target < input.len() {
        return Err(Error::shape(format!(
            "wrap_pad: target {} shorter than input {}",
            target,
            input.len()
        )));
    }
    Ok((0..target).map(|i| input[i % input.len()]).collect())
}

/// Wrap-pad up to the next multiple of `patch_size`.
pub fn pad_to_patch_boundary(input: &[f32], patch_size: usize) -> Result<Vec<f32>> {
    if patch_size == 0 {
        return Err(Error::config("pad_to_patch_boundary: patch_size is 0"));
    }
    let target = input.len().div_ceil(patch_size) * patch_size;
    wrap_pad(input, target)
}

/// Bring a set of signals to one shared patch-aligned length.
pub fn unify_lengths(
    signals: &[Vec<f32>],
    patch_size: usize,
    strategy: PadStrategy,
) -> Result<Vec<Vec<f32>>> {
    if patch_size == 0 {
        return Err(Error::config("unify_lengths: patch_size is 0"));
    }
    if signals.is_empty() {
        return Err(Error::Degenerate("unify_lengths: no signals".into()));
    }
    if signals.iter().any(|s| s.is_empty()) {
        return Err(Error::Degenerate("unify_lengths: empty signal".into()));
    }
    match strategy {
        PadStrategy::Wrap => {
            let max = signals.iter().map(|s| s.len()).max().unwrap();
            let target = max.div_ceil(patch_size) * patch_size;
            signals.iter().map(|s| wrap_pad(s, target)).collect()
        }
        PadStrategy::Constant => {
            let max = signals.iter().map(|s| s.len()).max().unwrap();
            let target = max.div_ceil(patch_size) * patch_size;
            Ok(signals
                .iter()
                .map(|s| {
                    let mut out = s.clone();
                    out.resize(target, 0.0);
                    out
                })
                .collect())
        }
        PadStrategy::Cut => {
            let min = signals.iter().map(|s| s.len()).min().unwrap();
            let target = (min / patch_size) * patch_size;
            if target == 0 {
                return Err(Error::Degenerate(format!(
                    "unify_lengths: shortest signal ({min}) is below one patch ({patch_size})"
                )));
            }
            Ok(signals.iter().map(|s| s[..target].to_vec()).collect())
        }
    }
}

/// Fit global mean and standard deviation over every voxel value of the
/// training split. Population std, no epsilon: constant data is an error.
pub fn fit_norm<'a>(train: impl IntoIterator<Item = &'a [f32]>) -> Result<NormStats> {
    let mut n = 0u64;
    let mut sum = 0.0f64;
    let mut sumsq = 0.0f64;
    for signal in train {
        for &v in signal {
            n += 1;
            sum += v as f64;
            sumsq += (v as f64) * (v as f64);
        }
    }
    if n == 0 {
        return Err(Error::Degenerate("fit_norm: no training values".into()));
    }
    let mean = sum / n as f64;
    let var = (sumsq / n as f64 - mean * mean).max(0.0);
    let std = var.sqrt();
    if std == 0.0 || !std.is_finite() {
        return Err(Error::Degenerate(
            "fit_norm: zero or non-finite std, data is constant".into(),
        ));
    }
    Ok(NormStats {
        mean: mean as f32,
        std: std as f32,
    })
}

pub fn apply_norm(voxels: &mut [f32], stats: NormStats) {
    for v in voxels {
        *v = (*v - stats.mean) / stats.std;
    }
}

/// Zero exactly floor(fraction * len) distinct positions, chosen uniformly
/// without replacement. Returns how many were zeroed.
pub fn random_sparsify(voxels: &mut [f32], fraction: f64, rng: &mut ChaCha12Rng) -> Result<usize> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config(format!(
            "random_sparsify: fraction {fraction} outside [0, 1]"
        )));
    }
    let k = (fraction * voxels.len() as f64).floor() as usize;
    for ix in index::sample(rng, voxels.len(), k) {
        voxels[ix] = 0.0;
    }
    Ok(k)
}

/// Random center-biased crop keeping at least (1 - ratio) of each dimension,
/// bilinearly resized back to the original size. ratio 0 is the identity.
pub fn random_crop_image(img: &Image, ratio: f64, rng: &mut ChaCha12Rng) -> Result<Image> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::config(format!(
            "random_crop_image: ratio {ratio} outside [0, 1)"
        )));
    }
    if ratio == 0.0 {
        return Ok(img.clone());
    }
    let mut side = |full: usize| -> usize {
        let min = ((1.0 - ratio) * full as f64).ceil() as usize;
        rng.random_range(min.max(1)..=full)
    };
    let crop_h = side(img.h);
    let crop_w = side(img.w);
    // Sum of two uniforms biases offsets toward the centered position.
    let offset = |max: usize, rng: &mut ChaCha12Rng| -> usize {
        if max == 0 {
            return 0;
        }
        let u = (rng.random::<f64>() + rng.random::<f64>()) / 2.0;
        (max as f64 * u).round() as usize
    };
    let off_y = offset(img.h - crop_h, rng);
    let off_x = offset(img.w - crop_w, rng);
    if crop_h == img.h && crop_w == img.w {
        return Ok(img.clone());
    }

    let mut out = Image::new(img.h, img.w);
    for y in 0..img.h {
        for x in 0..img.w {
            let sy = map_coord(y, img.h, crop_h) + off_y as f64;
            let sx = map_coord(x, img.w, crop_w) + off_x as f64;
            let rgb = bilinear(img, sy, sx);
            out.set_pixel(y, x, rgb);
        }
    }
    Ok(out)
}

/// Align-corners mapping from output coordinate to crop-region coordinate.
fn map_coord(dst: usize, dst_len: usize, src_len: usize) -> f64 {
    if dst_len <= 1 {
        return 0.0;
    }
    dst as f64 * (src_len as f64 - 1.0) / (dst_len as f64 - 1.0)
}

fn bilinear(img: &Image, y: f64, x: f64) -> [f32; 3] {
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(img.h - 1);
    let x1 = (x0 + 1).min(img.w - 1);
    let fy = (y - y0 as f64) as f32;
    let fx = (x - x0 as f64) as f32;
    let mut out = [0.0f32; 3];
    let (p00, p01) = (img.pixel(y0, x0), img.pixel(y0, x1));
    let (p10, p11) = (img.pixel(y1, x0), img.pixel(y1, x1));
    for c in 0..3 {
        let top = p00[c] * (1.0 - fx) + p01[c] * fx;
        let bot = p10[c] * (1.0 - fx) + p11[c] * fx;
        out[c] = top * (1.0 - fy) + bot * fy;
    }
    out
}
