//! Synthetic paired corpus. Each class owns a fixed sparse activation
//! template over voxels and a procedural image (distinct shape and hue);
//! samples are the template plus Gaussian noise scaled by 1/snr.

use rand::seq::index;

use crate::data::{FmriSample, Image, Pair, PairedDataset, SynthSpec};
use crate::error::Error;
use crate::graph::Real;
use crate::rng::stream;
use crate::Result;

const SHAPES: usize = 6;
const HUES: usize = 8;
/// Beyond this the shape/hue grid stops producing distinguishable renders.
pub const MAX_RENDERABLE_CLASSES: u32 = (SHAPES * HUES) as u32;

/// Fraction of voxels carrying each class template.
const TEMPLATE_SUPPORT: f64 = 0.25;

pub fn generate_synthetic_dataset(spec: &SynthSpec, seed: u64) -> Result<PairedDataset> {
    if spec.class_count == 0 {
        return Err(Error::config("synth: class_count must be positive"));
    }
    if spec.class_count > MAX_RENDERABLE_CLASSES {
        return Err(Error::config(format!(
            "synth: {} classes exceed the {} distinguishable renders",
            spec.class_count, MAX_RENDERABLE_CLASSES
        )));
    }
    if spec.samples_per_class == 0 {
        return Err(Error::config("synth: samples_per_class must be positive"));
    }
    if spec.voxel_count == 0 {
        return Err(Error::config("synth: voxel_count must be positive"));
    }
    if spec.image_size < 4 {
        return Err(Error::config("synth: image_size must be at least 4"));
    }
    if !(spec.snr > 0.0) {
        return Err(Error::config("synth: snr must be positive"));
    }
    if !(0.0..=1.0).contains(&spec.train_fraction) {
        return Err(Error::config("synth: train_fraction outside [0, 1]"));
    }

    let v = spec.voxel_count as usize;
    let noise_std = 1.0 / spec.snr;
    let mut train = Vec::new();
    let mut test = Vec::new();
    let per_class_train = (spec.train_fraction * spec.samples_per_class as f64).round() as u32;

    for class in 0..spec.class_count {
        let template = class_template(seed, class, v);
        let image = render_class_image(class, spec.image_size as usize);
        for i in 0..spec.samples_per_class {
            let mut rng = stream(seed, "synth.sample", &[class as u64, i as u64]);
            let voxels: Vec<f32> = template
                .iter()
                .map(|&t| {
                    let noise: f64 = f64::standard_normal(&mut rng);
                    (t + noise * noise_std) as f32
                })
                .collect();
            let pair = Pair {
                fmri: FmriSample {
                    subject_id: 0,
                    class_id: Some(class),
                    voxels,
                },
                image: image.clone(),
            };
            if i < per_class_train {
                train.push(pair);
            } else {
                test.push(pair);
            }
        }
    }

    Ok(PairedDataset {
        train,
        test,
        class_count: spec.class_count,
        image_h: spec.image_size as usize,
        image_w: spec.image_size as usize,
        norm: None,
    })
}

/// The fixed sparse template for one class: N(0,1) amplitudes on a random
/// quarter of the voxels, zero elsewhere.
fn class_template(seed: u64, class: u32, voxel_count: usize) -> Vec<f64> {
    let mut rng = stream(seed, "synth.template", &[class as u64]);
    let support = ((TEMPLATE_SUPPORT * voxel_count as f64).round() as usize).max(1);
    let mut template = vec![0.0f64; voxel_count];
    let positions = index::sample(&mut rng, voxel_count, support.min(voxel_count));
    for p in positions {
        template[p] = f64::standard_normal(&mut rng);
    }
    template
}

/// Deterministic render for a class: one of six shapes in one of eight hues
/// on a dark background, anti-aliased with a signed distance function.
pub fn render_class_image(class: u32, size: usize) -> Image {
    let shape = (class as usize) % SHAPES;
    let hue = ((class as usize) / SHAPES % HUES) as f64 / HUES as f64;
    let color = hsv_to_rgb(hue, 0.85, 0.92);
    let bg = [0.12f32, 0.12, 0.13];

    let mut img = Image::new(size, size);
    let edge = 2.0 / size as f64;
    for y in 0..size {
        for x in 0..size {
            // normalized coordinates in [-1, 1]
            let px = (x as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            let py = (y as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            let d = shape_sdf(shape, px, py);
            let a = (0.5 - d / edge).clamp(0.0, 1.0) as f32;
            let rgb = [
                bg[0] * (1.0 - a) + color[0] * a,
                bg[1] * (1.0 - a) + color[1] * a,
                bg[2] * (1.0 - a) + color[2] * a,
            ];
            img.set_pixel(y, x, rgb);
        }
    }
    img
}

fn shape_sdf(shape: usize, x: f64, y: f64) -> f64 {
    let r = 0.58;
    match shape {
        // disc
        0 => (x * x + y * y).sqrt() - r,
        // square
        1 => x.abs().max(y.abs()) - r * 0.82,
        // upward triangle
        2 => {
            let k = 3.0f64.sqrt();
            let d1 = y - (-r * 0.7);
            let d2 = (k * x - y - r * 0.7) / 2.0;
            let d3 = (-k * x - y - r * 0.7) / 2.0;
            (-d1).max(d2.max(d3))
        }
        // ring
        3 => (((x * x + y * y).sqrt()) - r * 0.78).abs() - r * 0.26,
        // plus sign
        4 => {
            let bar_h = x.abs().max(y.abs() / 0.36) - r;
            let bar_v = (x.abs() / 0.36).max(y.abs()) - r;
            bar_h.min(bar_v) * 0.36
        }
        // diamond
        _ => (x.abs() + y.abs()) - r * 1.15,
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h6 = (h.fract() * 6.0).rem_euclid(6.0);
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}
