//! Image <-> latent codecs for the diffusion stage. The production system
//! this models uses a large frozen autoencoder; at desk scale the default
//! is the identity map, with an average-pool codec and a small trained
//! convolutional autoencoder to exercise the same plumbing on compressed
//! latents.


use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::graph::{Graph, Real, Var};
use crate::nn::{self, Conv2dSpec};
use crate::params::{Binder, ParamStore};
use crate::train::{clip_gradients, AdamW, LossCurve};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CodecKind {
    #[default]
    Identity,
    Downsample,
    TinyAutoencoder,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub kind: CodecKind,
    pub image_h: usize,
    pub image_w: usize,
    /// Latent channels of the trained autoencoder; ignored by the others.
    pub ae_channels: usize,
    /// Hidden width of the autoencoder convs.
    pub ae_hidden: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { kind: CodecKind::Identity, image_h: 32, image_w: 32, ae_channels: 4, ae_hidden: 8 }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_h == 0 || self.image_w == 0 {
            return Err(Error::config("codec image dimensions must be positive"));
        }
        match self.kind {
            CodecKind::Identity => Ok(()),
            CodecKind::Downsample | CodecKind::TinyAutoencoder => {
                if self.image_h % 2 != 0 || self.image_w % 2 != 0 {
                    return Err(Error::config(format!(
                        "{}x{} images cannot halve cleanly",
                        self.image_h, self.image_w
                    )));
                }
                if self.kind == CodecKind::TinyAutoencoder
                    && (self.ae_channels == 0 || self.ae_hidden == 0)
                {
                    return Err(Error::config("autoencoder widths must be positive"));
                }
                Ok(())
            }
        }
    }

    /// (height, width, channels) of the latent this codec produces.
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        match self.kind {
            CodecKind::Identity => (self.image_h, self.image_w, 3),
            CodecKind::Downsample => (self.image_h / 2, self.image_w / 2, 3),
            CodecKind::TinyAutoencoder => (self.image_h / 2, self.image_w / 2, self.ae_channels),
        }
    }

    pub fn codec_id(&self) -> String {
        let (h, w, c) = self.latent_shape();
        let kind = match self.kind {
            CodecKind::Identity => "identity",
            CodecKind::Downsample => "downsample",
            CodecKind::TinyAutoencoder => "tiny-ae",
        };
        format!("{kind}-{h}x{w}x{c}")
    }
}

/// A latent image: rows are pixels in raster order, columns channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub data: Array2<f32>,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub codec_id: String,
}

impl Latent {
    pub fn new(data: Array2<f32>, h: usize, w: usize, codec_id: String) -> Self {
        let c = data.ncols();
        debug_assert_eq!(data.nrows(), h * w);
        Self { data, h, w, c, codec_id }
    }

    pub fn num_values(&self) -> usize {
        self.h * self.w * self.c
    }
}

/// Latent values live near [0, 1]; the denoiser works in the symmetric
/// range around zero. These two maps convert between them.
pub fn to_denoiser_range(x: &Array2<f32>) -> Array2<f32> {
    x.mapv(|v| 2.0 * v - 1.0)
}

pub fn from_denoiser_range(x: &Array2<f32>) -> Array2<f32> {
    x.mapv(|v| 0.5 * (v + 1.0))
}

#[derive(Debug, Clone)]
pub struct Codec {
    cfg: CodecConfig,
    weights: Option<ParamStore<f32>>,
}

impl Codec {
    pub fn new(cfg: CodecConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, weights: None })
    }

    pub fn with_weights(cfg: CodecConfig, weights: ParamStore<f32>) -> Result<Self> {
        cfg.validate()?;
        if cfg.kind != CodecKind::TinyAutoencoder {
            return Err(Error::config("only the autoencoder codec carries weights"));
        }
        Ok(Self { cfg, weights: Some(weights) })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn codec_id(&self) -> String {
        self.cfg.codec_id()
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        self.cfg.latent_shape()
    }

    pub fn is_trained(&self) -> bool {
        self.cfg.kind != CodecKind::TinyAutoencoder || self.weights.is_some()
    }

    pub fn weights(&self) -> Option<&ParamStore<f32>> {
        self.weights.as_ref()
    }

    pub fn encode(&self, image: &Image) -> Result<Latent> {
        self.check_image(image)?;
        let (lh, lw, _) = self.latent_shape();
        let data = match self.cfg.kind {
            CodecKind::Identity => image.to_rows::<f32>(),
            CodecKind::Downsample => {
                let rows = image.to_rows::<f32>();
                let mut out = Array2::zeros((lh * lw, 3));
                for oy in 0..lh {
                    for ox in 0..lw {
                        for ch in 0..3 {
                            let mut acc = 0.0f64;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    acc += rows[[(oy * 2 + dy) * image.w + ox * 2 + dx, ch]]
                                        as f64;
                                }
                            }
                            out[[oy * lw + ox, ch]] = (acc / 4.0) as f32;
                        }
                    }
                }
                out
            }
            CodecKind::TinyAutoencoder => {
                let weights = self.trained_weights("encode")?;
                let mut g: Graph<f32> = Graph::new();
                let mut bind = Binder::all();
                let x = g.input(image.to_rows::<f32>());
                let z = ae_encode(&mut g, weights, &mut bind, x, 1, image.h, image.w);
                g.val(z).clone()
            }
        };
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("codec produced a non-finite latent".into()));
        }
        Ok(Latent::new(data, lh, lw, self.codec_id()))
    }

    pub fn decode(&self, latent: &Latent) -> Result<Image> {
        self.check_latent(latent)?;
        match self.cfg.kind {
            CodecKind::Identity => Ok(Image::from_rows(latent.h, latent.w, &latent.data)),
            CodecKind::Downsample => {
                let mut img = Image::new(self.cfg.image_h, self.cfg.image_w);
                for y in 0..img.h {
                    for x in 0..img.w {
                        let row = (y / 2) * latent.w + x / 2;
                        img.set_pixel(
                            y,
                            x,
                            [
                                latent.data[[row, 0]],
                                latent.data[[row, 1]],
                                latent.data[[row, 2]],
                            ],
                        );
                    }
                }
                Ok(img)
            }
            CodecKind::TinyAutoencoder => {
                let weights = self.trained_weights("decode")?;
                let mut g: Graph<f32> = Graph::new();
                let mut bind = Binder::all();
                let z = g.input(latent.data.clone());
                let y = ae_decode(&mut g, weights, &mut bind, z, 1, latent.h, latent.w);
                let mut img = Image::from_rows(self.cfg.image_h, self.cfg.image_w, g.val(y));
                img.clamp01();
                Ok(img)
            }
        }
    }

    /// Fit the autoencoder on reconstruction error. Replaces any existing
    /// weights; other codec kinds reject this.
    pub fn fit(
        &mut self,
        images: &[&Image],
        epochs: usize,
        lr: f64,
        seed: u64,
    ) -> Result<LossCurve> {
        if self.cfg.kind != CodecKind::TinyAutoencoder {
            return Err(Error::config("only the autoencoder codec is trainable"));
        }
        if images.is_empty() {
            return Err(Error::Degenerate("cannot fit a codec on zero images".into()));
        }
        for img in images {
            self.check_image(img)?;
        }
        let (h, w) = (self.cfg.image_h, self.cfg.image_w);
        let mut rng = crate::rng::stream(seed, "codec.fit", &[]);
        let mut weights = init_ae_params::<f32>(&self.cfg, &mut rng);

        let batch = images.len().min(16);
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut opt = AdamW::new();
        let mut curve = LossCurve::default();
        let total_steps = (epochs * images.len().div_ceil(batch)) as u64;
        let mut step = 0u64;
        for epoch in 0..epochs {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(batch) {
                let views: Vec<_> = chunk
                    .iter()
                    .map(|&i| images[i].to_rows::<f32>())
                    .collect();
                let refs: Vec<_> = views.iter().map(|v| v.view()).collect();
                let stacked = ndarray::concatenate(ndarray::Axis(0), &refs).unwrap();

                let mut g: Graph<f32> = Graph::new();
                let mut bind = Binder::all();
                let x = g.input(stacked);
                let z = ae_encode(&mut g, &weights, &mut bind, x, chunk.len(), h, w);
                let y = ae_decode(&mut g, &weights, &mut bind, z, chunk.len(), h / 2, w / 2);
                let d = g.sub(y, x);
                let sq = g.mul(d, d);
                let loss = g.mean_all(sq);

                let loss_val =
                    crate::train::ensure_finite_loss(g.scalar(loss).to_f64(), "codec fit")?;
                let grads = g.backward(loss);
                let mut named = bind.grads(&grads);
                clip_gradients(&mut named, 1.0);
                let lr_now = crate::train::lr_at_step(step, total_steps / 20 + 1, total_steps, lr);
                opt.step(&mut weights, &named, lr_now, 0.0);
                step += 1;
                epoch_loss += loss_val;
                batches += 1;
            }
            curve.push(epoch as u32 + 1, epoch_loss / batches as f64);
        }
        self.weights = Some(weights);
        Ok(curve)
    }

    fn trained_weights(&self, action: &str) -> Result<&ParamStore<f32>> {
        self.weights.as_ref().ok_or_else(|| {
            Error::MissingArtifact(format!(
                "autoencoder codec cannot {action} before training: no weights"
            ))
        })
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.h != self.cfg.image_h || image.w != self.cfg.image_w {
            return Err(Error::shape(format!(
                "image {}x{} does not match codec {}x{}",
                image.h, image.w, self.cfg.image_h, self.cfg.image_w
            )));
        }
        Ok(())
    }

    fn check_latent(&self, latent: &Latent) -> Result<()> {
        if latent.codec_id != self.codec_id() {
            return Err(Error::config(format!(
                "latent from codec {} fed to codec {}",
                latent.codec_id,
                self.codec_id()
            )));
        }
        let (lh, lw, lc) = self.latent_shape();
        if (latent.h, latent.w, latent.c) != (lh, lw, lc) {
            return Err(Error::shape(format!(
                "latent {}x{}x{} does not match codec {}x{}x{}",
                latent.h, latent.w, latent.c, lh, lw, lc
            )));
        }
        Ok(())
    }
}

fn init_ae_params<T: Real>(cfg: &CodecConfig, rng: &mut rand_chacha::ChaCha12Rng) -> ParamStore<T> {
    let mut store = ParamStore::new();
    nn::init_conv2d(&mut store, rng, "ae.enc1", 3, cfg.ae_hidden, 3);
    nn::init_conv2d(&mut store, rng, "ae.enc2", cfg.ae_hidden, cfg.ae_channels, 3);
    nn::init_conv2d(&mut store, rng, "ae.dec1", cfg.ae_channels, cfg.ae_hidden, 3);
    nn::init_conv2d(&mut store, rng, "ae.dec2", cfg.ae_hidden, 3, 3);
    store
}

fn ae_encode<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    bind: &mut Binder,
    x: Var,
    batch: usize,
    h: usize,
    w: usize,
) -> Var {
    let down = Conv2dSpec::DOWN_3X3;
    let idx1 = nn::im2col_indices(batch, h, w, 3, down);
    let hmap = nn::conv2d(g, store, bind, "ae.enc1", x, batch, h, w, down, &idx1);
    let hmap = g.gelu(hmap);
    let (oh, ow) = down.output_size(h, w);
    let same = Conv2dSpec::SAME_3X3;
    let c_hidden = g.dim(hmap).1;
    let idx2 = nn::im2col_indices(batch, oh, ow, c_hidden, same);
    nn::conv2d(g, store, bind, "ae.enc2", hmap, batch, oh, ow, same, &idx2)
}

fn ae_decode<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    bind: &mut Binder,
    z: Var,
    batch: usize,
    lh: usize,
    lw: usize,
) -> Var {
    let same = Conv2dSpec::SAME_3X3;
    let c_lat = g.dim(z).1;
    let idx1 = nn::im2col_indices(batch, lh, lw, c_lat, same);
    let hmap = nn::conv2d(g, store, bind, "ae.dec1", z, batch, lh, lw, same, &idx1);
    let hmap = g.gelu(hmap);
    let up = g.gather_rows(hmap, nn::upsample2x_indices(batch, lh, lw));
    let c_hidden = g.dim(up).1;
    let idx2 = nn::im2col_indices(batch, lh * 2, lw * 2, c_hidden, same);
    nn::conv2d(g, store, bind, "ae.dec2", up, batch, lh * 2, lw * 2, same, &idx2)
}
