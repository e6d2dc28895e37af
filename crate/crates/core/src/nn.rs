//! Small neural-net building blocks on top of the graph: linear layers,
//! fixed sinusoidal position tables, and the pre-norm transformer block
//! shared by the signal encoder and decoder.

use std::rc::Rc;

use ndarray::Array2;
use rand_chacha::ChaCha12Rng;

use crate::graph::{Graph, Real, Var};
use crate::params::{normal_init, ones, zeros, Binder, ParamStore};

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// x . W + b with params `{prefix}.w` (in x out) and `{prefix}.b` (1 x out).
pub fn linear<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    bind: &mut Binder,
    prefix: &str,
    x: Var,
) -> Var {
    let w = bind.var(g, store, &format!("{prefix}.w"));
    let b = bind.var(g, store, &format!("{prefix}.b"));
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

pub fn init_linear<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha12Rng,
    prefix: &str,
    d_in: usize,
    d_out: usize,
) {
    store.insert(format!("{prefix}.w"), normal_init(rng, d_in, d_out, INIT_STD));
    store.insert(format!("{prefix}.b"), zeros(1, d_out));
}

pub fn init_zero_linear<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d_in: usize,
    d_out: usize,
) {
    store.insert(format!("{prefix}.w"), zeros(d_in, d_out));
    store.insert(format!("{prefix}.b"), zeros(1, d_out));
}

pub fn layer_norm<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    bind: &mut Binder,
    prefix: &str,
    x: Var,
) -> Var {
    let gamma = bind.var(g, store, &format!("{prefix}.g"));
    let beta = bind.var(g, store, &format!("{prefix}.b"));
    g.layer_norm_rows(x, gamma, beta, LN_EPS)
}

pub fn init_layer_norm<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.g"), ones(1, dim));
    store.insert(format!("{prefix}.b"), zeros(1, dim));
}

/// Fixed sinusoid table: row `pos` interleaves sin/cos at geometrically
/// spaced frequencies. Never trained.
pub fn sinusoidal_table<T: Real>(positions: usize, dim: usize) -> Array2<T> {
    let all: Vec<usize> = (0..positions).collect();
    sinusoidal_rows(&all, dim)
}

/// Sinusoid rows for an arbitrary list of positions (same frequencies as
/// [`sinusoidal_table`], without materializing the whole table).
pub fn sinusoidal_rows<T: Real>(positions: &[usize], dim: usize) -> Array2<T> {
    let mut rows = Array2::zeros((positions.len(), dim));
    for (r, &pos) in positions.iter().enumerate() {
        for i in 0..dim.div_ceil(2) {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            let angle = pos as f64 * freq;
            rows[[r, 2 * i]] = T::from_f64(angle.sin());
            if 2 * i + 1 < dim {
                rows[[r, 2 * i + 1]] = T::from_f64(angle.cos());
            }
        }
    }
    rows
}

/// Multi-head self-attention over per-sample row blocks, softmax(QK^T/sqrt(d)),
/// then an output projection. Input is (batch*seq) x dim.
#[allow(clippy::too_many_arguments)]
pub fn self_attention<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    bind: &mut Binder,
    prefix: &str,
    x: Var,
    batch: usize,
    seq: usize,
    heads: usize,
    attn_probes: Option<&mut Vec<Var>>,
) -> Var {
    let (rows, dim) = g.dim(x);
    assert_eq!(rows, batch * seq, "self_attention: rows != batch*seq");
    assert_eq!(dim % heads, 0, "self_attention: dim not divisible by heads");
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = linear(g, store, bind, &format!("{prefix}.q"), x);
    let k = linear(g, store, bind, &format!("{prefix}.k"), x);
    let v = linear(g, store, bind, &format!("{prefix}.v"), x);

    let mut probes = attn_probes;
    let mut sample_outs = Vec::with_capacity(batch);
    for b in 0..batch {
        let qb = g.slice_rows(q, b * seq, seq);
        let kb = g.slice_rows(k, b * seq, seq);
        let vb = g.slice_rows(v, b * seq, seq);
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(qb, h * dh, dh);
            let kh = g.slice_cols(kb, h * dh, dh);
            let vh = g.slice_cols(vb, h * dh, dh);
            let scores = g.matmul_nt(qh, kh);
            let scaled = g.scale(scores, scale);
            let probs = g.softmax_rows(scaled);
            if let Some(p) = probes.as_deref_mut() {
                p.push(probs);
            }
            head_outs.push(g.matmul(probs, vh));
        }
        sample_outs.push(g.concat_cols(&head_outs));
    }
    let ctx = g.concat_rows(&sample_outs);
    linear(g, store, bind, &format!("{prefix}.o"), ctx)
}

/// Pre-norm transformer block: x + Attn(LN(x)), then x + MLP(LN(x)).
#[allow(clippy::too_many_arguments)]
pub fn transformer_block<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    bind: &mut Binder,
    prefix: &str,
    x: Var,
    batch: usize,
    seq: usize,
    heads: usize,
    attn_probes: Option<&mut Vec<Var>>,
) -> Var {
    let normed = layer_norm(g, store, bind, &format!("{prefix}.ln1"), x);
    let attn = self_attention(
        g,
        store,
        bind,
        &format!("{prefix}.attn"),
        normed,
        batch,
        seq,
        heads,
        attn_probes,
    );
    let x = g.add(x, attn);

    let normed = layer_norm(g, store, bind, &format!("{prefix}.ln2"), x);
    let h = linear(g, store, bind, &format!("{prefix}.mlp.fc1"), normed);
    let h = g.gelu(h);
    let h = linear(g, store, bind, &format!("{prefix}.mlp.fc2"), h);
    g.add(x, h)
}

pub fn init_transformer_block<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha12Rng,
    prefix: &str,
    dim: usize,
    mlp_hidden: usize,
) {
    init_layer_norm(store, &format!("{prefix}.ln1"), dim);
    for part in ["q", "k", "v", "o"] {
        init_linear(store, rng, &format!("{prefix}.attn.{part}"), dim, dim);
    }
    init_layer_norm(store, &format!("{prefix}.ln2"), dim);
    init_linear(store, rng, &format!("{prefix}.mlp.fc1"), dim, mlp_hidden);
    init_linear(store, rng, &format!("{prefix}.mlp.fc2"), mlp_hidden, dim);
}

/// Spatial geometry of a square convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dSpec {
    pub const SAME_3X3: Self = Self { kernel: 3, stride: 1, pad: 1 };
    pub const DOWN_3X3: Self = Self { kernel: 3, stride: 2, pad: 1 };
    pub const POINTWISE: Self = Self { kernel: 1, stride: 1, pad: 0 };

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let out = |d: usize| (d + 2 * self.pad - self.kernel) / self.stride + 1;
        (out(h), out(w))
    }
}

/// Images live in the graph as (batch*h*w) x channels matrices with rows in
/// raster order. Convolution is a flat gather into receptive-field rows
/// followed by a plain matmul, so one GEMM covers the whole batch.
pub fn im2col_indices(
    batch: usize,
    h: usize,
    w: usize,
    c_in: usize,
    spec: Conv2dSpec,
) -> Rc<Vec<i64>> {
    let (oh, ow) = spec.output_size(h, w);
    let mut idx = Vec::with_capacity(batch * oh * ow * spec.kernel * spec.kernel * c_in);
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..spec.kernel {
                    for kx in 0..spec.kernel {
                        let y = (oy * spec.stride + ky) as i64 - spec.pad as i64;
                        let x = (ox * spec.stride + kx) as i64 - spec.pad as i64;
                        let inside = y >= 0 && y < h as i64 && x >= 0 && x < w as i64;
                        for ci in 0..c_in {
                            idx.push(if inside {
                                ((b as i64 * h as i64 + y) * w as i64 + x) * c_in as i64
                                    + ci as i64
                            } else {
                                -1
                            });
                        }
                    }
                }
            }
        }
    }
    Rc::new(idx)
}

/// Convolution over a raster-row image matrix. Weight `{prefix}.w` is
/// (kernel*kernel*c_in) x c_out with rows ordered (ky, kx, c_in); out-of-
/// bounds taps read zero.
#[allow(clippy::too_many_arguments)]
pub fn conv2d<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    bind: &mut Binder,
    prefix: &str,
    x: Var,
    batch: usize,
    h: usize,
    w: usize,
    spec: Conv2dSpec,
    idx: &Rc<Vec<i64>>,
) -> Var {
    let (_, c_in) = g.dim(x);
    let (oh, ow) = spec.output_size(h, w);
    let rows = batch * oh * ow;
    let cols = spec.kernel * spec.kernel * c_in;
    debug_assert_eq!(idx.len(), rows * cols, "conv index plan mismatch");
    let patches = g.gather_flat(x, Rc::clone(idx), rows, cols);
    linear(g, store, bind, prefix, patches)
}

pub fn init_conv2d<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha12Rng,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
) {
    let fan_in = kernel * kernel * c_in;
    let std = (2.0 / fan_in as f64).sqrt();
    store.insert(format!("{prefix}.w"), normal_init(rng, fan_in, c_out, std));
    store.insert(format!("{prefix}.b"), zeros(1, c_out));
}

/// Row indices that repeat every source pixel into a 2x2 block.
pub fn upsample2x_indices(batch: usize, h: usize, w: usize) -> Rc<Vec<i64>> {
    let mut idx = Vec::with_capacity(batch * h * w * 4);
    for b in 0..batch {
        for oy in 0..2 * h {
            for ox in 0..2 * w {
                idx.push(((b * h + oy / 2) * w + ox / 2) as i64);
            }
        }
    }
    Rc::new(idx)
}

/// Row indices grouping each 2x2 block consecutively; averaging every 4
/// rows afterwards yields the pooled image.
pub fn avgpool2x_indices(batch: usize, h: usize, w: usize) -> Rc<Vec<i64>> {
    assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even dimensions");
    let mut idx = Vec::with_capacity(batch * h * w);
    for b in 0..batch {
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        idx.push(((b * h + oy * 2 + dy) * w + ox * 2 + dx) as i64);
                    }
                }
            }
        }
    }
    Rc::new(idx)
}

/// Set every tensor under `prefix` to zero (test helper for residual-path
/// identities; zeroed attention and MLP weights make blocks pass-through).
pub fn zero_block_weights<T: Real>(store: &mut ParamStore<T>, prefix: &str) {
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with(prefix) && !n.contains(".ln"))
        .cloned()
        .collect();
    for n in names {
        let a = store.get_mut(&n);
        *a = Array2::zeros(a.dim());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sinusoid_table_is_bounded_and_position_distinct() {
        let t: Array2<f64> = sinusoidal_table(16, 8);
        assert!(t.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        for a in 0..16 {
            for b in (a + 1)..16 {
                let diff: f64 = (0..8).map(|j| (t[[a, j]] - t[[b, j]]).abs()).sum();
                assert!(diff > 1e-6, "rows {a} and {b} identical");
            }
        }
    }

    #[test]
    fn zeroed_block_is_identity() {
        let mut rng = crate::rng::stream(8, "nn.zero", &[]);
        let mut store: ParamStore<f64> = ParamStore::new();
        init_transformer_block(&mut store, &mut rng, "blk", 8, 8);
        zero_block_weights(&mut store, "blk");

        let x0 = crate::params::normal_init::<f64>(&mut rng, 6, 8, 1.0);
        let mut g = Graph::new();
        let mut bind = Binder::all();
        let x = g.input(x0.clone());
        let y = transformer_block(&mut g, &store, &mut bind, "blk", x, 2, 3, 2, None);
        for (a, b) in g.val(y).iter().zip(x0.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = crate::rng::stream(9, "nn.attn", &[]);
        let mut store: ParamStore<f64> = ParamStore::new();
        init_transformer_block(&mut store, &mut rng, "blk", 8, 8);

        let x0 = crate::params::normal_init::<f64>(&mut rng, 10, 8, 1.0);
        let mut g = Graph::new();
        let mut bind = Binder::all();
        let x = g.input(x0);
        let mut probes = Vec::new();
        let _ = transformer_block(&mut g, &store, &mut bind, "blk", x, 2, 5, 2, Some(&mut probes));
        assert_eq!(probes.len(), 4); // 2 samples x 2 heads
        for p in probes {
            for row in g.val(p).rows() {
                assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn conv_output_sizes() {
        assert_eq!(Conv2dSpec::SAME_3X3.output_size(32, 32), (32, 32));
        assert_eq!(Conv2dSpec::DOWN_3X3.output_size(32, 32), (16, 16));
        assert_eq!(Conv2dSpec::DOWN_3X3.output_size(5, 5), (3, 3));
        assert_eq!(Conv2dSpec::POINTWISE.output_size(7, 9), (7, 9));
    }

    #[test]
    fn ones_kernel_sums_neighborhood_with_zero_padding() {
        // 3x3 single-channel image holding 1..9; an all-ones 3x3 kernel makes
        // each output the sum of the in-bounds neighborhood.
        let img = Array2::from_shape_vec((9, 1), (1..=9).map(f64::from).collect()).unwrap();
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("c.w", Array2::from_elem((9, 1), 1.0));
        store.insert("c.b", Array2::zeros((1, 1)));

        let mut g = Graph::new();
        let mut bind = Binder::all();
        let x = g.input(img);
        let idx = im2col_indices(1, 3, 3, 1, Conv2dSpec::SAME_3X3);
        let y = conv2d(&mut g, &store, &mut bind, "c", x, 1, 3, 3, Conv2dSpec::SAME_3X3, &idx);
        let out = g.val(y);
        assert_eq!(out.dim(), (9, 1));
        assert_eq!(out[[4, 0]], 45.0); // center sees everything
        assert_eq!(out[[0, 0]], 1.0 + 2.0 + 4.0 + 5.0); // corner
        assert_eq!(out[[2, 0]], 2.0 + 3.0 + 5.0 + 6.0);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = crate::rng::stream(21, "nn.convgrad", &[]);
        let mut store: ParamStore<f64> = ParamStore::new();
        init_conv2d(&mut store, &mut rng, "c", 2, 3, 3);
        let img = crate::params::normal_init::<f64>(&mut rng, 2 * 4 * 4, 2, 1.0);

        let run = |s: &ParamStore<f64>| {
            let mut g = Graph::new();
            let mut bind = Binder::all();
            let x = g.input(img.clone());
            let idx = im2col_indices(2, 4, 4, 2, Conv2dSpec::DOWN_3X3);
            let y = conv2d(&mut g, s, &mut bind, "c", x, 2, 4, 4, Conv2dSpec::DOWN_3X3, &idx);
            let sq = g.mul(y, y);
            let loss = g.mean_all(sq);
            (g, bind, loss)
        };
        let (g, bind, loss) = run(&store);
        let grads = g.backward(loss);
        let analytic = bind.grads(&grads);
        let report = crate::gradcheck::check_gradients(
            &store,
            &analytic,
            |s| {
                let (g, _, loss) = run(s);
                g.scalar(loss)
            },
            1e-5,
            1e-6,
        );
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn pool_then_upsample_round_trips_block_constant_images() {
        // Rows: 4x4 single channel, 2x2 blocks holding 10, 20, 30, 40.
        let mut img = Array2::zeros((16, 1));
        for y in 0..4 {
            for x in 0..4 {
                img[[y * 4 + x, 0]] = ((y / 2) * 2 + x / 2 + 1) as f64 * 10.0;
            }
        }
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(img.clone());
        let pool_idx = avgpool2x_indices(1, 4, 4);
        let grouped = g.gather_rows(x, pool_idx);
        let pooled = g.mean_rows_block(grouped, 4);
        assert_eq!(
            g.val(pooled).column(0).to_vec(),
            vec![10.0, 20.0, 30.0, 40.0]
        );
        let up_idx = upsample2x_indices(1, 2, 2);
        let up = g.gather_rows(pooled, up_idx);
        assert_eq!(g.val(up), &img);
    }

    #[test]
    fn block_is_permutation_equivariant() {
        let mut rng = crate::rng::stream(10, "nn.perm", &[]);
        let mut store: ParamStore<f64> = ParamStore::new();
        init_transformer_block(&mut store, &mut rng, "blk", 8, 12);

        let x0 = crate::params::normal_init::<f64>(&mut rng, 5, 8, 1.0);
        let perm = [3usize, 0, 4, 1, 2];
        let mut xp = x0.clone();
        for (dst, &src) in perm.iter().enumerate() {
            xp.row_mut(dst).assign(&x0.row(src));
        }

        let run = |input: Array2<f64>| {
            let mut g = Graph::new();
            let mut bind = Binder::all();
            let x = g.input(input);
            let y = transformer_block(&mut g, &store, &mut bind, "blk", x, 1, 5, 2, None);
            g.val(y).clone()
        };
        let y = run(x0);
        let yp = run(xp);
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..8 {
                assert_abs_diff_eq!(yp[[dst, j]], y[[src, j]], epsilon = 1e-10);
            }
        }
    }
}
