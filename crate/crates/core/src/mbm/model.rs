//! The asymmetric encoder/decoder operating on patch tokens.

use std::rc::Rc;

use ndarray::Array2;
use rand_chacha::ChaCha12Rng;

use crate::graph::{Graph, Real, Var};
use crate::nn;
use crate::params::{normal_init, Binder, ParamStore};
use crate::{Error, Result};

use super::{MaskPlan, MbmConfig};

/// Cut a signal into consecutive patches, one per row.
pub fn patchify<T: Real>(voxels: &[f32], patch_size: usize) -> Result<Array2<T>> {
    if patch_size == 0 {
        return Err(Error::config("patch_size must be positive"));
    }
    if voxels.is_empty() {
        return Err(Error::Degenerate("cannot patchify an empty signal".into()));
    }
    if voxels.len() % patch_size != 0 {
        return Err(Error::shape(format!(
            "signal length {} not a multiple of patch size {patch_size}",
            voxels.len()
        )));
    }
    let n = voxels.len() / patch_size;
    Ok(Array2::from_shape_fn((n, patch_size), |(i, j)| {
        T::from_f64(voxels[i * patch_size + j] as f64)
    }))
}

/// Inverse of [`patchify`]: rows back to one flat signal.
pub fn unpatchify<T: Real>(patches: &Array2<T>) -> Vec<f32> {
    patches.iter().map(|&v| v.to_f64() as f32).collect()
}

/// A stack of same-length signals with one mask plan each. Plans must hide
/// the same number of patches so the visible sequences batch cleanly.
#[derive(Debug, Clone)]
pub struct MbmBatch<T: Real> {
    pub patches: Array2<T>,
    pub plans: Vec<MaskPlan>,
    pub patches_per_sample: usize,
}

impl<T: Real> MbmBatch<T> {
    pub fn from_signals(
        signals: &[&[f32]],
        plans: Vec<MaskPlan>,
        patch_size: usize,
    ) -> Result<Self> {
        if signals.is_empty() {
            return Err(Error::Degenerate("empty batch".into()));
        }
        if signals.len() != plans.len() {
            return Err(Error::shape(format!(
                "{} signals but {} mask plans",
                signals.len(),
                plans.len()
            )));
        }
        let mut rows = Vec::new();
        let n = signals[0].len() / patch_size.max(1);
        let m = plans[0].masked.len();
        for (s, plan) in signals.iter().zip(&plans) {
            let p = patchify::<T>(s, patch_size)?;
            if p.nrows() != n {
                return Err(Error::shape("signals in a batch must share a length"));
            }
            if plan.len() != n {
                return Err(Error::shape(format!(
                    "mask plan covers {} patches, signal has {n}",
                    plan.len()
                )));
            }
            if plan.masked.len() != m {
                return Err(Error::shape("mask plans in a batch must hide equal counts"));
            }
            rows.push(p);
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        let patches = ndarray::concatenate(ndarray::Axis(0), &views)
            .expect("patch widths match by construction");
        Ok(Self { patches, plans, patches_per_sample: n })
    }

    pub fn batch_size(&self) -> usize {
        self.plans.len()
    }

    fn num_masked(&self) -> usize {
        self.plans[0].masked.len()
    }
}

#[derive(Debug)]
pub struct MbmOutput {
    /// Reconstructed patches, (batch * n) x patch_size.
    pub pred: Var,
    /// Encoder tokens of the visible patches, (batch * n_visible) x embed.
    pub latent: Var,
    /// Scalar reconstruction loss.
    pub loss: Var,
}

pub fn init_mbm_params<T: Real>(cfg: &MbmConfig, rng: &mut ChaCha12Rng) -> ParamStore<T> {
    let mut store = ParamStore::new();
    nn::init_linear(&mut store, rng, "mbm.embed", cfg.patch_size, cfg.embed_dim);
    for i in 0..cfg.depth {
        nn::init_transformer_block(
            &mut store,
            rng,
            &format!("mbm.enc{i}"),
            cfg.embed_dim,
            cfg.mlp_hidden(cfg.embed_dim),
        );
    }
    nn::init_linear(&mut store, rng, "mbm.dec_embed", cfg.embed_dim, cfg.decoder_dim);
    store.insert("mbm.mask_token", normal_init(rng, 1, cfg.decoder_dim, 0.02));
    for i in 0..cfg.decoder_depth {
        nn::init_transformer_block(
            &mut store,
            rng,
            &format!("mbm.dec{i}"),
            cfg.decoder_dim,
            cfg.mlp_hidden(cfg.decoder_dim),
        );
    }
    nn::init_linear(&mut store, rng, "mbm.head", cfg.decoder_dim, cfg.patch_size);
    store
}

/// Run the encoder stack over already-embedded tokens. Exposed so the
/// diffusion stage can reuse the trained encoder on unmasked sequences.
#[allow(clippy::too_many_arguments)]
pub fn encode_tokens<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    bind: &mut Binder,
    cfg: &MbmConfig,
    tokens: Var,
    batch: usize,
    seq: usize,
    mut attn_probes: Option<&mut Vec<Var>>,
) -> Var {
    let mut x = tokens;
    for i in 0..cfg.depth {
        x = nn::transformer_block(
            g,
            store,
            bind,
            &format!("mbm.enc{i}"),
            x,
            batch,
            seq,
            cfg.heads,
            attn_probes.as_deref_mut(),
        );
    }
    x
}

/// Embed every patch, add positions, and encode the full (unmasked)
/// sequence. This is the signal representation consumed downstream.
pub fn encode_all<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    bind: &mut Binder,
    cfg: &MbmConfig,
    patches: Var,
    batch: usize,
) -> Result<Var> {
    let (rows, width) = g.dim(patches);
    if width != cfg.patch_size || batch == 0 || rows % batch != 0 {
        return Err(Error::shape(format!(
            "patch matrix {rows}x{width} does not split into {batch} samples of width {}",
            cfg.patch_size
        )));
    }
    let n = rows / batch;
    let tok = nn::linear(g, store, bind, "mbm.embed", patches);
    let tok = add_positions(g, tok, cfg.embed_dim, batch, n);
    Ok(encode_tokens(g, store, bind, cfg, tok, batch, n, None))
}

fn add_positions<T: Real>(g: &mut Graph<T>, tokens: Var, dim: usize, batch: usize, n: usize) -> Var {
    let table = g.input(nn::sinusoidal_table::<T>(n, dim));
    let idx: Vec<i64> = (0..batch).flat_map(|_| 0..n as i64).collect();
    let tiled = g.gather_rows(table, Rc::new(idx));
    g.add(tokens, tiled)
}

/// Masked-reconstruction forward pass: encode visible patches, decode the
/// full sequence from them plus a shared mask token, score the result.
pub fn mbm_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    bind: &mut Binder,
    cfg: &MbmConfig,
    batch: &MbmBatch<T>,
) -> Result<MbmOutput> {
    let b = batch.batch_size();
    let n = batch.patches_per_sample;
    let n_vis = n - batch.num_masked();

    let x = g.input(batch.patches.clone());
    let tok = nn::linear(g, store, bind, "mbm.embed", x);
    let tok = add_positions(g, tok, cfg.embed_dim, b, n);

    let visible_idx: Vec<i64> = batch
        .plans
        .iter()
        .enumerate()
        .flat_map(|(s, plan)| plan.visible.iter().map(move |&v| (s * n + v) as i64))
        .collect();
    let visible = g.gather_rows(tok, Rc::new(visible_idx));
    let latent = encode_tokens(g, store, bind, cfg, visible, b, n_vis, None);

    // Widen back to full sequences: trained tokens where the patch was
    // visible, the shared mask token elsewhere, plus decoder positions.
    let dec_tok = nn::linear(g, store, bind, "mbm.dec_embed", latent);
    let mut scatter_idx = vec![-1i64; b * n];
    let mut token_idx = vec![-1i64; b * n];
    for (s, plan) in batch.plans.iter().enumerate() {
        for (rank, &v) in plan.visible.iter().enumerate() {
            scatter_idx[s * n + v] = (s * n_vis + rank) as i64;
        }
        for &mpos in &plan.masked {
            token_idx[s * n + mpos] = 0;
        }
    }
    let placed = g.gather_rows(dec_tok, Rc::new(scatter_idx));
    let mask_token = bind.var(g, store, "mbm.mask_token");
    let masked_fill = g.gather_rows(mask_token, Rc::new(token_idx));
    let seq = g.add(placed, masked_fill);
    let seq = add_positions(g, seq, cfg.decoder_dim, b, n);

    let mut y = seq;
    for i in 0..cfg.decoder_depth {
        y = nn::transformer_block(
            g,
            store,
            bind,
            &format!("mbm.dec{i}"),
            y,
            b,
            n,
            cfg.decoder_heads,
            None,
        );
    }
    let pred = nn::linear(g, store, bind, "mbm.head", y);

    let loss = masked_mse(g, pred, x, &batch.plans, n, cfg.loss_on_all_patches)?;
    Ok(MbmOutput { pred, latent, loss })
}

/// Mean squared error over hidden patches only, or over every patch when
/// `all_patches` is set.
pub fn masked_mse<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    plans: &[MaskPlan],
    n: usize,
    all_patches: bool,
) -> Result<Var> {
    let (diff_pred, diff_target) = if all_patches {
        (pred, target)
    } else {
        let masked_idx: Vec<i64> = plans
            .iter()
            .enumerate()
            .flat_map(|(s, plan)| plan.masked.iter().map(move |&m| (s * n + m) as i64))
            .collect();
        if masked_idx.is_empty() {
            return Err(Error::Degenerate(
                "loss over masked patches is undefined when nothing is masked".into(),
            ));
        }
        let idx = Rc::new(masked_idx);
        (
            g.gather_rows(pred, Rc::clone(&idx)),
            g.gather_rows(target, idx),
        )
    };
    let d = g.sub(diff_pred, diff_target);
    let sq = g.mul(d, d);
    Ok(g.mean_all(sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mbm::{make_mask_plan, MaskStrategy};
    use approx::assert_abs_diff_eq;

    fn tiny_cfg() -> MbmConfig {
        MbmConfig {
            patch_size: 3,
            embed_dim: 4,
            depth: 1,
            heads: 2,
            decoder_dim: 4,
            decoder_depth: 1,
            decoder_heads: 2,
            mlp_ratio: 1.0,
            mask_ratio: 0.4,
            mask_strategy: MaskStrategy::Random,
            loss_on_all_patches: false,
        }
    }

    fn toy_batch(cfg: &MbmConfig, b: usize, n: usize, seed: u64) -> MbmBatch<f64> {
        let mut rng = crate::rng::stream(seed, "mbm.test.batch", &[]);
        let len = n * cfg.patch_size;
        let signals: Vec<Vec<f32>> = (0..b)
            .map(|_| {
                (0..len)
                    .map(|_| <f64 as Real>::standard_normal(&mut rng) as f32)
                    .collect()
            })
            .collect();
        let plans = (0..b)
            .map(|_| {
                make_mask_plan(n, cfg.mask_ratio, MaskStrategy::Random, None, &mut rng).unwrap()
            })
            .collect();
        let refs: Vec<&[f32]> = signals.iter().map(|s| s.as_slice()).collect();
        MbmBatch::from_signals(&refs, plans, cfg.patch_size).unwrap()
    }

    #[test]
    fn patchify_shapes_and_errors() {
        let p: Array2<f64> = patchify(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3).unwrap();
        assert_eq!(p.dim(), (2, 3));
        assert_eq!(p[[1, 0]], 4.0);
        assert!(patchify::<f64>(&[1.0, 2.0, 3.0], 2).is_err());
        assert!(patchify::<f64>(&[], 2).is_err());
        let back = unpatchify(&p);
        assert_eq!(back, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn identity_extension_embedding_pads_patch_with_zeros() {
        // W = [I | 0], b = 0: the token is the raw patch followed by zeros.
        let cfg = MbmConfig { patch_size: 4, embed_dim: 6, ..tiny_cfg() };
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut w = Array2::zeros((4, 6));
        for i in 0..4 {
            w[[i, i]] = 1.0;
        }
        store.insert("mbm.embed.w", w);
        store.insert("mbm.embed.b", Array2::zeros((1, 6)));

        let mut g = Graph::new();
        let mut bind = Binder::all();
        let x = g.input(patchify::<f64>(&[1.0, 2.0, 3.0, 4.0], cfg.patch_size).unwrap());
        let tok = nn::linear(&mut g, &store, &mut bind, "mbm.embed", x);
        assert_eq!(
            g.val(tok).row(0).to_vec(),
            vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0]
        );
    }

    #[test]
    fn zero_embedding_yields_bias_token() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("mbm.embed.w", Array2::zeros((4, 3)));
        store.insert(
            "mbm.embed.b",
            Array2::from_shape_vec((1, 3), vec![0.5, -1.0, 2.0]).unwrap(),
        );
        let mut g = Graph::new();
        let mut bind = Binder::all();
        let x = g.input(Array2::from_elem((2, 4), 7.0));
        let tok = nn::linear(&mut g, &store, &mut bind, "mbm.embed", x);
        for row in g.val(tok).rows() {
            assert_eq!(row.to_vec(), vec![0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn zero_weight_encoder_is_identity_on_tokens() {
        let cfg = tiny_cfg();
        let mut rng = crate::rng::stream(3, "mbm.test.zero", &[]);
        let mut store: ParamStore<f64> = init_mbm_params(&cfg, &mut rng);
        nn::zero_block_weights(&mut store, "mbm.enc");

        let tokens = normal_init::<f64>(&mut rng, 6, cfg.embed_dim, 1.0);
        let mut g = Graph::new();
        let mut bind = Binder::all();
        let t = g.input(tokens.clone());
        let out = encode_tokens(&mut g, &store, &mut bind, &cfg, t, 2, 3, None);
        for (a, b) in g.val(out).iter().zip(tokens.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn forward_shapes_are_consistent() {
        let cfg = tiny_cfg();
        let mut rng = crate::rng::stream(4, "mbm.test.shapes", &[]);
        let store: ParamStore<f64> = init_mbm_params(&cfg, &mut rng);
        let batch = toy_batch(&cfg, 2, 5, 11);
        assert_eq!(batch.plans[0].masked.len(), 2);

        let mut g = Graph::new();
        let mut bind = Binder::all();
        let out = mbm_forward(&mut g, &store, &mut bind, &cfg, &batch).unwrap();
        assert_eq!(g.dim(out.pred), (10, 3));
        assert_eq!(g.dim(out.latent), (6, 4));
        assert_eq!(g.dim(out.loss), (1, 1));
        assert!(g.scalar(out.loss).is_finite());
    }

    #[test]
    fn masked_mse_hand_values() {
        let n = 4;
        let plan = make_mask_plan(n, 0.5, MaskStrategy::Random, None, &mut crate::rng::stream(5, "mbm.test.loss", &[])).unwrap();
        let target = Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64);

        let mut g = Graph::new();
        let t = g.input(target.clone());
        let p_eq = g.input(target.clone());
        let loss = masked_mse(&mut g, p_eq, t, std::slice::from_ref(&plan), n, false).unwrap();
        assert_eq!(g.scalar(loss), 0.0);

        let mut g = Graph::new();
        let t = g.input(target.clone());
        let p_off = g.input(&target + 1.0);
        let loss = masked_mse(&mut g, p_off, t, std::slice::from_ref(&plan), n, false).unwrap();
        assert_eq!(g.scalar(loss), 1.0);
    }

    #[test]
    fn masked_mse_matches_brute_force() {
        let cfg = tiny_cfg();
        let mut rng = crate::rng::stream(6, "mbm.test.oracle", &[]);
        let store: ParamStore<f64> = init_mbm_params(&cfg, &mut rng);
        for case in 0..5 {
            let batch = toy_batch(&cfg, 2, 6, 100 + case);
            let mut g = Graph::new();
            let mut bind = Binder::all();
            let out = mbm_forward(&mut g, &store, &mut bind, &cfg, &batch).unwrap();
            let pred = g.val(out.pred).clone();

            let n = batch.patches_per_sample;
            let mut sum = 0.0;
            let mut count = 0usize;
            for (s, plan) in batch.plans.iter().enumerate() {
                for &m in &plan.masked {
                    for j in 0..cfg.patch_size {
                        let d = pred[[s * n + m, j]] - batch.patches[[s * n + m, j]];
                        sum += d * d;
                        count += 1;
                    }
                }
            }
            let oracle = sum / count as f64;
            let got = g.scalar(out.loss);
            assert!(
                (got - oracle).abs() <= 1e-10 * oracle.max(1.0),
                "case {case}: loss {got} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn all_patch_flag_scores_everything() {
        let cfg = MbmConfig { loss_on_all_patches: true, ..tiny_cfg() };
        let batch = toy_batch(&cfg, 1, 5, 12);
        let mut rng = crate::rng::stream(7, "mbm.test.allpatch", &[]);
        let store: ParamStore<f64> = init_mbm_params(&cfg, &mut rng);
        let mut g = Graph::new();
        let mut bind = Binder::all();
        let out = mbm_forward(&mut g, &store, &mut bind, &cfg, &batch).unwrap();
        let pred = g.val(out.pred).clone();
        let oracle = (&pred - &batch.patches).mapv(|d| d * d).mean().unwrap();
        assert_abs_diff_eq!(g.scalar(out.loss), oracle, epsilon = 1e-12);
    }

    #[test]
    fn empty_mask_needs_all_patch_flag() {
        let cfg = tiny_cfg();
        let plan = MaskPlan::from_masked(vec![], 4).unwrap();
        let signal: Vec<f32> = (0..12).map(|i| i as f32).collect();
        let batch =
            MbmBatch::<f64>::from_signals(&[&signal], vec![plan], cfg.patch_size).unwrap();
        let mut rng = crate::rng::stream(8, "mbm.test.empty", &[]);
        let store: ParamStore<f64> = init_mbm_params(&cfg, &mut rng);

        let mut g = Graph::new();
        let mut bind = Binder::all();
        let err = mbm_forward(&mut g, &store, &mut bind, &cfg, &batch).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));

        let cfg_all = MbmConfig { loss_on_all_patches: true, ..cfg };
        let mut g = Graph::new();
        let mut bind = Binder::all();
        assert!(mbm_forward(&mut g, &store, &mut bind, &cfg_all, &batch).is_ok());
    }

    #[test]
    fn batches_reject_mismatched_shapes() {
        let a: Vec<f32> = vec![0.0; 12];
        let b: Vec<f32> = vec![0.0; 9];
        let plan4 = MaskPlan::from_masked(vec![0], 4).unwrap();
        let plan3 = MaskPlan::from_masked(vec![0], 3).unwrap();
        assert!(MbmBatch::<f64>::from_signals(
            &[&a, &b],
            vec![plan4.clone(), plan3.clone()],
            3
        )
        .is_err());
        let plan4b = MaskPlan::from_masked(vec![0, 1], 4).unwrap();
        assert!(
            MbmBatch::<f64>::from_signals(&[&a, &a], vec![plan4, plan4b], 3).is_err()
        );
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let mut rng = crate::rng::stream(9, "mbm.test.grad", &[]);
        let store: ParamStore<f64> = init_mbm_params(&cfg, &mut rng);
        let batch = toy_batch(&cfg, 2, 3, 21);

        let run = |s: &ParamStore<f64>| {
            let mut g = Graph::new();
            let mut bind = Binder::all();
            let out = mbm_forward(&mut g, s, &mut bind, &cfg, &batch).unwrap();
            (g, bind, out.loss)
        };
        let (g, bind, loss) = run(&store);
        let grads = g.backward(loss);
        let analytic = bind.grads(&grads);
        assert!(
            analytic
                .iter()
                .find(|(n, _)| n == "mbm.mask_token")
                .map(|(_, g)| g.iter().any(|&v| v != 0.0))
                .unwrap_or(false),
            "mask token must receive gradient"
        );

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
        assert!(
            report.max_rel_err < 1e-3,
            "max rel err {} at {}",
            report.max_rel_err,
            report.worst_param
        );
    }

    #[test]
    fn encode_all_covers_every_patch() {
        let cfg = tiny_cfg();
        let mut rng = crate::rng::stream(10, "mbm.test.encall", &[]);
        let store: ParamStore<f64> = init_mbm_params(&cfg, &mut rng);
        let signal: Vec<f32> = (0..15).map(|i| (i as f32).sin()).collect();
        let patches = patchify::<f64>(&signal, cfg.patch_size).unwrap();

        let mut g = Graph::new();
        let mut bind = Binder::all();
        let x = g.input(patches);
        let z = encode_all(&mut g, &store, &mut bind, &cfg, x, 1).unwrap();
        assert_eq!(g.dim(z), (5, cfg.embed_dim));

        // Position embeddings must break symmetry between equal patches.
        let flat: Vec<f32> = vec![1.0; 15];
        let patches = patchify::<f64>(&flat, cfg.patch_size).unwrap();
        let mut g = Graph::new();
        let mut bind = Binder::all();
        let x = g.input(patches);
        let z = encode_all(&mut g, &store, &mut bind, &cfg, x, 1).unwrap();
        let zv = g.val(z);
        let d: f64 = (0..cfg.embed_dim)
            .map(|j| (zv[[0, j]] - zv[[1, j]]).abs())
            .sum();
        assert!(d > 1e-6);
    }
}
