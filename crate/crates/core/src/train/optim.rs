//! Adaptive-moment optimizer with decoupled weight decay, plus global
//! gradient clipping.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::graph::Real;
use crate::params::ParamStore;

/// Moments are kept in the training precision so a checkpoint round trip
/// restores the exact optimizer state; the update arithmetic itself runs
/// in f64 on each step.
#[derive(Debug, Clone)]
pub struct AdamW<T: Real> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: BTreeMap<String, Array2<T>>,
    v: BTreeMap<String, Array2<T>>,
}

impl<T: Real> Default for AdamW<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> AdamW<T> {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. Only tensors named in `grads` move; anything else
    /// in the store is untouched, which is how freezing works.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &[(String, Array2<T>)],
        lr: f64,
        weight_decay: f64,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);

        for (name, grad) in grads {
            let theta = params.get_mut(name);
            debug_assert_eq!(theta.dim(), grad.dim(), "gradient shape for {name}");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(grad.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(grad.dim()));

            for ((th, g), (mi, vi)) in theta
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = (*g).to_f64();
                let m_new = self.beta1 * (*mi).to_f64() + (1.0 - self.beta1) * g;
                let v_new = self.beta2 * (*vi).to_f64() + (1.0 - self.beta2) * g * g;
                *mi = T::from_f64(m_new);
                *vi = T::from_f64(v_new);
                let m_hat = m_new / bias1;
                let v_hat = v_new / bias2;
                let x = (*th).to_f64();
                let stepped = x - lr * m_hat / (v_hat.sqrt() + self.eps) - lr * weight_decay * x;
                *th = T::from_f64(stepped);
            }
        }
    }

    pub fn moments(&self) -> impl Iterator<Item = (&String, &Array2<T>, &Array2<T>)> {
        self.m
            .iter()
            .map(|(name, m)| (name, m, self.v.get(name).expect("paired moment")))
    }

    pub fn from_state(
        step: u64,
        m: BTreeMap<String, Array2<T>>,
        v: BTreeMap<String, Array2<T>>,
    ) -> Self {
        debug_assert_eq!(
            m.keys().collect::<Vec<_>>(),
            v.keys().collect::<Vec<_>>(),
            "moment tables must name the same tensors"
        );
        Self { step, m, v, ..Self::new() }
    }
}

/// Scale all gradients so their joint L2 norm is at most `clip`. Returns
/// the pre-clip norm. Accumulation runs in f64 regardless of T.
pub fn clip_gradients<T: Real>(grads: &mut [(String, Array2<T>)], clip: f64) -> f64 {
    let mut sum_sq = 0.0f64;
    for (_, g) in grads.iter() {
        for &x in g.iter() {
            let x = x.to_f64();
            sum_sq += x * x;
        }
    }
    let norm = sum_sq.sqrt();
    if norm > clip && norm > 0.0 {
        let factor = clip / norm;
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|x| T::from_f64(x.to_f64() * factor));
        }
    }
    norm
}
