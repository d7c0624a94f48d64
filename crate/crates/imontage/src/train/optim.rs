//! AdamW with decoupled weight decay, plus global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::model::Parameters;
use crate::tensor::{Scalar, Tensor};

/// Gradients keyed by parameter name, shapes matching the parameters.
pub type Grads<S> = BTreeMap<String, Tensor<S>>;

/// First or second optimizer moments, flattened per parameter.
pub type MomentTable = BTreeMap<String, Vec<f64>>;

/// Euclidean norm over every gradient element, accumulated in f64 in key
/// order so the result is reproducible.
pub fn global_grad_norm<S: Scalar>(grads: &Grads<S>) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.values() {
        for &v in g.data() {
            let v = v.to_f64();
            sq += v * v;
        }
    }
    sq.sqrt()
}

/// Scale all gradients in place so their global norm is at most `clip`.
/// Returns the pre-clip norm. Gradients already within the bound are left
/// bitwise untouched.
pub fn clip_global_norm<S: Scalar>(grads: &mut Grads<S>, clip: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > clip {
        let scale = clip / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v = S::from_f64(v.to_f64() * scale);
            }
        }
    }
    norm
}

/// AdamW state. Moments are held and updated in f64 regardless of the
/// parameter dtype; the decay term applies to the parameter directly
/// (decoupled), not through the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: MomentTable,
    v: MomentTable,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW::new()
    }
}

impl AdamW {
    pub fn new() -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Rebuild optimizer state loaded from a checkpoint.
    pub fn from_parts(t: u64, m: MomentTable, v: MomentTable) -> AdamW {
        AdamW {
            t,
            m,
            v,
            ..AdamW::new()
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&MomentTable, &MomentTable) {
        (&self.m, &self.v)
    }

    /// One update over every parameter that has a gradient. Parameters
    /// without a gradient entry still receive weight decay, which keeps a
    /// zero-gradient step equivalent to pure decay.
    pub fn step<S: Scalar>(
        &mut self,
        params: &mut Parameters<S>,
        grads: &Grads<S>,
        lr: f64,
        weight_decay: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            assert_eq!(m.len(), n, "moment shape drift for {name}");
            let grad = grads.get(name);
            if let Some(g) = grad {
                assert_eq!(g.numel(), n, "gradient shape mismatch for {name}");
            }
            for (i, pv) in p.data_mut().iter_mut().enumerate() {
                let mut x = pv.to_f64();
                if weight_decay != 0.0 {
                    x -= lr * weight_decay * x;
                }
                if let Some(g) = grad {
                    let gi = g.data()[i].to_f64();
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    x -= lr * m_hat / (v_hat.sqrt() + self.eps);
                }
                *pv = S::from_f64(x);
            }
        }
    }
}
