use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::Tensor;

/// Adam hyperparameters; defaults follow the usual beta1 0.9, beta2 0.999,
/// eps 1e-8.
#[derive(Clone, Copy, Debug)]
pub struct AdamHyper<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
}

impl<F: Scalar> AdamHyper<F> {
    pub fn new(lr: F) -> Self {
        AdamHyper {
            lr,
            beta1: F::from_c(0.9),
            beta2: F::from_c(0.999),
            eps: F::from_c(1e-8),
        }
    }
}

/// First/second moment state, keyed by parameter name so update order is the
/// deterministic name order regardless of how gradients were produced.
#[derive(Clone, Debug, Default)]
pub struct AdamState<F: Scalar> {
    t: u64,
    m: BTreeMap<String, Tensor<F>>,
    v: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new() -> Self {
        AdamState {
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update over every parameter present in `grads`.
    /// A non-finite gradient aborts before any parameter is touched.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<F>>,
        grads: &BTreeMap<String, Tensor<F>>,
        hp: &AdamHyper<F>,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::Optimizer { param: name.clone() });
            }
            if !params.contains_key(name) {
                return Err(Error::Contract(format!("gradient for unknown parameter {}", name)));
            }
        }
        self.t += 1;
        let t = self.t;
        let one = F::one();
        let bc1 = one - hp.beta1.powi(t as i32);
        let bc2 = one - hp.beta2.powi(t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            debug_assert!(p.same_shape(g));
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
            for ((pd, &gd), (md, vd)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data().iter())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *md = hp.beta1 * *md + (one - hp.beta1) * gd;
                *vd = hp.beta2 * *vd + (one - hp.beta2) * gd * gd;
                let mhat = *md / bc1;
                let vhat = *vd / bc2;
                *pd -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
            }
        }
        Ok(())
    }
}
