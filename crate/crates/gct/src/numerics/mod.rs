//! Reverse-mode autodiff kernel: dense tensors, a Wengert tape, the shared
//! activation/normalization/loss kernels, and Adam. Generic over the scalar
//! type; the rest of the crate instantiates it at `f64`.

pub mod adam;
pub mod tape;
pub mod tensor;

pub use adam::{AdamHyper, AdamState};
pub use tape::{Gradients, Tape, TensorId};
pub use tensor::{matmul, matmul_nt, matmul_tn, Tensor};

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::scalar::Scalar;

/// Additive attention-mask sentinel for blocked cells.
pub const MASK_BLOCKED: f64 = -1e30;
/// Floor applied to the q side of KL divergence wherever p has mass.
pub const KL_EPS: f64 = 1e-12;
/// Variance floor inside layer normalization.
pub const LN_EPS: f64 = 1e-5;

/// Row softmax under an additive mask with entries in {0, MASK_BLOCKED}.
/// Blocked cells are exactly zero in the output; a fully-blocked row is a
/// `DegenerateRow` error. Stable via per-row max subtraction.
pub fn masked_row_softmax<F: Scalar>(logits: &Tensor<F>, mask: &Tensor<F>) -> Result<Tensor<F>> {
    masked_row_softmax_values(logits, mask)
}

pub(crate) fn masked_row_softmax_values<F: Scalar>(logits: &Tensor<F>, mask: &Tensor<F>) -> Result<Tensor<F>> {
    if !logits.same_shape(mask) {
        return Err(Error::Shape {
            op: "masked_row_softmax",
            detail: format!("{:?} vs mask {:?}", logits.shape(), mask.shape()),
        });
    }
    let blocked = F::from_c(MASK_BLOCKED);
    if let Some(bad) = mask.data().iter().find(|&&m| m != F::zero() && m != blocked) {
        return Err(Error::Contract(format!(
            "mask entries must be 0 or {}, found {}",
            MASK_BLOCKED, bad
        )));
    }
    let (n, d) = logits.shape();
    let mut out = Tensor::zeros(n, d);
    for i in 0..n {
        let lr = logits.row(i);
        let mr = mask.row(i);
        let mut maxv = F::neg_infinity();
        for (&x, &m) in lr.iter().zip(mr.iter()) {
            if m == F::zero() && x > maxv {
                maxv = x;
            }
        }
        if maxv == F::neg_infinity() {
            return Err(Error::DegenerateRow { row: i });
        }
        let mut denom = F::zero();
        {
            let orow = out.row_mut(i);
            for ((o, &x), &m) in orow.iter_mut().zip(lr.iter()).zip(mr.iter()) {
                if m == F::zero() {
                    let e = (x - maxv).exp();
                    *o = e;
                    denom += e;
                }
            }
            for o in orow.iter_mut() {
                *o /= denom;
            }
        }
    }
    Ok(out)
}

/// Summed row-wise KL divergence `sum_i D(p_i ‖ q_i)`; terms with `p == 0`
/// contribute nothing and `q` is floored at [`KL_EPS`] where `p > 0`.
pub fn kl_divergence_rows<F: Scalar>(p: &Tensor<F>, q: &Tensor<F>) -> Result<F> {
    if !p.same_shape(q) {
        return Err(Error::Shape {
            op: "kl_divergence_rows",
            detail: format!("{:?} vs {:?}", p.shape(), q.shape()),
        });
    }
    let eps = F::from_c(KL_EPS);
    let mut total = F::zero();
    for (&pv, &qv) in p.data().iter().zip(q.data().iter()) {
        if pv < F::zero() || qv < F::zero() || !pv.is_finite() || !qv.is_finite() {
            return Err(Error::Domain(format!("kl inputs must be finite and nonnegative, got p={} q={}", pv, qv)));
        }
        if pv > F::zero() {
            total += pv * (pv.ln() - qv.max(eps).ln());
        }
    }
    Ok(total)
}

/// Shannon entropy of each row in nats; zero cells contribute nothing.
pub fn row_entropy<F: Scalar>(t: &Tensor<F>) -> Result<Vec<F>> {
    let mut out = Vec::with_capacity(t.rows());
    for i in 0..t.rows() {
        let mut h = F::zero();
        for &p in t.row(i) {
            if p < F::zero() || !p.is_finite() {
                return Err(Error::Domain(format!("entropy input must be finite and nonnegative, got {}", p)));
            }
            if p > F::zero() {
                h -= p * p.ln();
            }
        }
        out.push(h);
    }
    Ok(out)
}

/// One MLP layer on the tape: weight d_in×d_out, bias 1×d_out, layer-norm
/// gain/bias 1×d_out, plus a dropout rate.
#[derive(Clone, Copy, Debug)]
pub struct MlpLayer {
    pub w: TensorId,
    pub b: TensorId,
    pub ln_gain: TensorId,
    pub ln_bias: TensorId,
    pub dropout: f64,
}

/// Feed-forward stack: per layer `linear -> layer-norm -> relu -> dropout`,
/// with a residual add whenever the layer preserves width.
pub fn mlp_block<F: Scalar>(
    tape: &mut Tape<F>,
    x: TensorId,
    layers: &[MlpLayer],
    train: bool,
    rng: &mut StreamRng,
) -> Result<TensorId> {
    let mut cur = x;
    for layer in layers {
        let lin = tape.matmul(cur, layer.w)?;
        let lin = tape.add_bias_row(lin, layer.b)?;
        let normed = tape.layer_norm(lin, layer.ln_gain, layer.ln_bias)?;
        let act = tape.relu(normed);
        let dropped = tape.dropout(act, layer.dropout, train, rng)?;
        cur = if tape.value(cur).cols() == tape.value(dropped).cols() {
            tape.add(dropped, cur)?
        } else {
            dropped
        };
    }
    Ok(cur)
}
