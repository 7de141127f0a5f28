use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::scalar::Scalar;

use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use super::{kl_divergence_rows, masked_row_softmax_values, KL_EPS, LN_EPS};

pub type TensorId = usize;

type BackFn<F> = Box<dyn Fn(&[Node<F>], &Tensor<F>, &mut dyn FnMut(TensorId, Tensor<F>))>;

struct Node<F: Scalar> {
    value: Tensor<F>,
    needs_grad: bool,
    is_param: bool,
    back: Option<BackFn<F>>,
}

/// Gradients keyed by tape id; populated for parameter leaves reached by the
/// backward sweep.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, id: TensorId) -> Option<&Tensor<F>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Move a gradient out, leaving `None` behind.
    pub fn take(&mut self, id: TensorId) -> Option<Tensor<F>> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

/// Reverse-mode Wengert tape. Operations append nodes holding the forward
/// value plus a backward closure over parent ids; `backward` sweeps the tape
/// in strict reverse record order, visiting each node exactly once, so
/// gradients are bit-identical across runs on identical inputs.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor<F> {
        &self.nodes[id].value
    }

    pub fn is_param(&self, id: TensorId) -> bool {
        self.nodes[id].is_param
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, needs_grad: bool, is_param: bool, back: Option<BackFn<F>>) -> TensorId {
        self.nodes.push(Node {
            value,
            needs_grad,
            is_param,
            back,
        });
        self.nodes.len() - 1
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> TensorId {
        self.push(value, true, true, None)
    }

    /// Non-trainable leaf; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor<F>) -> TensorId {
        self.push(value, false, false, None)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let v = matmul(self.value(a), self.value(b))?;
        let (na, nb) = (self.needs(a), self.needs(b));
        let back = bkfn(na || nb, move |nodes: &[Node<F>], up: &Tensor<F>, sink: &mut dyn FnMut(TensorId, Tensor<F>)| {
            if na {
                sink(a, matmul_nt(up, &nodes[b].value).expect("recorded shapes"));
            }
            if nb {
                sink(b, matmul_tn(&nodes[a].value, up).expect("recorded shapes"));
            }
        });
        Ok(self.push(v, na || nb, false, back))
    }

    /// a · bᵀ
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let v = matmul_nt(self.value(a), self.value(b))?;
        let (na, nb) = (self.needs(a), self.needs(b));
        let back = bkfn(na || nb, move |nodes: &[Node<F>], up: &Tensor<F>, sink: &mut dyn FnMut(TensorId, Tensor<F>)| {
            if na {
                sink(a, matmul(up, &nodes[b].value).expect("recorded shapes"));
            }
            if nb {
                sink(b, matmul_tn(up, &nodes[a].value).expect("recorded shapes"));
            }
        });
        Ok(self.push(v, na || nb, false, back))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same("add", a, b)?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let (na, nb) = (self.needs(a), self.needs(b));
        let back = bkfn(na || nb, move |_: &[Node<F>], up: &Tensor<F>, sink: &mut dyn FnMut(TensorId, Tensor<F>)| {
            if na {
                sink(a, up.clone());
            }
            if nb {
                sink(b, up.clone());
            }
        });
        Ok(self.push(v, na || nb, false, back))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same("sub", a, b)?;
        let mut v = self.value(a).clone();
        v.add_scaled(self.value(b), -F::one());
        let (na, nb) = (self.needs(a), self.needs(b));
        let back = bkfn(na || nb, move |_: &[Node<F>], up: &Tensor<F>, sink: &mut dyn FnMut(TensorId, Tensor<F>)| {
            if na {
                sink(a, up.clone());
            }
            if nb {
                let mut d = up.clone();
                d.scale_in_place(-F::one());
                sink(b, d);
            }
        });
        Ok(self.push(v, na || nb, false, back))
    }

    pub fn hadamard(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same("hadamard", a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let mut v = va.clone();
        for (x, &y) in v.data_mut().iter_mut().zip(vb.data().iter()) {
            *x *= y;
        }
        let (na, nb) = (self.needs(a), self.needs(b));
        let back = bkfn(na || nb, move |nodes: &[Node<F>], up: &Tensor<F>, sink: &mut dyn FnMut(TensorId, Tensor<F>)| {
            if na {
                let mut d = up.clone();
                for (x, &y) in d.data_mut().iter_mut().zip(nodes[b].value.data().iter()) {
                    *x *= y;
                }
                sink(a, d);
            }
            if nb {
                let mut d = up.clone();
                for (x, &y) in d.data_mut().iter_mut().zip(nodes[a].value.data().iter()) {
                    *x *= y;
                }
                sink(b, d);
            }
        });
        Ok(self.push(v, na || nb, false, back))
    }

    pub fn scale(&mut self, a: TensorId, k: F) -> TensorId {
        let mut v = self.value(a).clone();
        v.scale_in_place(k);
        let na = self.needs(a);
        let back = bkfn(na, move |_: &[Node<F>], up: &Tensor<F>, sink: &mut dyn FnMut(TensorId, Tensor<F>)| {
            let mut d = up.clone();
            d.scale_in_place(k);
            sink(a, d);
        });
        self.push(v, na, false, back)
    }

    /// x (n×d) + broadcast bias row (1×d)
    pub fn add_bias_row(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let vx = self.value(x);
        let vb = self.value(bias);
        if vb.rows() != 1 || vb.cols() != vx.cols() {
            return Err(Error::Shape {
                op: "add_bias_row",
                detail: format!("{:?} + bias {:?}", vx.shape(), vb.shape()),
            });
        }
        let mut v = vx.clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            for (a, &b) in row.iter_mut().zip(vb.row(0).iter()) {
                *a += b;
            }
        }
        let (nx, nb) = (self.needs(x), self.needs(bias));
        let back = bkfn(nx || nb, move |_: &[Node<F>], up: &Tensor<F>, sink: &mut dyn FnMut(TensorId, Tensor<F>)| {
            if nx {
                sink(x, up.clone());
            }
            if nb {
                let mut d = Tensor::zeros(1, up.cols());
                for i in 0..up.rows() {
                    for (acc, &u) in d.row_mut(0).iter_mut().zip(up.row(i).iter()) {
                        *acc += u;
                    }
                }
                sink(bias, d);
            }
        });
        Ok(self.push(v, nx || nb, false, back))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).map(|x| x.max(F::zero()));
        let na = self.needs(a);
        let back = bkfn(na, move |nodes: &[Node<F>], up: &Tensor<F>, sink: &mut dyn FnMut(TensorId, Tensor<F>)| {
            let mut d = up.clone();
            for (g, &x) in d.data_mut().iter_mut().zip(nodes[a].value.data().iter()) {
                if x <= F::zero() {
                    *g = F::zero();
                }
            }
            sink(a, d);
        });
        self.push(v, na, false, back)
    }

    /// Row gather; also serves as single-row extraction. Backward scatter-adds
    /// into the source, so repeated indices accumulate.
    pub fn gather_rows(&mut self, src: TensorId, indices: Vec<usize>) -> Result<TensorId> {
        let vs = self.value(src);
        let (srows, cols) = vs.shape();
        if let Some(&bad) = indices.iter().find(|&&i| i >= srows) {
            return Err(Error::Shape {
                op: "gather_rows",
                detail: format!("row {} out of {}", bad, srows),
            });
        }
        let mut v = Tensor::zeros(indices.len(), cols);
        for (i, &ix) in indices.iter().enumerate() {
            v.row_mut(i).copy_from_slice(vs.row(ix));
        }
        let na = self.needs(src);
        let back = bkfn(na, move |nodes: &[Node<F>], up: &Tensor<F>, sink: &mut dyn FnMut(TensorId, Tensor<F>)| {
            let (srows, cols) = nodes[src].value.shape();
            let mut d = Tensor::zeros(srows, cols);
            for (i, &ix) in indices.iter().enumerate() {
                let drow = d.row_mut(ix);
                for (g, &u) in drow.iter_mut().zip(up.row(i).iter()) {
                    *g += u;
                }
            }
            sink(src, d);
        });
        Ok(self.push(v, na, false, back))
    }

    /// Stack parts vertically; all parts must share a column count.
    pub fn vstack(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Shape {
                op: "vstack",
                detail: "no parts".into(),
            });
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            if vp.cols() != cols {
                return Err(Error::Shape {
                    op: "vstack",
                    detail: format!("{} cols vs {}", vp.cols(), cols),
                });
            }
            rows += vp.rows();
        }
        let mut v = Tensor::zeros(rows, cols);
        let mut at = 0;
        let mut ranges: Vec<(TensorId, usize, usize)> = Vec::with_capacity(parts.len());
        for &p in parts {
            let vp = self.value(p);
            for i in 0..vp.rows() {
                v.row_mut(at + i).copy_from_slice(vp.row(i));
            }
            ranges.push((p, at, vp.rows()));
            at += vp.rows();
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let part_needs: Vec<bool> = parts.iter().map(|&p| self.needs(p)).collect();
        let back = bkfn(needs, move |_: &[Node<F>], up: &Tensor<F>, sink: &mut dyn FnMut(TensorId, Tensor<F>)| {
            for ((p, start, n), &pn) in ranges.iter().zip(part_needs.iter()) {
                if !pn {
                    continue;
                }
                let mut d = Tensor::zeros(*n, up.cols());
                for i in 0..*n {
                    d.row_mut(i).copy_from_slice(up.row(start + i));
                }
                sink(*p, d);
            }
        });
        Ok(self.push(v, needs, false, back))
    }

    /// 1×d sum of all rows.
    pub fn sum_rows(&mut self, a: TensorId) -> TensorId {
        let va = self.value(a);
        let mut v = Tensor::zeros(1, va.cols());
        for i in 0..va.rows() {
            for (acc, &x) in v.row_mut(0).iter_mut().zip(va.row(i).iter()) {
                *acc += x;
            }
        }
        let na = self.needs(a);
        let back = bkfn(na, move |nodes: &[Node<F>], up: &Tensor<F>, sink: &mut dyn FnMut(TensorId, Tensor<F>)| {
            let rows = nodes[a].value.rows();
            let mut d = Tensor::zeros(rows, up.cols());
            for i in 0..rows {
                d.row_mut(i).copy_from_slice(up.row(0));
            }
            sink(a, d);
        });
        self.push(v, na, false, back)
    }

    /// Row-wise softmax under an additive mask whose entries are either 0
    /// (attend) or the `-1e30` sentinel (blocked). Blocked cells come out as
    /// exact zeros; a fully-blocked row is an error.
    pub fn masked_row_softmax(&mut self, logits: TensorId, mask: &Tensor<F>) -> Result<TensorId> {
        let v = masked_row_softmax_values(self.value(logits), mask)?;
        let na = self.needs(logits);
        let out_id = self.nodes.len();
        let back = bkfn(na, move |nodes: &[Node<F>], up: &Tensor<F>, sink: &mut dyn FnMut(TensorId, Tensor<F>)| {
            let y = &nodes[out_id].value;
            let mut d = Tensor::zeros(y.rows(), y.cols());
            for i in 0..y.rows() {
                let yr = y.row(i);
                let ur = up.row(i);
                let mut s = F::zero();
                for (&yv, &uv) in yr.iter().zip(ur.iter()) {
                    s += yv * uv;
                }
                for ((g, &yv), &uv) in d.row_mut(i).iter_mut().zip(yr.iter()).zip(ur.iter()) {
                    *g = yv * (uv - s);
                }
            }
            sink(logits, d);
        });
        Ok(self.push(v, na, false, back))
    }

    /// Per-row layer normalization with learnable gain and bias (1×d each).
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let vx = self.value(x);
        let (n, d) = vx.shape();
        let vg = self.value(gain);
        let vb = self.value(bias);
        if vg.shape() != (1, d) || vb.shape() != (1, d) {
            return Err(Error::Shape {
                op: "layer_norm",
                detail: format!("x {:?}, gain {:?}, bias {:?}", vx.shape(), vg.shape(), vb.shape()),
            });
        }
        let eps = F::from_c(LN_EPS);
        let df = F::from_usize(d).expect("width");
        let mut v = Tensor::zeros(n, d);
        for i in 0..n {
            let xr = vx.row(i);
            let mu = xr.iter().copied().sum::<F>() / df;
            let var = xr.iter().map(|&a| (a - mu) * (a - mu)).sum::<F>() / df;
            let inv = (var + eps).sqrt().recip();
            for (((o, &a), &g), &b) in v
                .row_mut(i)
                .iter_mut()
                .zip(xr.iter())
                .zip(vg.row(0).iter())
                .zip(vb.row(0).iter())
            {
                *o = g * (a - mu) * inv + b;
            }
        }
        let (nx, ng, nb) = (self.needs(x), self.needs(gain), self.needs(bias));
        let back = bkfn(
            nx || ng || nb,
            move |nodes: &[Node<F>], up: &Tensor<F>, sink: &mut dyn FnMut(TensorId, Tensor<F>)| {
                let vx = &nodes[x].value;
                let vg = &nodes[gain].value;
                let (n, d) = vx.shape();
                let df = F::from_usize(d).expect("width");
                let eps = F::from_c(LN_EPS);
                let mut dx = if nx { Some(Tensor::zeros(n, d)) } else { None };
                let mut dg = if ng { Some(Tensor::zeros(1, d)) } else { None };
                let mut db = if nb { Some(Tensor::zeros(1, d)) } else { None };
                for i in 0..n {
                    let xr = vx.row(i);
                    let ur = up.row(i);
                    let mu = xr.iter().copied().sum::<F>() / df;
                    let var = xr.iter().map(|&a| (a - mu) * (a - mu)).sum::<F>() / df;
                    let inv = (var + eps).sqrt().recip();
                    if let Some(dg) = dg.as_mut() {
                        for ((acc, &u), &a) in dg.row_mut(0).iter_mut().zip(ur.iter()).zip(xr.iter()) {
                            *acc += u * (a - mu) * inv;
                        }
                    }
                    if let Some(db) = db.as_mut() {
                        for (acc, &u) in db.row_mut(0).iter_mut().zip(ur.iter()) {
                            *acc += u;
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        // dxhat_j = up_j * g_j; pack the two row reductions first
                        let mut sum_dxhat = F::zero();
                        let mut sum_dxhat_xc = F::zero();
                        for ((&u, &g), &a) in ur.iter().zip(vg.row(0).iter()).zip(xr.iter()) {
                            let dxh = u * g;
                            sum_dxhat += dxh;
                            sum_dxhat_xc += dxh * (a - mu);
                        }
                        let dvar = sum_dxhat_xc * (-F::from_c(0.5)) * inv * inv * inv;
                        let dmu = -inv * sum_dxhat;
                        let two = F::from_c(2.0);
                        for (((o, &u), &g), &a) in dx
                            .row_mut(i)
                            .iter_mut()
                            .zip(ur.iter())
                            .zip(vg.row(0).iter())
                            .zip(xr.iter())
                        {
                            let dxh = u * g;
                            *o = inv * dxh + dvar * two * (a - mu) / df + dmu / df;
                        }
                    }
                }
                if let Some(d) = dx {
                    sink(x, d);
                }
                if let Some(d) = dg {
                    sink(gain, d);
                }
                if let Some(d) = db {
                    sink(bias, d);
                }
            },
        );
        Ok(self.push(v, nx || ng || nb, false, back))
    }

    /// Inverted dropout: in training mode keeps each element with probability
    /// `1 - rate` and rescales by `1/(1-rate)`; identity in eval mode.
    pub fn dropout(&mut self, x: TensorId, rate: f64, train: bool, rng: &mut StreamRng) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0,1)", rate)));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let vx = self.value(x);
        let (n, d) = vx.shape();
        let keep = F::from_c(1.0 / (1.0 - rate));
        let mut mask = Vec::with_capacity(n * d);
        let mut out = Vec::with_capacity(n * d);
        for &xv in vx.data() {
            let m = if rng.uniform() >= rate { keep } else { F::zero() };
            mask.push(m);
            out.push(xv * m);
        }
        let na = self.needs(x);
        let back = bkfn(na, move |_: &[Node<F>], up: &Tensor<F>, sink: &mut dyn FnMut(TensorId, Tensor<F>)| {
            let mut d = Vec::with_capacity(mask.len());
            for (&u, &m) in up.data().iter().zip(mask.iter()) {
                d.push(u * m);
            }
            let (r, c) = up.shape();
            sink(x, Tensor::from_vec(r, c, d).expect("dropout shape"));
        });
        let t = Tensor::from_vec(n, d, out)?;
        Ok(self.push(t, na, false, back))
    }

    /// Mean binary cross-entropy between logits and fixed targets, computed in
    /// the numerically stable log1p form.
    pub fn bce_with_logits_mean(&mut self, logits: TensorId, targets: Tensor<F>) -> Result<TensorId> {
        let vz = self.value(logits);
        if !vz.same_shape(&targets) {
            return Err(Error::Shape {
                op: "bce_with_logits_mean",
                detail: format!("{:?} vs {:?}", vz.shape(), targets.shape()),
            });
        }
        let cnt = F::from_usize(vz.len()).expect("count");
        let na = self.needs(logits);
        let (rows, cols) = vz.shape();
        let mut total = F::zero();
        // The forward exp also yields each cell's sigmoid, saved for the
        // backward pass. exp(-|z|) keeps both sides of the split overflow-free.
        let mut sigs = Vec::with_capacity(if na { vz.len() } else { 0 });
        for (&z, &t) in vz.data().iter().zip(targets.data().iter()) {
            let e = (-z.abs()).exp();
            total += z.max(F::zero()) - z * t + e.ln_1p();
            if na {
                sigs.push(if z >= F::zero() {
                    F::one() / (F::one() + e)
                } else {
                    e / (F::one() + e)
                });
            }
        }
        let v = Tensor::scalar(total / cnt);
        let back = bkfn(na, move |_: &[Node<F>], up: &Tensor<F>, sink: &mut dyn FnMut(TensorId, Tensor<F>)| {
            let u = up.get(0, 0) / cnt;
            let mut d = Vec::with_capacity(sigs.len());
            for (&sig, &t) in sigs.iter().zip(targets.data().iter()) {
                d.push(u * (sig - t));
            }
            sink(logits, Tensor::from_vec(rows, cols, d).expect("logit shape"));
        });
        Ok(self.push(v, na, false, back))
    }

    /// Cross-entropy of a single 1×V logit row against one target index.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, target: usize) -> Result<TensorId> {
        let vz = self.value(logits);
        if vz.rows() != 1 || target >= vz.cols() {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                detail: format!("logits {:?}, target {}", vz.shape(), target),
            });
        }
        let zr = vz.row(0);
        let m = zr.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = m + zr.iter().map(|&z| (z - m).exp()).sum::<F>().ln();
        let v = Tensor::scalar(lse - zr[target]);
        let na = self.needs(logits);
        let back = bkfn(na, move |nodes: &[Node<F>], up: &Tensor<F>, sink: &mut dyn FnMut(TensorId, Tensor<F>)| {
            let vz = &nodes[logits].value;
            let zr = vz.row(0);
            let m = zr.iter().copied().fold(F::neg_infinity(), F::max);
            let denom: F = zr.iter().map(|&z| (z - m).exp()).sum();
            let u = up.get(0, 0);
            let mut d = Tensor::zeros(1, vz.cols());
            for ((g, &z), j) in d.row_mut(0).iter_mut().zip(zr.iter()).zip(0..) {
                let p = (z - m).exp() / denom;
                *g = u * (p - if j == target { F::one() } else { F::zero() });
            }
            sink(logits, d);
        });
        Ok(self.push(v, na, false, back))
    }

    /// Summed row-wise KL divergence D(p ‖ q) with the q side floored at
    /// 1e-12 wherever p has mass. Gradients flow into both arguments.
    pub fn kl_div_rows(&mut self, p: TensorId, q: TensorId) -> Result<TensorId> {
        let v = Tensor::scalar(kl_divergence_rows(self.value(p), self.value(q))?);
        let (np, nq) = (self.needs(p), self.needs(q));
        let eps = F::from_c(KL_EPS);
        let back = bkfn(np || nq, move |nodes: &[Node<F>], up: &Tensor<F>, sink: &mut dyn FnMut(TensorId, Tensor<F>)| {
            let vp = &nodes[p].value;
            let vq = &nodes[q].value;
            let u = up.get(0, 0);
            if np {
                let mut d = Tensor::zeros(vp.rows(), vp.cols());
                for ((g, &pv), &qv) in d.data_mut().iter_mut().zip(vp.data().iter()).zip(vq.data().iter()) {
                    if pv > F::zero() {
                        *g = u * (pv.ln() - qv.max(eps).ln() + F::one());
                    }
                }
                sink(p, d);
            }
            if nq {
                let mut d = Tensor::zeros(vq.rows(), vq.cols());
                for ((g, &pv), &qv) in d.data_mut().iter_mut().zip(vp.data().iter()).zip(vq.data().iter()) {
                    if pv > F::zero() && qv > eps {
                        *g = -u * pv / qv;
                    }
                }
                sink(q, d);
            }
        });
        Ok(self.push(v, np || nq, false, back))
    }

    fn check_same(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(Error::Shape {
                op,
                detail: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        Ok(())
    }

    /// Reverse sweep from `root`, seeded with ones. Returns gradients for
    /// parameter leaves; intermediate gradients are dropped as they are
    /// consumed. Accumulation order is fixed by record order.
    pub fn backward(&self, root: TensorId) -> Result<Gradients<F>> {
        if root >= self.nodes.len() {
            return Err(Error::Contract(format!("backward root {} out of tape", root)));
        }
        let mut grads: Vec<Option<Tensor<F>>> = Vec::with_capacity(root + 1);
        grads.resize_with(root + 1, || None);
        let seed = self.value(root).map(|_| F::one());
        grads[root] = Some(seed);
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(back) = &node.back {
                back(&self.nodes, &g, &mut |pid, contrib| {
                    if !self.nodes[pid].needs_grad {
                        return;
                    }
                    debug_assert!(contrib.same_shape(&self.nodes[pid].value));
                    match &mut grads[pid] {
                        Some(acc) => acc.add_assign(&contrib),
                        slot => *slot = Some(contrib),
                    }
                });
            }
            if node.is_param {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn bkfn<F: Scalar>(
    needed: bool,
    f: impl Fn(&[Node<F>], &Tensor<F>, &mut dyn FnMut(TensorId, Tensor<F>)) + 'static,
) -> Option<BackFn<F>> {
    if needed {
        Some(Box::new(f))
    } else {
        None
    }
}
