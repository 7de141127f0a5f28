use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major matrix. Vectors are 1×d or d×1, scalars 1×1.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: F) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                detail: format!("{}x{} needs {} values, got {}", rows, cols, rows * cols, data.len()),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Shape {
                    op: "from_rows",
                    detail: "ragged rows".into(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor { rows: r, cols: c, data })
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: F) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    /// self += k * other
    pub fn add_scaled(&mut self, other: &Self, k: F) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += k * b;
        }
    }

    pub fn scale_in_place(&mut self, k: F) {
        for a in self.data.iter_mut() {
            *a *= k;
        }
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> F {
        debug_assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(F::zero(), F::max)
    }
}

fn shape_err(op: &'static str, a: &(usize, usize), b: &(usize, usize)) -> Error {
    Error::Shape {
        op,
        detail: format!("{}x{} vs {}x{}", a.0, a.1, b.0, b.1),
    }
}

/// a (m×k) · b (k×n)
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.cols != b.rows {
        return Err(shape_err("matmul", &a.shape(), &b.shape()));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for kk in 0..k {
            let av = arow[kk];
            if av == F::zero() {
                continue;
            }
            let brow = &b.data[kk * n..(kk + 1) * n];
            for t in 0..n {
                orow[t] += av * brow[t];
            }
        }
    }
    Ok(out)
}

/// a (m×k) · bᵀ where b is n×k. Four output cells share one pass over the
/// left row so the dot products pipeline; each cell still accumulates in
/// ascending k order, so results match the naive loop bit for bit.
pub fn matmul_nt<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.cols != b.cols {
        return Err(shape_err("matmul_nt", &a.shape(), &b.shape()));
    }
    let (m, n, k) = (a.rows, b.rows, a.cols);
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        let ar = a.row(i);
        let mut j = 0;
        while j + 4 <= n {
            let b0 = b.row(j);
            let b1 = b.row(j + 1);
            let b2 = b.row(j + 2);
            let b3 = b.row(j + 3);
            let (mut s0, mut s1, mut s2, mut s3) = (F::zero(), F::zero(), F::zero(), F::zero());
            for t in 0..k {
                let x = ar[t];
                s0 += x * b0[t];
                s1 += x * b1[t];
                s2 += x * b2[t];
                s3 += x * b3[t];
            }
            data.extend([s0, s1, s2, s3]);
            j += 4;
        }
        while j < n {
            let br = b.row(j);
            let mut s = F::zero();
            for t in 0..k {
                s += ar[t] * br[t];
            }
            data.push(s);
            j += 1;
        }
    }
    Tensor::from_vec(m, n, data)
}

/// aᵀ · b where a is k×m, b is k×n
pub fn matmul_tn<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.rows != b.rows {
        return Err(shape_err("matmul_tn", &a.shape(), &b.shape()));
    }
    let (k, m, n) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(m, n);
    for kk in 0..k {
        let arow = a.row(kk);
        let brow = b.row(kk);
        for i in 0..m {
            let av = arow[i];
            if av == F::zero() {
                continue;
            }
            let orow = &mut out.data[i * n..(i + 1) * n];
            for t in 0..n {
                orow[t] += av * brow[t];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small() {
        let a = t(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(3, 2, &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_variants_agree_with_explicit_transpose() {
        let a = t(2, 3, &[1.0, -2.0, 3.0, 0.5, 5.0, -6.0]);
        let b = t(4, 3, &[7.0, 8.0, 9.0, 1.0, -1.0, 2.0, 0.0, 3.0, 4.0, 2.0, 2.0, 2.0]);
        let nt = matmul_nt(&a, &b).unwrap();
        let via_t = matmul(&a, &b.transpose()).unwrap();
        assert_eq!(nt, via_t);

        let c = t(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let d = t(3, 4, &[1.0; 12]);
        let tn = matmul_tn(&c, &d).unwrap();
        let via_t2 = matmul(&c.transpose(), &d).unwrap();
        assert_eq!(tn, via_t2);
    }

    #[test]
    fn matmul_rejects_shape_mismatch() {
        let a = t(2, 3, &[0.0; 6]);
        let b = t(2, 3, &[0.0; 6]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn eye_and_transpose() {
        let a = t(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let i3 = Tensor::<f64>::eye(3);
        assert_eq!(matmul(&a, &i3).unwrap(), a);
        assert_eq!(a.transpose().get(2, 1), 6.0);
    }

    #[test]
    fn generic_over_f32() {
        let a = Tensor::<f32>::from_vec(1, 2, vec![1.5, 2.5]).unwrap();
        let b = Tensor::<f32>::from_vec(2, 1, vec![2.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().get(0, 0), 13.0);
    }
}
