//! Dense row-major f64 arrays and the small kernel set built on them.
//!
//! Every reduction runs in a fixed sequential order so results are
//! bit-reproducible across runs and platforms.

use crate::error::{Error, Result};

/// Dense multi-dimensional array, row-major, 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn fmt_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join("x"))
}

impl Tensor {
    /// Builds a tensor without scanning for non-finite values.
    ///
    /// Panics if the element count does not match the shape; use
    /// [`Tensor::checked`] for untrusted data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        let expect: usize = shape.iter().product();
        assert_eq!(
            expect,
            data.len(),
            "shape {} needs {} elements, got {}",
            fmt_shape(&shape),
            expect,
            data.len()
        );
        Tensor { shape, data }
    }

    /// Builds a tensor, rejecting shape/length disagreement and NaN/Inf.
    pub fn checked(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {} needs {} elements, got {}",
                fmt_shape(&shape),
                expect,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "element {pos} of tensor {} is {}",
                fmt_shape(&shape),
                data[pos]
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Tensor {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single element of a rank-0 or length-1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.data.len(),
            1,
            "item() on tensor {}",
            fmt_shape(&self.shape)
        );
        self.data[0]
    }

    /// Interprets the tensor as rows x cols where cols is the last axis.
    /// Rank-0/rank-1 tensors are a single row.
    pub fn row_view(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols.max(1), cols)
            }
        }
    }

    /// Exact rank-2 dimensions, or an error.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(Error::ShapeMismatch(format!(
                "expected a matrix, got {}",
                fmt_shape(&self.shape)
            )))
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Tensor {
        let expect: usize = shape.iter().product();
        assert_eq!(expect, self.data.len(), "reshape element count mismatch");
        self.shape = shape;
        self
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if !self.same_shape(other) {
            return Err(shape_err("add_assign", self, other));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if !self.same_shape(other) {
            return Err(shape_err("elementwise op", self, other));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Index of the largest element, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch(format!(
        "{op}: {} vs {}",
        fmt_shape(a.shape()),
        fmt_shape(b.shape())
    ))
}

/// a[m x k] . b[k x n]
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if k != kb {
        return Err(shape_err("matmul", a, b));
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let a_ik = ad[i * k + kk];
            let b_row = &bd[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row.iter()) {
                *o += a_ik * bv;
            }
        }
    }
    Ok(Tensor::new(vec![m, n], out))
}

/// a[m x k] . transpose(b[n x k])
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, kb) = b.dims2()?;
    if k != kb {
        return Err(shape_err("matmul_bt", a, b));
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let a_row = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &bd[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
    Ok(Tensor::new(vec![m, n], out))
}

/// transpose(a[m x k]) . g[m x n]
pub fn matmul_at(a: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (mg, n) = g.dims2()?;
    if m != mg {
        return Err(shape_err("matmul_at", a, g));
    }
    let mut out = vec![0.0; k * n];
    let ad = a.data();
    let gd = g.data();
    for i in 0..m {
        let g_row = &gd[i * n..(i + 1) * n];
        for kk in 0..k {
            let a_ik = ad[i * k + kk];
            let row = &mut out[kk * n..(kk + 1) * n];
            for (o, &gv) in row.iter_mut().zip(g_row.iter()) {
                *o += a_ik * gv;
            }
        }
    }
    Ok(Tensor::new(vec![k, n], out))
}

/// Temperature softmax over the last axis, max-subtracted for stability.
///
/// The denominator is accumulated over the exponentials in ascending value
/// order, which makes the result independent of element order: permuting
/// the input permutes the output exactly.
pub fn softmax(v: &Tensor, tau: f64) -> Result<Tensor> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::InvalidTemperature);
    }
    if v.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (rows, cols) = v.row_view();
    let mut out = vec![0.0; rows * cols];
    let mut exps = vec![0.0; cols];
    for r in 0..rows {
        let row = &v.data()[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (e, &x) in exps.iter_mut().zip(row.iter()) {
            *e = ((x - max) / tau).exp();
        }
        let mut ordered = exps.clone();
        ordered.sort_by(f64::total_cmp);
        let denom: f64 = ordered.iter().sum();
        for (o, &e) in out[r * cols..(r + 1) * cols].iter_mut().zip(exps.iter()) {
            *o = e / denom;
        }
    }
    Ok(Tensor::new(v.shape().to_vec(), out))
}

/// Mean squared error over all elements.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(shape_err("mse", a, b));
    }
    if a.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut acc = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        let d = x - y;
        acc += d * d;
    }
    Ok(acc / a.len() as f64)
}

/// Per-row L2 normalization (rows = all axes but the last).
pub fn l2_normalize_rows(v: &Tensor) -> Tensor {
    let (rows, cols) = v.row_view();
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &v.data()[r * cols..(r + 1) * cols];
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
        for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row.iter()) {
            *o = x * inv;
        }
    }
    Tensor::new(v.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn checked_rejects_nan() {
        let err = Tensor::checked(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn checked_rejects_bad_length() {
        let err = Tensor::checked(vec![3], vec![1.0]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn softmax_symmetry() {
        let out = softmax(&Tensor::new(vec![3], vec![0.0, 0.0, 0.0]), 1.0).unwrap();
        for &v in out.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_ln2() {
        // [ln 2, 0] at tau=1 -> [2/3, 1/3]
        let out = softmax(&Tensor::new(vec![2], vec![2.0f64.ln(), 0.0]), 1.0).unwrap();
        assert!((out.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((out.data()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_sharp_temperature() {
        // [0.02, 0] at tau=0.01 -> [e^2/(e^2+1), 1/(e^2+1)]
        let out = softmax(&Tensor::new(vec![2], vec![0.02, 0.0]), 0.01).unwrap();
        let e2 = 2.0f64.exp();
        assert!((out.data()[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((out.data()[1] - 1.0 / (e2 + 1.0)).abs() < 1e-12);
        assert!((out.data()[0] - 0.8808).abs() < 1e-4);
        assert!((out.data()[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let v = Tensor::new(vec![2], vec![1.0, 2.0]);
        assert!(matches!(
            softmax(&v, 0.0).unwrap_err(),
            Error::InvalidTemperature
        ));
        assert!(matches!(
            softmax(&v, -1.0).unwrap_err(),
            Error::InvalidTemperature
        ));
    }

    #[test]
    fn softmax_rejects_empty() {
        let v = Tensor::new(vec![0], vec![]);
        assert!(matches!(softmax(&v, 1.0).unwrap_err(), Error::EmptyInput));
    }

    #[test]
    fn mse_examples() {
        let a = Tensor::new(vec![2], vec![1.0, 0.0]);
        let b = Tensor::zeros(vec![2]);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &b).unwrap(), 0.5);
        let c = Tensor::new(vec![2], vec![2.0, -2.0]);
        assert_eq!(mse(&c, &b).unwrap(), 4.0);
    }

    #[test]
    fn mse_shape_mismatch() {
        let a = Tensor::zeros(vec![2]);
        let b = Tensor::zeros(vec![3]);
        assert!(matches!(mse(&a, &b).unwrap_err(), Error::ShapeMismatch(_)));
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let a = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 1.0, -1.0]);
        let b = Tensor::new(vec![3, 2], vec![2.0, 0.0, 1.0, -1.0, 0.5, 4.0]);
        let direct = matmul(&a, &b).unwrap();
        // b stored transposed, then contracted with matmul_bt
        let bt = Tensor::new(vec![2, 3], vec![2.0, 1.0, 0.5, 0.0, -1.0, 4.0]);
        let via_bt = matmul_bt(&a, &bt).unwrap();
        assert_eq!(direct, via_bt);
        // a stored transposed, then contracted with matmul_at
        let at = Tensor::new(vec![3, 2], vec![1.0, 3.0, -2.0, 1.0, 0.5, -1.0]);
        let via_at = matmul_at(&at, &b).unwrap();
        assert_eq!(direct, via_at);
    }

    #[test]
    fn l2_normalize_rows_unit_norm() {
        let v = Tensor::new(vec![2, 3], vec![3.0, 4.0, 0.0, 1.0, 1.0, 1.0]);
        let n = l2_normalize_rows(&v);
        for r in 0..2 {
            let norm: f64 = n.data()[r * 3..(r + 1) * 3].iter().map(|x| x * x).sum();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        /// softmax(perm(v)) == perm(softmax(v)) exactly.
        #[test]
        fn softmax_permutation_equivariant(
            v in proptest::collection::vec(-50.0f64..50.0, 1..12),
            seed in 0u64..1000,
        ) {
            let n = v.len();
            let mut perm: Vec<usize> = (0..n).collect();
            // Fisher-Yates with a tiny LCG so the permutation is arbitrary.
            let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
            for i in (1..n).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let j = (state >> 33) as usize % (i + 1);
                perm.swap(i, j);
            }
            let base = softmax(&Tensor::new(vec![n], v.clone()), 1.0).unwrap();
            let permuted_in: Vec<f64> = perm.iter().map(|&i| v[i]).collect();
            let out = softmax(&Tensor::new(vec![n], permuted_in), 1.0).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(out.data()[k].to_bits(), base.data()[i].to_bits());
            }
        }

        /// mse(a, b) == mse(b, a) bit-exactly.
        #[test]
        fn mse_symmetric(
            pairs in proptest::collection::vec((-1e6f64..1e6, -1e6f64..1e6), 1..64)
        ) {
            let a = Tensor::new(vec![pairs.len()], pairs.iter().map(|p| p.0).collect());
            let b = Tensor::new(vec![pairs.len()], pairs.iter().map(|p| p.1).collect());
            let ab = mse(&a, &b).unwrap();
            let ba = mse(&b, &a).unwrap();
            prop_assert_eq!(ab.to_bits(), ba.to_bits());
        }
    }
}
