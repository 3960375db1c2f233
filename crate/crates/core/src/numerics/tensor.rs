use serde::{Deserialize, Serialize};

use super::{NumericsError, Real, NORM_EPS};

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, NumericsError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(NumericsError::BadLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(NumericsError::ShapeMismatch {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self, NumericsError> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns of a rank-2 tensor. Panics on other ranks.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected a matrix, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, NumericsError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(NumericsError::BadLength {
                shape: shape.to_vec(),
                len: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = self.dims2();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn convert<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn norm_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = a' @ b' + beta * c`, where `a'` is `a` (m x k) or, when `trans_a`,
/// the transpose of a stored k x m matrix; likewise for `b'` (k x n).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the length assertion above covers every (row, col) addressed by
    // the strides chosen for each layout.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (m, k) = a.dims2();
    let n = b.shape[1];
    let mut out = Tensor::zeros(&[m, n]);
    gemm(false, false, m, k, n, &a.data, &b.data, T::zero(), &mut out.data);
    Ok(out)
}

/// Result of [`l2_normalize`]; `clamped` is set when the input norm fell
/// below the floor and the denominator was clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized<T> {
    pub values: Vec<T>,
    pub clamped: bool,
}

pub fn l2_normalize<T: Real>(v: &[T]) -> Normalized<T> {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    let eps = T::of(NORM_EPS);
    let clamped = norm <= eps;
    if clamped {
        log::warn!("l2_normalize: norm {norm} below {NORM_EPS}, clamping denominator");
    }
    let denom = if clamped { eps } else { norm };
    Normalized {
        values: v.iter().map(|&x| x / denom).collect(),
        clamped,
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(m: &Tensor<T>) -> Tensor<T> {
    let (rows, cols) = m.dims2();
    let mut out = m.clone();
    for r in 0..rows {
        softmax_in_place(&mut out.data[r * cols..(r + 1) * cols]);
    }
    out
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = a.dims2();
        let (_, n) = b.dims2();
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.at(i, p) * b.at(p, j);
                }
                out.data_mut()[i * n + j] = acc;
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let eye = Tensor::<f64>::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let col = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&eye, &col).unwrap(), col);
        let two = Tensor::<f64>::from_rows(&[vec![2.0]]).unwrap();
        let three = Tensor::from_rows(&[vec![3.0]]).unwrap();
        assert_eq!(matmul(&two, &three).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = random(&mut rng, &[3, 4]);
            let b = random(&mut rng, &[4, 2]);
            assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(
            matmul(&a, &b),
            Err(NumericsError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn transposed_gemm_layouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, &[5, 3]);
        let b = random(&mut rng, &[5, 4]);
        let mut c = vec![0.0; 12];
        gemm(true, false, 3, 5, 4, a.data(), b.data(), 0.0, &mut c);
        let expect = naive_matmul(&a.transpose(), &b);
        let got = Tensor::new(vec![3, 4], c).unwrap();
        assert!(got.max_abs_diff(&expect) < 1e-12);

        let d = random(&mut rng, &[4, 3]);
        let mut e = vec![0.0; 20];
        gemm(false, true, 5, 3, 4, a.data(), d.data(), 0.0, &mut e);
        let expect = naive_matmul(&a, &d.transpose());
        assert!(Tensor::new(vec![5, 4], e).unwrap().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn normalize_cases() {
        let n = l2_normalize(&[3.0f64, 4.0]);
        assert!((n.values[0] - 0.6).abs() < 1e-15 && (n.values[1] - 0.8).abs() < 1e-15);
        assert!(!n.clamped);
        assert_eq!(l2_normalize(&[0.0f64, 1.0, 0.0]).values, vec![0.0, 1.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v: Vec<f64> = (0..10).map(|_| rng.random_range(-5.0..5.0)).collect();
        let out = l2_normalize(&v).values;
        let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn normalize_zero_vector_is_clamped() {
        let n = l2_normalize(&[0.0f64, 0.0]);
        assert!(n.clamped);
        assert!(n.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_cases() {
        let s = softmax_rows(&Tensor::<f64>::from_rows(&[vec![0.0, 0.0]]).unwrap());
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::<f64>::from_rows(&[vec![1000.0, 0.0]]).unwrap());
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-300);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random(&mut rng, &[4, 3]);
        let s = softmax_rows(&m);
        for r in 0..4 {
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(values in prop::collection::vec(-1e3f64..1e3, 12)) {
                let s = softmax_rows(&Tensor::new(vec![3, 4], values).unwrap());
                for r in 0..3 {
                    let total: f64 = s.row(r).iter().sum();
                    prop_assert!((total - 1.0).abs() < 1e-9);
                    prop_assert!(s.row(r).iter().all(|&v| v >= 0.0));
                }
            }

            #[test]
            fn normalized_output_is_unit(values in prop::collection::vec(-1e3f64..1e3, 1..16)) {
                let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assume!(norm > 1e-6);
                let out = l2_normalize(&values).values;
                let n = out.iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-9);
            }
        }
    }
}
