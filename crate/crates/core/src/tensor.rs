//! Dense M-order tensors and the handful of multilinear products the
//! decomposition code needs.
//!
//! Storage is row-major ("last index fastest"). Mode unfoldings use the
//! opposite convention for their columns: for mode `m`, the remaining
//! indices are enumerated with the *lowest* mode fastest, so that the
//! unfolding of a rank-1 tensor `rho * w1 o w2 o ... o wM` along mode `m` is
//! exactly `rho * w_m * (w_M (x) ... (x) w_{m+1} (x) w_{m-1} (x) ... (x) w_1)^T`.
//! Every routine that pairs an unfolding with a Kronecker vector relies on
//! that ordering.
//!
//! Modes are zero-based throughout the library.

use nalgebra::DMatrix;

use crate::error::TensorError;

/// Tolerance used when checking that factor vectors have unit norm.
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected = checked_len(&dims)?;
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                expected,
                got: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self, TensorError> {
        let len = checked_len(&dims)?;
        Ok(Self {
            dims,
            data: vec![0.0; len],
        })
    }

    /// Builds a tensor by evaluating `f` at every multi-index in storage order.
    pub fn from_fn(
        dims: Vec<usize>,
        mut f: impl FnMut(&[usize]) -> f64,
    ) -> Result<Self, TensorError> {
        let len = checked_len(&dims)?;
        let mut data = Vec::with_capacity(len);
        let mut idx = vec![0usize; dims.len()];
        for _ in 0..len {
            data.push(f(&idx));
            increment(&mut idx, &dims);
        }
        Self::new(dims, data)
    }

    /// Wraps data already known to be finite and correctly sized.
    pub(crate) fn from_parts_unchecked(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Flat storage offset of a multi-index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        idx.iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Full contraction `<self, other>`.
    pub fn inner(&self, other: &Tensor) -> Result<f64, TensorError> {
        self.same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn scaled(&self, s: f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.same_shape(other)?;
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    fn same_shape(&self, other: &Tensor) -> Result<(), TensorError> {
        if self.dims != other.dims {
            return Err(TensorError::ShapeMismatch {
                expected: self.dims.clone(),
                got: other.dims.clone(),
            });
        }
        Ok(())
    }
}

fn checked_len(dims: &[usize]) -> Result<usize, TensorError> {
    if dims.is_empty() {
        return Err(TensorError::NoModes);
    }
    if let Some(mode) = dims.iter().position(|&d| d == 0) {
        return Err(TensorError::ZeroDimension { mode });
    }
    Ok(dims.iter().product())
}

/// Advances a row-major multi-index in place.
fn increment(idx: &mut [usize], dims: &[usize]) {
    for k in (0..dims.len()).rev() {
        idx[k] += 1;
        if idx[k] < dims[k] {
            return;
        }
        idx[k] = 0;
    }
}

/// Column strides of the mode-`mode` unfolding: lowest remaining mode fastest.
fn unfold_strides(dims: &[usize], mode: usize) -> Vec<usize> {
    let mut strides = vec![0; dims.len()];
    let mut s = 1;
    for (k, &d) in dims.iter().enumerate() {
        if k != mode {
            strides[k] = s;
            s *= d;
        }
    }
    strides
}

/// Mode-`mode` matricization, shape `I_mode x prod_{k != mode} I_k`.
pub fn mode_unfold(t: &Tensor, mode: usize) -> Result<DMatrix<f64>, TensorError> {
    let order = t.order();
    if mode >= order {
        return Err(TensorError::ModeOutOfRange { mode, order });
    }
    let rows = t.dims[mode];
    let cols = t.len() / rows;
    let strides = unfold_strides(&t.dims, mode);
    let mut out = DMatrix::zeros(rows, cols);
    let mut idx = vec![0usize; order];
    for &v in &t.data {
        let col: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out[(idx[mode], col)] = v;
        increment(&mut idx, &t.dims);
    }
    Ok(out)
}

/// Inverse of [`mode_unfold`].
pub fn mode_fold(m: &DMatrix<f64>, mode: usize, dims: &[usize]) -> Result<Tensor, TensorError> {
    let len = checked_len(dims)?;
    if mode >= dims.len() {
        return Err(TensorError::ModeOutOfRange {
            mode,
            order: dims.len(),
        });
    }
    if m.nrows() != dims[mode] || m.nrows() * m.ncols() != len {
        return Err(TensorError::ShapeMismatch {
            expected: vec![dims[mode], len / dims[mode]],
            got: vec![m.nrows(), m.ncols()],
        });
    }
    let strides = unfold_strides(dims, mode);
    let mut data = Vec::with_capacity(len);
    let mut idx = vec![0usize; dims.len()];
    for _ in 0..len {
        let col: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        data.push(m[(idx[mode], col)]);
        increment(&mut idx, dims);
    }
    Tensor::new(dims.to_vec(), data)
}

/// `u (x) v` with `result[i * len(v) + j] = u[i] * v[j]`.
pub fn kronecker(u: &[f64], v: &[f64]) -> Result<Vec<f64>, TensorError> {
    if u.is_empty() || v.is_empty() {
        return Err(TensorError::EmptyInput);
    }
    Ok(u.iter()
        .flat_map(|&a| v.iter().map(move |&b| a * b))
        .collect())
}

/// Kronecker product of the factors of every mode except `skip`, ordered
/// highest mode first (`w_M (x) ... (x) w_1`), matching [`mode_unfold`].
///
/// With a single mode the result is the scalar `[1.0]`.
pub fn kronecker_except(factors: &[Vec<f64>], skip: usize) -> Vec<f64> {
    let mut acc = vec![1.0];
    for (k, w) in factors.iter().enumerate().rev() {
        if k == skip {
            continue;
        }
        acc = acc
            .iter()
            .flat_map(|&a| w.iter().map(move |&b| a * b))
            .collect();
    }
    acc
}

/// Column-wise Kronecker product of `a` (I x R) and `b` (J x R).
pub fn khatri_rao(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>, TensorError> {
    if a.ncols() != b.ncols() {
        return Err(TensorError::ColumnMismatch {
            left: a.ncols(),
            right: b.ncols(),
        });
    }
    if a.nrows() == 0 || b.nrows() == 0 || a.ncols() == 0 {
        return Err(TensorError::EmptyInput);
    }
    let (i, j) = (a.nrows(), b.nrows());
    Ok(DMatrix::from_fn(i * j, a.ncols(), |row, r| {
        a[(row / j, r)] * b[(row % j, r)]
    }))
}

/// `rho * ws[0] o ws[1] o ... o ws[M-1]`; every factor must be unit norm.
pub fn outer_rank1(rho: f64, ws: &[Vec<f64>]) -> Result<Tensor, TensorError> {
    if ws.is_empty() {
        return Err(TensorError::NoModes);
    }
    for (mode, w) in ws.iter().enumerate() {
        if w.is_empty() {
            return Err(TensorError::ZeroDimension { mode });
        }
        let norm = l2_norm(w);
        if (norm - 1.0).abs() > UNIT_NORM_TOL || !norm.is_finite() {
            return Err(TensorError::NotUnitNorm { mode, norm });
        }
    }
    if !rho.is_finite() {
        return Err(TensorError::NonFinite { index: 0 });
    }
    Ok(outer_product(rho, ws))
}

/// Outer product without the unit-norm contract (zero factors allowed).
pub(crate) fn outer_product(rho: f64, ws: &[Vec<f64>]) -> Tensor {
    let dims: Vec<usize> = ws.iter().map(Vec::len).collect();
    let mut data = vec![rho];
    for w in ws {
        data = data
            .iter()
            .flat_map(|&a| w.iter().map(move |&b| a * b))
            .collect();
    }
    Tensor::from_parts_unchecked(dims, data)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Factor matrices of a rank-R decomposition; `weights[r]` carries the
/// scale of component `r`, columns are unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorMatrices {
    pub factors: Vec<DMatrix<f64>>,
    pub weights: Vec<f64>,
}

impl FactorMatrices {
    pub fn rank(&self) -> usize {
        self.weights.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.nrows()).collect()
    }

    /// Column `r` of every factor matrix.
    pub fn component(&self, r: usize) -> Vec<Vec<f64>> {
        self.factors
            .iter()
            .map(|f| f.column(r).iter().copied().collect())
            .collect()
    }

    /// Dense reconstruction `sum_r weights[r] * outer(columns r)`.
    pub fn reconstruct(&self) -> Tensor {
        let dims = self.dims();
        let mut acc = vec![0.0; dims.iter().product()];
        for r in 0..self.rank() {
            let term = outer_product(self.weights[r], &self.component(r));
            for (a, t) in acc.iter_mut().zip(term.data()) {
                *a += t;
            }
        }
        Tensor::from_parts_unchecked(dims, acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(dims: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = l2_norm(&v);
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert_eq!(Tensor::new(vec![], vec![]), Err(TensorError::NoModes));
        assert!(matches!(
            Tensor::new(vec![2, 0], vec![]),
            Err(TensorError::ZeroDimension { mode: 1 })
        ));
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(TensorError::LengthMismatch { .. })
        ));
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(TensorError::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn unfold_order2_is_identity() {
        let t = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let m = mode_unfold(&t, 0).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 3, &[1., 2., 3., 4., 5., 6.]));
    }

    #[test]
    fn unfold_rank1_basis_example() {
        let t = outer_product(1.0, &[vec![1., 0.], vec![1., 1.], vec![2.]]);
        let m = mode_unfold(&t, 0).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[2., 2., 0., 0.]));
    }

    #[test]
    fn unfold_matches_index_map_bruteforce() {
        let t = random_tensor(vec![2, 3, 4], 1);
        for mode in 0..3 {
            let m = mode_unfold(&t, mode).unwrap();
            for i0 in 0..2 {
                for i1 in 0..3 {
                    for i2 in 0..4 {
                        let idx = [i0, i1, i2];
                        // lowest remaining mode fastest
                        let others: Vec<usize> = (0..3).filter(|&k| k != mode).collect();
                        let col = idx[others[0]] + t.dims()[others[0]] * idx[others[1]];
                        assert_eq!(m[(idx[mode], col)], t.get(&idx));
                    }
                }
            }
        }
    }

    #[test]
    fn unfold_out_of_range() {
        let t = random_tensor(vec![2, 2], 0);
        assert!(matches!(
            mode_unfold(&t, 2),
            Err(TensorError::ModeOutOfRange { mode: 2, order: 2 })
        ));
    }

    #[test]
    fn fold_inverts_unfold_exactly() {
        let t = random_tensor(vec![3, 2, 4, 2], 5);
        for mode in 0..4 {
            let m = mode_unfold(&t, mode).unwrap();
            assert_eq!(mode_fold(&m, mode, t.dims()).unwrap(), t);
        }
    }

    #[test]
    fn rank1_unfold_matches_kronecker_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dims = [3usize, 4, 2, 5];
        let ws: Vec<Vec<f64>> = dims
            .iter()
            .map(|&d| unit((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let rho = 2.5;
        let t = outer_rank1(rho, &ws).unwrap();
        for mode in 0..dims.len() {
            let m = mode_unfold(&t, mode).unwrap();
            let k = kronecker_except(&ws, mode);
            for i in 0..dims[mode] {
                for (c, kc) in k.iter().enumerate() {
                    assert!((m[(i, c)] - rho * ws[mode][i] * kc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn kronecker_examples() {
        assert_eq!(kronecker(&[1., 2.], &[3.]).unwrap(), vec![3., 6.]);
        assert_eq!(
            kronecker(&[1., 0.], &[1., 0., 0.]).unwrap(),
            vec![1., 0., 0., 0., 0., 0.]
        );
        assert_eq!(kronecker(&[], &[1.]), Err(TensorError::EmptyInput));
    }

    #[test]
    fn khatri_rao_examples() {
        let a = DMatrix::from_row_slice(2, 1, &[1., 2.]);
        let b = DMatrix::from_row_slice(2, 1, &[3., 4.]);
        let kr = khatri_rao(&a, &b).unwrap();
        assert_eq!(kr.as_slice(), kronecker(&[1., 2.], &[3., 4.]).unwrap().as_slice());

        let eye = DMatrix::<f64>::identity(2, 2);
        let kr = khatri_rao(&eye, &eye).unwrap();
        assert_eq!(kr.column(0).as_slice(), &[1., 0., 0., 0.]);
        assert_eq!(kr.column(1).as_slice(), &[0., 0., 0., 1.]);

        let c = DMatrix::<f64>::zeros(2, 3);
        assert!(matches!(
            khatri_rao(&eye, &c),
            Err(TensorError::ColumnMismatch { left: 2, right: 3 })
        ));
    }

    #[test]
    fn khatri_rao_random_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        let kr = khatri_rao(&a, &b).unwrap();
        for r in 0..2 {
            let col_a: Vec<f64> = a.column(r).iter().copied().collect();
            let col_b: Vec<f64> = b.column(r).iter().copied().collect();
            let expected = kronecker(&col_a, &col_b).unwrap();
            assert_eq!(kr.column(r).iter().copied().collect::<Vec<_>>(), expected);
        }
    }

    #[test]
    fn outer_rank1_examples() {
        let ws = vec![vec![0., 1.], vec![1., 0., 0.]];
        let zero = outer_rank1(0.0, &ws).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let one = outer_rank1(1.0, &ws).unwrap();
        assert_eq!(one.get(&[1, 0]), 1.0);
        assert_eq!(one.data().iter().filter(|&&v| v != 0.0).count(), 1);
        assert!(matches!(
            outer_rank1(1.0, &[vec![1., 1.]]),
            Err(TensorError::NotUnitNorm { mode: 0, .. })
        ));
    }

    #[test]
    fn outer_rank1_norm_is_abs_rho() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let ws: Vec<Vec<f64>> = [3usize, 2, 5]
                .iter()
                .map(|&d| unit((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()))
                .collect();
            let rho: f64 = rng.random_range(-4.0..4.0);
            let t = outer_rank1(rho, &ws).unwrap();
            assert!((t.frobenius_norm() - rho.abs()).abs() < 1e-12);
        }
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn kronecker_norm_is_multiplicative(
                u in prop::collection::vec(-10.0f64..10.0, 1..8),
                v in prop::collection::vec(-10.0f64..10.0, 1..8),
            ) {
                let k = kronecker(&u, &v).unwrap();
                let lhs = l2_norm(&k);
                let rhs = l2_norm(&u) * l2_norm(&v);
                prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs));
            }

            #[test]
            fn unfold_fold_roundtrip(
                dims in prop::collection::vec(1usize..4, 1..5),
                seed in any::<u64>(),
                mode_pick in any::<usize>(),
            ) {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let t = Tensor::from_fn(dims.clone(), |_| rng.random_range(-1.0..1.0)).unwrap();
                let mode = mode_pick % dims.len();
                let m = mode_unfold(&t, mode).unwrap();
                prop_assert_eq!(mode_fold(&m, mode, &dims).unwrap(), t);
            }
        }
    }
}
