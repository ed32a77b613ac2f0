//! Alternating least squares for PARAFAC / CP decompositions.
//!
//! Three entry points:
//!
//! * [`als_rank1`]: the rank-one power-style ALS used to extract one set of
//!   projectors per latent dimension.
//! * [`als_rank_r`]: rank-R ALS with the Khatri-Rao / Hadamard-Gram
//!   pseudoinverse update.
//! * [`penalized_als_rank1`]: rank-one ALS where each element update is the
//!   closed-form L0 / L0.5 / L1 thresholded coefficient, followed by
//!   renormalization of the whole factor. Elements outside the per-mode
//!   penalizable set pass through unchanged.
//!
//! Modes are swept in ascending order. After convergence the largest-magnitude
//! element of every factor except the last is made nonnegative; the last
//! factor absorbs the sign flips so that `rho >= 0`.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::ParafacError;
use crate::tensor::{
    dot, khatri_rao, kronecker_except, l2_norm, mode_unfold, outer_product, FactorMatrices, Tensor,
};
use crate::thresholding::{ls_coefficient, PenaltySpec};

/// Relative eigenvalue floor for the Hadamard-Gram pseudoinverse.
const PINV_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Default)]
pub enum AlsInit {
    /// All-ones vectors, normalized.
    #[default]
    DeterministicUniform,
    /// Leading left singular vectors of each mode unfolding.
    UnfoldSvdLike,
    /// Warm start from factors of an earlier decomposition (rank one).
    PreviousFactors(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlsConfig {
    pub max_iterations: usize,
    /// Stop when `max_m |w_new - w_old| / |w_old|` drops below this.
    pub tolerance: f64,
    pub init: AlsInit,
}

impl Default for AlsConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-6,
            init: AlsInit::DeterministicUniform,
        }
    }
}

impl AlsConfig {
    pub fn validate(&self) -> Result<(), ParafacError> {
        if self.max_iterations == 0 {
            return Err(ParafacError::InvalidConfig("max_iterations must be >= 1".into()));
        }
        if !(self.tolerance > 0.0) || !self.tolerance.is_finite() {
            return Err(ParafacError::InvalidConfig(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        Ok(())
    }
}

/// Unit-norm factors `w^1..w^M` and the weight `rho` of one rank-1 term.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorSet {
    pub factors: Vec<Vec<f64>>,
    pub rho: f64,
}

impl ProjectorSet {
    pub fn reconstruct(&self) -> Tensor {
        outer_product(self.rho, &self.factors)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.factors.iter().map(Vec::len).collect()
    }
}

/// Per-mode sets of element indices that may still be penalized; every
/// index outside the set is protected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtectionSet {
    penalizable: Vec<BTreeSet<usize>>,
}

impl ProtectionSet {
    /// Every element of every mode penalizable.
    pub fn all(dims: &[usize]) -> Self {
        Self {
            penalizable: dims.iter().map(|&d| (0..d).collect()).collect(),
        }
    }

    /// Everything protected.
    pub fn none(modes: usize) -> Self {
        Self {
            penalizable: vec![BTreeSet::new(); modes],
        }
    }

    pub fn from_sets(penalizable: Vec<BTreeSet<usize>>) -> Self {
        Self { penalizable }
    }

    pub fn modes(&self) -> usize {
        self.penalizable.len()
    }

    pub fn penalizable(&self, mode: usize) -> &BTreeSet<usize> {
        &self.penalizable[mode]
    }

    pub fn is_penalizable(&self, mode: usize, index: usize) -> bool {
        self.penalizable
            .get(mode)
            .is_some_and(|set| set.contains(&index))
    }

    /// Same sets with an extra, fully protected mode appended.
    pub fn with_protected_mode(&self) -> Self {
        let mut penalizable = self.penalizable.clone();
        penalizable.push(BTreeSet::new());
        Self { penalizable }
    }

    pub fn into_sets(self) -> Vec<BTreeSet<usize>> {
        self.penalizable
    }
}

/// Removes from each mode's penalizable set the indices where the factor is
/// nonzero. Thresholding writes literal zeros, so the test is exact.
pub fn update_protection_set(
    prev: &ProtectionSet,
    ps: &ProjectorSet,
) -> Result<ProtectionSet, ParafacError> {
    if prev.modes() > ps.factors.len() {
        return Err(ParafacError::ProtectionArity(prev.modes(), ps.factors.len()));
    }
    let penalizable = prev
        .penalizable
        .iter()
        .zip(&ps.factors)
        .map(|(set, w)| {
            if let Some(&max) = set.iter().next_back() {
                if max >= w.len() {
                    return Err(ParafacError::InitShape);
                }
            }
            Ok(set.iter().copied().filter(|&j| w[j] == 0.0).collect())
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ProtectionSet { penalizable })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitStatus {
    Converged,
    MaxIterations,
    /// A Kronecker vector (or an unpenalized update) vanished; the last
    /// valid projectors are returned.
    Collapsed,
    /// Thresholding zeroed every element of this mode; the factor is the
    /// zero vector and `rho = 0`.
    Annihilated { mode: usize },
}

impl FitStatus {
    pub fn is_degraded(self) -> bool {
        matches!(self, FitStatus::Collapsed | FitStatus::Annihilated { .. })
    }
}

#[derive(Debug, Clone)]
pub struct Rank1Fit {
    pub projectors: ProjectorSet,
    /// `|v - rho * outer(factors)|`
    pub residual_norm: f64,
    pub status: FitStatus,
    pub iterations: usize,
    /// Objective value after each full sweep (squared residual, plus the
    /// penalty term for penalized fits).
    pub objective_history: Vec<f64>,
}

/// Rank-one ALS.
pub fn als_rank1(v: &Tensor, cfg: &AlsConfig) -> Result<Rank1Fit, ParafacError> {
    cfg.validate()?;
    if v.frobenius_norm() == 0.0 {
        return Err(ParafacError::ZeroTensor);
    }
    let rows = unfold_rows(v)?;
    let init = initial_factors(v, &rows, &cfg.init)?;
    Ok(run_rank1(v, &rows, init, None, cfg))
}

/// Rank-one ALS with element-wise L0 / L0.5 / L1 thresholding.
///
/// `penalties[m]` is the penalty of mode `m` (`None` leaves the mode
/// unpenalized). The penalized sweeps start from the converged unpenalized
/// solution; when no element is effectively penalized that solution is
/// returned as is.
pub fn penalized_als_rank1(
    v: &Tensor,
    penalties: &[Option<PenaltySpec>],
    protection: &ProtectionSet,
    cfg: &AlsConfig,
) -> Result<Rank1Fit, ParafacError> {
    cfg.validate()?;
    if penalties.len() != v.order() {
        return Err(ParafacError::PenaltyArity(penalties.len(), v.order()));
    }
    if protection.modes() != v.order() {
        return Err(ParafacError::ProtectionArity(protection.modes(), v.order()));
    }
    for (m, set) in protection.penalizable.iter().enumerate() {
        if set.iter().next_back().is_some_and(|&j| j >= v.dims()[m]) {
            return Err(ParafacError::InitShape);
        }
    }
    if v.frobenius_norm() == 0.0 {
        return Err(ParafacError::ZeroTensor);
    }
    let rows = unfold_rows(v)?;
    let init = initial_factors(v, &rows, &cfg.init)?;
    let warm = run_rank1(v, &rows, init, None, cfg);

    let active = penalties
        .iter()
        .enumerate()
        .any(|(m, p)| p.is_some_and(|p| p.lambda > 0.0) && !protection.penalizable(m).is_empty());
    if !active || warm.status.is_degraded() {
        return Ok(warm);
    }
    let start = warm.projectors.factors;
    Ok(run_rank1(v, &rows, start, Some((penalties, protection)), cfg))
}

type Penalty<'a> = (&'a [Option<PenaltySpec>], &'a ProtectionSet);

fn unfold_rows(v: &Tensor) -> Result<Vec<Vec<Vec<f64>>>, ParafacError> {
    (0..v.order())
        .map(|m| {
            let u = mode_unfold(v, m)?;
            Ok(u.row_iter().map(|r| r.iter().copied().collect()).collect())
        })
        .collect()
}

fn initial_factors(
    v: &Tensor,
    rows: &[Vec<Vec<f64>>],
    init: &AlsInit,
) -> Result<Vec<Vec<f64>>, ParafacError> {
    match init {
        AlsInit::DeterministicUniform => Ok(v
            .dims()
            .iter()
            .map(|&d| vec![1.0 / (d as f64).sqrt(); d])
            .collect()),
        AlsInit::UnfoldSvdLike => Ok(rows.iter().map(|r| leading_left_vector(r)).collect()),
        AlsInit::PreviousFactors(prev) => {
            if prev.len() != v.order() || prev.iter().zip(v.dims()).any(|(w, &d)| w.len() != d) {
                return Err(ParafacError::InitShape);
            }
            prev.iter()
                .map(|w| {
                    let n = l2_norm(w);
                    if n == 0.0 || !n.is_finite() {
                        Err(ParafacError::InitShape)
                    } else {
                        Ok(w.iter().map(|x| x / n).collect())
                    }
                })
                .collect()
        }
    }
}

/// Dominant left singular vector of a row-stored matrix by power iteration
/// on `A A^T`, started from the all-ones vector.
fn leading_left_vector(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len();
    let mut w = vec![1.0 / (n as f64).sqrt(); n];
    for _ in 0..30 {
        let cols = rows[0].len();
        let mut at_w = vec![0.0; cols];
        for (r, &wi) in rows.iter().zip(&w) {
            for (a, x) in at_w.iter_mut().zip(r) {
                *a += wi * x;
            }
        }
        let next: Vec<f64> = rows.iter().map(|r| dot(r, &at_w)).collect();
        let norm = l2_norm(&next);
        if norm == 0.0 {
            break;
        }
        w = next.into_iter().map(|x| x / norm).collect();
    }
    w
}

fn relative_change(new: &[f64], old: &[f64]) -> f64 {
    let diff: f64 = new.iter().zip(old).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let base = l2_norm(old);
    if base == 0.0 {
        diff.sqrt()
    } else {
        diff.sqrt() / base
    }
}

fn objective(v: &Tensor, ps: &ProjectorSet, penalty: Option<Penalty<'_>>) -> f64 {
    let recon = ps.reconstruct();
    let mut value: f64 = v
        .data()
        .iter()
        .zip(recon.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    if let Some((specs, protection)) = penalty {
        for (m, spec) in specs.iter().enumerate() {
            if let Some(spec) = spec {
                value += spec.lambda
                    * protection
                        .penalizable(m)
                        .iter()
                        .map(|&j| spec.order.penalty(ps.factors[m][j]))
                        .sum::<f64>();
            }
        }
    }
    value
}

fn finish(
    v: &Tensor,
    mut ps: ProjectorSet,
    status: FitStatus,
    iterations: usize,
    objective_history: Vec<f64>,
) -> Rank1Fit {
    if !matches!(status, FitStatus::Annihilated { .. }) {
        canonicalize_signs(&mut ps.factors, &mut ps.rho);
    }
    let recon = ps.reconstruct();
    let residual_norm = v
        .data()
        .iter()
        .zip(recon.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    Rank1Fit {
        projectors: ps,
        residual_norm,
        status,
        iterations,
        objective_history,
    }
}

/// Makes the largest-magnitude entry of each factor but the last
/// nonnegative, pushing sign flips into the last factor, then makes `rho`
/// nonnegative through the last factor as well.
fn canonicalize_signs(factors: &mut [Vec<f64>], rho: &mut f64) {
    let last = factors.len() - 1;
    let mut flip_last = false;
    for w in factors[..last].iter_mut() {
        if let Some(pivot) = largest_magnitude(w) {
            if pivot < 0.0 {
                w.iter_mut().for_each(|x| *x = -*x);
                flip_last = !flip_last;
            }
        }
    }
    if *rho < 0.0 {
        *rho = -*rho;
        flip_last = !flip_last;
    }
    if flip_last {
        factors[last].iter_mut().for_each(|x| *x = -*x);
    }
}

fn largest_magnitude(w: &[f64]) -> Option<f64> {
    let mut best: Option<f64> = None;
    for &x in w {
        if best.is_none_or(|b| x.abs() > b.abs()) {
            best = Some(x);
        }
    }
    best
}

fn run_rank1(
    v: &Tensor,
    rows: &[Vec<Vec<f64>>],
    mut factors: Vec<Vec<f64>>,
    penalty: Option<Penalty<'_>>,
    cfg: &AlsConfig,
) -> Rank1Fit {
    let order = v.order();
    let mut rho = {
        let start = outer_product(1.0, &factors);
        dot(v.data(), start.data())
    };
    let mut history = Vec::new();
    if penalty.is_some() {
        history.push(objective(v, &ProjectorSet { factors: factors.clone(), rho }, penalty));
    }

    for it in 1..=cfg.max_iterations {
        let previous = factors.clone();
        let previous_rho = rho;
        for m in 0..order {
            let k = kronecker_except(&factors, m);
            let kappa2 = dot(&k, &k);
            if kappa2 == 0.0 {
                let ps = ProjectorSet {
                    factors: previous,
                    rho: previous_rho,
                };
                return finish(v, ps, FitStatus::Collapsed, it, history);
            }
            let spec = penalty.and_then(|(specs, _)| specs[m]);
            let updated: Vec<f64> = rows[m]
                .iter()
                .enumerate()
                .map(|(j, row)| {
                    let w_ls = ls_coefficient(row, &k).expect("kappa2 checked above");
                    match (spec, penalty) {
                        (Some(spec), Some((_, protection))) => {
                            spec.apply(w_ls, kappa2, !protection.is_penalizable(m, j))
                        }
                        _ => w_ls,
                    }
                })
                .collect();
            let norm = l2_norm(&updated);
            if norm == 0.0 {
                if spec.is_some() {
                    factors[m] = updated;
                    let ps = ProjectorSet { factors, rho: 0.0 };
                    return finish(v, ps, FitStatus::Annihilated { mode: m }, it, history);
                }
                let ps = ProjectorSet {
                    factors: previous,
                    rho: previous_rho,
                };
                return finish(v, ps, FitStatus::Collapsed, it, history);
            }
            factors[m] = updated.into_iter().map(|x| x / norm).collect();
            rho = norm;
        }
        let ps = ProjectorSet {
            factors: factors.clone(),
            rho,
        };
        let value = objective(v, &ps, penalty);
        // Thresholding followed by renormalization is not an exact block
        // minimization, so a penalized sweep can raise the cost. Such a sweep
        // is rejected and the previous iterate kept.
        if penalty.is_some() && history.last().is_some_and(|&last| value > last) {
            let ps = ProjectorSet {
                factors: previous,
                rho: previous_rho,
            };
            return finish(v, ps, FitStatus::Converged, it, history);
        }
        history.push(value);
        let change = factors
            .iter()
            .zip(&previous)
            .map(|(a, b)| relative_change(a, b))
            .fold(0.0, f64::max);
        if change < cfg.tolerance {
            return finish(v, ps, FitStatus::Converged, it, history);
        }
    }
    let ps = ProjectorSet { factors, rho };
    finish(v, ps, FitStatus::MaxIterations, cfg.max_iterations, history)
}

#[derive(Debug, Clone)]
pub struct RankRFit {
    pub factors: FactorMatrices,
    pub residual_norm: f64,
    pub status: FitStatus,
    pub iterations: usize,
    pub objective_history: Vec<f64>,
}

/// Rank-R ALS. Each mode update solves
/// `W_m = V_(m) KR (hadamard_k W_k^T W_k)^+` with `KR` the Khatri-Rao
/// product of the other factor matrices, then moves column norms into the
/// weights.
pub fn als_rank_r(v: &Tensor, rank: usize, cfg: &AlsConfig) -> Result<RankRFit, ParafacError> {
    cfg.validate()?;
    if rank == 0 {
        return Err(ParafacError::ZeroRank);
    }
    if v.frobenius_norm() == 0.0 {
        return Err(ParafacError::ZeroTensor);
    }
    let order = v.order();
    let unfoldings = (0..order)
        .map(|m| mode_unfold(v, m))
        .collect::<Result<Vec<_>, _>>()?;
    let mut factors = initial_matrices(v, &unfoldings, rank, &cfg.init)?;
    let mut weights = vec![1.0; rank];
    let mut history = Vec::new();
    let mut status = FitStatus::MaxIterations;
    let mut iterations = cfg.max_iterations;

    for it in 1..=cfg.max_iterations {
        let previous = factors.clone();
        for m in 0..order {
            let mut kr: Option<DMatrix<f64>> = None;
            let mut gram = DMatrix::from_element(rank, rank, 1.0);
            for k in (0..order).rev().filter(|&k| k != m) {
                kr = Some(match kr {
                    None => factors[k].clone(),
                    Some(acc) => khatri_rao(&acc, &factors[k])?,
                });
                gram.component_mul_assign(&(factors[k].transpose() * &factors[k]));
            }
            let kr = kr.unwrap_or_else(|| DMatrix::from_element(1, rank, 1.0));
            let updated = &unfoldings[m] * kr * pseudo_inverse(&gram);
            let mut w = updated;
            for r in 0..rank {
                let norm = w.column(r).norm();
                if norm > 0.0 {
                    w.column_mut(r).unscale_mut(norm);
                    weights[r] = norm;
                } else {
                    w.set_column(r, &previous[m].column(r));
                    weights[r] = 0.0;
                    status = FitStatus::Collapsed;
                }
            }
            factors[m] = w;
        }
        let fm = FactorMatrices {
            factors: factors.clone(),
            weights: weights.clone(),
        };
        let recon = fm.reconstruct();
        history.push(
            v.data()
                .iter()
                .zip(recon.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum(),
        );
        if status == FitStatus::Collapsed {
            iterations = it;
            break;
        }
        let change = factors
            .iter()
            .zip(&previous)
            .map(|(a, b)| (a - b).norm() / b.norm())
            .fold(0.0, f64::max);
        if change < cfg.tolerance {
            status = FitStatus::Converged;
            iterations = it;
            break;
        }
    }

    for r in 0..rank {
        let mut cols: Vec<Vec<f64>> = factors
            .iter()
            .map(|f| f.column(r).iter().copied().collect())
            .collect();
        canonicalize_signs(&mut cols, &mut weights[r]);
        for (f, c) in factors.iter_mut().zip(cols) {
            f.set_column(r, &nalgebra::DVector::from_vec(c));
        }
    }
    let fm = FactorMatrices { factors, weights };
    let residual_norm = v.sub(&fm.reconstruct())?.frobenius_norm();
    Ok(RankRFit {
        factors: fm,
        residual_norm,
        status,
        iterations,
        objective_history: history,
    })
}

fn initial_matrices(
    v: &Tensor,
    unfoldings: &[DMatrix<f64>],
    rank: usize,
    init: &AlsInit,
) -> Result<Vec<DMatrix<f64>>, ParafacError> {
    let seeded_column = |d: usize, r: usize| -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + r as u64);
        let c: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = l2_norm(&c);
        c.into_iter().map(|x| x / n).collect()
    };
    match init {
        AlsInit::DeterministicUniform => Ok(v
            .dims()
            .iter()
            .map(|&d| {
                DMatrix::from_fn(d, rank, |i, r| {
                    if r == 0 {
                        1.0 / (d as f64).sqrt()
                    } else {
                        seeded_column(d, r)[i]
                    }
                })
            })
            .collect()),
        AlsInit::UnfoldSvdLike => Ok(unfoldings
            .iter()
            .map(|u| {
                let d = u.nrows();
                let svd = u.clone().svd(true, false);
                let left = svd.u.expect("left vectors requested");
                // nalgebra does not sort singular values
                let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
                idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
                DMatrix::from_fn(d, rank, |i, r| match idx.get(r) {
                    Some(&c) => left[(i, c)],
                    None => seeded_column(d, r)[i],
                })
            })
            .collect()),
        AlsInit::PreviousFactors(_) => {
            if rank != 1 {
                return Err(ParafacError::InitShape);
            }
            Ok(initial_factors(v, &[], init)?
                .into_iter()
                .map(|c| DMatrix::from_vec(c.len(), 1, c))
                .collect())
        }
    }
}

/// Symmetric pseudoinverse with eigenvalues below `PINV_FLOOR * max` dropped.
fn pseudo_inverse(gram: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(gram.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let floor = PINV_FLOOR * max;
    let n = gram.nrows();
    let mut out = DMatrix::zeros(n, n);
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda.abs() > floor && lambda != 0.0 {
            let q = eig.eigenvectors.column(i);
            out += (q * q.transpose()) / lambda;
        }
    }
    out
}
