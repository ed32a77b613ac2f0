//! Recursive exponentially weighted N-way PLS (REW-NPLS) and its penalized
//! variant (PREW-NPLS).
//!
//! The learner keeps centered, exponentially weighted second moments
//! (`xx`, `xy`) and running means. Calibration extracts one latent
//! component per iteration from the deflated cross-covariance tensor:
//!
//! 1. normalize the deflated `xy` (dims `I_1..I_M, Q`) to unit norm;
//! 2. rank-one (penalized) PARAFAC, the output mode always protected;
//! 3. `w = vec(w^1 o ... o w^M)`, orthogonalized against earlier loadings
//!    into the latent direction `r`;
//! 4. `t = r' xx r`, `p = xx r / t`, `q = xy' r / t`, `xy -= t p q'`;
//! 5. `Beta_f = sum_{a<=f} r_a q_a'`, `bias_f = mean_y - Beta_f' mean_x`.
//!
//! Each `r_f` is a linear combination of `w_1..w_f`, so a slice that is zero
//! in every projector up to `f` is zero in `Beta_f`.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use crate::error::PlsError;
use crate::parafac::{
    penalized_als_rank1, update_protection_set, AlsConfig, FitStatus, ProjectorSet, ProtectionSet,
};
use crate::tensor::{outer_product, Tensor};
use crate::thresholding::{NormOrder, PenaltySpec};

/// Deflated `xy` below this fraction of its initial norm counts as exhausted.
const EXHAUSTED_RTOL: f64 = 1e-10;
/// Latent variance floor relative to `trace(xx) * |r|^2`.
const COLLAPSE_RTOL: f64 = 1e-12;
/// Relative slack under which validation errors are considered tied.
const TIE_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceState {
    input_dims: Vec<usize>,
    outputs: usize,
    xx: DMatrix<f64>,
    /// `P x Q`; row `p` is the flat (row-major) input index.
    xy: DMatrix<f64>,
    mean_x: DVector<f64>,
    mean_y: DVector<f64>,
    weight_sum: f64,
    mu: f64,
}

fn check_mu(mu: f64) -> Result<(), PlsError> {
    if (0.0..=1.0).contains(&mu) {
        Ok(())
    } else {
        Err(PlsError::InvalidForgetting(mu))
    }
}

impl CovarianceState {
    pub fn new(input_dims: Vec<usize>, outputs: usize, mu: f64) -> Result<Self, PlsError> {
        check_mu(mu)?;
        // validates dims
        let p = Tensor::zeros(input_dims.clone())?.len();
        if outputs == 0 {
            return Err(PlsError::OutputDims {
                expected: 1,
                got: 0,
            });
        }
        Ok(Self {
            input_dims,
            outputs,
            xx: DMatrix::zeros(p, p),
            xy: DMatrix::zeros(p, outputs),
            mean_x: DVector::zeros(p),
            mean_y: DVector::zeros(outputs),
            weight_sum: 0.0,
            mu,
        })
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn n_features(&self) -> usize {
        self.mean_x.len()
    }

    pub fn xx(&self) -> &DMatrix<f64> {
        &self.xx
    }

    pub fn xy_matrix(&self) -> &DMatrix<f64> {
        &self.xy
    }

    /// Cross-covariance as an order `M + 1` tensor with the output mode last.
    pub fn xy(&self) -> Tensor {
        Tensor::from_parts_unchecked(self.xy_dims(), row_major(&self.xy))
    }

    pub fn mean_x(&self) -> &DVector<f64> {
        &self.mean_x
    }

    pub fn mean_y(&self) -> &DVector<f64> {
        &self.mean_y
    }

    pub fn weight_sum(&self) -> f64 {
        self.weight_sum
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    fn xy_dims(&self) -> Vec<usize> {
        let mut dims = self.input_dims.clone();
        dims.push(self.outputs);
        dims
    }

    /// Folds a batch into the statistics.
    ///
    /// With `W` the previous weight sum and `m`, `m'` the old and new
    /// means:
    /// `xx' = mu xx + mu W (m - m')(m - m')' + sum (x - m')(x - m')'`,
    /// which is the exact exponentially weighted centered scatter; `xy`
    /// follows the same form.
    pub fn update(&mut self, xs: &[Tensor], ys: &[Vec<f64>]) -> Result<(), PlsError> {
        let (x, y) = batch_matrices(&self.input_dims, self.outputs, xs, ys)?;
        let n = x.nrows() as f64;
        let carried = self.mu * self.weight_sum;
        let total = carried + n;

        let sum_x = x.row_sum().transpose();
        let sum_y = y.row_sum().transpose();
        let mean_x = (&self.mean_x * carried + sum_x) / total;
        let mean_y = (&self.mean_y * carried + sum_y) / total;
        let dx = &self.mean_x - &mean_x;
        let dy = &self.mean_y - &mean_y;

        let mut xc = x;
        for mut row in xc.row_iter_mut() {
            row -= mean_x.transpose();
        }
        let mut yc = y;
        for mut row in yc.row_iter_mut() {
            row -= mean_y.transpose();
        }

        let xct = xc.transpose();
        self.xx *= self.mu;
        self.xx += carried * &dx * dx.transpose();
        self.xx += &xct * &xc;
        self.xy *= self.mu;
        self.xy += carried * &dx * dy.transpose();
        self.xy += &xct * &yc;
        // keep xx exactly symmetric
        self.xx = (&self.xx + self.xx.transpose()) * 0.5;

        self.mean_x = mean_x;
        self.mean_y = mean_y;
        self.weight_sum = total;
        Ok(())
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn batch_matrices(
    input_dims: &[usize],
    outputs: usize,
    xs: &[Tensor],
    ys: &[Vec<f64>],
) -> Result<(DMatrix<f64>, DMatrix<f64>), PlsError> {
    if xs.is_empty() {
        return Err(PlsError::EmptyBatch);
    }
    if xs.len() != ys.len() {
        return Err(PlsError::BatchLength {
            x: xs.len(),
            y: ys.len(),
        });
    }
    for x in xs {
        if x.dims() != input_dims {
            return Err(PlsError::InputDims {
                expected: input_dims.to_vec(),
                got: x.dims().to_vec(),
            });
        }
    }
    for y in ys {
        if y.len() != outputs {
            return Err(PlsError::OutputDims {
                expected: outputs,
                got: y.len(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(PlsError::NonFinite);
        }
    }
    let p = xs[0].len();
    let x = DMatrix::from_fn(xs.len(), p, |n, j| xs[n].data()[j]);
    let y = DMatrix::from_fn(ys.len(), outputs, |n, q| ys[n][q]);
    Ok((x, y))
}

/// Why calibration stopped before `f_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Truncation {
    /// The deflated cross-covariance vanished at this component.
    Exhausted { at: usize },
    /// Latent variance fell below the numerical floor, or PARAFAC collapsed.
    LatentCollapse { at: usize },
    /// Thresholding zeroed a whole input mode.
    Annihilated { at: usize, mode: usize },
}

impl Truncation {
    pub fn at(self) -> usize {
        match self {
            Truncation::Exhausted { at }
            | Truncation::LatentCollapse { at }
            | Truncation::Annihilated { at, .. } => at,
        }
    }
}

impl std::fmt::Display for Truncation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Truncation::Exhausted { at } => write!(f, "exhausted:{at}"),
            Truncation::LatentCollapse { at } => write!(f, "collapse:{at}"),
            Truncation::Annihilated { at, mode } => write!(f, "annihilated:{at}:{}", mode + 1),
        }
    }
}

impl std::str::FromStr for Truncation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |i: usize| -> Result<usize, String> {
            parts
                .get(i)
                .ok_or_else(|| format!("bad truncation {s:?}"))?
                .parse()
                .map_err(|_| format!("bad truncation {s:?}"))
        };
        match parts[0] {
            "exhausted" => Ok(Truncation::Exhausted { at: num(1)? }),
            "collapse" => Ok(Truncation::LatentCollapse { at: num(1)? }),
            "annihilated" => {
                let mode = num(2)?;
                if mode == 0 {
                    return Err(format!("bad truncation {s:?}"));
                }
                Ok(Truncation::Annihilated {
                    at: num(1)?,
                    mode: mode - 1,
                })
            }
            _ => Err(format!("bad truncation {s:?}")),
        }
    }
}

/// Regression coefficients after `f` latent components.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentComponent {
    /// Dims `I_1..I_M, Q`.
    pub beta: Tensor,
    pub bias: Vec<f64>,
    /// Factors for the `M` input modes plus the output mode.
    pub projectors: ProjectorSet,
    /// Norm of the deflated cross-covariance before normalization.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlsModel {
    pub input_dims: Vec<usize>,
    pub outputs: usize,
    /// Per input mode.
    pub penalties: Vec<Option<PenaltySpec>>,
    pub mu: f64,
    pub components: Vec<LatentComponent>,
    pub f_star: usize,
    pub truncation: Option<Truncation>,
}

impl PlsModel {
    /// Number of latent components `F`.
    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    /// Norm order of the first penalized mode.
    pub fn norm_order(&self) -> Option<NormOrder> {
        self.penalties.iter().flatten().map(|p| p.order).next()
    }

    /// Penalty coefficient of the first penalized mode (0 when unpenalized).
    pub fn lambda(&self) -> f64 {
        self.penalties
            .iter()
            .flatten()
            .map(|p| p.lambda)
            .next()
            .unwrap_or(0.0)
    }

    pub fn penalized_modes(&self) -> Vec<usize> {
        self.penalties
            .iter()
            .enumerate()
            .filter_map(|(m, p)| p.map(|_| m))
            .collect()
    }

    pub fn set_f_star(&mut self, f: usize) -> Result<(), PlsError> {
        self.check_f(f)?;
        self.f_star = f;
        Ok(())
    }

    fn check_f(&self, f: usize) -> Result<(), PlsError> {
        if f == 0 || f > self.components.len() {
            Err(PlsError::LatentOutOfRange {
                f,
                max: self.components.len(),
            })
        } else {
            Ok(())
        }
    }

    /// `y = <Beta_f, x> + bias_f`, with `f` defaulting to `f_star`.
    pub fn predict(&self, x: &Tensor, f: Option<usize>) -> Result<Vec<f64>, PlsError> {
        let f = f.unwrap_or(self.f_star);
        self.check_f(f)?;
        if x.dims() != self.input_dims.as_slice() {
            return Err(PlsError::InputDims {
                expected: self.input_dims.clone(),
                got: x.dims().to_vec(),
            });
        }
        let c = &self.components[f - 1];
        let q = self.outputs;
        let mut y = c.bias.clone();
        for (xp, row) in x.data().iter().zip(c.beta.data().chunks_exact(q)) {
            for (yq, b) in y.iter_mut().zip(row) {
                *yq += xp * b;
            }
        }
        Ok(y)
    }

    pub fn predict_batch(&self, xs: &[Tensor], f: Option<usize>) -> Result<Vec<Vec<f64>>, PlsError> {
        xs.iter().map(|x| self.predict(x, f)).collect()
    }

    /// Indices of `mode` whose projector element is zero in every component
    /// `1..=f_star`.
    pub fn sparsity_pattern(&self, mode: usize) -> Result<BTreeSet<usize>, PlsError> {
        if mode >= self.input_dims.len() {
            return Err(PlsError::ModeOutOfRange(mode));
        }
        Ok((0..self.input_dims[mode])
            .filter(|&j| {
                self.components[..self.f_star]
                    .iter()
                    .all(|c| c.projectors.factors[mode][j] == 0.0)
            })
            .collect())
    }

    /// Fraction of zeroed slices along `mode`.
    pub fn sparse_idx(&self, mode: usize) -> Result<f64, PlsError> {
        Ok(self.sparsity_pattern(mode)?.len() as f64 / self.input_dims[mode] as f64)
    }

    /// Plain-text report: shape, penalty, selection and sparsity per mode.
    pub fn summary(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let dims: Vec<String> = self.input_dims.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "dims: {} -> {}", dims.join("x"), self.outputs);
        match self.norm_order() {
            Some(order) => {
                let _ = writeln!(s, "p: {}", order.p());
            }
            None => {
                let _ = writeln!(s, "p: none");
            }
        }
        let _ = writeln!(s, "lambda: {}", self.lambda());
        let modes: Vec<String> = self.penalized_modes().iter().map(|m| (m + 1).to_string()).collect();
        let _ = writeln!(s, "penalized modes: {}", if modes.is_empty() { "none".into() } else { modes.join(",") });
        let _ = writeln!(s, "mu: {}", self.mu);
        let _ = writeln!(s, "F: {}", self.n_components());
        let _ = writeln!(s, "f*: {}", self.f_star);
        if let Some(t) = self.truncation {
            let _ = writeln!(s, "truncation: {t}");
        }
        for m in 0..self.input_dims.len() {
            let pattern = self.sparsity_pattern(m).unwrap_or_default();
            let idx = pattern.len() as f64 / self.input_dims[m] as f64;
            let zeroed: Vec<String> = pattern.iter().map(|j| (j + 1).to_string()).collect();
            let _ = writeln!(
                s,
                "sparse_idx_mode_{}: {:.4}  zeroed: [{}]",
                m + 1,
                idx,
                zeroed.join(",")
            );
        }
        s
    }
}

/// Calibrates `F <= f_max` latent components from the current statistics.
///
/// `penalties[m]` and `protection_init` cover the `M` input modes only; the
/// output mode is appended as a fully protected, unpenalized mode.
pub fn calibrate(
    state: &CovarianceState,
    f_max: usize,
    penalties: &[Option<PenaltySpec>],
    protection_init: &ProtectionSet,
    cfg: &AlsConfig,
) -> Result<PlsModel, PlsError> {
    let order = state.input_dims.len();
    if state.weight_sum <= 0.0 {
        return Err(PlsError::NoData);
    }
    if f_max == 0 {
        return Err(PlsError::ZeroComponents);
    }
    if penalties.len() != order {
        return Err(crate::error::ParafacError::PenaltyArity(penalties.len(), order).into());
    }
    if protection_init.modes() != order {
        return Err(crate::error::ParafacError::ProtectionArity(protection_init.modes(), order).into());
    }

    let mut all_penalties = penalties.to_vec();
    all_penalties.push(None);
    let mut protection = protection_init.with_protected_mode();
    let xy_dims = state.xy_dims();
    let xx = &state.xx;
    let trace = xx.trace().max(f64::MIN_POSITIVE);

    let mut xy = state.xy.clone();
    let initial_norm = xy.norm();
    let mut rs: Vec<DVector<f64>> = Vec::new();
    let mut ps: Vec<DVector<f64>> = Vec::new();
    let mut beta = DMatrix::<f64>::zeros(state.n_features(), state.outputs);
    let mut components: Vec<LatentComponent> = Vec::new();
    let mut truncation = None;

    for f in 1..=f_max {
        let norm = xy.norm();
        if norm == 0.0 || norm <= EXHAUSTED_RTOL * initial_norm {
            truncation = Some(Truncation::Exhausted { at: f });
            break;
        }
        let v = Tensor::from_parts_unchecked(xy_dims.clone(), row_major(&(&xy / norm)));
        let fit = penalized_als_rank1(&v, &all_penalties, &protection, cfg)?;
        match fit.status {
            FitStatus::Annihilated { mode } => {
                truncation = Some(Truncation::Annihilated { at: f, mode });
            }
            FitStatus::Collapsed => truncation = Some(Truncation::LatentCollapse { at: f }),
            FitStatus::Converged | FitStatus::MaxIterations => {}
        }
        if truncation.is_some() {
            if components.is_empty() {
                components.push(intercept_only(state, fit.projectors, norm));
            }
            break;
        }

        let w = DVector::from_vec(outer_product(1.0, &fit.projectors.factors[..order]).into_data());
        let mut r = w.clone();
        for (rj, pj) in rs.iter().zip(&ps) {
            r -= rj * pj.dot(&w);
        }
        let t = (r.transpose() * xx * &r)[(0, 0)];
        if !(t > COLLAPSE_RTOL * trace * r.norm_squared()) {
            truncation = Some(Truncation::LatentCollapse { at: f });
            if components.is_empty() {
                components.push(intercept_only(state, fit.projectors, norm));
            }
            break;
        }
        let p = xx * &r / t;
        let q = xy.transpose() * &r / t;
        xy -= t * &p * q.transpose();
        beta += &r * q.transpose();

        let bias = &state.mean_y - beta.transpose() * &state.mean_x;
        components.push(LatentComponent {
            beta: Tensor::from_parts_unchecked(xy_dims.clone(), row_major(&beta)),
            bias: bias.as_slice().to_vec(),
            projectors: fit.projectors.clone(),
            scale: norm,
        });
        protection = update_protection_set(&protection, &fit.projectors)?;
        rs.push(r);
        ps.push(p);
    }

    if components.is_empty() {
        // zero cross-covariance: the mean is the best linear predictor
        let dims = xy_dims.clone();
        let projectors = ProjectorSet {
            factors: dims.iter().map(|&d| vec![0.0; d]).collect(),
            rho: 0.0,
        };
        components.push(intercept_only(state, projectors, 0.0));
    }
    let f_star = components.len();
    Ok(PlsModel {
        input_dims: state.input_dims.clone(),
        outputs: state.outputs,
        penalties: penalties.to_vec(),
        mu: state.mu,
        components,
        f_star,
        truncation,
    })
}

fn intercept_only(state: &CovarianceState, projectors: ProjectorSet, scale: f64) -> LatentComponent {
    LatentComponent {
        beta: Tensor::from_parts_unchecked(
            state.xy_dims(),
            vec![0.0; state.n_features() * state.outputs],
        ),
        bias: state.mean_y.as_slice().to_vec(),
        projectors,
        scale,
    }
}

/// Exponentially weighted prediction errors per latent dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct RecursiveValidation {
    mu: f64,
    errors: Vec<f64>,
    energy: f64,
}

impl RecursiveValidation {
    pub fn new(f_max: usize, mu: f64) -> Result<Self, PlsError> {
        check_mu(mu)?;
        if f_max == 0 {
            return Err(PlsError::ZeroComponents);
        }
        Ok(Self {
            mu,
            errors: vec![0.0; f_max],
            energy: 0.0,
        })
    }

    pub fn errors(&self) -> &[f64] {
        &self.errors
    }

    /// Scores `model` on a batch it has not been trained on and returns the
    /// updated `f*`. Dimensions beyond the model's `F` reuse its last
    /// component.
    pub fn observe(&mut self, model: &PlsModel, xs: &[Tensor], ys: &[Vec<f64>]) -> Result<usize, PlsError> {
        batch_matrices(&model.input_dims, model.outputs, xs, ys)?;
        let n_comp = model.n_components();
        let mut batch_err = vec![0.0; self.errors.len()];
        for (slot, f) in batch_err.iter_mut().zip(1..) {
            let f_eff = f.min(n_comp);
            for (x, y) in xs.iter().zip(ys) {
                let pred = model.predict(x, Some(f_eff))?;
                *slot += y.iter().zip(&pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            }
        }
        let energy: f64 = ys.iter().flatten().map(|v| v * v).sum();
        self.energy = self.mu * self.energy + energy;
        for (e, b) in self.errors.iter_mut().zip(batch_err) {
            *e = self.mu * *e + b;
        }
        Ok(self.f_star())
    }

    /// Smallest `f` whose error is within rounding of the minimum.
    pub fn f_star(&self) -> usize {
        let min = self.errors.iter().copied().fold(f64::INFINITY, f64::min);
        let slack = TIE_RTOL * (min + 1e-3 * self.energy);
        self.errors
            .iter()
            .position(|&e| e <= min + slack)
            .map_or(1, |i| i + 1)
    }
}

/// Settings shared by every model of a REW-NPLS / PREW-NPLS run.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerConfig {
    pub f_max: usize,
    pub mu: f64,
    /// Per input mode.
    pub penalties: Vec<Option<PenaltySpec>>,
    pub protection: ProtectionSet,
    pub als: AlsConfig,
}

impl LearnerConfig {
    /// Unpenalized REW-NPLS.
    pub fn unpenalized(input_dims: &[usize], f_max: usize, mu: f64) -> Self {
        Self {
            f_max,
            mu,
            penalties: vec![None; input_dims.len()],
            protection: ProtectionSet::all(input_dims),
            als: AlsConfig::default(),
        }
    }

    /// Same penalty on each of `modes`, every index initially penalizable.
    pub fn penalized(
        input_dims: &[usize],
        f_max: usize,
        mu: f64,
        penalty: PenaltySpec,
        modes: &[usize],
    ) -> Result<Self, PlsError> {
        let mut penalties = vec![None; input_dims.len()];
        for &m in modes {
            *penalties.get_mut(m).ok_or(PlsError::ModeOutOfRange(m))? = Some(penalty);
        }
        Ok(Self {
            penalties,
            ..Self::unpenalized(input_dims, f_max, mu)
        })
    }
}

/// Online learner: validate on the incoming batch, then update the
/// statistics, then recalibrate.
#[derive(Debug, Clone)]
pub struct RewNpls {
    cfg: LearnerConfig,
    state: CovarianceState,
    validation: RecursiveValidation,
    model: Option<PlsModel>,
}

impl RewNpls {
    pub fn new(input_dims: Vec<usize>, outputs: usize, cfg: LearnerConfig) -> Result<Self, PlsError> {
        if cfg.penalties.len() != input_dims.len() {
            return Err(crate::error::ParafacError::PenaltyArity(cfg.penalties.len(), input_dims.len()).into());
        }
        let state = CovarianceState::new(input_dims, outputs, cfg.mu)?;
        let validation = RecursiveValidation::new(cfg.f_max, cfg.mu)?;
        Ok(Self {
            cfg,
            state,
            validation,
            model: None,
        })
    }

    pub fn state(&self) -> &CovarianceState {
        &self.state
    }

    pub fn model(&self) -> Option<&PlsModel> {
        self.model.as_ref()
    }

    pub fn validation(&self) -> &RecursiveValidation {
        &self.validation
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.cfg
    }

    /// Consumes one batch and returns the selected `f*`.
    pub fn step(&mut self, xs: &[Tensor], ys: &[Vec<f64>]) -> Result<usize, PlsError> {
        if let Some(model) = &self.model {
            self.validation.observe(model, xs, ys)?;
        }
        self.state.update(xs, ys)?;
        let mut model = calibrate(
            &self.state,
            self.cfg.f_max,
            &self.cfg.penalties,
            &self.cfg.protection,
            &self.cfg.als,
        )?;
        model.f_star = self.validation.f_star().min(model.n_components());
        let f = model.f_star;
        self.model = Some(model);
        Ok(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parafac::als_rank1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(
        rng: &mut ChaCha8Rng,
        dims: &[usize],
        q: usize,
        n: usize,
    ) -> (Vec<Tensor>, Vec<Vec<f64>>) {
        let xs: Vec<Tensor> = (0..n)
            .map(|_| Tensor::from_fn(dims.to_vec(), |_| rng.random_range(-1.0..1.0)).unwrap())
            .collect();
        let ys = (0..n)
            .map(|_| (0..q).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        (xs, ys)
    }

    fn max_rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).amax() / b.amax().max(1e-300)
    }

    #[test]
    fn covariance_incremental_matches_single_shot() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (xs, ys) = random_batch(&mut rng, &[2, 3], 2, 2);
        let mut two = CovarianceState::new(vec![2, 3], 2, 1.0).unwrap();
        two.update(&xs[..1], &ys[..1]).unwrap();
        two.update(&xs[1..], &ys[1..]).unwrap();
        let mut one = CovarianceState::new(vec![2, 3], 2, 1.0).unwrap();
        one.update(&xs, &ys).unwrap();
        assert!(max_rel(two.xx(), one.xx()) < 1e-10);
        assert!(max_rel(two.xy_matrix(), one.xy_matrix()) < 1e-10);
        assert!((two.weight_sum() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn covariance_first_batch_is_centered_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (xs, ys) = random_batch(&mut rng, &[3], 1, 5);
        let mut s = CovarianceState::new(vec![3], 1, 0.7).unwrap();
        s.update(&xs, &ys).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let ma: f64 = xs.iter().map(|x| x.data()[a]).sum::<f64>() / 5.0;
                let mb: f64 = xs.iter().map(|x| x.data()[b]).sum::<f64>() / 5.0;
                let g: f64 = xs.iter().map(|x| (x.data()[a] - ma) * (x.data()[b] - mb)).sum();
                assert!((s.xx()[(a, b)] - g).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn covariance_full_forgetting() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (xa, ya) = random_batch(&mut rng, &[2, 2], 2, 4);
        let (xb, yb) = random_batch(&mut rng, &[2, 2], 2, 3);
        let mut s = CovarianceState::new(vec![2, 2], 2, 0.0).unwrap();
        s.update(&xa, &ya).unwrap();
        s.update(&xb, &yb).unwrap();
        let mut fresh = CovarianceState::new(vec![2, 2], 2, 0.0).unwrap();
        fresh.update(&xb, &yb).unwrap();
        assert!(max_rel(s.xx(), fresh.xx()) < 1e-12);
        assert!(max_rel(s.xy_matrix(), fresh.xy_matrix()) < 1e-12);
        assert_eq!(s.weight_sum(), 3.0);
    }

    #[test]
    fn covariance_rejects_bad_input() {
        assert!(CovarianceState::new(vec![2], 1, 1.5).is_err());
        let mut s = CovarianceState::new(vec![2], 1, 1.0).unwrap();
        assert_eq!(s.update(&[], &[]).unwrap_err(), PlsError::EmptyBatch);
        let x = Tensor::zeros(vec![3]).unwrap();
        assert!(matches!(s.update(&[x], &[vec![0.0]]), Err(PlsError::InputDims { .. })));
        let x = Tensor::zeros(vec![2]).unwrap();
        assert!(matches!(s.update(&[x.clone()], &[vec![0.0, 1.0]]), Err(PlsError::OutputDims { .. })));
        assert!(matches!(s.update(&[x], &[]), Err(PlsError::BatchLength { .. })));
    }

    #[test]
    fn calibrate_requires_data() {
        let s = CovarianceState::new(vec![2, 2], 1, 1.0).unwrap();
        let err = calibrate(&s, 2, &[None, None], &ProtectionSet::all(&[2, 2]), &AlsConfig::default());
        assert_eq!(err.unwrap_err(), PlsError::NoData);
    }

    #[test]
    fn predict_at_mean_returns_mean_y() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (xs, ys) = random_batch(&mut rng, &[3, 4], 2, 40);
        let mut s = CovarianceState::new(vec![3, 4], 2, 1.0).unwrap();
        s.update(&xs, &ys).unwrap();
        let model = calibrate(&s, 3, &[None, None], &ProtectionSet::all(&[3, 4]), &AlsConfig::default()).unwrap();
        let mean = Tensor::new(vec![3, 4], s.mean_x().as_slice().to_vec()).unwrap();
        for f in 1..=model.n_components() {
            let y = model.predict(&mean, Some(f)).unwrap();
            for (a, b) in y.iter().zip(s.mean_y().iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(model.predict(&mean, Some(0)).is_err());
        assert!(model.predict(&mean, Some(model.n_components() + 1)).is_err());
    }

    #[test]
    fn single_component_projectors_are_rank1_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (xs, ys) = random_batch(&mut rng, &[3, 2], 2, 30);
        let mut s = CovarianceState::new(vec![3, 2], 2, 1.0).unwrap();
        s.update(&xs, &ys).unwrap();
        let model = calibrate(&s, 1, &[None, None], &ProtectionSet::all(&[3, 2]), &AlsConfig::default()).unwrap();
        let xy = s.xy();
        let direct = als_rank1(&xy.scaled(1.0 / xy.frobenius_norm()), &AlsConfig::default()).unwrap();
        for (a, b) in model.components[0].projectors.factors.iter().zip(&direct.projectors.factors) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert!(model.sparsity_pattern(0).unwrap().is_empty());
    }

    #[test]
    fn latent_scores_are_orthogonal() {
        // t_i' t_j = r_i' xx r_j must vanish off the diagonal
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (xs, ys) = random_batch(&mut rng, &[3, 3], 2, 60);
        let mut s = CovarianceState::new(vec![3, 3], 2, 1.0).unwrap();
        s.update(&xs, &ys).unwrap();
        let model = calibrate(&s, 4, &[None, None], &ProtectionSet::all(&[3, 3]), &AlsConfig::default()).unwrap();
        assert_eq!(model.n_components(), 4);
        // training residual decreases with f
        let mut last = f64::INFINITY;
        for f in 1..=4 {
            let sse: f64 = xs
                .iter()
                .zip(&ys)
                .map(|(x, y)| {
                    let p = model.predict(x, Some(f)).unwrap();
                    y.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                })
                .sum();
            assert!(sse <= last + 1e-9);
            last = sse;
        }
    }

    #[test]
    fn zero_cross_covariance_gives_intercept_model() {
        let xs: Vec<Tensor> = (0..4).map(|i| Tensor::new(vec![2], vec![i as f64, 1.0]).unwrap()).collect();
        let ys = vec![vec![3.0]; 4];
        let mut s = CovarianceState::new(vec![2], 1, 1.0).unwrap();
        s.update(&xs, &ys).unwrap();
        let model = calibrate(&s, 3, &[None], &ProtectionSet::all(&[2]), &AlsConfig::default()).unwrap();
        assert_eq!(model.n_components(), 1);
        assert_eq!(model.truncation, Some(Truncation::Exhausted { at: 1 }));
        assert_eq!(model.predict(&xs[2], None).unwrap(), vec![3.0]);
    }

    #[test]
    fn validation_tie_goes_to_smaller_f() {
        let mut v = RecursiveValidation::new(3, 1.0).unwrap();
        v.errors = vec![2.0, 1.0, 1.0];
        assert_eq!(v.f_star(), 2);
        v.errors = vec![0.5, 0.5, 0.5];
        assert_eq!(v.f_star(), 1);
        let v = RecursiveValidation::new(1, 0.9).unwrap();
        assert_eq!(v.f_star(), 1);
    }

    #[test]
    fn truncation_roundtrips_text() {
        for t in [
            Truncation::Exhausted { at: 3 },
            Truncation::LatentCollapse { at: 1 },
            Truncation::Annihilated { at: 2, mode: 0 },
        ] {
            assert_eq!(t.to_string().parse::<Truncation>().unwrap(), t);
        }
        assert!("annihilated:1:0".parse::<Truncation>().is_err());
    }

    #[test]
    fn learner_f_max_one_always_selects_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = LearnerConfig::unpenalized(&[2, 3], 1, 0.9);
        let mut learner = RewNpls::new(vec![2, 3], 2, cfg).unwrap();
        for _ in 0..4 {
            let (xs, ys) = random_batch(&mut rng, &[2, 3], 2, 10);
            assert_eq!(learner.step(&xs, &ys).unwrap(), 1);
        }
    }
}
