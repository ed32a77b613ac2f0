//! Closed-form solutions of the one-dimensional penalized least-squares
//! problem solved for every projector element during a penalized ALS sweep:
//!
//! ```text
//! minimize over w:   kappa2 * (w_ls - w)^2 + lambda * g_p(w)
//! ```
//!
//! where `w_ls` is the unpenalized coefficient, `kappa2` the squared norm of
//! the Kronecker vector of the fixed factors, and `g_p` is `[w != 0]`,
//! `sqrt|w|` or `|w|` for `p = 0, 1/2, 1`. The constant residual term of the
//! full row problem is dropped; it does not depend on `w`.
//!
//! Every threshold compares `|w_ls|`, and a tie at the threshold resolves
//! to zero.

use serde::{Deserialize, Serialize};

use crate::error::ThresholdError;
use crate::tensor::dot;

/// Norm order `p` of the slice-wise penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormOrder {
    L0,
    Half,
    L1,
}

impl NormOrder {
    pub const ALL: [NormOrder; 3] = [NormOrder::L0, NormOrder::Half, NormOrder::L1];

    pub fn from_p(p: f64) -> Result<Self, ThresholdError> {
        if p == 0.0 {
            Ok(NormOrder::L0)
        } else if p == 0.5 {
            Ok(NormOrder::Half)
        } else if p == 1.0 {
            Ok(NormOrder::L1)
        } else {
            Err(ThresholdError::UnsupportedOrder(p))
        }
    }

    pub fn p(self) -> f64 {
        match self {
            NormOrder::L0 => 0.0,
            NormOrder::Half => 0.5,
            NormOrder::L1 => 1.0,
        }
    }

    /// Element penalty `g_p(w)`.
    pub fn penalty(self, w: f64) -> f64 {
        match self {
            NormOrder::L0 => {
                if w == 0.0 {
                    0.0
                } else {
                    1.0
                }
            }
            NormOrder::Half => w.abs().sqrt(),
            NormOrder::L1 => w.abs(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            NormOrder::L0 => "l0",
            NormOrder::Half => "l0.5",
            NormOrder::L1 => "l1",
        }
    }
}

impl std::fmt::Display for NormOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for NormOrder {
    type Err = ThresholdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l0" | "0" => Ok(NormOrder::L0),
            "l0.5" | "l1/2" | "l05" | "half" | "0.5" => Ok(NormOrder::Half),
            "l1" | "1" => Ok(NormOrder::L1),
            _ => Err(ThresholdError::UnsupportedOrder(f64::NAN)),
        }
    }
}

/// Penalty applied to one mode: norm order and coefficient `lambda in [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub order: NormOrder,
    pub lambda: f64,
}

impl PenaltySpec {
    pub fn new(order: NormOrder, lambda: f64) -> Result<Self, ThresholdError> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(ThresholdError::LambdaOutOfRange(lambda));
        }
        Ok(Self { order, lambda })
    }

    /// Applies the operator for this penalty to one LS coefficient.
    pub fn apply(&self, w_ls: f64, kappa2: f64, protected: bool) -> f64 {
        threshold(self.order, w_ls, self.lambda, kappa2, protected)
    }
}

/// Least-squares coefficient `(v_row . k) / |k|^2`.
pub fn ls_coefficient(v_row: &[f64], k: &[f64]) -> Result<f64, ThresholdError> {
    if v_row.len() != k.len() {
        return Err(ThresholdError::LengthMismatch {
            row: v_row.len(),
            k: k.len(),
        });
    }
    let kappa2 = dot(k, k);
    if kappa2 == 0.0 {
        return Err(ThresholdError::ZeroKronecker);
    }
    Ok(dot(v_row, k) / kappa2)
}

/// Hard thresholding (L0). `kappa` is the Kronecker norm, not its square.
pub fn threshold_l0(w_ls: f64, lambda: f64, kappa: f64, protected: bool) -> f64 {
    if protected || lambda == 0.0 {
        return w_ls;
    }
    if w_ls.abs() <= lambda.sqrt() / kappa {
        0.0
    } else {
        w_ls
    }
}

/// Soft thresholding (L1) at `lambda / (2 kappa2)`.
pub fn threshold_l1(w_ls: f64, lambda: f64, kappa2: f64, protected: bool) -> f64 {
    if protected || lambda == 0.0 {
        return w_ls;
    }
    let t = lambda / (2.0 * kappa2);
    if w_ls.abs() <= t {
        0.0
    } else {
        w_ls.signum() * (w_ls.abs() - t)
    }
}

const CUBIC_MAX: f64 = 4.0 / 27.0;
const BISECTION_CAP: usize = 200;

/// Largest root in `[0, 1]` of `x (1 - x)^2 = c`, for `c in [0, 4/27]`.
///
/// On `[1/3, 1]` the cubic decreases monotonically from 4/27 to 0, so the
/// root is bracketed there and found by bisection.
pub fn cubic_largest_root(c: f64) -> Result<f64, ThresholdError> {
    if !(0.0..=CUBIC_MAX).contains(&c) {
        return Err(ThresholdError::CubicOutOfRange(c));
    }
    let f = |x: f64| x * (1.0 - x) * (1.0 - x) - c;
    let (mut lo, mut hi) = (1.0 / 3.0, 1.0);
    if c == 0.0 {
        return Ok(1.0);
    }
    if c == CUBIC_MAX {
        return Ok(lo);
    }
    for _ in 0..BISECTION_CAP {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return Ok(mid);
        }
        // f(lo) > 0 > f(hi)
        if fm > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(if f(lo).abs() <= f(hi).abs() { lo } else { hi })
}

/// Half thresholding (L0.5): zero below `(3/4)(lambda/kappa2)^(2/3)`,
/// otherwise the better of zero and the shrunk stationary point.
pub fn threshold_l05(w_ls: f64, lambda: f64, kappa2: f64, protected: bool) -> f64 {
    if protected || lambda == 0.0 {
        return w_ls;
    }
    let a = w_ls.abs();
    if a <= 0.75 * (lambda / kappa2).powf(2.0 / 3.0) {
        return 0.0;
    }
    let c = (lambda * lambda / (16.0 * kappa2 * kappa2 * a * a * a)).min(CUBIC_MAX);
    let x = cubic_largest_root(c).expect("c clamped into [0, 4/27]");
    let magnitude = x * a;
    let cost_zero = kappa2 * a * a;
    let cost_candidate = kappa2 * (a - magnitude).powi(2) + lambda * magnitude.sqrt();
    if cost_candidate < cost_zero {
        w_ls.signum() * magnitude
    } else {
        0.0
    }
}

/// Dispatches on the norm order; `kappa2` is the squared Kronecker norm.
pub fn threshold(order: NormOrder, w_ls: f64, lambda: f64, kappa2: f64, protected: bool) -> f64 {
    match order {
        NormOrder::L0 => threshold_l0(w_ls, lambda, kappa2.sqrt(), protected),
        NormOrder::Half => threshold_l05(w_ls, lambda, kappa2, protected),
        NormOrder::L1 => threshold_l1(w_ls, lambda, kappa2, protected),
    }
}

/// Reduced element cost `kappa2 (w_ls - w)^2 + lambda g_p(w)`.
pub fn penalized_cost(order: NormOrder, w: f64, w_ls: f64, lambda: f64, kappa2: f64) -> f64 {
    kappa2 * (w_ls - w).powi(2) + lambda * order.penalty(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force minimizer over a uniform grid; independent of the operators.
    fn grid_argmin(order: NormOrder, w_ls: f64, lambda: f64, kappa2: f64) -> (f64, f64) {
        let span = 2.0 * w_ls.abs().max(1e-3);
        let n = 200_001;
        let mut best = (0.0, penalized_cost(order, 0.0, w_ls, lambda, kappa2));
        for i in 0..n {
            let w = -span + 2.0 * span * i as f64 / (n - 1) as f64;
            let c = penalized_cost(order, w, w_ls, lambda, kappa2);
            if c < best.1 {
                best = (w, c);
            }
        }
        best
    }

    #[test]
    fn ls_coefficient_cases() {
        let k = [0.3, -1.2, 0.5];
        let row: Vec<f64> = k.iter().map(|x| 2.0 * x).collect();
        assert!((ls_coefficient(&row, &k).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(ls_coefficient(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert_eq!(
            ls_coefficient(&[1.0, 2.0], &[0.0, 0.0]),
            Err(ThresholdError::ZeroKronecker)
        );
        assert!(ls_coefficient(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ls_coefficient_matches_golden_section() {
        let row = [0.7, -0.2, 1.3, 0.05];
        let k = [0.4, 0.9, -0.3, 1.1];
        let q = |w: f64| -> f64 { row.iter().zip(&k).map(|(r, kk)| (r - w * kk).powi(2)).sum() };
        let (mut a, mut b) = (-10.0f64, 10.0f64);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if q(c) < q(d) {
                b = d;
            } else {
                a = c;
            }
        }
        let golden = 0.5 * (a + b);
        assert!((ls_coefficient(&row, &k).unwrap() - golden).abs() < 1e-8);
    }

    #[test]
    fn l0_examples() {
        assert_eq!(threshold_l0(0.37, 0.0, 1.0, false), 0.37);
        assert_eq!(threshold_l0(0.4, 0.25, 1.0, false), 0.0);
        assert_eq!(threshold_l0(0.6, 0.25, 1.0, false), 0.6);
        assert_eq!(threshold_l0(0.01, 1.0, 1.0, true), 0.01);
        // FopL0(0) - FopL0(w_ls) = kappa^2 w_ls^2 - lambda
        assert!(1.0 * 0.4f64.powi(2) - 0.25 < 0.0);
        assert!(1.0 * 0.6f64.powi(2) - 0.25 > 0.0);
    }

    #[test]
    fn l1_examples() {
        assert_eq!(threshold_l1(-0.8, 0.0, 1.0, false), -0.8);
        // grid oracle: argmin (0.5 - w)^2 + 0.2 |w| = 0.4
        let (w_grid, _) = grid_argmin(NormOrder::L1, 0.5, 0.2, 1.0);
        assert!((w_grid - 0.4).abs() < 1e-4);
        assert!((threshold_l1(0.5, 0.2, 1.0, false) - 0.4).abs() < 1e-15);
        assert!((threshold_l1(-0.5, 0.2, 1.0, false) + 0.4).abs() < 1e-15);
        assert_eq!(threshold_l1(0.1, 0.2, 1.0, false), 0.0);
        assert_eq!(grid_argmin(NormOrder::L1, 0.1, 0.2, 1.0).0, 0.0);
        assert_eq!(threshold_l1(0.05, 1.0, 1.0, true), 0.05);
    }

    #[test]
    fn cubic_root_examples() {
        assert_eq!(cubic_largest_root(0.0).unwrap(), 1.0);
        assert!((cubic_largest_root(4.0 / 27.0).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let x = cubic_largest_root(1.0 / 128.0).unwrap();
        assert!((x - 0.9072).abs() < 1e-4, "{x}");
        assert!((x * (1.0 - x).powi(2) - 1.0 / 128.0).abs() <= 1e-12);
        assert!(cubic_largest_root(0.2).is_err());
        assert!(cubic_largest_root(-1e-9).is_err());
    }

    #[test]
    fn half_examples() {
        assert_eq!(threshold_l05(0.5, 0.0, 1.0, false), 0.5);
        assert_eq!(threshold_l05(0.5, 1.0, 1.0, false), 0.0);
        assert_eq!(grid_argmin(NormOrder::Half, 0.5, 1.0, 1.0).0, 0.0);
        let w = threshold_l05(2.0, 1.0, 1.0, false);
        assert!((w - 1.8144).abs() < 1e-3, "{w}");
        let (w_grid, c_grid) = grid_argmin(NormOrder::Half, 2.0, 1.0, 1.0);
        assert!((w - w_grid).abs() < 1e-4);
        assert!((c_grid - 1.381).abs() < 1e-3);
        assert!(penalized_cost(NormOrder::Half, w, 2.0, 1.0, 1.0) < 4.0);
        assert_eq!(threshold_l05(-2.0, 1.0, 1.0, false), -w);
        assert_eq!(threshold_l05(0.01, 1.0, 1.0, true), 0.01);
    }

    #[test]
    fn order_parsing() {
        assert_eq!(NormOrder::from_p(0.5).unwrap(), NormOrder::Half);
        assert!(NormOrder::from_p(2.0).is_err());
        assert_eq!("L1".parse::<NormOrder>().unwrap(), NormOrder::L1);
        assert_eq!("l0.5".parse::<NormOrder>().unwrap(), NormOrder::Half);
        assert!(PenaltySpec::new(NormOrder::L1, 1.5).is_err());
        assert!(PenaltySpec::new(NormOrder::L1, -0.1).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn order() -> impl Strategy<Value = NormOrder> {
            prop_oneof![Just(NormOrder::L0), Just(NormOrder::Half), Just(NormOrder::L1)]
        }

        proptest! {
            #[test]
            fn shrinks_and_keeps_sign(
                o in order(), w in -3.0f64..3.0, lambda in 0.0f64..1.0, kappa2 in 0.01f64..25.0,
            ) {
                let out = threshold(o, w, lambda, kappa2, false);
                prop_assert!(out.abs() <= w.abs());
                prop_assert!(out == 0.0 || out.signum() == w.signum());
            }

            #[test]
            fn protection_is_identity(
                o in order(), w in -3.0f64..3.0, lambda in 0.0f64..1.0, kappa2 in 0.01f64..25.0,
            ) {
                prop_assert_eq!(threshold(o, w, lambda, kappa2, true), w);
            }

            #[test]
            fn zero_set_monotone_in_lambda(
                o in order(), w in -3.0f64..3.0, l1 in 0.0f64..1.0, dl in 0.0f64..1.0,
                kappa2 in 0.01f64..25.0,
            ) {
                let l2 = (l1 + dl).min(1.0);
                if threshold(o, w, l1, kappa2, false) == 0.0 {
                    prop_assert_eq!(threshold(o, w, l2, kappa2, false), 0.0);
                }
            }

            #[test]
            fn zero_zone_is_interval(
                o in order(), w in -3.0f64..3.0, s in 0.0f64..1.0, lambda in 0.0f64..1.0,
                kappa2 in 0.01f64..25.0,
            ) {
                // if w is zeroed, so is every smaller magnitude
                if threshold(o, w, lambda, kappa2, false) == 0.0 {
                    prop_assert_eq!(threshold(o, s * w, lambda, kappa2, false), 0.0);
                }
            }

            #[test]
            fn cubic_residual(c in 0.0f64..(4.0 / 27.0)) {
                let x = cubic_largest_root(c).unwrap();
                prop_assert!((1.0 / 3.0..=1.0).contains(&x));
                prop_assert!((x * (1.0 - x).powi(2) - c).abs() <= 1e-12);
            }
        }
    }
}
