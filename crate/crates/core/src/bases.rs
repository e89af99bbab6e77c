//! Parametric transformation bases `a(y)` with `h(y) = a(y)ᵀθ`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound on every monotonicity constraint row, `Kθ ≥ ε`.
pub const MONOTONE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisKind {
    /// `a(y) = (y, −1)`
    Linear,
    /// `a(y) = (1, log y)`, the Weibull-type basis on y > 0.
    LogLinear,
    /// Bernstein polynomial of the given order on a closed support.
    Bernstein,
    /// Threshold selectors for an ordered categorical response.
    OrdinalThresholds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformationBasis {
    kind: BasisKind,
    order: usize,
    support: (f64, f64),
}

/// Value of `a(y)` at a likelihood bound, where ±∞ are legal.
#[derive(Debug, Clone, PartialEq)]
pub enum BoundValue {
    NegInf,
    PosInf,
    Row(Vec<f64>),
}

/// `matrix · θ ≥ offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraints {
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl LinearConstraints {
    pub fn empty(ncols: usize) -> Self {
        Self {
            matrix: DMatrix::zeros(0, ncols),
            offset: DVector::zeros(0),
        }
    }

    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    /// Slack `Kθ − k₀`; negative entries are violations.
    pub fn slack(&self, theta: &[f64]) -> DVector<f64> {
        let t = DVector::from_column_slice(theta);
        &self.matrix * t - &self.offset
    }

    pub fn max_violation(&self, theta: &[f64]) -> f64 {
        self.slack(theta).iter().fold(0.0f64, |m, &s| m.max(-s))
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

impl TransformationBasis {
    pub fn linear() -> Self {
        Self {
            kind: BasisKind::Linear,
            order: 1,
            support: (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    pub fn log_linear() -> Self {
        Self {
            kind: BasisKind::LogLinear,
            order: 1,
            support: (0.0, f64::INFINITY),
        }
    }

    pub fn bernstein(order: usize, lower: f64, upper: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::Domain("Bernstein order must be at least 1".into()));
        }
        if !(lower.is_finite() && upper.is_finite() && lower < upper) {
            return Err(Error::Domain(format!(
                "Bernstein support must be a finite interval with lower < upper, got [{lower}, {upper}]"
            )));
        }
        Ok(Self {
            kind: BasisKind::Bernstein,
            order,
            support: (lower, upper),
        })
    }

    /// Ordinal response with `categories` levels, encoded 1..=categories.
    pub fn ordinal(categories: usize) -> Result<Self> {
        if categories < 2 {
            return Err(Error::Domain(
                "an ordinal response needs at least two categories".into(),
            ));
        }
        Ok(Self {
            kind: BasisKind::OrdinalThresholds,
            order: categories - 1,
            support: (1.0, categories as f64),
        })
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn support(&self) -> (f64, f64) {
        self.support
    }

    /// Number of categories for an ordinal basis.
    pub fn categories(&self) -> Option<usize> {
        (self.kind == BasisKind::OrdinalThresholds).then_some(self.order + 1)
    }

    /// Basis dimension P.
    pub fn dim(&self) -> usize {
        match self.kind {
            BasisKind::Linear | BasisKind::LogLinear => 2,
            BasisKind::Bernstein => self.order + 1,
            BasisKind::OrdinalThresholds => self.order,
        }
    }

    fn unit(&self, y: f64) -> f64 {
        let (lo, hi) = self.support;
        ((y - lo) / (hi - lo)).clamp(0.0, 1.0)
    }

    fn ordinal_index(&self, y: f64) -> Result<usize> {
        let k = y.round();
        if (y - k).abs() > 1e-9 || k < 1.0 || k > self.order as f64 {
            return Err(Error::Domain(format!(
                "ordinal threshold index must be an integer in 1..={}, got {y}",
                self.order
            )));
        }
        Ok(k as usize)
    }

    /// `a(y)`; Bernstein arguments outside the support are clamped to it.
    pub fn eval(&self, y: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(y, &mut out)?;
        Ok(out)
    }

    pub fn eval_into(&self, y: f64, out: &mut [f64]) -> Result<()> {
        if y.is_nan() {
            return Err(Error::Domain("basis evaluated at NaN".into()));
        }
        match self.kind {
            BasisKind::Linear => {
                out[0] = y;
                out[1] = -1.0;
            }
            BasisKind::LogLinear => {
                if y <= 0.0 {
                    return Err(Error::Domain(format!(
                        "log-linear basis requires y > 0, got {y}"
                    )));
                }
                out[0] = 1.0;
                out[1] = y.ln();
            }
            BasisKind::Bernstein => {
                let t = self.unit(y);
                let p = self.order;
                for (k, o) in out.iter_mut().enumerate() {
                    *o = binomial(p, k) * t.powi(k as i32) * (1.0 - t).powi((p - k) as i32);
                }
            }
            BasisKind::OrdinalThresholds => {
                let k = self.ordinal_index(y)?;
                out.fill(0.0);
                out[k - 1] = 1.0;
            }
        }
        Ok(())
    }

    /// `a′(y)`, the derivative in y.
    pub fn eval_deriv(&self, y: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.eval_deriv_into(y, &mut out)?;
        Ok(out)
    }

    pub fn eval_deriv_into(&self, y: f64, out: &mut [f64]) -> Result<()> {
        match self.kind {
            BasisKind::Linear => {
                out[0] = 1.0;
                out[1] = 0.0;
            }
            BasisKind::LogLinear => {
                if y <= 0.0 {
                    return Err(Error::Domain(format!(
                        "log-linear basis requires y > 0, got {y}"
                    )));
                }
                out[0] = 0.0;
                out[1] = 1.0 / y;
            }
            BasisKind::Bernstein => {
                let (lo, hi) = self.support;
                out.fill(0.0);
                if y < lo || y > hi {
                    // constant extension outside the support
                    return Ok(());
                }
                let t = self.unit(y);
                let p = self.order;
                let scale = p as f64 / (hi - lo);
                // B_{k,p}' = p (B_{k-1,p-1} − B_{k,p-1}) / (hi − lo)
                let lower: Vec<f64> = (0..p)
                    .map(|k| {
                        binomial(p - 1, k)
                            * t.powi(k as i32)
                            * (1.0 - t).powi((p - 1 - k) as i32)
                    })
                    .collect();
                for (k, o) in out.iter_mut().enumerate() {
                    let left = if k > 0 { lower[k - 1] } else { 0.0 };
                    let right = if k < p { lower[k] } else { 0.0 };
                    *o = scale * (left - right);
                }
            }
            BasisKind::OrdinalThresholds => {
                return Err(Error::Unsupported(
                    "ordinal thresholds have no derivative; use the interval likelihood".into(),
                ))
            }
        }
        Ok(())
    }

    /// `a(y)` at an interval bound, mapping the edges of the response space
    /// to ±∞: infinite y, y ≤ 0 for the log-linear basis, and category
    /// indices 0 and K for ordinal responses.
    pub fn eval_bound(&self, y: f64) -> Result<BoundValue> {
        if y == f64::NEG_INFINITY {
            return Ok(BoundValue::NegInf);
        }
        if y == f64::INFINITY {
            return Ok(BoundValue::PosInf);
        }
        match self.kind {
            BasisKind::LogLinear if y <= 0.0 => Ok(BoundValue::NegInf),
            BasisKind::OrdinalThresholds if y <= 0.5 => Ok(BoundValue::NegInf),
            BasisKind::OrdinalThresholds if y >= self.order as f64 + 0.5 => Ok(BoundValue::PosInf),
            _ => self.eval(y).map(BoundValue::Row),
        }
    }

    /// `Kθ ≥ k₀` guaranteeing a monotone non-decreasing `h`.
    pub fn constraint_system(&self) -> LinearConstraints {
        let p = self.dim();
        match self.kind {
            BasisKind::Linear => {
                let mut m = DMatrix::zeros(1, p);
                m[(0, 0)] = 1.0;
                LinearConstraints {
                    matrix: m,
                    offset: DVector::from_element(1, MONOTONE_EPS),
                }
            }
            BasisKind::LogLinear => {
                let mut m = DMatrix::zeros(1, p);
                m[(0, 1)] = 1.0;
                LinearConstraints {
                    matrix: m,
                    offset: DVector::from_element(1, MONOTONE_EPS),
                }
            }
            BasisKind::Bernstein | BasisKind::OrdinalThresholds => {
                let rows = p.saturating_sub(1);
                let mut m = DMatrix::zeros(rows, p);
                for r in 0..rows {
                    m[(r, r)] = -1.0;
                    m[(r, r + 1)] = 1.0;
                }
                LinearConstraints {
                    matrix: m,
                    offset: DVector::from_element(rows, MONOTONE_EPS),
                }
            }
        }
    }

    /// Solve `a(y)ᵀθ = target` for y by bisection on the support.
    ///
    /// Returns `Err(side)` with the violated boundary when the target lies
    /// outside the attainable range of `h`. Ordinal bases return the
    /// category index.
    pub fn invert(&self, theta: &[f64], target: f64) -> std::result::Result<f64, f64> {
        match self.kind {
            BasisKind::Linear => Ok((target + theta[1]) / theta[0]),
            BasisKind::LogLinear => Ok(((target - theta[0]) / theta[1]).exp()),
            BasisKind::OrdinalThresholds => {
                let k = theta.iter().position(|&t| target <= t).unwrap_or(theta.len());
                Ok((k + 1) as f64)
            }
            BasisKind::Bernstein => {
                let (lo, hi) = self.support;
                let h = |y: f64| -> f64 {
                    self.eval(y)
                        .map(|a| a.iter().zip(theta).map(|(a, t)| a * t).sum())
                        .unwrap_or(f64::NAN)
                };
                if target < h(lo) {
                    return Err(lo);
                }
                if target > h(hi) {
                    return Err(hi);
                }
                let (mut a, mut b) = (lo, hi);
                for _ in 0..200 {
                    let mid = 0.5 * (a + b);
                    if h(mid) < target {
                        a = mid;
                    } else {
                        b = mid;
                    }
                    if b - a <= 1e-12 * (1.0 + mid.abs()) {
                        break;
                    }
                }
                Ok(0.5 * (a + b))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent de Casteljau evaluation of the k-th Bernstein basis polynomial.
    fn de_casteljau_basis(order: usize, k: usize, t: f64) -> f64 {
        let mut coef = vec![0.0; order + 1];
        coef[k] = 1.0;
        for r in 1..=order {
            for i in 0..=(order - r) {
                coef[i] = (1.0 - t) * coef[i] + t * coef[i + 1];
            }
        }
        coef[0]
    }

    #[test]
    fn linear_and_loglinear_values() {
        assert_eq!(TransformationBasis::linear().eval(2.0).unwrap(), vec![2.0, -1.0]);
        assert_eq!(TransformationBasis::log_linear().eval(1.0).unwrap(), vec![1.0, 0.0]);
        assert_eq!(TransformationBasis::linear().eval_deriv(5.0).unwrap(), vec![1.0, 0.0]);
        assert_eq!(TransformationBasis::log_linear().eval_deriv(2.0).unwrap(), vec![0.0, 0.5]);
        assert!(matches!(
            TransformationBasis::log_linear().eval(0.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            TransformationBasis::log_linear().eval(-1.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn bernstein_matches_de_casteljau() {
        let b = TransformationBasis::bernstein(6, 0.0, 1.0).unwrap();
        let a = b.eval(0.3).unwrap();
        assert_eq!(a.len(), 7);
        for (k, v) in a.iter().enumerate() {
            assert!((v - de_casteljau_basis(6, k, 0.3)).abs() < 1e-14);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bernstein_clamps_outside_support() {
        let b = TransformationBasis::bernstein(3, 1.0, 2.0).unwrap();
        assert_eq!(b.eval(0.0).unwrap(), b.eval(1.0).unwrap());
        assert_eq!(b.eval(5.0).unwrap(), b.eval(2.0).unwrap());
        assert!(b.eval_deriv(5.0).unwrap().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn bernstein_derivative_matches_finite_differences() {
        let b = TransformationBasis::bernstein(6, 0.0, 1.0).unwrap();
        let h = 1e-6;
        for i in 1..20 {
            let y = i as f64 / 20.0;
            let d = b.eval_deriv(y).unwrap();
            let up = b.eval(y + h).unwrap();
            let dn = b.eval(y - h).unwrap();
            for k in 0..7 {
                let fd = (up[k] - dn[k]) / (2.0 * h);
                let denom = fd.abs().max(1e-3);
                assert!((d[k] - fd).abs() / denom < 1e-6, "y={y} k={k}");
            }
        }
    }

    #[test]
    fn ordinal_has_no_derivative() {
        let b = TransformationBasis::ordinal(5).unwrap();
        assert_eq!(b.dim(), 4);
        assert_eq!(b.eval(2.0).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
        assert!(matches!(b.eval_deriv(2.0), Err(Error::Unsupported(_))));
        assert_eq!(b.eval_bound(0.0).unwrap(), BoundValue::NegInf);
        assert_eq!(b.eval_bound(5.0).unwrap(), BoundValue::PosInf);
        assert!(b.eval(2.5).is_err());
    }

    #[test]
    fn constraint_shapes() {
        let lin = TransformationBasis::linear().constraint_system();
        assert_eq!(lin.matrix.shape(), (1, 2));
        assert_eq!(lin.matrix[(0, 0)], 1.0);
        let bern = TransformationBasis::bernstein(2, 0.0, 1.0).unwrap().constraint_system();
        assert_eq!(bern.matrix.shape(), (2, 3));
        let ord = TransformationBasis::ordinal(5).unwrap().constraint_system();
        assert_eq!(ord.matrix.shape(), (3, 4));
        assert_eq!(ord.offset[0], MONOTONE_EPS);
        let binary = TransformationBasis::ordinal(2).unwrap().constraint_system();
        assert_eq!(binary.nrows(), 0);
    }

    #[test]
    fn monotone_for_random_admissible_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = TransformationBasis::bernstein(5, -2.0, 3.0).unwrap();
        for _ in 0..1000 {
            let mut theta = vec![rng.random_range(-3.0..3.0)];
            for _ in 0..5 {
                let last = *theta.last().unwrap();
                theta.push(last + MONOTONE_EPS + rng.random_range(0.0..2.0));
            }
            assert!(b.constraint_system().max_violation(&theta) <= 0.0);
            let y1 = rng.random_range(-2.0..3.0);
            let y2 = rng.random_range(y1..=3.0);
            let h = |y: f64| -> f64 { b.eval(y).unwrap().iter().zip(&theta).map(|(a, t)| a * t).sum() };
            assert!(h(y1) <= h(y2) + 1e-12);
            let d: f64 = b.eval_deriv(y1).unwrap().iter().zip(&theta).map(|(a, t)| a * t).sum();
            assert!(d >= 0.0);
        }
    }

    #[test]
    fn invert_recovers_response() {
        let b = TransformationBasis::bernstein(4, 0.0, 10.0).unwrap();
        let theta = [-3.0, -1.0, 0.5, 1.0, 4.0];
        let target: f64 = b.eval(3.7).unwrap().iter().zip(&theta).map(|(a, t)| a * t).sum();
        let y = b.invert(&theta, target).unwrap();
        assert!((y - 3.7).abs() < 1e-9);
        assert_eq!(b.invert(&theta, -10.0), Err(0.0));
        let o = TransformationBasis::ordinal(4).unwrap();
        assert_eq!(o.invert(&[-1.0, 0.0, 1.0], 0.5).unwrap(), 3.0);
        assert_eq!(o.invert(&[-1.0, 0.0, 1.0], 5.0).unwrap(), 4.0);
        assert_eq!(o.invert(&[-1.0, 0.0, 1.0], -5.0).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn bernstein_partition_of_unity(order in 1usize..12, y in 0.0f64..=1.0) {
            let b = TransformationBasis::bernstein(order, 0.0, 1.0).unwrap();
            let s: f64 = b.eval(y).unwrap().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
