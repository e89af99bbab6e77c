//! Marginal distribution functions and marginal effects.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::covariance::{lambda_from_packed, packed_len};
use crate::error::{Error, Result};
use crate::fit::FitResult;
use crate::likelihood::{Marginalization, ModelSpec, ParameterVector};
use crate::normal;

/// One `(x, u)` configuration and the response values to evaluate at.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalQuery {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub stratum: usize,
}

impl MarginalQuery {
    pub fn new(x: Vec<f64>, u: Vec<f64>, y: Vec<f64>) -> Self {
        MarginalQuery { x, u, y, stratum: 0 }
    }
}

/// `√(uᵀΛΛᵀu + 1)`, the factor by which effects shrink marginally.
pub fn marginal_effect_scale(params: &ParameterVector, u: &[f64]) -> Result<f64> {
    let r = u.len();
    if packed_len(r) != params.gamma.len() {
        return Err(Error::Dimension(format!(
            "u has {r} entries but γ has {} (expected {})",
            params.gamma.len(),
            packed_len(r)
        )));
    }
    let lambda = lambda_from_packed(&params.gamma, r);
    let lu = lambda.transpose() * DVector::from_column_slice(u);
    Ok((lu.norm_squared() + 1.0).sqrt())
}

/// `P(Y ≤ y | x, u)` on the query grid.
pub fn marginal_cdf(spec: &ModelSpec, params: &ParameterVector, query: &MarginalQuery) -> Result<Vec<f64>> {
    params.check(spec)?;
    if query.x.len() != spec.n_fixed || query.u.len() != spec.n_random {
        return Err(Error::Dimension(format!(
            "query has {} covariates and {} random-design entries, model expects {} and {}",
            query.x.len(),
            query.u.len(),
            spec.n_fixed,
            spec.n_random
        )));
    }
    if query.stratum >= spec.n_strata {
        return Err(Error::Dimension(format!("stratum {} out of range", query.stratum + 1)));
    }
    if query.y.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Domain("y grid must be strictly increasing".into()));
    }
    let scale = marginal_effect_scale(params, &query.u)?;
    let xb: f64 = query.x.iter().zip(&params.beta).map(|(x, b)| x * b).sum();
    let pb = spec.basis.dim();
    let theta = &params.theta[query.stratum * pb..(query.stratum + 1) * pb];
    query
        .y
        .iter()
        .map(|&y| {
            let r = match spec.basis.eval_bound(y)? {
                crate::bases::BoundValue::NegInf => return Ok(0.0),
                crate::bases::BoundValue::PosInf => return Ok(1.0),
                crate::bases::BoundValue::Row(a) => a.iter().zip(theta).map(|(a, t)| a * t).sum::<f64>() - xb,
            };
            Ok(match spec.marginalization {
                Marginalization::M1 => normal::cdf(spec.link.probit_of(r) / scale),
                Marginalization::M2 => spec.link.cdf(r / scale),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectInterval {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Linear-interpolation sample quantile of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

const DRAWS_PER_CHUNK: usize = 4096;

/// Percentile interval of `transform` under draws of the parameters at
/// `indices` from their joint normal approximation; other parameters stay
/// at their estimates. Returns the transform at the estimates and the
/// equal-tailed 95% interval.
pub fn effect_ci_simulate<F>(
    estimates: &[f64],
    covariance: &DMatrix<f64>,
    indices: &[usize],
    transform: F,
    draws: usize,
    seed: u64,
) -> Result<EffectInterval>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if draws < 2 {
        return Err(Error::InvalidParameter("at least two draws are needed".into()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= estimates.len()) {
        return Err(Error::Dimension(format!("parameter index {bad} out of range")));
    }
    let k = indices.len();
    let sub = DMatrix::from_fn(k, k, |a, b| covariance[(indices[a], indices[b])]);
    let sub = (&sub + sub.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sub);
    let largest = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if eig.eigenvalues.iter().any(|&v| v < -1e-10 * largest.max(1e-300)) {
        return Err(Error::InvalidParameter("covariance is not positive semidefinite".into()));
    }
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    let point = transform(estimates);

    let chunks = draws.div_ceil(DRAWS_PER_CHUNK);
    let mut values: Vec<f64> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let n = DRAWS_PER_CHUNK.min(draws - c * DRAWS_PER_CHUNK);
            let mut out = Vec::with_capacity(n);
            let mut theta = estimates.to_vec();
            for _ in 0..n {
                let z = DVector::from_fn(k, |_, _| StandardNormal.sample(&mut rng));
                let shift = &root * z;
                for (a, &i) in indices.iter().enumerate() {
                    theta[i] = estimates[i] + shift[a];
                }
                out.push(transform(&theta));
            }
            out
        })
        .collect();
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Domain("transform produced NaN".into()));
    }
    values.sort_by(|a, b| a.total_cmp(b));
    Ok(EffectInterval {
        point,
        lower: quantile_sorted(&values, 0.025),
        upper: quantile_sorted(&values, 0.975),
    })
}

/// [`effect_ci_simulate`] on a fitted model.
pub fn effect_ci_for_fit<F>(fit: &FitResult, indices: &[usize], transform: F, draws: usize, seed: u64) -> Result<EffectInterval>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    effect_ci_simulate(&fit.estimates(), &fit.covariance, indices, transform, draws, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bases::TransformationBasis;
    use crate::links::LinkFamily;

    #[test]
    fn effect_scale_examples() {
        let p = ParameterVector::new(vec![], vec![], vec![0.0]);
        assert_eq!(marginal_effect_scale(&p, &[1.0]).unwrap(), 1.0);
        let p = ParameterVector::new(vec![], vec![], vec![0.15]);
        assert!((marginal_effect_scale(&p, &[1.0]).unwrap() - 1.0225f64.sqrt()).abs() < 1e-15);
        let g = [0.7, -0.4, 1.1];
        let p = ParameterVector::new(vec![], vec![], g.to_vec());
        let t = 2.5;
        let lam = DMatrix::from_row_slice(2, 2, &[g[0], 0.0, g[1], g[2]]);
        let u = DVector::from_vec(vec![1.0, t]);
        let direct = ((u.transpose() * &lam * lam.transpose() * &u)[(0, 0)] + 1.0).sqrt();
        assert!((marginal_effect_scale(&p, &[1.0, t]).unwrap() - direct).abs() < 1e-14);
    }

    #[test]
    fn zero_variance_gives_model_cdf() {
        for m in [Marginalization::M1, Marginalization::M2] {
            let spec = ModelSpec::new(TransformationBasis::linear(), LinkFamily::Logit, m, 1, 1);
            let p = ParameterVector::new(vec![1.5, 0.2], vec![0.4], vec![0.0]);
            let q = MarginalQuery::new(vec![1.0], vec![1.0], vec![-1.0, 0.0, 2.0]);
            let cdf = marginal_cdf(&spec, &p, &q).unwrap();
            for (y, c) in q.y.iter().zip(&cdf) {
                assert!((c - LinkFamily::Logit.cdf(1.5 * y - 0.2 - 0.4)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn degenerate_covariance_gives_point_interval() {
        let cov = DMatrix::zeros(2, 2);
        let ci = effect_ci_simulate(&[0.3, 0.5], &cov, &[0, 1], |v| v[0].exp(), 1000, 1).unwrap();
        assert_eq!(ci.lower, ci.point);
        assert_eq!(ci.upper, ci.point);
    }

    #[test]
    fn identity_transform_matches_normal_quantiles() {
        let se = 0.2;
        let cov = DMatrix::from_element(1, 1, se * se);
        let ci = effect_ci_simulate(&[1.0], &cov, &[0], |v| v[0], 100_000, 7).unwrap();
        let half = 1.959_964 * se;
        assert!((ci.lower - (1.0 - half)).abs() < 0.01, "{ci:?}");
        assert!((ci.upper - (1.0 + half)).abs() < 0.01, "{ci:?}");
    }

    #[test]
    fn simulation_is_seed_deterministic() {
        let cov = DMatrix::from_row_slice(2, 2, &[0.04, 0.01, 0.01, 0.09]);
        let f = |v: &[f64]| v[0] / (v[1] * v[1] + 1.0).sqrt();
        let a = effect_ci_simulate(&[0.3, 0.5], &cov, &[0, 1], f, 10_000, 42).unwrap();
        let b = effect_ci_simulate(&[0.3, 0.5], &cov, &[0, 1], f, 10_000, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn indefinite_covariance_rejected() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(effect_ci_simulate(&[0.0, 0.0], &cov, &[0, 1], |v| v[0], 100, 1).is_err());
    }
}
