//! Constrained simultaneous maximum likelihood for `(θ, β, γ)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::bases::{BasisKind, BoundValue, LinearConstraints};
use crate::covariance::diagonal_positions;
use crate::error::{Error, Result};
use crate::integrate::{CubatureKind, CubatureRule};
use crate::likelihood::{ClusterData, Likelihood, ModelSpec, ParameterVector, Response};
use crate::optim::{self, AlOptions, Objective};

/// Shift in the log-likelihood under the refined rule that triggers a warning.
pub const REFINEMENT_WARNING: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_outer: usize,
    pub max_inner: usize,
    /// Stationarity tolerance relative to `1 + |ℓ|`.
    pub tol: f64,
    /// Parameters held at fixed values, as flat indices into `(θ, β, γ)`.
    pub fixed: Vec<(usize, f64)>,
    /// Re-evaluate at the solution with a refined cubature rule.
    pub refine: bool,
    pub standard_errors: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_outer: 50,
            max_inner: 500,
            tol: 1e-6,
            fixed: Vec::new(),
            refine: true,
            standard_errors: true,
        }
    }
}

impl FitOptions {
    /// Hold every γ entry fixed: the diagonal of Λ at `value`, off-diagonal
    /// entries at zero.
    pub fn fix_gamma(mut self, spec: &ModelSpec, value: f64) -> Self {
        let layout = spec.layout();
        let diag = diagonal_positions(spec.n_random);
        for k in 0..layout.m {
            let v = if diag.contains(&k) { value } else { 0.0 };
            self.fixed.retain(|f| f.0 != layout.p + layout.q + k);
            self.fixed.push((layout.p + layout.q + k, v));
        }
        self
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub params: ParameterVector,
    /// Log-likelihood at the estimates (under the refined rule if one was used).
    pub loglik: f64,
    /// Log-likelihood under the rule used during optimization.
    pub loglik_optimization: f64,
    /// Covariance of the estimates in flat `(θ, β, γ)` order; zero for fixed
    /// parameters.
    pub covariance: DMatrix<f64>,
    pub converged: bool,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub gradient_norm: f64,
    pub max_violation: f64,
    /// Parameters appearing in an active constraint.
    pub active: Vec<bool>,
    pub fixed: Vec<bool>,
    pub rule: CubatureRule,
    /// Rule of the final evaluation, when refined.
    pub refined_rule: Option<CubatureRule>,
    pub n_clusters: usize,
    pub n_observations: usize,
    /// Clusters whose probability was floored in the final evaluation.
    pub clamped: usize,
    pub warnings: Vec<String>,
    pub history: Vec<f64>,
}

impl FitResult {
    pub fn estimates(&self) -> Vec<f64> {
        self.params.to_vec()
    }

    /// Standard errors; NaN for fixed parameters.
    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.covariance.nrows())
            .map(|k| {
                if self.fixed[k] {
                    f64::NAN
                } else {
                    self.covariance[(k, k)].max(0.0).sqrt()
                }
            })
            .collect()
    }
}

struct Restricted<'a> {
    lik: &'a Likelihood,
    full: Vec<f64>,
    free: Vec<usize>,
}

impl Restricted<'_> {
    fn expand(&self, x: &[f64]) -> Vec<f64> {
        let mut full = self.full.clone();
        for (i, &k) in self.free.iter().enumerate() {
            full[k] = x[i];
        }
        full
    }

    fn loglik(&self, full: &[f64]) -> Option<f64> {
        let p = ParameterVector::from_slice(self.lik.spec(), full).ok()?;
        self.lik.loglik(&p).ok().filter(|v| v.is_finite())
    }
}

impl Objective for Restricted<'_> {
    fn value(&self, x: &[f64]) -> Option<f64> {
        self.loglik(&self.expand(x)).map(|v| -v)
    }

    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        let full = self.expand(x);
        if self.lik.has_analytic_score() {
            let p = ParameterVector::from_slice(self.lik.spec(), &full).ok()?;
            let g = self.lik.score(&p).ok()?;
            return Some(self.free.iter().map(|&k| -g[k]).collect());
        }
        let mut out = Vec::with_capacity(self.free.len());
        let mut f0 = None;
        for &k in &self.free {
            let h = 1e-6 * full[k].abs().max(1.0);
            let mut up = full.clone();
            up[k] += h;
            let mut dn = full.clone();
            dn[k] -= h;
            let d = match (self.loglik(&up), self.loglik(&dn)) {
                (Some(a), Some(b)) => (a - b) / (2.0 * h),
                (Some(a), None) => {
                    let c = *f0.get_or_insert(self.loglik(&full)?);
                    (a - c) / h
                }
                (None, Some(b)) => {
                    let c = *f0.get_or_insert(self.loglik(&full)?);
                    (c - b) / h
                }
                (None, None) => return None,
            };
            out.push(-d);
        }
        Some(out)
    }
}

/// Restrict `K·full ≥ k₀` to the free coordinates.
fn restrict_constraints(c: &LinearConstraints, full: &[f64], free: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    let mut rows = Vec::new();
    for i in 0..c.nrows() {
        if free.iter().any(|&k| c.matrix[(i, k)] != 0.0) {
            rows.push(i);
        }
    }
    let mut k = DMatrix::zeros(rows.len(), free.len());
    let mut k0 = DVector::zeros(rows.len());
    for (r, &i) in rows.iter().enumerate() {
        let mut fixed_part = 0.0;
        for (j, &v) in full.iter().enumerate() {
            match free.iter().position(|&f| f == j) {
                Some(col) => k[(r, col)] = c.matrix[(i, j)],
                None => fixed_part += c.matrix[(i, j)] * v,
            }
        }
        k0[r] = c.offset[i] - fixed_part;
    }
    (k, k0)
}

/// Negative Hessian of the log-likelihood over the `free` coordinates.
fn information(lik: &Likelihood, full: &[f64], free: &[usize]) -> Result<DMatrix<f64>> {
    let spec = lik.spec();
    let n = free.len();
    let mut h = DMatrix::zeros(n, n);
    let at = |v: &[f64]| -> Result<f64> { lik.loglik(&ParameterVector::from_slice(spec, v)?) };
    if lik.has_analytic_score() {
        let score = |v: &[f64]| -> Result<Vec<f64>> { lik.score(&ParameterVector::from_slice(spec, v)?) };
        for (a, &k) in free.iter().enumerate() {
            let step = 1e-5 * full[k].abs().max(1.0);
            let mut up = full.to_vec();
            up[k] += step;
            let mut dn = full.to_vec();
            dn[k] -= step;
            let (gu, gd) = (score(&up)?, score(&dn)?);
            for (b, &l) in free.iter().enumerate() {
                h[(b, a)] = -(gu[l] - gd[l]) / (2.0 * step);
            }
        }
    } else {
        let steps: Vec<f64> = free.iter().map(|&k| 1e-4 * full[k].abs().max(1.0)).collect();
        let f0 = at(full)?;
        for a in 0..n {
            let (ka, ha) = (free[a], steps[a]);
            let mut up = full.to_vec();
            up[ka] += ha;
            let mut dn = full.to_vec();
            dn[ka] -= ha;
            h[(a, a)] = -(at(&up)? - 2.0 * f0 + at(&dn)?) / (ha * ha);
            for b in 0..a {
                let (kb, hb) = (free[b], steps[b]);
                let shifted = |sa: f64, sb: f64| -> Result<f64> {
                    let mut v = full.to_vec();
                    v[ka] += sa * ha;
                    v[kb] += sb * hb;
                    at(&v)
                };
                let d = shifted(1.0, 1.0)? - shifted(1.0, -1.0)? - shifted(-1.0, 1.0)? + shifted(-1.0, -1.0)?;
                h[(a, b)] = -d / (4.0 * ha * hb);
                h[(b, a)] = h[(a, b)];
            }
        }
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// Observed information, the symmetrized negative Hessian of the total
/// log-likelihood over all parameters.
pub fn observed_information(
    spec: &ModelSpec,
    clusters: &[ClusterData],
    params: &ParameterVector,
    rule: &CubatureRule,
) -> Result<DMatrix<f64>> {
    params.check(spec)?;
    let lik = Likelihood::new(spec, clusters, *rule)?;
    let free: Vec<usize> = (0..spec.layout().len()).collect();
    information(&lik, &params.to_vec(), &free)
}

/// Pseudo-inverse of a symmetric information matrix with a zero eigenvalue
/// floor on the result.
pub fn invert_information(info: &DMatrix<f64>, warnings: &mut Vec<String>) -> DMatrix<f64> {
    let n = info.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = SymmetricEigen::new((info + info.transpose()) * 0.5);
    let largest = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cutoff = largest * 1e-12;
    let mut inv = DVector::zeros(n);
    let mut singular = false;
    let mut indefinite = false;
    for i in 0..n {
        let ev = eig.eigenvalues[i];
        if ev > cutoff {
            inv[i] = 1.0 / ev;
        } else if ev < -cutoff {
            indefinite = true;
        } else {
            singular = true;
        }
    }
    if singular {
        warnings.push("observed information is singular; covariance uses a pseudo-inverse".into());
    }
    if indefinite {
        warnings.push("observed information is not positive definite; negative directions floored at zero".into());
    }
    let q = &eig.eigenvectors;
    let cov = q * DMatrix::from_diagonal(&inv) * q.transpose();
    (&cov + cov.transpose()) * 0.5
}

fn representative(lower: f64, upper: f64) -> f64 {
    if upper.is_finite() {
        upper
    } else {
        lower
    }
}

/// Starting values: a least-squares fit of `F⁻¹` of the empirical CDF on
/// the basis, refined by the independence model, with Λ's diagonal at 0.1.
pub fn initial_params(spec: &ModelSpec, clusters: &[ClusterData]) -> Result<ParameterVector> {
    initial_params_with(spec, clusters, &FitOptions::default())
}

fn initial_params_with(spec: &ModelSpec, clusters: &[ClusterData], options: &FitOptions) -> Result<ParameterVector> {
    if clusters.is_empty() {
        return Err(Error::Data("dataset has no clusters".into()));
    }
    let layout = spec.layout();
    let ordinal = spec.basis.kind() == BasisKind::OrdinalThresholds;

    // (value, stratum, cluster, row)
    let mut obs: Vec<(f64, usize, usize, usize)> = Vec::new();
    for (ci, c) in clusters.iter().enumerate() {
        c.validate(spec)?;
        match &c.response {
            Response::Exact(y) => obs.extend(y.iter().enumerate().map(|(j, &v)| (v, c.strata[j], ci, j))),
            Response::Interval { lower, upper } => obs.extend(
                lower
                    .iter()
                    .zip(upper)
                    .enumerate()
                    .map(|(j, (&l, &u))| (representative(l, u), c.strata[j], ci, j)),
            ),
        }
    }

    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    for s in 0..spec.n_strata {
        let mut values: Vec<f64> = obs.iter().filter(|o| o.1 == s).map(|o| o.0).collect();
        if values.is_empty() {
            return Err(Error::Data(format!("stratum {} has no observations", s + 1)));
        }
        values.sort_by(|a, b| a.total_cmp(b));
        if values[0] == values[values.len() - 1] {
            return Err(Error::Data("response is constant; the transformation is not identifiable".into()));
        }
        let n = values.len() as f64;
        for o in obs.iter().filter(|o| o.1 == s) {
            let lt = values.partition_point(|&v| v < o.0) as f64;
            let le = values.partition_point(|&v| v <= o.0) as f64;
            let p = if ordinal { le / n } else { (lt + 0.5 * (le - lt)) / n };
            if !(p > 0.0 && p < 1.0) {
                continue;
            }
            let row = match spec.basis.eval_bound(o.0)? {
                BoundValue::Row(r) => r,
                _ => continue,
            };
            let mut full = vec![0.0; layout.p + layout.q];
            full[s * row.len()..(s + 1) * row.len()].copy_from_slice(&row);
            let x = &clusters[o.2].x;
            for k in 0..layout.q {
                full[layout.p + k] = -x[(o.3, k)];
            }
            rows.push((full, spec.link.quantile(p)?));
        }
    }
    if rows.is_empty() {
        return Err(Error::Data("no observations usable for starting values".into()));
    }
    let design = DMatrix::from_fn(rows.len(), layout.p + layout.q, |i, j| rows[i].0[j]);
    let target = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    let coef = design
        .svd(true, true)
        .solve(&target, 1e-10)
        .map_err(|e| Error::Data(format!("starting-value regression failed: {e}")))?;

    let mut flat = vec![0.0; layout.len()];
    flat[..layout.p + layout.q].copy_from_slice(coef.as_slice());
    for &(k, v) in &options.fixed {
        flat[k] = v;
    }
    let constraints = spec.constraints();
    flat = optim::project_feasible(&constraints.matrix, &constraints.offset, &flat, 1e-3);
    for &(k, v) in &options.fixed {
        flat[k] = v;
    }
    let start = ParameterVector::from_slice(spec, &flat)?;

    let mut independence = options.clone();
    independence.refine = false;
    independence.standard_errors = false;
    independence = independence.fix_gamma(spec, 0.0);
    let indep = maximize_inner(spec, clusters, &start, &CubatureRule::qmc(2), &independence)?;
    let mut params = indep.params;
    for (k, g) in params.gamma.iter_mut().enumerate() {
        *g = if diagonal_positions(spec.n_random).contains(&k) { 0.1 } else { 0.0 };
    }
    let mut flat = params.to_vec();
    for &(k, v) in &options.fixed {
        flat[k] = v;
    }
    ParameterVector::from_slice(spec, &flat)
}

/// Maximize the log-likelihood from `init` under `rule`.
pub fn maximize(
    spec: &ModelSpec,
    clusters: &[ClusterData],
    init: &ParameterVector,
    rule: &CubatureRule,
    options: &FitOptions,
) -> Result<FitResult> {
    maximize_inner(spec, clusters, init, rule, options)
}

fn maximize_inner(
    spec: &ModelSpec,
    clusters: &[ClusterData],
    init: &ParameterVector,
    rule: &CubatureRule,
    options: &FitOptions,
) -> Result<FitResult> {
    init.check(spec)?;
    let layout = spec.layout();
    let mut full = init.to_vec();
    let mut is_fixed = vec![false; layout.len()];
    for &(k, v) in &options.fixed {
        if k >= layout.len() {
            return Err(Error::Dimension(format!("fixed parameter index {k} out of range")));
        }
        full[k] = v;
        is_fixed[k] = true;
    }
    let constraints = spec.constraints();
    let violation = constraints.max_violation(&full);
    if violation > 1e-8 {
        return Err(Error::InvalidParameter(format!(
            "starting values violate the constraints by {violation:e}"
        )));
    }
    let lik = Likelihood::new(spec, clusters, *rule)?;
    let free: Vec<usize> = (0..layout.len()).filter(|&k| !is_fixed[k]).collect();
    let objective = Restricted {
        lik: &lik,
        full: full.clone(),
        free: free.clone(),
    };
    if objective.loglik(&full).is_none() {
        return Err(Error::InvalidParameter(
            "log-likelihood cannot be evaluated at the starting values".into(),
        ));
    }
    let (k, k0) = restrict_constraints(&constraints, &full, &free);
    let x0: Vec<f64> = free.iter().map(|&i| full[i]).collect();
    let al = AlOptions {
        max_outer: options.max_outer,
        max_inner: options.max_inner,
        tol: options.tol,
        feas_tol: 1e-8,
    };
    let report = optim::minimize(&objective, &k, &k0, &x0, &al);
    let mut full = objective.expand(&report.x);
    // the likelihood is flat to first order in a diagonal entry of Λ at
    // zero, so boundary solutions stop just inside; snap them
    let base = objective.loglik(&full);
    for d in diagonal_positions(spec.n_random) {
        let k = layout.p + layout.q + d;
        if is_fixed[k] || !(full[k] > 0.0 && full[k] < 1e-3) {
            continue;
        }
        let mut trial = full.clone();
        trial[k] = 0.0;
        if let (Some(b), Some(t)) = (base, objective.loglik(&trial)) {
            if t >= b - 1e-9 * (1.0 + b.abs()) {
                full = trial;
            }
        }
    }
    let params = ParameterVector::from_slice(spec, &full)?;
    let mut warnings = Vec::new();
    let mut converged = report.converged;
    if !converged {
        warnings.push(format!(
            "optimizer did not converge: gradient norm {:e}, constraint violation {:e} after {} outer iterations",
            report.gradient_norm, report.violation, report.outer_iterations
        ));
    }

    let first = lik.evaluate(&params)?;
    let mut final_lik = None;
    let mut refined_rule = None;
    let uses_nodes = !lik.is_exact()
        && spec.n_random > 0
        && clusters.iter().any(|c| c.len() > 1)
        && params.gamma.iter().any(|&g| g != 0.0);
    if options.refine && uses_nodes {
        let refined = rule.refined();
        let l2 = lik.with_rule(refined)?;
        let second = l2.evaluate(&params)?;
        let shift = (second.value - first.value).abs();
        if shift > REFINEMENT_WARNING {
            warnings.push(format!(
                "log-likelihood moved by {shift:.3e} when the cubature rule was refined to {} {}; increase --nodes",
                refined.size, refined.kind
            ));
        }
        refined_rule = Some(refined);
        final_lik = Some(l2);
    }
    let eval_lik = final_lik.as_ref().unwrap_or(&lik);
    let last = eval_lik.evaluate(&params)?;
    if last.clamped > 0 {
        converged = false;
        warnings.push(format!(
            "{} cluster probabilities were floored at 1e-300 at the solution",
            last.clamped
        ));
    }

    let mut covariance = DMatrix::zeros(layout.len(), layout.len());
    if options.standard_errors && !free.is_empty() {
        match information(eval_lik, &full, &free) {
            Ok(info) => {
                let cov = invert_information(&info, &mut warnings);
                for (a, &i) in free.iter().enumerate() {
                    for (b, &j) in free.iter().enumerate() {
                        covariance[(i, j)] = cov[(a, b)];
                    }
                }
            }
            Err(e) => warnings.push(format!("observed information unavailable: {e}")),
        }
    }

    let slack = constraints.slack(&full);
    let mut active = vec![false; layout.len()];
    for i in 0..constraints.nrows() {
        if slack[i] <= 1e-6 {
            for (k, flag) in active.iter_mut().enumerate() {
                if constraints.matrix[(i, k)] != 0.0 && !is_fixed[k] {
                    *flag = true;
                }
            }
        }
    }

    Ok(FitResult {
        spec: spec.clone(),
        params,
        loglik: last.value,
        loglik_optimization: first.value,
        covariance,
        converged,
        outer_iterations: report.outer_iterations,
        inner_iterations: report.inner_iterations,
        gradient_norm: report.gradient_norm,
        max_violation: constraints.max_violation(&full),
        active,
        fixed: is_fixed,
        rule: *rule,
        refined_rule,
        n_clusters: lik.n_clusters(),
        n_observations: lik.n_observations(),
        clamped: last.clamped,
        warnings,
        history: report.history.iter().map(|v| -v).collect(),
    })
}

/// Starting values followed by [`maximize`].
pub fn fit(spec: &ModelSpec, clusters: &[ClusterData], rule: &CubatureRule, options: &FitOptions) -> Result<FitResult> {
    let init = initial_params_with(spec, clusters, options)?;
    maximize(spec, clusters, &init, rule, options)
}

/// The cubature rule a fit uses by default for this model.
pub fn default_rule(spec: &ModelSpec, kind: Option<CubatureKind>, size: Option<usize>) -> CubatureRule {
    match (kind.unwrap_or(CubatureKind::QuasiMonteCarlo), size) {
        (CubatureKind::QuasiMonteCarlo, None) => CubatureRule::default_for(spec.n_random),
        (CubatureKind::SparseGrid, None) => CubatureRule::sparse(6),
        (k, Some(n)) => CubatureRule::with_size(k, n),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bases::TransformationBasis;
    use crate::likelihood::Marginalization;
    use crate::links::LinkFamily;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normal_data(rng: &mut ChaCha8Rng, n: usize) -> Vec<ClusterData> {
        (0..n)
            .map(|i| {
                let y = vec![3.0 + 2.0 * rng.sample::<f64, _>(StandardNormal)];
                ClusterData::exact(i.to_string(), y, DMatrix::zeros(1, 0), DMatrix::zeros(1, 0))
            })
            .collect()
    }

    #[test]
    fn moment_matching_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = normal_data(&mut rng, 400);
        let spec = ModelSpec::new(TransformationBasis::linear(), LinkFamily::Probit, Marginalization::M1, 0, 0);
        let p = initial_params(&spec, &data).unwrap();
        let ys: Vec<f64> = data.iter().map(|c| if let Response::Exact(y) = &c.response { y[0] } else { 0.0 }).collect();
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let sd = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ys.len() as f64).sqrt();
        assert!((p.theta[0] - 1.0 / sd).abs() < 1e-4, "{:?}", p);
        assert!((p.theta[1] - mean / sd).abs() < 1e-4);
    }

    #[test]
    fn ordinal_start_uses_cumulative_proportions() {
        let counts = [10usize, 30, 40, 15, 5];
        let mut clusters = Vec::new();
        for (k, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                let cat = (k + 1) as f64;
                clusters.push(ClusterData::interval("c", vec![cat - 1.0], vec![cat], DMatrix::zeros(1, 0), DMatrix::zeros(1, 0)));
            }
        }
        let spec = ModelSpec::new(TransformationBasis::ordinal(5).unwrap(), LinkFamily::Logit, Marginalization::M1, 0, 0);
        let p = initial_params(&spec, &clusters).unwrap();
        let mut cum = 0.0;
        for (k, &c) in counts.iter().take(4).enumerate() {
            cum += c as f64 / 100.0;
            assert!((p.theta[k] - LinkFamily::Logit.quantile(cum).unwrap()).abs() < 1e-4, "{:?}", p.theta);
        }
    }

    #[test]
    fn constant_response_is_rejected() {
        let data: Vec<ClusterData> = (0..5)
            .map(|i| ClusterData::exact(i.to_string(), vec![1.0], DMatrix::zeros(1, 0), DMatrix::zeros(1, 0)))
            .collect();
        let spec = ModelSpec::new(TransformationBasis::linear(), LinkFamily::Probit, Marginalization::M1, 0, 0);
        assert!(matches!(initial_params(&spec, &data), Err(Error::Data(_))));
    }

    #[test]
    fn toy_information_matches_analytic() {
        // one-parameter normal scale model: ℓ(θ) = n log θ − θ²Σy²/2 + c
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<ClusterData> = (0..50)
            .map(|i| {
                let y = vec![rng.sample::<f64, _>(StandardNormal)];
                ClusterData::exact(i.to_string(), y, DMatrix::zeros(1, 0), DMatrix::zeros(1, 0))
            })
            .collect();
        let spec = ModelSpec::new(TransformationBasis::linear(), LinkFamily::Logit, Marginalization::M1, 0, 0);
        let params = ParameterVector::new(vec![1.3, 0.0], vec![], vec![]);
        let info = observed_information(&spec, &data, &params, &CubatureRule::qmc(2)).unwrap();
        // logistic: ℓ = Σ log f(θy) + log θ, so −ℓ'' = n/θ² + Σ y² f''/f terms
        let h = 1e-4;
        let l = |t: f64| -> f64 {
            data.iter()
                .map(|c| {
                    let Response::Exact(y) = &c.response else { unreachable!() };
                    LinkFamily::Logit.logpdf(t * y[0]) + t.ln()
                })
                .sum()
        };
        let second = -(l(1.3 + h) - 2.0 * l(1.3) + l(1.3 - h)) / (h * h);
        let analytic: f64 = data
            .iter()
            .map(|c| {
                let Response::Exact(y) = &c.response else { unreachable!() };
                let u = 1.3 * y[0];
                let e = (-u.abs()).exp();
                // d²/du² log f(u) = −2e/(1+e)²
                2.0 * e / (1.0 + e).powi(2) * y[0] * y[0] + 1.0 / (1.3 * 1.3)
            })
            .sum();
        assert!((info[(0, 0)] - analytic).abs() < 1e-4 * analytic, "{} {analytic} {second}", info[(0, 0)]);
        assert!((&info - info.transpose()).abs().max() == 0.0);
    }

    #[test]
    fn zero_variance_truth_hits_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<ClusterData> = (0..150)
            .map(|i| {
                let x = DMatrix::from_fn(3, 1, |_, _| rng.random_range(-1.0..1.0));
                let y = (0..3).map(|j| 0.5 * x[(j, 0)] + rng.sample::<f64, _>(StandardNormal)).collect();
                ClusterData::exact(i.to_string(), y, x, DMatrix::from_element(3, 1, 1.0))
            })
            .collect();
        let spec = ModelSpec::new(TransformationBasis::linear(), LinkFamily::Probit, Marginalization::M1, 1, 1);
        let rule = CubatureRule::qmc(2);
        let full = fit(&spec, &data, &rule, &FitOptions::default()).unwrap();
        let indep = fit(&spec, &data, &rule, &FitOptions::default().fix_gamma(&spec, 0.0)).unwrap();
        assert!(full.converged && indep.converged, "{:?}", full.warnings);
        if full.params.gamma[0] < 1e-3 {
            assert!(full.active[3], "{:?} {:?}", full.params, full.history);
            for k in 0..3 {
                assert!((full.estimates()[k] - indep.estimates()[k]).abs() < 1e-3);
            }
        } else {
            // a positive estimate must improve on the independence fit
            assert!(full.loglik >= indep.loglik - 1e-8);
        }
    }

    #[test]
    fn refit_from_optimum_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<ClusterData> = (0..100)
            .map(|i| {
                let b = 0.8 * rng.sample::<f64, _>(StandardNormal);
                let y = (0..3).map(|_| 1.0 + b + rng.sample::<f64, _>(StandardNormal)).collect();
                ClusterData::exact(i.to_string(), y, DMatrix::zeros(3, 0), DMatrix::from_element(3, 1, 1.0))
            })
            .collect();
        let spec = ModelSpec::new(TransformationBasis::linear(), LinkFamily::Probit, Marginalization::M1, 0, 1);
        let rule = CubatureRule::qmc(2);
        let first = fit(&spec, &data, &rule, &FitOptions::default()).unwrap();
        assert!(first.converged);
        let again = maximize(&spec, &data, &first.params, &rule, &FitOptions::default()).unwrap();
        assert!(again.inner_iterations <= 2, "{}", again.inner_iterations);
        assert!(first.covariance.iter().all(|v| v.is_finite()));
        let se = first.standard_errors();
        assert!(se.iter().all(|s| *s > 0.0));
    }
}
