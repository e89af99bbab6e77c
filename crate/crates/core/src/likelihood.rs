//! Exact log-likelihoods for clustered transformation models.
//!
//! With `r = a(y)ᵀθ − xᵀβ` and `s = diag(D)`, the latent vector is
//! `z = s ∘ Φ⁻¹(F(r / s)) ~ N(0, Σ)`, `Σ = UΛΛᵀUᵀ + I`. Exact responses use
//! the change-of-variables density of `z`; interval responses integrate the
//! rectangle probability of `z` after reducing it to an R-dimensional
//! Gaussian expectation over the random effects.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bases::{BoundValue, LinearConstraints, TransformationBasis};
use crate::covariance::{
    diagonal_positions, lambda_from_packed, packed_coordinates, packed_len, ClusterFactor,
};
use crate::error::{Error, Result};
use crate::integrate::{CubatureRule, NodeSet};
use crate::links::LinkFamily;
use crate::normal;

/// Floor applied to integrated probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Marginalization {
    /// `D = I`
    M1,
    /// `D = diag(Σ)^{1/2}`
    M2,
}

impl FromStr for Marginalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "M1" => Ok(Marginalization::M1),
            "M2" => Ok(Marginalization::M2),
            other => Err(Error::Domain(format!(
                "unknown marginalization '{other}' (expected M1 or M2)"
            ))),
        }
    }
}

impl fmt::Display for Marginalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Marginalization::M1 => "M1",
            Marginalization::M2 => "M2",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub basis: TransformationBasis,
    /// Number of strata; each stratum has its own block of θ.
    pub n_strata: usize,
    pub link: LinkFamily,
    pub marginalization: Marginalization,
    /// Q, the number of fixed effects.
    pub n_fixed: usize,
    /// R, the random-effects dimension.
    pub n_random: usize,
}

/// Offsets of the three parameter blocks inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub p: usize,
    pub q: usize,
    pub m: usize,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.p + self.q + self.m
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn theta(&self) -> std::ops::Range<usize> {
        0..self.p
    }

    pub fn beta(&self) -> std::ops::Range<usize> {
        self.p..self.p + self.q
    }

    pub fn gamma(&self) -> std::ops::Range<usize> {
        self.p + self.q..self.len()
    }
}

impl ModelSpec {
    pub fn new(
        basis: TransformationBasis,
        link: LinkFamily,
        marginalization: Marginalization,
        n_fixed: usize,
        n_random: usize,
    ) -> Self {
        ModelSpec {
            basis,
            n_strata: 1,
            link,
            marginalization,
            n_fixed,
            n_random,
        }
    }

    pub fn with_strata(mut self, n_strata: usize) -> Self {
        self.n_strata = n_strata.max(1);
        self
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout {
            p: self.basis.dim() * self.n_strata,
            q: self.n_fixed,
            m: packed_len(self.n_random),
        }
    }

    /// `K·params ≥ k₀` over the flat vector: monotone θ per stratum and
    /// non-negative diagonal of Λ.
    pub fn constraints(&self) -> LinearConstraints {
        let layout = self.layout();
        let block = self.basis.constraint_system();
        let pb = self.basis.dim();
        let diag = diagonal_positions(self.n_random);
        let rows = block.nrows() * self.n_strata + diag.len();
        let mut matrix = DMatrix::zeros(rows, layout.len());
        let mut offset = DVector::zeros(rows);
        let mut row = 0;
        for s in 0..self.n_strata {
            for i in 0..block.nrows() {
                for j in 0..pb {
                    matrix[(row, s * pb + j)] = block.matrix[(i, j)];
                }
                offset[row] = block.offset[i];
                row += 1;
            }
        }
        for d in diag {
            matrix[(row, layout.p + layout.q + d)] = 1.0;
            row += 1;
        }
        LinearConstraints { matrix, offset }
    }

    /// Default parameter names, `theta1…`, `beta1…`, `gamma1…`.
    pub fn param_names(&self) -> Vec<String> {
        let l = self.layout();
        (1..=l.p)
            .map(|i| format!("theta{i}"))
            .chain((1..=l.q).map(|i| format!("beta{i}")))
            .chain((1..=l.m).map(|i| format!("gamma{i}")))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl ParameterVector {
    pub fn new(theta: Vec<f64>, beta: Vec<f64>, gamma: Vec<f64>) -> Self {
        ParameterVector { theta, beta, gamma }
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        let l = spec.layout();
        ParameterVector::new(vec![0.0; l.p], vec![0.0; l.q], vec![0.0; l.m])
    }

    pub fn from_slice(spec: &ModelSpec, flat: &[f64]) -> Result<Self> {
        let l = spec.layout();
        if flat.len() != l.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                l.len(),
                flat.len()
            )));
        }
        Ok(ParameterVector::new(
            flat[l.theta()].to_vec(),
            flat[l.beta()].to_vec(),
            flat[l.gamma()].to_vec(),
        ))
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.theta);
        v.extend_from_slice(&self.beta);
        v.extend_from_slice(&self.gamma);
        v
    }

    pub fn len(&self) -> usize {
        self.theta.len() + self.beta.len() + self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        let l = spec.layout();
        if self.theta.len() != l.p || self.beta.len() != l.q || self.gamma.len() != l.m {
            return Err(Error::Dimension(format!(
                "parameter blocks ({}, {}, {}) do not match model ({}, {}, {})",
                self.theta.len(),
                self.beta.len(),
                self.gamma.len(),
                l.p,
                l.q,
                l.m
            )));
        }
        Ok(())
    }

    /// Largest violation of the model's constraint system.
    pub fn max_violation(&self, spec: &ModelSpec) -> f64 {
        spec.constraints().max_violation(&self.to_vec())
    }

    pub fn lambda(&self, spec: &ModelSpec) -> DMatrix<f64> {
        lambda_from_packed(&self.gamma, spec.n_random)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Exact(Vec<f64>),
    /// `(lower, upper]` with ±∞ allowed.
    Interval { lower: Vec<f64>, upper: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterData {
    pub id: String,
    pub response: Response,
    /// Stratum index of every observation.
    pub strata: Vec<usize>,
    pub x: DMatrix<f64>,
    pub u: DMatrix<f64>,
}

impl ClusterData {
    pub fn exact(id: impl Into<String>, y: Vec<f64>, x: DMatrix<f64>, u: DMatrix<f64>) -> Self {
        let n = y.len();
        ClusterData {
            id: id.into(),
            response: Response::Exact(y),
            strata: vec![0; n],
            x,
            u,
        }
    }

    pub fn interval(
        id: impl Into<String>,
        lower: Vec<f64>,
        upper: Vec<f64>,
        x: DMatrix<f64>,
        u: DMatrix<f64>,
    ) -> Self {
        let n = lower.len();
        ClusterData {
            id: id.into(),
            response: Response::Interval { lower, upper },
            strata: vec![0; n],
            x,
            u,
        }
    }

    pub fn with_strata(mut self, strata: Vec<usize>) -> Self {
        self.strata = strata;
        self
    }

    pub fn len(&self) -> usize {
        match &self.response {
            Response::Exact(y) => y.len(),
            Response::Interval { lower, .. } => lower.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_exact(&self) -> bool {
        matches!(self.response, Response::Exact(_))
    }

    /// Shape and ordering checks that do not depend on parameters.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let n = self.len();
        let bad = |msg: String| Err(Error::Data(format!("cluster {}: {msg}", self.id)));
        if n == 0 {
            return bad("no observations".into());
        }
        if self.x.nrows() != n || self.x.ncols() != spec.n_fixed {
            return bad(format!(
                "fixed-effects matrix is {}x{}, expected {n}x{}",
                self.x.nrows(),
                self.x.ncols(),
                spec.n_fixed
            ));
        }
        if self.u.nrows() != n || self.u.ncols() != spec.n_random {
            return bad(format!(
                "random-effects matrix is {}x{}, expected {n}x{}",
                self.u.nrows(),
                self.u.ncols(),
                spec.n_random
            ));
        }
        if self.strata.len() != n || self.strata.iter().any(|&s| s >= spec.n_strata) {
            return bad("stratum index out of range".into());
        }
        if let Response::Interval { lower, upper } = &self.response {
            if upper.len() != n {
                return bad("bound vectors differ in length".into());
            }
            for (j, (l, u)) in lower.iter().zip(upper).enumerate() {
                if l.is_nan() || u.is_nan() || l >= u {
                    return bad(format!("observation {}: empty interval ({l}, {u}]", j + 1));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    Lower,
    Upper,
}

/// Basis rows for one side of an interval, with infinite bounds flagged.
#[derive(Debug, Clone)]
struct BoundRows {
    a: DMatrix<f64>,
    /// −1 for −∞, +1 for +∞, 0 for finite.
    inf: Vec<i8>,
}

#[derive(Debug, Clone)]
enum Design {
    Exact { a: DMatrix<f64>, ad: DMatrix<f64> },
    Interval { lower: BoundRows, upper: BoundRows },
}

/// A cluster with its basis evaluations precomputed for a model.
#[derive(Debug, Clone)]
pub struct PreparedCluster {
    design: Design,
    x: DMatrix<f64>,
    u: DMatrix<f64>,
}

fn place_row(out: &mut DMatrix<f64>, row: usize, stratum: usize, values: &[f64]) {
    let off = stratum * values.len();
    for (k, v) in values.iter().enumerate() {
        out[(row, off + k)] = *v;
    }
}

fn bound_rows(spec: &ModelSpec, ys: &[f64], strata: &[usize]) -> Result<BoundRows> {
    let p = spec.layout().p;
    let mut a = DMatrix::zeros(ys.len(), p);
    let mut inf = vec![0i8; ys.len()];
    for (j, &y) in ys.iter().enumerate() {
        match spec.basis.eval_bound(y)? {
            BoundValue::NegInf => inf[j] = -1,
            BoundValue::PosInf => inf[j] = 1,
            BoundValue::Row(r) => place_row(&mut a, j, strata[j], &r),
        }
    }
    Ok(BoundRows { a, inf })
}

impl PreparedCluster {
    pub fn new(spec: &ModelSpec, cluster: &ClusterData) -> Result<Self> {
        cluster.validate(spec)?;
        let p = spec.layout().p;
        let n = cluster.len();
        let design = match &cluster.response {
            Response::Exact(y) => {
                let mut a = DMatrix::zeros(n, p);
                let mut ad = DMatrix::zeros(n, p);
                for (j, &yj) in y.iter().enumerate() {
                    place_row(&mut a, j, cluster.strata[j], &spec.basis.eval(yj)?);
                    place_row(&mut ad, j, cluster.strata[j], &spec.basis.eval_deriv(yj)?);
                }
                Design::Exact { a, ad }
            }
            Response::Interval { lower, upper } => Design::Interval {
                lower: bound_rows(spec, lower, &cluster.strata)?,
                upper: bound_rows(spec, upper, &cluster.strata)?,
            },
        };
        Ok(PreparedCluster {
            design,
            x: cluster.x.clone(),
            u: cluster.u.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_exact(&self) -> bool {
        matches!(self.design, Design::Exact { .. })
    }
}

/// Per-observation scale `s = diag(D)`.
fn scales(spec: &ModelSpec, v: &DMatrix<f64>) -> DVector<f64> {
    match spec.marginalization {
        Marginalization::M1 => DVector::from_element(v.nrows(), 1.0),
        Marginalization::M2 => {
            DVector::from_iterator(v.nrows(), v.row_iter().map(|r| (1.0 + r.norm_squared()).sqrt()))
        }
    }
}

fn latent(link: LinkFamily, r: f64, s: f64) -> f64 {
    s * link.probit_of(r / s)
}

fn residual(a: &DMatrix<f64>, theta: &DVector<f64>, x: &DMatrix<f64>, beta: &DVector<f64>) -> DVector<f64> {
    a * theta - x * beta
}

fn bound_latent(
    spec: &ModelSpec,
    rows: &BoundRows,
    theta: &DVector<f64>,
    xb: &DVector<f64>,
    s: &DVector<f64>,
) -> DVector<f64> {
    let at = &rows.a * theta;
    DVector::from_iterator(
        rows.inf.len(),
        rows.inf.iter().enumerate().map(|(j, &flag)| match flag {
            -1 => f64::NEG_INFINITY,
            1 => f64::INFINITY,
            _ => latent(spec.link, at[j] - xb[j], s[j]),
        }),
    )
}

/// `z` at the requested bound (both bounds coincide for exact clusters).
pub fn z_transform(
    spec: &ModelSpec,
    params: &ParameterVector,
    cluster: &ClusterData,
    bound: Bound,
) -> Result<DVector<f64>> {
    params.check(spec)?;
    let pc = PreparedCluster::new(spec, cluster)?;
    let theta = DVector::from_column_slice(&params.theta);
    let beta = DVector::from_column_slice(&params.beta);
    let v = &pc.u * params.lambda(spec);
    let s = scales(spec, &v);
    let xb = &pc.x * &beta;
    Ok(match &pc.design {
        Design::Exact { a, .. } => {
            let r = a * &theta - xb;
            DVector::from_iterator(r.len(), r.iter().zip(s.iter()).map(|(&r, &s)| latent(spec.link, r, s)))
        }
        Design::Interval { lower, upper } => {
            let rows = if bound == Bound::Lower { lower } else { upper };
            bound_latent(spec, rows, &theta, &xb, &s)
        }
    })
}

fn continuous_prepared(spec: &ModelSpec, params: &ParameterVector, pc: &PreparedCluster) -> Result<f64> {
    let Design::Exact { a, ad } = &pc.design else {
        return Err(Error::Unsupported("continuous likelihood needs exact responses".into()));
    };
    let theta = DVector::from_column_slice(&params.theta);
    let beta = DVector::from_column_slice(&params.beta);
    let lambda = params.lambda(spec);
    let r = residual(a, &theta, &pc.x, &beta);
    let jac = ad * &theta;
    let mut log_jac = 0.0;
    for (j, &d) in jac.iter().enumerate() {
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "non-positive transformation derivative {d} at observation {}",
                j + 1
            )));
        }
        log_jac += d.ln();
    }
    let factor = ClusterFactor::new(&lambda, &pc.u)?;
    let n = r.len() as f64;
    if spec.link == LinkFamily::Probit {
        // z = r for both schemes and the marginal correction cancels
        return Ok(-0.5 * n * 2.0 * normal::LN_SQRT_2PI - 0.5 * factor.log_det() - 0.5 * factor.quad_form(&r)
            + log_jac);
    }
    let v = &pc.u * &lambda;
    let s = scales(spec, &v);
    let mut z = DVector::zeros(r.len());
    let mut margins = 0.0;
    for j in 0..r.len() {
        let t = r[j] / s[j];
        let w = spec.link.probit_of(t);
        z[j] = s[j] * w;
        margins += 0.5 * w * w + spec.link.logpdf(t);
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("latent value is not finite".into()));
    }
    Ok(-0.5 * factor.log_det() - 0.5 * factor.quad_form(&z) + margins + log_jac)
}

/// Log-likelihood contribution of one exact-type cluster.
pub fn loglik_continuous(spec: &ModelSpec, params: &ParameterVector, cluster: &ClusterData) -> Result<f64> {
    params.check(spec)?;
    continuous_prepared(spec, params, &PreparedCluster::new(spec, cluster)?)
}

fn score_prepared(spec: &ModelSpec, params: &ParameterVector, pc: &PreparedCluster) -> Result<Vec<f64>> {
    if spec.link != LinkFamily::Probit {
        return Err(Error::Unsupported(format!(
            "analytic scores need the probit link, got {}",
            spec.link
        )));
    }
    let Design::Exact { a, ad } = &pc.design else {
        return Err(Error::Unsupported("continuous score needs exact responses".into()));
    };
    let layout = spec.layout();
    let theta = DVector::from_column_slice(&params.theta);
    let beta = DVector::from_column_slice(&params.beta);
    let lambda = params.lambda(spec);
    let r = residual(a, &theta, &pc.x, &beta);
    let factor = ClusterFactor::new(&lambda, &pc.u)?;
    let sr = factor.solve_vec(&r);

    let mut grad = Vec::with_capacity(layout.len());
    let jac = ad * &theta;
    let mut g_theta = -(a.transpose() * &sr);
    for j in 0..jac.len() {
        if !(jac[j] > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "non-positive transformation derivative at observation {}",
                j + 1
            )));
        }
        for k in 0..layout.p {
            g_theta[k] += ad[(j, k)] / jac[j];
        }
    }
    grad.extend(g_theta.iter());
    grad.extend((pc.x.transpose() * &sr).iter());

    if layout.m > 0 {
        let w = pc.u.transpose() * factor.solve(&pc.u);
        let wl = &w * &lambda;
        let s = pc.u.transpose() * &sr;
        let lts = lambda.transpose() * &s;
        for (row, col) in packed_coordinates(spec.n_random) {
            grad.push(-wl[(row, col)] + s[row] * lts[col]);
        }
    }
    Ok(grad)
}

/// Analytic gradient of [`loglik_continuous`] in the flat `(θ, β, γ)`
/// order; probit link only.
pub fn score_continuous(spec: &ModelSpec, params: &ParameterVector, cluster: &ClusterData) -> Result<Vec<f64>> {
    params.check(spec)?;
    score_prepared(spec, params, &PreparedCluster::new(spec, cluster)?)
}

/// Log-probability of one interval cluster and whether it hit the floor.
fn censored_prepared(
    spec: &ModelSpec,
    params: &ParameterVector,
    pc: &PreparedCluster,
    nodes: &NodeSet,
) -> Result<(f64, bool)> {
    let Design::Interval { lower, upper } = &pc.design else {
        return Err(Error::Unsupported("censored likelihood needs interval responses".into()));
    };
    let theta = DVector::from_column_slice(&params.theta);
    let beta = DVector::from_column_slice(&params.beta);
    let v = &pc.u * params.lambda(spec);
    let s = scales(spec, &v);
    let xb = &pc.x * &beta;
    let zl = bound_latent(spec, lower, &theta, &xb, &s);
    let zu = bound_latent(spec, upper, &theta, &xb, &s);
    let n = zl.len();
    for j in 0..n {
        if zl[j].is_nan() || zu[j].is_nan() {
            return Err(Error::InvalidParameter("latent bound is NaN".into()));
        }
        if zl[j] >= zu[j] {
            return Err(Error::DegenerateInterval(format!(
                "observation {} has empty latent interval",
                j + 1
            )));
        }
    }

    let independent = v.iter().all(|&e| e == 0.0);
    if n == 1 || independent {
        // closed form: marginal variances are 1 + ‖v_j‖²
        let mut logp = 0.0;
        for j in 0..n {
            let sd = (1.0 + v.row(j).norm_squared()).sqrt();
            let p = normal::interval_prob(zl[j] / sd, zu[j] / sd);
            if p <= PROB_FLOOR {
                return Ok((logp + PROB_FLOOR.ln(), true));
            }
            logp += p.ln();
        }
        return Ok((logp, false));
    }

    if nodes.dim != spec.n_random {
        return Err(Error::Dimension(format!(
            "node set has dimension {}, model has R = {}",
            nodes.dim, spec.n_random
        )));
    }
    let mut total = 0.0;
    let mut shift = vec![0.0; n];
    for k in 0..nodes.len() {
        let w = nodes.normal_point(k);
        for (j, sj) in shift.iter_mut().enumerate() {
            *sj = (0..w.len()).map(|c| v[(j, c)] * w[c]).sum();
        }
        let mut prod = 1.0;
        for j in 0..n {
            prod *= normal::interval_prob(zl[j] - shift[j], zu[j] - shift[j]);
        }
        total += nodes.weights[k] * prod;
    }
    if total.is_nan() {
        return Err(Error::InvalidParameter("integrated probability is NaN".into()));
    }
    if total <= PROB_FLOOR {
        Ok((PROB_FLOOR.ln(), true))
    } else {
        Ok((total.ln(), false))
    }
}

/// Log-probability of one interval-type cluster under `rule`.
pub fn loglik_censored(
    spec: &ModelSpec,
    params: &ParameterVector,
    cluster: &ClusterData,
    rule: &CubatureRule,
) -> Result<f64> {
    params.check(spec)?;
    let nodes = rule.nodes(spec.n_random)?;
    censored_prepared(spec, params, &PreparedCluster::new(spec, cluster)?, &nodes).map(|r| r.0)
}

/// Sum in a fixed pairwise order after sorting, so the result does not
/// depend on the order of the terms.
pub fn stable_sum(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    pairwise(values)
}

fn pairwise(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise(&v[..mid]) + pairwise(&v[mid..])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoglikValue {
    pub value: f64,
    /// Clusters whose probability was floored at [`PROB_FLOOR`].
    pub clamped: usize,
}

/// A dataset prepared for repeated likelihood evaluation under one model.
#[derive(Debug, Clone)]
pub struct Likelihood {
    spec: ModelSpec,
    clusters: Vec<PreparedCluster>,
    nodes: Option<NodeSet>,
    rule: CubatureRule,
    exact: bool,
}

impl Likelihood {
    pub fn new(spec: &ModelSpec, clusters: &[ClusterData], rule: CubatureRule) -> Result<Self> {
        if clusters.is_empty() {
            return Err(Error::Data("dataset has no clusters".into()));
        }
        let exact = clusters[0].is_exact();
        if clusters.iter().any(|c| c.is_exact() != exact) {
            return Err(Error::Data(
                "clusters mix exact and interval-censored responses".into(),
            ));
        }
        let prepared = clusters
            .iter()
            .map(|c| PreparedCluster::new(spec, c))
            .collect::<Result<Vec<_>>>()?;
        let needs_nodes = !exact && prepared.iter().any(|c| c.len() > 1) && spec.n_random > 0;
        let nodes = if needs_nodes { Some(rule.nodes(spec.n_random)?) } else { None };
        Ok(Likelihood {
            spec: spec.clone(),
            clusters: prepared,
            nodes,
            rule,
            exact,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn rule(&self) -> CubatureRule {
        self.rule
    }

    pub fn is_exact(&self) -> bool {
        self.exact
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_observations(&self) -> usize {
        self.clusters.iter().map(|c| c.len()).sum()
    }

    /// Same data under a different cubature rule.
    pub fn with_rule(&self, rule: CubatureRule) -> Result<Self> {
        let nodes = match self.nodes {
            Some(_) => Some(rule.nodes(self.spec.n_random)?),
            None => None,
        };
        Ok(Likelihood {
            nodes,
            rule,
            ..self.clone()
        })
    }

    /// Whether the analytic score applies.
    pub fn has_analytic_score(&self) -> bool {
        self.exact && self.spec.link == LinkFamily::Probit
    }

    /// Per-cluster contributions in dataset order.
    pub fn contributions(&self, params: &ParameterVector) -> Result<Vec<(f64, bool)>> {
        params.check(&self.spec)?;
        let empty = NodeSet {
            dim: self.spec.n_random,
            cube: Vec::new(),
            normal: Vec::new(),
            weights: Vec::new(),
        };
        let nodes = self.nodes.as_ref().unwrap_or(&empty);
        self.clusters
            .par_iter()
            .map(|pc| {
                if self.exact {
                    continuous_prepared(&self.spec, params, pc).map(|v| (v, false))
                } else {
                    censored_prepared(&self.spec, params, pc, nodes)
                }
            })
            .collect()
    }

    pub fn evaluate(&self, params: &ParameterVector) -> Result<LoglikValue> {
        let parts = self.contributions(params)?;
        let clamped = parts.iter().filter(|p| p.1).count();
        let mut values: Vec<f64> = parts.into_iter().map(|p| p.0).collect();
        Ok(LoglikValue {
            value: stable_sum(&mut values),
            clamped,
        })
    }

    pub fn loglik(&self, params: &ParameterVector) -> Result<f64> {
        self.evaluate(params).map(|v| v.value)
    }

    /// Analytic total score; probit link with exact responses only.
    pub fn score(&self, params: &ParameterVector) -> Result<Vec<f64>> {
        params.check(&self.spec)?;
        let parts = self
            .clusters
            .par_iter()
            .map(|pc| score_prepared(&self.spec, params, pc))
            .collect::<Result<Vec<_>>>()?;
        let dim = self.spec.layout().len();
        Ok((0..dim)
            .map(|k| {
                let mut col: Vec<f64> = parts.iter().map(|g| g[k]).collect();
                stable_sum(&mut col)
            })
            .collect())
    }
}

/// `Σᵢ ℓᵢ` over a dataset.
pub fn total_loglik(
    spec: &ModelSpec,
    params: &ParameterVector,
    clusters: &[ClusterData],
    rule: &CubatureRule,
) -> Result<f64> {
    Likelihood::new(spec, clusters, *rule)?.loglik(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn probit_linear(q: usize, r: usize) -> ModelSpec {
        ModelSpec::new(TransformationBasis::linear(), LinkFamily::Probit, Marginalization::M1, q, r)
    }

    fn random_cluster(rng: &mut ChaCha8Rng, n: usize, q: usize, r: usize) -> ClusterData {
        let y = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = DMatrix::from_fn(n, q, |_, _| rng.random_range(-1.0..1.0));
        let u = DMatrix::from_fn(n, r, |_, c| if c == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
        ClusterData::exact("c", y, x, u)
    }

    #[test]
    fn independence_reduces_to_normal_loglik() {
        let spec = probit_linear(1, 1);
        let cluster = ClusterData::exact(
            "a",
            vec![0.5, 1.5, -0.3],
            DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 2.0]),
            DMatrix::from_element(3, 1, 1.0),
        );
        let (sigma, alpha, b) = (1.7, 0.2, 0.4);
        let params = ParameterVector::new(vec![1.0 / sigma, alpha / sigma], vec![b / sigma], vec![0.0]);
        let got = loglik_continuous(&spec, &params, &cluster).unwrap();
        let Response::Exact(y) = &cluster.response else { unreachable!() };
        let expected: f64 = y
            .iter()
            .zip(cluster.x.column(0).iter())
            .map(|(&y, &x)| normal::logpdf((y - alpha - b * x) / sigma) - sigma.ln())
            .sum();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn z_is_residual_for_probit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random_cluster(&mut rng, 4, 2, 1);
        let params = ParameterVector::new(vec![1.3, -0.2], vec![0.4, -0.7], vec![0.9]);
        for m in [Marginalization::M1, Marginalization::M2] {
            let spec = ModelSpec { marginalization: m, ..probit_linear(2, 1) };
            let z = z_transform(&spec, &params, &c, Bound::Lower).unwrap();
            let Response::Exact(y) = &c.response else { unreachable!() };
            for j in 0..4 {
                let r = 1.3 * y[j] + 0.2 - c.x.row(j).dot(&DVector::from_vec(vec![0.4, -0.7]).transpose());
                assert!((z[j] - r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn z_composition_for_logit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = random_cluster(&mut rng, 3, 1, 1);
        let params = ParameterVector::new(vec![0.8, 0.1], vec![0.3], vec![1.2]);
        let spec = ModelSpec::new(TransformationBasis::linear(), LinkFamily::Logit, Marginalization::M2, 1, 1);
        let z = z_transform(&spec, &params, &c, Bound::Upper).unwrap();
        let Response::Exact(y) = &c.response else { unreachable!() };
        let s = (1.0 + 1.2f64 * 1.2).sqrt();
        for j in 0..3 {
            let r = 0.8 * y[j] - 0.1 - 0.3 * c.x[(j, 0)];
            let p = LinkFamily::Logit.cdf(r / s);
            assert!((z[j] - s * normal::quantile(p)).abs() < 1e-9);
        }
    }

    #[test]
    fn m2_with_zero_lambda_equals_m1() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = random_cluster(&mut rng, 3, 1, 1);
        let params = ParameterVector::new(vec![0.8, 0.1], vec![0.3], vec![0.0]);
        let m1 = ModelSpec::new(TransformationBasis::linear(), LinkFamily::CloglogInv, Marginalization::M1, 1, 1);
        let m2 = ModelSpec { marginalization: Marginalization::M2, ..m1.clone() };
        let a = loglik_continuous(&m1, &params, &c).unwrap();
        let b = loglik_continuous(&m2, &params, &c).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn score_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for r in [1, 2, 3] {
            let spec = probit_linear(2, r);
            let c = random_cluster(&mut rng, 5, 2, r);
            let mut flat: Vec<f64> = (0..spec.layout().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            flat[0] = 1.1;
            let params = ParameterVector::from_slice(&spec, &flat).unwrap();
            let g = score_continuous(&spec, &params, &c).unwrap();
            for k in 0..flat.len() {
                let h = 1e-5;
                let mut up = flat.clone();
                up[k] += h;
                let mut dn = flat.clone();
                dn[k] -= h;
                let f = |v: &[f64]| loglik_continuous(&spec, &ParameterVector::from_slice(&spec, v).unwrap(), &c).unwrap();
                let fd = (f(&up) - f(&dn)) / (2.0 * h);
                assert!((g[k] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "r={r} k={k} {} {fd}", g[k]);
            }
        }
    }

    #[test]
    fn independence_censored_is_product() {
        let spec = probit_linear(0, 1);
        let c = ClusterData::interval(
            "c",
            vec![f64::NEG_INFINITY, -0.5, 1.0],
            vec![0.0, 0.5, f64::INFINITY],
            DMatrix::zeros(3, 0),
            DMatrix::from_element(3, 1, 1.0),
        );
        let params = ParameterVector::new(vec![1.0, 0.0], vec![], vec![0.0]);
        let got = loglik_censored(&spec, &params, &c, &CubatureRule::default_for(1)).unwrap();
        let expected = (0.5f64 * (normal::cdf(0.5) - normal::cdf(-0.5)) * normal::sf(1.0)).ln();
        assert!((got - expected).abs() < 1e-14);
    }

    #[test]
    fn equicorrelated_orthant() {
        let spec = probit_linear(0, 1);
        let c = ClusterData::interval(
            "c",
            vec![f64::NEG_INFINITY; 2],
            vec![0.0; 2],
            DMatrix::zeros(2, 0),
            DMatrix::from_element(2, 1, 1.0),
        );
        let params = ParameterVector::new(vec![1.0, 0.0], vec![], vec![1.0]);
        let p = loglik_censored(&spec, &params, &c, &CubatureRule::default_for(1)).unwrap().exp();
        assert!((p - 1.0 / 3.0).abs() < 1e-4, "{p}");
    }

    #[test]
    fn empty_latent_interval_is_an_error() {
        let spec = ModelSpec::new(TransformationBasis::ordinal(3).unwrap(), LinkFamily::Probit, Marginalization::M1, 0, 0);
        let c = ClusterData::interval("c", vec![1.0], vec![2.0], DMatrix::zeros(1, 0), DMatrix::zeros(1, 0));
        let params = ParameterVector::new(vec![1.0, 0.0], vec![], vec![]);
        assert!(matches!(
            loglik_censored(&spec, &params, &c, &CubatureRule::qmc(64)),
            Err(Error::DegenerateInterval(_))
        ));
    }

    #[test]
    fn total_is_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let spec = probit_linear(1, 1);
        let mut clusters: Vec<ClusterData> = (0..50).map(|_| random_cluster(&mut rng, 3, 1, 1)).collect();
        let params = ParameterVector::new(vec![1.2, 0.3], vec![0.5], vec![0.7]);
        let rule = CubatureRule::default_for(1);
        let a = total_loglik(&spec, &params, &clusters, &rule).unwrap();
        let seq: f64 = clusters.iter().map(|c| loglik_continuous(&spec, &params, c).unwrap()).sum();
        assert!((a - seq).abs() < 1e-12 * seq.abs().max(1.0));
        clusters.reverse();
        clusters.swap(3, 17);
        let b = total_loglik(&spec, &params, &clusters, &rule).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn mixed_dataset_rejected() {
        let a = ClusterData::exact("a", vec![1.0], DMatrix::zeros(1, 0), DMatrix::zeros(1, 0));
        let b = ClusterData::interval("b", vec![0.0], vec![1.0], DMatrix::zeros(1, 0), DMatrix::zeros(1, 0));
        let spec = probit_linear(0, 0);
        assert!(matches!(Likelihood::new(&spec, &[a, b], CubatureRule::qmc(8)), Err(Error::Data(_))));
    }

    #[test]
    fn constraint_matrix_covers_strata_and_diagonal() {
        let spec = ModelSpec::new(
            TransformationBasis::bernstein(3, 0.0, 1.0).unwrap(),
            LinkFamily::Logit,
            Marginalization::M1,
            1,
            2,
        )
        .with_strata(2);
        let c = spec.constraints();
        assert_eq!(c.matrix.ncols(), 8 + 1 + 3);
        assert_eq!(c.nrows(), 3 * 2 + 2);
        assert_eq!(c.matrix[(6, 9)], 1.0);
        assert_eq!(c.matrix[(7, 11)], 1.0);
        assert_eq!(c.offset[7], 0.0);
    }
}
