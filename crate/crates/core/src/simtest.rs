//! Simulation from the model and Monte Carlo reference values.
//!
//! A `[design]` table in a specification file looks like
//!
//! ```toml
//! [design]
//! clusters = 500
//! cluster_size = [4, 4]
//! seed = 1
//! theta = [0.0, 1.5]
//! beta = [0.5]
//! gamma = [1.0]
//! grid = [0.5, 1.0, 2.0]        # censored responses only
//!
//! [[design.covariate]]
//! name = "x1"
//! dist = "normal"               # normal | uniform | bernoulli | index
//! params = [0.0, 1.0]
//! level = "cluster"             # or "observation" (default)
//! ```

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Deserialize;

use crate::covariance::cholesky_i;
use crate::error::{Error, Result};
use crate::io::{Dataset, ResponseType, RoleMap, SpecFile};
use crate::likelihood::{Marginalization, ModelSpec, ParameterVector};

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateDist {
    /// `params = [mean, sd]`
    Normal,
    /// `params = [lower, upper]`
    Uniform,
    /// `params = [p]`
    Bernoulli,
    /// `params = [start, step]`, value `start + step·j` for the j-th
    /// observation in a cluster (0-based).
    Index,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateLevel {
    Cluster,
    #[default]
    Observation,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateGen {
    pub name: String,
    pub dist: CovariateDist,
    #[serde(default)]
    pub params: Vec<f64>,
    #[serde(default)]
    pub level: CovariateLevel,
}

impl CovariateGen {
    fn check(&self) -> Result<()> {
        let need = match self.dist {
            CovariateDist::Bernoulli => 1,
            _ => 2,
        };
        if self.params.len() != need {
            return Err(Error::InvalidParameter(format!(
                "covariate '{}' needs {need} parameters, got {}",
                self.name,
                self.params.len()
            )));
        }
        let p = &self.params;
        let ok = match self.dist {
            CovariateDist::Normal => p[1] >= 0.0,
            CovariateDist::Uniform => p[0] <= p[1],
            CovariateDist::Bernoulli => (0.0..=1.0).contains(&p[0]),
            CovariateDist::Index => true,
        };
        if !ok || p.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("covariate '{}' has invalid parameters {p:?}", self.name)));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut ChaCha8Rng, j: usize) -> f64 {
        let p = &self.params;
        match self.dist {
            CovariateDist::Normal => {
                let z: f64 = StandardNormal.sample(rng);
                p[0] + p[1] * z
            }
            CovariateDist::Uniform => p[0] + (p[1] - p[0]) * rng.random::<f64>(),
            CovariateDist::Bernoulli => f64::from(u8::from(rng.random::<f64>() < p[0])),
            CovariateDist::Index => p[0] + p[1] * j as f64,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDesign {
    clusters: usize,
    cluster_size: Vec<usize>,
    #[serde(default)]
    seed: u64,
    theta: Vec<f64>,
    #[serde(default)]
    beta: Vec<f64>,
    #[serde(default)]
    gamma: Vec<f64>,
    grid: Option<Vec<f64>>,
    #[serde(default)]
    covariate: Vec<CovariateGen>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationDesign {
    pub spec: ModelSpec,
    pub params: ParameterVector,
    pub roles: RoleMap,
    pub n_clusters: usize,
    /// Inclusive range of cluster sizes, drawn uniformly.
    pub cluster_size: (usize, usize),
    pub covariates: Vec<CovariateGen>,
    /// Cut points for interval-censored responses.
    pub grid: Option<Vec<f64>>,
    pub seed: u64,
}

impl SimulationDesign {
    /// Build from a specification file with a `[design]` table.
    pub fn from_spec_file(file: &SpecFile) -> Result<Self> {
        let line = file.design_line.unwrap_or(1);
        let table = file.design.clone().ok_or_else(|| Error::Parse {
            line: 1,
            msg: "missing [design] section".into(),
        })?;
        let raw: RawDesign = table.try_into().map_err(|e: toml::de::Error| Error::Parse {
            line,
            msg: format!("[design]: {}", e.message().trim()),
        })?;
        let size = match raw.cluster_size.as_slice() {
            [n] => (*n, *n),
            [a, b] => (*a, *b),
            _ => {
                return Err(Error::Parse {
                    line,
                    msg: "[design]: cluster_size must be [n] or [min, max]".into(),
                })
            }
        };
        if file.roles.strata.is_some() {
            return Err(Error::Unsupported("simulation from stratified models".into()));
        }
        let spec = file.model_spec(None, 1).map_err(|e| Error::Parse {
            line,
            msg: format!("[design]: {e}"),
        })?;
        let design = SimulationDesign {
            params: ParameterVector::new(raw.theta, raw.beta, raw.gamma),
            spec,
            roles: file.roles.clone(),
            n_clusters: raw.clusters,
            cluster_size: size,
            covariates: raw.covariate,
            grid: raw.grid,
            seed: raw.seed,
        };
        design.check().map_err(|e| Error::Parse {
            line,
            msg: format!("[design]: {e}"),
        })?;
        Ok(design)
    }

    pub fn check(&self) -> Result<()> {
        self.params.check(&self.spec)?;
        let viol = self.params.max_violation(&self.spec);
        if viol > 0.0 {
            return Err(Error::InvalidParameter(format!("parameters violate the model constraints by {viol}")));
        }
        if self.n_clusters == 0 || self.cluster_size.0 == 0 || self.cluster_size.0 > self.cluster_size.1 {
            return Err(Error::InvalidParameter("need at least one cluster and a valid size range".into()));
        }
        for v in self.roles.variables() {
            let gens = self.covariates.iter().filter(|g| g.name == v).count();
            if gens != 1 {
                return Err(Error::InvalidParameter(format!("variable '{v}' needs exactly one generator, has {gens}")));
            }
        }
        for g in &self.covariates {
            g.check()?;
        }
        match (self.roles.response_type, &self.grid) {
            (ResponseType::Censored, Some(g)) if !g.is_empty() && g.windows(2).all(|w| w[0] < w[1]) => Ok(()),
            (ResponseType::Censored, _) => Err(Error::InvalidParameter(
                "censored simulation needs a strictly increasing, non-empty grid".into(),
            )),
            (_, Some(_)) => Err(Error::InvalidParameter("grid applies to censored responses only".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Simulated {
    pub dataset: Dataset,
    /// Draws whose transformation target fell outside the attainable range
    /// and were set to the nearest support boundary.
    pub clamped: usize,
    pub warnings: Vec<String>,
}

/// Draw a dataset from the model described by `design`.
pub fn simulate(design: &SimulationDesign) -> Result<Simulated> {
    design.check()?;
    let spec = &design.spec;
    let params = &design.params;
    let roles = &design.roles;
    let vars = roles.variables();
    let gens: Vec<&CovariateGen> = vars
        .iter()
        .map(|v| design.covariates.iter().find(|g| &g.name == v).expect("checked"))
        .collect();
    let lambda = params.lambda(spec);
    let r = spec.n_random;
    let width = format!("{}", design.n_clusters).len();

    let mut rng = ChaCha8Rng::seed_from_u64(design.seed);
    let mut ids = Vec::with_capacity(design.n_clusters);
    let mut responses = Vec::with_capacity(design.n_clusters);
    let mut raw = Vec::with_capacity(design.n_clusters);
    let mut clamped = 0usize;
    for c in 0..design.n_clusters {
        let n = rng.random_range(design.cluster_size.0..=design.cluster_size.1);
        let cluster_level: Vec<f64> = gens.iter().map(|g| g.draw(&mut rng, 0)).collect();
        let values: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                gens.iter()
                    .zip(&cluster_level)
                    .map(|(g, &cv)| match g.level {
                        CovariateLevel::Cluster => cv,
                        CovariateLevel::Observation => g.draw(&mut rng, j),
                    })
                    .collect()
            })
            .collect();
        let tmp = Dataset::from_raw(
            roles.clone(),
            vec![String::new()],
            vec![vec![(0.0, 0.0); n]],
            vec![values.clone()],
            vec![vec![String::new(); n]],
        )?;
        let cl = &tmp.clusters[0];
        let b = DVector::from_fn(r, |_, _| StandardNormal.sample(&mut rng));
        let v = &cl.u * &lambda;
        let shared = &v * &b;
        let mut obs = Vec::with_capacity(n);
        for j in 0..n {
            let eps: f64 = StandardNormal.sample(&mut rng);
            let z = shared[j] + eps;
            let s = match spec.marginalization {
                Marginalization::M1 => 1.0,
                Marginalization::M2 => (1.0 + v.row(j).norm_squared()).sqrt(),
            };
            let xb: f64 = cl.x.row(j).iter().zip(&params.beta).map(|(x, b)| x * b).sum();
            let target = s * spec.link.from_probit(z / s) + xb;
            let y = match spec.basis.invert(&params.theta, target) {
                Ok(y) => y,
                Err(edge) => {
                    clamped += 1;
                    edge
                }
            };
            obs.push(match (roles.response_type, &design.grid) {
                (ResponseType::Ordinal(_), _) => (y - 1.0, y),
                (ResponseType::Censored, Some(grid)) => {
                    let k = grid.partition_point(|&g| g < y);
                    let lo = if k == 0 { f64::NEG_INFINITY } else { grid[k - 1] };
                    let hi = if k == grid.len() { f64::INFINITY } else { grid[k] };
                    (lo, hi)
                }
                _ => (y, y),
            });
        }
        ids.push(format!("{:0width$}", c + 1));
        responses.push(obs);
        raw.push(values);
    }
    let labels = responses.iter().map(|o| vec![String::new(); o.len()]).collect();
    let dataset = Dataset::from_raw(roles.clone(), ids, responses, raw, labels)?;
    let mut warnings = Vec::new();
    if clamped > 0 {
        warnings.push(format!(
            "{clamped} draws fell outside the range of the transformation and were set to the support boundary"
        ));
    }
    Ok(Simulated {
        dataset,
        clamped,
        warnings,
    })
}

const ORACLE_CHUNK: usize = 1 << 16;
const Z_995: f64 = 2.575_829_303_548_900_4;

/// Monte Carlo estimate of `P(lower < Z ≤ upper)` for `Z ~ N(0, sigma)`,
/// with the half-width of its 99% confidence interval.
pub fn mvn_prob_oracle(lower: &[f64], upper: &[f64], sigma: &DMatrix<f64>, n_draws: usize, seed: u64) -> Result<(f64, f64)> {
    let d = lower.len();
    if upper.len() != d || sigma.nrows() != d || sigma.ncols() != d {
        return Err(Error::Dimension("bounds and covariance disagree in size".into()));
    }
    if n_draws == 0 {
        return Err(Error::InvalidParameter("need at least one draw".into()));
    }
    let l = cholesky_i(sigma)?;
    let chunks = n_draws.div_ceil(ORACLE_CHUNK);
    let hits: usize = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let n = ORACLE_CHUNK.min(n_draws - c * ORACLE_CHUNK);
            let mut e = DVector::zeros(d);
            let mut hits = 0;
            for _ in 0..n {
                for v in e.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                let z = &l * &e;
                if (0..d).all(|j| z[j] > lower[j] && z[j] <= upper[j]) {
                    hits += 1;
                }
            }
            hits
        })
        .sum();
    let p = hits as f64 / n_draws as f64;
    Ok((p, Z_995 * (p * (1.0 - p) / n_draws as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normal;

    const SPEC: &str = r#"
[model]
response = "continuous"
basis = "linear"
link = "probit"
fixed = ["x"]
random = ["1"]

[data]
cluster = "id"
y = "y"

[design]
clusters = 400
cluster_size = [3, 5]
seed = 9
theta = [1.0, 0.5]
beta = [1.0]
gamma = [0.8]

[[design.covariate]]
name = "x"
dist = "bernoulli"
params = [0.5]
level = "cluster"
"#;

    #[test]
    fn design_parses() {
        let d = SimulationDesign::from_spec_file(&SpecFile::parse(SPEC).unwrap()).unwrap();
        assert_eq!(d.n_clusters, 400);
        assert_eq!(d.cluster_size, (3, 5));
        assert_eq!(d.covariates[0].level, CovariateLevel::Cluster);
    }

    #[test]
    fn design_errors_point_at_design() {
        let bad = SPEC.replace("params = [0.5]", "params = [1.5]");
        match SimulationDesign::from_spec_file(&SpecFile::parse(&bad).unwrap()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 13),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn linear_probit_moments() {
        // y = (z + xβ + θ₂)/θ₁ with z ~ N(0, 1 + γ²) and a shared cluster part
        let d = SimulationDesign::from_spec_file(&SpecFile::parse(SPEC).unwrap()).unwrap();
        let sim = simulate(&d).unwrap();
        assert_eq!(sim.clamped, 0);
        let mut resid = Vec::new();
        let mut pairs = Vec::new();
        for c in &sim.dataset.clusters {
            let crate::likelihood::Response::Exact(y) = &c.response else { panic!() };
            assert!((3..=5).contains(&y.len()));
            let e: Vec<f64> = y.iter().enumerate().map(|(j, y)| y - 0.5 - c.x[(j, 0)]).collect();
            pairs.push(e[0] * e[1]);
            resid.extend(e);
        }
        let n = resid.len() as f64;
        let mean = resid.iter().sum::<f64>() / n;
        let var = resid.iter().map(|e| e * e).sum::<f64>() / n;
        let cov = pairs.iter().sum::<f64>() / pairs.len() as f64;
        assert!(mean.abs() < 0.1, "{mean}");
        assert!((var - 1.64).abs() < 0.15, "{var}");
        assert!((cov - 0.64).abs() < 0.2, "{cov}");
    }

    #[test]
    fn simulation_is_deterministic_and_round_trips() {
        let file = SpecFile::parse(SPEC).unwrap();
        let d = SimulationDesign::from_spec_file(&file).unwrap();
        let a = simulate(&d).unwrap().dataset;
        let b = simulate(&d).unwrap().dataset;
        assert_eq!(a, b);
        let text = a.to_csv_string().unwrap();
        let back = crate::io::parse_dataset_str(&text, &file.roles).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn censored_grid_intervals() {
        let text = SPEC
            .replace("response = \"continuous\"", "response = \"censored\"")
            .replace("y = \"y\"", "lower = \"lo\"\nupper = \"hi\"")
            .replace("gamma = [0.8]", "gamma = [0.8]\ngrid = [0.0, 1.0]");
        let d = SimulationDesign::from_spec_file(&SpecFile::parse(&text).unwrap()).unwrap();
        let sim = simulate(&d).unwrap();
        for c in &sim.dataset.clusters {
            let crate::likelihood::Response::Interval { lower, upper } = &c.response else { panic!() };
            for (l, u) in lower.iter().zip(upper) {
                assert!(l < u);
                assert!([f64::NEG_INFINITY, 0.0, 1.0].contains(l));
            }
        }
    }

    #[test]
    fn oracle_bivariate_orthant() {
        let rho: f64 = 0.5;
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        let (p, hw) = mvn_prob_oracle(&[f64::NEG_INFINITY; 2], &[0.0, 0.0], &sigma, 400_000, 3).unwrap();
        let exact = 0.25 + rho.asin() / (2.0 * std::f64::consts::PI);
        assert!((p - exact).abs() < hw * 1.5, "{p} {exact} {hw}");
        let (p, hw) = mvn_prob_oracle(&[-1.0], &[0.5], &DMatrix::identity(1, 1), 400_000, 4).unwrap();
        let exact = normal::cdf(0.5) - normal::cdf(-1.0);
        assert!((p - exact).abs() < hw * 1.5);
    }
}
