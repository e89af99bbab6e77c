//! Datasets in CSV form and model specification files.
//!
//! A specification file is TOML with `[model]`, `[data]`, and optional
//! `[optimizer]`, `[cubature]` and `[design]` sections:
//!
//! ```toml
//! [model]
//! response = "ordinal"          # continuous | ordinal | censored
//! categories = 2
//! link = "probit"               # probit | logit | cloglog
//! marginalization = "M1"        # M1 | M2
//! fixed = ["trt", "time", "trt:time"]
//! random = ["1"]                # "1" is the random intercept
//!
//! [data]
//! cluster = "id"
//! y = "outcome"                 # or lower = "..." and upper = "..."
//! ```
//!
//! Continuous responses take `basis = "linear" | "loglinear" | "bernstein"`,
//! with `order` and optional `support = [lo, hi]` for Bernstein. Terms
//! written `a:b` are products of columns. `strata = "col"` gives every
//! level of that column its own transformation coefficients.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Deserialize;
use toml::Spanned;

use crate::bases::{BasisKind, TransformationBasis};
use crate::error::{Error, Result};
use crate::integrate::CubatureKind;
use crate::likelihood::{ClusterData, Marginalization, ModelSpec, Response};
use crate::links::LinkFamily;

/// `x` with 17 significant digits, shortest form (`%.17g`).
pub fn fmt17(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "Inf".into() } else { "-Inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.16e}", x);
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..17).contains(&exp) {
        let decimals = (16 - exp).max(0) as usize;
        let s = format!("{:.*}", decimals, x);
        trim_zeros(&s)
    } else {
        let m = trim_zeros(mant);
        format!("{m}e{}{:02}", if exp < 0 { "-" } else { "+" }, exp.abs())
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

/// A bound cell: empty for infinities, otherwise [`fmt17`].
pub fn fmt_bound(x: f64) -> String {
    if x.is_infinite() {
        String::new()
    } else {
        fmt17(x)
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseType {
    Continuous,
    Ordinal(usize),
    Censored,
}

/// A column reference together with the spec-file line it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnRef {
    pub name: String,
    pub line: Option<usize>,
}

impl ColumnRef {
    pub fn new(name: impl Into<String>) -> Self {
        ColumnRef {
            name: name.into(),
            line: None,
        }
    }

    fn describe(&self) -> String {
        match self.line {
            Some(l) => format!("'{}' (spec line {l})", self.name),
            None => format!("'{}'", self.name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResponseColumns {
    Exact(ColumnRef),
    Interval { lower: ColumnRef, upper: ColumnRef },
}

/// Which CSV columns play which role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleMap {
    pub cluster: ColumnRef,
    pub response: ResponseColumns,
    pub response_type: ResponseType,
    /// Fixed-effect terms.
    pub fixed: Vec<ColumnRef>,
    /// Random-effect terms; `"1"` is a constant column.
    pub random: Vec<ColumnRef>,
    pub strata: Option<ColumnRef>,
}

impl RoleMap {
    /// Raw columns referenced by the fixed and random terms, in order of
    /// first use.
    pub fn variables(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for term in self.fixed.iter().chain(&self.random) {
            for part in term.name.split(':') {
                let part = part.trim();
                if part != "1" && !out.iter().any(|v| v == part) {
                    out.push(part.to_string());
                }
            }
        }
        out
    }
}

fn term_value(term: &str, index: &HashMap<&str, usize>, values: &[f64]) -> f64 {
    term.split(':')
        .map(|p| p.trim())
        .map(|p| if p == "1" { 1.0 } else { values[index[p]] })
        .product()
}

/// Observations grouped by cluster, plus the raw columns needed to write
/// them back out.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub roles: RoleMap,
    pub clusters: Vec<ClusterData>,
    /// Raw variable values per cluster and observation, in
    /// [`RoleMap::variables`] order.
    pub raw: Vec<Vec<Vec<f64>>>,
    pub strata_levels: Vec<String>,
    /// Stratum labels per cluster and observation.
    pub strata_labels: Vec<Vec<String>>,
}

impl Dataset {
    pub fn n_observations(&self) -> usize {
        self.clusters.iter().map(|c| c.len()).sum()
    }

    pub fn fixed_names(&self) -> Vec<String> {
        self.roles.fixed.iter().map(|c| c.name.clone()).collect()
    }

    pub fn random_names(&self) -> Vec<String> {
        self.roles.random.iter().map(|c| c.name.clone()).collect()
    }

    /// Build from raw per-observation values; terms are evaluated here.
    pub fn from_raw(
        roles: RoleMap,
        ids: Vec<String>,
        responses: Vec<Vec<(f64, f64)>>,
        raw: Vec<Vec<Vec<f64>>>,
        strata_labels: Vec<Vec<String>>,
    ) -> Result<Self> {
        let variables = roles.variables();
        let index: HashMap<&str, usize> = variables.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect();
        let mut strata_levels: Vec<String> = strata_labels.iter().flatten().cloned().collect();
        strata_levels.sort();
        strata_levels.dedup();
        let mut clusters = Vec::with_capacity(ids.len());
        for (c, id) in ids.iter().enumerate() {
            let n = responses[c].len();
            let x = DMatrix::from_fn(n, roles.fixed.len(), |j, k| term_value(&roles.fixed[k].name, &index, &raw[c][j]));
            let u = DMatrix::from_fn(n, roles.random.len(), |j, k| term_value(&roles.random[k].name, &index, &raw[c][j]));
            let response = match roles.response {
                ResponseColumns::Exact(_) => Response::Exact(responses[c].iter().map(|r| r.0).collect()),
                ResponseColumns::Interval { .. } => Response::Interval {
                    lower: responses[c].iter().map(|r| r.0).collect(),
                    upper: responses[c].iter().map(|r| r.1).collect(),
                },
            };
            let strata = if roles.strata.is_some() {
                strata_labels[c]
                    .iter()
                    .map(|l| strata_levels.binary_search(l).expect("level collected above"))
                    .collect()
            } else {
                vec![0; n]
            };
            clusters.push(ClusterData {
                id: id.clone(),
                response,
                strata,
                x,
                u,
            });
        }
        Ok(Dataset {
            roles,
            clusters,
            raw,
            strata_levels,
            strata_labels,
        })
    }

    /// Finite response range, used as the default Bernstein support.
    pub fn response_range(&self) -> Option<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in &self.clusters {
            let vals: Vec<f64> = match &c.response {
                Response::Exact(y) => y.clone(),
                Response::Interval { lower, upper } => lower.iter().chain(upper).copied().collect(),
            };
            for v in vals.into_iter().filter(|v| v.is_finite()) {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        (lo < hi).then_some((lo, hi))
    }

    /// Fail unless the pooled fixed-effects matrix has full column rank.
    pub fn check_rank(&self) -> Result<()> {
        let q = self.roles.fixed.len();
        if q == 0 {
            return Ok(());
        }
        let mut gram = DMatrix::<f64>::zeros(q, q);
        for c in &self.clusters {
            gram += c.x.transpose() * &c.x;
        }
        let eig = gram.symmetric_eigenvalues();
        let largest = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if eig.iter().any(|&v| v <= largest * 1e-12) {
            return Err(Error::Data(
                "fixed-effects design is rank deficient (collinear columns, or an intercept term that duplicates the transformation's intercept)".into(),
            ));
        }
        Ok(())
    }

    /// Write as CSV; [`parse_dataset`] with the same roles reads it back
    /// unchanged.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        self.write_to(&mut w)?;
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    fn write_to<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        let vars = self.roles.variables();
        let mut header = vec![self.roles.cluster.name.clone()];
        match &self.roles.response {
            ResponseColumns::Exact(y) => header.push(y.name.clone()),
            ResponseColumns::Interval { upper, .. } if matches!(self.roles.response_type, ResponseType::Ordinal(_)) => {
                header.push(upper.name.clone())
            }
            ResponseColumns::Interval { lower, upper } => {
                header.push(lower.name.clone());
                header.push(upper.name.clone());
            }
        }
        header.extend(vars.iter().cloned());
        if let Some(s) = &self.roles.strata {
            header.push(s.name.clone());
        }
        w.write_record(&header)?;
        for (c, cluster) in self.clusters.iter().enumerate() {
            for j in 0..cluster.len() {
                let mut rec = vec![cluster.id.clone()];
                match (&cluster.response, self.roles.response_type) {
                    (Response::Exact(y), _) => rec.push(fmt17(y[j])),
                    (Response::Interval { upper, .. }, ResponseType::Ordinal(_)) => rec.push(fmt17(upper[j])),
                    (Response::Interval { lower, upper }, _) => {
                        rec.push(fmt_bound(lower[j]));
                        rec.push(fmt_bound(upper[j]));
                    }
                }
                rec.extend(self.raw[c][j].iter().map(|&v| fmt17(v)));
                if self.roles.strata.is_some() {
                    rec.push(self.strata_labels[c][j].clone());
                }
                w.write_record(&rec)?;
            }
        }
        Ok(())
    }
}

fn parse_cell(text: &str, line: usize, column: &str) -> Result<f64> {
    text.trim().parse::<f64>().map_err(|_| Error::Parse {
        line,
        msg: format!("column '{column}': cannot parse '{text}' as a number"),
    })
}

/// Read a CSV with a header row into clusters according to `roles`.
pub fn parse_dataset(path: &Path, roles: &RoleMap) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_dataset_str(&text, roles)
}

pub fn parse_dataset_str(text: &str, roles: &RoleMap) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |col: &ColumnRef| -> Result<usize> {
        header.iter().position(|h| *h == col.name).ok_or_else(|| {
            Error::Data(format!("column {} not found in the data header (line 1)", col.describe()))
        })
    };
    let cluster_col = find(&roles.cluster)?;
    let (resp_a, resp_b) = match &roles.response {
        ResponseColumns::Exact(y) => (find(y)?, None),
        ResponseColumns::Interval { lower, upper } => (find(lower)?, Some(find(upper)?)),
    };
    let variables = roles.variables();
    let mut var_cols = Vec::with_capacity(variables.len());
    for v in &variables {
        let term = roles
            .fixed
            .iter()
            .chain(&roles.random)
            .find(|t| t.name.split(':').any(|p| p.trim() == v))
            .expect("variable comes from a term");
        let col = header.iter().position(|h| h == v).ok_or_else(|| {
            Error::Data(format!(
                "column '{v}' used by term {} not found in the data header (line 1)",
                term.describe()
            ))
        })?;
        var_cols.push(col);
    }
    let strata_col = roles.strata.as_ref().map(find).transpose()?;

    let mut order: Vec<String> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();
    let mut responses: Vec<Vec<(f64, f64)>> = Vec::new();
    let mut raw: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut labels: Vec<Vec<String>> = Vec::new();

    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let cell = |i: usize| record.get(i).unwrap_or("").trim();
        let id = cell(cluster_col).to_string();
        if id.is_empty() {
            return Err(Error::Parse {
                line,
                msg: format!("missing cluster id in column '{}'", roles.cluster.name),
            });
        }
        let a = cell(resp_a);
        let bounds = match (roles.response_type, resp_b) {
            (ResponseType::Ordinal(k), _) => {
                let v = parse_cell(a, line, &header[resp_a])?;
                if v.fract() != 0.0 || v < 1.0 || v > k as f64 {
                    return Err(Error::Parse {
                        line,
                        msg: format!("ordinal response {a} is not a category in 1..{k}"),
                    });
                }
                (v - 1.0, v)
            }
            (_, None) => {
                if a.is_empty() {
                    return Err(Error::Parse {
                        line,
                        msg: format!("missing response in column '{}'", header[resp_a]),
                    });
                }
                let v = parse_cell(a, line, &header[resp_a])?;
                (v, v)
            }
            (_, Some(b_col)) => {
                let b = cell(b_col);
                let lo = if a.is_empty() { f64::NEG_INFINITY } else { parse_cell(a, line, &header[resp_a])? };
                let hi = if b.is_empty() { f64::INFINITY } else { parse_cell(b, line, &header[b_col])? };
                if !(lo < hi) {
                    return Err(Error::Parse {
                        line,
                        msg: format!(
                            "interval ({a}, {b}] is empty; exact and interval observations cannot be mixed"
                        ),
                    });
                }
                (lo, hi)
            }
        };
        let mut values = Vec::with_capacity(var_cols.len());
        for (&col, name) in var_cols.iter().zip(&variables) {
            let c = cell(col);
            if c.is_empty() {
                return Err(Error::Parse {
                    line,
                    msg: format!("missing value in column '{name}'"),
                });
            }
            values.push(parse_cell(c, line, name)?);
        }
        let idx = *slot.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            responses.push(Vec::new());
            raw.push(Vec::new());
            labels.push(Vec::new());
            order.len() - 1
        });
        responses[idx].push(bounds);
        raw[idx].push(values);
        if let Some(sc) = strata_col {
            let l = cell(sc);
            if l.is_empty() {
                return Err(Error::Parse {
                    line,
                    msg: "missing stratum label".into(),
                });
            }
            labels[idx].push(l.to_string());
        } else {
            labels[idx].push(String::new());
        }
    }
    if order.is_empty() {
        return Err(Error::Data("data file has no observations".into()));
    }
    Dataset::from_raw(roles.clone(), order, responses, raw, labels)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    model: RawModel,
    data: Option<RawData>,
    optimizer: Option<RawOptimizer>,
    cubature: Option<RawCubature>,
    design: Option<toml::Value>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    response: Spanned<String>,
    categories: Option<Spanned<usize>>,
    basis: Option<Spanned<String>>,
    order: Option<Spanned<usize>>,
    support: Option<Spanned<Vec<f64>>>,
    link: Spanned<String>,
    marginalization: Option<Spanned<String>>,
    #[serde(default)]
    fixed: Vec<Spanned<String>>,
    #[serde(default)]
    random: Vec<Spanned<String>>,
    strata: Option<Spanned<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    cluster: Spanned<String>,
    y: Option<Spanned<String>>,
    lower: Option<Spanned<String>>,
    upper: Option<Spanned<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptimizer {
    max_outer: Option<usize>,
    max_inner: Option<usize>,
    tol: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCubature {
    rule: Option<Spanned<String>>,
    nodes: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisChoice {
    pub kind: BasisKind,
    pub order: usize,
    pub support: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSettings {
    pub max_outer: Option<usize>,
    pub max_inner: Option<usize>,
    pub tol: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecFile {
    pub basis: BasisChoice,
    pub link: LinkFamily,
    pub marginalization: Marginalization,
    pub roles: RoleMap,
    pub optimizer: OptimizerSettings,
    pub cubature_kind: Option<CubatureKind>,
    pub cubature_nodes: Option<usize>,
    /// The raw `[design]` table, interpreted by the simulator.
    pub design: Option<toml::Value>,
    /// Line of the `[design]` header, for error messages.
    pub design_line: Option<usize>,
}

impl SpecFile {
    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawSpec = toml::from_str(text).map_err(|e| Error::Parse {
            line: e.span().map(|s| line_of(text, s.start)).unwrap_or(1),
            msg: e.message().trim().to_string(),
        })?;
        let at = |span: std::ops::Range<usize>| line_of(text, span.start);
        let err = |span: std::ops::Range<usize>, msg: String| Error::Parse { line: at(span), msg };
        let col = |s: &Spanned<String>| ColumnRef {
            name: s.get_ref().trim().to_string(),
            line: Some(at(s.span())),
        };

        let m = &raw.model;
        let response_type = match m.response.get_ref().trim() {
            "continuous" => ResponseType::Continuous,
            "censored" => ResponseType::Censored,
            "ordinal" => {
                let k = m.categories.as_ref().ok_or_else(|| {
                    err(m.response.span(), "ordinal responses need 'categories'".into())
                })?;
                if *k.get_ref() < 2 {
                    return Err(err(k.span(), "an ordinal response needs at least 2 categories".into()));
                }
                ResponseType::Ordinal(*k.get_ref())
            }
            other => {
                return Err(err(
                    m.response.span(),
                    format!("unknown response type '{other}' (expected continuous, ordinal or censored)"),
                ))
            }
        };
        let basis = match response_type {
            ResponseType::Ordinal(k) => {
                if let Some(b) = &m.basis {
                    if b.get_ref().trim() != "ordinal" {
                        return Err(err(b.span(), "ordinal responses use the ordinal basis".into()));
                    }
                }
                BasisChoice {
                    kind: BasisKind::OrdinalThresholds,
                    order: k - 1,
                    support: None,
                }
            }
            _ => {
                let b = m
                    .basis
                    .as_ref()
                    .ok_or_else(|| err(m.response.span(), "missing 'basis' for a non-ordinal response".into()))?;
                let kind = match b.get_ref().trim() {
                    "linear" => BasisKind::Linear,
                    "loglinear" => BasisKind::LogLinear,
                    "bernstein" => BasisKind::Bernstein,
                    other => {
                        return Err(err(
                            b.span(),
                            format!("unknown basis '{other}' (expected linear, loglinear or bernstein)"),
                        ))
                    }
                };
                let order = match (kind, &m.order) {
                    (BasisKind::Bernstein, Some(o)) if *o.get_ref() >= 1 => *o.get_ref(),
                    (BasisKind::Bernstein, Some(o)) => return Err(err(o.span(), "order must be at least 1".into())),
                    (BasisKind::Bernstein, None) => return Err(err(b.span(), "bernstein basis needs 'order'".into())),
                    _ => 1,
                };
                let support = match &m.support {
                    None => None,
                    Some(s) => match s.get_ref().as_slice() {
                        [lo, hi] if lo < hi => Some((*lo, *hi)),
                        _ => return Err(err(s.span(), "support must be [lower, upper] with lower < upper".into())),
                    },
                };
                BasisChoice { kind, order, support }
            }
        };
        let link: LinkFamily = m
            .link
            .get_ref()
            .parse()
            .map_err(|e: Error| err(m.link.span(), e.to_string()))?;
        let marginalization = match &m.marginalization {
            None => Marginalization::M1,
            Some(s) => s.get_ref().parse().map_err(|e: Error| err(s.span(), e.to_string()))?,
        };

        let data = raw
            .data
            .as_ref()
            .ok_or_else(|| Error::Parse { line: 1, msg: "missing [data] section".into() })?;
        let response = match (response_type, &data.y, &data.lower, &data.upper) {
            (ResponseType::Censored, None, Some(l), Some(u)) => ResponseColumns::Interval { lower: col(l), upper: col(u) },
            (ResponseType::Censored, _, _, _) => {
                return Err(err(
                    data.cluster.span(),
                    "censored responses need 'lower' and 'upper' columns (and no 'y')".into(),
                ))
            }
            (_, Some(y), None, None) => ResponseColumns::Exact(col(y)),
            _ => {
                return Err(err(
                    data.cluster.span(),
                    "continuous and ordinal responses need a single 'y' column".into(),
                ))
            }
        };
        let response = match (response_type, response) {
            (ResponseType::Ordinal(_), ResponseColumns::Exact(y)) => ResponseColumns::Interval {
                lower: y.clone(),
                upper: y,
            },
            (_, r) => r,
        };
        for term in m.fixed.iter().chain(&m.random) {
            let name = term.get_ref().trim();
            if name.is_empty() || name.split(':').any(|p| p.trim().is_empty()) {
                return Err(err(term.span(), format!("malformed term '{name}'")));
            }
        }
        if let Some(t) = m.fixed.iter().find(|t| t.get_ref().trim() == "1") {
            return Err(err(
                t.span(),
                "the transformation already has an intercept; drop \"1\" from the fixed terms".into(),
            ));
        }
        let roles = RoleMap {
            cluster: col(&data.cluster),
            response,
            response_type,
            fixed: m.fixed.iter().map(col).collect(),
            random: m.random.iter().map(col).collect(),
            strata: m.strata.as_ref().map(col),
        };
        let optimizer = raw
            .optimizer
            .as_ref()
            .map(|o| OptimizerSettings {
                max_outer: o.max_outer,
                max_inner: o.max_inner,
                tol: o.tol,
            })
            .unwrap_or(OptimizerSettings {
                max_outer: None,
                max_inner: None,
                tol: None,
            });
        let (cubature_kind, cubature_nodes) = match &raw.cubature {
            None => (None, None),
            Some(c) => {
                let kind = c
                    .rule
                    .as_ref()
                    .map(|r| r.get_ref().parse::<CubatureKind>().map_err(|e| err(r.span(), e.to_string())))
                    .transpose()?;
                (kind, c.nodes)
            }
        };
        let design_line = text
            .lines()
            .position(|l| l.trim_start().starts_with("[design"))
            .map(|i| i + 1);
        Ok(SpecFile {
            basis,
            link,
            marginalization,
            roles,
            optimizer,
            cubature_kind,
            cubature_nodes,
            design: raw.design,
            design_line,
        })
    }

    /// The transformation basis, taking the Bernstein support from the data
    /// when the file does not fix it.
    pub fn basis_for(&self, data: Option<&Dataset>) -> Result<TransformationBasis> {
        match self.basis.kind {
            BasisKind::Linear => Ok(TransformationBasis::linear()),
            BasisKind::LogLinear => Ok(TransformationBasis::log_linear()),
            BasisKind::OrdinalThresholds => TransformationBasis::ordinal(self.basis.order + 1),
            BasisKind::Bernstein => {
                let (lo, hi) = match (self.basis.support, data) {
                    (Some(s), _) => s,
                    (None, Some(d)) => d
                        .response_range()
                        .ok_or_else(|| Error::Data("cannot infer Bernstein support from a constant response".into()))?,
                    (None, None) => return Err(Error::Data("bernstein basis needs 'support' here".into())),
                };
                TransformationBasis::bernstein(self.basis.order, lo, hi)
            }
        }
    }

    pub fn model_spec(&self, data: Option<&Dataset>, n_strata: usize) -> Result<ModelSpec> {
        Ok(ModelSpec::new(
            self.basis_for(data)?,
            self.link,
            self.marginalization,
            self.roles.fixed.len(),
            self.roles.random.len(),
        )
        .with_strata(n_strata))
    }

    /// Model specification matched to a parsed dataset.
    pub fn model_for(&self, data: &Dataset) -> Result<ModelSpec> {
        self.model_spec(Some(data), data.strata_levels.len().max(1))
    }

    /// Parameter names: `theta1…` (with `[level]` per stratum), fixed terms,
    /// `gamma1…`.
    pub fn param_names(&self, spec: &ModelSpec, data: Option<&Dataset>) -> Vec<String> {
        let pb = spec.basis.dim();
        let mut names = Vec::new();
        for s in 0..spec.n_strata {
            for k in 1..=pb {
                match data.and_then(|d| d.strata_levels.get(s)).filter(|_| spec.n_strata > 1) {
                    Some(level) => names.push(format!("theta{k}[{level}]")),
                    None => names.push(format!("theta{k}")),
                }
            }
        }
        names.extend(self.roles.fixed.iter().map(|t| t.name.clone()));
        names.extend((1..=spec.layout().m).map(|i| format!("gamma{i}")));
        names
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPEC: &str = r#"
[model]
response = "continuous"
basis = "bernstein"
order = 4
link = "logit"
marginalization = "M2"
fixed = ["x1", "x1:x2"]
random = ["1", "x2"]

[data]
cluster = "id"
y = "y"

[cubature]
rule = "sparse"
nodes = 5
"#;

    #[test]
    fn fmt17_examples() {
        assert_eq!(fmt17(0.1), "0.10000000000000001");
        assert_eq!(fmt17(1.0), "1");
        assert_eq!(fmt17(-2.5), "-2.5");
        assert_eq!(fmt17(1e-300), "1e-300");
        assert_eq!(fmt17(2.0f64.powi(-1074)), "4.9406564584124654e-324");
        assert_eq!(fmt17(123456789.0), "123456789");
        assert_eq!(fmt17(f64::NAN), "NaN");
        for &x in &[std::f64::consts::PI, -1.0 / 3.0, 6.02e23, 1.5e-7, 1e16, 12345.678] {
            assert_eq!(fmt17(x).parse::<f64>().unwrap(), x, "{}", fmt17(x));
        }
    }

    #[test]
    fn spec_parses() {
        let s = SpecFile::parse(SPEC).unwrap();
        assert_eq!(s.basis.kind, BasisKind::Bernstein);
        assert_eq!(s.basis.order, 4);
        assert_eq!(s.link, LinkFamily::Logit);
        assert_eq!(s.marginalization, Marginalization::M2);
        assert_eq!(s.roles.variables(), vec!["x1", "x2"]);
        assert_eq!(s.cubature_kind, Some(CubatureKind::SparseGrid));
        assert_eq!(s.roles.fixed[1].line, Some(8));
    }

    #[test]
    fn spec_errors_are_line_anchored() {
        let bad = SPEC.replace("link = \"logit\"", "link = \"identity\"");
        match SpecFile::parse(&bad) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 6);
                assert!(msg.contains("identity"));
            }
            other => panic!("{other:?}"),
        }
        let bad = SPEC.replace("order = 4", "order = 4\ncolour = 1");
        assert!(matches!(SpecFile::parse(&bad), Err(Error::Parse { line: 6, .. })));
    }

    #[test]
    fn two_row_dataset() {
        let s = SpecFile::parse(SPEC).unwrap();
        let csv = "id,y,x1,x2\na,0.5,1,2\na,0.7,3,4\n";
        let d = parse_dataset_str(csv, &s.roles).unwrap();
        assert_eq!(d.clusters.len(), 1);
        assert_eq!(d.clusters[0].len(), 2);
        assert_eq!(d.clusters[0].x[(1, 1)], 12.0);
        assert_eq!(d.clusters[0].u[(0, 0)], 1.0);
        assert_eq!(d.clusters[0].u[(1, 1)], 4.0);
    }

    #[test]
    fn empty_bound_is_infinite() {
        let roles = RoleMap {
            cluster: ColumnRef::new("id"),
            response: ResponseColumns::Interval {
                lower: ColumnRef::new("lo"),
                upper: ColumnRef::new("hi"),
            },
            response_type: ResponseType::Censored,
            fixed: vec![],
            random: vec![],
            strata: None,
        };
        let d = parse_dataset_str("id,lo,hi\n1,2.5,\n1,,1\n", &roles).unwrap();
        let Response::Interval { lower, upper } = &d.clusters[0].response else { panic!() };
        assert_eq!(upper[0], f64::INFINITY);
        assert_eq!(lower[1], f64::NEG_INFINITY);
    }

    #[test]
    fn errors_name_column_and_line() {
        let s = SpecFile::parse(SPEC).unwrap();
        match parse_dataset_str("id,y,x1\na,1,2\n", &s.roles) {
            Err(Error::Data(m)) => assert!(m.contains("x2") && m.contains("line"), "{m}"),
            other => panic!("{other:?}"),
        }
        match parse_dataset_str("id,y,x1,x2\na,1,2,3\nb,1,oops,3\n", &s.roles) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("x1"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_trip() {
        let s = SpecFile::parse(SPEC).unwrap();
        let csv = "id,y,x1,x2\nb,0.1,1,2\na,0.7,3,4\nb,0.30000000000000004,-1e-9,5\n";
        let d = parse_dataset_str(csv, &s.roles).unwrap();
        let out = d.to_csv_string().unwrap();
        let again = parse_dataset_str(&out, &s.roles).unwrap();
        assert_eq!(d, again);
        assert_eq!(out, again.to_csv_string().unwrap());
    }

    #[test]
    fn ordinal_categories_become_intervals() {
        let text = "[model]\nresponse = \"ordinal\"\ncategories = 3\nlink = \"probit\"\n[data]\ncluster = \"id\"\ny = \"cat\"\n";
        let s = SpecFile::parse(text).unwrap();
        let d = parse_dataset_str("id,cat\n1,1\n1,3\n2,2\n", &s.roles).unwrap();
        let Response::Interval { lower, upper } = &d.clusters[0].response else { panic!() };
        assert_eq!((lower[1], upper[1]), (2.0, 3.0));
        assert!(matches!(parse_dataset_str("id,cat\n1,4\n", &s.roles), Err(Error::Parse { line: 2, .. })));
        assert_eq!(d.to_csv_string().unwrap(), "id,cat\n1,1\n1,3\n2,2\n");
    }

    #[test]
    fn intercept_in_fixed_terms_rejected() {
        let bad = SPEC.replace("fixed = [\"x1\", \"x1:x2\"]", "fixed = [\"1\", \"x1\"]");
        assert!(matches!(SpecFile::parse(&bad), Err(Error::Parse { line: 8, .. })));
    }
}
