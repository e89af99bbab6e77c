//! Deterministic integration over the unit cube `[0,1]^R`, `R ≤ 6`.
//!
//! Two rules: a digitally shifted Sobol' point set with cell-centred nodes,
//! and a Smolyak sparse grid built from Gauss–Hermite rules. Every node set
//! carries both its cube coordinates `q` and the matching standard normal
//! coordinates `w = Φ⁻¹(q)`, so integrands of the form `E f(W)`,
//! `W ~ N(0, I)`, can skip the `Φ⁻¹` evaluation entirely.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::normal;

pub const MAX_DIM: usize = 6;

/// Default digital shift seed; fixed so likelihoods are reproducible.
pub const DEFAULT_SHIFT_SEED: u64 = 0x005E_ED0F_5B01;

// Joe–Kuo direction numbers for dimensions 2..=6: (s, a, m_1..m_s).
const SOBOL_PARAMS: [(u32, u32, &[u32]); 5] = [
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
];

const BITS: usize = 32;

fn direction_numbers(dim: usize) -> Vec<[u32; BITS]> {
    let mut all = Vec::with_capacity(dim);
    let mut first = [0u32; BITS];
    for (i, v) in first.iter_mut().enumerate() {
        *v = 1u32 << (BITS - 1 - i);
    }
    all.push(first);
    for &(s, a, m) in SOBOL_PARAMS.iter().take(dim.saturating_sub(1)) {
        let s = s as usize;
        let mut v = [0u32; BITS];
        for i in 0..s {
            v[i] = m[i] << (BITS - 1 - i);
        }
        for i in s..BITS {
            let mut x = v[i - s] ^ (v[i - s] >> s);
            for k in 1..s {
                if (a >> (s - 1 - k)) & 1 == 1 {
                    x ^= v[i - k];
                }
            }
            v[i] = x;
        }
        all.push(v);
    }
    all
}

/// First `n` Sobol' points as raw 32-bit integers, row-major `n × dim`,
/// generated in Gray-code order.
pub fn sobol_points(n: usize, dim: usize) -> Vec<u32> {
    let dirs = direction_numbers(dim);
    let mut out = vec![0u32; n * dim];
    let mut x = vec![0u32; dim];
    for k in 1..n {
        let c = (k - 1).trailing_ones() as usize;
        for (d, xd) in x.iter_mut().enumerate() {
            *xd ^= dirs[d][c];
        }
        out[k * dim..(k + 1) * dim].copy_from_slice(&x);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CubatureKind {
    QuasiMonteCarlo,
    SparseGrid,
}

impl FromStr for CubatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "qmc" => Ok(CubatureKind::QuasiMonteCarlo),
            "sparse" => Ok(CubatureKind::SparseGrid),
            other => Err(Error::Domain(format!(
                "unknown cubature rule '{other}' (expected qmc or sparse)"
            ))),
        }
    }
}

impl fmt::Display for CubatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CubatureKind::QuasiMonteCarlo => "qmc",
            CubatureKind::SparseGrid => "sparse",
        })
    }
}

/// A cubature rule. `size` is the node count for QMC (rounded up to a power
/// of two) and the accuracy level for sparse grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CubatureRule {
    pub kind: CubatureKind,
    pub size: usize,
    pub shift_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
}

/// Nodes and weights for one dimension, stored row-major `len × dim`.
#[derive(Debug, Clone)]
pub struct NodeSet {
    pub dim: usize,
    pub cube: Vec<f64>,
    pub normal: Vec<f64>,
    pub weights: Vec<f64>,
}

impl NodeSet {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn cube_point(&self, k: usize) -> &[f64] {
        &self.cube[k * self.dim..(k + 1) * self.dim]
    }

    pub fn normal_point(&self, k: usize) -> &[f64] {
        &self.normal[k * self.dim..(k + 1) * self.dim]
    }

    fn single() -> Self {
        NodeSet {
            dim: 0,
            cube: Vec::new(),
            normal: Vec::new(),
            weights: vec![1.0],
        }
    }
}

impl CubatureRule {
    pub fn qmc(nodes: usize) -> Self {
        CubatureRule {
            kind: CubatureKind::QuasiMonteCarlo,
            size: nodes.max(2).next_power_of_two(),
            shift_seed: DEFAULT_SHIFT_SEED,
        }
    }

    pub fn sparse(level: usize) -> Self {
        CubatureRule {
            kind: CubatureKind::SparseGrid,
            size: level.max(1),
            shift_seed: DEFAULT_SHIFT_SEED,
        }
    }

    /// QMC with 2¹³ nodes for R ≤ 3 and 2¹⁵ above.
    pub fn default_for(dim: usize) -> Self {
        CubatureRule::qmc(if dim <= 3 { 1 << 13 } else { 1 << 15 })
    }

    pub fn with_size(kind: CubatureKind, size: usize) -> Self {
        match kind {
            CubatureKind::QuasiMonteCarlo => CubatureRule::qmc(size),
            CubatureKind::SparseGrid => CubatureRule::sparse(size),
        }
    }

    /// Twice the nodes (QMC) or one level up (sparse grid).
    pub fn refined(&self) -> Self {
        let size = match self.kind {
            CubatureKind::QuasiMonteCarlo => self.size * 2,
            CubatureKind::SparseGrid => self.size + 1,
        };
        CubatureRule { size, ..*self }
    }

    fn coarse(&self) -> Self {
        let size = match self.kind {
            CubatureKind::QuasiMonteCarlo => (self.size / 2).max(1),
            CubatureKind::SparseGrid if self.size > 1 => self.size - 1,
            CubatureKind::SparseGrid => self.size + 1,
        };
        CubatureRule { size, ..*self }
    }

    pub fn nodes(&self, dim: usize) -> Result<NodeSet> {
        if dim > MAX_DIM {
            return Err(Error::Unsupported(format!(
                "integration dimension {dim} exceeds the supported maximum {MAX_DIM}"
            )));
        }
        if dim == 0 {
            return Ok(NodeSet::single());
        }
        Ok(match self.kind {
            CubatureKind::QuasiMonteCarlo => qmc_nodes(self.size, dim, self.shift_seed),
            CubatureKind::SparseGrid => sparse_grid_nodes(self.size, dim),
        })
    }

    /// `∫_{[0,1]^dim} f(q) dq` with an error indicator from a coarser rule.
    pub fn integrate_unit_cube<F>(&self, dim: usize, f: F) -> Result<Estimate>
    where
        F: Fn(&[f64]) -> f64,
    {
        self.integrate_with(dim, |ns, k| f(ns.cube_point(k)))
    }

    /// `E f(W)` for `W ~ N(0, I_dim)`, the same integral after `w = Φ⁻¹(q)`.
    pub fn integrate_gaussian<F>(&self, dim: usize, f: F) -> Result<Estimate>
    where
        F: Fn(&[f64]) -> f64,
    {
        self.integrate_with(dim, |ns, k| f(ns.normal_point(k)))
    }

    fn integrate_with<F>(&self, dim: usize, eval: F) -> Result<Estimate>
    where
        F: Fn(&NodeSet, usize) -> f64,
    {
        let ns = self.nodes(dim)?;
        let value = weighted_sum(&ns, &eval);
        let error = match self.kind {
            CubatureKind::QuasiMonteCarlo => {
                // the first half of a Sobol' net is itself a net
                let half = ns.len() / 2;
                if half == 0 {
                    0.0
                } else {
                    let first: f64 = (0..half).map(|k| eval(&ns, k)).sum::<f64>() / half as f64;
                    (value - first).abs()
                }
            }
            CubatureKind::SparseGrid => {
                let other = self.coarse().nodes(dim)?;
                (value - weighted_sum(&other, &eval)).abs()
            }
        };
        Ok(Estimate { value, error })
    }
}

fn weighted_sum<F>(ns: &NodeSet, eval: &F) -> f64
where
    F: Fn(&NodeSet, usize) -> f64,
{
    ns.weights
        .iter()
        .enumerate()
        .map(|(k, w)| w * eval(ns, k))
        .sum()
}

/// `∫_{[0,1]^dim} f` under `rule`.
pub fn integrate_unit_cube<F>(f: F, dim: usize, rule: &CubatureRule) -> Result<Estimate>
where
    F: Fn(&[f64]) -> f64,
{
    rule.integrate_unit_cube(dim, f)
}

fn qmc_nodes(n: usize, dim: usize, seed: u64) -> NodeSet {
    let m = n.trailing_zeros() as usize;
    debug_assert!(n.is_power_of_two() && m <= BITS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shifts: Vec<u32> = (0..dim).map(|_| rng.random()).collect();
    let raw = sobol_points(n, dim);
    let inv_n = 1.0 / n as f64;
    // keep the leading m bits and centre each point in its cell, which keeps
    // Φ⁻¹(q) finite without clipping
    let cube: Vec<f64> = raw
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let cell = if m == 0 { 0 } else { (x ^ shifts[i % dim]) >> (BITS - m) };
            (cell as f64 + 0.5) * inv_n
        })
        .collect();
    let normal = cube.iter().map(|&q| normal::quantile(q)).collect();
    NodeSet {
        dim,
        cube,
        normal,
        weights: vec![inv_n; n],
    }
}

/// Probabilists' Gauss–Hermite rule (weight φ) by Golub–Welsch.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    if n == 1 {
        return (vec![0.0], vec![1.0]);
    }
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // symmetrize to remove eigen-solver noise
    for k in 0..n / 2 {
        let x = 0.5 * (pairs[n - 1 - k].0 - pairs[k].0);
        let w = 0.5 * (pairs[k].1 + pairs[n - 1 - k].1);
        pairs[k] = (-x, w);
        pairs[n - 1 - k] = (x, w);
    }
    if n % 2 == 1 {
        pairs[n / 2].0 = 0.0;
    }
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    pairs.into_iter().map(|(x, w)| (x, w / total)).unzip()
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Every multi-index of `dim` positive parts summing to `total`.
fn compositions(total: usize, dim: usize) -> Vec<Vec<usize>> {
    if dim == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in 1..=total.saturating_sub(dim - 1) {
        for mut rest in compositions(total - first, dim - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Smolyak combination of Gauss–Hermite rules, exact for polynomials of
/// total degree `2·level − 1`.
fn sparse_grid_nodes(level: usize, dim: usize) -> NodeSet {
    let q = level + dim - 1;
    let rules: Vec<(Vec<f64>, Vec<f64>)> = (1..=level).map(gauss_hermite).collect();
    let mut merged: HashMap<Vec<u64>, (Vec<f64>, f64)> = HashMap::new();
    let mut order: Vec<Vec<u64>> = Vec::new();
    let lo = q.saturating_sub(dim - 1).max(dim);
    for total in lo..=q {
        let coef = if (q - total).is_multiple_of(2) { 1.0 } else { -1.0 } * binomial(dim - 1, q - total);
        for idx in compositions(total, dim) {
            let sizes: Vec<usize> = idx.iter().map(|&i| rules[i - 1].0.len()).collect();
            let count: usize = sizes.iter().product();
            for flat in 0..count {
                let mut rem = flat;
                let mut point = Vec::with_capacity(dim);
                let mut weight = coef;
                for (d, &i) in idx.iter().enumerate() {
                    let j = rem % sizes[d];
                    rem /= sizes[d];
                    point.push(rules[i - 1].0[j]);
                    weight *= rules[i - 1].1[j];
                }
                let key: Vec<u64> = point.iter().map(|x: &f64| (x + 0.0).to_bits()).collect();
                match merged.get_mut(&key) {
                    Some(entry) => entry.1 += weight,
                    None => {
                        order.push(key.clone());
                        merged.insert(key, (point, weight));
                    }
                }
            }
        }
    }
    let mut normal = Vec::with_capacity(order.len() * dim);
    let mut weights = Vec::with_capacity(order.len());
    for key in &order {
        let (point, w) = &merged[key];
        if *w != 0.0 {
            normal.extend_from_slice(point);
            weights.push(*w);
        }
    }
    let cube = normal.iter().map(|&w| normal::cdf(w)).collect();
    NodeSet {
        dim,
        cube,
        normal,
        weights,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sobol_first_points() {
        let p = sobol_points(4, 2);
        let scale = 2f64.powi(32);
        let f: Vec<f64> = p.iter().map(|&x| x as f64 / scale).collect();
        assert_eq!(&f[0..2], &[0.0, 0.0]);
        assert_eq!(&f[2..4], &[0.5, 0.5]);
        // Gray-code order: third point flips the second direction number
        assert_eq!(&f[4..6], &[0.75, 0.25]);
        assert_eq!(&f[6..8], &[0.25, 0.75]);
    }

    #[test]
    fn sobol_coordinates_are_stratified() {
        for m in 1..=10 {
            let n = 1usize << m;
            let p = sobol_points(n, MAX_DIM);
            for d in 0..MAX_DIM {
                let mut cells: Vec<u32> = (0..n).map(|k| p[k * MAX_DIM + d] >> (32 - m)).collect();
                cells.sort_unstable();
                assert!(cells.iter().enumerate().all(|(i, &c)| c as usize == i), "m={m} d={d}");
            }
        }
    }

    #[test]
    fn first_two_dimensions_form_a_zero_net() {
        let m = 8;
        let n = 1usize << m;
        let p = sobol_points(n, 2);
        for split in 0..=m {
            let (bx, by) = (split, m - split);
            let mut seen = vec![false; n];
            for k in 0..n {
                let cx = if bx == 0 { 0 } else { (p[2 * k] >> (32 - bx)) as usize };
                let cy = if by == 0 { 0 } else { (p[2 * k + 1] >> (32 - by)) as usize };
                let cell = (cx << by) | cy;
                assert!(!seen[cell], "split {split}");
                seen[cell] = true;
            }
        }
    }

    #[test]
    fn qmc_nodes_strictly_inside_cube() {
        let ns = CubatureRule::qmc(1 << 10).nodes(6).unwrap();
        assert!(ns.cube.iter().all(|&q| q > 0.0 && q < 1.0));
        assert!(ns.normal.iter().all(|w| w.is_finite()));
        assert!((ns.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_integrand_is_exact() {
        for dim in 1..=MAX_DIM {
            for rule in [CubatureRule::qmc(256), CubatureRule::sparse(4)] {
                let e = rule.integrate_unit_cube(dim, |_| 1.0).unwrap();
                assert!((e.value - 1.0).abs() < 1e-12, "{rule:?} dim={dim}");
            }
        }
    }

    #[test]
    fn second_normal_moment() {
        let f = |q: &[f64]| normal::quantile(q[0]).powi(2);
        let sparse = integrate_unit_cube(f, 1, &CubatureRule::sparse(3)).unwrap();
        assert!((sparse.value - 1.0).abs() < 1e-12);
        // midpoint-type nodes lose about 1.2/n in the tails of Φ⁻¹(q)²
        let qmc = integrate_unit_cube(f, 1, &CubatureRule::qmc(1 << 15)).unwrap();
        assert!((qmc.value - 1.0).abs() < 1e-4, "{}", qmc.value);
    }

    #[test]
    fn rejects_high_dimension() {
        assert!(matches!(
            CubatureRule::default_for(7).integrate_unit_cube(7, |_| 1.0),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn gauss_hermite_moments() {
        let (x, w) = gauss_hermite(10);
        let moment = |p: i32| -> f64 { x.iter().zip(&w).map(|(x, w)| w * x.powi(p)).sum() };
        assert!((moment(0) - 1.0).abs() < 1e-14);
        assert!(moment(1).abs() < 1e-14);
        assert!((moment(2) - 1.0).abs() < 1e-12);
        assert!((moment(4) - 3.0).abs() < 1e-11);
        assert!((moment(18) - 34_459_425.0).abs() / 34_459_425.0 < 1e-10);
    }

    #[test]
    fn sparse_grid_polynomial_exactness() {
        // level 3 is exact to total degree 5
        let rule = CubatureRule::sparse(3);
        let e = rule
            .integrate_gaussian(3, |w| w[0] * w[0] * w[1] * w[1] + w[2].powi(4) + w[0] * w[2])
            .unwrap();
        assert!((e.value - 4.0).abs() < 1e-12);
    }

    #[test]
    fn doubling_moves_estimate_within_error_indicator() {
        let f = |q: &[f64]| {
            let w: Vec<f64> = q.iter().map(|&q| normal::quantile(q)).collect();
            normal::cdf(0.3 - 0.7 * w[0] + 0.2 * w[1]) * normal::cdf(-0.1 + 0.5 * w[1] - 0.4 * w[2])
        };
        for rule in [CubatureRule::qmc(1 << 12), CubatureRule::sparse(5)] {
            let a = rule.integrate_unit_cube(3, f).unwrap();
            let b = rule.refined().integrate_unit_cube(3, f).unwrap();
            assert!((a.value - b.value).abs() < 10.0 * a.error.max(1e-12), "{rule:?}");
        }
    }

    #[test]
    fn symmetric_integrand_is_permutation_invariant() {
        let sym = |q: &[f64]| q.iter().map(|&x| normal::quantile(x)).map(|w| normal::cdf(0.5 - w)).product::<f64>();
        let rule = CubatureRule::sparse(4);
        let a = rule.integrate_unit_cube(2, sym).unwrap().value;
        let b = rule.integrate_unit_cube(2, |q| sym(&[q[1], q[0]])).unwrap().value;
        assert!((a - b).abs() < 1e-14);
        let qmc = CubatureRule::qmc(1 << 12);
        let a = qmc.integrate_unit_cube(2, sym).unwrap();
        let b = qmc.integrate_unit_cube(2, |q| sym(&[q[1], q[0]])).unwrap();
        assert!((a.value - b.value).abs() < 10.0 * a.error.max(1e-9));
    }

    #[test]
    fn deterministic() {
        let f = |q: &[f64]| (q[0] * 3.0).sin() + q[1];
        let r = CubatureRule::default_for(2);
        let a = r.integrate_unit_cube(2, f).unwrap();
        let b = r.integrate_unit_cube(2, f).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
    }
}
