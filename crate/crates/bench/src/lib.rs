//! Fixtures shared by the benchmarks.

use nalgebra::DMatrix;

use mitram_core::bases::TransformationBasis;
use mitram_core::{ClusterData, LinkFamily, Marginalization, ModelSpec, ParameterVector};

/// Deterministic pseudo-random values in (-1, 1); enough for timing.
fn wiggle(i: usize, j: usize, salt: usize) -> f64 {
    let h = (i.wrapping_mul(2_654_435_761) ^ j.wrapping_mul(40_503) ^ salt.wrapping_mul(97)) % 10_007;
    h as f64 / 5003.5 - 1.0
}

/// `n_clusters` clusters of `size` observations with a random intercept
/// and `r - 1` random slopes.
pub fn design(n_clusters: usize, size: usize, r: usize) -> Vec<(DMatrix<f64>, DMatrix<f64>)> {
    (0..n_clusters)
        .map(|i| {
            let x = DMatrix::from_fn(size, 1, |j, _| wiggle(i, j, 1));
            let u = DMatrix::from_fn(size, r, |j, k| if k == 0 { 1.0 } else { wiggle(i, j, 2 + k) });
            (x, u)
        })
        .collect()
}

pub fn params(r: usize) -> ParameterVector {
    let mut gamma = Vec::new();
    for row in 0..r {
        for col in 0..=row {
            gamma.push(if row == col { 0.8 } else { 0.2 });
        }
    }
    ParameterVector::new(vec![1.2, 0.1], vec![0.5], gamma)
}

pub fn spec(link: LinkFamily, r: usize) -> ModelSpec {
    ModelSpec::new(TransformationBasis::linear(), link, Marginalization::M2, 1, r)
}

pub fn exact_clusters(n_clusters: usize, size: usize, r: usize) -> Vec<ClusterData> {
    design(n_clusters, size, r)
        .into_iter()
        .enumerate()
        .map(|(i, (x, u))| {
            let y = (0..size).map(|j| 2.0 * wiggle(i, j, 50)).collect();
            ClusterData::exact(i.to_string(), y, x, u)
        })
        .collect()
}

/// Unit-width intervals, every fourth one right-censored.
pub fn interval_clusters(n_clusters: usize, size: usize, r: usize) -> Vec<ClusterData> {
    design(n_clusters, size, r)
        .into_iter()
        .enumerate()
        .map(|(i, (x, u))| {
            let lower: Vec<f64> = (0..size).map(|j| 1.5 * wiggle(i, j, 60)).collect();
            let upper = lower
                .iter()
                .enumerate()
                .map(|(j, l)| if (i + j) % 4 == 0 { f64::INFINITY } else { l + 1.0 })
                .collect();
            ClusterData::interval(i.to_string(), lower, upper, x, u)
        })
        .collect()
}
