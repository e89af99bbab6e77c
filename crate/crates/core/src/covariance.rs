//! Structured covariance algebra for `Σᵢ = UᵢΛΛᵀUᵢᵀ + I`.
//!
//! `γ` packs the lower triangle of `Λ` row by row:
//! `(Λ₁₁, Λ₂₁, Λ₂₂, Λ₃₁, Λ₃₂, Λ₃₃, …)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Cluster sizes above this use the rank-R factorization of `Σᵢ`.
pub const STRUCTURED_THRESHOLD: usize = 50;

/// Number of variance parameters `M = R(R+1)/2`.
pub fn packed_len(r: usize) -> usize {
    r * (r + 1) / 2
}

/// Position of `Λ_{row,col}` (col ≤ row) inside the packed vector.
#[inline]
pub fn packed_index(row: usize, col: usize) -> usize {
    row * (row + 1) / 2 + col
}

/// Packed positions of the diagonal of `Λ`.
pub fn diagonal_positions(r: usize) -> Vec<usize> {
    (0..r).map(|i| packed_index(i, i)).collect()
}

/// `(row, col)` of every packed position, in packing order.
pub fn packed_coordinates(r: usize) -> Vec<(usize, usize)> {
    (0..r).flat_map(|i| (0..=i).map(move |j| (i, j))).collect()
}

/// `Λ(γ)`, validating the packing length and `Diag(Λ) ≥ 0`.
pub fn build_lambda(gamma: &[f64], r: usize) -> Result<DMatrix<f64>> {
    if gamma.len() != packed_len(r) {
        return Err(Error::Dimension(format!(
            "gamma has length {} but R = {r} needs {}",
            gamma.len(),
            packed_len(r)
        )));
    }
    for (k, &pos) in diagonal_positions(r).iter().enumerate() {
        if gamma[pos] < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "diagonal entry {k} of Lambda is negative ({})",
                gamma[pos]
            )));
        }
    }
    Ok(lambda_from_packed(gamma, r))
}

/// `Λ(γ)` without the sign check. The likelihood is defined for any real `γ`
/// (only `ΛΛᵀ` enters), which the optimizer relies on between feasibility
/// corrections.
pub fn lambda_from_packed(gamma: &[f64], r: usize) -> DMatrix<f64> {
    let mut lambda = DMatrix::zeros(r, r);
    for (k, (i, j)) in packed_coordinates(r).into_iter().enumerate() {
        lambda[(i, j)] = gamma[k];
    }
    lambda
}

pub fn sigma_i(lambda: &DMatrix<f64>, u: &DMatrix<f64>) -> DMatrix<f64> {
    let v = u * lambda;
    let n = u.nrows();
    &v * v.transpose() + DMatrix::identity(n, n)
}

/// Dense Cholesky factor `L` with `LLᵀ = Σ`.
pub fn cholesky_i(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Cholesky::new(sigma.clone())
        .map(|c| c.l())
        .ok_or(Error::NotPositiveDefinite)
}

/// Cholesky factor of `I + VVᵀ` by successive rank-one updates of the
/// identity, `O(N²R)` instead of `O(N³)`.
pub fn cholesky_low_rank(v: &DMatrix<f64>) -> DMatrix<f64> {
    let n = v.nrows();
    let mut l = DMatrix::<f64>::identity(n, n);
    let mut x = vec![0.0; n];
    for col in v.column_iter() {
        x.iter_mut().zip(col.iter()).for_each(|(a, b)| *a = *b);
        for k in 0..n {
            let lkk = l[(k, k)];
            let r = lkk.hypot(x[k]);
            let c = r / lkk;
            let s = x[k] / lkk;
            l[(k, k)] = r;
            for i in (k + 1)..n {
                let lik = (l[(i, k)] + s * x[i]) / c;
                x[i] = c * x[i] - s * lik;
                l[(i, k)] = lik;
            }
        }
    }
    l
}

/// Factorization of one cluster's `Σᵢ`, dense or through the rank-R
/// structure, offering the quantities the likelihood needs without ever
/// forming `Σᵢ⁻¹`.
#[derive(Debug, Clone)]
pub enum ClusterFactor {
    Dense(Cholesky<f64, Dyn>),
    /// `Σ = I + VVᵀ`; `inner` factors `I_R + VᵀV`.
    LowRank {
        v: DMatrix<f64>,
        inner: Cholesky<f64, Dyn>,
    },
}

impl ClusterFactor {
    pub fn new(lambda: &DMatrix<f64>, u: &DMatrix<f64>) -> Result<Self> {
        if u.nrows() > STRUCTURED_THRESHOLD {
            Self::low_rank(lambda, u)
        } else {
            Self::dense(lambda, u)
        }
    }

    pub fn dense(lambda: &DMatrix<f64>, u: &DMatrix<f64>) -> Result<Self> {
        Cholesky::new(sigma_i(lambda, u))
            .map(ClusterFactor::Dense)
            .ok_or(Error::NotPositiveDefinite)
    }

    pub fn low_rank(lambda: &DMatrix<f64>, u: &DMatrix<f64>) -> Result<Self> {
        let v = u * lambda;
        let r = v.ncols();
        let small = v.transpose() * &v + DMatrix::identity(r, r);
        let inner = Cholesky::new(small).ok_or(Error::NotPositiveDefinite)?;
        Ok(ClusterFactor::LowRank { v, inner })
    }

    /// `log|Σ|`.
    pub fn log_det(&self) -> f64 {
        let l = match self {
            ClusterFactor::Dense(c) => c.l_dirty(),
            ClusterFactor::LowRank { inner, .. } => inner.l_dirty(),
        };
        2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `‖L⁻¹z‖² = zᵀΣ⁻¹z` via triangular solves.
    pub fn quad_form(&self, z: &DVector<f64>) -> f64 {
        match self {
            ClusterFactor::Dense(c) => {
                let w = c
                    .l_dirty()
                    .solve_lower_triangular(z)
                    .expect("Cholesky factor has a positive diagonal");
                w.norm_squared()
            }
            ClusterFactor::LowRank { v, inner } => {
                let vz = v.transpose() * z;
                let w = inner
                    .l_dirty()
                    .solve_lower_triangular(&vz)
                    .expect("Cholesky factor has a positive diagonal");
                z.norm_squared() - w.norm_squared()
            }
        }
    }

    /// `Σ⁻¹B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            ClusterFactor::Dense(c) => c.solve(b),
            ClusterFactor::LowRank { v, inner } => {
                let vtb = v.transpose() * b;
                b - v * inner.solve(&vtb)
            }
        }
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            ClusterFactor::Dense(c) => c.solve(b),
            ClusterFactor::LowRank { v, inner } => {
                let vtb = v.transpose() * b;
                b - v * inner.solve(&vtb)
            }
        }
    }
}

/// Factors of the unit-cube integrand: `V = D^{-1/2}UΛ` and `d = diag(D⁻¹)`
/// with `D = diag(Σ)` when `standardize` is set, otherwise `V = UΛ`, `d = 1`.
pub fn reduction_factors(
    lambda: &DMatrix<f64>,
    u: &DMatrix<f64>,
    standardize: bool,
) -> (DMatrix<f64>, DVector<f64>) {
    let mut v = u * lambda;
    let n = v.nrows();
    if !standardize {
        return (v, DVector::from_element(n, 1.0));
    }
    let mut d = DVector::zeros(n);
    for (i, mut row) in v.row_iter_mut().enumerate() {
        let var = row.norm_squared() + 1.0;
        d[i] = 1.0 / var;
        row /= var.sqrt();
    }
    (v, d)
}
