//! Augmented-Lagrangian minimization under linear inequality constraints
//! `Kx ≥ k₀`, with a BFGS inner solver.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlOptions {
    pub max_outer: usize,
    pub max_inner: usize,
    /// Stationarity tolerance, relative to `1 + |f|`.
    pub tol: f64,
    /// Maximum constraint violation accepted at the solution.
    pub feas_tol: f64,
}

impl Default for AlOptions {
    fn default() -> Self {
        AlOptions {
            max_outer: 50,
            max_inner: 500,
            tol: 1e-6,
            feas_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlReport {
    pub x: Vec<f64>,
    pub f: f64,
    pub multipliers: Vec<f64>,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    /// Norm of `∇f − Kᵀμ` at `x`.
    pub gradient_norm: f64,
    pub violation: f64,
    pub converged: bool,
    /// Objective at the end of every outer iteration.
    pub history: Vec<f64>,
}

/// Objective `f` returning `None` where it cannot be evaluated, and its
/// gradient.
pub trait Objective {
    fn value(&self, x: &[f64]) -> Option<f64>;
    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>>;
}

fn slack(k: &DMatrix<f64>, k0: &DVector<f64>, x: &[f64]) -> DVector<f64> {
    k * DVector::from_column_slice(x) - k0
}

fn violation(c: &DVector<f64>) -> f64 {
    c.iter().fold(0.0f64, |m, &s| m.max(-s))
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Cyclic projections onto the violated halfspaces of `Kx ≥ k₀ + margin`.
pub fn project_feasible(k: &DMatrix<f64>, k0: &DVector<f64>, x: &[f64], margin: f64) -> Vec<f64> {
    let mut x = DVector::from_column_slice(x);
    for _ in 0..1000 {
        let mut worst = 0.0f64;
        for i in 0..k.nrows() {
            let row = k.row(i).transpose();
            let c = row.dot(&x) - k0[i] - margin;
            if c < 0.0 {
                let nn = row.norm_squared();
                if nn > 0.0 {
                    x -= &row * (c / nn);
                    worst = worst.max(-c);
                }
            }
        }
        if worst == 0.0 {
            break;
        }
    }
    x.iter().copied().collect()
}

struct Penalized<'a, O: Objective> {
    obj: &'a O,
    k: &'a DMatrix<f64>,
    k0: &'a DVector<f64>,
    mu: &'a DVector<f64>,
    rho: f64,
}

impl<O: Objective> Penalized<'_, O> {
    fn shifted(&self, x: &[f64]) -> DVector<f64> {
        let c = slack(self.k, self.k0, x);
        DVector::from_iterator(
            c.len(),
            c.iter().zip(self.mu.iter()).map(|(&c, &m)| (m - self.rho * c).max(0.0)),
        )
    }

    fn value(&self, x: &[f64]) -> Option<f64> {
        let f = self.obj.value(x)?;
        let t = self.shifted(x);
        let pen: f64 = t
            .iter()
            .zip(self.mu.iter())
            .map(|(t, m)| t * t - m * m)
            .sum::<f64>()
            / (2.0 * self.rho);
        let v = f + pen;
        v.is_finite().then_some(v)
    }

    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        let g = DVector::from_vec(self.obj.gradient(x)?);
        let t = self.shifted(x);
        let out = g - self.k.transpose() * t;
        out.iter().all(|v| v.is_finite()).then(|| out.iter().copied().collect())
    }
}

struct InnerResult {
    x: Vec<f64>,
    f: f64,
    iterations: usize,
}

fn bfgs<O: Objective>(p: &Penalized<'_, O>, x0: Vec<f64>, max_iter: usize, tol: f64) -> Option<InnerResult> {
    let n = x0.len();
    let mut x = DVector::from_vec(x0);
    let mut f = p.value(x.as_slice())?;
    let mut g = DVector::from_vec(p.gradient(x.as_slice())?);
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut scaled = false;
    let mut iterations = 0;
    let mut stalls = 0;
    while iterations < max_iter {
        if inf_norm(g.as_slice()) <= tol * (1.0 + f.abs()) {
            break;
        }
        let mut d = -(&h * &g);
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            h = DMatrix::identity(n, n);
            d = -g.clone();
            slope = g.dot(&d);
        }
        let mut step = if scaled { 1.0 } else { (1.0 / inf_norm(g.as_slice())).min(1.0) };
        let mut accepted = None;
        for _ in 0..80 {
            let trial = &x + &d * step;
            if let Some(ft) = p.value(trial.as_slice()) {
                if ft <= f + 1e-4 * step * slope {
                    accepted = Some((trial, ft));
                    break;
                }
            }
            step *= 0.5;
        }
        iterations += 1;
        let Some((xn, fn_)) = accepted else {
            break;
        };
        let Some(gn) = p.gradient(xn.as_slice()).map(DVector::from_vec) else {
            break;
        };
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if !scaled {
                h *= sy / y.norm_squared();
                scaled = true;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H ← (I − ρsyᵀ)H(I − ρysᵀ) + ρssᵀ
            h += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        let progress = f - fn_;
        x = xn;
        g = gn;
        f = fn_;
        if progress <= 1e-15 * (1.0 + f.abs()) {
            stalls += 1;
            if stalls >= 3 {
                break;
            }
        } else {
            stalls = 0;
        }
    }
    Some(InnerResult {
        x: x.iter().copied().collect(),
        f,
        iterations,
    })
}

/// Minimize `obj` subject to `Kx ≥ k₀`, starting from `x0`.
pub fn minimize<O: Objective>(
    obj: &O,
    k: &DMatrix<f64>,
    k0: &DVector<f64>,
    x0: &[f64],
    opts: &AlOptions,
) -> AlReport {
    let m = k.nrows();
    let mut mu = DVector::zeros(m);
    let mut rho = 10.0;
    let mut x = x0.to_vec();
    let mut inner_total = 0;
    let mut history = Vec::new();
    let mut last_violation = f64::INFINITY;
    let mut outer = 0;

    while outer < opts.max_outer {
        outer += 1;
        let pen = Penalized { obj, k, k0, mu: &mu, rho };
        let Some(inner) = bfgs(&pen, x.clone(), opts.max_inner, opts.tol) else {
            break;
        };
        inner_total += inner.iterations;
        x = inner.x;
        history.push(inner.f);
        let c = slack(k, k0, &x);
        for i in 0..m {
            mu[i] = (mu[i] - rho * c[i]).max(0.0);
        }
        let viol = violation(&c);
        // complementarity-aware infeasibility measure
        let measure = c
            .iter()
            .zip(mu.iter())
            .fold(0.0f64, |acc, (&ci, &mi)| acc.max(ci.min(mi / rho).abs()));
        if viol <= opts.feas_tol && stationarity(obj, k, &mu, &x).is_some_and(|(g, f)| g <= opts.tol * (1.0 + f.abs())) {
            break;
        }
        if measure > 0.25 * last_violation {
            rho = (rho * 10.0).min(1e12);
        }
        last_violation = measure;
    }

    // put rows with positive multipliers exactly on their boundary, then
    // repair any residual infeasibility
    let c = slack(k, k0, &x);
    let mut xv = DVector::from_vec(x);
    for i in 0..m {
        if mu[i] > 0.0 && c[i].abs() < 1e-5 {
            let row = k.row(i).transpose();
            let nn = row.norm_squared();
            if nn > 0.0 {
                let ci = row.dot(&xv) - k0[i];
                xv -= &row * (ci / nn);
            }
        }
    }
    let mut x: Vec<f64> = xv.iter().copied().collect();
    if violation(&slack(k, k0, &x)) > 0.0 {
        x = project_feasible(k, k0, &x, 0.0);
    }
    let viol = violation(&slack(k, k0, &x));
    let (gnorm, f) = stationarity(obj, k, &mu, &x).unwrap_or((f64::INFINITY, f64::NAN));
    let converged = viol <= opts.feas_tol && gnorm <= opts.tol * (1.0 + f.abs());
    AlReport {
        x,
        f,
        multipliers: mu.iter().copied().collect(),
        outer_iterations: outer,
        inner_iterations: inner_total,
        gradient_norm: gnorm,
        violation: viol,
        converged,
        history,
    }
}

/// `‖∇f − Kᵀμ‖∞` and `f` at `x`.
fn stationarity<O: Objective>(obj: &O, k: &DMatrix<f64>, mu: &DVector<f64>, x: &[f64]) -> Option<(f64, f64)> {
    let f = obj.value(x)?;
    let g = DVector::from_vec(obj.gradient(x)?);
    let lg = g - k.transpose() * mu;
    Some((inf_norm(lg.as_slice()), f))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic {
        center: Vec<f64>,
        scale: Vec<f64>,
    }

    impl Objective for Quadratic {
        fn value(&self, x: &[f64]) -> Option<f64> {
            Some(x.iter().zip(&self.center).zip(&self.scale).map(|((x, c), s)| s * (x - c).powi(2)).sum())
        }

        fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
            Some(x.iter().zip(&self.center).zip(&self.scale).map(|((x, c), s)| 2.0 * s * (x - c)).collect())
        }
    }

    struct Rosenbrock;

    impl Objective for Rosenbrock {
        fn value(&self, x: &[f64]) -> Option<f64> {
            Some(100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2))
        }

        fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
            Some(vec![
                -400.0 * x[0] * (x[1] - x[0] * x[0]) - 2.0 * (1.0 - x[0]),
                200.0 * (x[1] - x[0] * x[0]),
            ])
        }
    }

    #[test]
    fn unconstrained_rosenbrock() {
        let k = DMatrix::zeros(0, 2);
        let r = minimize(&Rosenbrock, &k, &DVector::zeros(0), &[-1.2, 1.0], &AlOptions::default());
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5, "{:?}", r.x);
    }

    #[test]
    fn active_bound_is_hit_exactly() {
        let obj = Quadratic {
            center: vec![-2.0, 1.0],
            scale: vec![3.0, 1.0],
        };
        let k = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let k0 = DVector::from_element(1, 0.0);
        let r = minimize(&obj, &k, &k0, &[1.0, 0.0], &AlOptions::default());
        assert!(r.converged, "{r:?}");
        assert!(r.x[0] >= 0.0 && r.x[0] < 1e-8, "{:?}", r);
        assert!((r.x[1] - 1.0).abs() < 1e-6);
        assert!((r.multipliers[0] - 12.0).abs() < 1e-3);
    }

    #[test]
    fn ordered_constraints() {
        // minimize ‖x − c‖² subject to x₁ ≤ x₂ ≤ x₃ with c out of order
        let obj = Quadratic {
            center: vec![1.0, 0.0, 2.0],
            scale: vec![1.0; 3],
        };
        let k = DMatrix::from_row_slice(2, 3, &[-1.0, 1.0, 0.0, 0.0, -1.0, 1.0]);
        let k0 = DVector::zeros(2);
        let r = minimize(&obj, &k, &k0, &[0.0, 1.0, 2.0], &AlOptions::default());
        assert!(r.converged);
        assert!((r.x[0] - 0.5).abs() < 1e-6 && (r.x[1] - 0.5).abs() < 1e-6 && (r.x[2] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn projection_restores_feasibility() {
        let k = DMatrix::from_row_slice(2, 3, &[-1.0, 1.0, 0.0, 0.0, -1.0, 1.0]);
        let k0 = DVector::from_element(2, 1e-3);
        let x = project_feasible(&k, &k0, &[3.0, 1.0, 0.0], 0.0);
        assert!(violation(&slack(&k, &k0, &x)) < 1e-12);
    }

    #[test]
    fn restart_at_optimum_needs_no_work() {
        let k = DMatrix::zeros(0, 2);
        let opts = AlOptions::default();
        let r = minimize(&Rosenbrock, &k, &DVector::zeros(0), &[-1.2, 1.0], &opts);
        let again = minimize(&Rosenbrock, &k, &DVector::zeros(0), &r.x, &opts);
        assert!(again.inner_iterations <= 2);
    }
}
