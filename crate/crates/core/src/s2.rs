//! The nonlinear map `S2`: minimize
//!
//! ```text
//! F(v) = ∫ Σ_{i=0}^n v_i ln v_i + ε/2 |∇v_0|² - Σ_{i=1}^n v_i f_i
//! ```
//!
//! over compositions, with `f_i = w̄_i + β (1 - 2 u_0^p)`. The unknowns are
//! the interleaved reduced fractions `v_1..v_n`; `v_0 = 1 - Σ v_i` closes the
//! simplex exactly, and the entropy terms keep Newton iterates interior.

use sprs::{CsMat, TriMat};

use crate::error::{Error, MinimizerFailure, Result};
use crate::grid::{Grid, ScalarField};
use crate::linalg;
use crate::model::{CompositionField, ModelParams};
use crate::s1::EntropyVariables;

#[derive(Debug, Clone, PartialEq)]
pub struct S2Problem {
    grid: Grid,
    n: usize,
    eps: f64,
    /// Interleaved forcing `f[c * n + s]`.
    forcing: Vec<f64>,
}

impl S2Problem {
    /// `f_i = w̄_i + β (1 - 2 u_0^p)`.
    pub fn new(wbar: &EntropyVariables, u_prev: &CompositionField, params: &ModelParams) -> Result<Self> {
        if wbar.grid() != u_prev.grid() {
            return Err(Error::GridMismatch("wbar and u_prev".into()));
        }
        let n = params.n;
        if wbar.n() != n || u_prev.n() != n {
            return Err(Error::invalid("n", "species count differs from the model"));
        }
        let u0 = u_prev.species(0).values();
        let mut forcing = wbar.reduced();
        for (c, chunk) in forcing.chunks_mut(n).enumerate() {
            let shift = params.beta * (1.0 - 2.0 * u0[c]);
            chunk.iter_mut().for_each(|v| *v += shift);
        }
        Self::from_forcing(*wbar.grid(), n, params.eps, forcing)
    }

    pub fn from_forcing(grid: Grid, n: usize, eps: f64, forcing: Vec<f64>) -> Result<Self> {
        if forcing.len() != grid.cell_count() * n {
            return Err(Error::invalid("forcing", "length must be cells * n"));
        }
        if forcing.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("forcing must be finite"));
        }
        if !(eps >= 0.0) {
            return Err(Error::invalid("eps", "must be nonnegative"));
        }
        Ok(S2Problem { grid, n, eps, forcing })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn forcing(&self) -> &[f64] {
        &self.forcing
    }

    fn check(&self, v: &CompositionField) -> Result<()> {
        if *v.grid() != self.grid || v.n() != self.n {
            return Err(Error::GridMismatch("composition does not match the problem".into()));
        }
        Ok(())
    }
}

fn xlnx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

pub fn objective_f(v: &CompositionField, prob: &S2Problem) -> Result<f64> {
    prob.check(v)?;
    let min = v.min_fraction();
    if min < 0.0 {
        return Err(Error::domain(format!("negative volume fraction {min:e}")));
    }
    Ok(objective_reduced(&prob.grid, prob.n, prob.eps, &prob.forcing, &v.reduced()))
}

fn objective_reduced(grid: &Grid, n: usize, eps: f64, forcing: &[f64], x: &[f64]) -> f64 {
    let mut acc = 0.0;
    let mut u0 = Vec::with_capacity(grid.cell_count());
    for (cell, f) in x.chunks(n).zip(forcing.chunks(n)) {
        let v0 = 1.0 - cell.iter().sum::<f64>();
        u0.push(v0);
        acc += xlnx(v0);
        for (v, fi) in cell.iter().zip(f) {
            acc += xlnx(*v) - v * fi;
        }
    }
    let g = grid.gradient_values(&u0);
    acc * grid.cell_volume() + 0.5 * eps * grid.dot_faces(&g, &g)
}

/// `ln v_i - ln v_0 + ε Δ_h v_0 - f_i`, interleaved; the L² gradient of `F`.
fn gradient_reduced(grid: &Grid, n: usize, eps: f64, forcing: &[f64], x: &[f64]) -> Vec<f64> {
    let u0: Vec<f64> = x.chunks(n).map(|c| 1.0 - c.iter().sum::<f64>()).collect();
    let lap = grid.laplacian_values(&u0);
    let mut g = vec![0.0; x.len()];
    for c in 0..u0.len() {
        let base = u0[c].ln() - eps * lap[c];
        for s in 0..n {
            let k = c * n + s;
            g[k] = x[k].ln() - base - forcing[k];
        }
    }
    g
}

fn check_positive(v: &CompositionField) -> Result<()> {
    let min = v.min_fraction();
    if !(min > 0.0) {
        return Err(Error::domain(format!("fractions must be strictly positive, min is {min:e}")));
    }
    Ok(())
}

pub fn grad_f(v: &CompositionField, prob: &S2Problem) -> Result<Vec<ScalarField>> {
    prob.check(v)?;
    check_positive(v)?;
    let g = gradient_reduced(&prob.grid, prob.n, prob.eps, &prob.forcing, &v.reduced());
    Ok(EntropyVariables::from_reduced(prob.grid, prob.n, &g).fields().to_vec())
}

/// Sup norm of the discrete Euler-Lagrange defect
/// `ln u_i - ln u_0 + ε Δ_h u_0 - f_i`.
pub fn optimality_residual(u: &CompositionField, prob: &S2Problem) -> Result<f64> {
    prob.check(u)?;
    check_positive(u)?;
    let g = gradient_reduced(&prob.grid, prob.n, prob.eps, &prob.forcing, &u.reduced());
    Ok(linalg::norm_inf(&g))
}

/// Hessian of `F` in density form: per cell `diag(1/v_i) + 11ᵀ/v_0`, plus
/// `ε (-Δ_h)` coupling every pair of species through `v_0`.
fn hessian(grid: &Grid, n: usize, eps: f64, neg_lap: &CsMat<f64>, x: &[f64]) -> CsMat<f64> {
    let cells = grid.cell_count();
    let mut t = TriMat::with_capacity((cells * n, cells * n), cells * n * n + neg_lap.nnz() * n * n);
    for c in 0..cells {
        let cell = &x[c * n..(c + 1) * n];
        let inv0 = 1.0 / (1.0 - cell.iter().sum::<f64>());
        for s in 0..n {
            for q in 0..n {
                let mut v = inv0;
                if s == q {
                    v += 1.0 / cell[s];
                }
                t.add_triplet(c * n + s, c * n + q, v);
            }
        }
    }
    if eps > 0.0 {
        for (v, (a, b)) in neg_lap.iter() {
            for s in 0..n {
                for q in 0..n {
                    t.add_triplet(a * n + s, b * n + q, eps * v);
                }
            }
        }
    }
    t.to_csr()
}

#[derive(Debug, Clone, Copy)]
pub struct S2Options {
    /// Target sup norm of the optimality residual.
    pub tol: f64,
    pub max_iter: usize,
    /// Relative residual for the Newton systems.
    pub linear_tol: f64,
}

impl Default for S2Options {
    fn default() -> Self {
        S2Options {
            tol: 1e-9,
            max_iter: 200,
            linear_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct S2Solution {
    pub u: CompositionField,
    /// Smallest fraction over cells and species, `u_0` included.
    pub delta_observed: f64,
    pub residual: f64,
    pub iterations: usize,
    /// Objective after each accepted iterate, starting with `v_init`.
    pub objective: Vec<f64>,
}

/// Smallest admissible starting floor.
pub const INIT_FLOOR: f64 = 1e-10;

/// Largest `α ≤ 1` keeping every fraction above 1% of its current value.
fn fraction_to_boundary(x: &[f64], d: &[f64], n: usize) -> f64 {
    let mut alpha = 1.0f64;
    for (cell, dc) in x.chunks(n).zip(d.chunks(n)) {
        let v0 = 1.0 - cell.iter().sum::<f64>();
        let d0 = -dc.iter().sum::<f64>();
        for (v, dv) in cell.iter().chain(std::iter::once(&v0)).zip(dc.iter().chain(std::iter::once(&d0))) {
            if *dv < 0.0 {
                alpha = alpha.min(0.99 * v / -dv);
            }
        }
    }
    alpha
}

fn interior(x: &[f64], n: usize) -> bool {
    x.chunks(n)
        .all(|c| c.iter().all(|v| *v > 0.0) && 1.0 - c.iter().sum::<f64>() > 0.0)
}

/// Damped Newton with Armijo backtracking; a preconditioned gradient step
/// replaces Newton whenever the Newton direction fails to descend.
pub fn minimize_f(prob: &S2Problem, v_init: &CompositionField, opts: &S2Options) -> Result<S2Solution> {
    prob.check(v_init)?;
    if !(opts.tol > 0.0) {
        return Err(Error::invalid("tol", "must be positive"));
    }
    if !(v_init.min_fraction() >= INIT_FLOOR) {
        return Err(Error::domain(format!(
            "initial guess must be interior (min fraction {:e} below {INIT_FLOOR:e})",
            v_init.min_fraction()
        )));
    }
    let (grid, n, eps) = (prob.grid, prob.n, prob.eps);
    let f = &prob.forcing;
    let neg_lap = grid.neg_laplacian_matrix(1);
    let vol = grid.cell_volume();

    let mut x = v_init.reduced();
    let mut obj = objective_reduced(&grid, n, eps, f, &x);
    let mut history = vec![obj];
    let mut g = gradient_reduced(&grid, n, eps, f, &x);
    let mut res = linalg::norm_inf(&g);
    let mut it = 0;
    let fail = |x: &[f64], res: f64, it: usize, reason: String| {
        Error::Minimizer(Box::new(MinimizerFailure {
            best: CompositionField::from_reduced(grid, n, x),
            residual: res,
            iterations: it,
            reason,
        }))
    };

    while res > opts.tol {
        if it >= opts.max_iter {
            return Err(fail(&x, res, it, "iteration limit reached".into()));
        }
        it += 1;
        let hess = hessian(&grid, n, eps, &neg_lap, &x);
        let rhs: Vec<f64> = g.iter().map(|v| -v).collect();
        let newton = linalg::solve_spd(&hess, &rhs, None, opts.linear_tol, 10 * x.len().max(50))
            .ok()
            .map(|s| s.x)
            .filter(|d| linalg::dot(d, &g) < 0.0);
        let diag = hess.diag().to_dense();
        let steepest = || -> Vec<f64> { g.iter().zip(diag.iter()).map(|(a, b)| -a / b).collect() };

        let mut accepted = false;
        for dir in [newton, Some(steepest())] {
            let Some(d) = dir else { continue };
            let slope = linalg::dot(&d, &g) * vol;
            let mut alpha = fraction_to_boundary(&x, &d, n);
            // roundoff slack so that converged Newton steps are not rejected
            let slack = 16.0 * f64::EPSILON * (1.0 + obj.abs());
            while alpha > 1e-14 {
                let trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
                if interior(&trial, n) {
                    let t_obj = objective_reduced(&grid, n, eps, f, &trial);
                    if t_obj <= obj + 1e-4 * alpha * slope + slack {
                        x = trial;
                        obj = t_obj.min(obj);
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if accepted {
                break;
            }
        }
        if !accepted {
            return Err(fail(&x, res, it, "line search failed".into()));
        }
        history.push(obj);
        g = gradient_reduced(&grid, n, eps, f, &x);
        res = linalg::norm_inf(&g);
    }

    let u = CompositionField::from_reduced(grid, n, &x);
    Ok(S2Solution {
        delta_observed: u.min_fraction(),
        u,
        residual: res,
        iterations: it,
        objective: history,
    })
}

/// Previous composition clipped to [`INIT_FLOOR`] and renormalized.
pub fn default_start(u_prev: &CompositionField) -> CompositionField {
    if u_prev.min_fraction() >= INIT_FLOOR {
        u_prev.clone()
    } else {
        u_prev.floored(INIT_FLOOR)
    }
}
