//! The linear map `S1`: frozen compositions `ũ` and the previous step `u^p`
//! determine the entropy variables `w̄` through the coercive problem
//!
//! ```text
//! -(1/τ) ⟨ũ - u^p, φ⟩ = ∫ ∇φ · (G(ũ) + H(ũ)) ∇w̄ + τ ⟨φ, w̄⟩_{H²}   for all φ.
//! ```
//!
//! Stacked vectors are interleaved by cell: entry `c * n + s` is species
//! `s + 1` in cell `c`.

use nalgebra::DMatrix;
use sprs::{CsMat, TriMat};

use crate::error::{Error, Result};
use crate::grid::{h2_values, Grid, ScalarField};
use crate::linalg::{self, matvec, SolveInfo};
use crate::model::{CompositionField, Interactions, ModelParams};

/// `w̄_1, ..., w̄_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyVariables {
    fields: Vec<ScalarField>,
}

impl EntropyVariables {
    pub fn new(fields: Vec<ScalarField>) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::invalid("wbar", "need at least one field"));
        }
        let grid = *fields[0].grid();
        if fields.iter().any(|f| *f.grid() != grid) {
            return Err(Error::GridMismatch("entropy variables on different grids".into()));
        }
        Ok(EntropyVariables { fields })
    }

    pub fn zeros(grid: Grid, n: usize) -> Self {
        EntropyVariables {
            fields: vec![ScalarField::constant(grid, 0.0); n],
        }
    }

    pub fn from_reduced(grid: Grid, n: usize, x: &[f64]) -> Self {
        let cells = grid.cell_count();
        let fields = (0..n)
            .map(|s| ScalarField::from_raw(grid, (0..cells).map(|c| x[c * n + s]).collect()))
            .collect();
        EntropyVariables { fields }
    }

    pub fn reduced(&self) -> Vec<f64> {
        let n = self.fields.len();
        let cells = self.grid().cell_count();
        let mut x = vec![0.0; cells * n];
        for (s, f) in self.fields.iter().enumerate() {
            for (c, v) in f.values().iter().enumerate() {
                x[c * n + s] = *v;
            }
        }
        x
    }

    pub fn grid(&self) -> &Grid {
        self.fields[0].grid()
    }

    pub fn fields(&self) -> &[ScalarField] {
        &self.fields
    }

    pub fn n(&self) -> usize {
        self.fields.len()
    }

    /// `Σ_i ‖w̄_i‖²_{H²}`
    pub fn h2_norm_squared(&self) -> f64 {
        let grid = self.grid();
        self.fields.iter().map(|f| h2_values(grid, f.values(), f.values())).sum()
    }

    pub fn h2_norm(&self) -> f64 {
        self.h2_norm_squared().sqrt()
    }
}

/// Stacked discrete operators for `n` interleaved components on one grid.
#[derive(Debug, Clone)]
pub struct StackedOps {
    pub grid: Grid,
    pub n: usize,
    pub grad: CsMat<f64>,
    pub grad_t: CsMat<f64>,
    /// `-Δ_h` per component.
    pub neg_lap: CsMat<f64>,
    /// Riesz matrix of the discrete H² product: `I - Δ_h + Δ_h²`.
    pub h2: CsMat<f64>,
}

impl StackedOps {
    pub fn new(grid: Grid, n: usize) -> Self {
        let grad = grid.gradient_matrix(n);
        let grad_t: CsMat<f64> = grad.transpose_view().to_csr();
        let neg_lap = &grad_t * &grad;
        let id: CsMat<f64> = CsMat::eye(grid.cell_count() * n);
        let h2 = &(&id + &neg_lap) + &(&neg_lap * &neg_lap);
        StackedOps {
            grid,
            n,
            grad,
            grad_t,
            neg_lap,
            h2,
        }
    }

    /// `∇ᵀ C_f ∇ + τ (I - Δ + Δ²)` for per-face coefficient blocks `C_f`.
    pub fn operator(&self, face_blocks: &CsMat<f64>, tau: f64) -> CsMat<f64> {
        let flux = &self.grad_t * &(face_blocks * &self.grad);
        &flux + &self.h2.map(|v| tau * v)
    }
}

/// Per-cell `G(ũ)` (n x n, row-major) and the diagonal of `H(ũ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GhCoefficients {
    n: usize,
    g: Vec<f64>,
    h: Vec<f64>,
}

impl GhCoefficients {
    /// From interleaved `ũ_1..ũ_n`.
    pub fn from_reduced(x: &[f64], n: usize, k: &Interactions) -> Self {
        let cells = x.len() / n;
        let mut g = vec![0.0; cells * n * n];
        let mut h = vec![0.0; cells * n];
        for c in 0..cells {
            let u = &x[c * n..(c + 1) * n];
            let u0 = 1.0 - u.iter().sum::<f64>();
            let block = &mut g[c * n * n..(c + 1) * n * n];
            for s in 0..n {
                for t in 0..n {
                    if s != t {
                        let v = k.get(s + 1, t + 1) * u[s] * u[t];
                        block[s * n + t] = -v;
                        block[s * n + s] += v;
                    }
                }
                h[c * n + s] = k.get(s + 1, 0) * u[s] * u0;
            }
        }
        GhCoefficients { n, g, h }
    }

    pub fn g(&self, c: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.g[c * self.n * self.n..(c + 1) * self.n * self.n])
    }

    pub fn h(&self, c: usize) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.h[c * self.n..(c + 1) * self.n]))
    }

    pub fn combined(&self, c: usize) -> DMatrix<f64> {
        self.g(c) + self.h(c)
    }

    /// Block-diagonal matrix of arithmetic face averages of `G + H`.
    pub fn face_blocks(&self, grid: &Grid) -> CsMat<f64> {
        let n = self.n;
        let faces = grid.face_count();
        let mut t = TriMat::with_capacity((faces * n, faces * n), faces * n * n);
        for (f, (l, r)) in grid.faces().enumerate() {
            for s in 0..n {
                for q in 0..n {
                    let mut v = 0.5 * (self.g[l * n * n + s * n + q] + self.g[r * n * n + s * n + q]);
                    if s == q {
                        v += 0.5 * (self.h[l * n + s] + self.h[r * n + s]);
                    }
                    if v != 0.0 {
                        t.add_triplet(f * n + s, f * n + q, v);
                    }
                }
            }
        }
        t.to_csr()
    }
}

/// Assembled `A w̄ = b`. Both sides are in density form: the L² pairing of
/// `Aφ` with `ψ` is `h^d φᵀ A ψ`, the bilinear form of the weak problem.
#[derive(Debug, Clone)]
pub struct S1System {
    grid: Grid,
    n: usize,
    tau: f64,
    operator: CsMat<f64>,
    rhs: Vec<f64>,
    coefficients: GhCoefficients,
}

fn check_unit_interval(u: &CompositionField, name: &str) -> Result<()> {
    for (i, f) in u.fractions().iter().enumerate() {
        if f.min() < 0.0 || f.max() > 1.0 {
            return Err(Error::domain(format!(
                "{name}: species {i} leaves [0, 1] (range {:e}..{:e})",
                f.min(),
                f.max()
            )));
        }
    }
    Ok(())
}

pub fn assemble_s1(u_tilde: &CompositionField, u_prev: &CompositionField, params: &ModelParams) -> Result<S1System> {
    let ops = StackedOps::new(*u_tilde.grid(), params.n);
    assemble_s1_with(&ops, u_tilde, u_prev, params)
}

pub fn assemble_s1_with(
    ops: &StackedOps,
    u_tilde: &CompositionField,
    u_prev: &CompositionField,
    params: &ModelParams,
) -> Result<S1System> {
    if u_tilde.grid() != u_prev.grid() || *u_tilde.grid() != ops.grid {
        return Err(Error::GridMismatch("u_tilde and u_prev".into()));
    }
    if u_tilde.n() != params.n || u_prev.n() != params.n || ops.n != params.n {
        return Err(Error::invalid("n", "species count differs from the model"));
    }
    check_unit_interval(u_tilde, "u_tilde")?;
    check_unit_interval(u_prev, "u_prev")?;
    let xt = u_tilde.reduced();
    let xp = u_prev.reduced();
    let coefficients = GhCoefficients::from_reduced(&xt, params.n, &params.k);
    let operator = ops.operator(&coefficients.face_blocks(&ops.grid), params.tau);
    let rhs = xt.iter().zip(&xp).map(|(a, b)| -(a - b) / params.tau).collect();
    Ok(S1System {
        grid: ops.grid,
        n: params.n,
        tau: params.tau,
        operator,
        rhs,
        coefficients,
    })
}

impl S1System {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn operator(&self) -> &CsMat<f64> {
        &self.operator
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn rhs_fields(&self) -> EntropyVariables {
        EntropyVariables::from_reduced(self.grid, self.n, &self.rhs)
    }

    pub fn coefficients(&self) -> &GhCoefficients {
        &self.coefficients
    }

    pub fn apply(&self, phi: &EntropyVariables) -> EntropyVariables {
        EntropyVariables::from_reduced(self.grid, self.n, &matvec(&self.operator, &phi.reduced()))
    }

    /// `⟨Aφ, ψ⟩_{L²}`
    pub fn bilinear(&self, phi: &EntropyVariables, psi: &EntropyVariables) -> f64 {
        let a = matvec(&self.operator, &phi.reduced());
        linalg::dot(&a, &psi.reduced()) * self.grid.cell_volume()
    }
}

#[derive(Debug, Clone)]
pub struct S1Solution {
    pub wbar: EntropyVariables,
    pub iterations: usize,
    pub relative_residual: f64,
    pub dense: bool,
}

/// Default relative residual for the S1 solve.
pub const S1_TOL: f64 = 1e-10;

pub fn solve_s1(sys: &S1System, tol: f64) -> Result<S1Solution> {
    solve_s1_from(sys, tol, None)
}

pub fn solve_s1_from(sys: &S1System, tol: f64, guess: Option<&EntropyVariables>) -> Result<S1Solution> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tol", "must be positive"));
    }
    let x0 = guess.map(EntropyVariables::reduced);
    let size = sys.rhs.len();
    let SolveInfo {
        x,
        iterations,
        relative_residual,
        dense,
    } = linalg::solve_spd(&sys.operator, &sys.rhs, x0.as_deref(), tol, 20 * size.max(50))?;
    Ok(S1Solution {
        wbar: EntropyVariables::from_reduced(sys.grid, sys.n, &x),
        iterations,
        relative_residual,
        dense,
    })
}

/// Upper bound `2 √(n |Ω|) / τ²` on `‖w̄‖_{(H²)^n}`.
pub fn a_priori_bound(grid: &Grid, n: usize, tau: f64) -> f64 {
    2.0 * (n as f64 * grid.measure()).sqrt() / (tau * tau)
}
