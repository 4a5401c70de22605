//! One implicit time step and the outer time loop.
//!
//! A step looks for a fixed point of `S = S2 ∘ S1`. Plain Picard iteration
//! on `S` contracts only when `τ` is large: linearized at an interior state,
//! `S` behaves like `u ↦ u - u(1-u)(u - u^p)/τ²`. The default method instead
//! runs Newton on the equivalent residual
//!
//! ```text
//! R(u) = A(u) W(u) + (u - u^p) / τ,
//! W_i(u) = ln u_i - ln u_0 + ε Δ_h u_0 - β (1 - 2 u_0^p),
//! ```
//!
//! whose zeros are exactly the fixed points of `S` (the minimizer of the
//! convex S2 functional is the unique solution of `W(u) = w̄`). Every accepted
//! step is certified by one explicit application of `S`.

use serde::Serialize;
use sprs::{CsMat, TriMat};

use crate::error::{Error, FixedPointFailure, Result};
use crate::grid::{Grid, ScalarField};
use crate::linalg::{self, matvec, BandLu};
use crate::model::{self, CompositionField, EnergyReport, ModelParams, MonitorRecord, SIMPLEX_TOL};
use crate::s1::{self, EntropyVariables, GhCoefficients, S1System, StackedOps};
use crate::s2::{self, S2Options, S2Problem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FixedPointMethod {
    Newton,
    Picard,
}

impl std::str::FromStr for FixedPointMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "newton" => Ok(FixedPointMethod::Newton),
            "picard" => Ok(FixedPointMethod::Picard),
            other => Err(Error::invalid("method", format!("expected `newton` or `picard`, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepConfig {
    pub method: FixedPointMethod,
    /// Accepted `‖S(u) - u‖_∞`.
    pub tol_fp: f64,
    pub max_iter: usize,
    /// Initial Picard damping.
    pub theta: f64,
    /// Relative residual of the S1 solves.
    pub s1_tol: f64,
    pub s2: S2Options,
    /// Newton stops once the update is below this in sup norm.
    pub newton_tol: f64,
}

impl Default for StepConfig {
    fn default() -> Self {
        StepConfig {
            method: FixedPointMethod::Newton,
            tol_fp: 1e-8,
            max_iter: 50,
            theta: 1.0,
            s1_tol: s1::S1_TOL,
            s2: S2Options::default(),
            newton_tol: 1e-13,
        }
    }
}

impl StepConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tol_fp", self.tol_fp),
            ("s1_tol", self.s1_tol),
            ("s2_tol", self.s2.tol),
            ("newton_tol", self.newton_tol),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, format!("must be positive, got {v}")));
            }
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::invalid("theta", format!("must lie in (0, 1], got {}", self.theta)));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter", "must be at least 1"));
        }
        Ok(())
    }
}

/// Smallest Picard damping reached by auto-halving.
pub const THETA_FLOOR: f64 = 0.25;

#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    pub method: FixedPointMethod,
    /// Newton or Picard iterations used.
    pub iterations: usize,
    /// `‖S(u_next) - u_next‖_∞` from the certifying application of `S`.
    pub fp_gap: f64,
    /// Gap below which the certification cannot resolve, from roundoff in
    /// the regularized solve.
    pub fp_floor: f64,
    /// `E_conv(u^{p+1}) + E_conc(u^p)`.
    pub energy: EnergyReport,
    /// Unlagged `E_conv(u^{p+1}) + E_conc(u^{p+1})`.
    pub energy_full: f64,
    pub monitors: MonitorRecord,
    /// `∫ u_i^{p+1}` for `i = 0..n`.
    pub mass: Vec<f64>,
    /// `∫ (u_i^{p+1} - u_i^p)` for `i = 1..n`.
    pub mass_change: Vec<f64>,
    /// `-τ² ∫ w̄_i^{p+1}` for `i = 1..n`.
    pub predicted_drift: Vec<f64>,
    pub s1_residual: f64,
    pub s2_residual: f64,
    pub s2_iterations: usize,
    pub delta_observed: f64,
}

impl StepReport {
    /// Largest `|∫(u_i^{p+1} - u_i^p) + τ² ∫ w̄_i^{p+1}|`.
    pub fn mass_drift_defect(&self) -> f64 {
        self.mass_change
            .iter()
            .zip(&self.predicted_drift)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub u: CompositionField,
    pub wbar: EntropyVariables,
    pub report: StepReport,
}

/// Reusable operators for one grid and species count.
#[derive(Debug, Clone)]
pub struct Stepper {
    params: ModelParams,
    cfg: StepConfig,
    ops: StackedOps,
    hess_lap: CsMat<f64>,
}

impl Stepper {
    pub fn new(grid: Grid, params: ModelParams, cfg: StepConfig) -> Result<Self> {
        params.validate()?;
        cfg.validate()?;
        let ops = StackedOps::new(grid, params.n);
        let ones = vec![1.0; params.n * params.n];
        let hess_lap = kron_block(&grid.neg_laplacian_matrix(1), params.n, &ones);
        Ok(Stepper {
            params,
            cfg,
            ops,
            hess_lap,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn config(&self) -> &StepConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &Grid {
        &self.ops.grid
    }

    fn check(&self, u: &CompositionField) -> Result<()> {
        if *u.grid() != self.ops.grid || u.n() != self.params.n {
            return Err(Error::GridMismatch("composition does not match the stepper".into()));
        }
        Ok(())
    }

    pub fn step(&self, u_prev: &CompositionField) -> Result<StepOutput> {
        self.check(u_prev)?;
        let (sum_err, min) = u_prev.simplex_defect();
        if min < 0.0 || sum_err > SIMPLEX_TOL {
            return Err(Error::domain(format!(
                "previous state leaves the simplex (sum defect {sum_err:e}, min {min:e})"
            )));
        }
        let (u, iterations) = match self.cfg.method {
            FixedPointMethod::Newton => self.newton(u_prev)?,
            FixedPointMethod::Picard => self.picard(u_prev)?,
        };
        self.certify(u_prev, u, iterations)
    }

    /// `A(u)`.
    fn operator(&self, x: &[f64]) -> CsMat<f64> {
        let coef = GhCoefficients::from_reduced(x, self.params.n, &self.params.k);
        self.ops.operator(&coef.face_blocks(&self.ops.grid), self.params.tau)
    }

    /// `W(u)`, interleaved.
    fn w_map(&self, x: &[f64], u0_prev: &[f64]) -> Vec<f64> {
        let n = self.params.n;
        let grid = &self.ops.grid;
        let u0: Vec<f64> = x.chunks(n).map(|c| 1.0 - c.iter().sum::<f64>()).collect();
        let lap = grid.laplacian_values(&u0);
        let mut w = vec![0.0; x.len()];
        for c in 0..u0.len() {
            let base = u0[c].ln() - self.params.eps * lap[c] + self.params.beta * (1.0 - 2.0 * u0_prev[c]);
            for s in 0..n {
                w[c * n + s] = x[c * n + s].ln() - base;
            }
        }
        w
    }

    fn residual(&self, x: &[f64], xp: &[f64], u0_prev: &[f64]) -> Vec<f64> {
        let a = self.operator(x);
        let w = self.w_map(x, u0_prev);
        let tau = self.params.tau;
        // Compensated: A⁻¹ amplifies residual noise by up to 1/τ when S is
        // applied, so plain f64 accumulation would cap the reachable gap.
        let b: Vec<f64> = x.iter().zip(xp).map(|(u, up)| -(u - up) / tau).collect();
        linalg::residual_compensated(&a, &w, &b).iter().map(|r| -r).collect()
    }

    /// `∂R/∂u = A(u) ∂W/∂u + ∂A/∂u[W] + I/τ`.
    fn jacobian(&self, x: &[f64], u0_prev: &[f64]) -> CsMat<f64> {
        let n = self.params.n;
        let grid = &self.ops.grid;
        let cells = grid.cell_count();
        let a = self.operator(x);
        let w = self.w_map(x, u0_prev);

        // ∂W/∂u: diag(1/u_i) + 11ᵀ/u_0 per cell, plus ε(-Δ_h) ⊗ 11ᵀ
        let mut t = TriMat::with_capacity((cells * n, cells * n), cells * n * n);
        for c in 0..cells {
            let cell = &x[c * n..(c + 1) * n];
            let inv0 = 1.0 / (1.0 - cell.iter().sum::<f64>());
            for s in 0..n {
                for q in 0..n {
                    let v = if s == q { inv0 + 1.0 / cell[s] } else { inv0 };
                    t.add_triplet(c * n + s, c * n + q, v);
                }
            }
        }
        let dw: CsMat<f64> = &t.to_csr() + &self.hess_lap.map(|v| self.params.eps * v);

        // derivative of the face fluxes C_f(u) ∇W with respect to u
        let gw = matvec(&self.ops.grad, &w);
        let k = &self.params.k;
        let mut d = TriMat::with_capacity((grid.face_count() * n, cells * n), grid.face_count() * 2 * n * n);
        for (f, (l, r)) in grid.faces().enumerate() {
            let g = &gw[f * n..(f + 1) * n];
            for cell in [l, r] {
                let u = &x[cell * n..(cell + 1) * n];
                let u0 = 1.0 - u.iter().sum::<f64>();
                for s in 0..n {
                    let ks0 = k.get(s + 1, 0);
                    for m in 0..n {
                        let mut v = -ks0 * u[s] * g[s];
                        if m == s {
                            v += ks0 * u0 * g[s];
                            for q in 0..n {
                                if q != s {
                                    v += k.get(s + 1, q + 1) * u[q] * (g[s] - g[q]);
                                }
                            }
                        } else {
                            v += k.get(s + 1, m + 1) * u[s] * (g[s] - g[m]);
                        }
                        if v != 0.0 {
                            d.add_triplet(f * n + s, cell * n + m, 0.5 * v);
                        }
                    }
                }
            }
        }
        let b = &self.ops.grad_t * &d.to_csr();
        let id: CsMat<f64> = CsMat::eye(cells * n);
        let j = &(&a * &dw) + &b;
        &j + &id.map(|v| v / self.params.tau)
    }

    fn newton(&self, u_prev: &CompositionField) -> Result<(CompositionField, usize)> {
        let n = self.params.n;
        let grid = self.ops.grid;
        let xp = u_prev.reduced();
        let u0p = u_prev.species(0).values().to_vec();
        let mut x = s2::default_start(u_prev).reduced();
        let mut r = self.residual(&x, &xp, &u0p);
        let mut rn = linalg::norm2(&r);
        let fail = |x: &[f64], it: usize, gap: f64| {
            Error::FixedPoint(Box::new(FixedPointFailure {
                best: CompositionField::from_reduced(grid, n, x),
                gap,
                iterations: it,
                suggested_tau: 0.5 * self.params.tau,
            }))
        };
        for it in 1..=self.cfg.max_iter {
            let jac = self.jacobian(&x, &u0p);
            let lu = match BandLu::factor(&jac) {
                Ok(lu) => lu,
                Err(_) => return Err(fail(&x, it, f64::NAN)),
            };
            let delta: Vec<f64> = lu.solve(&r).iter().map(|v| -v).collect();
            let step = linalg::norm_inf(&delta);
            if !step.is_finite() {
                return Err(fail(&x, it, f64::NAN));
            }
            let mut alpha = fraction_to_boundary(&x, &delta, n);
            let mut accepted = false;
            while alpha > 1e-10 {
                let trial: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a + alpha * d).collect();
                let rt = self.residual(&trial, &xp, &u0p);
                let rtn = linalg::norm2(&rt);
                if rtn <= (1.0 - 1e-4 * alpha) * rn || step <= 1e3 * self.cfg.newton_tol {
                    x = trial;
                    r = rt;
                    rn = rtn;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                return Err(fail(&x, it, step));
            }
            if alpha * step <= self.cfg.newton_tol * (1.0 + linalg::norm_inf(&x)) {
                return Ok((CompositionField::from_reduced(grid, n, &x), it));
            }
        }
        Err(fail(&x, self.cfg.max_iter, rn))
    }

    /// One explicit application of `S`, starting S2 from `u`.
    fn apply_s(&self, u_prev: &CompositionField, u: &CompositionField, tol: f64) -> Result<(CompositionField, S1Solve)> {
        let sys = s1::assemble_s1_with(&self.ops, u, u_prev, &self.params)?;
        let sol = solve_direct(&sys, tol)?;
        let prob = S2Problem::new(&sol.wbar, u_prev, &self.params)?;
        let next = s2::minimize_f(&prob, &s2::default_start(u), &self.cfg.s2)?;
        Ok((
            next.u.clone(),
            S1Solve {
                wbar: sol.wbar,
                s1_residual: sol.relative_residual,
                s2_residual: next.residual,
                s2_iterations: next.iterations,
                a_inf: sol.a_inf,
            },
        ))
    }

    fn picard(&self, u_prev: &CompositionField) -> Result<(CompositionField, usize)> {
        let n = self.params.n;
        let grid = self.ops.grid;
        let mut x = s2::default_start(u_prev).reduced();
        let mut theta = self.cfg.theta;
        let mut last_gap = f64::INFINITY;
        let mut best = (x.clone(), f64::INFINITY);
        for it in 1..=self.cfg.max_iter {
            let u = CompositionField::from_reduced(grid, n, &x);
            let (su, _) = self.apply_s(u_prev, &u, self.cfg.s1_tol)?;
            let sx = su.reduced();
            let gap = sx.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if gap < best.1 {
                best = (x.clone(), gap);
            }
            if gap <= self.cfg.tol_fp {
                return Ok((u, it));
            }
            if gap > last_gap {
                theta = (0.5 * theta).max(THETA_FLOOR);
            }
            last_gap = gap;
            x = x.iter().zip(&sx).map(|(a, b)| (1.0 - theta) * a + theta * b).collect();
        }
        Err(Error::FixedPoint(Box::new(FixedPointFailure {
            best: CompositionField::from_reduced(grid, n, &best.0),
            gap: best.1,
            iterations: self.cfg.max_iter,
            suggested_tau: 0.25 * self.params.tau,
        })))
    }

    fn certify(&self, u_prev: &CompositionField, u: CompositionField, iterations: usize) -> Result<StepOutput> {
        let (su, s) = self.apply_s(u_prev, &u, self.cfg.s1_tol)?;
        let fp_gap = su
            .reduced()
            .iter()
            .zip(u.reduced())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let tau = self.params.tau;
        // A backward-stable solve leaves a residual of roughly ε_mach ‖A‖ ‖w̄‖;
        // its constant mode is amplified by 1/τ, and S2 damps it by u(1-u) ≤ 1/4.
        // Separately, A maps constants to τ·constants, so rounding u itself to
        // f64 moves S(u) by up to u(1-u) ε_mach ‖u‖ / τ².
        let w_inf = linalg::norm_inf(&s.wbar.reduced());
        let u_inf = linalg::norm_inf(&u.reduced()).max(u.species(0).max());
        let fp_floor = 0.25 * 64.0 * f64::EPSILON * s.a_inf * w_inf.max(1.0) / tau
            + 0.25 * f64::EPSILON * u_inf / (tau * tau)
            + 0.25 * self.cfg.s1_tol * linalg::norm_inf(&s.wbar.reduced()).max(1.0)
            + self.cfg.s2.tol;
        if !(fp_gap <= self.cfg.tol_fp.max(fp_floor)) {
            return Err(Error::FixedPoint(Box::new(FixedPointFailure {
                best: u,
                gap: fp_gap,
                iterations,
                suggested_tau: 0.5 * tau,
            })));
        }

        let grid = u.grid();
        let mass = u.masses();
        let prev_mass = u_prev.masses();
        let mass_change = (1..=self.params.n).map(|i| mass[i] - prev_mass[i]).collect();
        let predicted_drift = s
            .wbar
            .fields()
            .iter()
            .map(|w| -tau * tau * grid.integrate_values(w.values()))
            .collect();
        let report = StepReport {
            method: self.cfg.method,
            iterations,
            fp_gap,
            fp_floor,
            energy: EnergyReport::lagged(&u, u_prev, &self.params),
            energy_full: model::energy_convex(&u, self.params.eps) + model::energy_concave(&u, self.params.beta),
            monitors: model::monitors(&u, u_prev, s.wbar.fields(), &self.params)?,
            mass,
            mass_change,
            predicted_drift,
            s1_residual: s.s1_residual,
            s2_residual: s.s2_residual,
            s2_iterations: s.s2_iterations,
            delta_observed: u.min_fraction(),
        };
        Ok(StepOutput {
            u,
            wbar: s.wbar,
            report,
        })
    }
}

struct S1Solve {
    wbar: EntropyVariables,
    s1_residual: f64,
    s2_residual: f64,
    s2_iterations: usize,
    a_inf: f64,
}

struct DirectSolution {
    wbar: EntropyVariables,
    relative_residual: f64,
    a_inf: f64,
}

/// Refinement sweeps on the S1 solve. The operator's smallest eigenvalue is
/// of order `τ`, so a plain solve loses about `log10(‖A‖/τ)` digits; the
/// residual is therefore accumulated in extended precision.
const REFINE_SWEEPS: usize = 4;

/// S1 by banded LU with iterative refinement; falls back to the iterative
/// solver if the factorization breaks down.
fn solve_direct(sys: &S1System, tol: f64) -> Result<DirectSolution> {
    let a = sys.operator();
    let b = sys.rhs();
    let a_inf = a
        .outer_iterator()
        .map(|row| row.iter().map(|(_, v)| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let grid = *sys.grid();
    let n = b.len() / grid.cell_count();
    match BandLu::factor(a) {
        Ok(lu) => {
            let mut x = lu.solve(b);
            for _ in 0..REFINE_SWEEPS {
                let r = linalg::residual_compensated(a, &x, b);
                let dx = lu.solve(&r);
                let change = linalg::norm_inf(&dx);
                x.iter_mut().zip(dx).for_each(|(xi, d)| *xi += d);
                if change <= 4.0 * f64::EPSILON * linalg::norm_inf(&x) {
                    break;
                }
            }
            Ok(DirectSolution {
                relative_residual: linalg::relative_residual(a, &x, b),
                wbar: EntropyVariables::from_reduced(grid, n, &x),
                a_inf,
            })
        }
        Err(_) => {
            let sol = s1::solve_s1(sys, tol)?;
            Ok(DirectSolution {
                relative_residual: sol.relative_residual,
                wbar: sol.wbar,
                a_inf,
            })
        }
    }
}

/// `M ⊗ B` for a scalar grid matrix `M` and a dense `n x n` block `B`.
fn kron_block(m: &CsMat<f64>, n: usize, block: &[f64]) -> CsMat<f64> {
    let mut t = TriMat::with_capacity((m.rows() * n, m.cols() * n), m.nnz() * n * n);
    for (v, (a, b)) in m.iter() {
        for s in 0..n {
            for q in 0..n {
                let e = v * block[s * n + q];
                if e != 0.0 {
                    t.add_triplet(a * n + s, b * n + q, e);
                }
            }
        }
    }
    t.to_csr()
}

fn fraction_to_boundary(x: &[f64], d: &[f64], n: usize) -> f64 {
    let mut alpha = 1.0f64;
    for (cell, dc) in x.chunks(n).zip(d.chunks(n)) {
        let v0 = 1.0 - cell.iter().sum::<f64>();
        let d0 = -dc.iter().sum::<f64>();
        for (v, dv) in cell.iter().zip(dc).chain(std::iter::once((&v0, &d0))) {
            if *dv < 0.0 {
                alpha = alpha.min(0.99 * v / -dv);
            }
        }
    }
    alpha
}

/// One time step from `u_prev`.
pub fn fixed_point_step(u_prev: &CompositionField, params: &ModelParams, cfg: &StepConfig) -> Result<StepOutput> {
    Stepper::new(*u_prev.grid(), params.clone(), *cfg)?.step(u_prev)
}

/// `‖S(u) - u‖_∞` for an arbitrary interior `u`.
pub fn fixed_point_residual(u_prev: &CompositionField, u: &CompositionField, params: &ModelParams, cfg: &StepConfig) -> Result<f64> {
    let st = Stepper::new(*u_prev.grid(), params.clone(), *cfg)?;
    st.check(u)?;
    let (su, _) = st.apply_s(u_prev, u, cfg.s1_tol)?;
    Ok(su
        .reduced()
        .iter()
        .zip(u.reduced())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Clips every species to `[0, 1]` and renormalizes per cell. Returns the
/// composition and the largest change applied to any entry.
pub fn project_initial(u_raw: &[ScalarField]) -> Result<(CompositionField, f64)> {
    if u_raw.len() < 2 {
        return Err(Error::invalid("u_raw", "need at least two species"));
    }
    let grid = *u_raw[0].grid();
    if u_raw.iter().any(|f| *f.grid() != grid) {
        return Err(Error::GridMismatch("initial species on different grids".into()));
    }
    let m = u_raw.len();
    let mut out = vec![vec![0.0; grid.cell_count()]; m];
    let mut correction = 0.0f64;
    for c in 0..grid.cell_count() {
        let clipped: Vec<f64> = u_raw.iter().map(|f| f.values()[c].clamp(0.0, 1.0)).collect();
        let s: f64 = clipped.iter().sum();
        if !(s > 0.0) {
            return Err(Error::domain(format!("cell {c} has no mass after clipping")));
        }
        for i in 0..m {
            let v = if (s - 1.0).abs() <= f64::EPSILON { clipped[i] } else { clipped[i] / s };
            correction = correction.max((v - u_raw[i].values()[c]).abs());
            out[i][c] = v;
        }
    }
    let fields = out.into_iter().map(|v| ScalarField::from_raw(grid, v)).collect();
    let u = CompositionField::new(fields)?;
    Ok((u, correction))
}

/// State carried between steps.
#[derive(Debug, Clone)]
pub struct TrajectoryState {
    pub current: CompositionField,
    /// `u^{p-1}`, which carries the lagged concave energy.
    pub previous: Option<CompositionField>,
    pub time: f64,
    pub step: usize,
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub u: CompositionField,
    pub report: StepReport,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub tau: f64,
    pub initial: CompositionField,
    /// `E_conv(u^0) + E_conc(u^0)`.
    pub initial_energy: f64,
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn final_state(&self) -> &CompositionField {
        self.steps.last().map(|s| &s.u).unwrap_or(&self.initial)
    }

    /// `E^{(τ)}(t_p)` for `p = 0..`, with the lagged concave part from step 1 on.
    pub fn entropy_sequence(&self) -> Vec<f64> {
        std::iter::once(self.initial_energy)
            .chain(self.steps.iter().map(|s| s.report.energy.total))
            .collect()
    }

    /// `Σ_p τ q_p` for each monitored quantity.
    pub fn cumulative_monitors(&self) -> MonitorRecord {
        let mut acc = MonitorRecord::default();
        for s in &self.steps {
            acc.scaled_add(self.tau, &s.report.monitors);
        }
        acc
    }

    /// State of the piecewise-constant interpolant at `t`.
    pub fn at(&self, t: f64) -> &CompositionField {
        if self.steps.is_empty() || t <= 0.0 {
            return &self.initial;
        }
        let p = ((t / self.tau) - 1e-9).ceil().max(1.0) as usize;
        &self.steps[p.min(self.steps.len()) - 1].u
    }
}

/// `(∫_0^T ‖u_a(t) - u_b(t)‖²_{L²} dt)^{1/2}` for the piecewise-constant
/// interpolants of two trajectories on the same grid.
pub fn trajectory_gap(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    if a.initial.grid() != b.initial.grid() || a.initial.n() != b.initial.n() {
        return Err(Error::GridMismatch("trajectories on different grids".into()));
    }
    let ta = a.steps.len() as f64 * a.tau;
    let tb = b.steps.len() as f64 * b.tau;
    let t_end = ta.min(tb);
    let mut breaks: Vec<f64> = (0..=a.steps.len())
        .map(|p| p as f64 * a.tau)
        .chain((0..=b.steps.len()).map(|p| p as f64 * b.tau))
        .filter(|t| *t <= t_end * (1.0 + 1e-12))
        .collect();
    breaks.sort_by(f64::total_cmp);
    breaks.dedup_by(|x, y| (*x - *y).abs() <= 1e-12 * t_end.max(1e-300));
    let grid = a.initial.grid();
    let mut acc = 0.0;
    for w in breaks.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        if t1 <= t0 {
            continue;
        }
        let mid = 0.5 * (t0 + t1);
        let (ua, ub) = (a.at(mid), b.at(mid));
        let mut d2 = 0.0;
        for i in 0..=ua.n() {
            let diff: Vec<f64> = ua.species(i).values().iter().zip(ub.species(i).values()).map(|(p, q)| p - q).collect();
            d2 += grid.dot_cells(&diff, &diff);
        }
        acc += (t1 - t0) * d2;
    }
    Ok(acc.sqrt())
}

/// Number of steps `P` with `P τ ≥ t_max`, the smallest such.
pub fn step_count(t_max: f64, tau: f64) -> usize {
    ((t_max / tau) * (1.0 - 1e-12)).ceil().max(0.0) as usize
}

#[derive(Debug)]
pub struct RunFailure {
    pub partial: Trajectory,
    pub error: Error,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "run stopped after {} steps: {}", self.partial.steps.len(), self.error)
    }
}

impl std::error::Error for RunFailure {}

/// Runs `⌈t_max/τ⌉` steps from `u0`. `observer` sees each accepted step.
pub fn run(
    u0: &CompositionField,
    params: &ModelParams,
    cfg: &StepConfig,
    t_max: f64,
    mut observer: impl FnMut(&StepRecord),
) -> std::result::Result<Trajectory, Box<RunFailure>> {
    let mut traj = Trajectory {
        tau: params.tau,
        initial: u0.clone(),
        initial_energy: 0.0,
        steps: Vec::new(),
    };
    macro_rules! bail {
        ($e:expr) => {
            return Err(Box::new(RunFailure {
                partial: traj,
                error: $e,
            }))
        };
    }
    if !(t_max > 0.0 && t_max.is_finite()) {
        bail!(Error::invalid("t_max", "must be positive"));
    }
    let stepper = match Stepper::new(*u0.grid(), params.clone(), *cfg) {
        Ok(s) => s,
        Err(e) => bail!(e),
    };
    if let Err(e) = model::energy(u0, params) {
        bail!(e);
    }
    traj.initial_energy = model::energy_convex(u0, params.eps) + model::energy_concave(u0, params.beta);
    let mut state = TrajectoryState {
        current: u0.clone(),
        previous: None,
        time: 0.0,
        step: 0,
    };
    for p in 1..=step_count(t_max, params.tau) {
        let out = match stepper.step(&state.current) {
            Ok(o) => o,
            Err(e) => bail!(e),
        };
        let (sum_err, min) = out.u.simplex_defect();
        if sum_err > SIMPLEX_TOL {
            bail!(Error::Invariant {
                step: p,
                what: format!("simplex defect {sum_err:e}"),
            });
        }
        if !(min > 0.0) {
            bail!(Error::Invariant {
                step: p,
                what: format!("nonpositive fraction {min:e}"),
            });
        }
        let rec = StepRecord {
            step: p,
            time: p as f64 * params.tau,
            u: out.u.clone(),
            report: out.report,
        };
        observer(&rec);
        traj.steps.push(rec);
        state = TrajectoryState {
            previous: Some(std::mem::replace(&mut state.current, out.u)),
            current: state.current,
            time: p as f64 * params.tau,
            step: p,
        };
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Interactions;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(n: usize, tau: f64) -> ModelParams {
        ModelParams::new(n, 0.01, 3.0, Interactions::uniform(n, 1.0).unwrap(), tau).unwrap()
    }

    fn perturbed(rng: &mut impl Rng, grid: Grid, n: usize, amp: f64) -> CompositionField {
        let base = 1.0 / (n + 1) as f64;
        let mut x = Vec::new();
        for _ in 0..grid.cell_count() {
            let v: Vec<f64> = (0..=n).map(|_| base + amp * rng.gen_range(-1.0..1.0)).collect();
            let s: f64 = v.iter().sum();
            x.extend(v[1..].iter().map(|a| a / s));
        }
        CompositionField::from_reduced(grid, n, &x)
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let grid = Grid::new_1d(6, 1.0 / 6.0).unwrap();
        for n in 1..=3 {
            let m = n + 1;
            let mut vals = vec![0.0; m * m];
            for i in 0..m {
                for j in i + 1..m {
                    let k = rng.gen_range(0.5..2.0);
                    vals[i * m + j] = k;
                    vals[j * m + i] = k;
                }
            }
            let p = ModelParams::new(n, 0.02, 2.0, Interactions::from_values(m, vals).unwrap(), 0.01).unwrap();
            let st = Stepper::new(grid, p, StepConfig::default()).unwrap();
            let up = perturbed(&mut rng, grid, n, 0.1);
            let u = perturbed(&mut rng, grid, n, 0.1);
            let (x, xp) = (u.reduced(), up.reduced());
            let u0p = up.species(0).values().to_vec();
            let jac = linalg::to_dense(&st.jacobian(&x, &u0p));
            let h = 1e-6;
            for k in 0..x.len() {
                let mut a = x.clone();
                let mut b = x.clone();
                a[k] += h;
                b[k] -= h;
                let ra = st.residual(&a, &xp, &u0p);
                let rb = st.residual(&b, &xp, &u0p);
                for row in 0..x.len() {
                    let fd = (ra[row] - rb[row]) / (2.0 * h);
                    let an = jac[(row, k)];
                    assert!((fd - an).abs() <= 1e-5 * (1.0 + an.abs()), "n={n} ({row},{k}): {fd} vs {an}");
                }
            }
        }
    }

    /// Uniform `(a, .., a, 1 - n a)` with `ln(a / u_0) = β (1 - 2 u_0)`, the
    /// spatially uniform state with `W = 0`.
    fn balanced_uniform(grid: Grid, n: usize, beta: f64) -> CompositionField {
        let g = |a: f64| {
            let u0 = 1.0 - n as f64 * a;
            (a / u0).ln() - beta * (1.0 - 2.0 * u0)
        };
        let (mut lo, mut hi) = (1e-12, (1.0 - 1e-12) / n as f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        CompositionField::from_reduced(grid, n, &vec![0.5 * (lo + hi); grid.cell_count() * n])
    }

    #[test]
    fn balanced_uniform_state_is_stationary() {
        let grid = Grid::new_1d(8, 0.125).unwrap();
        for n in 1..=2 {
            let p = params(n, 1e-3);
            let u = balanced_uniform(grid, n, p.beta);
            let out = fixed_point_step(&u, &p, &StepConfig::default()).unwrap();
            let diff = out.u.reduced().iter().zip(u.reduced()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff <= 1e-12, "n={n}: {diff:e}");
            assert!(linalg::norm_inf(&out.wbar.reduced()) <= 1e-9);
        }
    }

    #[test]
    fn uniform_state_stays_uniform_and_drifts_as_predicted() {
        // w̄ = -β/3 at equal thirds, so the regularization moves mass by O(τ²)
        let grid = Grid::new_1d(8, 0.125).unwrap();
        let p = params(2, 1e-3);
        let u = CompositionField::uniform(grid, 2);
        let out = fixed_point_step(&u, &p, &StepConfig::default()).unwrap();
        for f in out.u.fractions() {
            assert!(f.max() - f.min() <= 1e-13);
        }
        for (c, w) in out.report.mass_change.iter().zip(&out.report.predicted_drift) {
            assert!((c - w).abs() <= 1e-14);
            assert!(c.abs() > 0.0);
        }
    }

    #[test]
    fn single_cell_matches_bisection() {
        let grid = Grid::new_1d(1, 1.0).unwrap();
        let p = params(1, 0.2);
        let up = 0.3;
        let u_prev = CompositionField::from_reduced(grid, 1, &[up]);
        let out = fixed_point_step(&u_prev, &p, &StepConfig::default()).unwrap();
        // ln u - ln(1-u) - β(1 - 2(1-up)) + (u - up)/τ² = 0 is increasing in u
        let g = |u: f64| u.ln() - (1.0 - u).ln() - p.beta * (1.0 - 2.0 * (1.0 - up)) + (u - up) / (p.tau * p.tau);
        let (mut lo, mut hi) = (1e-15, 1.0 - 1e-15);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        assert!((out.u.reduced()[0] - 0.5 * (lo + hi)).abs() <= 1e-8);
    }

    #[test]
    fn newton_and_picard_agree_for_large_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grid = Grid::new_1d(6, 1.0 / 6.0).unwrap();
        let p = params(1, 1.0);
        let u = perturbed(&mut rng, grid, 1, 0.05);
        let newton = fixed_point_step(&u, &p, &StepConfig::default()).unwrap();
        let cfg = StepConfig {
            method: FixedPointMethod::Picard,
            tol_fp: 1e-10,
            max_iter: 400,
            ..StepConfig::default()
        };
        let picard = fixed_point_step(&u, &p, &cfg).unwrap();
        let d = newton.u.reduced().iter().zip(picard.u.reduced()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d <= 1e-8, "{d:e}");
    }

    #[test]
    fn picard_failure_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = Grid::new_1d(8, 0.125).unwrap();
        let p = params(2, 1e-3);
        let u = perturbed(&mut rng, grid, 2, 0.1);
        let cfg = StepConfig {
            method: FixedPointMethod::Picard,
            max_iter: 5,
            ..StepConfig::default()
        };
        match fixed_point_step(&u, &p, &cfg) {
            Err(Error::FixedPoint(f)) => assert!(f.suggested_tau < p.tau && f.gap.is_finite()),
            Err(e) if e.is_solver_failure() => {}
            other => panic!("expected a fixed-point failure, got {other:?}"),
        }
    }

    #[test]
    fn mass_drift_identity_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let grid = Grid::new_2d(5, 4, 0.2).unwrap();
        let p = params(2, 1e-3);
        let u = perturbed(&mut rng, grid, 2, 0.1);
        let out = fixed_point_step(&u, &p, &StepConfig::default()).unwrap();
        assert!(out.report.mass_drift_defect() <= 1e-10);
        assert!(out.report.fp_gap <= out.report.fp_floor.max(1e-8));
    }

    #[test]
    fn boundary_initial_data_becomes_interior() {
        let grid = Grid::new_1d(8, 0.125).unwrap();
        let x: Vec<f64> = (0..8).map(|c| if c < 4 { 0.0 } else { 0.6 }).collect();
        let u = CompositionField::from_reduced(grid, 1, &x);
        let out = fixed_point_step(&u, &params(1, 1e-3), &StepConfig::default()).unwrap();
        assert!(out.u.min_fraction() > 0.0);
    }

    #[test]
    fn project_initial_examples() {
        let grid = Grid::new_1d(1, 1.0).unwrap();
        let f = |v: f64| ScalarField::new(grid, vec![v]).unwrap();
        let (u, c) = project_initial(&[f(0.3), f(0.7)]).unwrap();
        assert_eq!(u.cell(0), vec![0.3, 0.7]);
        assert_eq!(c, 0.0);
        let (u, _) = project_initial(&[f(0.6), f(0.6)]).unwrap();
        assert_eq!(u.cell(0), vec![0.5, 0.5]);
        let (u, c) = project_initial(&[f(-0.1), f(1.1)]).unwrap();
        assert_eq!(u.cell(0), vec![0.0, 1.0]);
        assert!((c - 0.1).abs() < 1e-15);
        assert!(project_initial(&[f(0.0), f(-1.0)]).is_err());
    }

    #[test]
    fn balanced_uniform_run_does_not_drift() {
        let grid = Grid::new_1d(8, 0.125).unwrap();
        let p = params(2, 1e-3);
        let u = balanced_uniform(grid, 2, p.beta);
        let traj = run(&u, &p, &StepConfig::default(), 0.1, |_| {}).unwrap();
        assert_eq!(traj.steps.len(), 100);
        let d = traj.final_state().reduced().iter().zip(u.reduced()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d <= 1e-9);
    }

    #[test]
    fn gap_of_identical_runs_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let grid = Grid::new_1d(8, 0.125).unwrap();
        let p = params(1, 1e-3);
        let u = perturbed(&mut rng, grid, 1, 0.05);
        let a = run(&u, &p, &StepConfig::default(), 5e-3, |_| {}).unwrap();
        let b = run(&u, &p, &StepConfig::default(), 5e-3, |_| {}).unwrap();
        assert_eq!(trajectory_gap(&a, &b).unwrap(), 0.0);
        assert_eq!(step_count(5e-3, 1e-3), 5);
    }
}
