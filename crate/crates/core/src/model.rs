//! The free energy, the degenerate mobility and the derived quantities of the
//! (n+1)-species mixture in which only species 0 separates from the rest.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{FaceField, Grid, ScalarField};

/// Symmetric table of pairwise interaction coefficients `K_ij`, `0 <= i, j <= n`.
/// The diagonal is never read.
#[derive(Debug, Clone, PartialEq)]
pub struct Interactions {
    size: usize,
    values: Vec<f64>,
}

impl Interactions {
    /// Same coefficient for every pair.
    pub fn uniform(n: usize, k: f64) -> Result<Self> {
        let size = n + 1;
        let mut values = vec![k; size * size];
        for i in 0..size {
            values[i * size + i] = 0.0;
        }
        Self::from_values(size, values)
    }

    /// Row-major `(n+1) x (n+1)` table.
    pub fn from_values(size: usize, values: Vec<f64>) -> Result<Self> {
        if size < 2 || values.len() != size * size {
            return Err(Error::invalid("K", format!("expected a {size}x{size} table")));
        }
        for i in 0..size {
            for j in 0..size {
                if i == j {
                    continue;
                }
                let (a, b) = (values[i * size + j], values[j * size + i]);
                if a != b {
                    return Err(Error::invalid(format!("K_{i}{j}"), "K must be symmetric"));
                }
                if !(a.is_finite() && a > 0.0) {
                    return Err(Error::invalid(
                        format!("K_{}{}", i.min(j), i.max(j)),
                        "off-diagonal K must be positive",
                    ));
                }
            }
        }
        Ok(Interactions { size, values })
    }

    pub fn species(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    /// `K̄`, the largest off-diagonal entry.
    pub fn max_off_diagonal(&self) -> f64 {
        self.off_diagonal().fold(0.0, f64::max)
    }

    pub fn min_off_diagonal(&self) -> f64 {
        self.off_diagonal().fold(f64::INFINITY, f64::min)
    }

    fn off_diagonal(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.size)
            .flat_map(move |i| (0..self.size).filter(move |&j| j != i).map(move |j| self.get(i, j)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Number of species besides species 0.
    pub n: usize,
    pub eps: f64,
    pub beta: f64,
    pub k: Interactions,
    pub tau: f64,
}

impl ModelParams {
    pub fn new(n: usize, eps: f64, beta: f64, k: Interactions, tau: f64) -> Result<Self> {
        let p = ModelParams { n, eps, beta, k, tau };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("n", "need at least one species besides species 0"));
        }
        for (name, v) in [("eps", self.eps), ("beta", self.beta), ("tau", self.tau)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, format!("must be positive, got {v}")));
            }
        }
        if self.k.species() != self.n + 1 {
            return Err(Error::invalid(
                "K",
                format!("table covers {} species, model has {}", self.k.species(), self.n + 1),
            ));
        }
        Ok(())
    }

    pub fn with_tau(&self, tau: f64) -> Result<Self> {
        let mut p = self.clone();
        p.tau = tau;
        p.validate()?;
        Ok(p)
    }
}

/// Volume fractions `u_0, ..., u_n` on a grid.
///
/// Species 0 is stored explicitly but is always `1 - Σ_{i>=1} u_i` when the
/// field was built from the reduced unknowns.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionField {
    grid: Grid,
    fractions: Vec<ScalarField>,
}

/// Tolerance on `|Σ_i u_i - 1|` per cell.
pub const SIMPLEX_TOL: f64 = 1e-12;

impl CompositionField {
    /// Validates nonnegativity and unit sums.
    pub fn new(fractions: Vec<ScalarField>) -> Result<Self> {
        let field = Self::unchecked(fractions)?;
        let (sum_err, min) = field.simplex_defect();
        if min < 0.0 {
            return Err(Error::domain(format!("negative volume fraction {min:e}")));
        }
        if sum_err > SIMPLEX_TOL {
            return Err(Error::domain(format!("fractions sum to 1 only within {sum_err:e}")));
        }
        Ok(field)
    }

    fn unchecked(fractions: Vec<ScalarField>) -> Result<Self> {
        if fractions.len() < 2 {
            return Err(Error::invalid("n", "need at least two species"));
        }
        let grid = *fractions[0].grid();
        if fractions.iter().any(|f| *f.grid() != grid) {
            return Err(Error::GridMismatch("species live on different grids".into()));
        }
        Ok(CompositionField { grid, fractions })
    }

    /// Builds the field from interleaved `u_1..u_n` (`x[c * n + s]` is
    /// species `s + 1` in cell `c`); species 0 closes the simplex.
    pub fn from_reduced(grid: Grid, n: usize, x: &[f64]) -> Self {
        let cells = grid.cell_count();
        debug_assert_eq!(x.len(), cells * n);
        let mut species = vec![vec![0.0; cells]; n + 1];
        for c in 0..cells {
            let mut sum = 0.0;
            for s in 0..n {
                let v = x[c * n + s];
                species[s + 1][c] = v;
                sum += v;
            }
            species[0][c] = 1.0 - sum;
        }
        CompositionField {
            grid,
            fractions: species.into_iter().map(|v| ScalarField::from_raw(grid, v)).collect(),
        }
    }

    pub fn uniform(grid: Grid, n: usize) -> Self {
        let x = vec![1.0 / (n + 1) as f64; grid.cell_count() * n];
        Self::from_reduced(grid, n, &x)
    }

    /// Interleaved `u_1..u_n`, the layout used by all solvers.
    pub fn reduced(&self) -> Vec<f64> {
        let n = self.n();
        let mut x = vec![0.0; self.grid.cell_count() * n];
        for c in 0..self.grid.cell_count() {
            for s in 0..n {
                x[c * n + s] = self.fractions[s + 1].values()[c];
            }
        }
        x
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.fractions.len() - 1
    }

    pub fn species(&self, i: usize) -> &ScalarField {
        &self.fractions[i]
    }

    pub fn fractions(&self) -> &[ScalarField] {
        &self.fractions
    }

    /// `(u_0, ..., u_n)` in cell `c`.
    pub fn cell(&self, c: usize) -> Vec<f64> {
        self.fractions.iter().map(|f| f.values()[c]).collect()
    }

    /// Smallest fraction over all cells and species.
    pub fn min_fraction(&self) -> f64 {
        self.fractions.iter().map(|f| f.min()).fold(f64::INFINITY, f64::min)
    }

    /// `(max_c |Σ_i u_i - 1|, min fraction)`.
    pub fn simplex_defect(&self) -> (f64, f64) {
        let mut worst = 0.0f64;
        for c in 0..self.grid.cell_count() {
            let s: f64 = self.fractions.iter().map(|f| f.values()[c]).sum();
            worst = worst.max((s - 1.0).abs());
        }
        (worst, self.min_fraction())
    }

    /// Entries clipped below at `floor` and renormalized per cell.
    pub fn floored(&self, floor: f64) -> Self {
        let n = self.n();
        let mut x = vec![0.0; self.grid.cell_count() * n];
        for c in 0..self.grid.cell_count() {
            let cell: Vec<f64> = self.cell(c).iter().map(|v| v.max(floor)).collect();
            let s: f64 = cell.iter().sum();
            for i in 0..n {
                x[c * n + i] = cell[i + 1] / s;
            }
        }
        Self::from_reduced(self.grid, n, &x)
    }

    /// `∫ u_i` for `i = 0..n`.
    pub fn masses(&self) -> Vec<f64> {
        self.fractions.iter().map(crate::grid::integrate).collect()
    }
}

/// Entropy functional split into its implicit (convex) and explicit
/// (concave) parts; `total = conv + conc`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyReport {
    pub total: f64,
    pub conv: f64,
    pub conc: f64,
}

impl EnergyReport {
    /// `E_conv` of `current` plus `E_conc` of `lagged`.
    pub fn lagged(current: &CompositionField, lagged: &CompositionField, params: &ModelParams) -> Self {
        let conv = energy_convex(current, params.eps);
        let conc = energy_concave(lagged, params.beta);
        EnergyReport {
            total: conv + conc,
            conv,
            conc,
        }
    }
}

fn xlnx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

fn check_nonnegative(u: &CompositionField) -> Result<()> {
    let min = u.min_fraction();
    if min < 0.0 {
        return Err(Error::domain(format!("negative volume fraction {min:e}")));
    }
    Ok(())
}

/// `∫ Σ_i (u_i ln u_i - u_i + 1) + ε/2 |∇u_0|² + β u_0 (1 - u_0)` with `0 ln 0 = 0`.
pub fn energy(u: &CompositionField, params: &ModelParams) -> Result<f64> {
    check_nonnegative(u)?;
    let grid = u.grid();
    let mut density = vec![0.0; grid.cell_count()];
    for f in u.fractions() {
        for (d, &x) in density.iter_mut().zip(f.values()) {
            *d += xlnx(x) - x + 1.0;
        }
    }
    let entropy = grid.integrate_values(&density);
    Ok(entropy + gradient_energy(u, params.eps) + energy_concave(u, params.beta))
}

fn gradient_energy(u: &CompositionField, eps: f64) -> f64 {
    let grid = u.grid();
    let g = grid.gradient_values(u.species(0).values());
    0.5 * eps * grid.dot_faces(&g, &g)
}

/// `E_conv(u) = ∫ Σ_i u_i ln u_i + ε/2 |∇u_0|²`.
pub fn energy_convex(u: &CompositionField, eps: f64) -> f64 {
    let grid = u.grid();
    let s: f64 = u.fractions().iter().flat_map(|f| f.values()).map(|&x| xlnx(x)).sum();
    s * grid.cell_volume() + gradient_energy(u, eps)
}

/// `E_conc(u) = ∫ β u_0 (1 - u_0)`.
pub fn energy_concave(u: &CompositionField, beta: f64) -> f64 {
    let u0 = u.species(0).values();
    beta * u0.iter().map(|x| x * (1.0 - x)).sum::<f64>() * u.grid().cell_volume()
}

/// `M_ij = -K_ij u_i u_j` off the diagonal, rows summing to zero.
pub fn mobility(u_cell: &[f64], k: &Interactions) -> Result<DMatrix<f64>> {
    let m = u_cell.len();
    if m != k.species() {
        return Err(Error::invalid("u_cell", format!("expected {} species, got {m}", k.species())));
    }
    if let Some(v) = u_cell.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::domain(format!("negative volume fraction {v}")));
    }
    let mut out = DMatrix::zeros(m, m);
    for i in 0..m {
        let mut diag = 0.0;
        for j in 0..m {
            if i != j {
                let v = k.get(i, j) * u_cell[i] * u_cell[j];
                out[(i, j)] = -v;
                diag += v;
            }
        }
        out[(i, i)] = diag;
    }
    Ok(out)
}

/// `zᵀ M(u) z`, computed in the closed form `½ Σ_{i≠j} K_ij u_i u_j (z_i - z_j)²`.
pub fn mobility_quadratic_form(u_cell: &[f64], z: &[f64], k: &Interactions) -> f64 {
    let m = u_cell.len();
    let mut acc = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                let d = z[i] - z[j];
                acc += k.get(i, j) * u_cell[i] * u_cell[j] * d * d;
            }
        }
    }
    0.5 * acc
}

pub fn kappa(a: f64, b: f64) -> f64 {
    if 1.0 - b != 0.0 {
        a / (1.0 - b)
    } else {
        0.0
    }
}

/// `w_0^{p+1/2} = -ε Δ u_0^{p+1} + β (1 - 2 u_0^p)`.
pub fn w0_semi_implicit(u0_new: &ScalarField, u0_old: &ScalarField, params: &ModelParams) -> Result<ScalarField> {
    if u0_new.grid() != u0_old.grid() {
        return Err(Error::GridMismatch("u0_new and u0_old".into()));
    }
    let grid = u0_new.grid();
    let lap = grid.laplacian_values(u0_new.values());
    let values = lap
        .iter()
        .zip(u0_old.values())
        .map(|(l, old)| -params.eps * l + params.beta * (1.0 - 2.0 * old))
        .collect();
    ScalarField::new(*grid, values)
}

/// `w_i = ln u_i - ln u_0` for `i = 1..n`.
pub fn entropy_vars(u: &CompositionField) -> Result<Vec<ScalarField>> {
    let min = u.min_fraction();
    if !(min > 0.0) {
        return Err(Error::domain(format!(
            "entropy variables need strictly positive fractions, min is {min:e}"
        )));
    }
    let u0 = u.species(0).values();
    (1..=u.n())
        .map(|i| {
            let v = u.species(i).values().iter().zip(u0).map(|(a, b)| a.ln() - b.ln()).collect();
            ScalarField::new(*u.grid(), v)
        })
        .collect()
}

/// `J = u_0 (1 - u_0) ∇w_0` per interior face, with the arithmetic face
/// average of the degenerate coefficient.
pub fn flux_j(u0: &ScalarField, w0: &ScalarField) -> Result<FaceField> {
    if u0.grid() != w0.grid() {
        return Err(Error::GridMismatch("u0 and w0".into()));
    }
    let grid = u0.grid();
    let grad = grid.gradient_values(w0.values());
    let u = u0.values();
    let coeff = |x: f64| x * (1.0 - x);
    let values = grid
        .faces()
        .zip(grad)
        .map(|((l, r), g)| 0.5 * (coeff(u[l]) + coeff(u[r])) * g)
        .collect();
    FaceField::new(*grid, values)
}

/// The a-priori quantities controlled uniformly in `τ` by the entropy estimates,
/// evaluated for one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct MonitorRecord {
    /// `Σ_{i=0}^n ∫ |∇u_i|² / u_i`
    pub fisher: f64,
    /// `∫ |Δu_0|²`
    pub laplacian_u0: f64,
    /// `∫ (1 - u_0) u_0 |∇w_0|²`
    pub degenerate_w0: f64,
    /// `τ Σ_i ‖w̄_i‖²_{H²}`
    pub regularization: f64,
    /// `Σ_i ∫ u_i u_0 |∇w̄_i|²`
    pub cross: f64,
}

impl MonitorRecord {
    pub fn as_array(&self) -> [f64; 5] {
        [self.fisher, self.laplacian_u0, self.degenerate_w0, self.regularization, self.cross]
    }

    pub const NAMES: [&'static str; 5] = ["fisher", "laplacian_u0", "degenerate_w0", "regularization", "cross"];

    pub fn scaled_add(&mut self, w: f64, other: &MonitorRecord) {
        self.fisher += w * other.fisher;
        self.laplacian_u0 += w * other.laplacian_u0;
        self.degenerate_w0 += w * other.degenerate_w0;
        self.regularization += w * other.regularization;
        self.cross += w * other.cross;
    }
}

/// Face integrals use arithmetic face averages of the cell coefficients,
/// the same convention as the mobility in the elliptic solve.
pub fn monitors(
    u_new: &CompositionField,
    u_old: &CompositionField,
    wbar: &[ScalarField],
    params: &ModelParams,
) -> Result<MonitorRecord> {
    if u_new.grid() != u_old.grid() || wbar.iter().any(|w| w.grid() != u_new.grid()) {
        return Err(Error::GridMismatch("monitor inputs".into()));
    }
    if wbar.len() != u_new.n() {
        return Err(Error::invalid("wbar", format!("expected {} fields", u_new.n())));
    }
    let grid = u_new.grid();
    let vol = grid.cell_volume();
    let faces: Vec<(usize, usize)> = grid.faces().collect();
    let avg = |v: &[f64], (l, r): (usize, usize)| 0.5 * (v[l] + v[r]);

    let mut fisher = 0.0;
    for f in u_new.fractions() {
        let g = grid.gradient_values(f.values());
        fisher += faces.iter().zip(&g).map(|(&lr, gi)| gi * gi / avg(f.values(), lr)).sum::<f64>();
    }

    let u0 = u_new.species(0).values();
    let lap = grid.laplacian_values(u0);
    let laplacian_u0 = grid.dot_cells(&lap, &lap);

    let w0 = w0_semi_implicit(u_new.species(0), u_old.species(0), params)?;
    let j = flux_j(u_new.species(0), &w0)?;
    let gw0 = grid.gradient_values(w0.values());
    let degenerate_w0 = grid.dot_faces(j.values(), &gw0);

    let mut regularization = 0.0;
    let mut cross = 0.0;
    for (i, w) in wbar.iter().enumerate() {
        regularization += crate::grid::h2_values(grid, w.values(), w.values());
        let ui = u_new.species(i + 1).values();
        let prod: Vec<f64> = ui.iter().zip(u0).map(|(a, b)| a * b).collect();
        let g = grid.gradient_values(w.values());
        cross += faces.iter().zip(&g).map(|(&lr, gi)| avg(&prod, lr) * gi * gi).sum::<f64>();
    }

    Ok(MonitorRecord {
        fisher: fisher * vol,
        laplacian_u0,
        degenerate_w0,
        regularization: params.tau * regularization,
        cross: cross * vol,
    })
}
