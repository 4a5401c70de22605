//! Slow, independent reference computations used to certify the solvers on
//! tiny instances.
//!
//! Nothing here touches the sparse assembly or the linear solvers of the
//! production path: difference operators are rebuilt from neighbour loops and
//! all linear algebra is dense.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, FixedPointFailure, Result};
use crate::grid::{Grid, ScalarField};
use crate::model::{self, CompositionField, Interactions, ModelParams};
use crate::s2::{self, S2Options, S2Problem};
use crate::stepper::StepConfig;

/// Neighbour pairs `(left, right)` of every interior face.
fn face_pairs(grid: &Grid) -> Vec<(usize, usize)> {
    let (nx, ny) = (grid.nx(), grid.ny());
    let mut out = Vec::new();
    for j in 0..ny {
        for i in 0..nx.saturating_sub(1) {
            out.push((j * nx + i, j * nx + i + 1));
        }
    }
    if grid.dims() == 2 {
        for j in 0..ny - 1 {
            for i in 0..nx {
                out.push((j * nx + i, (j + 1) * nx + i));
            }
        }
    }
    out
}

/// Dense `-Δ_h` with zero-flux boundaries.
fn dense_neg_laplacian(grid: &Grid) -> DMatrix<f64> {
    let m = grid.cell_count();
    let ih2 = 1.0 / (grid.h() * grid.h());
    let mut l = DMatrix::zeros(m, m);
    for (a, b) in face_pairs(grid) {
        l[(a, a)] += ih2;
        l[(b, b)] += ih2;
        l[(a, b)] -= ih2;
        l[(b, a)] -= ih2;
    }
    l
}

/// Dense face gradient, rows ordered like [`face_pairs`].
fn dense_gradient(grid: &Grid) -> DMatrix<f64> {
    let pairs = face_pairs(grid);
    let ih = 1.0 / grid.h();
    let mut d = DMatrix::zeros(pairs.len(), grid.cell_count());
    for (f, (a, b)) in pairs.into_iter().enumerate() {
        d[(f, a)] = -ih;
        d[(f, b)] = ih;
    }
    d
}

/// Worst relative error between central differences of the S2 objective
/// and the analytic gradient, over 20 random directions. The error is taken
/// relative to `max(|∂_d F|, 1)`, so it is absolute where the gradient
/// vanishes.
pub fn fd_gradient_check(prob: &S2Problem, v: &CompositionField, h_fd: f64, seed: u64) -> Result<f64> {
    if !(h_fd > 0.0) {
        return Err(Error::invalid("h_fd", "must be positive"));
    }
    let grad = s2::grad_f(v, prob)?;
    let n = prob.n();
    let grid = *prob.grid();
    let cells = grid.cell_count();
    let x = v.reduced();
    let margin = 0.5 * v.min_fraction();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut d: Vec<f64> = (0..cells * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // keep v ± h d inside the simplex, u_0 included
        let reach = d
            .chunks(n)
            .map(|c| c.iter().map(|a| a.abs()).fold(c.iter().sum::<f64>().abs(), f64::max))
            .fold(0.0, f64::max);
        let scale = if h_fd * reach > margin { margin / (h_fd * reach) } else { 1.0 };
        d.iter_mut().for_each(|a| *a *= scale);
        let shifted = |sign: f64| {
            let y: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + sign * h_fd * b).collect();
            s2::objective_f(&CompositionField::from_reduced(grid, n, &y), prob)
        };
        let fd = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * h_fd);
        let mut an = 0.0;
        for c in 0..cells {
            for s in 0..n {
                an += grad[s].values()[c] * d[c * n + s];
            }
        }
        an *= grid.cell_volume();
        worst = worst.max((fd - an).abs() / an.abs().max(1.0));
    }
    Ok(worst)
}

/// Euclidean projection of `y` onto `{v : Σ v = mass, v ≥ 0}` by sorting.
pub fn project_simplex(y: &[f64], mass: f64) -> Vec<f64> {
    let mut s = y.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, v) in s.iter().enumerate() {
        cum += v;
        let t = (cum - mass) / (k + 1) as f64;
        if v - t > 0.0 {
            theta = t;
        }
    }
    y.iter().map(|v| (v - theta).max(0.0)).collect()
}

/// Smallest fraction kept by the projected-gradient oracle, so that the
/// logarithms stay finite.
const ORACLE_FLOOR: f64 = 1e-14;

/// Projected gradient descent on the full simplex coordinates
/// `(v_0, ..., v_n)` with a fixed step, starting from the uniform state.
pub fn brute_force_minimize(prob: &S2Problem, iters: usize, step: f64) -> Result<CompositionField> {
    let grid = *prob.grid();
    let n = prob.n();
    let m = n + 1;
    let cells = grid.cell_count();
    if cells > 8 || n > 2 {
        return Err(Error::invalid("prob", "oracle is limited to 8 cells and n <= 2"));
    }
    let lap = dense_neg_laplacian(&grid);
    let f = prob.forcing();
    let eps = prob.eps();
    let mut v = vec![vec![1.0 / m as f64; m]; cells];
    for _ in 0..iters {
        let u0 = DVector::from_iterator(cells, v.iter().map(|c| c[0]));
        let l0 = &lap * &u0;
        for c in 0..cells {
            let mut y = vec![0.0; m];
            // full-coordinate L² gradient of F
            y[0] = v[c][0] - step * (v[c][0].ln() + 1.0 + eps * l0[c]);
            for i in 1..m {
                y[i] = v[c][i] - step * (v[c][i].ln() + 1.0 - f[c * n + i - 1]);
            }
            let shifted: Vec<f64> = y.iter().map(|a| a - ORACLE_FLOOR).collect();
            let p = project_simplex(&shifted, 1.0 - m as f64 * ORACLE_FLOOR);
            v[c] = p.iter().map(|a| a + ORACLE_FLOOR).collect();
        }
    }
    let fields = (0..m)
        .map(|i| ScalarField::new(grid, v.iter().map(|c| c[i]).collect()))
        .collect::<Result<Vec<_>>>()?;
    CompositionField::new(fields)
}

/// One step of the scheme for `n = 1`, written directly in the single
/// unknown `u = u_1`: with `L = -Δ_h`,
///
/// ```text
/// [Dᵀ K_10 ⟨u(1-u)⟩_f D + τ (I + L + L²)] W(u) + (u - u^p)/τ = 0,
/// W(u) = ln u - ln(1-u) + ε L u - β (2 u^p - 1),
/// ```
///
/// solved by Newton with a central-difference Jacobian and dense LU.
pub fn scalar_ch_reference(u1_prev: &ScalarField, params: &ModelParams, cfg: &StepConfig) -> Result<ScalarField> {
    if params.n != 1 {
        return Err(Error::invalid("n", "the scalar reference needs n = 1"));
    }
    params.validate()?;
    let grid = *u1_prev.grid();
    let m = grid.cell_count();
    let up = DVector::from_column_slice(u1_prev.values());
    if up.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::domain("u1_prev must lie in [0, 1]"));
    }
    let d = dense_gradient(&grid);
    let l = dense_neg_laplacian(&grid);
    let h2 = DMatrix::identity(m, m) + &l + &l * &l;
    let pairs = face_pairs(&grid);
    let k10 = params.k.get(1, 0);
    let (tau, eps, beta) = (params.tau, params.eps, params.beta);

    let residual = |u: &DVector<f64>| -> DVector<f64> {
        let mut coeff = DVector::zeros(pairs.len());
        for (f, (a, b)) in pairs.iter().enumerate() {
            coeff[f] = 0.5 * k10 * (u[*a] * (1.0 - u[*a]) + u[*b] * (1.0 - u[*b]));
        }
        let lu = &l * u;
        let w = DVector::from_iterator(
            m,
            (0..m).map(|c| (u[c] / (1.0 - u[c])).ln() + eps * lu[c] - beta * (2.0 * up[c] - 1.0)),
        );
        let flux = d.transpose() * coeff.component_mul(&(&d * &w));
        flux + tau * (&h2 * &w) + (u - &up) / tau
    };

    let mut u = up.map(|v| v.clamp(1e-10, 1.0 - 1e-10));
    let mut r = residual(&u);
    for it in 1..=cfg.max_iter {
        let mut jac = DMatrix::zeros(m, m);
        for k in 0..m {
            let hk = 1e-7 * u[k].min(1.0 - u[k]).max(1e-12);
            let mut a = u.clone();
            let mut b = u.clone();
            a[k] += hk;
            b[k] -= hk;
            jac.set_column(k, &((residual(&a) - residual(&b)) / (2.0 * hk)));
        }
        let delta = jac.lu().solve(&(-&r)).ok_or_else(|| {
            Error::FixedPoint(Box::new(FixedPointFailure {
                best: CompositionField::from_reduced(grid, 1, u.as_slice()),
                gap: r.amax(),
                iterations: it,
                suggested_tau: 0.5 * tau,
            }))
        })?;
        // stay strictly inside (0, 1)
        let mut alpha = 1.0f64;
        for c in 0..m {
            if delta[c] < 0.0 {
                alpha = alpha.min(0.99 * u[c] / -delta[c]);
            } else if delta[c] > 0.0 {
                alpha = alpha.min(0.99 * (1.0 - u[c]) / delta[c]);
            }
        }
        let rn = r.norm();
        let mut next = &u + alpha * &delta;
        let mut rnext = residual(&next);
        let mut halvings = 0;
        while rnext.norm() > rn && halvings < 40 && delta.amax() > 1e3 * cfg.newton_tol {
            alpha *= 0.5;
            next = &u + alpha * &delta;
            rnext = residual(&next);
            halvings += 1;
        }
        u = next;
        r = rnext;
        if alpha * delta.amax() <= cfg.newton_tol * (1.0 + u.amax()) {
            return ScalarField::new(grid, u.iter().copied().collect());
        }
    }
    Err(Error::FixedPoint(Box::new(FixedPointFailure {
        best: CompositionField::from_reduced(grid, 1, u.as_slice()),
        gap: r.amax(),
        iterations: cfg.max_iter,
        suggested_tau: 0.5 * tau,
    })))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PsdReport {
    /// Smallest `zᵀ M(u) z` seen.
    pub worst: f64,
    /// Largest gap between `zᵀ M(u) z` and `½ Σ K_ij u_i u_j (z_i - z_j)²`.
    pub closed_form_error: f64,
}

/// Random `u` on the simplex and `z ∈ [-1, 1]^{n+1}`.
pub fn psd_random_test(k: &Interactions, samples: usize, seed: u64) -> Result<PsdReport> {
    let m = k.species();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::INFINITY;
    let mut err = 0.0f64;
    for _ in 0..samples {
        let e: Vec<f64> = (0..m).map(|_| -rng.gen_range(f64::MIN_POSITIVE..1.0).ln()).collect();
        let s: f64 = e.iter().sum();
        let u: Vec<f64> = e.iter().map(|v| v / s).collect();
        let z = DVector::from_iterator(m, (0..m).map(|_| rng.gen_range(-1.0..1.0)));
        let mob = model::mobility(&u, k)?;
        let q = z.dot(&(&mob * &z));
        worst = worst.min(q);
        err = err.max((q - model::mobility_quadratic_form(&u, z.as_slice(), k)).abs());
    }
    Ok(PsdReport {
        worst,
        closed_form_error: err,
    })
}

/// Random symmetric `K` with off-diagonal entries in `[lo, hi)`.
pub fn random_interactions(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Interactions {
    let m = n + 1;
    let mut vals = vec![0.0; m * m];
    for i in 0..m {
        for j in i + 1..m {
            let v = rng.gen_range(lo..hi);
            vals[i * m + j] = v;
            vals[j * m + i] = v;
        }
    }
    Interactions::from_values(m, vals).expect("positive symmetric table")
}

/// Random interior composition with every fraction at least `lo / (n+1)`.
pub fn random_interior(rng: &mut impl Rng, grid: Grid, n: usize, lo: f64) -> CompositionField {
    let mut x = Vec::with_capacity(grid.cell_count() * n);
    for _ in 0..grid.cell_count() {
        let v: Vec<f64> = (0..=n).map(|_| rng.gen_range(lo..1.0)).collect();
        let s: f64 = v.iter().sum();
        x.extend(v[1..].iter().map(|a| a / s));
    }
    CompositionField::from_reduced(grid, n, &x)
}

pub fn random_s2_problem(rng: &mut impl Rng, grid: Grid, n: usize, eps: f64, scale: f64) -> S2Problem {
    let f = (0..grid.cell_count() * n).map(|_| rng.gen_range(-scale..scale)).collect();
    S2Problem::from_forcing(grid, n, eps, f).expect("finite forcing")
}

/// Least-squares slope of `log err` against `log h`.
pub fn loglog_slope(hs: &[f64], errs: &[f64]) -> f64 {
    let xs: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// The oracle suite behind `verify`.
pub fn verify_all(seed: u64) -> Vec<OracleCheck> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut push = |name: &'static str, res: Result<(bool, String)>| {
        let (passed, detail) = res.unwrap_or_else(|e| (false, e.to_string()));
        out.push(OracleCheck { name, passed, detail });
    };

    push("mobility_psd", (|| {
        let mut worst = f64::INFINITY;
        let mut err = 0.0f64;
        for n in 1..=3 {
            let k = random_interactions(&mut rng, n, 0.1, 5.0);
            let r = psd_random_test(&k, 1000, rng.gen())?;
            worst = worst.min(r.worst);
            err = err.max(r.closed_form_error);
        }
        Ok((worst >= -1e-12 && err <= 1e-12, format!("min form {worst:e}, closed-form error {err:e}")))
    })());

    let grid4 = Grid::new_1d(4, 0.25).expect("valid grid");
    push("s2_gradient", (|| {
        let mut worst = 0.0f64;
        for _ in 0..5 {
            let n = rng.gen_range(1..=2);
            let prob = random_s2_problem(&mut rng, grid4, n, 1.0, 1.0);
            let v = random_interior(&mut rng, grid4, n, 0.2);
            worst = worst.max(fd_gradient_check(&prob, &v, 1e-5, rng.gen())?);
        }
        Ok((worst < 1e-6, format!("worst relative error {worst:e}")))
    })());

    push("s2_oracle", (|| {
        let mut worst = 0.0f64;
        for _ in 0..3 {
            let n = rng.gen_range(1..=2);
            let prob = random_s2_problem(&mut rng, grid4, n, 1.0, 1.0);
            let sol = s2::minimize_f(&prob, &CompositionField::uniform(grid4, n), &S2Options::default())?;
            let reference = brute_force_minimize(&prob, 100_000, 1e-3)?;
            let d = sup_distance(&sol.u, &reference);
            worst = worst.max(d);
        }
        Ok((worst <= 1e-6, format!("sup distance {worst:e}")))
    })());

    push("scalar_reference", (|| {
        let grid = Grid::new_1d(12, 1.0 / 12.0)?;
        let params = ModelParams::new(1, 0.01, 3.0, Interactions::uniform(1, 1.0)?, 1e-4)?;
        let cfg = StepConfig::default();
        let stepper = crate::stepper::Stepper::new(grid, params.clone(), cfg)?;
        let mut u = random_interior(&mut rng, grid, 1, 0.5);
        let mut worst = 0.0f64;
        for _ in 0..3 {
            let a = stepper.step(&u)?.u;
            let b = scalar_ch_reference(u.species(1), &params, &cfg)?;
            worst = worst.max(a.species(1).values().iter().zip(b.values()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max));
            u = a;
        }
        Ok((worst <= 1e-8, format!("sup distance {worst:e}")))
    })());
    out
}

/// `max |u_i - v_i|` over cells and species.
pub fn sup_distance(a: &CompositionField, b: &CompositionField) -> f64 {
    a.fractions()
        .iter()
        .zip(b.fractions())
        .flat_map(|(p, q)| p.values().iter().zip(q.values()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn dense_operators_match_grid() {
        for grid in [Grid::new_1d(5, 0.2).unwrap(), Grid::new_2d(3, 4, 0.5).unwrap()] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let f: Vec<f64> = (0..grid.cell_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ours = dense_neg_laplacian(&grid) * DVector::from_column_slice(&f);
            let theirs = grid.laplacian_values(&f);
            for (a, b) in ours.iter().zip(&theirs) {
                assert_abs_diff_eq!(*a, -b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn simplex_projection() {
        assert_eq!(project_simplex(&[0.2, 0.3, 0.5], 1.0), vec![0.2, 0.3, 0.5]);
        assert_eq!(project_simplex(&[2.0, 0.0], 1.0), vec![1.0, 0.0]);
        let p = project_simplex(&[0.6, 0.6], 1.0);
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-15);
        let p = project_simplex(&[-3.0, 0.4, 0.9], 1.0);
        assert_eq!(p[0], 0.0);
        assert_abs_diff_eq!(p[1] + p[2], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn fd_check_at_uniform_point() {
        let grid = Grid::new_1d(4, 0.25).unwrap();
        let prob = S2Problem::from_forcing(grid, 2, 1.0, vec![0.0; 8]).unwrap();
        let err = fd_gradient_check(&prob, &CompositionField::uniform(grid, 2), 1e-5, 3).unwrap();
        assert!(err < 1e-8, "{err:e}");
    }

    #[test]
    fn fd_error_is_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let grid = Grid::new_1d(4, 0.25).unwrap();
        let prob = random_s2_problem(&mut rng, grid, 2, 1.0, 1.0);
        let v = random_interior(&mut rng, grid, 2, 0.2);
        let hs = [1e-3, 1e-4, 1e-5];
        let errs: Vec<f64> = hs.iter().map(|h| fd_gradient_check(&prob, &v, *h, 9).unwrap()).collect();
        assert!(errs[2] < 1e-6);
        let slope = loglog_slope(&hs, &errs);
        assert!((slope - 2.0).abs() < 0.2, "slope {slope} from {errs:?}");
    }

    #[test]
    fn brute_force_softmax() {
        let grid = Grid::new_1d(1, 1.0).unwrap();
        let prob = S2Problem::from_forcing(grid, 2, 1.0, vec![2f64.ln(), 3f64.ln()]).unwrap();
        let u = brute_force_minimize(&prob, 20_000, 1e-2).unwrap();
        let c = u.cell(0);
        assert_abs_diff_eq!(c[0], 1.0 / 6.0, epsilon = 1e-5);
        assert_abs_diff_eq!(c[1], 1.0 / 3.0, epsilon = 1e-5);
        assert_abs_diff_eq!(c[2], 0.5, epsilon = 1e-5);
    }

    #[test]
    fn brute_force_agrees_with_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grid = Grid::new_1d(4, 0.25).unwrap();
        for _ in 0..3 {
            let prob = random_s2_problem(&mut rng, grid, 1, 1.0, 1.0);
            let sol = s2::minimize_f(&prob, &CompositionField::uniform(grid, 1), &S2Options::default()).unwrap();
            let reference = brute_force_minimize(&prob, 100_000, 1e-3).unwrap();
            assert!(sup_distance(&sol.u, &reference) <= 1e-6);
            assert!(s2::optimality_residual(&reference, &prob).unwrap() <= 1e-4);
            let fo = s2::objective_f(&reference, &prob).unwrap();
            let fm = s2::objective_f(&sol.u, &prob).unwrap();
            assert!(fo >= fm - 1e-8);
        }
    }

    #[test]
    fn psd_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = random_interactions(&mut rng, 2, 0.1, 3.0);
        let r = psd_random_test(&k, 1000, 6).unwrap();
        assert!(r.worst >= -1e-12 && r.closed_form_error <= 1e-12);
        // vertices and constant directions give a zero form
        assert_eq!(model::mobility_quadratic_form(&[0.0, 1.0, 0.0], &[0.3, -0.7, 0.2], &k), 0.0);
        assert_eq!(model::mobility_quadratic_form(&[0.2, 0.3, 0.5], &[0.4, 0.4, 0.4], &k), 0.0);
    }

    #[test]
    fn scalar_reference_uniform_is_stationary() {
        let grid = Grid::new_1d(6, 1.0 / 6.0).unwrap();
        let params = ModelParams::new(1, 0.01, 3.0, Interactions::uniform(1, 1.0).unwrap(), 1e-3).unwrap();
        let u = ScalarField::constant(grid, 0.5);
        let next = scalar_ch_reference(&u, &params, &StepConfig::default()).unwrap();
        for v in next.values() {
            assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-13);
        }
    }

    #[test]
    fn scalar_reference_energy_decreases() {
        // the convexity-splitting inequality controls the unlagged energy;
        // the lagged sequence can rise on rough data (it does here at p = 1)
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let grid = Grid::new_1d(10, 0.1).unwrap();
        let params = ModelParams::new(1, 0.01, 3.0, Interactions::uniform(1, 1.0).unwrap(), 1e-3).unwrap();
        let cfg = StepConfig::default();
        let mut u = random_interior(&mut rng, grid, 1, 0.5);
        let energy = |v: &CompositionField| model::EnergyReport::lagged(v, v, &params).total;
        for _ in 0..8 {
            let next = scalar_ch_reference(u.species(1), &params, &cfg).unwrap();
            let nu = CompositionField::from_reduced(grid, 1, next.values());
            assert!(energy(&nu) <= energy(&u) + 1e-12);
            u = nu;
        }
    }

    #[test]
    fn verify_suite_passes() {
        for check in verify_all(42) {
            assert!(check.passed, "{}: {}", check.name, check.detail);
        }
    }
}
