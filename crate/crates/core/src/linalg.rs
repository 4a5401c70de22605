//! Sparse linear algebra shared by the solvers: Jacobi-preconditioned CG,
//! a dense Cholesky path for small systems, and a banded LU for the
//! nonsymmetric Newton systems of the time step.

use nalgebra::{DMatrix, DVector};
use sprs::CsMat;

use crate::error::{Error, Result};

/// Largest system routed to the dense Cholesky fallback.
pub const DENSE_LIMIT: usize = 2048;

pub fn matvec(a: &CsMat<f64>, x: &[f64]) -> Vec<f64> {
    debug_assert!(a.is_csr());
    a.outer_iterator()
        .map(|row| row.iter().map(|(j, v)| v * x[j]).sum())
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn relative_residual(a: &CsMat<f64>, x: &[f64], b: &[f64]) -> f64 {
    let ax = matvec(a, x);
    let r: Vec<f64> = ax.iter().zip(b).map(|(p, q)| q - p).collect();
    let bn = norm2(b);
    if bn == 0.0 {
        norm2(&r)
    } else {
        norm2(&r) / bn
    }
}

/// `b - A x` with each row accumulated in twice the working precision
/// (error-free products and sums), rounded once at the end.
pub fn residual_compensated(a: &CsMat<f64>, x: &[f64], b: &[f64]) -> Vec<f64> {
    a.outer_iterator()
        .zip(b)
        .map(|(row, &bi)| {
            let (mut s, mut c) = (bi, 0.0f64);
            for (j, &v) in row.iter() {
                let p = -v * x[j];
                let e = (-v).mul_add(x[j], -p);
                let t = s + p;
                let z = t - s;
                c += (s - (t - z)) + (p - z) + e;
                s = t;
            }
            s + c
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SolveInfo {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
    pub dense: bool,
}

/// Conjugate gradient with diagonal preconditioning for SPD `a`.
pub fn pcg(a: &CsMat<f64>, b: &[f64], x0: Option<&[f64]>, tol: f64, max_iter: usize) -> Result<SolveInfo> {
    let n = b.len();
    let bn = norm2(b);
    if bn == 0.0 {
        return Ok(SolveInfo {
            x: vec![0.0; n],
            iterations: 0,
            relative_residual: 0.0,
            dense: false,
        });
    }
    let inv_diag: Vec<f64> = a
        .diag()
        .to_dense()
        .iter()
        .map(|d| if *d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let mut x = x0.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
    let ax = matvec(a, &x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(p, q)| p - q).collect();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(p, q)| p * q).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut res = norm2(&r) / bn;
    let mut it = 0;
    while res > tol && it < max_iter {
        let ap = matvec(a, &p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        it += 1;
        // recompute the true residual now and then to avoid drift
        if it % 50 == 0 {
            let ax = matvec(a, &x);
            for i in 0..n {
                r[i] = b[i] - ax[i];
            }
        }
        res = norm2(&r) / bn;
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let relative_residual = relative_residual(a, &x, b);
    if relative_residual > tol {
        return Err(Error::LinearSolver {
            iterations: it,
            residual: relative_residual,
        });
    }
    Ok(SolveInfo {
        x,
        iterations: it,
        relative_residual,
        dense: false,
    })
}

pub fn to_dense(a: &CsMat<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.rows(), a.cols());
    for (v, (i, j)) in a.iter() {
        m[(i, j)] += *v;
    }
    m
}

pub fn dense_cholesky_solve(a: &CsMat<f64>, b: &[f64]) -> Option<Vec<f64>> {
    let chol = to_dense(a).cholesky()?;
    Some(chol.solve(&DVector::from_column_slice(b)).iter().copied().collect())
}

/// PCG first; systems up to [`DENSE_LIMIT`] unknowns fall back to a dense
/// Cholesky factorization (plus one refinement sweep) when PCG stalls.
pub fn solve_spd(a: &CsMat<f64>, b: &[f64], x0: Option<&[f64]>, tol: f64, max_iter: usize) -> Result<SolveInfo> {
    match pcg(a, b, x0, tol, max_iter) {
        Ok(info) => Ok(info),
        Err(err) if b.len() <= DENSE_LIMIT => {
            let mut x = dense_cholesky_solve(a, b).ok_or(err)?;
            let ax = matvec(a, &x);
            let r: Vec<f64> = b.iter().zip(&ax).map(|(p, q)| p - q).collect();
            if let Some(dx) = dense_cholesky_solve(a, &r) {
                x.iter_mut().zip(dx).for_each(|(xi, d)| *xi += d);
            }
            let relative_residual = relative_residual(a, &x, b);
            if relative_residual > tol {
                return Err(Error::LinearSolver {
                    iterations: max_iter,
                    residual: relative_residual,
                });
            }
            Ok(SolveInfo {
                x,
                iterations: max_iter,
                relative_residual,
                dense: true,
            })
        }
        Err(err) => Err(err),
    }
}

/// LU factorization with partial pivoting of a square band matrix.
///
/// Row `i` stores columns `i - kl ..= i + kl + ku`; the extra `kl` diagonals
/// hold the fill-in produced by row interchanges.
#[derive(Debug, Clone)]
pub struct BandLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    band: Vec<f64>,
    lower: Vec<f64>,
    pivots: Vec<usize>,
}

impl BandLu {
    pub fn factor(a: &CsMat<f64>) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::domain("band LU needs a square matrix"));
        }
        let (mut kl, mut ku) = (0usize, 0usize);
        for (_, (i, j)) in a.iter() {
            if i > j {
                kl = kl.max(i - j);
            } else {
                ku = ku.max(j - i);
            }
        }
        let width = 2 * kl + ku + 1;
        let mut lu = BandLu {
            n,
            kl,
            ku,
            width,
            band: vec![0.0; n * width],
            lower: vec![0.0; n * kl.max(1)],
            pivots: vec![0; n],
        };
        for (v, (i, j)) in a.iter() {
            let idx = lu.index(i, j);
            lu.band[idx] += *v;
        }
        lu.eliminate()?;
        Ok(lu)
    }

    #[inline]
    fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.kl >= i && j <= i + self.kl + self.ku);
        i * self.width + (j + self.kl - i)
    }

    fn eliminate(&mut self) -> Result<()> {
        let (n, kl) = (self.n, self.kl);
        let reach = kl + self.ku;
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let last_col = (k + reach).min(n - 1);
            let mut p = k;
            let mut best = self.band[self.index(k, k)].abs();
            for r in k + 1..=last_row {
                let v = self.band[self.index(r, k)].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return Err(Error::domain(format!("singular matrix at column {k}")));
            }
            self.pivots[k] = p;
            if p != k {
                for c in k..=last_col {
                    let (a, b) = (self.index(k, c), self.index(p, c));
                    self.band.swap(a, b);
                }
            }
            let pivot = self.band[self.index(k, k)];
            for r in k + 1..=last_row {
                let ir = self.index(r, k);
                let l = self.band[ir] / pivot;
                self.band[ir] = 0.0;
                self.lower[k * kl.max(1) + (r - k - 1)] = l;
                if l != 0.0 {
                    for c in k + 1..=last_col {
                        let kc = self.band[self.index(k, c)];
                        let rc = self.index(r, c);
                        self.band[rc] -= l * kc;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, kl) = (self.n, self.kl);
        let mut x = b.to_vec();
        for k in 0..n {
            x.swap(k, self.pivots[k]);
            let xk = x[k];
            for r in k + 1..=(k + kl).min(n - 1) {
                x[r] -= self.lower[k * kl.max(1) + (r - k - 1)] * xk;
            }
        }
        let reach = kl + self.ku;
        for k in (0..n).rev() {
            let mut s = x[k];
            for c in k + 1..=(k + reach).min(n - 1) {
                s -= self.band[self.index(k, c)] * x[c];
            }
            x[k] = s / self.band[self.index(k, k)];
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use sprs::TriMat;

    fn random_band(rng: &mut impl Rng, n: usize, kl: usize, ku: usize) -> CsMat<f64> {
        let mut t = TriMat::new((n, n));
        for i in 0..n {
            for j in i.saturating_sub(kl)..=(i + ku).min(n - 1) {
                let v: f64 = rng.gen_range(-1.0..1.0);
                // weak diagonal so that pivoting actually happens
                t.add_triplet(i, j, if i == j && kl > 0 { 0.1 * v } else if i == j { 2.0 + v } else { v });
            }
        }
        t.to_csr()
    }

    #[test]
    fn band_lu_matches_dense_lu() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(n, kl, ku) in &[(1, 0, 0), (5, 1, 1), (30, 4, 2), (40, 2, 7), (25, 0, 3), (25, 3, 0)] {
            let a = random_band(&mut rng, n, kl, ku);
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = BandLu::factor(&a).unwrap().solve(&b);
            let dm = to_dense(&a);
            // normwise backward error, which partial pivoting controls
            let ax = matvec(&a, &x);
            let r = ax.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            let a_inf = dm.row_iter().map(|row| row.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
            assert!(r <= 1e-12 * (a_inf * norm_inf(&x) + norm_inf(&b)), "n={n} kl={kl} ku={ku}");
            let sv = dm.clone().singular_values();
            let cond = sv.max() / sv.min();
            if cond < 1e6 {
                let dense = dm.lu().solve(&DVector::from_column_slice(&b)).unwrap();
                for (p, q) in x.iter().zip(dense.iter()) {
                    assert!((p - q).abs() <= 1e-12 * cond * (1.0 + q.abs()), "n={n} kl={kl} ku={ku}: {p} vs {q}");
                }
            }
        }
    }

    #[test]
    fn band_lu_detects_singularity() {
        let mut t = TriMat::new((2, 2));
        t.add_triplet(0, 0, 1.0);
        t.add_triplet(0, 1, 2.0);
        t.add_triplet(1, 0, 2.0);
        t.add_triplet(1, 1, 4.0);
        assert!(BandLu::factor(&t.to_csr()).is_err());
    }

    fn spd(n: usize) -> CsMat<f64> {
        // 1D Laplacian plus a small shift
        let mut t = TriMat::new((n, n));
        for i in 0..n {
            t.add_triplet(i, i, 2.0 + 1e-3);
            if i + 1 < n {
                t.add_triplet(i, i + 1, -1.0);
                t.add_triplet(i + 1, i, -1.0);
            }
        }
        t.to_csr()
    }

    #[test]
    fn pcg_and_dense_agree() {
        let a = spd(50);
        let b: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let it = pcg(&a, &b, None, 1e-12, 1000).unwrap();
        let d = dense_cholesky_solve(&a, &b).unwrap();
        for (p, q) in it.x.iter().zip(&d) {
            assert!((p - q).abs() < 1e-8 * (1.0 + q.abs()));
        }
        assert!(it.relative_residual <= 1e-12);
    }

    #[test]
    fn pcg_zero_rhs_is_zero() {
        let info = pcg(&spd(10), &[0.0; 10], None, 1e-10, 10).unwrap();
        assert!(info.x.iter().all(|v| *v == 0.0));
        assert_eq!(info.iterations, 0);
    }

    #[test]
    fn solve_spd_falls_back_to_dense() {
        let a = spd(200);
        let b: Vec<f64> = (0..200).map(|i| (i as f64).cos()).collect();
        assert!(pcg(&a, &b, None, 1e-12, 3).is_err());
        let info = solve_spd(&a, &b, None, 1e-12, 3).unwrap();
        assert!(info.dense);
        assert!(info.relative_residual <= 1e-12);
    }
}
