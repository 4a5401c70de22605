//! Cell-centered uniform meshes on rectangles in one or two dimensions.
//!
//! Unknowns live at cell centers, gradients at interior faces. Boundary faces
//! are not stored: their normal component is zero, which is how the
//! homogeneous Neumann / no-flux condition enters every operator here.
//!
//! Sign convention: `divergence` is the net outflux of a cell divided by `h`,
//! so that `inner_l2(divergence(F), g) == -inner_faces(F, gradient(g))`.

use sprs::{CsMat, TriMat};

use crate::error::{Error, Result};

/// Uniform mesh with square cells of side `h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    dims: usize,
    nx: usize,
    ny: usize,
    h: f64,
}

impl Grid {
    pub fn new_1d(cells: usize, h: f64) -> Result<Self> {
        Self::build(1, cells, 1, h)
    }

    pub fn new_2d(nx: usize, ny: usize, h: f64) -> Result<Self> {
        Self::build(2, nx, ny, h)
    }

    /// `dims` must be 1 or 2; `cells` holds one entry per axis.
    pub fn new(cells: &[usize], h: f64) -> Result<Self> {
        match cells {
            [nx] => Self::new_1d(*nx, h),
            [nx, ny] => Self::new_2d(*nx, *ny, h),
            _ => Err(Error::invalid("dims", "only 1D and 2D grids are supported")),
        }
    }

    fn build(dims: usize, nx: usize, ny: usize, h: f64) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::invalid("cells", "need at least one cell per axis"));
        }
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::invalid("h", format!("spacing must be positive, got {h}")));
        }
        Ok(Grid { dims, nx, ny, h })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn cells_per_axis(&self) -> Vec<usize> {
        if self.dims == 1 {
            vec![self.nx]
        } else {
            vec![self.nx, self.ny]
        }
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn cell_count(&self) -> usize {
        self.nx * self.ny
    }

    /// Quadrature weight of one cell, `h^dims`. Faces carry the same weight.
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dims as i32)
    }

    /// `|Ω|`
    pub fn measure(&self) -> f64 {
        self.cell_count() as f64 * self.cell_volume()
    }

    fn x_face_count(&self) -> usize {
        (self.nx - 1) * self.ny
    }

    pub fn face_count(&self) -> usize {
        self.x_face_count() + self.nx * (self.ny - 1)
    }

    /// The two cells sharing interior face `f`, lower index first.
    pub fn face_cells(&self, f: usize) -> (usize, usize) {
        let nxf = self.x_face_count();
        if f < nxf {
            let iy = f / (self.nx - 1);
            let ix = f % (self.nx - 1);
            let c = iy * self.nx + ix;
            (c, c + 1)
        } else {
            let c = f - nxf;
            (c, c + self.nx)
        }
    }

    pub fn faces(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.face_count()).map(move |f| self.face_cells(f))
    }

    /// Cell center coordinates; the domain is `[0, nx h] x [0, ny h]`.
    pub fn cell_center(&self, c: usize) -> [f64; 2] {
        let ix = c % self.nx;
        let iy = c / self.nx;
        [(ix as f64 + 0.5) * self.h, (iy as f64 + 0.5) * self.h]
    }

    pub fn gradient_values(&self, f: &[f64]) -> Vec<f64> {
        debug_assert_eq!(f.len(), self.cell_count());
        let inv_h = 1.0 / self.h;
        self.faces().map(|(l, r)| (f[r] - f[l]) * inv_h).collect()
    }

    pub fn divergence_values(&self, flux: &[f64]) -> Vec<f64> {
        debug_assert_eq!(flux.len(), self.face_count());
        let inv_h = 1.0 / self.h;
        let mut out = vec![0.0; self.cell_count()];
        for (face, (l, r)) in self.faces().enumerate() {
            out[l] += flux[face] * inv_h;
            out[r] -= flux[face] * inv_h;
        }
        out
    }

    pub fn laplacian_values(&self, f: &[f64]) -> Vec<f64> {
        self.divergence_values(&self.gradient_values(f))
    }

    pub fn integrate_values(&self, f: &[f64]) -> f64 {
        f.iter().sum::<f64>() * self.cell_volume()
    }

    pub fn dot_cells(&self, f: &[f64], g: &[f64]) -> f64 {
        f.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() * self.cell_volume()
    }

    pub fn dot_faces(&self, f: &[f64], g: &[f64]) -> f64 {
        // each interior face carries a dual cell of the same volume as a cell
        f.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() * self.cell_volume()
    }

    /// Discrete gradient acting on `ncomp` interleaved components per cell:
    /// column `c * ncomp + s` maps to row `face * ncomp + s`.
    pub fn gradient_matrix(&self, ncomp: usize) -> CsMat<f64> {
        let inv_h = 1.0 / self.h;
        let mut tri = TriMat::with_capacity(
            (self.face_count() * ncomp, self.cell_count() * ncomp),
            2 * self.face_count() * ncomp,
        );
        for (face, (l, r)) in self.faces().enumerate() {
            for s in 0..ncomp {
                tri.add_triplet(face * ncomp + s, r * ncomp + s, inv_h);
                tri.add_triplet(face * ncomp + s, l * ncomp + s, -inv_h);
            }
        }
        tri.to_csr()
    }

    /// Matrix of `-Δ_h` on `ncomp` interleaved components (symmetric PSD).
    pub fn neg_laplacian_matrix(&self, ncomp: usize) -> CsMat<f64> {
        let g = self.gradient_matrix(ncomp);
        let gt: CsMat<f64> = g.transpose_view().to_csr();
        &gt * &g
    }
}

/// One value per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.cell_count() {
            return Err(Error::GridMismatch(format!(
                "{} values for {} cells",
                values.len(),
                grid.cell_count()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("non-finite value {} in cell {i}", values[i])));
        }
        Ok(ScalarField { grid, values })
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        ScalarField {
            grid,
            values: vec![value; grid.cell_count()],
        }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut([f64; 2]) -> f64) -> Result<Self> {
        let values = (0..grid.cell_count()).map(|c| f(grid.cell_center(c))).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub(crate) fn from_raw(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.cell_count());
        ScalarField { grid, values }
    }
}

/// One value per interior face: x-faces first (row by row), then y-faces.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceField {
    grid: Grid,
    values: Vec<f64>,
}

impl FaceField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.face_count() {
            return Err(Error::GridMismatch(format!(
                "{} values for {} interior faces",
                values.len(),
                grid.face_count()
            )));
        }
        Ok(FaceField { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        FaceField {
            grid,
            values: vec![0.0; grid.face_count()],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

fn same_grid(a: &Grid, b: &Grid) -> Result<()> {
    if a != b {
        return Err(Error::GridMismatch(format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

pub fn gradient(f: &ScalarField) -> FaceField {
    FaceField {
        grid: f.grid,
        values: f.grid.gradient_values(&f.values),
    }
}

pub fn divergence(flux: &FaceField) -> ScalarField {
    ScalarField {
        grid: flux.grid,
        values: flux.grid.divergence_values(&flux.values),
    }
}

/// `divergence(gradient(f))`: the five-point (three-point in 1D) stencil with
/// mirrored ghost cells.
pub fn laplacian_neumann(f: &ScalarField) -> ScalarField {
    ScalarField {
        grid: f.grid,
        values: f.grid.laplacian_values(&f.values),
    }
}

pub fn integrate(f: &ScalarField) -> f64 {
    f.grid.integrate_values(&f.values)
}

pub fn inner_l2(f: &ScalarField, g: &ScalarField) -> Result<f64> {
    same_grid(&f.grid, &g.grid)?;
    Ok(f.grid.dot_cells(&f.values, &g.values))
}

pub fn inner_faces(a: &FaceField, b: &FaceField) -> Result<f64> {
    same_grid(&a.grid, &b.grid)?;
    Ok(a.grid.dot_faces(&a.values, &b.values))
}

pub fn inner_h1(f: &ScalarField, g: &ScalarField) -> Result<f64> {
    same_grid(&f.grid, &g.grid)?;
    Ok(h1_values(&f.grid, &f.values, &g.values))
}

/// `∫ fg + ∇f·∇g + Δf Δg` with the discrete operators above.
pub fn inner_h2(f: &ScalarField, g: &ScalarField) -> Result<f64> {
    same_grid(&f.grid, &g.grid)?;
    Ok(h2_values(&f.grid, &f.values, &g.values))
}

pub(crate) fn h1_values(grid: &Grid, f: &[f64], g: &[f64]) -> f64 {
    grid.dot_cells(f, g) + grid.dot_faces(&grid.gradient_values(f), &grid.gradient_values(g))
}

pub(crate) fn h2_values(grid: &Grid, f: &[f64], g: &[f64]) -> f64 {
    h1_values(grid, f, g) + grid.dot_cells(&grid.laplacian_values(f), &grid.laplacian_values(g))
}
