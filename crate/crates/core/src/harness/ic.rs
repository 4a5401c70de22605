//! Initial-condition presets. All of them go through
//! [`project_initial`], so the result is a valid composition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField};
use crate::model::{CompositionField, ModelParams};
use crate::stepper::project_initial;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Equal shares plus seeded uniform noise of size `amplitude`.
    UniformPerturbed,
    /// `u_0` a tanh step along x centred on cell `nx/2`; the other species
    /// share the rest equally.
    TanhInterface,
    /// Two discs rich in species 1 and 2 (both species 1 if `n = 1`). 2D only.
    TwoBlob,
}

impl Preset {
    pub const NAMES: [&'static str; 3] = ["uniform-perturbed", "tanh-interface", "two-blob"];

    pub fn name(self) -> &'static str {
        match self {
            Preset::UniformPerturbed => Self::NAMES[0],
            Preset::TanhInterface => Self::NAMES[1],
            Preset::TwoBlob => Self::NAMES[2],
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform-perturbed" => Ok(Preset::UniformPerturbed),
            "tanh-interface" => Ok(Preset::TanhInterface),
            "two-blob" => Ok(Preset::TwoBlob),
            other => Err(Error::invalid(
                "preset",
                format!("unknown preset `{other}`, expected one of {}", Self::NAMES.join(", ")),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialSpec {
    pub preset: Preset,
    /// Only `uniform-perturbed` is random.
    pub seed: u64,
    pub amplitude: f64,
    /// Interface width of the tanh profiles, in units of the domain length.
    pub width: f64,
}

impl Default for InitialSpec {
    fn default() -> Self {
        InitialSpec {
            preset: Preset::UniformPerturbed,
            seed: 0,
            amplitude: 0.01,
            width: 0.05,
        }
    }
}

fn step(d: f64, width: f64) -> f64 {
    0.5 * (1.0 - (d / width).tanh())
}

pub fn initial_condition(spec: &InitialSpec, grid: Grid, params: &ModelParams) -> Result<CompositionField> {
    let n = params.n;
    let m = n + 1;
    let cells = grid.cell_count();
    let lx = grid.h() * grid.nx() as f64;
    let ly = grid.h() * grid.ny() as f64;
    let mut raw = vec![vec![0.0; cells]; m];
    match spec.preset {
        Preset::UniformPerturbed => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let base = 1.0 / m as f64;
            for c in 0..cells {
                for f in raw.iter_mut() {
                    f[c] = base + spec.amplitude * rng.gen_range(-1.0..1.0);
                }
            }
        }
        Preset::TanhInterface => {
            let xc = grid.cell_center(grid.nx() / 2)[0];
            for c in 0..cells {
                let u0 = step(grid.cell_center(c)[0] - xc, spec.width * lx);
                // Exact 0.5 on the interface cell.
                let u0 = if grid.cell_center(c)[0] == xc { 0.5 } else { u0 };
                raw[0][c] = u0;
                for f in raw.iter_mut().skip(1) {
                    f[c] = (1.0 - u0) / n as f64;
                }
            }
        }
        Preset::TwoBlob => {
            if grid.dims() != 2 {
                return Err(Error::invalid("preset", "`two-blob` needs a 2D grid"));
            }
            let centres = [[0.3 * lx, 0.5 * ly], [0.7 * lx, 0.5 * ly]];
            let radius = 0.2 * lx.min(ly);
            let background = 0.1 / n as f64;
            for c in 0..cells {
                let x = grid.cell_center(c);
                let mut others = 0.0;
                for (i, f) in raw.iter_mut().enumerate().skip(1) {
                    let mut v = background;
                    for (k, ctr) in centres.iter().enumerate() {
                        if i == (k + 1).min(n) {
                            let d = ((x[0] - ctr[0]).powi(2) + (x[1] - ctr[1]).powi(2)).sqrt();
                            v += 0.85 * step(d - radius, spec.width * lx.min(ly));
                        }
                    }
                    f[c] = v;
                    others += v;
                }
                raw[0][c] = 1.0 - others;
            }
        }
    }
    let fields: Vec<ScalarField> = raw
        .into_iter()
        .map(|v| ScalarField::new(grid, v))
        .collect::<Result<_>>()?;
    project_initial(&fields).map(|(u, _)| u)
}
