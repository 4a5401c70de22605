//! Run configuration: `key = value` lines grouped under `[section]` headers
//! (a TOML subset). Every key is optional except where noted; unknown keys
//! are errors.
//!
//! ```text
//! [model]    n, eps, beta, tau, K (uniform), K_ij (per pair, e.g. K_01)
//! [grid]     dims, cells (integer or [nx, ny]), h
//! [initial]  preset, seed, amplitude, width
//! [run]      t_max, output, snapshot_stride
//! [solver]   method, tol_fp, max_iter, theta, s1_tol, s2_tol, s2_max_iter, newton_tol
//! ```

use std::path::PathBuf;

use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::{Interactions, ModelParams};
use crate::stepper::{FixedPointMethod, StepConfig};

use super::ic::{InitialSpec, Preset};

/// `τ = DEFAULT_TAU_FRACTION · t_c` with the diffusive time `t_c = L² / K̄`.
pub const DEFAULT_TAU_FRACTION: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub params: ModelParams,
    pub grid: Grid,
    pub initial: InitialSpec,
    pub t_max: f64,
    pub output: PathBuf,
    pub snapshot_stride: usize,
    pub step: StepConfig,
}

impl RunConfig {
    /// Replaces `τ` and re-validates.
    pub fn with_tau(&self, tau: f64) -> Result<Self> {
        let mut c = self.clone();
        c.params = self.params.with_tau(tau).map_err(|e| config_error(None, e))?;
        Ok(c)
    }

    /// The effective configuration, every key explicit. Parses back to `self`.
    pub fn to_toml(&self) -> String {
        let p = &self.params;
        let mut s = String::from("[model]\n");
        s += &format!("n = {}\neps = {:e}\nbeta = {:e}\ntau = {:e}\n", p.n, p.eps, p.beta, p.tau);
        for i in 0..=p.n {
            for j in i + 1..=p.n {
                s += &format!("K_{i}_{j} = {:e}\n", p.k.get(i, j));
            }
        }
        let cells = self.grid.cells_per_axis();
        let cells = cells.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(", ");
        s += &format!("\n[grid]\ndims = {}\ncells = [{cells}]\nh = {:e}\n", self.grid.dims(), self.grid.h());
        let ic = &self.initial;
        s += &format!(
            "\n[initial]\npreset = \"{}\"\nseed = {}\namplitude = {:e}\nwidth = {:e}\n",
            ic.preset.name(),
            ic.seed,
            ic.amplitude,
            ic.width
        );
        s += &format!(
            "\n[run]\nt_max = {:e}\noutput = {:?}\nsnapshot_stride = {}\n",
            self.t_max,
            self.output.display().to_string(),
            self.snapshot_stride
        );
        let st = &self.step;
        let method = match st.method {
            FixedPointMethod::Newton => "newton",
            FixedPointMethod::Picard => "picard",
        };
        s += &format!(
            "\n[solver]\nmethod = \"{method}\"\ntol_fp = {:e}\nmax_iter = {}\ntheta = {:e}\ns1_tol = {:e}\ns2_tol = {:e}\ns2_max_iter = {}\nnewton_tol = {:e}\n",
            st.tol_fp, st.max_iter, st.theta, st.s1_tol, st.s2.tol, st.s2.max_iter, st.newton_tol
        );
        s
    }
}

const SECTIONS: &[(&str, &[&str])] = &[
    ("model", &["n", "eps", "beta", "tau", "K"]),
    ("grid", &["dims", "cells", "h"]),
    ("initial", &["preset", "seed", "amplitude", "width"]),
    ("run", &["t_max", "output", "snapshot_stride"]),
    (
        "solver",
        &["method", "tol_fp", "max_iter", "theta", "s1_tol", "s2_tol", "s2_max_iter", "newton_tol"],
    ),
];

fn config_error(line: Option<usize>, e: impl std::fmt::Display) -> Error {
    Error::Config {
        line,
        message: e.to_string(),
    }
}

/// 1-based line of `key` inside `[section]`, or of the header itself.
fn locate(text: &str, section: &str, key: Option<&str>) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(rest) = line.strip_prefix('[') {
            current = rest.trim_end_matches(']').trim().to_string();
            if key.is_none() && current == section {
                return Some(i + 1);
            }
            continue;
        }
        if current != section {
            continue;
        }
        if let (Some(k), Some((lhs, _))) = (key, line.split_once('=')) {
            if lhs.trim().trim_matches('"') == k {
                return Some(i + 1);
            }
        }
    }
    None
}

/// `K_ij` or `K_i_j` → `(i, j)`.
fn parse_k_key(key: &str) -> Option<(usize, usize)> {
    let rest = key.strip_prefix("K_")?;
    if let Some((a, b)) = rest.split_once('_') {
        return Some((a.parse().ok()?, b.parse().ok()?));
    }
    let digits: Vec<char> = rest.chars().collect();
    if digits.len() == 2 && digits.iter().all(|c| c.is_ascii_digit()) {
        return Some((digits[0].to_digit(10)? as usize, digits[1].to_digit(10)? as usize));
    }
    None
}

struct Reader<'a> {
    text: &'a str,
    section: &'static str,
    table: Table,
}

impl Reader<'_> {
    fn line(&self, key: &str) -> Option<usize> {
        locate(self.text, self.section, Some(key))
    }

    fn err(&self, key: &str, msg: impl std::fmt::Display) -> Error {
        config_error(self.line(key), format!("`{}.{key}`: {msg}", self.section))
    }

    fn float(&self, key: &str, default: f64) -> Result<f64> {
        match self.table.get(key) {
            None => Ok(default),
            Some(Value::Float(v)) => Ok(*v),
            Some(Value::Integer(v)) => Ok(*v as f64),
            Some(other) => Err(self.err(key, format!("expected a number, got {}", other.type_str()))),
        }
    }

    fn opt_float(&self, key: &str) -> Result<Option<f64>> {
        if self.table.contains_key(key) {
            self.float(key, 0.0).map(Some)
        } else {
            Ok(None)
        }
    }

    fn uint(&self, key: &str, default: usize) -> Result<usize> {
        match self.table.get(key) {
            None => Ok(default),
            Some(Value::Integer(v)) if *v >= 0 => Ok(*v as usize),
            Some(Value::Integer(v)) => Err(self.err(key, format!("must be nonnegative, got {v}"))),
            Some(other) => Err(self.err(key, format!("expected an integer, got {}", other.type_str()))),
        }
    }

    fn string(&self, key: &str, default: &str) -> Result<String> {
        match self.table.get(key) {
            None => Ok(default.to_string()),
            Some(Value::String(s)) => Ok(s.clone()),
            Some(other) => Err(self.err(key, format!("expected a string, got {}", other.type_str()))),
        }
    }

    fn positive(&self, key: &str, v: f64) -> Result<f64> {
        if v.is_finite() && v > 0.0 {
            Ok(v)
        } else {
            Err(self.err(key, format!("must be positive, got {v}")))
        }
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let root: Table = text.parse().map_err(|e: toml::de::Error| {
        let line = e.span().map(|s| text[..s.start.min(text.len())].lines().count().max(1));
        config_error(line, e.message())
    })?;
    let mut sections: Vec<Reader> = Vec::new();
    for (name, value) in &root {
        let Some((sec, keys)) = SECTIONS.iter().find(|(s, _)| s == name) else {
            return Err(config_error(
                locate(text, name, None).or_else(|| locate(text, "", Some(name))),
                format!("unknown section or top-level key `{name}`"),
            ));
        };
        let Value::Table(table) = value else {
            return Err(config_error(locate(text, "", Some(name)), format!("`{name}` must be a section")));
        };
        for key in table.keys() {
            let known = keys.contains(&key.as_str()) || (*sec == "model" && parse_k_key(key).is_some());
            if !known {
                return Err(config_error(locate(text, sec, Some(key)), format!("unknown key `{sec}.{key}`")));
            }
        }
        sections.push(Reader {
            text,
            section: sec,
            table: table.clone(),
        });
    }
    let get = |name: &'static str| {
        sections
            .iter()
            .position(|r| r.section == name)
            .map(|i| Reader {
                text,
                section: sections[i].section,
                table: sections[i].table.clone(),
            })
            .unwrap_or(Reader {
                text,
                section: name,
                table: Table::new(),
            })
    };
    let (model, grid_sec, initial, run, solver) = (get("model"), get("grid"), get("initial"), get("run"), get("solver"));

    // grid
    let dims = grid_sec.uint("dims", 1)?;
    if dims != 1 && dims != 2 {
        return Err(grid_sec.err("dims", format!("must be 1 or 2, got {dims}")));
    }
    let cells: Vec<usize> = match grid_sec.table.get("cells") {
        None => vec![64; dims],
        Some(Value::Integer(v)) if *v > 0 => vec![*v as usize; dims],
        Some(Value::Array(a)) => a
            .iter()
            .map(|v| match v {
                Value::Integer(x) if *x > 0 => Ok(*x as usize),
                _ => Err(grid_sec.err("cells", "entries must be positive integers")),
            })
            .collect::<Result<_>>()?,
        Some(_) => return Err(grid_sec.err("cells", "expected a positive integer or an array")),
    };
    if cells.len() != dims {
        return Err(grid_sec.err("cells", format!("expected {dims} entries, got {}", cells.len())));
    }
    let h = grid_sec.positive("h", grid_sec.float("h", 1.0 / cells[0] as f64)?)?;
    let grid = Grid::new(&cells, h).map_err(|e| config_error(grid_sec.line("cells"), e))?;

    // model
    let n = model.uint("n", 1)?;
    if n == 0 {
        return Err(model.err("n", "need at least one species besides species 0"));
    }
    let eps = model.positive("eps", model.float("eps", 1e-3)?)?;
    let beta = model.positive("beta", model.float("beta", 10.0)?)?;
    let k_default = model.positive("K", model.float("K", 1.0)?)?;
    let m = n + 1;
    let mut kv = vec![k_default; m * m];
    for i in 0..m {
        kv[i * m + i] = 0.0;
    }
    for key in model.table.keys() {
        if let Some((i, j)) = parse_k_key(key) {
            if i >= m || j >= m || i == j {
                return Err(model.err(key, format!("no off-diagonal pair ({i}, {j}) for {m} species")));
            }
            let v = model.float(key, 0.0)?;
            kv[i * m + j] = v;
            kv[j * m + i] = v;
        }
    }
    let k = Interactions::from_values(m, kv).map_err(|e| match &e {
        Error::InvalidParameter { field, .. } => {
            let line = model.line(field).or_else(|| {
                let (i, j) = parse_k_key(field).unwrap_or((0, 0));
                model.line(&format!("K_{j}{i}")).or_else(|| model.line("K"))
            });
            config_error(line, e)
        }
        _ => config_error(None, e),
    })?;
    let span = grid.h() * cells.iter().copied().max().unwrap_or(1) as f64;
    let tau_default = DEFAULT_TAU_FRACTION * span * span / k.max_off_diagonal();
    let tau = model.positive("tau", model.float("tau", tau_default)?)?;
    let params = ModelParams::new(n, eps, beta, k, tau).map_err(|e| config_error(None, e))?;

    // initial condition
    let preset_name = initial.string("preset", "uniform-perturbed")?;
    let preset: Preset = preset_name.parse().map_err(|e| config_error(initial.line("preset"), e))?;
    if preset == Preset::TwoBlob && dims != 2 {
        return Err(initial.err("preset", "`two-blob` needs a 2D grid"));
    }
    let amplitude = initial.float("amplitude", 0.01)?;
    if !(amplitude.is_finite() && amplitude >= 0.0) {
        return Err(initial.err("amplitude", format!("must be nonnegative, got {amplitude}")));
    }
    let seed = match initial.table.get("seed") {
        None => 0,
        Some(Value::Integer(v)) if *v >= 0 => *v as u64,
        Some(_) => return Err(initial.err("seed", "expected a nonnegative integer")),
    };
    let initial_spec = InitialSpec {
        preset,
        seed,
        amplitude,
        width: initial.positive("width", initial.float("width", 0.05)?)?,
    };

    // run
    let t_max = run.positive("t_max", run.float("t_max", 1e-3)?)?;
    let output = PathBuf::from(run.string("output", "out")?);
    let snapshot_stride = run.uint("snapshot_stride", 10)?;
    if snapshot_stride == 0 {
        return Err(run.err("snapshot_stride", "must be at least 1"));
    }

    // solver
    let method = solver
        .string("method", "newton")?
        .parse::<FixedPointMethod>()
        .map_err(|e| config_error(solver.line("method"), e))?;
    let mut step = StepConfig {
        method,
        ..StepConfig::default()
    };
    if let Some(v) = solver.opt_float("tol_fp")? {
        step.tol_fp = solver.positive("tol_fp", v)?;
    }
    step.max_iter = solver.uint("max_iter", step.max_iter)?;
    if step.max_iter == 0 {
        return Err(solver.err("max_iter", "must be at least 1"));
    }
    step.theta = solver.float("theta", step.theta)?;
    if !(step.theta > 0.0 && step.theta <= 1.0) {
        return Err(solver.err("theta", format!("must lie in (0, 1], got {}", step.theta)));
    }
    if let Some(v) = solver.opt_float("s1_tol")? {
        step.s1_tol = solver.positive("s1_tol", v)?;
    }
    if let Some(v) = solver.opt_float("s2_tol")? {
        step.s2.tol = solver.positive("s2_tol", v)?;
    }
    step.s2.max_iter = solver.uint("s2_max_iter", step.s2.max_iter)?;
    if let Some(v) = solver.opt_float("newton_tol")? {
        step.newton_tol = solver.positive("newton_tol", v)?;
    }
    step.validate().map_err(|e| config_error(None, e))?;

    Ok(RunConfig {
        params,
        grid,
        initial: initial_spec,
        t_max,
        output,
        snapshot_stride,
        step,
    })
}
