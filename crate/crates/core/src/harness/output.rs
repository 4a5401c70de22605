//! CSV snapshots, the entropy log, and the per-run driver.
//!
//! Floats are written with 17 significant digits, enough to read every value
//! back bitwise.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField};
use crate::model::{CompositionField, MonitorRecord, SIMPLEX_TOL};
use crate::stepper::{self, StepRecord, Trajectory};

use super::config::RunConfig;
use super::ic::initial_condition;

/// Entropy may rise by at most this times `1 + |E|` per step.
pub const ENTROPY_TOL: f64 = 1e-8;
/// Bound on `|∫(u_i^{p+1} - u_i^p) + τ² ∫ w̄_i^{p+1}|`.
pub const MASS_DRIFT_TOL: f64 = 1e-10;

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_snapshot(t: f64, u: &CompositionField, path: &Path) -> Result<()> {
    let grid = u.grid();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["cell".to_string(), "x".to_string()];
    if grid.dims() == 2 {
        header.push("y".into());
    }
    header.extend((0..=u.n()).map(|i| format!("u_{i}")));
    w.write_record(&header)?;
    for c in 0..grid.cell_count() {
        let x = grid.cell_center(c);
        let mut row = vec![c.to_string(), fmt(x[0])];
        if grid.dims() == 2 {
            row.push(fmt(x[1]));
        }
        row.extend(u.fractions().iter().map(|f| fmt(f.values()[c])));
        w.write_record(&row)?;
    }
    let body = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    let mut file = fs::File::create(path)?;
    writeln!(file, "# t = {}", fmt(t))?;
    file.write_all(&body)?;
    Ok(())
}

/// Reads a snapshot written by [`write_snapshot`] on `grid`.
pub fn read_snapshot(path: &Path, grid: Grid) -> Result<(f64, CompositionField)> {
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let t = first
        .trim()
        .strip_prefix("# t =")
        .and_then(|s| s.trim().parse::<f64>().ok())
        .ok_or_else(|| Error::domain(format!("{}: missing `# t = ...` line", path.display())))?;
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers()?.clone();
    let skip = if grid.dims() == 2 { 3 } else { 2 };
    let species = header.len().saturating_sub(skip);
    if species < 2 {
        return Err(Error::domain(format!("{}: no species columns", path.display())));
    }
    let mut cols = vec![Vec::with_capacity(grid.cell_count()); species];
    for rec in rdr.records() {
        let rec = rec?;
        for (i, col) in cols.iter_mut().enumerate() {
            let v: f64 = rec[skip + i]
                .parse()
                .map_err(|_| Error::domain(format!("{}: bad number `{}`", path.display(), &rec[skip + i])))?;
            col.push(v);
        }
    }
    let fields = cols
        .into_iter()
        .map(|v| ScalarField::new(grid, v))
        .collect::<Result<Vec<_>>>()?;
    Ok((t, CompositionField::new(fields)?))
}

pub fn entropy_log_header(n: usize) -> Vec<String> {
    let mut h: Vec<String> = ["step", "time", "E", "E_conv", "E_conc"].iter().map(|s| s.to_string()).collect();
    h.extend((0..=n).map(|i| format!("mass_{i}")));
    h.extend((1..=n).map(|i| format!("drift_{i}")));
    h.extend(MonitorRecord::NAMES.iter().map(|s| s.to_string()));
    h.extend(["picard_iters", "fp_gap", "delta_observed"].iter().map(|s| s.to_string()));
    h
}

/// One row per accepted step. `drift_i` is the predicted `-τ² ∫ w̄_i`.
pub fn write_entropy_log(records: &[StepRecord], path: &Path) -> Result<()> {
    let n = records.first().map(|r| r.u.n()).unwrap_or(1);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(entropy_log_header(n))?;
    for r in records {
        let rep = &r.report;
        let mut row = vec![r.step.to_string(), fmt(r.time), fmt(rep.energy.total), fmt(rep.energy.conv), fmt(rep.energy.conc)];
        row.extend(rep.mass.iter().map(|&v| fmt(v)));
        row.extend(rep.predicted_drift.iter().map(|&v| fmt(v)));
        row.extend(rep.monitors.as_array().iter().map(|&v| fmt(v)));
        row.push(rep.iterations.to_string());
        row.push(fmt(rep.fp_gap));
        row.push(fmt(rep.delta_observed));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    InvariantFailure,
    SolverFailure,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Ok => 0,
            RunStatus::InvariantFailure => 1,
            RunStatus::SolverFailure => 2,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub status: RunStatus,
    pub error: Option<String>,
    pub tau: f64,
    pub steps: usize,
    pub t_final: f64,
    pub checks: Vec<Check>,
    pub cumulative_monitors: MonitorRecord,
    pub max_newton_iterations: usize,
}

/// Invariant checks over an accepted (possibly partial) trajectory. The
/// entropy check starts at step 1: the first step pairs `u^1` with the
/// unlagged initial energy.
pub fn invariant_checks(traj: &Trajectory) -> Vec<Check> {
    let mut min_fraction = traj.initial.min_fraction();
    let mut simplex = traj.initial.simplex_defect().0;
    let mut drift = 0.0f64;
    let mut rise = f64::NEG_INFINITY;
    let mut fp_excess = 0.0f64;
    for (i, s) in traj.steps.iter().enumerate() {
        let (d, m) = s.u.simplex_defect();
        simplex = simplex.max(d);
        min_fraction = min_fraction.min(m);
        drift = drift.max(s.report.mass_drift_defect());
        fp_excess = fp_excess.max(s.report.fp_gap / s.report.fp_floor.max(f64::MIN_POSITIVE));
        if i > 0 {
            let e0 = traj.steps[i - 1].report.energy.total;
            rise = rise.max((s.report.energy.total - e0) / (1.0 + e0.abs()));
        }
    }
    let rise = if rise.is_finite() { rise } else { 0.0 };
    vec![
        Check {
            name: "positivity",
            passed: min_fraction > 0.0,
            value: min_fraction,
            tolerance: 0.0,
        },
        Check {
            name: "simplex",
            passed: simplex <= SIMPLEX_TOL,
            value: simplex,
            tolerance: SIMPLEX_TOL,
        },
        Check {
            name: "entropy_nonincreasing",
            passed: rise <= ENTROPY_TOL,
            value: rise,
            tolerance: ENTROPY_TOL,
        },
        Check {
            name: "mass_drift_identity",
            passed: drift <= MASS_DRIFT_TOL,
            value: drift,
            tolerance: MASS_DRIFT_TOL,
        },
    ]
}

pub fn snapshot_path(dir: &Path, step: usize) -> PathBuf {
    dir.join("snapshots").join(format!("step_{step:06}.csv"))
}

/// Runs `cfg` into `dir`: `config.toml`, `snapshots/`, `entropy.csv` and
/// `summary.json`. Returns the trajectory with the summary; solver and
/// invariant failures are reported in the summary, not as `Err`.
pub fn run_to_dir(cfg: &RunConfig, dir: &Path) -> Result<(Trajectory, RunSummary)> {
    fs::create_dir_all(dir.join("snapshots"))?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let u0 = initial_condition(&cfg.initial, cfg.grid, &cfg.params)?;
    write_snapshot(0.0, &u0, &snapshot_path(dir, 0))?;
    let stride = cfg.snapshot_stride;
    let mut io_error: Option<Error> = None;
    let outcome = stepper::run(&u0, &cfg.params, &cfg.step, cfg.t_max, |rec| {
        if io_error.is_none() && rec.step % stride == 0 {
            if let Err(e) = write_snapshot(rec.time, &rec.u, &snapshot_path(dir, rec.step)) {
                io_error = Some(e);
            }
        }
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    let (traj, failure) = match outcome {
        Ok(t) => (t, None),
        Err(f) => (f.partial, Some(f.error)),
    };
    if let Some(last) = traj.steps.last() {
        if last.step % stride != 0 {
            write_snapshot(last.time, &last.u, &snapshot_path(dir, last.step))?;
        }
    }
    write_entropy_log(&traj.steps, &dir.join("entropy.csv"))?;
    let checks = invariant_checks(&traj);
    let status = match &failure {
        Some(e) if e.is_solver_failure() => RunStatus::SolverFailure,
        Some(_) => RunStatus::InvariantFailure,
        None if checks.iter().all(|c| c.passed) => RunStatus::Ok,
        None => RunStatus::InvariantFailure,
    };
    let summary = RunSummary {
        status,
        error: failure.map(|e| e.to_string()),
        tau: traj.tau,
        steps: traj.steps.len(),
        t_final: traj.steps.last().map(|s| s.time).unwrap_or(0.0),
        checks,
        cumulative_monitors: traj.cumulative_monitors(),
        max_newton_iterations: traj.steps.iter().map(|s| s.report.iterations).max().unwrap_or(0),
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Io(e.into()))?;
    fs::write(dir.join("summary.json"), json + "\n")?;
    Ok((traj, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CompositionField, Interactions, ModelParams};
    use crate::stepper::StepConfig;

    #[test]
    fn snapshot_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        for grid in [Grid::new_1d(7, 0.1).unwrap(), Grid::new_2d(3, 4, 0.3).unwrap()] {
            let x: Vec<f64> = (0..2 * grid.cell_count()).map(|k| 0.1 + 0.3 * ((k as f64) * 0.7).sin().abs()).collect();
            let u = CompositionField::from_reduced(grid, 2, &x.iter().map(|v| v / 2.0).collect::<Vec<_>>());
            let p = dir.path().join("s.csv");
            write_snapshot(1.0 / 3.0, &u, &p).unwrap();
            let (t, back) = read_snapshot(&p, grid).unwrap();
            assert_eq!(t.to_bits(), (1.0f64 / 3.0).to_bits());
            for (a, b) in u.fractions().iter().zip(back.fractions()) {
                let same = a.values().iter().zip(b.values()).all(|(p, q)| p.to_bits() == q.to_bits());
                assert!(same);
            }
        }
    }

    #[test]
    fn short_run_writes_consistent_logs() {
        let dir = tempfile::tempdir().unwrap();
        let params = ModelParams::new(2, 1e-3, 10.0, Interactions::uniform(2, 1.0).unwrap(), 1e-5).unwrap();
        let cfg = RunConfig {
            params,
            grid: Grid::new_1d(16, 1.0 / 16.0).unwrap(),
            initial: Default::default(),
            t_max: 5e-5,
            output: dir.path().to_path_buf(),
            snapshot_stride: 2,
            step: StepConfig::default(),
        };
        let (traj, summary) = run_to_dir(&cfg, dir.path()).unwrap();
        assert_eq!(summary.status, RunStatus::Ok, "{summary:#?}");
        assert_eq!(summary.steps, 5);
        for step in [0, 2, 4, 5] {
            assert!(snapshot_path(dir.path(), step).exists(), "step {step}");
        }
        assert!(!snapshot_path(dir.path(), 3).exists());
        let (t, u) = read_snapshot(&snapshot_path(dir.path(), 5), cfg.grid).unwrap();
        assert_eq!(t, traj.steps[4].time);
        let mut rdr = csv::Reader::from_path(dir.path().join("entropy.csv")).unwrap();
        let header = rdr.headers().unwrap().clone();
        assert_eq!(header.iter().collect::<Vec<_>>(), entropy_log_header(2));
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 5);
        let masses = u.masses();
        for (i, m) in masses.iter().enumerate() {
            let logged: f64 = rows[4][5 + i].parse().unwrap();
            assert!((logged - m).abs() <= 1e-12);
        }
        assert!(dir.path().join("summary.json").exists());
        assert!(dir.path().join("config.toml").exists());
    }
}
