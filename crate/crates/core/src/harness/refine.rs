//! τ-refinement study: the same problem at `τ, τ/2, …, τ/2^levels`, run
//! concurrently, each in its own directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::MonitorRecord;
use crate::stepper::{trajectory_gap, Trajectory};

use super::config::RunConfig;
use super::output::{run_to_dir, RunStatus, RunSummary};

pub const MIN_LEVELS: usize = 3;

#[derive(Debug, Clone, Serialize)]
pub struct LevelResult {
    pub tau: f64,
    pub dir: PathBuf,
    pub status: RunStatus,
    pub steps: usize,
    pub cumulative_monitors: MonitorRecord,
}

#[derive(Debug, Clone, Serialize)]
pub struct RefineReport {
    pub levels: Vec<LevelResult>,
    /// `gaps[k]` compares level `k` with level `k + 1`.
    pub gaps: Vec<f64>,
    /// `gaps[k + 1] / gaps[k]`.
    pub ratios: Vec<f64>,
    /// `-log2` of each ratio: the apparent order in `τ`.
    pub alphas: Vec<f64>,
    pub monotone: bool,
    /// Largest relative change of each cumulative monitor between neighbouring levels.
    pub monitor_changes: Vec<[f64; 5]>,
}

#[derive(Debug)]
pub struct RefineFailure {
    pub partial: RefineReport,
    pub error: Error,
}

impl std::fmt::Display for RefineFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "refinement study aborted: {}", self.error)
    }
}

impl std::error::Error for RefineFailure {}

pub fn level_dir(out: &Path, level: usize) -> PathBuf {
    out.join(format!("level_{level}"))
}

fn relative_change(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (b - a).abs() / scale
    }
}

fn report(runs: &[(Trajectory, RunSummary, PathBuf)]) -> Result<RefineReport> {
    let levels = runs
        .iter()
        .map(|(t, s, d)| LevelResult {
            tau: t.tau,
            dir: d.clone(),
            status: s.status,
            steps: s.steps,
            cumulative_monitors: s.cumulative_monitors,
        })
        .collect::<Vec<_>>();
    let gaps = runs
        .windows(2)
        .map(|w| trajectory_gap(&w[0].0, &w[1].0))
        .collect::<Result<Vec<_>>>()?;
    let ratios: Vec<f64> = gaps.windows(2).map(|g| g[1] / g[0]).collect();
    let alphas = ratios.iter().map(|r| -r.log2()).collect();
    let monotone = gaps.windows(2).all(|g| g[1] < g[0]);
    let monitor_changes = levels
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0].cumulative_monitors.as_array(), w[1].cumulative_monitors.as_array());
            std::array::from_fn(|k| relative_change(a[k], b[k]))
        })
        .collect();
    Ok(RefineReport {
        levels,
        gaps,
        ratios,
        alphas,
        monotone,
        monitor_changes,
    })
}

fn write_tables(rep: &RefineReport, out: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(out.join("refine.csv"))?;
    w.write_record(["level", "tau_coarse", "tau_fine", "gap", "ratio", "alpha"])?;
    for (k, g) in rep.gaps.iter().enumerate() {
        let (ratio, alpha) = match k.checked_sub(1) {
            Some(j) => (format!("{:.16e}", rep.ratios[j]), format!("{:.16e}", rep.alphas[j])),
            None => (String::new(), String::new()),
        };
        w.write_record([
            k.to_string(),
            format!("{:.16e}", rep.levels[k].tau),
            format!("{:.16e}", rep.levels[k + 1].tau),
            format!("{g:.16e}"),
            ratio,
            alpha,
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("monitors.csv"))?;
    let mut header = vec!["level".to_string(), "tau".to_string(), "steps".to_string()];
    header.extend(MonitorRecord::NAMES.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for (k, l) in rep.levels.iter().enumerate() {
        let mut row = vec![k.to_string(), format!("{:.16e}", l.tau), l.steps.to_string()];
        row.extend(l.cumulative_monitors.as_array().iter().map(|v| format!("{v:.16e}")));
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut dat = String::from("# tau_fine gap\n");
    for (k, g) in rep.gaps.iter().enumerate() {
        dat += &format!("{:.16e} {g:.16e}\n", rep.levels[k + 1].tau);
    }
    fs::write(out.join("refine.dat"), dat)?;
    let json = serde_json::to_string_pretty(rep).map_err(|e| Error::Io(e.into()))?;
    fs::write(out.join("refine.json"), json + "\n")?;
    Ok(())
}

/// Runs `levels + 1` step sizes, halving from `cfg`'s `τ`, and writes
/// `refine.csv`, `monitors.csv`, `refine.dat` and `refine.json` into `out`.
/// A failed level aborts the study; the levels before it are still reported.
pub fn refinement_study(cfg: &RunConfig, levels: usize, out: &Path) -> std::result::Result<RefineReport, Box<RefineFailure>> {
    let fail = |partial: RefineReport, error: Error| Box::new(RefineFailure { partial, error });
    let empty = || RefineReport {
        levels: Vec::new(),
        gaps: Vec::new(),
        ratios: Vec::new(),
        alphas: Vec::new(),
        monotone: false,
        monitor_changes: Vec::new(),
    };
    if levels < MIN_LEVELS {
        return Err(fail(empty(), Error::invalid("levels", format!("need at least {MIN_LEVELS}, got {levels}"))));
    }
    let configs = (0..=levels)
        .map(|k| cfg.with_tau(cfg.params.tau / 2f64.powi(k as i32)))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| fail(empty(), e))?;
    if let Err(e) = fs::create_dir_all(out) {
        return Err(fail(empty(), e.into()));
    }
    let results: Vec<Result<(Trajectory, RunSummary)>> = thread::scope(|s| {
        let handles: Vec<_> = configs
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let dir = level_dir(out, k);
                s.spawn(move || run_to_dir(c, &dir))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("refinement level panicked")).collect()
    });
    let mut runs = Vec::new();
    let mut error = None;
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok((t, s)) if s.status == RunStatus::Ok => runs.push((t, s, level_dir(out, k))),
            Ok((_, s)) => {
                let msg = s.error.unwrap_or_else(|| "invariant check failed".into());
                error = Some(Error::Invariant {
                    step: s.steps,
                    what: format!("level {k}: {msg}"),
                });
                break;
            }
            Err(e) => {
                error = Some(e);
                break;
            }
        }
    }
    let rep = match report(&runs) {
        Ok(r) => r,
        Err(e) => return Err(fail(empty(), e)),
    };
    if let Err(e) = write_tables(&rep, out) {
        return Err(fail(rep, e));
    }
    match error {
        Some(e) => Err(fail(rep, e)),
        None => Ok(rep),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::model::{Interactions, ModelParams};
    use crate::stepper::StepConfig;

    fn config(out: &Path) -> RunConfig {
        RunConfig {
            params: ModelParams::new(1, 1e-3, 10.0, Interactions::uniform(1, 1.0).unwrap(), 4e-5).unwrap(),
            grid: Grid::new_1d(8, 1.0 / 8.0).unwrap(),
            initial: Default::default(),
            t_max: 1.6e-4,
            output: out.to_path_buf(),
            snapshot_stride: 100,
            step: StepConfig::default(),
        }
    }

    #[test]
    fn small_study_writes_tables() {
        let dir = tempfile::tempdir().unwrap();
        let rep = refinement_study(&config(dir.path()), 3, dir.path()).unwrap();
        assert_eq!(rep.levels.len(), 4);
        assert_eq!(rep.gaps.len(), 3);
        assert_eq!(rep.ratios.len(), 2);
        assert!(rep.gaps.iter().all(|g| *g > 0.0));
        for f in ["refine.csv", "monitors.csv", "refine.dat", "refine.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert!(level_dir(dir.path(), 3).join("entropy.csv").exists());
    }

    #[test]
    fn too_few_levels_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(refinement_study(&config(dir.path()), 2, dir.path()).is_err());
    }
}
