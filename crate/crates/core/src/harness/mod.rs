//! Experiment sweeps: expand a config into runs, train them on a worker
//! pool, then aggregate the per-run CSVs into tables and plots.

mod aggregate;
mod config;
mod manifest;
mod run;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use log::{error, info, warn};

pub use aggregate::{aggregate, Summary, TransitionSummary};
pub use config::{
    default_deltas, EvalSettings, ExperimentConfig, ExperimentKind, Grids, ModelSettings, ScheduleSettings,
    TaskSettings,
};
pub use manifest::{RunEntry, RunManifest, RunStatus};
pub use run::{execute_run, expand_runs, final_loss_slope, RunResult, RunSpec, CHECKPOINT_FILE, EVAL_FILE};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub workers: usize,
    /// Retrain every run from scratch.
    pub force: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { workers: 1, force: false }
    }
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub out_dir: PathBuf,
    pub completed: usize,
    pub failed: Vec<(String, String)>,
    pub summary: Summary,
}

pub fn run_dir(out_dir: &Path, id: &str) -> PathBuf {
    out_dir.join("runs").join(id)
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".to_string())
}

/// Runs every pending cell of `cfg` and aggregates the results in `out_dir`.
/// Completed runs recorded in the manifest are skipped; a failed run is
/// recorded and the sweep carries on.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, opts: &SweepOptions) -> Result<SweepReport> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.toml"), toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?)?;
    let runs = expand_runs(cfg);
    let ids: Vec<String> = runs.iter().map(|r| r.id.clone()).collect();
    let mut manifest = RunManifest::open(&out_dir.join(MANIFEST_FILE), &cfg.name(), &cfg.hash(), &ids, opts.force)?;
    if opts.force {
        for id in &ids {
            let dir = run_dir(out_dir, id);
            if dir.exists() {
                fs::remove_dir_all(&dir)?;
            }
        }
    }
    let pending: Vec<&RunSpec> = runs.iter().filter(|r| !manifest.is_complete(&r.id)).collect();
    info!("{}: {} runs, {} pending", cfg.name(), runs.len(), pending.len());
    for r in &pending {
        let e = manifest.entry_mut(&r.id);
        e.status = RunStatus::Pending;
        e.error = None;
    }
    manifest.save()?;

    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, bool, std::result::Result<RunResult, String>)>();
    let workers = opts.workers.max(1).min(pending.len().max(1));
    std::thread::scope(|s| -> Result<()> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, pending) = (&next, &pending);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(spec) = pending.get(i) else { break };
                let _ = tx.send((i, true, Err(String::new())));
                let dir = run_dir(out_dir, &spec.id);
                let res = panic::catch_unwind(AssertUnwindSafe(|| execute_run(cfg, spec, &dir)))
                    .unwrap_or_else(|p| Err(Error::Config(format!("run panicked: {}", panic_message(p)))))
                    .map_err(|e| e.to_string());
                if tx.send((i, false, res)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        // Only this thread touches the manifest.
        for (i, started, res) in rx {
            let id = &pending[i].id;
            let e = manifest.entry_mut(id);
            if started {
                e.status = RunStatus::Running;
                e.started = Some(manifest::now());
            } else {
                e.finished = Some(manifest::now());
                match res {
                    Ok(r) => {
                        info!("{id}: complete");
                        e.status = RunStatus::Complete;
                        e.checkpoint = Some(r.checkpoint.display().to_string());
                        e.outputs = r.outputs.iter().map(|p| p.display().to_string()).collect();
                        e.final_loss_slope = Some(r.final_loss_slope);
                        e.error = None;
                    }
                    Err(msg) => {
                        error!("{id}: failed: {msg}");
                        e.status = RunStatus::Failed;
                        e.error = Some(msg);
                    }
                }
            }
            manifest.save()?;
        }
        Ok(())
    })?;

    let failed: Vec<(String, String)> = manifest
        .runs
        .iter()
        .filter(|(_, e)| e.status == RunStatus::Failed)
        .map(|(id, e)| (id.clone(), e.error.clone().unwrap_or_default()))
        .collect();
    if !failed.is_empty() {
        warn!("{} of {} runs failed", failed.len(), runs.len());
    }
    let summary = aggregate(cfg, &runs, &manifest, out_dir)?;
    Ok(SweepReport { out_dir: out_dir.to_path_buf(), completed: manifest.count(RunStatus::Complete), failed, summary })
}
