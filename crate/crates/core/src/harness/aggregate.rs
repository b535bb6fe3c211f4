use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ExperimentKind};
use super::manifest::{RunManifest, RunStatus};
use super::run::{RunSpec, EVAL_FILE, INTERP_FILE, SNAPSHOT_FILE, TRACE_FILE};
use super::run_dir;
use crate::error::Result;
use crate::metrics::{
    detect_transition, excess_over_dmmse, nsr, read_records, write_records, EvalRecord, InterpPoint, PhaseCell,
    NSR_THRESHOLD,
};
use crate::plot::{heatmap_from_csv, line_plot_from_csv, write_svg, LineSpec};
use crate::stats::ema;
use crate::tasks::TaskCount;

/// Transition window the desk preset is expected to land in (degrees).
pub const TRANSITION_WINDOW: (f64, f64) = (90.0, 165.0);

const GROUP_COLUMNS: [&str; 6] = ["family", "dim", "n_layers", "n_tasks", "noise_var", "seed"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionSummary {
    pub family: String,
    pub dim: usize,
    pub n_layers: usize,
    pub n_tasks: TaskCount,
    pub noise_var: f64,
    pub seed: u64,
    /// (phi, NSR) in ascending phi.
    pub nsr: Vec<(f64, f64)>,
    pub phi_c: Option<f64>,
    pub reverse_crossings: Vec<f64>,
    pub outside_window: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: String,
    pub config_hash: String,
    pub completed: usize,
    pub failed: Vec<String>,
    pub transitions: Vec<TransitionSummary>,
    pub phases: Vec<PhaseCell>,
    pub final_loss_slopes: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct NsrRow<'a> {
    family: &'a str,
    dim: usize,
    n_layers: usize,
    n_tasks: TaskCount,
    noise_var: f64,
    seed: u64,
    train_phi: f64,
    nsr: f64,
}

type GroupKey = (String, usize, usize, String, String, u64);

fn group_key(r: &EvalRecord) -> GroupKey {
    (r.family.clone(), r.dim, r.n_layers, r.n_tasks.to_string(), r.noise_var.to_string(), r.seed)
}

/// NSR over the delta grid of each run's transformer excess losses, then the
/// transition angle per (family, d, L, N, noise, seed) group.
fn transitions(records: &[EvalRecord], out_dir: &Path) -> Result<Vec<TransitionSummary>> {
    let mut per_run: BTreeMap<(GroupKey, u64), (EvalRecord, Vec<f64>)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.predictor == "transformer") {
        let key = (group_key(r), r.train_phi.to_bits());
        per_run.entry(key).or_insert_with(|| (r.clone(), Vec::new())).1.push(r.excess_loss.max(0.0));
    }
    let mut groups: BTreeMap<GroupKey, (EvalRecord, Vec<(f64, f64)>)> = BTreeMap::new();
    let mut rows = Vec::new();
    for ((g, _), (r, losses)) in &per_run {
        if losses.len() < 2 {
            continue;
        }
        let v = match nsr(losses) {
            Ok(v) => v,
            Err(e) => {
                warn!("{}: no NSR: {e}", r.run_id);
                continue;
            }
        };
        rows.push(NsrRow {
            family: &r.family,
            dim: r.dim,
            n_layers: r.n_layers,
            n_tasks: r.n_tasks,
            noise_var: r.noise_var,
            seed: r.seed,
            train_phi: r.train_phi,
            nsr: v,
        });
        groups.entry(g.clone()).or_insert_with(|| (r.clone(), Vec::new())).1.push((r.train_phi, v));
    }
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let mut w = csv::Writer::from_path(out_dir.join("nsr.csv"))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    let mut out = Vec::new();
    for (_, (r, mut pts)) in groups {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let t = detect_transition(&pts, NSR_THRESHOLD)?;
        let outside_window = t.phi_c.is_none_or(|p| p < TRANSITION_WINDOW.0 || p > TRANSITION_WINDOW.1);
        out.push(TransitionSummary {
            family: r.family,
            dim: r.dim,
            n_layers: r.n_layers,
            n_tasks: r.n_tasks,
            noise_var: r.noise_var,
            seed: r.seed,
            nsr: pts,
            phi_c: t.phi_c,
            reverse_crossings: t.reverse_crossings,
            outside_window,
        });
    }
    Ok(out)
}

/// Seed-averaged normalized losses at the first band (in-distribution) and
/// the last band (out of distribution) of each (phi, N) cell.
fn phases(cfg: &ExperimentConfig, records: &[EvalRecord], out_dir: &Path) -> Result<Vec<PhaseCell>> {
    let (Some(&d_in), Some(&d_ood)) = (cfg.grids.delta.first(), cfg.grids.delta.last()) else {
        return Ok(Vec::new());
    };
    let mut acc: BTreeMap<(u64, String), (TaskCount, f64, [f64; 2], [usize; 2])> = BTreeMap::new();
    for r in records.iter().filter(|r| r.predictor == "transformer") {
        let slot = if r.test_delta == d_in {
            0
        } else if r.test_delta == d_ood {
            1
        } else {
            continue;
        };
        let e = acc
            .entry((r.train_phi.to_bits(), r.n_tasks.to_string()))
            .or_insert((r.n_tasks, r.train_phi, [0.0; 2], [0; 2]));
        e.2[slot] += r.normalized_loss;
        e.3[slot] += 1;
    }
    let mut cells: Vec<PhaseCell> = acc
        .into_values()
        .filter(|v| v.3[0] > 0 && v.3[1] > 0)
        .map(|(n, phi, sum, cnt)| PhaseCell::new(phi, n, sum[0] / cnt[0] as f64, sum[1] / cnt[1] as f64))
        .collect();
    cells.sort_by(|a, b| a.phi.total_cmp(&b.phi).then(a.n_tasks.cmp(&b.n_tasks)));
    let path = out_dir.join("phase.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["train_phi", "n_tasks", "in_dist_loss", "ood_loss", "phase", "phase_code"])?;
    for c in &cells {
        let code = match c.phase {
            crate::metrics::Phase::Iwl => 0,
            crate::metrics::Phase::InDistIcl => 1,
            crate::metrics::Phase::OodIcl => 2,
        };
        w.write_record([
            c.phi.to_string(),
            c.n_tasks.to_string(),
            c.in_dist_loss.to_string(),
            c.ood_loss.to_string(),
            c.phase.label().to_string(),
            code.to_string(),
        ])?;
    }
    w.flush()?;
    if !cells.is_empty() {
        for (col, title, log) in [
            ("in_dist_loss", "In-distribution loss (normalized)", true),
            ("ood_loss", "Out-of-distribution loss (normalized)", true),
            ("phase_code", "Phase (0 IWL, 1 in-dist ICL, 2 OOD ICL)", false),
        ] {
            let h = heatmap_from_csv(&path, "train_phi", "n_tasks", col, title, log)?;
            write_svg(&out_dir.join(format!("{col}_heatmap.svg")), &h.render())?;
        }
    }
    Ok(cells)
}

/// Loss traces of the normal and perpendicular-zeroed runs on one axis,
/// with EMA smoothing, from the runs' training traces.
fn probe_traces(cfg: &ExperimentConfig, runs: &[RunSpec], done: &[&RunSpec], out_dir: &Path) -> Result<()> {
    let path = out_dir.join("traces.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["run_id", "train_phi", "seed", "variant", "step", "train_loss", "ema"])?;
    for spec in runs.iter().filter(|r| done.iter().any(|d| d.id == r.id)) {
        let (_, rows) = crate::plot::read_table(&run_dir(out_dir, &spec.id).join(TRACE_FILE))?;
        let variant = if spec.zeroed { "zeroed" } else { "normal" };
        let losses: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap_or(f64::NAN)).collect();
        for (row, e) in rows.into_iter().zip(ema(&losses, cfg.eval.ema_beta)) {
            w.write_record([
                spec.id.clone(),
                spec.phi.to_string(),
                spec.seed.to_string(),
                variant.to_string(),
                row[0].clone(),
                row[1].clone(),
                e.to_string(),
            ])?;
        }
    }
    w.flush()?;
    let plot = line_plot_from_csv(
        &path,
        &LineSpec {
            x: "step",
            y: "ema",
            group_by: &["variant", "train_phi", "seed"],
            filter: &[],
            title: "Training loss (EMA)",
            log_y: true,
        },
    )?;
    write_svg(&out_dir.join("traces.svg"), &plot.render())
}

#[derive(Serialize)]
struct DRow<'a> {
    run_id: &'a str,
    train_phi: f64,
    n_tasks: TaskCount,
    seed: u64,
    d: f64,
    d_normalized: f64,
}

fn dmmse_summary(done: &[&RunSpec], out_dir: &Path) -> Result<()> {
    let path = out_dir.join("dmmse_d.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut any = false;
    for spec in done {
        let file = run_dir(out_dir, &spec.id).join(INTERP_FILE);
        let mut rdr = csv::Reader::from_path(&file)?;
        let pts = rdr.deserialize().collect::<std::result::Result<Vec<InterpPoint>, _>>()?;
        let (d, d_normalized) = excess_over_dmmse(&pts, spec.phi.to_radians())?;
        w.serialize(DRow { run_id: &spec.id, train_phi: spec.phi, n_tasks: spec.n_tasks, seed: spec.seed, d, d_normalized })?;
        any = true;
    }
    w.flush()?;
    if any {
        let h = heatmap_from_csv(&path, "train_phi", "n_tasks", "d_normalized", "Normalized D (model minus dMMSE)", false)?;
        write_svg(&out_dir.join("dmmse_d_heatmap.svg"), &h.render())?;
    }
    Ok(())
}

fn line(out_dir: &Path, name: &str, csv: &Path, spec: &LineSpec) -> Result<()> {
    let plot = line_plot_from_csv(csv, spec)?;
    write_svg(&out_dir.join(name), &plot.render())
}

fn plots(cfg: &ExperimentConfig, eval_csv: &Path, out_dir: &Path) -> Result<()> {
    match cfg.kind {
        ExperimentKind::Radius => line(
            out_dir,
            "radius.svg",
            eval_csv,
            &LineSpec {
                x: "radius",
                y: "raw_loss",
                group_by: &["predictor", "train_phi", "seed"],
                filter: &[],
                title: "Loss vs task radius",
                log_y: false,
            },
        ),
        ExperimentKind::ContextLength => line(
            out_dir,
            "context_length.svg",
            eval_csv,
            &LineSpec {
                x: "context_length",
                y: "excess_loss",
                group_by: &["predictor", "train_phi", "seed"],
                filter: &[],
                title: "Loss vs context length",
                log_y: true,
            },
        ),
        _ => {
            let ood = cfg.grids.delta.last().copied().unwrap_or(0.0).to_string();
            let mut group: Vec<&str> = vec!["train_phi"];
            group.extend(GROUP_COLUMNS.iter().filter(|c| **c != "seed"));
            group.push("seed");
            line(
                out_dir,
                "loss_vs_delta.svg",
                eval_csv,
                &LineSpec {
                    x: "test_delta",
                    y: "excess_loss",
                    group_by: &group,
                    filter: &[("predictor", "transformer")],
                    title: "Transformer loss vs test angle",
                    log_y: true,
                },
            )?;
            let mut group: Vec<&str> = vec!["predictor"];
            group.extend(GROUP_COLUMNS);
            line(
                out_dir,
                "ood_vs_phi.svg",
                eval_csv,
                &LineSpec {
                    x: "train_phi",
                    y: "excess_loss",
                    group_by: &group,
                    filter: &[("test_delta", &ood)],
                    title: "Out-of-distribution loss vs training angle",
                    log_y: true,
                },
            )?;
            let nsr_csv = out_dir.join("nsr.csv");
            if nsr_csv.exists() {
                line(
                    out_dir,
                    "nsr_vs_phi.svg",
                    &nsr_csv,
                    &LineSpec {
                        x: "train_phi",
                        y: "nsr",
                        group_by: &GROUP_COLUMNS,
                        filter: &[],
                        title: "NSR vs training angle",
                        log_y: true,
                    },
                )?;
            }
            Ok(())
        }
    }
}

/// Merges the completed runs' outputs into experiment-level tables, a JSON
/// summary and SVG plots. Depends only on the files under `out_dir`.
pub fn aggregate(cfg: &ExperimentConfig, runs: &[RunSpec], manifest: &RunManifest, out_dir: &Path) -> Result<Summary> {
    let done: Vec<&RunSpec> = runs.iter().filter(|r| manifest.is_complete(&r.id)).collect();
    let mut records = Vec::new();
    for spec in &done {
        records.extend(read_records(&run_dir(out_dir, &spec.id).join(EVAL_FILE))?);
    }
    let mut summary = Summary {
        experiment: cfg.name(),
        config_hash: manifest.config_hash.clone(),
        completed: done.len(),
        failed: manifest.runs.iter().filter(|(_, e)| e.status == RunStatus::Failed).map(|(id, _)| id.clone()).collect(),
        ..Summary::default()
    };
    for spec in &done {
        if let Some(s) = manifest.runs.get(&spec.id).and_then(|e| e.final_loss_slope) {
            summary.final_loss_slopes.insert(spec.id.clone(), s);
        }
    }
    if !records.is_empty() {
        let eval_csv = out_dir.join(EVAL_FILE);
        write_records(&eval_csv, &records)?;
        if !matches!(cfg.kind, ExperimentKind::Radius | ExperimentKind::ContextLength) {
            summary.transitions = transitions(&records, out_dir)?;
        }
        if cfg.kind == ExperimentKind::PhaseDiagram {
            summary.phases = phases(cfg, &records, out_dir)?;
        }
        plots(cfg, &eval_csv, out_dir)?;
    }
    if cfg.kind == ExperimentKind::Spec2Probe && !done.is_empty() {
        probe_traces(cfg, runs, &done, out_dir)?;
        merge_snapshots(&done, out_dir)?;
    }
    if cfg.kind == ExperimentKind::DmmseInterp {
        dmmse_summary(&done, out_dir)?;
    }
    fs::write(out_dir.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}

/// Concatenates the per-run test-loss snapshots taken during training.
fn merge_snapshots(done: &[&RunSpec], out_dir: &Path) -> Result<()> {
    let mut w: Option<csv::Writer<fs::File>> = None;
    for spec in done {
        let file = run_dir(out_dir, &spec.id).join(SNAPSHOT_FILE);
        if !file.exists() {
            continue;
        }
        let (header, rows) = crate::plot::read_table(&file)?;
        let w = match &mut w {
            Some(w) => w,
            None => {
                let mut nw = csv::Writer::from_path(out_dir.join("snapshots.csv"))?;
                let mut h = vec!["run_id".to_string()];
                h.extend(header);
                nw.write_record(&h)?;
                w.insert(nw)
            }
        };
        for row in rows {
            let mut r = vec![spec.id.clone()];
            r.extend(row);
            w.write_record(&r)?;
        }
    }
    if let Some(mut w) = w {
        w.flush()?;
    }
    Ok(())
}
