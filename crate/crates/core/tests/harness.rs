use std::fs;
use std::path::Path;

use sphere_icl::harness::{expand_runs, run_dir, run_experiment, ExperimentConfig, ExperimentKind, RunStatus, SweepOptions};
use sphere_icl::plot::read_table;
use sphere_icl::tasks::TaskCount;

fn tiny(kind: ExperimentKind) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk(kind);
    c.task.context_length = 6;
    c.model.n_layers = 1;
    c.model.hidden_dim = 8;
    c.model.n_heads = 2;
    c.schedule.steps = 6;
    c.schedule.batch_size = 4;
    c.schedule.checkpoint_every = 3;
    c.eval.n_episodes = 40;
    c.eval.snapshot_episodes = 10;
    c.grids.phi = vec![60.0, 180.0];
    c.grids.delta = vec![0.0, 90.0, 175.0];
    c
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn transition_sweep_writes_tables_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(ExperimentKind::Transition);
    let report = run_experiment(&cfg, dir.path(), &SweepOptions { workers: 2, force: false }).unwrap();
    assert_eq!(report.completed, 2);
    assert!(report.failed.is_empty());
    for f in ["eval.csv", "nsr.csv", "summary.json", "manifest.json", "config.toml", "loss_vs_delta.svg", "nsr_vs_phi.svg", "ood_vs_phi.svg"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let (header, rows) = read_table(&dir.path().join("eval.csv")).unwrap();
    assert_eq!(header.len(), 19);
    // transformer, ols, cap_bound on three bands for two runs
    assert_eq!(rows.len(), 2 * 3 * 3);
    assert_eq!(report.summary.transitions.len(), 1);
    assert_eq!(report.summary.transitions[0].nsr.len(), 2);
}

#[test]
fn completed_runs_are_skipped_and_missing_ones_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(ExperimentKind::Transition);
    let opts = SweepOptions::default();
    run_experiment(&cfg, dir.path(), &opts).unwrap();
    let runs = expand_runs(&cfg);
    let first = run_dir(dir.path(), &runs[0].id).join("eval.csv");
    let second = run_dir(dir.path(), &runs[1].id).join("eval.csv");
    let before = read(&second);

    // A no-op rerun leaves run outputs untouched.
    fs::remove_file(&first).unwrap();
    fs::write(&first, b"sentinel").unwrap();
    let manifest_path = dir.path().join("manifest.json");
    let text = fs::read_to_string(&manifest_path).unwrap();
    let mut m: serde_json::Value = serde_json::from_str(&text).unwrap();
    m["runs"][&runs[0].id]["status"] = serde_json::json!("running");
    fs::write(&manifest_path, serde_json::to_vec(&m).unwrap()).unwrap();

    // Interrupted run: only it is redone, from its checkpoint.
    let report = run_experiment(&cfg, dir.path(), &opts).unwrap();
    assert_eq!(report.completed, 2);
    assert_ne!(read(&first), b"sentinel");
    assert_eq!(read(&second), before);

    let mut other = cfg.clone();
    other.schedule.steps += 1;
    assert!(run_experiment(&other, dir.path(), &opts).is_err());
    let forced = run_experiment(&other, dir.path(), &SweepOptions { workers: 1, force: true }).unwrap();
    assert_eq!(forced.completed, 2);
}

#[test]
fn reruns_are_bit_identical() {
    let cfg = tiny(ExperimentKind::Transition);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&cfg, a.path(), &SweepOptions { workers: 2, force: false }).unwrap();
    run_experiment(&cfg, b.path(), &SweepOptions::default()).unwrap();
    for f in ["eval.csv", "nsr.csv", "loss_vs_delta.svg"] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
    for r in expand_runs(&cfg) {
        for f in ["eval.csv", "loss_trace.csv"] {
            assert_eq!(read(&run_dir(a.path(), &r.id).join(f)), read(&run_dir(b.path(), &r.id).join(f)));
        }
    }
}

#[test]
fn phase_diagram_labels_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(ExperimentKind::PhaseDiagram);
    cfg.grids.n_tasks = vec![TaskCount::Finite(4), TaskCount::Infinite];
    cfg.grids.delta = vec![0.0, 175.0];
    let report = run_experiment(&cfg, dir.path(), &SweepOptions::default()).unwrap();
    assert_eq!(report.summary.phases.len(), 4);
    let (_, rows) = read_table(&dir.path().join("phase.csv")).unwrap();
    assert_eq!(rows.len(), 4);
    for f in ["in_dist_loss_heatmap.svg", "ood_loss_heatmap.svg", "phase_code_heatmap.svg"] {
        assert!(dir.path().join(f).exists());
    }
    let svg = fs::read_to_string(dir.path().join("phase_code_heatmap.svg")).unwrap();
    assert!(svg.contains(">inf<") && svg.contains(">60<"));
}

#[test]
fn named_experiments_run_end_to_end() {
    let mut probe = tiny(ExperimentKind::Spec2Probe);
    probe.grids.phi = vec![45.0];
    probe.schedule.eval_every = 3;
    let mut interp = tiny(ExperimentKind::DmmseInterp);
    interp.grids.n_tasks = vec![TaskCount::Finite(4)];
    interp.grids.delta = vec![0.0];
    interp.grids.alpha = vec![0.0, 0.5, 1.0];
    let mut radius = tiny(ExperimentKind::Radius);
    radius.grids.phi = vec![90.0];
    let mut ctx = tiny(ExperimentKind::ContextLength);
    ctx.grids.phi = vec![90.0];
    ctx.grids.context_k = vec![1, 4, 6];
    let mut nonlinear = tiny(ExperimentKind::Nonlinear);
    nonlinear.grids.phi = vec![90.0];
    let mut xdiv = tiny(ExperimentKind::XDiversity);
    xdiv.grids.phi = vec![90.0];
    let mut logistic = tiny(ExperimentKind::Classification);
    logistic.grids.phi = vec![90.0];

    let cases: Vec<(ExperimentConfig, &[&str])> = vec![
        (probe, &["traces.csv", "traces.svg", "snapshots.csv"]),
        (interp, &["dmmse_d.csv", "dmmse_d_heatmap.svg"]),
        (radius, &["radius.svg"]),
        (ctx, &["context_length.svg"]),
        (nonlinear, &["eval.csv"]),
        (xdiv, &["eval.csv"]),
        (logistic, &["eval.csv"]),
    ];
    for (cfg, files) in cases {
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&cfg, dir.path(), &SweepOptions::default()).unwrap();
        assert!(report.failed.is_empty(), "{}: {:?}", cfg.name(), report.failed);
        for f in files {
            assert!(dir.path().join(f).exists(), "{}: {f} missing", cfg.name());
        }
        let m = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        assert!(!m.contains(&format!("{:?}", RunStatus::Failed).to_lowercase()));
    }
}
