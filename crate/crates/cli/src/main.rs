use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use sphere_icl::harness::{run_experiment, ExperimentConfig, ExperimentKind, SweepOptions};
use sphere_icl::plot::{heatmap_from_csv, line_plot_from_csv, write_svg, LineSpec};

/// In-context regression on hyperspherical task caps: training sweeps,
/// evaluation tables and plots.
#[derive(Parser, Debug)]
#[command(name = "sphere-icl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Specialization-generalization transition over the cap angle.
    Transition(RunArgs),
    /// (phi, N) grid with phase labels.
    PhaseDiagram(RunArgs),
    /// Transition at several depths.
    DepthSweep(RunArgs),
    /// Transition at several task dimensions.
    DimSweep(RunArgs),
    /// Loss on tasks drawn from spheres of other radii.
    Radius(RunArgs),
    /// Loss against context length, with OLS.
    ContextLength(RunArgs),
    /// Transition for logistic (binary) labels.
    Classification(RunArgs),
    /// Transition for two-layer MLP tasks.
    Nonlinear(RunArgs),
    /// Inputs restricted to the cap, tasks over the whole sphere.
    XDiversity(RunArgs),
    /// Training with the perpendicular input component removed.
    Spec2Probe(RunArgs),
    /// Model against dMMSE along great circles between pool tasks.
    DmmseInterp(RunArgs),
    /// Print a preset config as TOML.
    Config {
        #[arg(value_enum)]
        kind: Kind,
        /// Single-CPU preset instead of full scale.
        #[arg(long)]
        desk: bool,
    },
    /// Render an SVG from a results CSV.
    #[command(subcommand)]
    Plot(PlotCommand),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML config; defaults to the preset for this experiment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: config's output_dir, else out/<name>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Runs trained in parallel.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Use the single-CPU preset (ignored with --config).
    #[arg(long)]
    desk: bool,
    /// Retrain completed runs.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum PlotCommand {
    /// One line per group of rows.
    Line {
        csv: PathBuf,
        #[arg(long)]
        x: String,
        #[arg(long)]
        y: String,
        /// Columns naming a series, comma separated.
        #[arg(long, value_delimiter = ',')]
        group_by: Vec<String>,
        /// Keep rows with column=value; repeatable.
        #[arg(long = "filter", value_parser = parse_filter)]
        filters: Vec<(String, String)>,
        #[arg(long, default_value = "")]
        title: String,
        #[arg(long)]
        log_y: bool,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Mean of a value column over an (x, y) grid.
    Heatmap {
        csv: PathBuf,
        #[arg(long)]
        x: String,
        #[arg(long)]
        y: String,
        #[arg(long)]
        value: String,
        #[arg(long, default_value = "")]
        title: String,
        #[arg(long)]
        log: bool,
        #[arg(long, short)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Transition,
    PhaseDiagram,
    DepthSweep,
    DimSweep,
    Radius,
    ContextLength,
    Classification,
    Nonlinear,
    XDiversity,
    Spec2Probe,
    DmmseInterp,
}

impl From<Kind> for ExperimentKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Transition => Self::Transition,
            Kind::PhaseDiagram => Self::PhaseDiagram,
            Kind::DepthSweep => Self::DepthSweep,
            Kind::DimSweep => Self::DimSweep,
            Kind::Radius => Self::Radius,
            Kind::ContextLength => Self::ContextLength,
            Kind::Classification => Self::Classification,
            Kind::Nonlinear => Self::Nonlinear,
            Kind::XDiversity => Self::XDiversity,
            Kind::Spec2Probe => Self::Spec2Probe,
            Kind::DmmseInterp => Self::DmmseInterp,
        }
    }
}

fn parse_filter(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())).ok_or_else(|| format!("expected column=value, got {s:?}"))
}

fn run(kind: ExperimentKind, args: RunArgs) -> Result<ExitCode> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None if args.desk => ExperimentConfig::desk(kind),
        None => ExperimentConfig::full_scale(kind),
    };
    if cfg.kind != kind {
        bail!("config is for experiment {}, not {}", cfg.kind, kind);
    }
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    let out = args
        .out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(cfg.name()));
    let report = run_experiment(&cfg, &out, &SweepOptions { workers: args.workers, force: args.force })
        .with_context(|| format!("experiment {} in {}", cfg.name(), out.display()))?;
    info!("{} runs complete, results in {}", report.completed, out.display());
    for t in &report.summary.transitions {
        println!(
            "{} d={} L={} N={} noise={} seed={}: phi_c = {}{}",
            t.family,
            t.dim,
            t.n_layers,
            t.n_tasks,
            t.noise_var,
            t.seed,
            t.phi_c.map_or("none".to_string(), |p| format!("{p}")),
            if t.reverse_crossings.is_empty() { String::new() } else { format!(" (reverse crossings {:?})", t.reverse_crossings) }
        );
    }
    for (id, err) in &report.failed {
        eprintln!("failed: {id}: {err}");
    }
    Ok(if report.failed.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn plot(cmd: PlotCommand) -> Result<()> {
    match cmd {
        PlotCommand::Line { csv, x, y, group_by, filters, title, log_y, out } => {
            let group: Vec<&str> = group_by.iter().map(String::as_str).collect();
            let filter: Vec<(&str, &str)> = filters.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
            let spec = LineSpec { x: &x, y: &y, group_by: &group, filter: &filter, title: &title, log_y };
            write_svg(&out, &line_plot_from_csv(&csv, &spec)?.render())?;
        }
        PlotCommand::Heatmap { csv, x, y, value, title, log, out } => {
            write_svg(&out, &heatmap_from_csv(&csv, &x, &y, &value, &title, log)?.render())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Transition(a) => run(ExperimentKind::Transition, a),
        Command::PhaseDiagram(a) => run(ExperimentKind::PhaseDiagram, a),
        Command::DepthSweep(a) => run(ExperimentKind::DepthSweep, a),
        Command::DimSweep(a) => run(ExperimentKind::DimSweep, a),
        Command::Radius(a) => run(ExperimentKind::Radius, a),
        Command::ContextLength(a) => run(ExperimentKind::ContextLength, a),
        Command::Classification(a) => run(ExperimentKind::Classification, a),
        Command::Nonlinear(a) => run(ExperimentKind::Nonlinear, a),
        Command::XDiversity(a) => run(ExperimentKind::XDiversity, a),
        Command::Spec2Probe(a) => run(ExperimentKind::Spec2Probe, a),
        Command::DmmseInterp(a) => run(ExperimentKind::DmmseInterp, a),
        Command::Config { kind, desk } => {
            let cfg = if desk { ExperimentConfig::desk(kind.into()) } else { ExperimentConfig::full_scale(kind.into()) };
            toml::to_string(&cfg).map(|t| print!("{t}")).map(|_| ExitCode::SUCCESS).map_err(Into::into)
        }
        Command::Plot(cmd) => plot(cmd).map(|_| ExitCode::SUCCESS),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}
