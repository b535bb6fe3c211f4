use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{AdamWConfig, GeluKind, ModelConfig, NormPlacement};
use crate::tasks::{TaskCount, TaskFamily};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
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

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 11] = [
        Self::Transition,
        Self::PhaseDiagram,
        Self::DepthSweep,
        Self::DimSweep,
        Self::Radius,
        Self::ContextLength,
        Self::Classification,
        Self::Nonlinear,
        Self::XDiversity,
        Self::Spec2Probe,
        Self::DmmseInterp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Transition => "transition",
            Self::PhaseDiagram => "phase_diagram",
            Self::DepthSweep => "depth_sweep",
            Self::DimSweep => "dim_sweep",
            Self::Radius => "radius",
            Self::ContextLength => "context_length",
            Self::Classification => "classification",
            Self::Nonlinear => "nonlinear",
            Self::XDiversity => "x_diversity",
            Self::Spec2Probe => "spec2_probe",
            Self::DmmseInterp => "dmmse_interp",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSettings {
    pub dim: usize,
    pub context_length: usize,
    pub radius: f64,
}

impl Default for TaskSettings {
    fn default() -> Self {
        Self { dim: 10, context_length: 50, radius: 1.0 }
    }
}

/// Sweep axes. Angles are in degrees. Every training run is one point of
/// `phi x n_tasks x dims x layers x noise_var x families x seeds`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Grids {
    pub phi: Vec<f64>,
    pub n_tasks: Vec<TaskCount>,
    pub dims: Vec<usize>,
    pub layers: Vec<usize>,
    pub noise_var: Vec<f64>,
    pub families: Vec<TaskFamily>,
    /// Start angles of the test bands.
    pub delta: Vec<f64>,
    pub band_width: f64,
    /// Evaluation radii for the radius experiment.
    pub radius: Vec<f64>,
    /// Context positions for the context-length experiment; empty means 1..=n.
    pub context_k: Vec<usize>,
    /// Interpolation steps for dmmse_interp.
    pub alpha: Vec<f64>,
}

fn degrees(lo: u32, hi: u32, step: u32) -> Vec<f64> {
    (lo..=hi).step_by(step as usize).map(f64::from).collect()
}

/// Test-band starts 0, 15, ..., 165 and 175 (the last band ends at the
/// antipode).
pub fn default_deltas() -> Vec<f64> {
    let mut d = degrees(0, 165, 15);
    d.push(175.0);
    d
}

impl Default for Grids {
    fn default() -> Self {
        Self {
            phi: degrees(15, 180, 15),
            n_tasks: vec![TaskCount::Infinite],
            dims: Vec::new(),
            layers: Vec::new(),
            noise_var: vec![0.0],
            families: vec![TaskFamily::Linear],
            delta: default_deltas(),
            band_width: 5.0,
            radius: crate::metrics::DEFAULT_RADII.to_vec(),
            context_k: Vec::new(),
            alpha: (0..=10).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub norm: NormPlacement,
    pub gelu: GeluKind,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            n_layers: 10,
            hidden_dim: 128,
            n_heads: 8,
            norm: NormPlacement::Pre,
            gelu: GeluKind::Tanh,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
        }
    }
}

impl ModelSettings {
    pub fn build(&self, n_layers: usize, input_dim: usize, context_length: usize) -> ModelConfig {
        let mut c = ModelConfig::new(n_layers, self.hidden_dim, self.n_heads, input_dim, context_length);
        c.norm = self.norm;
        c.gelu = self.gelu;
        c.layer_norm_eps = self.layer_norm_eps;
        c.init_std = self.init_std;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSettings {
    pub steps: u64,
    pub batch_size: usize,
    pub checkpoint_every: u64,
    /// Steps between mid-training evaluation snapshots; 0 disables them.
    pub eval_every: u64,
}

impl Default for ScheduleSettings {
    fn default() -> Self {
        Self { steps: 58_000, batch_size: 128, checkpoint_every: 1000, eval_every: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub n_episodes: usize,
    /// Episodes per band for mid-training snapshots.
    pub snapshot_episodes: usize,
    pub ema_beta: f64,
    /// Also evaluate OLS and the best-in-cap bound on every band.
    pub baselines: bool,
    /// Recompute labels from projected inputs in spec2_probe.
    pub probe_relabel: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { n_episodes: 10_000, snapshot_episodes: 500, ema_beta: 0.99, baselines: true, probe_relabel: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub task: TaskSettings,
    #[serde(default)]
    pub grids: Grids,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub schedule: ScheduleSettings,
    #[serde(default)]
    pub eval: EvalSettings,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1]
}

impl ExperimentConfig {
    /// Full-scale defaults for `kind`.
    pub fn full_scale(kind: ExperimentKind) -> Self {
        let mut c = Self {
            kind,
            name: None,
            output_dir: None,
            seeds: default_seeds(),
            task: TaskSettings::default(),
            grids: Grids::default(),
            model: ModelSettings::default(),
            optimizer: AdamWConfig::default(),
            schedule: ScheduleSettings::default(),
            eval: EvalSettings::default(),
        };
        let g = &mut c.grids;
        match kind {
            ExperimentKind::Transition => g.noise_var = vec![0.0, 0.25],
            ExperimentKind::PhaseDiagram => {
                g.n_tasks = (2..=11).map(|e| TaskCount::Finite(1 << e)).collect();
                g.delta = vec![0.0, 175.0];
            }
            ExperimentKind::DepthSweep => {
                g.layers = vec![2, 3, 10];
                g.n_tasks = vec![TaskCount::Finite(1 << 11)];
            }
            ExperimentKind::DimSweep => g.dims = vec![3, 5, 10],
            ExperimentKind::Radius => g.phi = vec![90.0],
            ExperimentKind::ContextLength => g.phi = vec![15.0, 45.0, 90.0, 120.0, 150.0, 180.0],
            ExperimentKind::Classification => g.families = vec![TaskFamily::Logistic],
            ExperimentKind::Nonlinear => {
                g.families = vec![TaskFamily::MlpJoint, TaskFamily::MlpPerlayer];
                c.task.dim = 3;
            }
            ExperimentKind::XDiversity => {}
            ExperimentKind::Spec2Probe => {
                g.phi = vec![45.0];
                c.schedule.eval_every = 0;
            }
            ExperimentKind::DmmseInterp => {
                g.n_tasks = (2..=11).map(|e| TaskCount::Finite(1 << e)).collect();
                g.delta = vec![0.0];
            }
        }
        c
    }

    /// Small preset sized for a single CPU: 2 layers of width 64, d = 3,
    /// n = 32, 8000 steps at batch 64.
    pub fn desk(kind: ExperimentKind) -> Self {
        let mut c = Self::full_scale(kind);
        c.seeds = vec![0];
        c.task.dim = 3;
        c.task.context_length = 32;
        c.model.n_layers = 2;
        c.model.hidden_dim = 64;
        c.model.n_heads = 4;
        c.schedule.steps = 8000;
        c.schedule.batch_size = 64;
        c.eval.n_episodes = 2000;
        let g = &mut c.grids;
        let coarse = vec![30.0, 60.0, 90.0, 120.0, 150.0, 180.0];
        match kind {
            ExperimentKind::Transition
            | ExperimentKind::Classification
            | ExperimentKind::Nonlinear
            | ExperimentKind::XDiversity
            | ExperimentKind::ContextLength => g.phi = coarse,
            ExperimentKind::PhaseDiagram | ExperimentKind::DmmseInterp => {
                g.phi = vec![45.0, 90.0, 135.0, 180.0];
                g.n_tasks = vec![TaskCount::Finite(4), TaskCount::Finite(16), TaskCount::Finite(64), TaskCount::Infinite];
                if kind == ExperimentKind::DmmseInterp {
                    g.n_tasks.pop();
                }
            }
            ExperimentKind::DepthSweep => {
                g.phi = coarse;
                g.layers = vec![2, 3];
            }
            ExperimentKind::DimSweep => {
                g.phi = coarse;
                g.dims = vec![3, 5];
            }
            ExperimentKind::Radius | ExperimentKind::Spec2Probe => {}
        }
        if kind == ExperimentKind::Transition {
            g.noise_var = vec![0.0];
        }
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::File { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_toml(&text).map_err(|e| Error::File { path: path.display().to_string(), message: e.to_string() })
    }

    pub fn name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.name().to_string())
    }

    pub fn dims(&self) -> Vec<usize> {
        if self.grids.dims.is_empty() { vec![self.task.dim] } else { self.grids.dims.clone() }
    }

    pub fn layers(&self) -> Vec<usize> {
        if self.grids.layers.is_empty() { vec![self.model.n_layers] } else { self.grids.layers.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let g = &self.grids;
        if self.seeds.is_empty() || g.phi.is_empty() || g.n_tasks.is_empty() || g.noise_var.is_empty() || g.families.is_empty() {
            return bad("seeds and the phi, n_tasks, noise_var and families grids must be nonempty".into());
        }
        if let Some(p) = g.phi.iter().find(|p| !(**p > 0.0 && **p <= 180.0)) {
            return bad(format!("phi {p} outside (0, 180] degrees"));
        }
        if let Some(v) = g.noise_var.iter().find(|v| !(**v >= 0.0)) {
            return bad(format!("noise variance {v} must be >= 0"));
        }
        if !(g.band_width > 0.0) {
            return bad(format!("band_width {} must be positive", g.band_width));
        }
        if let Some(d) = g.delta.iter().find(|d| !(**d >= 0.0 && **d + g.band_width <= 180.0 + 1e-9)) {
            return bad(format!("test band [{d}, {d} + {}] leaves [0, 180]", g.band_width));
        }
        if g.delta.is_empty() && !matches!(self.kind, ExperimentKind::Radius | ExperimentKind::Spec2Probe) {
            return bad("delta grid must be nonempty".into());
        }
        if self.kind == ExperimentKind::Radius && (g.radius.is_empty() || g.radius.iter().any(|r| !(*r > 0.0))) {
            return bad("radius grid must be nonempty and positive".into());
        }
        if self.kind == ExperimentKind::DmmseInterp {
            if g.alpha.is_empty() || g.alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return bad("alpha grid must be nonempty and inside [0, 1]".into());
            }
            if g.n_tasks.iter().any(|n| matches!(n, TaskCount::Infinite | TaskCount::Finite(1))) {
                return bad("dmmse_interp needs finite pools of at least two tasks".into());
            }
        }
        if self.kind == ExperimentKind::Nonlinear
            && g.families.iter().any(|f| !matches!(f, TaskFamily::MlpJoint | TaskFamily::MlpPerlayer))
        {
            return bad("nonlinear experiment takes mlp_joint / mlp_perlayer families".into());
        }
        if self.dims().contains(&0) || self.layers().contains(&0) {
            return bad("dimensions and layer counts must be positive".into());
        }
        let n = self.task.context_length;
        if n == 0 || g.context_k.iter().any(|&k| k == 0 || k > n) {
            return bad(format!("context positions must lie in 1..={n}"));
        }
        if self.schedule.batch_size == 0 || self.eval.n_episodes == 0 {
            return bad("batch_size and n_episodes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.eval.ema_beta) {
            return bad(format!("ema_beta {} must be in [0, 1)", self.eval.ema_beta));
        }
        for d in self.dims() {
            for l in self.layers() {
                self.model.build(l, d, n).validate()?;
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded. Output location and
    /// display name do not enter the hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        c.name = None;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_transition_grid_has_twelve_angles() {
        let c = ExperimentConfig::full_scale(ExperimentKind::Transition);
        assert_eq!(c.grids.phi, degrees(15, 180, 15));
        assert_eq!(c.grids.phi.len(), 12);
        c.validate().unwrap();
    }

    #[test]
    fn every_preset_validates() {
        for k in ExperimentKind::ALL {
            ExperimentConfig::full_scale(k).validate().unwrap();
            ExperimentConfig::desk(k).validate().unwrap();
            assert_eq!(k.name().parse::<ExperimentKind>().unwrap(), k);
        }
        let pd = ExperimentConfig::full_scale(ExperimentKind::PhaseDiagram);
        assert_eq!(pd.grids.phi.len() * pd.grids.n_tasks.len(), 120);
    }

    #[test]
    fn toml_round_trip_and_defaults() {
        let text = r#"
            kind = "phase_diagram"
            seeds = [3]
            [task]
            dim = 3
            context_length = 8
            [grids]
            phi = [45, 90.0]
            n_tasks = [4, "inf"]
            [model]
            n_layers = 1
            hidden_dim = 16
            n_heads = 2
            [schedule]
            steps = 10
        "#;
        let c = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(c.grids.phi, vec![45.0, 90.0]);
        assert_eq!(c.grids.n_tasks, vec![TaskCount::Finite(4), TaskCount::Infinite]);
        assert_eq!(c.schedule.batch_size, 128);
        assert_eq!(c.optimizer.lr, 3e-4);
        let back = ExperimentConfig::from_toml(&toml::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(ExperimentConfig::from_toml("kind = \"transition\"\nbogus = 1").is_err());
        assert!(ExperimentConfig::from_toml("kind = \"nope\"").is_err());
        assert!(ExperimentConfig::from_toml("kind = \"transition\"\n[grids]\nphi = []").is_err());
        assert!(ExperimentConfig::from_toml("kind = \"transition\"\n[grids]\nphi = [200]").is_err());
        assert!(ExperimentConfig::from_toml("kind = \"transition\"\n[model]\nn_heads = 3").is_err());
        assert!(ExperimentConfig::from_toml("kind = \"transition\"\n[grids]\ndelta = [178]").is_err());
    }

    #[test]
    fn hash_ignores_formatting_but_not_content() {
        let a = ExperimentConfig::from_toml("kind = \"transition\"\n[grids]\nphi = [30, 60]").unwrap();
        let b = ExperimentConfig::from_toml("kind='transition'\n\n[grids]\n  phi=[ 30.0 ,60 ]\n# note\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.output_dir = Some("elsewhere".into());
        assert_eq!(a.hash(), c.hash());
        c.grids.phi[0] = 31.0;
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
