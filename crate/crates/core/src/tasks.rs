//! Task families (linear, logistic, one-hidden-layer ReLU network), their
//! label functions, task priors on sphere regions and finite task pools.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::rng::RngStream;
use crate::sphere::{dot, unit_axis, BandSpec, CapSpec, RegionSampler, SphereRegion};

/// Config-level task family name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Linear,
    Logistic,
    MlpJoint,
    MlpPerlayer,
}

impl TaskFamily {
    pub fn name(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Logistic => "logistic",
            Self::MlpJoint => "mlp_joint",
            Self::MlpPerlayer => "mlp_perlayer",
        }
    }

    /// Dimension of the sphere(s) the task parameters live on, for inputs in
    /// `R^d`: `[d]` for weight vectors, `[d^2 + d]` for the joint network
    /// parameterisation and `[d^2, d]` for per-layer spheres.
    pub fn parameter_spheres(self, input_dim: usize) -> Vec<usize> {
        match self {
            Self::Linear | Self::Logistic => vec![input_dim],
            Self::MlpJoint => vec![input_dim * input_dim + input_dim],
            Self::MlpPerlayer => vec![input_dim * input_dim, input_dim],
        }
    }
}

impl FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "logistic" => Ok(Self::Logistic),
            "mlp_joint" => Ok(Self::MlpJoint),
            "mlp_perlayer" => Ok(Self::MlpPerlayer),
            other => Err(Error::Config(format!("unknown task family `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearTask {
    pub w: Vec<f64>,
    pub noise_var: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogisticTask {
    pub w: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MlpScheme {
    JointSphere,
    PerLayerSpheres,
}

/// `y = w2 . relu(W1 x)` with `W1` stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpTask {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub scheme: MlpScheme,
}

impl MlpTask {
    pub fn input_dim(&self) -> usize {
        self.w2.len()
    }

    /// `(vec(W1), w2)` flattened.
    pub fn parameters(&self) -> Vec<f64> {
        self.w1.iter().chain(&self.w2).copied().collect()
    }

    fn from_parameters(theta: &[f64], input_dim: usize, scheme: MlpScheme) -> Self {
        let split = input_dim * input_dim;
        Self {
            w1: theta[..split].to_vec(),
            w2: theta[split..].to_vec(),
            scheme,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Task {
    Linear(LinearTask),
    Logistic(LogisticTask),
    Mlp(MlpTask),
}

fn check_dim(expected: usize, x: &[f64]) -> Result<()> {
    if x.len() != expected {
        return Err(Error::Dimension { expected, got: x.len() });
    }
    Ok(())
}

pub fn linear_label(task: &LinearTask, x: &[f64], rng: &mut RngStream) -> Result<f64> {
    check_dim(task.w.len(), x)?;
    let noise = if task.noise_var > 0.0 {
        task.noise_var.sqrt() * rng.normal()
    } else {
        0.0
    };
    Ok(dot(&task.w, x) + noise)
}

/// Heaviside at 1/2 of the logistic of `w . x`; the boundary maps to 1.
pub fn logistic_label(task: &LogisticTask, x: &[f64]) -> Result<f64> {
    check_dim(task.w.len(), x)?;
    let p = 1.0 / (1.0 + (-dot(&task.w, x)).exp());
    Ok(if p >= 0.5 { 1.0 } else { 0.0 })
}

pub fn mlp_label(task: &MlpTask, x: &[f64]) -> Result<f64> {
    let d = task.input_dim();
    check_dim(d, x)?;
    Ok(task
        .w1
        .chunks_exact(d)
        .zip(&task.w2)
        .map(|(row, w2)| w2 * dot(row, x).max(0.0))
        .sum())
}

impl Task {
    pub fn input_dim(&self) -> usize {
        match self {
            Task::Linear(t) => t.w.len(),
            Task::Logistic(t) => t.w.len(),
            Task::Mlp(t) => t.input_dim(),
        }
    }

    pub fn noise_var(&self) -> f64 {
        match self {
            Task::Linear(t) => t.noise_var,
            _ => 0.0,
        }
    }

    /// Noise-free part of the label.
    pub fn mean_label(&self, x: &[f64]) -> Result<f64> {
        match self {
            Task::Linear(t) => {
                check_dim(t.w.len(), x)?;
                Ok(dot(&t.w, x))
            }
            Task::Logistic(t) => logistic_label(t, x),
            Task::Mlp(t) => mlp_label(t, x),
        }
    }

    /// Draws a label; returns `(y, noise)` where `noise` is the additive
    /// label noise actually used (zero for noiseless families).
    pub fn label(&self, x: &[f64], rng: &mut RngStream) -> Result<(f64, f64)> {
        let mean = self.mean_label(x)?;
        let noise = match self {
            Task::Linear(t) if t.noise_var > 0.0 => t.noise_var.sqrt() * rng.normal(),
            _ => 0.0,
        };
        Ok((mean + noise, noise))
    }

    /// Weight vector of linear or logistic tasks.
    pub fn weights(&self) -> Option<&[f64]> {
        match self {
            Task::Linear(t) => Some(&t.w),
            Task::Logistic(t) => Some(&t.w),
            Task::Mlp(_) => None,
        }
    }

    /// The point(s) on the parameter sphere that define this task.
    pub fn parameter_vector(&self) -> Vec<f64> {
        match self {
            Task::Linear(t) => t.w.clone(),
            Task::Logistic(t) => t.w.clone(),
            Task::Mlp(t) => t.parameters(),
        }
    }
}

/// Region(s) the task parameters are drawn from.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskPrior {
    Linear { region: SphereRegion, noise_var: f64 },
    Logistic { region: SphereRegion },
    MlpJoint { input_dim: usize, region: SphereRegion },
    MlpPerLayer { input_dim: usize, w1_region: SphereRegion, w2_region: SphereRegion },
}

/// Region with polar angles in `[lo, hi]` around `e_1` on the radius-`r`
/// sphere in `R^dim`; a cap when `lo == 0`.
pub fn angular_region(dim: usize, lo: f64, hi: f64, radius: f64) -> Result<SphereRegion> {
    if lo <= 0.0 {
        Ok(CapSpec::new(dim, hi, unit_axis(dim, 0), radius)?.into())
    } else {
        Ok(BandSpec::new(dim, lo, hi - lo, unit_axis(dim, 0), radius)?.into())
    }
}

impl TaskPrior {
    /// Prior of `family` with polar angles in `[lo, hi]` (radians) around
    /// `e_1` in each parameter sphere.
    pub fn from_angles(
        family: TaskFamily,
        input_dim: usize,
        lo: f64,
        hi: f64,
        noise_var: f64,
        radius: f64,
    ) -> Result<Self> {
        if noise_var < 0.0 {
            return Err(domain(format!("noise variance must be >= 0, got {noise_var}")));
        }
        let spheres = family.parameter_spheres(input_dim);
        Ok(match family {
            TaskFamily::Linear => Self::Linear {
                region: angular_region(spheres[0], lo, hi, radius)?,
                noise_var,
            },
            TaskFamily::Logistic => Self::Logistic {
                region: angular_region(spheres[0], lo, hi, 1.0)?,
            },
            TaskFamily::MlpJoint => Self::MlpJoint {
                input_dim,
                region: angular_region(spheres[0], lo, hi, 1.0)?,
            },
            TaskFamily::MlpPerlayer => Self::MlpPerLayer {
                input_dim,
                w1_region: angular_region(spheres[0], lo, hi, 1.0)?,
                w2_region: angular_region(spheres[1], lo, hi, 1.0)?,
            },
        })
    }

    pub fn family(&self) -> TaskFamily {
        match self {
            Self::Linear { .. } => TaskFamily::Linear,
            Self::Logistic { .. } => TaskFamily::Logistic,
            Self::MlpJoint { .. } => TaskFamily::MlpJoint,
            Self::MlpPerLayer { .. } => TaskFamily::MlpPerlayer,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Self::Linear { region, .. } | Self::Logistic { region } => region.dim(),
            Self::MlpJoint { input_dim, .. } | Self::MlpPerLayer { input_dim, .. } => *input_dim,
        }
    }

    pub fn sampler(&self) -> Result<TaskSampler> {
        let kind = match self {
            Self::Linear { region, noise_var } => SamplerKind::Linear {
                region: region.sampler()?,
                noise_var: *noise_var,
            },
            Self::Logistic { region } => SamplerKind::Logistic(region.sampler()?),
            Self::MlpJoint { input_dim, region } => {
                let d = *input_dim;
                if region.dim() != d * d + d {
                    return Err(Error::Dimension { expected: d * d + d, got: region.dim() });
                }
                SamplerKind::MlpJoint { input_dim: d, region: region.sampler()? }
            }
            Self::MlpPerLayer { input_dim, w1_region, w2_region } => {
                let d = *input_dim;
                if w1_region.dim() != d * d {
                    return Err(Error::Dimension { expected: d * d, got: w1_region.dim() });
                }
                if w2_region.dim() != d {
                    return Err(Error::Dimension { expected: d, got: w2_region.dim() });
                }
                SamplerKind::MlpPerLayer {
                    w1: w1_region.sampler()?,
                    w2: w2_region.sampler()?,
                }
            }
        };
        Ok(TaskSampler { kind })
    }
}

#[derive(Clone, Debug)]
enum SamplerKind {
    Linear { region: RegionSampler, noise_var: f64 },
    Logistic(RegionSampler),
    MlpJoint { input_dim: usize, region: RegionSampler },
    MlpPerLayer { w1: RegionSampler, w2: RegionSampler },
}

/// A [`TaskPrior`] with its region samplers prepared.
#[derive(Clone, Debug)]
pub struct TaskSampler {
    kind: SamplerKind,
}

impl TaskSampler {
    pub fn sample(&self, rng: &mut RngStream) -> Task {
        match &self.kind {
            SamplerKind::Linear { region, noise_var } => Task::Linear(LinearTask {
                w: region.sample(rng),
                noise_var: *noise_var,
            }),
            SamplerKind::Logistic(region) => Task::Logistic(LogisticTask { w: region.sample(rng) }),
            SamplerKind::MlpJoint { input_dim, region } => {
                Task::Mlp(MlpTask::from_parameters(&region.sample(rng), *input_dim, MlpScheme::JointSphere))
            }
            SamplerKind::MlpPerLayer { w1, w2 } => Task::Mlp(MlpTask {
                w1: w1.sample(rng),
                w2: w2.sample(rng),
                scheme: MlpScheme::PerLayerSpheres,
            }),
        }
    }
}

/// Draws a network task under either parameter-sphere scheme.
pub fn sample_mlp_task(rng: &mut RngStream, prior: &TaskPrior) -> Result<MlpTask> {
    match prior {
        TaskPrior::MlpJoint { .. } | TaskPrior::MlpPerLayer { .. } => match prior.sampler()?.sample(rng) {
            Task::Mlp(t) => Ok(t),
            _ => unreachable!(),
        },
        _ => Err(Error::Config("sample_mlp_task needs an MLP prior".into())),
    }
}

/// A fixed set of tasks drawn once; episodes pick uniformly with replacement.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskPool {
    tasks: Vec<Task>,
}

pub fn make_task_pool(rng: &mut RngStream, prior: &TaskPrior, n_tasks: usize) -> Result<TaskPool> {
    if n_tasks == 0 {
        return Err(domain("task pool needs at least one task"));
    }
    let sampler = prior.sampler()?;
    Ok(TaskPool {
        tasks: (0..n_tasks).map(|_| sampler.sample(rng)).collect(),
    })
}

impl TaskPool {
    pub fn from_tasks(tasks: Vec<Task>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(domain("task pool needs at least one task"));
        }
        Ok(Self { tasks })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn draw_index(&self, rng: &mut RngStream) -> usize {
        rng.index(self.tasks.len())
    }

    pub fn draw(&self, rng: &mut RngStream) -> &Task {
        &self.tasks[self.draw_index(rng)]
    }
}

/// Number of pretraining tasks: a finite pool size or `inf` for a fresh
/// task per episode. Serialized as an integer or the string `"inf"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskCount {
    Finite(usize),
    Infinite,
}

impl fmt::Display for TaskCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Finite(n) => write!(f, "{n}"),
            Self::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for TaskCount {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("inf") {
            return Ok(Self::Infinite);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Self::Finite(n)),
            _ => Err(Error::Config(format!("task count must be a positive integer or \"inf\", got {s:?}"))),
        }
    }
}

impl Serialize for TaskCount {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Finite(n) => s.serialize_u64(*n as u64),
            Self::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for TaskCount {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = TaskCount;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a positive integer or \"inf\"")
            }

            fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<TaskCount, E> {
                if v == 0 {
                    return Err(E::custom("task count must be positive"));
                }
                Ok(TaskCount::Finite(v as usize))
            }

            fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<TaskCount, E> {
                u64::try_from(v).map_err(|_| E::custom("task count must be positive")).and_then(|v| self.visit_u64(v))
            }

            fn visit_f64<E: serde::de::Error>(self, v: f64) -> std::result::Result<TaskCount, E> {
                if v == f64::INFINITY {
                    Ok(TaskCount::Infinite)
                } else if v >= 1.0 && v.fract() == 0.0 && v < 2f64.powi(53) {
                    Ok(TaskCount::Finite(v as usize))
                } else {
                    Err(E::custom(format!("invalid task count {v}")))
                }
            }

            fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<TaskCount, E> {
                v.parse().map_err(E::custom)
            }
        }
        d.deserialize_any(V)
    }
}

/// Where the task of each episode comes from.
#[derive(Clone, Debug)]
pub enum TaskSource {
    /// A fresh task per episode.
    Continuous(TaskSampler),
    /// Uniform draws with replacement from a fixed pool.
    Pool(TaskPool),
}

impl TaskSource {
    pub fn continuous(prior: &TaskPrior) -> Result<Self> {
        Ok(Self::Continuous(prior.sampler()?))
    }

    pub fn draw(&self, rng: &mut RngStream) -> Task {
        match self {
            Self::Continuous(s) => s.sample(rng),
            Self::Pool(p) => p.draw(rng).clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::{angle_between, norm};
    use crate::stats::mean_stderr;
    use std::f64::consts::PI;

    fn linear(w: Vec<f64>, noise_var: f64) -> LinearTask {
        LinearTask { w, noise_var }
    }

    #[test]
    fn task_count_parses_integers_and_inf() {
        assert_eq!("inf".parse::<TaskCount>().unwrap(), TaskCount::Infinite);
        assert_eq!("64".parse::<TaskCount>().unwrap(), TaskCount::Finite(64));
        assert!("0".parse::<TaskCount>().is_err());
        #[derive(Deserialize)]
        struct Cfg {
            n: Vec<TaskCount>,
        }
        let cfg: Cfg = toml::from_str(r#"n = [4, 2048, "inf"]"#).unwrap();
        assert_eq!(cfg.n, vec![TaskCount::Finite(4), TaskCount::Finite(2048), TaskCount::Infinite]);
        assert!(toml::from_str::<Cfg>("n = [-1]").is_err());
        assert_eq!(serde_json::to_string(&TaskCount::Infinite).unwrap(), "\"inf\"");
    }

    #[test]
    fn linear_label_examples() {
        let mut rng = RngStream::new(0, 0);
        let t = linear(vec![1.0, 0.0, 0.0], 0.0);
        assert_eq!(linear_label(&t, &[3.0, -1.0, 7.0], &mut rng).unwrap(), 3.0);
        let t = linear(vec![0.0, 1.0, 0.0], 0.0);
        assert_eq!(linear_label(&t, &[5.0, 0.0, 2.0], &mut rng).unwrap(), 0.0);
        assert!(linear_label(&t, &[1.0, 2.0], &mut rng).is_err());
    }

    #[test]
    fn noisy_label_mean() {
        let mut rng = RngStream::new(1, 0);
        let t = linear(vec![0.6, 0.8], 0.25);
        let x = [1.5, -0.5];
        let n = 100_000;
        let ys: Vec<f64> = (0..n).map(|_| linear_label(&t, &x, &mut rng).unwrap()).collect();
        let (m, _) = mean_stderr(&ys);
        assert!((m - dot(&t.w, &x)).abs() < 3.0 * 0.5 / (n as f64).sqrt());
    }

    #[test]
    fn logistic_examples() {
        let t = LogisticTask { w: vec![1.0, 0.0] };
        assert_eq!(logistic_label(&t, &[0.0, 3.0]).unwrap(), 1.0);
        assert_eq!(logistic_label(&t, &[-2.0, 1.0]).unwrap(), 0.0);
        let mut rng = RngStream::new(2, 0);
        for _ in 0..10_000 {
            let w = rng.normal_vec(4);
            let x = rng.normal_vec(4);
            let expect = if dot(&w, &x) >= 0.0 { 1.0 } else { 0.0 };
            assert_eq!(logistic_label(&LogisticTask { w }, &x).unwrap(), expect);
        }
    }

    #[test]
    fn mlp_examples() {
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let t = MlpTask { w1: eye.clone(), w2: vec![1.0, 0.0, 0.0], scheme: MlpScheme::JointSphere };
        assert_eq!(mlp_label(&t, &[2.0, -1.0, 0.0]).unwrap(), 2.0);
        let zero = MlpTask { w1: eye, w2: vec![0.0; 3], scheme: MlpScheme::JointSphere };
        assert_eq!(mlp_label(&zero, &[2.0, 5.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn mlp_matches_straight_line_evaluation() {
        let mut rng = RngStream::new(3, 0);
        let prior = TaskPrior::from_angles(TaskFamily::MlpJoint, 3, 0.0, PI, 0.0, 1.0).unwrap();
        for _ in 0..200 {
            let t = sample_mlp_task(&mut rng, &prior).unwrap();
            let x = rng.normal_vec(3);
            let mut y = 0.0;
            for i in 0..3 {
                let mut h = 0.0;
                for j in 0..3 {
                    h += t.w1[i * 3 + j] * x[j];
                }
                if h > 0.0 {
                    y += t.w2[i] * h;
                }
            }
            assert!((mlp_label(&t, &x).unwrap() - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_scheme_norms() {
        let mut rng = RngStream::new(4, 0);
        let joint = TaskPrior::from_angles(TaskFamily::MlpJoint, 3, 0.0, PI, 0.0, 1.0).unwrap();
        let per = TaskPrior::from_angles(TaskFamily::MlpPerlayer, 3, 0.0, PI, 0.0, 1.0).unwrap();
        for _ in 0..500 {
            let t = sample_mlp_task(&mut rng, &joint).unwrap();
            assert!((norm(&t.parameters()) - 1.0).abs() < 1e-9);
            let t = sample_mlp_task(&mut rng, &per).unwrap();
            assert!((norm(&t.w1) - 1.0).abs() < 1e-9);
            assert!((norm(&t.w2) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mlp_prior_dimension_mismatch() {
        let prior = TaskPrior::MlpJoint {
            input_dim: 3,
            region: angular_region(9, 0.0, PI, 1.0).unwrap(),
        };
        assert!(prior.sampler().is_err());
        assert!(sample_mlp_task(
            &mut RngStream::new(0, 0),
            &TaskPrior::from_angles(TaskFamily::Linear, 3, 0.0, 1.0, 0.0, 1.0).unwrap()
        )
        .is_err());
    }

    #[test]
    fn joint_sphere_polar_bias() {
        let mut rng = RngStream::new(5, 0);
        let mean_w2 = |phi: f64, rng: &mut RngStream| {
            let prior = TaskPrior::from_angles(TaskFamily::MlpJoint, 3, 0.0, phi.to_radians(), 0.0, 1.0).unwrap();
            let s = prior.sampler().unwrap();
            (0..10_000)
                .map(|_| match s.sample(rng) {
                    Task::Mlp(t) => norm(&t.w2),
                    _ => unreachable!(),
                })
                .sum::<f64>()
                / 10_000.0
        };
        let near_pole = mean_w2(15.0, &mut rng);
        let equator = mean_w2(90.0, &mut rng);
        assert!(near_pole < 0.5 * equator, "{near_pole} vs {equator}");
    }

    #[test]
    fn pool_behaviour() {
        let prior = TaskPrior::from_angles(TaskFamily::Linear, 5, 0.0, PI, 0.0, 1.0).unwrap();
        let pool = make_task_pool(&mut RngStream::new(6, 0), &prior, 1).unwrap();
        let mut rng = RngStream::new(6, 1);
        let first = pool.draw(&mut rng).clone();
        for _ in 0..20 {
            assert_eq!(pool.draw(&mut rng), &first);
        }
        assert!(make_task_pool(&mut rng, &prior, 0).is_err());

        let a = make_task_pool(&mut RngStream::new(9, 2), &prior, 64).unwrap();
        let b = make_task_pool(&mut RngStream::new(9, 2), &prior, 64).unwrap();
        for (x, y) in a.tasks().iter().zip(b.tasks()) {
            let bits = |t: &Task| t.parameter_vector().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(x), bits(y));
        }
    }

    #[test]
    fn full_sphere_pool_pairwise_angles() {
        // For uniform unit vectors in R^d the mean pairwise angle is pi/2.
        let d = 10;
        let prior = TaskPrior::from_angles(TaskFamily::Linear, d, 0.0, PI, 0.0, 1.0).unwrap();
        let pool = make_task_pool(&mut RngStream::new(7, 0), &prior, 2048).unwrap();
        let ws: Vec<&[f64]> = pool.tasks().iter().map(|t| t.weights().unwrap()).collect();
        // disjoint pairs keep the samples independent
        let angles: Vec<f64> = ws
            .chunks_exact(2)
            .map(|p| angle_between(p[0], p[1]).unwrap())
            .collect();
        let (m, se) = mean_stderr(&angles);
        assert!((m - PI / 2.0).abs() < 3.0 * se, "{m} +- {se}");
    }

    #[test]
    fn pool_frequencies_are_uniform() {
        let prior = TaskPrior::from_angles(TaskFamily::Linear, 3, 0.0, PI, 0.0, 1.0).unwrap();
        let pool = make_task_pool(&mut RngStream::new(8, 0), &prior, 16).unwrap();
        let mut rng = RngStream::new(8, 1);
        let draws = 1_000_000;
        let mut counts = [0usize; 16];
        for _ in 0..draws {
            counts[pool.draw_index(&mut rng)] += 1;
        }
        let p = 1.0 / 16.0;
        let expected = draws as f64 * p;
        let se = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - expected).abs() < 5.0 * se);
        }
    }

    #[test]
    fn family_names_round_trip() {
        for f in [TaskFamily::Linear, TaskFamily::Logistic, TaskFamily::MlpJoint, TaskFamily::MlpPerlayer] {
            assert_eq!(f.name().parse::<TaskFamily>().unwrap(), f);
        }
        assert!("quadratic".parse::<TaskFamily>().is_err());
    }
}
