use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};

use super::{AdamW, AdamWConfig, Checkpoint, ModelConfig, ModelParams};
use crate::autodiff::Tensor;
use crate::episode::{make_batch, zero_perpendicular, Batch, InputSampler};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tasks::TaskSource;

const INIT_STREAM: u64 = 0x1417;
const DATA_STREAM: u64 = 0xDA7A;
const TRACE_TENSOR: &str = "trace.loss";
const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

/// Projects training inputs onto the pole before each step.
#[derive(Clone, Debug, PartialEq)]
pub struct PerpendicularProbe {
    pub pole: Vec<f64>,
    pub relabel: bool,
}

/// Where training batches come from.
#[derive(Clone, Debug)]
pub struct DataSpec {
    pub source: TaskSource,
    pub inputs: InputSampler,
    pub context_length: usize,
    pub batch_size: usize,
    pub probe: Option<PerpendicularProbe>,
}

impl DataSpec {
    pub fn next_batch(&self, rng: &mut RngStream) -> Result<Batch> {
        let batch = make_batch(rng, &self.source, &self.inputs, self.batch_size, self.context_length)?;
        match &self.probe {
            None => Ok(batch),
            Some(p) => Batch::from_episodes(
                batch
                    .episodes
                    .iter()
                    .map(|ep| zero_perpendicular(ep, &p.pole, p.relabel))
                    .collect::<Result<_>>()?,
            ),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSchedule {
    pub steps: u64,
    /// Callback period; `None` disables it.
    pub eval_every: Option<u64>,
    pub checkpoint_every: Option<u64>,
    pub checkpoint_path: Option<PathBuf>,
}

/// Single-model training state: parameters, optimizer moments, the data
/// stream and the per-step loss trace.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub params: ModelParams<f32>,
    pub optimizer: AdamW<f32>,
    pub data_rng: RngStream,
    pub trace: Vec<f64>,
    /// Directory that receives the offending batch when a loss goes non-finite.
    pub dump_dir: Option<PathBuf>,
    pub extra: serde_json::Value,
}

impl Trainer {
    pub fn new(model: &ModelConfig, optimizer: AdamWConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(model, &mut RngStream::new(seed, INIT_STREAM))?;
        let opt = AdamW::new(optimizer, &params.tensors);
        Ok(Self {
            params,
            optimizer: opt,
            data_rng: RngStream::new(seed, DATA_STREAM),
            trace: Vec::new(),
            dump_dir: None,
            extra: serde_json::Value::Null,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.optimizer.step
    }

    /// One optimizer step on a fresh batch; returns the batch loss.
    pub fn step(&mut self, data: &DataSpec) -> Result<f64> {
        let batch = data.next_batch(&mut self.data_rng)?;
        self.step_on(&batch)
    }

    pub fn step_on(&mut self, batch: &Batch) -> Result<f64> {
        let (loss, grads) = self.params.loss_and_grads(batch)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            let step = self.step_count() + 1;
            let where_ = self.dump_batch(batch, step)?;
            return Err(Error::NonFinite(format!("training loss at step {step} ({loss}){where_}")));
        }
        self.optimizer.update(&mut self.params.tensors, &grads)?;
        self.trace.push(loss);
        Ok(loss)
    }

    fn dump_batch(&self, batch: &Batch, step: u64) -> Result<String> {
        let Some(dir) = &self.dump_dir else { return Ok(String::new()) };
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("nonfinite_batch_step{step}.json"));
        let doc = serde_json::json!({
            "step": step,
            "shape": batch.shape(),
            "tokens": batch.tokens,
            "targets": batch.targets,
        });
        fs::write(&path, serde_json::to_vec(&doc)?)?;
        Ok(format!("; batch written to {}", path.display()))
    }

    /// Trains to `schedule.steps` total steps, calling `on_eval` every
    /// `eval_every` steps and checkpointing when configured.
    pub fn run<F>(&mut self, data: &DataSpec, schedule: &TrainSchedule, mut on_eval: F) -> Result<()>
    where
        F: FnMut(&Trainer) -> Result<()>,
    {
        while self.step_count() < schedule.steps {
            let loss = self.step(data)?;
            let s = self.step_count();
            if s.is_multiple_of(1000) {
                info!("step {s}: loss {loss:.6}");
            } else {
                debug!("step {s}: loss {loss:.6}");
            }
            if schedule.eval_every.is_some_and(|e| e > 0 && s.is_multiple_of(e)) {
                on_eval(self)?;
            }
            if let (Some(every), Some(path)) = (schedule.checkpoint_every, &schedule.checkpoint_path) {
                if every > 0 && s.is_multiple_of(every) {
                    self.checkpoint().save(path)?;
                }
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor<f32>)> =
            self.params.names.iter().cloned().zip(self.params.tensors.iter().cloned()).collect();
        for (name, m) in self.params.names.iter().zip(&self.optimizer.m) {
            tensors.push((format!("{M_PREFIX}{name}"), m.clone()));
        }
        for (name, v) in self.params.names.iter().zip(&self.optimizer.v) {
            tensors.push((format!("{V_PREFIX}{name}"), v.clone()));
        }
        // Losses are computed in f32, so the narrowing is exact.
        let trace = self.trace.iter().map(|&l| l as f32).collect();
        tensors.push((TRACE_TENSOR.to_string(), Tensor::new(&[self.trace.len()], trace)));
        let mut rng = BTreeMap::new();
        rng.insert("data".to_string(), self.data_rng.state());
        Checkpoint {
            model: self.params.config.clone(),
            optimizer: self.optimizer.config,
            step: self.step_count(),
            rng,
            extra: self.extra.clone(),
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let n = ckpt.tensors.len();
        let n_params = (n.saturating_sub(1)) / 3;
        if n != 3 * n_params + 1 {
            return Err(Error::Checkpoint(format!("unexpected tensor count {n}")));
        }
        let params = ModelParams::from_named(&ckpt.model, ckpt.tensors[..n_params].to_vec())?;
        let moments = |offset: usize, prefix: &str| -> Result<Vec<Tensor<f32>>> {
            params
                .names
                .iter()
                .zip(&ckpt.tensors[offset..offset + n_params])
                .map(|(name, (got, t))| {
                    let want = format!("{prefix}{name}");
                    if *got != want {
                        return Err(Error::Checkpoint(format!("expected {want}, found {got}")));
                    }
                    Ok(t.clone())
                })
                .collect()
        };
        let m = moments(n_params, M_PREFIX)?;
        let v = moments(2 * n_params, V_PREFIX)?;
        for (p, (mm, vv)) in params.tensors.iter().zip(m.iter().zip(&v)) {
            if p.shape != mm.shape || p.shape != vv.shape {
                return Err(Error::Checkpoint("moment shape does not match parameter".into()));
            }
        }
        let (trace_name, trace) = &ckpt.tensors[n - 1];
        if trace_name != TRACE_TENSOR || trace.numel() as u64 != ckpt.step {
            return Err(Error::Checkpoint("missing or inconsistent loss trace".into()));
        }
        let data_rng = ckpt
            .rng
            .get("data")
            .cloned()
            .map(RngStream::from_state)
            .ok_or_else(|| Error::Checkpoint("missing data RNG state".into()))?;
        Ok(Self {
            params,
            optimizer: AdamW { config: ckpt.optimizer, step: ckpt.step, m, v },
            data_rng,
            trace: trace.data.iter().map(|&l| l as f64).collect(),
            dump_dir: None,
            extra: ckpt.extra.clone(),
        })
    }
}

/// Writes `step,train_loss` rows, one per optimizer step.
pub fn write_loss_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "train_loss"])?;
    for (i, l) in trace.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
