//! GPT-2-style decoder-only transformer over episode tokens, its AdamW
//! trainer and checkpoint format.
//!
//! Tokens `(batch, 2n, d)` are mapped to the hidden width by a learned
//! linear read-in, learned positional embeddings are added, and a stack of
//! causal self-attention / MLP blocks is applied. A linear read-out gives one
//! scalar per position; the estimate of `y_k` is read at the row of `x_k`.

mod checkpoint;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{AdamW, AdamWConfig};
pub use train::{write_loss_trace, DataSpec, PerpendicularProbe, TrainSchedule, Trainer};

use serde::{Deserialize, Serialize};

use crate::autodiff::{GeluMode, Scalar, Tape, Tensor, Var};
use crate::episode::{tokenize, Batch, Episode};
use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    Pre,
    Post,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeluKind {
    Tanh,
    Erf,
}

impl From<GeluKind> for GeluMode {
    fn from(g: GeluKind) -> Self {
        match g {
            GeluKind::Tanh => GeluMode::Tanh,
            GeluKind::Erf => GeluMode::Erf,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    /// Token positions available, `2n` for episodes of length `n`.
    pub max_positions: usize,
    pub input_dim: usize,
    #[serde(default = "default_norm")]
    pub norm: NormPlacement,
    #[serde(default = "default_gelu")]
    pub gelu: GeluKind,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_norm() -> NormPlacement {
    NormPlacement::Pre
}
fn default_gelu() -> GeluKind {
    GeluKind::Tanh
}
fn default_ln_eps() -> f64 {
    1e-5
}
fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    /// Full-size configuration for `d`-dimensional episodes of length `n`.
    pub fn full_scale(input_dim: usize, context_length: usize) -> Self {
        Self::new(10, 128, 8, input_dim, context_length)
    }

    /// Small configuration used for desk-scale runs.
    pub fn desk(input_dim: usize, context_length: usize) -> Self {
        Self::new(2, 64, 4, input_dim, context_length)
    }

    pub fn new(n_layers: usize, hidden_dim: usize, n_heads: usize, input_dim: usize, context_length: usize) -> Self {
        Self {
            n_layers,
            hidden_dim,
            n_heads,
            max_positions: 2 * context_length,
            input_dim,
            norm: NormPlacement::Pre,
            gelu: GeluKind::Tanh,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.hidden_dim == 0 || self.n_heads == 0 || self.input_dim == 0 {
            return bad(format!("model dimensions must be positive: {self:?}"));
        }
        if !self.hidden_dim.is_multiple_of(self.n_heads) {
            return bad(format!("hidden_dim {} not divisible by n_heads {}", self.hidden_dim, self.n_heads));
        }
        if self.max_positions == 0 {
            return bad("max_positions must be positive".into());
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let (d, h, p) = (self.input_dim, self.hidden_dim, self.max_positions);
        let read_in = d * h + h;
        let positions = p * h;
        let per_layer = 12 * h * h + 13 * h;
        let final_norm = 2 * h;
        let read_out = h + 1;
        read_in + positions + self.n_layers * per_layer + final_norm + read_out
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, h, p) = (cfg.input_dim, cfg.hidden_dim, cfg.max_positions);
    let mut out = vec![
        ("read_in.w".to_string(), vec![d, h], Init::Normal),
        ("read_in.b".to_string(), vec![h], Init::Zeros),
        ("pos".to_string(), vec![p, h], Init::Normal),
    ];
    for l in 0..cfg.n_layers {
        let name = |s: &str| format!("h{l}.{s}");
        out.extend([
            (name("ln1.g"), vec![h], Init::Ones),
            (name("ln1.b"), vec![h], Init::Zeros),
            (name("attn.qkv.w"), vec![h, 3 * h], Init::Normal),
            (name("attn.qkv.b"), vec![3 * h], Init::Zeros),
            (name("attn.proj.w"), vec![h, h], Init::Normal),
            (name("attn.proj.b"), vec![h], Init::Zeros),
            (name("ln2.g"), vec![h], Init::Ones),
            (name("ln2.b"), vec![h], Init::Zeros),
            (name("mlp.fc.w"), vec![h, 4 * h], Init::Normal),
            (name("mlp.fc.b"), vec![4 * h], Init::Zeros),
            (name("mlp.proj.w"), vec![4 * h, h], Init::Normal),
            (name("mlp.proj.b"), vec![h], Init::Zeros),
        ]);
    }
    out.extend([
        ("ln_f.g".to_string(), vec![h], Init::Ones),
        ("ln_f.b".to_string(), vec![h], Init::Zeros),
        ("read_out.w".to_string(), vec![h, 1], Init::Normal),
        ("read_out.b".to_string(), vec![1], Init::Zeros),
    ]);
    out
}

/// Normal draw truncated to two standard deviations.
fn truncated_normal(rng: &mut RngStream, std: f64) -> f64 {
    loop {
        let z = rng.normal();
        if z.abs() <= 2.0 {
            return std * z;
        }
    }
}

/// Named parameter tensors of one model, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

/// Vars bound to the parameters on one tape, in layout order.
struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    fn get(&self, i: &mut usize) -> Var {
        let v = self.vars[*i];
        *i += 1;
        v
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn init(config: &ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in layout(config) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Normal => (0..n).map(|_| T::of(truncated_normal(rng, config.init_std))).collect(),
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
            };
            names.push(name);
            tensors.push(Tensor::new(&shape, data));
        }
        Ok(Self { config: config.clone(), names, tensors })
    }

    /// Rebuilds from named tensors, checking names and shapes against the
    /// layout of `config`.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let expected = layout(config);
        if expected.len() != named.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for ((name, shape, _), (got_name, t)) in expected.into_iter().zip(named) {
            if name != got_name || shape != t.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected {name} {shape:?}, found {got_name} {:?}",
                    t.shape
                )));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { config: config.clone(), names, tensors })
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    /// Runs the network; returns the `[B, T, 1]` read-out for every position.
    fn build(&self, tape: &mut Tape<T>, bound: &Bound, tokens: Tensor<T>) -> Result<Var> {
        let cfg = &self.config;
        let [b, t, d] = <[usize; 3]>::try_from(tokens.shape.as_slice())
            .map_err(|_| Error::Shape { op: "forward", detail: format!("tokens {:?}", tokens.shape) })?;
        if d != cfg.input_dim {
            return Err(Error::Dimension { expected: cfg.input_dim, got: d });
        }
        if t > cfg.max_positions {
            return Err(Error::Shape {
                op: "forward",
                detail: format!("{t} positions exceed max_positions {}", cfg.max_positions),
            });
        }
        let h = cfg.hidden_dim;
        let heads = cfg.n_heads;
        let head_dim = h / heads;
        let gelu: GeluMode = cfg.gelu.into();
        let eps = cfg.layer_norm_eps;
        let mut i = 0;

        let x = tape.constant(tokens);
        let (w_in, b_in, pos) = (bound.get(&mut i), bound.get(&mut i), bound.get(&mut i));
        let x = tape.matmul(x, w_in)?;
        let x = tape.add_bias(x, b_in)?;
        let mut x = tape.embedding_add(x, pos)?;

        for _ in 0..cfg.n_layers {
            let (ln1_g, ln1_b) = (bound.get(&mut i), bound.get(&mut i));
            let (qkv_w, qkv_b) = (bound.get(&mut i), bound.get(&mut i));
            let (proj_w, proj_b) = (bound.get(&mut i), bound.get(&mut i));
            let (ln2_g, ln2_b) = (bound.get(&mut i), bound.get(&mut i));
            let (fc_w, fc_b) = (bound.get(&mut i), bound.get(&mut i));
            let (mp_w, mp_b) = (bound.get(&mut i), bound.get(&mut i));

            let attn_in = match cfg.norm {
                NormPlacement::Pre => tape.layer_norm(x, ln1_g, ln1_b, eps)?,
                NormPlacement::Post => x,
            };
            let qkv = tape.matmul(attn_in, qkv_w)?;
            let qkv = tape.add_bias(qkv, qkv_b)?;
            let q = tape.slice_last(qkv, 0, h)?;
            let k = tape.slice_last(qkv, h, h)?;
            let v = tape.slice_last(qkv, 2 * h, h)?;
            let q = tape.split_heads(q, heads)?;
            let k = tape.split_heads(k, heads)?;
            let v = tape.split_heads(v, heads)?;
            let scores = tape.batch_matmul(q, k, true)?;
            let scores = tape.scale(scores, T::of(1.0 / (head_dim as f64).sqrt()));
            let scores = tape.causal_mask_fill(scores)?;
            let att = tape.softmax(scores);
            let ctx = tape.batch_matmul(att, v, false)?;
            let ctx = tape.merge_heads(ctx, heads)?;
            let out = tape.matmul(ctx, proj_w)?;
            let out = tape.add_bias(out, proj_b)?;
            x = tape.add(x, out)?;
            if cfg.norm == NormPlacement::Post {
                x = tape.layer_norm(x, ln1_g, ln1_b, eps)?;
            }

            let mlp_in = match cfg.norm {
                NormPlacement::Pre => tape.layer_norm(x, ln2_g, ln2_b, eps)?,
                NormPlacement::Post => x,
            };
            let hdn = tape.matmul(mlp_in, fc_w)?;
            let hdn = tape.add_bias(hdn, fc_b)?;
            let hdn = tape.gelu(hdn, gelu);
            let out = tape.matmul(hdn, mp_w)?;
            let out = tape.add_bias(out, mp_b)?;
            x = tape.add(x, out)?;
            if cfg.norm == NormPlacement::Post {
                x = tape.layer_norm(x, ln2_g, ln2_b, eps)?;
            }
        }

        let (lnf_g, lnf_b) = (bound.get(&mut i), bound.get(&mut i));
        let (w_out, b_out) = (bound.get(&mut i), bound.get(&mut i));
        let x = tape.layer_norm(x, lnf_g, lnf_b, eps)?;
        let y = tape.matmul(x, w_out)?;
        let y = tape.add_bias(y, b_out)?;
        debug_assert_eq!(tape.shape(y), &[b, t, 1]);
        Ok(y)
    }

    /// Read-out at every token position, `(batch, seq_len)` row-major.
    pub fn forward_all(&self, tokens: &[f64], batch: usize, seq_len: usize) -> Result<Vec<f64>> {
        let d = self.config.input_dim;
        if tokens.len() != batch * seq_len * d {
            return Err(Error::Shape {
                op: "forward",
                detail: format!("{} token values for ({batch}, {seq_len}, {d})", tokens.len()),
            });
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let y = self.build(&mut tape, &bound, Tensor::from_f64(&[batch, seq_len, d], tokens))?;
        Ok(tape.value(y).to_f64())
    }

    /// Predictions at the `x` rows: `(batch, n)` for `seq_len = 2n`.
    pub fn forward(&self, tokens: &[f64], batch: usize, seq_len: usize) -> Result<Vec<f64>> {
        let all = self.forward_all(tokens, batch, seq_len)?;
        Ok(all.chunks_exact(seq_len).flat_map(|row| row.iter().step_by(2).copied()).collect())
    }

    pub fn predict_batch(&self, batch: &Batch) -> Result<Vec<f64>> {
        let [b, t, _] = batch.shape();
        self.forward(&batch.tokens, b, t)
    }

    /// Estimate of the final label `y_n` from the full context.
    pub fn predict_final(&self, episode: &Episode) -> Result<f64> {
        let tok = tokenize(episode);
        let preds = self.forward(&tok.data, 1, tok.rows)?;
        Ok(*preds.last().unwrap())
    }

    /// Final-position predictions for many episodes, evaluated in chunks.
    pub fn predict_final_many(&self, episodes: &[Episode], chunk: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(episodes.len());
        for group in episodes.chunks(chunk.max(1)) {
            let batch = Batch::from_episodes(group.to_vec())?;
            let n = batch.context_length;
            let preds = self.predict_batch(&batch)?;
            out.extend(preds.chunks_exact(n).map(|r| r[n - 1]));
        }
        Ok(out)
    }

    /// Mean over the batch of the mean squared error at all `n` positions.
    pub fn train_loss(&self, batch: &Batch) -> Result<f64> {
        let preds = self.predict_batch(batch)?;
        let n = preds.len() as f64;
        Ok(preds.iter().zip(&batch.targets).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / n)
    }

    /// Training loss and its gradient with respect to every parameter.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(f64, Vec<Tensor<T>>)> {
        let [b, t, d] = batch.shape();
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, true);
        let y = self.build(&mut tape, &bound, Tensor::from_f64(&[b, t, d], &batch.tokens))?;
        let mut target = vec![T::zero(); b * t];
        let mut mask = vec![false; b * t];
        let n = batch.context_length;
        for bi in 0..b {
            for k in 0..n {
                target[bi * t + 2 * k] = T::of(batch.targets[bi * n + k]);
                mask[bi * t + 2 * k] = true;
            }
        }
        let loss = tape.mse_masked(y, &target, &mask)?;
        let value = tape.value(loss).data[0].as_f64();
        let mut grads = tape.backward(loss)?;
        Ok((value, bound.vars.iter().map(|&v| grads.take(v)).collect()))
    }
}
