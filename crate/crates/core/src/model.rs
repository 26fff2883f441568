//! Shared ReLU encoder with a standard head `f_s`, a balanced head `f_b` and
//! a linear projection head whose output is L2-normalised.
//!
//! Parameters are stored as a flat, ordered list of matrices. Weights are
//! `fan_in × fan_out` and multiply from the right (`x·W + b`).

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng, Tape, Var};

/// Floor on the embedding norm before normalisation.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 8,
            hidden_dims: vec![64, 64],
            embed_dim: 16,
            num_classes: 10,
            init_scale: std::f64::consts::SQRT_2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.embed_dim == 0
            || self.num_classes == 0
            || self.hidden_dims.is_empty()
            || self.hidden_dims.contains(&0)
        {
            return Err(Error::Config(format!(
                "model dimensions must all be >= 1 with at least one hidden layer: {self:?}"
            )));
        }
        if !(self.init_scale >= 0.0) || !self.init_scale.is_finite() {
            return Err(Error::Config(format!(
                "model.init_scale must be finite and >= 0, got {}",
                self.init_scale
            )));
        }
        Ok(())
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::new();
        let mut fan_in = self.input_dim;
        for (i, &h) in self.hidden_dims.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), (fan_in, h)));
            out.push((format!("encoder.{i}.bias"), (1, h)));
            fan_in = h;
        }
        let head = |name: &str, width: usize, out: &mut Vec<_>| {
            out.push((format!("{name}.weight"), (fan_in, width)));
            out.push((format!("{name}.bias"), (1, width)));
        };
        head("head_s", self.num_classes, &mut out);
        head("head_b", self.num_classes, &mut out);
        head("projection", self.embed_dim, &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, (r, c))| r * c).sum()
    }
}

/// Parameters plus SGD momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Vec<Matrix>,
    pub momentum: Vec<Matrix>,
}

pub fn init_model(config: &ModelConfig, rng: &mut Rng) -> Result<ModelState> {
    config.validate()?;
    let mut params = Vec::new();
    for (name, (r, c)) in config.layout() {
        if name.ends_with(".bias") {
            params.push(Matrix::zeros(r, c));
        } else {
            let s = config.init_scale / (r as f64).sqrt();
            params.push(Matrix::from_fn(r, c, |_, _| {
                let z: f64 = StandardNormal.sample(rng);
                s * z
            }));
        }
    }
    let momentum = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
    Ok(ModelState {
        config: config.clone(),
        params,
        momentum,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub features: Matrix,
    pub logits_s: Matrix,
    pub logits_b: Matrix,
    pub embeddings: Matrix,
}

/// Forward pass recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars<'t> {
    pub features: Var<'t>,
    pub logits_s: Var<'t>,
    pub logits_b: Var<'t>,
    pub embeddings: Var<'t>,
}

impl ModelState {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Matrix::len).sum()
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn leaves<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Registers every parameter as a constant.
    pub fn constants<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    pub fn forward(&self, batch: &Matrix) -> Result<ForwardOutput> {
        let tape = Tape::new();
        let params = self.constants(&tape);
        let out = forward_vars(&self.config, &params, tape.constant(batch.clone()))?;
        Ok(ForwardOutput {
            features: (*out.features.value()).clone(),
            logits_s: (*out.logits_s.value()).clone(),
            logits_b: (*out.logits_b.value()).clone(),
            embeddings: (*out.embeddings.value()).clone(),
        })
    }

    /// `buf ← m·buf + g + wd·p`, then `p ← p − lr·buf`.
    pub fn sgd_step(&mut self, grads: &[Matrix], lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::shape(
                "sgd_step",
                format!("{} gradients for {} parameters", grads.len(), self.params.len()),
            ));
        }
        for (g, p) in grads.iter().zip(&self.params) {
            if g.shape() != p.shape() {
                return Err(Error::shape("sgd_step", format!("{:?} vs {:?}", g.shape(), p.shape())));
            }
            g.ensure_finite("gradient")?;
        }
        for ((p, buf), g) in self.params.iter_mut().zip(&mut self.momentum).zip(grads) {
            for ((pv, bv), gv) in p.as_mut_slice().iter_mut().zip(buf.as_mut_slice()).zip(g.as_slice()) {
                *bv = momentum * *bv + gv + weight_decay * *pv;
                *pv -= lr * *bv;
            }
        }
        Ok(())
    }
}

/// Runs the network on `x` using parameter variables in [`ModelConfig::layout`] order.
pub fn forward_vars<'t>(config: &ModelConfig, params: &[Var<'t>], x: Var<'t>) -> Result<ForwardVars<'t>> {
    let expected = 2 * config.hidden_dims.len() + 6;
    if params.len() != expected {
        return Err(Error::shape("forward", format!("{} parameters, expected {expected}", params.len())));
    }
    if x.cols() != config.input_dim {
        return Err(Error::shape(
            "forward",
            format!("batch has {} columns, model expects {}", x.cols(), config.input_dim),
        ));
    }
    let affine = |h: Var<'t>, k: usize| -> Result<Var<'t>> { h.matmul(params[k])?.add(params[k + 1]) };
    let mut h = x;
    for layer in 0..config.hidden_dims.len() {
        h = affine(h, 2 * layer)?.relu();
    }
    let base = 2 * config.hidden_dims.len();
    let logits_s = affine(h, base)?;
    let logits_b = affine(h, base + 2)?;
    let embeddings = affine(h, base + 4)?.normalize_rows(NORM_FLOOR);
    for (v, what) in [(logits_s, "logits"), (logits_b, "logits"), (embeddings, "embeddings")] {
        v.value().ensure_finite(what)?;
    }
    Ok(ForwardVars {
        features: h,
        logits_s,
        logits_b,
        embeddings,
    })
}

/// `base_lr · cos(7π·step / (16·total))`; constant when `total == 0`.
pub fn cosine_lr(base_lr: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * (7.0 * std::f64::consts::PI * t / 16.0).cos()
}

const CHECKPOINT_MAGIC: &str = "ccl-checkpoint v1";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    step: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: (usize, usize),
}

/// Writes parameters and momentum buffers after a one-line magic and a JSON header.
///
/// Layout: `ccl-checkpoint v1 <header bytes>\n`, the JSON header, then every
/// tensor's entries as little-endian `f64` in header order.
pub fn save_checkpoint(path: &Path, state: &ModelState, step: usize) -> Result<()> {
    let layout = state.config.layout();
    let mut tensors = Vec::with_capacity(2 * layout.len());
    for prefix in ["", "momentum."] {
        for (name, shape) in &layout {
            tensors.push(TensorEntry {
                name: format!("{prefix}{name}"),
                shape: *shape,
            });
        }
    }
    let header = CheckpointHeader {
        config: state.config.clone(),
        step,
        tensors,
    };
    let json = serde_json::to_string(&header).map_err(|e| Error::invalid(e.to_string()))?;
    let mut bytes = format!("{CHECKPOINT_MAGIC} {}\n{json}", json.len()).into_bytes();
    for m in state.params.iter().chain(&state.momentum) {
        for v in m.as_slice() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelState, usize)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(|e| Error::io(path, e))?;
    let len: usize = first
        .trim_end()
        .strip_prefix(CHECKPOINT_MAGIC)
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| Error::invalid(format!("{}: not a checkpoint", path.display())))?;
    let mut json = vec![0u8; len];
    reader.read_exact(&mut json).map_err(|e| Error::io(path, e))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&json).map_err(|e| Error::invalid(format!("checkpoint header: {e}")))?;
    header.config.validate()?;
    let layout = header.config.layout();
    let mut read_tensor = |entry: &TensorEntry| -> Result<Matrix> {
        let (r, c) = entry.shape;
        let mut buf = vec![0u8; r * c * 8];
        reader.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
        let data = buf.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        Matrix::new(r, c, data)
    };
    let n = layout.len();
    if header.tensors.len() != 2 * n {
        return Err(Error::invalid("checkpoint tensor list does not match its config"));
    }
    let mut params = Vec::with_capacity(n);
    let mut momentum = Vec::with_capacity(n);
    for (k, entry) in header.tensors.iter().enumerate() {
        let (name, shape) = &layout[k % n];
        let expected = if k < n { name.clone() } else { format!("momentum.{name}") };
        if entry.name != expected || entry.shape != *shape {
            return Err(Error::invalid(format!("checkpoint tensor {} out of place", entry.name)));
        }
        let m = read_tensor(entry)?;
        m.ensure_finite("checkpoint tensor")?;
        if k < n {
            params.push(m);
        } else {
            momentum.push(m);
        }
    }
    Ok((
        ModelState {
            config: header.config,
            params,
            momentum,
        },
        header.step,
    ))
}
