//! Toy transformer language models: decoder-only (GPT-2 style) and
//! encoder-decoder (BART style). Both use learned absolute positions,
//! pre-norm residual blocks, tanh-GELU MLPs and, by default, an output
//! projection tied to the token embedding.
//!
//! # Parameter count
//!
//! With `V` vocabulary, `L` max length, `d` model width, `f` MLP width and
//! `n` layers, one pre-norm block holds
//!
//! ```text
//! block = 2d + 4(d² + d) + 2d + (d·f + f + f·d + d) = 4d² + 9d + 2df + f
//! ```
//!
//! and a cross-attention sublayer adds `cross = 2d + 4(d² + d)`.
//!
//! ```text
//! decoder-only:    V·d + L·d + n·block + 2d
//! encoder-decoder: V·d + 2·L·d + n·block + 2d + n·(block + cross) + 2d
//! ```
//!
//! plus `V·d` for an untied output projection.

mod checkpoint;
mod forward;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint_bytes, save_checkpoint, write_checkpoint_bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::*;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const INIT_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    DecoderOnly,
    EncoderDecoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Architecture::DecoderOnly,
            vocab_size: 0,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            max_seq_len: 64,
            dropout_rate: 0.0,
            tie_embeddings: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Normal,
    Ones,
    Zeros,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.vocab_size", self.vocab_size),
            ("model.d_model", self.d_model),
            ("model.n_heads", self.n_heads),
            ("model.n_layers", self.n_layers),
            ("model.d_ff", self.d_ff),
            ("model.max_seq_len", self.max_seq_len),
        ];
        for (path, v) in positive {
            if v == 0 {
                return Err(Error::config(path, "must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config("model.n_heads", "must divide d_model"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("model.dropout_rate", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn block_specs(&self, prefix: &str, cross: bool, out: &mut Vec<(String, Vec<usize>, Init)>) {
        let (d, f) = (self.d_model, self.d_ff);
        let ln = |name: &str, out: &mut Vec<(String, Vec<usize>, Init)>| {
            out.push((format!("{prefix}.{name}.g"), vec![d], Init::Ones));
            out.push((format!("{prefix}.{name}.b"), vec![d], Init::Zeros));
        };
        let attn = |name: &str, out: &mut Vec<(String, Vec<usize>, Init)>| {
            for proj in ["q", "k", "v", "o"] {
                out.push((format!("{prefix}.{name}.{proj}.w"), vec![d, d], Init::Normal));
                out.push((format!("{prefix}.{name}.{proj}.b"), vec![d], Init::Zeros));
            }
        };
        ln("ln1", out);
        attn("attn", out);
        if cross {
            ln("ln_cross", out);
            attn("cross", out);
        }
        ln("ln2", out);
        out.push((format!("{prefix}.mlp.fc.w"), vec![d, f], Init::Normal));
        out.push((format!("{prefix}.mlp.fc.b"), vec![f], Init::Zeros));
        out.push((format!("{prefix}.mlp.proj.w"), vec![f, d], Init::Normal));
        out.push((format!("{prefix}.mlp.proj.b"), vec![d], Init::Zeros));
    }

    /// Every parameter the architecture declares, in initialization order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let (v, d, l) = (self.vocab_size, self.d_model, self.max_seq_len);
        let mut out = vec![("wte".to_string(), vec![v, d], Init::Normal)];
        let ln_f = |prefix: &str, out: &mut Vec<(String, Vec<usize>, Init)>| {
            out.push((format!("{prefix}ln_f.g"), vec![d], Init::Ones));
            out.push((format!("{prefix}ln_f.b"), vec![d], Init::Zeros));
        };
        match self.arch {
            Architecture::DecoderOnly => {
                out.push(("wpe".into(), vec![l, d], Init::Normal));
                for i in 0..self.n_layers {
                    self.block_specs(&format!("h{i}"), false, &mut out);
                }
                ln_f("", &mut out);
            }
            Architecture::EncoderDecoder => {
                out.push(("enc.wpe".into(), vec![l, d], Init::Normal));
                for i in 0..self.n_layers {
                    self.block_specs(&format!("enc.h{i}"), false, &mut out);
                }
                ln_f("enc.", &mut out);
                out.push(("dec.wpe".into(), vec![l, d], Init::Normal));
                for i in 0..self.n_layers {
                    self.block_specs(&format!("dec.h{i}"), true, &mut out);
                }
                ln_f("dec.", &mut out);
            }
        }
        if !self.tie_embeddings {
            out.push(("lm_head.w".into(), vec![v, d], Init::Normal));
        }
        out
    }

    /// Closed-form parameter count (see the module docs).
    pub fn param_count(&self) -> usize {
        let (v, l, d, f, n) = (self.vocab_size, self.max_seq_len, self.d_model, self.d_ff, self.n_layers);
        let block = 4 * d * d + 9 * d + 2 * d * f + f;
        let cross = 2 * d + 4 * (d * d + d);
        let head = if self.tie_embeddings { 0 } else { v * d };
        match self.arch {
            Architecture::DecoderOnly => v * d + l * d + n * block + 2 * d + head,
            Architecture::EncoderDecoder => v * d + 2 * l * d + n * block + 2 * d + n * (block + cross) + 2 * d + head,
        }
    }
}

/// Named parameter tensors θ. Always holds exactly the names and shapes the
/// config declares.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ModelParameters<T> {
    pub fn from_map(config: &ModelConfig, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let specs = config.param_specs();
        if specs.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (name, shape, _) in &specs {
            match tensors.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(ModelParameters { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParameters<U> {
        ModelParameters {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Normal(0, 0.02) weights, unit layer-norm gains, zero biases.
pub fn init_params<T: Real, R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<ModelParameters<T>> {
    config.validate()?;
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut tensors = BTreeMap::new();
    for (name, shape, init) in config.param_specs() {
        let t = match init {
            Init::Normal => Tensor::from_fn(&shape, |_| T::of(normal.sample(rng))),
            Init::Ones => Tensor::full(&shape, T::one()),
            Init::Zeros => Tensor::zeros(&shape),
        };
        tensors.insert(name, t);
    }
    Ok(ModelParameters { tensors })
}
