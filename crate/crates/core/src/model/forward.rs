use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Architecture, ModelConfig, ModelParameters, LAYER_NORM_EPS};
use crate::autodiff::{Graph, Var};
use crate::data::{
    decoder_prefix, encoder_source, serialize_decoder_input, serialize_encdec_input, DecoderInput, DialogueSample, EncDecInput,
    Permutation, TokenId, BOS_ID,
};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Parameters placed on a graph.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Copies every parameter onto `g`; `trainable` leaves receive gradients.
    pub fn bind<T: Real>(g: &mut Graph<T>, params: &ModelParameters<T>, trainable: bool) -> Self {
        let vars = params.iter().map(|(k, t)| (k.clone(), g.leaf(t.clone(), trainable))).collect();
        ParamVars { vars }
    }

    /// Uses variables already on a graph, keyed by parameter name.
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        ParamVars { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Inverted dropout with its own mask stream.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

fn dropout<T: Real>(g: &mut Graph<T>, x: Var, drop: &mut Option<Dropout<'_>>) -> Result<Var> {
    match drop {
        Some(d) if d.rate > 0.0 => {
            let keep = T::of(1.0 / (1.0 - d.rate));
            let shape = g.shape(x).to_vec();
            let mask = Tensor::from_fn(&shape, |_| if d.rng.random::<f64>() < d.rate { T::zero() } else { keep });
            let m = g.constant(mask);
            g.mul(x, m)
        }
        _ => Ok(x),
    }
}

fn linear<T: Real>(g: &mut Graph<T>, p: &ParamVars, x: Var, prefix: &str) -> Result<Var> {
    let y = g.matmul(x, p.get(&format!("{prefix}.w")))?;
    g.add(y, p.get(&format!("{prefix}.b")))
}

fn layer_norm<T: Real>(g: &mut Graph<T>, p: &ParamVars, x: Var, prefix: &str) -> Result<Var> {
    g.layer_norm(x, p.get(&format!("{prefix}.g")), p.get(&format!("{prefix}.b")), LAYER_NORM_EPS)
}

fn attention<T: Real>(g: &mut Graph<T>, p: &ParamVars, cfg: &ModelConfig, prefix: &str, xq: Var, xkv: Var, causal: bool) -> Result<Var> {
    let q = linear(g, p, xq, &format!("{prefix}.q"))?;
    let k = linear(g, p, xkv, &format!("{prefix}.k"))?;
    let v = linear(g, p, xkv, &format!("{prefix}.v"))?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (qh, kh, vh) = if cfg.n_heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, h * dh, dh)?, g.slice_cols(k, h * dh, dh)?, g.slice_cols(v, h * dh, dh)?)
        };
        let scores = g.matmul_bt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let weights = if causal { g.causal_softmax(scores)? } else { g.softmax(scores, 1)? };
        heads.push(g.matmul(weights, vh)?);
    }
    let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    linear(g, p, joined, &format!("{prefix}.o"))
}

#[allow(clippy::too_many_arguments)]
fn block<T: Real>(
    g: &mut Graph<T>,
    p: &ParamVars,
    cfg: &ModelConfig,
    prefix: &str,
    mut x: Var,
    memory: Option<Var>,
    causal: bool,
    drop: &mut Option<Dropout<'_>>,
) -> Result<Var> {
    let h = layer_norm(g, p, x, &format!("{prefix}.ln1"))?;
    let a = attention(g, p, cfg, &format!("{prefix}.attn"), h, h, causal)?;
    let a = dropout(g, a, drop)?;
    x = g.add(x, a)?;
    if let Some(mem) = memory {
        let h = layer_norm(g, p, x, &format!("{prefix}.ln_cross"))?;
        let a = attention(g, p, cfg, &format!("{prefix}.cross"), h, mem, false)?;
        let a = dropout(g, a, drop)?;
        x = g.add(x, a)?;
    }
    let h = layer_norm(g, p, x, &format!("{prefix}.ln2"))?;
    let h = linear(g, p, h, &format!("{prefix}.mlp.fc"))?;
    let h = g.gelu(h);
    let m = linear(g, p, h, &format!("{prefix}.mlp.proj"))?;
    let m = dropout(g, m, drop)?;
    g.add(x, m)
}

fn embed<T: Real>(g: &mut Graph<T>, p: &ParamVars, cfg: &ModelConfig, ids: &[TokenId], wpe: &str, drop: &mut Option<Dropout<'_>>) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::contract("cannot run the model on an empty sequence"));
    }
    if ids.len() > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: ids.len(),
            max: cfg.max_seq_len,
        });
    }
    let tok = g.embedding(p.get("wte"), ids)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pos = g.embedding(p.get(wpe), &positions)?;
    let x = g.add(tok, pos)?;
    dropout(g, x, drop)
}

/// Final hidden states `[T×d]` of the decoder-only model.
pub fn decoder_hidden<T: Real>(g: &mut Graph<T>, p: &ParamVars, cfg: &ModelConfig, ids: &[TokenId], drop: &mut Option<Dropout<'_>>) -> Result<Var> {
    let mut x = embed(g, p, cfg, ids, "wpe", drop)?;
    for i in 0..cfg.n_layers {
        x = block(g, p, cfg, &format!("h{i}"), x, None, true, drop)?;
    }
    layer_norm(g, p, x, "ln_f")
}

/// Bidirectional encoder states `[S×d]`.
pub fn encode<T: Real>(g: &mut Graph<T>, p: &ParamVars, cfg: &ModelConfig, source: &[TokenId], drop: &mut Option<Dropout<'_>>) -> Result<Var> {
    let mut x = embed(g, p, cfg, source, "enc.wpe", drop)?;
    for i in 0..cfg.n_layers {
        x = block(g, p, cfg, &format!("enc.h{i}"), x, None, false, drop)?;
    }
    layer_norm(g, p, x, "enc.ln_f")
}

/// Causal decoder states `[T×d]` attending to `memory` from [`encode`].
pub fn cross_decoder_hidden<T: Real>(
    g: &mut Graph<T>,
    p: &ParamVars,
    cfg: &ModelConfig,
    memory: Var,
    target: &[TokenId],
    drop: &mut Option<Dropout<'_>>,
) -> Result<Var> {
    let mut x = embed(g, p, cfg, target, "dec.wpe", drop)?;
    for i in 0..cfg.n_layers {
        x = block(g, p, cfg, &format!("dec.h{i}"), x, Some(memory), true, drop)?;
    }
    layer_norm(g, p, x, "dec.ln_f")
}

/// Output logits for the selected rows of `hidden` (all rows when `None`).
pub fn project<T: Real>(g: &mut Graph<T>, p: &ParamVars, cfg: &ModelConfig, hidden: Var, rows: Option<&[usize]>) -> Result<Var> {
    let h = match rows {
        Some(r) => g.select_rows(hidden, r)?,
        None => hidden,
    };
    let head = if cfg.tie_embeddings { p.get("wte") } else { p.get("lm_head.w") };
    g.matmul_bt(h, head)
}

/// `[T×V]` logits; row `t` is the distribution of token `t+1` given tokens `0..=t`.
pub fn forward_decoder_only<T: Real>(g: &mut Graph<T>, p: &ParamVars, cfg: &ModelConfig, ids: &[TokenId]) -> Result<Var> {
    let h = decoder_hidden(g, p, cfg, ids, &mut None)?;
    project(g, p, cfg, h, None)
}

/// `[T_target×V]` logits over decoder input positions.
pub fn forward_encoder_decoder<T: Real>(g: &mut Graph<T>, p: &ParamVars, cfg: &ModelConfig, source: &[TokenId], target: &[TokenId]) -> Result<Var> {
    let mem = encode(g, p, cfg, source, &mut None)?;
    let h = cross_decoder_hidden(g, p, cfg, mem, target, &mut None)?;
    project(g, p, cfg, h, None)
}

/// A sample laid out for one architecture under one persona ordering.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Serialized {
    Decoder(DecoderInput),
    EncDec(EncDecInput),
}

pub fn serialize(cfg: &ModelConfig, sample: &DialogueSample, order: &Permutation, index: usize) -> Result<Serialized> {
    Ok(match cfg.arch {
        Architecture::DecoderOnly => Serialized::Decoder(serialize_decoder_input(sample, order, cfg.max_seq_len, index)?),
        Architecture::EncoderDecoder => Serialized::EncDec(serialize_encdec_input(sample, order, cfg.max_seq_len, index)?),
    })
}

/// Logits `[R×V]` at the `R` response positions (response tokens then
/// `<eos>`), with the gold token each row predicts.
pub fn response_logits<T: Real>(
    g: &mut Graph<T>,
    p: &ParamVars,
    cfg: &ModelConfig,
    input: &Serialized,
    drop: &mut Option<Dropout<'_>>,
) -> Result<(Var, Vec<TokenId>)> {
    match input {
        Serialized::Decoder(d) => {
            let positions = d.response_positions();
            // the final <eos> predicts nothing, so it is not fed
            let h = decoder_hidden(g, p, cfg, &d.ids[..d.ids.len() - 1], drop)?;
            let rows: Vec<usize> = positions.iter().map(|&t| t - 1).collect();
            let targets = positions.iter().map(|&t| d.ids[t]).collect();
            Ok((project(g, p, cfg, h, Some(&rows))?, targets))
        }
        Serialized::EncDec(e) => {
            let mem = encode(g, p, cfg, &e.source, drop)?;
            let h = cross_decoder_hidden(g, p, cfg, mem, &e.target[..e.target.len() - 1], drop)?;
            Ok((project(g, p, cfg, h, None)?, e.target[1..].to_vec()))
        }
    }
}

/// Per-position log-probabilities of a response under the chain rule.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLogProbs {
    /// `log p(target_t)` at each masked position, in order.
    pub per_position: Vec<f64>,
    pub mean: f64,
}

impl SequenceLogProbs {
    /// `log ∏_t p(target_t)`
    pub fn total(&self) -> f64 {
        self.per_position.iter().sum()
    }
}

/// Row `t` of `logits` scores `targets[t]`; only rows with `mask[t]` count.
pub fn sequence_log_probs<T: Real>(logits: &Tensor<T>, targets: &[TokenId], mask: &[bool]) -> Result<SequenceLogProbs> {
    if targets.len() != logits.rows() || mask.len() != logits.rows() {
        return Err(Error::Shape {
            op: "sequence_log_probs",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len(), mask.len()],
        });
    }
    let mut per_position = Vec::new();
    for (t, (&target, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let row = log_softmax(logits.row(t));
        let lp = *row.get(target).ok_or(Error::Index {
            op: "sequence_log_probs",
            index: target,
            limit: row.len(),
        })?;
        per_position.push(lp);
    }
    if per_position.is_empty() {
        return Err(Error::contract("sequence_log_probs: mask selects no positions"));
    }
    let mean = per_position.iter().sum::<f64>() / per_position.len() as f64;
    Ok(SequenceLogProbs { per_position, mean })
}

pub fn log_softmax<T: Real>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x.as_f64() - lse).collect()
}

/// What generation is conditioned on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Conditioning {
    /// Decoder-only: `<bos> … <res>`.
    Prefix(Vec<TokenId>),
    /// Encoder-decoder: the encoder source; the decoder starts from `<bos>`.
    Source(Vec<TokenId>),
}

impl Conditioning {
    pub fn for_sample(cfg: &ModelConfig, sample: &DialogueSample, order: &Permutation) -> Result<Self> {
        Ok(match cfg.arch {
            Architecture::DecoderOnly => Conditioning::Prefix(decoder_prefix(sample, order)?),
            Architecture::EncoderDecoder => Conditioning::Source(encoder_source(sample, order)?),
        })
    }
}

/// A model ready for inference.
#[derive(Clone, Debug)]
pub struct Transformer<T> {
    pub config: ModelConfig,
    pub params: ModelParameters<T>,
}

/// Per-call generation state; the encoder output is computed once.
pub struct Session<'m, T> {
    model: &'m Transformer<T>,
    prefix: Vec<TokenId>,
    memory: Option<Tensor<T>>,
}

impl<T: Real> Transformer<T> {
    pub fn new(config: ModelConfig, params: ModelParameters<T>) -> Result<Self> {
        config.validate()?;
        let params = ModelParameters::from_map(&config, params.iter().map(|(k, v)| (k.clone(), v.clone())).collect())?;
        Ok(Transformer { config, params })
    }

    /// Full logits for a decoder-only sequence or an encoder-decoder pair.
    pub fn logits(&self, first: &[TokenId], target: Option<&[TokenId]>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = ParamVars::bind(&mut g, &self.params, false);
        let out = match (self.config.arch, target) {
            (Architecture::DecoderOnly, None) => forward_decoder_only(&mut g, &p, &self.config, first)?,
            (Architecture::EncoderDecoder, Some(t)) => forward_encoder_decoder(&mut g, &p, &self.config, first, t)?,
            _ => return Err(Error::contract("target ids are required exactly for encoder-decoder models")),
        };
        Ok(g.value(out).clone())
    }

    /// Teacher-forced log-distributions at every response position.
    pub fn response_log_dists(&self, sample: &DialogueSample, order: &Permutation) -> Result<Vec<Vec<f64>>> {
        let input = serialize(&self.config, sample, order, 0)?;
        let mut g = Graph::new();
        let p = ParamVars::bind(&mut g, &self.params, false);
        let (logits, _) = response_logits(&mut g, &p, &self.config, &input, &mut None)?;
        let v = g.value(logits);
        Ok((0..v.rows()).map(|r| log_softmax(v.row(r))).collect())
    }

    pub fn session(&self, cond: &Conditioning) -> Result<Session<'_, T>> {
        match (self.config.arch, cond) {
            (Architecture::DecoderOnly, Conditioning::Prefix(ids)) => Ok(Session {
                model: self,
                prefix: ids.clone(),
                memory: None,
            }),
            (Architecture::EncoderDecoder, Conditioning::Source(src)) => {
                let mut g = Graph::new();
                let p = ParamVars::bind(&mut g, &self.params, false);
                let mem = encode(&mut g, &p, &self.config, src, &mut None)?;
                Ok(Session {
                    model: self,
                    prefix: vec![BOS_ID],
                    memory: Some(g.value(mem).clone()),
                })
            }
            _ => Err(Error::contract("conditioning does not match the model architecture")),
        }
    }
}

impl<T: Real> Session<'_, T> {
    /// Tokens already fed to the decoder side.
    pub fn prefix_len(&self) -> usize {
        self.prefix.len()
    }

    /// Logits for the token following `prefix ++ generated`.
    pub fn next_logits(&self, generated: &[TokenId]) -> Result<Vec<T>> {
        let cfg = &self.model.config;
        let mut ids = self.prefix.clone();
        ids.extend_from_slice(generated);
        let mut g = Graph::new();
        let p = ParamVars::bind(&mut g, &self.model.params, false);
        let h = match &self.memory {
            None => decoder_hidden(&mut g, &p, cfg, &ids, &mut None)?,
            Some(m) => {
                let mem = g.constant(m.clone());
                cross_decoder_hidden(&mut g, &p, cfg, mem, &ids, &mut None)?
            }
        };
        let out = project(&mut g, &p, cfg, h, Some(&[ids.len() - 1]))?;
        Ok(g.value(out).data().to_vec())
    }
}
