//! Maximum-likelihood and order-consistency (ORIG) training.
//!
//! The ORIG objective relaxes "predictions must not depend on persona order"
//! into a penalty:
//!
//! ```text
//! loss = NLL(r | C, P) + γ · KL[ p(r_t | C, P) ‖ p(r_t | C, P̂) ]
//! ```
//!
//! where `P̂` is a freshly shuffled persona for every sample at every step, the
//! NLL uses the canonical order only, and the KL is averaged over response
//! positions (which line up exactly because shuffling never changes lengths).
//! Gradients flow through both forward passes.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{shuffle_persona, Dataset, DialogueSample, Permutation};
use crate::error::{Error, Result};
use crate::model::{init_params, response_logits, save_checkpoint, serialize, Dropout, ModelConfig, ModelParameters, ParamVars, Transformer};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Mle,
    Orig,
}

/// Which way the consistency KL points. `Forward` is `KL(canonical ‖ shuffled)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlDirection {
    Forward,
    Reverse,
    Symmetric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: Objective,
    /// Lagrange multiplier γ on the consistency term.
    pub gamma: f64,
    pub kl_direction: KlDirection,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: Option<f64>,
    /// Evaluate under a random persona order instead of the canonical one.
    pub shuffle_at_eval: bool,
    /// Record per-step losses in the log.
    pub trace_steps: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Mle,
            gamma: 1.0,
            kl_direction: KlDirection::Forward,
            lr: 3e-4,
            batch_size: 32,
            epochs: 10,
            seed: 42,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: Some(1.0),
            shuffle_at_eval: false,
            trace_steps: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("train.gamma", "must be a finite value >= 0"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.beta1", "Adam betas must lie in [0, 1)"));
        }
        if let Some(c) = self.grad_clip_norm {
            #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN too
            if !(c > 0.0) {
                return Err(Error::config("train.grad_clip_norm", "must be > 0 when set"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_nll: f64,
    pub mean_kl: f64,
    /// Excluded from the JSON log so that reruns stay byte-identical.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub nll: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub steps: Vec<StepLog>,
}

/// Loss nodes for one batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub nll: Var,
    pub kl: Option<Var>,
}

/// Mean of `-log p(target)` over every response position in the batch, all
/// samples in canonical persona order.
pub fn nll_batch<T: Real>(
    g: &mut Graph<T>,
    p: &ParamVars,
    cfg: &ModelConfig,
    batch: &[(usize, &DialogueSample)],
    drop: &mut Option<Dropout<'_>>,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut parts = Vec::with_capacity(batch.len());
    for &(index, sample) in batch {
        let input = serialize(cfg, sample, &Permutation::identity(sample.persona.len()), index)?;
        let (logits, targets) = response_logits(g, p, cfg, &input, drop)?;
        let mask = vec![true; targets.len()];
        parts.push((g.cross_entropy(logits, &targets, &mask)?, targets.len()));
    }
    Ok(pooled_mean(g, &parts))
}

// Combines per-sample means into the mean over all pooled positions.
fn pooled_mean<T: Real>(g: &mut Graph<T>, parts: &[(Var, usize)]) -> Var {
    let total: usize = parts.iter().map(|&(_, n)| n).sum();
    let mut acc: Option<Var> = None;
    for &(v, n) in parts {
        let w = g.scale(v, n as f64 / total as f64);
        acc = Some(match acc {
            None => w,
            Some(a) => g.add(a, w).expect("scalar add"),
        });
    }
    acc.expect("nonempty")
}

/// The relaxed ORIG objective. `next_order` supplies `P̂` for each sample and
/// is called exactly once per sample, whatever `gamma` is.
pub fn orig_batch_loss<T: Real>(
    g: &mut Graph<T>,
    p: &ParamVars,
    cfg: &ModelConfig,
    batch: &[(usize, &DialogueSample)],
    train: &TrainConfig,
    next_order: &mut dyn FnMut(usize) -> Permutation,
    drop: &mut Option<Dropout<'_>>,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut nll_parts = Vec::with_capacity(batch.len());
    let mut kl_parts = Vec::with_capacity(batch.len());
    for &(index, sample) in batch {
        let n = sample.persona.len();
        let shuffled = next_order(n);
        let canon_in = serialize(cfg, sample, &Permutation::identity(n), index)?;
        let shuf_in = serialize(cfg, sample, &shuffled, index)?;
        let (canon, targets) = response_logits(g, p, cfg, &canon_in, drop)?;
        let (shuf, _) = response_logits(g, p, cfg, &shuf_in, drop)?;
        let mask = vec![true; targets.len()];
        nll_parts.push((g.cross_entropy(canon, &targets, &mask)?, targets.len()));
        let rows = match train.kl_direction {
            KlDirection::Forward => g.kl_divergence(canon, shuf, 1)?,
            KlDirection::Reverse => g.kl_divergence(shuf, canon, 1)?,
            KlDirection::Symmetric => {
                let a = g.kl_divergence(canon, shuf, 1)?;
                let b = g.kl_divergence(shuf, canon, 1)?;
                let s = g.add(a, b)?;
                g.scale(s, 0.5)
            }
        };
        kl_parts.push((g.mean(rows), targets.len()));
    }
    let nll = pooled_mean(g, &nll_parts);
    let kl = pooled_mean(g, &kl_parts);
    let total = if train.gamma == 0.0 {
        nll
    } else {
        let weighted = g.scale(kl, train.gamma);
        g.add(nll, weighted)?
    };
    Ok(BatchLoss { total, nll, kl: Some(kl) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ModelParameters<T>) -> Self {
        let zeros: BTreeMap<String, Vec<T>> = params.iter().map(|(k, t)| (k.clone(), vec![T::zero(); t.numel()])).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(t: &TrainConfig) -> Self {
        AdamConfig {
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.adam_eps,
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_step<T: Real>(
    params: &mut ModelParameters<T>,
    grads: &BTreeMap<String, Vec<T>>,
    state: &mut OptimizerState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, t) in params.iter() {
        let g = grads.get(name).ok_or_else(|| Error::contract(format!("no gradient for `{name}`")))?;
        if g.len() != t.numel() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: t.shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
        if let Some(index) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient { name: name.clone(), index });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(t));
    let c2 = T::of(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m = state.m.get_mut(name).expect("state mirrors params");
        let v = state.v.get_mut(name).expect("state mirrors params");
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            *x = *x - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales gradients in place to global L2 norm `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut BTreeMap<String, Vec<T>>, max_norm: f64) -> f64 {
    let norm = grads.values().flatten().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for x in grads.values_mut().flatten() {
            *x = *x * s;
        }
    }
    norm
}

fn collect_grads<T: Real>(g: &Graph<T>, p: &ParamVars, params: &ModelParameters<T>) -> BTreeMap<String, Vec<T>> {
    p.iter()
        .map(|(name, &v)| {
            let grad = g.grad(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); params.get(name).unwrap().numel()]);
            (name.clone(), grad)
        })
        .collect()
}

/// Independent RNG streams derived from the training seed.
pub(crate) mod streams {
    pub const INIT: u64 = 0;
    pub const BATCHES: u64 = 1;
    pub const ORDERS: u64 = 2;
    pub const DROPOUT: u64 = 3;
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Trains from scratch. When `checkpoint_dir` is given, `epoch_NNN.orgc` is
/// written after every epoch and `model.orgc` at the end.
pub fn train(
    model_cfg: &ModelConfig,
    dataset: &Dataset,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(ModelParameters<f32>, TrainLog)> {
    model_cfg.validate()?;
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::contract("cannot train on an empty dataset"));
    }
    let mut params: ModelParameters<f32> = init_params(model_cfg, &mut stream_rng(cfg.seed, streams::INIT))?;
    let mut state = OptimizerState::new(&params);
    let adam = AdamConfig::from(cfg);
    let mut batch_rng = stream_rng(cfg.seed, streams::BATCHES);
    let mut order_rng = stream_rng(cfg.seed, streams::ORDERS);
    let mut dropout_rng = stream_rng(cfg.seed, streams::DROPOUT);
    let mut log = TrainLog::default();
    let mut indices: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        indices.shuffle(&mut batch_rng);
        let (mut nll_sum, mut kl_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in indices.chunks(cfg.batch_size) {
            let batch: Vec<(usize, &DialogueSample)> = chunk.iter().map(|&i| (i, &dataset.samples[i])).collect();
            let mut g = Graph::<f32>::new();
            let p = ParamVars::bind(&mut g, &params, true);
            let mut drop = (model_cfg.dropout_rate > 0.0).then_some(Dropout {
                rate: model_cfg.dropout_rate,
                rng: &mut dropout_rng,
            });
            let loss = match cfg.objective {
                Objective::Mle => {
                    let nll = nll_batch(&mut g, &p, model_cfg, &batch, &mut drop)?;
                    BatchLoss { total: nll, nll, kl: None }
                }
                Objective::Orig => {
                    let mut next = |n: usize| shuffle_persona(n, &mut order_rng);
                    orig_batch_loss(&mut g, &p, model_cfg, &batch, cfg, &mut next, &mut drop)?
                }
            };
            g.backward(loss.total)?;
            let mut grads = collect_grads(&g, &p, &params);
            if let Some(max) = cfg.grad_clip_norm {
                clip_grad_norm(&mut grads, max);
            }
            adam_step(&mut params, &grads, &mut state, &adam)?;
            let nll = g.value(loss.nll).item().as_f64();
            let kl = loss.kl.map_or(0.0, |k| g.value(k).item().as_f64());
            nll_sum += nll;
            kl_sum += kl;
            batches += 1;
            if cfg.trace_steps {
                log.steps.push(StepLog {
                    step: state.step,
                    nll,
                    kl,
                    total: g.value(loss.total).item().as_f64(),
                });
            }
        }
        let entry = EpochLog {
            epoch,
            mean_nll: nll_sum / batches as f64,
            mean_kl: kl_sum / batches as f64,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}/{}: nll {:.4} kl {:.5} ({:.1}s)",
            cfg.epochs, entry.mean_nll, entry.mean_kl, entry.wall_clock_secs
        );
        log.epochs.push(entry);
        if let Some(dir) = checkpoint_dir {
            save_checkpoint(&dir.join(format!("epoch_{epoch:03}.orgc")), model_cfg, &params)?;
        }
    }
    if let Some(dir) = checkpoint_dir {
        save_checkpoint(&dir.join("model.orgc"), model_cfg, &params)?;
    }
    Ok((params, log))
}

/// Held-out consistency: mean per-position KL between the canonical and one
/// random ordering per sample, in the given direction. No gradients.
pub fn heldout_kl<T: Real>(model: &Transformer<T>, dataset: &Dataset, direction: KlDirection, seed: u64) -> Result<f64> {
    let mut rng = stream_rng(seed, streams::ORDERS);
    let (mut total, mut count) = (0.0, 0usize);
    for sample in &dataset.samples {
        let n = sample.persona.len();
        let shuffled = shuffle_persona(n, &mut rng);
        let a = model.response_log_dists(sample, &Permutation::identity(n))?;
        let b = model.response_log_dists(sample, &shuffled)?;
        for (p, q) in a.iter().zip(&b) {
            total += match direction {
                KlDirection::Forward => kl_from_log(p, q),
                KlDirection::Reverse => kl_from_log(q, p),
                KlDirection::Symmetric => 0.5 * (kl_from_log(p, q) + kl_from_log(q, p)),
            };
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// `KL(p ‖ q)` for log-probability vectors, clamped at zero.
pub fn kl_from_log(lp: &[f64], lq: &[f64]) -> f64 {
    lp.iter().zip(lq).map(|(&a, &b)| a.exp() * (a - b)).sum::<f64>().max(0.0)
}
