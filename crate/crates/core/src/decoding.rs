//! Greedy and top-k + nucleus response generation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{TokenId, EOS_ID};
use crate::error::{Error, Result};
use crate::model::{Conditioning, Transformer};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    TopkTopp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub k: usize,
    pub p: f64,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: Strategy::Greedy,
            k: 50,
            p: 0.9,
            max_new_tokens: 32,
            temperature: 1.0,
            seed: 42,
        }
    }
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        DecodeConfig::default()
    }

    pub fn sampling(seed: u64) -> Self {
        DecodeConfig {
            strategy: Strategy::TopkTopp,
            seed,
            ..DecodeConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("decode.k", "must be at least 1"));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::config("decode.p", "must lie in (0, 1]"));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::config("decode.max_new_tokens", "must be positive"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("decode.temperature", "must be > 0"));
        }
        Ok(())
    }
}

/// Token ids sorted by descending logit, lower id first on ties.
fn ranked(logits: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..logits.len()).collect();
    ids.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    ids
}

/// Keeps the `k` highest logits, then the shortest prefix of those (by
/// descending probability) whose mass reaches `p`, and renormalizes. At least
/// one token always survives.
pub fn filter_logits_topk_topp(logits: &[f64], k: usize, p: f64) -> Vec<f64> {
    let order = ranked(logits);
    let kept = &order[..k.clamp(1, logits.len())];
    let max = logits[kept[0]];
    let weights: Vec<f64> = kept.iter().map(|&i| (logits[i] - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    let mut cum = 0.0;
    let mut n = 0;
    for w in &weights {
        cum += w / z;
        n += 1;
        if cum >= p {
            break;
        }
    }
    let mass: f64 = weights[..n].iter().sum();
    let mut out = vec![0.0; logits.len()];
    for (&i, w) in kept[..n].iter().zip(&weights) {
        out[i] = w / mass;
    }
    out
}

/// Lowest id among the maximal logits.
pub fn argmax(logits: &[f64]) -> usize {
    ranked(logits)[0]
}

/// Inverse-CDF draw in token-id order from one uniform variate.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &q) in probs.iter().enumerate() {
        if q <= 0.0 {
            continue;
        }
        cum += q;
        last = i;
        if u < cum {
            return i;
        }
    }
    last
}

/// Generates a response (without the closing `<eos>`). Sampling consumes
/// exactly one uniform draw per emitted token; greedy never touches `rng`.
pub fn decode<T: Real>(model: &Transformer<T>, cond: &Conditioning, cfg: &DecodeConfig, rng: &mut ChaCha8Rng) -> Result<Vec<TokenId>> {
    let max_len = model.config.max_seq_len;
    let cond_len = match cond {
        Conditioning::Prefix(ids) | Conditioning::Source(ids) => ids.len(),
    };
    if cond_len > max_len {
        return Err(Error::SequenceTooLong { len: cond_len, max: max_len });
    }
    let session = model.session(cond)?;
    let mut out = Vec::new();
    while out.len() < cfg.max_new_tokens && session.prefix_len() + out.len() < max_len {
        let logits: Vec<f64> = session.next_logits(&out)?.iter().map(|x| x.as_f64() / cfg.temperature).collect();
        let next = match cfg.strategy {
            Strategy::Greedy => argmax(&logits),
            Strategy::TopkTopp => {
                let probs = filter_logits_topk_topp(&logits, cfg.k, cfg.p);
                sample_index(&probs, rng.random::<f64>())
            }
        };
        if next == EOS_ID {
            break;
        }
        out.push(next);
    }
    Ok(out)
}
