use serde::{Deserialize, Serialize};

use super::{par_map, unit_rng, AnalysisConfig, OrderModel, REPORT_SCHEMA_VERSION};
use crate::data::{shuffle_persona, Dataset, Permutation, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::training::kl_from_log;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceMetadata {
    pub model_id: String,
    pub pairs_per_sample: usize,
    pub seed: u64,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenDivergence {
    pub token: TokenId,
    pub text: String,
    /// Bidirectional KL averaged over the sample's ordering pairs.
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSample {
    pub index: usize,
    pub pairs: Vec<(Permutation, Permutation)>,
    pub tokens: Vec<TokenDivergence>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub schema_version: u32,
    pub metadata: DivergenceMetadata,
    pub samples: Vec<DivergenceSample>,
    /// Mean of the per-sample means.
    pub corpus_mean: f64,
}

/// Mean of `KL(p‖q)` and `KL(q‖p)` for log-probability vectors.
pub fn bidirectional_kl(lp: &[f64], lq: &[f64]) -> f64 {
    0.5 * (kl_from_log(lp, lq) + kl_from_log(lq, lp))
}

/// Teacher-forces each gold response under pairs of independent random
/// orderings and measures how far the per-token predictive distributions
/// move.
pub fn representation_divergence<M: OrderModel>(
    model: &M,
    dataset: &Dataset,
    vocab: &Vocabulary,
    cfg: &AnalysisConfig,
) -> Result<DivergenceReport> {
    cfg.validate()?;
    let samples = cfg.samples(&dataset.samples);
    if samples.is_empty() {
        return Err(Error::contract("divergence probe over an empty dataset"));
    }
    let rows = par_map(samples.len(), cfg.threads, |i| {
        let sample = &samples[i];
        let n = sample.persona.len();
        let t = sample.response.len();
        let mut rng = unit_rng(cfg.master_seed, i as u64);
        let mut sums = vec![0.0; t];
        let mut pairs = Vec::with_capacity(cfg.pairs_per_sample);
        for _ in 0..cfg.pairs_per_sample {
            let a = shuffle_persona(n, &mut rng);
            let b = shuffle_persona(n, &mut rng);
            let da = model.response_log_dists(sample, &a)?;
            let db = model.response_log_dists(sample, &b)?;
            for (s, (p, q)) in sums.iter_mut().zip(da.iter().zip(&db)) {
                *s += bidirectional_kl(p, q);
            }
            pairs.push((a, b));
        }
        let tokens: Vec<TokenDivergence> = sample
            .response
            .iter()
            .zip(&sums)
            .map(|(&tok, s)| TokenDivergence {
                token: tok,
                text: vocab.token(tok).to_string(),
                kl: s / cfg.pairs_per_sample as f64,
            })
            .collect();
        let mean = tokens.iter().map(|x| x.kl).sum::<f64>() / t as f64;
        Ok(DivergenceSample {
            index: i,
            pairs,
            tokens,
            mean,
        })
    })?;
    let corpus_mean = rows.iter().map(|r| r.mean).sum::<f64>() / rows.len() as f64;
    Ok(DivergenceReport {
        schema_version: REPORT_SCHEMA_VERSION,
        metadata: DivergenceMetadata {
            model_id: String::new(),
            pairs_per_sample: cfg.pairs_per_sample,
            seed: cfg.master_seed,
            n_samples: rows.len(),
        },
        samples: rows,
        corpus_mean,
    })
}
