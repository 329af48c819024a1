use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{gold, par_map, unit_rng, AnalysisConfig, Metric, OrderModel, Scorer, REPORT_SCHEMA_VERSION};
use crate::data::{Dataset, Permutation, TokenId, Vocabulary};
use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepMetadata {
    pub model_id: String,
    pub decode: DecodeConfig,
    pub perm_cap: usize,
    /// Largest number of orderings decoded for any one sample.
    pub permutation_count: usize,
    pub n_samples: usize,
    pub master_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub metric: Metric,
    pub best: f64,
    pub worst: f64,
    /// Mean over all decoded orderings.
    pub mean: f64,
    pub argbest: Permutation,
    pub argworst: Permutation,
    pub best_response: Vec<TokenId>,
    pub worst_response: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSample {
    pub index: usize,
    pub orderings: usize,
    pub cells: Vec<SweepCell>,
}

/// Both aggregations of per-sample extremes: the mean of per-sample scores
/// and the corpus metric over the selected decodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepAggregate {
    pub metric: Metric,
    pub mean_best: f64,
    pub mean_worst: f64,
    pub mean_over_orderings: f64,
    pub corpus_best: f64,
    pub corpus_worst: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub metadata: SweepMetadata,
    pub metrics: Vec<Metric>,
    pub samples: Vec<SweepSample>,
    pub aggregate: Vec<SweepAggregate>,
}

impl SweepReport {
    pub fn aggregate_for(&self, metric: Metric) -> Option<&SweepAggregate> {
        self.aggregate.iter().find(|a| a.metric == metric)
    }
}

fn orderings(n: usize, cap: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Permutation> {
    let fits = (1..=n).try_fold(1usize, |acc, k| acc.checked_mul(k)).is_some_and(|f| f <= cap);
    if fits {
        return Permutation::all(n);
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(cap);
    while out.len() < cap {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        if seen.insert(order.clone()) {
            out.push(Permutation::new(order).expect("shuffled identity is a bijection"));
        }
    }
    out
}

/// Decodes every sample under every ordering (or `perm_cap` sampled ones) and
/// keeps the best and worst score per metric. Sampling decodes re-seed the
/// RNG identically for each ordering of a sample.
pub fn permutation_sweep<M: OrderModel>(
    model: &M,
    dataset: &Dataset,
    vocab: &Vocabulary,
    decode: &DecodeConfig,
    cfg: &AnalysisConfig,
) -> Result<SweepReport> {
    cfg.validate()?;
    decode.validate()?;
    if let Some(m) = cfg.metrics.iter().find(|m| !m.per_sample()) {
        return Err(Error::config("analysis.metrics", format!("{} cannot be used in a sweep", m.name())));
    }
    let samples = cfg.samples(&dataset.samples);
    if samples.is_empty() {
        return Err(Error::contract("sweep over an empty dataset"));
    }
    let refs = gold(samples);
    let scorer = Scorer::new(samples, &refs, vocab, &cfg.metrics)?;

    let rows = par_map(samples.len(), cfg.threads, |i| {
        let sample = &samples[i];
        let orders = orderings(sample.persona.len(), cfg.perm_cap, &mut unit_rng(cfg.master_seed, i as u64));
        let mut decodes = Vec::with_capacity(orders.len());
        for order in &orders {
            let mut rng = unit_rng(decode.seed, i as u64);
            decodes.push(model.generate(sample, order, decode, &mut rng)?);
        }
        let mut cells = Vec::with_capacity(cfg.metrics.len());
        for &metric in &cfg.metrics {
            let scores = decodes.iter().map(|d| scorer.sample(metric, i, d)).collect::<Result<Vec<f64>>>()?;
            let (mut hi, mut lo) = (0, 0);
            for (j, &s) in scores.iter().enumerate() {
                if s > scores[hi] {
                    hi = j;
                }
                if s < scores[lo] {
                    lo = j;
                }
            }
            cells.push(SweepCell {
                metric,
                best: scores[hi],
                worst: scores[lo],
                mean: scores.iter().sum::<f64>() / scores.len() as f64,
                argbest: orders[hi].clone(),
                argworst: orders[lo].clone(),
                best_response: decodes[hi].clone(),
                worst_response: decodes[lo].clone(),
            });
        }
        Ok(SweepSample {
            index: i,
            orderings: orders.len(),
            cells,
        })
    })?;

    let n = rows.len() as f64;
    let mut aggregate = Vec::with_capacity(cfg.metrics.len());
    for (m, &metric) in cfg.metrics.iter().enumerate() {
        let mean = |f: fn(&SweepCell) -> f64| rows.iter().map(|r| f(&r.cells[m])).sum::<f64>() / n;
        let best: Vec<Vec<TokenId>> = rows.iter().map(|r| r.cells[m].best_response.clone()).collect();
        let worst: Vec<Vec<TokenId>> = rows.iter().map(|r| r.cells[m].worst_response.clone()).collect();
        aggregate.push(SweepAggregate {
            metric,
            mean_best: mean(|c| c.best),
            mean_worst: mean(|c| c.worst),
            mean_over_orderings: mean(|c| c.mean),
            corpus_best: scorer.corpus(metric, &best)?,
            corpus_worst: scorer.corpus(metric, &worst)?,
        });
    }
    Ok(SweepReport {
        schema_version: REPORT_SCHEMA_VERSION,
        metadata: SweepMetadata {
            model_id: String::new(),
            decode: decode.clone(),
            perm_cap: cfg.perm_cap,
            permutation_count: rows.iter().map(|r| r.orderings).max().unwrap_or(0),
            n_samples: rows.len(),
            master_seed: cfg.master_seed,
        },
        metrics: cfg.metrics.clone(),
        samples: rows,
        aggregate,
    })
}
