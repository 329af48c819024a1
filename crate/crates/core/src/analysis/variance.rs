use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{gold, par_map, unit_rng, AnalysisConfig, Metric, OrderModel, Scorer, REPORT_SCHEMA_VERSION};
use crate::data::{shuffle_persona, Dataset, Vocabulary};
use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceMetadata {
    pub model_id: String,
    pub decode: DecodeConfig,
    pub runs: usize,
    pub master_seed: u64,
    pub n_samples: usize,
    pub common_decode_noise: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceRun {
    pub run: usize,
    /// Seeds this run's persona shuffles.
    pub seed: u64,
    /// Corpus score per metric name, at reporting scale.
    pub scores: BTreeMap<String, f64>,
}

/// Population statistics (divisor R) across runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: Metric,
    pub mean: f64,
    pub variance: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl MetricSummary {
    pub fn of(metric: Metric, xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let variance = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        MetricSummary {
            metric,
            mean,
            variance,
            std: variance.sqrt(),
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub schema_version: u32,
    pub metadata: VarianceMetadata,
    pub metrics: Vec<Metric>,
    pub runs: Vec<VarianceRun>,
    pub aggregate: Vec<MetricSummary>,
}

impl VarianceReport {
    pub fn summary(&self, metric: Metric) -> Option<&MetricSummary> {
        self.aggregate.iter().find(|a| a.metric == metric)
    }

    /// One metric's corpus score in every run.
    pub fn series(&self, metric: Metric) -> Vec<f64> {
        self.runs.iter().filter_map(|r| r.scores.get(metric.name()).copied()).collect()
    }
}

/// `R` passes over the test set, each with a fresh uniform persona shuffle
/// for every sample, scored with corpus metrics.
pub fn variance_study<M: OrderModel>(
    model: &M,
    dataset: &Dataset,
    vocab: &Vocabulary,
    decode: &DecodeConfig,
    cfg: &AnalysisConfig,
) -> Result<VarianceReport> {
    cfg.validate()?;
    decode.validate()?;
    if cfg.runs < 2 {
        return Err(Error::config("analysis.runs", "a variance study needs at least 2 runs"));
    }
    let samples = cfg.samples(&dataset.samples);
    if samples.is_empty() {
        return Err(Error::contract("variance study over an empty dataset"));
    }
    let refs = gold(samples);
    let scorer = Scorer::new(samples, &refs, vocab, &cfg.metrics)?;

    let runs = par_map(cfg.runs, cfg.threads, |r| {
        let seed = unit_rng(cfg.master_seed, r as u64).next_u64();
        let mut shuffles = ChaCha8Rng::seed_from_u64(seed);
        let mut decodes = Vec::with_capacity(samples.len());
        for (i, sample) in samples.iter().enumerate() {
            let order = shuffle_persona(sample.persona.len(), &mut shuffles);
            let noise_seed = if cfg.common_decode_noise { decode.seed } else { decode.seed.wrapping_add(seed) };
            let mut rng = unit_rng(noise_seed, i as u64);
            decodes.push(model.generate(sample, &order, decode, &mut rng)?);
        }
        let scores = cfg
            .metrics
            .iter()
            .map(|&m| Ok((m.name().to_string(), scorer.corpus(m, &decodes)?)))
            .collect::<Result<_>>()?;
        Ok(VarianceRun { run: r, seed, scores })
    })?;

    let report = VarianceReport {
        schema_version: REPORT_SCHEMA_VERSION,
        metadata: VarianceMetadata {
            model_id: String::new(),
            decode: decode.clone(),
            runs: cfg.runs,
            master_seed: cfg.master_seed,
            n_samples: samples.len(),
            common_decode_noise: cfg.common_decode_noise,
        },
        metrics: cfg.metrics.clone(),
        aggregate: Vec::new(),
        runs,
    };
    let aggregate = cfg.metrics.iter().map(|&m| MetricSummary::of(m, &report.series(m))).collect();
    Ok(VarianceReport { aggregate, ..report })
}
