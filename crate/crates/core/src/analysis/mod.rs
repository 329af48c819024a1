//! Order-robustness probes: best/worst permutation sweeps, shuffle variance
//! studies and teacher-forced representation divergence.
//!
//! Every procedure is written against [`OrderModel`], so the same code runs on
//! trained transformers and on hand-built invariant stubs. Work is split into
//! units (one per sample or run) whose RNG streams derive only from the master
//! seed and the unit index; results are merged by index, so reports do not
//! depend on the thread count.

mod divergence;
mod report;
mod sweep;
mod variance;

pub use divergence::{bidirectional_kl, representation_divergence, DivergenceMetadata, DivergenceReport, DivergenceSample, TokenDivergence};
pub use report::{boxplot_svg, emit_boxplot_svg, emit_report, BoxStats, ReportFormat, Tabular, REPORT_SCHEMA_VERSION};
pub use sweep::{permutation_sweep, SweepAggregate, SweepCell, SweepMetadata, SweepReport, SweepSample};
pub use variance::{variance_study, MetricSummary, VarianceMetadata, VarianceReport, VarianceRun};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DialogueSample, Permutation, TokenId, Vocabulary};
use crate::decoding::{decode, DecodeConfig};
use crate::error::{Error, Result};
use crate::metrics::{bleu_n, corpus_bleu_n, entropy_k, persona_consistency_proxy, rouge_l_f1, Cider};
use crate::model::{log_softmax, Conditioning, Transformer};
use crate::tensor::Real;

/// What the probes need from a model.
pub trait OrderModel: Sync {
    /// Decodes a response for `sample` with its persona laid out in `order`.
    fn generate(&self, sample: &DialogueSample, order: &Permutation, cfg: &DecodeConfig, rng: &mut ChaCha8Rng) -> Result<Vec<TokenId>>;

    /// Teacher-forced log-distributions at each gold response position
    /// (response tokens, then `<eos>`).
    fn response_log_dists(&self, sample: &DialogueSample, order: &Permutation) -> Result<Vec<Vec<f64>>>;
}

impl<T: Real + Sync> OrderModel for Transformer<T> {
    fn generate(&self, sample: &DialogueSample, order: &Permutation, cfg: &DecodeConfig, rng: &mut ChaCha8Rng) -> Result<Vec<TokenId>> {
        decode(self, &Conditioning::for_sample(&self.config, sample, order)?, cfg, rng)
    }

    fn response_log_dists(&self, sample: &DialogueSample, order: &Permutation) -> Result<Vec<Vec<f64>>> {
        Transformer::response_log_dists(self, sample, order)
    }
}

impl<M: OrderModel + ?Sized> OrderModel for &M {
    fn generate(&self, sample: &DialogueSample, order: &Permutation, cfg: &DecodeConfig, rng: &mut ChaCha8Rng) -> Result<Vec<TokenId>> {
        (**self).generate(sample, order, cfg, rng)
    }

    fn response_log_dists(&self, sample: &DialogueSample, order: &Permutation) -> Result<Vec<Vec<f64>>> {
        (**self).response_log_dists(sample, order)
    }
}

/// Wraps a model so that it always sees the persona in stored order,
/// whatever ordering it is asked about. Exactly order-invariant by
/// construction.
pub struct OrderBlind<M>(pub M);

impl<M: OrderModel> OrderModel for OrderBlind<M> {
    fn generate(&self, sample: &DialogueSample, _order: &Permutation, cfg: &DecodeConfig, rng: &mut ChaCha8Rng) -> Result<Vec<TokenId>> {
        self.0.generate(sample, &Permutation::identity(sample.persona.len()), cfg, rng)
    }

    fn response_log_dists(&self, sample: &DialogueSample, _order: &Permutation) -> Result<Vec<Vec<f64>>> {
        self.0.response_log_dists(sample, &Permutation::identity(sample.persona.len()))
    }
}

/// Emits one fixed response and a fixed distribution regardless of input.
pub struct ConstantModel {
    pub response: Vec<TokenId>,
    pub logits: Vec<f64>,
}

impl OrderModel for ConstantModel {
    fn generate(&self, _: &DialogueSample, _: &Permutation, _: &DecodeConfig, _: &mut ChaCha8Rng) -> Result<Vec<TokenId>> {
        Ok(self.response.clone())
    }

    fn response_log_dists(&self, sample: &DialogueSample, _: &Permutation) -> Result<Vec<Vec<f64>>> {
        Ok(vec![log_softmax(&self.logits); sample.response.len() + 1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bleu1,
    Bleu2,
    RougeL,
    Cider,
    Consistency,
    Entropy4,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Bleu1 => "bleu1",
            Metric::Bleu2 => "bleu2",
            Metric::RougeL => "rouge_l",
            Metric::Cider => "cider",
            Metric::Consistency => "consistency",
            Metric::Entropy4 => "entropy4",
        }
    }

    /// Reporting multiplier: BLEU, ROUGE-L and consistency are shown ×100.
    pub fn scale(self) -> f64 {
        match self {
            Metric::Bleu1 | Metric::Bleu2 | Metric::RougeL | Metric::Consistency => 100.0,
            Metric::Cider | Metric::Entropy4 => 1.0,
        }
    }

    /// Whether the metric has a per-sample value (entropy is corpus-only).
    pub fn per_sample(self) -> bool {
        self != Metric::Entropy4
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub metrics: Vec<Metric>,
    /// Orderings per sample in a sweep; full enumeration when `n! <= perm_cap`.
    pub perm_cap: usize,
    pub runs: usize,
    pub pairs_per_sample: usize,
    /// Use only the first `n_samples` test samples.
    pub n_samples: Option<usize>,
    pub master_seed: u64,
    pub threads: usize,
    /// Give each sample the same sampling noise in every run, so that run to
    /// run differences come from persona order alone.
    pub common_decode_noise: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            metrics: vec![Metric::Bleu1, Metric::Bleu2, Metric::RougeL, Metric::Cider, Metric::Consistency],
            perm_cap: 120,
            runs: 20,
            pairs_per_sample: 4,
            n_samples: None,
            master_seed: 42,
            threads: 1,
            common_decode_noise: true,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.metrics.is_empty() {
            return Err(Error::config("analysis.metrics", "at least one metric is required"));
        }
        if self.perm_cap == 0 {
            return Err(Error::config("analysis.perm_cap", "must be at least 1"));
        }
        if self.pairs_per_sample == 0 {
            return Err(Error::config("analysis.pairs_per_sample", "must be at least 1"));
        }
        if self.threads == 0 {
            return Err(Error::config("analysis.threads", "must be at least 1"));
        }
        Ok(())
    }

    pub(crate) fn samples<'d>(&self, all: &'d [DialogueSample]) -> &'d [DialogueSample] {
        &all[..self.n_samples.map_or(all.len(), |n| n.min(all.len()))]
    }
}

/// RNG for unit `index` of a procedure seeded with `seed`.
pub fn unit_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Maps `f` over `0..n` on up to `threads` scoped threads, in index order.
pub(crate) fn par_map<R: Send>(n: usize, threads: usize, f: impl Fn(usize) -> Result<R> + Sync) -> Result<Vec<R>> {
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| s.spawn(move || (start..(start + chunk).min(n)).map(f).collect::<Result<Vec<R>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("analysis worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Scores decodes against gold responses; ids are detokenized for the
/// consistency proxy only.
pub(crate) struct Scorer<'a> {
    refs: Vec<Vec<TokenId>>,
    personas: Vec<Vec<Vec<String>>>,
    cider: Option<Cider<'a, TokenId>>,
    vocab: &'a Vocabulary,
}

impl<'a> Scorer<'a> {
    pub fn new(samples: &[DialogueSample], refs: &'a [Vec<TokenId>], vocab: &'a Vocabulary, metrics: &[Metric]) -> Result<Self> {
        let cider = if metrics.contains(&Metric::Cider) { Some(Cider::new(refs, 4)?) } else { None };
        Ok(Scorer {
            refs: refs.to_vec(),
            personas: samples
                .iter()
                .map(|s| s.persona.sentences().iter().map(|p| vocab.decode(p)).collect())
                .collect(),
            cider,
            vocab,
        })
    }

    /// Per-sample score at reporting scale.
    pub fn sample(&self, metric: Metric, index: usize, cand: &[TokenId]) -> Result<f64> {
        let r = &self.refs[index];
        let raw = match metric {
            Metric::Bleu1 => bleu_n(cand, r, 1)?,
            Metric::Bleu2 => bleu_n(cand, r, 2)?,
            Metric::RougeL => rouge_l_f1(cand, r)?,
            Metric::Cider => self.cider.as_ref().expect("cider requested").score(cand, index),
            Metric::Consistency => persona_consistency_proxy(&self.vocab.decode(cand), &self.personas[index])?,
            Metric::Entropy4 => return Err(Error::config("analysis.metrics", "entropy4 has no per-sample value")),
        };
        Ok(raw * metric.scale())
    }

    /// Corpus score at reporting scale: pooled BLEU, entropy over the corpus,
    /// per-sample mean for the rest.
    pub fn corpus(&self, metric: Metric, cands: &[Vec<TokenId>]) -> Result<f64> {
        let raw = match metric {
            Metric::Bleu1 => corpus_bleu_n(cands, &self.refs, 1)?,
            Metric::Bleu2 => corpus_bleu_n(cands, &self.refs, 2)?,
            Metric::Entropy4 => entropy_k(cands, 4)?,
            _ => {
                let mut sum = 0.0;
                for (i, c) in cands.iter().enumerate() {
                    sum += self.sample(metric, i, c)?;
                }
                return Ok(sum / cands.len() as f64);
            }
        };
        Ok(raw * metric.scale())
    }
}

pub(crate) fn gold(samples: &[DialogueSample]) -> Vec<Vec<TokenId>> {
    samples.iter().map(|s| s.response.clone()).collect()
}
