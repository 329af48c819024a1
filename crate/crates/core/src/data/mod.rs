//! Persona-dialogue samples, tokenization, persona orderings and the input
//! layouts fed to the two model architectures.
//!
//! A decoder-only model sees one sequence:
//!
//! ```text
//! <bos> <p> s_π(1) <p> … <p> s_π(n) <ctx> u_1 <utt> … u_m <res> r <eos>
//! ```
//!
//! An encoder-decoder model sees `<p> s_π(1) … <ctx> u_1 <utt> … u_m` on the
//! encoder side and `<bos> r <eos>` on the decoder side. Reordering the persona
//! only moves whole persona segments, so sequence lengths and response
//! positions are identical under every ordering.

mod jsonl;
mod synthetic;
mod vocab;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use jsonl::{load_jsonl, read_records, save_jsonl, write_records, DialogueRecord};
pub(crate) use synthetic::records_to_dataset;
pub use synthetic::{build_vocabulary, generate_synthetic_corpus, SyntheticConfig, SyntheticCorpus, CATEGORIES};
pub use vocab::*;

use crate::error::{Error, Result};

/// Lowercases, splits on whitespace and splits every ASCII punctuation
/// character into its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars().flat_map(char::to_lowercase) {
            if ch.is_ascii_punctuation() {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}

/// The canonical text form: `detokenize(tokenize(text))`.
pub fn normalize(text: &str) -> String {
    detokenize(&tokenize(text))
}

/// Persona sentences in their presentation (canonical) order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PersonaSet {
    sentences: Vec<Vec<TokenId>>,
}

impl PersonaSet {
    pub fn new(sentences: Vec<Vec<TokenId>>) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::contract("persona needs at least one sentence"));
        }
        if sentences.iter().any(Vec::is_empty) {
            return Err(Error::contract("persona sentences must be nonempty"));
        }
        Ok(PersonaSet { sentences })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn sentences(&self) -> &[Vec<TokenId>] {
        &self.sentences
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogueSample {
    pub persona: PersonaSet,
    pub context: Vec<Vec<TokenId>>,
    pub response: Vec<TokenId>,
}

impl DialogueSample {
    pub fn new(persona: PersonaSet, context: Vec<Vec<TokenId>>, response: Vec<TokenId>) -> Result<Self> {
        if context.is_empty() {
            return Err(Error::contract("dialogue context needs at least one utterance"));
        }
        if response.is_empty() {
            return Err(Error::contract("response must be nonempty"));
        }
        Ok(DialogueSample {
            persona,
            context,
            response,
        })
    }

    /// Response tokens followed by `<eos>`: the supervised positions.
    pub fn response_targets(&self) -> Vec<TokenId> {
        let mut t = self.response.clone();
        t.push(EOS_ID);
        t
    }

    fn max_id(&self) -> TokenId {
        self.persona
            .sentences()
            .iter()
            .chain(&self.context)
            .chain(std::iter::once(&self.response))
            .flatten()
            .copied()
            .max()
            .unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub split: Split,
    pub samples: Vec<DialogueSample>,
}

impl Dataset {
    pub fn new(split: Split, samples: Vec<DialogueSample>, vocab_size: usize) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.max_id() >= vocab_size {
                return Err(Error::Index {
                    op: "dataset",
                    index: i,
                    limit: vocab_size,
                });
            }
        }
        Ok(Dataset { split, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Longest decoder-only serialization in the set.
    pub fn max_decoder_len(&self) -> usize {
        self.samples.iter().map(decoder_len).max().unwrap_or(0)
    }
}

fn decoder_len(s: &DialogueSample) -> usize {
    let persona: usize = s.persona.sentences().iter().map(|p| p.len() + 1).sum();
    let context: usize = s.context.iter().map(Vec::len).sum::<usize>() + s.context.len();
    1 + persona + context + 1 + s.response.len() + 1
}

/// A persona ordering: position `i` shows sentence `order[i]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Permutation {
    order: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Permutation { order: (0..n).collect() }
    }

    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &i in &order {
            if i >= order.len() || seen[i] {
                return Err(Error::contract(format!("{order:?} is not a permutation")));
            }
            seen[i] = true;
        }
        Ok(Permutation { order })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.order
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(i, &j)| i == j)
    }

    /// Every ordering of `n` items, lexicographic.
    pub fn all(n: usize) -> Vec<Permutation> {
        let mut cur: Vec<usize> = (0..n).collect();
        let mut out = vec![Permutation { order: cur.clone() }];
        // next lexicographic permutation
        while let Some(i) = (1..n).rev().find(|&i| cur[i - 1] < cur[i]) {
            let j = (i..n).rev().find(|&j| cur[j] > cur[i - 1]).unwrap();
            cur.swap(i - 1, j);
            cur[i..].reverse();
            out.push(Permutation { order: cur.clone() });
        }
        out
    }

    pub fn apply<'a, T>(&self, items: &'a [T]) -> impl Iterator<Item = &'a T> + use<'a, '_, T> {
        self.order.iter().map(move |&i| &items[i])
    }
}

/// Uniform random ordering of `n` persona sentences (Fisher–Yates).
pub fn shuffle_persona<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Permutation {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    Permutation { order }
}

fn check_order(sample: &DialogueSample, order: &Permutation) -> Result<()> {
    if order.len() != sample.persona.len() {
        return Err(Error::contract(format!(
            "ordering over {} items applied to a persona of {} sentences",
            order.len(),
            sample.persona.len()
        )));
    }
    Ok(())
}

fn push_persona_and_context(out: &mut Vec<TokenId>, sample: &DialogueSample, order: &Permutation) {
    for s in order.apply(sample.persona.sentences()) {
        out.push(PERSONA_SEP_ID);
        out.extend_from_slice(s);
    }
    out.push(CONTEXT_START_ID);
    for (i, u) in sample.context.iter().enumerate() {
        if i > 0 {
            out.push(UTTERANCE_SEP_ID);
        }
        out.extend_from_slice(u);
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderInput {
    pub ids: Vec<TokenId>,
    /// True exactly at the response tokens and the trailing `<eos>`.
    pub response_mask: Vec<bool>,
}

impl DecoderInput {
    /// Indices of the supervised positions.
    pub fn response_positions(&self) -> Vec<usize> {
        self.response_mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }
}

/// Conditioning prefix for decoder-only generation: everything up to and
/// including `<res>`.
pub fn decoder_prefix(sample: &DialogueSample, order: &Permutation) -> Result<Vec<TokenId>> {
    check_order(sample, order)?;
    let mut ids = vec![BOS_ID];
    push_persona_and_context(&mut ids, sample, order);
    ids.push(RESPONSE_START_ID);
    Ok(ids)
}

pub fn serialize_decoder_input(sample: &DialogueSample, order: &Permutation, max_len: usize, index: usize) -> Result<DecoderInput> {
    let mut ids = decoder_prefix(sample, order)?;
    let start = ids.len();
    ids.extend_from_slice(&sample.response);
    ids.push(EOS_ID);
    if ids.len() > max_len {
        return Err(Error::Length {
            sample: index,
            len: ids.len(),
            max: max_len,
        });
    }
    let response_mask = (0..ids.len()).map(|i| i >= start).collect();
    Ok(DecoderInput { ids, response_mask })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncDecInput {
    pub source: Vec<TokenId>,
    /// `<bos> r <eos>`
    pub target: Vec<TokenId>,
}

pub fn encoder_source(sample: &DialogueSample, order: &Permutation) -> Result<Vec<TokenId>> {
    check_order(sample, order)?;
    let mut source = Vec::new();
    push_persona_and_context(&mut source, sample, order);
    Ok(source)
}

pub fn serialize_encdec_input(sample: &DialogueSample, order: &Permutation, max_len: usize, index: usize) -> Result<EncDecInput> {
    let source = encoder_source(sample, order)?;
    let mut target = vec![BOS_ID];
    target.extend_from_slice(&sample.response);
    target.push(EOS_ID);
    let len = source.len().max(target.len());
    if len > max_len {
        return Err(Error::Length {
            sample: index,
            len,
            max: max_len,
        });
    }
    Ok(EncDecInput { source, target })
}
