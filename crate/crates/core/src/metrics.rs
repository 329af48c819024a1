//! Lexical response metrics: BLEU, ROUGE-L, CIDEr, n-gram entropy and a
//! persona-consistency proxy with a subprocess hook for external scorers.
//!
//! Every function is generic over the token type so it works on both token
//! ids and detokenized words. BLEU, ROUGE-L and the consistency proxy are
//! reported ×100, CIDEr ×10 is already built in, entropy is reported raw.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smoothing floor for zero-count n-gram orders in sentence BLEU.
pub const BLEU_EPSILON: f64 = 1e-9;

fn ngrams<T: Ord>(tokens: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut counts = BTreeMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// `(clipped matches, candidate n-grams)` for one order.
fn clipped<T: Ord>(cand: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let c = ngrams(cand, n);
    let r = ngrams(reference, n);
    let matched = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    (matched, cand.len().saturating_sub(n - 1))
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

/// Sentence BLEU up to order `n` (uniform weights). Orders with no matches
/// use [`BLEU_EPSILON`] as their precision; an empty candidate scores 0.
pub fn bleu_n<T: Ord>(cand: &[T], reference: &[T], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::contract("BLEU order must be at least 1"));
    }
    if reference.is_empty() {
        return Err(Error::contract("BLEU reference is empty"));
    }
    if cand.is_empty() {
        return Ok(0.0);
    }
    let log_p: f64 = (1..=n)
        .map(|i| {
            let (m, total) = clipped(cand, reference, i);
            if m == 0 {
                BLEU_EPSILON.ln()
            } else {
                (m as f64 / total as f64).ln()
            }
        })
        .sum();
    Ok(brevity_penalty(cand.len(), reference.len()) * (log_p / n as f64).exp())
}

/// Corpus BLEU from pooled clipped counts and lengths, unsmoothed.
pub fn corpus_bleu_n<T: Ord>(cands: &[Vec<T>], refs: &[Vec<T>], n: usize) -> Result<f64> {
    if cands.len() != refs.len() {
        return Err(Error::contract(format!(
            "corpus BLEU: {} candidates but {} references",
            cands.len(),
            refs.len()
        )));
    }
    if n == 0 || cands.is_empty() {
        return Err(Error::contract("corpus BLEU needs n >= 1 and a nonempty corpus"));
    }
    if refs.iter().any(Vec::is_empty) {
        return Err(Error::contract("BLEU reference is empty"));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    for (c, r) in cands.iter().zip(refs) {
        for i in 1..=n {
            let (m, t) = clipped(c, r, i);
            matched[i - 1] += m;
            total[i - 1] += t;
        }
    }
    if matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched.iter().zip(&total).map(|(&m, &t)| (m as f64 / t as f64).ln()).sum();
    let c: usize = cands.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    Ok(brevity_penalty(c, r) * (log_p / n as f64).exp())
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based precision, recall and F1 (β = 1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RougeL {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn rouge_l<T: Eq>(cand: &[T], reference: &[T]) -> Result<RougeL> {
    if reference.is_empty() {
        return Err(Error::contract("ROUGE-L reference is empty"));
    }
    if cand.is_empty() {
        return Ok(RougeL {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        });
    }
    let l = lcs_len(cand, reference) as f64;
    let p = l / cand.len() as f64;
    let r = l / reference.len() as f64;
    Ok(RougeL {
        precision: p,
        recall: r,
        f1: if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) },
    })
}

pub fn rouge_l_f1<T: Eq>(cand: &[T], reference: &[T]) -> Result<f64> {
    Ok(rouge_l(cand, reference)?.f1)
}

/// Plain CIDEr with IDF taken from the reference corpus.
pub struct Cider<'a, T> {
    refs: &'a [Vec<T>],
    n_max: usize,
    log_n: f64,
    df: Vec<BTreeMap<&'a [T], usize>>,
}

impl<'a, T: Ord> Cider<'a, T> {
    pub fn new(refs: &'a [Vec<T>], n_max: usize) -> Result<Self> {
        if refs.len() < 2 {
            return Err(Error::contract("CIDEr needs at least 2 samples to define IDF"));
        }
        if n_max == 0 || refs.iter().any(Vec::is_empty) {
            return Err(Error::contract("CIDEr needs n_max >= 1 and nonempty references"));
        }
        let df = (1..=n_max)
            .map(|n| {
                let mut df = BTreeMap::new();
                for r in refs {
                    for g in ngrams(r, n).into_keys() {
                        *df.entry(g).or_insert(0) += 1;
                    }
                }
                df
            })
            .collect();
        Ok(Cider {
            refs,
            n_max,
            log_n: (refs.len() as f64).ln(),
            df,
        })
    }

    fn idf(&self, n: usize, g: &[T]) -> f64 {
        let df = self.df[n - 1].get(g).copied().unwrap_or(0).max(1);
        self.log_n - (df as f64).ln()
    }

    fn tf_idf<'g>(&self, n: usize, counts: &BTreeMap<&'g [T], usize>) -> BTreeMap<&'g [T], f64> {
        counts.iter().map(|(&g, &k)| (g, k as f64 * self.idf(n, g))).collect()
    }

    /// Score of `cand` against reference `index`, in `[0, 10]`.
    pub fn score(&self, cand: &[T], index: usize) -> f64 {
        let reference = &self.refs[index];
        let mut sum = 0.0;
        for n in 1..=self.n_max {
            let c = ngrams(cand, n);
            let r = ngrams(reference, n);
            if c.is_empty() {
                continue;
            }
            let (vc, vr) = (self.tf_idf(n, &c), self.tf_idf(n, &r));
            let norm = |v: &BTreeMap<&[T], f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
            let (nc, nr) = (norm(&vc), norm(&vr));
            if nc == 0.0 || nr == 0.0 {
                continue;
            }
            let dot: f64 = vc.iter().filter_map(|(g, a)| vr.get(g).map(|b| a * b)).sum();
            sum += dot / (nc * nr);
        }
        10.0 * sum / self.n_max as f64
    }
}

/// Per-sample CIDEr scores and their mean.
pub fn cider<T: Ord>(cands: &[Vec<T>], refs: &[Vec<T>], n_max: usize) -> Result<(Vec<f64>, f64)> {
    if cands.len() != refs.len() {
        return Err(Error::contract("CIDEr: candidate and reference counts differ"));
    }
    let c = Cider::new(refs, n_max)?;
    let per: Vec<f64> = cands.iter().enumerate().map(|(i, x)| c.score(x, i)).collect();
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    Ok((per, mean))
}

/// Shannon entropy (nats) of the pooled `k`-gram distribution. Responses
/// shorter than `k` contribute nothing.
pub fn entropy_k<T: Ord>(corpus: &[Vec<T>], k: usize) -> Result<f64> {
    let mut counts: BTreeMap<&[T], usize> = BTreeMap::new();
    for r in corpus {
        for (g, c) in ngrams(r, k) {
            *counts.entry(g).or_insert(0) += c;
        }
    }
    let total: usize = counts.values().sum();
    if total == 0 {
        return Err(Error::contract(format!("no {k}-grams in the corpus; use a smaller entropy order")));
    }
    let h = -counts
        .values()
        .map(|&c| {
            let f = c as f64 / total as f64;
            f * f.ln()
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

/// Function words ignored by [`persona_consistency_proxy`].
pub const STOPWORDS: &[&str] = &[
    "a", "about", "all", "am", "an", "and", "are", "as", "at", "be", "been", "but", "by", "can", "do", "does", "for", "from",
    "had", "has", "have", "he", "her", "hers", "him", "his", "how", "i", "i'm", "if", "in", "into", "is", "it", "its", "me",
    "mine", "my", "myself", "of", "on", "or", "our", "she", "so", "that", "the", "their", "them", "then", "there", "they",
    "this", "to", "too", "up", "us", "very", "was", "we", "were", "what", "when", "where", "which", "who", "will", "with",
    "you", "your",
];

fn content<S: AsRef<str>>(tokens: &[S]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for t in tokens {
        let t = t.as_ref().to_lowercase();
        if t.chars().all(|c| c.is_ascii_punctuation()) || STOPWORDS.contains(&t.as_str()) {
            continue;
        }
        *out.entry(t).or_insert(0) += 1;
    }
    out
}

/// Max over persona sentences of content-token F1 with the response.
pub fn persona_consistency_proxy<S: AsRef<str>>(response: &[S], persona: &[Vec<S>]) -> Result<f64> {
    if persona.is_empty() {
        return Err(Error::contract("persona is empty"));
    }
    let r = content(response);
    let nr: usize = r.values().sum();
    let mut best = 0.0f64;
    for sentence in persona {
        let s = content(sentence);
        let ns: usize = s.values().sum();
        let overlap: usize = r.iter().map(|(w, &k)| k.min(s.get(w).copied().unwrap_or(0))).sum();
        if overlap == 0 {
            continue;
        }
        let p = overlap as f64 / nr as f64;
        let q = overlap as f64 / ns as f64;
        best = best.max(2.0 * p * q / (p + q));
    }
    Ok(best)
}

#[derive(Serialize)]
struct ScorerRequest<'a> {
    response: &'a str,
    persona: &'a [String],
}

#[derive(Deserialize)]
struct ScorerReply {
    score: f64,
}

/// A consistency scorer run as a subprocess: one `{"response", "persona"}`
/// JSON line per item on stdin, one `{"score"}` line per item on stdout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalScorer {
    pub command: Vec<String>,
}

impl ExternalScorer {
    pub fn score(&self, items: &[(String, Vec<String>)]) -> Result<Vec<f64>> {
        let (prog, args) = self
            .command
            .split_first()
            .ok_or_else(|| Error::config("metrics.external_scorer", "empty command"))?;
        let mut child = Command::new(prog)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let mut input = Vec::new();
        for (response, persona) in items {
            serde_json::to_writer(&mut input, &ScorerRequest { response, persona })?;
            input.push(b'\n');
        }
        let mut stdin = child.stdin.take().expect("piped stdin");
        let writer = std::thread::spawn(move || stdin.write_all(&input));
        let stdout = child.stdout.take().expect("piped stdout");
        let mut scores = Vec::with_capacity(items.len());
        for (i, line) in BufReader::new(stdout).lines().enumerate() {
            let line = line?;
            let reply: ScorerReply = serde_json::from_str(&line).map_err(|e| Error::Protocol {
                line: i + 1,
                msg: format!("{e}: {line:?}"),
            })?;
            if !reply.score.is_finite() {
                return Err(Error::Protocol {
                    line: i + 1,
                    msg: format!("non-finite score: {line:?}"),
                });
            }
            scores.push(reply.score);
        }
        let _ = writer.join();
        child.wait()?;
        if scores.len() != items.len() {
            return Err(Error::Protocol {
                line: scores.len() + 1,
                msg: format!("expected {} scores, got {}", items.len(), scores.len()),
            });
        }
        Ok(scores)
    }
}

/// One metric over a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_sample: Option<Vec<f64>>,
    /// Unscaled corpus-level value.
    pub corpus: f64,
    /// Multiplier applied for reporting (100 for BLEU/ROUGE/consistency).
    pub scale: f64,
}

impl MetricValue {
    pub fn reported(&self) -> f64 {
        self.corpus * self.scale
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub entropy_k: usize,
    pub cider_n: usize,
    pub external_scorer: Option<ExternalScorer>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            entropy_k: 4,
            cider_n: 4,
            external_scorer: None,
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// The full metric suite over word-level responses.
pub fn score_all(cands: &[Vec<String>], refs: &[Vec<String>], personas: &[Vec<Vec<String>>], cfg: &MetricsConfig) -> Result<Vec<MetricValue>> {
    if cands.len() != refs.len() || cands.len() != personas.len() || cands.is_empty() {
        return Err(Error::contract("metric inputs must be nonempty and of equal length"));
    }
    let per = |name: &str, scores: Vec<f64>, scale: f64| MetricValue {
        name: name.into(),
        corpus: mean(&scores),
        per_sample: Some(scores),
        scale,
    };
    let corpus = |name: &str, value: f64, scale: f64| MetricValue {
        name: name.into(),
        per_sample: None,
        corpus: value,
        scale,
    };
    let pairs = || cands.iter().zip(refs);
    let mut out = vec![
        per("bleu1", pairs().map(|(c, r)| bleu_n(c, r, 1)).collect::<Result<_>>()?, 100.0),
        per("bleu2", pairs().map(|(c, r)| bleu_n(c, r, 2)).collect::<Result<_>>()?, 100.0),
        corpus("corpus_bleu1", corpus_bleu_n(cands, refs, 1)?, 100.0),
        corpus("corpus_bleu2", corpus_bleu_n(cands, refs, 2)?, 100.0),
        per("rouge_l", pairs().map(|(c, r)| rouge_l_f1(c, r)).collect::<Result<_>>()?, 100.0),
    ];
    if cands.len() >= 2 {
        out.push(per("cider", cider(cands, refs, cfg.cider_n)?.0, 1.0));
    }
    // entropy is skipped rather than failing when every response is too short
    if let Ok(h) = entropy_k(cands, cfg.entropy_k) {
        out.push(corpus(&format!("entropy{}", cfg.entropy_k), h, 1.0));
    }
    let consistency = match &cfg.external_scorer {
        Some(s) => {
            let items: Vec<(String, Vec<String>)> = cands
                .iter()
                .zip(personas)
                .map(|(c, p)| (c.join(" "), p.iter().map(|x| x.join(" ")).collect()))
                .collect();
            s.score(&items)?
        }
        None => cands
            .iter()
            .zip(personas)
            .map(|(c, p)| persona_consistency_proxy(c, p))
            .collect::<Result<_>>()?,
    };
    out.push(per("consistency", consistency, 100.0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu_n(&w("the cat sat"), &w("the cat sat"), 1).unwrap(), 1.0);
        assert!((bleu_n(&w("the the the"), &w("the cat"), 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(bleu_n(&w("dog ran"), &w("the cat"), 1).unwrap() < 1e-8);
        assert_eq!(bleu_n(&w(""), &w("the cat"), 1).unwrap(), 0.0);
        assert!(bleu_n(&w("a"), &w(""), 1).is_err());
    }

    #[test]
    fn bleu_brevity_penalty() {
        // c=2, r=4: BP = exp(1 - 2) and both unigrams match
        let b = bleu_n(&w("a b"), &w("a b c d"), 1).unwrap();
        assert!((b - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn corpus_bleu_examples() {
        let c = vec![w("a b c"), w("d e")];
        assert_eq!(corpus_bleu_n(&c, &c, 2).unwrap(), 1.0);
        let cands = vec![w("the cat sat on a mat")];
        let refs = vec![w("the cat sat on the mat")];
        // pooled counts: p1 = 5/6, p2 = 3/5
        let oracle = (0.5 * ((5.0f64 / 6.0).ln() + (3.0f64 / 5.0).ln())).exp();
        let got = corpus_bleu_n(&cands, &refs, 2).unwrap();
        assert!((got - oracle).abs() < 1e-12);
        assert!((got - bleu_n(&cands[0], &refs[0], 2).unwrap()).abs() < 1e-12);
        let doubled: Vec<_> = cands.iter().chain(&cands).cloned().collect();
        let drefs: Vec<_> = refs.iter().chain(&refs).cloned().collect();
        assert!((corpus_bleu_n(&doubled, &drefs, 2).unwrap() - got).abs() < 1e-12);
        assert!(corpus_bleu_n(&cands, &[], 1).is_err());
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l_f1(&w("a b c"), &w("a b c")).unwrap(), 1.0);
        assert!((rouge_l_f1(&w("the cat sat"), &w("the cat sat on mat")).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(rouge_l_f1(&w("x y"), &w("a b")).unwrap(), 0.0);
        assert_eq!(rouge_l_f1(&w(""), &w("a b")).unwrap(), 0.0);
    }

    #[test]
    fn cider_examples() {
        let refs = vec![w("one two three four five"), w("six seven eight nine ten")];
        let (per, _) = cider(&refs, &refs, 4).unwrap();
        for s in per {
            assert!((s - 10.0).abs() < 1e-9);
        }
        let refs = vec![w("red fox"), w("blue whale sings")];
        let c = Cider::new(&refs, 4).unwrap();
        assert!((c.score(&w("red fox"), 0) - 5.0).abs() < 1e-9);
        assert_eq!(c.score(&w("green owl"), 0), 0.0);
        assert!(Cider::new(&refs[..1], 4).is_err());
    }

    #[test]
    fn entropy_examples() {
        let same = vec![w("a b c d"), w("a b c d")];
        assert_eq!(entropy_k(&same, 4).unwrap(), 0.0);
        let two = vec![w("a b c d"), w("e f g h")];
        assert!((entropy_k(&two, 4).unwrap() - 2f64.ln()).abs() < 1e-12);
        let three = vec![w("a b c d"), w("a b c d"), w("e f g h"), w("i j k l")];
        let want = -(0.5 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln());
        assert!((entropy_k(&three, 4).unwrap() - want).abs() < 1e-12);
        assert!((want - 1.0397).abs() < 1e-4);
        assert!(entropy_k(&[w("a b")], 4).is_err());
    }

    #[test]
    fn consistency_examples() {
        let persona = vec![w("i like green tea"), w("i have a dog")];
        assert_eq!(persona_consistency_proxy(&w("i have a dog"), &persona).unwrap(), 1.0);
        assert_eq!(persona_consistency_proxy(&w("hello there"), &persona).unwrap(), 0.0);
        assert!((persona_consistency_proxy(&w("i like tea"), &persona).unwrap() - 0.8).abs() < 1e-12);
        assert!(persona_consistency_proxy(&w("x"), &Vec::<Vec<String>>::new()).is_err());
    }

    #[test]
    fn external_scorer_protocol() {
        let items = vec![("hi".to_string(), vec!["p".to_string()]), ("yo".to_string(), vec![])];
        let ok = ExternalScorer {
            command: vec!["sh".into(), "-c".into(), r#"while read l; do echo '{"score": 0.25}'; done"#.into()],
        };
        assert_eq!(ok.score(&items).unwrap(), vec![0.25, 0.25]);
        let bad = ExternalScorer {
            command: vec!["sh".into(), "-c".into(), r#"read l; echo '{"score": 1}'; read l; echo 'oops'"#.into()],
        };
        assert!(matches!(bad.score(&items), Err(Error::Protocol { line: 2, .. })));
        let short = ExternalScorer {
            command: vec!["sh".into(), "-c".into(), r#"cat > /dev/null; echo '{"score": 1}'"#.into()],
        };
        assert!(matches!(short.score(&items), Err(Error::Protocol { line: 2, .. })));
    }

    #[test]
    fn score_all_identity() {
        let refs = vec![w("my color is blue today"), w("my pet is a cat now")];
        let personas = vec![vec![w("my favorite color is blue")], vec![w("i have a pet cat")]];
        let out = score_all(&refs, &refs, &personas, &MetricsConfig::default()).unwrap();
        let get = |n: &str| out.iter().find(|m| m.name == n).unwrap().corpus;
        assert_eq!(get("bleu1"), 1.0);
        assert_eq!(get("corpus_bleu2"), 1.0);
        assert_eq!(get("rouge_l"), 1.0);
        assert!((get("cider") - 10.0).abs() < 1e-9);
    }
}
