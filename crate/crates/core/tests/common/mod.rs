#![allow(dead_code)]

use orderlab::autodiff::{Graph, Var};
use orderlab::data::{DialogueSample, PersonaSet};
use orderlab::model::{forward_decoder_only, forward_encoder_decoder, init_params, Architecture, ModelConfig, ParamVars};
use orderlab::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;

pub type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>;

/// A scalar-valued graph over leaf inputs, plus the ops it exercises.
pub struct Case {
    pub name: String,
    pub ops: Vec<&'static str>,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Builder,
}

fn eval(case: &Case, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.build)(&mut g, &vars);
    g.value(out).item()
}

/// Largest per-input relative error `‖a − n‖ / (‖a‖ + ‖n‖)` between the
/// tape gradient and central differences.
pub fn gradcheck(case: &Case) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.build)(&mut g, &vars);
    g.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; case.inputs[i].numel()]);
        let mut numeric = vec![0.0; analytic.len()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            *n = (eval(case, &plus) - eval(case, &minus)) / (2.0 * FD_STEP);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        if na + nn > 1e-10 {
            worst = worst.max(diff / (na + nn));
        }
    }
    worst
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn mlp_case(rng: &mut ChaCha8Rng, id: usize) -> Case {
    let (m, k, n) = (rng.random_range(2..5), rng.random_range(2..5), rng.random_range(2..6));
    Case {
        name: format!("mlp#{id} {m}x{k}x{n}"),
        ops: vec!["matmul", "add", "gelu", "layer_norm", "mul", "scale", "sub", "mean"],
        inputs: vec![
            rand_tensor(rng, &[m, k]),
            rand_tensor(rng, &[k, n]),
            rand_tensor(rng, &[n]),
            rand_tensor(rng, &[n]),
            rand_tensor(rng, &[n]),
        ],
        build: Box::new(|g, v| {
            let h = g.matmul(v[0], v[1]).unwrap();
            let h = g.add(h, v[2]).unwrap();
            let h = g.gelu(h);
            let h = g.layer_norm(h, v[3], v[4], 1e-5).unwrap();
            let sq = g.mul(h, h).unwrap();
            let half = g.scale(h, 0.5);
            let d = g.sub(sq, half).unwrap();
            g.mean(d)
        }),
    }
}

fn attention_case(rng: &mut ChaCha8Rng, id: usize) -> Case {
    let t = rng.random_range(2..5);
    let d = 2 * rng.random_range(1..3);
    Case {
        name: format!("attention#{id} t={t} d={d}"),
        ops: vec!["matmul", "matmul_bt", "causal_softmax", "slice_cols", "concat_cols", "scale", "sum", "softmax"],
        inputs: vec![
            rand_tensor(rng, &[t, d]),
            rand_tensor(rng, &[d, d]),
            rand_tensor(rng, &[d, d]),
            rand_tensor(rng, &[d, d]),
        ],
        build: Box::new(move |g, v| {
            let q = g.matmul(v[0], v[1]).unwrap();
            let k = g.matmul(v[0], v[2]).unwrap();
            let val = g.matmul(v[0], v[3]).unwrap();
            let mut heads = Vec::new();
            for h in 0..2 {
                let w = d / 2;
                let qh = g.slice_cols(q, h * w, w).unwrap();
                let kh = g.slice_cols(k, h * w, w).unwrap();
                let vh = g.slice_cols(val, h * w, w).unwrap();
                let s = g.matmul_bt(qh, kh).unwrap();
                let s = g.scale(s, 0.7);
                let a = if h == 0 { g.causal_softmax(s).unwrap() } else { g.softmax(s, 1).unwrap() };
                heads.push(g.matmul(a, vh).unwrap());
            }
            let cat = g.concat_cols(&heads).unwrap();
            let sq = g.mul(cat, cat).unwrap();
            g.sum(sq)
        }),
    }
}

fn lookup_case(rng: &mut ChaCha8Rng, id: usize) -> Case {
    let (vocab, d, t) = (rng.random_range(3..7), rng.random_range(2..5), rng.random_range(2..6));
    let ids: Vec<usize> = (0..t).map(|_| rng.random_range(0..vocab)).collect();
    let targets: Vec<usize> = (0..t).map(|_| rng.random_range(0..vocab)).collect();
    let mut mask: Vec<bool> = (0..t).map(|_| rng.random_bool(0.6)).collect();
    mask[0] = true;
    let rows: Vec<usize> = (0..t).rev().collect();
    Case {
        name: format!("lookup#{id} V={vocab} d={d} t={t}"),
        ops: vec!["embedding", "matmul_bt", "select_rows", "cross_entropy"],
        inputs: vec![rand_tensor(rng, &[vocab, d])],
        build: Box::new(move |g, v| {
            let e = g.embedding(v[0], &ids).unwrap();
            let logits = g.matmul_bt(e, v[0]).unwrap();
            let picked = g.select_rows(logits, &rows).unwrap();
            g.cross_entropy(picked, &targets, &mask).unwrap()
        }),
    }
}

fn divergence_case(rng: &mut ChaCha8Rng, id: usize) -> Case {
    let (r, c) = (rng.random_range(2..5), rng.random_range(2..6));
    Case {
        name: format!("divergence#{id} {r}x{c}"),
        ops: vec!["kl_divergence", "transpose", "softmax", "mul", "sum", "add"],
        inputs: vec![rand_tensor(rng, &[r, c]), rand_tensor(rng, &[r, c]), rand_tensor(rng, &[c, r])],
        build: Box::new(|g, v| {
            let fwd = g.kl_divergence(v[0], v[1], 1).unwrap();
            let t = g.transpose(v[2]).unwrap();
            let col = g.kl_divergence(v[0], t, 0).unwrap();
            let s = g.softmax(v[1], 0).unwrap();
            let w = g.mul(s, v[0]).unwrap();
            let a = g.sum(fwd);
            let b = g.sum(col);
            let c2 = g.sum(w);
            let ab = g.add(a, b).unwrap();
            g.add(ab, c2).unwrap()
        }),
    }
}

pub fn tiny_config(arch: Architecture) -> ModelConfig {
    ModelConfig {
        arch,
        vocab_size: 7,
        d_model: 4,
        n_heads: 2,
        n_layers: 1,
        d_ff: 6,
        max_seq_len: 8,
        tie_embeddings: arch == Architecture::DecoderOnly,
        ..ModelConfig::default()
    }
}

fn transformer_case(rng: &mut ChaCha8Rng, arch: Architecture) -> Case {
    let cfg = tiny_config(arch);
    let params = init_params::<f64, _>(&cfg, rng).unwrap();
    let names: Vec<String> = params.iter().map(|(k, _)| k.clone()).collect();
    // weights well above the 0.02 init so no path is near zero; layer-norm
    // parameters jittered around (1, 0) so attention stays unsaturated
    let inputs: Vec<Tensor<f64>> = params
        .iter()
        .map(|(name, t)| {
            if name.contains("ln") {
                let base = if name.ends_with(".g") { 1.0 } else { 0.0 };
                Tensor::from_fn(t.shape(), |_| base + rng.random_range(-0.2..0.2))
            } else {
                Tensor::from_fn(t.shape(), |i| t.data()[i] * 20.0)
            }
        })
        .collect();
    let src = vec![1, 4, 5, 6, 3];
    let tgt = vec![1, 6, 5, 2];
    let targets = vec![6, 5, 2, 2];
    Case {
        name: format!("transformer {arch:?}"),
        ops: vec!["embedding", "layer_norm", "matmul", "matmul_bt", "softmax", "causal_softmax", "gelu", "cross_entropy"],
        inputs,
        build: Box::new(move |g, v| {
            let map = names.iter().cloned().zip(v.iter().copied()).collect();
            let p = ParamVars::from_vars(map);
            let logits = match arch {
                Architecture::DecoderOnly => forward_decoder_only(g, &p, &cfg, &src).unwrap(),
                Architecture::EncoderDecoder => forward_encoder_decoder(g, &p, &cfg, &src, &tgt).unwrap(),
            };
            let t = if arch == Architecture::DecoderOnly { vec![4, 5, 6, 3, 2] } else { targets.clone() };
            let mask = vec![true; t.len()];
            g.cross_entropy(logits, &t, &mask).unwrap()
        }),
    }
}

/// The randomized composite graphs used for gradient checking.
pub fn gradcheck_cases(seed: u64, per_kind: usize) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    for i in 0..per_kind {
        cases.push(mlp_case(&mut rng, i));
        cases.push(attention_case(&mut rng, i));
        cases.push(lookup_case(&mut rng, i));
        cases.push(divergence_case(&mut rng, i));
    }
    cases.push(transformer_case(&mut rng, Architecture::DecoderOnly));
    cases.push(transformer_case(&mut rng, Architecture::EncoderDecoder));
    cases
}

pub const ALL_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "matmul_bt",
    "transpose",
    "embedding",
    "select_rows",
    "slice_cols",
    "concat_cols",
    "softmax",
    "causal_softmax",
    "layer_norm",
    "gelu",
    "sum",
    "mean",
    "cross_entropy",
    "kl_divergence",
];

/// A sample over token ids `8..`, persona sentences of two tokens each.
pub fn sample(persona: &[&[usize]], context: &[&[usize]], response: &[usize]) -> DialogueSample {
    DialogueSample::new(
        PersonaSet::new(persona.iter().map(|p| p.to_vec()).collect()).unwrap(),
        context.iter().map(|c| c.to_vec()).collect(),
        response.to_vec(),
    )
    .unwrap()
}

/// Pearson chi-square statistic and its upper-tail p-value.
pub fn chi_square(observed: &[f64], expected: &[f64]) -> (f64, f64) {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let stat: f64 = observed.iter().zip(expected).map(|(o, e)| (o - e) * (o - e) / e).sum();
    let dist = ChiSquared::new((observed.len() - 1) as f64).unwrap();
    (stat, 1.0 - dist.cdf(stat))
}
