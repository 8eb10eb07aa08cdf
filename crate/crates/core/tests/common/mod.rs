//! Reference implementations the library is checked against. Each one is
//! written directly from the defining formulas with plain loops and shares no
//! code with the module it checks.

#![allow(dead_code)]

pub mod checks;

use cxr_core::autodiff::{Graph, Var};
use cxr_core::decoder::{DecoderDims, DecoderParams};
use cxr_core::encoder::FeatureMap;
use cxr_core::text::{END_INDEX, START_INDEX};
use cxr_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

// ---------------------------------------------------------------------------
// Finite differences

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for the relative error so entries that are zero in both
/// the analytic and numeric gradient do not divide by zero.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

/// Builds the scalar loss on fresh leaves holding `inputs`, backpropagates,
/// and compares every input's gradient against central differences.
/// Returns the worst relative error.
pub fn grad_check(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item().expect("scalar loss")
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}

/// Reduces any node to a scalar through a fixed random projection so every
/// output element carries a distinct weight.
pub fn project(g: &mut Graph, out: Var, seed: u64) -> Var {
    let shape = g.value(out).shape().to_vec();
    let w = random_tensor(&mut rng(seed), &shape, 1.0);
    let w = g.constant(w);
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

// ---------------------------------------------------------------------------
// Decoder step, evaluated straight from the equations

pub struct OracleStep {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    pub alpha: Vec<f64>,
    pub word_dist: Vec<f64>,
}

fn sigm(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `m[r][c]` of a row-major matrix tensor.
fn at(t: &Tensor, r: usize, c: usize) -> f64 {
    t.data()[r * t.shape()[1] + c]
}

pub fn oracle_step(p: &DecoderParams, f: &FeatureMap, y_prev: usize, h: &[f64], c: &[f64]) -> OracleStep {
    let d = p.dims();
    let (hs, es, cs, ps, vs) = (d.hidden, d.embed, d.channels, d.positions, d.vocab);
    let v = |ch: usize, pos: usize| at(&f.v, ch, pos);

    let mut x = Vec::with_capacity(es + cs + hs);
    for k in 0..es {
        x.push(at(&p.embed, k, y_prev));
    }
    x.extend_from_slice(f.v_gav.data());
    x.extend_from_slice(h);

    let pre = |row: usize| {
        let mut s = 0.0;
        for (k, xk) in x.iter().enumerate() {
            s += at(&p.w_gates, row, k) * xk;
        }
        s + p.b_gates.as_ref().map_or(0.0, |b| b.data()[row])
    };
    let mut c_new = vec![0.0; hs];
    let mut h_new = vec![0.0; hs];
    for j in 0..hs {
        let i_gate = sigm(pre(j));
        let f_gate = sigm(pre(hs + j));
        let o_gate = sigm(pre(2 * hs + j));
        let g_gate = pre(3 * hs + j).tanh();
        c_new[j] = f_gate * c[j] + i_gate * g_gate;
        h_new[j] = o_gate * c_new[j].tanh();
    }

    let mut logits = vec![0.0; ps];
    for (pos, l) in logits.iter_mut().enumerate() {
        let mut from_h = 0.0;
        for j in 0..hs {
            from_h += at(&p.w_att_h, pos, j) * h_new[j];
        }
        let mut from_v = 0.0;
        for ch in 0..cs {
            from_v += at(&p.w_att_v, 0, ch) * v(ch, pos);
        }
        *l = from_h + from_v;
    }
    let alpha = softmax(&logits);

    let mut ctx = vec![0.0; cs];
    for (ch, cv) in ctx.iter_mut().enumerate() {
        for (pos, a) in alpha.iter().enumerate() {
            *cv += v(ch, pos) * a;
        }
    }
    let mut out = vec![0.0; vs];
    for (w, o) in out.iter_mut().enumerate() {
        for j in 0..hs {
            *o += at(&p.w_out_h, w, j) * h_new[j];
        }
        for ch in 0..cs {
            *o += at(&p.w_out_c, w, ch) * ctx[ch];
        }
    }
    OracleStep {
        h: h_new,
        c: c_new,
        alpha,
        word_dist: softmax(&out),
    }
}

/// Random features and decoder. `sharpness` scales every weight so the word
/// distributions are far from uniform.
pub fn tiny_model(seed: u64, d: DecoderDims, gate_bias: bool, sharpness: f64) -> (FeatureMap, DecoderParams) {
    let mut r = rng(seed);
    let mut p = DecoderParams::random(d, gate_bias, &mut r);
    for t in [&mut p.w_gates, &mut p.embed, &mut p.w_att_h, &mut p.w_att_v, &mut p.w_out_h, &mut p.w_out_c] {
        t.data_mut().iter_mut().for_each(|x| *x *= sharpness);
    }
    if let Some(b) = p.b_gates.as_mut() {
        *b = random_tensor(&mut r, &[4 * d.hidden], 1.0);
    }
    let v = random_tensor(&mut r, &[d.channels, d.positions], 1.0);
    let v_gav: Vec<f64> = (0..d.channels)
        .map(|ch| v.data()[ch * d.positions..(ch + 1) * d.positions].iter().sum::<f64>() / d.positions as f64)
        .collect();
    let side = (d.positions as f64).sqrt() as usize;
    let f = FeatureMap {
        v,
        v_gav: Tensor::vector(v_gav),
        grid_side: side,
    };
    (f, p)
}

/// Every sequence reachable in at most `max_len` steps without `<start>`:
/// all sequences that end in `<end>`, plus the unfinished ones of full length.
/// Returned as `(tokens after <start>, log-prob, finished)`, best first.
pub fn enumerate_sequences(f: &FeatureMap, p: &DecoderParams, max_len: usize) -> Vec<(Vec<usize>, f64, bool)> {
    let hs = p.dims().hidden;
    let vocab = p.dims().vocab;
    let mut out = Vec::new();
    let mut frontier = vec![(Vec::<usize>::new(), 0.0, vec![0.0; hs], vec![0.0; hs])];
    for step in 0..max_len {
        let mut next = Vec::new();
        for (seq, lp, h, c) in frontier {
            let prev = seq.last().copied().unwrap_or(START_INDEX);
            let s = oracle_step(p, f, prev, &h, &c);
            for w in 0..vocab {
                if w == START_INDEX {
                    continue;
                }
                let mut seq2 = seq.clone();
                seq2.push(w);
                let lp2 = lp + s.word_dist[w].ln();
                if w == END_INDEX {
                    out.push((seq2, lp2, true));
                } else if step + 1 == max_len {
                    out.push((seq2, lp2, false));
                } else {
                    next.push((seq2, lp2, s.h.clone(), s.c.clone()));
                }
            }
        }
        frontier = next;
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    out
}

// ---------------------------------------------------------------------------
// CIDEr by direct counting

fn grams(sent: &[String], n: usize) -> Vec<Vec<String>> {
    if sent.len() < n {
        return Vec::new();
    }
    (0..=sent.len() - n).map(|i| sent[i..i + n].to_vec()).collect()
}

fn occurrences(sent: &[String], gram: &[String]) -> usize {
    grams(sent, gram.len()).iter().filter(|g| g.as_slice() == gram).count()
}

/// Weight vector of `sent` as a list over its distinct grams.
fn weights(sent: &[String], n: usize, corpus: &[Vec<Vec<String>>]) -> Vec<(Vec<String>, f64)> {
    let all = grams(sent, n);
    let mut distinct: Vec<Vec<String>> = Vec::new();
    for g in &all {
        if !distinct.contains(g) {
            distinct.push(g.clone());
        }
    }
    distinct
        .into_iter()
        .map(|g| {
            let tf = occurrences(sent, &g) as f64 / all.len() as f64;
            let df = corpus.iter().filter(|refs| refs.iter().any(|r| occurrences(r, &g) > 0)).count();
            let idf = (corpus.len() as f64 / df.max(1) as f64).ln();
            (g, tf * idf)
        })
        .collect()
}

fn cosine(a: &[(Vec<String>, f64)], b: &[(Vec<String>, f64)]) -> f64 {
    let dot: f64 = a
        .iter()
        .map(|(g, w)| b.iter().find(|(h, _)| h == g).map_or(0.0, |(_, v)| w * v))
        .sum();
    let na = a.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    let nb = b.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn brute_cider(candidate: &[String], refs: &[Vec<String>], corpus: &[Vec<Vec<String>>], max_n: usize) -> f64 {
    let mut total = 0.0;
    for n in 1..=max_n {
        let c = weights(candidate, n, corpus);
        let s: f64 = refs.iter().map(|r| cosine(&c, &weights(r, n, corpus))).sum();
        total += s / refs.len() as f64;
    }
    total / max_n as f64
}

pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// Corpus of at most 10 images with 1-3 references each, sentences of 1-8
/// tokens over a small alphabet so n-grams repeat.
pub fn random_corpus(r: &mut impl Rng) -> (Vec<Vec<String>>, Vec<Vec<Vec<String>>>) {
    let alphabet = ["a", "b", "c", "d", "e", "f"];
    let sentence = |r: &mut dyn rand::RngCore| -> Vec<String> {
        let len = r.gen_range(1..=8);
        (0..len).map(|_| alphabet[r.gen_range(0..alphabet.len())].to_string()).collect()
    };
    let n_images = r.gen_range(1..=10);
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for _ in 0..n_images {
        cands.push(sentence(r));
        let k = r.gen_range(1..=3);
        refs.push((0..k).map(|_| sentence(r)).collect());
    }
    (cands, refs)
}

// ---------------------------------------------------------------------------
// Adam, one scalar, spelled out

pub fn adam_trace(theta0: f64, grads: &[f64], lr: f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let mut theta = theta0;
    let (mut m, mut v) = (0.0, 0.0);
    let mut out = Vec::new();
    for (k, g) in grads.iter().enumerate() {
        let t = (k + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        theta -= lr * m_hat / (v_hat.sqrt() + eps);
        out.push(theta);
    }
    out
}
