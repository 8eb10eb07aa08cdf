//! Whole checks built on the oracles, shared by the unit-level suites and the
//! acceptance gate. Each returns a measured quantity; callers decide.

use cxr_core::autodiff::{Elementwise, Graph, Var};
use cxr_core::beam::{beam_search, BeamConfig};
use cxr_core::cider::{corpus_cider, corpus_stats, DEFAULT_N};
use cxr_core::decoder::{generate_greedy, teacher_forced_graph, DecoderConfig, DecoderDims, DecoderParams, DecoderVars, FeatureVars};
use cxr_core::encoder::EncoderConfig;
use cxr_core::image::GrayImage;
use cxr_core::model::{Model, ModelConfig};
use cxr_core::params::Kind;
use cxr_core::text::TokenizedReport;
use cxr_core::Tensor;
use rand::Rng;

use super::{brute_cider, enumerate_sequences, grad_check, project, random_corpus, random_tensor, rel_err, rng, tiny_model, FD_STEP};

pub const GRAD_POINTS: u64 = 20;
pub const GRAD_TOL: f64 = 1e-4;

/// Worst value of `check` over `GRAD_POINTS` seeds.
pub fn worst_over_points(check: impl Fn(u64) -> f64) -> f64 {
    (0..GRAD_POINTS).map(check).fold(0.0, f64::max)
}

/// Values bounded away from zero so relu's kink is never straddled.
fn away_from_zero(seed: u64, shape: &[usize]) -> Tensor {
    let mut t = random_tensor(&mut rng(seed), shape, 2.0);
    t.data_mut().iter_mut().for_each(|x| {
        if x.abs() < 0.05 {
            *x += 0.1_f64.copysign(*x);
        }
    });
    t
}

pub fn matmul(s: u64) -> f64 {
    let mut r = rng(s);
    let a = random_tensor(&mut r, &[3, 4], 1.0);
    let b = random_tensor(&mut r, &[4, 2], 1.0);
    let x = random_tensor(&mut r, &[4], 1.0);
    let m = grad_check(&[a.clone(), b], |g, v| {
        let o = g.matmul(v[0], v[1]).unwrap();
        project(g, o, s)
    });
    let n = grad_check(&[a, x], |g, v| {
        let o = g.matmul(v[0], v[1]).unwrap();
        project(g, o, s + 100)
    });
    m.max(n)
}

pub fn sum_of_product(s: u64) -> f64 {
    let mut r = rng(s);
    let a = random_tensor(&mut r, &[3, 3], 1.0);
    let b = random_tensor(&mut r, &[3, 3], 1.0);
    grad_check(&[a, b], |g, v| {
        let p = g.mul(v[0], v[1]).unwrap();
        g.sum(p)
    })
}

pub fn conv2d(s: u64) -> f64 {
    let mut r = rng(s);
    let x = random_tensor(&mut r, &[2, 5, 5], 1.0);
    let k = random_tensor(&mut r, &[3, 2, 3, 3], 1.0);
    let (stride, pad) = [(1, 0), (1, 1), (2, 1)][(s % 3) as usize];
    grad_check(&[x, k], |g, v| {
        let o = g.conv2d(v[0], v[1], stride, pad).unwrap();
        project(g, o, s)
    })
}

pub fn binary_ops(s: u64) -> f64 {
    let mut r = rng(s);
    let a = random_tensor(&mut r, &[2, 3], 1.0);
    let b = random_tensor(&mut r, &[2, 3], 1.0);
    let k = random_tensor(&mut r, &[1], 1.0);
    let full = grad_check(&[a.clone(), b], |g, v| {
        let x = g.add(v[0], v[1]).unwrap();
        let y = g.sub(x, v[1]).unwrap();
        let y = g.sub(y, v[0]).unwrap();
        let z = g.mul(v[0], v[1]).unwrap();
        let w = g.add(y, z).unwrap();
        project(g, w, s)
    });
    let bc = grad_check(&[a, k], |g, v| {
        let x = g.mul(v[0], v[1]).unwrap();
        let y = g.add(v[1], x).unwrap();
        let z = g.sub(y, v[1]).unwrap();
        project(g, z, s)
    });
    full.max(bc)
}

pub fn pointwise(s: u64) -> f64 {
    let x = away_from_zero(s, &[7]);
    [Elementwise::Sigmoid, Elementwise::Tanh, Elementwise::Relu]
        .into_iter()
        .map(|kind| {
            grad_check(std::slice::from_ref(&x), |g, v| {
                let o = g.elementwise(kind, &[v[0]]).unwrap();
                let o = g.scale(o, -1.7);
                project(g, o, s)
            })
        })
        .fold(0.0, f64::max)
}

pub fn softmax(s: u64) -> f64 {
    let x = random_tensor(&mut rng(s), &[5], 3.0);
    grad_check(&[x], |g, v| {
        let o = g.softmax(v[0]).unwrap();
        project(g, o, s)
    })
}

pub fn reductions(s: u64) -> f64 {
    let mut r = rng(s);
    let a = random_tensor(&mut r, &[3, 4], 1.0);
    let b = random_tensor(&mut r, &[5], 1.0);
    grad_check(&[a, b], |g, v| {
        let flat = g.reshape(v[0], &[12]).unwrap();
        let cat = g.concat(&[flat, v[1]]).unwrap();
        let part = g.slice(cat, 3, 10).unwrap();
        let sq = g.mul(part, part).unwrap();
        let t1 = g.sum(sq);
        let col = g.column(v[0], 2).unwrap();
        let t2 = project(g, col, s);
        let rm = g.row_mean(v[0]).unwrap();
        let t3 = project(g, rm, s + 1);
        let m = g.mean(v[1]);
        let t = g.add(t1, t2).unwrap();
        let t = g.add(t, t3).unwrap();
        g.add(t, m).unwrap()
    })
}

pub fn avg_pool(s: u64) -> f64 {
    let x = random_tensor(&mut rng(s), &[2, 5, 4], 1.0);
    grad_check(&[x], |g, v| {
        let o = g.avg_pool2(v[0]).unwrap();
        project(g, o, s)
    })
}

pub fn channel_affine(s: u64) -> f64 {
    let mut r = rng(s);
    let x = random_tensor(&mut r, &[3, 2, 2], 1.0);
    let scale = random_tensor(&mut r, &[3], 1.0);
    let shift = random_tensor(&mut r, &[3], 1.0);
    let mean: Vec<f64> = (0..3).map(|_| r.gen_range(-0.5..0.5)).collect();
    let inv_std: Vec<f64> = (0..3).map(|_| r.gen_range(0.5..2.0)).collect();
    grad_check(&[x, scale, shift], |g, v| {
        let o = g.channel_affine(v[0], v[1], v[2], &mean, &inv_std).unwrap();
        project(g, o, s)
    })
}

pub fn losses(s: u64) -> f64 {
    let mut r = rng(s);
    let z = random_tensor(&mut r, &[6], 2.0);
    let idx = r.gen_range(0..6);
    let targets: Vec<f64> = (0..6).map(|_| r.gen_range(0..2) as f64).collect();
    let nll = grad_check(std::slice::from_ref(&z), |g, v| {
        let p = g.softmax(v[0]).unwrap();
        g.nll_pick(p, idx, 1e-12).unwrap()
    });
    let bce = grad_check(&[z], |g, v| g.bce_with_logits(v[0], &targets).unwrap());
    nll.max(bce)
}

pub fn composite(s: u64) -> f64 {
    let mut r = rng(s);
    let x = random_tensor(&mut r, &[2, 5, 5], 1.0);
    let k = random_tensor(&mut r, &[3, 2, 3, 3], 0.5);
    let w = random_tensor(&mut r, &[4, 3], 1.0);
    grad_check(&[x, k, w], |g, v| {
        let c = g.conv2d(v[0], v[1], 1, 1).unwrap();
        let c = g.tanh(c);
        let c = g.reshape(c, &[3, 25]).unwrap();
        let o = g.matmul(v[2], c).unwrap();
        project(g, o, s)
    })
}

/// Vocabulary 6, four attention positions, hidden size 3.
pub fn tiny_dims() -> DecoderDims {
    DecoderDims {
        vocab: 6,
        embed: 3,
        channels: 2,
        positions: 4,
        hidden: 3,
    }
}

/// Parameters in binding order, followed by V and V_gav.
fn rollout_inputs(seed: u64, gate_bias: bool) -> Vec<Tensor> {
    let d = tiny_dims();
    let mut r = rng(seed);
    let p = DecoderParams::random(d, gate_bias, &mut r);
    let mut inputs = vec![p.w_gates, p.embed, p.w_att_h, p.w_att_v, p.w_out_h, p.w_out_c];
    if gate_bias {
        inputs.push(random_tensor(&mut r, &[4 * d.hidden], 1.0));
    }
    inputs.push(random_tensor(&mut r, &[d.channels, d.positions], 1.0));
    inputs.push(random_tensor(&mut r, &[d.channels], 1.0));
    inputs
}

fn rollout_loss(g: &mut Graph, v: &[Var], gate_bias: bool, truth: &TokenizedReport) -> Var {
    let dv = DecoderVars {
        w_gates: v[0],
        b_gates: gate_bias.then(|| v[6]),
        embed: v[1],
        w_att_h: v[2],
        w_att_v: v[3],
        w_out_h: v[4],
        w_out_c: v[5],
        hidden: tiny_dims().hidden,
    };
    let n = v.len();
    let fv = FeatureVars::new(g, &dv, v[n - 2], v[n - 1]).unwrap();
    teacher_forced_graph(g, &dv, &fv, truth).unwrap().0
}

/// Teacher-forced rollout over every decoder tensor plus V and V_gav.
pub fn rollout(s: u64, gate_bias: bool) -> f64 {
    let body: &[usize] = if gate_bias { &[5, 3, 3] } else { &[3, 4, 5, 3] };
    let truth = TokenizedReport::from_body(body).unwrap();
    let seed = if gate_bias { s + 1000 } else { s };
    grad_check(&rollout_inputs(seed, gate_bias), |g, v| rollout_loss(g, v, gate_bias, &truth))
}

/// Image to loss on a tiny model, every stored tensor perturbed entry by entry.
pub fn end_to_end(seed: u64) -> f64 {
    let config = ModelConfig {
        encoder: EncoderConfig {
            n_blocks: 2,
            layers_per_block: 1,
            growth_rate: 2,
            input_size: 8,
            frozen_blocks: 0,
            stem_channels: 2,
        },
        decoder: DecoderConfig {
            hidden: 3,
            embed: 3,
            gate_bias: true,
        },
    };
    let truth = TokenizedReport::from_body(&[4, 3]).unwrap();
    let mut model = Model::new(config, 6, 0, seed).unwrap();
    let mut r = rng(seed + 50);
    // Zero shifts put relu inputs exactly on the kink wherever a pooled
    // activation is zero; move off it.
    for (_, p) in model.store.iter_mut() {
        if p.name.ends_with(".shift") {
            p.value.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.5..0.5));
        }
    }
    let pixels = (0..64).map(|_| r.gen_range(0..=255u8)).collect();
    let img = GrayImage::new(8, 8, pixels).unwrap();
    let analytic = model.caption_gradients(&img, &truth, 0).unwrap();
    let mut worst = 0.0f64;
    for (id, p) in model.store.iter() {
        let Some(grad) = &analytic.grads[id.0] else {
            assert_eq!(p.kind, Kind::Buffer, "{} has no gradient", p.name);
            continue;
        };
        for i in 0..p.value.numel() {
            let mut m = model.clone();
            m.store.get_mut(id).data_mut()[i] += FD_STEP;
            let up = m.caption_loss(&img, &truth).unwrap();
            m.store.get_mut(id).data_mut()[i] -= 2.0 * FD_STEP;
            let down = m.caption_loss(&img, &truth).unwrap();
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grad[i], numeric));
        }
    }
    worst
}

/// Worst error of every primitive and of the composed models, by name.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    let prims: [(&'static str, fn(u64) -> f64); 11] = [
        ("matmul", matmul),
        ("sum(a*b)", sum_of_product),
        ("conv2d", conv2d),
        ("add/sub/mul", binary_ops),
        ("sigmoid/tanh/relu/scale", pointwise),
        ("softmax", softmax),
        ("sum/mean/slice/concat/reshape/column/row_mean", reductions),
        ("avg_pool2", avg_pool),
        ("channel_affine", channel_affine),
        ("nll_pick/bce", losses),
        ("matmul∘tanh∘conv2d", composite),
    ];
    let mut out: Vec<(&'static str, f64)> = prims.iter().map(|(n, f)| (*n, worst_over_points(f))).collect();
    out.push(("rollout (strict gates)", worst_over_points(|s| rollout(s, false))));
    out.push(("rollout (gate biases)", worst_over_points(|s| rollout(s, true))));
    out.push(("encoder+decoder", (0..3).map(end_to_end).fold(0.0, f64::max)));
    out
}

/// Largest |module - brute force| over `n_corpora` random corpora.
pub fn cider_worst_error(seed: u64, n_corpora: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..n_corpora {
        let (cands, refs) = random_corpus(&mut r);
        let stats = corpus_stats(&refs, DEFAULT_N).unwrap();
        let scored = corpus_cider(&cands, &refs, &stats, DEFAULT_N).unwrap();
        for (i, (c, rs)) in cands.iter().zip(&refs).enumerate() {
            worst = worst.max((scored.per_image[i] - brute_cider(c, rs, &refs, DEFAULT_N)).abs());
        }
    }
    worst
}

pub fn decode_dims(vocab: usize, positions: usize) -> DecoderDims {
    DecoderDims {
        vocab,
        embed: 4,
        channels: 3,
        positions,
        hidden: 5,
    }
}

/// Seeds among `0..n_models` where a width-1 beam differs from greedy
/// decoding in report or attention.
pub fn greedy_mismatches(n_models: u64) -> Vec<u64> {
    (0..n_models)
        .filter(|&seed| {
            let (f, p) = tiny_model(seed, decode_dims(8, 4), true, 2.5);
            let (greedy, alphas) = generate_greedy(&f, &p, 12).unwrap();
            let beams = beam_search(&f, &p, &BeamConfig::new(1, 12, 1)).unwrap();
            beams.len() != 1 || beams[0].report() != greedy || beams[0].alphas != alphas
        })
        .collect()
}

/// Seeds among `0..n_models` (vocabulary 5, length 3) where a beam that
/// covers every prefix disagrees with exhaustive enumeration.
pub fn enumeration_mismatches(n_models: u64) -> Vec<u64> {
    (0..n_models)
        .filter(|&seed| {
            let (f, p) = tiny_model(seed + 500, decode_dims(5, 4), seed % 2 == 1, 3.0);
            let all = enumerate_sequences(&f, &p, 3);
            let beams = beam_search(&f, &p, &BeamConfig::new(125, 3, 3)).unwrap();
            // Completed sequences rank first; unfinished full-length ones only pad.
            let mut want: Vec<_> = all.iter().filter(|s| s.2).take(3).cloned().collect();
            want.extend(all.iter().filter(|s| !s.2).take(3 - want.len()).cloned());
            want.sort_by(|a, b| b.1.total_cmp(&a.1));
            beams.len() != want.len()
                || beams.iter().zip(&want).any(|(b, (seq, lp, fin))| {
                    b.indices[1..] != seq[..] || b.finished != *fin || (b.log_prob - lp).abs() >= 1e-9
                })
        })
        .collect()
}
