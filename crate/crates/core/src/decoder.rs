//! Attention-gated LSTM decoder.
//!
//! One step, given the previous word `y`, features `(V, V_gav)` and state `(h, c)`:
//!
//! ```text
//! [i f o g] = [σ σ σ tanh](W_gates · [E[:, y]; V_gav; h] + b)
//! c' = f ⊙ c + i ⊙ g
//! h' = o ⊙ tanh(c')
//! α  = softmax(W_att_h · h' + (W_att_v · V)ᵀ)
//! C  = V · α
//! p  = softmax(W_out_h · h' + W_out_c · C)
//! ```

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::encoder::FeatureMap;
use crate::error::{invalid, Error, Result};
use crate::math;
use crate::params::{uniform, Binding, Group, Kind, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::text::{TokenizedReport, END_INDEX, START_INDEX};

/// Probability floor inside the log of the sequence loss.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub embed: usize,
    /// Gate biases (forget gate starts at +1). Off reproduces the bias-free gate equation.
    pub gate_bias: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden: 512,
            embed: 256,
            gate_bias: true,
        }
    }
}

impl DecoderConfig {
    pub fn desk() -> Self {
        Self {
            hidden: 64,
            embed: 32,
            gate_bias: true,
        }
    }
}

/// Sizes every decoder tensor depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderDims {
    pub vocab: usize,
    pub embed: usize,
    pub channels: usize,
    pub positions: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    /// `[4h, embed + c + h]`, gate rows in the order i, f, o, g.
    pub w_gates: Tensor,
    pub b_gates: Option<Tensor>,
    /// `[embed, vocab]`
    pub embed: Tensor,
    /// `[p, h]`
    pub w_att_h: Tensor,
    /// `[1, c]`
    pub w_att_v: Tensor,
    /// `[vocab, h]`
    pub w_out_h: Tensor,
    /// `[vocab, c]`
    pub w_out_c: Tensor,
}

const NAMES: [&str; 7] = [
    "dec.w_gates",
    "dec.b_gates",
    "dec.embed",
    "dec.w_att_h",
    "dec.w_att_v",
    "dec.w_out_h",
    "dec.w_out_c",
];

impl DecoderParams {
    pub fn zeros(d: DecoderDims, gate_bias: bool) -> Self {
        Self {
            w_gates: Tensor::zeros(&[4 * d.hidden, d.embed + d.channels + d.hidden]),
            b_gates: gate_bias.then(|| Tensor::zeros(&[4 * d.hidden])),
            embed: Tensor::zeros(&[d.embed, d.vocab]),
            w_att_h: Tensor::zeros(&[d.positions, d.hidden]),
            w_att_v: Tensor::zeros(&[1, d.channels]),
            w_out_h: Tensor::zeros(&[d.vocab, d.hidden]),
            w_out_c: Tensor::zeros(&[d.vocab, d.channels]),
        }
    }

    /// Uniform fan-in initialization; gate biases zero except the forget gate at +1.
    pub fn random<R: Rng>(d: DecoderDims, gate_bias: bool, rng: &mut R) -> Self {
        let fan = |n: usize| math::sqrt(3.0 / n as f64);
        let x = d.embed + d.channels + d.hidden;
        let b_gates = gate_bias.then(|| {
            let mut b = Tensor::zeros(&[4 * d.hidden]);
            b.data_mut()[d.hidden..2 * d.hidden].iter_mut().for_each(|v| *v = 1.0);
            b
        });
        Self {
            w_gates: uniform(rng, &[4 * d.hidden, x], fan(x)),
            b_gates,
            embed: uniform(rng, &[d.embed, d.vocab], fan(d.embed)),
            w_att_h: uniform(rng, &[d.positions, d.hidden], fan(d.hidden)),
            w_att_v: uniform(rng, &[1, d.channels], fan(d.channels)),
            w_out_h: uniform(rng, &[d.vocab, d.hidden], fan(d.hidden)),
            w_out_c: uniform(rng, &[d.vocab, d.channels], fan(d.channels)),
        }
    }

    pub fn dims(&self) -> DecoderDims {
        DecoderDims {
            vocab: self.embed.shape()[1],
            embed: self.embed.shape()[0],
            channels: self.w_att_v.shape()[1],
            positions: self.w_att_h.shape()[0],
            hidden: self.w_att_h.shape()[1],
        }
    }

    fn tensors(&self) -> [Option<&Tensor>; 7] {
        [
            Some(&self.w_gates),
            self.b_gates.as_ref(),
            Some(&self.embed),
            Some(&self.w_att_h),
            Some(&self.w_att_v),
            Some(&self.w_out_h),
            Some(&self.w_out_c),
        ]
    }

    /// Places the tensors in `g`.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> DecoderVars {
        let [w, b, e, ah, av, oh, oc] = self.tensors().map(|t| t.map(|t| g.leaf(t.clone(), requires_grad)));
        DecoderVars {
            w_gates: w.expect("present"),
            b_gates: b,
            embed: e.expect("present"),
            w_att_h: ah.expect("present"),
            w_att_v: av.expect("present"),
            w_out_h: oh.expect("present"),
            w_out_c: oc.expect("present"),
            hidden: self.dims().hidden,
        }
    }

    /// Moves the tensors into `store` under the `dec.*` names.
    pub fn register(self, store: &mut ParamStore) -> DecoderLayout {
        let hidden = self.dims().hidden;
        let ids = self.tensors().map(|t| t.cloned()).into_iter().zip(NAMES).map(|(t, name)| {
            t.map(|t| store.add(name, t, Group::Decoder, Kind::Weight))
        });
        let ids: Vec<Option<ParamId>> = ids.collect();
        DecoderLayout {
            ids: [ids[0], ids[1], ids[2], ids[3], ids[4], ids[5], ids[6]],
            hidden,
        }
    }
}

/// Parameter ids of a decoder registered in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderLayout {
    ids: [Option<ParamId>; 7],
    hidden: usize,
}

impl DecoderLayout {
    pub fn locate(store: &ParamStore) -> Result<Self> {
        let ids = NAMES.map(|n| store.find(n));
        if ids.iter().enumerate().any(|(i, id)| i != 1 && id.is_none()) {
            return Err(invalid("checkpoint is missing decoder parameters"));
        }
        let hidden = store.get(ids[3].expect("checked")).shape()[1];
        Ok(Self { ids, hidden })
    }

    pub fn vars(&self, bind: &Binding) -> DecoderVars {
        let v = |i: usize| bind.var(self.ids[i].expect("required decoder tensor"));
        DecoderVars {
            w_gates: v(0),
            b_gates: self.ids[1].map(|id| bind.var(id)),
            embed: v(2),
            w_att_h: v(3),
            w_att_v: v(4),
            w_out_h: v(5),
            w_out_c: v(6),
            hidden: self.hidden,
        }
    }

    pub fn params(&self, store: &ParamStore) -> DecoderParams {
        let t = |i: usize| store.get(self.ids[i].expect("required decoder tensor")).clone();
        DecoderParams {
            w_gates: t(0),
            b_gates: self.ids[1].map(|id| store.get(id).clone()),
            embed: t(2),
            w_att_h: t(3),
            w_att_v: t(4),
            w_out_h: t(5),
            w_out_c: t(6),
        }
    }
}

/// Decoder tensors as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    pub w_gates: Var,
    pub b_gates: Option<Var>,
    pub embed: Var,
    pub w_att_h: Var,
    pub w_att_v: Var,
    pub w_out_h: Var,
    pub w_out_c: Var,
    pub hidden: usize,
}

/// Encoder output as graph nodes, plus the position term of the attention logits.
#[derive(Debug, Clone, Copy)]
pub struct FeatureVars {
    pub v: Var,
    pub v_gav: Var,
    att_v: Var,
}

impl FeatureVars {
    /// Computes `(W_att_v · V)ᵀ` once; it does not depend on the step.
    pub fn new(g: &mut Graph, dv: &DecoderVars, v: Var, v_gav: Var) -> Result<Self> {
        let row = g.matmul(dv.w_att_v, v)?;
        let p = g.value(v).shape()[1];
        let att_v = g.reshape(row, &[p])?;
        Ok(Self { v, v_gav, att_v })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StateVars {
    pub h: Var,
    pub c: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub state: StateVars,
    pub alpha: Var,
    pub word_dist: Var,
}

/// One decoder step inside a graph.
pub fn step_graph(g: &mut Graph, dv: &DecoderVars, fv: &FeatureVars, y_prev: usize, state: StateVars) -> Result<StepVars> {
    let h = dv.hidden;
    let emb = g.column(dv.embed, y_prev)?;
    let x = g.concat(&[emb, fv.v_gav, state.h])?;
    let mut pre = g.matmul(dv.w_gates, x)?;
    if let Some(b) = dv.b_gates {
        pre = g.add(pre, b)?;
    }
    let i = g.slice(pre, 0, h)?;
    let f = g.slice(pre, h, h)?;
    let o = g.slice(pre, 2 * h, h)?;
    let gg = g.slice(pre, 3 * h, h)?;
    let (i, f, o, gg) = (g.sigmoid(i), g.sigmoid(f), g.sigmoid(o), g.tanh(gg));
    let keep = g.mul(f, state.c)?;
    let write = g.mul(i, gg)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h_new = g.mul(o, tc)?;

    let att_h = g.matmul(dv.w_att_h, h_new)?;
    let att = g.add(att_h, fv.att_v)?;
    let alpha = g.softmax(att)?;
    let ctx = g.matmul(fv.v, alpha)?;

    let lh = g.matmul(dv.w_out_h, h_new)?;
    let lc = g.matmul(dv.w_out_c, ctx)?;
    let logits = g.add(lh, lc)?;
    let word_dist = g.softmax(logits)?;
    Ok(StepVars {
        state: StateVars { h: h_new, c },
        alpha,
        word_dist,
    })
}

/// Mean negative log-probability of the truth indices after `<start>`.
pub fn sequence_loss_graph(g: &mut Graph, word_dists: &[Var], truth: &TokenizedReport) -> Result<Var> {
    let targets = &truth.indices()[1..];
    if word_dists.len() != targets.len() {
        return Err(Error::LengthMismatch {
            what: "sequence loss distributions",
            expected: targets.len(),
            actual: word_dists.len(),
        });
    }
    let mut terms = Vec::with_capacity(targets.len());
    for (&d, &y) in word_dists.iter().zip(targets) {
        terms.push(g.nll_pick(d, y, LOG_FLOOR)?);
    }
    let all = g.concat(&terms)?;
    let total = g.sum(all);
    Ok(g.scale(total, 1.0 / targets.len() as f64))
}

/// Teacher-forced pass: feeds `truth[j-1]` and scores `truth[j]` for `j = 1..=l`.
/// Returns the loss node and one attention node per step.
pub fn teacher_forced_graph(
    g: &mut Graph,
    dv: &DecoderVars,
    fv: &FeatureVars,
    truth: &TokenizedReport,
) -> Result<(Var, Vec<Var>)> {
    let h = dv.hidden;
    let mut state = StateVars {
        h: g.constant(Tensor::zeros(&[h])),
        c: g.constant(Tensor::zeros(&[h])),
    };
    let idx = truth.indices();
    let mut dists = Vec::with_capacity(truth.len());
    let mut alphas = Vec::with_capacity(truth.len());
    for j in 1..idx.len() {
        let out = step_graph(g, dv, fv, idx[j - 1], state)?;
        state = out.state;
        dists.push(out.word_dist);
        alphas.push(out.alpha);
    }
    let loss = sequence_loss_graph(g, &dists, truth)?;
    Ok((loss, alphas))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub h: Tensor,
    pub c: Tensor,
}

impl DecoderState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: Tensor::zeros(&[hidden]),
            c: Tensor::zeros(&[hidden]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub state: DecoderState,
    pub alpha: Tensor,
    pub word_dist: Tensor,
}

fn check_features(features: &FeatureMap, d: DecoderDims) -> Result<()> {
    if features.channels() != d.channels || features.positions() != d.positions {
        return Err(Error::ShapeMismatch {
            op: "decoder features",
            left: features.v.shape().to_vec(),
            right: vec![d.channels, d.positions],
        });
    }
    Ok(())
}

/// Stand-alone single step on plain values.
pub fn decoder_step(y_prev: usize, features: &FeatureMap, state: &DecoderState, params: &DecoderParams) -> Result<StepOutput> {
    DecodeSession::new(features, params)?.step(y_prev, state)
}

/// Inference context: parameters and features are placed in a graph once and
/// every step is evaluated and then discarded from the tape.
pub struct DecodeSession {
    graph: Graph,
    dv: DecoderVars,
    fv: FeatureVars,
    base: usize,
    dims: DecoderDims,
}

impl DecodeSession {
    pub fn new(features: &FeatureMap, params: &DecoderParams) -> Result<Self> {
        let dims = params.dims();
        check_features(features, dims)?;
        let mut graph = Graph::new();
        let dv = params.bind(&mut graph, false);
        let v = graph.constant(features.v.clone());
        let v_gav = graph.constant(features.v_gav.clone());
        let fv = FeatureVars::new(&mut graph, &dv, v, v_gav)?;
        let base = graph.len();
        Ok(Self {
            graph,
            dv,
            fv,
            base,
            dims,
        })
    }

    pub fn dims(&self) -> DecoderDims {
        self.dims
    }

    pub fn step(&mut self, y_prev: usize, state: &DecoderState) -> Result<StepOutput> {
        if y_prev >= self.dims.vocab {
            return Err(Error::IndexOutOfRange {
                index: y_prev,
                len: self.dims.vocab,
            });
        }
        if state.h.numel() != self.dims.hidden || state.c.numel() != self.dims.hidden {
            return Err(Error::ShapeMismatch {
                op: "decoder state",
                left: state.h.shape().to_vec(),
                right: vec![self.dims.hidden],
            });
        }
        let g = &mut self.graph;
        let sv = StateVars {
            h: g.constant(state.h.clone()),
            c: g.constant(state.c.clone()),
        };
        let out = step_graph(g, &self.dv, &self.fv, y_prev, sv)?;
        let res = StepOutput {
            state: DecoderState {
                h: g.value(out.state.h).clone(),
                c: g.value(out.state.c).clone(),
            },
            alpha: g.value(out.alpha).clone(),
            word_dist: g.value(out.word_dist).clone(),
        };
        g.truncate(self.base);
        Ok(res)
    }
}

/// Index of the largest probability, skipping `<start>`; ties go to the lowest index.
pub fn argmax_word(dist: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in dist.iter().enumerate() {
        if i != START_INDEX && p > dist[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from `<start>` for at most `max_len` steps. A report cut
/// off by the cap gets a closing `<end>` appended.
pub fn generate_greedy(features: &FeatureMap, params: &DecoderParams, max_len: usize) -> Result<(TokenizedReport, Vec<Tensor>)> {
    if max_len == 0 {
        return Err(invalid("max_len must be at least 1"));
    }
    let mut session = DecodeSession::new(features, params)?;
    let mut state = DecoderState::zeros(session.dims().hidden);
    let mut prev = START_INDEX;
    let mut body = Vec::new();
    let mut alphas = Vec::new();
    for _ in 0..max_len {
        let out = session.step(prev, &state)?;
        let w = argmax_word(out.word_dist.data());
        alphas.push(out.alpha);
        state = out.state;
        if w == END_INDEX {
            break;
        }
        body.push(w);
        prev = w;
    }
    Ok((TokenizedReport::from_body(&body)?, alphas))
}

/// Value-level wrapper over [`sequence_loss_graph`].
pub fn sequence_loss(word_dists: &[Tensor], truth: &TokenizedReport) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = word_dists.iter().map(|d| g.constant(d.clone())).collect();
    let l = sequence_loss_graph(&mut g, &vars, truth)?;
    Ok(g.value(l).item().expect("scalar"))
}

/// Value-level teacher-forced loss and attention trace.
pub fn teacher_forced_rollout(features: &FeatureMap, truth: &TokenizedReport, params: &DecoderParams) -> Result<(f64, Vec<Tensor>)> {
    check_features(features, params.dims())?;
    let mut g = Graph::new();
    let dv = params.bind(&mut g, false);
    let v = g.constant(features.v.clone());
    let v_gav = g.constant(features.v_gav.clone());
    let fv = FeatureVars::new(&mut g, &dv, v, v_gav)?;
    let (loss, alphas) = teacher_forced_graph(&mut g, &dv, &fv, truth)?;
    Ok((
        g.value(loss).item().expect("scalar"),
        alphas.iter().map(|a| g.value(*a).clone()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> DecoderDims {
        DecoderDims {
            vocab: 6,
            embed: 3,
            channels: 2,
            positions: 4,
            hidden: 3,
        }
    }

    fn feats() -> FeatureMap {
        FeatureMap {
            v: Tensor::matrix(2, 4, alloc::vec![0.1, 0.5, -0.3, 0.9, 1.0, -1.0, 0.2, 0.0]).unwrap(),
            v_gav: Tensor::vector(alloc::vec![0.3, 0.05]),
            grid_side: 2,
        }
    }

    #[test]
    fn zero_params_are_uniform_and_stateless() {
        let p = DecoderParams::zeros(dims(), false);
        let out = decoder_step(START_INDEX, &feats(), &DecoderState::zeros(3), &p).unwrap();
        assert!(out.alpha.data().iter().all(|&a| a == 0.25));
        assert!(out.word_dist.data().iter().all(|&w| (w - 1.0 / 6.0).abs() < 1e-15));
        assert!(out.state.c.data().iter().all(|&v| v == 0.0));
        assert!(out.state.h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_word_rejected() {
        let p = DecoderParams::zeros(dims(), true);
        assert!(matches!(
            decoder_step(6, &feats(), &DecoderState::zeros(3), &p),
            Err(Error::IndexOutOfRange { index: 6, len: 6 })
        ));
    }

    #[test]
    fn loss_examples() {
        let truth = TokenizedReport::from_body(&[3]).unwrap();
        let perfect = [
            Tensor::vector(alloc::vec![0.0, 0.0, 0.0, 1.0]),
            Tensor::vector(alloc::vec![0.0, 0.0, 1.0, 0.0]),
        ];
        assert_eq!(sequence_loss(&perfect, &truth).unwrap(), 0.0);

        let e = 424;
        let uni = Tensor::full(&[e], 1.0 / e as f64);
        let l = sequence_loss(&[uni.clone(), uni], &truth).unwrap();
        assert!((l - math::ln(424.0)).abs() < 1e-12);
        assert!((l - 6.0497).abs() < 1e-4);

        let a = Tensor::vector(alloc::vec![0.0, 0.0, 0.5, 0.5]);
        let b = Tensor::vector(alloc::vec![0.0, 0.0, 0.25, 0.75]);
        let l = sequence_loss(&[a, b], &truth).unwrap();
        assert!((l - 1.5 * core::f64::consts::LN_2).abs() < 1e-12);

        assert!(matches!(
            sequence_loss(&[Tensor::full(&[4], 0.25)], &truth),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn minimal_sequence_is_one_step() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let p = DecoderParams::random(dims(), true, &mut rng);
        let truth = TokenizedReport::from_body(&[]).unwrap();
        let (loss, alphas) = teacher_forced_rollout(&feats(), &truth, &p).unwrap();
        assert_eq!(alphas.len(), 1);
        let out = decoder_step(START_INDEX, &feats(), &DecoderState::zeros(3), &p).unwrap();
        assert!((loss + math::ln(out.word_dist.data()[END_INDEX])).abs() < 1e-14);
    }

    #[test]
    fn greedy_stops_on_end() {
        let mut p = DecoderParams::zeros(dims(), false);
        // Large positive logit for <end> through the context term.
        p.w_out_c.data_mut()[END_INDEX * 2] = 100.0;
        p.w_out_c.data_mut()[END_INDEX * 2 + 1] = 100.0;
        let f = FeatureMap {
            v: Tensor::full(&[2, 4], 1.0),
            v_gav: Tensor::full(&[2], 1.0),
            grid_side: 2,
        };
        let (r, alphas) = generate_greedy(&f, &p, 5).unwrap();
        assert_eq!(r.indices(), &[START_INDEX, END_INDEX]);
        assert_eq!(alphas.len(), 1);
    }

    #[test]
    fn greedy_respects_cap() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(9);
        for _ in 0..20 {
            let p = DecoderParams::random(dims(), true, &mut rng);
            let (r, _) = generate_greedy(&feats(), &p, 4).unwrap();
            assert!(r.indices().len() <= 4 + 2);
        }
    }
}
