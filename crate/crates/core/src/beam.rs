//! Width-k beam search over decoder word distributions.
//!
//! Hypotheses are ranked by raw cumulative log-probability unless length
//! normalization is switched on. A hypothesis that emits `<end>` moves to the
//! completed pool and stops expanding. The search ends when the pool holds
//! `n_best` entries that all outscore every live hypothesis, when nothing is
//! left alive, or after `max_len` steps.

use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::decoder::{DecodeSession, DecoderParams, DecoderState};
use crate::encoder::FeatureMap;
use crate::error::{invalid, Result};
use crate::math;
use crate::tensor::Tensor;
use crate::text::{TokenizedReport, END_INDEX, START_INDEX};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig {
    pub beam_width: usize,
    /// Maximum number of decoder steps, `<end>` included.
    pub max_len: usize,
    pub n_best: usize,
    /// Rank by log-probability per emitted token instead of the raw sum.
    pub length_normalize: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_width: 3,
            max_len: 40,
            n_best: 3,
            length_normalize: false,
        }
    }
}

impl BeamConfig {
    pub fn new(beam_width: usize, max_len: usize, n_best: usize) -> Self {
        Self {
            beam_width,
            max_len,
            n_best,
            length_normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    /// Starts with `<start>`; ends with `<end>` exactly when finished.
    pub indices: Vec<usize>,
    pub log_prob: f64,
    pub state: DecoderState,
    pub alphas: Vec<Tensor>,
    pub finished: bool,
}

impl BeamHypothesis {
    fn score(&self, normalize: bool) -> f64 {
        let steps = self.indices.len() - 1;
        if normalize && steps > 0 {
            self.log_prob / steps as f64
        } else {
            self.log_prob
        }
    }

    /// The hypothesis as a well-formed report; an unfinished one is closed with `<end>`.
    pub fn report(&self) -> TokenizedReport {
        let body_end = if self.finished {
            self.indices.len() - 1
        } else {
            self.indices.len()
        };
        TokenizedReport::from_body(&self.indices[1..body_end]).expect("beam never emits <start>")
    }
}

struct Candidate {
    score: f64,
    log_prob: f64,
    word: usize,
    parent: usize,
}

fn by_score(a: f64, b: f64) -> Ordering {
    b.total_cmp(&a)
}

/// Returns up to `n_best` hypotheses, best first. Completed hypotheses are
/// preferred; unfinished ones alive at `max_len` fill any remaining slots.
pub fn beam_search(features: &FeatureMap, params: &DecoderParams, cfg: &BeamConfig) -> Result<Vec<BeamHypothesis>> {
    if cfg.beam_width == 0 || cfg.max_len == 0 {
        return Err(invalid("beam_width and max_len must be at least 1"));
    }
    if cfg.n_best == 0 || cfg.n_best > cfg.beam_width {
        return Err(invalid("n_best must be between 1 and beam_width"));
    }
    let mut session = DecodeSession::new(features, params)?;
    let vocab = session.dims().vocab;
    let norm = cfg.length_normalize;
    let mut live = alloc::vec![BeamHypothesis {
        indices: alloc::vec![START_INDEX],
        log_prob: 0.0,
        state: DecoderState::zeros(session.dims().hidden),
        alphas: Vec::new(),
        finished: false,
    }];
    let mut pool: Vec<BeamHypothesis> = Vec::new();

    for _ in 0..cfg.max_len {
        let mut outs = Vec::with_capacity(live.len());
        let mut cands = Vec::with_capacity(live.len() * vocab);
        for (rank, hyp) in live.iter().enumerate() {
            let last = *hyp.indices.last().expect("non-empty");
            let out = session.step(last, &hyp.state)?;
            let steps = hyp.indices.len() as f64;
            for (word, &p) in out.word_dist.data().iter().enumerate() {
                if word == START_INDEX {
                    continue;
                }
                let log_prob = hyp.log_prob + math::ln(p);
                let score = if norm { log_prob / steps } else { log_prob };
                cands.push(Candidate {
                    score,
                    log_prob,
                    word,
                    parent: rank,
                });
            }
            outs.push(out);
        }
        cands.sort_by(|a, b| {
            by_score(a.score, b.score)
                .then(a.word.cmp(&b.word))
                .then(a.parent.cmp(&b.parent))
        });
        let mut next = Vec::with_capacity(cfg.beam_width);
        for c in cands.into_iter().take(cfg.beam_width) {
            let parent = &live[c.parent];
            let out = &outs[c.parent];
            let mut indices = parent.indices.clone();
            indices.push(c.word);
            let mut alphas = parent.alphas.clone();
            alphas.push(out.alpha.clone());
            let hyp = BeamHypothesis {
                indices,
                log_prob: c.log_prob,
                state: out.state.clone(),
                alphas,
                finished: c.word == END_INDEX,
            };
            if hyp.finished {
                pool.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
        pool.sort_by(|a, b| by_score(a.score(norm), b.score(norm)));
        if live.is_empty() {
            break;
        }
        if !norm && pool.len() >= cfg.n_best {
            let best_live = live.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            if pool[cfg.n_best - 1].log_prob > best_live {
                break;
            }
        }
    }

    pool.truncate(cfg.n_best);
    if pool.len() < cfg.n_best {
        live.sort_by(|a, b| by_score(a.score(norm), b.score(norm)));
        let missing = cfg.n_best - pool.len();
        pool.extend(live.into_iter().take(missing));
        pool.sort_by(|a, b| by_score(a.score(norm), b.score(norm)));
    }
    Ok(pool)
}
