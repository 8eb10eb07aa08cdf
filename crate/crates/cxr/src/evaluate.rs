//! Split-level evaluation of a trained model and the standalone CIDEr scorer.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use cxr_core::beam::BeamConfig;
use cxr_core::cider::{cider, corpus_stats, histogram, CiderStats, DEFAULT_N};
use cxr_core::model::Model;
use cxr_core::synth::recover_findings;
use cxr_core::text::{segment, Vocabulary};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::training::{beam_reports, Sample};

pub const HISTOGRAM_BINS: usize = 10;
/// Optional presentation multiplier for CIDEr values.
pub const DISPLAY_SCALE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub id: String,
    pub reference: String,
    /// Beam hypotheses, best first.
    pub candidates: Vec<String>,
    pub scores: Vec<f64>,
    pub best: f64,
    pub findings_recovered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: Vec<ImageEval>,
    /// Mean over images of the best hypothesis score.
    pub mean_best: f64,
    pub mean_rank1: f64,
    pub histogram: Vec<usize>,
    /// Fraction of images whose generated best-ranked report names exactly the true findings.
    pub finding_accuracy: f64,
    pub baseline_report: String,
    pub baseline_mean: f64,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Most frequent report text; ties go to the lexicographically smallest.
pub fn majority_report<'a>(reports: impl IntoIterator<Item = &'a str>) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in reports {
        *counts.entry(r).or_default() += 1;
    }
    let top = counts.values().copied().max()?;
    counts.into_iter().find(|&(_, c)| c == top).map(|(r, _)| r.to_string())
}

/// True when the findings read back from `generated` equal `truth` as sets.
pub fn findings_match(generated: &str, truth: &[String]) -> bool {
    let got: BTreeSet<&str> = recover_findings(generated).iter().map(|f| f.label()).collect();
    let want: BTreeSet<&str> = truth.iter().map(String::as_str).collect();
    got == want
}

/// Decodes every sample, scores each beam hypothesis against its single
/// reference and keeps the best. Document frequencies come from the
/// references of `samples`; the baseline emits `baseline_report` everywhere.
pub fn evaluate(model: &Model, vocab: &Vocabulary, samples: &[Sample], beam: &BeamConfig, baseline_report: &str) -> Result<EvalReport> {
    if model.vocab_size() != vocab.len() {
        return Err(Error::Invalid(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            model.vocab_size()
        )));
    }
    let refs: Vec<Vec<Vec<String>>> = samples.iter().map(|s| vec![s.reference.clone()]).collect();
    let stats = if samples.is_empty() { None } else { Some(corpus_stats(&refs, DEFAULT_N)?) };
    let images = samples
        .par_iter()
        .zip(&refs)
        .map(|(s, r)| {
            let stats = stats.as_ref().expect("non-empty");
            let candidates = beam_reports(model, vocab, &s.image, beam)?;
            let scores: Vec<f64> = candidates.iter().map(|c| cider(&segment(c), r, stats, DEFAULT_N)).collect();
            let best = scores.iter().copied().fold(0.0, f64::max);
            let findings_recovered = candidates.first().is_some_and(|c| findings_match(c, &s.findings));
            Ok(ImageEval {
                id: s.id.clone(),
                reference: s.report.clone(),
                candidates,
                scores,
                best,
                findings_recovered,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let best: Vec<f64> = images.iter().map(|i| i.best).collect();
    let rank1: Vec<f64> = images.iter().map(|i| i.scores.first().copied().unwrap_or(0.0)).collect();
    let recovered = images.iter().filter(|i| i.findings_recovered).count();
    let baseline_tokens = segment(baseline_report);
    let baseline: Vec<f64> = match &stats {
        Some(st) => refs.iter().map(|r| cider(&baseline_tokens, r, st, DEFAULT_N)).collect(),
        None => Vec::new(),
    };
    Ok(EvalReport {
        mean_best: mean(&best),
        mean_rank1: mean(&rank1),
        histogram: histogram(&best, HISTOGRAM_BINS),
        finding_accuracy: if images.is_empty() { 0.0 } else { recovered as f64 / images.len() as f64 },
        baseline_report: baseline_report.to_string(),
        baseline_mean: mean(&baseline),
        images,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateLine {
    pub id: String,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLine {
    pub id: String,
    pub references: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredImage {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFile {
    pub per_image: Vec<ScoredImage>,
    pub mean: f64,
    /// 1 for raw scores, 10 when the display multiplier was applied.
    pub scale: f64,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|source| Error::Json {
                context: format!("{} line {}", path.display(), n + 1),
                source,
            })
        })
        .collect()
}

/// Scores candidates against references matched by id. Statistics come from
/// all reference lines; every candidate needs a reference line.
pub fn score_lines(candidates: &[CandidateLine], references: &[ReferenceLine], scaled: bool) -> Result<ScoreFile> {
    let by_id: BTreeMap<&str, &ReferenceLine> = references.iter().map(|r| (r.id.as_str(), r)).collect();
    if by_id.len() != references.len() {
        return Err(Error::Invalid("duplicate id in references".into()));
    }
    let corpus: Vec<Vec<Vec<String>>> = references.iter().map(|r| r.references.iter().map(|s| segment(s)).collect()).collect();
    if corpus.iter().any(Vec::is_empty) {
        return Err(Error::Invalid("every reference line needs at least one reference".into()));
    }
    let stats: CiderStats = corpus_stats(&corpus, DEFAULT_N)?;
    let scale = if scaled { DISPLAY_SCALE } else { 1.0 };
    let per_image = candidates
        .iter()
        .map(|c| {
            let r = by_id
                .get(c.id.as_str())
                .ok_or_else(|| Error::Invalid(format!("no reference for id {:?}", c.id)))?;
            let refs: Vec<Vec<String>> = r.references.iter().map(|s| segment(s)).collect();
            Ok(ScoredImage {
                id: c.id.clone(),
                score: scale * cider(&segment(&c.caption), &refs, &stats, DEFAULT_N),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = mean(&per_image.iter().map(|p| p.score).collect::<Vec<_>>());
    Ok(ScoreFile { per_image, mean, scale })
}

pub fn score_files(candidates: &Path, references: &Path, scaled: bool) -> Result<ScoreFile> {
    score_lines(&read_jsonl(candidates)?, &read_jsonl(references)?, scaled)
}
