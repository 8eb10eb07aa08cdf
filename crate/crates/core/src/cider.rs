//! CIDEr: consensus between a candidate sentence and per-image references.
//!
//! For n-gram order `n`, each sentence becomes a TF-IDF vector
//! `g_k = tf_k * ln(|I| / df_k)` where `tf` is normalized by the sentence's
//! total n-gram count and `df` counts images whose references contain the
//! gram at least once. `CIDEr_n` is the mean cosine similarity between the
//! candidate and each reference, and `CIDEr` averages `CIDEr_n` over
//! `n = 1..N`. Unseen candidate grams take `df = 1`; zero-norm vectors score 0.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

pub const DEFAULT_N: usize = 4;

/// Document frequencies per n-gram order over a reference corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CiderStats {
    doc_freq: Vec<BTreeMap<String, usize>>,
    n_images: usize,
}

impl CiderStats {
    pub fn max_n(&self) -> usize {
        self.doc_freq.len()
    }

    pub fn n_images(&self) -> usize {
        self.n_images
    }

    pub fn doc_freq(&self, gram: &[String]) -> usize {
        let n = gram.len();
        if n == 0 || n > self.doc_freq.len() {
            return 0;
        }
        self.doc_freq[n - 1].get(&gram.join(" ")).copied().unwrap_or(0)
    }

    fn df_key(&self, n: usize, key: &str) -> usize {
        self.doc_freq[n - 1].get(key).copied().unwrap_or(0)
    }
}

/// Counts of each n-gram (space-joined) in `tokens`.
pub fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w.join(" ")).or_insert(0) += 1;
    }
    out
}

/// `references[i]` holds the reference sentences of image `i`.
pub fn corpus_stats(references: &[Vec<Vec<String>>], max_n: usize) -> Result<CiderStats> {
    if references.is_empty() {
        return Err(Error::Empty("reference corpus"));
    }
    let mut doc_freq = alloc::vec![BTreeMap::new(); max_n];
    for refs in references {
        for (n, df) in (1..=max_n).zip(doc_freq.iter_mut()) {
            let seen: BTreeSet<String> = refs.iter().flat_map(|r| ngram_counts(r, n).into_keys()).collect();
            for gram in seen {
                *df.entry(gram).or_insert(0) += 1;
            }
        }
    }
    Ok(CiderStats {
        doc_freq,
        n_images: references.len(),
    })
}

/// Sparse TF-IDF weights; zero weights are not stored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TfidfVector(pub BTreeMap<String, f64>);

impl TfidfVector {
    pub fn norm(&self) -> f64 {
        math::sqrt(self.0.values().map(|w| w * w).sum())
    }

    pub fn dot(&self, other: &Self) -> f64 {
        let (small, large) = if self.0.len() <= other.0.len() {
            (self, other)
        } else {
            (other, self)
        };
        small
            .0
            .iter()
            .filter_map(|(k, w)| large.0.get(k).map(|v| w * v))
            .sum()
    }

    pub fn get(&self, gram: &str) -> f64 {
        self.0.get(gram).copied().unwrap_or(0.0)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn tfidf(sentence: &[String], stats: &CiderStats, n: usize) -> TfidfVector {
    let counts = ngram_counts(sentence, n);
    if counts.is_empty() || n > stats.max_n() {
        return TfidfVector::default();
    }
    let total: usize = counts.values().sum();
    let images = stats.n_images as f64;
    let weights = counts
        .into_iter()
        .filter_map(|(gram, c)| {
            let df = stats.df_key(n, &gram).max(1);
            let w = c as f64 / total as f64 * math::ln(images / df as f64);
            (w > 0.0).then_some((gram, w))
        })
        .collect();
    TfidfVector(weights)
}

fn cosine(a: &TfidfVector, b: &TfidfVector) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(b) / (na * nb)
    }
}

pub fn cider_n(candidate: &[String], refs: &[Vec<String>], stats: &CiderStats, n: usize) -> f64 {
    if refs.is_empty() {
        return 0.0;
    }
    let c = tfidf(candidate, stats, n);
    refs.iter().map(|r| cosine(&c, &tfidf(r, stats, n))).sum::<f64>() / refs.len() as f64
}

pub fn cider(candidate: &[String], refs: &[Vec<String>], stats: &CiderStats, max_n: usize) -> f64 {
    if max_n == 0 {
        return 0.0;
    }
    (1..=max_n).map(|n| cider_n(candidate, refs, stats, n)).sum::<f64>() / max_n as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusScore {
    pub per_image: Vec<f64>,
    pub mean: f64,
}

pub fn corpus_cider(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    stats: &CiderStats,
    max_n: usize,
) -> Result<CorpusScore> {
    if candidates.len() != references.len() {
        return Err(Error::LengthMismatch {
            what: "candidates vs references",
            expected: references.len(),
            actual: candidates.len(),
        });
    }
    let per_image: Vec<f64> = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| cider(c, r, stats, max_n))
        .collect();
    let mean = if per_image.is_empty() {
        0.0
    } else {
        per_image.iter().sum::<f64>() / per_image.len() as f64
    };
    Ok(CorpusScore { per_image, mean })
}

/// Counts of scores in `bins` equal-width buckets over `[0, 1]`; 1.0 lands in the last bucket.
pub fn histogram(scores: &[f64], bins: usize) -> Vec<usize> {
    let mut out = alloc::vec![0; bins];
    if bins == 0 {
        return out;
    }
    for &s in scores {
        let b = (math::floor(s.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        out[b] += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn s(text: &str) -> Vec<String> {
        text.split_whitespace().map(|t| t.to_string()).collect()
    }

    #[test]
    fn document_frequency_clamp() {
        let refs = vec![vec![s("x x x x x")], vec![s("y x")]];
        let st = corpus_stats(&refs, 4).unwrap();
        assert_eq!(st.doc_freq(&s("x")), 2);
        assert_eq!(st.doc_freq(&s("y")), 1);
        assert_eq!(st.doc_freq(&s("x x")), 1);

        let disjoint = corpus_stats(&[vec![s("a b")], vec![s("c d")]], 2).unwrap();
        for g in ["a", "b", "c", "d", "a b", "c d"] {
            assert_eq!(disjoint.doc_freq(&s(g)), 1);
        }
    }

    #[test]
    fn tfidf_examples() {
        let st = corpus_stats(&[vec![s("a b z")], vec![s("z q")]], 2).unwrap();
        assert!(tfidf(&s("z"), &st, 1).is_empty());
        let v = tfidf(&s("a b"), &st, 1);
        let expect = 0.5 * core::f64::consts::LN_2;
        assert!((v.get("a") - expect).abs() < 1e-15);
        assert!((v.get("b") - expect).abs() < 1e-15);
        assert!(tfidf(&s("a"), &st, 2).is_empty());
    }

    #[test]
    fn cosine_examples() {
        let st = corpus_stats(&[vec![s("a c")], vec![s("b d")]], 4).unwrap();
        assert!((cider_n(&s("a b"), &[s("a c")], &st, 1) - 0.5).abs() < 1e-12);
        assert!((cider_n(&s("a c"), &[s("a c")], &st, 1) - 1.0).abs() < 1e-12);
        assert_eq!(cider_n(&s("b d"), &[s("a c")], &st, 1), 0.0);
    }

    #[test]
    fn full_score_examples() {
        let refs = vec![vec![s("p q r s t")], vec![s("u v w x y")]];
        let st = corpus_stats(&refs, 4).unwrap();
        assert!((cider(&s("p q r s t"), &refs[0], &st, 4) - 1.0).abs() < 1e-12);
        assert_eq!(cider(&s("u v w x y"), &refs[0], &st, 4), 0.0);
        let c = corpus_cider(&[s("p q r s t"), s("p q r s t")], &refs, &st, 4).unwrap();
        assert!((c.mean - 0.5).abs() < 1e-12);
        assert!(corpus_cider(&[s("p")], &refs, &st, 4).is_err());
    }

    #[test]
    fn histogram_edges() {
        assert_eq!(histogram(&[0.0, 0.05, 0.95, 1.0], 10), vec![2, 0, 0, 0, 0, 0, 0, 0, 0, 2]);
    }
}
