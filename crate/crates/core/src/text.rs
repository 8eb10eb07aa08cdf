//! Tokenization, vocabulary construction, and index encoding of reports.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const NOU: &str = "<nou>";
pub const START: &str = "<start>";
pub const END: &str = "<end>";
pub const NOU_INDEX: usize = 0;
pub const START_INDEX: usize = 1;
pub const END_INDEX: usize = 2;
pub const DEFAULT_MIN_COUNT: usize = 3;

const WIDE_PUNCTUATION: &[char] = &['，', '。', '；', '：', '、', '！', '？', '（', '）', '“', '”'];

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || WIDE_PUNCTUATION.contains(&c)
}

/// Lowercases, splits on whitespace, and emits every punctuation character as its own token.
pub fn segment(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(core::mem::take(&mut cur));
            }
        } else if is_punct(ch) {
            if !cur.is_empty() {
                out.push(core::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.extend(ch.to_lowercase());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Bidirectional token/index map. Indices 0, 1, 2 are `<nou>`, `<start>`, `<end>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    index_to_token: Vec<String>,
    token_to_index: BTreeMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(Vec::new()).expect("specials only")
    }
}

impl Vocabulary {
    /// Builds from the full index-ordered token list (specials first), as stored on disk.
    pub fn from_index_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[NOU_INDEX] != NOU || tokens[START_INDEX] != START || tokens[END_INDEX] != END {
            return Err(crate::error::invalid("vocabulary must begin with <nou>, <start>, <end>"));
        }
        Self::from_tokens(tokens.into_iter().skip(3).collect())
    }

    fn from_tokens(words: Vec<String>) -> Result<Self> {
        let mut index_to_token = vec![NOU.to_string(), START.to_string(), END.to_string()];
        let mut token_to_index = BTreeMap::new();
        for (i, t) in index_to_token.iter().enumerate() {
            token_to_index.insert(t.clone(), i);
        }
        for w in words {
            if token_to_index.contains_key(&w) {
                return Err(crate::error::invalid(alloc::format!("duplicate vocabulary token `{w}`")));
            }
            token_to_index.insert(w.clone(), index_to_token.len());
            index_to_token.push(w);
        }
        Ok(Self {
            index_to_token,
            token_to_index,
        })
    }

    pub fn len(&self) -> usize {
        self.index_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.index_to_token
    }

    pub fn index(&self, token: &str) -> Option<usize> {
        self.token_to_index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.index_to_token.get(index).map(String::as_str)
    }
}

/// Tokens seen at least `min_count` times get indices in first-appearance order.
pub fn build_vocab(corpus: &[Vec<String>], min_count: usize) -> Vocabulary {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for sent in corpus {
        for tok in sent {
            let c = counts.entry(tok.as_str()).or_insert(0);
            if *c == 0 {
                order.push(tok.as_str());
            }
            *c += 1;
        }
    }
    let words = order
        .into_iter()
        .filter(|t| counts[t] >= min_count && ![NOU, START, END].contains(t))
        .map(|t| t.to_string())
        .collect();
    Vocabulary::from_tokens(words).expect("tokens are unique")
}

/// `<start>`, the body, `<end>`. The length `l` counts everything after `<start>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenizedReport {
    indices: Vec<usize>,
}

impl TokenizedReport {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        let n = indices.len();
        if n < 2 || indices[0] != START_INDEX || indices[n - 1] != END_INDEX {
            return Err(crate::error::invalid("report must be wrapped in <start> ... <end>"));
        }
        if indices[1..n - 1].iter().any(|&i| i == START_INDEX || i == END_INDEX) {
            return Err(crate::error::invalid("<start>/<end> inside report body"));
        }
        Ok(Self { indices })
    }

    /// Wraps a body that contains no boundary tokens.
    pub fn from_body(body: &[usize]) -> Result<Self> {
        let mut v = Vec::with_capacity(body.len() + 2);
        v.push(START_INDEX);
        v.extend_from_slice(body);
        v.push(END_INDEX);
        Self::new(v)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn body(&self) -> &[usize] {
        &self.indices[1..self.indices.len() - 1]
    }

    /// Number of predicted positions: body plus `<end>`.
    pub fn len(&self) -> usize {
        self.indices.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn encode(tokens: &[String], vocab: &Vocabulary) -> TokenizedReport {
    let body: Vec<usize> = tokens
        .iter()
        .map(|t| match vocab.index(t) {
            Some(i) if i != START_INDEX && i != END_INDEX => i,
            _ => NOU_INDEX,
        })
        .collect();
    TokenizedReport::from_body(&body).expect("body holds no boundary tokens")
}

/// Drops the three special tokens and joins the rest with single spaces.
pub fn decode(indices: &[usize], vocab: &Vocabulary) -> Result<String> {
    let mut words = Vec::new();
    for &i in indices {
        let tok = vocab.token(i).ok_or(Error::IndexOutOfRange {
            index: i,
            len: vocab.len(),
        })?;
        if i > END_INDEX {
            words.push(tok);
        }
    }
    Ok(words.join(" "))
}
