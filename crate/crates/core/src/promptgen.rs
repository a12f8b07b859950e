//! Keyword sets, prompt assembly and the keyword curricula used for training
//! and evaluation.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::model::KwsPrediction;
use crate::rng::Rng;
use crate::text::{self, TfidfTable, TokenId, Vocab, DELIM, SOP, SOT, WORD_START};

pub const MAX_KEYWORD_TOKENS: usize = 4;
pub const MAX_TRAIN_KEYWORDS: usize = 5;
pub const POSITIVE_PROB: f64 = 0.9;
const REDRAW_ATTEMPTS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Keyword {
    pub surface: String,
    pub tokens: Vec<TokenId>,
    pub polarity: Polarity,
}

impl Keyword {
    pub fn is_positive(&self) -> bool {
        self.polarity == Polarity::Positive
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeywordSource {
    Curriculum,
    TfidfEval,
    Oracle,
    External,
}

/// Ordered keywords with unique surface texts.
#[derive(Clone, Debug, PartialEq)]
pub struct KeywordSet {
    keywords: Vec<Keyword>,
    pub source: KeywordSource,
}

impl KeywordSet {
    pub fn new(source: KeywordSource) -> Self {
        KeywordSet {
            keywords: Vec::new(),
            source,
        }
    }

    /// Adds `kw` unless its surface is already present.
    pub fn push(&mut self, kw: Keyword) -> bool {
        if self.contains_surface(&kw.surface) {
            return false;
        }
        self.keywords.push(kw);
        true
    }

    pub fn contains_surface(&self, surface: &str) -> bool {
        self.keywords.iter().any(|k| k.surface == surface)
    }

    pub fn keywords(&self) -> &[Keyword] {
        &self.keywords
    }

    pub fn len(&self) -> usize {
        self.keywords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keywords.is_empty()
    }

    pub fn token_lists(&self) -> Vec<Vec<TokenId>> {
        self.keywords.iter().map(|k| k.tokens.clone()).collect()
    }

    pub fn positives(&self) -> KeywordSet {
        KeywordSet {
            keywords: self.keywords.iter().filter(|k| k.is_positive()).cloned().collect(),
            source: KeywordSource::Oracle,
        }
    }

    /// `polarity<TAB>surface` lines.
    pub fn to_audit_text(&self) -> String {
        let mut s = String::new();
        for k in &self.keywords {
            let _ = writeln!(s, "{}\t{}", k.polarity.as_str(), k.surface);
        }
        s
    }

    /// Keywords given as plain surfaces (for example from the command line).
    pub fn from_surfaces<S: AsRef<str>>(surfaces: &[S], vocab: &Vocab) -> Result<Self> {
        let mut set = KeywordSet::new(KeywordSource::External);
        for s in surfaces {
            let surface = text::normalize(s.as_ref());
            let tokens = vocab.tokenize(&surface)?;
            if tokens.is_empty() || tokens.len() > MAX_KEYWORD_TOKENS {
                return Err(Error::Keywords(format!(
                    "{surface:?} tokenizes to {} tokens, expected 1..={MAX_KEYWORD_TOKENS}",
                    tokens.len()
                )));
            }
            set.push(Keyword {
                surface,
                tokens,
                polarity: Polarity::Positive,
            });
        }
        Ok(set)
    }
}

/// `SOP k₁ | k₂ | … SOT`
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTokens {
    ids: Vec<TokenId>,
}

impl PromptTokens {
    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Free-running context text between SOP and SOT, without delimiters.
    pub fn from_context(tokens: &[TokenId]) -> Self {
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        ids.push(SOP);
        ids.extend_from_slice(tokens);
        ids.push(SOT);
        PromptTokens { ids }
    }

    /// Split the keyword section back into per-keyword token runs.
    pub fn keywords(&self) -> Vec<Vec<TokenId>> {
        let inner = &self.ids[1..self.ids.len() - 1];
        if inner.is_empty() {
            return Vec::new();
        }
        inner.split(|t| *t == DELIM).map(<[TokenId]>::to_vec).collect()
    }
}

pub fn assemble_prompt(k: &KeywordSet) -> PromptTokens {
    let mut ids = vec![SOP];
    for (i, kw) in k.keywords().iter().enumerate() {
        if i > 0 {
            ids.push(DELIM);
        }
        ids.extend_from_slice(&kw.tokens);
    }
    ids.push(SOT);
    PromptTokens { ids }
}

/// Prompt over exactly the keywords the spotter marked present, in order.
pub fn kws_to_prompt(pred: &KwsPrediction, k: &KeywordSet) -> Result<PromptTokens> {
    if pred.decisions.len() != k.len() {
        return Err(Error::Keywords(format!(
            "{} decisions for {} keywords",
            pred.decisions.len(),
            k.len()
        )));
    }
    let mut chosen = KeywordSet::new(k.source);
    for (kw, &on) in k.keywords().iter().zip(&pred.decisions) {
        if on {
            chosen.push(kw.clone());
        }
    }
    Ok(assemble_prompt(&chosen))
}

pub fn contains_span(hay: &[TokenId], needle: &[TokenId]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

fn random_span<'t>(tokens: &'t [TokenId], len: usize, rng: &mut Rng) -> &'t [TokenId] {
    let len = len.min(tokens.len());
    let start = rng.gen_range(0..=tokens.len() - len);
    &tokens[start..start + len]
}

/// Training-time stand-in for spotter output on `batch[index]`: 1–5
/// keywords, each positive with probability 0.9 and 1–4 tokens long.
/// Positives are spans of this transcript, negatives spans of another batch
/// member that do not occur here.
pub fn sample_training_keywords(
    batch: &[Vec<TokenId>],
    index: usize,
    vocab: &Vocab,
    rng: &mut Rng,
) -> Result<KeywordSet> {
    if batch.len() < 2 {
        return Err(Error::Keywords(format!(
            "curriculum needs a batch of at least 2, got {}",
            batch.len()
        )));
    }
    let own = &batch[index];
    let count = rng.gen_range(1..=MAX_TRAIN_KEYWORDS);
    let mut set = KeywordSet::new(KeywordSource::Curriculum);
    for _ in 0..count {
        let positive = rng.gen_bool(POSITIVE_PROB);
        let len = rng.gen_range(1..=MAX_KEYWORD_TOKENS);
        for _ in 0..REDRAW_ATTEMPTS {
            let span = if positive {
                if own.is_empty() {
                    break;
                }
                random_span(own, len, rng)
            } else {
                let mut other = rng.gen_range(0..batch.len() - 1);
                if other >= index {
                    other += 1;
                }
                if batch[other].is_empty() {
                    continue;
                }
                let span = random_span(&batch[other], len, rng);
                if contains_span(own, span) {
                    continue;
                }
                span
            };
            let kw = Keyword {
                surface: vocab.detokenize(span),
                tokens: span.to_vec(),
                polarity: if positive {
                    Polarity::Positive
                } else {
                    Polarity::Negative
                },
            };
            if set.push(kw) {
                break;
            }
        }
    }
    Ok(set)
}

/// Split a token sequence into words at word-start units.
pub fn split_words<'t>(tokens: &'t [TokenId], vocab: &Vocab) -> Vec<&'t [TokenId]> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, &t) in tokens.iter().enumerate() {
        let begins = vocab.unit(t).is_some_and(|u| u.starts_with(WORD_START));
        if begins && i > start {
            out.push(&tokens[start..i]);
            start = i;
        }
    }
    if start < tokens.len() {
        out.push(&tokens[start..]);
    }
    out
}

/// Context of the kind a recognizer sees from a previous segment: each word
/// of this transcript kept with probability `keep_prob`, plus up to
/// `max_distractors` words from other batch members, shuffled. With
/// `delimited` the words are separated by DELIM, as in a list.
pub fn sample_context_prompt(
    batch: &[Vec<TokenId>],
    index: usize,
    keep_prob: f64,
    max_distractors: usize,
    delimited: bool,
    vocab: &Vocab,
    rng: &mut Rng,
) -> PromptTokens {
    let mut picked: Vec<&[TokenId]> = split_words(&batch[index], vocab)
        .into_iter()
        .filter(|_| rng.gen_bool(keep_prob))
        .collect();
    if batch.len() > 1 {
        for _ in 0..rng.gen_range(0..=max_distractors) {
            let mut other = rng.gen_range(0..batch.len() - 1);
            if other >= index {
                other += 1;
            }
            if let Some(w) = split_words(&batch[other], vocab).choose(rng) {
                picked.push(w);
            }
        }
    }
    picked.shuffle(rng);
    let flat: Vec<TokenId> = if delimited {
        picked.join(&DELIM)
    } else {
        picked.concat()
    };
    PromptTokens::from_context(&flat)
}

/// Draw `k` distinct indices with probability proportional to `weights`;
/// once only zero weights remain the draw falls back to uniform.
pub fn draw_weighted(weights: &[f64], k: usize, rng: &mut Rng) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..weights.len()).collect();
    let mut out = Vec::with_capacity(k);
    while out.len() < k && !remaining.is_empty() {
        let total: f64 = remaining.iter().map(|&i| weights[i].max(0.0)).sum();
        let pos = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = remaining.len() - 1;
            for (j, &i) in remaining.iter().enumerate() {
                let w = weights[i].max(0.0);
                if w > 0.0 && r < w {
                    pick = j;
                    break;
                }
                r -= w;
            }
            // Guard against rounding landing on a trailing zero weight.
            while weights[remaining[pick]] <= 0.0 {
                pick -= 1;
            }
            pick
        } else {
            rng.gen_range(0..remaining.len())
        };
        out.push(remaining.remove(pos));
    }
    out
}

/// Evaluation query: `n_pos` transcript words and `n_neg` pool words absent
/// from the transcript, each drawn proportionally to TF-IDF, then shuffled.
pub fn select_eval_keywords<S: AsRef<str>>(
    transcript: &str,
    tfidf: &TfidfTable,
    pool: &[S],
    vocab: &Vocab,
    n_pos: usize,
    n_neg: usize,
    rng: &mut Rng,
) -> Result<KeywordSet> {
    let usable = |w: &str| -> Result<Option<Vec<TokenId>>> {
        let t = vocab.tokenize(w)?;
        Ok((!t.is_empty() && t.len() <= MAX_KEYWORD_TOKENS).then_some(t))
    };
    let present: BTreeSet<String> = text::words(transcript).into_iter().collect();
    let mut pos_cands = Vec::new();
    for w in &present {
        if let Some(t) = usable(w)? {
            pos_cands.push((w.clone(), t));
        }
    }
    if pos_cands.len() < n_pos {
        return Err(Error::Keywords(format!(
            "need {n_pos} positive candidates, transcript offers {} (short by {})",
            pos_cands.len(),
            n_pos - pos_cands.len()
        )));
    }
    let pool_words: BTreeSet<String> = pool.iter().flat_map(|s| text::words(s.as_ref())).collect();
    let mut neg_cands = Vec::new();
    for w in pool_words.difference(&present) {
        if let Some(t) = usable(w)? {
            neg_cands.push((w.clone(), t));
        }
    }
    if neg_cands.len() < n_neg {
        return Err(Error::Keywords(format!(
            "need {n_neg} negative candidates, pool offers {} (short by {})",
            neg_cands.len(),
            n_neg - neg_cands.len()
        )));
    }
    let score = |w: &str| tfidf.score(w).unwrap_or(0.0);
    let mut kws = Vec::with_capacity(n_pos + n_neg);
    for (cands, n, polarity) in [
        (&pos_cands, n_pos, Polarity::Positive),
        (&neg_cands, n_neg, Polarity::Negative),
    ] {
        let weights: Vec<f64> = cands.iter().map(|(w, _)| score(w)).collect();
        for i in draw_weighted(&weights, n, rng) {
            kws.push(Keyword {
                surface: cands[i].0.clone(),
                tokens: cands[i].1.clone(),
                polarity,
            });
        }
    }
    kws.shuffle(rng);
    let mut set = KeywordSet::new(KeywordSource::TfidfEval);
    let mut seen = HashSet::new();
    for k in kws {
        if seen.insert(k.surface.clone()) {
            set.push(k);
        }
    }
    Ok(set)
}
