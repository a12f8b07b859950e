//! Text normalization, sub-word vocabulary, tokenization and TF-IDF.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Marks the start of a word inside sub-word units.
pub const WORD_START: char = '▁';

pub const PAD: TokenId = 0;
pub const SOP: TokenId = 1;
pub const SOT: TokenId = 2;
pub const EOT: TokenId = 3;
pub const DELIM: TokenId = 4;

const RESERVED: [&str; 5] = [
    "<|pad|>",
    "<|startofprev|>",
    "<|startoftranscript|>",
    "<|endoftext|>",
    "|",
];

pub fn reserved_count() -> usize {
    RESERVED.len()
}

pub fn is_reserved(id: TokenId) -> bool {
    (id as usize) < RESERVED.len()
}

/// Lowercase, drop punctuation, collapse whitespace.
///
/// Used for tokenization, WER and keyword matching alike.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
        } else if c.is_alphanumeric() {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.extend(c.to_lowercase());
        }
    }
    out
}

pub fn words(text: &str) -> Vec<String> {
    normalize(text).split(' ').filter(|w| !w.is_empty()).map(str::to_owned).collect()
}

/// Sub-word inventory with reserved ids `0..5` followed by learned units.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    units: Vec<String>,
    index: HashMap<String, TokenId>,
    max_unit_chars: usize,
}

impl Vocab {
    fn from_units(units: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(units.len());
        for (i, u) in units.iter().enumerate() {
            if index.insert(u.clone(), i as TokenId).is_some() {
                return Err(Error::Vocab(format!("duplicate unit {u:?}")));
            }
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if units.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Vocab(format!("reserved token {r:?} must have id {i}")));
            }
        }
        let max_unit_chars = units[RESERVED.len()..]
            .iter()
            .map(|u| u.chars().count())
            .max()
            .unwrap_or(1);
        Ok(Vocab {
            units,
            index,
            max_unit_chars,
        })
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn unit(&self, id: TokenId) -> Option<&str> {
        self.units.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, unit: &str) -> Option<TokenId> {
        self.index.get(unit).copied()
    }

    /// Ids of every learned (non-reserved) unit.
    pub fn learned_ids(&self) -> std::ops::Range<TokenId> {
        RESERVED.len() as TokenId..self.units.len() as TokenId
    }

    /// Greedy longest-match segmentation of the normalized text.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut ids = Vec::new();
        for word in normalize(text).split(' ').filter(|w| !w.is_empty()) {
            let chars: Vec<char> = std::iter::once(WORD_START).chain(word.chars()).collect();
            let mut i = 0;
            let mut buf = String::new();
            while i < chars.len() {
                let mut matched = None;
                for len in (1..=self.max_unit_chars.min(chars.len() - i)).rev() {
                    buf.clear();
                    buf.extend(&chars[i..i + len]);
                    if let Some(&id) = self.index.get(buf.as_str()) {
                        if !is_reserved(id) {
                            matched = Some((id, len));
                            break;
                        }
                    }
                }
                let (id, len) = matched.ok_or(Error::UnknownChar(chars[i]))?;
                ids.push(id);
                i += len;
            }
        }
        Ok(ids)
    }

    /// Inverse of [`Vocab::tokenize`]; reserved ids are skipped.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut s = String::new();
        for &id in ids {
            if is_reserved(id) {
                continue;
            }
            if let Some(u) = self.unit(id) {
                s.push_str(u);
            }
        }
        s.replace(WORD_START, " ").trim().to_owned()
    }

    /// `id<TAB>unit` lines, reserved tokens first.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, u) in self.units.iter().enumerate() {
            let _ = writeln!(s, "{i}\t{u}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut units = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let (id, unit) = line
                .split_once('\t')
                .ok_or_else(|| Error::Vocab(format!("line {}: expected id<TAB>unit", lineno + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Vocab(format!("line {}: bad id {id:?}", lineno + 1)))?;
            if id != units.len() {
                return Err(Error::Vocab(format!("line {}: ids must be contiguous", lineno + 1)));
            }
            units.push(unit.to_owned());
        }
        Self::from_units(units)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the serialized vocabulary, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

/// Frequency-merged unit inventory: every character of the corpus plus the
/// most frequent adjacent merges inside words, until `target_size` is reached
/// or nothing is left to merge. Ties go to the lexicographically smallest pair.
pub fn build_vocab(corpus: &[String], target_size: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::Vocab("empty corpus".into()));
    }
    let mut word_counts: BTreeMap<String, usize> = BTreeMap::new();
    for line in corpus {
        for w in words(line) {
            *word_counts.entry(w).or_default() += 1;
        }
    }
    let mut alphabet: BTreeSet<char> = word_counts.keys().flat_map(|w| w.chars()).collect();
    alphabet.insert(WORD_START);
    let floor = alphabet.len() + RESERVED.len();
    if target_size < floor {
        return Err(Error::Vocab(format!(
            "target size {target_size} is below alphabet ({}) + reserved ({})",
            alphabet.len(),
            RESERVED.len()
        )));
    }

    let mut units: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    units.extend(alphabet.iter().map(|c| c.to_string()));
    let mut known: HashSet<String> = units.iter().cloned().collect();

    let mut segmented: Vec<(Vec<String>, usize)> = word_counts
        .iter()
        .map(|(w, &n)| {
            let syms = std::iter::once(WORD_START).chain(w.chars()).map(String::from).collect();
            (syms, n)
        })
        .collect();

    while units.len() < target_size {
        let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (syms, n) in &segmented {
            for p in syms.windows(2) {
                *pairs.entry((p[0].as_str(), p[1].as_str())).or_default() += n;
            }
        }
        // BTreeMap iterates pairs in lexicographic order, so the first
        // maximum wins ties.
        let Some((best, _)) = pairs
            .iter()
            .fold(None::<(&(&str, &str), usize)>, |acc, (p, &n)| match acc {
                Some((_, m)) if m >= n => acc,
                _ => Some((p, n)),
            })
        else {
            break;
        };
        let (a, b) = (best.0.to_owned(), best.1.to_owned());
        let merged = format!("{a}{b}");
        for (syms, _) in &mut segmented {
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            *syms = out;
        }
        if known.insert(merged.clone()) {
            units.push(merged);
        }
    }
    Vocab::from_units(units)
}

/// Per-word TF-IDF over a collection of transcripts (one document each).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TfidfTable {
    scores: BTreeMap<String, f64>,
}

impl TfidfTable {
    pub fn score(&self, word: &str) -> Option<f64> {
        self.scores.get(word).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.scores.iter().map(|(w, s)| (w.as_str(), *s))
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// `score(w) = tf(w) · ln(N / df(w))` with raw corpus counts for `tf`.
pub fn tfidf_scores<S: AsRef<str>>(corpus: &[S]) -> TfidfTable {
    let n_docs = corpus.len() as f64;
    let mut tf: BTreeMap<String, usize> = BTreeMap::new();
    let mut df: BTreeMap<String, usize> = BTreeMap::new();
    for doc in corpus {
        let ws = words(doc.as_ref());
        let uniq: BTreeSet<&String> = ws.iter().collect();
        for w in &uniq {
            *df.entry((*w).clone()).or_default() += 1;
        }
        for w in &ws {
            *tf.entry(w.clone()).or_default() += 1;
        }
    }
    let scores = tf
        .into_iter()
        .map(|(w, count)| {
            let idf = (n_docs / df[&w] as f64).ln();
            (w, count as f64 * idf)
        })
        .collect();
    TfidfTable { scores }
}
