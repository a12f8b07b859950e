//! Synthetic speech corpus: words are sequences of feature prototypes, and
//! each jargon word sounds almost exactly like one common word.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::FeatureSequence;
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::rng::{self, Rng};
use crate::text::{self, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_common: usize,
    pub n_jargon: usize,
    pub n_mels: usize,
    pub min_word_frames: usize,
    pub max_word_frames: usize,
    /// Scale of the perturbation separating a jargon prototype from its
    /// common counterpart.
    pub confusability: f64,
    /// When false, jargon prototypes are drawn independently.
    pub confusable_pairs: bool,
    pub noise_sigma: f64,
    pub min_words: usize,
    pub max_words: usize,
    pub jargon_fraction: f64,
    pub max_jargon_per_utt: usize,
    /// Common word `i` is drawn with weight `(i + 1)^-zipf_exponent`, so the
    /// words jargon imitates (the first `n_jargon`) are the frequent ones.
    pub zipf_exponent: f64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_common: 80,
            n_jargon: 40,
            n_mels: crate::audio::N_MELS,
            min_word_frames: 2,
            max_word_frames: 4,
            confusability: 0.002,
            confusable_pairs: true,
            noise_sigma: 0.5,
            min_words: 3,
            max_words: 6,
            jargon_fraction: 0.5,
            max_jargon_per_utt: 3,
            zipf_exponent: 0.5,
            n_train: 10_000,
            n_dev: 50,
            n_test: 100,
            vocab_size: 200,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Spec(m));
        if self.n_common == 0 || self.n_mels == 0 {
            return fail("n_common and n_mels must be at least 1".into());
        }
        if self.n_jargon > self.n_common {
            return fail(format!(
                "{} jargon words need as many common counterparts, only {} common",
                self.n_jargon, self.n_common
            ));
        }
        if self.min_word_frames == 0 || self.min_word_frames > self.max_word_frames {
            return fail(format!(
                "word frame range {}..={} is empty",
                self.min_word_frames, self.max_word_frames
            ));
        }
        if self.min_words == 0 || self.min_words > self.max_words || self.max_words > self.n_common {
            return fail(format!(
                "utterance word range {}..={} invalid for {} common words",
                self.min_words, self.max_words, self.n_common
            ));
        }
        if !(self.noise_sigma >= 0.0) || !(self.confusability >= 0.0) {
            return fail("noise_sigma and confusability must be non-negative".into());
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return fail(format!("zipf_exponent {} must be finite and non-negative", self.zipf_exponent));
        }
        if !(0.0..=1.0).contains(&self.jargon_fraction) {
            return fail(format!("jargon_fraction {} outside [0, 1]", self.jargon_fraction));
        }
        if self.jargon_fraction > 0.0 && (self.n_jargon == 0 || self.max_jargon_per_utt == 0) {
            return fail("jargon_fraction > 0 needs jargon words".into());
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub word: String,
    /// For jargon, the common word it is confusable with.
    pub counterpart: Option<String>,
    pub prototype: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub common: Vec<LexiconEntry>,
    pub jargon: Vec<LexiconEntry>,
}

impl Lexicon {
    pub fn entries(&self) -> impl Iterator<Item = &LexiconEntry> {
        self.common.iter().chain(&self.jargon)
    }

    pub fn is_jargon(&self, word: &str) -> bool {
        self.jargon.iter().any(|e| e.word == word)
    }

    pub fn get(&self, word: &str) -> Option<&LexiconEntry> {
        self.entries().find(|e| e.word == word)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub features: FeatureSequence,
    pub transcript: String,
    pub contains_jargon: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: String,
    pub spec_hash: String,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn transcripts(&self) -> Vec<String> {
        self.utterances.iter().map(|u| u.transcript.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: SynthSpec,
    pub lexicon: Lexicon,
    pub vocab: Vocab,
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const SYLLABLES: usize = 24;

/// Words are two or three syllables drawn from a small seeded inventory,
/// which keeps every word within a few sub-word units.
fn syllable_inventory(rng: &mut Rng) -> Vec<String> {
    let mut all: Vec<String> = CONSONANTS
        .iter()
        .flat_map(|c| VOWELS.iter().map(move |v| format!("{}{}", *c as char, *v as char)))
        .collect();
    all.shuffle(rng);
    all.truncate(SYLLABLES);
    all
}

fn random_word(syllables: &[String], rng: &mut Rng) -> String {
    let n = rng.gen_range(2..=3);
    (0..n).map(|_| syllables.choose(rng).expect("non-empty").as_str()).collect()
}

fn gaussian(shape: &[usize], scale: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

fn build_lexicon(spec: &SynthSpec) -> Lexicon {
    let mut rng = rng::stream(spec.seed, "synth/lexicon");
    let syllables = syllable_inventory(&mut rng);
    let mut seen = HashSet::new();
    let mut fresh = |rng: &mut Rng| loop {
        let w = random_word(&syllables, rng);
        if seen.insert(w.clone()) {
            break w;
        }
    };
    let mut common = Vec::with_capacity(spec.n_common);
    for _ in 0..spec.n_common {
        let word = fresh(&mut rng);
        let frames = rng.gen_range(spec.min_word_frames..=spec.max_word_frames);
        common.push(LexiconEntry {
            word,
            counterpart: None,
            prototype: gaussian(&[frames, spec.n_mels], 1.0, &mut rng),
        });
    }
    let mut jargon = Vec::with_capacity(spec.n_jargon);
    for j in 0..spec.n_jargon {
        let word = fresh(&mut rng);
        let base = &common[j];
        let prototype = if spec.confusable_pairs {
            let mut p = base.prototype.clone();
            let delta = gaussian(p.shape(), spec.confusability, &mut rng);
            for (a, b) in p.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
            p
        } else {
            let frames = rng.gen_range(spec.min_word_frames..=spec.max_word_frames);
            gaussian(&[frames, spec.n_mels], 1.0, &mut rng)
        };
        jargon.push(LexiconEntry {
            word,
            counterpart: Some(base.word.clone()),
            prototype,
        });
    }
    Lexicon { common, jargon }
}

fn render(words: &[&LexiconEntry], sigma: f64, rng: &mut Rng) -> Result<FeatureSequence> {
    let n_mels = words[0].prototype.cols();
    let mut data = Vec::new();
    for e in words {
        for &v in e.prototype.data() {
            data.push(v + sigma * rng.sample::<f64, _>(StandardNormal));
        }
    }
    let frames = data.len() / n_mels;
    FeatureSequence::new(Tensor::matrix(frames, n_mels, data)?)
}

fn sample_utterance(spec: &SynthSpec, lex: &Lexicon, rng: &mut Rng) -> Result<Utterance> {
    let n = rng.gen_range(spec.min_words..=spec.max_words);
    let mut chosen: Vec<&LexiconEntry> = lex
        .common
        .iter()
        .enumerate()
        .collect::<Vec<_>>()
        .choose_multiple_weighted(rng, n, |(i, _)| ((i + 1) as f64).powf(-spec.zipf_exponent))
        .map_err(|e| Error::Spec(format!("word sampling: {e}")))?
        .map(|(_, e)| *e)
        .collect();
    chosen.shuffle(rng);
    let contains_jargon = rng.gen_bool(spec.jargon_fraction);
    if contains_jargon {
        let k = rng.gen_range(1..=spec.max_jargon_per_utt.min(n));
        let slots: Vec<usize> = (0..n).collect::<Vec<_>>().choose_multiple(rng, k).copied().collect();
        let jargon: Vec<&LexiconEntry> = lex.jargon.choose_multiple(rng, k).collect();
        for (slot, j) in slots.into_iter().zip(jargon) {
            chosen[slot] = j;
        }
    }
    let transcript = chosen.iter().map(|e| e.word.as_str()).collect::<Vec<_>>().join(" ");
    Ok(Utterance {
        features: render(&chosen, spec.noise_sigma, rng)?,
        transcript,
        contains_jargon,
    })
}

/// Seeded train/dev/test corpus with pairwise distinct transcripts.
pub fn generate_corpus(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let lexicon = build_lexicon(spec);
    let mut seen = HashSet::new();
    let mut splits = Vec::with_capacity(3);
    for (name, count) in [("train", spec.n_train), ("dev", spec.n_dev), ("test", spec.n_test)] {
        let mut rng = rng::stream(spec.seed, &format!("synth/{name}"));
        let mut utterances = Vec::with_capacity(count);
        let mut attempts = 0usize;
        while utterances.len() < count {
            attempts += 1;
            if attempts > 100 * count + 1000 {
                return Err(Error::Spec(format!(
                    "could not draw {count} distinct {name} utterances; the word inventory is too small"
                )));
            }
            let u = sample_utterance(spec, &lexicon, &mut rng)?;
            if seen.insert(u.transcript.clone()) {
                utterances.push(u);
            }
        }
        splits.push(Dataset {
            split: name.to_string(),
            spec_hash: spec.hash(),
            utterances,
        });
    }
    let mut vocab_corpus: Vec<String> = lexicon.entries().map(|e| e.word.clone()).collect();
    vocab_corpus.extend(splits[0].transcripts());
    let vocab = text::build_vocab(&vocab_corpus, spec.vocab_size)?;
    let test = splits.pop().expect("three splits");
    let dev = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Corpus {
        spec: spec.clone(),
        lexicon,
        vocab,
        train,
        dev,
        test,
    })
}

const DATASET_MAGIC: &[u8; 8] = b"KPDSET01";

#[derive(Serialize, Deserialize)]
struct Manifest {
    split: String,
    spec_hash: String,
    count: usize,
    n_mels: usize,
    frames: Vec<usize>,
}

/// Binary container (magic, manifest JSON, per-utterance records) plus a
/// `.txt` sidecar with one transcript per line.
pub fn dataset_save(path: &Path, ds: &Dataset) -> Result<()> {
    let n_mels = ds.utterances.first().map_or(0, |u| u.features.n_mels());
    let manifest = Manifest {
        split: ds.split.clone(),
        spec_hash: ds.spec_hash.clone(),
        count: ds.len(),
        n_mels,
        frames: ds.utterances.iter().map(|u| u.features.n_frames()).collect(),
    };
    let header = serde_json::to_vec(&manifest)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for u in &ds.utterances {
        let t = u.transcript.as_bytes();
        buf.extend_from_slice(&(t.len() as u32).to_le_bytes());
        buf.extend_from_slice(t);
        buf.push(u.contains_jargon as u8);
        for v in u.features.frames().data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    let mut sidecar = ds.transcripts().join("\n");
    sidecar.push('\n');
    std::fs::write(sidecar_path(path), sidecar)?;
    Ok(())
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("txt")
}

struct Cursor<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| {
            Error::corrupt(self.path, format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn dataset_load(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut c = Cursor {
        path,
        buf: &bytes,
        pos: 0,
    };
    if c.take(8, "magic")? != DATASET_MAGIC {
        return Err(Error::corrupt(path, "not a dataset file"));
    }
    let hlen = c.u64("manifest length")? as usize;
    let manifest: Manifest = serde_json::from_slice(c.take(hlen, "manifest")?)
        .map_err(|e| Error::corrupt(path, format!("manifest: {e}")))?;
    if manifest.frames.len() != manifest.count {
        return Err(Error::corrupt(path, "manifest frame list disagrees with item count"));
    }
    let mut utterances = Vec::with_capacity(manifest.count);
    for (i, &frames) in manifest.frames.iter().enumerate() {
        let tlen = c.u32("transcript length")? as usize;
        let transcript = std::str::from_utf8(c.take(tlen, "transcript")?)
            .map_err(|_| Error::corrupt(path, format!("item {i}: transcript is not UTF-8")))?
            .to_string();
        let contains_jargon = match c.take(1, "jargon flag")?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::corrupt(path, format!("item {i}: bad jargon flag {b}"))),
        };
        let n = frames * manifest.n_mels;
        let raw = c.take(n * 8, "features")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        utterances.push(Utterance {
            features: FeatureSequence::new(Tensor::matrix(frames, manifest.n_mels, data)?)?,
            transcript,
            contains_jargon,
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::corrupt(
            path,
            format!("{} trailing bytes after {} items", bytes.len() - c.pos, manifest.count),
        ));
    }
    Ok(Dataset {
        split: manifest.split,
        spec_hash: manifest.spec_hash,
        utterances,
    })
}

impl Corpus {
    /// Writes `spec.json`, `lexicon.json`, `vocab.txt` and one dataset per
    /// split into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("spec.json"), serde_json::to_string_pretty(&self.spec)?)?;
        std::fs::write(dir.join("lexicon.json"), serde_json::to_vec(&self.lexicon)?)?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        for ds in [&self.train, &self.dev, &self.test] {
            dataset_save(&dir.join(format!("{}.kpd", ds.split)), ds)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec: SynthSpec = serde_json::from_str(&std::fs::read_to_string(dir.join("spec.json"))?)?;
        let lexicon: Lexicon = serde_json::from_slice(&std::fs::read(dir.join("lexicon.json"))?)?;
        let vocab = Vocab::load(&dir.join("vocab.txt"))?;
        let load = |s: &str| -> Result<Dataset> {
            let path = dir.join(format!("{s}.kpd"));
            let ds = dataset_load(&path)?;
            if ds.spec_hash != spec.hash() {
                return Err(Error::corrupt(&path, "dataset was generated from a different spec"));
            }
            Ok(ds)
        };
        Ok(Corpus {
            train: load("train")?,
            dev: load("dev")?,
            test: load("test")?,
            spec,
            lexicon,
            vocab,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            n_common: 30,
            n_jargon: 6,
            n_mels: 6,
            n_train: 40,
            n_dev: 5,
            n_test: 10,
            vocab_size: 120,
            seed: 3,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_and_disjoint() {
        let a = generate_corpus(&small()).unwrap();
        let b = generate_corpus(&small()).unwrap();
        assert_eq!(a, b);
        let mut seen = HashSet::new();
        for ds in [&a.train, &a.dev, &a.test] {
            for u in &ds.utterances {
                assert!(seen.insert(&u.transcript));
            }
        }
        let other = generate_corpus(&SynthSpec { seed: 4, ..small() }).unwrap();
        assert_ne!(a.train, other.train);
    }

    #[test]
    fn frames_match_word_prototypes() {
        let c = generate_corpus(&small()).unwrap();
        for u in &c.train.utterances {
            let expect: usize = text::words(&u.transcript)
                .iter()
                .map(|w| c.lexicon.get(w).unwrap().prototype.rows())
                .sum();
            assert_eq!(u.features.n_frames(), expect);
            let has = text::words(&u.transcript).iter().any(|w| c.lexicon.is_jargon(w));
            assert_eq!(has, u.contains_jargon);
        }
    }

    #[test]
    fn jargon_fraction_roughly_holds() {
        let c = generate_corpus(&SynthSpec {
            n_train: 400,
            ..small()
        })
        .unwrap();
        let frac = c.train.utterances.iter().filter(|u| u.contains_jargon).count() as f64 / 400.0;
        assert!((frac - 0.5).abs() < 0.1, "{frac}");
    }

    #[test]
    fn every_jargon_word_has_a_close_counterpart() {
        let c = generate_corpus(&small()).unwrap();
        for j in &c.lexicon.jargon {
            let base = c.lexicon.get(j.counterpart.as_deref().unwrap()).unwrap();
            assert_eq!(base.prototype.shape(), j.prototype.shape());
            let dist: f64 = base
                .prototype
                .data()
                .iter()
                .zip(j.prototype.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(dist < 0.2, "{dist}");
        }
    }

    /// Noiseless and unpaired: segment frames by exact prototype lookup.
    #[test]
    fn lookup_decoder_is_exact_without_noise() {
        let spec = SynthSpec {
            noise_sigma: 0.0,
            confusable_pairs: false,
            ..small()
        };
        let c = generate_corpus(&spec).unwrap();
        for u in c.test.utterances.iter().chain(&c.train.utterances) {
            let x = u.features.frames();
            let mut pos = 0;
            let mut hyp = Vec::new();
            while pos < x.rows() {
                let hit = c.lexicon.entries().find(|e| {
                    let p = &e.prototype;
                    pos + p.rows() <= x.rows() && (0..p.rows()).all(|r| x.row(pos + r) == p.row(r))
                });
                let e = hit.expect("every segment matches a prototype");
                hyp.push(e.word.clone());
                pos += e.prototype.rows();
            }
            assert_eq!(hyp.join(" "), u.transcript);
        }
    }

    #[test]
    fn vocab_covers_every_word() {
        let c = generate_corpus(&small()).unwrap();
        for e in c.lexicon.entries() {
            let t = c.vocab.tokenize(&e.word).unwrap();
            assert!((1..=4).contains(&t.len()), "{} -> {}", e.word, t.len());
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(generate_corpus(&SynthSpec { noise_sigma: -1.0, ..small() }).is_err());
        assert!(generate_corpus(&SynthSpec { n_jargon: 40, ..small() }).is_err());
        assert!(generate_corpus(&SynthSpec { min_words: 0, ..small() }).is_err());
        let tiny = SynthSpec {
            n_common: 3,
            n_jargon: 0,
            jargon_fraction: 0.0,
            min_words: 3,
            max_words: 3,
            ..small()
        };
        assert!(generate_corpus(&tiny).unwrap_err().to_string().contains("distinct"));
    }

    #[test]
    fn dataset_round_trip_and_corruption() {
        let c = generate_corpus(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.kpd");
        dataset_save(&path, &c.train).unwrap();
        let back = dataset_load(&path).unwrap();
        assert_eq!(back, c.train);
        let side = std::fs::read_to_string(path.with_extension("txt")).unwrap();
        assert_eq!(side.lines().count(), c.train.len());

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = dataset_load(&path).unwrap_err();
        assert_eq!(err.class(), "corrupt");
        assert!(err.to_string().contains("truncated"));

        let mut extra = bytes.clone();
        extra.push(0);
        std::fs::write(&path, &extra).unwrap();
        assert!(dataset_load(&path).unwrap_err().to_string().contains("trailing"));
        assert!(dataset_load(&dir.path().join("missing.kpd")).is_err());
    }

    #[test]
    fn corpus_directory_round_trip() {
        let c = generate_corpus(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.save(dir.path()).unwrap();
        assert_eq!(Corpus::load(dir.path()).unwrap(), c);
    }
}
