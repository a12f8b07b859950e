//! Encoder-decoder recognizer, keyword spotting head and soft prompt prefix.

mod graph;
mod params;

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::audio::FeatureSequence;
use crate::error::{Error, Result};
use crate::numcore::{sigmoid, Tensor};
use crate::promptgen::{KeywordSet, PromptTokens};
use crate::rng::Rng;
use crate::text::{self, TokenId, Vocab, EOT, SOT};

pub use graph::{sinusoid, DecoderPass, Gradients, Graph};
pub use params::{FreezeMask, Group, ModelParams, ParamGroup, PREFIX_NAME};

pub const DEFAULT_PREFIX_LEN: usize = 12;
pub const DEFAULT_KWS_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_src_frames: usize,
    pub max_tgt_len: usize,
    pub n_mels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 256,
            vocab_size: 200,
            max_src_frames: 1500,
            max_tgt_len: 128,
            n_mels: crate::audio::N_MELS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_src_frames", self.max_src_frames),
            ("max_tgt_len", self.max_tgt_len),
            ("n_mels", self.n_mels),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Model(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Model(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= text::reserved_count() {
            return Err(Error::Model(format!("vocab_size {} leaves no learned tokens", self.vocab_size)));
        }
        Ok(())
    }
}

/// `T' × D` encoder states.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub states: Tensor,
}

impl EncoderOutput {
    pub fn n_frames(&self) -> usize {
        self.states.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KwsPrediction {
    pub probs: Vec<f64>,
    pub decisions: Vec<bool>,
}

impl KwsPrediction {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Head-averaged decoder self-attention from transcript positions (columns)
/// to prompt positions (rows).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    /// `rows × cols`, row-major.
    pub weights: Vec<f64>,
    /// Total attention mass of each column's query over every attended
    /// position, prompt or not.
    pub column_mass: Vec<f64>,
}

impl AttentionRecord {
    pub fn rows(&self) -> usize {
        self.row_labels.len()
    }

    pub fn cols(&self) -> usize {
        self.col_labels.len()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.weights[r * self.cols() + c]
    }

    /// Row of the largest weight in column `c`.
    pub fn argmax_row(&self, c: usize) -> Option<usize> {
        (0..self.rows()).max_by(|&a, &b| self.at(a, c).total_cmp(&self.at(b, c)))
    }

    /// Plain-text matrix: a `#` header, a tab-separated column label line,
    /// then one `label<TAB>w…` line per prompt row.
    pub fn to_text(&self) -> String {
        let mut s = format!("# decoder layer {} self-attention, head average\n", self.layer);
        s.push('\t');
        s.push_str(&self.col_labels.join("\t"));
        s.push('\n');
        for r in 0..self.rows() {
            s.push_str(&self.row_labels[r]);
            for c in 0..self.cols() {
                let _ = write!(s, "\t{:.6}", self.at(r, c));
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    /// Training modes applied so far, oldest first.
    pub lineage: Vec<String>,
}

fn context(prompt: Option<&PromptTokens>) -> Vec<TokenId> {
    match prompt {
        Some(p) if !p.is_empty() => p.ids().to_vec(),
        _ => vec![SOT],
    }
}

fn argmax_allowed(row: &[f64]) -> TokenId {
    let mut best = EOT as usize;
    for (i, &v) in row.iter().enumerate() {
        if text::is_reserved(i as TokenId) && i as TokenId != EOT {
            continue;
        }
        // Strict comparison keeps the lowest id on ties.
        if v > row[best] || (v == row[best] && i < best) {
            best = i;
        }
    }
    best as TokenId
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let params = ModelParams::init(&config, rng)?;
        Ok(Model {
            config,
            params,
            lineage: Vec::new(),
        })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams, lineage: Vec<String>) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        Ok(Model {
            config,
            params,
            lineage,
        })
    }

    pub fn graph(&self, mask: FreezeMask) -> Graph<'_> {
        Graph::new(&self.config, &self.params, mask)
    }

    pub fn encode(&self, x: &FeatureSequence) -> Result<EncoderOutput> {
        let mut g = self.graph(FreezeMask::frozen());
        let u = g.encode(x)?;
        Ok(EncoderOutput {
            states: g.tape.value(u).clone(),
        })
    }

    fn check_states(&self, u: &EncoderOutput) -> Result<()> {
        let s = u.states.shape();
        if s.len() != 2 || s[1] != self.config.d_model || s[0] == 0 {
            return Err(Error::Model(format!("encoder output shape {s:?}")));
        }
        Ok(())
    }

    /// Next-token distribution after `t_prev`.
    pub fn decode_next(
        &self,
        u: &EncoderOutput,
        prompt: Option<&PromptTokens>,
        use_prefix: bool,
        t_prev: &[TokenId],
    ) -> Result<Vec<f64>> {
        self.check_states(u)?;
        let mut g = self.graph(FreezeMask::frozen());
        let uv = g.tape.constant(u.states.clone());
        let cross = g.cross_kv(uv)?;
        let pass = g.decode(&cross, &context(prompt), t_prev, use_prefix)?;
        let last = g.tape.slice_rows(pass.logits, t_prev.len(), 1)?;
        let probs = g.tape.softmax(last);
        Ok(g.tape.value(probs).data().to_vec())
    }

    /// Greedy decoding; reserved tokens other than EOT are never emitted.
    /// Stops at EOT, at `max_len` tokens, or when the conditioning window is
    /// full.
    pub fn transcribe_greedy(
        &self,
        u: &EncoderOutput,
        prompt: Option<&PromptTokens>,
        use_prefix: bool,
        max_len: usize,
    ) -> Result<Vec<TokenId>> {
        self.check_states(u)?;
        let ctx = context(prompt);
        let prefix_len = if use_prefix {
            self.params.prefix().map_or(0, |q| q.rows())
        } else {
            0
        };
        let room = self.config.max_tgt_len.saturating_sub(prefix_len + ctx.len());
        let mut g = self.graph(FreezeMask::frozen());
        let uv = g.tape.constant(u.states.clone());
        let cross = g.cross_kv(uv)?;
        let mut out = Vec::new();
        loop {
            let pass = g.decode(&cross, &ctx, &out, use_prefix)?;
            let logits = g.tape.value(pass.logits);
            let next = argmax_allowed(logits.row(out.len()));
            if next == EOT {
                break;
            }
            out.push(next);
            if out.len() >= max_len || out.len() >= room {
                break;
            }
        }
        Ok(out)
    }

    pub fn kws_detect(&self, u: &EncoderOutput, k: &KeywordSet, threshold: f64) -> Result<KwsPrediction> {
        if k.is_empty() {
            return Ok(KwsPrediction {
                probs: Vec::new(),
                decisions: Vec::new(),
            });
        }
        self.check_states(u)?;
        let mut g = self.graph(FreezeMask::frozen());
        let uv = g.tape.constant(u.states.clone());
        let logits = g.kws_logits(uv, &k.token_lists())?;
        let probs: Vec<f64> = g.tape.value(logits).data().iter().map(|z| sigmoid(*z)).collect();
        let decisions = probs.iter().map(|p| *p >= threshold).collect();
        Ok(KwsPrediction { probs, decisions })
    }

    /// `N × D` prefix whose rows copy embeddings of uniformly drawn
    /// non-reserved tokens.
    pub fn init_prefix(&self, n_tokens: usize, rng: &mut Rng) -> Result<Tensor> {
        if n_tokens == 0 {
            return Err(Error::Model("prefix needs at least one token".into()));
        }
        let emb = self
            .params
            .decoder
            .get("tok_emb")
            .ok_or_else(|| Error::Model("missing token embeddings".into()))?;
        let d = self.config.d_model;
        let lo = text::reserved_count();
        let mut data = Vec::with_capacity(n_tokens * d);
        for _ in 0..n_tokens {
            let id = rng.gen_range(lo..self.config.vocab_size);
            data.extend_from_slice(emb.row(id));
        }
        Tensor::matrix(n_tokens, d, data)
    }

    /// Teacher-forced pass over `t` recording head-averaged self-attention
    /// at `layer` from each position that predicts `t[i]` to every prompt
    /// position.
    pub fn export_prompt_attention(
        &self,
        u: &EncoderOutput,
        prompt: &PromptTokens,
        use_prefix: bool,
        t: &[TokenId],
        layer: usize,
        vocab: &Vocab,
    ) -> Result<AttentionRecord> {
        if layer >= self.config.n_dec_layers {
            return Err(Error::Model(format!(
                "attention layer {layer} out of range, model has {}",
                self.config.n_dec_layers
            )));
        }
        self.check_states(u)?;
        let ctx = context(Some(prompt));
        let mut g = self.graph(FreezeMask::frozen());
        let uv = g.tape.constant(u.states.clone());
        let cross = g.cross_kv(uv)?;
        let pass = g.decode(&cross, &ctx, t, use_prefix)?;
        let heads: Vec<&Tensor> = pass.self_attn[layer].iter().map(|v| g.tape.value(*v)).collect();
        let width = heads[0].cols();
        let avg = |r: usize, c: usize| heads.iter().map(|h| h.at(r, c)).sum::<f64>() / heads.len() as f64;

        let n = pass.prefix_len;
        let rows = prompt.len();
        let cols = t.len();
        let mut weights = vec![0.0; rows * cols];
        let mut column_mass = Vec::with_capacity(cols);
        for i in 0..cols {
            let query = n + ctx.len() - 1 + i;
            for r in 0..rows {
                weights[r * cols + i] = avg(query, n + r);
            }
            column_mass.push((0..width).map(|c| avg(query, c)).sum());
        }
        let label = |id: &TokenId| vocab.unit(*id).unwrap_or("?").to_string();
        Ok(AttentionRecord {
            layer,
            row_labels: prompt.ids().iter().map(label).collect(),
            col_labels: t.iter().map(label).collect(),
            weights,
            column_mass,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::promptgen::{assemble_prompt, Keyword, KeywordSource, Polarity};
    use crate::rng::stream;
    use crate::text::{DELIM, SOP};

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 30,
            n_mels: 8,
            max_tgt_len: 40,
            ..ModelConfig::default()
        }
    }

    fn feats(t: usize, f: usize, seed: u64) -> FeatureSequence {
        let mut r = stream(seed, "feats");
        FeatureSequence::new(Tensor::from_fn(&[t, f], |_| r.gen_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig { n_heads: 3, ..small() };
        assert!(bad.validate().unwrap_err().to_string().contains("divisible"));
        let zero = ModelConfig { d_ff: 0, ..small() };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn encode_shapes_and_sensitivity() {
        let m = Model::new(small(), &mut stream(1, "m")).unwrap();
        let x = feats(10, 8, 2);
        let u = m.encode(&x).unwrap();
        assert_eq!(u.states.shape(), &[5, 16]);
        assert_eq!(m.encode(&feats(11, 8, 2)).unwrap().n_frames(), 6);

        let mut swapped = x.frames().clone();
        let (a, b) = (swapped.row(2).to_vec(), swapped.row(7).to_vec());
        swapped.data_mut()[16..24].copy_from_slice(&b);
        swapped.data_mut()[56..64].copy_from_slice(&a);
        let u2 = m.encode(&FeatureSequence::new(swapped).unwrap()).unwrap();
        assert_ne!(u, u2);

        let zeros = FeatureSequence::new(Tensor::zeros(&[10, 8])).unwrap();
        assert!(m.encode(&zeros).unwrap().states.is_finite());
        assert_eq!(m.encode(&x).unwrap(), u);
    }

    #[test]
    fn encode_rejects_bad_inputs() {
        let cfg = ModelConfig { max_src_frames: 12, ..small() };
        let m = Model::new(cfg, &mut stream(1, "m")).unwrap();
        assert!(m.encode(&feats(13, 8, 1)).is_err());
        assert!(m.encode(&feats(5, 7, 1)).is_err());
    }

    #[test]
    fn decode_distribution_and_degenerate_prompt() {
        let m = Model::new(small(), &mut stream(3, "m")).unwrap();
        let u = m.encode(&feats(8, 8, 4)).unwrap();
        let p = m.decode_next(&u, None, false, &[7, 9]).unwrap();
        assert_eq!(p.len(), 30);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let empty = assemble_prompt(&KeywordSet::new(KeywordSource::Oracle));
        let with_empty = m.decode_next(&u, Some(&empty), false, &[7, 9]).unwrap();
        assert_ne!(with_empty, p, "SOP SOT is a real (empty) prompt");
        let blank = PromptTokens::from_context(&[]);
        assert_eq!(blank.ids(), &[SOP, SOT]);
        // No prompt at all is the plain SOT-conditioned step.
        let mut g = m.graph(FreezeMask::frozen());
        let uv = g.tape.constant(u.states.clone());
        let cross = g.cross_kv(uv).unwrap();
        let pass = g.decode(&cross, &[SOT], &[7, 9], false).unwrap();
        let last = g.tape.slice_rows(pass.logits, 2, 1).unwrap();
        let sm = g.tape.softmax(last);
        assert_eq!(g.tape.value(sm).data(), p.as_slice());
    }

    #[test]
    fn decode_rejects_overlength() {
        let m = Model::new(small(), &mut stream(3, "m")).unwrap();
        let u = m.encode(&feats(8, 8, 4)).unwrap();
        let long = vec![7; 40];
        assert!(m.decode_next(&u, None, false, &long).is_err());
        assert!(m.decode_next(&u, None, false, &long[..39]).is_ok());
    }

    #[test]
    fn forced_eot_gives_empty_transcript() {
        let mut m = Model::new(small(), &mut stream(5, "m")).unwrap();
        let i = m.params.decoder.position("out.b").unwrap();
        m.params.decoder.tensor_mut(i).data_mut()[EOT as usize] = 1e6;
        let u = m.encode(&feats(6, 8, 1)).unwrap();
        assert!(m.transcribe_greedy(&u, None, false, 10).unwrap().is_empty());
    }

    #[test]
    fn greedy_respects_max_len_and_skips_reserved() {
        let mut m = Model::new(small(), &mut stream(5, "m")).unwrap();
        let i = m.params.decoder.position("out.b").unwrap();
        let b = m.params.decoder.tensor_mut(i).data_mut();
        b[EOT as usize] = -1e6;
        b[DELIM as usize] = 1e6;
        let u = m.encode(&feats(6, 8, 1)).unwrap();
        for max_len in [0usize, 1, 3, 7] {
            let out = m.transcribe_greedy(&u, None, false, max_len.max(1)).unwrap();
            assert!(out.len() <= max_len.max(1));
            assert!(out.iter().all(|t| !text::is_reserved(*t)));
        }
    }

    #[test]
    fn argmax_ties_take_lowest_id() {
        let mut row = vec![0.0; 10];
        row[6] = 2.0;
        row[8] = 2.0;
        assert_eq!(argmax_allowed(&row), 6);
        row[1] = 9.0;
        assert_eq!(argmax_allowed(&row), 6);
    }

    fn kwset(ids: &[&[TokenId]]) -> KeywordSet {
        let mut k = KeywordSet::new(KeywordSource::External);
        for (i, t) in ids.iter().enumerate() {
            k.push(Keyword {
                surface: format!("k{i}"),
                tokens: t.to_vec(),
                polarity: Polarity::Positive,
            });
        }
        k
    }

    #[test]
    fn kws_detect_cases() {
        let m = Model::new(small(), &mut stream(6, "m")).unwrap();
        let u = m.encode(&feats(8, 8, 2)).unwrap();
        let empty = m.kws_detect(&u, &KeywordSet::new(KeywordSource::External), 0.5).unwrap();
        assert!(empty.is_empty());
        let pred = m.kws_detect(&u, &kwset(&[&[5], &[6, 7, 8, 9], &[10, 11]]), 0.5).unwrap();
        assert_eq!(pred.len(), 3);
        for (p, d) in pred.probs.iter().zip(&pred.decisions) {
            assert!((0.0..=1.0).contains(p));
            assert_eq!(*d, *p >= 0.5);
        }
        assert!(m.kws_detect(&u, &kwset(&[&[5, 6, 7, 8, 9]]), 0.5).is_err());
    }

    #[test]
    fn prefix_init() {
        let cfg = ModelConfig { d_model: 64, ..small() };
        let m = Model::new(cfg, &mut stream(7, "m")).unwrap();
        let q = m.init_prefix(12, &mut stream(8, "q")).unwrap();
        assert_eq!(q.shape(), &[12, 64]);
        assert_eq!(q, m.init_prefix(12, &mut stream(8, "q")).unwrap());
        let emb = m.params.decoder.get("tok_emb").unwrap();
        for r in 0..12 {
            let hit = (text::reserved_count()..30).any(|id| emb.row(id) == q.row(r));
            assert!(hit, "row {r} is not a learned-token embedding");
        }
        assert!(m.init_prefix(0, &mut stream(8, "q")).is_err());
    }

    #[test]
    fn prefix_changes_decoding_and_is_required() {
        let mut m = Model::new(small(), &mut stream(9, "m")).unwrap();
        let u = m.encode(&feats(8, 8, 3)).unwrap();
        assert!(m.decode_next(&u, None, true, &[]).is_err());
        let q = m.init_prefix(4, &mut stream(1, "q")).unwrap();
        m.params.set_prefix(q);
        let a = m.decode_next(&u, None, true, &[6]).unwrap();
        let b = m.decode_next(&u, None, false, &[6]).unwrap();
        assert_ne!(a, b);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_export_shape_and_mass() {
        let mut m = Model::new(small(), &mut stream(10, "m")).unwrap();
        m.params.set_prefix(m.init_prefix(3, &mut stream(1, "q")).unwrap());
        let corpus = vec!["ab cd ef".to_string()];
        let vocab = crate::text::build_vocab(&corpus, 30).unwrap();
        let u = m.encode(&feats(8, 8, 3)).unwrap();
        let prompt = assemble_prompt(&kwset(&[&[5, 6], &[7]]));
        let t = [8, 9, 10, 11];
        let rec = m.export_prompt_attention(&u, &prompt, true, &t, 1, &vocab).unwrap();
        assert_eq!((rec.rows(), rec.cols()), (prompt.len(), t.len()));
        for c in 0..rec.cols() {
            assert!((rec.column_mass[c] - 1.0).abs() < 1e-5);
            let prompt_mass: f64 = (0..rec.rows()).map(|r| rec.at(r, c)).sum();
            assert!(prompt_mass <= 1.0 + 1e-12);
        }
        let txt = rec.to_text();
        assert_eq!(txt.lines().count(), 2 + prompt.len());
        assert!(m.export_prompt_attention(&u, &prompt, true, &t, 2, &vocab).is_err());
    }
}
