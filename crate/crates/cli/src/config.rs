//! Flat run configuration: a TOML file of `key = value` lines, overridden by
//! command-line flags, resolved completely before any pipeline call.

use std::fmt;
use std::path::Path;

use anyhow::{bail, Context, Result};
use keyprompt::eval::{Condition, EvalConfig};
use keyprompt::model::{ModelConfig, DEFAULT_KWS_THRESHOLD, DEFAULT_PREFIX_LEN};
use keyprompt::synth::SynthSpec;
use keyprompt::train::{Mode, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// Config problems carry their own error class for the exit line.
#[derive(Debug)]
pub struct ConfigError {
    pub class: &'static str,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for ConfigError {}

fn config_error(class: &'static str, message: String) -> anyhow::Error {
    ConfigError { class, message }.into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // synthetic corpus
    pub n_common: usize,
    pub n_jargon: usize,
    pub n_mels: usize,
    pub min_word_frames: usize,
    pub max_word_frames: usize,
    pub confusability: f64,
    pub confusable_pairs: bool,
    pub noise_sigma: f64,
    pub min_words: usize,
    pub max_words: usize,
    pub jargon_fraction: f64,
    pub max_jargon_per_utt: usize,
    pub zipf_exponent: f64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub vocab_size: usize,

    // model
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_src_frames: usize,
    pub max_tgt_len: usize,

    // training
    pub batch_size: usize,
    pub asr_steps: usize,
    pub asr_lr: f64,
    pub kws_steps: usize,
    pub kws_lr: f64,
    pub ft_steps: usize,
    pub ft_lr: f64,
    pub pt_steps: usize,
    pub pt_lr: f64,
    pub prefix_len: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub context_prob: f64,
    pub context_keep: f64,
    pub context_delim: f64,
    pub context_distractors: usize,
    pub lead_prob: f64,
    pub lead_max: usize,

    // evaluation
    pub split: String,
    pub n_positive: usize,
    pub n_negative: usize,
    pub kws_threshold: f64,
    pub max_len: usize,
    pub tokens_per_frame: f64,
    pub conditions: Vec<String>,
    pub ablation_lengths: Vec<usize>,
    pub attn_layer: usize,
    pub attn_limit: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SynthSpec::default();
        let m = ModelConfig::default();
        let t = TrainConfig::preset(Mode::BaseAsr);
        let e = EvalConfig::default();
        let preset = |mode| {
            let p = TrainConfig::preset(mode);
            (p.steps, p.learning_rate)
        };
        let (asr_steps, asr_lr) = preset(Mode::BaseAsr);
        let (kws_steps, kws_lr) = preset(Mode::Kws);
        let (ft_steps, ft_lr) = preset(Mode::Ft);
        let (pt_steps, pt_lr) = preset(Mode::Pt);
        RunConfig {
            seed: 0,
            n_common: s.n_common,
            n_jargon: s.n_jargon,
            n_mels: s.n_mels,
            min_word_frames: s.min_word_frames,
            max_word_frames: s.max_word_frames,
            confusability: s.confusability,
            confusable_pairs: s.confusable_pairs,
            noise_sigma: s.noise_sigma,
            min_words: s.min_words,
            max_words: s.max_words,
            jargon_fraction: s.jargon_fraction,
            max_jargon_per_utt: s.max_jargon_per_utt,
            zipf_exponent: s.zipf_exponent,
            n_train: s.n_train,
            n_dev: s.n_dev,
            n_test: s.n_test,
            vocab_size: s.vocab_size,
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_enc_layers: m.n_enc_layers,
            n_dec_layers: m.n_dec_layers,
            d_ff: m.d_ff,
            max_src_frames: m.max_src_frames,
            max_tgt_len: m.max_tgt_len,
            batch_size: t.batch_size,
            asr_steps,
            asr_lr,
            kws_steps,
            kws_lr,
            ft_steps,
            ft_lr,
            pt_steps,
            pt_lr,
            prefix_len: DEFAULT_PREFIX_LEN,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            context_prob: t.context_prob,
            context_keep: t.context_keep,
            context_delim: t.context_delim,
            context_distractors: t.context_distractors,
            lead_prob: t.lead_prob,
            lead_max: t.lead_max,
            split: "test".into(),
            n_positive: e.n_positive,
            n_negative: e.n_negative,
            kws_threshold: DEFAULT_KWS_THRESHOLD,
            max_len: e.max_len,
            tokens_per_frame: e.tokens_per_frame,
            conditions: Condition::ALL.iter().map(|c| c.name().to_string()).collect(),
            ablation_lengths: vec![4, 8, 12, 16, 20, 24],
            attn_layer: m.n_dec_layers - 1,
            attn_limit: 0,
        }
    }
}

impl RunConfig {
    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            n_common: self.n_common,
            n_jargon: self.n_jargon,
            n_mels: self.n_mels,
            min_word_frames: self.min_word_frames,
            max_word_frames: self.max_word_frames,
            confusability: self.confusability,
            confusable_pairs: self.confusable_pairs,
            noise_sigma: self.noise_sigma,
            min_words: self.min_words,
            max_words: self.max_words,
            jargon_fraction: self.jargon_fraction,
            max_jargon_per_utt: self.max_jargon_per_utt,
            zipf_exponent: self.zipf_exponent,
            n_train: self.n_train,
            n_dev: self.n_dev,
            n_test: self.n_test,
            vocab_size: self.vocab_size,
            seed: self.seed,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_enc_layers: self.n_enc_layers,
            n_dec_layers: self.n_dec_layers,
            d_ff: self.d_ff,
            vocab_size,
            max_src_frames: self.max_src_frames,
            max_tgt_len: self.max_tgt_len,
            n_mels: self.n_mels,
        }
    }

    pub fn train_config(&self, mode: Mode) -> TrainConfig {
        let (steps, learning_rate) = match mode {
            Mode::BaseAsr => (self.asr_steps, self.asr_lr),
            Mode::Kws => (self.kws_steps, self.kws_lr),
            Mode::Ft => (self.ft_steps, self.ft_lr),
            Mode::Pt => (self.pt_steps, self.pt_lr),
        };
        TrainConfig {
            mode,
            steps,
            batch_size: self.batch_size,
            learning_rate,
            seed: self.seed,
            prefix_len: self.prefix_len,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            context_prob: self.context_prob,
            context_keep: self.context_keep,
            context_delim: self.context_delim,
            context_distractors: self.context_distractors,
            lead_prob: self.lead_prob,
            lead_max: self.lead_max,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            seed: self.seed,
            n_positive: self.n_positive,
            n_negative: self.n_negative,
            kws_threshold: self.kws_threshold,
            max_len: self.max_len,
            tokens_per_frame: self.tokens_per_frame,
        }
    }

    pub fn conditions(&self) -> Result<Vec<Condition>> {
        let mut out = Vec::with_capacity(self.conditions.len());
        for name in &self.conditions {
            let c: Condition = name.parse().map_err(|_| {
                let known: Vec<&str> = Condition::ALL.iter().map(|c| c.name()).collect();
                config_error(
                    "config-value",
                    format!("unknown condition `{name}`{}", suggest(name, &known)),
                )
            })?;
            if !out.contains(&c) {
                out.push(c);
            }
        }
        if out.is_empty() {
            bail!(config_error("config-value", "no conditions to evaluate".into()));
        }
        Ok(out)
    }

    /// The resolved config as TOML, written next to every output.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn suggest(word: &str, known: &[&str]) -> String {
    known
        .iter()
        .map(|k| (strsim::levenshtein(word, k), *k))
        .filter(|(d, k)| *d <= 3.max(k.len() / 3))
        .min()
        .map(|(_, k)| format!(", did you mean `{k}`?"))
        .unwrap_or_default()
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// Coerces `v` to the type of `default`, allowing integers where floats are
/// expected; arrays are checked element by element.
fn coerce(key: &str, v: Value, default: &Value) -> Result<Value> {
    let mismatch = |v: &Value| {
        config_error(
            "config-type",
            format!("key `{key}`: expected {}, got {}", type_name(default), type_name(v)),
        )
    };
    match (default, v) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Value::Array(d), Value::Array(items)) => {
            let Some(proto) = d.first() else {
                return Ok(Value::Array(items));
            };
            items
                .into_iter()
                .map(|x| coerce(key, x, proto))
                .collect::<Result<Vec<_>>>()
                .map(Value::Array)
        }
        (d, v) if std::mem::discriminant(d) == std::mem::discriminant(&v) => Ok(v),
        (_, v) => Err(mismatch(&v)),
    }
}

/// Parses a flag value as a TOML scalar; bare words become strings, and for
/// list-valued keys a comma-separated string becomes an array.
fn parse_flag_value(raw: &str, default: &Value) -> Value {
    let parsed = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"));
    if let Value::Array(d) = default {
        if !matches!(parsed, Some(Value::Array(_))) {
            let proto = d.first().cloned().unwrap_or(Value::String(String::new()));
            let items = raw
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| parse_flag_value(s, &proto))
                .collect();
            return Value::Array(items);
        }
    }
    parsed.unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Merges the config file (if any) with `key=value` overrides, rejecting
/// unknown keys with the closest known key as a hint.
pub fn parse_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let defaults = Table::try_from(RunConfig::default()).expect("defaults serialize");
    let known: Vec<&str> = defaults.keys().map(String::as_str).collect();
    let unknown = |key: &str, origin: &str| {
        config_error(
            "config-unknown-key",
            format!("unknown key `{key}` in {origin}{}", suggest(key, &known)),
        )
    };

    let mut merged = defaults.clone();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let table: Table = toml::from_str(&text)
            .map_err(|e| config_error("config-syntax", format!("{}: {}", path.display(), e.message())))?;
        for (k, v) in table {
            let d = defaults.get(&k).ok_or_else(|| unknown(&k, &path.display().to_string()))?;
            merged.insert(k.clone(), coerce(&k, v, d)?);
        }
    }
    for (k, raw) in overrides {
        let d = defaults.get(k).ok_or_else(|| unknown(k, "flags"))?;
        let v = parse_flag_value(raw, d);
        merged.insert(k.clone(), coerce(k, v, d)?);
    }
    let cfg: RunConfig = Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| config_error("config-type", e.message().to_string()))?;
    Ok(cfg)
}
