//! Browser bindings for three small pieces of the library: log-mel features
//! of a pure tone, word error rate with its alignment, and keyword-prompt
//! sampling. Every export returns a JSON string; errors come back as
//! `{"error": "..."}`.

use keyprompt::audio::{self, MelFilterbank, Waveform};
use keyprompt::eval;
use keyprompt::promptgen;
use keyprompt::rng;
use keyprompt::text::{self, TokenId};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn json<T: Serialize>(r: keyprompt::Result<T>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| error_json(&e.to_string())),
        Err(e) => error_json(&e.to_string()),
    }
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

#[derive(Serialize)]
pub struct ToneFeatures {
    pub n_frames: usize,
    pub n_mels: usize,
    /// Row-major `n_frames × n_mels`, normalized log-mel values.
    pub frames: Vec<f64>,
    /// Mel bin with the largest mean energy.
    pub peak_bin: usize,
    pub peak_center_hz: f64,
    /// Bin whose filter center is closest to the tone.
    pub nearest_bin: usize,
}

pub fn tone_features(freq_hz: f64, seconds: f64) -> keyprompt::Result<ToneFeatures> {
    let sr = audio::SAMPLE_RATE;
    let n = (seconds.clamp(0.05, 5.0) * sr as f64) as usize;
    let w = Waveform {
        samples: (0..n)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq_hz * i as f64 / sr as f64).sin())
            .collect(),
        sample_rate_hz: sr,
    };
    let f = audio::log_mel(&w, audio::N_MELS, audio::WINDOW_MS, audio::HOP_MS)?;
    let (t, m) = (f.n_frames(), f.n_mels());
    let mean: Vec<f64> = (0..m).map(|b| (0..t).map(|r| f.frame(r)[b]).sum::<f64>() / t as f64).collect();
    let peak_bin = (0..m).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap_or(0);
    let fb = MelFilterbank::new(m, audio::N_FFT, sr);
    let nearest_bin = (0..m)
        .min_by(|&a, &b| (fb.center_hz(a) - freq_hz).abs().total_cmp(&(fb.center_hz(b) - freq_hz).abs()))
        .unwrap_or(0);
    Ok(ToneFeatures {
        n_frames: t,
        n_mels: m,
        frames: f.frames().data().to_vec(),
        peak_bin,
        peak_center_hz: fb.center_hz(peak_bin),
        nearest_bin,
    })
}

/// Log-mel features of a sine tone at `freq_hz` lasting `seconds`.
#[wasm_bindgen]
pub fn log_mel_tone(freq_hz: f64, seconds: f64) -> String {
    json(tone_features(freq_hz, seconds))
}

#[derive(Serialize)]
pub struct WerResult {
    pub wer: f64,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
    pub alignment: Vec<eval::EditOp>,
}

pub fn wer_result(reference: &str, hypothesis: &str) -> keyprompt::Result<WerResult> {
    let w = eval::compute_wer(reference, hypothesis)?;
    let alignment = eval::align_words(&text::words(reference), &text::words(hypothesis));
    Ok(WerResult {
        wer: w.wer(),
        substitutions: w.substitutions,
        deletions: w.deletions,
        insertions: w.insertions,
        ref_words: w.ref_words,
        alignment,
    })
}

/// Word error rate of `hypothesis` against `reference`, with one minimal
/// alignment.
#[wasm_bindgen]
pub fn wer_align(reference: &str, hypothesis: &str) -> String {
    json(wer_result(reference, hypothesis))
}

#[derive(Serialize)]
pub struct SampledKeyword {
    pub surface: String,
    pub positive: bool,
    pub tokens: Vec<String>,
}

#[derive(Serialize)]
pub struct PromptSample {
    pub keywords: Vec<SampledKeyword>,
    /// Unit strings of the assembled decoder prompt, special tokens included.
    pub prompt: Vec<String>,
}

pub fn prompt_sample(batch_text: &str, seed: u64, vocab_size: usize) -> keyprompt::Result<PromptSample> {
    let lines: Vec<String> = batch_text
        .lines()
        .map(text::normalize)
        .filter(|l| !l.is_empty())
        .collect();
    let vocab = text::build_vocab(&lines, vocab_size)?;
    let batch = lines
        .iter()
        .map(|l| vocab.tokenize(l))
        .collect::<keyprompt::Result<Vec<Vec<TokenId>>>>()?;
    let mut r = rng::stream(seed, "web/curriculum");
    let set = promptgen::sample_training_keywords(&batch, 0, &vocab, &mut r)?;
    let unit = |t: &TokenId| vocab.unit(*t).unwrap_or("?").to_string();
    let keywords = set
        .keywords()
        .iter()
        .map(|k| SampledKeyword {
            surface: k.surface.clone(),
            positive: k.is_positive(),
            tokens: k.tokens.iter().map(unit).collect(),
        })
        .collect();
    let prompt = promptgen::assemble_prompt(&set).ids().iter().map(unit).collect();
    Ok(PromptSample { keywords, prompt })
}

/// Training-time keyword curriculum for the first line of `batch_text`, with
/// the other lines as the source of negatives. The tokenizer is built from
/// the lines themselves.
#[wasm_bindgen]
pub fn sample_prompt(batch_text: &str, seed: u32, vocab_size: u32) -> String {
    json(prompt_sample(batch_text, u64::from(seed), vocab_size as usize))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tone_peaks_at_its_filter() {
        let f = tone_features(1000.0, 1.0).unwrap();
        assert_eq!(f.n_frames, 98);
        assert_eq!(f.frames.len(), 98 * f.n_mels);
        assert_eq!(f.peak_bin, f.nearest_bin);
    }

    #[test]
    fn wer_json_has_alignment() {
        let v: serde_json::Value = serde_json::from_str(&wer_align("a b c", "a x c d")).unwrap();
        assert_eq!(v["substitutions"], 1);
        assert_eq!(v["insertions"], 1);
        assert_eq!(v["alignment"].as_array().unwrap().len(), 4);
        assert!(serde_json::from_str::<serde_json::Value>(&wer_align("", "a")).unwrap()["error"].is_string());
    }

    #[test]
    fn prompt_is_framed_and_deterministic() {
        let batch = "the quick brown fox\njumps over the lazy dog\nsome other words here";
        let a = sample_prompt(batch, 3, 60);
        assert_eq!(a, sample_prompt(batch, 3, 60));
        let v: serde_json::Value = serde_json::from_str(&a).unwrap();
        let p = v["prompt"].as_array().unwrap();
        assert_eq!(p.first().unwrap(), "<|startofprev|>");
        assert_eq!(p.last().unwrap(), "<|startoftranscript|>");
        let n = v["keywords"].as_array().unwrap().len();
        assert!((1..=5).contains(&n));
        assert!(serde_json::from_str::<serde_json::Value>(&sample_prompt("one line", 1, 60)).unwrap()["error"].is_string());
    }
}
