//! Audio ingestion and the log-mel frontend.

use std::path::Path;

use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_MELS: usize = 80;
pub const WINDOW_MS: usize = 25;
pub const HOP_MS: usize = 10;
/// Zero-padded FFT length; finer than the 400-sample window so the filterbank
/// sees a smooth spectrum even where low-frequency filters are narrow.
pub const N_FFT: usize = 2048;
const LOG_FLOOR: f64 = 1e-10;
const DYNAMIC_RANGE: f64 = 8.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

/// `T × n_mels` log-mel frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    frames: Tensor,
}

impl FeatureSequence {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.shape().len() != 2 {
            return Err(Error::shape("feature frames", frames.shape(), &[]));
        }
        Ok(FeatureSequence { frames })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn n_mels(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }
}

fn hound_err(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        hound::Error::FormatError(msg) => Error::WavFormat {
            chunk: "RIFF",
            detail: msg.to_owned(),
        },
        hound::Error::Unsupported => Error::WavFormat {
            chunk: "fmt",
            detail: "unsupported encoding".into(),
        },
        other => Error::WavFormat {
            chunk: "data",
            detail: other.to_string(),
        },
    }
}

/// Read a 16-bit PCM WAV file, averaging channels to mono.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(hound_err)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::WavFormat {
            chunk: "fmt",
            detail: format!(
                "expected 16-bit PCM, found {:?} with {} bits",
                spec.sample_format, spec.bits_per_sample
            ),
        });
    }
    let channels = spec.channels.max(1) as usize;
    let raw: Vec<i16> = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<_, _>>()
        .map_err(hound_err)?;
    if raw.is_empty() {
        return Err(Error::WavFormat {
            chunk: "data",
            detail: "no samples".into(),
        });
    }
    let samples = raw
        .chunks(channels)
        .map(|frame| frame.iter().map(|&s| s as f64 / 32768.0).sum::<f64>() / frame.len() as f64)
        .collect();
    Ok(Waveform {
        samples,
        sample_rate_hz: spec.sample_rate,
    })
}

/// Linear-interpolation resampler.
pub fn resample(w: &Waveform, target_hz: u32) -> Waveform {
    if w.sample_rate_hz == target_hz || w.samples.is_empty() {
        return Waveform {
            samples: w.samples.clone(),
            sample_rate_hz: target_hz,
        };
    }
    let ratio = w.sample_rate_hz as f64 / target_hz as f64;
    let out_len = ((w.samples.len() as f64) * target_hz as f64 / w.sample_rate_hz as f64).round() as usize;
    let last = w.samples.len() - 1;
    let samples = (0..out_len)
        .map(|j| {
            let pos = j as f64 * ratio;
            let i = (pos.floor() as usize).min(last);
            let frac = pos - i as f64;
            let a = w.samples[i];
            let b = w.samples[(i + 1).min(last)];
            a + frac * (b - a)
        })
        .collect();
    Waveform {
        samples,
        sample_rate_hz: target_hz,
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-mel filters spanning 0 Hz to Nyquist.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    n_mels: usize,
    n_bins: usize,
    bin_hz: f64,
    edges_hz: Vec<f64>,
    weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32) -> Self {
        let n_bins = n_fft / 2 + 1;
        let nyquist = sample_rate as f64 / 2.0;
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let top = hz_to_mel(nyquist);
        let edges_hz: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (lo, c, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f > lo && f <= c {
                    (f - lo) / (c - lo)
                } else if f > c && f < hi {
                    (hi - f) / (hi - c)
                } else {
                    0.0
                };
                weights[m * n_bins + k] = w;
            }
        }
        MelFilterbank {
            n_mels,
            n_bins,
            bin_hz,
            edges_hz,
            weights,
        }
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn bin_hz(&self) -> f64 {
        self.bin_hz
    }

    pub fn center_hz(&self, m: usize) -> f64 {
        self.edges_hz[m + 1]
    }

    pub fn weight(&self, m: usize, bin: usize) -> f64 {
        self.weights[m * self.n_bins + bin]
    }

    fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            *o = crate::numcore::dot(&self.weights[m * self.n_bins..(m + 1) * self.n_bins], power);
        }
    }
}

fn hann(n: usize) -> Vec<f64> {
    // Periodic Hann, as used by common speech frontends.
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

pub fn frame_count(n_samples: usize, window: usize, hop: usize) -> usize {
    if n_samples < window {
        0
    } else {
        (n_samples - window) / hop + 1
    }
}

/// Raw `log10` mel energies, before the dynamic-range clamp.
pub fn log_mel_energies(w: &Waveform, n_mels: usize, window_ms: usize, hop_ms: usize) -> Result<Tensor> {
    if w.sample_rate_hz != SAMPLE_RATE {
        return Err(Error::Model(format!(
            "log-mel expects {SAMPLE_RATE} Hz audio, got {} Hz",
            w.sample_rate_hz
        )));
    }
    let window = SAMPLE_RATE as usize * window_ms / 1000;
    let hop = SAMPLE_RATE as usize * hop_ms / 1000;
    let n_frames = frame_count(w.samples.len(), window, hop);
    if n_frames == 0 {
        return Err(Error::TooShort {
            got: w.samples.len(),
            min: window,
        });
    }
    let n_fft = N_FFT.max(window.next_power_of_two());
    let bank = MelFilterbank::new(n_mels, n_fft, SAMPLE_RATE);
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let win = hann(window);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; bank.n_bins()];
    let mut out = vec![0.0; n_frames * n_mels];
    for t in 0..n_frames {
        let seg = &w.samples[t * hop..t * hop + window];
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < window {
                Complex::new(seg[i] * win[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        let row = &mut out[t * n_mels..(t + 1) * n_mels];
        bank.apply(&power, row);
        for v in row.iter_mut() {
            *v = v.max(LOG_FLOOR).log10();
        }
    }
    Tensor::matrix(n_frames, n_mels, out)
}

/// Log-mel features: `log10` energies clamped to the top 8 decades of the
/// utterance, then mapped by `(x + 4) / 4`.
pub fn log_mel(w: &Waveform, n_mels: usize, window_ms: usize, hop_ms: usize) -> Result<FeatureSequence> {
    let mut e = log_mel_energies(w, n_mels, window_ms, hop_ms)?;
    let max = e.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for v in e.data_mut() {
        *v = (v.max(max - DYNAMIC_RANGE) + 4.0) / 4.0;
    }
    FeatureSequence::new(e)
}

/// Convenience wrapper with the default 80-mel, 25 ms / 10 ms settings.
pub fn features_from_wav(path: &Path) -> Result<FeatureSequence> {
    let w = resample(&load_wav(path)?, SAMPLE_RATE);
    log_mel(&w, N_MELS, WINDOW_MS, HOP_MS)
}
