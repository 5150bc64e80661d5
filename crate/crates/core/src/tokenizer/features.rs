use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixing::Waveform;

/// Log-mel filterbank parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            window: 400,
            hop: 160,
            n_fft: 512,
            n_mels: 40,
            log_floor: 1e-6,
        }
    }
}

impl FeatureConfig {
    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    pub fn frame_count(&self, samples: usize) -> Option<usize> {
        (samples >= self.window).then(|| 1 + (samples - self.window) / self.hop)
    }
}

impl fmt::Display for FeatureConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "sample_rate={} window={} hop={} n_fft={} n_mels={} log_floor={}",
            self.sample_rate, self.window, self.hop, self.n_fft, self.n_mels, self.log_floor
        )
    }
}

impl FromStr for FeatureConfig {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let mut cfg = FeatureConfig::default();
        for kv in s.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| format!("expected key=value, got `{kv}`"))?;
            let int = |v: &str| v.parse::<usize>().map_err(|e| format!("{k}: {e}"));
            match k {
                "sample_rate" => cfg.sample_rate = v.parse().map_err(|e| format!("{k}: {e}"))?,
                "window" => cfg.window = int(v)?,
                "hop" => cfg.hop = int(v)?,
                "n_fft" => cfg.n_fft = int(v)?,
                "n_mels" => cfg.n_mels = int(v)?,
                "log_floor" => cfg.log_floor = v.parse().map_err(|e| format!("{k}: {e}"))?,
                other => return Err(format!("unknown feature key `{other}`")),
            }
        }
        Ok(cfg)
    }
}

/// Frame-level features of one signal.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    /// T×F, one row per frame.
    pub frames: Array2<f64>,
    pub frame_rate: f64,
    pub source_id: String,
}

impl FeatureMatrix {
    pub fn new(frames: Array2<f64>, frame_rate: f64, source_id: impl Into<String>) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(Error::Precondition("feature matrix has no frames".into()));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("non-finite feature value".into()));
        }
        Ok(Self {
            frames,
            frame_rate,
            source_id: source_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Reusable log-mel extractor: window, filterbank and FFT plan are built once.
pub struct FeatureExtractor {
    config: FeatureConfig,
    window: Vec<f64>,
    /// n_mels × (n_fft/2 + 1)
    filters: Array2<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl FeatureExtractor {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        if config.window == 0 || config.hop == 0 || config.n_mels == 0 {
            return Err(Error::Precondition("window, hop and n_mels must be positive".into()));
        }
        if config.n_fft < config.window {
            return Err(Error::Precondition("n_fft shorter than the analysis window".into()));
        }
        let n = config.window;
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let bins = config.n_fft / 2 + 1;
        let nyquist = config.sample_rate as f64 / 2.0;
        let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(nyquist));
        let edges: Vec<f64> = (0..config.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (config.n_mels + 1) as f64))
            .collect();
        let mut filters = Array2::zeros((config.n_mels, bins));
        for m in 0..config.n_mels {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            for b in 0..bins {
                let f = b as f64 * config.sample_rate as f64 / config.n_fft as f64;
                let w = ((f - l) / (c - l)).min((r - f) / (r - c));
                if w > 0.0 {
                    filters[[m, b]] = w;
                }
            }
        }
        let fft = FftPlanner::new().plan_fft_forward(config.n_fft);
        Ok(Self {
            config,
            window,
            filters,
            fft,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    /// Log-mel frames: natural log of (filterbank energy + floor).
    pub fn extract(&self, w: &Waveform, source_id: &str) -> Result<FeatureMatrix> {
        let cfg = &self.config;
        if w.sample_rate() != cfg.sample_rate {
            return Err(Error::Incompatible(format!(
                "waveform at {} Hz, feature pipeline expects {} Hz",
                w.sample_rate(),
                cfg.sample_rate
            )));
        }
        let t = cfg.frame_count(w.len()).ok_or_else(|| {
            Error::DegenerateAudio(format!(
                "{} samples is shorter than one {}-sample window",
                w.len(),
                cfg.window
            ))
        })?;
        let bins = cfg.n_fft / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut power = vec![0.0; bins];
        let mut frames = Array2::zeros((t, cfg.n_mels));
        let samples = w.samples();
        for f in 0..t {
            let start = f * cfg.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < cfg.window {
                    Complex::new(samples[start + i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf[..bins]) {
                *p = c.norm_sqr();
            }
            for m in 0..cfg.n_mels {
                let e: f64 = self.filters.row(m).iter().zip(&power).map(|(w, p)| w * p).sum();
                frames[[f, m]] = (e + cfg.log_floor).ln();
            }
        }
        FeatureMatrix::new(frames, cfg.frame_rate(), source_id)
    }
}

pub fn extract_features(w: &Waveform, config: &FeatureConfig) -> Result<FeatureMatrix> {
    FeatureExtractor::new(config.clone())?.extract(w, "")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_second_gives_98_frames() {
        let w = Waveform::new(vec![0.01; 16000], 16000).unwrap();
        let f = extract_features(&w, &FeatureConfig::default()).unwrap();
        // 1 + floor((16000 - 400) / 160)
        assert_eq!(f.frames.dim(), (98, 40));
    }

    #[test]
    fn silence_is_constant_floor() {
        let w = Waveform::new(vec![0.0; 4000], 16000).unwrap();
        let f = extract_features(&w, &FeatureConfig::default()).unwrap();
        let floor = 1e-6f64.ln();
        assert!(f.frames.iter().all(|v| *v == floor));
    }

    #[test]
    fn deterministic_and_rejects_short_or_mismatched() {
        let samples: Vec<f64> = (0..3200).map(|i| ((i * 37 % 101) as f64 / 101.0) - 0.5).collect();
        let w = Waveform::new(samples, 16000).unwrap();
        let cfg = FeatureConfig::default();
        assert_eq!(extract_features(&w, &cfg).unwrap(), extract_features(&w, &cfg).unwrap());
        let short = Waveform::new(vec![0.1; 399], 16000).unwrap();
        assert!(matches!(extract_features(&short, &cfg), Err(Error::DegenerateAudio(_))));
        let other = Waveform::new(vec![0.1; 800], 8000).unwrap();
        assert!(matches!(extract_features(&other, &cfg), Err(Error::Incompatible(_))));
    }

    #[test]
    fn tone_energy_lands_in_matching_band() {
        let sr = 16000.0;
        let tone: Vec<f64> = (0..16000)
            .map(|i| 0.3 * (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / sr).sin())
            .collect();
        let f = extract_features(&Waveform::new(tone, 16000).unwrap(), &FeatureConfig::default()).unwrap();
        let row = f.frames.row(50);
        let peak = (0..40).max_by(|a, b| row[*a].total_cmp(&row[*b])).unwrap();
        let ex = FeatureExtractor::new(FeatureConfig::default()).unwrap();
        let bin_1k = (1000.0 * 512.0 / sr).round() as usize;
        assert!(ex.filters[[peak, bin_1k]] > 0.0);
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = FeatureConfig {
            log_floor: 1e-7,
            n_mels: 24,
            ..FeatureConfig::default()
        };
        assert_eq!(cfg.to_string().parse::<FeatureConfig>().unwrap(), cfg);
    }
}
