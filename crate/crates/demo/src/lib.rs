//! Browser demo over `mtkws-core`: three explorers that return JSON for the
//! static page in `www/`. Every function is plain Rust as well, so the same
//! code runs under `cargo test`.

use mtkws_core::backbone::{posterior_softmax, unit_probability_sigmoid};
use mtkws_core::corpus::{keyword_names, synth_utterance, TemplateLayout};
use mtkws_core::evalkit::{compute_eer, Trial};
use mtkws_core::mixing::{mix_waveforms_with_stats, normalize_rms, one_hot, union_labels, Waveform};
use mtkws_core::rng::child_seed;
use mtkws_core::tokenizer::{FeatureConfig, FeatureExtractor};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

pub const N_KEYWORDS: usize = 10;
const SAMPLE_RATE: u32 = 16000;
const ENVELOPE_BINS: usize = 100;

fn error_json(e: impl std::fmt::Display) -> String {
    json!({ "error": e.to_string() }).to_string()
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| format!("cannot read {what} `{s}`")))
        .collect()
}

fn envelope(w: &Waveform) -> Vec<f64> {
    let s = w.samples();
    let bin = (s.len() / ENVELOPE_BINS).max(1);
    s.chunks(bin)
        .map(|c| (c.iter().map(|x| x * x).sum::<f64>() / c.len() as f64).sqrt())
        .collect()
}

/// Time-averaged log-mel spectrum.
fn mean_spectrum(ex: &FeatureExtractor, w: &Waveform) -> mtkws_core::Result<Vec<f64>> {
    let f = ex.extract(w, "")?;
    let mut acc = vec![0.0; f.frames.ncols()];
    for row in f.frames.rows() {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    let n = f.frames.nrows().max(1) as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

fn mix_value(seed: u64, keywords: &[usize], scales: &[f64]) -> mtkws_core::Result<Value> {
    let ex = FeatureExtractor::new(FeatureConfig::default())?;
    let names = keyword_names(N_KEYWORDS);
    let mut sources = Vec::new();
    let mut labels = Vec::new();
    for (i, &k) in keywords.iter().enumerate() {
        if k >= N_KEYWORDS {
            return Err(mtkws_core::Error::Precondition(format!("keyword {k} is not below {N_KEYWORDS}")));
        }
        let raw = synth_utterance(k, i, N_KEYWORDS, 1.0, SAMPLE_RATE, seed, &TemplateLayout::default())?;
        sources.push(normalize_rms(&raw)?);
        labels.push(one_hot(k, N_KEYWORDS));
    }
    let refs: Vec<&Waveform> = sources.iter().collect();
    let mix = mix_waveforms_with_stats(&refs, scales)?;
    let label_refs: Vec<&[bool]> = labels.iter().map(Vec::as_slice).collect();
    let union = union_labels(&label_refs)?;
    let mut src_json = Vec::new();
    for ((w, &k), &scale) in sources.iter().zip(keywords).zip(scales) {
        src_json.push(json!({
            "keyword": names[k],
            "scale": scale,
            "envelope": envelope(w),
            "spectrum": mean_spectrum(&ex, w)?,
        }));
    }
    Ok(json!({
        "sources": src_json,
        "mixture": {
            "envelope": envelope(&mix.waveform),
            "spectrum": mean_spectrum(&ex, &mix.waveform)?,
            "clipped": mix.clipped,
            "rms": mix.waveform.rms(),
        },
        "label": union,
        "present": union.iter().enumerate().filter(|(_, p)| **p).map(|(k, _)| names[k].clone()).collect::<Vec<_>>(),
    }))
}

/// Mixes synthetic utterances of the given keyword indices with the given
/// scales. Returns source and mixture envelopes, mean log-mel spectra and the
/// union label.
#[wasm_bindgen]
pub fn mix_explorer(seed: u32, keywords: &str, scales: &str) -> String {
    let run = || -> Result<Value, String> {
        let k: Vec<usize> = parse_list(keywords, "keyword")?;
        let s: Vec<f64> = parse_list(scales, "scale")?;
        mix_value(seed as u64, &k, &s).map_err(|e| e.to_string())
    };
    run().map_or_else(error_json, |v| v.to_string())
}

/// Deterministic value in [-1, 1) from a seed and two tags.
fn unit_draw(seed: u64, a: u64, b: u64) -> f64 {
    (child_seed(seed, &[a, b]) >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Cosine similarities between one projected frame and `units` random unit
/// embeddings, divided by `tau`, then read out both as a softmax posterior
/// and as independent sigmoid probabilities.
#[wasm_bindgen]
pub fn temperature_explorer(seed: u32, units: u32, tau: f64) -> String {
    if !(tau > 0.0) || !tau.is_finite() {
        return error_json("temperature must be positive");
    }
    if !(2..=256).contains(&units) {
        return error_json("unit count must be between 2 and 256");
    }
    let dim = 16;
    let seed = seed as u64;
    let o: Vec<f64> = (0..dim).map(|i| unit_draw(seed, 0, i)).collect();
    let cosines: Vec<f64> = (0..units as u64)
        .map(|c| {
            let e: Vec<f64> = (0..dim).map(|i| unit_draw(seed, c + 1, i)).collect();
            cosine(&o, &e)
        })
        .collect();
    let scores: Vec<f64> = cosines.iter().map(|c| c / tau).collect();
    let softmax = posterior_softmax(&scores);
    let sigmoid = unit_probability_sigmoid(&scores);
    let entropy: f64 = -softmax.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    json!({
        "cosines": cosines,
        "softmax": softmax,
        "sigmoid": sigmoid,
        "softmax_entropy": entropy,
        "sigmoid_active": sigmoid.iter().filter(|p| **p > 0.5).count(),
    })
    .to_string()
}

/// False-acceptance and false-rejection rates at every distinct score, plus
/// the pooled EER, for comma- or space-separated target and non-target scores.
#[wasm_bindgen]
pub fn eer_curve(present: &str, absent: &str) -> String {
    let run = || -> Result<Value, String> {
        let p: Vec<f64> = parse_list(present, "score")?;
        let a: Vec<f64> = parse_list(absent, "score")?;
        let trials: Vec<Trial> = p
            .iter()
            .map(|&s| (s, true))
            .chain(a.iter().map(|&s| (s, false)))
            .enumerate()
            .map(|(i, (score, present))| Trial {
                utterance_id: i.to_string(),
                keyword: 0,
                score,
                present,
            })
            .collect();
        let eer = compute_eer(&trials).map_err(|e| e.to_string())?;
        let mut thresholds: Vec<f64> = p.iter().chain(&a).copied().collect();
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();
        let far: Vec<f64> = thresholds
            .iter()
            .map(|t| a.iter().filter(|s| *s >= t).count() as f64 / a.len() as f64)
            .collect();
        let frr: Vec<f64> = thresholds
            .iter()
            .map(|t| p.iter().filter(|s| *s < t).count() as f64 / p.len() as f64)
            .collect();
        Ok(json!({ "thresholds": thresholds, "far": far, "frr": frr, "eer": eer }))
    };
    run().map_or_else(error_json, |v| v.to_string())
}
