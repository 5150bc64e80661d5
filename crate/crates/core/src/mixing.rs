//! Waveform mixing and label union.
//!
//! A mixture is `x_mix = Σ ω_k·x_k` over RMS-normalized sources truncated to the
//! shortest one, and its label is the logical OR of the source labels. Training
//! mixtures draw `ω ~ U(0.1, 0.9)` independently per source; evaluation
//! mixtures use one common scale so the energy ratio is exactly 1:1(:1).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Uniform};

use crate::corpus::Manifest;
use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};

/// Target RMS level of a normalized waveform.
pub const NORMALIZED_RMS: f64 = 0.1;
/// Lower and upper bound of training mixture scales.
pub const SCALE_RANGE: (f64, f64) = (0.1, 0.9);
/// Common per-source scale used by the fixed-ratio evaluation sets.
pub const EVAL_SCALE: f64 = 0.5;
pub const DEFAULT_CLEAN_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::DegenerateAudio("empty waveform".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Precondition("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::DegenerateAudio(format!("non-finite sample at {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    pub fn truncated(&self, len: usize) -> Waveform {
        Waveform {
            samples: self.samples[..len.min(self.samples.len())].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    /// Reads a mono 16-bit PCM WAV file.
    pub fn read_wav(path: &Path) -> Result<Waveform> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 {
            return Err(Error::format(
                path,
                format!(
                    "expected mono 16-bit PCM, got {} channels at {} bits",
                    spec.channels, spec.bits_per_sample
                ),
            ));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Waveform::new(samples, spec.sample_rate)
    }

    /// Writes the waveform as mono 16-bit PCM, clamping to [-1, 1).
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            writer.write_sample(pcm16(s))?;
        }
        writer.finalize()?;
        Ok(())
    }
}

pub(crate) fn pcm16(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Rescales `w` so that its RMS equals [`NORMALIZED_RMS`].
pub fn normalize_rms(w: &Waveform) -> Result<Waveform> {
    let rms = w.rms();
    if rms == 0.0 {
        return Err(Error::DegenerateAudio("all-zero waveform cannot be normalized".into()));
    }
    let gain = NORMALIZED_RMS / rms;
    Ok(Waveform {
        samples: w.samples.iter().map(|s| s * gain).collect(),
        sample_rate: w.sample_rate,
    })
}

/// Output of [`mix_waveforms_with_stats`].
#[derive(Debug, Clone)]
pub struct MixOutput {
    pub waveform: Waveform,
    pub clipped: usize,
}

/// Scaled sum of `sources`, truncated to the shortest source and clamped to [-1, 1].
/// Sources are accumulated in the order given.
pub fn mix_waveforms(sources: &[&Waveform], scales: &[f64]) -> Result<Waveform> {
    mix_waveforms_with_stats(sources, scales).map(|m| m.waveform)
}

pub fn mix_waveforms_with_stats(sources: &[&Waveform], scales: &[f64]) -> Result<MixOutput> {
    let first = sources
        .first()
        .ok_or_else(|| Error::Precondition("mix of zero sources".into()))?;
    if scales.len() != sources.len() {
        return Err(Error::Precondition(format!(
            "{} scales for {} sources",
            scales.len(),
            sources.len()
        )));
    }
    if let Some(s) = scales.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        return Err(Error::Precondition(format!("scale {s} is not positive")));
    }
    let sr = first.sample_rate;
    if let Some(w) = sources.iter().find(|w| w.sample_rate != sr) {
        return Err(Error::Incompatible(format!(
            "sample rate {} does not match {sr}",
            w.sample_rate
        )));
    }
    let len = sources.iter().map(|w| w.len()).min().unwrap_or(0);
    let mut out = vec![0.0f64; len];
    for (w, &scale) in sources.iter().zip(scales) {
        for (o, s) in out.iter_mut().zip(&w.samples[..len]) {
            *o += scale * s;
        }
    }
    let mut clipped = 0;
    for o in &mut out {
        if o.abs() > 1.0 {
            clipped += 1;
            *o = o.clamp(-1.0, 1.0);
        }
    }
    Ok(MixOutput {
        waveform: Waveform::new(out, sr)?,
        clipped,
    })
}

/// `n` independent draws from U(0.1, 0.9).
pub fn sample_scales(n: usize, rng: &mut Rng) -> Vec<f64> {
    let dist = Uniform::new_inclusive(SCALE_RANGE.0, SCALE_RANGE.1);
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Element-wise logical OR of equal-length label vectors.
pub fn union_labels(labels: &[&[bool]]) -> Result<Vec<bool>> {
    let first = labels
        .first()
        .ok_or_else(|| Error::Precondition("union of zero labels".into()))?;
    let k = first.len();
    let mut out = vec![false; k];
    for l in labels {
        if l.len() != k {
            return Err(Error::Precondition(format!(
                "label dimension {} does not match {k}",
                l.len()
            )));
        }
        for (o, &b) in out.iter_mut().zip(l.iter()) {
            *o |= b;
        }
    }
    Ok(out)
}

pub fn one_hot(class: usize, k: usize) -> Vec<bool> {
    let mut v = vec![false; k];
    v[class] = true;
    v
}

pub fn popcount(label: &[bool]) -> usize {
    label.iter().filter(|b| **b).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Alignment {
    #[default]
    TruncateToMin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub source_ids: Vec<String>,
    pub scales: Vec<f64>,
    pub alignment: Alignment,
}

impl MixtureSpec {
    pub fn clean(id: impl Into<String>) -> Self {
        Self {
            source_ids: vec![id.into()],
            scales: vec![1.0],
            alignment: Alignment::TruncateToMin,
        }
    }

    pub fn cardinality(&self) -> usize {
        self.source_ids.len()
    }

    /// (source, scale) pairs in ascending source-id order, the summation order.
    pub fn ordered_pairs(&self) -> Vec<(&str, f64)> {
        let mut pairs: Vec<_> = self
            .source_ids
            .iter()
            .map(String::as_str)
            .zip(self.scales.iter().copied())
            .collect();
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        pairs
    }
}

/// A mixture recipe plus its union label; audio is synthesized on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePlan {
    pub id: String,
    pub spec: MixtureSpec,
    pub label: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct MixtureExample {
    pub id: String,
    pub spec: MixtureSpec,
    pub waveform: Waveform,
    pub label: Vec<bool>,
}

/// RMS-normalized clean audio keyed by utterance id.
#[derive(Debug, Clone, Default)]
pub struct AudioStore {
    normalized: HashMap<String, Waveform>,
}

impl AudioStore {
    /// Loads and normalizes every record of `manifest` from `root`.
    pub fn load(manifest: &Manifest, root: &Path) -> Result<Self> {
        let mut store = AudioStore::default();
        for rec in &manifest.records {
            let w = manifest.load_audio(root, rec)?;
            store.insert(&rec.id, &w)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, id: &str, w: &Waveform) -> Result<()> {
        self.normalized.insert(id.to_string(), normalize_rms(w)?);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&Waveform> {
        self.normalized
            .get(id)
            .ok_or_else(|| Error::Integrity(format!("unknown utterance id `{id}`")))
    }

    pub fn len(&self) -> usize {
        self.normalized.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normalized.is_empty()
    }
}

impl MixturePlan {
    fn mix(&self, store: &AudioStore) -> Result<MixOutput> {
        let pairs = self.spec.ordered_pairs();
        let sources = pairs
            .iter()
            .map(|(id, _)| store.get(id))
            .collect::<Result<Vec<_>>>()?;
        let scales: Vec<f64> = pairs.iter().map(|(_, s)| *s).collect();
        mix_waveforms_with_stats(&sources, &scales)
    }

    pub fn materialize(&self, store: &AudioStore) -> Result<MixtureExample> {
        let out = self.mix(store)?;
        Ok(MixtureExample {
            id: self.id.clone(),
            spec: self.spec.clone(),
            waveform: out.waveform,
            label: self.label.clone(),
        })
    }
}

/// Materializes all plans, logging the aggregate clip rate.
pub fn materialize_all(plans: &[MixturePlan], store: &AudioStore) -> Result<Vec<MixtureExample>> {
    let mut clipped = 0usize;
    let mut total = 0usize;
    let mut out = Vec::with_capacity(plans.len());
    for p in plans {
        let m = p.mix(store)?;
        clipped += m.clipped;
        total += m.waveform.len();
        out.push(MixtureExample {
            id: p.id.clone(),
            spec: p.spec.clone(),
            waveform: m.waveform,
            label: p.label.clone(),
        });
    }
    if total > 0 {
        log::info!(
            "materialized {} mixtures, clip rate {:.3e}",
            out.len(),
            clipped as f64 / total as f64
        );
    }
    Ok(out)
}

/// Pre-training mixture recipes: each example is clean with probability
/// `clean_fraction`, otherwise a 2-mix of two distinct records drawn uniformly.
pub fn plan_pretrain_mixtures(
    manifest: &Manifest,
    clean_fraction: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<MixturePlan>> {
    if !(0.0..=1.0).contains(&clean_fraction) {
        return Err(Error::Precondition(format!(
            "clean_fraction {clean_fraction} outside [0, 1]"
        )));
    }
    let n = manifest.records.len();
    if n == 0 {
        return Err(Error::InsufficientData("empty manifest".into()));
    }
    let k = manifest.keyword_count();
    let mut plans = Vec::with_capacity(count);
    for idx in 0..count {
        let mut rng = seeded(seed, &[0x5052_4554, idx as u64]);
        let clean = rng.gen_bool(clean_fraction);
        let id = format!("pt{idx:06}");
        if clean {
            let rec = &manifest.records[rng.gen_range(0..n)];
            plans.push(MixturePlan {
                id,
                spec: MixtureSpec::clean(rec.id.clone()),
                label: one_hot(rec.keyword, k),
            });
        } else {
            if n < 2 {
                return Err(Error::InsufficientData(
                    "2-mix requested from a manifest with fewer than 2 records".into(),
                ));
            }
            let i = rng.gen_range(0..n);
            let mut j = rng.gen_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            let (a, b) = (&manifest.records[i], &manifest.records[j]);
            let scales = sample_scales(2, &mut rng);
            plans.push(MixturePlan {
                id,
                spec: MixtureSpec {
                    source_ids: vec![a.id.clone(), b.id.clone()],
                    scales,
                    alignment: Alignment::TruncateToMin,
                },
                label: union_labels(&[&one_hot(a.keyword, k), &one_hot(b.keyword, k)])?,
            });
        }
    }
    Ok(plans)
}

pub fn build_pretrain_mixtures(
    manifest: &Manifest,
    store: &AudioStore,
    clean_fraction: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<MixtureExample>> {
    let plans = plan_pretrain_mixtures(manifest, clean_fraction, count, seed)?;
    materialize_all(&plans, store)
}

/// Fixed-ratio evaluation recipes: each mixes `n` utterances with pairwise
/// distinct keywords at equal scale.
pub fn plan_eval_mixture_set(
    test: &Manifest,
    n: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<MixturePlan>> {
    if !(1..=3).contains(&n) {
        return Err(Error::Precondition(format!("mixture cardinality {n} not in 1..=3")));
    }
    let k = test.keyword_count();
    let by_class = test.records_by_class();
    let populated: Vec<usize> = (0..k).filter(|c| !by_class[*c].is_empty()).collect();
    if populated.len() < n {
        return Err(Error::InsufficientData(format!(
            "{n}-mix needs {n} distinct keywords, test set has {}",
            populated.len()
        )));
    }
    let mut plans = Vec::with_capacity(count);
    for idx in 0..count {
        let mut rng = seeded(seed, &[0x4556_414c, n as u64, idx as u64]);
        let classes: Vec<usize> = populated.choose_multiple(&mut rng, n).copied().collect();
        let recs: Vec<_> = classes
            .iter()
            .map(|&c| {
                let members = &by_class[c];
                &test.records[members[rng.gen_range(0..members.len())]]
            })
            .collect();
        let labels: Vec<Vec<bool>> = recs.iter().map(|r| one_hot(r.keyword, k)).collect();
        let label_refs: Vec<&[bool]> = labels.iter().map(Vec::as_slice).collect();
        let scale = if n == 1 { 1.0 } else { EVAL_SCALE };
        plans.push(MixturePlan {
            id: format!("ev{n}_{idx:05}"),
            spec: MixtureSpec {
                source_ids: recs.iter().map(|r| r.id.clone()).collect(),
                scales: vec![scale; n],
                alignment: Alignment::TruncateToMin,
            },
            label: union_labels(&label_refs)?,
        });
    }
    Ok(plans)
}

pub fn build_eval_mixture_set(
    test: &Manifest,
    store: &AudioStore,
    n: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<MixtureExample>> {
    let plans = plan_eval_mixture_set(test, n, count, seed)?;
    materialize_all(&plans, store)
}

/// Renders mixture recipes as the tab-separated mixture manifest.
pub fn format_mixture_manifest(plans: &[MixturePlan]) -> String {
    let mut out = String::new();
    for p in plans {
        let join = |it: Vec<String>| it.join(",");
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            p.id,
            p.spec.source_ids.join(","),
            join(p.spec.scales.iter().map(|s| s.to_string()).collect()),
            join(p.label.iter().map(|b| if *b { "1" } else { "0" }.to_string()).collect()),
        );
    }
    out
}

pub fn parse_mixture_manifest(text: &str, path: &Path) -> Result<Vec<MixturePlan>> {
    let mut plans = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| Error::format(path, format!("line {}: {reason}", i + 1));
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(bad(format!("expected 4 columns, got {}", cols.len())));
        }
        let source_ids: Vec<String> = cols[1].split(',').map(str::to_string).collect();
        let scales = cols[2]
            .split(',')
            .map(|s| s.parse::<f64>().map_err(|e| bad(format!("scale `{s}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let label = cols[3]
            .split(',')
            .map(|b| match b {
                "1" => Ok(true),
                "0" => Ok(false),
                other => Err(bad(format!("label bit `{other}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if scales.len() != source_ids.len() {
            return Err(bad("scale count differs from source count".into()));
        }
        plans.push(MixturePlan {
            id: cols[0].to_string(),
            spec: MixtureSpec {
                source_ids,
                scales,
                alignment: Alignment::TruncateToMin,
            },
            label,
        });
    }
    Ok(plans)
}

pub fn write_mixture_manifest(plans: &[MixturePlan], path: &Path) -> Result<()> {
    std::fs::write(path, format_mixture_manifest(plans))?;
    Ok(())
}

pub fn read_mixture_manifest(path: &Path) -> Result<Vec<MixturePlan>> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            path: PathBuf::from(path),
            what: "mixture manifest".into(),
        },
        _ => Error::Io(e),
    })?;
    parse_mixture_manifest(&text, path)
}
