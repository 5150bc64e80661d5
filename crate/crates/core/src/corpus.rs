//! Utterance manifests, the synthetic keyword corpus, and few-shot sampling.

use std::collections::HashSet;
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mixing::Waveform;
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    /// Audio location relative to the manifest's directory.
    pub path: String,
    pub keyword: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<UtteranceRecord>,
    pub keyword_names: Vec<String>,
    pub split: Split,
}

impl Manifest {
    /// Builds a manifest, checking id uniqueness and keyword ranges.
    pub fn new(records: Vec<UtteranceRecord>, keyword_names: Vec<String>, split: Split) -> Result<Self> {
        let m = Self {
            records,
            keyword_names,
            split,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Integrity(format!("duplicate utterance id `{}`", r.id)));
            }
            if r.keyword >= self.keyword_names.len() {
                return Err(Error::Integrity(format!(
                    "record `{}` has keyword {} but only {} keywords are declared",
                    r.id,
                    r.keyword,
                    self.keyword_names.len()
                )));
            }
        }
        Ok(())
    }

    pub fn keyword_count(&self) -> usize {
        self.keyword_names.len()
    }

    /// Record indices grouped by keyword, each group in manifest order.
    pub fn records_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.keyword_count()];
        for (i, r) in self.records.iter().enumerate() {
            groups[r.keyword].push(i);
        }
        groups
    }

    pub fn record(&self, id: &str) -> Option<&UtteranceRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Loads a record's audio and checks it against the stored metadata.
    pub fn load_audio(&self, root: &Path, rec: &UtteranceRecord) -> Result<Waveform> {
        let w = Waveform::read_wav(&root.join(&rec.path))?;
        if w.sample_rate() != rec.sample_rate {
            return Err(Error::Integrity(format!(
                "`{}`: file sample rate {} differs from manifest {}",
                rec.id,
                w.sample_rate(),
                rec.sample_rate
            )));
        }
        let expected = rec.duration_s * rec.sample_rate as f64;
        if (w.len() as f64 - expected).abs() > 1.0 {
            return Err(Error::Integrity(format!(
                "`{}`: {} samples stored, manifest implies {expected}",
                rec.id,
                w.len()
            )));
        }
        Ok(w)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("#keywords:{}\n#split:{}\n", self.keyword_names.join(","), self.split);
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                r.id, r.path, r.keyword, r.duration_s, r.sample_rate
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Manifest> {
        let mut lines = text.lines().enumerate();
        let bad = |line: usize, reason: &str| Error::MalformedManifest {
            line,
            reason: reason.to_string(),
        };
        let keyword_names = match lines.next() {
            Some((_, l)) => match l.strip_prefix("#keywords:") {
                Some("") => Vec::new(),
                Some(names) => names.split(',').map(str::to_string).collect(),
                None => return Err(bad(1, "expected `#keywords:` header")),
            },
            None => return Err(bad(1, "missing `#keywords:` header")),
        };
        let split = match lines.next() {
            Some((_, l)) => l
                .strip_prefix("#split:")
                .ok_or_else(|| bad(2, "expected `#split:` header"))?
                .parse::<Split>()
                .map_err(|e| bad(2, &e))?,
            None => return Err(bad(2, "missing `#split:` header")),
        };
        let mut records = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(bad(lineno, &format!("expected 5 tab-separated fields, got {}", cols.len())));
            }
            let keyword = cols[2]
                .parse::<usize>()
                .map_err(|e| bad(lineno, &format!("keyword index: {e}")))?;
            let duration_s = cols[3]
                .parse::<f64>()
                .map_err(|e| bad(lineno, &format!("duration: {e}")))?;
            let sample_rate = cols[4]
                .parse::<u32>()
                .map_err(|e| bad(lineno, &format!("sample rate: {e}")))?;
            if !(duration_s > 0.0) || !duration_s.is_finite() {
                return Err(bad(lineno, "duration must be positive"));
            }
            if sample_rate == 0 {
                return Err(bad(lineno, "sample rate must be positive"));
            }
            records.push(UtteranceRecord {
                id: cols[0].to_string(),
                path: cols[1].to_string(),
                keyword,
                duration_s,
                sample_rate,
            });
        }
        Manifest::new(records, keyword_names, split)
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            path: path.to_path_buf(),
            what: "manifest".into(),
        },
        _ => Error::Io(e),
    })?;
    Manifest::parse(&text)
}

pub fn write_manifest(m: &Manifest, path: &Path) -> Result<()> {
    std::fs::write(path, m.to_text())?;
    Ok(())
}

/// Parameters of the synthetic keyword corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_keywords: usize,
    pub per_class: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
    pub split: Split,
    pub layout: TemplateLayout,
}

/// Lowest and highest frequency any keyword template may occupy.
pub const TEMPLATE_BAND: (f64, f64) = (300.0, 6000.0);
pub const MIN_TEMPLATE_SPACING: f64 = 300.0;
pub const TEMPLATE_AMPLITUDE: f64 = 0.5;
pub const TEMPLATE_SNR_DB: f64 = 20.0;

/// Placement of the keyword chirps inside [`TEMPLATE_BAND`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemplateLayout {
    /// Distance between neighbouring base frequencies; 0 spreads the bases over the band.
    pub spacing_hz: f64,
    /// Upward sweep of every chirp; 0 means half the spacing.
    pub sweep_hz: f64,
}

impl TemplateLayout {
    /// Bases spread evenly over the band, each chirp sweeping half the spacing.
    pub const SPREAD: TemplateLayout = TemplateLayout {
        spacing_hz: 0.0,
        sweep_hz: 0.0,
    };
}

/// Neighbouring chirps overlap, so a mixture of two keywords covers the band of
/// the ones between them.
impl Default for TemplateLayout {
    fn default() -> Self {
        Self {
            spacing_hz: MIN_TEMPLATE_SPACING,
            sweep_hz: 3.0 * MIN_TEMPLATE_SPACING,
        }
    }
}

/// Base frequency and sweep width of keyword `k`'s chirp.
pub fn chirp_template(k: usize, n_keywords: usize, layout: &TemplateLayout) -> Result<(f64, f64)> {
    if n_keywords < 2 {
        return Err(Error::Precondition("synthetic corpus needs at least 2 keywords".into()));
    }
    let span = TEMPLATE_BAND.1 - TEMPLATE_BAND.0;
    let spacing = if layout.spacing_hz > 0.0 {
        layout.spacing_hz
    } else {
        span / (n_keywords as f64 - 0.5)
    };
    let sweep = if layout.sweep_hz > 0.0 { layout.sweep_hz } else { spacing / 2.0 };
    if spacing < MIN_TEMPLATE_SPACING {
        return Err(Error::Precondition(format!(
            "{n_keywords} keywords do not fit in the template band at {MIN_TEMPLATE_SPACING} Hz spacing"
        )));
    }
    if TEMPLATE_BAND.0 + spacing * (n_keywords - 1) as f64 + sweep > TEMPLATE_BAND.1 + 1e-9 {
        return Err(Error::Precondition(format!(
            "{n_keywords} chirps at {spacing} Hz spacing with {sweep} Hz sweep leave the template band"
        )));
    }
    Ok((TEMPLATE_BAND.0 + spacing * k as f64, sweep))
}

/// One synthetic utterance: a gained, time-jittered chirp over white noise.
pub fn synth_utterance(
    keyword: usize,
    index: usize,
    n_keywords: usize,
    duration_s: f64,
    sample_rate: u32,
    seed: u64,
    layout: &TemplateLayout,
) -> Result<Waveform> {
    let (base, sweep) = chirp_template(keyword, n_keywords, layout)?;
    let mut rng = seeded(seed, &[0x5359_4e54, keyword as u64, index as u64]);
    let sr = sample_rate as f64;
    let n = (duration_s * sr).round() as usize;
    if n == 0 {
        return Err(Error::Precondition("duration shorter than one sample".into()));
    }
    let seg_len = ((0.6 * n as f64) as usize).max(1);
    let earliest = n / 20;
    let latest = (7 * n / 20).max(earliest);
    let onset = rng.gen_range(earliest..=latest);
    let gain = rng.gen_range(0.7..=1.0);
    let noise_std = (TEMPLATE_AMPLITUDE.powi(2) / 2.0 / 10f64.powf(TEMPLATE_SNR_DB / 10.0)).sqrt();
    let noise = Normal::new(0.0, noise_std).expect("positive std");
    let ramp = (0.01 * sr) as usize;
    let seg_dur = seg_len as f64 / sr;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = noise.sample(&mut rng);
        if i >= onset && i < onset + seg_len {
            let j = i - onset;
            let t = j as f64 / sr;
            // Instantaneous frequency rises linearly from base to base + sweep.
            let phase = 2.0 * std::f64::consts::PI * (base * t + 0.5 * sweep * t * t / seg_dur);
            let edge = j.min(seg_len - 1 - j);
            let env = if ramp > 0 && edge < ramp {
                0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            s += TEMPLATE_AMPLITUDE * gain * env * phase.sin();
        }
        samples.push(s.clamp(-1.0, 1.0));
    }
    Waveform::new(samples, sample_rate)
}

pub fn keyword_names(n: usize) -> Vec<String> {
    (0..n).map(|k| format!("kw{k:02}")).collect()
}

/// Writes `per_class` utterances for each keyword under `out_dir/<split>/` and the
/// manifest `out_dir/<split>.tsv`.
pub fn generate_synthetic_corpus(spec: &SynthSpec, out_dir: &Path) -> Result<Manifest> {
    if spec.n_keywords < 2 {
        return Err(Error::Precondition("n_keywords must be at least 2".into()));
    }
    if spec.per_class < 1 {
        return Err(Error::Precondition("per_class must be at least 1".into()));
    }
    let audio_dir = out_dir.join(spec.split.to_string());
    std::fs::create_dir_all(&audio_dir)?;
    let mut records = Vec::with_capacity(spec.n_keywords * spec.per_class);
    for k in 0..spec.n_keywords {
        for i in 0..spec.per_class {
            let w = synth_utterance(k, i, spec.n_keywords, spec.duration_s, spec.sample_rate, spec.seed, &spec.layout)?;
            let id = format!("{}_kw{k:02}_{i:04}", spec.split);
            let rel = PathBuf::from(spec.split.to_string()).join(format!("{id}.wav"));
            w.write_wav(&out_dir.join(&rel))?;
            records.push(UtteranceRecord {
                id,
                path: rel.to_string_lossy().into_owned(),
                keyword: k,
                duration_s: w.duration_s(),
                sample_rate: spec.sample_rate,
            });
        }
    }
    let manifest = Manifest::new(records, keyword_names(spec.n_keywords), spec.split)?;
    write_manifest(&manifest, &out_dir.join(format!("{}.tsv", spec.split)))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShotSubset {
    pub shots: usize,
    pub repeat_index: usize,
    pub record_ids: Vec<String>,
}

/// `repeats` independent class-balanced draws of `shots` records per keyword.
/// Each repeat uses its own child seed, so adding repeats leaves earlier ones unchanged.
pub fn sample_few_shot(manifest: &Manifest, shots: usize, repeats: usize, seed: u64) -> Result<Vec<FewShotSubset>> {
    if shots == 0 {
        return Err(Error::Precondition("shots must be positive".into()));
    }
    let groups = manifest.records_by_class();
    for (k, g) in groups.iter().enumerate() {
        if g.len() < shots {
            return Err(Error::InsufficientData(format!(
                "keyword {k} (`{}`) has {} records, {shots} shots requested",
                manifest.keyword_names[k],
                g.len()
            )));
        }
    }
    Ok((0..repeats)
        .map(|r| {
            let mut rng = seeded(seed, &[0x4645_5753, shots as u64, r as u64]);
            let record_ids = groups
                .iter()
                .flat_map(|g| {
                    index::sample(&mut rng, g.len(), shots)
                        .into_iter()
                        .map(|i| manifest.records[g[i]].id.clone())
                        .collect::<Vec<_>>()
                })
                .collect();
            FewShotSubset {
                shots,
                repeat_index: r,
                record_ids,
            }
        })
        .collect())
}
