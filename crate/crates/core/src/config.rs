//! Experiment configuration: flat `key = value` text with dotted section keys.
//!
//! Every key has a default, unknown keys are rejected, and [`ExperimentConfig::echo`]
//! renders the full effective configuration in a form [`ExperimentConfig::parse`]
//! reads back unchanged.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::adapt::{AdaptConfig, Strategy, HIDDEN_WIDTH};
use crate::backbone::BackboneConfig;
use crate::corpus::TemplateLayout;
use crate::error::{Error, Result};
use crate::evalkit::Condition;
use crate::pretrain::{MaskSpec, Mode, PretrainConfig};
use crate::tokenizer::FeatureConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSection {
    pub n_keywords: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub layout: TemplateLayout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixingSection {
    pub clean_fraction: f64,
    pub pretrain_count: usize,
    pub eval_2mix_count: usize,
    pub eval_3mix_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerSection {
    pub codebook_size: usize,
    pub kmeans_iters: usize,
    pub features: FeatureConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneSection {
    pub local_channels: Vec<usize>,
    pub local_kernels: Vec<usize>,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub temperature: f64,
    pub positional_encoding: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSection {
    pub modes: Vec<Mode>,
    pub steps: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub mask_start_prob: f64,
    pub mask_span: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptSection {
    pub strategies: Vec<Strategy>,
    pub shots: Vec<usize>,
    pub repeats: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub mixup_alpha: f64,
    pub batch_size: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub conditions: Vec<Condition>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Corpus directory; empty means `<workdir>/data`.
    pub corpus_dir: PathBuf,
    pub workdir: PathBuf,
    pub corpus: CorpusSection,
    pub mixing: MixingSection,
    pub tokenizer: TokenizerSection,
    pub backbone: BackboneSection,
    pub pretrain: PretrainSection,
    pub adapt: AdaptSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let b = BackboneConfig::default();
        Self {
            seed: 7,
            corpus_dir: PathBuf::new(),
            workdir: PathBuf::from("work"),
            corpus: CorpusSection {
                n_keywords: 10,
                train_per_class: 20,
                test_per_class: 10,
                duration_s: 1.0,
                sample_rate: 16000,
                layout: TemplateLayout::default(),
            },
            mixing: MixingSection {
                clean_fraction: crate::mixing::DEFAULT_CLEAN_FRACTION,
                pretrain_count: 800,
                eval_2mix_count: 200,
                eval_3mix_count: 200,
            },
            tokenizer: TokenizerSection {
                codebook_size: 32,
                kmeans_iters: 50,
                features: FeatureConfig::default(),
            },
            backbone: BackboneSection {
                local_channels: b.local_channels,
                local_kernels: b.local_kernels,
                model_dim: b.model_dim,
                layers: b.layers,
                heads: b.heads,
                ffn_dim: b.ffn_dim,
                dropout: b.dropout,
                temperature: b.temperature,
                positional_encoding: b.positional_encoding,
            },
            pretrain: PretrainSection {
                modes: vec![Mode::CleanNll, Mode::MtBce],
                steps: 2000,
                learning_rate: 5e-4,
                warmup_steps: 200,
                batch_size: 16,
                checkpoint_every: 500,
                mask_start_prob: MaskSpec::default().start_prob,
                mask_span: MaskSpec::default().span_length,
            },
            adapt: AdaptSection {
                strategies: vec![Strategy::Clean, Strategy::Mixup, Strategy::Mt],
                shots: vec![15],
                repeats: 5,
                epochs: 50,
                learning_rate: 1e-3,
                mixup_alpha: 1.0,
                batch_size: 16,
                hidden: HIDDEN_WIDTH,
            },
            eval: EvalSection {
                conditions: Condition::ALL.to_vec(),
            },
        }
    }
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_one<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| Error::Config {
        key: key.to_string(),
        constraint: format!("cannot parse `{value}`: {e}"),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_one(key, v.trim())).collect()
}

fn invalid(key: &str, constraint: &str) -> Error {
    Error::Config {
        key: key.to_string(),
        constraint: constraint.to_string(),
    }
}

impl ExperimentConfig {
    /// All keys with their current values, in echo order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let c = &self.corpus;
        let m = &self.mixing;
        let t = &self.tokenizer;
        let f = &t.features;
        let b = &self.backbone;
        let p = &self.pretrain;
        let a = &self.adapt;
        vec![
            ("seed", self.seed.to_string()),
            ("paths.corpus", self.corpus_dir.display().to_string()),
            ("paths.workdir", self.workdir.display().to_string()),
            ("corpus.n_keywords", c.n_keywords.to_string()),
            ("corpus.train_per_class", c.train_per_class.to_string()),
            ("corpus.test_per_class", c.test_per_class.to_string()),
            ("corpus.duration_s", c.duration_s.to_string()),
            ("corpus.sample_rate", c.sample_rate.to_string()),
            ("corpus.template_spacing_hz", c.layout.spacing_hz.to_string()),
            ("corpus.template_sweep_hz", c.layout.sweep_hz.to_string()),
            ("mixing.clean_fraction", m.clean_fraction.to_string()),
            ("mixing.pretrain_count", m.pretrain_count.to_string()),
            ("mixing.eval_2mix_count", m.eval_2mix_count.to_string()),
            ("mixing.eval_3mix_count", m.eval_3mix_count.to_string()),
            ("tokenizer.codebook_size", t.codebook_size.to_string()),
            ("tokenizer.kmeans_iters", t.kmeans_iters.to_string()),
            ("tokenizer.window", f.window.to_string()),
            ("tokenizer.hop", f.hop.to_string()),
            ("tokenizer.n_fft", f.n_fft.to_string()),
            ("tokenizer.n_mels", f.n_mels.to_string()),
            ("tokenizer.log_floor", f.log_floor.to_string()),
            ("backbone.local_channels", list(&b.local_channels)),
            ("backbone.local_kernels", list(&b.local_kernels)),
            ("backbone.model_dim", b.model_dim.to_string()),
            ("backbone.layers", b.layers.to_string()),
            ("backbone.heads", b.heads.to_string()),
            ("backbone.ffn_dim", b.ffn_dim.to_string()),
            ("backbone.dropout", b.dropout.to_string()),
            ("backbone.temperature", b.temperature.to_string()),
            ("backbone.positional_encoding", b.positional_encoding.to_string()),
            ("pretrain.modes", list(&p.modes)),
            ("pretrain.steps", p.steps.to_string()),
            ("pretrain.learning_rate", p.learning_rate.to_string()),
            ("pretrain.warmup_steps", p.warmup_steps.to_string()),
            ("pretrain.batch_size", p.batch_size.to_string()),
            ("pretrain.checkpoint_every", p.checkpoint_every.to_string()),
            ("pretrain.mask_start_prob", p.mask_start_prob.to_string()),
            ("pretrain.mask_span", p.mask_span.to_string()),
            ("adapt.strategies", list(&a.strategies)),
            ("adapt.shots", list(&a.shots)),
            ("adapt.repeats", a.repeats.to_string()),
            ("adapt.epochs", a.epochs.to_string()),
            ("adapt.learning_rate", a.learning_rate.to_string()),
            ("adapt.mixup_alpha", a.mixup_alpha.to_string()),
            ("adapt.batch_size", a.batch_size.to_string()),
            ("adapt.hidden", a.hidden.to_string()),
            ("eval.conditions", list(&self.eval.conditions)),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = parse_one(key, v)?,
            "paths.corpus" => self.corpus_dir = PathBuf::from(v),
            "paths.workdir" => self.workdir = PathBuf::from(v),
            "corpus.n_keywords" => self.corpus.n_keywords = parse_one(key, v)?,
            "corpus.train_per_class" => self.corpus.train_per_class = parse_one(key, v)?,
            "corpus.test_per_class" => self.corpus.test_per_class = parse_one(key, v)?,
            "corpus.duration_s" => self.corpus.duration_s = parse_one(key, v)?,
            "corpus.sample_rate" => self.corpus.sample_rate = parse_one(key, v)?,
            "corpus.template_spacing_hz" => self.corpus.layout.spacing_hz = parse_one(key, v)?,
            "corpus.template_sweep_hz" => self.corpus.layout.sweep_hz = parse_one(key, v)?,
            "mixing.clean_fraction" => self.mixing.clean_fraction = parse_one(key, v)?,
            "mixing.pretrain_count" => self.mixing.pretrain_count = parse_one(key, v)?,
            "mixing.eval_2mix_count" => self.mixing.eval_2mix_count = parse_one(key, v)?,
            "mixing.eval_3mix_count" => self.mixing.eval_3mix_count = parse_one(key, v)?,
            "tokenizer.codebook_size" => self.tokenizer.codebook_size = parse_one(key, v)?,
            "tokenizer.kmeans_iters" => self.tokenizer.kmeans_iters = parse_one(key, v)?,
            "tokenizer.window" => self.tokenizer.features.window = parse_one(key, v)?,
            "tokenizer.hop" => self.tokenizer.features.hop = parse_one(key, v)?,
            "tokenizer.n_fft" => self.tokenizer.features.n_fft = parse_one(key, v)?,
            "tokenizer.n_mels" => self.tokenizer.features.n_mels = parse_one(key, v)?,
            "tokenizer.log_floor" => self.tokenizer.features.log_floor = parse_one(key, v)?,
            "backbone.local_channels" => self.backbone.local_channels = parse_list(key, v)?,
            "backbone.local_kernels" => self.backbone.local_kernels = parse_list(key, v)?,
            "backbone.model_dim" => self.backbone.model_dim = parse_one(key, v)?,
            "backbone.layers" => self.backbone.layers = parse_one(key, v)?,
            "backbone.heads" => self.backbone.heads = parse_one(key, v)?,
            "backbone.ffn_dim" => self.backbone.ffn_dim = parse_one(key, v)?,
            "backbone.dropout" => self.backbone.dropout = parse_one(key, v)?,
            "backbone.temperature" => self.backbone.temperature = parse_one(key, v)?,
            "backbone.positional_encoding" => self.backbone.positional_encoding = parse_one(key, v)?,
            "pretrain.modes" => self.pretrain.modes = parse_list(key, v)?,
            "pretrain.steps" => self.pretrain.steps = parse_one(key, v)?,
            "pretrain.learning_rate" => self.pretrain.learning_rate = parse_one(key, v)?,
            "pretrain.warmup_steps" => self.pretrain.warmup_steps = parse_one(key, v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse_one(key, v)?,
            "pretrain.checkpoint_every" => self.pretrain.checkpoint_every = parse_one(key, v)?,
            "pretrain.mask_start_prob" => self.pretrain.mask_start_prob = parse_one(key, v)?,
            "pretrain.mask_span" => self.pretrain.mask_span = parse_one(key, v)?,
            "adapt.strategies" => self.adapt.strategies = parse_list(key, v)?,
            "adapt.shots" => self.adapt.shots = parse_list(key, v)?,
            "adapt.repeats" => self.adapt.repeats = parse_one(key, v)?,
            "adapt.epochs" => self.adapt.epochs = parse_one(key, v)?,
            "adapt.learning_rate" => self.adapt.learning_rate = parse_one(key, v)?,
            "adapt.mixup_alpha" => self.adapt.mixup_alpha = parse_one(key, v)?,
            "adapt.batch_size" => self.adapt.batch_size = parse_one(key, v)?,
            "adapt.hidden" => self.adapt.hidden = parse_one(key, v)?,
            "eval.conditions" => self.eval.conditions = parse_list(key, v)?,
            _ => return Err(invalid(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the defaults and validates.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                key: format!("line {}", i + 1),
                constraint: "expected `key = value`".into(),
            })?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn echo(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        if c.n_keywords < 3 {
            return Err(invalid("corpus.n_keywords", "must be >= 3 (3-mix tests need three keywords)"));
        }
        if c.train_per_class == 0 || c.test_per_class == 0 {
            return Err(invalid("corpus.train_per_class", "per-class counts must be positive"));
        }
        if !(c.duration_s > 0.0) || c.sample_rate == 0 {
            return Err(invalid("corpus.duration_s", "duration and sample rate must be positive"));
        }
        if let Err(e) = crate::corpus::chirp_template(0, c.n_keywords, &c.layout) {
            return Err(invalid("corpus.template_spacing_hz", &e.to_string()));
        }
        if !(0.0..=1.0).contains(&self.mixing.clean_fraction) {
            return Err(invalid("mixing.clean_fraction", "must lie in [0, 1]"));
        }
        if self.mixing.pretrain_count == 0 {
            return Err(invalid("mixing.pretrain_count", "must be positive"));
        }
        if self.tokenizer.codebook_size < 2 {
            return Err(invalid("tokenizer.codebook_size", "codebook needs C >= 2"));
        }
        if self.tokenizer.features.sample_rate != c.sample_rate {
            return Err(invalid("tokenizer", "feature sample rate must equal corpus.sample_rate"));
        }
        crate::tokenizer::FeatureExtractor::new(self.tokenizer.features.clone()).map_err(|e| Error::Config {
            key: "tokenizer".into(),
            constraint: e.to_string(),
        })?;
        self.backbone_config().validate()?;
        let p = &self.pretrain;
        if p.modes.is_empty() {
            return Err(invalid("pretrain.modes", "at least one mode"));
        }
        if !(p.learning_rate > 0.0) || p.batch_size == 0 {
            return Err(invalid("pretrain.learning_rate", "learning rate and batch size must be positive"));
        }
        if !(p.mask_start_prob > 0.0 && p.mask_start_prob < 1.0) || p.mask_span == 0 {
            return Err(invalid("pretrain.mask_start_prob", "must lie in (0, 1) with a positive span"));
        }
        if self.adapt.strategies.is_empty() || self.adapt.shots.is_empty() {
            return Err(invalid("adapt.strategies", "at least one strategy and one shot count"));
        }
        if self.adapt.shots.iter().any(|&s| s > c.train_per_class) {
            return Err(invalid("adapt.shots", "cannot exceed corpus.train_per_class"));
        }
        if self.adapt.repeats == 0 {
            return Err(invalid("adapt.repeats", "must be positive"));
        }
        for s in &self.adapt.shots {
            self.adapt_config(Strategy::Clean, *s).validate()?;
        }
        if self.eval.conditions.is_empty() {
            return Err(invalid("eval.conditions", "at least one condition"));
        }
        Ok(())
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        let b = &self.backbone;
        BackboneConfig {
            input_dim: self.tokenizer.features.n_mels,
            local_channels: b.local_channels.clone(),
            local_kernels: b.local_kernels.clone(),
            model_dim: b.model_dim,
            layers: b.layers,
            heads: b.heads,
            ffn_dim: b.ffn_dim,
            dropout: b.dropout,
            codebook_size: self.tokenizer.codebook_size,
            temperature: b.temperature,
            positional_encoding: b.positional_encoding,
        }
    }

    pub fn pretrain_config(&self, mode: Mode, seed: u64) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            mode,
            steps: p.steps,
            learning_rate: p.learning_rate,
            warmup_steps: p.warmup_steps,
            batch_size: p.batch_size,
            seed,
            checkpoint_every: p.checkpoint_every,
            mask: MaskSpec {
                start_prob: p.mask_start_prob,
                span_length: p.mask_span,
            },
        }
    }

    pub fn adapt_config(&self, strategy: Strategy, shots: usize) -> AdaptConfig {
        let a = &self.adapt;
        AdaptConfig {
            strategy,
            shots,
            repeats: a.repeats,
            epochs: a.epochs,
            learning_rate: a.learning_rate,
            mixup_alpha: a.mixup_alpha,
            batch_size: a.batch_size,
            hidden: a.hidden,
            seed: self.seed,
        }
    }

    /// Corpus directory after applying the workdir default.
    pub fn corpus_root(&self) -> PathBuf {
        if self.corpus_dir.as_os_str().is_empty() {
            self.workdir.join("data")
        } else {
            self.corpus_dir.clone()
        }
    }

    /// SHA-256 over the seed and every key whose section is in `sections`.
    pub fn section_hash(&self, sections: &[&str]) -> String {
        let mut h = Sha256::new();
        h.update(format!("seed = {}\n", self.seed));
        for (k, v) in self.entries() {
            let section = k.split('.').next().unwrap_or("");
            if sections.contains(&section) {
                h.update(format!("{k} = {v}\n"));
            }
        }
        hex::encode(h.finalize())
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            path: path.to_path_buf(),
            what: "config file".into(),
        },
        _ => Error::Io(e),
    })?;
    let cfg = ExperimentConfig::parse(&text)?;
    log::info!("effective config:\n{}", cfg.echo());
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_echo_temperature() {
        let cfg = ExperimentConfig::parse("# nothing\n").unwrap();
        assert!(cfg.echo().contains("backbone.temperature = 0.1\n"));
    }

    #[test]
    fn codebook_of_one_is_rejected() {
        match ExperimentConfig::parse("tokenizer.codebook_size = 1") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "tokenizer.codebook_size"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn echo_round_trip() {
        let cfg = ExperimentConfig::parse(
            "seed = 3\npretrain.modes = mt_bce\nadapt.shots = 5,3\nbackbone.dropout = 0.25\npaths.workdir = /tmp/x y",
        )
        .unwrap();
        let again = ExperimentConfig::parse(&cfg.echo()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.echo(), cfg.echo());
    }

    #[test]
    fn unknown_and_bad_values() {
        assert!(ExperimentConfig::parse("nope = 1").is_err());
        assert!(ExperimentConfig::parse("pretrain.modes = bogus").is_err());
        assert!(ExperimentConfig::parse("backbone.heads = 5").is_err());
        assert!(ExperimentConfig::parse("seed 4").is_err());
    }

    #[test]
    fn section_hash_tracks_sections() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.adapt.epochs = 20;
        assert_eq!(a.section_hash(&["corpus"]), b.section_hash(&["corpus"]));
        assert_ne!(a.section_hash(&["adapt"]), b.section_hash(&["adapt"]));
    }
}
