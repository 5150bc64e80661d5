//! Few-shot keyword adaptation on top of a frozen backbone.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Beta, Distribution};

use crate::backbone::checkpoint::TensorArchive;
use crate::backbone::layers::{fill, Linear};
use crate::backbone::{sigmoid, Backbone, Params};
use crate::error::{Error, Result};
use crate::mixing::{mix_waveforms, one_hot, sample_scales, union_labels, Waveform};
use crate::optim::{Adam, AdamConfig};
use crate::rng::seeded;
use crate::tokenizer::FeatureExtractor;

/// Number of trailing epoch checkpoints averaged into the final head.
pub const AVERAGE_LAST: usize = 10;
pub const HIDDEN_WIDTH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Clean,
    Mixup,
    Mt,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Clean, Strategy::Mixup, Strategy::Mt];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Clean => "clean",
            Strategy::Mixup => "mixup",
            Strategy::Mt => "mt",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Strategy::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown strategy `{s}` (expected clean, mixup or mt)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    pub strategy: Strategy,
    pub shots: usize,
    pub repeats: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub mixup_alpha: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl AdaptConfig {
    pub fn new(strategy: Strategy, shots: usize, seed: u64) -> Self {
        Self {
            strategy,
            shots,
            repeats: 5,
            epochs: 50,
            learning_rate: 1e-3,
            mixup_alpha: 1.0,
            batch_size: 16,
            hidden: HIDDEN_WIDTH,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, c: &str| {
            Err(Error::Config {
                key: format!("adapt.{key}"),
                constraint: c.into(),
            })
        };
        if self.epochs < AVERAGE_LAST {
            return bad("epochs", "must be >= 10 for checkpoint averaging");
        }
        if self.shots == 0 {
            return bad("shots", "must be positive");
        }
        if !(self.mixup_alpha > 0.0) {
            return bad("mixup_alpha", "must be > 0");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate", "must be > 0");
        }
        if self.batch_size == 0 || self.hidden == 0 {
            return bad("batch_size", "batch size and hidden width must be positive");
        }
        Ok(())
    }
}

/// Two linear layers with a ReLU between them, producing K presence logits.
#[derive(Debug, Clone, PartialEq)]
pub struct KwsHead {
    pub layer1: Linear,
    pub layer2: Linear,
}

pub struct KwsHeadCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
}

impl KwsHead {
    pub fn new(dim: usize, hidden: usize, keywords: usize, seed: u64) -> Self {
        let mut rng = seeded(seed, &[0x4b57_5348]);
        Self {
            layer1: Linear::new(dim, hidden, &mut rng),
            layer2: Linear::new(hidden, keywords, &mut rng),
        }
    }

    pub fn keywords(&self) -> usize {
        self.layer2.bias.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer1.weight.nrows()
    }

    pub fn logits(&self, x: &Array2<f64>) -> (Array2<f64>, KwsHeadCache) {
        let pre = self.layer1.forward(x);
        let hidden = pre.mapv(|v| v.max(0.0));
        let out = self.layer2.forward(&hidden);
        (
            out,
            KwsHeadCache {
                input: x.clone(),
                pre,
                hidden,
            },
        )
    }

    /// Presence probabilities for N pooled embeddings (N×K).
    pub fn probabilities(&self, x: &Array2<f64>) -> Array2<f64> {
        self.logits(x).0.mapv(sigmoid)
    }

    pub fn backward(&self, c: &KwsHeadCache, dlogits: &Array2<f64>, grad: &mut KwsHead) {
        let dh = self.layer2.backward(&c.hidden, dlogits, &mut grad.layer2);
        let dpre = dh * &c.pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        self.layer1.backward(&c.input, &dpre, &mut grad.layer1);
    }

    pub fn to_archive(&self, metadata: &str) -> TensorArchive {
        let mut a = TensorArchive {
            metadata: metadata.to_string(),
            tensors: Vec::new(),
        };
        self.visit("head", &mut |name, shape, data| a.push(name, shape, data));
        a
    }

    pub fn from_archive(a: &TensorArchive) -> Result<KwsHead> {
        let get2 = |name: &str| -> Result<Array2<f64>> {
            let t = a.get(name)?;
            if t.shape.len() != 2 {
                return Err(Error::Checkpoint(format!("`{name}` must be rank 2")));
            }
            Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone())
                .map_err(|e| Error::Checkpoint(e.to_string()))
        };
        let get1 = |name: &str| -> Result<Array1<f64>> { Ok(Array1::from(a.get(name)?.data.clone())) };
        let layer1 = Linear {
            weight: get2("head.layer1.weight")?,
            bias: get1("head.layer1.bias")?,
        };
        let layer2 = Linear {
            weight: get2("head.layer2.weight")?,
            bias: get1("head.layer2.bias")?,
        };
        if layer1.weight.ncols() != layer1.bias.len()
            || layer2.weight.ncols() != layer2.bias.len()
            || layer1.weight.ncols() != layer2.weight.nrows()
        {
            return Err(Error::Checkpoint("inconsistent head shapes".into()));
        }
        Ok(KwsHead { layer1, layer2 })
    }

    pub fn save(&self, path: &Path, metadata: &str) -> Result<()> {
        self.to_archive(metadata).save(path)
    }

    pub fn load(path: &Path) -> Result<KwsHead> {
        KwsHead::from_archive(&TensorArchive::load(path)?)
    }
}

impl Params for KwsHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        self.layer1.visit(&format!("{prefix}.layer1"), f);
        self.layer2.visit(&format!("{prefix}.layer2"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.layer1.visit_mut(f);
        self.layer2.visit_mut(f);
    }
}

/// A clean few-shot utterance with its keyword index.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledUtterance {
    pub id: String,
    pub waveform: Waveform,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationExample {
    pub id: String,
    pub waveform: Waveform,
    /// K-dimensional target, binary or soft.
    pub label: Vec<f64>,
}

fn as_f64(label: &[bool]) -> Vec<f64> {
    label.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

/// `(λ·x_i + (1−λ)·x_j, λ·y_i + (1−λ)·y_j)`, truncated to the shorter input.
pub fn mixup_pair(xi: &Waveform, yi: &[f64], xj: &Waveform, yj: &[f64], lambda: f64) -> Result<(Waveform, Vec<f64>)> {
    if xi.sample_rate() != xj.sample_rate() {
        return Err(Error::Incompatible("sample rates differ".into()));
    }
    if yi.len() != yj.len() {
        return Err(Error::Precondition("label lengths differ".into()));
    }
    let n = xi.len().min(xj.len());
    let samples = (0..n)
        .map(|t| lambda * xi.samples()[t] + (1.0 - lambda) * xj.samples()[t])
        .collect();
    let label = yi.iter().zip(yj).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect();
    Ok((Waveform::new(samples, xi.sample_rate())?, label))
}

/// Expands a few-shot subset into training examples for `strategy`.
pub fn build_adaptation_examples(
    subset: &[LabeledUtterance],
    keywords: usize,
    strategy: Strategy,
    mixup_alpha: f64,
    seed: u64,
) -> Result<Vec<AdaptationExample>> {
    if subset.is_empty() {
        return Err(Error::InsufficientData("empty few-shot subset".into()));
    }
    if let Some(u) = subset.iter().find(|u| u.class >= keywords) {
        return Err(Error::Precondition(format!("{}: class {} outside {keywords} keywords", u.id, u.class)));
    }
    let clean = || {
        subset.iter().map(|u| AdaptationExample {
            id: u.id.clone(),
            waveform: u.waveform.clone(),
            label: as_f64(&one_hot(u.class, keywords)),
        })
    };
    if strategy == Strategy::Clean {
        return Ok(clean().collect());
    }
    if subset.len() < 2 {
        return Err(Error::InsufficientData("mixing strategies need at least two utterances".into()));
    }
    let mut rng = seeded(seed, &[0x4d49_5855, strategy as u64]);
    let mut out = Vec::new();
    match strategy {
        Strategy::Mixup => {
            let beta = Beta::new(mixup_alpha, mixup_alpha)
                .map_err(|e| Error::Precondition(format!("mixup alpha: {e}")))?;
            for k in 0..2 * subset.len() {
                let i = rng.gen_range(0..subset.len());
                let j = (i + rng.gen_range(1..subset.len())) % subset.len();
                let lambda = beta.sample(&mut rng);
                let (a, b) = (&subset[i], &subset[j]);
                let (w, label) = mixup_pair(
                    &a.waveform,
                    &as_f64(&one_hot(a.class, keywords)),
                    &b.waveform,
                    &as_f64(&one_hot(b.class, keywords)),
                    lambda,
                )?;
                out.push(AdaptationExample {
                    id: format!("mixup{k:04}:{}+{}", a.id, b.id),
                    waveform: w,
                    label,
                });
            }
        }
        Strategy::Mt => {
            let classes: std::collections::BTreeSet<usize> = subset.iter().map(|u| u.class).collect();
            if classes.len() < 2 {
                return Err(Error::InsufficientData("2-mix construction needs two distinct keywords".into()));
            }
            out.extend(clean());
            // Equal numbers of clean and 2-mix examples.
            for k in 0..subset.len() {
                let i = rng.gen_range(0..subset.len());
                let j = loop {
                    let j = rng.gen_range(0..subset.len());
                    if subset[j].class != subset[i].class {
                        break j;
                    }
                };
                let scales = sample_scales(2, &mut rng);
                let mut pair = [(&subset[i], scales[0]), (&subset[j], scales[1])];
                pair.sort_by(|a, b| a.0.id.cmp(&b.0.id));
                let w = mix_waveforms(&[&pair[0].0.waveform, &pair[1].0.waveform], &[pair[0].1, pair[1].1])?;
                let label = union_labels(&[
                    &one_hot(pair[0].0.class, keywords),
                    &one_hot(pair[1].0.class, keywords),
                ])?;
                out.push(AdaptationExample {
                    id: format!("mt{k:04}:{}+{}", pair[0].0.id, pair[1].0.id),
                    waveform: w,
                    label: as_f64(&label),
                });
            }
        }
        Strategy::Clean => unreachable!(),
    }
    Ok(out)
}

/// Mean over frames of a T×d matrix.
pub fn mean_pool(o: &Array2<f64>) -> Result<Array1<f64>> {
    o.mean_axis(Axis(0))
        .ok_or_else(|| Error::Precondition("cannot pool zero frames".into()))
}

/// Frozen, unmasked utterance embedding.
pub fn embed_waveform(w: &Waveform, backbone: &Backbone, extractor: &FeatureExtractor) -> Result<Array1<f64>> {
    let f = extractor.extract(w, "")?;
    mean_pool(&backbone.encode(&f.frames)?)
}

pub fn embed_all(waves: &[&Waveform], backbone: &Backbone, extractor: &FeatureExtractor) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((waves.len(), backbone.config.model_dim));
    for (i, w) in waves.iter().enumerate() {
        out.row_mut(i).assign(&embed_waveform(w, backbone, extractor)?);
    }
    Ok(out)
}

pub fn score_utterance(
    w: &Waveform,
    backbone: &Backbone,
    head: &KwsHead,
    extractor: &FeatureExtractor,
) -> Result<Vec<f64>> {
    let e = embed_waveform(w, backbone, extractor)?.insert_axis(Axis(0));
    Ok(head.probabilities(&e).row(0).to_vec())
}

/// Mean sigmoid BCE over outputs and examples.
pub fn bce_loss(probs_logits: &Array2<f64>, labels: &Array2<f64>) -> f64 {
    let n = probs_logits.len().max(1) as f64;
    probs_logits
        .iter()
        .zip(labels.iter())
        .map(|(&z, &y)| {
            // log(1+e^z) − y·z, computed stably.
            z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z
        })
        .sum::<f64>()
        / n
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptRun {
    /// Head after each epoch.
    pub heads: Vec<KwsHead>,
    /// Mean training BCE of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains a fresh head on precomputed embeddings (N×d) and labels (N×K).
pub fn train_head(embeddings: &Array2<f64>, labels: &Array2<f64>, config: &AdaptConfig) -> Result<AdaptRun> {
    config.validate()?;
    let n = embeddings.nrows();
    if n == 0 || labels.nrows() != n {
        return Err(Error::InsufficientData("no adaptation examples".into()));
    }
    let mut head = KwsHead::new(embeddings.ncols(), config.hidden, labels.ncols(), config.seed);
    let mut grad = head.clone();
    let mut opt = Adam::new(AdamConfig::STANDARD, &head);
    let mut rng = seeded(config.seed, &[0x5348_5546]);
    let mut order: Vec<usize> = (0..n).collect();
    let mut run = AdaptRun {
        heads: Vec::with_capacity(config.epochs),
        epoch_losses: Vec::with_capacity(config.epochs),
    };
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let x = embeddings.select(Axis(0), chunk);
            let y = labels.select(Axis(0), chunk);
            let (z, cache) = head.logits(&x);
            let loss = bce_loss(&z, &y);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: epoch,
                    batch: chunk.iter().map(|i| i.to_string()).collect(),
                    detail: "adaptation BCE".into(),
                });
            }
            let dz = (z.mapv(sigmoid) - &y) / z.len() as f64;
            fill(&mut grad, 0.0);
            head.backward(&cache, &dz, &mut grad);
            opt.step(&mut head, &grad, config.learning_rate);
            loss_sum += loss;
            batches += 1;
        }
        run.epoch_losses.push(loss_sum / batches as f64);
        run.heads.push(head.clone());
    }
    Ok(run)
}

/// Trains a head for `examples` with `backbone` frozen; fails if the backbone changed.
pub fn adapt_run(
    backbone: &Backbone,
    examples: &[AdaptationExample],
    extractor: &FeatureExtractor,
    config: &AdaptConfig,
) -> Result<AdaptRun> {
    let before = backbone.digest()?;
    let waves: Vec<&Waveform> = examples.iter().map(|e| &e.waveform).collect();
    let emb = embed_all(&waves, backbone, extractor)?;
    let run = train_head(&emb, &labels_matrix(examples)?, config)?;
    if backbone.digest()? != before {
        return Err(Error::Integrity("backbone changed during adaptation".into()));
    }
    Ok(run)
}

pub fn labels_matrix(examples: &[AdaptationExample]) -> Result<Array2<f64>> {
    let k = examples
        .first()
        .ok_or_else(|| Error::InsufficientData("no adaptation examples".into()))?
        .label
        .len();
    let mut out = Array2::zeros((examples.len(), k));
    for (i, e) in examples.iter().enumerate() {
        if e.label.len() != k {
            return Err(Error::Precondition(format!("{}: label width differs", e.id)));
        }
        out.row_mut(i).assign(&Array1::from(e.label.clone()));
    }
    Ok(out)
}

/// Parameterwise mean of the last ten heads.
pub fn average_checkpoints(heads: &[KwsHead]) -> Result<KwsHead> {
    if heads.len() < AVERAGE_LAST {
        return Err(Error::Precondition(format!(
            "checkpoint averaging needs {AVERAGE_LAST} heads, got {}",
            heads.len()
        )));
    }
    let window = &heads[heads.len() - AVERAGE_LAST..];
    // Offsets from the first head keep identical inputs exact.
    let base = crate::backbone::flatten(&window[0]);
    let mut acc = vec![0.0; base.len()];
    for h in window {
        for (a, (v, b)) in acc.iter_mut().zip(crate::backbone::flatten(h).iter().zip(&base)) {
            *a += v - b;
        }
    }
    let mut avg = window[0].clone();
    let mut i = 0;
    avg.visit_mut(&mut |p| {
        for v in p.iter_mut() {
            *v = base[i] + acc[i] / AVERAGE_LAST as f64;
            i += 1;
        }
    });
    Ok(avg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(seed: u64, n: usize) -> Waveform {
        let mut rng = seeded(seed, &[]);
        Waveform::new((0..n).map(|_| rng.gen_range(-0.3..0.3)).collect(), 16000).unwrap()
    }

    fn subset() -> Vec<LabeledUtterance> {
        (0..6)
            .map(|i| LabeledUtterance {
                id: format!("u{i}"),
                waveform: wave(i, 800),
                class: i as usize % 3,
            })
            .collect()
    }

    #[test]
    fn clean_labels_are_one_hot() {
        let ex = build_adaptation_examples(&subset(), 3, Strategy::Clean, 1.0, 0).unwrap();
        assert_eq!(ex.len(), 6);
        assert!(ex.iter().all(|e| e.label.iter().sum::<f64>() == 1.0));
    }

    #[test]
    fn mixup_labels_sum_to_one() {
        let ex = build_adaptation_examples(&subset(), 3, Strategy::Mixup, 1.0, 4).unwrap();
        assert_eq!(ex.len(), 12);
        for e in &ex {
            assert!((e.label.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mixup_lambda_one_returns_first() {
        let s = subset();
        let (w, y) = mixup_pair(&s[0].waveform, &[1.0, 0.0], &s[1].waveform, &[0.0, 1.0], 1.0).unwrap();
        assert_eq!(w, s[0].waveform);
        assert_eq!(y, vec![1.0, 0.0]);
    }

    #[test]
    fn mt_labels_have_cardinality_popcount() {
        let ex = build_adaptation_examples(&subset(), 3, Strategy::Mt, 1.0, 9).unwrap();
        assert_eq!(ex.len(), 12);
        let (clean, mixed): (Vec<_>, Vec<_>) = ex.iter().partition(|e| e.id.starts_with('u'));
        assert!(clean.iter().all(|e| e.label.iter().sum::<f64>() == 1.0));
        assert!(mixed.iter().all(|e| e.label.iter().sum::<f64>() == 2.0));
    }

    #[test]
    fn mixing_needs_two() {
        let s = &subset()[..1];
        assert!(build_adaptation_examples(s, 3, Strategy::Mixup, 1.0, 0).is_err());
        assert!(build_adaptation_examples(s, 3, Strategy::Clean, 1.0, 0).is_ok());
    }

    #[test]
    fn averaging() {
        let base = KwsHead::new(3, 4, 2, 1);
        let mut heads = vec![base.clone(); 10];
        assert_eq!(average_checkpoints(&heads).unwrap(), base);
        heads[0].layer2.bias[0] = 0.0;
        heads[1].layer2.bias[0] = 2.0;
        for h in &mut heads[2..] {
            h.layer2.bias[0] = 1.0;
        }
        assert_eq!(average_checkpoints(&heads).unwrap().layer2.bias[0], 1.0);
        assert!(average_checkpoints(&heads[..9]).is_err());
    }

    #[test]
    fn zero_head_scores_half() {
        let mut h = KwsHead::new(4, 5, 3, 0);
        fill(&mut h, 0.0);
        let p = h.probabilities(&Array2::ones((2, 4)));
        assert!(p.iter().all(|v| *v == 0.5));
    }

    #[test]
    fn memorizes_one_example() {
        let emb = Array2::from_shape_vec((1, 4), vec![0.3, -0.2, 0.5, 0.1]).unwrap();
        let labels = Array2::from_shape_vec((1, 3), vec![0.0, 1.0, 0.0]).unwrap();
        let mut cfg = AdaptConfig::new(Strategy::Clean, 1, 3);
        cfg.epochs = 300;
        let run = train_head(&emb, &labels, &cfg).unwrap();
        assert!(*run.epoch_losses.last().unwrap() < 0.05);
        let again = train_head(&emb, &labels, &cfg).unwrap();
        assert_eq!(run, again);
    }

    #[test]
    fn head_archive_round_trip() {
        let h = KwsHead::new(4, 6, 3, 2);
        let back = KwsHead::from_archive(&TensorArchive::from_bytes(&h.to_archive("{}").to_bytes()).unwrap()).unwrap();
        assert_eq!(back, h);
    }
}
