//! Span masking, the three masked-prediction objectives, and the training loop.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::backbone::layers::fill;
use crate::backbone::{sigmoid, Backbone, HiddenSequence, Params, PredictionHead};
use crate::error::{Error, Result};
use crate::optim::{learning_rate, Adam, AdamConfig};
use crate::rng::{seeded, Rng};
use crate::tokenizer::{NHotTargets, TokenSequence};

/// Lower clamp on probabilities inside the BCE logarithms.
pub const LOG_CLAMP: f64 = 1e-12;
/// Attempts at drawing a non-empty mask before forcing a single span.
pub const MASK_RETRIES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub start_prob: f64,
    pub span_length: usize,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            start_prob: 0.08,
            span_length: 10,
        }
    }
}

/// Sorted masked frame indices; never empty.
pub fn sample_mask(t: usize, start_prob: f64, span: usize, rng: &mut Rng) -> Vec<usize> {
    assert!(t >= 1, "cannot mask an empty sequence");
    let span = span.max(1);
    for _ in 0..MASK_RETRIES {
        let mut masked = vec![false; t];
        for start in 0..t {
            if rng.gen_bool(start_prob.clamp(0.0, 1.0)) {
                masked[start..(start + span).min(t)].fill(true);
            }
        }
        let idx: Vec<usize> = (0..t).filter(|&i| masked[i]).collect();
        if !idx.is_empty() {
            return idx;
        }
    }
    let start = rng.gen_range(0..t);
    (start..(start + span).min(t)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    CleanNll,
    MtBce,
    MpcNll,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::CleanNll, Mode::MtBce, Mode::MpcNll];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::CleanNll => "clean_nll",
            Mode::MtBce => "mt_bce",
            Mode::MpcNll => "mpc_nll",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (expected clean_nll, mt_bce or mpc_nll)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    /// Raw sum over masked frames.
    pub total: f64,
    pub masked_frame_count: usize,
}

impl LossValue {
    pub fn per_frame(&self) -> f64 {
        self.total / self.masked_frame_count.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Tokens(TokenSequence),
    NHot(NHotTargets),
}

impl Targets {
    pub fn frames(&self) -> usize {
        match self {
            Targets::Tokens(t) => t.len(),
            Targets::NHot(n) => n.frames(),
        }
    }
}

fn masked_rows(o: &HiddenSequence, frames: usize) -> Result<Array2<f64>> {
    if frames != o.len() {
        return Err(Error::Precondition(format!(
            "{frames} target frames for {} hidden frames",
            o.len()
        )));
    }
    if o.masked_positions.is_empty() {
        return Err(Error::Precondition("loss needs at least one masked frame".into()));
    }
    let d = o.vectors.ncols();
    let mut rows = Array2::zeros((o.masked_positions.len(), d));
    for (r, &t) in o.masked_positions.iter().enumerate() {
        rows.row_mut(r).assign(&o.vectors.row(t));
    }
    Ok(rows)
}

fn scatter(o: &HiddenSequence, d_rows: &Array2<f64>) -> Array2<f64> {
    let mut d = Array2::zeros(o.vectors.raw_dim());
    for (r, &t) in o.masked_positions.iter().enumerate() {
        d.row_mut(t).assign(&d_rows.row(r));
    }
    d
}

fn nll(o: &HiddenSequence, targets: &TokenSequence, head: &PredictionHead, grad: Option<&mut PredictionHead>) -> Result<(LossValue, Option<Array2<f64>>)> {
    let rows = masked_rows(o, targets.len())?;
    let (scores, cache) = head.scores(&rows);
    let mut total = 0.0;
    let mut dscores = Array2::zeros(scores.raw_dim());
    for (r, &t) in o.masked_positions.iter().enumerate() {
        let z = targets.tokens[t];
        if z >= head.units() {
            return Err(Error::Precondition(format!("target {z} outside codebook")));
        }
        let s = scores.row(r);
        let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - s[z];
        for c in 0..s.len() {
            dscores[[r, c]] = (s[c] - lse).exp() - if c == z { 1.0 } else { 0.0 };
        }
    }
    let value = LossValue {
        total,
        masked_frame_count: rows.nrows(),
    };
    Ok(match grad {
        Some(g) => {
            let d_rows = head.backward(&cache, &dscores, g);
            (value, Some(scatter(o, &d_rows)))
        }
        None => (value, None),
    })
}

fn bce(o: &HiddenSequence, targets: &NHotTargets, head: &PredictionHead, grad: Option<&mut PredictionHead>) -> Result<(LossValue, Option<Array2<f64>>)> {
    let rows = masked_rows(o, targets.frames())?;
    if targets.units() != head.units() {
        return Err(Error::Precondition("n-hot width does not match codebook".into()));
    }
    let (scores, cache) = head.scores(&rows);
    let mut total = 0.0;
    let mut dscores = Array2::zeros(scores.raw_dim());
    for (r, &t) in o.masked_positions.iter().enumerate() {
        let z = targets.row(t);
        for c in 0..scores.ncols() {
            let p = sigmoid(scores[[r, c]]);
            let q = 1.0 - p;
            // d/ds log(max(p, eps)) is q when the clamp is inactive, else 0.
            if z[c] {
                total -= p.max(LOG_CLAMP).ln();
                dscores[[r, c]] = if p > LOG_CLAMP { -q } else { 0.0 };
            } else {
                total -= q.max(LOG_CLAMP).ln();
                dscores[[r, c]] = if q > LOG_CLAMP { p } else { 0.0 };
            }
        }
    }
    let value = LossValue {
        total,
        masked_frame_count: rows.nrows(),
    };
    Ok(match grad {
        Some(g) => {
            let d_rows = head.backward(&cache, &dscores, g);
            (value, Some(scatter(o, &d_rows)))
        }
        None => (value, None),
    })
}

/// Softmax NLL of the clean token at each masked frame.
pub fn loss_clean_nll(o: &HiddenSequence, targets: &TokenSequence, head: &PredictionHead) -> Result<LossValue> {
    Ok(nll(o, targets, head, None)?.0)
}

/// Per-unit sigmoid BCE against n-hot targets at each masked frame.
pub fn loss_mt_bce(o: &HiddenSequence, targets: &NHotTargets, head: &PredictionHead) -> Result<LossValue> {
    Ok(bce(o, targets, head, None)?.0)
}

/// Softmax NLL against tokens of the mixed signal.
pub fn loss_mpc_nll(o: &HiddenSequence, mixture_targets: &TokenSequence, head: &PredictionHead) -> Result<LossValue> {
    Ok(nll(o, mixture_targets, head, None)?.0)
}

/// Loss for `mode` plus ∂loss/∂O; head parameter gradients are accumulated into `grad`.
pub fn loss_with_grad(
    mode: Mode,
    o: &HiddenSequence,
    targets: &Targets,
    head: &PredictionHead,
    grad: &mut PredictionHead,
) -> Result<(LossValue, Array2<f64>)> {
    let (v, d) = match (mode, targets) {
        (Mode::CleanNll | Mode::MpcNll, Targets::Tokens(t)) => nll(o, t, head, Some(grad))?,
        (Mode::MtBce, Targets::NHot(n)) => bce(o, n, head, Some(grad))?,
        _ => return Err(incompatible_targets(mode)),
    };
    Ok((v, d.expect("gradient requested")))
}

fn incompatible_targets(mode: Mode) -> Error {
    Error::Precondition(match mode {
        Mode::MtBce => "mode mt_bce requires n-hot targets".to_string(),
        m => format!("mode {m} requires token sequence targets"),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainExample {
    pub id: String,
    pub features: Array2<f64>,
    pub targets: Targets,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub mode: Mode,
    pub steps: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub mask: MaskSpec,
}

impl PretrainConfig {
    pub fn toy(mode: Mode, seed: u64) -> Self {
        Self {
            mode,
            steps: 2000,
            learning_rate: 5e-4,
            warmup_steps: 200,
            batch_size: 16,
            seed,
            checkpoint_every: 500,
            mask: MaskSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub mode: Mode,
    /// Loss per masked frame.
    pub loss: f64,
    pub masked_frames: usize,
    pub lr: f64,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{:.9}\t{}\t{:.9e}",
            self.step, self.mode, self.loss, self.masked_frames, self.lr
        )
    }
}

fn scale(p: &mut dyn Params, k: f64) {
    p.visit_mut(&mut |s| s.iter_mut().for_each(|v| *v *= k));
}

/// One optimizer step's worth of loss and gradient over a batch.
pub fn batch_gradient(
    backbone: &Backbone,
    mode: Mode,
    batch: &[&PretrainExample],
    masks: &[Vec<usize>],
    mut dropout: Option<&mut Rng>,
    grad: &mut Backbone,
) -> Result<LossValue> {
    let mut total = LossValue {
        total: 0.0,
        masked_frame_count: 0,
    };
    for (ex, mask) in batch.iter().zip(masks) {
        if ex.targets.frames() != ex.features.nrows() {
            return Err(Error::Precondition(format!(
                "{}: {} target frames for {} feature frames",
                ex.id,
                ex.targets.frames(),
                ex.features.nrows()
            )));
        }
        let (o, cache) = backbone.forward_train(&ex.features, mask, dropout.as_deref_mut())?;
        let (v, d_o) = loss_with_grad(mode, &o, &ex.targets, &backbone.head, &mut grad.head)?;
        backbone.backward(&cache, &d_o, grad);
        total.total += v.total;
        total.masked_frame_count += v.masked_frame_count;
    }
    Ok(total)
}

/// Trains `backbone` in place. `on_checkpoint(step, backbone)` fires at step 0,
/// every `checkpoint_every` updates, and after the final update.
pub fn pretrain_run(
    config: &PretrainConfig,
    examples: &[PretrainExample],
    backbone: &mut Backbone,
    on_checkpoint: &mut dyn FnMut(usize, &Backbone) -> Result<()>,
) -> Result<Vec<StepLog>> {
    if examples.is_empty() {
        return Err(Error::InsufficientData("no pre-training examples".into()));
    }
    let wants_nhot = config.mode == Mode::MtBce;
    if let Some(ex) = examples
        .iter()
        .find(|e| matches!(e.targets, Targets::NHot(_)) != wants_nhot)
    {
        return Err(Error::Precondition(format!(
            "{}: {}",
            ex.id,
            incompatible_targets(config.mode)
        )));
    }
    let mut opt = Adam::new(AdamConfig::PRETRAIN, backbone);
    let mut grad = backbone.zeros_like();
    let mut log = Vec::with_capacity(config.steps);
    on_checkpoint(0, backbone)?;
    for step in 0..config.steps {
        let mut rng = seeded(config.seed, &[0x5052_4554, step as u64]);
        let batch: Vec<&PretrainExample> = (0..config.batch_size.max(1))
            .map(|_| examples.choose(&mut rng).expect("non-empty"))
            .collect();
        let masks: Vec<Vec<usize>> = batch
            .iter()
            .map(|e| {
                sample_mask(
                    e.features.nrows(),
                    config.mask.start_prob,
                    config.mask.span_length,
                    &mut rng,
                )
            })
            .collect();
        fill(&mut grad, 0.0);
        let dropout = (backbone.config.dropout > 0.0).then_some(&mut rng);
        let v = batch_gradient(backbone, config.mode, &batch, &masks, dropout, &mut grad)?;
        let loss = v.per_frame();
        let grad_finite = flatten_finite(&grad);
        if !loss.is_finite() || !grad_finite {
            return Err(Error::NonFiniteLoss {
                step,
                batch: batch.iter().map(|e| e.id.clone()).collect(),
                detail: format!("loss {loss}, finite gradient: {grad_finite}"),
            });
        }
        scale(&mut grad, 1.0 / v.masked_frame_count as f64);
        let lr = learning_rate(step, config.learning_rate, config.warmup_steps, config.steps);
        opt.step(backbone, &grad, lr);
        let entry = StepLog {
            step,
            mode: config.mode,
            loss,
            masked_frames: v.masked_frame_count,
            lr,
        };
        log::debug!("{entry}");
        log.push(entry);
        let done = step + 1;
        if done == config.steps || (config.checkpoint_every > 0 && done % config.checkpoint_every == 0) {
            on_checkpoint(done, backbone)?;
        }
    }
    Ok(log)
}

fn flatten_finite(p: &dyn Params) -> bool {
    let mut ok = true;
    p.visit("", &mut |_, _, d| ok &= d.iter().all(|v| v.is_finite()));
    ok
}

/// Mean of the first and last `window` logged losses.
pub fn loss_window_means(log: &[StepLog], window: usize) -> Option<(f64, f64)> {
    if log.len() < window || window == 0 {
        return None;
    }
    let mean = |s: &[StepLog]| s.iter().map(|l| l.loss).sum::<f64>() / s.len() as f64;
    Some((mean(&log[..window]), mean(&log[log.len() - window..])))
}
