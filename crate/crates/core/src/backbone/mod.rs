//! Frame encoder: a stride-1 convolution stack `f`, span masking, a pre-norm
//! transformer context network `g`, and the cosine unit-prediction head.
//!
//! The network consumes feature frames rather than raw audio, so every output
//! row lines up with one tokenizer target. Forward passes used for training
//! return a cache; [`Backbone::backward`] turns a gradient on the context
//! outputs into parameter gradients.

pub mod checkpoint;
mod head;
pub mod layers;

use ndarray::{Array1, Array2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use head::{posterior_softmax, sigmoid, unit_probability_sigmoid, HeadCache, PredictionHead};
pub use layers::{flatten, param_count, Params};

use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};
use checkpoint::TensorArchive;
use layers::{gelu, gelu_grad, Conv1d, EncoderLayer, EncoderLayerCache, LayerNorm, LayerNormCache};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_dim: usize,
    /// Output channels of each local convolution; the last equals `model_dim`.
    pub local_channels: Vec<usize>,
    /// Odd kernel width per local convolution (stride is always 1).
    pub local_kernels: Vec<usize>,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub codebook_size: usize,
    pub temperature: f64,
    pub positional_encoding: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_dim: 40,
            local_channels: vec![64, 64],
            local_kernels: vec![5, 3],
            model_dim: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            dropout: 0.1,
            codebook_size: 32,
            temperature: 0.1,
            positional_encoding: true,
        }
    }
}

impl BackboneConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, c: &str| {
            Err(Error::Config {
                key: format!("backbone.{key}"),
                constraint: c.into(),
            })
        };
        if self.model_dim == 0 || self.input_dim == 0 {
            return bad("model_dim", "dimensions must be positive");
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return bad("heads", "model_dim must be divisible by heads");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature", "must be > 0");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must lie in [0, 1)");
        }
        if self.codebook_size < 2 {
            return bad("codebook_size", "must be >= 2");
        }
        if self.local_channels.len() != self.local_kernels.len() {
            return bad("local_kernels", "one kernel width per local layer");
        }
        if self.local_kernels.iter().any(|k| k % 2 == 0) {
            return bad("local_kernels", "kernel widths must be odd");
        }
        let out = self.local_channels.last().copied().unwrap_or(self.input_dim);
        if out != self.model_dim {
            return bad(
                "local_channels",
                "last local layer (or the input, if there are none) must have model_dim channels",
            );
        }
        Ok(())
    }
}

/// T×d hidden vectors plus the masked frame indices (sorted, unique).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenSequence {
    pub vectors: Array2<f64>,
    pub masked_positions: Vec<usize>,
}

impl HiddenSequence {
    pub fn unmasked(vectors: Array2<f64>) -> Self {
        Self {
            vectors,
            masked_positions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }
}

/// Replaces the rows listed in `mask` with `embedding`.
pub fn apply_mask(h: &HiddenSequence, mask: &[usize], embedding: &Array1<f64>) -> Result<HiddenSequence> {
    let t = h.len();
    if embedding.len() != h.vectors.ncols() {
        return Err(Error::Precondition("mask embedding dimension mismatch".into()));
    }
    if let Some(i) = mask.iter().find(|i| **i >= t) {
        return Err(Error::Precondition(format!("mask index {i} outside [0, {t})")));
    }
    let mut vectors = h.vectors.clone();
    for &i in mask {
        vectors.row_mut(i).assign(embedding);
    }
    let mut positions: Vec<usize> = h.masked_positions.iter().chain(mask).copied().collect();
    positions.sort_unstable();
    positions.dedup();
    Ok(HiddenSequence {
        vectors,
        masked_positions: positions,
    })
}

pub fn sinusoidal_positions(t: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((t, d), |(pos, i)| {
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    /// Fixed per-feature standardization applied before the local encoder.
    pub input_mean: Array1<f64>,
    pub input_scale: Array1<f64>,
    pub local: Vec<Conv1d>,
    pub mask_embedding: Array1<f64>,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNorm,
    pub head: PredictionHead,
}

struct LocalCache {
    cols: Vec<Array2<f64>>,
    pre_act: Vec<Array2<f64>>,
}

/// Everything [`Backbone::backward`] needs from a training forward pass.
pub struct ForwardCache {
    local: LocalCache,
    masked: Vec<usize>,
    layers: Vec<EncoderLayerCache>,
    final_norm: Option<LayerNormCache>,
}

impl Backbone {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed, &[0x494e_4954]);
        let mut local = Vec::new();
        let mut in_ch = config.input_dim;
        for (&ch, &k) in config.local_channels.iter().zip(&config.local_kernels) {
            local.push(Conv1d::new(in_ch, ch, k, &mut rng));
            in_ch = ch;
        }
        let d = config.model_dim;
        let mask_embedding = Array1::from_shape_simple_fn(d, || rng.gen_range(-0.5..0.5));
        let layers = (0..config.layers)
            .map(|_| EncoderLayer::new(d, config.heads, config.ffn_dim, &mut rng))
            .collect();
        let head = PredictionHead::new(d, config.codebook_size, config.temperature, &mut rng);
        Ok(Self {
            input_mean: Array1::zeros(config.input_dim),
            input_scale: Array1::ones(config.input_dim),
            local,
            mask_embedding,
            layers,
            final_norm: LayerNorm::new(d),
            head,
            config,
        })
    }

    /// Sets the input standardization from the per-feature mean and std of `frames`.
    pub fn set_input_statistics(&mut self, frames: &Array2<f64>) {
        let n = frames.nrows().max(1) as f64;
        let mean = frames.sum_axis(ndarray::Axis(0)) / n;
        let var = frames
            .outer_iter()
            .fold(Array1::<f64>::zeros(mean.len()), |acc, r| acc + (&r - &mean).mapv(|v| v * v))
            / n;
        self.input_scale = var.mapv(|v| 1.0 / (v.sqrt() + 1e-5));
        self.input_mean = mean;
    }

    /// A zero-valued copy for accumulating gradients.
    pub fn zeros_like(&self) -> Backbone {
        let mut g = self.clone();
        layers::fill(&mut g, 0.0);
        g
    }

    fn check_input(&self, features: &Array2<f64>) -> Result<()> {
        if features.ncols() != self.config.input_dim {
            return Err(Error::Precondition(format!(
                "feature dim {} does not match backbone input {}",
                features.ncols(),
                self.config.input_dim
            )));
        }
        if features.nrows() == 0 {
            return Err(Error::Precondition("no frames".into()));
        }
        Ok(())
    }

    fn local_forward(&self, features: &Array2<f64>) -> (Array2<f64>, LocalCache) {
        let mut x = (features - &self.input_mean) * &self.input_scale;
        let mut cache = LocalCache {
            cols: Vec::new(),
            pre_act: Vec::new(),
        };
        let last = self.local.len().saturating_sub(1);
        for (i, conv) in self.local.iter().enumerate() {
            let (z, col) = conv.forward(&x);
            cache.cols.push(col);
            x = if i < last { z.mapv(gelu) } else { z.clone() };
            cache.pre_act.push(z);
        }
        (x, cache)
    }

    /// `H = f(X)`.
    pub fn encode_local(&self, features: &Array2<f64>) -> Result<HiddenSequence> {
        self.check_input(features)?;
        Ok(HiddenSequence::unmasked(self.local_forward(features).0))
    }

    fn context_forward(
        &self,
        x: Array2<f64>,
        mut dropout: Option<&mut Rng>,
    ) -> (Array2<f64>, Vec<EncoderLayerCache>, Option<LayerNormCache>) {
        if self.layers.is_empty() {
            return (x, Vec::new(), None);
        }
        let mut x = x;
        if self.config.positional_encoding {
            x += &sinusoidal_positions(x.nrows(), x.ncols());
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let drop = dropout.as_deref_mut().map(|r| (self.config.dropout, r));
            let (y, c) = layer.forward(&x, drop);
            caches.push(c);
            x = y;
        }
        let (y, c) = self.final_norm.forward(&x);
        (y, caches, Some(c))
    }

    /// `O = g(H_m)`; an empty layer stack is the identity.
    pub fn encode_context(&self, h: &HiddenSequence) -> Result<HiddenSequence> {
        if h.vectors.ncols() != self.config.model_dim {
            return Err(Error::Precondition(format!(
                "hidden dim {} does not match model dim {}",
                h.vectors.ncols(),
                self.config.model_dim
            )));
        }
        let (o, _, _) = self.context_forward(h.vectors.clone(), None);
        Ok(HiddenSequence {
            vectors: o,
            masked_positions: h.masked_positions.clone(),
        })
    }

    /// Unmasked inference: `g(f(X))`.
    pub fn encode(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(features)?;
        let (h, _) = self.local_forward(features);
        Ok(self.context_forward(h, None).0)
    }

    /// Training forward pass with masking and (optionally) dropout.
    pub fn forward_train(
        &self,
        features: &Array2<f64>,
        mask: &[usize],
        dropout: Option<&mut Rng>,
    ) -> Result<(HiddenSequence, ForwardCache)> {
        self.check_input(features)?;
        let (h, local) = self.local_forward(features);
        let hm = apply_mask(&HiddenSequence::unmasked(h), mask, &self.mask_embedding)?;
        let (o, layers, final_norm) = self.context_forward(hm.vectors, dropout);
        Ok((
            HiddenSequence {
                vectors: o,
                masked_positions: hm.masked_positions.clone(),
            },
            ForwardCache {
                local,
                masked: hm.masked_positions,
                layers,
                final_norm,
            },
        ))
    }

    /// Accumulates parameter gradients for `d_out = ∂L/∂O` into `grad`.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Array2<f64>, grad: &mut Backbone) {
        let mut dx = d_out.clone();
        if let Some(c) = &cache.final_norm {
            dx = self.final_norm.backward(c, &dx, &mut grad.final_norm);
        }
        for ((layer, c), g) in self
            .layers
            .iter()
            .zip(&cache.layers)
            .zip(grad.layers.iter_mut())
            .rev()
        {
            dx = layer.backward(c, &dx, g);
        }
        for &i in &cache.masked {
            grad.mask_embedding += &dx.row(i);
            dx.row_mut(i).fill(0.0);
        }
        let last = self.local.len().saturating_sub(1);
        for i in (0..self.local.len()).rev() {
            if i < last {
                dx = dx * &cache.local.pre_act[i].mapv(gelu_grad);
            }
            dx = self.local[i].backward(&cache.local.cols[i], &dx, &mut grad.local[i]);
        }
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let metadata = serde_json::to_string(&serde_json::json!({
            "kind": "backbone",
            "config": self.config,
        }))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut a = TensorArchive {
            metadata,
            tensors: Vec::new(),
        };
        a.push("buffer.input_mean", self.input_mean.shape(), layers::slice(&self.input_mean));
        a.push("buffer.input_scale", self.input_scale.shape(), layers::slice(&self.input_scale));
        a.push("buffer.temperature", &[1], &[self.head.temperature]);
        self.visit("", &mut |name, shape, data| a.push(name, shape, data));
        Ok(a)
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Backbone> {
        let meta: serde_json::Value =
            serde_json::from_str(&a.metadata).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if meta["kind"] != "backbone" {
            return Err(Error::Checkpoint("archive does not hold a backbone".into()));
        }
        let config: BackboneConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let mut b = Backbone::new(config, 0)?;
        let copy = |dst: &mut [f64], name: &str| -> Result<()> {
            let t = a.get(name)?;
            if t.data.len() != dst.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has {} values, expected {}",
                    t.data.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(&t.data);
            Ok(())
        };
        copy(layers::slice_mut(&mut b.input_mean), "buffer.input_mean")?;
        copy(layers::slice_mut(&mut b.input_scale), "buffer.input_scale")?;
        b.head.temperature = a.get("buffer.temperature")?.data[0];
        let mut names = Vec::new();
        b.visit("", &mut |name, _, _| names.push(name));
        let mut idx = 0;
        let mut result = Ok(());
        b.visit_mut(&mut |dst| {
            if result.is_ok() {
                result = copy(dst, &names[idx]);
            }
            idx += 1;
        });
        result?;
        Ok(b)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Backbone> {
        Backbone::from_archive(&TensorArchive::load(path)?)
    }

    /// SHA-256 over the serialized parameters and buffers.
    pub fn digest(&self) -> Result<String> {
        Ok(self.to_archive()?.digest())
    }
}

impl Params for Backbone {
    fn visit(&self, _prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        for (i, c) in self.local.iter().enumerate() {
            c.visit(&format!("local.{i}"), f);
        }
        f(
            "mask_embedding".into(),
            self.mask_embedding.shape(),
            layers::slice(&self.mask_embedding),
        );
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("layers.{i}"), f);
        }
        self.final_norm.visit("final_norm", f);
        self.head.visit("head", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for c in &mut self.local {
            c.visit_mut(f);
        }
        f(layers::slice_mut(&mut self.mask_embedding));
        for l in &mut self.layers {
            l.visit_mut(f);
        }
        self.final_norm.visit_mut(f);
        self.head.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn small_config() -> BackboneConfig {
        BackboneConfig {
            input_dim: 5,
            local_channels: vec![7, 8],
            local_kernels: vec![3, 3],
            model_dim: 8,
            layers: 1,
            heads: 2,
            ffn_dim: 12,
            dropout: 0.0,
            codebook_size: 5,
            temperature: 0.1,
            positional_encoding: true,
        }
    }

    fn randn(shape: (usize, usize), rng: &mut Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
    }

    #[test]
    fn local_encoder_preserves_frame_count() {
        let b = Backbone::new(BackboneConfig::default(), 1).unwrap();
        let x = randn((98, 40), &mut seeded(1, &[]));
        let h = b.encode_local(&x).unwrap();
        assert_eq!(h.vectors.dim(), (98, 64));
        assert!(b.encode_local(&randn((98, 39), &mut seeded(1, &[]))).is_err());
    }

    #[test]
    fn zero_local_weights_give_zero_hidden() {
        let mut b = Backbone::new(small_config(), 2).unwrap();
        for c in &mut b.local {
            c.weight.fill(0.0);
            c.bias.fill(0.0);
        }
        let h = b.encode_local(&randn((6, 5), &mut seeded(2, &[]))).unwrap();
        assert!(h.vectors.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mask_cases() {
        let mut rng = seeded(3, &[]);
        let h = HiddenSequence::unmasked(randn((8, 4), &mut rng));
        let e = Array1::from(vec![9.0, 8.0, 7.0, 6.0]);
        assert_eq!(apply_mask(&h, &[], &e).unwrap(), h);
        let all = apply_mask(&h, &(0..8).collect::<Vec<_>>(), &e).unwrap();
        assert!(all.vectors.outer_iter().all(|r| r == e));
        let part = apply_mask(&h, &[5, 2], &e).unwrap();
        assert_eq!(part.masked_positions, vec![2, 5]);
        for t in [0, 1, 3, 4, 6, 7] {
            assert_eq!(part.vectors.row(t), h.vectors.row(t));
        }
        assert_eq!(part.vectors.row(2), e);
        let again = apply_mask(&part, &[2, 5], &e).unwrap();
        assert_eq!(again, part);
        assert!(apply_mask(&h, &[8], &e).is_err());
    }

    #[test]
    fn empty_stack_and_identity_local_is_identity() {
        let cfg = BackboneConfig {
            input_dim: 6,
            local_channels: vec![],
            local_kernels: vec![],
            model_dim: 6,
            layers: 0,
            heads: 2,
            ..small_config()
        };
        let b = Backbone::new(cfg, 4).unwrap();
        let x = randn((5, 6), &mut seeded(4, &[]));
        assert_eq!(b.encode(&x).unwrap(), x);
        let h = HiddenSequence::unmasked(x.clone());
        assert_eq!(b.encode_context(&h).unwrap().vectors, x);
    }

    #[test]
    fn single_frame_attention_is_value_path() {
        // With one frame the attention weights are exactly 1, so the layer reduces
        // to out(value(LN(x))) followed by the feed-forward residual.
        let cfg = BackboneConfig {
            positional_encoding: false,
            ..small_config()
        };
        let b = Backbone::new(cfg, 5).unwrap();
        let x = randn((1, 8), &mut seeded(5, &[]));
        let got = b.encode_context(&HiddenSequence::unmasked(x.clone())).unwrap().vectors;

        let l = &b.layers[0];
        let ln = |v: &Array2<f64>, n: &LayerNorm| {
            let mean = v.sum() / 8.0;
            let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 8.0;
            v.mapv(|a| (a - mean) / (var + layers::LN_EPS).sqrt()) * &n.gamma + &n.beta
        };
        let lin = |v: &Array2<f64>, p: &layers::Linear| {
            let mut out = Array2::zeros((1, p.weight.ncols()));
            for j in 0..p.weight.ncols() {
                out[[0, j]] = p.bias[j] + (0..p.weight.nrows()).map(|i| v[[0, i]] * p.weight[[i, j]]).sum::<f64>();
            }
            out
        };
        let x1 = &x + &lin(&lin(&ln(&x, &l.ln1), &l.value), &l.out);
        let ff = lin(&lin(&ln(&x1, &l.ln2), &l.ff1).mapv(gelu), &l.ff2);
        let want = ln(&(&x1 + &ff), &b.final_norm);
        for (a, w) in got.iter().zip(want.iter()) {
            assert!((a - w).abs() < 1e-12, "{a} vs {w}");
        }
    }

    #[test]
    fn permutation_equivariance_without_positions() {
        let cfg = BackboneConfig {
            positional_encoding: false,
            ..small_config()
        };
        let b = Backbone::new(cfg, 6).unwrap();
        let x = randn((3, 8), &mut seeded(6, &[]));
        let perm = [2usize, 0, 1];
        let xp = Array2::from_shape_fn((3, 8), |(t, j)| x[[perm[t], j]]);
        let o = b.encode_context(&HiddenSequence::unmasked(x)).unwrap().vectors;
        let op = b.encode_context(&HiddenSequence::unmasked(xp)).unwrap().vectors;
        for t in 0..3 {
            for j in 0..8 {
                assert!((op[[t, j]] - o[[perm[t], j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut b = Backbone::new(small_config(), 7).unwrap();
        b.set_input_statistics(&randn((20, 5), &mut seeded(7, &[])));
        let bytes = b.to_archive().unwrap().to_bytes();
        let back = Backbone::from_archive(&TensorArchive::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.to_archive().unwrap().to_bytes(), bytes);
    }

    #[test]
    fn config_validation() {
        let mut c = small_config();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.temperature = 0.0;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.local_channels = vec![7, 9];
        assert!(c.validate().is_err());
    }
}
