//! Differentiable building blocks. Every layer exposes `forward` returning its
//! output plus whatever the backward pass needs, and `backward` accumulating
//! parameter gradients into a same-shaped gradient layer.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Axis};
use rand::Rng as _;

use crate::rng::Rng;

/// Visitor over trainable tensors, in a fixed order.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));
}

pub(crate) fn slice_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are contiguous")
}

pub(crate) fn slice<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameters are contiguous")
}

pub fn flatten(p: &dyn Params) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit("", &mut |_, _, v| out.extend_from_slice(v));
    out
}

pub fn param_count(p: &dyn Params) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, _, v| n += v.len());
    n
}

pub fn fill(p: &mut dyn Params, value: f64) {
    p.visit_mut(&mut |v| v.iter_mut().for_each(|x| *x = value));
}

fn xavier(rng: &mut Rng, fan_in: usize, fan_out: usize, shape: (usize, usize)) -> Array2<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn(shape, || rng.gen_range(-bound..bound))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// in × out
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            weight: xavier(rng, input, output, (input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        general_mat_mul(1.0, &x.t(), dy, 1.0, &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        f(format!("{prefix}.weight"), self.weight.shape(), slice(&self.weight));
        f(format!("{prefix}.bias"), self.bias.shape(), slice(&self.bias));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(slice_mut(&mut self.weight));
        f(slice_mut(&mut self.bias));
    }
}

/// Stride-1 1-D convolution over frames with zero "same" padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub kernel: usize,
    pub in_channels: usize,
    /// (kernel·in) × out; row `j·in + i` holds tap `j` of input channel `i`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Conv1d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut Rng) -> Self {
        Self {
            kernel,
            in_channels,
            weight: xavier(
                rng,
                kernel * in_channels,
                out_channels,
                (kernel * in_channels, out_channels),
            ),
            bias: Array1::zeros(out_channels),
        }
    }

    pub fn im2col(&self, x: &Array2<f64>) -> Array2<f64> {
        let (t, c) = x.dim();
        let pad = (self.kernel / 2) as isize;
        let mut col = Array2::zeros((t, self.kernel * c));
        for j in 0..self.kernel {
            let shift = j as isize - pad;
            let lo = (-shift).max(0) as usize;
            let hi = ((t as isize) - shift).min(t as isize).max(0) as usize;
            if lo >= hi {
                continue;
            }
            let src_lo = (lo as isize + shift) as usize;
            let src_hi = (hi as isize + shift) as usize;
            col.slice_mut(s![lo..hi, j * c..(j + 1) * c])
                .assign(&x.slice(s![src_lo..src_hi, ..]));
        }
        col
    }

    fn col2im(&self, dcol: &Array2<f64>) -> Array2<f64> {
        let t = dcol.nrows();
        let c = self.in_channels;
        let pad = (self.kernel / 2) as isize;
        let mut dx = Array2::zeros((t, c));
        for j in 0..self.kernel {
            let shift = j as isize - pad;
            let lo = (-shift).max(0) as usize;
            let hi = ((t as isize) - shift).min(t as isize).max(0) as usize;
            if lo >= hi {
                continue;
            }
            let src_lo = (lo as isize + shift) as usize;
            let src_hi = (hi as isize + shift) as usize;
            let mut target = dx.slice_mut(s![src_lo..src_hi, ..]);
            target += &dcol.slice(s![lo..hi, j * c..(j + 1) * c]);
        }
        dx
    }

    /// Returns (output, im2col buffer).
    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let col = self.im2col(x);
        let mut y = col.dot(&self.weight);
        y += &self.bias;
        (y, col)
    }

    pub fn backward(&self, col: &Array2<f64>, dy: &Array2<f64>, grad: &mut Conv1d) -> Array2<f64> {
        general_mat_mul(1.0, &col.t(), dy, 1.0, &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        self.col2im(&dy.dot(&self.weight.t()))
    }
}

impl Params for Conv1d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        f(format!("{prefix}.weight"), self.weight.shape(), slice(&self.weight));
        f(format!("{prefix}.bias"), self.bias.shape(), slice(&self.bias));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(slice_mut(&mut self.weight));
        f(slice_mut(&mut self.bias));
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let (t, d) = x.dim();
        let mut xhat = Array2::zeros((t, d));
        let mut inv_std = Array1::zeros(t);
        for (r, row) in x.outer_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            xhat.row_mut(r).assign(&row.mapv(|v| (v - mean) * is));
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let d = dy.ncols() as f64;
        let dxhat = dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        for r in 0..dy.nrows() {
            let g = dxhat.row(r);
            let xh = cache.xhat.row(r);
            let mean_g = g.sum() / d;
            let mean_gx = g.dot(&xh) / d;
            let is = cache.inv_std[r];
            dx.row_mut(r)
                .assign(&ndarray::Zip::from(&g).and(&xh).map_collect(|gv, xv| is * (gv - mean_g - xv * mean_gx)));
        }
        dx
    }
}

impl Params for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        f(format!("{prefix}.gamma"), self.gamma.shape(), slice(&self.gamma));
        f(format!("{prefix}.beta"), self.beta.shape(), slice(&self.beta));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(slice_mut(&mut self.gamma));
        f(slice_mut(&mut self.beta));
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `tanh` through a single `exp`; libm's `tanh` is several times slower.
fn tanh(u: f64) -> f64 {
    let e = (-2.0 * u.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(u)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

pub fn gelu_grad(x: f64) -> f64 {
    let th = tanh(GELU_C * (x + 0.044715 * x * x * x));
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Inverted-dropout mask: entries are 0 or 1/(1-p).
pub fn dropout_mask(shape: (usize, usize), p: f64, rng: &mut Rng) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if rng.gen::<f64>() < p { 0.0 } else { keep })
}

pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.outer_iter_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
}

/// Pre-norm transformer layer: x + MHA(LN(x)), then + FFN(LN(·)).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub heads: usize,
    pub ln1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

pub struct EncoderLayerCache {
    ln1: LayerNormCache,
    a_in: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    drop1: Option<Array2<f64>>,
    ln2: LayerNormCache,
    f_in: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
    drop2: Option<Array2<f64>>,
}

impl EncoderLayer {
    pub fn new(dim: usize, heads: usize, ffn: usize, rng: &mut Rng) -> Self {
        Self {
            heads,
            ln1: LayerNorm::new(dim),
            query: Linear::new(dim, dim, rng),
            key: Linear::new(dim, dim, rng),
            value: Linear::new(dim, dim, rng),
            out: Linear::new(dim, dim, rng),
            ln2: LayerNorm::new(dim),
            ff1: Linear::new(dim, ffn, rng),
            ff2: Linear::new(ffn, dim, rng),
        }
    }

    fn attention(&self, q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> (Array2<f64>, Vec<Array2<f64>>) {
        let (t, d) = q.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attn = Array2::zeros((t, d));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t());
            scores *= scale;
            softmax_rows(&mut scores);
            attn.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        (attn, probs)
    }

    pub fn forward(&self, x: &Array2<f64>, dropout: Option<(f64, &mut Rng)>) -> (Array2<f64>, EncoderLayerCache) {
        let (a_in, ln1) = self.ln1.forward(x);
        let q = self.query.forward(&a_in);
        let k = self.key.forward(&a_in);
        let v = self.value.forward(&a_in);
        let (attn, probs) = self.attention(&q, &k, &v);
        let mut branch1 = self.out.forward(&attn);
        let (drop1, drop2) = match dropout {
            Some((p, rng)) if p > 0.0 => (
                Some(dropout_mask(branch1.dim(), p, rng)),
                Some(dropout_mask(x.dim(), p, rng)),
            ),
            _ => (None, None),
        };
        if let Some(m) = &drop1 {
            branch1 *= m;
        }
        let x1 = x + &branch1;
        let (f_in, ln2) = self.ln2.forward(&x1);
        let pre_act = self.ff1.forward(&f_in);
        let act = pre_act.mapv(gelu);
        let mut branch2 = self.ff2.forward(&act);
        if let Some(m) = &drop2 {
            branch2 *= m;
        }
        let y = x1 + branch2;
        (
            y,
            EncoderLayerCache {
                ln1,
                a_in,
                q,
                k,
                v,
                probs,
                attn,
                drop1,
                ln2,
                f_in,
                pre_act,
                act,
                drop2,
            },
        )
    }

    pub fn backward(&self, c: &EncoderLayerCache, dy: &Array2<f64>, g: &mut EncoderLayer) -> Array2<f64> {
        // Feed-forward branch.
        let mut db2 = dy.clone();
        if let Some(m) = &c.drop2 {
            db2 *= m;
        }
        let dact = self.ff2.backward(&c.act, &db2, &mut g.ff2);
        let dpre = dact * &c.pre_act.mapv(gelu_grad);
        let df_in = self.ff1.backward(&c.f_in, &dpre, &mut g.ff1);
        let mut dx1 = dy + &self.ln2.backward(&c.ln2, &df_in, &mut g.ln2);

        // Attention branch.
        let mut db1 = dx1.clone();
        if let Some(m) = &c.drop1 {
            db1 *= m;
        }
        let dattn = self.out.backward(&c.attn, &db1, &mut g.out);
        let (t, d) = c.q.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array2::zeros((t, d));
        let mut dk = Array2::zeros((t, d));
        let mut dv = Array2::zeros((t, d));
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &c.probs[h];
            let dout = dattn.slice(cols);
            let dp = dout.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dout));
            let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let mut ds = (&dp - &row_dot) * p;
            ds *= scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        let mut da = self.query.backward(&c.a_in, &dq, &mut g.query);
        da += &self.key.backward(&c.a_in, &dk, &mut g.key);
        da += &self.value.backward(&c.a_in, &dv, &mut g.value);
        dx1 += &self.ln1.backward(&c.ln1, &da, &mut g.ln1);
        dx1
    }
}

impl Params for EncoderLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.query.visit(&format!("{prefix}.query"), f);
        self.key.visit(&format!("{prefix}.key"), f);
        self.value.visit(&format!("{prefix}.value"), f);
        self.out.visit(&format!("{prefix}.out"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.ff1.visit(&format!("{prefix}.ff1"), f);
        self.ff2.visit(&format!("{prefix}.ff2"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.ln1.visit_mut(f);
        self.query.visit_mut(f);
        self.key.visit_mut(f);
        self.value.visit_mut(f);
        self.out.visit_mut(f);
        self.ln2.visit_mut(f);
        self.ff1.visit_mut(f);
        self.ff2.visit_mut(f);
    }
}
