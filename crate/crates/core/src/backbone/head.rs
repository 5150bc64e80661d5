use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand_distr::{Distribution, StandardNormal};

use super::layers::{slice, slice_mut, Params};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Cosine-similarity unit classifier: `score_c = cos(A·o, e_c) / τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionHead {
    /// d×d, applied as `A·o`.
    pub projection: Array2<f64>,
    /// C×d
    pub unit_embeddings: Array2<f64>,
    pub temperature: f64,
}

/// Forward quantities the head backward pass reuses.
pub struct HeadCache {
    inputs: Array2<f64>,
    proj_unit: Array2<f64>,
    proj_norm: Array1<f64>,
    emb_unit: Array2<f64>,
    emb_norm: Array1<f64>,
}

fn unit_rows(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut unit = x.clone();
    for (mut row, &n) in unit.outer_iter_mut().zip(norms.iter()) {
        if n > 0.0 {
            row /= n;
        }
    }
    (unit, norms)
}

impl PredictionHead {
    pub fn new(dim: usize, units: usize, temperature: f64, rng: &mut Rng) -> Self {
        let bound = (3.0 / dim as f64).sqrt();
        let projection = Array2::from_shape_simple_fn((dim, dim), || {
            rand::Rng::gen_range(rng, -bound..bound)
        });
        let unit_embeddings =
            Array2::from_shape_simple_fn((units, dim), || StandardNormal.sample(rng));
        Self {
            projection,
            unit_embeddings,
            temperature,
        }
    }

    pub fn units(&self) -> usize {
        self.unit_embeddings.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Precondition("temperature must be positive".into()));
        }
        if let Some(c) = self
            .unit_embeddings
            .outer_iter()
            .position(|r| r.iter().all(|v| *v == 0.0))
        {
            return Err(Error::Precondition(format!("unit embedding {c} has zero norm")));
        }
        Ok(())
    }

    /// Scores for every row of `inputs` (M×d → M×C).
    pub fn scores(&self, inputs: &Array2<f64>) -> (Array2<f64>, HeadCache) {
        let projected = inputs.dot(&self.projection.t());
        let (proj_unit, proj_norm) = unit_rows(&projected);
        let (emb_unit, emb_norm) = unit_rows(&self.unit_embeddings);
        let mut scores = proj_unit.dot(&emb_unit.t());
        scores /= self.temperature;
        (
            scores,
            HeadCache {
                inputs: inputs.clone(),
                proj_unit,
                proj_norm,
                emb_unit,
                emb_norm,
            },
        )
    }

    pub fn unit_scores(&self, o: ArrayView1<f64>) -> Array1<f64> {
        let row = o.to_owned().insert_axis(Axis(0));
        self.scores(&row).0.row(0).to_owned()
    }

    /// Back-propagates `dscores` (M×C); returns the gradient w.r.t. the inputs.
    pub fn backward(&self, c: &HeadCache, dscores: &Array2<f64>, grad: &mut PredictionHead) -> Array2<f64> {
        let g = dscores / self.temperature;

        let dpu = g.dot(&c.emb_unit);
        let mut dproj = Array2::zeros(dpu.raw_dim());
        for r in 0..dpu.nrows() {
            let n = c.proj_norm[r];
            if n == 0.0 {
                continue;
            }
            let u = c.proj_unit.row(r);
            let radial = dpu.row(r).dot(&u);
            dproj.row_mut(r).assign(&((&dpu.row(r) - &(&u * radial)) / n));
        }

        let deu = g.t().dot(&c.proj_unit);
        for k in 0..deu.nrows() {
            let n = c.emb_norm[k];
            if n == 0.0 {
                continue;
            }
            let e = c.emb_unit.row(k);
            let radial = deu.row(k).dot(&e);
            let mut row = grad.unit_embeddings.row_mut(k);
            row.scaled_add(1.0 / n, &deu.row(k));
            row.scaled_add(-radial / n, &e);
        }

        general_mat_mul(1.0, &dproj.t(), &c.inputs, 1.0, &mut grad.projection);
        dproj.dot(&self.projection)
    }
}

impl Params for PredictionHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        f(format!("{prefix}.projection"), self.projection.shape(), slice(&self.projection));
        f(
            format!("{prefix}.unit_embeddings"),
            self.unit_embeddings.shape(),
            slice(&self.unit_embeddings),
        );
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(slice_mut(&mut self.projection));
        f(slice_mut(&mut self.unit_embeddings));
    }
}

/// Softmax posterior over units, stabilized by max subtraction.
pub fn posterior_softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Independent per-unit probabilities.
pub fn unit_probability_sigmoid(scores: &[f64]) -> Vec<f64> {
    scores.iter().map(|&s| sigmoid(s)).collect()
}
