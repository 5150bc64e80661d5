//! Lloyd's algorithm with k-means++ seeding.

use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub(crate) fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid and its squared distance; ties go to the lowest index.
pub fn nearest(point: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.outer_iter().enumerate() {
        let d = sq_dist(point, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    /// Inertia after every assignment step, including the final one.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansFit {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().expect("at least one assignment step")
    }
}

fn count_distinct_rows(points: &Array2<f64>) -> usize {
    let mut rows: Vec<Vec<u64>> = points
        .outer_iter()
        .map(|r| r.iter().map(|v| (v + 0.0).to_bits()).collect())
        .collect();
    rows.sort_unstable();
    rows.dedup();
    rows.len()
}

fn plus_plus_init(points: &Array2<f64>, k: usize, rng: &mut Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    centroids.row_mut(0).assign(&points.row(rng.gen_range(0..n)));
    let mut d2: Vec<f64> = points
        .outer_iter()
        .map(|p| sq_dist(p, centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if *d > 0.0 && target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            // Guard against rounding leaving us on an already-chosen point.
            if d2[chosen] == 0.0 {
                chosen = (0..n).max_by(|a, b| d2[*a].total_cmp(&d2[*b])).unwrap_or(0);
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, p) in points.outer_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centroids.row(c)));
        }
    }
    centroids
}

fn assign(points: &Array2<f64>, centroids: &Array2<f64>, out: &mut [usize], dists: &mut [f64]) -> f64 {
    let mut inertia = 0.0;
    for (i, p) in points.outer_iter().enumerate() {
        let (c, d) = nearest(p, centroids);
        out[i] = c;
        dists[i] = d;
        inertia += d;
    }
    inertia
}

/// Clusters the rows of `points` into `k` groups.
pub fn kmeans(points: &Array2<f64>, k: usize, max_iters: usize, rng: &mut Rng) -> Result<KMeansFit> {
    let n = points.nrows();
    if k < 2 {
        return Err(Error::Precondition(format!("codebook size {k} < 2")));
    }
    if n < k {
        return Err(Error::Precondition(format!("{n} frames for {k} clusters")));
    }
    if count_distinct_rows(points) < k {
        return Err(Error::Precondition(format!(
            "fewer than {k} distinct frames; centroids would coincide"
        )));
    }
    let mut centroids = plus_plus_init(points, k, rng);
    let mut assignments = vec![usize::MAX; n];
    let mut next = vec![0usize; n];
    let mut dists = vec![0.0; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let inertia = assign(points, &centroids, &mut next, &mut dists);
        history.push(inertia);
        let converged = next == assignments;
        std::mem::swap(&mut assignments, &mut next);
        if converged || iterations == max_iters {
            break;
        }
        iterations += 1;

        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; k];
        for (i, p) in points.outer_iter().enumerate() {
            let c = assignments[i];
            counts[c] += 1;
            sums.row_mut(c).scaled_add(1.0, &p);
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                let mean = sums.row(c).mapv(|v| v / counts[c] as f64);
                centroids.row_mut(c).assign(&mean);
            } else {
                // Reseed an empty cluster at the point farthest from its centroid.
                let far = (0..n)
                    .filter(|i| !taken[*i])
                    .max_by(|a, b| dists[*a].total_cmp(&dists[*b]).then(b.cmp(a)))
                    .unwrap_or(0);
                taken[far] = true;
                centroids.row_mut(c).assign(&points.row(far));
                dists[far] = 0.0;
            }
        }
    }
    Ok(KMeansFit {
        centroids,
        assignments,
        inertia_history: history,
        iterations,
    })
}

/// Stacks the rows of several matrices.
pub fn stack_rows<'a>(mats: impl IntoIterator<Item = &'a Array2<f64>>) -> Result<Array2<f64>> {
    let views: Vec<_> = mats.into_iter().map(|m| m.view()).collect();
    if views.is_empty() {
        return Err(Error::Precondition("no feature matrices".into()));
    }
    ndarray::concatenate(Axis(0), &views)
        .map_err(|e| Error::Incompatible(format!("feature dimensions differ: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::array;

    #[test]
    fn two_symmetric_clusters() {
        let pts = array![[0.0], [0.0], [10.0], [10.0]];
        let fit = kmeans(&pts, 2, 20, &mut seeded(1, &[])).unwrap();
        let mut cs: Vec<f64> = fit.centroids.column(0).to_vec();
        cs.sort_by(f64::total_cmp);
        assert_eq!(cs, vec![0.0, 10.0]);
        assert_eq!(fit.inertia(), 0.0);
    }

    #[test]
    fn exact_cover_has_zero_inertia() {
        let pts = array![[0.0, 1.0], [2.0, 3.0], [4.0, 0.5], [2.0, 3.0], [0.0, 1.0]];
        let fit = kmeans(&pts, 3, 20, &mut seeded(4, &[])).unwrap();
        assert_eq!(fit.inertia(), 0.0);
    }

    #[test]
    fn rejects_too_few_frames() {
        let pts = array![[0.0], [1.0]];
        assert!(kmeans(&pts, 3, 5, &mut seeded(0, &[])).is_err());
        let dup = array![[0.0], [0.0], [0.0]];
        assert!(kmeans(&dup, 2, 5, &mut seeded(0, &[])).is_err());
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let cs = array![[0.0], [1.0], [2.0], [1.0]];
        assert_eq!(nearest(array![1.0].view(), &cs).0, 1);
        let cs = array![[0.0], [-1.0], [5.0], [1.0]];
        assert_eq!(nearest(array![0.5].view(), &cs).0, 0);
    }
}
