use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{squared_distance, Matrix};
use crate::error::{Error, Result};

/// Rows per rayon task during assignment.
const ASSIGN_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmeansModel {
    /// `K x d`.
    pub centroids: Matrix,
    /// Sum of squared distances from each point to its assigned centroid.
    pub inertia: f64,
    /// Inertia after every assignment step, the last entry equal to `inertia`.
    pub history: Vec<f64>,
}

/// Index of the nearest centroid for every row; ties go to the lowest index.
///
/// Returns the assignments and the per-row squared distances.
pub fn assign_nearest(x: &Matrix, centroids: &Matrix) -> (Vec<usize>, Vec<f64>) {
    let n = x.rows();
    let mut labels = vec![0usize; n];
    let mut dists = vec![0.0; n];
    labels
        .par_chunks_mut(ASSIGN_CHUNK)
        .zip(dists.par_chunks_mut(ASSIGN_CHUNK))
        .enumerate()
        .for_each(|(chunk, (labels, dists))| {
            for (i, (label, dist)) in labels.iter_mut().zip(dists.iter_mut()).enumerate() {
                let row = x.row(chunk * ASSIGN_CHUNK + i);
                let mut best = (0, f64::INFINITY);
                for c in 0..centroids.rows() {
                    let d = squared_distance(row, centroids.row(c));
                    if d < best.1 {
                        best = (c, d);
                    }
                }
                *label = best.0;
                *dist = best.1;
            }
        });
    (labels, dists)
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans_fit(x: &Matrix, k: usize, iters: usize, seed: u64) -> Result<KmeansModel> {
    let n = x.rows();
    if k == 0 {
        return Err(Error::degenerate("k-means with K = 0"));
    }
    if k > n {
        return Err(Error::degenerate(format!("k-means with K = {k} > n = {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = kmeans_plus_plus(x, k, &mut rng);
    Ok(lloyd(x, init, iters))
}

/// Runs up to `iters` Lloyd iterations starting from `centroids`.
///
/// Inertia never increases from one assignment step to the next. A centroid
/// that loses all its points moves onto the point currently farthest from
/// its own centroid.
pub fn lloyd(x: &Matrix, mut centroids: Matrix, iters: usize) -> KmeansModel {
    let (n, d) = x.shape();
    let k = centroids.rows();
    let mut history = Vec::with_capacity(iters + 1);
    let (mut labels, mut dists) = assign_nearest(x, &centroids);
    history.push(dists.iter().sum::<f64>());

    for _ in 0..iters {
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &label) in labels.iter().enumerate() {
            counts[label] += 1;
            for (s, v) in sums.row_mut(label).iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                let target = centroids.row_mut(c);
                for (t, s) in target.iter_mut().zip(sums.row(c)) {
                    *t = s * inv;
                }
            } else if n > 0 {
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("non-empty");
                centroids.row_mut(c).copy_from_slice(x.row(far));
                dists[far] = 0.0;
            }
        }

        let (new_labels, new_dists) = assign_nearest(x, &centroids);
        let inertia: f64 = new_dists.iter().sum();
        let converged = new_labels == labels;
        labels = new_labels;
        dists = new_dists;
        history.push(inertia);
        if converged {
            break;
        }
    }

    KmeansModel {
        inertia: *history.last().expect("at least one assignment"),
        centroids,
        history,
    }
}

fn kmeans_plus_plus(x: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = x.rows();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut best = vec![f64::INFINITY; n];
    while chosen.len() < k {
        let last = x.row(*chosen.last().expect("non-empty"));
        for (i, b) in best.iter_mut().enumerate() {
            let d = squared_distance(x.row(i), last);
            if d < *b {
                *b = d;
            }
        }
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in best.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // Every point coincides with a chosen centroid.
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
    }
    x.select_rows(&chosen)
}
