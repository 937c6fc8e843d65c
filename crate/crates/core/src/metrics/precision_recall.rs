use rayon::prelude::*;

use super::FeatureMatrix;
use crate::error::{Error, Result};

/// Neighbourhood size used for the manifold radii.
pub const DEFAULT_K: usize = 3;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from each point to its `k`-th nearest other point.
pub fn knn_radii_sq(points: &FeatureMatrix, k: usize) -> Vec<f64> {
    let n = points.n_rows();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut best = vec![f64::INFINITY; k];
            for j in (0..n).filter(|&j| j != i) {
                let d = sq_dist(points.row(i), points.row(j));
                if d < best[k - 1] {
                    let pos = best.partition_point(|&b| b <= d);
                    best.insert(pos, d);
                    best.pop();
                }
            }
            best[k - 1]
        })
        .collect()
}

/// Share of `query` rows inside at least one ball centred on a `support`
/// row with the given squared radius.
fn coverage(query: &FeatureMatrix, support: &FeatureMatrix, radii_sq: &[f64]) -> f64 {
    let inside = (0..query.n_rows())
        .into_par_iter()
        .filter(|&i| {
            let q = query.row(i);
            (0..support.n_rows()).any(|j| sq_dist(q, support.row(j)) <= radii_sq[j])
        })
        .count();
    inside as f64 / query.n_rows() as f64
}

fn all_identical(x: &FeatureMatrix) -> bool {
    (1..x.n_rows()).all(|i| x.row(i) == x.row(0))
}

/// k-NN manifold precision (synthetic rows inside the real manifold) and
/// recall (real rows inside the synthetic manifold).
pub fn precision_recall(real: &FeatureMatrix, synth: &FeatureMatrix, k: usize) -> Result<(f64, f64)> {
    if real.dim() != synth.dim() {
        return Err(Error::Shape(format!("dimension {} against {}", real.dim(), synth.dim())));
    }
    if k == 0 || real.n_rows() <= k || synth.n_rows() <= k {
        return Err(Error::invalid(format!(
            "need more than k = {k} rows on both sides, got {} and {}",
            real.n_rows(),
            synth.n_rows()
        )));
    }
    if all_identical(real) || all_identical(synth) {
        return Err(Error::invalid("embeddings are all identical"));
    }
    let real_r = knn_radii_sq(real, k);
    let synth_r = knn_radii_sq(synth, k);
    Ok((coverage(synth, real, &real_r), coverage(real, synth, &synth_r)))
}
