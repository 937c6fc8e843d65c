use rayon::prelude::*;

use super::FeatureMatrix;
use crate::error::{Error, Result};

/// Squared distance, abandoned once it reaches `bound`.
fn bounded_sq_dist(a: &[f64], b: &[f64], bound: f64) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
        if s >= bound {
            return s;
        }
    }
    s
}

/// Euclidean distance from every row of `query` to its nearest row of
/// `reference`.
pub fn nearest_distances(query: &FeatureMatrix, reference: &FeatureMatrix) -> Result<Vec<f64>> {
    if query.dim() != reference.dim() {
        return Err(Error::Shape(format!(
            "dimension {} against {}",
            query.dim(),
            reference.dim()
        )));
    }
    if query.n_rows() == 0 || reference.n_rows() == 0 {
        return Err(Error::invalid("nearest neighbour search needs nonempty inputs"));
    }
    Ok((0..query.n_rows())
        .into_par_iter()
        .map(|i| {
            let q = query.row(i);
            let mut best = f64::INFINITY;
            for j in 0..reference.n_rows() {
                let d = bounded_sq_dist(q, reference.row(j), best);
                if d < best {
                    best = d;
                }
            }
            best.sqrt()
        })
        .collect())
}

/// Median of the values; the mean of the middle pair for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median distance from synthetic rows to their closest training row.
pub fn dcr(synth: &FeatureMatrix, train: &FeatureMatrix) -> Result<f64> {
    Ok(median(&nearest_distances(synth, train)?))
}
