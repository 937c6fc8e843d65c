use serde::{Deserialize, Serialize};

use super::FeatureMatrix;
use crate::error::{Error, Result};

/// Histogram of absolute correlation differences over `[0, 2]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean_error: f64,
}

impl CorrelationHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["bin_left", "bin_right", "count"])?;
        for (i, c) in self.counts.iter().enumerate() {
            w.write_record([self.edges[i].to_string(), self.edges[i + 1].to_string(), c.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<histogram csv>", e))?;
        Ok(())
    }
}

/// Pearson correlation of every column pair; `None` where a column is
/// constant.
pub fn correlation_matrix(x: &FeatureMatrix) -> Vec<Option<f64>> {
    let (n, d) = (x.n_rows(), x.dim());
    let mut centered = vec![0.0; n * d];
    let mut norms = vec![0.0; d];
    for j in 0..d {
        let mean = x.column(j).sum::<f64>() / n as f64;
        for (i, v) in x.column(j).enumerate() {
            centered[i * d + j] = v - mean;
        }
        norms[j] = (0..n).map(|i| centered[i * d + j].powi(2)).sum::<f64>().sqrt();
    }
    let mut out = vec![None; d * d];
    for a in 0..d {
        for b in a..d {
            if norms[a] == 0.0 || norms[b] == 0.0 {
                continue;
            }
            let cov: f64 = (0..n).map(|i| centered[i * d + a] * centered[i * d + b]).sum();
            let r = (cov / (norms[a] * norms[b])).clamp(-1.0, 1.0);
            out[a * d + b] = Some(r);
            out[b * d + a] = Some(r);
        }
    }
    out
}

/// `|r_ab − r̂_ab|` for every unordered column pair `a < b`, in row-major
/// pair order. Pairs involving a constant column count as 0.
pub fn correlation_errors(real: &FeatureMatrix, synth: &FeatureMatrix) -> Result<Vec<f64>> {
    if real.dim() != synth.dim() {
        return Err(Error::Shape(format!("dimension {} against {}", real.dim(), synth.dim())));
    }
    if real.n_rows() < 2 || synth.n_rows() < 2 {
        return Err(Error::invalid("correlation needs at least two rows"));
    }
    let d = real.dim();
    let (r, s) = (correlation_matrix(real), correlation_matrix(synth));
    let mut errors = Vec::with_capacity(d * (d.saturating_sub(1)) / 2);
    for a in 0..d {
        for b in a + 1..d {
            errors.push(match (r[a * d + b], s[a * d + b]) {
                (Some(x), Some(y)) => (x - y).abs(),
                _ => 0.0,
            });
        }
    }
    Ok(errors)
}

pub fn correlation_error_histogram(real: &FeatureMatrix, synth: &FeatureMatrix, bins: usize) -> Result<CorrelationHistogram> {
    if bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    let errors = correlation_errors(real, synth)?;
    let width = 2.0 / bins as f64;
    let edges = (0..=bins).map(|i| i as f64 * width).collect();
    let mut counts = vec![0; bins];
    for &e in &errors {
        counts[((e / width) as usize).min(bins - 1)] += 1;
    }
    let mean_error = if errors.is_empty() {
        0.0
    } else {
        errors.iter().sum::<f64>() / errors.len() as f64
    };
    Ok(CorrelationHistogram {
        edges,
        counts,
        mean_error,
    })
}
