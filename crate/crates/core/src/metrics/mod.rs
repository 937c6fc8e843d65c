//! Privacy, fidelity and diversity measurements for synthetic tables.

mod correlation;
mod dcr;
mod diversity;
mod features;
mod mle;
mod precision_recall;

pub use correlation::{correlation_error_histogram, correlation_errors, correlation_matrix, CorrelationHistogram};
pub use dcr::{dcr, median, nearest_distances};
pub use diversity::diversity;
pub use features::{FeatureMatrix, FeatureSpace};
pub use mle::{macro_f1, mle_proxy, r_squared, ridge_fit, ridge_predict, LogisticRegression, MleTask};
pub use precision_recall::{knn_radii_sq, precision_recall, DEFAULT_K};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::codec::TableCodec;
use crate::error::Result;
use crate::model::TabMtModel;
use crate::numerics::Real;
use crate::schema::{RawTable, TokenTable};
use crate::seeded_rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub bins: usize,
    pub k: usize,
    /// Rows per side fed to precision/recall; larger tables are subsampled.
    pub max_embed_rows: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            bins: 20,
            k: DEFAULT_K,
            max_embed_rows: 2000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dcr_median: f64,
    pub correlation_error_histogram: CorrelationHistogram,
    pub diversity: f64,
    pub precision: f64,
    pub recall: f64,
    /// `None` when the schema declares no target or no test table is given.
    pub mle_proxy: Option<f64>,
}

/// Model embeddings (mean final hidden state) of up to `max_rows` rows.
pub fn embeddings<T: Real>(model: &TabMtModel<T>, table: &TokenTable, max_rows: usize, seed: u64) -> Result<FeatureMatrix> {
    let n = table.n_rows();
    let mut idx: Vec<usize> = if n > max_rows {
        sample(&mut seeded_rng(seed), n, max_rows).into_vec()
    } else {
        (0..n).collect()
    };
    idx.sort_unstable();
    let sub = table.select_rows(&idx);
    let l = table.n_fields();
    let mut data = Vec::with_capacity(idx.len() * model.config().width);
    for chunk in sub.tokens().chunks(512 * l) {
        let e = model.embed_rows(chunk)?;
        data.extend(e.data().iter().map(|x| x.to_f64().unwrap()));
    }
    FeatureMatrix::new(model.config().width, data)
}

/// Computes every metric of `synth` against the real tables.
pub fn evaluate<T: Real>(
    model: &TabMtModel<T>,
    codec: &TableCodec,
    real_train: &RawTable,
    real_test: Option<&RawTable>,
    synth: &RawTable,
    options: &EvalOptions,
) -> Result<MetricsReport> {
    features::check_schema(codec, real_train)?;
    features::check_schema(codec, synth)?;
    let space = FeatureSpace::fit(codec, real_train, None)?;
    let train_x = space.transform(real_train)?;
    let synth_x = space.transform(synth)?;
    let dcr_median = dcr(&synth_x, &train_x)?;
    let hist = correlation_error_histogram(&train_x, &synth_x, options.bins)?;

    let real_tokens = codec.encode(real_train)?;
    let synth_tokens = codec.encode(synth)?;
    let div = diversity(&synth_tokens, &real_tokens)?;
    let real_e = embeddings(model, &real_tokens, options.max_embed_rows, options.seed)?;
    let synth_e = embeddings(model, &synth_tokens, options.max_embed_rows, options.seed.wrapping_add(1))?;
    let (precision, recall) = precision_recall(&real_e, &synth_e, options.k)?;

    let mle = match (codec.schema().target_index(), real_test) {
        (Some(t), Some(test)) => {
            features::check_schema(codec, test)?;
            let task = MleTask::for_field(&codec.schema().fields()[t].kind);
            Some(mle_proxy(codec, synth, test, t, task)?)
        }
        _ => None,
    };
    Ok(MetricsReport {
        dcr_median,
        correlation_error_histogram: hist,
        diversity: div,
        precision,
        recall,
        mle_proxy: mle,
    })
}
