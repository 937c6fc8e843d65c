//! Per-field value/token codecs.
//!
//! Categorical fields map distinct raw strings to tokens in first-occurrence
//! order. Continuous fields are quantized with 1-D k-means; the sorted cluster
//! centers become the vocabulary and the min-max normalized centers form the
//! ratio vector used by ordered embeddings.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{Cell, FieldKind, RawTable, TableSchema, TokenTable, MISSING_TOKEN};

/// Largest `distinct values × bins` product solved with the exact dynamic
/// program. Bigger inputs fall back to Lloyd's algorithm.
const EXACT_KMEANS_BUDGET: usize = 5_000_000;
const LLOYD_MAX_ITERS: usize = 200;
const LLOYD_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct CategoricalCodec {
    values: Vec<String>,
    index: HashMap<String, u32>,
}

impl TryFrom<Vec<String>> for CategoricalCodec {
    type Error = Error;

    fn try_from(values: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(values.len());
        for (i, v) in values.iter().enumerate() {
            if index.insert(v.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate categorical value `{v}`")));
            }
        }
        if values.is_empty() {
            return Err(Error::invalid("categorical codec needs at least one value"));
        }
        Ok(CategoricalCodec { values, index })
    }
}

impl From<CategoricalCodec> for Vec<String> {
    fn from(c: CategoricalCodec) -> Self {
        c.values
    }
}

impl CategoricalCodec {
    /// Assigns tokens by first occurrence.
    pub fn fit<'a, I: IntoIterator<Item = &'a str>>(values: I) -> Result<Self> {
        let mut out = Vec::new();
        let mut index = HashMap::new();
        for v in values {
            if !index.contains_key(v) {
                index.insert(v.to_string(), out.len() as u32);
                out.push(v.to_string());
            }
        }
        if out.is_empty() {
            return Err(Error::EmptyField("<categorical>".into()));
        }
        Ok(CategoricalCodec { values: out, index })
    }

    pub fn cardinality(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[String] {
        &self.values
    }

    pub fn encode(&self, value: &str) -> Option<u32> {
        self.index.get(value).copied()
    }

    pub fn decode(&self, token: u32) -> Result<&str> {
        self.values
            .get(token as usize)
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange {
                token,
                cardinality: self.values.len(),
            })
    }
}

/// Quantizer for a continuous field: strictly ascending centers and their
/// min-max ratios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ContinuousRepr", into = "ContinuousRepr")]
pub struct ContinuousCodec {
    centers: Vec<f64>,
    ratios: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ContinuousRepr {
    centers: Vec<f64>,
}

impl TryFrom<ContinuousRepr> for ContinuousCodec {
    type Error = Error;

    fn try_from(r: ContinuousRepr) -> Result<Self> {
        ContinuousCodec::from_centers(r.centers)
    }
}

impl From<ContinuousCodec> for ContinuousRepr {
    fn from(c: ContinuousCodec) -> Self {
        ContinuousRepr { centers: c.centers }
    }
}

impl ContinuousCodec {
    /// Builds a codec from strictly ascending, finite centers.
    pub fn from_centers(centers: Vec<f64>) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::invalid("continuous codec needs at least one center"));
        }
        if centers.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("continuous codec centers".into()));
        }
        if centers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("continuous codec centers must be strictly ascending"));
        }
        let ratios = ratio_vector(&centers);
        Ok(ContinuousCodec { centers, ratios })
    }

    /// Fits a quantizer with at most `max_bins` centers.
    ///
    /// When the data has no more distinct values than `max_bins`, every
    /// distinct value is its own center. Otherwise the centers are the
    /// optimal 1-D k-means centroids with `k = max_bins`.
    pub fn fit(values: &[f64], max_bins: usize) -> Result<Self> {
        if max_bins == 0 {
            return Err(Error::invalid("max_bins must be positive"));
        }
        if values.is_empty() {
            return Err(Error::EmptyField("<continuous>".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("continuous field values".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let (distinct, weights) = distinct_with_weights(&sorted);
        let centers = if distinct.len() <= max_bins {
            distinct
        } else if distinct.len().saturating_mul(max_bins) <= EXACT_KMEANS_BUDGET {
            kmeans_1d_exact(&distinct, &weights, max_bins)
        } else {
            kmeans_1d_lloyd(&distinct, &weights, max_bins)
        };
        ContinuousCodec::from_centers(centers)
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn cardinality(&self) -> usize {
        self.centers.len()
    }

    /// Index of the nearest center, ties going to the lower index.
    pub fn encode(&self, x: f64) -> Result<u32> {
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("value {x} passed to encode")));
        }
        Ok(nearest_center(&self.centers, x) as u32)
    }

    pub fn decode(&self, token: u32) -> Result<f64> {
        self.centers
            .get(token as usize)
            .copied()
            .ok_or(Error::TokenOutOfRange {
                token,
                cardinality: self.centers.len(),
            })
    }
}

/// `r_i = (v_i - min v) / (max v - min v)`; a single center gets ratio 0.
fn ratio_vector(centers: &[f64]) -> Vec<f64> {
    let k = centers.len();
    if k == 1 {
        return vec![0.0];
    }
    let lo = centers[0];
    let hi = centers[k - 1];
    centers.iter().map(|&v| (v - lo) / (hi - lo)).collect()
}

fn nearest_center(centers: &[f64], x: f64) -> usize {
    let p = centers.partition_point(|&c| c < x);
    if p == 0 {
        return 0;
    }
    if p == centers.len() {
        return centers.len() - 1;
    }
    if x - centers[p - 1] <= centers[p] - x {
        p - 1
    } else {
        p
    }
}

fn distinct_with_weights(sorted: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut values: Vec<f64> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for &x in sorted {
        match values.last() {
            Some(&last) if last == x => *weights.last_mut().unwrap() += 1.0,
            _ => {
                values.push(x);
                weights.push(1.0);
            }
        }
    }
    (values, weights)
}

/// Weighted prefix sums over mean-centered values, for O(1) segment costs.
struct SegmentCost {
    w: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl SegmentCost {
    fn new(values: &[f64], weights: &[f64]) -> Self {
        let total: f64 = weights.iter().sum();
        let mean = values.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() / total;
        let n = values.len();
        let (mut w, mut s1, mut s2) = (vec![0.0; n + 1], vec![0.0; n + 1], vec![0.0; n + 1]);
        for i in 0..n {
            let y = values[i] - mean;
            w[i + 1] = w[i] + weights[i];
            s1[i + 1] = s1[i] + weights[i] * y;
            s2[i + 1] = s2[i] + weights[i] * y * y;
        }
        SegmentCost { w, s1, s2 }
    }

    /// Within-cluster sum of squares of points `a..b`.
    fn cost(&self, a: usize, b: usize) -> f64 {
        let w = self.w[b] - self.w[a];
        if w <= 0.0 {
            return 0.0;
        }
        let s1 = self.s1[b] - self.s1[a];
        let s2 = self.s2[b] - self.s2[a];
        (s2 - s1 * s1 / w).max(0.0)
    }
}

/// Optimal weighted 1-D k-means over sorted distinct values. Optimal
/// clusters are contiguous and their split points are monotone in the
/// prefix length, so each layer is filled by divide and conquer.
fn kmeans_1d_exact(values: &[f64], weights: &[f64], k: usize) -> Vec<f64> {
    let m = values.len();
    debug_assert!(k >= 1 && k < m);
    let seg = SegmentCost::new(values, weights);
    // prev[j]: best cost of splitting the first j points into (layer) clusters.
    let mut prev: Vec<f64> = (0..=m).map(|j| seg.cost(0, j)).collect();
    let mut splits: Vec<Vec<u32>> = Vec::with_capacity(k - 1);
    for layer in 1..k {
        let mut cur = vec![f64::INFINITY; m + 1];
        let mut arg = vec![0u32; m + 1];
        // A prefix of length j with (layer + 1) clusters needs j >= layer + 1.
        fill_layer(&seg, &prev, &mut cur, &mut arg, layer + 1, m, layer, m - 1);
        prev = cur;
        splits.push(arg);
    }
    let mut bounds = vec![m];
    let mut j = m;
    for arg in splits.iter().rev() {
        j = arg[j] as usize;
        bounds.push(j);
    }
    bounds.push(0);
    bounds.reverse();
    bounds
        .windows(2)
        .map(|b| {
            let (mut sw, mut sx) = (0.0, 0.0);
            for i in b[0]..b[1] {
                sw += weights[i];
                sx += weights[i] * values[i];
            }
            sx / sw
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn fill_layer(
    seg: &SegmentCost,
    prev: &[f64],
    cur: &mut [f64],
    arg: &mut [u32],
    lo: usize,
    hi: usize,
    opt_lo: usize,
    opt_hi: usize,
) {
    if lo > hi {
        return;
    }
    let mid = (lo + hi) / 2;
    let mut best = f64::INFINITY;
    let mut best_i = opt_lo;
    // The last cluster is points i..mid, with i in [opt_lo, min(mid - 1, opt_hi)].
    for i in opt_lo..=opt_hi.min(mid - 1) {
        let c = prev[i] + seg.cost(i, mid);
        if c < best {
            best = c;
            best_i = i;
        }
    }
    cur[mid] = best;
    arg[mid] = best_i as u32;
    if mid > lo {
        fill_layer(seg, prev, cur, arg, lo, mid - 1, opt_lo, best_i);
    }
    fill_layer(seg, prev, cur, arg, mid + 1, hi, best_i, opt_hi);
}

/// Lloyd's algorithm on weighted sorted distinct values with quantile
/// initialization.
fn kmeans_1d_lloyd(values: &[f64], weights: &[f64], k: usize) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let cumulative: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let mut centers: Vec<f64> = (0..k)
        .map(|i| {
            let q = (i as f64 + 0.5) / k as f64 * total;
            let p = cumulative.partition_point(|&c| c <= q).min(values.len() - 1);
            values[p]
        })
        .collect();
    let mut assign = vec![0usize; values.len()];
    for _ in 0..LLOYD_MAX_ITERS {
        centers.sort_by(f64::total_cmp);
        for (a, &x) in assign.iter_mut().zip(values) {
            *a = nearest_center(&centers, x);
        }
        let mut sw = vec![0.0; k];
        let mut sx = vec![0.0; k];
        for ((&a, &x), &w) in assign.iter().zip(values).zip(weights) {
            sw[a] += w;
            sx[a] += w * x;
        }
        let mut next: Vec<f64> = (0..k)
            .map(|c| if sw[c] > 0.0 { sx[c] / sw[c] } else { f64::NAN })
            .collect();
        for c in 0..k {
            if next[c].is_nan() {
                // Reseed to the point farthest from its own center.
                let far = (0..values.len())
                    .max_by(|&a, &b| {
                        let da = (values[a] - centers[assign[a]]).abs();
                        let db = (values[b] - centers[assign[b]]).abs();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                next[c] = values[far];
                assign[far] = c;
            }
        }
        let shift = centers
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        centers = next;
        if shift < LLOYD_TOL {
            break;
        }
    }
    centers.sort_by(f64::total_cmp);
    centers.dedup();
    centers
}

/// Codec for one field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FieldCodec {
    Categorical { vocabulary: CategoricalCodec },
    Continuous { quantizer: ContinuousCodec },
}

impl FieldCodec {
    pub fn cardinality(&self) -> usize {
        match self {
            FieldCodec::Categorical { vocabulary } => vocabulary.cardinality(),
            FieldCodec::Continuous { quantizer } => quantizer.cardinality(),
        }
    }

    /// Ratio vector for continuous fields, `None` for categorical ones.
    pub fn ratios(&self) -> Option<&[f64]> {
        match self {
            FieldCodec::Categorical { .. } => None,
            FieldCodec::Continuous { quantizer } => Some(quantizer.ratios()),
        }
    }

    pub fn encode_cell(&self, field: &str, cell: &Cell) -> Result<u32> {
        match (self, cell) {
            (_, Cell::Missing) => Ok(MISSING_TOKEN),
            (FieldCodec::Continuous { quantizer }, Cell::Number(x)) => quantizer.encode(*x),
            (FieldCodec::Continuous { .. }, Cell::Text(s)) => Err(Error::NotNumeric {
                row: 0,
                column: field.to_string(),
                value: s.clone(),
            }),
            (FieldCodec::Categorical { vocabulary }, Cell::Text(s)) => encode_text(vocabulary, field, s),
            (FieldCodec::Categorical { vocabulary }, Cell::Number(x)) => {
                encode_text(vocabulary, field, &format!("{x}"))
            }
        }
    }

    /// Parses a raw string (as found in a CSV) and encodes it.
    pub fn encode_str(&self, field: &str, raw: &str) -> Result<u32> {
        match self {
            FieldCodec::Categorical { vocabulary } => encode_text(vocabulary, field, raw),
            FieldCodec::Continuous { quantizer } => {
                let x: f64 = raw.trim().parse().map_err(|_| Error::NotNumeric {
                    row: 0,
                    column: field.to_string(),
                    value: raw.to_string(),
                })?;
                quantizer.encode(x)
            }
        }
    }

    pub fn decode_token(&self, token: u32) -> Result<Cell> {
        if token == MISSING_TOKEN {
            return Ok(Cell::Missing);
        }
        match self {
            FieldCodec::Categorical { vocabulary } => Ok(Cell::Text(vocabulary.decode(token)?.to_string())),
            FieldCodec::Continuous { quantizer } => Ok(Cell::Number(quantizer.decode(token)?)),
        }
    }
}

fn encode_text(vocabulary: &CategoricalCodec, field: &str, s: &str) -> Result<u32> {
    vocabulary.encode(s).ok_or_else(|| Error::OutOfVocabulary {
        field: field.to_string(),
        value: s.to_string(),
    })
}

/// Fitted codecs for every field of a schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableCodec {
    schema: TableSchema,
    codecs: Vec<FieldCodec>,
}

impl TableCodec {
    pub fn fit(table: &RawTable) -> Result<Self> {
        let schema = table.schema().clone();
        let mut codecs = Vec::with_capacity(schema.len());
        for (j, field) in schema.fields().iter().enumerate() {
            let codec = match field.kind {
                FieldKind::Continuous { max_bins } => {
                    let values: Vec<f64> = table
                        .column(j)
                        .filter_map(|c| match c {
                            Cell::Number(x) => Some(*x),
                            _ => None,
                        })
                        .collect();
                    if values.is_empty() {
                        return Err(Error::EmptyField(field.name.clone()));
                    }
                    FieldCodec::Continuous {
                        quantizer: ContinuousCodec::fit(&values, max_bins)?,
                    }
                }
                FieldKind::Categorical {
                    declared_cardinality,
                } => {
                    let texts: Vec<String> = table
                        .column(j)
                        .filter_map(|c| match c {
                            Cell::Text(s) => Some(s.clone()),
                            Cell::Number(x) => Some(format!("{x}")),
                            Cell::Missing => None,
                        })
                        .collect();
                    let vocabulary = CategoricalCodec::fit(texts.iter().map(String::as_str))
                        .map_err(|_| Error::EmptyField(field.name.clone()))?;
                    if let Some(limit) = declared_cardinality {
                        if vocabulary.cardinality() > limit {
                            return Err(Error::Schema(format!(
                                "field `{}` has {} distinct values, more than its declared cardinality {limit}",
                                field.name,
                                vocabulary.cardinality()
                            )));
                        }
                    }
                    FieldCodec::Categorical { vocabulary }
                }
            };
            codecs.push(codec);
        }
        Ok(TableCodec { schema, codecs })
    }

    pub fn from_parts(schema: TableSchema, codecs: Vec<FieldCodec>) -> Result<Self> {
        if schema.len() != codecs.len() {
            return Err(Error::Shape(format!(
                "{} codecs for {} fields",
                codecs.len(),
                schema.len()
            )));
        }
        for (f, c) in schema.fields().iter().zip(&codecs) {
            if f.is_continuous() != matches!(c, FieldCodec::Continuous { .. }) {
                return Err(Error::Schema(format!("codec kind does not match field `{}`", f.name)));
            }
        }
        Ok(TableCodec { schema, codecs })
    }

    pub fn schema(&self) -> &TableSchema {
        &self.schema
    }

    pub fn codecs(&self) -> &[FieldCodec] {
        &self.codecs
    }

    pub fn field(&self, j: usize) -> &FieldCodec {
        &self.codecs[j]
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.codecs.iter().map(FieldCodec::cardinality).collect()
    }

    pub fn encode(&self, table: &RawTable) -> Result<TokenTable> {
        if table.schema() != &self.schema {
            return Err(Error::Schema("table schema differs from codec schema".into()));
        }
        let mut tokens = Vec::with_capacity(table.n_rows() * self.schema.len());
        for (i, row) in table.rows().iter().enumerate() {
            for ((cell, codec), field) in row.iter().zip(&self.codecs).zip(self.schema.fields()) {
                tokens.push(codec.encode_cell(&field.name, cell).map_err(|e| match e {
                    Error::NotNumeric { column, value, .. } => Error::NotNumeric { row: i, column, value },
                    other => other,
                })?);
            }
        }
        TokenTable::from_tokens(self.schema.clone(), tokens)
    }

    pub fn decode(&self, table: &TokenTable) -> Result<RawTable> {
        let l = self.schema.len();
        let rows = table
            .tokens()
            .chunks(l)
            .map(|row| {
                row.iter()
                    .zip(&self.codecs)
                    .map(|(&t, c)| c.decode_token(t))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        RawTable::new(self.schema.clone(), rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::FieldSchema;
    use proptest::prelude::*;

    /// Plain O(k m^2) dynamic program, independent of the divide-and-conquer
    /// solver above. Returns the optimal within-cluster sum of squares.
    fn oracle_wcss(sorted: &[f64], k: usize) -> f64 {
        let n = sorted.len();
        let cost = |a: usize, b: usize| {
            let seg = &sorted[a..b];
            let mean = seg.iter().sum::<f64>() / seg.len() as f64;
            seg.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
        };
        let mut d = vec![vec![f64::INFINITY; n + 1]; k + 1];
        d[0][0] = 0.0;
        for c in 1..=k {
            for j in 1..=n {
                for i in (c - 1)..j {
                    if d[c - 1][i].is_finite() {
                        d[c][j] = d[c][j].min(d[c - 1][i] + cost(i, j));
                    }
                }
            }
        }
        d[k][n]
    }

    fn wcss(values: &[f64], centers: &[f64]) -> f64 {
        values
            .iter()
            .map(|&x| {
                let c = centers[nearest_center(centers, x)];
                (x - c) * (x - c)
            })
            .sum()
    }

    #[test]
    fn few_distinct_values_are_their_own_centers() {
        let c = ContinuousCodec::fit(&[0.0, 5.0, 10.0], 3).unwrap();
        assert_eq!(c.centers(), &[0.0, 5.0, 10.0]);
        assert_eq!(c.ratios(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn constant_field_has_one_center_ratio_zero() {
        let c = ContinuousCodec::fit(&[7.0, 7.0, 7.0], 5).unwrap();
        assert_eq!(c.centers(), &[7.0]);
        assert_eq!(c.ratios(), &[0.0]);
    }

    #[test]
    fn empty_and_non_finite_inputs_error() {
        assert!(ContinuousCodec::fit(&[], 3).is_err());
        assert!(ContinuousCodec::fit(&[1.0, f64::NAN], 3).is_err());
        assert!(ContinuousCodec::fit(&[1.0], 0).is_err());
    }

    #[test]
    fn bimodal_mixture_two_bins() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a = Normal::new(0.0, 0.1).unwrap();
        let b = Normal::new(10.0, 0.1).unwrap();
        let values: Vec<f64> = (0..1000)
            .map(|i| if i % 2 == 0 { a.sample(&mut rng) } else { b.sample(&mut rng) })
            .collect();
        let c = ContinuousCodec::fit(&values, 2).unwrap();
        assert!((c.centers()[0] - 0.0).abs() < 0.2, "{:?}", c.centers());
        assert!((c.centers()[1] - 10.0).abs() < 0.2, "{:?}", c.centers());
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let opt = oracle_wcss(&sorted, 2);
        assert!((wcss(&values, c.centers()) - opt).abs() <= 1e-9 * opt);
    }

    #[test]
    fn encode_nearest_with_low_tie() {
        let c = ContinuousCodec::from_centers(vec![0.0, 5.0, 10.0]).unwrap();
        assert_eq!(c.encode(4.0).unwrap(), 1);
        assert_eq!(c.encode(2.5).unwrap(), 0);
        assert_eq!(c.encode(100.0).unwrap(), 2);
        assert_eq!(c.encode(-3.0).unwrap(), 0);
        assert!(c.encode(f64::INFINITY).is_err());
    }

    #[test]
    fn decode_lookup_and_bounds() {
        let c = ContinuousCodec::from_centers(vec![0.0, 5.0, 10.0]).unwrap();
        assert_eq!(c.decode(2).unwrap(), 10.0);
        assert_eq!(c.decode(c.encode(6.1).unwrap()).unwrap(), 5.0);
        assert!(matches!(c.decode(3), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn categorical_first_occurrence() {
        let c = CategoricalCodec::fit(["a", "b", "a"]).unwrap();
        assert_eq!(c.encode("a"), Some(0));
        assert_eq!(c.encode("b"), Some(1));
        assert_eq!(c.decode(c.encode("b").unwrap()).unwrap(), "b");
        assert_eq!(c.encode("unseen"), None);
        assert!(CategoricalCodec::fit(std::iter::empty::<&str>()).is_err());
        let f = FieldCodec::Categorical { vocabulary: c };
        assert!(matches!(
            f.encode_cell("x", &Cell::Text("unseen".into())),
            Err(Error::OutOfVocabulary { .. })
        ));
    }

    #[test]
    fn lloyd_fallback_on_large_inputs() {
        let values: Vec<f64> = (0..200_000).map(|i| (i as f64 * 0.618).sin() * 100.0 + i as f64 * 1e-6).collect();
        let c = ContinuousCodec::fit(&values, 50).unwrap();
        assert!(c.cardinality() <= 50 && c.cardinality() >= 45);
        assert!(c.centers().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn table_round_trip_preserves_categoricals() {
        let schema = TableSchema::new(
            vec![FieldSchema::categorical("c"), FieldSchema::continuous("x", 2)],
            None,
        )
        .unwrap();
        let rows = vec![
            vec![Cell::Text("u".into()), Cell::Number(1.0)],
            vec![Cell::Text("v".into()), Cell::Number(2.0)],
            vec![Cell::Text("u".into()), Cell::Number(9.0)],
        ];
        let raw = RawTable::new(schema, rows).unwrap();
        let codec = TableCodec::fit(&raw).unwrap();
        let back = codec.decode(&codec.encode(&raw).unwrap()).unwrap();
        for (a, b) in raw.rows().iter().zip(back.rows()) {
            assert_eq!(a[0], b[0]);
        }
        let json = serde_json::to_string(&codec).unwrap();
        let again: TableCodec = serde_json::from_str(&json).unwrap();
        assert_eq!(again, codec);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn ratio_identity_is_exact(mut centers in prop::collection::vec(-1e6f64..1e6, 2..40)) {
            centers.sort_by(f64::total_cmp);
            centers.dedup();
            prop_assume!(centers.len() >= 2);
            let c = ContinuousCodec::from_centers(centers.clone()).unwrap();
            let k = centers.len();
            let r = c.ratios();
            prop_assert_eq!(r[0], 0.0);
            prop_assert_eq!(r[k - 1], 1.0);
            for i in 0..k {
                prop_assert_eq!(r[i], (centers[i] - centers[0]) / (centers[k - 1] - centers[0]));
            }
            prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn fitted_wcss_matches_dp_oracle(
            values in prop::collection::vec(-100i32..100, 1..64),
            k in 1usize..8,
        ) {
            let values: Vec<f64> = values.into_iter().map(|v| v as f64 * 0.37).collect();
            let c = ContinuousCodec::fit(&values, k).unwrap();
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            let mut distinct = sorted.clone();
            distinct.dedup();
            let opt = oracle_wcss(&sorted, k.min(distinct.len()));
            let got = wcss(&values, c.centers());
            prop_assert!((got - opt).abs() <= 1e-9 * opt.max(1e-12), "got {got}, optimum {opt}");
        }

        #[test]
        fn encode_is_surjective_on_training_values(
            values in prop::collection::vec(-50.0f64..50.0, 1..200),
            k in 1usize..12,
        ) {
            let c = ContinuousCodec::fit(&values, k).unwrap();
            let mut hit = vec![false; c.cardinality()];
            for &v in &values {
                hit[c.encode(v).unwrap() as usize] = true;
            }
            prop_assert!(hit.iter().all(|&h| h));
        }
    }
}
