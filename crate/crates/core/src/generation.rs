//! Random-order generation, conditioning and imputation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::TabMtModel;
use crate::numerics::Real;
use crate::schema::{TableSchema, TokenTable, MISSING_TOKEN};
use crate::{seeded_rng, Rng64};

/// Below this user temperature sampling becomes argmax.
pub const ARGMAX_TEMPERATURE: f64 = 1e-6;

pub const DEFAULT_BATCH_SIZE: usize = 512;

/// What to generate.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationSpec {
    pub count: usize,
    /// One user temperature per field.
    pub temps: Vec<f64>,
    /// Fixed tokens shared by every generated row.
    pub condition: BTreeMap<usize, u32>,
    pub seed: u64,
    /// Rows per batch; each batch shares one field order.
    pub batch_size: usize,
}

impl GenerationSpec {
    pub fn new(count: usize, n_fields: usize, seed: u64) -> Self {
        GenerationSpec {
            count,
            temps: vec![1.0; n_fields],
            condition: BTreeMap::new(),
            seed,
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }

    pub fn with_temps(mut self, temps: Vec<f64>) -> Self {
        self.temps = temps;
        self
    }

    pub fn with_condition(mut self, field: usize, token: u32) -> Self {
        self.condition.insert(field, token);
        self
    }

    pub fn validate(&self, cardinalities: &[usize]) -> Result<()> {
        validate_temps(&self.temps, cardinalities.len())?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        for (&j, &t) in &self.condition {
            let k = *cardinalities
                .get(j)
                .ok_or_else(|| Error::invalid(format!("condition on field {j} of {}", cardinalities.len())))?;
            if t as usize >= k {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    cardinality: k,
                });
            }
        }
        Ok(())
    }
}

fn validate_temps(temps: &[f64], l: usize) -> Result<()> {
    if temps.len() != l {
        return Err(Error::invalid(format!("{} temperatures for {l} fields", temps.len())));
    }
    if let Some(t) = temps.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(Error::invalid(format!("temperature {t} is not positive and finite")));
    }
    Ok(())
}

/// Draws one token from `softmax(logits / tau)`, or the argmax (lowest index
/// on ties) when `tau` is below [`ARGMAX_TEMPERATURE`].
pub fn sample_field<T: Real, R: Rng + ?Sized>(logits: &[T], tau: f64, rng: &mut R) -> Result<u32> {
    if logits.is_empty() {
        return Err(Error::invalid("no logits to sample from"));
    }
    let z: Vec<f64> = logits.iter().map(|x| x.to_f64().unwrap()).collect();
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    if tau < ARGMAX_TEMPERATURE {
        let mut best = 0;
        for (i, &v) in z.iter().enumerate() {
            if v > z[best] {
                best = i;
            }
        }
        return Ok(best as u32);
    }
    let p = tempered_softmax(&z, tau);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return Ok(i as u32);
        }
    }
    // Rounding left `acc` just below 1; fall back to the last positive entry.
    Ok(p.iter().rposition(|&x| x > 0.0).unwrap_or(0) as u32)
}

/// `softmax(z / tau)` in double precision.
pub fn tempered_softmax(z: &[f64], tau: f64) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = z.iter().map(|&x| ((x - max) / tau).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

/// Uniformly random order of `fields`.
pub fn random_order<R: Rng + ?Sized>(fields: &[usize], rng: &mut R) -> Vec<usize> {
    let mut order = fields.to_vec();
    order.shuffle(rng);
    order
}

/// Fills every unknown cell of a row-major batch, visiting fields in
/// `order`. Each step runs one forward pass over the rows still missing that
/// field and samples it for all of them.
fn fill_batch<T: Real>(
    model: &TabMtModel<T>,
    tokens: &mut [u32],
    known: &mut [bool],
    temps: &[f64],
    order: &[usize],
    rng: &mut Rng64,
) -> Result<()> {
    let l = model.n_fields();
    let n = tokens.len() / l;
    for &j in order {
        let rows: Vec<usize> = (0..n).filter(|&i| !known[i * l + j]).collect();
        if rows.is_empty() {
            continue;
        }
        let mut sub_tokens = Vec::with_capacity(rows.len() * l);
        let mut sub_mask = Vec::with_capacity(rows.len() * l);
        for &i in &rows {
            sub_tokens.extend_from_slice(&tokens[i * l..(i + 1) * l]);
            sub_mask.extend(known[i * l..(i + 1) * l].iter().map(|&k| !k));
        }
        let logits = model.logits(&sub_tokens, &sub_mask, &[j])?.remove(0);
        for (r, &i) in rows.iter().enumerate() {
            tokens[i * l + j] = sample_field(logits.row(r), temps[j], rng)?;
            known[i * l + j] = true;
        }
    }
    Ok(())
}

fn batch_rng(seed: u64, batch: usize) -> Rng64 {
    let mut rng = seeded_rng(seed);
    rng.set_stream(batch as u64);
    rng
}

/// Generates `spec.count` complete rows. Conditioned fields are copied into
/// every row; the rest are sampled in one random order per batch.
pub fn generate<T: Real>(model: &TabMtModel<T>, schema: &TableSchema, spec: &GenerationSpec) -> Result<TokenTable> {
    let l = model.n_fields();
    if schema.len() != l {
        return Err(Error::Shape(format!("schema has {} fields, model {l}", schema.len())));
    }
    spec.validate(&model.cardinalities())?;
    let free: Vec<usize> = (0..l).filter(|j| !spec.condition.contains_key(j)).collect();
    let mut tokens = vec![MISSING_TOKEN; spec.count * l];
    tokens
        .par_chunks_mut(spec.batch_size * l)
        .enumerate()
        .try_for_each(|(b, chunk)| -> Result<()> {
            let mut rng = batch_rng(spec.seed, b);
            let n = chunk.len() / l;
            let mut known = vec![false; chunk.len()];
            for i in 0..n {
                for (&j, &t) in &spec.condition {
                    chunk[i * l + j] = t;
                    known[i * l + j] = true;
                }
            }
            let order = random_order(&free, &mut rng);
            fill_batch(model, chunk, &mut known, &spec.temps, &order, &mut rng)
        })?;
    TokenTable::from_tokens(schema.clone(), tokens)
}

/// Fills the missing cells of `table`, keeping observed cells fixed. Rows
/// are processed in batches that share one random field order.
pub fn impute<T: Real>(
    model: &TabMtModel<T>,
    table: &TokenTable,
    temps: &[f64],
    seed: u64,
    batch_size: usize,
) -> Result<TokenTable> {
    let l = model.n_fields();
    if table.n_fields() != l {
        return Err(Error::Shape(format!("table has {} fields, model {l}", table.n_fields())));
    }
    validate_temps(temps, l)?;
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let cards = model.cardinalities();
    for (c, (&t, &m)) in table.tokens().iter().zip(table.missing()).enumerate() {
        if !m && t as usize >= cards[c % l] {
            return Err(Error::TokenOutOfRange {
                token: t,
                cardinality: cards[c % l],
            });
        }
    }
    let all: Vec<usize> = (0..l).collect();
    let mut tokens = table.tokens().to_vec();
    let missing = table.missing();
    tokens
        .par_chunks_mut(batch_size * l)
        .zip(missing.par_chunks(batch_size * l))
        .enumerate()
        .try_for_each(|(b, (chunk, miss))| -> Result<()> {
            let mut rng = batch_rng(seed, b);
            let mut known: Vec<bool> = miss.iter().map(|&m| !m).collect();
            let order = random_order(&all, &mut rng);
            fill_batch(model, chunk, &mut known, temps, &order, &mut rng)
        })?;
    TokenTable::from_tokens(table.schema().clone(), tokens)
}

/// Bitmask of the fields still masked, bit `j` for field `j`.
pub type FieldSet = u32;

/// Empirical distribution of the masked set after `t` steps of random-order
/// generation over `l` fields, for every `t` in `0..=l`.
pub fn order_distribution_oracle<R: Rng + ?Sized>(l: usize, samples: usize, rng: &mut R) -> Vec<BTreeMap<FieldSet, f64>> {
    assert!(l <= 16, "at most 16 fields");
    let fields: Vec<usize> = (0..l).collect();
    trajectory_distribution(l, samples, || random_order(&fields, rng))
}

/// The same statistic when every trajectory uses the fixed order `0..l`.
pub fn fixed_order_distribution(l: usize, samples: usize) -> Vec<BTreeMap<FieldSet, f64>> {
    let fields: Vec<usize> = (0..l).collect();
    trajectory_distribution(l, samples, || fields.clone())
}

fn trajectory_distribution(l: usize, samples: usize, mut order: impl FnMut() -> Vec<usize>) -> Vec<BTreeMap<FieldSet, f64>> {
    let full: FieldSet = if l == 0 { 0 } else { (1 << l) - 1 };
    let mut counts: Vec<BTreeMap<FieldSet, usize>> = vec![BTreeMap::new(); l + 1];
    for _ in 0..samples {
        let mut masked = full;
        *counts[0].entry(masked).or_default() += 1;
        for (t, j) in order().into_iter().enumerate() {
            masked &= !(1 << j);
            *counts[t + 1].entry(masked).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .map(|c| c.into_iter().map(|(s, n)| (s, n as f64 / samples as f64)).collect())
        .collect()
}
