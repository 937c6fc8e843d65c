//! Uniform-rate masking and the training loop.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TabMtModel;
use crate::numerics::{cosine_schedule, AdamW, AdamWConfig, Real, Tape, Tensor};
use crate::schema::TokenTable;
use crate::{seeded_rng, Rng64};

/// Row-major n×l mask, `true` meaning hidden from the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPattern {
    n_fields: usize,
    mask: Vec<bool>,
}

impl MaskPattern {
    pub fn n_rows(&self) -> usize {
        self.mask.len() / self.n_fields
    }

    pub fn n_fields(&self) -> usize {
        self.n_fields
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    pub fn into_vec(self) -> Vec<bool> {
        self.mask
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.mask[i * self.n_fields..(i + 1) * self.n_fields]
    }

    pub fn masked_count(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&m| m).count()
    }
}

/// Draws a per-row rate `p ~ U(0, 1)` and hides each cell of the row
/// independently when a fresh uniform exceeds it. Missing cells are always
/// hidden. The number of hidden cells in a complete row is uniform on
/// `0..=l`.
pub fn sample_mask<R: Rng + ?Sized>(n: usize, l: usize, missing: &[bool], rng: &mut R) -> MaskPattern {
    assert_eq!(missing.len(), n * l, "missing mask must be n×l");
    let mut mask = Vec::with_capacity(n * l);
    for i in 0..n {
        let p: f64 = rng.random();
        for j in 0..l {
            let u: f64 = rng.random();
            mask.push(u > p || missing[i * l + j]);
        }
    }
    MaskPattern { n_fields: l, mask }
}

/// Optimization settings. Regularization rates live in the model config.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            max_steps: 2000,
            warmup_steps: 100,
            peak_lr: 2e-3,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_steps == 0 {
            return Err(Error::invalid("batch_size and max_steps must be positive"));
        }
        if self.warmup_steps >= self.max_steps {
            return Err(Error::invalid(format!(
                "warmup_steps ({}) must be below max_steps ({})",
                self.warmup_steps, self.max_steps
            )));
        }
        let valid = |x: f64| x.is_finite() && x >= 0.0;
        if !valid(self.peak_lr) || !valid(self.weight_decay) {
            return Err(Error::invalid("peak_lr and weight_decay must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Loss and gradients of one step.
pub struct StepOutput<T> {
    pub loss: f64,
    pub grads: Vec<Tensor<T>>,
}

/// Samples a mask for `tokens` (row-major, n×l) and returns the masked loss
/// with a gradient for every parameter.
pub fn training_step<T: Real>(
    model: &TabMtModel<T>,
    tokens: &[u32],
    missing: &[bool],
    rng: &mut Rng64,
) -> Result<StepOutput<T>> {
    let l = model.n_fields();
    let n = tokens.len() / l;
    let mask = sample_mask(n, l, missing, rng);
    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape);
    let loss = model.masked_loss(&mut tape, &vars, tokens, mask.as_slice(), missing, Some(rng))?;
    let value = tape.value(loss).item().to_f64().unwrap();
    let grads = model.params().collect_grads(&tape.backward(loss), &vars);
    Ok(StepOutput { loss: value, grads })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Runs `config.max_steps` AdamW steps on minibatches drawn uniformly with
/// replacement. Returns the per-step loss history.
pub fn train<T: Real>(model: &mut TabMtModel<T>, table: &TokenTable, config: &TrainConfig) -> Result<Vec<LossRecord>> {
    train_with(model, table, config, |_| {})
}

/// [`train`] with a callback invoked after every step.
pub fn train_with<T: Real>(
    model: &mut TabMtModel<T>,
    table: &TokenTable,
    config: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    config.validate()?;
    let l = model.n_fields();
    if table.n_fields() != l {
        return Err(Error::Shape(format!("table has {} fields, model {l}", table.n_fields())));
    }
    let n = table.n_rows();
    if n == 0 {
        return Err(Error::invalid("cannot train on an empty table"));
    }
    let mut rng = seeded_rng(config.seed);
    let mut opt = AdamW::new(
        model.params(),
        AdamWConfig {
            lr: 0.0,
            weight_decay: config.weight_decay,
            ..Default::default()
        },
    );
    let mut history = Vec::with_capacity(config.max_steps);
    let mut tokens = Vec::with_capacity(config.batch_size * l);
    let mut missing = Vec::with_capacity(config.batch_size * l);
    for step in 0..config.max_steps {
        tokens.clear();
        missing.clear();
        for _ in 0..config.batch_size {
            let i = rng.random_range(0..n);
            tokens.extend_from_slice(table.row(i));
            missing.extend_from_slice(&table.missing()[i * l..(i + 1) * l]);
        }
        let out = training_step(model, &tokens, &missing, &mut rng)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        let lr = cosine_schedule(step, config.warmup_steps, config.max_steps, config.peak_lr);
        opt.set_lr(lr);
        opt.step(model.params_mut(), &out.grads)
            .map_err(|e| Error::NonFinite(format!("step {step}: {e}")))?;
        let record = LossRecord {
            step,
            lr,
            loss: out.loss,
        };
        on_step(&record);
        history.push(record);
    }
    Ok(history)
}

pub fn write_loss_csv<W: Write>(history: &[LossRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["step", "lr", "loss"])?;
    for r in history {
        w.write_record([r.step.to_string(), r.lr.to_string(), r.loss.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<loss csv>", e))?;
    Ok(())
}

pub fn save_loss_csv(history: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_loss_csv(history, std::io::BufWriter::new(file))
}
