use serde::{Deserialize, Serialize};

use super::{FeatureMatrix, FeatureSpace};
use crate::codec::{FieldCodec, TableCodec};
use crate::error::{Error, Result};
use crate::numerics::{AdamW, AdamWConfig, ParamStore, Real, Tape, Tensor};
use crate::schema::{Cell, FieldKind, RawTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MleTask {
    Classify,
    Regress,
}

impl MleTask {
    /// Classification for categorical targets, regression otherwise.
    pub fn for_field(kind: &FieldKind) -> Self {
        match kind {
            FieldKind::Categorical { .. } => MleTask::Classify,
            FieldKind::Continuous { .. } => MleTask::Regress,
        }
    }
}

const LOGISTIC_STEPS: usize = 300;
const LOGISTIC_LR: f64 = 0.1;
const RIDGE_LAMBDA: f64 = 1e-3;

/// Fits the proxy learner on `synth_train` and scores it on `real_test`:
/// macro-F1 for classification, R² for regression.
pub fn mle_proxy(codec: &TableCodec, synth_train: &RawTable, real_test: &RawTable, target: usize, task: MleTask) -> Result<f64> {
    if target >= codec.codecs().len() {
        return Err(Error::invalid(format!("target index {target} out of range")));
    }
    let space = FeatureSpace::fit(codec, synth_train, Some(target))?;
    let (xtr, ytr) = labelled(codec, &space, synth_train, target, task)?;
    let (xte, yte) = labelled(codec, &space, real_test, target, task)?;
    if ytr.is_empty() || yte.is_empty() {
        return Err(Error::invalid("no rows with an observed target"));
    }
    match task {
        MleTask::Classify => {
            let k = codec.field(target).cardinality();
            let ytr: Vec<usize> = ytr.iter().map(|&y| y as usize).collect();
            let yte: Vec<usize> = yte.iter().map(|&y| y as usize).collect();
            if ytr.iter().all(|&y| y == ytr[0]) {
                return Err(Error::invalid("training target has a single class"));
            }
            let model = LogisticRegression::fit(&xtr, &ytr, k)?;
            Ok(macro_f1(&yte, &model.predict(&xte)))
        }
        MleTask::Regress => {
            let w = ridge_fit(&xtr, &ytr, RIDGE_LAMBDA)?;
            let pred: Vec<f64> = (0..xte.n_rows()).map(|i| ridge_predict(&w, xte.row(i))).collect();
            r_squared(&yte, &pred)
        }
    }
}

fn labelled(
    codec: &TableCodec,
    space: &FeatureSpace,
    table: &RawTable,
    target: usize,
    task: MleTask,
) -> Result<(FeatureMatrix, Vec<f64>)> {
    let keep: Vec<usize> = (0..table.n_rows())
        .filter(|&i| !table.rows()[i][target].is_missing())
        .collect();
    let rows = keep.iter().map(|&i| table.rows()[i].clone()).collect();
    let kept = RawTable::new(table.schema().clone(), rows)?;
    let x = space.transform(&kept)?;
    let name = &codec.schema().fields()[target].name;
    let y = kept
        .rows()
        .iter()
        .map(|r| {
            let cell = &r[target];
            match (task, codec.field(target), cell) {
                (MleTask::Classify, field, cell) => field.encode_cell(name, cell).map(f64::from),
                (MleTask::Regress, FieldCodec::Continuous { .. }, Cell::Number(v)) => Ok(*v),
                (MleTask::Regress, ..) => Err(Error::invalid(format!("regression target `{name}` is not numeric"))),
            }
        })
        .collect::<Result<_>>()?;
    Ok((x, y))
}

/// Multinomial logistic regression trained full-batch with AdamW.
pub struct LogisticRegression {
    weight: Tensor<f64>,
    bias: Tensor<f64>,
}

impl LogisticRegression {
    pub fn fit(x: &FeatureMatrix, y: &[usize], classes: usize) -> Result<Self> {
        let (n, d) = (x.n_rows(), x.dim());
        let mut params = ParamStore::<f64>::new();
        let w = params.add("weight", Tensor::zeros(d, classes));
        let b = params.add("bias", Tensor::zeros(1, classes));
        let mut opt = AdamW::new(
            &params,
            AdamWConfig {
                lr: LOGISTIC_LR,
                weight_decay: 1e-3,
                ..Default::default()
            },
        );
        let xs = Tensor::new(n, d, x.data().to_vec())?;
        let targets: Vec<Option<usize>> = y.iter().map(|&c| Some(c)).collect();
        for _ in 0..LOGISTIC_STEPS {
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let input = tape.leaf(xs.clone());
            let z = tape.matmul(input, vars[w.index()]);
            let z = tape.add_row(z, vars[b.index()]);
            let loss = tape.cross_entropy_mean(z, targets.clone());
            tape.check_finite()?;
            let grads = params.collect_grads(&tape.backward(loss), &vars);
            opt.step(&mut params, &grads)?;
        }
        Ok(LogisticRegression {
            weight: params.get(w).clone(),
            bias: params.get(b).clone(),
        })
    }

    pub fn predict(&self, x: &FeatureMatrix) -> Vec<usize> {
        let c = self.weight.cols();
        let mut z = vec![0.0; x.n_rows() * c];
        f64::gemm(x.n_rows(), x.dim(), c, x.data(), false, self.weight.data(), false, 0.0, &mut z);
        z.chunks(c)
            .map(|row| {
                (0..c)
                    .map(|j| row[j] + self.bias.data()[j])
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, v)| if v > best.1 { (j, v) } else { best })
                    .0
            })
            .collect()
    }
}

/// Unweighted mean of per-class F1 over classes present in either labels or
/// predictions.
pub fn macro_f1(truth: &[usize], pred: &[usize]) -> f64 {
    let classes: std::collections::BTreeSet<usize> = truth.iter().chain(pred).copied().collect();
    let mut total = 0.0;
    for &c in &classes {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (&t, &p) in truth.iter().zip(pred) {
            match (t == c, p == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fneg += 1,
                _ => {}
            }
        }
        let denom = 2 * tp + fp + fneg;
        if denom > 0 {
            total += 2.0 * tp as f64 / denom as f64;
        }
    }
    total / classes.len() as f64
}

/// Ridge regression weights; the last entry is the intercept.
pub fn ridge_fit(x: &FeatureMatrix, y: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let (n, d) = (x.n_rows(), x.dim() + 1);
    let mut a = Vec::with_capacity(n * d);
    for i in 0..n {
        a.extend_from_slice(x.row(i));
        a.push(1.0);
    }
    let mut gram = vec![0.0; d * d];
    f64::gemm(d, n, d, &a, true, &a, false, 0.0, &mut gram);
    for j in 0..d {
        gram[j * d + j] += lambda;
    }
    let mut rhs = vec![0.0; d];
    f64::gemm(d, n, 1, &a, true, y, false, 0.0, &mut rhs);
    cholesky_solve(&mut gram, d, &mut rhs)?;
    Ok(rhs)
}

pub fn ridge_predict(w: &[f64], x: &[f64]) -> f64 {
    x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + w[w.len() - 1]
}

/// Solves `A x = b` in place for symmetric positive definite `A`.
fn cholesky_solve(a: &mut [f64], d: usize, b: &mut [f64]) -> Result<()> {
    for j in 0..d {
        let mut s = a[j * d + j];
        for k in 0..j {
            s -= a[j * d + k] * a[j * d + k];
        }
        if s <= 0.0 {
            return Err(Error::invalid("normal equations are not positive definite"));
        }
        let diag = s.sqrt();
        a[j * d + j] = diag;
        for i in j + 1..d {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = s / diag;
        }
    }
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * d + k] * b[k];
        }
        b[i] = s / a[i * d + i];
    }
    for i in (0..d).rev() {
        let mut s = b[i];
        for k in i + 1..d {
            s -= a[k * d + i] * b[k];
        }
        b[i] = s / a[i * d + i];
    }
    Ok(())
}

pub fn r_squared(truth: &[f64], pred: &[f64]) -> Result<f64> {
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::invalid("test target is constant"));
    }
    let ss_res: f64 = truth.iter().zip(pred).map(|(y, p)| (y - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}
