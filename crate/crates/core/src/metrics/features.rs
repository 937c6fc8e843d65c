use serde::{Deserialize, Serialize};

use crate::codec::{CategoricalCodec, FieldCodec, TableCodec};
use crate::error::{Error, Result};
use crate::schema::{Cell, RawTable};

/// Row-major real matrix, one row per record.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!("{} values do not form rows of {dim}", data.len())));
        }
        Ok(FeatureMatrix { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("ragged rows".into()));
        }
        FeatureMatrix::new(dim, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().skip(j).step_by(self.dim).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Slot {
    OneHot { vocabulary: CategoricalCodec },
    Scaled { min: f64, max: f64 },
}

/// Maps decoded rows to vectors: one-hot for categorical fields, min-max
/// scaling by training range for continuous ones. Missing cells become all
/// zeros.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpace {
    slots: Vec<Option<Slot>>,
}

impl FeatureSpace {
    /// Fits scaling ranges on `train`. `exclude` drops one field (the
    /// downstream target) from the vectors.
    pub fn fit(codec: &TableCodec, train: &RawTable, exclude: Option<usize>) -> Result<Self> {
        check_schema(codec, train)?;
        let mut slots = Vec::with_capacity(codec.codecs().len());
        for (j, c) in codec.codecs().iter().enumerate() {
            if Some(j) == exclude {
                slots.push(None);
                continue;
            }
            slots.push(Some(match c {
                FieldCodec::Categorical { vocabulary } => Slot::OneHot {
                    vocabulary: vocabulary.clone(),
                },
                FieldCodec::Continuous { .. } => {
                    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
                    for cell in train.column(j) {
                        if let Cell::Number(x) = cell {
                            min = min.min(*x);
                            max = max.max(*x);
                        }
                    }
                    if !min.is_finite() {
                        return Err(Error::EmptyField(codec.schema().fields()[j].name.clone()));
                    }
                    Slot::Scaled { min, max }
                }
            }));
        }
        Ok(FeatureSpace { slots })
    }

    pub fn dim(&self) -> usize {
        self.slots
            .iter()
            .flatten()
            .map(|s| match s {
                Slot::OneHot { vocabulary } => vocabulary.cardinality(),
                Slot::Scaled { .. } => 1,
            })
            .sum()
    }

    pub fn transform(&self, table: &RawTable) -> Result<FeatureMatrix> {
        if table.n_fields() != self.slots.len() {
            return Err(Error::Shape(format!(
                "table has {} fields, feature space {}",
                table.n_fields(),
                self.slots.len()
            )));
        }
        let dim = self.dim();
        let mut data = Vec::with_capacity(table.n_rows() * dim);
        for row in table.rows() {
            for (j, (slot, cell)) in self.slots.iter().zip(row).enumerate() {
                match (slot, cell) {
                    (None, _) => {}
                    (Some(Slot::OneHot { vocabulary }), cell) => {
                        let start = data.len();
                        data.extend(std::iter::repeat_n(0.0, vocabulary.cardinality()));
                        let text = match cell {
                            Cell::Missing => continue,
                            Cell::Number(x) => format!("{x}"),
                            Cell::Text(v) => v.clone(),
                        };
                        let t = vocabulary.encode(&text).ok_or_else(|| Error::OutOfVocabulary {
                            field: table.schema().fields()[j].name.clone(),
                            value: text,
                        })?;
                        data[start + t as usize] = 1.0;
                    }
                    (Some(Slot::Scaled { .. }), Cell::Missing) => data.push(0.0),
                    (Some(Slot::Scaled { min, max }), Cell::Number(x)) => {
                        data.push(if max > min { (x - min) / (max - min) } else { 0.0 });
                    }
                    (Some(Slot::Scaled { .. }), Cell::Text(v)) => {
                        return Err(Error::NotNumeric {
                            row: 0,
                            column: table.schema().fields()[j].name.clone(),
                            value: v.clone(),
                        })
                    }
                }
            }
        }
        FeatureMatrix::new(dim.max(1), if dim == 0 { vec![0.0; table.n_rows()] } else { data })
    }
}

pub(crate) fn check_schema(codec: &TableCodec, table: &RawTable) -> Result<()> {
    if codec.schema() != table.schema() {
        return Err(Error::Schema("table schema differs from the model's".into()));
    }
    Ok(())
}
