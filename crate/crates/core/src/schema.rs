//! Table schemas, raw and tokenized tables, CSV ingestion and row splitting.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded_rng;

/// Token id stored in a [`TokenTable`] for missing cells. It lies outside every
/// field vocabulary.
pub const MISSING_TOKEN: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FieldKind {
    Categorical { declared_cardinality: Option<usize> },
    Continuous { max_bins: usize },
}

/// One column of a table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "FieldRepr", into = "FieldRepr")]
pub struct FieldSchema {
    pub name: String,
    pub kind: FieldKind,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FieldRepr {
    name: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    declared_cardinality: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max_bins: Option<usize>,
}

impl TryFrom<FieldRepr> for FieldSchema {
    type Error = Error;

    fn try_from(r: FieldRepr) -> Result<Self> {
        let kind = match r.kind.as_str() {
            "categorical" => {
                if r.max_bins.is_some() {
                    return Err(Error::Schema(format!(
                        "categorical field `{}` must not set max_bins",
                        r.name
                    )));
                }
                FieldKind::Categorical {
                    declared_cardinality: r.declared_cardinality,
                }
            }
            "continuous" => {
                if r.declared_cardinality.is_some() {
                    return Err(Error::Schema(format!(
                        "continuous field `{}` must not set declared_cardinality",
                        r.name
                    )));
                }
                FieldKind::Continuous {
                    max_bins: r.max_bins.ok_or_else(|| {
                        Error::Schema(format!("continuous field `{}` needs max_bins", r.name))
                    })?,
                }
            }
            other => {
                return Err(Error::Schema(format!(
                    "field `{}` has unknown kind `{other}`",
                    r.name
                )))
            }
        };
        let field = FieldSchema { name: r.name, kind };
        field.validate()?;
        Ok(field)
    }
}

impl From<FieldSchema> for FieldRepr {
    fn from(f: FieldSchema) -> Self {
        match f.kind {
            FieldKind::Categorical {
                declared_cardinality,
            } => FieldRepr {
                name: f.name,
                kind: "categorical".into(),
                declared_cardinality,
                max_bins: None,
            },
            FieldKind::Continuous { max_bins } => FieldRepr {
                name: f.name,
                kind: "continuous".into(),
                declared_cardinality: None,
                max_bins: Some(max_bins),
            },
        }
    }
}

impl FieldSchema {
    pub fn categorical(name: impl Into<String>) -> Self {
        FieldSchema {
            name: name.into(),
            kind: FieldKind::Categorical {
                declared_cardinality: None,
            },
        }
    }

    pub fn continuous(name: impl Into<String>, max_bins: usize) -> Self {
        FieldSchema {
            name: name.into(),
            kind: FieldKind::Continuous { max_bins },
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self.kind, FieldKind::Continuous { .. })
    }

    fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Schema("field names must be non-empty".into()));
        }
        match self.kind {
            FieldKind::Categorical {
                declared_cardinality: Some(0),
            } => Err(Error::Schema(format!(
                "field `{}`: declared_cardinality must be positive",
                self.name
            ))),
            FieldKind::Continuous { max_bins: 0 } => Err(Error::Schema(format!(
                "field `{}`: max_bins must be positive",
                self.name
            ))),
            _ => Ok(()),
        }
    }
}

/// Ordered list of fields. Field position is the transformer position and is
/// shared by training, generation and metrics.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TableRepr", into = "TableRepr")]
pub struct TableSchema {
    fields: Vec<FieldSchema>,
    target_index: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableRepr {
    fields: Vec<FieldSchema>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_index: Option<usize>,
}

impl TryFrom<TableRepr> for TableSchema {
    type Error = Error;

    fn try_from(r: TableRepr) -> Result<Self> {
        TableSchema::new(r.fields, r.target_index)
    }
}

impl From<TableSchema> for TableRepr {
    fn from(s: TableSchema) -> Self {
        TableRepr {
            fields: s.fields,
            target_index: s.target_index,
        }
    }
}

impl TableSchema {
    pub fn new(fields: Vec<FieldSchema>, target_index: Option<usize>) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::Schema("a schema needs at least one field".into()));
        }
        let mut seen = HashSet::new();
        for f in &fields {
            f.validate()?;
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate field name `{}`", f.name)));
            }
        }
        if let Some(t) = target_index {
            if t >= fields.len() {
                return Err(Error::Schema(format!(
                    "target_index {t} out of range for {} fields",
                    fields.len()
                )));
            }
        }
        Ok(TableSchema {
            fields,
            target_index,
        })
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn fields(&self) -> &[FieldSchema] {
        &self.fields
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn target_index(&self) -> Option<usize> {
        self.target_index
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.fields.iter().map(|f| f.name.as_str())
    }
}

/// A single raw cell.
#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Missing,
    Number(f64),
    Text(String),
}

impl Cell {
    pub fn is_missing(&self) -> bool {
        matches!(self, Cell::Missing)
    }

    fn render(&self, missing_marker: &str) -> String {
        match self {
            Cell::Missing => missing_marker.to_string(),
            Cell::Number(x) => format!("{x}"),
            Cell::Text(s) => s.clone(),
        }
    }
}

/// An n×l table of raw cells in schema order.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    schema: TableSchema,
    rows: Vec<Vec<Cell>>,
}

impl RawTable {
    pub fn new(schema: TableSchema, rows: Vec<Vec<Cell>>) -> Result<Self> {
        let l = schema.len();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != l {
                return Err(Error::Shape(format!(
                    "row {i} has {} cells, schema has {l} fields",
                    row.len()
                )));
            }
            for (cell, field) in row.iter().zip(schema.fields()) {
                if field.is_continuous() && matches!(cell, Cell::Text(_)) {
                    return Err(Error::NotNumeric {
                        row: i,
                        column: field.name.clone(),
                        value: cell.render(""),
                    });
                }
            }
        }
        Ok(RawTable { schema, rows })
    }

    pub fn schema(&self) -> &TableSchema {
        &self.schema
    }

    pub fn rows(&self) -> &[Vec<Cell>] {
        &self.rows
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_fields(&self) -> usize {
        self.schema.len()
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = &Cell> {
        self.rows.iter().map(move |r| &r[j])
    }

    pub fn missing_count(&self) -> usize {
        self.rows
            .iter()
            .flat_map(|r| r.iter())
            .filter(|c| c.is_missing())
            .count()
    }

    fn select(&self, idx: &[usize]) -> RawTable {
        RawTable {
            schema: self.schema.clone(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Writes the table as CSV with a header in schema order.
    pub fn write_csv<W: Write>(&self, writer: W, missing_marker: &str) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.schema.names())?;
        for row in &self.rows {
            w.write_record(row.iter().map(|c| c.render(missing_marker)))?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>, missing_marker: &str) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file), missing_marker)
    }
}

/// Reads a CSV file into a [`RawTable`], reordering columns into schema order.
/// Cells equal to `missing_marker` or empty become [`Cell::Missing`].
pub fn load_csv(path: impl AsRef<Path>, schema: &TableSchema, missing_marker: &str) -> Result<RawTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(std::io::BufReader::new(file), schema, missing_marker)
}

pub fn read_csv<R: Read>(reader: R, schema: &TableSchema, missing_marker: &str) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut positions = Vec::with_capacity(schema.len());
    for f in schema.fields() {
        let p = header
            .iter()
            .position(|h| *h == f.name)
            .ok_or_else(|| Error::MissingColumn(f.name.clone()))?;
        positions.push(p);
    }
    if let Some(extra) = header.iter().find(|h| schema.index_of(h).is_none()) {
        return Err(Error::Schema(format!("unexpected column `{extra}` in csv header")));
    }
    let mut rows = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(schema.len());
        for (f, &p) in schema.fields().iter().zip(&positions) {
            let raw = record.get(p).unwrap_or("").trim();
            let cell = if raw.is_empty() || raw == missing_marker {
                Cell::Missing
            } else if f.is_continuous() {
                let x: f64 = raw.parse().map_err(|_| Error::NotNumeric {
                    row: i,
                    column: f.name.clone(),
                    value: raw.to_string(),
                })?;
                if !x.is_finite() {
                    return Err(Error::NotNumeric {
                        row: i,
                        column: f.name.clone(),
                        value: raw.to_string(),
                    });
                }
                Cell::Number(x)
            } else {
                Cell::Text(raw.to_string())
            };
            row.push(cell);
        }
        rows.push(row);
    }
    RawTable::new(schema.clone(), rows)
}

/// Guesses a schema from a CSV file: a column whose non-missing values all
/// parse as numbers is continuous, anything else is categorical.
pub fn infer_schema<R: Read>(reader: R, missing_marker: &str, max_bins: usize) -> Result<TableSchema> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut numeric = vec![true; header.len()];
    for record in rdr.records() {
        let record = record?;
        for (j, v) in record.iter().enumerate().take(header.len()) {
            let v = v.trim();
            if v.is_empty() || v == missing_marker {
                continue;
            }
            if v.parse::<f64>().map(|x| !x.is_finite()).unwrap_or(true) {
                numeric[j] = false;
            }
        }
    }
    let fields = header
        .into_iter()
        .zip(numeric)
        .map(|(name, is_num)| {
            if is_num {
                FieldSchema::continuous(name, max_bins)
            } else {
                FieldSchema::categorical(name)
            }
        })
        .collect();
    TableSchema::new(fields, None)
}

/// Partitions rows into train/validation/test parts of the given fractions.
///
/// Part sizes use largest-remainder rounding, with every part receiving at
/// least one row. Within each part rows keep their original relative order.
pub fn split(table: &RawTable, fractions: (f64, f64, f64), seed: u64) -> Result<(RawTable, RawTable, RawTable)> {
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(Error::invalid("split fractions must be positive"));
    }
    if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("split fractions must sum to 1"));
    }
    let n = table.n_rows();
    if n < fr.len() {
        return Err(Error::invalid(format!(
            "cannot split {n} rows into {} non-empty parts",
            fr.len()
        )));
    }
    let sizes = part_sizes(n, &fr);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed));
    let mut parts = Vec::with_capacity(3);
    let mut start = 0;
    for size in sizes {
        let mut idx = order[start..start + size].to_vec();
        idx.sort_unstable();
        parts.push(table.select(&idx));
        start += size;
    }
    let test = parts.pop().unwrap();
    let val = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    Ok((train, val, test))
}

fn part_sizes(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut leftover = n - sizes.iter().sum::<usize>();
    let mut by_remainder: Vec<usize> = (0..fractions.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in by_remainder.iter().cycle() {
        if leftover == 0 {
            break;
        }
        sizes[i] += 1;
        leftover -= 1;
    }
    while let Some(empty) = sizes.iter().position(|&s| s == 0) {
        let largest = (0..sizes.len()).max_by_key(|&i| (sizes[i], usize::MAX - i)).unwrap();
        sizes[largest] -= 1;
        sizes[empty] += 1;
    }
    sizes
}

/// Independently replaces each cell by [`Cell::Missing`] with probability
/// `fraction`.
pub fn drop_values(table: &RawTable, fraction: f64, seed: u64) -> Result<RawTable> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!("drop fraction {fraction} outside [0, 1]")));
    }
    let mut rng = seeded_rng(seed);
    let rows = table
        .rows
        .iter()
        .map(|row| {
            row.iter()
                .map(|c| {
                    let u: f64 = rng.random();
                    if u < fraction {
                        Cell::Missing
                    } else {
                        c.clone()
                    }
                })
                .collect()
        })
        .collect();
    Ok(RawTable {
        schema: table.schema.clone(),
        rows,
    })
}

/// Integer-encoded table with an explicit missing mask, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenTable {
    schema: TableSchema,
    n_rows: usize,
    tokens: Vec<u32>,
    missing: Vec<bool>,
}

impl TokenTable {
    /// Builds a table from row-major tokens. Cells holding [`MISSING_TOKEN`]
    /// are marked missing.
    pub fn from_tokens(schema: TableSchema, tokens: Vec<u32>) -> Result<Self> {
        let l = schema.len();
        if !tokens.len().is_multiple_of(l) {
            return Err(Error::Shape(format!(
                "{} tokens is not a multiple of {l} fields",
                tokens.len()
            )));
        }
        let missing = tokens.iter().map(|&t| t == MISSING_TOKEN).collect();
        Ok(TokenTable {
            n_rows: tokens.len() / l,
            schema,
            tokens,
            missing,
        })
    }

    pub fn schema(&self) -> &TableSchema {
        &self.schema
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_fields(&self) -> usize {
        self.schema.len()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn missing(&self) -> &[bool] {
        &self.missing
    }

    pub fn row(&self, i: usize) -> &[u32] {
        let l = self.n_fields();
        &self.tokens[i * l..(i + 1) * l]
    }

    pub fn get(&self, i: usize, j: usize) -> Option<u32> {
        let idx = i * self.n_fields() + j;
        (!self.missing[idx]).then_some(self.tokens[idx])
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    /// Rows with the given indices, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> TokenTable {
        let l = self.n_fields();
        let mut tokens = Vec::with_capacity(idx.len() * l);
        let mut missing = Vec::with_capacity(idx.len() * l);
        for &i in idx {
            tokens.extend_from_slice(&self.tokens[i * l..(i + 1) * l]);
            missing.extend_from_slice(&self.missing[i * l..(i + 1) * l]);
        }
        TokenTable {
            schema: self.schema.clone(),
            n_rows: idx.len(),
            tokens,
            missing,
        }
    }
}
