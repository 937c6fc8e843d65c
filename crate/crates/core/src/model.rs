//! The masked transformer: field embeddings, encoder stack and tied heads.

use serde::{Deserialize, Serialize};

use crate::codec::{FieldCodec, TableCodec};
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::Rng64;

const EMBED_STD: f64 = 0.05;
const POSITION_STD: f64 = 0.01;
const LINEAR_STD: f64 = 0.02;

/// Network topology and regularization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub drop_path: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 64,
            depth: 4,
            heads: 4,
            dropout: 0.0,
            drop_path: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.heads == 0 {
            return Err(Error::invalid("width, depth and heads must be positive"));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        for (name, p) in [("dropout", self.dropout), ("drop_path", self.drop_path)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {p}")));
            }
        }
        Ok(())
    }
}

/// What the network needs to know about one field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub cardinality: usize,
    /// Min-max ratios of the quantizer centers; `None` for categorical fields.
    pub ratios: Option<Vec<f64>>,
}

impl FieldSpec {
    pub fn categorical(cardinality: usize) -> Self {
        FieldSpec {
            cardinality,
            ratios: None,
        }
    }

    pub fn ordered(ratios: Vec<f64>) -> Self {
        FieldSpec {
            cardinality: ratios.len(),
            ratios: Some(ratios),
        }
    }

    pub fn from_codec(codec: &FieldCodec) -> Self {
        match codec.ratios() {
            Some(r) => FieldSpec::ordered(r.to_vec()),
            None => FieldSpec::categorical(codec.cardinality()),
        }
    }

    pub fn from_table_codec(codec: &TableCodec) -> Vec<FieldSpec> {
        codec.codecs().iter().map(FieldSpec::from_codec).collect()
    }
}

#[derive(Clone, Debug)]
enum Embedding {
    Table(ParamId),
    Ordered {
        unordered: ParamId,
        low: ParamId,
        high: ParamId,
    },
}

#[derive(Clone, Debug)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Block {
    norm1: (ParamId, ParamId),
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    norm2: (ParamId, ParamId),
    ff_in: Linear,
    ff_out: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    embeddings: Vec<Embedding>,
    mask_token: ParamId,
    positional: ParamId,
    blocks: Vec<Block>,
    final_norm: (ParamId, ParamId),
    head_bias: Vec<ParamId>,
    head_temp: Vec<ParamId>,
}

/// Tape handles produced by [`TabMtModel::forward`].
pub struct Forward {
    /// (n·l)×d hidden states after the final layer norm, row `i·l + j` for
    /// sample `i`, field `j`.
    pub hidden: Var,
    /// Stacked input lookup table: field weights interleaved with the mask
    /// token, `[W_0, m, W_1, m, ...]`.
    pub input_table: Var,
    /// Logits per field, `None` for fields whose head was not requested.
    pub logits: Vec<Option<Var>>,
}

/// The masked transformer over a fixed list of fields.
#[derive(Clone, Debug)]
pub struct TabMtModel<T> {
    config: ModelConfig,
    fields: Vec<FieldSpec>,
    params: ParamStore<T>,
    layout: Layout,
}

fn field_name(j: usize, part: &str) -> String {
    format!("field.{j}.{part}")
}

fn block_name(b: usize, part: &str) -> String {
    format!("block.{b}.{part}")
}

impl<T: Real> TabMtModel<T> {
    /// Freshly initialized model.
    pub fn new(config: ModelConfig, fields: Vec<FieldSpec>, rng: &mut Rng64) -> Result<Self> {
        config.validate()?;
        validate_fields(&fields)?;
        let d = config.width;
        let l = fields.len();
        let mut p = ParamStore::new();
        for (j, f) in fields.iter().enumerate() {
            let k = f.cardinality;
            if f.ratios.is_some() {
                p.add(field_name(j, "unordered"), Tensor::zeros(k, d));
                p.add(field_name(j, "low"), Tensor::randn(1, d, EMBED_STD, rng));
                p.add(field_name(j, "high"), Tensor::randn(1, d, EMBED_STD, rng));
            } else {
                p.add(field_name(j, "embedding"), Tensor::randn(k, d, EMBED_STD, rng));
            }
        }
        p.add("mask_token", Tensor::randn(1, d, EMBED_STD, rng));
        p.add("positional", Tensor::randn(l, d, POSITION_STD, rng));
        let linear = |p: &mut ParamStore<T>, name: String, din: usize, dout: usize, rng: &mut Rng64| {
            p.add(format!("{name}.weight"), Tensor::randn(din, dout, LINEAR_STD, rng));
            p.add(format!("{name}.bias"), Tensor::zeros(1, dout));
        };
        for b in 0..config.depth {
            p.add(block_name(b, "norm1.gamma"), Tensor::filled(1, d, T::one()));
            p.add(block_name(b, "norm1.beta"), Tensor::zeros(1, d));
            for part in ["query", "key", "value", "out"] {
                linear(&mut p, block_name(b, part), d, d, rng);
            }
            p.add(block_name(b, "norm2.gamma"), Tensor::filled(1, d, T::one()));
            p.add(block_name(b, "norm2.beta"), Tensor::zeros(1, d));
            linear(&mut p, block_name(b, "ff_in"), d, 4 * d, rng);
            linear(&mut p, block_name(b, "ff_out"), 4 * d, d, rng);
        }
        p.add("final_norm.gamma", Tensor::filled(1, d, T::one()));
        p.add("final_norm.beta", Tensor::zeros(1, d));
        for (j, f) in fields.iter().enumerate() {
            p.add(field_name(j, "head.bias"), Tensor::zeros(1, f.cardinality));
            p.add(field_name(j, "head.temp"), Tensor::scalar(T::one()));
        }
        Self::from_params(config, fields, p)
    }

    /// Reassembles a model from named parameters, checking every shape.
    pub fn from_params(config: ModelConfig, fields: Vec<FieldSpec>, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        validate_fields(&fields)?;
        let d = config.width;
        let l = fields.len();
        let find = |name: String, shape: [usize; 2]| -> Result<ParamId> {
            let id = params
                .id_of(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            let got = params.get(id).shape();
            if got != shape {
                return Err(Error::Shape(format!("parameter `{name}` is {got:?}, expected {shape:?}")));
            }
            Ok(id)
        };
        let mut embeddings = Vec::with_capacity(l);
        for (j, f) in fields.iter().enumerate() {
            let k = f.cardinality;
            let table = params.id_of(&field_name(j, "embedding"));
            embeddings.push(match (&f.ratios, table) {
                (Some(_), None) => Embedding::Ordered {
                    unordered: find(field_name(j, "unordered"), [k, d])?,
                    low: find(field_name(j, "low"), [1, d])?,
                    high: find(field_name(j, "high"), [1, d])?,
                },
                _ => Embedding::Table(find(field_name(j, "embedding"), [k, d])?),
            });
        }
        let linear = |name: String, din: usize, dout: usize| -> Result<Linear> {
            Ok(Linear {
                weight: find(format!("{name}.weight"), [din, dout])?,
                bias: find(format!("{name}.bias"), [1, dout])?,
            })
        };
        let norm = |name: String| -> Result<(ParamId, ParamId)> {
            Ok((find(format!("{name}.gamma"), [1, d])?, find(format!("{name}.beta"), [1, d])?))
        };
        let mut blocks = Vec::with_capacity(config.depth);
        for b in 0..config.depth {
            blocks.push(Block {
                norm1: norm(block_name(b, "norm1"))?,
                query: linear(block_name(b, "query"), d, d)?,
                key: linear(block_name(b, "key"), d, d)?,
                value: linear(block_name(b, "value"), d, d)?,
                out: linear(block_name(b, "out"), d, d)?,
                norm2: norm(block_name(b, "norm2"))?,
                ff_in: linear(block_name(b, "ff_in"), d, 4 * d)?,
                ff_out: linear(block_name(b, "ff_out"), 4 * d, d)?,
            });
        }
        let layout = Layout {
            embeddings,
            mask_token: find("mask_token".into(), [1, d])?,
            positional: find("positional".into(), [l, d])?,
            blocks,
            final_norm: norm("final_norm".into())?,
            head_bias: (0..l)
                .map(|j| find(field_name(j, "head.bias"), [1, fields[j].cardinality]))
                .collect::<Result<_>>()?,
            head_temp: (0..l)
                .map(|j| find(field_name(j, "head.temp"), [1, 1]))
                .collect::<Result<_>>()?,
        };
        Ok(TabMtModel {
            config,
            fields,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.fields
    }

    pub fn n_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.fields.iter().map(|f| f.cardinality).collect()
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// True once ordered embeddings have been materialized by [`freeze`].
    ///
    /// [`freeze`]: TabMtModel::freeze
    pub fn is_frozen(&self) -> bool {
        self.layout
            .embeddings
            .iter()
            .all(|e| matches!(e, Embedding::Table(_)))
    }

    pub fn cast<U: Real>(&self) -> TabMtModel<U> {
        TabMtModel {
            config: self.config,
            fields: self.fields.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Records field `j`'s effective embedding matrix on the tape. The same
    /// var feeds the input lookup and the tied output head.
    fn field_weight(&self, tape: &mut Tape<T>, vars: &[Var], j: usize) -> Var {
        match &self.layout.embeddings[j] {
            Embedding::Table(id) => vars[id.index()],
            Embedding::Ordered { unordered, low, high } => {
                let r = self.fields[j].ratios.as_ref().expect("ordered field has ratios");
                let r: Vec<T> = r.iter().map(|&x| T::of(x)).collect();
                let one_minus: Vec<T> = r.iter().map(|&x| T::one() - x).collect();
                let lo = tape.scale_rows(r, vars[low.index()]);
                let hi = tape.scale_rows(one_minus, vars[high.index()]);
                let sum = tape.add(vars[unordered.index()], lo);
                tape.add(sum, hi)
            }
        }
    }

    /// Effective embedding matrix of field `j` (for ordered fields
    /// `E_i + r_i·l + (1 − r_i)·h`).
    pub fn embedding_weight(&self, j: usize) -> Tensor<T> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let w = self.field_weight(&mut tape, &vars, j);
        tape.value(w).clone()
    }

    /// Weight matrix the output head of field `j` multiplies by, read back
    /// from the forward graph.
    pub fn head_weight(&self, j: usize) -> Tensor<T> {
        let l = self.n_fields();
        let tokens = vec![0u32; l];
        let mask = vec![true; l];
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let out = self
            .forward(&mut tape, &vars, &tokens, &mask, &[j], None)
            .expect("all-masked forward");
        let logits = out.logits[j].expect("requested head");
        tape.value(self.head_weight_var(&tape, logits)).clone()
    }

    /// True when the head of field `j` multiplies by the very tape node the
    /// input lookup of field `j` reads from.
    pub fn head_shares_input_weight(&self, j: usize) -> bool {
        let l = self.n_fields();
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let Ok(out) = self.forward(&mut tape, &vars, &vec![0; l], &vec![true; l], &[j], None) else {
            return false;
        };
        let Some(logits) = out.logits.get(j).copied().flatten() else {
            return false;
        };
        tape.operands(out.input_table).get(2 * j).copied() == Some(self.head_weight_var(&tape, logits))
    }

    fn head_weight_var(&self, tape: &Tape<T>, logits: Var) -> Var {
        // logits = (h·Wᵀ + b) / s; walk back to the matmul's rhs.
        tape.operands(logits)
            .first()
            .and_then(|&biased| tape.operands(biased).first().copied())
            .and_then(|mm| tape.operands(mm).get(1).copied())
            .expect("head graph shape")
    }

    /// Replaces every ordered embedding by its materialized matrix.
    pub fn freeze(&self) -> TabMtModel<T> {
        let mut p = ParamStore::new();
        let materialized: Vec<Option<Tensor<T>>> = (0..self.n_fields())
            .map(|j| match self.layout.embeddings[j] {
                Embedding::Ordered { .. } => Some(self.embedding_weight(j)),
                Embedding::Table(_) => None,
            })
            .collect();
        let mut ordered_seen = vec![false; self.n_fields()];
        for id in self.params.ids() {
            let name = self.params.name(id);
            let owner = (0..self.n_fields()).find(|&j| {
                matches!(&self.layout.embeddings[j], Embedding::Ordered { unordered, low, high }
                    if [*unordered, *low, *high].contains(&id))
            });
            match owner {
                Some(j) => {
                    if !ordered_seen[j] {
                        ordered_seen[j] = true;
                        p.add(field_name(j, "embedding"), materialized[j].clone().unwrap());
                    }
                }
                None => {
                    p.add(name, self.params.get(id).clone());
                }
            }
        }
        TabMtModel::from_params(self.config, self.fields.clone(), p).expect("frozen layout")
    }

    fn check_tokens(&self, tokens: &[u32], mask: &[bool]) -> Result<usize> {
        let l = self.n_fields();
        if tokens.len() != mask.len() || !tokens.len().is_multiple_of(l) {
            return Err(Error::Shape(format!(
                "{} tokens and {} mask cells for {l} fields",
                tokens.len(),
                mask.len()
            )));
        }
        for (c, (&t, &m)) in tokens.iter().zip(mask).enumerate() {
            let k = self.fields[c % l].cardinality;
            if !m && t as usize >= k {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    cardinality: k,
                });
            }
        }
        Ok(tokens.len() / l)
    }

    /// Records one forward pass. `tokens` and `mask` are row-major n×l;
    /// masked cells may hold any value. `heads` selects which output heads to
    /// compute. Passing an RNG enables dropout and drop-path.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        tokens: &[u32],
        mask: &[bool],
        heads: &[usize],
        mut rng: Option<&mut Rng64>,
    ) -> Result<Forward> {
        let n = self.check_tokens(tokens, mask)?;
        let l = self.n_fields();
        let cfg = self.config;
        let mask_token = vars[self.layout.mask_token.index()];
        let weights: Vec<Var> = (0..l).map(|j| self.field_weight(tape, vars, j)).collect();

        let mut tables = Vec::with_capacity(2 * l);
        let mut offsets = Vec::with_capacity(l);
        let mut offset = 0;
        for (j, &w) in weights.iter().enumerate() {
            offsets.push(offset);
            tables.push(w);
            tables.push(mask_token);
            offset += self.fields[j].cardinality + 1;
        }
        let table = tape.concat_rows(&tables);
        let idx = tokens
            .iter()
            .zip(mask)
            .enumerate()
            .map(|(c, (&t, &m))| {
                let j = c % l;
                offsets[j] + if m { self.fields[j].cardinality } else { t as usize }
            })
            .collect();
        let x = tape.gather_rows(table, idx);
        let pos = tape.gather_rows(vars[self.layout.positional.index()], (0..n * l).map(|c| c % l).collect());
        let mut x = tape.add(x, pos);

        let linear = |tape: &mut Tape<T>, x: Var, lin: &Linear| {
            let y = tape.matmul(x, vars[lin.weight.index()]);
            tape.add_row(y, vars[lin.bias.index()])
        };
        let norm = |tape: &mut Tape<T>, x: Var, (g, b): (ParamId, ParamId)| {
            tape.layer_norm(x, vars[g.index()], vars[b.index()])
        };
        for block in &self.layout.blocks {
            let h = norm(tape, x, block.norm1);
            let q = linear(tape, h, &block.query);
            let k = linear(tape, h, &block.key);
            let v = linear(tape, h, &block.value);
            let dropout = match rng.as_deref_mut() {
                Some(r) if cfg.dropout > 0.0 => Some((cfg.dropout, r)),
                _ => None,
            };
            let a = tape.attention(q, k, v, l, cfg.heads, dropout);
            let mut a = linear(tape, a, &block.out);
            if let Some(r) = rng.as_deref_mut() {
                a = tape.drop_path(a, cfg.drop_path, l, r);
            }
            x = tape.add(x, a);

            let h = norm(tape, x, block.norm2);
            let f = linear(tape, h, &block.ff_in);
            let mut f = tape.gelu(f);
            if let Some(r) = rng.as_deref_mut() {
                f = tape.dropout(f, cfg.dropout, r);
            }
            let mut f = linear(tape, f, &block.ff_out);
            if let Some(r) = rng.as_deref_mut() {
                f = tape.drop_path(f, cfg.drop_path, l, r);
            }
            x = tape.add(x, f);
        }
        let hidden = norm(tape, x, self.layout.final_norm);

        let mut logits = vec![None; l];
        for &j in heads {
            if j >= l {
                return Err(Error::invalid(format!("head {j} out of {l} fields")));
            }
            let hj = tape.gather_rows(hidden, (0..n).map(|i| i * l + j).collect());
            let raw = tape.matmul_t(hj, false, weights[j], true);
            let biased = tape.add_row(raw, vars[self.layout.head_bias[j].index()]);
            let temp = tape.sigmoid(vars[self.layout.head_temp[j].index()]);
            logits[j] = Some(tape.div_scalar(biased, temp));
        }
        tape.check_finite()?;
        Ok(Forward {
            hidden,
            input_table: table,
            logits,
        })
    }

    /// Inference logits (no dropout) for the requested fields, each n×k_j.
    pub fn logits(&self, tokens: &[u32], mask: &[bool], heads: &[usize]) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let out = self.forward(&mut tape, &vars, tokens, mask, heads, None)?;
        Ok(heads
            .iter()
            .map(|&j| tape.value(out.logits[j].unwrap()).clone())
            .collect())
    }

    /// Mean cross entropy over cells that are masked and not missing. Zero
    /// (with no gradient) when there are none.
    pub fn masked_loss(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        tokens: &[u32],
        mask: &[bool],
        missing: &[bool],
        rng: Option<&mut Rng64>,
    ) -> Result<Var> {
        let l = self.n_fields();
        let n = tokens.len() / l.max(1);
        let heads: Vec<usize> = (0..l)
            .filter(|&j| (0..n).any(|i| mask[i * l + j] && !missing[i * l + j]))
            .collect();
        let count = (0..tokens.len()).filter(|&c| mask[c] && !missing[c]).count();
        if count == 0 {
            self.check_tokens(tokens, mask)?;
            return Ok(tape.leaf(Tensor::scalar(T::zero())));
        }
        let out = self.forward(tape, vars, tokens, mask, &heads, rng)?;
        let mut total: Option<Var> = None;
        for &j in &heads {
            let targets = (0..n)
                .map(|i| {
                    let c = i * l + j;
                    (mask[c] && !missing[c]).then_some(tokens[c] as usize)
                })
                .collect();
            let ce = tape.cross_entropy(out.logits[j].unwrap(), targets);
            total = Some(match total {
                Some(t) => tape.add(t, ce),
                None => ce,
            });
        }
        let loss = tape.scale(total.unwrap(), T::one() / T::of(count as f64));
        tape.check_finite()?;
        Ok(loss)
    }

    /// Mean over fields of the final hidden states, every field visible
    /// except missing cells, which are masked. Returns n×d.
    pub fn embed_rows(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        let mask: Vec<bool> = tokens.iter().map(|&t| t == crate::schema::MISSING_TOKEN).collect();
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let out = self.forward(&mut tape, &vars, tokens, &mask, &[], None)?;
        let mean = tape.segment_mean(out.hidden, self.n_fields());
        Ok(tape.value(mean).clone())
    }
}

fn validate_fields(fields: &[FieldSpec]) -> Result<()> {
    if fields.is_empty() {
        return Err(Error::invalid("a model needs at least one field"));
    }
    for (j, f) in fields.iter().enumerate() {
        if f.cardinality == 0 {
            return Err(Error::EmptyField(format!("field {j}")));
        }
        if let Some(r) = &f.ratios {
            if r.len() != f.cardinality {
                return Err(Error::Shape(format!("field {j}: {} ratios for {} bins", r.len(), f.cardinality)));
            }
        }
    }
    Ok(())
}
