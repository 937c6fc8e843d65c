//! Command-line front end. Every command returns a JSON summary; `main`
//! prints it, or a JSON error line on failure.

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::Checkpoint;
use crate::codec::TableCodec;
use crate::error::{Error, Result};
use crate::flowcheck::{check_invariants, load_flows, CheckOptions, Vocabulary};
use crate::generation::{generate, impute, GenerationSpec, DEFAULT_BATCH_SIZE};
use crate::masking::{save_loss_csv, train, TrainConfig};
use crate::metrics::{evaluate, EvalOptions};
use crate::model::{FieldSpec, ModelConfig, TabMtModel};
use crate::privacy::{pareto_search, CandidateEvaluator, SearchConfig};
use crate::schema::{load_csv, infer_schema, FieldSchema, RawTable, TableSchema};
use crate::seeded_rng;

const DEFAULT_MAX_BINS: usize = 32;
const DEFAULT_EVAL_ROWS: usize = 2000;

#[derive(Parser, Debug)]
#[command(name = "tabmt", version, about = "Masked transformer for synthetic tabular data")]
pub struct Cli {
    /// JSON run configuration; flags take precedence over its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice a command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit a model to a CSV and write a checkpoint plus a loss CSV.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the checkpoint path with a `.loss.csv` suffix.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[command(flatten)]
        table: TableArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Sample synthetic rows.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        generation: GenerationArgs,
    },
    /// Score a synthetic table against real data.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        real_train: PathBuf,
        #[arg(long)]
        real_test: Option<PathBuf>,
        #[arg(long)]
        synth: PathBuf,
        /// Receives `report.json` and `correlation_histogram.csv`.
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        metrics: MetricArgs,
    },
    /// Fill missing cells, keeping observed ones.
    Impute {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        generation: GenerationArgs,
    },
    /// Search per-field temperatures trading privacy against quality.
    Pareto {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        real_train: PathBuf,
        #[arg(long)]
        real_test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Structural checks on netflow records.
    Flowcheck {
        #[arg(long)]
        data: PathBuf,
        /// Training flows defining the valid value sets.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        dns_bytes_per_packet: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Where a table comes from and how it is typed.
#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TableArgs {
    /// JSON schema; inferred from the data when absent.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub missing_marker: Option<String>,
    #[arg(long)]
    pub max_bins: Option<usize>,
    /// Target column for an inferred schema.
    #[arg(long)]
    pub target: Option<String>,
    /// Columns an inferred schema treats as categorical.
    #[arg(long, value_delimiter = ',')]
    pub categorical: Option<Vec<String>>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelArgs {
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub drop_path: Option<f64>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationArgs {
    #[arg(long)]
    pub count: Option<usize>,
    /// One temperature per field, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub temps: Option<Vec<f64>>,
    /// `column=value`; repeatable.
    #[arg(long)]
    pub condition: Option<Vec<String>>,
    #[arg(long)]
    pub gen_batch_size: Option<usize>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricArgs {
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub max_embed_rows: Option<usize>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchArgs {
    #[arg(long)]
    pub population: Option<usize>,
    #[arg(long)]
    pub generations: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Synthetic rows generated per candidate.
    #[arg(long)]
    pub eval_rows: Option<usize>,
}

/// Contents of a `--config` file. Every key is optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub data: Option<PathBuf>,
    pub table: TableArgs,
    pub model: ModelArgs,
    pub train: TrainArgs,
    pub generation: GenerationArgs,
    pub metrics: MetricArgs,
    pub search: SearchArgs,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }
}

macro_rules! overlay {
    ($flags:expr, $base:expr, $($field:ident),+) => {{
        let (mut f, b) = ($flags, $base);
        $( if f.$field.is_none() { f.$field = b.$field.clone(); } )+
        f
    }};
}

impl TableArgs {
    fn over(self, base: &Self) -> Self {
        overlay!(self, base, schema, missing_marker, max_bins, target, categorical)
    }

    fn marker(&self) -> &str {
        self.missing_marker.as_deref().unwrap_or("")
    }
}

impl ModelArgs {
    fn over(self, base: &Self) -> Self {
        overlay!(self, base, width, depth, heads, dropout, drop_path)
    }

    fn resolve(&self) -> Result<ModelConfig> {
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            width: self.width.unwrap_or(d.width),
            depth: self.depth.unwrap_or(d.depth),
            heads: self.heads.unwrap_or(d.heads),
            dropout: self.dropout.unwrap_or(d.dropout),
            drop_path: self.drop_path.unwrap_or(d.drop_path),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl TrainArgs {
    fn over(self, base: &Self) -> Self {
        overlay!(self, base, steps, batch_size, warmup_steps, lr, weight_decay)
    }

    fn resolve(&self, seed: u64) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let max_steps = self.steps.unwrap_or(d.max_steps);
        let cfg = TrainConfig {
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            max_steps,
            warmup_steps: self.warmup_steps.unwrap_or(d.warmup_steps.min(max_steps / 10)),
            peak_lr: self.lr.unwrap_or(d.peak_lr),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl GenerationArgs {
    fn over(self, base: &Self) -> Self {
        overlay!(self, base, count, temps, condition, gen_batch_size)
    }

    fn temps(&self, l: usize) -> Result<Vec<f64>> {
        match &self.temps {
            Some(t) if t.len() != l => Err(Error::invalid(format!("{} temperatures given for {l} fields", t.len()))),
            Some(t) => Ok(t.clone()),
            None => Ok(vec![1.0; l]),
        }
    }
}

impl MetricArgs {
    fn over(self, base: &Self) -> Self {
        overlay!(self, base, bins, k, max_embed_rows)
    }
}

impl SearchArgs {
    fn over(self, base: &Self) -> Self {
        overlay!(self, base, population, generations, sigma, eval_rows)
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> Result<Value>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::invalid(e.to_string().trim().to_string()))?;
    execute(cli)
}

pub fn execute(cli: Cli) -> Result<Value> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.or(base.seed).unwrap_or(0);
    match cli.command {
        Command::Train {
            data,
            out,
            loss_csv,
            table,
            model,
            train,
        } => {
            let data = data
                .or(base.data.clone())
                .ok_or_else(|| Error::invalid("train needs --data"))?;
            let loss_csv = loss_csv.unwrap_or_else(|| out.with_extension("loss.csv"));
            cmd_train(
                &data,
                &out,
                &loss_csv,
                &table.over(&base.table),
                &model.over(&base.model),
                &train.over(&base.train),
                seed,
            )
        }
        Command::Generate {
            checkpoint,
            out,
            generation,
        } => cmd_generate(&checkpoint, &out, &generation.over(&base.generation), seed),
        Command::Evaluate {
            checkpoint,
            real_train,
            real_test,
            synth,
            out_dir,
            metrics,
        } => cmd_evaluate(
            &checkpoint,
            &real_train,
            real_test.as_deref(),
            &synth,
            &out_dir,
            &metrics.over(&base.metrics),
            seed,
        ),
        Command::Impute {
            checkpoint,
            data,
            out,
            generation,
        } => cmd_impute(&checkpoint, &data, &out, &generation.over(&base.generation), seed),
        Command::Pareto {
            checkpoint,
            real_train,
            real_test,
            out,
            search,
        } => cmd_pareto(&checkpoint, &real_train, &real_test, &out, &search.over(&base.search), seed),
        Command::Flowcheck {
            data,
            train,
            dns_bytes_per_packet,
            out,
        } => {
            let mut opts = CheckOptions::default();
            if let Some(m) = dns_bytes_per_packet {
                opts.dns_bytes_per_packet = m;
            }
            cmd_flowcheck(&data, train.as_deref(), &opts, out.as_deref())
        }
    }
}

fn resolve_schema(data: &Path, table: &TableArgs) -> Result<TableSchema> {
    if let Some(p) = &table.schema {
        return TableSchema::from_json_file(p);
    }
    let file = File::open(data).map_err(|e| Error::io(data, e))?;
    let inferred = infer_schema(
        std::io::BufReader::new(file),
        table.marker(),
        table.max_bins.unwrap_or(DEFAULT_MAX_BINS),
    )?;
    let forced = table.categorical.clone().unwrap_or_default();
    for name in &forced {
        if inferred.index_of(name).is_none() {
            return Err(Error::MissingColumn(name.clone()));
        }
    }
    let fields = inferred
        .fields()
        .iter()
        .map(|f| {
            if forced.contains(&f.name) {
                FieldSchema::categorical(f.name.clone())
            } else {
                f.clone()
            }
        })
        .collect();
    let target = match &table.target {
        Some(t) => Some(inferred.index_of(t).ok_or_else(|| Error::MissingColumn(t.clone()))?),
        None => None,
    };
    TableSchema::new(fields, target)
}

pub fn cmd_train(
    data: &Path,
    out: &Path,
    loss_csv: &Path,
    table: &TableArgs,
    model: &ModelArgs,
    train_args: &TrainArgs,
    seed: u64,
) -> Result<Value> {
    let model_cfg = model.resolve()?;
    let train_cfg = train_args.resolve(seed)?;
    let schema = resolve_schema(data, table)?;
    let raw = load_csv(data, &schema, table.marker())?;
    let codec = TableCodec::fit(&raw)?;
    let tokens = codec.encode(&raw)?;
    let mut net = TabMtModel::<f32>::new(model_cfg, FieldSpec::from_table_codec(&codec), &mut seeded_rng(seed))?;
    let history = train(&mut net, &tokens, &train_cfg)?;
    save_loss_csv(&history, loss_csv)?;
    Checkpoint::new(net, codec, history.len() as u64, seed)?
        .with_train_config(train_cfg)
        .save(out)?;
    Ok(json!({
        "command": "train",
        "rows": raw.n_rows(),
        "steps": history.len(),
        "final_loss": history.last().map(|r| r.loss),
        "checkpoint": out,
        "loss_csv": loss_csv,
    }))
}

fn parse_conditions(codec: &TableCodec, conditions: &[String]) -> Result<Vec<(usize, u32)>> {
    conditions
        .iter()
        .map(|c| {
            let (name, value) = c
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("condition `{c}` is not column=value")))?;
            let name = name.trim();
            let j = codec
                .schema()
                .index_of(name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
            Ok((j, codec.field(j).encode_str(name, value.trim())?))
        })
        .collect()
}

pub fn cmd_generate(checkpoint: &Path, out: &Path, args: &GenerationArgs, seed: u64) -> Result<Value> {
    let ckpt = Checkpoint::<f32>::load(checkpoint)?;
    let l = ckpt.model.n_fields();
    let count = args.count.ok_or_else(|| Error::invalid("generate needs --count"))?;
    let mut spec = GenerationSpec::new(count, l, seed).with_temps(args.temps(l)?);
    spec.batch_size = args.gen_batch_size.unwrap_or(DEFAULT_BATCH_SIZE);
    for (j, t) in parse_conditions(&ckpt.codec, args.condition.as_deref().unwrap_or(&[]))? {
        spec = spec.with_condition(j, t);
    }
    let tokens = generate(&ckpt.model, ckpt.codec.schema(), &spec)?;
    ckpt.codec.decode(&tokens)?.save_csv(out, "")?;
    Ok(json!({ "command": "generate", "rows": count, "out": out }))
}

fn load_with(codec: &TableCodec, path: &Path) -> Result<RawTable> {
    load_csv(path, codec.schema(), "")
}

pub fn cmd_evaluate(
    checkpoint: &Path,
    real_train: &Path,
    real_test: Option<&Path>,
    synth: &Path,
    out_dir: &Path,
    args: &MetricArgs,
    seed: u64,
) -> Result<Value> {
    let ckpt = Checkpoint::<f32>::load(checkpoint)?;
    let train_t = load_with(&ckpt.codec, real_train)?;
    let test_t = real_test.map(|p| load_with(&ckpt.codec, p)).transpose()?;
    let synth_t = load_with(&ckpt.codec, synth)?;
    let d = EvalOptions::default();
    let opts = EvalOptions {
        bins: args.bins.unwrap_or(d.bins),
        k: args.k.unwrap_or(d.k),
        max_embed_rows: args.max_embed_rows.unwrap_or(d.max_embed_rows),
        seed,
    };
    let report = evaluate(&ckpt.model, &ckpt.codec, &train_t, test_t.as_ref(), &synth_t, &opts)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let report_path = out_dir.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&report_path, e))?;
    let hist_path = out_dir.join("correlation_histogram.csv");
    let file = File::create(&hist_path).map_err(|e| Error::io(&hist_path, e))?;
    report.correlation_error_histogram.write_csv(BufWriter::new(file))?;
    Ok(json!({
        "command": "evaluate",
        "dcr_median": report.dcr_median,
        "diversity": report.diversity,
        "precision": report.precision,
        "recall": report.recall,
        "mle_proxy": report.mle_proxy,
        "report": report_path,
    }))
}

pub fn cmd_impute(checkpoint: &Path, data: &Path, out: &Path, args: &GenerationArgs, seed: u64) -> Result<Value> {
    let ckpt = Checkpoint::<f32>::load(checkpoint)?;
    let raw = load_with(&ckpt.codec, data)?;
    let tokens = ckpt.codec.encode(&raw)?;
    let temps = args.temps(ckpt.model.n_fields())?;
    let filled = impute(
        &ckpt.model,
        &tokens,
        &temps,
        seed,
        args.gen_batch_size.unwrap_or(DEFAULT_BATCH_SIZE),
    )?;
    ckpt.codec.decode(&filled)?.save_csv(out, "")?;
    Ok(json!({
        "command": "impute",
        "rows": raw.n_rows(),
        "filled_cells": raw.missing_count(),
        "out": out,
    }))
}

pub fn cmd_pareto(
    checkpoint: &Path,
    real_train: &Path,
    real_test: &Path,
    out: &Path,
    args: &SearchArgs,
    seed: u64,
) -> Result<Value> {
    let ckpt = Checkpoint::<f32>::load(checkpoint)?;
    let train_t = load_with(&ckpt.codec, real_train)?;
    let test_t = load_with(&ckpt.codec, real_test)?;
    let rows = args.eval_rows.unwrap_or(DEFAULT_EVAL_ROWS);
    let evaluator = CandidateEvaluator::new(&ckpt.model, &ckpt.codec, &train_t, &test_t, rows, seed)?;
    let d = SearchConfig::default();
    let cfg = SearchConfig {
        population: args.population.unwrap_or(d.population),
        generations: args.generations.unwrap_or(d.generations),
        sigma: args.sigma.unwrap_or(d.sigma),
        mutation_rate: None,
        seed,
    };
    let front = pareto_search(ckpt.model.n_fields(), &cfg, |t| evaluator.evaluate(t))?;
    let file = File::create(out).map_err(|e| Error::io(out, e))?;
    front.write_csv(BufWriter::new(file))?;
    Ok(json!({
        "command": "pareto",
        "evaluations": front.history.len(),
        "front_size": front.members.len(),
        "out": out,
    }))
}

pub fn cmd_flowcheck(data: &Path, train: Option<&Path>, opts: &CheckOptions, out: Option<&Path>) -> Result<Value> {
    let flows = load_flows(data)?;
    let vocab = train.map(load_flows).transpose()?.map(|t| Vocabulary::from_records(&t));
    let report = check_invariants(&flows, vocab.as_ref(), opts);
    let value = serde_json::to_value(&report)?;
    if let Some(p) = out {
        std::fs::write(p, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(p, e))?;
    }
    Ok(json!({ "command": "flowcheck", "report": value }))
}

/// The single line `main` prints to stderr for a failed command.
pub fn error_line(err: &Error) -> String {
    json!({ "error": { "kind": err.kind(), "message": err.to_string() } }).to_string()
}
