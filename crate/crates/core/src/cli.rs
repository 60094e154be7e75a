//! `lightsql` command-line front end.
//!
//! Settings come from an optional flat TOML file (`--config`) overlaid by
//! command-line flags. Outputs are staged in temporary files and moved
//! into place only once every artifact of the command has been produced.
//! Exit codes: 0 success, 1 usage, 2 data, 3 training divergence.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::data::{self, format_examples, load_spider, DatabaseSchema, Example, FormattedExample, InputStyle};
use crate::decoding::{self, BeamConfig};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport};
use crate::model::{Activation, ModelConfig, Paradigm, TransformerModel};
use crate::tokenizer::{self, build_vocab};
use crate::training::{
    self, history_csv, iteration_sweep, load_checkpoint, train, Dataset, LrSchedule, TrainConfig,
    FORMAT_VERSION,
};

#[derive(Parser, Debug)]
#[command(name = "lightsql", version, about = "Desk-scale text-to-SQL: ingest, train, generate, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Format Spider tables/examples into a `formatted_input<TAB>gold_sql` file.
    Ingest(IngestArgs),
    /// Write a synthetic Spider-format dataset over four toy schemas.
    Synth(SynthArgs),
    /// Train a model and write the best checkpoint plus a history CSV.
    Train(TrainArgs),
    /// Decode SQL for each formatted input with a trained checkpoint.
    Generate(GenerateArgs),
    /// Score predictions against gold queries (LFAcc, BLEU, EM).
    Evaluate(EvaluateArgs),
    /// Train at each scaled iteration budget and tabulate validation metrics.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
struct IngestArgs {
    /// Flat TOML file with default values for these options.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Spider `tables.json`.
    #[arg(long)]
    tables: Option<PathBuf>,
    /// Spider examples file (`train_spider.json`, `dev.json`, ...).
    #[arg(long)]
    examples: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Input template: t5, bart or gpt2.
    #[arg(long)]
    style: Option<InputStyle>,
    /// Keep only the first N examples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
struct SynthArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of question/SQL pairs.
    #[arg(long)]
    n: Option<usize>,
    /// Receives `tables.json` and `examples.json`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

/// Model and optimisation settings shared by `train` and `sweep`.
#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
struct TrainingOptions {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Token budget per training sequence.
    #[arg(long)]
    max_len: Option<usize>,
    /// Held-out share for validation; 0 validates on the training rows.
    #[arg(long)]
    valid_fraction: Option<f64>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    max_positions: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// relu or gelu.
    #[arg(long)]
    activation: Option<Activation>,
    /// Global gradient-norm ceiling; 0 disables clipping.
    #[arg(long)]
    grad_clip: Option<f64>,
    /// constant or cosine.
    #[arg(long)]
    schedule: Option<LrSchedule>,
    /// Beam width for validation decoding.
    #[arg(long)]
    eval_beam: Option<usize>,
    #[arg(long)]
    eval_max_len: Option<usize>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Preprocessed dataset from `ingest`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    opts: TrainingOptions,
    /// t5, bart or gpt2; fixes the paradigm.
    #[arg(long)]
    style: Option<InputStyle>,
    /// Checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// History CSV path; defaults to `<out>.history.csv`.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
struct GenerateArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// One formatted input per line; a `<TAB>gold` suffix is ignored.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the gold column of a dataset input, line-aligned.
    #[arg(long)]
    gold_out: Option<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
    /// Generated-token budget.
    #[arg(long)]
    max_len: Option<usize>,
    /// Decode only the first N inputs.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
struct EvaluateArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// One predicted query per line.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// One gold query per line.
    #[arg(long)]
    gold: Option<PathBuf>,
    /// JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Text table path; defaults to the report path with `.txt`.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Row label in the table.
    #[arg(long)]
    label: Option<String>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
struct SweepArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Spider `tables.json`; examples are formatted once per style.
    #[arg(long)]
    tables: Option<PathBuf>,
    #[arg(long)]
    examples: Option<PathBuf>,
    /// Keep only the first N examples.
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    opts: TrainingOptions,
    /// Comma-separated input styles, each trained separately.
    #[arg(long)]
    styles: Option<String>,
    /// Budgets 1000..5000 are divided by this.
    #[arg(long)]
    divisor: Option<usize>,
    /// Receives `sweep.json` and `sweep.txt`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

/// Overlays flags on config-file values. Unknown file keys are rejected.
fn resolve<T: Serialize + DeserializeOwned + Default>(flags: &T, config: Option<&Path>) -> Result<T> {
    let Some(path) = config else {
        return Ok(flags_only(flags));
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let known: BTreeSet<String> = match serde_json::to_value(T::default()) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => BTreeSet::new(),
    };
    let mut merged = Map::new();
    for (k, v) in table {
        if !known.contains(&k) {
            return Err(Error::Config(format!("{}: unknown key '{k}'", path.display())));
        }
        let v = serde_json::to_value(v).map_err(|e| Error::Config(e.to_string()))?;
        merged.insert(k, v);
    }
    if let Ok(Value::Object(m)) = serde_json::to_value(flags) {
        for (k, v) in m {
            if !v.is_null() {
                merged.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn flags_only<T: Serialize + DeserializeOwned + Default>(flags: &T) -> T {
    serde_json::to_value(flags)
        .and_then(serde_json::from_value)
        .unwrap_or_default()
}

fn required<'a, T>(v: &'a Option<T>, name: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::Config(format!("missing required option --{}", name.replace('_', "-"))))
}

/// Files written together at the end of a command.
#[derive(Default)]
struct Staged {
    files: Vec<(PathBuf, tempfile::NamedTempFile)>,
}

impl Staged {
    fn add(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
        self.files.push((path.to_path_buf(), tmp));
        Ok(())
    }

    fn add_json(&mut self, path: &Path, value: &Value) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Invalid(e.to_string()))?;
        text.push('\n');
        self.add(path, text.as_bytes())
    }

    fn commit(self) -> Result<()> {
        for (path, tmp) in self.files {
            tmp.persist(&path).map_err(|e| Error::io(&path, e.error))?;
        }
        Ok(())
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn provenance(command: &str, resolved: &impl Serialize) -> Value {
    json!({
        "format_version": FORMAT_VERSION,
        "tool": concat!("lightsql ", env!("CARGO_PKG_VERSION")),
        "command": command,
        "config": resolved,
    })
}

fn cmd_ingest(args: &IngestArgs) -> Result<()> {
    let r = resolve(args, args.config.as_deref())?;
    let style = r.style.unwrap_or(InputStyle::T5Prefix);
    let (schemas, mut examples) = load_spider(required(&r.tables, "tables")?, required(&r.examples, "examples")?)?;
    if let Some(n) = r.limit {
        examples.truncate(n);
    }
    let rows = format_examples(&schemas, &examples, style)?;
    let out = required(&r.out, "out")?;
    let mut staged = Staged::default();
    staged.add(out, data::dataset_text(&rows).as_bytes())?;
    staged.add_json(&sidecar(out), &provenance("ingest", &r))?;
    staged.commit()?;
    eprintln!("wrote {} records to {}", rows.len(), out.display());
    Ok(())
}

fn spider_tables_json(schemas: &[DatabaseSchema]) -> Value {
    Value::Array(
        schemas
            .iter()
            .map(|s| {
                let mut columns = vec![json!([-1, "*"])];
                for (ti, t) in s.tables.iter().enumerate() {
                    columns.extend(t.columns.iter().map(|c| json!([ti, c])));
                }
                json!({
                    "db_id": s.db_id,
                    "table_names_original": s.tables.iter().map(|t| &t.name).collect::<Vec<_>>(),
                    "column_names_original": columns,
                })
            })
            .collect(),
    )
}

fn spider_examples_json(examples: &[Example]) -> Value {
    Value::Array(
        examples
            .iter()
            .map(|e| json!({"db_id": e.db_id, "question": e.question, "query": e.gold_sql}))
            .collect(),
    )
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let r = resolve(args, args.config.as_deref())?;
    let (seed, n) = (r.seed.unwrap_or(0), r.n.unwrap_or(64));
    let dir = required(&r.out_dir, "out_dir")?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (schemas, examples) = data::synth_dataset(seed, n);
    let mut staged = Staged::default();
    staged.add_json(&dir.join("tables.json"), &spider_tables_json(&schemas))?;
    staged.add_json(&dir.join("examples.json"), &spider_examples_json(&examples))?;
    staged.add_json(&dir.join("meta.json"), &provenance("synth", &json!({"seed": seed, "n": n})))?;
    staged.commit()?;
    eprintln!("wrote {n} synthetic pairs to {}", dir.display());
    Ok(())
}

struct Prepared {
    vocab: tokenizer::Vocabulary,
    data: Dataset,
    model: TransformerModel<f32>,
    cfg: TrainConfig,
}

fn paradigm_for(style: InputStyle) -> Paradigm {
    if style.is_decoder_only() {
        Paradigm::DecOnly
    } else {
        Paradigm::EncDec
    }
}

fn prepare(o: &TrainingOptions, source: &Path, rows: &[FormattedExample], style: InputStyle) -> Result<Prepared> {
    let paradigm = paradigm_for(style);
    let mut cfg = TrainConfig::new(style, paradigm);
    cfg.iterations = o.iterations.unwrap_or(cfg.iterations);
    cfg.batch_size = o.batch_size.unwrap_or(cfg.batch_size);
    cfg.learning_rate = o.learning_rate.unwrap_or(cfg.learning_rate);
    cfg.seed = o.seed.unwrap_or(cfg.seed);
    cfg.eval_every = o.eval_every.unwrap_or(cfg.eval_every.min(cfg.iterations));
    cfg.max_len = o.max_len.unwrap_or(cfg.max_len);
    cfg.grad_clip = match o.grad_clip {
        Some(0.0) => None,
        Some(c) => Some(c),
        None => cfg.grad_clip,
    };
    cfg.schedule = o.schedule.unwrap_or(cfg.schedule);
    cfg.eval_beam = o.eval_beam.unwrap_or(cfg.eval_beam);
    cfg.eval_max_len = o.eval_max_len.unwrap_or(cfg.eval_max_len);
    cfg.validate()?;

    if rows.is_empty() {
        return Err(Error::Malformed {
            path: source.to_path_buf(),
            index: 0,
            msg: "dataset is empty".into(),
        });
    }
    let valid_fraction = o.valid_fraction.unwrap_or(0.1);
    let [train_idx, valid_idx, _] = data::split_indices(rows.len(), valid_fraction, 0.0, cfg.seed)?;
    let train_rows: Vec<FormattedExample> = train_idx.iter().map(|&i| rows[i].clone()).collect();
    let valid_rows: Vec<FormattedExample> = if valid_idx.is_empty() {
        train_rows.clone()
    } else {
        valid_idx.iter().map(|&i| rows[i].clone()).collect()
    };
    let corpus: Vec<&str> = train_rows
        .iter()
        .flat_map(|r| [r.formatted_input.as_str(), r.gold_sql.as_str()])
        .collect();
    let vocab = build_vocab(&corpus, o.vocab_size.unwrap_or(10_000))?;
    let data = Dataset::from_formatted(&train_rows, &valid_rows, &vocab, style, cfg.max_len)?;

    let mut mc = ModelConfig::desk(paradigm, vocab.len());
    mc.n_layers = o.n_layers.unwrap_or(mc.n_layers);
    mc.n_heads = o.n_heads.unwrap_or(mc.n_heads);
    mc.d_model = o.d_model.unwrap_or(mc.d_model);
    mc.d_ff = o.d_ff.unwrap_or(mc.d_ff);
    mc.max_positions = o.max_positions.unwrap_or(mc.max_positions.max(cfg.max_len));
    mc.dropout_rate = o.dropout.unwrap_or(mc.dropout_rate);
    mc.activation = o.activation.unwrap_or(mc.activation);
    if mc.max_positions < cfg.max_len {
        return Err(Error::Config(format!(
            "max_positions {} is below max_len {}",
            mc.max_positions, cfg.max_len
        )));
    }
    let model = TransformerModel::init(mc, cfg.seed)?;
    Ok(Prepared { vocab, data, model, cfg })
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let r = resolve(args, args.config.as_deref())?;
    let style = r.style.unwrap_or(InputStyle::T5Prefix);
    let data_path = required(&r.data, "data")?;
    let rows = data::read_dataset(data_path)?;
    let p = prepare(&r.opts, data_path, &rows, style)?;
    let out = required(&r.out, "out")?.clone();
    let history_path = r.history.clone().unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".history.csv");
        PathBuf::from(s)
    });
    eprintln!(
        "training {} ({} parameters) on {} pairs, validating on {}",
        p.model.config().paradigm,
        p.model.parameter_count(),
        p.data.train.len(),
        p.data.valid.len()
    );
    let outcome = train(p.model, &p.data, &p.vocab, &p.cfg)?;
    let resolved = json!({"run": r, "train": p.cfg, "model": outcome.best.model.config()});
    let mut best = outcome.best;
    best.run_config = resolved.clone();
    let mut staged = Staged::default();
    staged.add(&out, &training::checkpoint_bytes(&best)?)?;
    staged.add(&history_path, history_csv(&outcome.history).as_bytes())?;
    staged.add_json(&sidecar(&history_path), &provenance("train", &resolved))?;
    staged.commit()?;
    eprintln!(
        "best checkpoint: step {} with validation LFAcc {:.4} -> {}",
        best.step,
        best.val_lfacc,
        out.display()
    );
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let r = resolve(args, args.config.as_deref())?;
    let ckpt_path = required(&r.checkpoint, "checkpoint")?;
    let ckpt = load_checkpoint(ckpt_path)?;
    let vocab = ckpt
        .vocab
        .clone()
        .ok_or_else(|| Error::CorruptCheckpoint("checkpoint carries no vocabulary".into()))?;
    let style = ckpt.style.unwrap_or(match ckpt.model.config().paradigm {
        Paradigm::EncDec => InputStyle::T5Prefix,
        Paradigm::DecOnly => InputStyle::Gpt2Prompt,
    });
    let input_path = required(&r.input, "input")?;
    let mut lines = read_lines(input_path)?;
    lines.truncate(r.limit.unwrap_or(1000));
    let input_max = ckpt.model.config().max_positions;
    let mut inputs = Vec::with_capacity(lines.len());
    let mut golds = Vec::with_capacity(lines.len());
    for (index, line) in lines.iter().enumerate() {
        let (input, gold) = match line.split_once('\t') {
            Some((i, g)) => (i, Some(g)),
            None => (line.as_str(), None),
        };
        let ids = training::eval_input_ids(input, &vocab, style, input_max).map_err(|e| Error::Malformed {
            path: input_path.clone(),
            index,
            msg: e.to_string(),
        })?;
        inputs.push(ids);
        golds.push(gold.unwrap_or_default().to_string());
    }
    let beam = BeamConfig::new(
        r.beam.unwrap_or(decoding::DEFAULT_BEAM_SIZE),
        r.max_len.unwrap_or(decoding::DEFAULT_MAX_LEN),
    );
    let preds = training::predict_sql(&ckpt.model, &inputs, &vocab, beam)?;
    let out = required(&r.out, "out")?;
    let resolved = json!({"run": r, "beam_size": beam.beam_size, "max_len": beam.max_len, "style": style});
    let mut staged = Staged::default();
    staged.add(out, lines_text(&preds).as_bytes())?;
    staged.add_json(&sidecar(out), &provenance("generate", &resolved))?;
    if let Some(g) = &r.gold_out {
        staged.add(g, lines_text(&golds).as_bytes())?;
    }
    staged.commit()?;
    eprintln!("wrote {} predictions to {}", preds.len(), out.display());
    Ok(())
}

fn lines_text(lines: &[String]) -> String {
    let mut s = String::new();
    for l in lines {
        s.push_str(&l.replace(['\n', '\r'], " "));
        s.push('\n');
    }
    s
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let r = resolve(args, args.config.as_deref())?;
    let (pred_path, gold_path) = (required(&r.pred, "pred")?, required(&r.gold, "gold")?);
    let preds = read_lines(pred_path)?;
    let golds = read_lines(gold_path)?;
    if preds.len() != golds.len() {
        return Err(Error::Malformed {
            path: pred_path.clone(),
            index: preds.len().min(golds.len()),
            msg: format!("{} predictions for {} gold queries", preds.len(), golds.len()),
        });
    }
    if let Some(index) = golds.iter().position(|g| metrics::normalize_sql(g).is_empty()) {
        return Err(Error::Malformed {
            path: gold_path.clone(),
            index,
            msg: "empty gold query".into(),
        });
    }
    if golds.is_empty() {
        return Err(Error::Malformed {
            path: gold_path.clone(),
            index: 0,
            msg: "no gold queries".into(),
        });
    }
    let report = metrics::evaluate(&preds, &golds)?;
    let label = r.label.clone().unwrap_or_else(|| "model".into());
    let table = metrics::render_table(&[(label, &report)]);
    let report_path = required(&r.report, "report")?;
    let table_path = r.table.clone().unwrap_or_else(|| report_path.with_extension("txt"));
    let mut staged = Staged::default();
    let mut doc = provenance("evaluate", &r);
    doc["report"] = serde_json::to_value(&report).map_err(|e| Error::Invalid(e.to_string()))?;
    staged.add_json(report_path, &doc)?;
    staged.add(&table_path, table.as_bytes())?;
    staged.commit()?;
    print!("{table}");
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let r = resolve(args, args.config.as_deref())?;
    let examples_path = required(&r.examples, "examples")?;
    let (schemas, mut examples) = load_spider(required(&r.tables, "tables")?, examples_path)?;
    if let Some(n) = r.limit {
        examples.truncate(n);
    }
    let styles: Vec<InputStyle> = r
        .styles
        .as_deref()
        .unwrap_or("t5,bart,gpt2")
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<_>>()?;
    let divisor = r.divisor.unwrap_or(training::DEFAULT_SWEEP_DIVISOR);
    let budgets = training::scaled_budgets(divisor)?;
    let longest = *budgets.iter().max().expect("five budgets");
    let dir = required(&r.out_dir, "out_dir")?;
    let mut report_rows = Vec::new();
    for style in styles {
        let mut opts = r.opts.clone();
        opts.iterations = Some(longest);
        opts.eval_every = Some(r.opts.eval_every.unwrap_or(budgets[0]).min(budgets[0]));
        let rows = format_examples(&schemas, &examples, style)?;
        let p = prepare(&opts, examples_path, &rows, style)?;
        eprintln!("sweep {style}: budgets {budgets:?}");
        let report = iteration_sweep(&p.model, &p.data, &p.vocab, &p.cfg, divisor)?;
        report_rows.extend(report.rows);
    }
    let report = training::SweepReport {
        divisor,
        rows: report_rows,
    };
    let table = report.table();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut doc = provenance("sweep", &r);
    doc["sweep"] = serde_json::to_value(&report).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut staged = Staged::default();
    staged.add_json(&dir.join("sweep.json"), &doc)?;
    staged.add(&dir.join("sweep.txt"), table.as_bytes())?;
    staged.commit()?;
    print!("{table}");
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Reported metrics of a finished evaluation, for callers that embed the CLI.
pub fn read_report(path: &Path) -> Result<MetricReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        index: 0,
        msg: e.to_string(),
    })?;
    serde_json::from_value(doc["report"].clone()).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        index: 0,
        msg: e.to_string(),
    })
}
