//! Spider-format ingestion, schema serialization and model-specific input
//! formatting.

mod synth;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tokenizer::{self, Vocabulary, BOS_ID, EOS_ID};

pub use synth::{enumerate_select_column, synth_dataset, toy_schemas, Aggregate, Comparison, SynthQuery};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatabaseSchema {
    pub db_id: String,
    pub tables: Vec<Table>,
}

impl DatabaseSchema {
    pub fn new(db_id: impl Into<String>, tables: Vec<Table>) -> Result<Self> {
        let schema = Self {
            db_id: db_id.into(),
            tables,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.db_id.is_empty() {
            return Err(Error::Invalid("empty db_id".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.tables {
            if !seen.insert(t.name.as_str()) {
                return Err(Error::Invalid(format!(
                    "duplicate table '{}' in {}",
                    t.name, self.db_id
                )));
            }
            if t.columns.is_empty() {
                return Err(Error::Invalid(format!(
                    "table '{}' in {} has no columns",
                    t.name, self.db_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub question: String,
    pub gold_sql: String,
    pub db_id: String,
}

/// Input template per model family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputStyle {
    /// `translate SQL: {q} Schema: {s}`
    T5Prefix,
    /// `Question: {q} Schema: {s}`
    BartPrefix,
    /// `Question: {q} Schema: {s} SQL:`
    Gpt2Prompt,
}

impl InputStyle {
    pub const ALL: [InputStyle; 3] = [InputStyle::T5Prefix, InputStyle::BartPrefix, InputStyle::Gpt2Prompt];

    pub fn name(self) -> &'static str {
        match self {
            InputStyle::T5Prefix => "t5",
            InputStyle::BartPrefix => "bart",
            InputStyle::Gpt2Prompt => "gpt2",
        }
    }

    /// The prompt style is the only one meant for a single-stack decoder.
    pub fn is_decoder_only(self) -> bool {
        self == InputStyle::Gpt2Prompt
    }
}

impl fmt::Display for InputStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InputStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t5" | "t5_prefix" => Ok(InputStyle::T5Prefix),
            "bart" | "bart_prefix" => Ok(InputStyle::BartPrefix),
            "gpt2" | "gpt2_prompt" => Ok(InputStyle::Gpt2Prompt),
            other => Err(Error::Config(format!("unknown input style '{other}' (t5, bart, gpt2)"))),
        }
    }
}

/// `name (col1, col2, …)` per table, tables joined by ` ; `.
pub fn serialize_schema(schema: &DatabaseSchema) -> String {
    schema
        .tables
        .iter()
        .map(|t| format!("{} ({})", t.name, t.columns.join(", ")))
        .collect::<Vec<_>>()
        .join(" ; ")
}

pub fn format_input(question: &str, schema: &str, style: InputStyle) -> String {
    match style {
        InputStyle::T5Prefix => format!("translate SQL: {question} Schema: {schema}"),
        InputStyle::BartPrefix => format!("Question: {question} Schema: {schema}"),
        InputStyle::Gpt2Prompt => format!("Question: {question} Schema: {schema} SQL:"),
    }
}

/// One line of the preprocessed dataset file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormattedExample {
    pub formatted_input: String,
    pub gold_sql: String,
}

/// Token-level training record. Labels are aligned with the sequence they
/// supervise; the loss predicts `labels[t + 1]` from position `t`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingPair {
    pub input_ids: Vec<u32>,
    pub label_ids: Vec<i64>,
}

/// Encoder–decoder styles: input = formatted string, labels = `bos sql eos`.
/// Prompt style: one sequence `prompt sql eos` with the prompt masked out.
pub fn make_training_pair(
    formatted_input: &str,
    gold_sql: &str,
    style: InputStyle,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<TrainingPair> {
    if max_len == 0 {
        return Err(Error::Invalid("max_len must be >= 1".into()));
    }
    let sql = tokenizer::encode(gold_sql, vocab, usize::MAX, false);
    if style.is_decoder_only() {
        let prompt = tokenizer::encode(formatted_input, vocab, usize::MAX, false);
        if prompt.len() >= max_len {
            return Err(Error::NoRoomForTarget {
                prompt_len: prompt.len(),
                max_len,
            });
        }
        let mut seq = prompt.clone();
        seq.extend_from_slice(&sql);
        seq.push(EOS_ID);
        seq.truncate(max_len);
        let label_ids = tokenizer::default_labels(&seq, prompt.len())?;
        Ok(TrainingPair {
            input_ids: seq,
            label_ids,
        })
    } else {
        let input_ids = tokenizer::encode(formatted_input, vocab, max_len, false);
        if input_ids.is_empty() {
            return Err(Error::Invalid("empty formatted input".into()));
        }
        let mut target = Vec::with_capacity(sql.len() + 2);
        target.push(BOS_ID);
        target.extend_from_slice(&sql);
        target.push(EOS_ID);
        target.truncate(max_len.max(2));
        let label_ids = tokenizer::default_labels(&target, 0)?;
        Ok(TrainingPair { input_ids, label_ids })
    }
}

fn read_json(path: &Path) -> Result<Option<Value>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        return Ok(None);
    }
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            index: 0,
            msg: e.to_string(),
        })
}

fn records(path: &Path, value: Option<Value>) -> Result<Vec<Value>> {
    match value {
        None => Ok(Vec::new()),
        Some(Value::Array(items)) => Ok(items),
        Some(_) => Err(Error::Malformed {
            path: path.to_path_buf(),
            index: 0,
            msg: "expected a top-level array".into(),
        }),
    }
}

#[derive(Deserialize)]
struct RawTables {
    db_id: String,
    table_names_original: Vec<String>,
    column_names_original: Vec<(i64, String)>,
}

#[derive(Deserialize)]
struct RawExample {
    question: String,
    query: String,
    db_id: String,
}

pub fn load_schemas(tables_path: &Path) -> Result<Vec<DatabaseSchema>> {
    let items = records(tables_path, read_json(tables_path)?)?;
    let malformed = |index, msg: String| Error::Malformed {
        path: tables_path.to_path_buf(),
        index,
        msg,
    };
    let mut schemas = Vec::with_capacity(items.len());
    for (index, item) in items.into_iter().enumerate() {
        let raw: RawTables = serde_json::from_value(item).map_err(|e| malformed(index, e.to_string()))?;
        let mut tables: Vec<Table> = raw
            .table_names_original
            .iter()
            .map(|name| Table {
                name: name.clone(),
                columns: Vec::new(),
            })
            .collect();
        for (table_idx, column) in raw.column_names_original {
            if table_idx < 0 {
                continue;
            }
            let table = tables
                .get_mut(table_idx as usize)
                .ok_or_else(|| malformed(index, format!("column '{column}' references table {table_idx}")))?;
            table.columns.push(column);
        }
        let schema = DatabaseSchema {
            db_id: raw.db_id,
            tables,
        };
        schema.validate().map_err(|e| malformed(index, e.to_string()))?;
        schemas.push(schema);
    }
    Ok(schemas)
}

pub fn load_examples(examples_path: &Path) -> Result<Vec<Example>> {
    let items = records(examples_path, read_json(examples_path)?)?;
    items
        .into_iter()
        .enumerate()
        .map(|(index, item)| {
            let raw: RawExample = serde_json::from_value(item).map_err(|e| Error::Malformed {
                path: examples_path.to_path_buf(),
                index,
                msg: e.to_string(),
            })?;
            if raw.query.trim().is_empty() {
                return Err(Error::Malformed {
                    path: examples_path.to_path_buf(),
                    index,
                    msg: "empty query".into(),
                });
            }
            Ok(Example {
                question: raw.question,
                gold_sql: raw.query,
                db_id: raw.db_id,
            })
        })
        .collect()
}

/// Loads a Spider tables file and an examples file; every example's db_id
/// must resolve. File order is preserved.
pub fn load_spider(tables_path: &Path, examples_path: &Path) -> Result<(Vec<DatabaseSchema>, Vec<Example>)> {
    let schemas = load_schemas(tables_path)?;
    let examples = load_examples(examples_path)?;
    let known: std::collections::HashSet<&str> = schemas.iter().map(|s| s.db_id.as_str()).collect();
    for (index, ex) in examples.iter().enumerate() {
        if !known.contains(ex.db_id.as_str()) {
            return Err(Error::UnresolvedDbId {
                db_id: ex.db_id.clone(),
                index,
            });
        }
    }
    Ok((schemas, examples))
}

/// Formats every example against its schema.
pub fn format_examples(
    schemas: &[DatabaseSchema],
    examples: &[Example],
    style: InputStyle,
) -> Result<Vec<FormattedExample>> {
    let serialized: HashMap<&str, String> = schemas
        .iter()
        .map(|s| (s.db_id.as_str(), serialize_schema(s)))
        .collect();
    examples
        .iter()
        .enumerate()
        .map(|(index, ex)| {
            let schema = serialized.get(ex.db_id.as_str()).ok_or_else(|| Error::UnresolvedDbId {
                db_id: ex.db_id.clone(),
                index,
            })?;
            if ex.question.trim().is_empty() {
                return Err(Error::Invalid(format!("empty question at example {index}")));
            }
            Ok(FormattedExample {
                formatted_input: format_input(ex.question.trim(), schema, style),
                gold_sql: ex.gold_sql.clone(),
            })
        })
        .collect()
}

/// `formatted_input TAB gold_sql`, one record per line.
pub fn write_dataset(path: &Path, rows: &[FormattedExample]) -> Result<()> {
    fs::write(path, dataset_text(rows)).map_err(|e| Error::io(path, e))
}

pub fn dataset_text(rows: &[FormattedExample]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&flatten_field(&r.formatted_input));
        out.push('\t');
        out.push_str(&flatten_field(&r.gold_sql));
        out.push('\n');
    }
    out
}

fn flatten_field(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn read_dataset(path: &Path) -> Result<Vec<FormattedExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(index, line)| {
            let (input, gold) = line.split_once('\t').ok_or_else(|| Error::Malformed {
                path: path.to_path_buf(),
                index,
                msg: "expected formatted_input<TAB>gold_sql".into(),
            })?;
            Ok(FormattedExample {
                formatted_input: input.to_string(),
                gold_sql: gold.to_string(),
            })
        })
        .collect()
}

/// Deterministic disjoint partition of `0..n` into train / validation / test
/// index sets.
pub fn split_indices(n: usize, valid_fraction: f64, test_fraction: f64, seed: u64) -> Result<[Vec<usize>; 3]> {
    if !(0.0..1.0).contains(&valid_fraction)
        || !(0.0..1.0).contains(&test_fraction)
        || valid_fraction + test_fraction >= 1.0
    {
        return Err(Error::Invalid(format!(
            "split fractions {valid_fraction} + {test_fraction} must stay below 1"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_valid = (n as f64 * valid_fraction).round() as usize;
    let n_test = (n as f64 * test_fraction).round() as usize;
    let test = order.split_off(n - n_test);
    let valid = order.split_off(n - n_test - n_valid);
    Ok([order, valid, test])
}
