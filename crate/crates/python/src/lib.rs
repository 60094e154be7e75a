//! Python bindings for the lightsql pipeline.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use lightsql::data::{self, DatabaseSchema, FormattedExample, InputStyle, Table};
use lightsql::decoding::{beam_search, ids_to_sql, BeamConfig};
use lightsql::metrics;
use lightsql::model::{ModelConfig, Paradigm, TransformerModel};
use lightsql::tokenizer;
use lightsql::training::{self, Checkpoint, Dataset, TrainConfig};

fn py_err(e: lightsql::Error) -> PyErr {
    match e {
        lightsql::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_style(style: &str) -> PyResult<InputStyle> {
    style.parse().map_err(py_err)
}

fn paradigm_for(style: InputStyle) -> Paradigm {
    if style.is_decoder_only() {
        Paradigm::DecOnly
    } else {
        Paradigm::EncDec
    }
}

#[pyfunction]
fn normalize_sql(sql: &str) -> String {
    metrics::normalize_sql(sql)
}

#[pyfunction]
fn lfacc(pred: &str, gold: &str) -> bool {
    metrics::lfacc(pred, gold)
}

#[pyfunction]
fn exact_match(pred: &str, gold: &str) -> bool {
    metrics::exact_match(pred, gold)
}

#[pyfunction]
fn bleu(pred: &str, gold: &str) -> PyResult<f64> {
    metrics::bleu(pred, gold).map_err(py_err)
}

/// Corpus scores as a dict with `n_samples`, `lfacc`, `bleu` and `em`.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, predictions: Vec<String>, golds: Vec<String>) -> PyResult<Bound<'py, PyDict>> {
    let r = metrics::evaluate(&predictions, &golds).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("n_samples", r.n_samples)?;
    d.set_item("lfacc", r.lfacc)?;
    d.set_item("bleu", r.bleu)?;
    d.set_item("em", r.em)?;
    Ok(d)
}

/// Schema string for `[(table, [columns...]), ...]`.
#[pyfunction]
fn serialize_schema(tables: Vec<(String, Vec<String>)>) -> PyResult<String> {
    let tables = tables.into_iter().map(|(name, columns)| Table { name, columns }).collect();
    let schema = DatabaseSchema::new("py", tables).map_err(py_err)?;
    Ok(data::serialize_schema(&schema))
}

#[pyfunction]
fn format_input(question: &str, schema: &str, style: &str) -> PyResult<String> {
    Ok(data::format_input(question, schema, parse_style(style)?))
}

/// `(formatted_input, gold_sql)` pairs of the synthetic dataset.
#[pyfunction]
#[pyo3(signature = (seed, n, style = "t5"))]
fn synth_dataset(seed: u64, n: usize, style: &str) -> PyResult<Vec<(String, String)>> {
    let (schemas, examples) = data::synth_dataset(seed, n);
    let rows = data::format_examples(&schemas, &examples, parse_style(style)?).map_err(py_err)?;
    Ok(rows.into_iter().map(|r| (r.formatted_input, r.gold_sql)).collect())
}

#[pyclass(module = "lightsql", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Vocabulary {
    inner: tokenizer::Vocabulary,
}

#[pymethods]
impl Vocabulary {
    #[staticmethod]
    #[pyo3(signature = (corpus, max_size = 10_000))]
    fn build(corpus: Vec<String>, max_size: usize) -> PyResult<Self> {
        Ok(Self {
            inner: tokenizer::build_vocab(&corpus, max_size).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: tokenizer::Vocabulary::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[pyo3(signature = (text, max_len = 256, pad = false))]
    fn encode(&self, text: &str, max_len: usize, pad: bool) -> Vec<u32> {
        tokenizer::encode(text, &self.inner, max_len, pad)
    }

    fn decode(&self, ids: Vec<u32>) -> String {
        tokenizer::decode(&ids, &self.inner)
    }

    fn tokens(&self) -> Vec<String> {
        self.inner.tokens().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// A trained or freshly initialised model with its vocabulary and style.
#[pyclass(module = "lightsql", frozen)]
struct Model {
    ckpt: Checkpoint,
}

impl Model {
    fn vocab(&self) -> PyResult<&tokenizer::Vocabulary> {
        self.ckpt
            .vocab
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("model has no vocabulary"))
    }

    fn style(&self) -> InputStyle {
        self.ckpt.style.unwrap_or(match self.ckpt.model.config().paradigm {
            Paradigm::EncDec => InputStyle::T5Prefix,
            Paradigm::DecOnly => InputStyle::Gpt2Prompt,
        })
    }
}

#[pymethods]
impl Model {
    /// Desk-scale model for `style` over `vocab`, randomly initialised.
    #[new]
    #[pyo3(signature = (vocab, style = "t5", seed = 0))]
    fn new(vocab: &Vocabulary, style: &str, seed: u64) -> PyResult<Self> {
        let style = parse_style(style)?;
        let cfg = ModelConfig::desk(paradigm_for(style), vocab.inner.len());
        let model = TransformerModel::init(cfg, seed).map_err(py_err)?;
        Ok(Self {
            ckpt: Checkpoint {
                model,
                step: 0,
                val_lfacc: 0.0,
                vocab: Some(vocab.inner.clone()),
                style: Some(style),
                run_config: serde_json::Value::Null,
            },
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            ckpt: training::load_checkpoint(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        training::save_checkpoint(&self.ckpt, &path).map_err(py_err)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.ckpt.model.parameter_count()
    }

    #[getter]
    fn paradigm(&self) -> &'static str {
        self.ckpt.model.config().paradigm.name()
    }

    #[getter]
    fn step(&self) -> usize {
        self.ckpt.step
    }

    #[getter]
    fn val_lfacc(&self) -> f64 {
        self.ckpt.val_lfacc
    }

    #[getter]
    fn vocabulary(&self) -> PyResult<Vocabulary> {
        Ok(Vocabulary {
            inner: self.vocab()?.clone(),
        })
    }

    /// Generated token ids for already-encoded input ids.
    #[pyo3(signature = (input_ids, beam = 4, max_len = 128))]
    fn generate_ids(&self, py: Python<'_>, input_ids: Vec<u32>, beam: usize, max_len: usize) -> PyResult<Vec<u32>> {
        let model = &self.ckpt.model;
        py.detach(|| beam_search(model, &input_ids, BeamConfig::new(beam, max_len)))
            .map(|h| h.tokens)
            .map_err(py_err)
    }

    /// SQL for each formatted input string.
    #[pyo3(signature = (inputs, beam = 4, max_len = 128))]
    fn generate(&self, py: Python<'_>, inputs: Vec<String>, beam: usize, max_len: usize) -> PyResult<Vec<String>> {
        let vocab = self.vocab()?;
        let style = self.style();
        let limit = self.ckpt.model.config().max_positions;
        let ids = inputs
            .iter()
            .map(|s| training::eval_input_ids(s, vocab, style, limit))
            .collect::<lightsql::Result<Vec<_>>>()
            .map_err(py_err)?;
        let model = &self.ckpt.model;
        py.detach(|| {
            ids.iter()
                .map(|i| {
                    let h = beam_search(model, i, BeamConfig::new(beam, max_len))?;
                    Ok(ids_to_sql(&h.tokens, vocab, model.config().paradigm))
                })
                .collect::<lightsql::Result<Vec<_>>>()
        })
        .map_err(py_err)
    }
}

/// `(step, loss, val_lfacc)` per optimizer step.
type History = Vec<(usize, f64, Option<f64>)>;

/// Trains a desk-scale model on `(formatted_input, gold_sql)` pairs and
/// returns `(best_model, history)`; history rows are
/// `(step, loss, val_lfacc or None)`. Validation uses `valid` when given,
/// the training pairs otherwise.
#[pyfunction]
#[pyo3(signature = (train, style = "t5", valid = None, iterations = 500, learning_rate = 3e-4, batch_size = 16, eval_every = None, seed = 0, max_len = 128))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    train: Vec<(String, String)>,
    style: &str,
    valid: Option<Vec<(String, String)>>,
    iterations: usize,
    learning_rate: f64,
    batch_size: usize,
    eval_every: Option<usize>,
    seed: u64,
    max_len: usize,
) -> PyResult<(Model, History)> {
    let style = parse_style(style)?;
    let rows = |pairs: Vec<(String, String)>| -> Vec<FormattedExample> {
        pairs
            .into_iter()
            .map(|(formatted_input, gold_sql)| FormattedExample { formatted_input, gold_sql })
            .collect()
    };
    let train_rows = rows(train);
    let valid_rows = valid.map(rows).unwrap_or_else(|| train_rows.clone());
    let corpus: Vec<&str> = train_rows
        .iter()
        .flat_map(|r| [r.formatted_input.as_str(), r.gold_sql.as_str()])
        .collect();
    let vocab = tokenizer::build_vocab(&corpus, 10_000).map_err(py_err)?;
    let data = Dataset::from_formatted(&train_rows, &valid_rows, &vocab, style, max_len).map_err(py_err)?;
    let paradigm = paradigm_for(style);
    let mut mc = ModelConfig::desk(paradigm, vocab.len());
    mc.max_positions = mc.max_positions.max(max_len);
    let cfg = TrainConfig {
        iterations,
        learning_rate,
        batch_size,
        eval_every: eval_every.unwrap_or(iterations.min(100)),
        seed,
        max_len,
        ..TrainConfig::new(style, paradigm)
    };
    let out = py
        .detach(|| {
            let model = TransformerModel::init(mc, seed)?;
            training::train(model, &data, &vocab, &cfg)
        })
        .map_err(py_err)?;
    let history = out.history.iter().map(|h| (h.step, h.loss, h.val_lfacc)).collect();
    Ok((Model { ckpt: out.best }, history))
}

#[pymodule]
#[pyo3(name = "lightsql")]
fn lightsql_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Vocabulary>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(normalize_sql, m)?)?;
    m.add_function(wrap_pyfunction!(lfacc, m)?)?;
    m.add_function(wrap_pyfunction!(exact_match, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(serialize_schema, m)?)?;
    m.add_function(wrap_pyfunction!(format_input, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
