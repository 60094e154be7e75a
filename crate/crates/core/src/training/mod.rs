//! Fine-tuning loop: shuffled mini-batches, Adam with global-norm clipping,
//! periodic validation LFAcc and best-checkpoint selection.

mod checkpoint;

use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_training_pair, FormattedExample, InputStyle, TrainingPair};
use crate::decoding::{beam_search, ids_to_sql, BeamConfig};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport};
use crate::model::{collate, loss_and_grads, Paradigm, Params, TransformerModel};
use crate::numerics::{Scalar, Tensor};
use crate::tokenizer::{self, Vocabulary};

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    FORMAT_VERSION,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Full-scale iteration budgets; the sweep divides them for desk runs.
pub const FULL_BUDGETS: [usize; 5] = [1000, 2000, 3000, 4000, 5000];
pub const DEFAULT_SWEEP_DIVISOR: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(Error::Config(format!("unknown lr schedule '{other}' (constant, cosine)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Optimizer steps.
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub max_len: usize,
    pub style: InputStyle,
    pub paradigm: Paradigm,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub schedule: LrSchedule,
    /// Beam width for validation decoding.
    pub eval_beam: usize,
    /// Generated-token budget for validation decoding.
    pub eval_max_len: usize,
}

impl TrainConfig {
    pub fn new(style: InputStyle, paradigm: Paradigm) -> Self {
        Self {
            iterations: 500,
            batch_size: 16,
            learning_rate: 3e-4,
            seed: 0,
            eval_every: 100,
            max_len: tokenizer::DEFAULT_MAX_LEN,
            style,
            paradigm,
            grad_clip: Some(1.0),
            schedule: LrSchedule::Constant,
            eval_beam: 1,
            eval_max_len: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        if self.eval_every == 0 || self.eval_every > self.iterations {
            return bad(format!("eval_every {} must lie in 1..={}", self.eval_every, self.iterations));
        }
        if self.batch_size == 0 || self.max_len < 2 || self.eval_beam == 0 || self.eval_max_len == 0 {
            return bad("batch_size, eval_beam and eval_max_len must be >= 1, max_len >= 2".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.grad_clip.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        if self.style.is_decoder_only() != (self.paradigm == Paradigm::DecOnly) {
            return bad(format!("style {} does not fit paradigm {}", self.style, self.paradigm));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let progress = (step - 1) as f64 / self.iterations as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// Source (or prompt) ids with the reference SQL.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalExample {
    pub input_ids: Vec<u32>,
    pub gold_sql: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<TrainingPair>,
    pub valid: Vec<EvalExample>,
}

/// Ids for decoding one formatted input: the source for encoder–decoder
/// styles, the prompt for the decoder-only style.
pub fn eval_input_ids(formatted_input: &str, vocab: &Vocabulary, style: InputStyle, max_len: usize) -> Result<Vec<u32>> {
    let ids = tokenizer::encode(formatted_input, vocab, max_len, false);
    if ids.is_empty() {
        return Err(Error::Invalid("empty formatted input".into()));
    }
    if style.is_decoder_only() {
        let full = tokenizer::encode(formatted_input, vocab, usize::MAX, false);
        if full.len() >= max_len {
            return Err(Error::NoRoomForTarget {
                prompt_len: full.len(),
                max_len,
            });
        }
    }
    Ok(ids)
}

impl Dataset {
    pub fn from_formatted(
        train: &[FormattedExample],
        valid: &[FormattedExample],
        vocab: &Vocabulary,
        style: InputStyle,
        max_len: usize,
    ) -> Result<Self> {
        let train = train
            .iter()
            .map(|r| make_training_pair(&r.formatted_input, &r.gold_sql, style, vocab, max_len))
            .collect::<Result<_>>()?;
        let valid = valid
            .iter()
            .map(|r| {
                Ok(EvalExample {
                    input_ids: eval_input_ids(&r.formatted_input, vocab, style, max_len)?,
                    gold_sql: r.gold_sql.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { train, valid })
    }
}

/// Adam moments and step count, laid out like the parameter tree.
#[derive(Clone, Debug)]
pub struct AdamState<F: Scalar = f32> {
    pub step: u64,
    pub m: Params<Vec<F>>,
    pub v: Params<Vec<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &Params<Arc<Tensor<F>>>) -> Self {
        let zeros = params.map(&mut |_, t| vec![F::zero(); t.numel()]);
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn optimizer_step<F: Scalar>(
    params: &mut Params<Arc<Tensor<F>>>,
    grads: &Params<Tensor<F>>,
    state: &mut AdamState<F>,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (F::lit(ADAM_BETA1), F::lit(ADAM_BETA2));
    let c1 = F::lit(1.0 - ADAM_BETA1.powi(t));
    let c2 = F::lit(1.0 - ADAM_BETA2.powi(t));
    let (lr, eps) = (F::lit(lr), F::lit(ADAM_EPS));
    let g_all = grads.flatten();
    let mut m_all = state.m.flatten();
    let mut v_all = state.v.flatten();
    let mut p_all = params.flatten();
    if g_all.len() != p_all.len() {
        return Err(Error::Invalid("gradient tree does not match parameters".into()));
    }
    for (((p, g), m), v) in p_all.iter_mut().zip(&g_all).zip(&mut m_all).zip(&mut v_all) {
        if g.shape() != p.shape() {
            return Err(Error::shape("optimizer_step", p.shape(), g.shape()));
        }
        let pd = Arc::make_mut(p).data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (F::one() - b1) * gi;
            v[i] = b2 * v[i] + (F::one() - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            pd[i] = pd[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    *params = params.rebuild(p_all);
    state.m = state.m.rebuild(m_all);
    state.v = state.v.rebuild(v_all);
    Ok(())
}

/// Global L2 norm over every gradient entry.
pub fn global_norm<F: Scalar>(grads: &Params<Tensor<F>>) -> f64 {
    let mut sq = 0.0;
    grads.map(&mut |_, g| {
        for &x in g.data() {
            sq += x.as_f64() * x.as_f64();
        }
    });
    sq.sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_gradients<F: Scalar>(grads: &mut Params<Tensor<F>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = F::lit(max_norm / norm);
        *grads = grads.map(&mut |_, g| {
            let mut g = g.clone();
            for x in g.data_mut() {
                *x = *x * s;
            }
            g
        });
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub loss: f64,
    /// Present on evaluation steps only.
    pub val_lfacc: Option<f64>,
}

pub fn history_csv(history: &[HistoryEntry]) -> String {
    let mut out = String::from("step,loss,val_lfacc\n");
    for h in history {
        let val = h.val_lfacc.map(|v| format!("{v}")).unwrap_or_default();
        let _ = writeln!(out, "{},{},{}", h.step, h.loss, val);
    }
    out
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub history: Vec<HistoryEntry>,
    pub final_model: TransformerModel<f32>,
    /// Every evaluated snapshot as `(step, val_lfacc, model)`.
    pub snapshots: Vec<(usize, f64, TransformerModel<f32>)>,
}

/// Decodes every example and returns the SQL strings, in input order.
pub fn predict_sql(
    model: &TransformerModel<f32>,
    inputs: &[Vec<u32>],
    vocab: &Vocabulary,
    beam: BeamConfig,
) -> Result<Vec<String>> {
    let paradigm = model.config().paradigm;
    inputs
        .par_iter()
        .map(|ids| Ok(ids_to_sql(&beam_search(model, ids, beam)?.tokens, vocab, paradigm)))
        .collect()
}

pub fn evaluate_model(
    model: &TransformerModel<f32>,
    examples: &[EvalExample],
    vocab: &Vocabulary,
    beam: BeamConfig,
) -> Result<MetricReport> {
    let inputs: Vec<Vec<u32>> = examples.iter().map(|e| e.input_ids.clone()).collect();
    let preds = predict_sql(model, &inputs, vocab, beam)?;
    let golds: Vec<&str> = examples.iter().map(|e| e.gold_sql.as_str()).collect();
    metrics::evaluate(&preds, &golds)
}

fn check_vocab(model: &TransformerModel<f32>, data: &Dataset, vocab: &Vocabulary) -> Result<()> {
    let v = model.config().vocab_size;
    if vocab.len() != v {
        return Err(Error::Invalid(format!(
            "vocabulary of {} tokens does not match model vocab_size {v}",
            vocab.len()
        )));
    }
    let ids = data
        .train
        .iter()
        .flat_map(|p| p.input_ids.iter().copied())
        .chain(data.valid.iter().flat_map(|e| e.input_ids.iter().copied()));
    if let Some(bad) = ids.into_iter().find(|&i| i as usize >= v) {
        return Err(Error::Invalid(format!("token id {bad} outside vocab_size {v}")));
    }
    Ok(())
}

/// Runs exactly `cfg.iterations` optimizer steps. Validation LFAcc is
/// measured every `eval_every` steps and after the last one; the returned
/// checkpoint has the highest LFAcc, earliest step on ties.
pub fn train(
    mut model: TransformerModel<f32>,
    data: &Dataset,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.valid.is_empty() {
        return Err(Error::Invalid("training and validation sets must be non-empty".into()));
    }
    if model.config().paradigm != cfg.paradigm {
        return Err(Error::Config(format!(
            "model paradigm {} differs from training paradigm {}",
            model.config().paradigm,
            cfg.paradigm
        )));
    }
    check_vocab(&model, data, vocab)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d20f);
    let mut adam = AdamState::new(model.params());
    let mut order: Vec<usize> = Vec::new();
    let batch_size = cfg.batch_size.min(data.train.len());
    let beam = BeamConfig::new(cfg.eval_beam, cfg.eval_max_len);
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut snapshots = Vec::new();
    let mut best: Option<(usize, f64, TransformerModel<f32>)> = None;
    for step in 1..=cfg.iterations {
        if order.len() < batch_size {
            let mut epoch: Vec<usize> = (0..data.train.len()).collect();
            epoch.shuffle(&mut order_rng);
            order.extend(epoch);
        }
        let batch_idx: Vec<usize> = order.drain(..batch_size).collect();
        let pairs: Vec<&TrainingPair> = batch_idx.iter().map(|&i| &data.train[i]).collect();
        let batch = collate(&pairs, cfg.paradigm)?;
        let rng = (model.config().dropout_rate > 0.0).then_some(&mut dropout_rng);
        let (loss, mut grads) = loss_and_grads(&model, &batch, rng).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged(step),
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::Diverged(step));
        }
        if let Some(c) = cfg.grad_clip {
            if !clip_gradients(&mut grads, c).is_finite() {
                return Err(Error::Diverged(step));
            }
        }
        optimizer_step(model.params_mut(), &grads, &mut adam, cfg.lr_at(step))?;
        let mut entry = HistoryEntry {
            step,
            loss: loss as f64,
            val_lfacc: None,
        };
        if step % cfg.eval_every == 0 || step == cfg.iterations {
            let report = evaluate_model(&model, &data.valid, vocab, beam)?;
            entry.val_lfacc = Some(report.lfacc);
            if best.as_ref().is_none_or(|(_, b, _)| report.lfacc > *b) {
                best = Some((step, report.lfacc, model.clone()));
            }
            snapshots.push((step, report.lfacc, model.clone()));
        }
        history.push(entry);
    }
    let (step, val_lfacc, best_model) = best.expect("final step is always evaluated");
    Ok(TrainOutcome {
        best: Checkpoint {
            model: best_model,
            step,
            val_lfacc,
            vocab: Some(vocab.clone()),
            style: Some(cfg.style),
            run_config: serde_json::to_value(cfg).unwrap_or_default(),
        },
        history,
        final_model: model,
        snapshots,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub style: InputStyle,
    pub budget: usize,
    pub best_step: usize,
    pub final_loss: f64,
    pub val: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub divisor: usize,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// One table row per (style, budget), metrics in percent.
    pub fn table(&self) -> String {
        let labelled: Vec<(String, &MetricReport)> = self
            .rows
            .iter()
            .map(|r| (format!("{} @ {} steps", r.style, r.budget), &r.val))
            .collect();
        metrics::render_table(&labelled)
    }
}

/// `FULL_BUDGETS / divisor`, each at least 1.
pub fn scaled_budgets(divisor: usize) -> Result<Vec<usize>> {
    if divisor == 0 {
        return Err(Error::Config("sweep divisor must be >= 1".into()));
    }
    Ok(FULL_BUDGETS.iter().map(|b| (b / divisor).max(1)).collect())
}

/// Trains at every scaled budget from the same initialisation and reports
/// validation metrics of each budget's best checkpoint.
///
/// With a constant learning rate a run of `b` steps is an exact prefix of
/// the longest run, so one run evaluated at every budget boundary stands in
/// for all of them. Cosine schedules depend on the budget and train each
/// budget separately.
pub fn iteration_sweep(
    init: &TransformerModel<f32>,
    data: &Dataset,
    vocab: &Vocabulary,
    base: &TrainConfig,
    divisor: usize,
) -> Result<SweepReport> {
    let budgets = scaled_budgets(divisor)?;
    let beam = BeamConfig::new(base.eval_beam, base.eval_max_len);
    let mut rows = Vec::with_capacity(budgets.len());
    let every = |b: usize| base.eval_every.min(b);
    // snapshots a standalone run of `budget` steps would have taken
    let row = |budget: usize, outcome: &TrainOutcome| -> Result<SweepRow> {
        let (step, _, model) = outcome
            .snapshots
            .iter()
            .filter(|(s, _, _)| *s == budget || (*s < budget && s % every(budget) == 0))
            .fold(None::<&(usize, f64, TransformerModel<f32>)>, |acc, s| match acc {
                Some(a) if a.1 >= s.1 => Some(a),
                _ => Some(s),
            })
            .expect("every budget endpoint is evaluated");
        Ok(SweepRow {
            style: base.style,
            budget,
            best_step: *step,
            final_loss: outcome.history[budget - 1].loss,
            val: evaluate_model(model, &data.valid, vocab, beam)?,
        })
    };
    match base.schedule {
        LrSchedule::Constant => {
            let longest = *budgets.iter().max().expect("five budgets");
            let cadence = budgets.iter().fold(0, |g, &b| gcd(gcd(g, b), every(b)));
            let cfg = TrainConfig {
                iterations: longest,
                eval_every: cadence,
                ..base.clone()
            };
            let outcome = train(init.clone(), data, vocab, &cfg)?;
            for &b in &budgets {
                rows.push(row(b, &outcome)?);
            }
        }
        LrSchedule::Cosine => {
            for &b in &budgets {
                let cfg = TrainConfig {
                    iterations: b,
                    eval_every: every(b),
                    ..base.clone()
                };
                rows.push(row(b, &train(init.clone(), data, vocab, &cfg)?)?);
            }
        }
    }
    Ok(SweepReport { divisor, rows })
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
