use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::{Activation, Attention, Block, Linear, ModelConfig, Paradigm, Params, Stack, TransformerModel};
use crate::data::TrainingPair;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var, IGNORE_INDEX, MASK_VALUE};
use crate::tokenizer::PAD_ID;

/// Right-padded token rows: `ids` is `lens.len() × width`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqBatch {
    pub ids: Vec<u32>,
    pub lens: Vec<usize>,
    pub width: usize,
}

impl SeqBatch {
    /// Pads every sequence to the longest one, or to `width` when larger.
    pub fn new<S: AsRef<[u32]>>(seqs: &[S], width: Option<usize>) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let longest = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        if seqs.iter().any(|s| s.as_ref().is_empty()) {
            return Err(Error::Invalid("empty sequence in batch".into()));
        }
        let width = width.unwrap_or(longest).max(longest);
        let mut ids = Vec::with_capacity(seqs.len() * width);
        for s in seqs {
            ids.extend_from_slice(s.as_ref());
            ids.resize(ids.len() + width - s.as_ref().len(), PAD_ID);
        }
        Ok(Self {
            ids,
            lens: seqs.iter().map(|s| s.as_ref().len()).collect(),
            width,
        })
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }
}

/// Model inputs plus flattened next-token targets.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBatch {
    pub src: Option<SeqBatch>,
    pub inputs: SeqBatch,
    pub targets: Vec<i64>,
}

pub fn collate(pairs: &[&TrainingPair], paradigm: Paradigm) -> Result<LossBatch> {
    collate_padded(pairs, paradigm, None, None)
}

/// Builds a loss batch. Position `t` of each input row predicts label
/// `t + 1`; rows are padded to at least `src_width` / `label_width`.
pub fn collate_padded(
    pairs: &[&TrainingPair],
    paradigm: Paradigm,
    src_width: Option<usize>,
    label_width: Option<usize>,
) -> Result<LossBatch> {
    if pairs.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let longest = pairs.iter().map(|p| p.label_ids.len()).max().unwrap_or(0);
    let width = label_width.unwrap_or(longest).max(longest);
    if width < 2 {
        return Err(Error::Invalid("label sequences need at least two positions".into()));
    }
    let mut inputs = Vec::with_capacity(pairs.len());
    let mut targets = Vec::with_capacity(pairs.len() * (width - 1));
    for p in pairs {
        if p.label_ids.len() < 2 {
            return Err(Error::Invalid("label sequences need at least two positions".into()));
        }
        let row: Vec<u32> = match paradigm {
            Paradigm::EncDec => p.label_ids[..p.label_ids.len() - 1]
                .iter()
                .map(|&l| if l < 0 { PAD_ID } else { l as u32 })
                .collect(),
            Paradigm::DecOnly => {
                if p.input_ids.len() != p.label_ids.len() {
                    return Err(Error::Invalid("decoder-only inputs and labels must align".into()));
                }
                p.input_ids[..p.input_ids.len() - 1].to_vec()
            }
        };
        inputs.push(row);
        targets.extend_from_slice(&p.label_ids[1..]);
        targets.resize(targets.len() + width - p.label_ids.len(), IGNORE_INDEX);
    }
    let src = match paradigm {
        Paradigm::EncDec => {
            let srcs: Vec<&[u32]> = pairs.iter().map(|p| p.input_ids.as_slice()).collect();
            Some(SeqBatch::new(&srcs, src_width)?)
        }
        Paradigm::DecOnly => None,
    };
    Ok(LossBatch {
        src,
        inputs: SeqBatch::new(&inputs, Some(width - 1))?,
        targets,
    })
}

/// Additive mask `[batch·heads, q_len, k_width]`: key `j` is hidden from
/// query `i` when `j >= k_lens[b]`, or when `causal` and `j > i`.
pub fn attention_mask<F: Scalar>(
    heads: usize,
    q_len: usize,
    k_width: usize,
    k_lens: &[usize],
    causal: bool,
) -> Tensor<F> {
    let masked = F::lit(MASK_VALUE);
    let mut data = Vec::with_capacity(k_lens.len() * heads * q_len * k_width);
    for &len in k_lens {
        for _ in 0..heads {
            for i in 0..q_len {
                for j in 0..k_width {
                    let hidden = j >= len || (causal && j > i);
                    data.push(if hidden { masked } else { F::zero() });
                }
            }
        }
    }
    Tensor::from_parts(vec![k_lens.len() * heads, q_len, k_width], data)
}

/// Output of a recorded forward pass.
pub struct Trace {
    pub logits: Var,
    /// Attention probabilities `[batch·heads, q, k]`, in execution order.
    pub attention: Vec<Var>,
}

/// Scaled dot-product attention per head, heads concatenated and projected
/// by the output weights. Inputs are `[batch·len, d_model]` rows.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<F: Scalar>(
    tape: &mut Tape<F>,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    mask: &Tensor<F>,
    weights: &Attention<Var>,
    batch: usize,
    heads: usize,
) -> Result<(Var, Var)> {
    let d = tape.shape(q_in)[1];
    if !d.is_multiple_of(heads) {
        return Err(Error::shape("multi_head_attention", tape.shape(q_in), &[heads]));
    }
    let q = linear(tape, q_in, &weights.q)?;
    let k = linear(tape, k_in, &weights.k)?;
    let v = linear(tape, v_in, &weights.v)?;
    let qh = tape.split_heads(q, batch, heads)?;
    let kh = tape.split_heads(k, batch, heads)?;
    let vh = tape.split_heads(v, batch, heads)?;
    let scores = tape.batch_matmul(qh, kh, true)?;
    let scaled = tape.scale(scores, F::one() / F::lit((d / heads) as f64).sqrt())?;
    let probs = tape.masked_softmax(scaled, mask)?;
    let ctx = tape.batch_matmul(probs, vh, false)?;
    let merged = tape.merge_heads(ctx, batch, heads)?;
    Ok((linear(tape, merged, &weights.o)?, probs))
}

fn linear<F: Scalar>(tape: &mut Tape<F>, x: Var, l: &Linear<Var>) -> Result<Var> {
    tape.linear(x, l.w, l.b)
}

fn norm<F: Scalar>(tape: &mut Tape<F>, x: Var, n: &super::LayerNorm<Var>) -> Result<Var> {
    tape.layer_norm(x, n.gain, n.bias)
}

fn maybe_dropout<F: Scalar>(tape: &mut Tape<F>, x: Var, rate: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
    match rng {
        Some(r) if rate > 0.0 => tape.dropout(x, rate, &mut **r),
        _ => Ok(x),
    }
}

struct Ctx<'a, 'r> {
    cfg: &'a ModelConfig,
    rng: Option<&'r mut ChaCha8Rng>,
    attention: Vec<Var>,
}

fn embed<F: Scalar>(
    tape: &mut Tape<F>,
    ctx: &mut Ctx,
    token_table: Var,
    stack: &Stack<Var>,
    seqs: &SeqBatch,
) -> Result<Var> {
    if seqs.width > ctx.cfg.max_positions {
        return Err(Error::Invalid(format!(
            "sequence width {} exceeds max_positions {}",
            seqs.width, ctx.cfg.max_positions
        )));
    }
    let ids: Vec<usize> = seqs.ids.iter().map(|&i| i as usize).collect();
    let positions: Vec<usize> = (0..seqs.batch()).flat_map(|_| 0..seqs.width).collect();
    let tok = tape.embedding(token_table, &ids)?;
    let pos = tape.embedding(stack.positions, &positions)?;
    let x = tape.add(tok, pos)?;
    maybe_dropout(tape, x, ctx.cfg.dropout_rate, &mut ctx.rng)
}

fn block<F: Scalar>(
    tape: &mut Tape<F>,
    ctx: &mut Ctx,
    b: &Block<Var>,
    x: Var,
    batch: usize,
    self_mask: &Tensor<F>,
    memory: Option<(Var, &Tensor<F>)>,
) -> Result<Var> {
    let heads = ctx.cfg.n_heads;
    let rate = ctx.cfg.dropout_rate;
    let h = norm(tape, x, &b.attn_norm)?;
    let (a, p) = multi_head_attention(tape, h, h, h, self_mask, &b.attn, batch, heads)?;
    ctx.attention.push(p);
    let a = maybe_dropout(tape, a, rate, &mut ctx.rng)?;
    let mut x = tape.add(x, a)?;
    if let (Some((cross_norm, cross_attn)), Some((mem, mem_mask))) = (&b.cross, memory) {
        let h = norm(tape, x, cross_norm)?;
        let (a, p) = multi_head_attention(tape, h, mem, mem, mem_mask, cross_attn, batch, heads)?;
        ctx.attention.push(p);
        let a = maybe_dropout(tape, a, rate, &mut ctx.rng)?;
        x = tape.add(x, a)?;
    }
    let h = norm(tape, x, &b.ff_norm)?;
    let up = linear(tape, h, &b.ff.up)?;
    let act = match ctx.cfg.activation {
        Activation::Relu => tape.relu(up)?,
        Activation::Gelu => tape.gelu(up)?,
    };
    let f = linear(tape, act, &b.ff.down)?;
    let f = maybe_dropout(tape, f, rate, &mut ctx.rng)?;
    tape.add(x, f)
}

fn run_stack<F: Scalar>(
    tape: &mut Tape<F>,
    ctx: &mut Ctx,
    token_table: Var,
    stack: &Stack<Var>,
    seqs: &SeqBatch,
    causal: bool,
    memory: Option<(Var, &Tensor<F>)>,
) -> Result<Var> {
    let mut x = embed(tape, ctx, token_table, stack, seqs)?;
    let mask = attention_mask(ctx.cfg.n_heads, seqs.width, seqs.width, &seqs.lens, causal);
    for b in &stack.blocks {
        x = block(tape, ctx, b, x, seqs.batch(), &mask, memory)?;
    }
    norm(tape, x, &stack.final_norm)
}

/// Runs the encoder stack alone; output is `[batch·width, d_model]`.
pub(crate) fn encode_tape<F: Scalar>(
    tape: &mut Tape<F>,
    params: &Params<Var>,
    cfg: &ModelConfig,
    src: &SeqBatch,
) -> Result<Var> {
    let encoder = params.encoder.as_ref().ok_or(Error::Paradigm {
        expected: "enc_dec",
        found: "dec_only",
    })?;
    let mut ctx = Ctx {
        cfg,
        rng: None,
        attention: Vec::new(),
    };
    run_stack(tape, &mut ctx, params.token_embedding, encoder, src, false, None)
}

/// Full forward pass recorded on `tape`. Logits are `[batch·width, vocab]`
/// over the decoder rows. Passing an RNG enables dropout.
pub fn forward_tape<F: Scalar>(
    tape: &mut Tape<F>,
    params: &Params<Var>,
    cfg: &ModelConfig,
    src: Option<&SeqBatch>,
    tgt: &SeqBatch,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Trace> {
    let mut ctx = Ctx {
        cfg,
        rng,
        attention: Vec::new(),
    };
    let out = match (cfg.paradigm, src, &params.encoder) {
        (Paradigm::EncDec, Some(src), Some(encoder)) => {
            if src.batch() != tgt.batch() {
                return Err(Error::Invalid("source and target batch sizes differ".into()));
            }
            let memory = run_stack(tape, &mut ctx, params.token_embedding, encoder, src, false, None)?;
            let cross_mask = attention_mask(cfg.n_heads, tgt.width, src.width, &src.lens, false);
            run_stack(
                tape,
                &mut ctx,
                params.token_embedding,
                &params.decoder,
                tgt,
                true,
                Some((memory, &cross_mask)),
            )?
        }
        (Paradigm::DecOnly, None, None) => {
            run_stack(tape, &mut ctx, params.token_embedding, &params.decoder, tgt, true, None)?
        }
        (Paradigm::EncDec, None, _) => return Err(Error::Invalid("encoder–decoder forward needs source ids".into())),
        _ => {
            return Err(Error::Paradigm {
                expected: "enc_dec",
                found: "dec_only",
            })
        }
    };
    let logits = linear(tape, out, &params.head)?;
    Ok(Trace {
        logits,
        attention: ctx.attention,
    })
}

pub(crate) fn bind<F: Scalar>(tape: &mut Tape<F>, params: &Params<Arc<Tensor<F>>>) -> Params<Var> {
    params.map(&mut |_, t| tape.param(t.clone()))
}

/// Logits `[len(tgt), vocab]` for `P(y_t | y_<t, x)`.
pub fn forward_enc_dec<F: Scalar>(model: &TransformerModel<F>, src_ids: &[u32], tgt_ids: &[u32]) -> Result<Tensor<F>> {
    model.expect(Paradigm::EncDec)?;
    let mut tape = Tape::new();
    let params = bind(&mut tape, model.params());
    let src = SeqBatch::new(&[src_ids], None)?;
    let tgt = SeqBatch::new(&[tgt_ids], None)?;
    let trace = forward_tape(&mut tape, &params, model.config(), Some(&src), &tgt, None)?;
    Ok(tape.value(trace.logits).clone())
}

/// Logits `[len(ids), vocab]`; row `t` depends only on `ids[..=t]`.
pub fn forward_dec_only<F: Scalar>(model: &TransformerModel<F>, ids: &[u32]) -> Result<Tensor<F>> {
    model.expect(Paradigm::DecOnly)?;
    let mut tape = Tape::new();
    let params = bind(&mut tape, model.params());
    let tgt = SeqBatch::new(&[ids], None)?;
    let trace = forward_tape(&mut tape, &params, model.config(), None, &tgt, None)?;
    Ok(tape.value(trace.logits).clone())
}

fn check_batch<F: Scalar>(model: &TransformerModel<F>, batch: &LossBatch) -> Result<()> {
    match (model.config().paradigm, &batch.src) {
        (Paradigm::EncDec, None) => Err(Error::Invalid("encoder–decoder batch without source rows".into())),
        (Paradigm::DecOnly, Some(_)) => Err(Error::Paradigm {
            expected: "enc_dec",
            found: "dec_only",
        }),
        _ => Ok(()),
    }
}

/// Mean masked cross-entropy over the batch's supervised positions.
pub fn loss<F: Scalar>(model: &TransformerModel<F>, batch: &LossBatch) -> Result<F> {
    check_batch(model, batch)?;
    let mut tape = Tape::new();
    let params = bind(&mut tape, model.params());
    let trace = forward_tape(&mut tape, &params, model.config(), batch.src.as_ref(), &batch.inputs, None)?;
    let l = tape.cross_entropy(trace.logits, &batch.targets, IGNORE_INDEX)?;
    Ok(tape.value(l).item())
}

/// Loss plus a gradient for every parameter. Passing an RNG enables dropout.
pub fn loss_and_grads<F: Scalar>(
    model: &TransformerModel<F>,
    batch: &LossBatch,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(F, Params<Tensor<F>>)> {
    check_batch(model, batch)?;
    let mut tape = Tape::new();
    let params = bind(&mut tape, model.params());
    let trace = forward_tape(&mut tape, &params, model.config(), batch.src.as_ref(), &batch.inputs, rng)?;
    let l = tape.cross_entropy(trace.logits, &batch.targets, IGNORE_INDEX)?;
    let value = tape.value(l).item();
    tape.backward(l)?;
    let grads = params.map(&mut |_, v| {
        let shape = tape.shape(*v).to_vec();
        tape.grad(*v).unwrap_or_else(|| Tensor::zeros(&shape))
    });
    Ok((value, grads))
}
