//! Incremental decoding with per-layer key/value caches. Each step costs
//! one row through every block instead of a full re-run of the prefix.

use std::sync::Arc;

use super::forward::{bind, encode_tape, SeqBatch};
use super::{Activation, Attention, Block, LayerNorm, Linear, Paradigm, TransformerModel};
use crate::error::{Error, Result};
use crate::numerics::{gelu_value, gemm_nn, Scalar, Tape, Tensor};

/// Encoder-side keys and values for every decoder layer, shared by all
/// beams of one source.
#[derive(Debug)]
pub struct CrossCache<F: Scalar = f32> {
    src_len: usize,
    layers: Vec<(Vec<F>, Vec<F>)>,
}

impl<F: Scalar> CrossCache<F> {
    pub fn src_len(&self) -> usize {
        self.src_len
    }
}

/// Decoder prefix state. Cloning forks a hypothesis.
#[derive(Clone, Debug)]
pub struct DecoderState<F: Scalar = f32> {
    position: usize,
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    cross: Option<Arc<CrossCache<F>>>,
}

impl<F: Scalar> DecoderState<F> {
    /// Number of tokens consumed so far.
    pub fn len(&self) -> usize {
        self.position
    }

    pub fn is_empty(&self) -> bool {
        self.position == 0
    }
}

fn linear<F: Scalar>(x: &[F], l: &Linear<Arc<Tensor<F>>>) -> Vec<F> {
    let (i, o) = (l.w.shape()[0], l.w.shape()[1]);
    let rows = x.len() / i;
    let mut c = Vec::with_capacity(rows * o);
    for _ in 0..rows {
        c.extend_from_slice(l.b.data());
    }
    gemm_nn(rows, i, o, x, l.w.data(), &mut c);
    c
}

fn layer_norm<F: Scalar>(x: &[F], n: &LayerNorm<Arc<Tensor<F>>>) -> Vec<F> {
    let d = n.gain.numel();
    let eps = F::lit(1e-5);
    let inv_d = F::one() / F::lit(d as f64);
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().fold(F::zero(), |a, &v| a + v) * inv_d;
        let var = row.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        for j in 0..d {
            out.push((row[j] - mean) * rs * n.gain.data()[j] + n.bias.data()[j]);
        }
    }
    out
}

fn add_into<F: Scalar>(x: &mut [F], y: &[F]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a = *a + b;
    }
}

/// One query row against `len` cached key/value rows, all heads.
fn attend<F: Scalar>(q: &[F], keys: &[F], values: &[F], heads: usize) -> Vec<F> {
    let d = q.len();
    let dk = d / heads;
    let len = keys.len() / d;
    let scale = F::one() / F::lit(dk as f64).sqrt();
    let mut out = vec![F::zero(); d];
    let mut scores = vec![F::zero(); len];
    for h in 0..heads {
        let qh = &q[h * dk..(h + 1) * dk];
        let mut max = F::neg_infinity();
        for (j, s) in scores.iter_mut().enumerate() {
            let kj = &keys[j * d + h * dk..j * d + (h + 1) * dk];
            let dot = qh.iter().zip(kj).fold(F::zero(), |a, (&x, &y)| a + x * y);
            *s = dot * scale;
            max = max.max(*s);
        }
        let mut z = F::zero();
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            z = z + *s;
        }
        let oh = &mut out[h * dk..(h + 1) * dk];
        for (j, s) in scores.iter().enumerate() {
            let p = *s / z;
            let vj = &values[j * d + h * dk..j * d + (h + 1) * dk];
            for (o, &v) in oh.iter_mut().zip(vj) {
                *o = *o + p * v;
            }
        }
    }
    out
}

impl<F: Scalar> TransformerModel<F> {
    /// Encodes `src_ids` (encoder–decoder) or prepares an empty prefix
    /// (decoder-only, `src_ids` must be `None`).
    pub fn start_decoding(&self, src_ids: Option<&[u32]>) -> Result<DecoderState<F>> {
        let cfg = self.config();
        let cross = match (cfg.paradigm, src_ids) {
            (Paradigm::EncDec, Some(src)) => Some(Arc::new(self.cross_cache(src)?)),
            (Paradigm::EncDec, None) => return Err(Error::Invalid("encoder–decoder decoding needs source ids".into())),
            (Paradigm::DecOnly, None) => None,
            (Paradigm::DecOnly, Some(_)) => {
                return Err(Error::Paradigm {
                    expected: "enc_dec",
                    found: "dec_only",
                })
            }
        };
        Ok(DecoderState {
            position: 0,
            keys: vec![Vec::new(); cfg.n_layers],
            values: vec![Vec::new(); cfg.n_layers],
            cross,
        })
    }

    fn cross_cache(&self, src: &[u32]) -> Result<CrossCache<F>> {
        let mut tape = Tape::new();
        let params = bind(&mut tape, self.params());
        let batch = SeqBatch::new(&[src], None)?;
        let memory = encode_tape(&mut tape, &params, self.config(), &batch)?;
        let memory = tape.value(memory).data().to_vec();
        let layers = self
            .params()
            .decoder
            .blocks
            .iter()
            .map(|b| {
                let (_, attn) = b.cross.as_ref().expect("encoder–decoder blocks carry cross-attention");
                (linear(&memory, &attn.k), linear(&memory, &attn.v))
            })
            .collect();
        Ok(CrossCache {
            src_len: src.len(),
            layers,
        })
    }

    /// Feeds `token` at the next position; returns next-token logits.
    pub fn decode_step(&self, state: &mut DecoderState<F>, token: u32) -> Result<Vec<F>> {
        let cfg = self.config();
        let p = self.params();
        if state.position >= cfg.max_positions {
            return Err(Error::Invalid(format!(
                "decoder position {} exceeds max_positions {}",
                state.position, cfg.max_positions
            )));
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::Invalid(format!(
                "token id {token} outside table of {} rows",
                cfg.vocab_size
            )));
        }
        let mut x: Vec<F> = p.token_embedding.row(token as usize).to_vec();
        add_into(&mut x, p.decoder.positions.row(state.position));
        for (l, b) in p.decoder.blocks.iter().enumerate() {
            x = self.step_block(state, l, b, x);
        }
        let h = layer_norm(&x, &p.decoder.final_norm);
        let logits = linear(&h, &p.head);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decode_step"));
        }
        state.position += 1;
        Ok(logits)
    }

    fn step_block(&self, state: &mut DecoderState<F>, l: usize, b: &Block<Arc<Tensor<F>>>, mut x: Vec<F>) -> Vec<F> {
        let heads = self.config().n_heads;
        let self_attn = |x: &[F], a: &Attention<Arc<Tensor<F>>>, state: &mut DecoderState<F>| {
            let q = linear(x, &a.q);
            state.keys[l].extend(linear(x, &a.k));
            state.values[l].extend(linear(x, &a.v));
            linear(&attend(&q, &state.keys[l], &state.values[l], heads), &a.o)
        };
        let h = layer_norm(&x, &b.attn_norm);
        add_into(&mut x, &self_attn(&h, &b.attn, state));
        if let (Some((norm, attn)), Some(cross)) = (&b.cross, &state.cross) {
            let h = layer_norm(&x, norm);
            let q = linear(&h, &attn.q);
            let (k, v) = &cross.layers[l];
            add_into(&mut x, &linear(&attend(&q, k, v, heads), &attn.o));
        }
        let h = layer_norm(&x, &b.ff_norm);
        let mut up = linear(&h, &b.ff.up);
        for u in up.iter_mut() {
            *u = match self.config().activation {
                Activation::Relu => u.max(F::zero()),
                Activation::Gelu => gelu_value(*u),
            };
        }
        add_into(&mut x, &linear(&up, &b.ff.down));
        x
    }
}
