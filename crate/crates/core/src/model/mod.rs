//! Configurable transformer covering both paradigms: encoder–decoder with
//! cross-attention, and a single causal decoder stack.
//!
//! Blocks are pre-norm residual; positions are learned absolute embeddings.

mod forward;
mod infer;
mod params;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub use forward::{
    attention_mask, collate, collate_padded, forward_dec_only, forward_enc_dec, forward_tape, loss,
    loss_and_grads, multi_head_attention, LossBatch, SeqBatch, Trace,
};
pub use infer::{CrossCache, DecoderState};
pub use params::{Attention, Block, FeedForward, LayerNorm, Linear, ParamKind, ParamSpec, Params, Stack};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    EncDec,
    DecOnly,
}

impl Paradigm {
    pub fn name(self) -> &'static str {
        match self {
            Paradigm::EncDec => "enc_dec",
            Paradigm::DecOnly => "dec_only",
        }
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "enc_dec" | "encdec" | "encoder_decoder" => Ok(Paradigm::EncDec),
            "dec_only" | "deconly" | "decoder_only" => Ok(Paradigm::DecOnly),
            other => Err(Error::Config(format!("unknown paradigm '{other}' (enc_dec, dec_only)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::Config(format!("unknown activation '{other}' (relu, gelu)"))),
        }
    }
}

/// Architecture hyperparameters. For `EncDec`, `n_layers` is the depth of
/// each stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub paradigm: Paradigm,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout_rate: f64,
    pub activation: Activation,
}

impl ModelConfig {
    /// 2 encoder + 2 decoder layers, width 128, 4 heads, FFN 256.
    pub fn desk_enc_dec(vocab_size: usize) -> Self {
        Self {
            paradigm: Paradigm::EncDec,
            n_layers: 2,
            n_heads: 4,
            d_model: 128,
            d_ff: 256,
            vocab_size,
            max_positions: 512,
            dropout_rate: 0.0,
            activation: Activation::Relu,
        }
    }

    /// 4 causal layers at the same widths.
    pub fn desk_dec_only(vocab_size: usize) -> Self {
        Self {
            paradigm: Paradigm::DecOnly,
            n_layers: 4,
            ..Self::desk_enc_dec(vocab_size)
        }
    }

    pub fn desk(paradigm: Paradigm, vocab_size: usize) -> Self {
        match paradigm {
            Paradigm::EncDec => Self::desk_enc_dec(vocab_size),
            Paradigm::DecOnly => Self::desk_dec_only(vocab_size),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("layer, head and width sizes must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.vocab_size < 2 || self.max_positions == 0 {
            return bad("vocab_size must be >= 2 and max_positions >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    ///
    /// attention = 4(d² + d); ffn = 2·d·f + f + d; norm = 2d;
    /// encoder/causal block = attention + ffn + 2 norms;
    /// cross-attending decoder block = 2 attention + ffn + 3 norms;
    /// each stack adds P·d positions and a final norm;
    /// token embedding V·d and output head d·V + V are shared.
    pub fn parameter_count(&self) -> usize {
        let (d, f, v, p, l) = (self.d_model, self.d_ff, self.vocab_size, self.max_positions, self.n_layers);
        let attention = 4 * (d * d + d);
        let ffn = 2 * d * f + f + d;
        let norm = 2 * d;
        let self_block = attention + ffn + 2 * norm;
        let cross_block = 2 * attention + ffn + 3 * norm;
        let stack_extra = p * d + norm;
        let shared = v * d + d * v + v;
        match self.paradigm {
            Paradigm::DecOnly => shared + stack_extra + l * self_block,
            Paradigm::EncDec => shared + 2 * stack_extra + l * self_block + l * cross_block,
        }
    }
}

/// Configuration plus named parameter tensors.
#[derive(Clone, Debug)]
pub struct TransformerModel<F: Scalar = f32> {
    config: ModelConfig,
    params: Params<Arc<Tensor<F>>>,
}

const INIT_STD: f64 = 0.02;

impl<F: Scalar> TransformerModel<F> {
    /// Truncated normal (±2σ, σ = 0.02) weights, unit norm gains, zero biases;
    /// deterministic in `(config, seed)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with_std(config, seed, INIT_STD)
    }

    pub fn init_with_std(config: ModelConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Params::skeleton(&config).map(&mut |_, spec: &ParamSpec| {
            let numel: usize = spec.shape.iter().product();
            let data = match spec.kind {
                ParamKind::Weight => (0..numel)
                    .map(|_| loop {
                        let x: f64 = normal.sample(&mut rng);
                        if x.abs() <= 2.0 * std {
                            break F::lit(x);
                        }
                    })
                    .collect(),
                ParamKind::Gain => vec![F::one(); numel],
                ParamKind::Bias => vec![F::zero(); numel],
            };
            Arc::new(Tensor::from_parts(spec.shape.clone(), data))
        });
        Ok(Self { config, params })
    }

    /// Rebuilds a model from named tensors; names and shapes must match the
    /// configuration exactly.
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor<F>)>) -> Result<Self> {
        config.validate()?;
        let skeleton = Params::skeleton(&config);
        let expected = skeleton.names();
        if expected.len() != tensors.len() {
            return Err(Error::Invalid(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((want, spec), (name, t)) in expected.iter().zip(skeleton.flatten()).zip(&tensors) {
            if want != name || spec.shape != t.shape() {
                return Err(Error::Invalid(format!(
                    "tensor '{name}' {:?} does not match expected '{want}' {:?}",
                    t.shape(),
                    spec.shape
                )));
            }
        }
        let mut it = tensors.into_iter();
        let params = skeleton.map(&mut |_, _| Arc::new(it.next().expect("length checked").1));
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<Arc<Tensor<F>>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<Arc<Tensor<F>>> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.flatten().iter().map(|t| t.numel()).sum()
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<F>)> {
        self.params
            .names()
            .into_iter()
            .zip(self.params.flatten())
            .map(|(n, t)| (n, (*t).clone()))
            .collect()
    }

    /// Same weights in another element type.
    pub fn cast<G: Scalar>(&self) -> TransformerModel<G> {
        TransformerModel {
            config: self.config.clone(),
            params: self.params.map(&mut |_, t| Arc::new(t.cast::<G>())),
        }
    }

    pub(crate) fn expect(&self, paradigm: Paradigm) -> Result<()> {
        if self.config.paradigm != paradigm {
            return Err(Error::Paradigm {
                expected: paradigm.name(),
                found: self.config.paradigm.name(),
            });
        }
        Ok(())
    }
}
