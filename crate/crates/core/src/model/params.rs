use super::{ModelConfig, Paradigm};

/// Initialisation class of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Gain,
    Bias,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

type MapFn<'f, P, Q> = dyn FnMut(&str, &P) -> Q + 'f;

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<P> {
    pub w: P,
    pub b: P,
}

impl<P> Linear<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut MapFn<'_, P, Q>) -> Linear<Q> {
        Linear {
            w: f(&join(prefix, "w"), &self.w),
            b: f(&join(prefix, "b"), &self.b),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<P> {
    pub gain: P,
    pub bias: P,
}

impl<P> LayerNorm<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut MapFn<'_, P, Q>) -> LayerNorm<Q> {
        LayerNorm {
            gain: f(&join(prefix, "gain"), &self.gain),
            bias: f(&join(prefix, "bias"), &self.bias),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention<P> {
    pub q: Linear<P>,
    pub k: Linear<P>,
    pub v: Linear<P>,
    pub o: Linear<P>,
}

impl<P> Attention<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut MapFn<'_, P, Q>) -> Attention<Q> {
        Attention {
            q: self.q.map(&join(prefix, "q"), f),
            k: self.k.map(&join(prefix, "k"), f),
            v: self.v.map(&join(prefix, "v"), f),
            o: self.o.map(&join(prefix, "o"), f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<P> {
    pub up: Linear<P>,
    pub down: Linear<P>,
}

impl<P> FeedForward<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut MapFn<'_, P, Q>) -> FeedForward<Q> {
        FeedForward {
            up: self.up.map(&join(prefix, "up"), f),
            down: self.down.map(&join(prefix, "down"), f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<P> {
    pub attn_norm: LayerNorm<P>,
    pub attn: Attention<P>,
    /// Present only in decoder blocks of the encoder–decoder paradigm.
    pub cross: Option<(LayerNorm<P>, Attention<P>)>,
    pub ff_norm: LayerNorm<P>,
    pub ff: FeedForward<P>,
}

impl<P> Block<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut MapFn<'_, P, Q>) -> Block<Q> {
        Block {
            attn_norm: self.attn_norm.map(&join(prefix, "attn_norm"), f),
            attn: self.attn.map(&join(prefix, "attn"), f),
            cross: self.cross.as_ref().map(|(n, a)| {
                (
                    n.map(&join(prefix, "cross_norm"), f),
                    a.map(&join(prefix, "cross_attn"), f),
                )
            }),
            ff_norm: self.ff_norm.map(&join(prefix, "ff_norm"), f),
            ff: self.ff.map(&join(prefix, "ff"), f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stack<P> {
    pub positions: P,
    pub blocks: Vec<Block<P>>,
    pub final_norm: LayerNorm<P>,
}

impl<P> Stack<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut MapFn<'_, P, Q>) -> Stack<Q> {
        Stack {
            positions: f(&join(prefix, "positions"), &self.positions),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&join(prefix, &i.to_string()), f))
                .collect(),
            final_norm: self.final_norm.map(&join(prefix, "final_norm"), f),
        }
    }
}

/// Full parameter tree. `P` is the leaf type: stored tensors, tape
/// variables, gradients, optimizer slots or shape specs.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<P> {
    pub token_embedding: P,
    pub encoder: Option<Stack<P>>,
    pub decoder: Stack<P>,
    pub head: Linear<P>,
}

impl<P> Params<P> {
    /// Visits leaves in a fixed order, producing a tree of the same layout.
    pub fn map<Q>(&self, f: &mut MapFn<'_, P, Q>) -> Params<Q> {
        Params {
            token_embedding: f("token_embedding", &self.token_embedding),
            encoder: self.encoder.as_ref().map(|s| s.map("encoder", f)),
            decoder: self.decoder.map("decoder", f),
            head: self.head.map("head", f),
        }
    }

    pub fn flatten(&self) -> Vec<P>
    where
        P: Clone,
    {
        let mut out = Vec::new();
        self.map(&mut |_, p| out.push(p.clone()));
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.map(&mut |name, _| out.push(name.to_string()));
        out
    }

    /// Rebuilds the tree from leaves in [`Params::flatten`] order.
    pub fn rebuild<Q, I: IntoIterator<Item = Q>>(&self, leaves: I) -> Params<Q> {
        let mut it = leaves.into_iter();
        self.map(&mut |name, _| it.next().unwrap_or_else(|| panic!("missing leaf for {name}")))
    }
}

fn linear_spec(inp: usize, out: usize) -> Linear<ParamSpec> {
    Linear {
        w: ParamSpec {
            shape: vec![inp, out],
            kind: ParamKind::Weight,
        },
        b: ParamSpec {
            shape: vec![out],
            kind: ParamKind::Bias,
        },
    }
}

fn norm_spec(d: usize) -> LayerNorm<ParamSpec> {
    LayerNorm {
        gain: ParamSpec {
            shape: vec![d],
            kind: ParamKind::Gain,
        },
        bias: ParamSpec {
            shape: vec![d],
            kind: ParamKind::Bias,
        },
    }
}

fn attention_spec(d: usize) -> Attention<ParamSpec> {
    Attention {
        q: linear_spec(d, d),
        k: linear_spec(d, d),
        v: linear_spec(d, d),
        o: linear_spec(d, d),
    }
}

fn block_spec(cfg: &ModelConfig, cross: bool) -> Block<ParamSpec> {
    let d = cfg.d_model;
    Block {
        attn_norm: norm_spec(d),
        attn: attention_spec(d),
        cross: cross.then(|| (norm_spec(d), attention_spec(d))),
        ff_norm: norm_spec(d),
        ff: FeedForward {
            up: linear_spec(d, cfg.d_ff),
            down: linear_spec(cfg.d_ff, d),
        },
    }
}

fn stack_spec(cfg: &ModelConfig, cross: bool) -> Stack<ParamSpec> {
    Stack {
        positions: ParamSpec {
            shape: vec![cfg.max_positions, cfg.d_model],
            kind: ParamKind::Weight,
        },
        blocks: (0..cfg.n_layers).map(|_| block_spec(cfg, cross)).collect(),
        final_norm: norm_spec(cfg.d_model),
    }
}

impl Params<ParamSpec> {
    /// Shapes and init classes fully determined by the configuration.
    pub fn skeleton(cfg: &ModelConfig) -> Self {
        let enc_dec = cfg.paradigm == Paradigm::EncDec;
        Params {
            token_embedding: ParamSpec {
                shape: vec![cfg.vocab_size, cfg.d_model],
                kind: ParamKind::Weight,
            },
            encoder: enc_dec.then(|| stack_spec(cfg, false)),
            decoder: stack_spec(cfg, enc_dec),
            head: linear_spec(cfg.d_model, cfg.vocab_size),
        }
    }
}
