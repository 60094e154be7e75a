//! Greedy and beam-search generation over the KV-cached decoder.
//!
//! Scores are cumulative natural-log probabilities in f64. Candidates with
//! equal score are ordered by their token sequence, lowest first.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::{DecoderState, Paradigm, TransformerModel};
use crate::numerics::Scalar;
use crate::tokenizer::{Vocabulary, BOS_ID, EOS_ID, PAD_ID};

/// Beam width used when none is given.
pub const DEFAULT_BEAM_SIZE: usize = 4;
/// Generated-token budget used when none is given.
pub const DEFAULT_MAX_LEN: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Generated tokens; a finished hypothesis ends in `</s>`.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Upper bound on generated tokens, `</s>` included.
    pub max_len: usize,
    /// Wu et al. length penalty exponent; `None` ranks by raw log-prob.
    pub length_penalty: Option<f64>,
}

impl BeamConfig {
    pub fn new(beam_size: usize, max_len: usize) -> Self {
        Self {
            beam_size,
            max_len,
            length_penalty: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_len == 0 {
            return Err(Error::Invalid(format!(
                "beam_size {} and max_len {} must both be >= 1",
                self.beam_size, self.max_len
            )));
        }
        if self.length_penalty.is_some_and(|a| !a.is_finite() || a < 0.0) {
            return Err(Error::Invalid("length penalty must be finite and >= 0".into()));
        }
        Ok(())
    }

    fn rank_score(&self, h: &BeamHypothesis) -> f64 {
        match self.length_penalty {
            None => h.log_prob,
            Some(alpha) => h.log_prob / ((5.0 + h.tokens.len() as f64) / 6.0).powf(alpha),
        }
    }
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self::new(DEFAULT_BEAM_SIZE, DEFAULT_MAX_LEN)
    }
}

/// Log-softmax in f64.
pub fn log_softmax<F: Scalar>(logits: &[F]) -> Vec<f64> {
    let max = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v.as_f64() - max).exp()).sum();
    let lz = z.ln() + max;
    logits.iter().map(|v| v.as_f64() - lz).collect()
}

/// Decoder state primed with the conditioning context, plus the log-probs
/// for the first generated token.
fn prime<F: Scalar>(model: &TransformerModel<F>, input_ids: &[u32]) -> Result<(DecoderState<F>, Vec<f64>)> {
    if input_ids.is_empty() {
        return Err(Error::Invalid("generation input is empty".into()));
    }
    match model.config().paradigm {
        Paradigm::EncDec => {
            let mut state = model.start_decoding(Some(input_ids))?;
            let logits = model.decode_step(&mut state, BOS_ID)?;
            Ok((state, log_softmax(&logits)))
        }
        Paradigm::DecOnly => {
            let mut state = model.start_decoding(None)?;
            let mut logits = Vec::new();
            for &t in input_ids {
                logits = model.decode_step(&mut state, t)?;
            }
            Ok((state, log_softmax(&logits)))
        }
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Argmax decoding; stops after `</s>` or `max_len` tokens.
pub fn greedy<F: Scalar>(model: &TransformerModel<F>, input_ids: &[u32], max_len: usize) -> Result<BeamHypothesis> {
    BeamConfig::new(1, max_len).validate()?;
    let (mut state, mut lp) = prime(model, input_ids)?;
    let mut out = BeamHypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    loop {
        let next = argmax(&lp);
        out.tokens.push(next as u32);
        out.log_prob += lp[next];
        if next as u32 == EOS_ID {
            out.finished = true;
            return Ok(out);
        }
        if out.tokens.len() == max_len {
            return Ok(out);
        }
        lp = log_softmax(&model.decode_step(&mut state, next as u32)?);
    }
}

struct Live<F: Scalar> {
    hyp: BeamHypothesis,
    state: DecoderState<F>,
    next: Vec<f64>,
}

fn order(cfg: &BeamConfig, a: &BeamHypothesis, b: &BeamHypothesis) -> Ordering {
    cfg.rank_score(b)
        .total_cmp(&cfg.rank_score(a))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search. Each step expands every live beam over the vocabulary and
/// keeps the best `beam_size` candidates; candidates ending in `</s>` move
/// to the finished pool. Returns the best finished hypothesis, or the best
/// unfinished one when none finished within `max_len`.
pub fn beam_search<F: Scalar>(model: &TransformerModel<F>, input_ids: &[u32], cfg: BeamConfig) -> Result<BeamHypothesis> {
    cfg.validate()?;
    let (state, next) = prime(model, input_ids)?;
    let mut live = vec![Live {
        hyp: BeamHypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        },
        state,
        next,
    }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    for step in 0..cfg.max_len {
        let mut candidates: Vec<(usize, BeamHypothesis)> = Vec::new();
        for (parent, l) in live.iter().enumerate() {
            for (tok, &lp) in l.next.iter().enumerate() {
                let mut tokens = l.hyp.tokens.clone();
                tokens.push(tok as u32);
                candidates.push((
                    parent,
                    BeamHypothesis {
                        tokens,
                        log_prob: l.hyp.log_prob + lp,
                        finished: tok as u32 == EOS_ID,
                    },
                ));
            }
        }
        candidates.sort_by(|a, b| order(&cfg, &a.1, &b.1));
        candidates.truncate(cfg.beam_size);
        let last_step = step + 1 == cfg.max_len;
        let mut next_live = Vec::new();
        for (parent, hyp) in candidates {
            if hyp.finished {
                finished.push(hyp);
            } else if last_step {
                next_live.push(Live {
                    hyp,
                    state: live[parent].state.clone(),
                    next: Vec::new(),
                });
            } else {
                let mut state = live[parent].state.clone();
                let tok = *hyp.tokens.last().expect("candidate has a token");
                let next = log_softmax(&model.decode_step(&mut state, tok)?);
                next_live.push(Live { hyp, state, next });
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
        // raw scores only fall as tokens append, so no live beam can overtake
        if cfg.length_penalty.is_none() {
            let best_finished = finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            let best_live = live.iter().map(|l| l.hyp.log_prob).fold(f64::NEG_INFINITY, f64::max);
            if best_finished >= best_live {
                break;
            }
        }
    }
    let pool = if finished.is_empty() {
        live.into_iter().map(|l| l.hyp).collect()
    } else {
        finished
    };
    Ok(pool
        .into_iter()
        .min_by(|a, b| order(&cfg, a, b))
        .expect("at least one hypothesis survives"))
}

/// Generated token ids. `input_ids` is the source sequence for
/// encoder–decoder models and the formatted prompt for decoder-only ones.
pub fn generate<F: Scalar>(model: &TransformerModel<F>, input_ids: &[u32], beam_size: usize, max_len: usize) -> Result<Vec<u32>> {
    Ok(beam_search(model, input_ids, BeamConfig::new(beam_size, max_len))?.tokens)
}

/// Detokenized SQL. Special tokens are dropped; for decoder-only output
/// everything through the first `SQL :` marker is removed first.
pub fn ids_to_sql(ids: &[u32], vocab: &Vocabulary, paradigm: Paradigm) -> String {
    let mut tokens: Vec<&str> = ids
        .iter()
        .filter(|&&id| id != BOS_ID && id != EOS_ID && id != PAD_ID)
        .map(|&id| vocab.token(id).unwrap_or(crate::tokenizer::UNK_TOKEN))
        .collect();
    if paradigm == Paradigm::DecOnly {
        if let Some(i) = tokens.windows(2).position(|w| w == ["SQL", ":"]) {
            tokens.drain(..i + 2);
        }
    }
    tokens.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::build_vocab;

    #[test]
    fn log_softmax_normalises() {
        let lp = log_softmax(&[1.0f32, 2.0, 3.0]);
        let s: f64 = lp.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(lp[2] > lp[1] && lp[1] > lp[0]);
    }

    #[test]
    fn ids_to_sql_strips_specials_and_prompt() {
        let vocab = build_vocab(&["select * Question : SQL x"], 100).unwrap();
        let id = |t: &str| vocab.id(t).unwrap();
        let ids = [BOS_ID, id("select"), id("*"), EOS_ID];
        assert_eq!(ids_to_sql(&ids, &vocab, Paradigm::EncDec), "select *");
        let prompt = [id("Question"), id(":"), id("x"), id("SQL"), id(":"), id("select"), id("*"), EOS_ID, PAD_ID];
        assert_eq!(ids_to_sql(&prompt, &vocab, Paradigm::DecOnly), "select *");
        let clean = [id("select"), id("*")];
        assert_eq!(ids_to_sql(&clean, &vocab, Paradigm::DecOnly), "select *");
        assert_eq!(ids_to_sql(&clean, &vocab, Paradigm::EncDec), "select *");
    }

    #[test]
    fn length_penalty_ranks_longer_hypotheses_higher() {
        let cfg = BeamConfig {
            length_penalty: Some(1.0),
            ..BeamConfig::new(2, 4)
        };
        let short = BeamHypothesis {
            tokens: vec![2],
            log_prob: -1.0,
            finished: true,
        };
        let long = BeamHypothesis {
            tokens: vec![4, 5, 6, 2],
            log_prob: -1.3,
            finished: true,
        };
        assert_eq!(order(&cfg, &long, &short), Ordering::Less);
        assert_eq!(order(&BeamConfig::new(2, 4), &long, &short), Ordering::Greater);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(BeamConfig::new(0, 3).validate().is_err());
        assert!(BeamConfig::new(2, 0).validate().is_err());
    }
}
