#![allow(dead_code)]

use std::sync::Arc;

use lightsql::model::{Activation, LossBatch, ModelConfig, Paradigm, TransformerModel};
use lightsql::numerics::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn tiny_config(paradigm: Paradigm, vocab_size: usize) -> ModelConfig {
    ModelConfig {
        paradigm,
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size,
        max_positions: 16,
        dropout_rate: 0.0,
        activation: Activation::Gelu,
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `sum(y ⊙ r)` for a fixed random `r`, making any output a scalar loss
/// with a non-trivial upstream gradient.
pub fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random_tensor(&mut rng, tape.shape(y), 1.0);
    let r = tape.constant(r);
    let p = tape.mul(y, r).unwrap();
    tape.sum(p).unwrap()
}

/// Denominator floor: tensors whose true gradient is identically zero
/// (key biases under softmax shift invariance) are compared absolutely.
pub const NORM_FLOOR: f64 = 1e-6;

/// `‖a − n‖ / max(‖a‖, ‖n‖, NORM_FLOOR)` over flattened entries.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(NORM_FLOOR)
}

/// Largest per-input relative error between tape gradients and central
/// differences of `f`, which maps leaf variables to a scalar.
pub fn check_op<G>(inputs: &[Tensor<f64>], f: G) -> f64
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(Arc::new(x.clone()))).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(Arc::new(x.clone()))).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap();
        let mut numeric = Vec::with_capacity(inputs[k].numel());
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * FD_STEP));
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    worst
}

/// Per-tensor relative errors of the full-model gradient, by name.
pub fn check_model(model: &TransformerModel<f64>, batch: &LossBatch) -> Vec<(String, f64)> {
    let (_, grads) = lightsql::model::loss_and_grads(model, batch, None).unwrap();
    let names = model.params().names();
    let grads = grads.flatten();
    let mut work = model.clone();
    let mut out = Vec::new();
    for (idx, (name, g)) in names.into_iter().zip(grads).enumerate() {
        let numel = g.numel();
        let mut numeric = Vec::with_capacity(numel);
        for i in 0..numel {
            let mut at = |delta: f64| {
                poke(&mut work, idx, i, delta);
                let l = lightsql::model::loss(&work, batch).unwrap();
                poke(&mut work, idx, i, -delta);
                l
            };
            let lp = at(FD_STEP);
            let lm = at(-FD_STEP);
            numeric.push((lp - lm) / (2.0 * FD_STEP));
        }
        out.push((name, relative_error(g.data(), &numeric)));
    }
    out
}

fn poke(model: &mut TransformerModel<f64>, leaf: usize, i: usize, delta: f64) {
    let mut k = 0;
    *model.params_mut() = model.params().map(&mut |_, t| {
        let mut t = t.clone();
        if k == leaf {
            Arc::make_mut(&mut t).data_mut()[i] += delta;
        }
        k += 1;
        t
    });
}

pub fn random_ids(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}

/// Finite-difference error of every differentiable tape primitive.
pub fn primitive_suite() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut t = |shape: &[usize]| random_tensor(&mut rng, shape, 1.0);
    let a23 = t(&[2, 3]);
    let b23 = t(&[2, 3]);
    let b34 = t(&[3, 4]);
    let w34 = t(&[3, 4]);
    let bias4 = t(&[4]);
    let x45 = t(&[4, 5]);
    let g5 = t(&[5]);
    let be5 = t(&[5]);
    let q = t(&[2, 3, 4]);
    let k = t(&[2, 5, 4]);
    let v = t(&[2, 5, 3]);
    let table = t(&[6, 3]);
    let heads_in = t(&[6, 4]);
    let logits = t(&[5, 4]);
    let m = lightsql::numerics::MASK_VALUE;
    let mask = Tensor::new(vec![2, 3], vec![0.0, m, 0.0, 0.0, 0.0, m]).unwrap();
    let mut out = Vec::new();
    out.push(("add", check_op(&[a23.clone(), b23.clone()], |tp, v| {
        let y = tp.add(v[0], v[1]).unwrap();
        project(tp, y, 1)
    })));
    out.push(("mul", check_op(&[a23.clone(), b23.clone()], |tp, v| {
        let y = tp.mul(v[0], v[1]).unwrap();
        project(tp, y, 2)
    })));
    out.push(("scale", check_op(std::slice::from_ref(&a23), |tp, v| {
        let y = tp.scale(v[0], -1.7).unwrap();
        project(tp, y, 3)
    })));
    out.push(("sum", check_op(std::slice::from_ref(&a23), |tp, v| {
        let y = tp.mul(v[0], v[0]).unwrap();
        tp.sum(y).unwrap()
    })));
    out.push(("matmul", check_op(&[a23.clone(), b34.clone()], |tp, v| {
        let y = tp.matmul(v[0], v[1]).unwrap();
        project(tp, y, 4)
    })));
    out.push(("batch_matmul", check_op(&[q.clone(), t(&[2, 4, 5])], |tp, v| {
        let y = tp.batch_matmul(v[0], v[1], false).unwrap();
        project(tp, y, 5)
    })));
    out.push(("batch_matmul_transposed", check_op(&[q.clone(), k.clone()], |tp, v| {
        let y = tp.batch_matmul(v[0], v[1], true).unwrap();
        project(tp, y, 6)
    })));
    out.push(("transpose", check_op(std::slice::from_ref(&a23), |tp, v| {
        let y = tp.transpose(v[0]).unwrap();
        project(tp, y, 7)
    })));
    out.push(("linear", check_op(&[a23.clone(), w34.clone(), bias4.clone()], |tp, v| {
        let y = tp.linear(v[0], v[1], v[2]).unwrap();
        project(tp, y, 8)
    })));
    out.push(("softmax_last_axis", check_op(std::slice::from_ref(&x45), |tp, v| {
        let y = tp.softmax(v[0], 1).unwrap();
        project(tp, y, 9)
    })));
    out.push(("softmax_first_axis", check_op(std::slice::from_ref(&x45), |tp, v| {
        let y = tp.softmax(v[0], 0).unwrap();
        project(tp, y, 10)
    })));
    out.push(("masked_softmax", check_op(std::slice::from_ref(&a23), |tp, v| {
        let y = tp.masked_softmax(v[0], &mask).unwrap();
        project(tp, y, 11)
    })));
    out.push(("layer_norm", check_op(&[x45.clone(), g5.clone(), be5.clone()], |tp, v| {
        let y = tp.layer_norm(v[0], v[1], v[2]).unwrap();
        project(tp, y, 12)
    })));
    out.push(("relu", check_op(std::slice::from_ref(&x45), |tp, v| {
        let y = tp.relu(v[0]).unwrap();
        project(tp, y, 13)
    })));
    out.push(("gelu", check_op(std::slice::from_ref(&x45), |tp, v| {
        let y = tp.gelu(v[0]).unwrap();
        project(tp, y, 14)
    })));
    out.push(("embedding", check_op(std::slice::from_ref(&table), |tp, v| {
        let y = tp.embedding(v[0], &[4, 0, 4, 2, 5]).unwrap();
        project(tp, y, 15)
    })));
    out.push(("dropout", check_op(std::slice::from_ref(&x45), |tp, v| {
        let mut r = ChaCha8Rng::seed_from_u64(99);
        let y = tp.dropout(v[0], 0.3, &mut r).unwrap();
        project(tp, y, 16)
    })));
    out.push(("split_heads", check_op(std::slice::from_ref(&heads_in), |tp, v| {
        let y = tp.split_heads(v[0], 2, 2).unwrap();
        project(tp, y, 17)
    })));
    out.push(("merge_heads", check_op(std::slice::from_ref(&v), |tp, vs| {
        let y = tp.merge_heads(vs[0], 1, 2).unwrap();
        project(tp, y, 18)
    })));
    out.push(("cross_entropy", check_op(std::slice::from_ref(&logits), |tp, v| {
        tp.cross_entropy(v[0], &[3, -100, 0, 1, -100], -100).unwrap()
    })));
    out
}

/// Prefix truncation and suffix replacement leave every earlier logit row
/// bit-identical. Returns the number of (seed, prefix) cases checked.
pub fn causality_suite(seeds: u64) -> Result<usize, String> {
    use lightsql::model::{forward_dec_only, forward_enc_dec};
    let mut cases = 0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let vocab = 13;
        let len = rng.random_range(2..=10);
        let ids = random_ids(&mut rng, len, vocab);
        let src_len = rng.random_range(1..=8);
        let src = random_ids(&mut rng, src_len, vocab);
        for paradigm in [Paradigm::DecOnly, Paradigm::EncDec] {
            let mut cfg = tiny_config(paradigm, vocab);
            cfg.activation = if seed % 2 == 0 { Activation::Gelu } else { Activation::Relu };
            let model = TransformerModel::<f32>::init_with_std(cfg, seed, 0.5).map_err(|e| e.to_string())?;
            let run = |tgt: &[u32]| match paradigm {
                Paradigm::DecOnly => forward_dec_only(&model, tgt),
                Paradigm::EncDec => forward_enc_dec(&model, &src, tgt),
            };
            let full = run(&ids).map_err(|e| e.to_string())?;
            for k in 1..len {
                let prefix = run(&ids[..k]).map_err(|e| e.to_string())?;
                let mut changed = ids[..k].to_vec();
                changed.extend(random_ids(&mut rng, len - k, vocab));
                changed[k] = (ids[k] + 1) % vocab as u32;
                let other = run(&changed).map_err(|e| e.to_string())?;
                for t in 0..k {
                    let same = |a: &[f32], b: &[f32]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
                    if !same(prefix.row(t), full.row(t)) || !same(other.row(t), full.row(t)) {
                        return Err(format!("{paradigm} seed {seed}: row {t} differs with prefix length {k}"));
                    }
                }
                cases += 1;
            }
        }
    }
    Ok(cases)
}

/// Extra padding columns and ignored label positions leave the loss and
/// every gradient bit-identical.
pub fn padding_suite() -> Result<usize, String> {
    use lightsql::data::TrainingPair;
    use lightsql::model::{collate_padded, loss_and_grads};
    use lightsql::tokenizer::default_labels;
    let mut cases = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let vocab = 13;
        for paradigm in [Paradigm::EncDec, Paradigm::DecOnly] {
            let model =
                TransformerModel::<f32>::init_with_std(tiny_config(paradigm, vocab), seed, 0.5).map_err(|e| e.to_string())?;
            let pairs: Vec<TrainingPair> = (0..3)
                .map(|_| {
                    let (src_len, tgt_len) = (rng.random_range(1..=4), rng.random_range(1..=4));
                    let src = random_ids(&mut rng, src_len, vocab);
                    let mut tgt = vec![1];
                    tgt.extend(random_ids(&mut rng, tgt_len, vocab).iter().map(|&x| x.max(4)));
                    tgt.push(2);
                    match paradigm {
                        Paradigm::EncDec => TrainingPair {
                            input_ids: src,
                            label_ids: default_labels(&tgt, 0).unwrap(),
                        },
                        Paradigm::DecOnly => {
                            let mut seq = src.clone();
                            seq.extend(&tgt[1..]);
                            TrainingPair {
                                label_ids: default_labels(&seq, src.len()).unwrap(),
                                input_ids: seq,
                            }
                        }
                    }
                })
                .collect();
            let refs: Vec<&TrainingPair> = pairs.iter().collect();
            let tight = collate_padded(&refs, paradigm, None, None).map_err(|e| e.to_string())?;
            let widest = refs.iter().map(|p| p.label_ids.len()).max().unwrap();
            let src_widest = refs.iter().map(|p| p.input_ids.len()).max().unwrap();
            let extra = rng.random_range(1..=5);
            let loose = collate_padded(
                &refs,
                paradigm,
                Some(src_widest + extra),
                Some(widest + extra),
            )
            .map_err(|e| e.to_string())?;
            if loose.targets.len() <= tight.targets.len() {
                return Err("padded batch is not wider".into());
            }
            let (l1, g1) = loss_and_grads(&model, &tight, None).map_err(|e| e.to_string())?;
            let (l2, g2) = loss_and_grads(&model, &loose, None).map_err(|e| e.to_string())?;
            if l1.to_bits() != l2.to_bits() {
                return Err(format!("{paradigm} seed {seed}: loss {l1} vs {l2}"));
            }
            let names = model.params().names();
            for ((name, a), b) in names.iter().zip(g1.flatten()).zip(g2.flatten()) {
                if a.data().iter().zip(b.data()).any(|(x, y)| x.to_bits() != y.to_bits()) {
                    return Err(format!("{paradigm} seed {seed}: gradient of {name} changed"));
                }
            }
            cases += 1;
        }
    }
    Ok(cases)
}

/// Log-probability of generating `tokens` after the conditioning input,
/// from one full forward pass.
pub fn sequence_log_prob(model: &TransformerModel<f32>, input: &[u32], tokens: &[u32]) -> f64 {
    use lightsql::decoding::log_softmax;
    use lightsql::model::{forward_dec_only, forward_enc_dec};
    use lightsql::tokenizer::BOS_ID;
    let (logits, offset) = match model.config().paradigm {
        Paradigm::EncDec => {
            let mut tgt = vec![BOS_ID];
            tgt.extend(&tokens[..tokens.len() - 1]);
            (forward_enc_dec(model, input, &tgt).unwrap(), 0)
        }
        Paradigm::DecOnly => {
            let mut seq = input.to_vec();
            seq.extend(&tokens[..tokens.len() - 1]);
            (forward_dec_only(model, &seq).unwrap(), input.len() - 1)
        }
    };
    tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| log_softmax(logits.row(offset + t))[tok as usize])
        .sum()
}

/// Best `</s>`-terminated sequence of at most `max_len` tokens by
/// cumulative log-probability, ties to the lexicographically smallest.
pub fn exhaustive_best(model: &TransformerModel<f32>, input: &[u32], max_len: usize) -> (Vec<u32>, f64) {
    use lightsql::tokenizer::EOS_ID;
    let vocab = model.config().vocab_size as u32;
    let mut best: Option<(Vec<u32>, f64)> = None;
    let mut frontier: Vec<Vec<u32>> = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for prefix in &frontier {
            for tok in 0..vocab {
                let mut seq = prefix.clone();
                seq.push(tok);
                if tok == EOS_ID {
                    let score = sequence_log_prob(model, input, &seq);
                    let better = match &best {
                        None => true,
                        Some((b, s)) => score > *s || (score == *s && seq < *b),
                    };
                    if better {
                        best = Some((seq, score));
                    }
                } else {
                    next.push(seq);
                }
            }
        }
        frontier = next;
    }
    best.expect("immediate </s> is always a candidate")
}

pub fn oracle_model(paradigm: Paradigm, seed: u64, std: f64) -> TransformerModel<f32> {
    let mut cfg = tiny_config(paradigm, 3);
    cfg.d_model = 8;
    cfg.d_ff = 16;
    TransformerModel::init_with_std(cfg, seed, std).unwrap()
}

pub fn oracle_input(seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=4);
    random_ids(&mut rng, n, 3)
}

const SQL_PIECES: &[&str] = &[
    "SELECT", "select", "FROM", "from", "WHERE", "count", "avg", "(", ")", "*", ",", ";", "=", "<", ">", "<=", ">=",
    "!=", "age", "Name", "singer", "T1", "'x'", "3", " ", "  ", "\t",
];

/// Random SQL-like string assembled from keywords, identifiers, punctuation
/// and irregular whitespace.
pub fn random_sql(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(0..12);
    (0..n)
        .map(|_| {
            let piece = SQL_PIECES[rng.random_range(0..SQL_PIECES.len())];
            if rng.random_bool(0.5) {
                format!("{piece} ")
            } else {
                piece.to_string()
            }
        })
        .collect()
}

/// Vocabulary and a train/valid dataset over `n` synthetic examples; the
/// validation set is the first `n_valid` training rows.
pub fn synth_setup(
    style: lightsql::data::InputStyle,
    n: usize,
    n_valid: usize,
) -> (lightsql::tokenizer::Vocabulary, lightsql::training::Dataset) {
    use lightsql::data::{format_examples, synth_dataset};
    let (schemas, examples) = synth_dataset(0, n);
    let rows = format_examples(&schemas, &examples, style).unwrap();
    let corpus: Vec<&str> = rows.iter().flat_map(|r| [r.formatted_input.as_str(), r.gold_sql.as_str()]).collect();
    let vocab = lightsql::tokenizer::build_vocab(&corpus, 10_000).unwrap();
    let data = lightsql::training::Dataset::from_formatted(&rows, &rows[..n_valid], &vocab, style, 64).unwrap();
    (vocab, data)
}

pub fn small_model(paradigm: Paradigm, vocab_size: usize, seed: u64) -> TransformerModel<f32> {
    let mut cfg = tiny_config(paradigm, vocab_size);
    cfg.max_positions = 64;
    TransformerModel::init(cfg, seed).unwrap()
}

fn gradient_pairs(paradigm: Paradigm, rng: &mut ChaCha8Rng) -> Vec<lightsql::data::TrainingPair> {
    use lightsql::data::TrainingPair;
    use lightsql::tokenizer::default_labels;
    (0..2)
        .map(|i| {
            let src = random_ids(rng, 3 + i, 11);
            let mut tgt = vec![1];
            tgt.extend(random_ids(rng, 2 + 2 * i, 11));
            tgt.push(2);
            match paradigm {
                Paradigm::EncDec => TrainingPair {
                    input_ids: src,
                    label_ids: default_labels(&tgt, 0).unwrap(),
                },
                Paradigm::DecOnly => {
                    let mut seq = src.clone();
                    seq.extend(&tgt[1..]);
                    TrainingPair {
                        label_ids: default_labels(&seq, src.len()).unwrap(),
                        input_ids: seq,
                    }
                }
            }
        })
        .collect()
}

/// Per-tensor finite-difference errors of both tiny models, labelled
/// `paradigm/tensor`.
pub fn model_gradient_suite() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for paradigm in [Paradigm::EncDec, Paradigm::DecOnly] {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = TransformerModel::<f64>::init_with_std(tiny_config(paradigm, 11), 2, 0.3).unwrap();
        let ps = gradient_pairs(paradigm, &mut rng);
        let refs: Vec<_> = ps.iter().collect();
        let batch = lightsql::model::collate(&refs, paradigm).unwrap();
        out.extend(check_model(&model, &batch).into_iter().map(|(n, e)| (format!("{paradigm}/{n}"), e)));
    }
    out
}
