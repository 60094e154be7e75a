//! Overfits a desk-scale model on the 64-pair synthetic set and reports
//! training-set metrics.
//!
//! cargo run --release --example overfit_synth -- [t5|bart|gpt2] [steps] [lr]

use std::time::Instant;

use lightsql::data::{format_examples, synth_dataset, InputStyle};
use lightsql::decoding::BeamConfig;
use lightsql::model::{ModelConfig, Paradigm, TransformerModel};
use lightsql::tokenizer::build_vocab;
use lightsql::training::{evaluate_model, train, Dataset, TrainConfig};

fn main() -> lightsql::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let style: InputStyle = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(InputStyle::T5Prefix);
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(500);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3e-4);
    let paradigm = if style.is_decoder_only() { Paradigm::DecOnly } else { Paradigm::EncDec };

    let (schemas, examples) = synth_dataset(0, 64);
    let rows = format_examples(&schemas, &examples, style)?;
    let corpus: Vec<&str> = rows.iter().flat_map(|r| [r.formatted_input.as_str(), r.gold_sql.as_str()]).collect();
    let vocab = build_vocab(&corpus, 10_000)?;
    let data = Dataset::from_formatted(&rows, &rows, &vocab, style, 128)?;
    let model = TransformerModel::init(ModelConfig::desk(paradigm, vocab.len()), 0)?;
    let cfg = TrainConfig {
        iterations: steps,
        eval_every: steps,
        learning_rate: lr,
        ..TrainConfig::new(style, paradigm)
    };
    let start = Instant::now();
    let out = train(model, &data, &vocab, &cfg)?;
    let report = evaluate_model(&out.final_model, &data.valid, &vocab, BeamConfig::new(1, 64))?;
    for h in out.history.iter().filter(|h| h.step % 50 == 0 || h.step <= 10) {
        println!("step {:4} loss {:.4}", h.step, h.loss);
    }
    println!(
        "{style} {steps} steps: {:.1}s  vocab {}  EM {:.3}  LFAcc {:.3}  BLEU {:.3}",
        start.elapsed().as_secs_f64(),
        vocab.len(),
        report.em,
        report.lfacc,
        report.bleu
    );
    Ok(())
}
