//! Trains the convolutional sentence classifier and tunes its threshold.
//!
//!     cargo run --release --example cnn_classifier

use ged::cnnclassifier::tune_threshold;
use ged::config::RunConfig;
use ged::corpus::ErrorRule;
use ged::inference::GridSpec;
use ged::pipeline::{prepare, synth_splits, train_model, Model, Predictor, SynthSpec, TrainRunOptions};
use ged::trainer::ModelKind;

fn main() -> anyhow::Result<()> {
    let spec = SynthSpec { train: 2000, dev: 400, test: 0, rate: 0.5, rules: ErrorRule::ALL.to_vec(), seed: 4 };
    let config = RunConfig::desk(ModelKind::Cnn);
    let (data, _) = prepare(synth_splits(&spec)?, &config.data, config.vocab_cap)?;

    let model = Model::build(&config, &data.vocab, &data.chars)?;
    let opts = TrainRunOptions { cnn_corrections: true, ..Default::default() };
    let outcome = train_model(&model, &config, &data, &opts)?;
    for e in &outcome.manifest.epochs {
        println!("epoch {:>2} train {:.4} val ppl {:.4}", e.epoch, e.train_loss, e.val_ppl);
    }

    let p = Predictor { model: &model, store: &outcome.store, vocab: &data.vocab, chars: &data.chars };
    let dev = data.sources("dev");
    let probs = p.probabilities(&dev)?;
    let (t, rows) = tune_threshold(&probs, &data.labels("dev"), &GridSpec::range(0.1, 0.9, 0.1)?.uniform)?;
    for r in &rows {
        println!("threshold {:.1}  {}", r.threshold, r.metrics);
    }
    println!("best threshold {t}");
    Ok(())
}
