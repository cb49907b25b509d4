//! Trains a small character-aware tagger on synthetic data, decodes a few
//! development sentences and tunes the tag bias.
//!
//!     cargo run --release --example train_char [epochs]

use ged::config::RunConfig;
use ged::corpus::ErrorRule;
use ged::eval::Metrics;
use ged::inference::GridSpec;
use ged::pipeline::{prepare, synth_splits, train_model, Model, Predictor, SynthSpec, TrainRunOptions};
use ged::trainer::ModelKind;

fn main() -> anyhow::Result<()> {
    let epochs: usize = std::env::args().nth(1).map_or(Ok(20), |s| s.parse())?;
    let spec = SynthSpec { train: 1500, dev: 200, test: 0, rate: 0.5, rules: ErrorRule::ALL.to_vec(), seed: 3 };
    let mut config = RunConfig::desk(ModelKind::Char);
    config.train.epochs = epochs;
    config.train.halving_start = epochs * 2 / 3;
    config.decode.beam = 3;
    let (data, _) = prepare(synth_splits(&spec)?, &config.data, config.vocab_cap)?;

    let model = Model::build(&config, &data.vocab, &data.chars)?;
    let outcome = train_model(&model, &config, &data, &TrainRunOptions { verbose: true, ..Default::default() })?;
    for e in &outcome.manifest.epochs {
        println!("epoch {:>2} lr {:<6} train {:.4} val ppl {:.4}", e.epoch, e.lr, e.train_loss, e.val_ppl);
    }

    let p = Predictor { model: &model, store: &outcome.store, vocab: &data.vocab, chars: &data.chars };
    let dev = data.sources("dev");
    for r in p.decode(&dev[..5], &config.decode)? {
        println!("{} {} {}", r.id, if r.label { "ERR" } else { "ok " }, r.decoded);
    }

    let gold = data.labels("dev");
    let untuned = p.predict(&dev, &config.decode, 0.5)?;
    let labels: Vec<bool> = untuned.labels.values().copied().collect();
    println!("untuned {}", Metrics::from_labels(&labels, &gold));
    let tuned = p.tune(&dev, &gold, &GridSpec::range(-1.0, 3.0, 0.5)?, &config.decode)?;
    println!("tuned   {} at {:?}", tuned.best_metrics, tuned.best.0);
    Ok(())
}
