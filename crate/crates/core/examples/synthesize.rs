//! Generates an annotated synthetic corpus and shows how the training
//! regime and length filter shape it.
//!
//!     cargo run --release --example synthesize

use ged::config::RunConfig;
use ged::corpus::ErrorRule;
use ged::pipeline::{prepare, synth_splits, SynthSpec};
use ged::trainer::ModelKind;

fn main() -> anyhow::Result<()> {
    let spec = SynthSpec { train: 400, dev: 100, test: 0, rate: 0.5, rules: ErrorRule::ALL.to_vec(), seed: 7 };
    let splits = synth_splits(&spec)?;

    for pair in splits.train.iter().take(6) {
        println!("{}", pair.serialize());
        println!("    source:    {}", pair.source_text());
        let fixed: Vec<String> = pair.corrected().iter().map(|t| t.as_str().to_string()).collect();
        println!("    corrected: {}  (error: {})", fixed.join(" "), pair.label);
    }

    let config = RunConfig::desk(ModelKind::Char);
    let (data, counts) = prepare(splits, &config.data, config.vocab_cap)?;
    println!("\nregime counts: {counts:?}");
    println!(
        "train {} / dev {}, filtered {}, vocab {}, chars {}",
        data.splits.train.len(),
        data.splits.dev.len(),
        data.filtered.len(),
        data.vocab.len(),
        data.chars.len()
    );
    Ok(())
}
