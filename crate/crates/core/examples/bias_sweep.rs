//! Tunes the tag bias on a stub decoder whose decision is
//! `margin + bias > 0`, then prints the precision/recall sweep.
//!
//!     cargo run --release --example bias_sweep

use ged::inference::toy::MarginStub;
use ged::inference::{sweep_table, tune_bias, DecodeOptions, GridSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Erroneous sentences get margins centered a little below zero, so the
    // untuned decoder under-reports them.
    let (sources, gold): (Vec<(f64, usize)>, Vec<bool>) = (0..400)
        .map(|_| {
            let err = rng.gen_bool(0.5);
            let m = if err { rng.gen_range(-2.0..1.0) } else { rng.gen_range(-4.0..-0.5) };
            ((m, 1), err)
        })
        .unzip();

    let grid = GridSpec { refine: vec![-0.5, 0.5], ..GridSpec::range(-1.0, 3.0, 0.5)? };
    let result = tune_bias(&MarginStub, &sources, &gold, &grid, &DecodeOptions { beam: 2, ..Default::default() })?;
    print!("{}", sweep_table(&result.sweep));
    println!("best {:?}: {}", result.best.0, result.best_metrics);
    Ok(())
}
