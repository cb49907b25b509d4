//! Sentence-level metrics, a random baseline and a majority-vote ensemble.
//!
//!     cargo run --release --example metrics_ensemble

use ged::eval::{ensemble_vote_with, random_baseline, score, Metrics, PredictionSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    println!("{}", Metrics::from_counts(42, 8, 10, 40));

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let gold = PredictionSet::from_pairs("gold", (0..500).map(|i| (format!("s{i:04}"), rng.gen_bool(0.4))))?;
    // Three noisy systems that each flip a different 25% of the gold labels.
    let systems: Vec<PredictionSet> = (0..3)
        .map(|k| {
            let mut r = ChaCha8Rng::seed_from_u64(100 + k);
            let labels = gold.labels.iter().map(|(id, &g)| (id.clone(), if r.gen_bool(0.25) { !g } else { g }));
            PredictionSet::from_pairs(&format!("sys{k}"), labels)
        })
        .collect::<Result<_, _>>()?;

    for s in &systems {
        println!("{:<6} {}", s.system, score(s, &gold)?);
    }
    let vote = ensemble_vote_with(&systems, true)?;
    println!("{:<6} {}", "vote", score(&vote, &gold)?);
    println!("{:<6} {}", "random", score(&random_baseline(&gold, 1), &gold)?);
    Ok(())
}
