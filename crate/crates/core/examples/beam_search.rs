//! Beam search on an enumerable toy decoder, compared with brute force.
//!
//!     cargo run --release --example beam_search

use ged::inference::toy::{enumerate_finished, ToyModel};
use ged::inference::{beam_decode, TagBias};

fn main() -> anyhow::Result<()> {
    let model = ToyModel::new(8, 11);
    let max_len = 4;

    let mut all = enumerate_finished(&model, max_len);
    all.sort_by(|a, b| b.1.total_cmp(&a.1));
    println!("brute force best: {:?} {:.4}", all[0].0, all[0].1);

    for beam in [1, 2, 4, 8, 64] {
        let h = beam_decode(&model, &(), beam, &TagBias::default(), max_len, false)?;
        println!("beam {beam:>2}: {:?} {:.4} finished={}", h.tokens, h.score, h.finished);
    }

    let h = beam_decode(&model, &(), 8, &TagBias::default(), max_len, true)?;
    println!("length-normalized: {:?} {:.4}", h.tokens, h.score);
    Ok(())
}
