//! The learning-rate schedule with and without a validation stall.
//!
//!     cargo run --release --example lr_schedule

use ged::trainer::{lr_at, TrainConfig};

fn main() {
    let config = TrainConfig::default();
    let steady: Vec<f64> = (0..config.epochs).map(|k| 50.0 / (k + 1) as f64).collect();
    let mut stalled = steady.clone();
    stalled[4] = stalled[3] + 0.1;

    println!("epoch  steady    stalled at 5");
    for epoch in 1..=config.epochs {
        println!("{epoch:>5}  {:<8}  {}", lr_at(epoch, &config, &steady), lr_at(epoch, &config, &stalled));
    }
}
