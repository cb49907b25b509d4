//! Run configurations: presets, text round trip, overrides and hashes.
//!
//!     cargo run --release --example config_presets

use ged::config::RunConfig;

fn main() -> anyhow::Result<()> {
    let desk = RunConfig::parse("preset = desk\nmodel = char\n")?;
    print!("{}", desk.to_text());
    println!("hash {}", desk.hash());

    let mut tuned = desk.clone();
    tuned.apply_overrides(&[("beam".into(), "5".into()), ("epochs".into(), "12".into())])?;
    println!("with overrides: hash {}", tuned.hash());
    assert_eq!(RunConfig::parse(&tuned.to_text())?, tuned);

    match RunConfig::parse("preset = desk\nmodel = char\nbeam = 0\n") {
        Ok(_) => println!("accepted?"),
        Err(e) => println!("rejected: {e}"),
    }
    Ok(())
}
