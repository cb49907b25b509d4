//! Tokenizes raw and annotated sentences with the default rules.
//!
//!     cargo run --release --example tokenize

use ged::corpus::{parse_annotated, Tokenizer};

fn main() -> anyhow::Result<()> {
    let tok = Tokenizer::default_rules();
    for s in [
        "Don't panic, it's only a test.",
        "The U.S. economy grew 3.5% in 2019 (roughly).",
        "\"Quoted\" words -- and dashes!",
    ] {
        println!("{s}\n    {}", tok.tokenize(s).join(" | "));
    }

    let line = "She <del> go </del> <ins> goes </ins> to <del> the </del> school, twice.";
    let tokens = tok.tokenize_annotated(line);
    println!("{line}\n    {}", tokens.join(" | "));
    let pair = parse_annotated(&tokens.join(" "))?;
    println!("    parsed: {}", pair.serialize());
    Ok(())
}
