use anyhow::Context;
use clap::Parser;
use ged::cli::{run, Cli};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    let command = args.first().cloned().unwrap_or_default();
    run(cli, &args).with_context(|| format!("ged {command} failed"))
}
