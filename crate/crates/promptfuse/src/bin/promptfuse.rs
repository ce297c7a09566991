use clap::Parser;
use promptfuse::cli::{run, Cli};

fn main() -> anyhow::Result<()> {
    run(Cli::parse())
}
