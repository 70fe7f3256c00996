//! Writes the desk corpus files into a directory (default `data/desk`).

use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;
use lta_cli::desk;

#[derive(Parser)]
#[command(about = "Generate the seeded desk corpus")]
struct Args {
    #[arg(long, default_value = "data/desk")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = desk::DEFAULT_SEED)]
    seed: u64,
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let data = desk::generate(args.seed);
    std::fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    for (name, contents) in data.files() {
        let path = args.out_dir.join(name);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
