use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use robusto::app;
use robusto::config::{parse_config_file, parse_config_str, Mode};

/// Worst-case robust topology optimization of a cantilever.
#[derive(Parser, Debug)]
#[command(name = "robusto", version)]
struct Cli {
    /// baseline, evaluate, robust, gradcheck or oracle
    mode: Mode,
    /// Config file (TOML sections); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Output directory (same as io.output_dir=...).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 1 gives bitwise-reproducible runs.
    #[arg(long)]
    threads: Option<usize>,
    /// section.key=value overrides applied after the config file.
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let mut overrides = cli.overrides.clone();
    if let Some(out) = &cli.out {
        overrides.push(format!("io.output_dir={:?}", out.display().to_string()));
    }
    let parsed = match &cli.config {
        Some(path) => parse_config_file(path, Some(cli.mode), cli.preset.as_deref(), &overrides),
        None => parse_config_str("", Some(cli.mode), cli.preset.as_deref(), &overrides),
    };
    let cfg = match parsed {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match app::run(&cfg) {
        Ok(text) => {
            println!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
