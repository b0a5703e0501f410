use clap::{Parser, ValueEnum};
use hosm_cli::{run, ExperimentConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    Train,
    Eval,
    Bench,
    Sample,
    Denoise,
}

/// Second-order score estimation experiments.
///
/// Exit codes: 0 success, 1 validation or I/O error, 2 numerical divergence.
#[derive(Parser, Debug)]
#[command(name = "hosm", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's top-level seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = ExperimentConfig::load(&args.config).and_then(|mut cfg| {
        if let Some(s) = args.seed {
            cfg.set_seed(s);
        }
        let out = args.out.clone().unwrap_or_else(|| cfg.output_dir());
        let name = format!("{:?}", args.command).to_lowercase();
        run(&name, &cfg, &out)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hosm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
