mod args;
mod commands;

use std::io::Write;
use std::process::ExitCode;

use clap::Parser;

use args::{normalize_argv, Cli, Command};

const NUM_THREADS_VAR: &str = "NMT_NUM_THREADS";

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var(NUM_THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{NUM_THREADS_VAR} must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn run(cli: Cli) -> nmt_core::Result<()> {
    let stdout = std::io::stdout();
    let mut out = std::io::BufWriter::new(stdout.lock());
    match &cli.command {
        Command::PrepareData(a) => commands::prepare_data(a)?,
        Command::Train(a) => {
            commands::train_model(a, &mut out)?;
        }
        Command::Translate(a) => {
            commands::translate_stream(a, std::io::stdin().lock(), &mut out)?;
        }
        Command::BuildShortlist(a) => commands::build_shortlist(a)?,
        Command::Bench(a) => {
            commands::bench(a, std::io::stdin().lock(), &mut out)?;
        }
        Command::Quantize(a) => commands::quantize(a)?,
    }
    out.flush().map_err(|e| nmt_core::Error::io("stdout", e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse_from(normalize_argv(std::env::args())) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
