use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use scsf_cli::config::{Command, DEFAULT_OUT};
use scsf_cli::Cli;

fn out_dir(cli: &Cli) -> PathBuf {
    let common = match &cli.command {
        Command::Fit { common, .. }
        | Command::Tune { common, .. }
        | Command::Fleet { common, .. }
        | Command::Synth { common, .. } => common,
    };
    common.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let out = out_dir(&cli);
    match scsf_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let json = e.to_json();
            eprintln!("{json}");
            if out.is_dir() {
                let _ = std::fs::write(out.join("error.json"), json + "\n");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
