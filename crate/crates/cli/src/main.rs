use std::process::ExitCode;

use clap::Parser;
use hsl_cli::{run, CheckStatus, Cli, RunManifest};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(manifest) => {
            report(&manifest);
            if manifest.all_passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("hsl {}: {e}", cli.command.name());
            ExitCode::from(2)
        }
    }
}

fn report(m: &RunManifest) {
    for c in &m.checks {
        let status = match c.status {
            CheckStatus::Pass => "pass",
            CheckStatus::Fail => "FAIL",
            CheckStatus::NotApplicable => "n/a ",
        };
        let measured = c.measured.map_or(String::from("-"), |v| format!("{v:.6e}"));
        let tol = c
            .tolerance
            .map_or(String::from("-"), |v| format!("{v:.6e}"));
        eprintln!(
            "{status} {:<32} measured {measured:>14} tolerance {tol:>14}  {}",
            c.name, c.detail
        );
    }
    if let Some(e) = &m.error {
        eprintln!("error: {e}");
    }
    eprintln!("{}: {:.1}s", m.subcommand, m.wall_clock_seconds);
}
