use std::io::{self, BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use sensefs::shell::Shell;

/// Browse a simulated sensor network as a file system.
#[derive(Parser, Debug)]
#[command(name = "sensefs", version)]
struct Args {
    /// Scenario file describing clusters, sensors and links.
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the scenario's RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Runs a script instead of the interactive prompt.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Writes the event log here on exit.
    #[arg(long)]
    log: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let text = match std::fs::read_to_string(&args.scenario) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("sensefs: {}: {e}", args.scenario.display());
            return ExitCode::from(1);
        }
    };
    let mut shell = match Shell::from_scenario(&text, args.seed) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("sensefs: {}: {e}", args.scenario.display());
            return ExitCode::from(1);
        }
    };

    let code = match &args.script {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(script) => {
                let report = shell.run_script(&script);
                print!("{}", shell.transcript);
                eprint!("{}", report.summary());
                report.exit_code()
            }
            Err(e) => {
                eprintln!("sensefs: {}: {e}", path.display());
                1
            }
        },
        None => repl(&mut shell),
    };

    if let Some(path) = &args.log {
        if let Err(e) = std::fs::write(path, shell.world.sim.log().text()) {
            eprintln!("sensefs: {}: {e}", path.display());
            return ExitCode::from(1);
        }
    }
    ExitCode::from(code as u8)
}

fn repl(shell: &mut Shell) -> i32 {
    let stdin = io::stdin();
    let mut status = 0;
    loop {
        print!("% ");
        let _ = io::stdout().flush();
        let mut line = String::new();
        match stdin.lock().read_line(&mut line) {
            Ok(0) | Err(_) => break,
            Ok(_) => {}
        }
        let line = line.trim();
        if line == "quit" || line == "exit" {
            break;
        }
        let (out, failed) = shell.run_line(line);
        print!("{out}");
        if failed {
            status = 1;
        }
    }
    status
}
