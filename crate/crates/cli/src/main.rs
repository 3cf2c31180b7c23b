//! `chaindid` command-line front end.

mod args;
mod report;
mod run;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            return fail(&cli, chaindid::Error::Argument("--threads must be at least 1".into()));
        }
        // only fails if a pool already exists, which cannot happen this early
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match &cli.command {
        Command::Validate(a) => run::validate(a),
        Command::Estimate(a) => run::estimate(a),
        Command::Aggregate(a) => run::aggregate(a),
        Command::Simulate(a) => run::simulate(a),
        Command::Montecarlo(a) => run::montecarlo(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => fail(&cli, e),
    }
}

/// Exit 2 for bad arguments, 1 for data, identification and runtime failures.
fn exit_code(e: &chaindid::Error) -> u8 {
    match e {
        chaindid::Error::Argument(_) => 2,
        _ => 1,
    }
}

fn fail(cli: &Cli, e: chaindid::Error) -> ExitCode {
    if cli.error_json {
        println!("{}", report::error_json(&e));
    } else {
        eprintln!("error: {e}");
    }
    ExitCode::from(exit_code(&e))
}
