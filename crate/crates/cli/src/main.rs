mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};

use args::{Cli, Command};
use config::ConfigError;

const EXIT_IO: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn exit_code(e: &tcinn::Error) -> u8 {
    use tcinn::Error as E;
    match e {
        E::Io { .. } | E::BadMagic { .. } | E::UnsupportedVersion(_) | E::Checksum { .. } | E::Payload(_) | E::Truncated(_) => {
            EXIT_IO
        }
        e if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

/// Usage line of the subcommand named in `argv`, or of the whole program.
fn usage(cmd: &mut clap::Command, argv: &[std::ffi::OsString]) -> String {
    let name = argv
        .iter()
        .skip(1)
        .find_map(|a| a.to_str().filter(|s| cmd.find_subcommand(s).is_some()));
    match name.and_then(|n| cmd.find_subcommand_mut(n)) {
        Some(sub) => sub.render_usage().to_string(),
        None => cmd.render_usage().to_string(),
    }
}

fn main() -> ExitCode {
    let mut cmd = Cli::command();
    let argv = match config::expand(&cmd, std::env::args_os().collect()) {
        Ok(a) => a,
        Err(ConfigError::Io(m)) => {
            eprintln!("error: {m}");
            return ExitCode::from(EXIT_IO);
        }
        Err(ConfigError::Invalid(m)) => {
            eprintln!("error: {m}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let cli = match cmd.try_get_matches_from_mut(argv.clone()).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitCode::SUCCESS;
            }
            if !e.render().to_string().contains("Usage:") {
                eprintln!("\n{}", usage(&mut cmd, &argv));
            }
            return ExitCode::from(EXIT_USAGE);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Phantom(a) => commands::phantom(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
