//! `--config FILE` support: `key=value` lines become flags of the chosen
//! subcommand unless the same flag is also given on the command line.

use std::ffi::OsString;
use std::fs;

use clap::{ArgAction, Command};

#[derive(Debug)]
pub enum ConfigError {
    /// The file could not be read.
    Io(String),
    /// The file is readable but not acceptable.
    Invalid(String),
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped and
/// `_` in keys is read as `-`.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value, got {line:?}", n + 1))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(format!("line {}: empty key", n + 1));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn given_on_command_line(args: &[OsString], long: &str) -> bool {
    let flag = format!("--{long}");
    let prefix = format!("--{long}=");
    args.iter().any(|a| {
        let a = a.to_string_lossy();
        a == flag || a.starts_with(&prefix)
    })
}

/// Position of the subcommand token and the value of its `--config`, if any.
fn locate(cmd: &Command, argv: &[OsString]) -> Option<(usize, Option<OsString>)> {
    let pos = argv
        .iter()
        .skip(1)
        .position(|a| cmd.get_subcommands().any(|s| a.to_str() == Some(s.get_name())))?
        + 1;
    let rest = &argv[pos + 1..];
    let mut config = None;
    for (i, a) in rest.iter().enumerate() {
        let s = a.to_string_lossy();
        if s == "--config" {
            config = rest.get(i + 1).cloned();
        } else if let Some(v) = s.strip_prefix("--config=") {
            config = Some(v.into());
        }
    }
    Some((pos, config))
}

/// Expands `--config` into ordinary flags placed before the user's own, so
/// the parser sees each flag once and command-line values win.
pub fn expand(cmd: &Command, argv: Vec<OsString>) -> Result<Vec<OsString>, ConfigError> {
    let Some((pos, Some(path))) = locate(cmd, &argv) else {
        return Ok(argv);
    };
    let path = std::path::PathBuf::from(path);
    let text = fs::read_to_string(&path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
    let pairs = parse_pairs(&text).map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
    let name = argv[pos].to_string_lossy().into_owned();
    let sub = cmd.find_subcommand(&name).expect("located subcommand exists");
    let user = &argv[pos + 1..];
    let mut injected: Vec<OsString> = Vec::new();
    for (key, value) in pairs {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config" && key != "help")
            .ok_or_else(|| ConfigError::Invalid(format!("{}: unknown key {key:?} for `{name}`", path.display())))?;
        if given_on_command_line(user, &key) {
            continue;
        }
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value.as_str() {
                "true" => injected.push(format!("--{key}").into()),
                "false" => {}
                other => {
                    return Err(ConfigError::Invalid(format!(
                        "{}: key {key:?} takes true or false, got {other:?}",
                        path.display()
                    )))
                }
            }
        } else {
            injected.push(format!("--{key}={value}").into());
        }
    }
    let mut out: Vec<OsString> = argv[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(user);
    Ok(out)
}
