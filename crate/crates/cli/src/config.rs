//! `key = value` configuration files.
//!
//! Keys are flag names with underscores (`learning_rate` for
//! `--learning-rate`). Values for flags not given on the command line are
//! appended to the argument list, so clap validates both sources alike.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::Path;

use clap::parser::ValueSource;
use clap::{ArgMatches, Command};

use crate::{CliError, CliResult};

/// Parses the file into `(line, key, value)` entries. Blank lines and
/// lines starting with `#` are skipped; a key may repeat for list flags.
pub fn parse_config(text: &str) -> CliResult<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::input(format!("config line {}: expected key = value", i + 1)));
        };
        let key = k.trim().replace('-', "_");
        if key.is_empty() {
            return Err(CliError::input(format!("config line {}: empty key", i + 1)));
        }
        out.push((i + 1, key, v.trim().to_string()));
    }
    Ok(out)
}

fn known_keys(cmd: &Command) -> BTreeSet<String> {
    let mut keys: BTreeSet<String> = cmd.get_arguments().map(|a| a.get_id().to_string()).collect();
    for sub in cmd.get_subcommands() {
        keys.extend(known_keys(sub));
    }
    keys
}

fn set_on_command_line(matches: &ArgMatches, id: &str) -> bool {
    matches!(matches.try_contains_id(id), Ok(true)) && matches.value_source(id) == Some(ValueSource::CommandLine)
}

/// Extra arguments contributed by the configuration file at `path`.
pub fn file_arguments(cmd: &Command, matches: &ArgMatches, path: &Path) -> CliResult<Vec<OsString>> {
    if !path.is_file() {
        return Err(CliError::input(format!("{}: configuration file not found", path.display())));
    }
    let text = std::fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let entries = parse_config(&text)?;
    let known = known_keys(cmd);
    let Some((name, sub_matches)) = matches.subcommand() else {
        return Ok(Vec::new());
    };
    let sub = cmd.find_subcommand(name).expect("matched subcommand exists");
    let mut extra = Vec::new();
    for (line, key, value) in entries {
        if key == "config" || !known.contains(&key) {
            return Err(CliError::input(format!("config line {line}: unknown key {key:?}")));
        }
        let Some(arg) = sub
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_id().as_str() == key)
        else {
            log::debug!("config key {key:?} does not apply to {name}");
            continue;
        };
        if set_on_command_line(matches, &key) || set_on_command_line(sub_matches, &key) {
            continue;
        }
        let flag = format!("--{}", arg.get_long().expect("every flag has a long name"));
        if arg.get_action().takes_values() {
            extra.push(flag.into());
            extra.push(value.into());
        } else {
            match value.as_str() {
                "true" => extra.push(flag.into()),
                "false" => {}
                _ => return Err(CliError::input(format!("config line {line}: {key} expects true or false"))),
            }
        }
    }
    Ok(extra)
}
