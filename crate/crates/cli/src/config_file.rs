//! Flat `key = value` config files. Each key is a long flag name of the
//! subcommand being run; the values are spliced into the argument list
//! ahead of the user's own flags, so flags given on the command line win.

use std::path::Path;

use anyhow::{bail, Context, Result};

/// Parses `text` into flag arguments. Blank lines and lines starting with
/// `#` are ignored. `true`/`false` values turn a switch on or leave it off.
pub fn parse(text: &str) -> Result<Vec<String>> {
    let mut args = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("line {}: expected `key = value`, got {raw:?}", n + 1);
        };
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        let value = value.trim();
        if key.is_empty() {
            bail!("line {}: empty key", n + 1);
        }
        match value {
            "true" => args.push(format!("--{key}")),
            "false" => {}
            _ => args.push(format!("--{key}={}", unquote(value))),
        }
    }
    Ok(args)
}

fn unquote(value: &str) -> &str {
    value
        .strip_prefix('"')
        .and_then(|v| v.strip_suffix('"'))
        .unwrap_or(value)
}

pub fn load(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config file {}", path.display()))?;
    parse(&text).with_context(|| format!("in config file {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flags_switches_and_comments() {
        let args = parse("# run\ncell = lstm\nhidden=32\n\nword_level = true\nkeep-diacritics = false\nprompt = \"دل ہے\"\n").unwrap();
        assert_eq!(args, ["--cell=lstm", "--hidden=32", "--word-level", "--prompt=دل ہے"]);
    }

    #[test]
    fn rejects_lines_without_equals() {
        assert!(parse("cell gru").is_err());
        assert!(parse(" = 3").is_err());
    }
}
