//! `key = value` defaults. Keys are long flag names without the dashes;
//! underscores and dashes are interchangeable. `true`/`false` toggle switches.

use std::path::Path;

use crate::Failure;

const SUBCOMMANDS: [&str; 9] = [
    "convert",
    "synth",
    "train",
    "build",
    "search",
    "sweep",
    "bench",
    "trace",
    "stream-replay",
];

/// Reads a config file into flag arguments.
pub fn load(path: &Path) -> Result<Vec<String>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure {
        code: 3,
        message: format!("config {}: {e}", path.display()),
    })?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<Vec<String>, Failure> {
    let mut args = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Failure::usage(format!("config line {}: expected key = value", n + 1))
        })?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if key.is_empty() || key == "config" {
            return Err(Failure::usage(format!("config line {}: bad key", n + 1)));
        }
        match value {
            "true" => args.push(format!("--{key}")),
            "false" => {}
            _ => {
                args.push(format!("--{key}"));
                args.push(value.to_string());
            }
        }
    }
    Ok(args)
}

/// Index of the subcommand name in `argv`, skipping the values of global
/// options.
pub fn subcommand_position(argv: &[String]) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let a = argv[i].as_str();
        if SUBCOMMANDS.contains(&a) {
            return Some(i);
        }
        if (a == "--config" || a == "--threads") && !a.contains('=') {
            i += 1;
        }
        i += 1;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_switches_and_comments() {
        let args =
            parse("# defaults\nk = 5\n\nd_search=8\nreproject = true\nverbose = false\n").unwrap();
        assert_eq!(args, ["--k", "5", "--d-search", "8", "--reproject"]);
    }

    #[test]
    fn rejects_lines_without_equals() {
        let err = parse("k 5").unwrap_err();
        assert_eq!(err.code, 2);
        assert!(err.message.contains("line 1"));
    }

    #[test]
    fn finds_subcommand_after_global_values() {
        let argv: Vec<String> = ["glean", "--config", "search", "train", "--out", "x"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(subcommand_position(&argv), Some(3));
    }
}
