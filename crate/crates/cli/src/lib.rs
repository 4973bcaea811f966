//! `lslu` command line: datagen, pretrain, init-light, finetune, eval,
//! params, report.
//!
//! Exit codes: 0 ok, 2 usage, 3 config, 4 io/data, 5 numeric.

pub mod checkpoint;
pub mod commands;
pub mod config;

use lslu_core::error::Error as CoreError;
use std::collections::BTreeMap;
use std::fmt;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Io(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(_)
            | CoreError::ShapeMismatch { .. }
            | CoreError::IndexOutOfRange { .. } => CliError::Config(e.to_string()),
            CoreError::Data(_) => CliError::Io(e.to_string()),
            CoreError::Numeric(_) => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

// ── logging ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LogLevel {
    Error,
    Info,
    Debug,
}

pub fn log_level() -> LogLevel {
    match std::env::var("LSLU_LOG").as_deref() {
        Ok("error") => LogLevel::Error,
        Ok("debug") => LogLevel::Debug,
        _ => LogLevel::Info,
    }
}

pub fn info(msg: &str) {
    if log_level() >= LogLevel::Info {
        eprintln!("[lslu] {msg}");
    }
}

pub fn debug(msg: &str) {
    if log_level() >= LogLevel::Debug {
        eprintln!("[lslu:debug] {msg}");
    }
}

// ── option handling ─────────────────────────────────────────────────────

/// Parsed flags merged over an optional `--config` file; flags win.
pub struct Opts {
    values: BTreeMap<String, String>,
    pub positional: Vec<String>,
    known: &'static [&'static str],
}

impl Opts {
    pub fn parse(args: &[String], known: &'static [&'static str]) -> CliResult<Opts> {
        let mut flags = BTreeMap::new();
        let mut positional = Vec::new();
        let mut i = 0;
        while i < args.len() {
            let arg = &args[i];
            if let Some(stripped) = arg.strip_prefix("--") {
                let (key, value) = match stripped.split_once('=') {
                    Some((k, v)) => (k.to_string(), v.to_string()),
                    None => {
                        let Some(value) = args.get(i + 1) else {
                            return Err(CliError::Usage(format!(
                                "flag --{stripped} needs a value"
                            )));
                        };
                        i += 1;
                        (stripped.to_string(), value.clone())
                    }
                };
                if !known.contains(&key.as_str()) && key != "config" {
                    return Err(CliError::Usage(format!("unknown flag --{key}")));
                }
                flags.insert(key, value);
            } else {
                positional.push(arg.clone());
            }
            i += 1;
        }
        // config file supplies defaults; explicit flags override
        let mut values = BTreeMap::new();
        if let Some(path) = flags.get("config") {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("cannot read config {path}: {e}")))?;
            let file_map = config::parse(&text)
                .map_err(|e| CliError::Config(format!("config {path}: {e}")))?;
            for (k, v) in file_map {
                if !known.contains(&k.as_str()) {
                    return Err(CliError::Config(format!(
                        "config {path}: unknown key {k:?}"
                    )));
                }
                values.insert(k, v);
            }
        }
        values.extend(flags);
        Ok(Opts {
            values,
            positional,
            known,
        })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        debug_assert!(
            self.known.contains(&key) || key == "config",
            "unregistered option {key}"
        );
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> CliResult<&str> {
        self.get(key)
            .ok_or_else(|| CliError::Usage(format!("missing required flag --{key}")))
    }

    pub fn get_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.get(key).unwrap_or(default)
    }

    pub fn get_usize(&self, key: &str, default: usize) -> CliResult<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CliError::Config(format!("--{key} expects an integer, got {v:?}"))),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> CliResult<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CliError::Config(format!("--{key} expects an integer, got {v:?}"))),
        }
    }

    pub fn get_f64(&self, key: &str, default: f64) -> CliResult<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CliError::Config(format!("--{key} expects a number, got {v:?}"))),
        }
    }
}

pub const USAGE: &str = "\
lslu — spoken language understanding with a frozen backbone and per-domain light encoders

USAGE:
  lslu <subcommand> [flags]

SUBCOMMANDS:
  datagen     expand a grammar into labeled corpora, pairs, vocab, and schema
  pretrain    masked-LM pre-train a backbone (regimes: clm, query_only, plain_mlm)
  init-light  initialize a light encoder by MLM against a frozen backbone
  finetune    train a light encoder (or `--variant full` for the whole model)
  eval        score a trained model on a labeled corpus
  params      analytic parameter accounting for a configuration
  report      render a results table from eval row files

Common flags: --config FILE, --seed N, --out PATH. Set LSLU_LOG=debug for verbose logs.
Run `lslu <subcommand> --help-flags` to list a subcommand's flags.
";

/// Entry point; returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    let Some(subcommand) = args.first() else {
        eprint!("{USAGE}");
        return EXIT_USAGE;
    };
    let rest = &args[1..];
    if rest.iter().any(|a| a == "--help-flags") {
        let flags = commands::known_flags(subcommand);
        match flags {
            Some(list) => {
                println!("flags for {subcommand}: {}", list.join(", "));
                return EXIT_OK;
            }
            None => {
                eprint!("{USAGE}");
                return EXIT_USAGE;
            }
        }
    }
    let outcome = match subcommand.as_str() {
        "datagen" => commands::datagen(rest),
        "pretrain" => commands::pretrain_cmd(rest),
        "init-light" => commands::init_light(rest),
        "finetune" => commands::finetune_cmd(rest),
        "eval" => commands::eval_cmd(rest),
        "params" => commands::params_cmd(rest),
        "report" => commands::report_cmd(rest),
        "--help" | "-h" | "help" => {
            print!("{USAGE}");
            Ok(())
        }
        other => {
            eprintln!("unknown subcommand {other:?}");
            eprint!("{USAGE}");
            return EXIT_USAGE;
        }
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("lslu {subcommand}: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_errors_map_to_exit_codes() {
        let cases = [
            (CoreError::Config("x".into()), EXIT_CONFIG),
            (
                CoreError::ShapeMismatch {
                    op: "t",
                    lhs: vec![1],
                    rhs: vec![2],
                },
                EXIT_CONFIG,
            ),
            (
                CoreError::IndexOutOfRange {
                    what: "t",
                    index: 0,
                    limit: 0,
                },
                EXIT_CONFIG,
            ),
            (CoreError::Data("x".into()), EXIT_IO),
            (CoreError::Numeric("x".into()), EXIT_NUMERIC),
        ];
        for (err, code) in cases {
            assert_eq!(CliError::from(err).exit_code(), code);
        }
    }

    #[test]
    fn log_level_parses_env_values() {
        // set_var is process-global; none of the parallel tests assert on
        // log output, so a transient change is safe
        let prior = std::env::var("LSLU_LOG").ok();
        std::env::set_var("LSLU_LOG", "error");
        assert_eq!(log_level(), LogLevel::Error);
        std::env::set_var("LSLU_LOG", "debug");
        assert_eq!(log_level(), LogLevel::Debug);
        std::env::set_var("LSLU_LOG", "bogus");
        assert_eq!(log_level(), LogLevel::Info);
        match prior {
            Some(v) => std::env::set_var("LSLU_LOG", v),
            None => std::env::remove_var("LSLU_LOG"),
        }
    }
}
