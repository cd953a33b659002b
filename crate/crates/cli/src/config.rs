//! Strict JSON experiment configs.
//!
//! A config file holds the global keys `seed`, `precision` and `output_dir` plus a `params`
//! object for the subcommand being run. Unknown keys are rejected at every level, and when
//! `params` is present every key of the subcommand's record must be given.

use crate::error::{CliError, CliResult};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::Value;
use std::path::{Path, PathBuf};

pub const DEFAULT_PRECISION: usize = 12;
pub const SEED_ENV: &str = "SCIML_SEED";

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    seed: Option<u64>,
    precision: Option<usize>,
    output_dir: Option<PathBuf>,
    params: Option<Value>,
}

/// Fully resolved settings for one run.
#[derive(Debug, Clone)]
pub struct ExperimentConfig<P> {
    pub seed: u64,
    pub precision: usize,
    pub output_dir: PathBuf,
    pub params: P,
}

/// Values given on the command line, which take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub precision: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

fn pointer(prefix: &str, path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut s = String::from(prefix);
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => s.push_str(&format!("/{index}")),
            Segment::Map { key } => s.push_str(&format!("/{key}")),
            Segment::Enum { variant } => s.push_str(&format!("/{variant}")),
            Segment::Unknown => s.push_str("/?"),
        }
    }
    if s.is_empty() {
        s.push('/');
    }
    s
}

fn strip_line_info(msg: String) -> String {
    match msg.find(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg,
    }
}

fn parse_file(text: &str) -> CliResult<ConfigFile> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| CliError::config(pointer("", e.path()), strip_line_info(e.inner().to_string())))
}

/// Deserializes a subcommand record from JSON, reporting failures with a JSON-pointer locus.
pub fn parse_params<P: DeserializeOwned>(value: Value) -> CliResult<P> {
    serde_path_to_error::deserialize(value).map_err(|e| CliError::config(pointer("/params", e.path()), e.inner().to_string()))
}

/// Contents of a config file; global keys stay unset when absent.
#[derive(Debug, Clone, Default)]
pub struct LoadedConfig<P> {
    pub seed: Option<u64>,
    pub precision: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub params: P,
}

/// Reads and strictly parses a config file.
pub fn config_load<P: DeserializeOwned + Default>(path: &Path) -> CliResult<LoadedConfig<P>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let file = parse_file(&text)?;
    let params = match file.params {
        Some(v) => parse_params(v)?,
        None => P::default(),
    };
    Ok(LoadedConfig {
        seed: file.seed,
        precision: file.precision,
        output_dir: file.output_dir,
        params,
    })
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::config(SEED_ENV, format!("{s:?} is not a non-negative integer"))),
        Err(_) => Ok(None),
    }
}

/// Merges command line, config file, environment and defaults, in that order of precedence.
pub fn resolve<P: DeserializeOwned + Default>(command: &str, ov: &Overrides) -> CliResult<ExperimentConfig<P>> {
    let LoadedConfig {
        seed,
        precision,
        output_dir,
        params,
    } = match &ov.config {
        Some(path) => config_load(path)?,
        None => LoadedConfig::default(),
    };
    let seed = match ov.seed.or(seed) {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let precision = ov.precision.or(precision).unwrap_or(DEFAULT_PRECISION);
    if !(1..=17).contains(&precision) {
        return Err(CliError::config("/precision", format!("{precision} is outside 1..=17")));
    }
    let output_dir = ov
        .output_dir
        .clone()
        .or(output_dir)
        .unwrap_or_else(|| PathBuf::from("sciml-out").join(command));
    Ok(ExperimentConfig {
        seed,
        precision,
        output_dir,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Serialize;

    #[derive(Debug, Default, Serialize, Deserialize, PartialEq)]
    #[serde(deny_unknown_fields)]
    struct Demo {
        a: f64,
        n: usize,
    }

    #[test]
    fn missing_key_is_named() {
        let err = parse_params::<Demo>(serde_json::json!({"a": 1.0})).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("`n`"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_key_has_locus() {
        let err = parse_params::<Demo>(serde_json::json!({"a": 1.0, "n": 2, "extra": 0})).unwrap_err();
        assert!(err.to_string().contains("extra"), "{err}");
        let err = parse_file(r#"{"seed": 1, "bogus": true}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn wrong_type_points_at_field() {
        let err = parse_params::<Demo>(serde_json::json!({"a": "x", "n": 2})).unwrap_err();
        assert!(err.to_string().contains("/params/a"), "{err}");
    }
}
