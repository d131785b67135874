//! Run configuration: a TOML file with one table per pipeline stage, plus
//! `--set key=value` overrides applied before validation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use snn_angvel::dataset::Split;
use snn_angvel::datagen::DatagenConfig;
use snn_angvel::gradcheck::GradCheckConfig;
use snn_angvel::training::{LossConfig, TrainConfig};
use snn_angvel::NetworkConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    /// Cap on evaluated sequences (0: all).
    pub max_sequences: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: Split::Test,
            max_sequences: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for data generation, initialization and training.
    pub seed: u64,
    pub data: DatagenConfig,
    pub network: NetworkConfig,
    pub training: TrainConfig,
    pub eval: EvalConfig,
    pub grad_check: GradCheckConfig,
}

impl RunConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            t0_ms: self.training.t0_ms,
            dt_ms: self.network.dt_ms,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::config(spec, "override must look like key=value"))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(key, "empty key segment"));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(key, format!("`{part}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

fn has_key(root: &toml::Table, section: &str, key: &str) -> bool {
    root.get(section)
        .and_then(|v| v.as_table())
        .is_some_and(|t| t.contains_key(key))
}

/// Reads the optional config file, applies overrides and the command-line
/// seed, and validates the result. Unknown keys are rejected.
pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut root = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::new("io", format!("{}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text)
                .map_err(|e| CliError::config(p.display().to_string(), e.message().to_string()))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    if let Some(s) = seed {
        root.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    let text = toml::to_string(&root).map_err(|e| CliError::config("config", e.to_string()))?;
    let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| {
        let location = e
            .span()
            .and_then(|s| text.get(..s.start))
            .and_then(|prefix| prefix.lines().rev().find(|l| l.trim_start().starts_with('[')))
            .map(|l| l.trim().trim_matches(|c| c == '[' || c == ']').to_string())
            .unwrap_or_else(|| "config".into());
        CliError::config(location, e.message().to_string())
    })?;

    // the network input follows the sensor unless set explicitly
    if !has_key(&root, "network", "input_width") {
        cfg.network.input_width = cfg.data.width;
    }
    if !has_key(&root, "network", "input_height") {
        cfg.network.input_height = cfg.data.height;
    }
    cfg.training.seed = cfg.seed;
    cfg.network.validate().map_err(CliError::from)?;
    cfg.training.validate().map_err(CliError::from)?;
    cfg.data.validate().map_err(CliError::from)?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_without_file() {
        let cfg = load(None, &[], None).unwrap();
        assert_eq!(cfg.data, DatagenConfig::default());
        assert_eq!(cfg.network.input_width, 240);
        assert_eq!(cfg.seed, 0);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = load(
            None,
            &[
                "data.width=64".into(),
                "data.height=48".into(),
                "training.lr=0.001".into(),
                "eval.split=val".into(),
            ],
            Some(9),
        )
        .unwrap();
        assert_eq!((cfg.network.input_width, cfg.network.input_height), (64, 48));
        assert_eq!(cfg.training.lr, 1e-3);
        assert_eq!(cfg.eval.split, Split::Val);
        assert_eq!((cfg.seed, cfg.training.seed), (9, 9));
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_section() {
        let err = load(None, &["training.learning_rate=1".into()], None).unwrap_err();
        assert_eq!(err.kind, "config");
        assert!(err.message.contains("learning_rate"), "{}", err.message);
        assert!(load(None, &["bogus=1".into()], None).is_err());
        assert!(load(None, &["no-equals".into()], None).is_err());
    }

    #[test]
    fn reference_file_lists_the_defaults() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml");
        let cfg = load(Some(&path), &[], None).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn invalid_values_name_their_location() {
        let err = load(None, &["data.hfov_deg=200".into()], None).unwrap_err();
        assert!(err.location.contains("data.hfov_deg"), "{err:?}");
    }
}
