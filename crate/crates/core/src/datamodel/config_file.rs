//! Flat `key = value` configuration files whose keys are exactly the
//! [`ModelConfig`] field names (loss weights included).

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use super::{archive, ModelConfig};
use crate::error::{Error, Result};

fn known_keys() -> BTreeSet<String> {
    match toml::Value::try_from(ModelConfig::desk()) {
        Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
        _ => unreachable!("ModelConfig serialises to a table"),
    }
}

pub fn to_string(cfg: &ModelConfig) -> String {
    toml::to_string(cfg).expect("ModelConfig is always serialisable")
}

/// Parses a complete config. Unknown keys, nested tables and missing keys
/// are errors.
pub fn from_str(text: &str) -> Result<ModelConfig> {
    let table: toml::Table =
        toml::from_str(text).map_err(|e| Error::contract(format!("config parse error: {e}")))?;
    let known = known_keys();
    for (k, v) in &table {
        if !known.contains(k) {
            return Err(Error::contract(format!("unknown config key {k:?}")));
        }
        if v.is_table() {
            return Err(Error::contract(format!("config key {k:?} must not be a table")));
        }
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::contract(format!("config error: {e}")))
}

/// Parses a partial config: keys present override `base`.
pub fn overlay(base: &ModelConfig, text: &str) -> Result<ModelConfig> {
    let patch: toml::Table =
        toml::from_str(text).map_err(|e| Error::contract(format!("config parse error: {e}")))?;
    let mut full = match toml::Value::try_from(base.clone()) {
        Ok(toml::Value::Table(t)) => t,
        _ => unreachable!("ModelConfig serialises to a table"),
    };
    for (k, v) in patch {
        if !full.contains_key(&k) {
            return Err(Error::contract(format!("unknown config key {k:?}")));
        }
        full.insert(k, v);
    }
    from_str(&toml::to_string(&full).expect("table serialises"))
}

pub fn load(path: &Path) -> Result<ModelConfig> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    from_str(&text)
}

pub fn save(path: &Path, cfg: &ModelConfig) -> Result<()> {
    archive::write_atomic(path, to_string(cfg).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_flat_and_exact() {
        let mut cfg = ModelConfig::paper();
        cfg.loss.lambda_3 = 0.125;
        cfg.seed = u32::MAX as u64 + 7;
        let text = to_string(&cfg);
        assert!(!text.contains("[loss]"));
        assert!(text.contains("lambda_3 = 0.125"));
        assert!(text.contains("n_tokens = 10"));
        assert_eq!(from_str(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_and_missing_keys_rejected() {
        let text = to_string(&ModelConfig::desk());
        assert!(from_str(&format!("{text}bogus = 1\n")).is_err());
        let missing: String = text
            .lines()
            .filter(|l| !l.starts_with("latent_dim"))
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(from_str(&missing).is_err());
    }

    #[test]
    fn overlay_patches_fields() {
        let cfg = overlay(&ModelConfig::desk(), "latent_dim = 8\nlambda_3 = 0.0\n").unwrap();
        assert_eq!(cfg.latent_dim, 8);
        assert_eq!(cfg.loss.lambda_3, 0.0);
        assert_eq!(cfg.n_tokens, 10);
        assert!(overlay(&ModelConfig::desk(), "nope = 1").is_err());
    }
}
