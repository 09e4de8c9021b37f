//! JSON run configuration: every command reads an optional file whose keys
//! mirror its flags, then lets flags override the file, and writes the
//! resolved result next to its outputs.

use std::path::Path;

use clap::ValueEnum;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use pmts_core::peft::ModelConfig;

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "PMTS_SEED";

/// Reads `path` as JSON, or returns the default when no file is given.
/// Unknown keys are usage errors.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Flag, then file, then `PMTS_SEED`, then 0.
pub fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

pub fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// Named model presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Four-block backbone sized for a laptop.
    Desk,
    /// Eight-block ResNet-18 backbone.
    Resnet18,
}

impl Arch {
    pub fn model(self) -> ModelConfig {
        match self {
            Arch::Desk => ModelConfig::desk(),
            Arch::Resnet18 => ModelConfig::resnet18(),
        }
    }
}

/// A model either by preset name or spelled out in full; the resolved
/// snapshot always carries the full form.
pub fn resolve_model(flag: Option<Arch>, file_arch: Option<Arch>, file_model: Option<ModelConfig>) -> Result<ModelConfig> {
    if let Some(a) = flag {
        return Ok(a.model());
    }
    let model = match (file_arch, file_model) {
        (Some(_), Some(_)) => return Err(CliError::usage("config sets both `arch` and `model`")),
        (Some(a), None) => a.model(),
        (None, Some(m)) => m,
        (None, None) => Arch::Desk.model(),
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Default, PartialEq, Deserialize)]
    #[serde(default, deny_unknown_fields)]
    struct Toy {
        a: u32,
        b: Option<String>,
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"a": 3, "zzz": 1}"#).unwrap();
        let err = load::<Toy>(Some(&p)).unwrap_err();
        assert_eq!(err.exit_code(), crate::error::exit::USAGE);
        std::fs::write(&p, r#"{"a": 3}"#).unwrap();
        assert_eq!(load::<Toy>(Some(&p)).unwrap(), Toy { a: 3, b: None });
        assert_eq!(load::<Toy>(None).unwrap(), Toy::default());
    }

    #[test]
    fn flags_beat_files() {
        assert_eq!(resolve_seed(Some(4), Some(9)).unwrap(), 4);
        assert_eq!(resolve_seed(None, Some(9)).unwrap(), 9);
        let mut x = 1;
        set(&mut x, None);
        assert_eq!(x, 1);
        set(&mut x, Some(2));
        assert_eq!(x, 2);
    }

    #[test]
    fn model_presets() {
        assert_eq!(resolve_model(None, None, None).unwrap(), ModelConfig::desk());
        assert_eq!(resolve_model(Some(Arch::Resnet18), Some(Arch::Desk), None).unwrap(), ModelConfig::resnet18());
        assert!(resolve_model(None, Some(Arch::Desk), Some(ModelConfig::desk())).is_err());
    }
}
