//! Effective run configuration: JSON file values overlaid by command-line flags.
//!
//! A config file is a flat JSON object whose keys are the long flag names of
//! the command (`"epsilon": 8`, `"target-depth": [5, 40]`). Flags given on the
//! command line win. The merged result is what each command echoes as
//! `run_config.json`, so feeding that file back through `--config` repeats the
//! run.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

pub fn load_file(path: Option<&Path>) -> Result<Map<String, Value>, CliError> {
    let Some(path) = path else {
        return Ok(Map::new());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(CliError::Usage(format!("config {} is not a JSON object", path.display()))),
        Err(e) => Err(CliError::Usage(format!("config {}: {e}", path.display()))),
    }
}

/// Overlays the non-null fields of `flags` on `file` and deserialises the
/// result, filling anything still missing from the target type's defaults.
pub fn merge<F: Serialize, C: DeserializeOwned>(file: Map<String, Value>, flags: &F) -> Result<C, CliError> {
    let mut merged = file;
    match serde_json::to_value(flags).map_err(|e| CliError::Usage(e.to_string()))? {
        Value::Object(map) => {
            for (k, v) in map {
                if !v.is_null() {
                    merged.insert(k, v);
                }
            }
        }
        _ => unreachable!("flag structs serialise to objects"),
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))
}

pub fn to_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("configs serialise");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize)]
    #[serde(rename_all = "kebab-case")]
    struct Flags {
        epsilon: Option<f64>,
        seed: Option<u64>,
    }

    #[derive(Debug, Deserialize, PartialEq)]
    #[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
    struct Cfg {
        epsilon: f64,
        seed: u64,
        count: usize,
    }

    impl Default for Cfg {
        fn default() -> Self {
            Cfg {
                epsilon: 16.0,
                seed: 0,
                count: 3,
            }
        }
    }

    #[test]
    fn flags_override_file_and_defaults_fill_gaps() {
        let file: Map<String, Value> = serde_json::from_str(r#"{"epsilon": 4, "seed": 9}"#).unwrap();
        let flags = Flags {
            epsilon: Some(8.0),
            seed: None,
        };
        let cfg: Cfg = merge(file, &flags).unwrap();
        assert_eq!(
            cfg,
            Cfg {
                epsilon: 8.0,
                seed: 9,
                count: 3
            }
        );
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let file: Map<String, Value> = serde_json::from_str(r#"{"epsilonn": 4}"#).unwrap();
        let flags = Flags {
            epsilon: None,
            seed: None,
        };
        assert!(matches!(merge::<_, Cfg>(file, &flags), Err(CliError::Usage(_))));
    }
}
