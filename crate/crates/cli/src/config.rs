//! Layered configuration: built-in defaults, then a JSON file, then flags.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::Failure;

/// Overlays `patch` onto `base`. Every key in `patch` must already exist in
/// `base`; nested objects merge recursively, everything else is replaced.
pub fn merge(base: &mut Value, patch: Value, path: &str) -> Result<(), String> {
    match (base, patch) {
        (Value::Object(base), Value::Object(patch)) => {
            for (key, value) in patch {
                let here = if path.is_empty() {
                    key.clone()
                } else {
                    format!("{path}.{key}")
                };
                match base.get_mut(&key) {
                    Some(slot) if slot.is_object() && value.is_object() => {
                        merge(slot, value, &here)?
                    }
                    Some(slot) => *slot = value,
                    None => return Err(format!("unknown config key `{here}`")),
                }
            }
            Ok(())
        }
        (_, _) => Err("config file must hold a JSON object".into()),
    }
}

/// Defaults of `T` with the optional config file applied.
pub fn layered<T: Serialize + DeserializeOwned + Default>(
    file: Option<&Path>,
) -> Result<T, Failure> {
    let Some(path) = file else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
    let patch: Value = serde_json::from_str(&text)
        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let mut base = serde_json::to_value(T::default()).expect("defaults serialize");
    merge(&mut base, patch, "").map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    serde_json::from_value(base).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

pub fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

pub fn to_pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("config serializes")
}

/// Prints the resolved configuration and, when given, writes it to `dir/config.json`.
pub fn announce<T: Serialize>(command: &str, value: &T, dir: Option<&Path>) -> Result<(), Failure> {
    let text = to_pretty(value);
    println!("{command} config:\n{text}");
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))?;
        let path = dir.join("config.json");
        fs::write(&path, text + "\n")
            .map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn merge_overrides_nested_keys() {
        let mut base = json!({"a": 1, "b": {"c": 2, "d": 3}});
        merge(&mut base, json!({"b": {"d": 4}}), "").unwrap();
        assert_eq!(base, json!({"a": 1, "b": {"c": 2, "d": 4}}));
    }

    #[test]
    fn merge_rejects_unknown_keys() {
        let mut base = json!({"b": {"c": 2}});
        let err = merge(&mut base, json!({"b": {"x": 1}}), "").unwrap_err();
        assert!(err.contains("b.x"));
    }

    #[test]
    fn null_defaults_accept_values() {
        let mut base = json!({"loss": null});
        merge(&mut base, json!({"loss": "mse"}), "").unwrap();
        assert_eq!(base["loss"], "mse");
    }
}
