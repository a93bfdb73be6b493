//! Config resolution: defaults, then the config file, then `--set key=value`
//! overrides and explicit flags, all as JSON merged by dot path.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Failure to produce a valid config; maps to exit status 3.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

/// Recursively overlays `patch` onto `base`; objects merge, anything else replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets `path` (dot separated) in `root`, creating intermediate objects.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), ConfigError> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(err(format!("invalid key path `{path}`")));
    }
    let mut cur = root;
    for k in &keys[..keys.len() - 1] {
        let obj = cur.as_object_mut().ok_or_else(|| err(format!("`{path}`: `{k}` is not inside an object")))?;
        cur = obj.entry(k.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    let obj = cur.as_object_mut().ok_or_else(|| err(format!("`{path}`: parent is not an object")))?;
    obj.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Parses a `key=value` override. The value is read as JSON when it parses,
/// otherwise as a plain string.
pub fn parse_override(s: &str) -> Result<(String, Value), ConfigError> {
    let (k, v) = s.split_once('=').ok_or_else(|| err(format!("override `{s}` is not of the form key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

/// Reads a config file. A run's `metadata.json` is accepted too: its
/// `config` object is used.
pub fn load_file(path: &Path) -> Result<Value, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| err(format!("cannot read {}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| err(format!("{}: {e}", path.display())))?;
    if !v.is_object() {
        return Err(err(format!("{}: top level must be a JSON object", path.display())));
    }
    Ok(v)
}

/// Splits a loaded file into `(experiment config, workers)`, unwrapping run metadata.
pub fn split_file(mut v: Value) -> (Value, Option<Value>) {
    if v.get("command").is_some() && v.get("config").is_some() {
        let workers = v.get("workers").cloned().filter(|w| !w.is_null());
        return (v["config"].take(), workers);
    }
    let workers = v.as_object_mut().and_then(|o| o.remove("workers")).filter(|w| !w.is_null());
    (v, workers)
}

/// Defaults of `T` overlaid with `layers` in order, then deserialized strictly.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(layers: Vec<Value>) -> Result<(T, Value), ConfigError> {
    let mut v = serde_json::to_value(T::default()).map_err(|e| err(e.to_string()))?;
    for layer in layers {
        merge(&mut v, layer);
    }
    let typed: T = serde_json::from_value(v).map_err(|e| err(format!("invalid config: {e}")))?;
    // Re-serialize so metadata records exactly what was used.
    let canonical = serde_json::to_value(&typed).map_err(|e| err(e.to_string()))?;
    Ok((typed, canonical))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_by_dot_path() {
        let mut v = json!({"a": {"b": 1, "c": 2}});
        set_path(&mut v, "a.b", json!(5)).unwrap();
        set_path(&mut v, "d.e", json!("x")).unwrap();
        assert_eq!(v, json!({"a": {"b": 5, "c": 2}, "d": {"e": "x"}}));
        assert!(set_path(&mut v, "a..b", json!(1)).is_err());
    }

    #[test]
    fn override_values() {
        assert_eq!(parse_override("x.y=0.5").unwrap(), ("x.y".into(), json!(0.5)));
        assert_eq!(parse_override("k=[1,2]").unwrap().1, json!([1, 2]));
        assert_eq!(parse_override("k=left").unwrap().1, json!("left"));
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn merge_nested() {
        let mut v = json!({"a": {"b": 1}, "c": [1]});
        merge(&mut v, json!({"a": {"z": 2}, "c": [3, 4]}));
        assert_eq!(v, json!({"a": {"b": 1, "z": 2}, "c": [3, 4]}));
    }

    #[test]
    fn metadata_is_accepted_as_config() {
        let (cfg, workers) = split_file(json!({"command": "x", "config": {"seed": 3}, "workers": 2}));
        assert_eq!(cfg, json!({"seed": 3}));
        assert_eq!(workers, Some(json!(2)));
        let (_, workers) = split_file(json!({"command": "x", "config": {}, "workers": null}));
        assert_eq!(workers, None);
    }
}
