//! Layered configuration: defaults < JSON file < command-line flags.

use std::fmt;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// A configuration problem, reported with the dotted path of the offending field.
#[derive(Debug)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl fmt::Display) -> Self {
        Self {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

impl std::error::Error for ConfigError {}

/// What a `--config` file contributed.
#[derive(Debug, Default)]
pub struct FileLayer {
    pub value: Option<Value>,
    /// Seed recorded in a run manifest, when the file is one.
    pub seed: Option<u64>,
}

/// Reads a config file. An empty file is an empty object. A run manifest is
/// accepted too: its `config` and `seed` are replayed, provided it was
/// written by the same command.
pub fn read_file(path: &Path, command: &str) -> Result<FileLayer, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new("<file>", format!("{}: {e}", path.display())))?;
    if text.trim().is_empty() {
        return Ok(FileLayer {
            value: Some(Value::Object(Map::new())),
            seed: None,
        });
    }
    let value: Value = serde_json::from_str(&text).map_err(|e| ConfigError::new("<file>", e))?;
    if !value.is_object() {
        return Err(ConfigError::new("<file>", "expected a JSON object"));
    }
    let is_manifest = ["command", "config", "seed", "outputs"]
        .iter()
        .all(|k| value.get(*k).is_some());
    if !is_manifest {
        return Ok(FileLayer {
            value: Some(value),
            seed: None,
        });
    }
    let recorded = value["command"].as_str().unwrap_or_default();
    if recorded != command {
        return Err(ConfigError::new(
            "command",
            format!("manifest was written by `{recorded}`, not `{command}`"),
        ));
    }
    Ok(FileLayer {
        seed: value["seed"].as_u64(),
        value: Some(value["config"].clone()),
    })
}

/// Recursively overlays `top` onto `base`. Objects merge key by key; any
/// other value replaces.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
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

/// Flag overrides as `(dotted.path, value)`.
#[derive(Debug, Default)]
pub struct Overrides(Vec<(&'static str, Value)>);

impl Overrides {
    pub fn set(&mut self, path: &'static str, v: Option<impl Serialize>) -> &mut Self {
        if let Some(v) = v {
            self.0.push((path, serde_json::to_value(v).expect("flag values serialize")));
        }
        self
    }

    fn apply(self, value: &mut Value) {
        for (path, v) in self.0 {
            let mut slot = &mut *value;
            for key in path.split('.') {
                if !slot.is_object() {
                    *slot = Value::Object(Map::new());
                }
                slot = slot
                    .as_object_mut()
                    .unwrap()
                    .entry(key)
                    .or_insert(Value::Null);
            }
            *slot = v;
        }
    }
}

/// Resolves `T` from its defaults, the optional file layer and the flags.
/// Returns the typed config and its JSON form for the manifest.
pub fn resolve<T>(file: Option<Value>, flags: Overrides) -> Result<(T, Value), ConfigError>
where
    T: Default + Serialize + DeserializeOwned,
{
    let mut value = serde_json::to_value(T::default()).expect("defaults serialize");
    if let Some(f) = file {
        merge(&mut value, f);
    }
    flags.apply(&mut value);
    let cfg: T = serde_path_to_error::deserialize(value.clone()).map_err(|e| {
        // the path already ends with the offending key, also for unknown fields
        ConfigError::new(e.path().to_string(), e.inner())
    })?;
    let echoed = serde_json::to_value(&cfg).expect("config serializes");
    Ok((cfg, echoed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields, default)]
    struct Inner {
        rate: f64,
        steps: usize,
    }

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields, default)]
    struct Outer {
        n: usize,
        inner: Inner,
    }

    #[test]
    fn layers_apply_in_order() {
        let file = serde_json::json!({"n": 5, "inner": {"rate": 0.5}});
        let mut flags = Overrides::default();
        flags.set("inner.rate", Some(0.25)).set("n", None::<usize>);
        let (cfg, echoed): (Outer, _) = resolve(Some(file), flags).unwrap();
        assert_eq!(cfg, Outer { n: 5, inner: Inner { rate: 0.25, steps: 0 } });
        assert_eq!(echoed["inner"]["rate"], 0.25);
    }

    #[test]
    fn unknown_key_is_named() {
        let file = serde_json::json!({"inner": {"rtae": 1.0}});
        let err = resolve::<Outer>(Some(file), Overrides::default()).unwrap_err();
        assert_eq!(err.path, "inner.rtae");
        assert!(err.message.contains("unknown field"));
    }

    #[test]
    fn type_error_has_path() {
        let file = serde_json::json!({"inner": {"steps": "many"}});
        let err = resolve::<Outer>(Some(file), Overrides::default()).unwrap_err();
        assert_eq!(err.path, "inner.steps");
    }

    #[test]
    fn empty_file_is_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, "  \n").unwrap();
        let layer = read_file(&p, "x").unwrap();
        let (cfg, _): (Outer, _) = resolve(layer.value, Overrides::default()).unwrap();
        assert_eq!(cfg, Outer::default());
    }

    #[test]
    fn manifest_replays_config_and_seed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.json");
        let m = serde_json::json!({"command": "gen-data", "config": {"n": 3}, "seed": 9, "outputs": []});
        std::fs::write(&p, m.to_string()).unwrap();
        let layer = read_file(&p, "gen-data").unwrap();
        assert_eq!(layer.seed, Some(9));
        assert_eq!(layer.value, Some(serde_json::json!({"n": 3})));
        assert_eq!(read_file(&p, "dopt-check").unwrap_err().path, "command");
    }
}
