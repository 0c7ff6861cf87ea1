//! Run configuration files and provenance.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::commands::Usage;

fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Overlays the config file on `defaults`; flags are applied by the caller afterwards.
pub fn resolve<T: Serialize + DeserializeOwned>(defaults: &T, file: Option<&Path>) -> Result<T> {
    let mut v = serde_json::to_value(defaults)?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Value = serde_json::from_str(&text).map_err(|e| Usage(format!("config {}: {e}", path.display())))?;
        if !cfg.is_object() {
            return Err(Usage(format!("config {} must hold a JSON object", path.display())).into());
        }
        merge(&mut v, cfg);
    }
    serde_json::from_value(v).map_err(|e| Usage(format!("invalid settings: {e}")).into())
}

#[derive(Serialize)]
struct Provenance<'a, T> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: &'a T,
}

/// Writes `run_config.json` with the resolved settings and tool version.
pub fn write_provenance<T: Serialize>(dir: &Path, command: &str, cfg: &T) -> Result<()> {
    let p = Provenance {
        tool: "metriflow",
        version: env!("CARGO_PKG_VERSION"),
        command,
        config: cfg,
    };
    write_json(&dir.join("run_config.json"), &p)
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, Debug, PartialEq)]
    struct C {
        a: u32,
        b: String,
        inner: Inner,
    }

    #[derive(Serialize, Deserialize, Debug, PartialEq)]
    struct Inner {
        x: f64,
        y: f64,
    }

    #[test]
    fn file_overlays_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        std::fs::write(&f, r#"{"a": 5, "b": "file", "inner": {"x": 2.0}}"#).unwrap();
        let d = C {
            a: 1,
            b: "default".into(),
            inner: Inner { x: 0.0, y: 9.0 },
        };
        let c = resolve(&d, Some(&f)).unwrap();
        assert_eq!(
            c,
            C {
                a: 5,
                b: "file".into(),
                inner: Inner { x: 2.0, y: 9.0 }
            }
        );
    }

    #[test]
    fn bad_config_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        std::fs::write(&f, "[1, 2]").unwrap();
        let d = Inner { x: 0.0, y: 0.0 };
        let e = resolve(&d, Some(&f)).unwrap_err();
        assert!(e.downcast_ref::<Usage>().is_some());
    }
}
