//! Run configuration: a flat JSON file with dotted keys (`model.embed_dim`,
//! `train.lr`, `data.dir`, ...) merged with dotted command-line overrides.
//! The merged, effective configuration is serialized into every run
//! directory before any work starts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cmt_core::model::{ModelConfig, ModelKind};
use cmt_core::train::TrainConfig;
use cmt_core::{Error, Result};
use serde_json::Value;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data_dir: Option<PathBuf>,
    pub folds_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub jobs: usize,
    /// The flat key/value view, for the effective-config snapshot.
    flat: BTreeMap<String, Value>,
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Split `key.subkey` keys into nested JSON objects.
fn nest(flat: &BTreeMap<String, Value>) -> Result<serde_json::Map<String, Value>> {
    let mut root = serde_json::Map::new();
    for (key, value) in flat {
        let mut cursor = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            if i + 1 == parts.len() {
                cursor.insert(part.to_string(), value.clone());
            } else {
                let slot = cursor
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(serde_json::Map::new()));
                cursor = slot.as_object_mut().ok_or_else(|| {
                    Error::Config(format!("config key '{key}' nests under a scalar"))
                })?;
            }
        }
    }
    Ok(root)
}

impl RunConfig {
    /// Load from an optional file, then apply `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut flat: BTreeMap<String, Value> = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Input(format!("cannot read config {}: {e}", path.display())))?;
            let file: BTreeMap<String, Value> = serde_json::from_str(&text)
                .map_err(|e| Error::Parse(format!("config {}: {e}", path.display())))?;
            for (k, v) in file {
                if v.is_object() {
                    return Err(Error::Config(format!(
                        "config key '{k}' is an object; the file must be flat with dotted keys"
                    )));
                }
                flat.insert(k, v);
            }
        }
        for (k, v) in overrides {
            flat.insert(k.clone(), parse_value(v));
        }
        Self::from_flat(flat)
    }

    fn from_flat(flat: BTreeMap<String, Value>) -> Result<Self> {
        let nested = nest(&flat)?;
        let empty = serde_json::Map::new();
        let model_section = nested
            .get("model")
            .and_then(Value::as_object)
            .unwrap_or(&empty);

        let kind: ModelKind = match model_section.get("kind") {
            Some(Value::String(s)) => s.parse()?,
            Some(other) => {
                return Err(Error::Config(format!(
                    "model.kind must be a string, got {other}"
                )))
            }
            None => ModelKind::Sequence,
        };
        let mut model_map = model_section.clone();
        model_map.remove("kind");
        let model: ModelConfig = serde_json::from_value(Value::Object(model_map))
            .map_err(|e| Error::Config(format!("model section: {e}")))?;
        model.validate()?;

        let train: TrainConfig = match nested.get("train") {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| Error::Config(format!("train section: {e}")))?,
            None => TrainConfig::default(),
        };
        train.validate()?;

        let get_path = |section: &str, key: &str| -> Result<Option<PathBuf>> {
            match nested.get(section).and_then(|s| s.get(key)) {
                None => Ok(None),
                Some(Value::String(s)) => Ok(Some(PathBuf::from(s))),
                Some(other) => Err(Error::Config(format!(
                    "{section}.{key} must be a string, got {other}"
                ))),
            }
        };
        let data_dir = match get_path("data", "dir")? {
            Some(p) => Some(p),
            None => std::env::var_os("CMT_DATA_DIR").map(PathBuf::from),
        };
        let folds_path = get_path("data", "folds")?;
        let out_dir = get_path("run", "out_dir")?;
        let jobs = match nested.get("run").and_then(|s| s.get("jobs")) {
            None => 0,
            Some(v) => v
                .as_u64()
                .ok_or_else(|| Error::Config("run.jobs must be an integer".into()))?
                as usize,
        };

        Ok(Self {
            kind,
            model,
            train,
            data_dir,
            folds_path,
            out_dir,
            jobs,
            flat,
        })
    }

    /// The flat effective configuration, with resolved sections re-flattened
    /// so defaults are visible, plus the artifact version.
    pub fn effective(&self) -> Result<Value> {
        let mut flat = self.flat.clone();
        let model_json = serde_json::to_value(&self.model)?;
        for (k, v) in model_json.as_object().unwrap() {
            flat.insert(format!("model.{k}"), v.clone());
        }
        flat.insert("model.kind".into(), Value::String(self.kind.to_string()));
        let train_json = serde_json::to_value(&self.train)?;
        for (k, v) in train_json.as_object().unwrap() {
            flat.insert(format!("train.{k}"), v.clone());
        }
        if let Some(d) = &self.data_dir {
            flat.insert("data.dir".into(), Value::String(d.display().to_string()));
        }
        if let Some(d) = &self.folds_path {
            flat.insert("data.folds".into(), Value::String(d.display().to_string()));
        }
        if let Some(d) = &self.out_dir {
            flat.insert("run.out_dir".into(), Value::String(d.display().to_string()));
        }
        flat.insert("run.jobs".into(), Value::from(self.jobs as u64));
        flat.insert(
            "artifact.version".into(),
            Value::String(cmt_core::VERSION.to_string()),
        );
        Ok(Value::Object(flat.into_iter().collect()))
    }

    pub fn write_effective(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("effective_config.json"),
            serde_json::to_string_pretty(&self.effective()?)? + "\n",
        )?;
        Ok(())
    }
}

/// Pull `--section.key [value]` / `--section.key=value` tokens (any flag name
/// containing a dot) out of the raw arguments so clap never sees them.
pub fn extract_dotted_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        let dotted = arg
            .strip_prefix("--")
            .filter(|name| name.split('=').next().unwrap_or("").contains('.'));
        match dotted {
            Some(name) => {
                if let Some((key, value)) = name.split_once('=') {
                    overrides.push((key.to_string(), value.to_string()));
                } else {
                    let value = args.get(i + 1).ok_or_else(|| {
                        Error::Config(format!("override --{name} is missing a value"))
                    })?;
                    overrides.push((name.to_string(), value.clone()));
                    i += 1;
                }
            }
            None => rest.push(arg.clone()),
        }
        i += 1;
    }
    Ok((rest, overrides))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_are_extracted_and_applied() {
        let args: Vec<String> = ["cmt", "train", "--train.lr", "0.01", "--fold", "2", "--model.embed_dim=64"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let (rest, overrides) = extract_dotted_overrides(args).unwrap();
        assert_eq!(rest, vec!["cmt", "train", "--fold", "2"]);
        assert_eq!(overrides.len(), 2);

        let cfg = RunConfig::load(None, &overrides).unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.model.embed_dim, 64);
    }

    #[test]
    fn nested_file_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"model": {"embed_dim": 64}}"#).unwrap();
        assert!(RunConfig::load(Some(&path), &[]).is_err());
    }

    #[test]
    fn flat_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(
            &path,
            r#"{"model.kind": "epoch", "model.embed_dim": 32, "model.heads": 4,
               "model.ff_dim": 64, "train.lr": 0.002, "run.jobs": 3}"#,
        )
        .unwrap();
        let cfg = RunConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(cfg.kind, ModelKind::Epoch);
        assert_eq!(cfg.model.embed_dim, 32);
        assert_eq!(cfg.train.lr, 0.002);
        assert_eq!(cfg.jobs, 3);
        let eff = cfg.effective().unwrap();
        assert_eq!(eff["model.embed_dim"], 32);
        assert!(eff["artifact.version"].is_string());
        // defaults are materialized
        assert_eq!(eff["train.batch_size"], 32);
    }

    #[test]
    fn invalid_model_section_fails_validation() {
        let cfg = RunConfig::load(None, &[("model.embed_dim".into(), "63".into())]);
        assert!(cfg.is_err());
    }
}
