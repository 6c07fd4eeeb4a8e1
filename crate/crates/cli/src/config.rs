use std::path::{Path, PathBuf};

use qatten_core::envs::{load_env, EnvSpec};
use qatten_core::trainer::TrainConfig;
use qatten_core::LabError;
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

/// Keys handled by the runner; every other key belongs to the training
/// config.
const RUN_KEYS: [&str; 4] = ["env", "output_dir", "export_attention", "attention_episodes"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub source: PathBuf,
    /// Environment file, resolved against the config's directory.
    pub env: PathBuf,
    /// Run directory, resolved against the output root.
    pub output_dir: PathBuf,
    pub export_attention: bool,
    pub attention_episodes: usize,
    pub train: TrainConfig,
}

fn parse_err(path: &Path, field: &str, reason: impl Into<String>) -> CliError {
    LabError::Parse {
        path: path.to_path_buf(),
        field: field.into(),
        reason: reason.into(),
    }
    .into()
}

fn config_err(key: &str, reason: impl Into<String>) -> CliError {
    LabError::Config {
        key: key.into(),
        reason: reason.into(),
    }
    .into()
}

/// Reads and validates a run config; unknown keys are rejected and
/// defaults filled in.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| parse_err(path, "<root>", e.to_string()))?;
    let Value::Object(mut obj) = value else {
        return Err(parse_err(path, "<root>", "expected a JSON object"));
    };
    let base = path.parent().unwrap_or(Path::new("."));

    let env = match obj.remove("env") {
        Some(Value::String(s)) => base.join(s),
        Some(_) => return Err(parse_err(path, "env", "expected a file path")),
        None => return Err(parse_err(path, "env", "missing")),
    };
    if !env.is_file() {
        return Err(parse_err(path, "env", format!("file not found: {}", env.display())));
    }
    let output_dir = match obj.remove("output_dir") {
        Some(Value::String(s)) => PathBuf::from(s),
        Some(_) => return Err(parse_err(path, "output_dir", "expected a directory path")),
        None => {
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned());
            Path::new("runs").join(stem.unwrap_or_else(|| "run".into()))
        }
    };
    let output_dir = if output_dir.is_absolute() {
        output_dir
    } else {
        crate::output_root().join(output_dir)
    };
    let export_attention = match obj.remove("export_attention") {
        None => false,
        Some(Value::Bool(b)) => b,
        Some(_) => return Err(parse_err(path, "export_attention", "expected true or false")),
    };
    let attention_episodes = match obj.remove("attention_episodes") {
        None => 1,
        Some(v) => v
            .as_u64()
            .filter(|&k| k >= 1)
            .ok_or_else(|| parse_err(path, "attention_episodes", "expected an integer >= 1"))?
            as usize,
    };
    let train = train_config(obj)?;
    Ok(RunConfig {
        source: path.to_path_buf(),
        env,
        output_dir,
        export_attention,
        attention_episodes,
        train,
    })
}

fn train_config(obj: Map<String, Value>) -> Result<TrainConfig> {
    let known = match serde_json::to_value(TrainConfig::default()) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("training config serializes to an object"),
    };
    if let Some(key) = obj.keys().find(|k| !known.contains_key(*k)) {
        let mut all: Vec<&str> = known.keys().map(String::as_str).chain(RUN_KEYS).collect();
        all.sort_unstable();
        return Err(config_err(key, format!("unknown key; expected one of {}", all.join(", "))));
    }
    let mut merged = known.clone();
    merged.extend(obj.clone());
    let train: TrainConfig = serde_json::from_value(Value::Object(merged)).map_err(|e| {
        // attribute the failure to the first key that fails on its own
        let key = obj
            .iter()
            .find(|(k, v)| {
                let mut probe = known.clone();
                probe.insert((*k).clone(), (*v).clone());
                serde_json::from_value::<TrainConfig>(Value::Object(probe)).is_err()
            })
            .map_or("<root>", |(k, _)| k.as_str());
        config_err(key, e.to_string())
    })?;
    let parsed = serde_json::to_value(&train).expect("training config serializes");
    if let Some(key) = unknown_key(&Value::Object(obj), &parsed, "") {
        return Err(config_err(&key, "unknown key"));
    }
    train.validate()?;
    Ok(train)
}

/// First key path present in `input` but absent from the re-serialized
/// config (serde ignores extra fields on unit enum variants).
fn unknown_key(input: &Value, parsed: &Value, prefix: &str) -> Option<String> {
    let (Value::Object(i), Value::Object(p)) = (input, parsed) else {
        return None;
    };
    i.iter().find_map(|(k, v)| {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match p.get(k) {
            None => Some(path),
            Some(pv) => unknown_key(v, pv, &path),
        }
    })
}

impl RunConfig {
    pub fn load_env(&self) -> Result<EnvSpec> {
        Ok(load_env(&self.env)?)
    }

    /// The resolved config as written into the run directory.
    pub fn to_value(&self) -> Value {
        let mut v = serde_json::to_value(&self.train).expect("training config serializes");
        let obj = v.as_object_mut().expect("object");
        obj.insert("env".into(), Value::String(self.env.display().to_string()));
        obj.insert("output_dir".into(), Value::String(self.output_dir.display().to_string()));
        obj.insert("export_attention".into(), Value::Bool(self.export_attention));
        obj.insert("attention_episodes".into(), Value::from(self.attention_episodes));
        v
    }
}
