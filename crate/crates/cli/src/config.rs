//! Run configuration: defaults, then a sectioned key/value file, then
//! `DIDER_<SECTION>_<KEY>` environment variables, then command-line values.

use std::fmt::Write as _;
use std::path::Path;

use dider_core::sim::SimConfig;
use dider_core::training::TrainConfig;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

pub const ENV_PREFIX: &str = "DIDER_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Ground-truth steps given before free-running prediction.
    pub burn_in: usize,
    pub horizons: Vec<usize>,
    /// `train`, `val`, `test` or `all`.
    pub split: String,
    /// Evaluate only the first this many samples of the split (0 = all).
    pub samples: usize,
    pub seed: u64,
    /// Draw durations from the posterior instead of using its mean.
    pub sample_durations: bool,
    pub chunk_size: usize,
    /// Timeline pictures written per evaluation.
    pub max_svg: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            burn_in: 5,
            horizons: vec![1, 15, 25],
            split: "test".into(),
            samples: 0,
            seed: 7,
            sample_durations: false,
            chunk_size: 64,
            max_svg: 10,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

const SECTIONS: [&str; 3] = ["sim", "train", "eval"];

impl RunConfig {
    /// Sets `section.key` from its textual form.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), CliError> {
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| CliError::Usage(format!("config key {key:?} must look like section.key")))?;
        match section {
            "sim" => set_field(&mut self.sim, section, field, raw),
            "train" => set_field(&mut self.train, section, field, raw),
            "eval" => set_field(&mut self.eval, section, field, raw),
            _ => Err(CliError::Usage(format!(
                "unknown config section {section:?} (expected one of {SECTIONS:?})"
            ))),
        }
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        let mut section: Option<String> = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(CliError::Usage(format!("{origin}:{}: unknown section [{name}]", n + 1)));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected key = value", n + 1)))?;
            let k = k.trim();
            let full = match (&section, k.contains('.')) {
                (_, true) => k.to_string(),
                (Some(s), false) => format!("{s}.{k}"),
                (None, false) => {
                    return Err(CliError::Usage(format!("{origin}:{}: key {k:?} outside a section", n + 1)))
                }
            };
            self.set(&full, v.trim())
                .map_err(|e| CliError::Usage(format!("{origin}:{}: {}", n + 1, e.message())))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies `DIDER_SECTION_KEY=value` variables from `vars`.
    pub fn apply_env(&mut self, vars: impl Iterator<Item = (String, String)>) -> Result<(), CliError> {
        let mut vars: Vec<(String, String)> = vars.filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        vars.sort();
        for (k, v) in vars {
            let rest = &k[ENV_PREFIX.len()..];
            let Some((section, field)) = rest.split_once('_') else { continue };
            let section = section.to_ascii_lowercase();
            if !SECTIONS.contains(&section.as_str()) {
                continue;
            }
            self.set(&format!("{section}.{}", field.to_ascii_lowercase()), &v)
                .map_err(|e| CliError::Usage(format!("environment {k}: {}", e.message())))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.sim.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.eval.burn_in == 0 {
            return Err(CliError::Usage("eval.burn_in must be at least 1".into()));
        }
        if self.eval.horizons.is_empty() {
            return Err(CliError::Usage("eval.horizons must not be empty".into()));
        }
        if !["train", "val", "test", "all"].contains(&self.eval.split.as_str()) {
            return Err(CliError::Usage(format!(
                "eval.split must be train, val, test or all, got {:?}",
                self.eval.split
            )));
        }
        Ok(())
    }

    /// The resolved configuration in the same format it is read from.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, value) in [
            ("sim", serde_json::to_value(&self.sim)),
            ("train", serde_json::to_value(&self.train)),
            ("eval", serde_json::to_value(&self.eval)),
        ] {
            let Ok(Value::Object(map)) = value else { continue };
            let _ = writeln!(out, "[{name}]");
            for (k, v) in map {
                let _ = writeln!(out, "{k} = {}", render(&v));
            }
            out.push('\n');
        }
        out
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(render).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

fn set_field<T: Serialize + DeserializeOwned>(
    target: &mut T,
    section: &str,
    field: &str,
    raw: &str,
) -> Result<(), CliError> {
    let Ok(Value::Object(mut map)) = serde_json::to_value(&*target) else {
        unreachable!("config sections serialise to objects")
    };
    let field = field.replace('-', "_");
    let Some(current) = map.get(&field) else {
        let known: Vec<&String> = map.keys().collect();
        return Err(CliError::Usage(format!(
            "unknown config key {section}.{field} (known keys: {known:?})"
        )));
    };
    let value = parse_value(current, raw);
    map.insert(field.clone(), value);
    *target = serde_json::from_value(Value::Object(map))
        .map_err(|e| CliError::Usage(format!("bad value {raw:?} for {section}.{field}: {e}")))?;
    Ok(())
}

/// Interprets `raw` in the light of the field's current value.
fn parse_value(current: &Value, raw: &str) -> Value {
    let raw = raw.trim().trim_matches('"');
    if raw.eq_ignore_ascii_case("none") {
        return Value::Null;
    }
    match current {
        Value::Array(_) => Value::Array(
            raw.trim_matches(|c| c == '[' || c == ']')
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(scalar)
                .collect(),
        ),
        Value::String(_) => Value::String(raw.to_string()),
        _ => scalar(raw),
    }
}

fn scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Keys and defaults, for `--help`-style listings.
pub fn describe_keys() -> String {
    let cfg = RunConfig::default();
    let mut out = String::new();
    for (name, value) in [
        ("sim", serde_json::to_value(&cfg.sim)),
        ("train", serde_json::to_value(&cfg.train)),
        ("eval", serde_json::to_value(&cfg.eval)),
    ] {
        if let Ok(Value::Object(map)) = value {
            let m: &Map<String, Value> = &map;
            for (k, v) in m {
                let _ = writeln!(out, "  {name}.{k} = {}", render(v));
            }
        }
    }
    out
}
