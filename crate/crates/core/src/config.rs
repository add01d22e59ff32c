//! Run configuration: a TOML file with dotted keys (`train.lr_lm = 0.003`)
//! plus `key=value` overrides, resolved once and echoed into every
//! artifact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::scenegen::RenderConfig;
use crate::spatial::SpatialBlockConfig;
use crate::training::TrainConfig;

pub const TOOL_VERSION: &str = concat!("ormllm ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub scenes: usize,
    pub views: usize,
    pub render: RenderConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenes: 300,
            views: 3,
            render: RenderConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub qa_max_new_tokens: usize,
    pub sgg_max_new_tokens: usize,
    /// 1 is greedy decoding.
    pub beam: usize,
    /// Keep a second Stage 2 checkpoint chosen by validation EM@1.
    pub select_on_val: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            qa_max_new_tokens: 8,
            sgg_max_new_tokens: 160,
            beam: 1,
            select_on_val: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; overrides `train.seed`.
    pub seed: u64,
    pub data: DataConfig,
    pub spatial: SpatialBlockConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn insert_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("bad key `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn table_has(table: &toml::Table, key: &str) -> bool {
    let mut cur = table;
    let mut parts = key.split('.').peekable();
    while let Some(p) = parts.next() {
        match cur.get(p) {
            None => return false,
            Some(toml::Value::Table(t)) if parts.peek().is_some() => cur = t,
            Some(_) => return parts.peek().is_none(),
        }
    }
    false
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        toml::Value::Float(f) => out.push((prefix.to_string(), format!("{f:?}"))),
        toml::Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

impl RunConfig {
    /// File values (if any), then overrides, then validation.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        Self::load_over(&[], path, overrides)
    }

    /// Like [`RunConfig::load`], starting from `config.*` echo pairs (as
    /// stored in checkpoints) instead of the defaults.
    pub fn load_over(base: &[(String, String)], path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in base {
            if let Some(key) = k.strip_prefix("config.") {
                if !table_has(&table, key) {
                    insert_dotted(&mut table, key, parse_value(v))?;
                }
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            insert_dotted(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.spatial.validate()?;
        self.train.validate()?;
        if self.data.scenes == 0 || self.data.views == 0 {
            return Err(Error::Config("data.scenes and data.views must be >= 1".into()));
        }
        if self.eval.beam == 0 {
            return Err(Error::Config("eval.beam must be >= 1".into()));
        }
        if (self.data.render.height, self.data.render.width)
            != (self.spatial.image_height, self.spatial.image_width)
        {
            return Err(Error::Config("data.render size must match spatial.image_height/width".into()));
        }
        Ok(())
    }

    /// Sorted `config.<dotted key>` pairs plus the tool version.
    pub fn echo(&self) -> Vec<(String, String)> {
        let v = toml::Value::try_from(self).expect("config serializes");
        let mut out = vec![("tool".to_string(), TOOL_VERSION.to_string())];
        let mut flat = Vec::new();
        flatten("", &v, &mut flat);
        flat.sort();
        out.extend(flat.into_iter().map(|(k, v)| (format!("config.{k}"), v)));
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
