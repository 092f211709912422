//! Run configuration: a named profile overlaid with an optional TOML file.
//!
//! The file may set `profile = "<name>"` and any of the tables `[model]`,
//! `[primitives]`, `[pretrain]` and `[finetune]`. Keys in a table replace
//! the profile's value for that key; everything else keeps the profile
//! default.

use std::path::Path;

use pachubert_core::primitives::PrimitiveConfig;
use pachubert_model::ModelConfig;
use pachubert_train::{Stage, StageConfig};
use toml::{Table, Value};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub primitives: PrimitiveConfig,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
}

const SECTIONS: [&str; 4] = ["model", "primitives", "pretrain", "finetune"];

fn bad(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn table_of<T: serde::Serialize>(v: &T) -> Table {
    Table::try_from(v).expect("configs serialise to tables")
}

impl RunConfig {
    pub fn profile(name: &str) -> Result<Self> {
        let unknown = || CliError::Config(format!("unknown profile {name:?}; expected toy or full"));
        Ok(Self {
            model: ModelConfig::profile(name).ok_or_else(unknown)?,
            primitives: PrimitiveConfig::default(),
            pretrain: StageConfig::profile(Stage::Pretrain, name).ok_or_else(unknown)?,
            finetune: StageConfig::profile(Stage::Finetune, name).ok_or_else(unknown)?,
        })
    }

    pub fn parse(text: &str, default_profile: &str) -> Result<Self> {
        let mut file: Table = text.parse().map_err(bad)?;
        let profile = match file.remove("profile") {
            Some(Value::String(s)) => s,
            Some(other) => return Err(bad(format!("profile must be a string, found {other}"))),
            None => default_profile.to_string(),
        };
        let base = Self::profile(&profile)?;
        let mut merged = Table::new();
        merged.insert("model".into(), Value::Table(table_of(&base.model)));
        merged.insert("primitives".into(), Value::Table(table_of(&base.primitives)));
        merged.insert("pretrain".into(), Value::Table(table_of(&base.pretrain)));
        merged.insert("finetune".into(), Value::Table(table_of(&base.finetune)));
        for (key, value) in file {
            if !SECTIONS.contains(&key.as_str()) {
                return Err(bad(format!("unknown config section {key:?}")));
            }
            let Value::Table(overlay) = value else {
                return Err(bad(format!("[{key}] must be a table")));
            };
            let Some(Value::Table(target)) = merged.get_mut(&key) else { unreachable!() };
            target.extend(overlay);
        }
        let section = |k: &str| toml::to_string(&merged[k]).expect("tables serialise");
        let cfg = Self {
            model: ModelConfig::from_toml(&section("model"))?,
            primitives: toml::from_str(&section("primitives")).map_err(bad)?,
            pretrain: StageConfig::from_toml(&section("pretrain"))?,
            finetune: StageConfig::from_toml(&section("finetune"))?,
        };
        if cfg.pretrain.stage != Stage::Pretrain || cfg.finetune.stage != Stage::Finetune {
            return Err(bad("[pretrain] and [finetune] must keep their stage"));
        }
        Ok(cfg)
    }

    /// Loads `path` over `profile`, or the bare profile without a file.
    pub fn load(path: Option<&Path>, profile: &str) -> Result<Self> {
        match path {
            None => Self::profile(profile),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => CliError::Config(format!("config {} not found", p.display())),
                    _ => CliError::Config(format!("config {}: {e}", p.display())),
                })?;
                Self::parse(&text, profile)
            }
        }
    }

    pub fn to_toml(&self) -> String {
        let mut t = Table::new();
        t.insert("model".into(), Value::Table(table_of(&self.model)));
        t.insert("primitives".into(), Value::Table(table_of(&self.primitives)));
        t.insert("pretrain".into(), Value::Table(table_of(&self.pretrain)));
        t.insert("finetune".into(), Value::Table(table_of(&self.finetune)));
        toml::to_string(&t).expect("tables serialise")
    }
}
