//! Training configuration files and the provenance record written next to
//! every run's outputs.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crossmodal::training::{Phase, TrainConfig};

use crate::Failure;

/// A training configuration file, read as a partial overlay on the
/// phase's defaults.
#[derive(Debug, Default)]
pub struct ConfigFile {
    table: toml::Table,
}

impl ConfigFile {
    pub fn read(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Data(format!("cannot read config {}: {e}", path.display())))?;
        let table: toml::Table = text
            .parse()
            .map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))?;
        Ok(Self { table })
    }

    pub fn phase(&self) -> Result<Option<Phase>, Failure> {
        match self.table.get("phase") {
            None => Ok(None),
            Some(toml::Value::String(s)) => s.parse().map(Some).map_err(Failure::from),
            Some(other) => Err(Failure::Usage(format!("phase must be a string, got {other}"))),
        }
    }

    pub fn sets_model(&self) -> bool {
        self.table.contains_key("model")
    }

    /// Defaults of `phase` with every key of the file laid over them.
    pub fn resolve(&self, phase: Phase) -> Result<TrainConfig, Failure> {
        let base = match phase {
            Phase::Warmstart => TrainConfig::warmstart(),
            Phase::Full => TrainConfig::full(),
        };
        let mut merged = toml::Table::try_from(&base).map_err(|e| Failure::Usage(e.to_string()))?;
        overlay(&mut merged, &self.table);
        merged.insert("phase".into(), toml::Value::String(phase.to_string()));
        let cfg: TrainConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Failure::Usage(format!("config: {e}")))?;
        Ok(cfg)
    }
}

fn overlay(base: &mut toml::Table, top: &toml::Table) {
    for (k, v) in top {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => overlay(b, t),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Everything needed to repeat a run.
#[derive(Debug, Serialize)]
pub struct Provenance<T: Serialize> {
    pub command: &'static str,
    pub version: &'static str,
    pub inputs: Vec<(String, PathBuf)>,
    pub settings: T,
}

pub const PROVENANCE_FILE: &str = "run.toml";

impl<T: Serialize> Provenance<T> {
    pub fn new(command: &'static str, settings: T) -> Self {
        Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            inputs: Vec::new(),
            settings,
        }
    }

    pub fn input(mut self, role: &str, path: &Path) -> Self {
        self.inputs.push((role.to_string(), path.to_path_buf()));
        self
    }

    pub fn write(&self, dir: &Path) -> Result<(), Failure> {
        let mut table = toml::Table::new();
        table.insert("command".into(), self.command.into());
        table.insert("version".into(), self.version.into());
        let mut inputs = toml::Table::new();
        for (role, path) in &self.inputs {
            inputs.insert(role.clone(), path.display().to_string().into());
        }
        table.insert("inputs".into(), toml::Value::Table(inputs));
        let settings = toml::Value::try_from(&self.settings).map_err(|e| Failure::Usage(e.to_string()))?;
        table.insert("settings".into(), settings);
        let text = toml::to_string(&table).map_err(|e| Failure::Usage(e.to_string()))?;
        crate::write_text(&dir.join(PROVENANCE_FILE), &text)
    }
}
