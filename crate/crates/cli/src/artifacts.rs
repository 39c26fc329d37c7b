//! On-disk formats shared by the commands: scenario and config loading,
//! checkpoints and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use coopt_core::coopt::{Models, TrainConfig};
use coopt_core::envgen::{schema_diff, schema_doc, schema_hash};
use coopt_core::library;
use coopt_core::world::{ObstacleLayout, Scenario, Task};
use coopt_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// A built-in id, or a path to a scenario JSON file when one exists there.
pub fn load_scenario(spec: &str) -> Result<Scenario> {
    let path = Path::new(spec);
    let sc = if path.is_file() {
        Scenario::from_json(&fs::read_to_string(path)?)?
    } else {
        library::builtin(spec)?
    };
    sc.validate()?;
    Ok(sc)
}

pub fn scenario_hash(sc: &Scenario) -> String {
    sha256_hex(sc.to_json().as_bytes())
}

pub fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    Ok(cfg)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<String> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, &text)?;
    Ok(sha256_hex(text.as_bytes()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Trained models plus what is needed to check them against a scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub scenario_id: String,
    pub schema_hash: String,
    pub schema: serde_json::Value,
    pub config_hash: String,
    pub config: TrainConfig,
    /// Completed outer iterations.
    pub iteration: usize,
    pub models: Models,
}

impl Checkpoint {
    pub fn new(
        scenario: &Scenario,
        config: &TrainConfig,
        iteration: usize,
        models: &Models,
    ) -> Self {
        Self {
            scenario_id: scenario.id.clone(),
            schema_hash: schema_hash(scenario),
            schema: schema_doc(scenario),
            config_hash: config.hash(),
            config: config.clone(),
            iteration,
            models: models.clone(),
        }
    }

    /// Refuses scenarios whose agent count or templates differ from training.
    pub fn check_scenario(&self, scenario: &Scenario) -> Result<()> {
        if schema_hash(scenario) == self.schema_hash {
            return Ok(());
        }
        let diff = schema_diff(&self.schema, &schema_doc(scenario));
        Err(Error::Config(format!(
            "checkpoint was trained on scenario '{}' with a different schema than '{}':\n{}",
            self.scenario_id,
            scenario.id,
            diff.join("\n")
        )))
    }
}

/// Everything needed to rerun a command and check its outputs bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub command_line: Vec<String>,
    pub scenario_id: Option<String>,
    pub scenario_hash: Option<String>,
    pub config_hash: String,
    /// Effective settings after flags were applied.
    pub config: serde_json::Value,
    pub seed: u64,
    pub threads: usize,
    /// Output path relative to the run directory mapped to its sha256.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(
        command: &str,
        scenario: Option<&Scenario>,
        config: serde_json::Value,
        seed: u64,
        threads: usize,
    ) -> Self {
        Self {
            command: command.into(),
            command_line: std::env::args().collect(),
            scenario_id: scenario.map(|s| s.id.clone()),
            scenario_hash: scenario.map(scenario_hash),
            config_hash: sha256_hex(config.to_string().as_bytes()),
            config,
            seed,
            threads,
            outputs: BTreeMap::new(),
        }
    }

    pub fn add_output(&mut self, root: &Path, path: &Path, hash: String) {
        let rel = path.strip_prefix(root).unwrap_or(path);
        self.outputs
            .insert(rel.to_string_lossy().replace('\\', "/"), hash);
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        write_json(&path, self)?;
        Ok(path)
    }
}

/// Task and layout written next to an exported episode CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSidecar {
    pub scenario_id: String,
    pub task: Task,
    pub layout: ObstacleLayout,
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}
