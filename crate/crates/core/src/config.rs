//! Experiment configuration: one TOML file per run, with `key=value`
//! overrides applied on top.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::CropRect;
use crate::losses::{CycleNorm, LossWeights};
use crate::netspec::{parse_stack, synthesize_stack, ConvLayerSpec, ConvStackSpec, GeneratorSpec};
use crate::optim::OptimizerConfig;

/// Default large-field discriminator stack (receptive field 97).
pub const STACK_RF97: &str = "k3s2p1,k4s2p2,k3s2p1,k3s2p1,k5s1p2";
/// Default small-field discriminator stack (receptive field 42).
pub const STACK_RF42: &str = "k4s2p2,k4s2p2,k3s2p1,k4s1p2";

const SYNTH_MAX_LAYERS: usize = 7;

fn default_image_size() -> usize {
    128
}
fn default_batch_size() -> usize {
    1
}
fn default_interval() -> u64 {
    1000
}
fn default_one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    /// One or two stacks judging domain X (the `F` direction).
    pub x: Vec<String>,
    /// One or two stacks judging domain Y (the `G` direction).
    pub y: Vec<String>,
    pub base_channels: usize,
    pub max_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        let pair = vec![STACK_RF97.to_string(), STACK_RF42.to_string()];
        Self {
            x: pair.clone(),
            y: pair,
            base_channels: 64,
            max_channels: 512,
        }
    }
}

/// Resolves one stack entry: either layer tokens or `rf:<n>`, which is
/// synthesized.
pub fn resolve_stack(entry: &str) -> Result<(Vec<ConvLayerSpec>, Option<usize>)> {
    match entry.trim().strip_prefix("rf:") {
        Some(n) => {
            let target: usize = n
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad receptive field target {entry:?}")))?;
            Ok((synthesize_stack(target, SYNTH_MAX_LAYERS)?, Some(target)))
        }
        None => Ok((parse_stack(entry)?, None)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub data_x: PathBuf,
    pub data_y: PathBuf,
    pub output_dir: PathBuf,
    pub total_steps: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_interval")]
    pub checkpoint_interval: u64,
    #[serde(default)]
    pub crop_x: Option<CropRect>,
    #[serde(default)]
    pub crop_y: Option<CropRect>,
    /// Discriminator updates per generator update.
    #[serde(default = "default_one")]
    pub disc_updates_per_step: usize,
    /// Train the two discriminators of a direction on the average of
    /// their losses instead of each on its own.
    #[serde(default)]
    pub average_d_losses: bool,
    #[serde(default)]
    pub cycle_norm: CycleNorm,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub discriminators: DiscriminatorConfig,
    #[serde(default)]
    pub generator: GeneratorSpec,
}

impl TrainConfig {
    /// Minimal config with defaults for everything but the paths.
    pub fn new(data_x: impl Into<PathBuf>, data_y: impl Into<PathBuf>, output_dir: impl Into<PathBuf>, total_steps: u64) -> Self {
        Self {
            data_x: data_x.into(),
            data_y: data_y.into(),
            output_dir: output_dir.into(),
            total_steps,
            seed: 0,
            image_size: default_image_size(),
            batch_size: 1,
            checkpoint_interval: default_interval(),
            crop_x: None,
            crop_y: None,
            disc_updates_per_step: 1,
            average_d_losses: false,
            cycle_norm: CycleNorm::L1,
            optimizer: OptimizerConfig::default(),
            loss: LossWeights::default(),
            discriminators: DiscriminatorConfig::default(),
            generator: GeneratorSpec::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path`, applies `key=value` overrides (dotted keys address
    /// nested tables) and validates the result.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = if overrides.is_empty() {
            Self::parse(&text)
        } else {
            let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
            for o in overrides {
                apply_override(&mut table, o)?;
            }
            let merged = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
            Self::parse(&merged)
        }
        .map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            image_size: self.image_size,
            ..self.generator.clone()
        }
    }

    fn stacks(&self, entries: &[String]) -> Result<Vec<ConvStackSpec>> {
        entries
            .iter()
            .map(|e| {
                let (layers, target) = resolve_stack(e)?;
                let spec = ConvStackSpec::patch_discriminator(
                    &layers,
                    3,
                    self.discriminators.base_channels,
                    self.discriminators.max_channels,
                );
                Ok(match target {
                    Some(t) => spec.with_target(t),
                    None => spec,
                })
            })
            .collect()
    }

    /// Discriminator specs for domain Y (judging `G`'s output).
    pub fn stacks_y(&self) -> Result<Vec<ConvStackSpec>> {
        self.stacks(&self.discriminators.y)
    }

    /// Discriminator specs for domain X (judging `F`'s output).
    pub fn stacks_x(&self) -> Result<Vec<ConvStackSpec>> {
        self.stacks(&self.discriminators.x)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.total_steps < 1 {
            return Err(Error::Config("total_steps must be ≥ 1".into()));
        }
        if self.checkpoint_interval < 1 {
            return Err(Error::Config("checkpoint_interval must be ≥ 1".into()));
        }
        if self.disc_updates_per_step < 1 {
            return Err(Error::Config("disc_updates_per_step must be ≥ 1".into()));
        }
        if self.image_size < 1 {
            return Err(Error::Config("image_size must be ≥ 1".into()));
        }
        if self.discriminators.base_channels < 1 || self.discriminators.max_channels < 1 {
            return Err(Error::Config("discriminator channel widths must be ≥ 1".into()));
        }
        for (name, list) in [("discriminators.x", &self.discriminators.x), ("discriminators.y", &self.discriminators.y)] {
            if !(1..=2).contains(&list.len()) {
                return Err(Error::Config(format!("{name} must list one or two stacks, got {}", list.len())));
            }
        }
        for spec in self.stacks_x()?.iter().chain(&self.stacks_y()?) {
            spec.validate()?;
            spec.output_map_size(self.image_size)?;
        }
        self.generator_spec().validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form of the config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Sets `key=value` in `table`. The value is read as a TOML value and
/// falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} must look like key=value")))?;
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().unwrap();
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key {key:?}: {p:?} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
