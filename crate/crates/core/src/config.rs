//! Run configuration files (TOML).
//!
//! Unknown keys are rejected. Errors point at the offending line where one
//! can be identified.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::distributed::{BnMode, EngineConfig, ShardPlan};
use crate::error::{Error, Result};
use crate::model::GeneratorConfig;
use crate::optim::OptimizerConfig;
use crate::oracle::FdmConfig;
use crate::pde_loss::LossConfig;
use crate::scalar::Precision;

pub const CONFIG_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "format_version")]
    pub format: u32,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub transport: TransportConfig,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn format_version() -> u32 {
    CONFIG_FORMAT
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub resolution: usize,
    #[serde(default = "default_base_resolution")]
    pub base_resolution: usize,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_channel_floor")]
    pub channel_floor: usize,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
}

fn default_base_resolution() -> usize {
    8
}
fn default_base_channels() -> usize {
    32
}
fn default_channel_floor() -> usize {
    8
}
fn default_bn_momentum() -> f64 {
    crate::autodiff::batchnorm::DEFAULT_MOMENTUM
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub c_min: f64,
    pub c_max: f64,
    pub samples: usize,
    pub batch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub batchnorm: BnMode,
    #[serde(default = "default_timeout")]
    pub collective_timeout_sec: f64,
}

fn default_workers() -> usize {
    1
}
fn default_timeout() -> f64 {
    crate::distributed::DEFAULT_TIMEOUT.as_secs_f64()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TransportConfig {
    #[default]
    Inproc,
    /// One process per rank; `addresses[r]` is where rank `r` listens.
    Tcp { addresses: Vec<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    #[serde(default)]
    pub nx: Option<usize>,
    #[serde(default = "default_cfl")]
    pub cfl: f64,
}

fn default_cfl() -> f64 {
    crate::oracle::DEFAULT_CFL
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            nx: None,
            cfl: default_cfl(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    /// Keep a numbered checkpoint every this many epochs (0: only the latest).
    #[serde(default)]
    pub keep_every: usize,
}

fn default_dir() -> PathBuf {
    PathBuf::from("run")
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            keep_every: 0,
        }
    }
}

/// 1-based line of `key` inside `[section]`, if it appears literally.
fn line_of(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            current = name.trim().to_string();
            continue;
        }
        if current == section {
            if let Some((k, _)) = t.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let at = e
                .span()
                .map(|s| format!("line {}: ", text[..s.start.min(text.len())].matches('\n').count() + 1))
                .unwrap_or_default();
            Error::Config(format!("{at}{}", e.message()))
        })?;
        cfg.validate().map_err(|e| match e {
            Error::Config(msg) => Error::Config(match locate(text, &msg) {
                Some(line) => format!("line {line}: {msg}"),
                None => msg,
            }),
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != CONFIG_FORMAT {
            return Err(Error::Config(format!(
                "[root] format: unsupported config format {} (expected {CONFIG_FORMAT})",
                self.format
            )));
        }
        self.generator_config().validate().map_err(|e| section_err("model", "resolution", e))?;
        if !(self.model.bn_momentum > 0.0 && self.model.bn_momentum <= 1.0) {
            return Err(Error::Config(format!(
                "[model] bn_momentum: must lie in (0, 1], got {}",
                self.model.bn_momentum
            )));
        }
        let d = &self.data;
        if !(d.c_min.is_finite() && d.c_max.is_finite() && d.c_min <= d.c_max) {
            return Err(Error::Config(format!(
                "[data] c_min: range [{}, {}] is empty or not finite",
                d.c_min, d.c_max
            )));
        }
        self.shard_plan().map_err(|e| section_err("data", "batch", e))?;
        if self.train.epochs == 0 {
            return Err(Error::Config("[train] epochs: must be at least 1".into()));
        }
        if !(self.train.collective_timeout_sec > 0.0 && self.train.collective_timeout_sec.is_finite()) {
            return Err(Error::Config("[train] collective_timeout_sec: must be positive".into()));
        }
        self.loss.validate().map_err(|e| section_err("loss", "lambda", e))?;
        self.optimizer.validate().map_err(|e| section_err("optimizer", "kind", e))?;
        self.fdm_config()
            .validate(self.model.resolution)
            .map_err(|e| section_err("oracle", "cfl", e))?;
        if let TransportConfig::Tcp { addresses } = &self.transport {
            if addresses.len() != self.train.workers {
                return Err(Error::Config(format!(
                    "[transport] addresses: {} addresses for {} workers",
                    addresses.len(),
                    self.train.workers
                )));
            }
            self.socket_addrs()?;
        }
        Ok(())
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            resolution: self.model.resolution,
            base_resolution: self.model.base_resolution,
            base_channels: self.model.base_channels,
            channel_floor: self.model.channel_floor,
            seed: self.train.seed,
        }
    }

    pub fn shard_plan(&self) -> Result<ShardPlan> {
        ShardPlan::new(self.data.samples, self.data.batch, self.train.workers)
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            loss: self.loss,
            batchnorm: self.train.batchnorm,
            optimizer: self.optimizer,
        }
    }

    pub fn fdm_config(&self) -> FdmConfig {
        FdmConfig {
            nx: self.oracle.nx,
            cfl: self.oracle.cfl,
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.train.collective_timeout_sec)
    }

    pub fn socket_addrs(&self) -> Result<Vec<SocketAddr>> {
        match &self.transport {
            TransportConfig::Inproc => Ok(Vec::new()),
            TransportConfig::Tcp { addresses } => addresses
                .iter()
                .map(|a| {
                    a.parse().map_err(|e| {
                        Error::Config(format!("[transport] addresses: `{a}` is not host:port ({e})"))
                    })
                })
                .collect(),
        }
    }

    /// The configuration with sample and batch counts replaced by their
    /// shard-plan adjusted values; running it reproduces this run.
    pub fn effective(&self) -> Result<Self> {
        let plan = self.shard_plan()?;
        let mut out = self.clone();
        out.data.samples = plan.samples;
        out.data.batch = plan.batch;
        Ok(out)
    }
}

fn section_err(section: &str, key: &str, e: Error) -> Error {
    match e {
        Error::Config(msg) => Error::Config(format!("[{section}] {key}: {msg}")),
        other => Error::Config(format!("[{section}] {key}: {other}")),
    }
}

/// Finds the line named by a `[section] key:` prefix in a validation message.
fn locate(text: &str, msg: &str) -> Option<usize> {
    let rest = msg.strip_prefix('[')?;
    let (section, rest) = rest.split_once(']')?;
    let key = rest.trim_start().split(':').next()?.trim();
    line_of(text, section, key).or_else(|| {
        if section == "root" {
            line_of(text, "", key)
        } else {
            None
        }
    })
}
