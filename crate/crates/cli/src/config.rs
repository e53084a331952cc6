//! Run configuration: a human-editable TOML file covering every tunable.
//! Each command resolves its file + flag overrides into a full config and
//! writes the result next to its outputs, so any run can be reproduced from
//! that file alone.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use chardiff_core::{DecodeConfig, JumpIndexing, MiniDenoiserConfig, Strategy};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: usize,
    pub s: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: 200,
            s: 0.008,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSection {
    pub dim: usize,
    pub sigma_c: f64,
    pub stretch: usize,
    pub seed: u64,
}

impl Default for ChannelSection {
    fn default() -> Self {
        Self {
            dim: 16,
            sigma_c: 0.3,
            stretch: 1,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            count: 200,
            min_len: 20,
            max_len: 60,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub blocks: usize,
    pub width: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub concat_period: usize,
    pub cond_dropout: f64,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            blocks: 2,
            width: 64,
            heads: 4,
            ff_width: 256,
            concat_period: 2,
            cond_dropout: 0.1,
            init_seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 32,
            lr: 3e-4,
            warmup: 500,
            clip: 10.0,
            beta1: 0.9,
            beta2: 0.999,
            seed: 13,
            log_every: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub strategy: String,
    /// Transcript buffer length; 0 means one position per conditioning frame.
    pub n: usize,
    pub w: f64,
    pub jump_len: usize,
    pub jumps: usize,
    pub jump_indexing: String,
    pub seed: u64,
    /// Which dataset half to decode: train, eval, or all.
    pub split: String,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self {
            strategy: "basic".into(),
            n: 0,
            w: 1.5,
            jump_len: 10,
            jumps: 10,
            jump_indexing: "per_anchor".into(),
            seed: 17,
            split: "eval".into(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schedule: ScheduleSection,
    pub channel: ChannelSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub decode: DecodeSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).context("serializing config")?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    /// Validate field ranges by constructing the core configs they map to.
    pub fn validate(&self) -> Result<()> {
        chardiff_core::NoiseSchedule::cosine(self.schedule.steps, self.schedule.s)
            .context("schedule section")?;
        self.model_config().validate().context("model section")?;
        self.decode_config(1).and_then(|c| {
            c.validate()
                .map_err(anyhow::Error::from)
                .context("decode section")
        })?;
        if self.train.batch == 0 {
            bail!("train.batch must be >= 1");
        }
        if self.data.min_len > self.data.max_len || self.data.max_len == 0 {
            bail!(
                "data length range {}..={} is empty",
                self.data.min_len,
                self.data.max_len
            );
        }
        Ok(())
    }

    pub fn model_config(&self) -> MiniDenoiserConfig {
        MiniDenoiserConfig {
            vocab: chardiff_core::ALPHABET_SIZE,
            cond_dim: self.channel.dim,
            blocks: self.model.blocks,
            width: self.model.width,
            heads: self.model.heads,
            ff_width: self.model.ff_width,
            concat_period: self.model.concat_period,
            cond_dropout: self.model.cond_dropout,
        }
    }

    pub fn strategy(&self) -> Result<Strategy> {
        Ok(match self.decode.strategy.as_str() {
            "basic" => Strategy::Basic,
            "guided" => Strategy::Guided,
            "resample" => Strategy::Resample,
            "resample_progressive" => Strategy::ResampleProgressive,
            other => bail!(
                "unknown strategy {other:?} (expected basic, guided, resample, \
                 resample_progressive)"
            ),
        })
    }

    pub fn jump_indexing(&self) -> Result<JumpIndexing> {
        Ok(match self.decode.jump_indexing.as_str() {
            "per_anchor" => JumpIndexing::PerAnchor,
            "global" => JumpIndexing::Global,
            other => bail!("unknown jump indexing {other:?} (expected per_anchor or global)"),
        })
    }

    /// Decode config for a sequence of `auto_len` positions (used when
    /// `decode.n` is 0).
    pub fn decode_config(&self, auto_len: usize) -> Result<DecodeConfig> {
        Ok(DecodeConfig {
            steps: self.schedule.steps,
            seq_len: if self.decode.n == 0 {
                auto_len
            } else {
                self.decode.n
            },
            guidance_w: self.decode.w,
            strategy: self.strategy()?,
            jump_len: self.decode.jump_len,
            jumps: self.decode.jumps,
            seed: self.decode.seed,
            jump_indexing: self.jump_indexing()?,
            progressive_slope: 8.0,
        })
    }
}

/// Output directory precedence: `CHARDIFF_OUT_DIR` env, then the flag,
/// then the current directory.
pub fn resolve_out_dir(flag: Option<&Path>) -> PathBuf {
    if let Ok(dir) = std::env::var("CHARDIFF_OUT_DIR") {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    flag.map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}
