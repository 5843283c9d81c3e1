//! Model and training configuration, read from flat `key = value` files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::memory::MemoryConfig;

/// Network dimensions and architecture switches.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelConfig {
    /// Word feature width `N_w`.
    pub word_dim: usize,
    /// Pixel feature width `N_r`.
    pub pixel_dim: usize,
    /// Memory slot width `N_m`.
    pub mem_dim: usize,
    pub z_dim: usize,
    /// Width of the conditioning-augmentation code.
    pub cond_dim: usize,
    pub embed_dim: usize,
    /// Longest caption accepted, in tokens.
    pub max_len: usize,
    /// Side of the first stage's output; each later stage doubles it.
    pub base_res: usize,
    /// Number of generator stages including the initial one.
    pub stages: usize,
    /// Channels of the initial 4×4 generator map.
    pub g_channels: usize,
    /// Channels of the first discriminator convolution.
    pub d_channels: usize,
    pub residual_blocks: usize,
    pub memory: MemoryConfig,
    /// Reuse the same memory parameters in every refinement stage.
    pub share_memory: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            word_dim: 32,
            pixel_dim: 16,
            mem_dim: 32,
            z_dim: 16,
            cond_dim: 16,
            embed_dim: 16,
            max_len: 8,
            base_res: 16,
            stages: 3,
            g_channels: 32,
            d_channels: 16,
            residual_blocks: 2,
            memory: MemoryConfig::FULL,
            share_memory: false,
        }
    }
}

impl ModelConfig {
    /// Output side of stage `i`.
    pub fn resolution(&self, stage: usize) -> usize {
        self.base_res << stage
    }

    pub fn final_resolution(&self) -> usize {
        self.resolution(self.stages - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Config("stages must be at least 1".into()));
        }
        if self.base_res < 8 || !self.base_res.is_power_of_two() {
            return Err(Error::Config(format!(
                "base_res must be a power of two >= 8, got {}",
                self.base_res
            )));
        }
        if !self.word_dim.is_multiple_of(2) {
            return Err(Error::Config("word_dim must be even".into()));
        }
        for (k, v) in [
            ("word_dim", self.word_dim),
            ("pixel_dim", self.pixel_dim),
            ("mem_dim", self.mem_dim),
            ("z_dim", self.z_dim),
            ("cond_dim", self.cond_dim),
            ("embed_dim", self.embed_dim),
            ("max_len", self.max_len),
            ("g_channels", self.g_channels),
            ("d_channels", self.d_channels),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        Ok(())
    }
}

/// Everything a training run needs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Weight of the conditioning-augmentation KL term.
    pub lambda_ca: f64,
    /// Weight of the image-text matching term.
    pub lambda_match: f64,
    /// Similarity scale of the matching loss.
    pub match_gamma: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Training samples drawn from the synthetic generator.
    pub train_samples: usize,
    pub seed: u64,
    pub data_seed: u64,
    /// Keep the text encoder fixed at its initial weights.
    pub freeze_text: bool,
    /// Add the real-image/wrong-caption term to the discriminator loss.
    pub mismatch_term: bool,
    /// Steps between checkpoints written by the CLI (0 = end only).
    pub checkpoint_every: usize,
    /// Stop after this many optimizer steps (0 = run all epochs).
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lambda_ca: 1.0,
            lambda_match: 5.0,
            match_gamma: 10.0,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 10,
            epochs: 20,
            train_samples: 4800,
            seed: 0,
            data_seed: 1,
            freeze_text: false,
            mismatch_term: false,
            checkpoint_every: 0,
            max_steps: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.lambda_ca < 0.0 || self.lambda_match < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.train_samples < self.batch_size {
            return Err(Error::Config("train_samples must cover one batch".into()));
        }
        Ok(())
    }

    /// Steps in one epoch (partial trailing batches are dropped).
    pub fn steps_per_epoch(&self) -> usize {
        self.train_samples / self.batch_size
    }

    pub fn total_steps(&self) -> usize {
        let all = self.epochs * self.steps_per_epoch();
        if self.max_steps > 0 {
            all.min(self.max_steps)
        } else {
            all
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "word_dim" => m.word_dim = parse(key, v)?,
            "pixel_dim" => m.pixel_dim = parse(key, v)?,
            "mem_dim" => m.mem_dim = parse(key, v)?,
            "z_dim" => m.z_dim = parse(key, v)?,
            "cond_dim" => m.cond_dim = parse(key, v)?,
            "embed_dim" => m.embed_dim = parse(key, v)?,
            "max_len" => m.max_len = parse(key, v)?,
            "base_res" => m.base_res = parse(key, v)?,
            "stages" => m.stages = parse(key, v)?,
            "g_channels" => m.g_channels = parse(key, v)?,
            "d_channels" => m.d_channels = parse(key, v)?,
            "residual_blocks" => m.residual_blocks = parse(key, v)?,
            "memory_kv" => m.memory.key_value = parse(key, v)?,
            "write_gate" => m.memory.write_gate = parse(key, v)?,
            "response_gate" => m.memory.response_gate = parse(key, v)?,
            "share_memory" => m.share_memory = parse(key, v)?,
            "variant" => {
                m.memory = MemoryConfig::ladder()
                    .iter()
                    .find(|(n, _)| *n == v)
                    .map(|p| p.1)
                    .ok_or_else(|| Error::Config(format!("unknown variant {v:?}")))?
            }
            "lambda_ca" => self.lambda_ca = parse(key, v)?,
            "lambda_match" => self.lambda_match = parse(key, v)?,
            "match_gamma" => self.match_gamma = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "train_samples" => self.train_samples = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "freeze_text" => self.freeze_text = parse(key, v)?,
            "mismatch_term" => self.mismatch_term = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Unset keys keep defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Every key with its current value, in a stable order.
    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let m = &self.model;
        let mut e = BTreeMap::new();
        e.insert("word_dim", m.word_dim.to_string());
        e.insert("pixel_dim", m.pixel_dim.to_string());
        e.insert("mem_dim", m.mem_dim.to_string());
        e.insert("z_dim", m.z_dim.to_string());
        e.insert("cond_dim", m.cond_dim.to_string());
        e.insert("embed_dim", m.embed_dim.to_string());
        e.insert("max_len", m.max_len.to_string());
        e.insert("base_res", m.base_res.to_string());
        e.insert("stages", m.stages.to_string());
        e.insert("g_channels", m.g_channels.to_string());
        e.insert("d_channels", m.d_channels.to_string());
        e.insert("residual_blocks", m.residual_blocks.to_string());
        e.insert("memory_kv", m.memory.key_value.to_string());
        e.insert("write_gate", m.memory.write_gate.to_string());
        e.insert("response_gate", m.memory.response_gate.to_string());
        e.insert("share_memory", m.share_memory.to_string());
        e.insert("lambda_ca", self.lambda_ca.to_string());
        e.insert("lambda_match", self.lambda_match.to_string());
        e.insert("match_gamma", self.match_gamma.to_string());
        e.insert("lr", self.lr.to_string());
        e.insert("beta1", self.beta1.to_string());
        e.insert("beta2", self.beta2.to_string());
        e.insert("batch_size", self.batch_size.to_string());
        e.insert("epochs", self.epochs.to_string());
        e.insert("train_samples", self.train_samples.to_string());
        e.insert("seed", self.seed.to_string());
        e.insert("data_seed", self.data_seed.to_string());
        e.insert("freeze_text", self.freeze_text.to_string());
        e.insert("mismatch_term", self.mismatch_term.to_string());
        e.insert("checkpoint_every", self.checkpoint_every.to_string());
        e.insert("max_steps", self.max_steps.to_string());
        e
    }

    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_config_string())?;
        Ok(())
    }
}
