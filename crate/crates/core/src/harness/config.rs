//! Flat `key=value` configuration files.
//!
//! Lines are `key = value`; `#` starts a comment; dotted keys address the
//! network section (`net.base_channels=36`). A `preset` key, if present, is
//! applied first and the remaining keys override it regardless of order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::arch::{DsdNetConfig, Variant};
use crate::error::{Error, Result};
use crate::tensor::{AdamWConfig, LrSchedule};

/// Parses `text` into an ordered key/value map. Duplicate keys are an error.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key=value, got `{line}`", no + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", no + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", no + 1)));
        }
    }
    Ok(out)
}

/// Named starting points for [`TrainConfig`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Default network and the long schedule.
    Paper,
    /// Default network, 2000 steps.
    Desk,
    /// Tiny network memorising a handful of 64x64 pairs.
    Overfit,
    /// Reduced network for short desk-scale runs that still generalize.
    Small,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Paper, Preset::Desk, Preset::Overfit, Preset::Small];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
            Preset::Overfit => "overfit",
            Preset::Small => "small",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub net: DsdNetConfig,
    pub lr_init: f64,
    pub lr_min: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Side of the square training crop, in mosaic pixels.
    pub crop_size: usize,
    pub lambda_aux: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub data_dir: PathBuf,
    /// Pairs evaluated after training; `None` skips the final evaluation.
    pub eval_dir: Option<PathBuf>,
    /// Steps between intermediate checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(Preset::Paper)
    }
}

impl TrainConfig {
    pub fn preset(p: Preset) -> Self {
        let base = Self {
            net: DsdNetConfig::default(),
            lr_init: 2e-4,
            lr_min: 1e-6,
            total_steps: 400_000,
            batch_size: 1,
            crop_size: 256,
            lambda_aux: 0.5,
            weight_decay: AdamWConfig::default().weight_decay,
            seed: 0,
            data_dir: PathBuf::from("data/train"),
            eval_dir: None,
            checkpoint_every: 10_000,
            log_every: 100,
            hflip: true,
        };
        match p {
            Preset::Paper => base,
            Preset::Desk => Self {
                total_steps: 2_000,
                checkpoint_every: 500,
                log_every: 50,
                ..base
            },
            Preset::Overfit => Self {
                net: DsdNetConfig {
                    base_channels: 16,
                    ..DsdNetConfig::tiny()
                },
                lr_init: 5e-3,
                lr_min: 1e-5,
                total_steps: 2_000,
                batch_size: 4,
                crop_size: 64,
                checkpoint_every: 0,
                log_every: 100,
                hflip: false,
                ..base
            },
            Preset::Small => Self {
                net: DsdNetConfig {
                    base_channels: 12,
                    n_scales: 2,
                    blocks_per_scale: 1,
                    decoder_blocks: 1,
                    heads: vec![1, 2],
                    ssm_state_dim: 4,
                    ffn_expansion: 2.0,
                    target_params: None,
                    variant: Variant::Full,
                },
                lr_init: 1e-3,
                lr_min: 1e-5,
                total_steps: 10_000,
                batch_size: 2,
                crop_size: 64,
                checkpoint_every: 0,
                log_every: 500,
                ..base
            },
        }
    }

    pub fn variant(&self) -> Variant {
        self.net.variant
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            lr_init: self.lr_init,
            lr_min: self.lr_min,
            total_steps: self.total_steps,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if !(self.lr_min < self.lr_init) || !(self.lr_min >= 0.0) {
            return Err(Error::Config(format!(
                "need 0 <= lr_min < lr_init, got lr_min={} lr_init={}",
                self.lr_min, self.lr_init
            )));
        }
        // Two mosaic pixels per packed pixel.
        let stride = 2 * self.net.stride();
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "crop_size {} must be a positive multiple of the network stride {stride}",
                self.crop_size
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lambda_aux >= 0.0) {
            return Err(Error::Config("lambda_aux must be non-negative".into()));
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_text(&text)?;
        // Relative data paths resolve against the config file's directory.
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.data_dir.is_relative() {
            cfg.data_dir = base.join(&cfg.data_dir);
        }
        if let Some(d) = cfg.eval_dir.as_mut() {
            if d.is_relative() {
                *d = base.join(&*d);
            }
        }
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let mut cfg = match kv.get("preset") {
            Some(p) => Self::preset(Preset::parse(p)?),
            None => Self::default(),
        };
        for (k, v) in &kv {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        let n = &mut self.net;
        match key {
            "net.base_channels" => n.base_channels = num(key, value)?,
            "net.n_scales" => n.n_scales = num(key, value)?,
            "net.blocks_per_scale" => n.blocks_per_scale = num(key, value)?,
            "net.decoder_blocks" => n.decoder_blocks = num(key, value)?,
            "net.heads" => {
                n.heads = value
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "net.ssm_state_dim" => n.ssm_state_dim = num(key, value)?,
            "net.ffn_expansion" => n.ffn_expansion = num(key, value)?,
            "net.target_params" => {
                n.target_params = if value == "none" { None } else { Some(num(key, value)?) }
            }
            "ablation_variant" | "net.variant" => n.variant = Variant::parse(value)?,
            "lr_init" => self.lr_init = num(key, value)?,
            "lr_min" => self.lr_min = num(key, value)?,
            "total_steps" => self.total_steps = num::<f64>(key, value).and_then(|f| whole(key, f))?,
            "batch_size" => self.batch_size = num(key, value)?,
            "crop_size" => self.crop_size = num(key, value)?,
            "lambda_aux" => self.lambda_aux = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "eval_dir" => self.eval_dir = if value.is_empty() { None } else { Some(PathBuf::from(value)) },
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "log_every" => self.log_every = num(key, value)?,
            "hflip" => self.hflip = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical text form; [`from_text`](Self::from_text) reads it back exactly.
    pub fn to_text(&self) -> String {
        let n = &self.net;
        let heads: Vec<String> = n.heads.iter().map(|h| h.to_string()).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").expect("string write");
        kv("net.base_channels", n.base_channels.to_string());
        kv("net.n_scales", n.n_scales.to_string());
        kv("net.blocks_per_scale", n.blocks_per_scale.to_string());
        kv("net.decoder_blocks", n.decoder_blocks.to_string());
        kv("net.heads", heads.join(","));
        kv("net.ssm_state_dim", n.ssm_state_dim.to_string());
        kv("net.ffn_expansion", n.ffn_expansion.to_string());
        kv(
            "net.target_params",
            n.target_params.map_or("none".to_string(), |t| t.to_string()),
        );
        kv("ablation_variant", n.variant.name().to_string());
        kv("lr_init", self.lr_init.to_string());
        kv("lr_min", self.lr_min.to_string());
        kv("total_steps", self.total_steps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("crop_size", self.crop_size.to_string());
        kv("lambda_aux", self.lambda_aux.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("seed", self.seed.to_string());
        kv("data_dir", self.data_dir.display().to_string());
        kv(
            "eval_dir",
            self.eval_dir.as_ref().map_or(String::new(), |d| d.display().to_string()),
        );
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("log_every", self.log_every.to_string());
        kv("hflip", self.hflip.to_string());
        s
    }
}

fn whole(key: &str, f: f64) -> Result<usize> {
    if f >= 0.0 && f.fract() == 0.0 && f <= usize::MAX as f64 {
        Ok(f as usize)
    } else {
        Err(Error::Config(format!("`{key}` must be a non-negative integer, got {f}")))
    }
}
