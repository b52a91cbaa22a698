//! Run configuration: one flat `key=value` record covering data and output
//! locations, network widths, appearance-model update settings, the training
//! schedule and the ablation switches. Files and command-line overrides share
//! the same keys; the resolved record is written next to every run's outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::kv::{self, Entry};
use crate::pipeline::{AblationFlags, ModelConfig, TrainConfig};
use crate::synthvos::Split;

/// File name of the resolved configuration inside an output directory.
pub const RESOLVED_NAME: &str = "config.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Dataset root holding `train/` and `val/`.
    pub data: PathBuf,
    pub out: PathBuf,
    /// Checkpoint read by evaluation.
    pub checkpoint: Option<PathBuf>,
    /// Split scored by evaluation.
    pub split: Split,
    pub dump_masks: bool,
    /// Seeds both the weight initialization and the training order.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Variants retrained by the ablation sweep.
    pub variants: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: PathBuf::from("data"),
            out: PathBuf::from("run"),
            checkpoint: None,
            split: Split::Val,
            dump_masks: false,
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            variants: AblationFlags::VARIANTS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl RunConfig {
    /// Parses a configuration file, then applies `overrides` in order.
    pub fn load(text: &str, overrides: &[Entry]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for e in kv::parse(text)?.iter().chain(overrides) {
            cfg.apply(e)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, e: &Entry) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match e.key.as_str() {
            "data" => self.data = PathBuf::from(&e.value),
            "out" => self.out = PathBuf::from(&e.value),
            "checkpoint" => self.checkpoint = (!e.value.is_empty()).then(|| PathBuf::from(&e.value)),
            "split" => self.split = kv::value(e)?,
            "dump_masks" => self.dump_masks = kv::flag(e)?,
            "seed" => {
                self.seed = kv::value(e)?;
                m.net.seed = self.seed;
                t.seed = self.seed;
            }
            "feature_dim" => m.net.feature_dim = kv::value(e)?,
            "skip_dim" => m.net.skip_dim = kv::value(e)?,
            "maskprop_dim" => m.net.maskprop_dim = kv::value(e)?,
            "fusion_dim" => m.net.fusion_dim = kv::value(e)?,
            "refine_dim" => m.net.refine_dim = kv::value(e)?,
            "lambda" => m.update.lambda = kv::value(e)?,
            "mass_floor" => m.update.mass_floor = kv::value(e)?,
            "stage1_epochs" => t.stage1_epochs = kv::value(e)?,
            "stage2_epochs" => t.stage2_epochs = kv::value(e)?,
            "stage1_frames" => t.stage1_frames = kv::value(e)?,
            "stage2_frames" => t.stage2_frames = kv::value(e)?,
            "batch_size" => t.batch_size = kv::value(e)?,
            "learning_rate" => t.learning_rate = kv::value(e)?,
            "lr_decay" => t.lr_decay = kv::value(e)?,
            "weight_decay" => t.weight_decay = kv::value(e)?,
            "val_every" => t.val_every = kv::value(e)?,
            "ablation" => {
                m.flags = AblationFlags::from_variant(&e.value).map_err(|err| Error::Config {
                    line: e.line,
                    msg: err.to_string(),
                })?
            }
            "variants" => {
                self.variants = e
                    .value
                    .split(',')
                    .map(str::trim)
                    .filter(|v| !v.is_empty())
                    .map(str::to_string)
                    .collect();
                for v in &self.variants {
                    AblationFlags::from_variant(v).map_err(|err| Error::Config {
                        line: e.line,
                        msg: err.to_string(),
                    })?;
                }
            }
            key => {
                let on = kv::flag(e);
                match m.flags.set(key, false) {
                    Ok(()) => m.flags.set(key, on?)?,
                    Err(_) => return Err(kv::unknown_key(e)),
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.net.validate()?;
        self.model.update.validate()?;
        self.train.validate()?;
        if self.variants.is_empty() {
            return Err(Error::invalid("no ablation variants requested"));
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order; parses back to
    /// an equal configuration.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("data", self.data.display().to_string());
        put("out", self.out.display().to_string());
        put(
            "checkpoint",
            self.checkpoint.as_ref().map_or(String::new(), |p| p.display().to_string()),
        );
        put("split", self.split.name().to_string());
        put("dump_masks", u8::from(self.dump_masks).to_string());
        put("seed", self.seed.to_string());
        put("feature_dim", m.net.feature_dim.to_string());
        put("skip_dim", m.net.skip_dim.to_string());
        put("maskprop_dim", m.net.maskprop_dim.to_string());
        put("fusion_dim", m.net.fusion_dim.to_string());
        put("refine_dim", m.net.refine_dim.to_string());
        put("lambda", m.update.lambda.to_string());
        put("mass_floor", m.update.mass_floor.to_string());
        put("stage1_epochs", t.stage1_epochs.to_string());
        put("stage2_epochs", t.stage2_epochs.to_string());
        put("stage1_frames", t.stage1_frames.to_string());
        put("stage2_frames", t.stage2_frames.to_string());
        put("batch_size", t.batch_size.to_string());
        put("learning_rate", t.learning_rate.to_string());
        put("lr_decay", t.lr_decay.to_string());
        put("weight_decay", t.weight_decay.to_string());
        put("val_every", t.val_every.to_string());
        for (name, on) in m.flags.entries() {
            put(name, u8::from(on).to_string());
        }
        put("variants", self.variants.join(","));
        s
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_NAME);
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Parses `--key=value`, `--key value` and bare `--flag` (meaning `1`)
/// arguments. Dashes inside keys read as underscores.
pub fn parse_overrides(args: &[String]) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        let body = arg.strip_prefix("--").ok_or_else(|| Error::Config {
            line: 0,
            msg: format!("expected --key=value, found `{arg}`"),
        })?;
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => match args.get(i + 1).filter(|n| !n.starts_with("--")) {
                Some(v) => {
                    i += 1;
                    (body.to_string(), v.clone())
                }
                None => (body.to_string(), "1".to_string()),
            },
        };
        if key.is_empty() {
            return Err(Error::Config {
                line: 0,
                msg: format!("empty key in `{arg}`"),
            });
        }
        out.push(Entry {
            line: 0,
            key: key.replace('-', "_"),
            value,
        });
        i += 1;
    }
    Ok(out)
}
