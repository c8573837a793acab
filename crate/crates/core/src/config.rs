//! Run configuration: an INI file plus `section.key=value` overrides.
//!
//! Every tool reads the same four sections (model, train, dcf, paths) with
//! full defaults, so a bare invocation works without any file. Frame count
//! is always derived from the encoder geometry, never set by hand, and the
//! back-end channel width must match the encoder's.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use configparser::ini::Ini;

use crate::attention::LaConfig;
use crate::detector::{DetectorConfig, Variant};
use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::metrics::DcfCosts;
use crate::nesblock::NesConfig;
use crate::tracer::TracerConfig;
use crate::train::{TrainConfig, DETECTOR_LR, TRACER_LR};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub variant: Variant,
    pub blocks: usize,
    pub subsets: usize,
    pub ws_branches: usize,
    pub se_reduction: usize,
    pub kernel: usize,
    pub window: usize,
    pub attn_width: usize,
    /// Back-end channel width; 0 inherits the encoder width.
    pub channels: usize,
    pub enc_layers: usize,
    pub enc_channels: usize,
    pub hop: usize,
    pub sample_rate: u32,
    pub segment_seconds: usize,
    pub enc_seed: u64,
    pub tracer_se_reduction: usize,
    pub model_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    /// 0 means "use the per-command default" (detector 5e-6, tracer 1e-5).
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    /// 0 disables the early-stop target.
    pub target_loss: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathsSection {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Empty disables the on-disk feature cache.
    pub cache_dir: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub dcf: DcfCosts,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelSection {
                variant: Variant::Nes2NetLa,
                blocks: 1,
                subsets: 8,
                ws_branches: 2,
                se_reduction: 4,
                kernel: 3,
                window: 1,
                attn_width: 16,
                channels: 0,
                enc_layers: 12,
                enc_channels: 64,
                hop: 320,
                sample_rate: 16000,
                segment_seconds: 4,
                enc_seed: 7,
                tracer_se_reduction: 4,
                model_seed: 1,
            },
            train: TrainSection {
                lr: 0.0,
                weight_decay: 1e-4,
                batch_size: 16,
                max_steps: 5000,
                eval_every: 250,
                target_loss: 0.0,
                seed: 0,
            },
            dcf: DcfCosts::default(),
            paths: PathsSection {
                data_dir: PathBuf::from("data"),
                out_dir: PathBuf::from("out"),
                cache_dir: String::new(),
            },
        }
    }
}

fn bad(key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!("{key} = {value:?}: expected {want}"))
}

fn p_usize(key: &str, v: &str) -> Result<usize> {
    v.trim().parse().map_err(|_| bad(key, v, "a non-negative integer"))
}

fn p_u64(key: &str, v: &str) -> Result<u64> {
    v.trim().parse().map_err(|_| bad(key, v, "a non-negative integer"))
}

fn p_u32(key: &str, v: &str) -> Result<u32> {
    v.trim().parse().map_err(|_| bad(key, v, "a non-negative integer"))
}

fn p_f64(key: &str, v: &str) -> Result<f64> {
    let x: f64 = v.trim().parse().map_err(|_| bad(key, v, "a number"))?;
    if !x.is_finite() {
        return Err(bad(key, v, "a finite number"));
    }
    Ok(x)
}

impl RunConfig {
    /// Applies one `section.key = value` assignment.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let full = format!("{section}.{key}");
        let k = full.as_str();
        match (section, key) {
            ("model", "variant") => self.model.variant = Variant::parse(value.trim())?,
            ("model", "blocks") => self.model.blocks = p_usize(k, value)?,
            ("model", "subsets") => self.model.subsets = p_usize(k, value)?,
            ("model", "ws_branches") => self.model.ws_branches = p_usize(k, value)?,
            ("model", "se_reduction") => self.model.se_reduction = p_usize(k, value)?,
            ("model", "kernel") => self.model.kernel = p_usize(k, value)?,
            ("model", "window") => self.model.window = p_usize(k, value)?,
            ("model", "attn_width") => self.model.attn_width = p_usize(k, value)?,
            ("model", "channels") => self.model.channels = p_usize(k, value)?,
            ("model", "enc_layers") => self.model.enc_layers = p_usize(k, value)?,
            ("model", "enc_channels") => self.model.enc_channels = p_usize(k, value)?,
            ("model", "hop") => self.model.hop = p_usize(k, value)?,
            ("model", "sample_rate") => self.model.sample_rate = p_u32(k, value)?,
            ("model", "segment_seconds") => self.model.segment_seconds = p_usize(k, value)?,
            ("model", "enc_seed") => self.model.enc_seed = p_u64(k, value)?,
            ("model", "tracer_se_reduction") => self.model.tracer_se_reduction = p_usize(k, value)?,
            ("model", "model_seed") => self.model.model_seed = p_u64(k, value)?,
            ("train", "lr") => self.train.lr = p_f64(k, value)?,
            ("train", "weight_decay") => self.train.weight_decay = p_f64(k, value)?,
            ("train", "batch_size") => self.train.batch_size = p_usize(k, value)?,
            ("train", "max_steps") => self.train.max_steps = p_usize(k, value)?,
            ("train", "eval_every") => self.train.eval_every = p_usize(k, value)?,
            ("train", "target_loss") => self.train.target_loss = p_f64(k, value)?,
            ("train", "seed") => self.train.seed = p_u64(k, value)?,
            ("dcf", "c_miss") => self.dcf.c_miss = p_f64(k, value)?,
            ("dcf", "c_fa") => self.dcf.c_fa = p_f64(k, value)?,
            ("dcf", "p_target") => self.dcf.p_target = p_f64(k, value)?,
            ("paths", "data_dir") => self.paths.data_dir = PathBuf::from(value.trim()),
            ("paths", "out_dir") => self.paths.out_dir = PathBuf::from(value.trim()),
            ("paths", "cache_dir") => self.paths.cache_dir = value.trim().to_string(),
            _ => return Err(Error::Config(format!("unknown key {full:?}"))),
        }
        Ok(())
    }

    /// Applies one CLI override of the form `section.key=value`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not section.key=value")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not section.key=value")))?;
        self.set(section.trim(), key.trim(), value)
    }

    /// Loads an INI file over the defaults. Unknown sections or keys fail.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.merge_file(path)?;
        Ok(cfg)
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let mut ini = Ini::new_cs();
        let map: HashMap<String, HashMap<String, Option<String>>> = ini
            .load(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut entries: Vec<(String, String, String)> = Vec::new();
        for (section, kv) in &map {
            for (key, value) in kv {
                let value = value
                    .clone()
                    .ok_or_else(|| Error::Config(format!("{section}.{key} has no value")))?;
                entries.push((section.clone(), key.clone(), value));
            }
        }
        // HashMap order is arbitrary; apply deterministically.
        entries.sort();
        for (section, key, value) in entries {
            self.set(&section, &key, &value)?;
        }
        Ok(())
    }

    /// The resolved frozen-encoder recipe.
    pub fn frontend_config(&self) -> FrontendConfig {
        FrontendConfig {
            layers: self.model.enc_layers,
            channels: self.model.enc_channels,
            hop: self.model.hop,
            sample_rate: self.model.sample_rate,
            segment_seconds: self.model.segment_seconds,
            seed: self.model.enc_seed,
        }
    }

    /// Back-end channel width after inheritance.
    pub fn backend_channels(&self) -> Result<usize> {
        if self.model.channels == 0 || self.model.channels == self.model.enc_channels {
            return Ok(self.model.enc_channels);
        }
        Err(Error::Config(format!(
            "model.channels = {} but the encoder emits {} channels; the back-end reads encoder output directly",
            self.model.channels, self.model.enc_channels
        )))
    }

    /// The resolved detector geometry. Frame count is derived from the
    /// encoder recipe, never configured directly.
    pub fn detector_config(&self) -> Result<DetectorConfig> {
        let fe = self.frontend_config();
        fe.validate()?;
        let cfg = DetectorConfig {
            variant: self.model.variant,
            blocks: self.model.blocks,
            nes: NesConfig {
                channels: self.backend_channels()?,
                frames: fe.frame_count(),
                subsets: self.model.subsets,
                ws_branches: self.model.ws_branches,
                se_reduction: self.model.se_reduction,
                kernel: self.model.kernel,
            },
            la: LaConfig { window: self.model.window, attn_width: self.model.attn_width, classes: 2 },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The resolved tracer geometry.
    pub fn tracer_config(&self) -> Result<TracerConfig> {
        let cfg = TracerConfig {
            layers: self.model.enc_layers,
            channels: self.model.enc_channels,
            se_reduction: self.model.tracer_se_reduction,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The resolved training loop settings; `default_lr` fills in when the
    /// config leaves the rate at 0.
    pub fn train_config(&self, default_lr: f64) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lr: if self.train.lr == 0.0 { default_lr } else { self.train.lr },
            weight_decay: self.train.weight_decay,
            batch_size: self.train.batch_size,
            max_steps: self.train.max_steps,
            eval_every: self.train.eval_every,
            target_loss: if self.train.target_loss == 0.0 { None } else { Some(self.train.target_loss) },
            seed: self.train.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn detector_train_config(&self) -> Result<TrainConfig> {
        self.train_config(DETECTOR_LR)
    }

    pub fn tracer_train_config(&self) -> Result<TrainConfig> {
        self.train_config(TRACER_LR)
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend_config().validate()?;
        self.detector_config()?;
        self.tracer_config()?;
        self.detector_train_config()?;
        self.dcf.validate()?;
        Ok(())
    }

    /// Full resolved configuration as INI text, echoed into reports.
    pub fn render(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.dcf;
        let p = &self.paths;
        format!(
            "[model]\n\
             variant = {}\n\
             blocks = {}\n\
             subsets = {}\n\
             ws_branches = {}\n\
             se_reduction = {}\n\
             kernel = {}\n\
             window = {}\n\
             attn_width = {}\n\
             channels = {}\n\
             enc_layers = {}\n\
             enc_channels = {}\n\
             hop = {}\n\
             sample_rate = {}\n\
             segment_seconds = {}\n\
             enc_seed = {}\n\
             tracer_se_reduction = {}\n\
             model_seed = {}\n\
             \n\
             [train]\n\
             lr = {}\n\
             weight_decay = {}\n\
             batch_size = {}\n\
             max_steps = {}\n\
             eval_every = {}\n\
             target_loss = {}\n\
             seed = {}\n\
             \n\
             [dcf]\n\
             c_miss = {}\n\
             c_fa = {}\n\
             p_target = {}\n\
             \n\
             [paths]\n\
             data_dir = {}\n\
             out_dir = {}\n\
             cache_dir = {}\n",
            m.variant,
            m.blocks,
            m.subsets,
            m.ws_branches,
            m.se_reduction,
            m.kernel,
            m.window,
            m.attn_width,
            m.channels,
            m.enc_layers,
            m.enc_channels,
            m.hop,
            m.sample_rate,
            m.segment_seconds,
            m.enc_seed,
            m.tracer_se_reduction,
            m.model_seed,
            t.lr,
            t.weight_decay,
            t.batch_size,
            t.max_steps,
            t.eval_every,
            t.target_loss,
            t.seed,
            d.c_miss,
            d.c_fa,
            d.p_target,
            p.data_dir.display(),
            p.out_dir.display(),
            p.cache_dir,
        )
    }
}
