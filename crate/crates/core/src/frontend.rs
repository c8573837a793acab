//! Deterministic multi-layer feature encoder and 4-second segmenting.
//!
//! This is a frozen stand-in for a pretrained speech encoder: layer 0 is a
//! log-energy of seeded random frame projections plus per-channel offsets,
//! and each later layer is relu(conv1d(previous)). All parameters are
//! re-derivable from a seed, so checkpoints store only the seed and the
//! encoder never trains. A feature cache avoids re-encoding utterances
//! inside training loops; set the env var named by [`CACHE_ENV`] to spill
//! it to disk.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::seeds;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Analysis window length in samples; hop is configurable, the window is not.
pub const ENC_WIN: usize = 320;

/// Env var naming a directory for the on-disk feature cache.
pub const CACHE_ENV: &str = "SPOOFTRACE_CACHE_DIR";

/// Encoder geometry; all parameters derive from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    /// Layer count L (layer 0 plus L-1 conv layers).
    pub layers: usize,
    /// Channels per layer.
    pub channels: usize,
    /// Frame hop in samples.
    pub hop: usize,
    pub sample_rate: u32,
    /// Segment length in whole seconds.
    pub segment_seconds: usize,
    pub seed: u64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            layers: 12,
            channels: 64,
            hop: 320,
            sample_rate: 16000,
            segment_seconds: 4,
            seed: 7,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.channels == 0 || self.hop == 0 {
            return Err(Error::invalid("FrontendConfig", "layers, channels, hop must be >= 1"));
        }
        if self.sample_rate == 0 || self.segment_seconds == 0 {
            return Err(Error::invalid(
                "FrontendConfig",
                "sample_rate and segment_seconds must be positive",
            ));
        }
        if self.segment_samples() < ENC_WIN {
            return Err(Error::invalid(
                "FrontendConfig",
                format!("segment shorter than the {ENC_WIN}-sample analysis window"),
            ));
        }
        Ok(())
    }

    pub fn segment_samples(&self) -> usize {
        self.segment_seconds * self.sample_rate as usize
    }

    /// Frames produced for a segmented waveform: (N - win) / hop + 1.
    pub fn frame_count(&self) -> usize {
        (self.segment_samples() - ENC_WIN) / self.hop + 1
    }

    /// Cache key component covering everything that changes the features.
    pub fn fingerprint(&self) -> String {
        format!(
            "L{}c{}h{}sr{}s{}seed{}",
            self.layers, self.channels, self.hop, self.sample_rate, self.segment_seconds, self.seed
        )
    }
}

/// Frozen encoder parameters, re-derived from the config seed.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// Frame projection bank, [channels, ENC_WIN].
    pub proj: Tensor,
    /// Per-channel offsets added to the layer-0 log energies.
    pub offsets: Tensor,
    /// Conv kernels for layers 1..L, each [channels, channels, 3].
    pub kernels: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl EncoderParams {
    pub fn from_seed(cfg: &FrontendConfig) -> Result<EncoderParams> {
        cfg.validate()?;
        let c = cfg.channels;
        let mut rng = seeds::rng(seeds::derive(cfg.seed, "frontend.encoder"));
        let proj = Tensor::randn(&[c, ENC_WIN], 1.0 / (ENC_WIN as f64).sqrt(), &mut rng);
        let offsets = Tensor::uniform(&[c], -1.0, 1.0, &mut rng);
        let sigma = 1.0 / ((3 * c) as f64).sqrt();
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        for _ in 1..cfg.layers {
            kernels.push(Tensor::randn(&[c, c, 3], sigma, &mut rng));
            biases.push(Tensor::uniform(&[c], -0.05, 0.05, &mut rng));
        }
        Ok(EncoderParams { proj, offsets, kernels, biases })
    }
}

/// One encoded utterance: L layers of identical [channels, frames] shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStack {
    pub utt_id: String,
    pub layers: Vec<Tensor>,
}

impl FeatureStack {
    pub fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::invalid("FeatureStack", "no layers"))?;
        for (l, t) in self.layers.iter().enumerate() {
            if t.shape() != first.shape() {
                return Err(Error::shape(
                    "FeatureStack",
                    format!("layer {l} shape {:?} != layer 0 shape {:?}", t.shape(), first.shape()),
                ));
            }
        }
        Ok(())
    }

    /// The deepest layer; detector input.
    pub fn last(&self) -> &Tensor {
        self.layers.last().expect("validated non-empty")
    }
}

/// Force a waveform to exactly `target_seconds` of audio: short signals are
/// tiled whole (last copy truncated), long ones keep their first samples.
pub fn segment_4s(w: &Waveform, target_seconds: usize) -> Result<Waveform> {
    if w.is_empty() {
        return Err(Error::invalid("segment_4s", "empty waveform"));
    }
    if target_seconds == 0 {
        return Err(Error::invalid("segment_4s", "target_seconds must be >= 1"));
    }
    let n = target_seconds * w.sample_rate as usize;
    let mut samples = Vec::with_capacity(n);
    while samples.len() < n {
        let take = (n - samples.len()).min(w.samples.len());
        samples.extend_from_slice(&w.samples[..take]);
    }
    Waveform::new(samples, w.sample_rate)
}

/// Build the L-layer stack on an existing tape. `wav` may be a constant (the
/// frozen path) or a differentiable leaf when gradients through the encoder
/// are wanted; encoder parameters are always constants.
pub fn encode_on_tape(
    tape: &Tape,
    wav: Var,
    params: &EncoderParams,
    cfg: &FrontendConfig,
) -> Result<Vec<Var>> {
    cfg.validate()?;
    let proj = tape.constant(&params.proj)?;
    let energies = tape.frame_energy(wav, proj, cfg.hop)?;
    let frames = tape.shape_of(energies)[1];
    // Expand the per-channel offsets across frames; constant, so no backward.
    let mut tiled = Vec::with_capacity(cfg.channels * frames);
    for c in 0..cfg.channels {
        tiled.extend(std::iter::repeat_n(params.offsets.data()[c], frames));
    }
    let offs = tape.constant(&Tensor::new(vec![cfg.channels, frames], tiled)?)?;
    let mut layer = tape.add(energies, offs)?;
    let mut out = vec![layer];
    for (k, b) in params.kernels.iter().zip(&params.biases) {
        let kv = tape.constant(k)?;
        let bv = tape.constant(b)?;
        layer = tape.relu(tape.conv1d(layer, kv, bv, 1)?)?;
        out.push(layer);
    }
    Ok(out)
}

/// Encode a segmented waveform to its feature stack (pure, frozen path).
pub fn encode(w: &Waveform, utt_id: &str, params: &EncoderParams, cfg: &FrontendConfig) -> Result<FeatureStack> {
    if w.len() < ENC_WIN {
        return Err(Error::invalid(
            "encode",
            format!("waveform of {} samples is shorter than the analysis window", w.len()),
        ));
    }
    let tape = Tape::new();
    let wav = tape.constant(&Tensor::vector(w.samples.clone())?)?;
    let vars = encode_on_tape(&tape, wav, params, cfg)?;
    let stack = FeatureStack {
        utt_id: utt_id.to_string(),
        layers: vars.into_iter().map(|v| tape.value(v)).collect(),
    };
    stack.validate()?;
    Ok(stack)
}

/// Memoizes encoded utterances, optionally mirrored to a directory so
/// repeated runs skip encoding entirely. Keys include the config
/// fingerprint, so mixed-config use is safe.
pub struct FeatureCache {
    mem: RefCell<HashMap<String, FeatureStack>>,
    disk: Option<PathBuf>,
}

impl FeatureCache {
    pub fn new(disk: Option<PathBuf>) -> FeatureCache {
        FeatureCache { mem: RefCell::new(HashMap::new()), disk }
    }

    /// Reads the cache directory from the env var, if set.
    pub fn from_env() -> FeatureCache {
        FeatureCache::new(std::env::var_os(CACHE_ENV).map(PathBuf::from))
    }

    fn disk_path(&self, key: &str) -> Option<PathBuf> {
        self.disk.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    /// Fetch or compute the stack for one utterance.
    pub fn get_or_encode(
        &self,
        utt_id: &str,
        cfg: &FrontendConfig,
        params: &EncoderParams,
        load_wave: impl FnOnce() -> Result<Waveform>,
    ) -> Result<FeatureStack> {
        let key = format!("{}-{}", cfg.fingerprint(), utt_id);
        if let Some(hit) = self.mem.borrow().get(&key) {
            return Ok(hit.clone());
        }
        if let Some(p) = self.disk_path(&key) {
            if p.exists() {
                let body = fs::read_to_string(&p)?;
                let stack: FeatureStack = serde_json::from_str(&body)
                    .map_err(|e| Error::format(p.display().to_string(), e.to_string()))?;
                stack.validate()?;
                self.mem.borrow_mut().insert(key, stack.clone());
                return Ok(stack);
            }
        }
        let w = load_wave()?;
        let seg = segment_4s(&w, cfg.segment_seconds)?;
        let stack = encode(&seg, utt_id, params, cfg)?;
        if let Some(p) = self.disk_path(&key) {
            if let Some(dir) = p.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::write(&p, serde_json::to_string(&stack).expect("stack serializes"))?;
        }
        self.mem.borrow_mut().insert(key, stack.clone());
        Ok(stack)
    }
}
