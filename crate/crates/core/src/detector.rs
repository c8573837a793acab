//! Full spoofing detector: encoder features through one or more nested
//! blocks into the scoring head.
//!
//! Two variants share every piece except the step between the block's
//! subset outputs and the head. The plain variant concatenates the subset
//! outputs directly; the attended variant first lets each subset exchange
//! information with its channel neighbors and adds the result back as a
//! residual. With more than one block, each block's (optionally attended)
//! subset outputs are re-concatenated and fed to the next block, so the
//! channel width is preserved through the chain.

use serde::{Deserialize, Serialize};

use crate::attention::{aggregate, detection_score, head_logits, AttnParams, AttnVars, HeadParams, HeadVars, LaConfig};
use crate::error::{Error, Result};
use crate::frontend::FeatureStack;
use crate::nesblock::{nes_block_forward, NesBlockParams, NesBlockVars, NesConfig};
use crate::seeds;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which back-end to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Nested blocks, concat-pool head.
    Nes2NetX,
    /// Nested blocks with local channel attention before the head.
    Nes2NetLa,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Nes2NetX => "nes2net-x",
            Variant::Nes2NetLa => "nes2net-la",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "nes2net-x" => Ok(Variant::Nes2NetX),
            "nes2net-la" => Ok(Variant::Nes2NetLa),
            other => Err(Error::invalid(
                "Variant",
                format!("unknown variant {other:?} (expected nes2net-x or nes2net-la)"),
            )),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Geometry of the whole detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub variant: Variant,
    /// Chained block count; each block reuses the same geometry.
    pub blocks: usize,
    pub nes: NesConfig,
    pub la: LaConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            variant: Variant::Nes2NetLa,
            blocks: 1,
            nes: NesConfig::default(),
            la: LaConfig::default(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::invalid("DetectorConfig", "blocks must be >= 1"));
        }
        self.nes.validate()?;
        self.la.validate()
    }
}

/// Every trainable tensor of the detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub blocks: Vec<NesBlockParams>,
    /// One attention set per block; empty for the plain variant.
    pub attns: Vec<AttnParams>,
    pub head: HeadParams,
}

#[derive(Debug, Clone)]
pub struct DetectorVars {
    pub blocks: Vec<NesBlockVars>,
    pub attns: Vec<AttnVars>,
    pub head: HeadVars,
}

impl DetectorParams {
    pub fn init(cfg: &DetectorConfig, seed: u64) -> Result<DetectorParams> {
        cfg.validate()?;
        let blocks: Vec<NesBlockParams> = (0..cfg.blocks)
            .map(|i| NesBlockParams::init(&cfg.nes, seeds::derive_indexed(seed, "detector.block", i as u64)))
            .collect::<Result<_>>()?;
        let attns: Vec<AttnParams> = match cfg.variant {
            Variant::Nes2NetX => Vec::new(),
            Variant::Nes2NetLa => (0..cfg.blocks)
                .map(|i| {
                    AttnParams::init(&cfg.nes, &cfg.la, seeds::derive_indexed(seed, "detector.attn", i as u64))
                })
                .collect::<Result<_>>()?,
        };
        let head = HeadParams::init(
            cfg.nes.channels,
            cfg.la.classes,
            seeds::derive(seed, "detector.head"),
        );
        Ok(DetectorParams { blocks, attns, head })
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}block{i}."), f);
        }
        for (i, a) in self.attns.iter().enumerate() {
            a.visit(&format!("{prefix}block{i}."), f);
        }
        self.head.visit(prefix, f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}block{i}."), f);
        }
        for (i, a) in self.attns.iter_mut().enumerate() {
            a.visit_mut(&format!("{prefix}block{i}."), f);
        }
        self.head.visit_mut(prefix, f);
    }

    pub fn register(&self, tape: &Tape) -> Result<DetectorVars> {
        Ok(DetectorVars {
            blocks: self.blocks.iter().map(|b| b.register(tape)).collect::<Result<_>>()?,
            attns: self.attns.iter().map(|a| a.register(tape)).collect::<Result<_>>()?,
            head: self.head.register(tape)?,
        })
    }

    /// Total scalar parameter count.
    pub fn n_scalars(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}

/// Differentiable pass from a [channels, frames] feature map to class logits.
pub fn detector_forward(tape: &Tape, x: Var, vars: &DetectorVars, cfg: &DetectorConfig) -> Result<Var> {
    cfg.validate()?;
    if vars.blocks.len() != cfg.blocks {
        return Err(Error::shape(
            "detector_forward",
            format!("{} block vars for {} blocks", vars.blocks.len(), cfg.blocks),
        ));
    }
    if cfg.variant == Variant::Nes2NetLa && vars.attns.len() != cfg.blocks {
        return Err(Error::shape(
            "detector_forward",
            format!("{} attention vars for {} blocks", vars.attns.len(), cfg.blocks),
        ));
    }
    let mut cur = x;
    let mut parts: Vec<Var> = Vec::new();
    for i in 0..cfg.blocks {
        let acts = nes_block_forward(tape, cur, &vars.blocks[i], &cfg.nes)?;
        parts = match cfg.variant {
            Variant::Nes2NetX => acts.h,
            Variant::Nes2NetLa => aggregate(tape, &acts.h, &vars.attns[i], cfg.la.window)?,
        };
        if i + 1 < cfg.blocks {
            cur = tape.concat_channels(&parts)?;
        }
    }
    head_logits(tape, &parts, &vars.head)
}

/// Logits of one [channels, frames] feature map on a throwaway tape; the
/// detector reads only the top encoder layer.
pub fn detector_logits(features: &Tensor, params: &DetectorParams, cfg: &DetectorConfig) -> Result<Tensor> {
    let tape = Tape::new();
    let x = tape.constant(features)?;
    let vars = params.register(&tape)?;
    Ok(tape.value(detector_forward(&tape, x, &vars, cfg)?))
}

/// The scalar detection score of one feature map.
pub fn score_features(features: &Tensor, params: &DetectorParams, cfg: &DetectorConfig) -> Result<f64> {
    Ok(detection_score(&detector_logits(features, params, cfg)?))
}

/// The scalar detection score of one encoded utterance.
pub fn score_stack(stack: &FeatureStack, params: &DetectorParams, cfg: &DetectorConfig) -> Result<f64> {
    score_features(stack.last(), params, cfg)
}
