//! Open-set source tracing: which generator produced a spoofed utterance?
//!
//! The model pools the encoder's layer stack into one vector (each layer is
//! time-averaged, a shared affine score map picks softmax mixture weights
//! over layers), gates it with squeeze-excite, and maps it to one logit per
//! seen class. Decisions are open-set: when the maximum softmax probability
//! falls below a threshold the utterance is labeled [`UNSEEN`]; the
//! threshold is calibrated on a development set by grid search over
//! [0, 1] in steps of 0.005, maximizing overall macro-F1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{macro_f1, ConfusionTable, MetricSubset, UNSEEN};
use crate::nesblock::{squeeze_excite, SeParams};
use crate::seeds;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Calibration grid step.
pub const THRESHOLD_STEP: f64 = 0.005;

/// Tracer geometry; `classes` fixes the output order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracerConfig {
    /// Encoder layers pooled over.
    pub layers: usize,
    /// Encoder channels per layer.
    pub channels: usize,
    /// Squeeze-excite bottleneck divisor.
    pub se_reduction: usize,
}

impl TracerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.channels == 0 || self.se_reduction == 0 {
            return Err(Error::invalid(
                "TracerConfig",
                "layers, channels, se_reduction must be >= 1",
            ));
        }
        Ok(())
    }

    pub fn se_hidden(&self) -> usize {
        (self.channels / self.se_reduction).max(1)
    }
}

/// All trainable tracer state, including the class list it predicts over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracerParams {
    /// Seen class ids, in logit order.
    pub classes: Vec<String>,
    /// Shared layer-score map: score(e) = score_w . e + score_b.
    pub score_w: Tensor,
    pub score_b: Tensor,
    pub se: SeParams,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct TracerVars {
    pub score_w: Var,
    pub score_b: Var,
    pub se_w1: Var,
    pub se_b1: Var,
    pub se_w2: Var,
    pub se_b2: Var,
    pub out_w: Var,
    pub out_b: Var,
}

impl TracerParams {
    pub fn init(cfg: &TracerConfig, classes: Vec<String>, seed: u64) -> Result<TracerParams> {
        cfg.validate()?;
        if classes.is_empty() {
            return Err(Error::invalid("TracerParams", "empty class list"));
        }
        if classes.iter().any(|c| c == UNSEEN) {
            return Err(Error::invalid("TracerParams", "UNSEEN cannot be a seen class"));
        }
        let c = cfg.channels;
        let hidden = cfg.se_hidden();
        let n = classes.len();
        let mut rng = seeds::rng(seeds::derive(seed, "tracer.params"));
        let sig_c = 1.0 / (c as f64).sqrt();
        Ok(TracerParams {
            classes,
            score_w: Tensor::randn(&[1, c], sig_c, &mut rng),
            score_b: Tensor::zeros(&[1]),
            se: SeParams {
                w1: Tensor::randn(&[hidden, c], sig_c, &mut rng),
                b1: Tensor::zeros(&[hidden]),
                w2: Tensor::randn(&[c, hidden], 1.0 / (hidden as f64).sqrt(), &mut rng),
                b2: Tensor::zeros(&[c]),
            },
            out_w: Tensor::randn(&[n, c], sig_c, &mut rng),
            out_b: Tensor::zeros(&[n]),
        })
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}pool.score_w"), &self.score_w);
        f(&format!("{prefix}pool.score_b"), &self.score_b);
        f(&format!("{prefix}se.w1"), &self.se.w1);
        f(&format!("{prefix}se.b1"), &self.se.b1);
        f(&format!("{prefix}se.w2"), &self.se.w2);
        f(&format!("{prefix}se.b2"), &self.se.b2);
        f(&format!("{prefix}out.weight"), &self.out_w);
        f(&format!("{prefix}out.bias"), &self.out_b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}pool.score_w"), &mut self.score_w);
        f(&format!("{prefix}pool.score_b"), &mut self.score_b);
        f(&format!("{prefix}se.w1"), &mut self.se.w1);
        f(&format!("{prefix}se.b1"), &mut self.se.b1);
        f(&format!("{prefix}se.w2"), &mut self.se.w2);
        f(&format!("{prefix}se.b2"), &mut self.se.b2);
        f(&format!("{prefix}out.weight"), &mut self.out_w);
        f(&format!("{prefix}out.bias"), &mut self.out_b);
    }

    pub fn register(&self, tape: &Tape) -> Result<TracerVars> {
        Ok(TracerVars {
            score_w: tape.param(&self.score_w)?,
            score_b: tape.param(&self.score_b)?,
            se_w1: tape.param(&self.se.w1)?,
            se_b1: tape.param(&self.se.b1)?,
            se_w2: tape.param(&self.se.w2)?,
            se_b2: tape.param(&self.se.b2)?,
            out_w: tape.param(&self.out_w)?,
            out_b: tape.param(&self.out_b)?,
        })
    }

    pub fn class_index(&self, api_id: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == api_id)
    }
}

/// Softmax-weighted combination of per-layer time averages.
///
/// Layer weights come from one shared affine score per layer, so the output
/// always lies in the convex hull of the layer means.
pub fn attention_pool(tape: &Tape, layers: &[Var], vars: &TracerVars) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::invalid("attention_pool", "no layers"));
    }
    let means: Vec<Var> = layers
        .iter()
        .map(|&l| tape.global_avg_pool_time(l))
        .collect::<Result<_>>()?;
    let scores: Vec<Var> = means
        .iter()
        .map(|&e| tape.affine(vars.score_w, e, vars.score_b))
        .collect::<Result<_>>()?;
    let stacked = tape.stack_scalars(&scores)?;
    let alpha = tape.softmax(stacked, 0)?;
    let mut pooled = tape.mul_by_entry(means[0], alpha, 0)?;
    for (l, &e) in means.iter().enumerate().skip(1) {
        pooled = tape.add(pooled, tape.mul_by_entry(e, alpha, l)?)?;
    }
    Ok(pooled)
}

/// Full tracer pass: pool, squeeze-excite at a single frame, affine logits.
pub fn trace_forward(tape: &Tape, layers: &[Var], vars: &TracerVars) -> Result<Var> {
    let pooled = attention_pool(tape, layers, vars)?;
    let c = tape.shape_of(pooled)[0];
    let framed = tape.reshape(pooled, &[c, 1])?;
    let gated = squeeze_excite(tape, framed, vars.se_w1, vars.se_b1, vars.se_w2, vars.se_b2)?;
    let flat = tape.global_avg_pool_time(gated)?;
    tape.affine(vars.out_w, flat, vars.out_b)
}

/// Convenience: logits of one layer stack on a throwaway tape.
pub fn trace_logits(layers: &[Tensor], params: &TracerParams) -> Result<Tensor> {
    let tape = Tape::new();
    let vars_in: Vec<Var> = layers.iter().map(|t| tape.constant(t)).collect::<Result<_>>()?;
    let vars = params.register(&tape)?;
    Ok(tape.value(trace_forward(&tape, &vars_in, &vars)?))
}

/// The pooled embedding of one layer stack (for CSV export and inspection).
pub fn pooled_embedding(layers: &[Tensor], params: &TracerParams) -> Result<Tensor> {
    let tape = Tape::new();
    let vars_in: Vec<Var> = layers.iter().map(|t| tape.constant(t)).collect::<Result<_>>()?;
    let vars = params.register(&tape)?;
    Ok(tape.value(attention_pool(&tape, &vars_in, &vars)?))
}

/// One open-set decision.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceDecision {
    /// Softmax over the seen classes.
    pub probs: Vec<f64>,
    /// A seen class id, or [`UNSEEN`].
    pub predicted: String,
    pub max_prob: f64,
    pub threshold: f64,
}

fn softmax_probs(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Highest-probability class, ties to the lowest index.
fn arg_max(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Threshold the maximum softmax probability: below it the sample is ruled
/// to come from none of the seen classes.
pub fn open_set_decide(logits: &Tensor, threshold: f64, classes: &[String]) -> Result<TraceDecision> {
    if logits.rank() != 1 || logits.len() != classes.len() {
        return Err(Error::shape(
            "open_set_decide",
            format!("{} logits for {} classes", logits.len(), classes.len()),
        ));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid("open_set_decide", "threshold must lie in [0, 1]"));
    }
    let probs = softmax_probs(logits.data());
    let best = arg_max(&probs);
    let max_prob = probs[best];
    let predicted = if max_prob < threshold {
        UNSEEN.to_string()
    } else {
        classes[best].clone()
    };
    Ok(TraceDecision { probs, predicted, max_prob, threshold })
}

/// A development-set item for threshold calibration: the model's seen-class
/// probabilities plus the true class (a seen id, or [`UNSEEN`]).
#[derive(Debug, Clone)]
pub struct CalibrationPoint {
    pub probs: Vec<f64>,
    pub true_class: String,
}

/// Macro-F1 over classes + UNSEEN for one fixed threshold.
fn grid_f1(points: &[CalibrationPoint], classes: &[String], threshold: f64) -> Result<f64> {
    let mut all = classes.to_vec();
    all.push(UNSEEN.to_string());
    let mut ct = ConfusionTable::new(all)?;
    for p in points {
        let best = arg_max(&p.probs);
        let pred = if p.probs[best] < threshold { UNSEEN } else { classes[best].as_str() };
        ct.record(&p.true_class, pred)?;
    }
    Ok(macro_f1(&ct, MetricSubset::Overall)?.2)
}

/// Grid-search the rejection threshold on a dev set holding both seen and
/// unseen samples; ties resolve to the smallest threshold.
pub fn calibrate_threshold(points: &[CalibrationPoint], classes: &[String]) -> Result<f64> {
    let has_unseen = points.iter().any(|p| p.true_class == UNSEEN);
    let has_seen = points.iter().any(|p| p.true_class != UNSEEN);
    if !has_unseen || !has_seen {
        return Err(Error::invalid(
            "calibrate_threshold",
            "dev set must hold both seen and unseen samples",
        ));
    }
    for p in points {
        if p.probs.len() != classes.len() {
            return Err(Error::shape(
                "calibrate_threshold",
                format!("{} probs for {} classes", p.probs.len(), classes.len()),
            ));
        }
    }
    let steps = (1.0 / THRESHOLD_STEP).round() as usize;
    let mut best = (f64::NEG_INFINITY, 0.0);
    for i in 0..=steps {
        let t = i as f64 * THRESHOLD_STEP;
        let f1 = grid_f1(points, classes, t)?;
        if f1 > best.0 {
            best = (f1, t);
        }
    }
    Ok(best.1)
}
