//! Mini-batch training loops for the detector and the tracer.
//!
//! Each step builds a fresh tape, runs every utterance in the batch, takes
//! the mean cross-entropy, and backpropagates once. Shuffling is seeded per
//! epoch, so a run is a pure function of its inputs and seed. Any
//! non-finite value surfacing anywhere in a step aborts the run with the
//! step number attached.

use rand::seq::SliceRandom;

use crate::attention::{BONAFIDE_CLASS, SPOOF_CLASS};
use crate::detector::{detector_forward, score_features, DetectorConfig, DetectorParams};
use crate::error::{Error, Result};
use crate::metrics::{compute_eer, ScoreRecord, ScoreSet, TrialLabel};
use crate::optim::{collect_grads, track_params, visit_names, AdamW, AdamWConfig};
use crate::seeds;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::tracer::{trace_forward, trace_logits, TracerParams};

/// Loop hyperparameters. Learning rates differ per model; the constants
/// below are the shipped defaults.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Dev evaluation cadence in steps; 0 disables dev tracking.
    pub eval_every: usize,
    /// Stop once a batch loss drops below this, if set.
    pub target_loss: Option<f64>,
    pub seed: u64,
}

pub const DETECTOR_LR: f64 = 5e-6;
pub const TRACER_LR: f64 = 1e-5;

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: DETECTOR_LR,
            weight_decay: 1e-4,
            batch_size: 16,
            max_steps: 5000,
            eval_every: 250,
            target_loss: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_steps == 0 {
            return Err(Error::invalid("TrainConfig", "batch_size and max_steps must be >= 1"));
        }
        if let Some(t) = self.target_loss {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::invalid("TrainConfig", "target_loss must be finite and positive"));
            }
        }
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamWConfig::default() }.validate()
    }

    fn optimizer(&self) -> Result<AdamW> {
        AdamW::new(AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamWConfig::default() })
    }
}

/// One detector training utterance: the top encoder layer plus its label.
#[derive(Debug, Clone)]
pub struct DetExample {
    pub features: Tensor,
    /// [`SPOOF_CLASS`] or [`BONAFIDE_CLASS`].
    pub label: usize,
}

/// One tracer training utterance: the full layer stack plus its class index.
#[derive(Debug, Clone)]
pub struct TraceExample {
    pub layers: Vec<Tensor>,
    pub class: usize,
}

/// Progress and outcome of one training run. Dev metric semantics depend
/// on the model: detector runs track dev EER (lower is better), tracer runs
/// track dev closed-set accuracy (higher is better).
#[derive(Debug, Clone)]
pub struct TrainReport<P> {
    pub steps: usize,
    /// Loss of the last batch taken.
    pub final_batch_loss: f64,
    /// Mean cross-entropy over the full training set with final parameters.
    pub final_mean_loss: f64,
    pub best_dev: Option<f64>,
    pub best_step: usize,
    /// The parameters at the best dev point (final parameters if dev
    /// tracking was off or the dev set was unusable).
    pub best_params: P,
    pub optimizer: AdamW,
    pub history: Vec<ProgressPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProgressPoint {
    pub step: usize,
    pub batch_loss: f64,
    pub dev_metric: Option<f64>,
}

/// Epoch-shuffled index stream; every epoch reshuffles with its own seed.
struct BatchPlan {
    n: usize,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    seed: u64,
}

impl BatchPlan {
    fn new(n: usize, seed: u64) -> BatchPlan {
        let mut plan = BatchPlan { n, order: (0..n).collect(), cursor: 0, epoch: 0, seed };
        plan.reshuffle();
        plan
    }

    fn reshuffle(&mut self) {
        let mut rng = seeds::rng(seeds::derive_indexed(self.seed, "train.epoch", self.epoch));
        self.order.shuffle(&mut rng);
        self.epoch += 1;
        self.cursor = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.n);
        if self.cursor + size > self.n {
            self.reshuffle();
        }
        let batch = self.order[self.cursor..self.cursor + size].to_vec();
        self.cursor += size;
        batch
    }
}

/// Cross-entropy of one logit vector, computed without a tape.
pub fn ce_from_logits(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

fn at_step(step: usize, e: Error) -> Error {
    Error::Train { step, cause: Box::new(e) }
}

/// Mean cross-entropy of the detector over a set of examples (no grads).
pub fn detector_mean_ce(params: &DetectorParams, cfg: &DetectorConfig, examples: &[DetExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("detector_mean_ce", "no examples"));
    }
    let mut total = 0.0;
    for ex in examples {
        let logits = crate::detector::detector_logits(&ex.features, params, cfg)?;
        total += ce_from_logits(logits.data(), ex.label);
    }
    Ok(total / examples.len() as f64)
}

/// Mean cross-entropy of the tracer over a set of examples (no grads).
pub fn tracer_mean_ce(params: &TracerParams, examples: &[TraceExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("tracer_mean_ce", "no examples"));
    }
    let mut total = 0.0;
    for ex in examples {
        let logits = trace_logits(&ex.layers, params)?;
        total += ce_from_logits(logits.data(), ex.class);
    }
    Ok(total / examples.len() as f64)
}

/// Detection EER over a dev set; None when the set lacks one of the sides.
pub fn detector_dev_eer(
    params: &DetectorParams,
    cfg: &DetectorConfig,
    dev: &[DetExample],
) -> Result<Option<(f64, f64)>> {
    let has_bona = dev.iter().any(|e| e.label == BONAFIDE_CLASS);
    let has_spoof = dev.iter().any(|e| e.label == SPOOF_CLASS);
    if !has_bona || !has_spoof {
        return Ok(None);
    }
    let mut records = Vec::with_capacity(dev.len());
    for (i, ex) in dev.iter().enumerate() {
        records.push(ScoreRecord {
            utt_id: format!("dev-{i}"),
            score: score_features(&ex.features, params, cfg)?,
            label: if ex.label == BONAFIDE_CLASS { TrialLabel::Bonafide } else { TrialLabel::Spoof },
        });
    }
    let set = ScoreSet::new(records)?;
    Ok(Some(compute_eer(&set)?))
}

/// Closed-set accuracy of the tracer over a dev set; None when empty.
pub fn tracer_dev_accuracy(params: &TracerParams, dev: &[TraceExample]) -> Result<Option<f64>> {
    if dev.is_empty() {
        return Ok(None);
    }
    let mut hits = 0usize;
    for ex in dev {
        let logits = trace_logits(&ex.layers, params)?;
        let data = logits.data();
        let mut best = 0;
        for i in 1..data.len() {
            if data[i] > data[best] {
                best = i;
            }
        }
        if best == ex.class {
            hits += 1;
        }
    }
    Ok(Some(hits as f64 / dev.len() as f64))
}

/// Trains the detector in place; returns the run report. Dev metric: EER.
pub fn train_detector(
    params: &mut DetectorParams,
    cfg: &DetectorConfig,
    train: &[DetExample],
    dev: &[DetExample],
    tc: &TrainConfig,
) -> Result<TrainReport<DetectorParams>> {
    tc.validate()?;
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("train_detector", "empty training set"));
    }
    for ex in train.iter().chain(dev) {
        if ex.label != SPOOF_CLASS && ex.label != BONAFIDE_CLASS {
            return Err(Error::invalid("train_detector", format!("label {} out of range", ex.label)));
        }
    }

    let names = visit_names(|f| params.visit("", f));
    let mut opt = tc.optimizer()?;
    let mut plan = BatchPlan::new(train.len(), tc.seed);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, DetectorParams)> = None;
    let mut last_loss = f64::NAN;
    let mut steps = 0;

    for step in 1..=tc.max_steps {
        steps = step;
        let batch = plan.next_batch(tc.batch_size);

        let tape = Tape::new();
        let (vars, tracked) =
            track_params(&tape, || params.register(&tape)).map_err(|e| at_step(step, e))?;
        let mut losses = Vec::with_capacity(batch.len());
        for &i in &batch {
            let ex = &train[i];
            let x = tape.constant(&ex.features).map_err(|e| at_step(step, e))?;
            let logits = detector_forward(&tape, x, &vars, cfg).map_err(|e| at_step(step, e))?;
            losses.push(tape.cross_entropy(logits, ex.label).map_err(|e| at_step(step, e))?);
        }
        let loss = tape.mean_vars(&losses).map_err(|e| at_step(step, e))?;
        tape.backward(loss).map_err(|e| at_step(step, e))?;
        last_loss = tape.scalar_value(loss);

        let grads = collect_grads(&tape, &names, &tracked).map_err(|e| at_step(step, e))?;
        opt.step(&grads, |f| params.visit_mut("", f)).map_err(|e| at_step(step, e))?;

        let mut dev_metric = None;
        if tc.eval_every > 0 && step % tc.eval_every == 0 {
            if let Some((eer, _)) = detector_dev_eer(params, cfg, dev).map_err(|e| at_step(step, e))? {
                dev_metric = Some(eer);
                let improved = best.as_ref().is_none_or(|(b, _, _)| eer < *b);
                if improved {
                    best = Some((eer, step, params.clone()));
                }
            }
        }
        history.push(ProgressPoint { step, batch_loss: last_loss, dev_metric });

        if tc.target_loss.is_some_and(|t| last_loss < t) {
            break;
        }
    }

    let final_mean_loss = detector_mean_ce(params, cfg, train)?;
    let (best_dev, best_step, best_params) = match best {
        Some((m, s, p)) => (Some(m), s, p),
        None => (None, steps, params.clone()),
    };
    Ok(TrainReport {
        steps,
        final_batch_loss: last_loss,
        final_mean_loss,
        best_dev,
        best_step,
        best_params,
        optimizer: opt,
        history,
    })
}

/// Trains the tracer in place; returns the run report. Dev metric:
/// closed-set accuracy over the seen classes.
pub fn train_tracer(
    params: &mut TracerParams,
    train: &[TraceExample],
    dev: &[TraceExample],
    tc: &TrainConfig,
) -> Result<TrainReport<TracerParams>> {
    tc.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("train_tracer", "empty training set"));
    }
    let n_classes = params.classes.len();
    for ex in train.iter().chain(dev) {
        if ex.class >= n_classes {
            return Err(Error::invalid(
                "train_tracer",
                format!("class {} out of range for {} classes", ex.class, n_classes),
            ));
        }
    }

    let names = visit_names(|f| params.visit("", f));
    let mut opt = tc.optimizer()?;
    let mut plan = BatchPlan::new(train.len(), tc.seed);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, TracerParams)> = None;
    let mut last_loss = f64::NAN;
    let mut steps = 0;

    for step in 1..=tc.max_steps {
        steps = step;
        let batch = plan.next_batch(tc.batch_size);

        let tape = Tape::new();
        let (vars, tracked) =
            track_params(&tape, || params.register(&tape)).map_err(|e| at_step(step, e))?;
        let mut losses = Vec::with_capacity(batch.len());
        for &i in &batch {
            let ex = &train[i];
            let layer_vars = ex
                .layers
                .iter()
                .map(|t| tape.constant(t))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| at_step(step, e))?;
            let logits = trace_forward(&tape, &layer_vars, &vars).map_err(|e| at_step(step, e))?;
            losses.push(tape.cross_entropy(logits, ex.class).map_err(|e| at_step(step, e))?);
        }
        let loss = tape.mean_vars(&losses).map_err(|e| at_step(step, e))?;
        tape.backward(loss).map_err(|e| at_step(step, e))?;
        last_loss = tape.scalar_value(loss);

        let grads = collect_grads(&tape, &names, &tracked).map_err(|e| at_step(step, e))?;
        opt.step(&grads, |f| params.visit_mut("", f)).map_err(|e| at_step(step, e))?;

        let mut dev_metric = None;
        if tc.eval_every > 0 && step % tc.eval_every == 0 {
            if let Some(acc) = tracer_dev_accuracy(params, dev).map_err(|e| at_step(step, e))? {
                dev_metric = Some(acc);
                let improved = best.as_ref().is_none_or(|(b, _, _)| acc > *b);
                if improved {
                    best = Some((acc, step, params.clone()));
                }
            }
        }
        history.push(ProgressPoint { step, batch_loss: last_loss, dev_metric });

        if tc.target_loss.is_some_and(|t| last_loss < t) {
            break;
        }
    }

    let final_mean_loss = tracer_mean_ce(params, train)?;
    let (best_dev, best_step, best_params) = match best {
        Some((m, s, p)) => (Some(m), s, p),
        None => (None, steps, params.clone()),
    };
    Ok(TrainReport {
        steps,
        final_batch_loss: last_loss,
        final_mean_loss,
        best_dev,
        best_step,
        best_params,
        optimizer: opt,
        history,
    })
}
