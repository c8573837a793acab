//! AdamW over named parameter tensors.
//!
//! The optimizer is decoupled from any model struct: it sees parameters
//! only through the `visit_mut` naming convention, and gradients arrive as
//! a name-keyed map. First and second moments live per name, so training
//! can stop, serialize, and resume bit-exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay: applied to the parameter directly, not the gradient.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("AdamWConfig", "lr must be finite and positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("AdamWConfig", "betas must lie in [0, 1)"));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::invalid("AdamWConfig", "eps must be finite and positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("AdamWConfig", "weight_decay must be >= 0"));
        }
        Ok(())
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentPair {
    pub m: Tensor,
    pub v: Tensor,
}

/// AdamW state: the update count plus per-name moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    /// Completed update steps (drives bias correction).
    pub t: u64,
    pub moments: BTreeMap<String, MomentPair>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Result<AdamW> {
        cfg.validate()?;
        Ok(AdamW { cfg, t: 0, moments: BTreeMap::new() })
    }

    /// Rebuilds optimizer state saved by a checkpoint.
    pub fn resume(cfg: AdamWConfig, t: u64, moments: BTreeMap<String, MomentPair>) -> Result<AdamW> {
        cfg.validate()?;
        Ok(AdamW { cfg, t, moments })
    }

    /// One update over every visited parameter. `walk` drives the model's
    /// `visit_mut`; each visited name must have a gradient in `grads`.
    pub fn step(
        &mut self,
        grads: &BTreeMap<String, Tensor>,
        walk: impl FnOnce(&mut dyn FnMut(&str, &mut Tensor)),
    ) -> Result<()> {
        self.t += 1;
        let cfg = self.cfg;
        let t = self.t;
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        let moments = &mut self.moments;
        let mut failure: Option<Error> = None;
        walk(&mut |name, param| {
            if failure.is_some() {
                return;
            }
            let grad = match grads.get(name) {
                Some(g) => g,
                None => {
                    failure = Some(Error::invalid("AdamW", format!("no gradient for {name:?}")));
                    return;
                }
            };
            if grad.shape() != param.shape() {
                failure = Some(Error::shape(
                    "AdamW",
                    format!("gradient {:?} vs parameter {:?} for {name:?}", grad.shape(), param.shape()),
                ));
                return;
            }
            let entry = moments.entry(name.to_string()).or_insert_with(|| MomentPair {
                m: Tensor::zeros(param.shape()),
                v: Tensor::zeros(param.shape()),
            });
            let g = grad.data();
            let p = param.data_mut();
            let m = entry.m.data_mut();
            let v = entry.v.data_mut();
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let new = p[i]
                    - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps)
                    - cfg.lr * cfg.weight_decay * p[i];
                if !new.is_finite() {
                    failure = Some(Error::invalid("AdamW", format!("non-finite update for {name:?}")));
                    return;
                }
                p[i] = new;
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Visit names of a parameter struct, in visit order.
pub fn visit_names(walk: impl FnOnce(&mut dyn FnMut(&str, &Tensor))) -> Vec<String> {
    let mut names = Vec::new();
    walk(&mut |name, _| names.push(name.to_string()));
    names
}

/// Runs a registration block and returns its result plus the handles of the
/// parameters it created, in creation order. Registration methods create
/// parameters in visit order, so the handles zip with [`visit_names`]; the
/// pairing is asserted by value equality in the training loop's tests.
pub fn track_params<T>(tape: &Tape, register: impl FnOnce() -> Result<T>) -> Result<(T, Vec<Var>)> {
    let start = tape.len();
    let out = register()?;
    Ok((out, tape.params_since(start)))
}

/// Gradients of tracked parameters after a backward pass, keyed by name.
/// A parameter the loss never touched gets an all-zero gradient.
pub fn collect_grads(tape: &Tape, names: &[String], vars: &[Var]) -> Result<BTreeMap<String, Tensor>> {
    if names.len() != vars.len() {
        return Err(Error::shape(
            "collect_grads",
            format!("{} names for {} parameters", names.len(), vars.len()),
        ));
    }
    let mut out = BTreeMap::new();
    for (name, &var) in names.iter().zip(vars) {
        let g = match tape.grad(var) {
            Some(g) => g,
            None => Tensor::zeros(&tape.shape_of(var)),
        };
        if out.insert(name.clone(), g).is_some() {
            return Err(Error::invalid("collect_grads", format!("duplicate parameter name {name:?}")));
        }
    }
    Ok(out)
}
