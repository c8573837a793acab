//! Nested residual block over channel subsets.
//!
//! The input `[C, T]` is split into `J` contiguous channel subsets. Subset j
//! is refined by a conv whose input includes the previous subset's mixture
//! output, a weighted summation over parallel dilated convs, and a
//! squeeze-excite gated residual:
//!
//! ```text
//! z_j = WS(Conv(x_j + [j > 1] * z_{j-1}))
//! h_j = x_j + SE(Conv(z_j))
//! ```
//!
//! Parameters are per-subset (nothing is shared across j). WS is a
//! softmax-normalized convex combination of `ws_branches` conv branches with
//! dilations 1, 2, ..., so a single branch reduces to that branch exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Shape and capacity knobs for one nested block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NesConfig {
    /// Total input channels C.
    pub channels: usize,
    /// Frames per utterance T. Zero means "any" (validated at forward time
    /// only when nonzero).
    pub frames: usize,
    /// Number of channel subsets J; must divide `channels`.
    pub subsets: usize,
    /// Parallel conv branches inside the weighted summation.
    pub ws_branches: usize,
    /// Squeeze-excite bottleneck divisor r; hidden width is max(1, (C/J)/r).
    pub se_reduction: usize,
    /// Conv kernel width, odd.
    pub kernel: usize,
}

impl Default for NesConfig {
    fn default() -> Self {
        NesConfig {
            channels: 64,
            frames: 0,
            subsets: 8,
            ws_branches: 2,
            se_reduction: 4,
            kernel: 3,
        }
    }
}

impl NesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subsets == 0 || self.channels == 0 {
            return Err(Error::invalid("NesConfig", "channels and subsets must be positive"));
        }
        if !self.channels.is_multiple_of(self.subsets) {
            return Err(Error::invalid(
                "NesConfig",
                format!("subsets {} does not divide channels {}", self.subsets, self.channels),
            ));
        }
        if self.ws_branches == 0 {
            return Err(Error::invalid("NesConfig", "ws_branches must be >= 1"));
        }
        if self.se_reduction == 0 {
            return Err(Error::invalid("NesConfig", "se_reduction must be >= 1"));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::invalid(
                "NesConfig",
                format!("kernel must be odd and positive, got {}", self.kernel),
            ));
        }
        Ok(())
    }

    /// Channels per subset, C/J.
    pub fn subset_channels(&self) -> usize {
        self.channels / self.subsets
    }

    /// Squeeze-excite hidden width, clamped to at least one unit.
    pub fn se_hidden(&self) -> usize {
        (self.subset_channels() / self.se_reduction).max(1)
    }
}

/// Squeeze-excite parameters: two affine maps around a relu bottleneck.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Parameters owned by one channel subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetParams {
    pub pre_kernel: Tensor,
    pub pre_bias: Tensor,
    /// One kernel per WS branch; branch b runs at dilation b + 1.
    pub branch_kernels: Vec<Tensor>,
    pub branch_biases: Vec<Tensor>,
    /// Logits of the branch mixture; softmaxed before use.
    pub ws_weights: Tensor,
    pub post_kernel: Tensor,
    pub post_bias: Tensor,
    pub se: SeParams,
}

/// All parameters of one nested block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NesBlockParams {
    pub subsets: Vec<SubsetParams>,
}

/// Tape handles mirroring [`NesBlockParams`], produced by `register`.
#[derive(Debug, Clone)]
pub struct SubsetVars {
    pub pre_kernel: Var,
    pub pre_bias: Var,
    pub branch_kernels: Vec<Var>,
    pub branch_biases: Vec<Var>,
    pub ws_weights: Var,
    pub post_kernel: Var,
    pub post_bias: Var,
    pub se_w1: Var,
    pub se_b1: Var,
    pub se_w2: Var,
    pub se_b2: Var,
}

#[derive(Debug, Clone)]
pub struct NesBlockVars {
    pub subsets: Vec<SubsetVars>,
}

/// Per-subset activations from one block pass.
pub struct SubsetActivations {
    /// The J input subsets, in channel order.
    pub inputs: Vec<Var>,
    /// Mixture outputs z_j.
    pub z: Vec<Var>,
    /// Residual outputs h_j; same shape as the matching input subset.
    pub h: Vec<Var>,
}

fn randn_scaled(rng: &mut impl rand::Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let sigma = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::randn(shape, sigma, rng)
}

impl NesBlockParams {
    /// Random initialization: kernels and affine weights N(0, 1/fan_in),
    /// biases and mixture logits zero (so WS starts as a uniform mixture).
    pub fn init(cfg: &NesConfig, seed: u64) -> Result<NesBlockParams> {
        cfg.validate()?;
        let s = cfg.subset_channels();
        let hidden = cfg.se_hidden();
        let k = cfg.kernel;
        let mut subsets = Vec::with_capacity(cfg.subsets);
        for j in 0..cfg.subsets {
            let mut rng = seeds::rng(seeds::derive_indexed(seed, "nesblock.subset", j as u64));
            let branch_kernels = (0..cfg.ws_branches)
                .map(|_| randn_scaled(&mut rng, &[s, s, k], s * k))
                .collect();
            let branch_biases = (0..cfg.ws_branches).map(|_| Tensor::zeros(&[s])).collect();
            subsets.push(SubsetParams {
                pre_kernel: randn_scaled(&mut rng, &[s, s, k], s * k),
                pre_bias: Tensor::zeros(&[s]),
                branch_kernels,
                branch_biases,
                ws_weights: Tensor::zeros(&[cfg.ws_branches]),
                post_kernel: randn_scaled(&mut rng, &[s, s, k], s * k),
                post_bias: Tensor::zeros(&[s]),
                se: SeParams {
                    w1: randn_scaled(&mut rng, &[hidden, s], s),
                    b1: Tensor::zeros(&[hidden]),
                    w2: randn_scaled(&mut rng, &[s, hidden], hidden),
                    b2: Tensor::zeros(&[s]),
                },
            });
        }
        Ok(NesBlockParams { subsets })
    }

    /// All-zero parameters; with these the block is an exact identity
    /// (h_j == x_j). Used by shape and reduction tests.
    pub fn zeros(cfg: &NesConfig) -> Result<NesBlockParams> {
        cfg.validate()?;
        let mut p = NesBlockParams::init(cfg, 0)?;
        p.visit_mut("", &mut |_, t| {
            for v in t.data_mut() {
                *v = 0.0;
            }
        });
        Ok(p)
    }

    /// Visit every tensor with a stable dotted name under `prefix`.
    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (j, sub) in self.subsets.iter().enumerate() {
            let base = format!("{prefix}sub{j}");
            f(&format!("{base}.pre.kernel"), &sub.pre_kernel);
            f(&format!("{base}.pre.bias"), &sub.pre_bias);
            for (b, k) in sub.branch_kernels.iter().enumerate() {
                f(&format!("{base}.branch{b}.kernel"), k);
            }
            for (b, bias) in sub.branch_biases.iter().enumerate() {
                f(&format!("{base}.branch{b}.bias"), bias);
            }
            f(&format!("{base}.ws.weights"), &sub.ws_weights);
            f(&format!("{base}.post.kernel"), &sub.post_kernel);
            f(&format!("{base}.post.bias"), &sub.post_bias);
            f(&format!("{base}.se.w1"), &sub.se.w1);
            f(&format!("{base}.se.b1"), &sub.se.b1);
            f(&format!("{base}.se.w2"), &sub.se.w2);
            f(&format!("{base}.se.b2"), &sub.se.b2);
        }
    }

    /// Mutable twin of [`visit`], same naming and order.
    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (j, sub) in self.subsets.iter_mut().enumerate() {
            let base = format!("{prefix}sub{j}");
            f(&format!("{base}.pre.kernel"), &mut sub.pre_kernel);
            f(&format!("{base}.pre.bias"), &mut sub.pre_bias);
            for (b, k) in sub.branch_kernels.iter_mut().enumerate() {
                f(&format!("{base}.branch{b}.kernel"), k);
            }
            for (b, bias) in sub.branch_biases.iter_mut().enumerate() {
                f(&format!("{base}.branch{b}.bias"), bias);
            }
            f(&format!("{base}.ws.weights"), &mut sub.ws_weights);
            f(&format!("{base}.post.kernel"), &mut sub.post_kernel);
            f(&format!("{base}.post.bias"), &mut sub.post_bias);
            f(&format!("{base}.se.w1"), &mut sub.se.w1);
            f(&format!("{base}.se.b1"), &mut sub.se.b1);
            f(&format!("{base}.se.w2"), &mut sub.se.w2);
            f(&format!("{base}.se.b2"), &mut sub.se.b2);
        }
    }

    /// Put every tensor on the tape as a trainable parameter.
    pub fn register(&self, tape: &Tape) -> Result<NesBlockVars> {
        let mut subsets = Vec::with_capacity(self.subsets.len());
        for sub in &self.subsets {
            subsets.push(SubsetVars {
                pre_kernel: tape.param(&sub.pre_kernel)?,
                pre_bias: tape.param(&sub.pre_bias)?,
                branch_kernels: sub
                    .branch_kernels
                    .iter()
                    .map(|k| tape.param(k))
                    .collect::<Result<_>>()?,
                branch_biases: sub
                    .branch_biases
                    .iter()
                    .map(|b| tape.param(b))
                    .collect::<Result<_>>()?,
                ws_weights: tape.param(&sub.ws_weights)?,
                post_kernel: tape.param(&sub.post_kernel)?,
                post_bias: tape.param(&sub.post_bias)?,
                se_w1: tape.param(&sub.se.w1)?,
                se_b1: tape.param(&sub.se.b1)?,
                se_w2: tape.param(&sub.se.w2)?,
                se_b2: tape.param(&sub.se.b2)?,
            });
        }
        Ok(NesBlockVars { subsets })
    }
}

/// Softmax-normalized convex combination of equally shaped branch outputs.
pub fn weighted_summation(tape: &Tape, branches: &[Var], weights: Var) -> Result<Var> {
    if branches.is_empty() {
        return Err(Error::invalid("weighted_summation", "empty branch list"));
    }
    let mix = tape.softmax(weights, 0)?;
    let mut acc = tape.mul_by_entry(branches[0], mix, 0)?;
    for (b, &branch) in branches.iter().enumerate().skip(1) {
        let term = tape.mul_by_entry(branch, mix, b)?;
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

/// Channel gating: s = sigmoid(W2 relu(W1 avgpool_t(x) + b1) + b2),
/// out[c, t] = s[c] x[c, t].
pub fn squeeze_excite(tape: &Tape, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let pooled = tape.global_avg_pool_time(x)?;
    let hidden = tape.relu(tape.affine(w1, pooled, b1)?)?;
    let gate = tape.sigmoid(tape.affine(w2, hidden, b2)?)?;
    tape.scale_channels(x, gate)
}

/// One full block pass; see the module docs for the recurrence.
pub fn nes_block_forward(
    tape: &Tape,
    x: Var,
    vars: &NesBlockVars,
    cfg: &NesConfig,
) -> Result<SubsetActivations> {
    cfg.validate()?;
    let shape = tape.shape_of(x);
    if shape.len() != 2 || shape[0] != cfg.channels {
        return Err(Error::shape(
            "nes_block_forward",
            format!("expected [{}, T], got {:?}", cfg.channels, shape),
        ));
    }
    if cfg.frames != 0 && shape[1] != cfg.frames {
        return Err(Error::shape(
            "nes_block_forward",
            format!("expected {} frames, got {}", cfg.frames, shape[1]),
        ));
    }
    if vars.subsets.len() != cfg.subsets {
        return Err(Error::shape(
            "nes_block_forward",
            format!("{} parameter subsets for J={}", vars.subsets.len(), cfg.subsets),
        ));
    }

    let inputs = tape.split_channels(x, cfg.subsets)?;
    let mut z: Vec<Var> = Vec::with_capacity(cfg.subsets);
    let mut h: Vec<Var> = Vec::with_capacity(cfg.subsets);
    for (j, sub) in vars.subsets.iter().enumerate() {
        let u = if j == 0 {
            inputs[0]
        } else {
            tape.add(inputs[j], z[j - 1])?
        };
        let pre = tape.conv1d(u, sub.pre_kernel, sub.pre_bias, 1)?;
        let branches = sub
            .branch_kernels
            .iter()
            .zip(&sub.branch_biases)
            .enumerate()
            .map(|(b, (&k, &bias))| tape.conv1d(pre, k, bias, b + 1))
            .collect::<Result<Vec<_>>>()?;
        let zj = weighted_summation(tape, &branches, sub.ws_weights)?;
        let post = tape.conv1d(zj, sub.post_kernel, sub.post_bias, 1)?;
        let refined = squeeze_excite(tape, post, sub.se_w1, sub.se_b1, sub.se_w2, sub.se_b2)?;
        h.push(tape.add(inputs[j], refined)?);
        z.push(zj);
    }
    Ok(SubsetActivations { inputs, z, h })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::seeds;

    fn small_cfg() -> NesConfig {
        NesConfig {
            channels: 4,
            frames: 0,
            subsets: 2,
            ws_branches: 2,
            se_reduction: 4,
            kernel: 3,
        }
    }

    fn forward_values(x: &Tensor, params: &NesBlockParams, cfg: &NesConfig) -> Vec<Tensor> {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone()).unwrap();
        let vars = params.register(&tape).unwrap();
        let acts = nes_block_forward(&tape, xv, &vars, cfg).unwrap();
        acts.h.iter().map(|&hj| tape.value(hj)).collect()
    }

    #[test]
    fn zero_parameters_make_the_block_an_identity() {
        let cfg = small_cfg();
        let params = NesBlockParams::zeros(&cfg).unwrap();
        let mut rng = seeds::rng(7);
        let x = Tensor::randn(&[4, 5], 1.0, &mut rng);

        let tape = Tape::new();
        let xv = tape.leaf(x.clone()).unwrap();
        let vars = params.register(&tape).unwrap();
        let acts = nes_block_forward(&tape, xv, &vars, &cfg).unwrap();
        for (j, (&zj, &hj)) in acts.z.iter().zip(&acts.h).enumerate() {
            assert!(tape.value(zj).data().iter().all(|&v| v == 0.0), "z{j} not zero");
            let h = tape.value(hj);
            let lo = j * 2;
            for c in 0..2 {
                for t in 0..5 {
                    assert_eq!(h.at(&[c, t]), x.at(&[lo + c, t]));
                }
            }
        }
    }

    #[test]
    fn single_branch_summation_returns_that_branch() {
        let tape = Tape::new();
        let mut rng = seeds::rng(8);
        let b0 = tape.leaf(Tensor::randn(&[2, 3], 1.0, &mut rng)).unwrap();
        let w = tape.leaf(Tensor::vector(vec![4.2]).unwrap()).unwrap();
        let out = weighted_summation(&tape, &[b0], w).unwrap();
        assert_eq!(tape.value(out), tape.value(b0));
    }

    #[test]
    fn summation_of_constant_branches_matches_closed_form() {
        // softmax([0, ln 3]) = (0.25, 0.75); 0.25 * 1 + 0.75 * 3 = 2.5.
        let tape = Tape::new();
        let ones = tape.leaf(Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap()).unwrap();
        let threes = tape.leaf(Tensor::new(vec![2, 2], vec![3.0; 4]).unwrap()).unwrap();
        let w = tape.leaf(Tensor::vector(vec![0.0, 3.0f64.ln()]).unwrap()).unwrap();
        let out = weighted_summation(&tape, &[ones, threes], w).unwrap();
        for &v in tape.value(out).data() {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_branches_are_a_fixed_point_of_the_mixture() {
        let tape = Tape::new();
        let mut rng = seeds::rng(9);
        let b = tape.leaf(Tensor::randn(&[3, 2], 1.0, &mut rng)).unwrap();
        let w = tape.leaf(Tensor::vector(vec![1.7, -0.4, 0.2]).unwrap()).unwrap();
        let out = weighted_summation(&tape, &[b, b, b], w).unwrap();
        let got = tape.value(out);
        let want = tape.value(b);
        for (g, w_) in got.data().iter().zip(want.data()) {
            assert!((g - w_).abs() < 1e-12);
        }
    }

    #[test]
    fn squeeze_excite_with_zero_maps_halves_the_input() {
        let tape = Tape::new();
        let mut rng = seeds::rng(10);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let xv = tape.leaf(x.clone()).unwrap();
        let w1 = tape.leaf(Tensor::zeros(&[2, 3])).unwrap();
        let b1 = tape.leaf(Tensor::zeros(&[2])).unwrap();
        let w2 = tape.leaf(Tensor::zeros(&[3, 2])).unwrap();
        let b2 = tape.leaf(Tensor::zeros(&[3])).unwrap();
        let out = squeeze_excite(&tape, xv, w1, b1, w2, b2).unwrap();
        for (o, i) in tape.value(out).data().iter().zip(x.data()) {
            assert!((o - 0.5 * i).abs() < 1e-15);
        }
    }

    #[test]
    fn squeeze_excite_scalar_case_matches_hand_arithmetic() {
        // One channel, constant x = 2: pooled = 2, hidden = relu(0.5 * 2 + 0.1),
        // gate = sigmoid(-0.3 * 1.1 + 0.2), out = gate * 2.
        let tape = Tape::new();
        let xv = tape.leaf(Tensor::new(vec![1, 3], vec![2.0; 3]).unwrap()).unwrap();
        let w1 = tape.leaf(Tensor::new(vec![1, 1], vec![0.5]).unwrap()).unwrap();
        let b1 = tape.leaf(Tensor::vector(vec![0.1]).unwrap()).unwrap();
        let w2 = tape.leaf(Tensor::new(vec![1, 1], vec![-0.3]).unwrap()).unwrap();
        let b2 = tape.leaf(Tensor::vector(vec![0.2]).unwrap()).unwrap();
        let out = squeeze_excite(&tape, xv, w1, b1, w2, b2).unwrap();
        let gate = 1.0 / (1.0 + (-(-0.3f64 * 1.1 + 0.2)).exp());
        for &v in tape.value(out).data() {
            assert!((v - gate * 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_subset_scalar_block_matches_hand_unrolled_recurrence() {
        let cfg = NesConfig {
            channels: 2,
            frames: 1,
            subsets: 2,
            ws_branches: 1,
            se_reduction: 1,
            kernel: 1,
        };
        let mut params = NesBlockParams::zeros(&cfg).unwrap();
        // Hand-set scalars: subset 0 then subset 1.
        let vals = [
            [0.5, 0.1, 1.5, -0.2, 0.8, 0.05, 0.6, 0.3, -0.4, 0.2],
            [-0.7, 0.2, 0.9, 0.1, -1.1, 0.15, 0.5, -0.1, 0.7, -0.3],
        ];
        for (j, v) in vals.iter().enumerate() {
            let sub = &mut params.subsets[j];
            sub.pre_kernel.data_mut()[0] = v[0];
            sub.pre_bias.data_mut()[0] = v[1];
            sub.branch_kernels[0].data_mut()[0] = v[2];
            sub.branch_biases[0].data_mut()[0] = v[3];
            sub.post_kernel.data_mut()[0] = v[4];
            sub.post_bias.data_mut()[0] = v[5];
            sub.se.w1.data_mut()[0] = v[6];
            sub.se.b1.data_mut()[0] = v[7];
            sub.se.w2.data_mut()[0] = v[8];
            sub.se.b2.data_mut()[0] = v[9];
        }
        let (a, b) = (0.9, -0.6);
        let x = Tensor::new(vec![2, 1], vec![a, b]).unwrap();
        let h = forward_values(&x, &params, &cfg);

        let sigmoid = |t: f64| 1.0 / (1.0 + (-t).exp());
        let unroll = |u: f64, v: &[f64; 10]| {
            let pre = v[0] * u + v[1];
            let z = v[2] * pre + v[3];
            let post = v[4] * z + v[5];
            let gate = sigmoid(v[8] * (v[6] * post + v[7]).max(0.0) + v[9]);
            (z, gate * post)
        };
        let (z1, se1) = unroll(a, &vals[0]);
        let h1 = a + se1;
        let (_, se2) = unroll(b + z1, &vals[1]);
        let h2 = b + se2;

        assert!((h[0].data()[0] - h1).abs() < 1e-12, "h1 {} vs {}", h[0].data()[0], h1);
        assert!((h[1].data()[0] - h2).abs() < 1e-12, "h2 {} vs {}", h[1].data()[0], h2);
    }

    #[test]
    fn perturbing_a_subset_leaves_earlier_outputs_bit_identical() {
        let cfg = NesConfig {
            channels: 8,
            frames: 0,
            subsets: 4,
            ws_branches: 2,
            se_reduction: 2,
            kernel: 3,
        };
        let params = NesBlockParams::init(&cfg, 42).unwrap();
        let mut rng = seeds::rng(11);
        let x = Tensor::randn(&[8, 6], 1.0, &mut rng);
        let base = forward_values(&x, &params, &cfg);

        for m in 0..4 {
            let mut bumped = x.clone();
            for t in 0..6 {
                let i = (m * 2) * 6 + t;
                bumped.data_mut()[i] += 0.5;
            }
            let got = forward_values(&bumped, &params, &cfg);
            for j in 0..4 {
                if j < m {
                    assert_eq!(got[j], base[j], "h{j} moved when only x{m} changed");
                } else {
                    assert_ne!(got[j], base[j], "h{j} ignored a change in x{m}");
                }
            }
        }
    }

    #[test]
    fn block_rejects_mismatched_input_channels() {
        let cfg = small_cfg();
        let params = NesBlockParams::init(&cfg, 1).unwrap();
        let tape = Tape::new();
        let xv = tape.leaf(Tensor::zeros(&[6, 5])).unwrap();
        let vars = params.register(&tape).unwrap();
        assert!(nes_block_forward(&tape, xv, &vars, &cfg).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut cfg = small_cfg();
        cfg.subsets = 3;
        assert!(cfg.validate().is_err());
        cfg = small_cfg();
        cfg.kernel = 2;
        assert!(cfg.validate().is_err());
        cfg = small_cfg();
        cfg.ws_branches = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn full_block_gradient_checks_against_finite_differences() {
        let cfg = NesConfig {
            channels: 4,
            frames: 3,
            subsets: 2,
            ws_branches: 2,
            se_reduction: 2,
            kernel: 3,
        };
        let params = NesBlockParams::init(&cfg, 99).unwrap();
        let mut rng = seeds::rng(12);
        let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let probe_col = Tensor::randn(&[12, 1], 1.0, &mut rng);

        // Scalar functional: fixed linear readout of the concatenated outputs.
        let readout = {
            let cfg = cfg.clone();
            let params = params.clone();
            let probe_col = probe_col.clone();
            move |tape: &Tape, xv: Var| -> crate::error::Result<Var> {
                let vars = params.register(tape)?;
                let acts = nes_block_forward(tape, xv, &vars, &cfg)?;
                let cat = tape.concat_channels(&acts.h)?;
                let flat = tape.reshape(cat, &[1, 12])?;
                let col = tape.constant(&probe_col)?;
                let s = tape.matmul(flat, col)?;
                tape.reshape(s, &[1])
            }
        };
        let err = grad_check(&readout, &x, 1e-5).unwrap();
        assert!(err < 1e-4, "input gradient error {err}");

        // Same functional probed through one conv kernel instead of x.
        let x2 = x.clone();
        let kernel0 = params.subsets[0].pre_kernel.clone();
        let readout_k = {
            let cfg = cfg.clone();
            let params = params.clone();
            move |tape: &Tape, kv: Var| -> crate::error::Result<Var> {
                let mut vars = params.register(tape)?;
                vars.subsets[0].pre_kernel = kv;
                let xv = tape.constant(&x2)?;
                let acts = nes_block_forward(tape, xv, &vars, &cfg)?;
                let cat = tape.concat_channels(&acts.h)?;
                let flat = tape.reshape(cat, &[1, 12])?;
                let col = tape.constant(&probe_col)?;
                let s = tape.matmul(flat, col)?;
                tape.reshape(s, &[1])
            }
        };
        let err = grad_check(&readout_k, &kernel0, 1e-5).unwrap();
        assert!(err < 1e-4, "kernel gradient error {err}");
    }
}
