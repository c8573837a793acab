//! Sliding-window attention over channel-subset outputs plus the scoring head.
//!
//! Each subset output h_j attends over a clamped window of neighboring
//! subsets, j - window ..= j + window, with shared single-head projections:
//!
//! ```text
//! y_j = Wo * sum_m softmax_m((Wq h_j) . (Wk h_m) / sqrt(d)) * (Wv h_m)
//! o_j = h_j + y_j
//! ```
//!
//! applied independently per time frame. The head concatenates the subset
//! streams back to `[C, T]`, averages over time, and applies one affine map
//! to produce class logits. With `wo` all zero the attended variant and the
//! plain concat-pool head produce identical logits, which is the reduction
//! tests pin down.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nesblock::NesConfig;
use crate::seeds;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Logit index for the spoofed class.
pub const SPOOF_CLASS: usize = 0;
/// Logit index for the bonafide class.
pub const BONAFIDE_CLASS: usize = 1;

/// Attention window and head widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaConfig {
    /// Window radius; subset j sees subsets within `window` of j, clamped.
    pub window: usize,
    /// Projection width d of the query/key/value spaces.
    pub attn_width: usize,
    /// Output classes of the scoring head.
    pub classes: usize,
}

impl Default for LaConfig {
    fn default() -> Self {
        LaConfig { window: 1, attn_width: 16, classes: 2 }
    }
}

impl LaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attn_width == 0 {
            return Err(Error::invalid("LaConfig", "attn_width must be >= 1"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("LaConfig", "classes must be >= 2"));
        }
        Ok(())
    }
}

/// Shared projections of one attention sweep (no bias terms).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

/// The affine scoring head applied to the pooled feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

impl AttnParams {
    /// Random init, N(0, 1/sqrt(fan_in)) per map.
    pub fn init(nes: &NesConfig, cfg: &LaConfig, seed: u64) -> Result<AttnParams> {
        nes.validate()?;
        cfg.validate()?;
        let s = nes.subset_channels();
        let d = cfg.attn_width;
        let mut rng = seeds::rng(seeds::derive(seed, "attention.projections"));
        let sig_in = 1.0 / (s as f64).sqrt();
        let sig_out = 1.0 / (d as f64).sqrt();
        Ok(AttnParams {
            wq: Tensor::randn(&[d, s], sig_in, &mut rng),
            wk: Tensor::randn(&[d, s], sig_in, &mut rng),
            wv: Tensor::randn(&[d, s], sig_in, &mut rng),
            wo: Tensor::randn(&[s, d], sig_out, &mut rng),
        })
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}att.wq"), &self.wq);
        f(&format!("{prefix}att.wk"), &self.wk);
        f(&format!("{prefix}att.wv"), &self.wv);
        f(&format!("{prefix}att.wo"), &self.wo);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}att.wq"), &mut self.wq);
        f(&format!("{prefix}att.wk"), &mut self.wk);
        f(&format!("{prefix}att.wv"), &mut self.wv);
        f(&format!("{prefix}att.wo"), &mut self.wo);
    }

    pub fn register(&self, tape: &Tape) -> Result<AttnVars> {
        Ok(AttnVars {
            wq: tape.param(&self.wq)?,
            wk: tape.param(&self.wk)?,
            wv: tape.param(&self.wv)?,
            wo: tape.param(&self.wo)?,
        })
    }
}

impl HeadParams {
    pub fn init(channels: usize, classes: usize, seed: u64) -> HeadParams {
        let mut rng = seeds::rng(seeds::derive(seed, "attention.head"));
        let sigma = 1.0 / (channels as f64).sqrt();
        HeadParams {
            weight: Tensor::randn(&[classes, channels], sigma, &mut rng),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}head.weight"), &self.weight);
        f(&format!("{prefix}head.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}head.weight"), &mut self.weight);
        f(&format!("{prefix}head.bias"), &mut self.bias);
    }

    pub fn register(&self, tape: &Tape) -> Result<HeadVars> {
        Ok(HeadVars { weight: tape.param(&self.weight)?, bias: tape.param(&self.bias)? })
    }
}

/// Indices visible to subset `j` out of `total`, clamped to the ends
/// (no wraparound): max(0, j - window) ..= min(total - 1, j + window).
pub fn neighborhood(j: usize, total: usize, window: usize) -> Vec<usize> {
    assert!(j < total, "neighborhood: j {j} out of {total}");
    let lo = j.saturating_sub(window);
    let hi = (j + window).min(total - 1);
    (lo..=hi).collect()
}

/// Attend each subset over its clamped window; returns the J outputs y_j,
/// each the same shape as its h_j.
pub fn attend(tape: &Tape, h: &[Var], vars: &AttnVars, window: usize) -> Result<Vec<Var>> {
    if h.is_empty() {
        return Err(Error::invalid("attend", "empty subset list"));
    }
    let mut out = Vec::with_capacity(h.len());
    for j in 0..h.len() {
        let neigh: Vec<Var> = neighborhood(j, h.len(), window).into_iter().map(|m| h[m]).collect();
        out.push(tape.local_attention(h[j], &neigh, vars.wq, vars.wk, vars.wv, vars.wo)?);
    }
    Ok(out)
}

/// Concatenate subset streams, average over time, apply the affine head.
pub fn head_logits(tape: &Tape, parts: &[Var], head: &HeadVars) -> Result<Var> {
    let cat = tape.concat_channels(parts)?;
    let pooled = tape.global_avg_pool_time(cat)?;
    tape.affine(head.weight, pooled, head.bias)
}

/// Attended head: o_j = h_j + y_j, then concat, pool, affine.
pub fn la_head_forward(
    tape: &Tape,
    h: &[Var],
    attn: &AttnVars,
    head: &HeadVars,
    window: usize,
) -> Result<Var> {
    let o = aggregate(tape, h, attn, window)?;
    head_logits(tape, &o, head)
}

/// The attended residual streams o_j = h_j + y_j, before the head.
pub fn aggregate(tape: &Tape, h: &[Var], attn: &AttnVars, window: usize) -> Result<Vec<Var>> {
    let y = attend(tape, h, attn, window)?;
    h.iter().zip(&y).map(|(&hj, &yj)| tape.add(hj, yj)).collect()
}

/// Plain concat-pool head over the raw subset outputs (no attention).
pub fn x_head_forward(tape: &Tape, h: &[Var], head: &HeadVars) -> Result<Var> {
    head_logits(tape, h, head)
}

/// Detection score: bonafide logit minus spoof logit. Higher means more
/// bonafide; the orientation is recorded in score-file headers.
pub fn detection_score(logits: &Tensor) -> f64 {
    assert!(logits.len() > BONAFIDE_CLASS, "detection_score: need two logits");
    logits.data()[BONAFIDE_CLASS] - logits.data()[SPOOF_CLASS]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::nesblock::{nes_block_forward, NesBlockParams};

    fn nes_cfg(channels: usize, subsets: usize) -> NesConfig {
        NesConfig { channels, frames: 0, subsets, ws_branches: 2, se_reduction: 2, kernel: 3 }
    }

    fn random_subsets(seed: u64, j: usize, s: usize, t: usize) -> Vec<Tensor> {
        let mut rng = seeds::rng(seed);
        (0..j).map(|_| Tensor::randn(&[s, t], 1.0, &mut rng)).collect()
    }

    #[test]
    fn neighborhood_clamps_at_both_ends() {
        assert_eq!(neighborhood(0, 8, 1), vec![0, 1]);
        assert_eq!(neighborhood(3, 8, 1), vec![2, 3, 4]);
        assert_eq!(neighborhood(7, 8, 1), vec![6, 7]);
        assert_eq!(neighborhood(2, 5, 0), vec![2]);
        assert_eq!(neighborhood(2, 5, 10), vec![0, 1, 2, 3, 4]);
        assert_eq!(neighborhood(0, 1, 1), vec![0]);
    }

    #[test]
    fn zero_output_projection_reduces_to_the_plain_head() {
        let nes = nes_cfg(8, 4);
        let cfg = LaConfig { window: 1, attn_width: 3, classes: 2 };
        let mut attn = AttnParams::init(&nes, &cfg, 5).unwrap();
        for v in attn.wo.data_mut() {
            *v = 0.0;
        }
        let head = HeadParams::init(8, 2, 6);

        let tape = Tape::new();
        let h: Vec<Var> = random_subsets(13, 4, 2, 5)
            .into_iter()
            .map(|t| tape.leaf(t).unwrap())
            .collect();
        let av = attn.register(&tape).unwrap();
        let hv = head.register(&tape).unwrap();
        let la = tape.value(la_head_forward(&tape, &h, &av, &hv, 1).unwrap());
        let plain = tape.value(x_head_forward(&tape, &h, &hv).unwrap());
        for (a, b) in la.data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_inputs_pass_the_head_bias_through() {
        let nes = nes_cfg(4, 2);
        let cfg = LaConfig { window: 1, attn_width: 2, classes: 2 };
        let attn = AttnParams::init(&nes, &cfg, 7).unwrap();
        let mut head = HeadParams::init(4, 2, 8);
        head.bias = Tensor::vector(vec![0.3, -1.2]).unwrap();

        let tape = Tape::new();
        let h: Vec<Var> =
            (0..2).map(|_| tape.leaf(Tensor::zeros(&[2, 3])).unwrap()).collect();
        let av = attn.register(&tape).unwrap();
        let hv = head.register(&tape).unwrap();
        let logits = tape.value(la_head_forward(&tape, &h, &av, &hv, 1).unwrap());
        assert!((logits.data()[0] - 0.3).abs() < 1e-15);
        assert!((logits.data()[1] + 1.2).abs() < 1e-15);
    }

    #[test]
    fn identical_subsets_make_the_window_radius_irrelevant() {
        let nes = nes_cfg(12, 4);
        let cfg = LaConfig { window: 1, attn_width: 3, classes: 2 };
        let attn = AttnParams::init(&nes, &cfg, 9).unwrap();

        let tape = Tape::new();
        let mut rng = seeds::rng(14);
        let shared = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let h: Vec<Var> = (0..4).map(|_| tape.leaf(shared.clone()).unwrap()).collect();
        let av = attn.register(&tape).unwrap();
        let narrow = attend(&tape, &h, &av, 0).unwrap();
        let wide = attend(&tape, &h, &av, 3).unwrap();
        for (n, w) in narrow.iter().zip(&wide) {
            let (tn, tw) = (tape.value(*n), tape.value(*w));
            for (a, b) in tn.data().iter().zip(tw.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_output_shape_matches_input_shape() {
        let nes = nes_cfg(10, 5);
        let cfg = LaConfig { window: 2, attn_width: 4, classes: 2 };
        let attn = AttnParams::init(&nes, &cfg, 10).unwrap();
        let tape = Tape::new();
        let h: Vec<Var> = random_subsets(15, 5, 2, 7)
            .into_iter()
            .map(|t| tape.leaf(t).unwrap())
            .collect();
        let av = attn.register(&tape).unwrap();
        for (j, y) in attend(&tape, &h, &av, 2).unwrap().into_iter().enumerate() {
            assert_eq!(tape.shape_of(y), tape.shape_of(h[j]));
        }
    }

    #[test]
    fn perturbations_propagate_exactly_one_window_radius() {
        let (j_total, window) = (6usize, 1usize);
        let nes = nes_cfg(12, j_total);
        let cfg = LaConfig { window, attn_width: 3, classes: 2 };
        let attn = AttnParams::init(&nes, &cfg, 11).unwrap();
        let base_h = random_subsets(16, j_total, 2, 4);

        let eval = |h: &[Tensor]| -> Vec<Tensor> {
            let tape = Tape::new();
            let hv: Vec<Var> = h.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
            let av = attn.register(&tape).unwrap();
            attend(&tape, &hv, &av, window)
                .unwrap()
                .into_iter()
                .map(|y| tape.value(y))
                .collect()
        };
        let base_y = eval(&base_h);

        for m in 0..j_total {
            let mut bumped = base_h.clone();
            bumped[m].data_mut()[0] += 0.25;
            let y = eval(&bumped);
            for j in 0..j_total {
                let within = j.abs_diff(m) <= window;
                if within {
                    assert_ne!(y[j], base_y[j], "y{j} ignored h{m}");
                } else {
                    assert_eq!(y[j], base_y[j], "y{j} outside the window saw h{m}");
                }
            }
        }
    }

    #[test]
    fn two_subset_head_matches_hand_computation() {
        // J=2, C=4 (2 per subset), one frame, d = 1: everything scalar enough
        // to unroll on paper.
        let attn = AttnParams {
            wq: Tensor::matrix(1, 2, vec![0.5, -0.3]).unwrap(),
            wk: Tensor::matrix(1, 2, vec![0.2, 0.4]).unwrap(),
            wv: Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap(),
            wo: Tensor::matrix(2, 1, vec![0.7, -0.2]).unwrap(),
        };
        let head = HeadParams {
            weight: Tensor::matrix(2, 4, vec![0.1, 0.2, 0.3, 0.4, -0.1, 0.5, -0.2, 0.6]).unwrap(),
            bias: Tensor::vector(vec![0.05, -0.05]).unwrap(),
        };
        let h1 = [0.9, -0.4];
        let h2 = [-0.6, 0.8];

        let tape = Tape::new();
        let hv = vec![
            tape.leaf(Tensor::new(vec![2, 1], h1.to_vec()).unwrap()).unwrap(),
            tape.leaf(Tensor::new(vec![2, 1], h2.to_vec()).unwrap()).unwrap(),
        ];
        let av = attn.register(&tape).unwrap();
        let hd = head.register(&tape).unwrap();
        let logits = tape.value(la_head_forward(&tape, &hv, &av, &hd, 1).unwrap());

        // Hand evaluation.
        let dot = |w: &[f64], x: &[f64]| w[0] * x[0] + w[1] * x[1];
        let q = [dot(&[0.5, -0.3], &h1), dot(&[0.5, -0.3], &h2)];
        let k = [dot(&[0.2, 0.4], &h1), dot(&[0.2, 0.4], &h2)];
        let v = [dot(&[1.0, -1.0], &h1), dot(&[1.0, -1.0], &h2)];
        let mut o = [[0.0; 2]; 2];
        for j in 0..2 {
            let (e1, e2) = ((q[j] * k[0]).exp(), (q[j] * k[1]).exp());
            let mix = (e1 * v[0] + e2 * v[1]) / (e1 + e2);
            let hj = if j == 0 { h1 } else { h2 };
            o[j] = [hj[0] + 0.7 * mix, hj[1] - 0.2 * mix];
        }
        let pooled = [o[0][0], o[0][1], o[1][0], o[1][1]];
        let w = head.weight.data();
        let want = [
            0.05 + (0..4).map(|i| w[i] * pooled[i]).sum::<f64>(),
            -0.05 + (0..4).map(|i| w[4 + i] * pooled[i]).sum::<f64>(),
        ];
        assert!((logits.data()[0] - want[0]).abs() < 1e-12, "{} vs {}", logits.data()[0], want[0]);
        assert!((logits.data()[1] - want[1]).abs() < 1e-12, "{} vs {}", logits.data()[1], want[1]);
    }

    #[test]
    fn detection_score_is_bonafide_minus_spoof() {
        let logits = Tensor::vector(vec![0.25, 1.0]).unwrap();
        assert!((detection_score(&logits) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn block_plus_head_gradient_checks_end_to_end() {
        let nes = NesConfig {
            channels: 4,
            frames: 3,
            subsets: 2,
            ws_branches: 2,
            se_reduction: 2,
            kernel: 3,
        };
        let cfg = LaConfig { window: 1, attn_width: 2, classes: 2 };
        let block = NesBlockParams::init(&nes, 20).unwrap();
        let attn = AttnParams::init(&nes, &cfg, 21).unwrap();
        let head = HeadParams::init(4, 2, 22);
        let mut rng = seeds::rng(23);
        let x = Tensor::randn(&[4, 3], 1.0, &mut rng);

        let run = {
            let (nes, block, attn, head) = (nes.clone(), block.clone(), attn.clone(), head.clone());
            let x = x.clone();
            move |tape: &Tape, probe: Var, role: usize| -> Result<Var> {
                let bv = block.register(tape)?;
                let mut av = attn.register(tape)?;
                let hv = head.register(tape)?;
                let xv = if role == 0 { probe } else { tape.constant(&x)? };
                if role == 1 {
                    av.wq = probe;
                }
                let acts = nes_block_forward(tape, xv, &bv, &nes)?;
                let logits = la_head_forward(tape, &acts.h, &av, &hv, cfg.window)?;
                tape.cross_entropy(logits, BONAFIDE_CLASS)
            }
        };

        let run_x = {
            let run = run.clone();
            move |t: &Tape, p: Var| run(t, p, 0)
        };
        let err = grad_check(&run_x, &x, 1e-5).unwrap();
        assert!(err < 1e-4, "input gradient error {err}");

        let wq = attn.wq.clone();
        let run_q = move |t: &Tape, p: Var| run(t, p, 1);
        let err = grad_check(&run_q, &wq, 1e-5).unwrap();
        assert!(err < 1e-4, "wq gradient error {err}");
    }
}
