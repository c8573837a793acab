//! Reverse-mode automatic differentiation on a tape.
//!
//! Every operation records its inputs and enough metadata to replay a
//! hand-written vector-Jacobian product during [`Tape::backward`]. A
//! [`Var`] is a cheap handle into one tape; mixing tapes is a programmer
//! error and panics. Each op checks its output (and, during backward,
//! every gradient contribution) for NaN/Inf and fails fast naming the op.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{check_finite, Tensor};

/// Additive floor inside `frame_energy`'s log so silent frames stay finite.
pub const LOG_ENERGY_EPS: f64 = 1e-6;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug)]
pub struct Var {
    tape: u64,
    index: usize,
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Matmul { a: usize, b: usize },
    Affine { w: usize, x: usize, b: usize },
    Conv1d { x: usize, k: usize, b: usize, dilation: usize },
    Reshape { x: usize },
    Softmax { x: usize, axis: usize },
    Sigmoid { x: usize },
    Relu { x: usize },
    AvgPoolTime { x: usize },
    ConcatChannels { xs: Vec<usize> },
    SliceChannels { x: usize, lo: usize },
    CrossEntropy { logits: usize, label: usize },
    MulByEntry { x: usize, w: usize, idx: usize },
    ScaleChannels { x: usize, s: usize },
    StackScalars { xs: Vec<usize> },
    MeanVars { xs: Vec<usize> },
    LocalAttention { query: usize, neighbors: Vec<usize>, wq: usize, wk: usize, wv: usize, wo: usize },
    FrameEnergy { wav: usize, proj: usize, hop: usize },
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add { .. } => "add",
        Op::Scale { .. } => "scale",
        Op::Matmul { .. } => "matmul",
        Op::Affine { .. } => "affine",
        Op::Conv1d { .. } => "conv1d",
        Op::Reshape { .. } => "reshape",
        Op::Softmax { .. } => "softmax",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Relu { .. } => "relu",
        Op::AvgPoolTime { .. } => "global_avg_pool_time",
        Op::ConcatChannels { .. } => "concat_channels",
        Op::SliceChannels { .. } => "slice_channels",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::MulByEntry { .. } => "mul_by_entry",
        Op::ScaleChannels { .. } => "scale_channels",
        Op::StackScalars { .. } => "stack_scalars",
        Op::MeanVars { .. } => "mean_vars",
        Op::LocalAttention { .. } => "local_attention",
        Op::FrameEnergy { .. } => "frame_energy",
    }
}

pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn idx(&self, v: Var, op: &'static str) -> usize {
        assert_eq!(v.tape, self.id, "{op}: Var belongs to a different tape");
        v.index
    }

    fn push(&self, value: Tensor, needs_grad: bool, op: Op) -> Result<Var> {
        check_finite(op_name(&op), value.data())?;
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node { value, grad: None, needs_grad, op });
        Ok(Var { tape: self.id, index })
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Registers a tensor as a tape input, honoring its requires_grad flag.
    pub fn leaf(&self, t: Tensor) -> Result<Var> {
        check_finite("leaf", t.data())?;
        let needs = t.requires_grad();
        self.push(t, needs, Op::Leaf)
    }

    /// Registers a snapshot of a parameter tensor with gradients enabled.
    pub fn param(&self, t: &Tensor) -> Result<Var> {
        self.leaf(t.clone().with_requires_grad(true))
    }

    /// Registers a snapshot of a tensor with gradients disabled.
    pub fn constant(&self, t: &Tensor) -> Result<Var> {
        self.leaf(t.clone().with_requires_grad(false))
    }

    /// Handles of every gradient-enabled leaf created at or after `start`
    /// (a previous `len()` reading), in creation order. Lets a caller pair
    /// a block of `param` registrations with externally known names.
    pub fn params_since(&self, start: usize) -> Vec<Var> {
        let nodes = self.nodes.borrow();
        (start..nodes.len())
            .filter(|&i| nodes[i].needs_grad && matches!(nodes[i].op, Op::Leaf))
            .map(|index| Var { tape: self.id, index })
            .collect()
    }

    pub fn value(&self, v: Var) -> Tensor {
        let i = self.idx(v, "value");
        self.nodes.borrow()[i].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        let i = self.idx(v, "shape_of");
        self.nodes.borrow()[i].value.shape().to_vec()
    }

    /// Scalar read; panics if the Var is not a single-element tensor.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let i = self.idx(v, "scalar_value");
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[i].value.len(), 1, "scalar_value: tensor has more than one element");
        nodes[i].value.data()[0]
    }

    /// Gradient of the last backward pass, if this Var participated.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let i = self.idx(v, "grad");
        let nodes = self.nodes.borrow();
        let node = &nodes[i];
        node.grad.as_ref().map(|g| {
            Tensor::from_parts(node.value.shape().to_vec(), g.clone())
        })
    }

    // ---- forward ops ----

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a, "add"), self.idx(b, "add"));
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[ai].value, &nodes[bi].value);
            if ta.shape() != tb.shape() {
                return Err(Error::shape(
                    "add",
                    format!("{:?} vs {:?}", ta.shape(), tb.shape()),
                ));
            }
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
            Tensor::from_parts(ta.shape().to_vec(), data)
        };
        let needs = self.needs(&[ai, bi]);
        self.push(out, needs, Op::Add { a: ai, b: bi })
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::invalid("scale", format!("factor {c} is not finite")));
        }
        let xi = self.idx(x, "scale");
        let out = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[xi].value;
            Tensor::from_parts(tx.shape().to_vec(), tx.data().iter().map(|v| v * c).collect())
        };
        let needs = self.needs(&[xi]);
        self.push(out, needs, Op::Scale { x: xi, c })
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a, "matmul"), self.idx(b, "matmul"));
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[ai].value, &nodes[bi].value);
            if ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0) {
                return Err(Error::shape(
                    "matmul",
                    format!("{:?} x {:?}", ta.shape(), tb.shape()),
                ));
            }
            let (m, n, p) = (ta.dim(0), ta.dim(1), tb.dim(1));
            let (da, db) = (ta.data(), tb.data());
            let mut data = vec![0.0; m * p];
            for i in 0..m {
                for kk in 0..n {
                    let aik = da[i * n + kk];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &db[kk * p..(kk + 1) * p];
                    let orow = &mut data[i * p..(i + 1) * p];
                    for j in 0..p {
                        orow[j] += aik * brow[j];
                    }
                }
            }
            Tensor::from_parts(vec![m, p], data)
        };
        let needs = self.needs(&[ai, bi]);
        self.push(out, needs, Op::Matmul { a: ai, b: bi })
    }

    /// y = W·x + b for a 1-d x.
    pub fn affine(&self, w: Var, x: Var, b: Var) -> Result<Var> {
        let (wi, xi, bi) = (self.idx(w, "affine"), self.idx(x, "affine"), self.idx(b, "affine"));
        let out = {
            let nodes = self.nodes.borrow();
            let (tw, tx, tb) = (&nodes[wi].value, &nodes[xi].value, &nodes[bi].value);
            if tw.rank() != 2 || tx.rank() != 1 || tb.rank() != 1
                || tw.dim(1) != tx.dim(0) || tw.dim(0) != tb.dim(0)
            {
                return Err(Error::shape(
                    "affine",
                    format!("W {:?}, x {:?}, b {:?}", tw.shape(), tx.shape(), tb.shape()),
                ));
            }
            let (o, n) = (tw.dim(0), tw.dim(1));
            let (dw, dx, db) = (tw.data(), tx.data(), tb.data());
            let mut data = vec![0.0; o];
            for r in 0..o {
                let row = &dw[r * n..(r + 1) * n];
                let mut acc = db[r];
                for c in 0..n {
                    acc += row[c] * dx[c];
                }
                data[r] = acc;
            }
            Tensor::from_parts(vec![o], data)
        };
        let needs = self.needs(&[wi, xi, bi]);
        self.push(out, needs, Op::Affine { w: wi, x: xi, b: bi })
    }

    /// Cross-correlation along time with "same" zero padding.
    /// kernel is [C_out, C_in, k] with k odd; dilation widens the taps.
    pub fn conv1d(&self, x: Var, kernel: Var, bias: Var, dilation: usize) -> Result<Var> {
        let (xi, ki, bi) =
            (self.idx(x, "conv1d"), self.idx(kernel, "conv1d"), self.idx(bias, "conv1d"));
        if dilation == 0 {
            return Err(Error::invalid("conv1d", "dilation must be >= 1"));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let (tx, tk, tb) = (&nodes[xi].value, &nodes[ki].value, &nodes[bi].value);
            if tx.rank() != 2 || tk.rank() != 3 || tb.rank() != 1 {
                return Err(Error::shape(
                    "conv1d",
                    format!(
                        "expected x[C_in×T], kernel[C_out×C_in×k], bias[C_out]; got {:?}, {:?}, {:?}",
                        tx.shape(), tk.shape(), tb.shape()
                    ),
                ));
            }
            let (cin, t_len) = (tx.dim(0), tx.dim(1));
            let (cout, kc, k) = (tk.dim(0), tk.dim(1), tk.dim(2));
            if kc != cin || tb.dim(0) != cout {
                return Err(Error::shape(
                    "conv1d",
                    format!("x {:?} vs kernel {:?} vs bias {:?}", tx.shape(), tk.shape(), tb.shape()),
                ));
            }
            if k % 2 == 0 {
                return Err(Error::invalid("conv1d", format!("kernel width {k} must be odd")));
            }
            let data = conv1d_forward(tx.data(), tk.data(), tb.data(), cin, t_len, cout, k, dilation);
            Tensor::from_parts(vec![cout, t_len], data)
        };
        let needs = self.needs(&[xi, ki, bi]);
        self.push(out, needs, Op::Conv1d { x: xi, k: ki, b: bi, dilation })
    }

    /// Same buffer, new extents; the element count must not change.
    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x, "reshape");
        let out = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[xi].value;
            if shape.is_empty() || shape.contains(&0)
                || shape.iter().product::<usize>() != tx.len()
            {
                return Err(Error::shape(
                    "reshape",
                    format!("{:?} -> {shape:?}", tx.shape()),
                ));
            }
            Tensor::from_parts(shape.to_vec(), tx.data().to_vec())
        };
        let needs = self.needs(&[xi]);
        self.push(out, needs, Op::Reshape { x: xi })
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let xi = self.idx(x, "softmax");
        let out = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[xi].value;
            if axis >= tx.rank() {
                return Err(Error::invalid(
                    "softmax",
                    format!("axis {axis} out of range for shape {:?}", tx.shape()),
                ));
            }
            let mut data = tx.data().to_vec();
            for_each_lane(tx.shape(), axis, |base, stride, lane| {
                let mut mx = f64::NEG_INFINITY;
                for i in 0..lane {
                    mx = mx.max(data[base + i * stride]);
                }
                let mut sum = 0.0;
                for i in 0..lane {
                    let e = (data[base + i * stride] - mx).exp();
                    data[base + i * stride] = e;
                    sum += e;
                }
                for i in 0..lane {
                    data[base + i * stride] /= sum;
                }
            });
            Tensor::from_parts(tx.shape().to_vec(), data)
        };
        let needs = self.needs(&[xi]);
        self.push(out, needs, Op::Softmax { x: xi, axis })
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        let xi = self.idx(x, "sigmoid");
        let out = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[xi].value;
            let data = tx.data().iter().map(|&v| stable_sigmoid(v)).collect();
            Tensor::from_parts(tx.shape().to_vec(), data)
        };
        let needs = self.needs(&[xi]);
        self.push(out, needs, Op::Sigmoid { x: xi })
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        let xi = self.idx(x, "relu");
        let out = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[xi].value;
            let data = tx.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
            Tensor::from_parts(tx.shape().to_vec(), data)
        };
        let needs = self.needs(&[xi]);
        self.push(out, needs, Op::Relu { x: xi })
    }

    /// [C×T] -> [C], mean over time.
    pub fn global_avg_pool_time(&self, x: Var) -> Result<Var> {
        let xi = self.idx(x, "global_avg_pool_time");
        let out = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[xi].value;
            if tx.rank() != 2 {
                return Err(Error::shape(
                    "global_avg_pool_time",
                    format!("expected [C×T], got {:?}", tx.shape()),
                ));
            }
            let (c, t) = (tx.dim(0), tx.dim(1));
            let d = tx.data();
            let mut data = vec![0.0; c];
            for ch in 0..c {
                let row = &d[ch * t..(ch + 1) * t];
                data[ch] = row.iter().sum::<f64>() / t as f64;
            }
            Tensor::from_parts(vec![c], data)
        };
        let needs = self.needs(&[xi]);
        self.push(out, needs, Op::AvgPoolTime { x: xi })
    }

    /// Stacks [c_i×T] blocks along the channel axis.
    pub fn concat_channels(&self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("concat_channels", "no inputs"));
        }
        let ids: Vec<usize> = xs.iter().map(|&v| self.idx(v, "concat_channels")).collect();
        let out = {
            let nodes = self.nodes.borrow();
            let t_len = {
                let first = &nodes[ids[0]].value;
                if first.rank() != 2 {
                    return Err(Error::shape(
                        "concat_channels",
                        format!("expected [C×T] inputs, got {:?}", first.shape()),
                    ));
                }
                first.dim(1)
            };
            let mut total_c = 0;
            let mut data = Vec::new();
            for &id in &ids {
                let t = &nodes[id].value;
                if t.rank() != 2 || t.dim(1) != t_len {
                    return Err(Error::shape(
                        "concat_channels",
                        format!("inconsistent input {:?}, expected T={t_len}", t.shape()),
                    ));
                }
                total_c += t.dim(0);
                data.extend_from_slice(t.data());
            }
            Tensor::from_parts(vec![total_c, t_len], data)
        };
        let needs = self.needs(&ids);
        self.push(out, needs, Op::ConcatChannels { xs: ids })
    }

    /// Channel rows lo..hi of a [C×T] tensor.
    pub fn slice_channels(&self, x: Var, lo: usize, hi: usize) -> Result<Var> {
        let xi = self.idx(x, "slice_channels");
        let out = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[xi].value;
            if tx.rank() != 2 || lo >= hi || hi > tx.dim(0) {
                return Err(Error::shape(
                    "slice_channels",
                    format!("rows {lo}..{hi} of {:?}", tx.shape()),
                ));
            }
            let t = tx.dim(1);
            let data = tx.data()[lo * t..hi * t].to_vec();
            Tensor::from_parts(vec![hi - lo, t], data)
        };
        let needs = self.needs(&[xi]);
        self.push(out, needs, Op::SliceChannels { x: xi, lo })
    }

    /// Splits [C×T] into J contiguous channel subsets of C/J rows each.
    pub fn split_channels(&self, x: Var, j: usize) -> Result<Vec<Var>> {
        let xi = self.idx(x, "split_channels");
        let c = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[xi].value;
            if tx.rank() != 2 {
                return Err(Error::shape(
                    "split_channels",
                    format!("expected [C×T], got {:?}", tx.shape()),
                ));
            }
            tx.dim(0)
        };
        if j == 0 || c % j != 0 {
            return Err(Error::invalid(
                "split_channels",
                format!("J={j} must divide C={c}"),
            ));
        }
        let s = c / j;
        (0..j).map(|i| self.slice_channels(x, i * s, (i + 1) * s)).collect()
    }

    /// Negative log-likelihood of `label` under softmax(logits); scalar.
    pub fn cross_entropy(&self, logits: Var, label: usize) -> Result<Var> {
        let li = self.idx(logits, "cross_entropy");
        let out = {
            let nodes = self.nodes.borrow();
            let tl = &nodes[li].value;
            if tl.rank() != 1 {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("expected 1-d logits, got {:?}", tl.shape()),
                ));
            }
            if label >= tl.dim(0) {
                return Err(Error::invalid(
                    "cross_entropy",
                    format!("label {label} out of range for {} classes", tl.dim(0)),
                ));
            }
            let d = tl.data();
            let mx = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + d.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            Tensor::scalar(lse - d[label])
        };
        let needs = self.needs(&[li]);
        self.push(out, needs, Op::CrossEntropy { logits: li, label })
    }

    /// x scaled by the idx-th entry of a 1-d weight vector.
    pub fn mul_by_entry(&self, x: Var, w: Var, idx: usize) -> Result<Var> {
        let (xi, wi) = (self.idx(x, "mul_by_entry"), self.idx(w, "mul_by_entry"));
        let out = {
            let nodes = self.nodes.borrow();
            let (tx, tw) = (&nodes[xi].value, &nodes[wi].value);
            if tw.rank() != 1 || idx >= tw.dim(0) {
                return Err(Error::invalid(
                    "mul_by_entry",
                    format!("entry {idx} of weight shape {:?}", tw.shape()),
                ));
            }
            let c = tw.data()[idx];
            Tensor::from_parts(tx.shape().to_vec(), tx.data().iter().map(|v| v * c).collect())
        };
        let needs = self.needs(&[xi, wi]);
        self.push(out, needs, Op::MulByEntry { x: xi, w: wi, idx })
    }

    /// out[c,t] = x[c,t] * s[c]; the SE gating step.
    pub fn scale_channels(&self, x: Var, s: Var) -> Result<Var> {
        let (xi, si) = (self.idx(x, "scale_channels"), self.idx(s, "scale_channels"));
        let out = {
            let nodes = self.nodes.borrow();
            let (tx, ts) = (&nodes[xi].value, &nodes[si].value);
            if tx.rank() != 2 || ts.rank() != 1 || ts.dim(0) != tx.dim(0) {
                return Err(Error::shape(
                    "scale_channels",
                    format!("x {:?} vs s {:?}", tx.shape(), ts.shape()),
                ));
            }
            let (c, t) = (tx.dim(0), tx.dim(1));
            let (dx, ds) = (tx.data(), ts.data());
            let mut data = vec![0.0; c * t];
            for ch in 0..c {
                let g = ds[ch];
                for ti in 0..t {
                    data[ch * t + ti] = dx[ch * t + ti] * g;
                }
            }
            Tensor::from_parts(vec![c, t], data)
        };
        let needs = self.needs(&[xi, si]);
        self.push(out, needs, Op::ScaleChannels { x: xi, s: si })
    }

    /// Collects scalar Vars into a 1-d vector.
    pub fn stack_scalars(&self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("stack_scalars", "no inputs"));
        }
        let ids: Vec<usize> = xs.iter().map(|&v| self.idx(v, "stack_scalars")).collect();
        let out = {
            let nodes = self.nodes.borrow();
            let mut data = Vec::with_capacity(ids.len());
            for &id in &ids {
                let t = &nodes[id].value;
                if t.len() != 1 {
                    return Err(Error::shape(
                        "stack_scalars",
                        format!("expected scalars, got {:?}", t.shape()),
                    ));
                }
                data.push(t.data()[0]);
            }
            Tensor::from_parts(vec![ids.len()], data)
        };
        let needs = self.needs(&ids);
        self.push(out, needs, Op::StackScalars { xs: ids })
    }

    /// Mean of scalar Vars; the batch-loss reducer.
    pub fn mean_vars(&self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("mean_vars", "no inputs"));
        }
        let ids: Vec<usize> = xs.iter().map(|&v| self.idx(v, "mean_vars")).collect();
        let out = {
            let nodes = self.nodes.borrow();
            let mut acc = 0.0;
            for &id in &ids {
                let t = &nodes[id].value;
                if t.len() != 1 {
                    return Err(Error::shape(
                        "mean_vars",
                        format!("expected scalars, got {:?}", t.shape()),
                    ));
                }
                acc += t.data()[0];
            }
            Tensor::scalar(acc / ids.len() as f64)
        };
        let needs = self.needs(&ids);
        self.push(out, needs, Op::MeanVars { xs: ids })
    }

    /// Single-head scaled dot-product attention of a query block over its
    /// neighbor blocks, evaluated independently at every time frame.
    ///
    /// query and each neighbor are [S×T]; wq/wk/wv are [d×S]; wo is [S×d].
    /// At frame t: q = Wq·query[:,t], k_m/v_m from neighbor m, weights are
    /// softmax(q·k_m/√d) over m, and the output column is Wo·Σ_m α_m v_m.
    pub fn local_attention(
        &self,
        query: Var,
        neighbors: &[Var],
        wq: Var,
        wk: Var,
        wv: Var,
        wo: Var,
    ) -> Result<Var> {
        if neighbors.is_empty() {
            return Err(Error::invalid("local_attention", "empty neighborhood"));
        }
        let qi = self.idx(query, "local_attention");
        let nids: Vec<usize> = neighbors.iter().map(|&v| self.idx(v, "local_attention")).collect();
        let (wqi, wki, wvi, woi) = (
            self.idx(wq, "local_attention"),
            self.idx(wk, "local_attention"),
            self.idx(wv, "local_attention"),
            self.idx(wo, "local_attention"),
        );
        let out = {
            let nodes = self.nodes.borrow();
            let tq = &nodes[qi].value;
            if tq.rank() != 2 {
                return Err(Error::shape(
                    "local_attention",
                    format!("query must be [S×T], got {:?}", tq.shape()),
                ));
            }
            let (s, t_len) = (tq.dim(0), tq.dim(1));
            for &id in &nids {
                let tn = &nodes[id].value;
                if tn.shape() != tq.shape() {
                    return Err(Error::shape(
                        "local_attention",
                        format!("neighbor {:?} vs query {:?}", tn.shape(), tq.shape()),
                    ));
                }
            }
            let (twq, twk, twv, two) =
                (&nodes[wqi].value, &nodes[wki].value, &nodes[wvi].value, &nodes[woi].value);
            if twq.rank() != 2 || twq.dim(1) != s || twk.shape() != twq.shape()
                || twv.shape() != twq.shape()
                || two.rank() != 2 || two.dim(0) != s || two.dim(1) != twq.dim(0)
            {
                return Err(Error::shape(
                    "local_attention",
                    format!(
                        "projections wq {:?}, wk {:?}, wv {:?}, wo {:?} for S={s}",
                        twq.shape(), twk.shape(), twv.shape(), two.shape()
                    ),
                ));
            }
            let d = twq.dim(0);
            let nvals: Vec<&[f64]> = nids.iter().map(|&id| nodes[id].value.data()).collect();
            let data = attention_forward(
                tq.data(), &nvals, twq.data(), twk.data(), twv.data(), two.data(), s, t_len, d,
            );
            Tensor::from_parts(vec![s, t_len], data)
        };
        let mut all = vec![qi, wqi, wki, wvi, woi];
        all.extend_from_slice(&nids);
        let needs = self.needs(&all);
        self.push(out, needs, Op::LocalAttention { query: qi, neighbors: nids, wq: wqi, wk: wki, wv: wvi, wo: woi })
    }

    /// Log-energy of seeded projections over strided frames:
    /// out[c,t] = ln(eps + (proj[c,:]·wav[t·hop .. t·hop+win])²).
    pub fn frame_energy(&self, wav: Var, proj: Var, hop: usize) -> Result<Var> {
        let (wavi, pi) = (self.idx(wav, "frame_energy"), self.idx(proj, "frame_energy"));
        if hop == 0 {
            return Err(Error::invalid("frame_energy", "hop must be >= 1"));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let (tw, tp) = (&nodes[wavi].value, &nodes[pi].value);
            if tw.rank() != 1 || tp.rank() != 2 {
                return Err(Error::shape(
                    "frame_energy",
                    format!("expected wav[N], proj[C×win]; got {:?}, {:?}", tw.shape(), tp.shape()),
                ));
            }
            let n = tw.dim(0);
            let (c, win) = (tp.dim(0), tp.dim(1));
            if n < win {
                return Err(Error::shape(
                    "frame_energy",
                    format!("waveform length {n} shorter than window {win}"),
                ));
            }
            let t_out = (n - win) / hop + 1;
            let (dw, dp) = (tw.data(), tp.data());
            let mut data = vec![0.0; c * t_out];
            for ch in 0..c {
                let prow = &dp[ch * win..(ch + 1) * win];
                for t in 0..t_out {
                    let frame = &dw[t * hop..t * hop + win];
                    let mut p = 0.0;
                    for i in 0..win {
                        p += prow[i] * frame[i];
                    }
                    data[ch * t_out + t] = (LOG_ENERGY_EPS + p * p).ln();
                }
            }
            Tensor::from_parts(vec![c, t_out], data)
        };
        let needs = self.needs(&[wavi, pi]);
        self.push(out, needs, Op::FrameEnergy { wav: wavi, proj: pi, hop })
    }

    // ---- backward ----

    /// Reverse replay from a scalar loss. Gradients land on every node that
    /// participates; read them with [`Tape::grad`].
    pub fn backward(&self, loss: Var) -> Result<()> {
        let li = self.idx(loss, "backward");
        let mut nodes = self.nodes.borrow_mut();
        if nodes[li].value.len() != 1 {
            return Err(Error::invalid("backward", "loss must be scalar"));
        }
        if !nodes[li].needs_grad {
            return Err(Error::invalid("backward", "loss does not depend on any differentiable leaf"));
        }
        for n in nodes.iter_mut() {
            n.grad = None;
        }
        nodes[li].grad = Some(vec![1.0]);

        for i in (0..=li).rev() {
            if !nodes[i].needs_grad || nodes[i].grad.is_none() {
                continue;
            }
            let op = nodes[i].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let gout = nodes[i].grad.take().expect("checked above");
            backward_step(&mut nodes, i, &op, &gout)?;
            nodes[i].grad = Some(gout);
        }
        Ok(())
    }
}

// Gradient accumulation into an input node, skipping non-participating ones.
fn accumulate(nodes: &mut [Node], idx: usize, contrib: Vec<f64>) {
    if !nodes[idx].needs_grad {
        return;
    }
    debug_assert_eq!(contrib.len(), nodes[idx].value.len());
    match &mut nodes[idx].grad {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(&contrib) {
                *gi += ci;
            }
        }
        None => nodes[idx].grad = Some(contrib),
    }
}

fn check_grad_finite(op: &Op, contrib: &[f64]) -> Result<()> {
    check_finite(&format!("backward({})", op_name(op)), contrib)
}

// Index loops in the conv arms mirror the kernel/time geometry on purpose.
#[allow(clippy::needless_range_loop)]
fn backward_step(nodes: &mut [Node], i: usize, op: &Op, gout: &[f64]) -> Result<()> {
    match *op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            accumulate(nodes, a, gout.to_vec());
            accumulate(nodes, b, gout.to_vec());
        }
        Op::Scale { x, c } => {
            let gx: Vec<f64> = gout.iter().map(|g| g * c).collect();
            check_grad_finite(op, &gx)?;
            accumulate(nodes, x, gx);
        }
        Op::Matmul { a, b } => {
            let (m, n) = (nodes[a].value.dim(0), nodes[a].value.dim(1));
            let p = nodes[b].value.dim(1);
            if nodes[a].needs_grad {
                let db = nodes[b].value.data();
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    for kk in 0..n {
                        let brow = &db[kk * p..(kk + 1) * p];
                        let grow = &gout[r * p..(r + 1) * p];
                        let mut acc = 0.0;
                        for j in 0..p {
                            acc += grow[j] * brow[j];
                        }
                        ga[r * n + kk] = acc;
                    }
                }
                check_grad_finite(op, &ga)?;
                accumulate(nodes, a, ga);
            }
            if nodes[b].needs_grad {
                let da = nodes[a].value.data();
                let mut gb = vec![0.0; n * p];
                for kk in 0..n {
                    for r in 0..m {
                        let arv = da[r * n + kk];
                        if arv == 0.0 {
                            continue;
                        }
                        let grow = &gout[r * p..(r + 1) * p];
                        let brow = &mut gb[kk * p..(kk + 1) * p];
                        for j in 0..p {
                            brow[j] += arv * grow[j];
                        }
                    }
                }
                check_grad_finite(op, &gb)?;
                accumulate(nodes, b, gb);
            }
        }
        Op::Affine { w, x, b } => {
            let (o, n) = (nodes[w].value.dim(0), nodes[w].value.dim(1));
            if nodes[w].needs_grad {
                let dx = nodes[x].value.data();
                let mut gw = vec![0.0; o * n];
                for r in 0..o {
                    for c in 0..n {
                        gw[r * n + c] = gout[r] * dx[c];
                    }
                }
                check_grad_finite(op, &gw)?;
                accumulate(nodes, w, gw);
            }
            if nodes[x].needs_grad {
                let dw = nodes[w].value.data();
                let mut gx = vec![0.0; n];
                for r in 0..o {
                    let row = &dw[r * n..(r + 1) * n];
                    for c in 0..n {
                        gx[c] += row[c] * gout[r];
                    }
                }
                check_grad_finite(op, &gx)?;
                accumulate(nodes, x, gx);
            }
            if nodes[b].needs_grad {
                accumulate(nodes, b, gout.to_vec());
            }
        }
        Op::Conv1d { x, k, b, dilation } => {
            let (cin, t_len) = (nodes[x].value.dim(0), nodes[x].value.dim(1));
            let (cout, kk) = (nodes[k].value.dim(0), nodes[k].value.dim(2));
            let ctr = (kk as isize - 1) / 2;
            if nodes[x].needs_grad {
                let dk = nodes[k].value.data();
                let mut gx = vec![0.0; cin * t_len];
                for o in 0..cout {
                    for c in 0..cin {
                        let krow = &dk[(o * cin + c) * kk..(o * cin + c + 1) * kk];
                        for i in 0..kk {
                            let off = dilation as isize * (i as isize - ctr);
                            let kv = krow[i];
                            if kv == 0.0 {
                                continue;
                            }
                            for t in 0..t_len {
                                let tt = t as isize + off;
                                if tt >= 0 && (tt as usize) < t_len {
                                    gx[c * t_len + tt as usize] += kv * gout[o * t_len + t];
                                }
                            }
                        }
                    }
                }
                check_grad_finite(op, &gx)?;
                accumulate(nodes, x, gx);
            }
            if nodes[k].needs_grad {
                let dx = nodes[x].value.data();
                let mut gk = vec![0.0; cout * cin * kk];
                for o in 0..cout {
                    let grow = &gout[o * t_len..(o + 1) * t_len];
                    for c in 0..cin {
                        let xrow = &dx[c * t_len..(c + 1) * t_len];
                        for i in 0..kk {
                            let off = dilation as isize * (i as isize - ctr);
                            let mut acc = 0.0;
                            for t in 0..t_len {
                                let tt = t as isize + off;
                                if tt >= 0 && (tt as usize) < t_len {
                                    acc += grow[t] * xrow[tt as usize];
                                }
                            }
                            gk[(o * cin + c) * kk + i] = acc;
                        }
                    }
                }
                check_grad_finite(op, &gk)?;
                accumulate(nodes, k, gk);
            }
            if nodes[b].needs_grad {
                let mut gb = vec![0.0; cout];
                for o in 0..cout {
                    gb[o] = gout[o * t_len..(o + 1) * t_len].iter().sum();
                }
                check_grad_finite(op, &gb)?;
                accumulate(nodes, b, gb);
            }
        }
        Op::Reshape { x } => {
            accumulate(nodes, x, gout.to_vec());
        }
        Op::Softmax { x, axis } => {
            let y = nodes[i].value.data().to_vec();
            let shape = nodes[i].value.shape().to_vec();
            let mut gx = vec![0.0; y.len()];
            for_each_lane(&shape, axis, |base, stride, lane| {
                let mut dot = 0.0;
                for ii in 0..lane {
                    let at = base + ii * stride;
                    dot += gout[at] * y[at];
                }
                for ii in 0..lane {
                    let at = base + ii * stride;
                    gx[at] = y[at] * (gout[at] - dot);
                }
            });
            check_grad_finite(op, &gx)?;
            accumulate(nodes, x, gx);
        }
        Op::Sigmoid { x } => {
            let y = nodes[i].value.data();
            let gx: Vec<f64> = y.iter().zip(gout).map(|(&yi, &g)| g * yi * (1.0 - yi)).collect();
            check_grad_finite(op, &gx)?;
            accumulate(nodes, x, gx);
        }
        Op::Relu { x } => {
            let xv = nodes[x].value.data();
            let gx: Vec<f64> =
                xv.iter().zip(gout).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
            accumulate(nodes, x, gx);
        }
        Op::AvgPoolTime { x } => {
            let (c, t) = (nodes[x].value.dim(0), nodes[x].value.dim(1));
            let inv = 1.0 / t as f64;
            let mut gx = vec![0.0; c * t];
            for ch in 0..c {
                let g = gout[ch] * inv;
                for ti in 0..t {
                    gx[ch * t + ti] = g;
                }
            }
            check_grad_finite(op, &gx)?;
            accumulate(nodes, x, gx);
        }
        Op::ConcatChannels { ref xs } => {
            let mut offset = 0;
            for &id in xs {
                let len = nodes[id].value.len();
                let part = gout[offset..offset + len].to_vec();
                offset += len;
                accumulate(nodes, id, part);
            }
        }
        Op::SliceChannels { x, lo } => {
            let t = nodes[x].value.dim(1);
            let mut gx = vec![0.0; nodes[x].value.len()];
            gx[lo * t..lo * t + gout.len()].copy_from_slice(gout);
            accumulate(nodes, x, gx);
        }
        Op::CrossEntropy { logits, label } => {
            let d = nodes[logits].value.data();
            let mx = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = d.iter().map(|v| (v - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let g = gout[0];
            let mut gx: Vec<f64> = exps.iter().map(|e| g * e / sum).collect();
            gx[label] -= g;
            check_grad_finite(op, &gx)?;
            accumulate(nodes, logits, gx);
        }
        Op::MulByEntry { x, w, idx } => {
            if nodes[x].needs_grad {
                let c = nodes[w].value.data()[idx];
                let gx: Vec<f64> = gout.iter().map(|g| g * c).collect();
                check_grad_finite(op, &gx)?;
                accumulate(nodes, x, gx);
            }
            if nodes[w].needs_grad {
                let dx = nodes[x].value.data();
                let mut gw = vec![0.0; nodes[w].value.len()];
                gw[idx] = dx.iter().zip(gout).map(|(a, b)| a * b).sum();
                check_grad_finite(op, &gw)?;
                accumulate(nodes, w, gw);
            }
        }
        Op::ScaleChannels { x, s } => {
            let (c, t) = (nodes[x].value.dim(0), nodes[x].value.dim(1));
            if nodes[x].needs_grad {
                let ds = nodes[s].value.data();
                let mut gx = vec![0.0; c * t];
                for ch in 0..c {
                    for ti in 0..t {
                        gx[ch * t + ti] = gout[ch * t + ti] * ds[ch];
                    }
                }
                check_grad_finite(op, &gx)?;
                accumulate(nodes, x, gx);
            }
            if nodes[s].needs_grad {
                let dx = nodes[x].value.data();
                let mut gs = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for ti in 0..t {
                        acc += gout[ch * t + ti] * dx[ch * t + ti];
                    }
                    gs[ch] = acc;
                }
                check_grad_finite(op, &gs)?;
                accumulate(nodes, s, gs);
            }
        }
        Op::StackScalars { ref xs } => {
            for (pos, &id) in xs.iter().enumerate() {
                accumulate(nodes, id, vec![gout[pos]]);
            }
        }
        Op::MeanVars { ref xs } => {
            let g = gout[0] / xs.len() as f64;
            for &id in xs {
                accumulate(nodes, id, vec![g]);
            }
        }
        Op::LocalAttention { query, ref neighbors, wq, wk, wv, wo } => {
            attention_backward(nodes, op, query, neighbors, wq, wk, wv, wo, gout)?;
        }
        Op::FrameEnergy { wav, proj, hop } => {
            let n = nodes[wav].value.dim(0);
            let (c, win) = (nodes[proj].value.dim(0), nodes[proj].value.dim(1));
            let t_out = (n - win) / hop + 1;
            let dw = nodes[wav].value.data();
            let dp = nodes[proj].value.data();
            let mut gwav = vec![0.0; n];
            let mut gproj = vec![0.0; c * win];
            let (wav_needs, proj_needs) = (nodes[wav].needs_grad, nodes[proj].needs_grad);
            for ch in 0..c {
                let prow = &dp[ch * win..(ch + 1) * win];
                for t in 0..t_out {
                    let frame = &dw[t * hop..t * hop + win];
                    let mut p = 0.0;
                    for ii in 0..win {
                        p += prow[ii] * frame[ii];
                    }
                    let factor = gout[ch * t_out + t] * 2.0 * p / (LOG_ENERGY_EPS + p * p);
                    if wav_needs {
                        for ii in 0..win {
                            gwav[t * hop + ii] += factor * prow[ii];
                        }
                    }
                    if proj_needs {
                        for ii in 0..win {
                            gproj[ch * win + ii] += factor * frame[ii];
                        }
                    }
                }
            }
            if wav_needs {
                check_grad_finite(op, &gwav)?;
                accumulate(nodes, wav, gwav);
            }
            if proj_needs {
                check_grad_finite(op, &gproj)?;
                accumulate(nodes, proj, gproj);
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    nodes: &mut [Node],
    op: &Op,
    query: usize,
    neighbors: &[usize],
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    gout: &[f64],
) -> Result<()> {
    let s = nodes[query].value.dim(0);
    let t_len = nodes[query].value.dim(1);
    let d = nodes[wq].value.dim(0);
    let nm = neighbors.len();
    let scale = 1.0 / (d as f64).sqrt();

    let qd = nodes[query].value.data();
    let nvals: Vec<Vec<f64>> = neighbors.iter().map(|&id| nodes[id].value.data().to_vec()).collect();
    let (dwq, dwk, dwv, dwo) = (
        nodes[wq].value.data().to_vec(),
        nodes[wk].value.data().to_vec(),
        nodes[wv].value.data().to_vec(),
        nodes[wo].value.data().to_vec(),
    );

    let mut gq_full = vec![0.0; s * t_len];
    let mut gn_full = vec![vec![0.0; s * t_len]; nm];
    let mut gwq = vec![0.0; d * s];
    let mut gwk = vec![0.0; d * s];
    let mut gwv = vec![0.0; d * s];
    let mut gwo = vec![0.0; s * d];

    let mut q = vec![0.0; d];
    let mut keys = vec![0.0; nm * d];
    let mut vals = vec![0.0; nm * d];
    let mut alpha = vec![0.0; nm];
    let mut ctx = vec![0.0; d];
    let mut dctx = vec![0.0; d];
    let mut dalpha = vec![0.0; nm];
    let mut dscore = vec![0.0; nm];
    let mut dq = vec![0.0; d];
    let mut dk = vec![0.0; d];
    let mut dv = vec![0.0; d];

    for t in 0..t_len {
        // Recompute the frame's forward pass; cheaper than saving it.
        for dd in 0..d {
            let row = &dwq[dd * s..(dd + 1) * s];
            let mut acc = 0.0;
            for si in 0..s {
                acc += row[si] * qd[si * t_len + t];
            }
            q[dd] = acc;
        }
        for (m, nv) in nvals.iter().enumerate() {
            for dd in 0..d {
                let krow = &dwk[dd * s..(dd + 1) * s];
                let vrow = &dwv[dd * s..(dd + 1) * s];
                let mut ka = 0.0;
                let mut va = 0.0;
                for si in 0..s {
                    let x = nv[si * t_len + t];
                    ka += krow[si] * x;
                    va += vrow[si] * x;
                }
                keys[m * d + dd] = ka;
                vals[m * d + dd] = va;
            }
        }
        let mut mx = f64::NEG_INFINITY;
        for m in 0..nm {
            let mut sc = 0.0;
            for dd in 0..d {
                sc += q[dd] * keys[m * d + dd];
            }
            alpha[m] = sc * scale;
            mx = mx.max(alpha[m]);
        }
        let mut sum = 0.0;
        for a in alpha.iter_mut() {
            *a = (*a - mx).exp();
            sum += *a;
        }
        for a in alpha.iter_mut() {
            *a /= sum;
        }
        for dd in 0..d {
            let mut acc = 0.0;
            for m in 0..nm {
                acc += alpha[m] * vals[m * d + dd];
            }
            ctx[dd] = acc;
        }

        // VJP for this frame.
        for dd in 0..d {
            let mut acc = 0.0;
            for si in 0..s {
                acc += dwo[si * d + dd] * gout[si * t_len + t];
            }
            dctx[dd] = acc;
        }
        for si in 0..s {
            let g = gout[si * t_len + t];
            for dd in 0..d {
                gwo[si * d + dd] += g * ctx[dd];
            }
        }
        let mut dot = 0.0;
        for m in 0..nm {
            let mut acc = 0.0;
            for dd in 0..d {
                acc += dctx[dd] * vals[m * d + dd];
            }
            dalpha[m] = acc;
            dot += alpha[m] * acc;
        }
        for m in 0..nm {
            dscore[m] = alpha[m] * (dalpha[m] - dot);
        }
        dq.iter_mut().for_each(|v| *v = 0.0);
        for m in 0..nm {
            let dsm = dscore[m] * scale;
            for dd in 0..d {
                dq[dd] += dsm * keys[m * d + dd];
                dk[dd] = dsm * q[dd];
                dv[dd] = alpha[m] * dctx[dd];
            }
            // dk/dv are per-m; fold them into weights and neighbor grads now.
            let nv = &nvals[m];
            let gn = &mut gn_full[m];
            for dd in 0..d {
                let (dkd, dvd) = (dk[dd], dv[dd]);
                let krow = &dwk[dd * s..(dd + 1) * s];
                let vrow = &dwv[dd * s..(dd + 1) * s];
                for si in 0..s {
                    let x = nv[si * t_len + t];
                    gwk[dd * s + si] += dkd * x;
                    gwv[dd * s + si] += dvd * x;
                    gn[si * t_len + t] += krow[si] * dkd + vrow[si] * dvd;
                }
            }
        }
        for dd in 0..d {
            let dqd = dq[dd];
            for si in 0..s {
                gwq[dd * s + si] += dqd * qd[si * t_len + t];
                gq_full[si * t_len + t] += dwq[dd * s + si] * dqd;
            }
        }
    }

    check_grad_finite(op, &gq_full)?;
    accumulate(nodes, query, gq_full);
    for (m, g) in gn_full.into_iter().enumerate() {
        check_grad_finite(op, &g)?;
        accumulate(nodes, neighbors[m], g);
    }
    check_grad_finite(op, &gwq)?;
    accumulate(nodes, wq, gwq);
    check_grad_finite(op, &gwk)?;
    accumulate(nodes, wk, gwk);
    check_grad_finite(op, &gwv)?;
    accumulate(nodes, wv, gwv);
    check_grad_finite(op, &gwo)?;
    accumulate(nodes, wo, gwo);
    Ok(())
}

#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
fn conv1d_forward(
    x: &[f64],
    k: &[f64],
    b: &[f64],
    cin: usize,
    t_len: usize,
    cout: usize,
    kk: usize,
    dilation: usize,
) -> Vec<f64> {
    let ctr = (kk as isize - 1) / 2;
    let mut out = vec![0.0; cout * t_len];
    for o in 0..cout {
        let orow = &mut out[o * t_len..(o + 1) * t_len];
        orow.iter_mut().for_each(|v| *v = b[o]);
        for c in 0..cin {
            let xrow = &x[c * t_len..(c + 1) * t_len];
            let krow = &k[(o * cin + c) * kk..(o * cin + c + 1) * kk];
            for i in 0..kk {
                let kv = krow[i];
                if kv == 0.0 {
                    continue;
                }
                let off = dilation as isize * (i as isize - ctr);
                let t_lo = (-off).max(0) as usize;
                let t_hi = ((t_len as isize - off).min(t_len as isize)).max(0) as usize;
                for t in t_lo..t_hi {
                    orow[t] += kv * xrow[(t as isize + off) as usize];
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn attention_forward(
    q: &[f64],
    neighbors: &[&[f64]],
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    wo: &[f64],
    s: usize,
    t_len: usize,
    d: usize,
) -> Vec<f64> {
    let nm = neighbors.len();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; s * t_len];
    let mut qv = vec![0.0; d];
    let mut keys = vec![0.0; nm * d];
    let mut vals = vec![0.0; nm * d];
    let mut score = vec![0.0; nm];
    let mut ctx = vec![0.0; d];
    for t in 0..t_len {
        for dd in 0..d {
            let row = &wq[dd * s..(dd + 1) * s];
            let mut acc = 0.0;
            for si in 0..s {
                acc += row[si] * q[si * t_len + t];
            }
            qv[dd] = acc;
        }
        for (m, nv) in neighbors.iter().enumerate() {
            for dd in 0..d {
                let krow = &wk[dd * s..(dd + 1) * s];
                let vrow = &wv[dd * s..(dd + 1) * s];
                let mut ka = 0.0;
                let mut va = 0.0;
                for si in 0..s {
                    let x = nv[si * t_len + t];
                    ka += krow[si] * x;
                    va += vrow[si] * x;
                }
                keys[m * d + dd] = ka;
                vals[m * d + dd] = va;
            }
        }
        let mut mx = f64::NEG_INFINITY;
        for m in 0..nm {
            let mut sc = 0.0;
            for dd in 0..d {
                sc += qv[dd] * keys[m * d + dd];
            }
            score[m] = sc * scale;
            mx = mx.max(score[m]);
        }
        let mut sum = 0.0;
        for sc in score.iter_mut() {
            *sc = (*sc - mx).exp();
            sum += *sc;
        }
        for sc in score.iter_mut() {
            *sc /= sum;
        }
        for dd in 0..d {
            let mut acc = 0.0;
            for m in 0..nm {
                acc += score[m] * vals[m * d + dd];
            }
            ctx[dd] = acc;
        }
        for si in 0..s {
            let row = &wo[si * d..(si + 1) * d];
            let mut acc = 0.0;
            for dd in 0..d {
                acc += row[dd] * ctx[dd];
            }
            out[si * t_len + t] = acc;
        }
    }
    out
}

/// Visits every 1-d lane along `axis` of a row-major tensor.
/// The closure receives (base offset, stride, lane length).
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for inr in 0..inner {
            f(o * lane * inner + inr, inner, lane);
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec()).unwrap()
    }

    #[test]
    fn conv1d_matches_hand_cross_correlation() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let k = tape.leaf(Tensor::new(vec![1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap()).unwrap();
        let b = tape.leaf(t1(&[0.0])).unwrap();
        let y = tape.conv1d(x, k, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv1d_zero_input_yields_bias_everywhere() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 5])).unwrap();
        let k = tape
            .leaf(Tensor::randn(&[3, 2, 3], 1.0, &mut crate::seeds::rng(1)))
            .unwrap();
        let b = tape.leaf(t1(&[0.5, -1.0, 2.0])).unwrap();
        let y = tape.conv1d(x, k, b, 1).unwrap();
        let v = tape.value(y);
        for o in 0..3 {
            for t in 0..5 {
                assert_eq!(v.at(&[o, t]), [0.5, -1.0, 2.0][o]);
            }
        }
    }

    #[test]
    fn conv1d_identity_kernel_passes_input_through() {
        let tape = Tape::new();
        let xt = Tensor::randn(&[3, 7], 1.0, &mut crate::seeds::rng(2));
        let x = tape.leaf(xt.clone()).unwrap();
        // k=1 kernel holding the 3x3 identity over channels.
        let mut kd = vec![0.0; 9];
        for c in 0..3 {
            kd[c * 3 + c] = 1.0;
        }
        let k = tape.leaf(Tensor::new(vec![3, 3, 1], kd).unwrap()).unwrap();
        let b = tape.leaf(t1(&[0.0, 0.0, 0.0])).unwrap();
        let y = tape.conv1d(x, k, b, 1).unwrap();
        assert_eq!(tape.value(y), xt);
    }

    #[test]
    fn conv1d_rejects_mismatched_shapes_with_diagnostics() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 5])).unwrap();
        let k = tape.leaf(Tensor::zeros(&[3, 4, 3])).unwrap();
        let b = tape.leaf(Tensor::zeros(&[3])).unwrap();
        let err = tape.conv1d(x, k, b, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("conv1d"), "{msg}");
        assert!(msg.contains("[2, 5]") && msg.contains("[3, 4, 3]"), "{msg}");
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let ones = tape.leaf(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap()).unwrap();
        let y = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);

        let id = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let ai = tape.matmul(a, id).unwrap();
        assert_eq!(tape.value(ai).data(), &[1.0, 2.0, 3.0, 4.0]);

        let z = tape.leaf(Tensor::zeros(&[3, 2])).unwrap();
        let zy = tape.matmul(z, a).unwrap();
        assert!(tape.value(zy).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_closed_forms() {
        let tape = Tape::new();
        let c = tape.leaf(t1(&[5.0, 5.0, 5.0])).unwrap();
        let yc = tape.softmax(c, 0).unwrap();
        for &v in tape.value(yc).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = tape.leaf(t1(&[0.0, 3.0f64.ln()])).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y);
        assert!((v.data()[0] - 0.25).abs() < 1e-15);
        assert!((v.data()[1] - 0.75).abs() < 1e-15);

        // Stabilization: one entry far above the rest must not overflow.
        let big = tape.leaf(t1(&[0.0, 1.0e4, 3.0])).unwrap();
        let yb = tape.softmax(big, 0).unwrap();
        let vb = tape.value(yb);
        assert!((vb.data()[1] - 1.0).abs() < 1e-12);
        assert!(vb.data()[0] >= 0.0 && vb.data()[2] >= 0.0);
    }

    #[test]
    fn softmax_along_rows_of_a_matrix() {
        let tape = Tape::new();
        let x = tape
            .leaf(Tensor::matrix(2, 3, vec![1.0, 1.0, 1.0, 0.0, 3.0f64.ln(), 0.0]).unwrap())
            .unwrap();
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y);
        for t in 0..3 {
            assert!((v.at(&[0, t]) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((v.at(&[1, 1]) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn elementwise_and_pool_closed_forms() {
        let tape = Tape::new();
        let x = tape.leaf(t1(&[0.0])).unwrap();
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.scalar_value(s), 0.5);

        let r = tape.leaf(t1(&[-2.0, 0.0, 3.0])).unwrap();
        let y = tape.relu(r).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 3.0]);

        let cst = tape.leaf(Tensor::matrix(2, 4, vec![7.0; 8]).unwrap()).unwrap();
        let p = tape.global_avg_pool_time(cst).unwrap();
        assert_eq!(tape.value(p).data(), &[7.0, 7.0]);
    }

    #[test]
    fn cross_entropy_uniform_two_class_is_ln2() {
        let tape = Tape::new();
        let l = tape.leaf(t1(&[0.3, 0.3])).unwrap();
        for label in 0..2 {
            let ce = tape.cross_entropy(l, label).unwrap();
            assert!((tape.scalar_value(ce) - 2.0f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_backward_matches_softmax_minus_onehot() {
        let tape = Tape::new();
        let l = tape.leaf(t1(&[0.0, 0.0]).with_requires_grad(true)).unwrap();
        let ce = tape.cross_entropy(l, 0).unwrap();
        tape.backward(ce).unwrap();
        let g = tape.grad(l).unwrap();
        assert!((g.data()[0] - (-0.5)).abs() < 1e-15);
        assert!((g.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn split_then_concat_is_identity() {
        let tape = Tape::new();
        let xt = Tensor::randn(&[8, 5], 1.0, &mut crate::seeds::rng(3));
        let x = tape.leaf(xt.clone()).unwrap();
        for j in [1, 2, 4, 8] {
            let parts = tape.split_channels(x, j).unwrap();
            let back = tape.concat_channels(&parts).unwrap();
            assert_eq!(tape.value(back), xt);
        }
        assert!(tape.split_channels(x, 3).is_err());
    }

    #[test]
    fn non_finite_results_fail_fast_with_op_name() {
        let tape = Tape::new();
        let x = tape.leaf(t1(&[1.0e308])).unwrap();
        let err = tape.scale(x, 10.0).unwrap_err();
        match err {
            Error::NonFinite { op, .. } => assert_eq!(op, "scale"),
            other => panic!("expected NonFinite, got {other}"),
        }
    }

    #[test]
    fn backward_accumulates_over_shared_inputs() {
        // loss = mean(x·w[0], x·w[1]) with x shared: grad flows twice into x.
        let tape = Tape::new();
        let x = tape.leaf(t1(&[2.0]).with_requires_grad(true)).unwrap();
        let w = tape.leaf(t1(&[3.0, 5.0]).with_requires_grad(true)).unwrap();
        let a = tape.mul_by_entry(x, w, 0).unwrap();
        let b = tape.mul_by_entry(x, w, 1).unwrap();
        let loss = tape.mean_vars(&[a, b]).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0]); // (3+5)/2
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 1.0]); // x/2 each
    }

    #[test]
    fn frame_energy_counts_frames_like_the_stub_contract() {
        let tape = Tape::new();
        let wav = tape.leaf(Tensor::zeros(&[64_000])).unwrap();
        let proj = tape.leaf(Tensor::randn(&[4, 320], 0.1, &mut crate::seeds::rng(4))).unwrap();
        let y = tape.frame_energy(wav, proj, 320).unwrap();
        assert_eq!(tape.shape_of(y), vec![4, 200]);
    }

    #[test]
    fn local_attention_matches_hand_computed_scalar_case() {
        // S=1, d=1, T=1, two neighbors: everything reduces to scalars.
        let (h, n1, n2) = (0.7f64, -0.3f64, 0.9f64);
        let (wq, wk, wv, wo) = (1.3f64, 0.8f64, -1.1f64, 0.6f64);
        let q = wq * h;
        let (k1, k2) = (wk * n1, wk * n2);
        let (v1, v2) = (wv * n1, wv * n2);
        let (s1, s2) = (q * k1, q * k2); // scale = 1/sqrt(1) = 1
        let z = s1.max(s2);
        let (e1, e2) = ((s1 - z).exp(), (s2 - z).exp());
        let (a1, a2) = (e1 / (e1 + e2), e2 / (e1 + e2));
        let expect = wo * (a1 * v1 + a2 * v2);

        let tape = Tape::new();
        let hv = tape.leaf(Tensor::matrix(1, 1, vec![h]).unwrap()).unwrap();
        let n1v = tape.leaf(Tensor::matrix(1, 1, vec![n1]).unwrap()).unwrap();
        let n2v = tape.leaf(Tensor::matrix(1, 1, vec![n2]).unwrap()).unwrap();
        let wqv = tape.leaf(Tensor::matrix(1, 1, vec![wq]).unwrap()).unwrap();
        let wkv = tape.leaf(Tensor::matrix(1, 1, vec![wk]).unwrap()).unwrap();
        let wvv = tape.leaf(Tensor::matrix(1, 1, vec![wv]).unwrap()).unwrap();
        let wov = tape.leaf(Tensor::matrix(1, 1, vec![wo]).unwrap()).unwrap();
        let y = tape.local_attention(hv, &[n1v, n2v], wqv, wkv, wvv, wov).unwrap();
        assert!((tape.value(y).data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_output_projection_silences_attention() {
        let tape = Tape::new();
        let mut rng = crate::seeds::rng(5);
        let h = tape.leaf(Tensor::randn(&[4, 6], 1.0, &mut rng)).unwrap();
        let n = tape.leaf(Tensor::randn(&[4, 6], 1.0, &mut rng)).unwrap();
        let wq = tape.leaf(Tensor::randn(&[3, 4], 1.0, &mut rng)).unwrap();
        let wk = tape.leaf(Tensor::randn(&[3, 4], 1.0, &mut rng)).unwrap();
        let wv = tape.leaf(Tensor::randn(&[3, 4], 1.0, &mut rng)).unwrap();
        let wo = tape.leaf(Tensor::zeros(&[4, 3])).unwrap();
        let y = tape.local_attention(h, &[h, n], wq, wk, wv, wo).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }
}
