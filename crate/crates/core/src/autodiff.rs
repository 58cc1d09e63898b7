//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation executed during a forward pass in
//! execution order. [`Graph::backward`] walks that record in reverse and
//! returns a [`Gradients`] table holding one accumulated gradient per node
//! that contributes to the loss. Parameters enter the graph by name from a
//! [`ParamStore`], so their gradients can be merged back into the store.
//!
//! Every operation here has a hand-written adjoint; the gradient checks in
//! `gradcheck` and the tests below compare each of them with central
//! finite differences.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Hyperparameters of a 1D convolution or its transpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    pub fn conv_output_len(&self, input_len: usize) -> Result<usize> {
        if self.kernel == 0 {
            return Err(Error::invalid("kernel size must be >= 1"));
        }
        if self.stride == 0 {
            return Err(Error::invalid("stride must be >= 1"));
        }
        let padded = input_len + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::invalid(format!(
                "length: padded input length {padded} is shorter than kernel {}",
                self.kernel
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    pub fn deconv_output_len(&self, input_len: usize) -> Result<usize> {
        if self.kernel == 0 || self.stride == 0 || input_len == 0 {
            return Err(Error::invalid(
                "transposed convolution needs kernel, stride and input length >= 1",
            ));
        }
        let full = (input_len - 1) * self.stride + self.kernel;
        if full <= 2 * self.padding {
            return Err(Error::invalid(format!(
                "length: transposed convolution output length {} is not positive",
                full as i64 - 2 * self.padding as i64
            )));
        }
        Ok(full - 2 * self.padding)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(String),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        in_ch: usize,
        geom: ConvGeometry,
    },
    Deconv1d {
        x: Var,
        w: Var,
        out_ch: usize,
        geom: ConvGeometry,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu {
        x: Var,
    },
    WeightedSum {
        a: Var,
        b: Var,
        rho: f64,
    },
    SoftmaxChannels {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Exp {
        x: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    AffineColumns {
        x: Var,
        scale: Vec<f64>,
    },
    AnchorLayout {
        x: Var,
        fields: usize,
        ratios: usize,
    },
    ConcatLength {
        xs: Vec<Var>,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    CrossEntropy {
        probs: Var,
        selected: Vec<usize>,
        targets: Vec<usize>,
    },
    SmoothL1 {
        x: Var,
        selected: Vec<usize>,
        targets: Vec<f64>,
    },
    SquaredError {
        x: Var,
        selected: Vec<usize>,
        targets: Vec<f64>,
    },
    LinComb {
        xs: Vec<Var>,
        coeffs: Vec<f64>,
    },
    Sum {
        x: Var,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv1d { .. } => "conv1d",
            Op::Deconv1d { .. } => "deconv1d",
            Op::MaxPool { .. } => "maxpool1d",
            Op::Relu { .. } => "relu",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::SoftmaxChannels { .. } => "softmax",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Exp { .. } => "exp",
            Op::Scale { .. } => "scale",
            Op::AffineColumns { .. } => "affine_columns",
            Op::AnchorLayout { .. } => "anchor_layout",
            Op::ConcatLength { .. } => "concat_length",
            Op::SliceChannels { .. } => "slice_channels",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::SquaredError { .. } => "squared_error",
            Op::LinComb { .. } => "lincomb",
            Op::Sum { .. } => "sum",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of a forward pass.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    grad_faults: HashMap<String, f64>,
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_selection(len: usize, selected: &[usize], targets: usize, what: &str) -> Result<()> {
    if selected.len() != targets {
        return Err(Error::invalid(format!(
            "{what}: {} selected indices but {targets} targets",
            selected.len()
        )));
    }
    if let Some(&bad) = selected.iter().find(|&&i| i >= len) {
        return Err(Error::invalid(format!(
            "{what}: selected index {bad} out of range for {len} columns"
        )));
    }
    Ok(())
}

pub(crate) fn smooth_l1_value(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_slope(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

// Probabilities that underflow to zero would give an infinite loss.
const MIN_PROB: f64 = 1e-300;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input (gradients are still reported for it).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Brings a named parameter into the graph. Repeated requests share one node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .value(name)
            .ok_or_else(|| Error::State(format!("parameter `{name}` is not allocated")))?
            .clone();
        let mut value = value;
        value.clear_grad();
        let v = self.push(value, Op::Param(name.to_string()));
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Names of all parameters used so far.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Test hook: scales the gradient reported for one parameter, simulating a broken adjoint.
    #[doc(hidden)]
    pub fn inject_grad_fault(&mut self, param: &str, factor: f64) {
        self.grad_faults.insert(param.to_string(), factor);
    }

    /// Cross-correlation with zero padding. `w` is `[out_ch × in_ch·k]` (kernel `[out × in × k]`
    /// flattened), `b` is `[out_ch × 1]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Result<Var> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        let out_ch = wt.channels();
        let k = geom.kernel;
        if k == 0 || wt.length() % k != 0 {
            return Err(Error::invalid(format!(
                "kernel: weight row length {} is not a multiple of kernel {k}",
                wt.length()
            )));
        }
        let in_ch = wt.length() / k;
        if xt.channels() != in_ch {
            return Err(Error::invalid(format!(
                "channels: input has {} channels, kernel expects {in_ch}",
                xt.channels()
            )));
        }
        if bt.len() != out_ch {
            return Err(Error::invalid(format!(
                "bias: {} values for {out_ch} output channels",
                bt.len()
            )));
        }
        let l_in = xt.length();
        let l_out = geom.conv_output_len(l_in)?;
        let (xd, wd, bd) = (xt.data(), wt.data(), bt.data());
        let mut y = vec![0.0; out_ch * l_out];
        for o in 0..out_ch {
            let yrow = &mut y[o * l_out..(o + 1) * l_out];
            yrow.iter_mut().for_each(|v| *v = bd[o]);
            for i in 0..in_ch {
                let wrow = &wd[(o * in_ch + i) * k..(o * in_ch + i + 1) * k];
                let xrow = &xd[i * l_in..(i + 1) * l_in];
                for (t, acc) in yrow.iter_mut().enumerate() {
                    let base = t * geom.stride;
                    for (kk, &wv) in wrow.iter().enumerate() {
                        let pos = base + kk;
                        if pos >= geom.padding && pos - geom.padding < l_in {
                            *acc += wv * xrow[pos - geom.padding];
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(out_ch, l_out, y)?;
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                w,
                b,
                in_ch,
                geom,
            },
        ))
    }

    /// Transposed convolution: the adjoint of [`Graph::conv1d`] with the same kernel.
    /// `w` is `[in_ch × out_ch·k]`, where `in_ch` is this op's input channel count.
    pub fn deconv1d(&mut self, x: Var, w: Var, geom: ConvGeometry) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        let k = geom.kernel;
        if k == 0 || wt.length() % k != 0 {
            return Err(Error::invalid(format!(
                "kernel: weight row length {} is not a multiple of kernel {k}",
                wt.length()
            )));
        }
        let in_ch = wt.channels();
        let out_ch = wt.length() / k;
        if xt.channels() != in_ch {
            return Err(Error::invalid(format!(
                "channels: input has {} channels, kernel expects {in_ch}",
                xt.channels()
            )));
        }
        let l_in = xt.length();
        let l_out = geom.deconv_output_len(l_in)?;
        let (xd, wd) = (xt.data(), wt.data());
        let mut y = vec![0.0; out_ch * l_out];
        for i in 0..in_ch {
            let xrow = &xd[i * l_in..(i + 1) * l_in];
            for o in 0..out_ch {
                let wrow = &wd[(i * out_ch + o) * k..(i * out_ch + o + 1) * k];
                let yrow = &mut y[o * l_out..(o + 1) * l_out];
                for (t, &xv) in xrow.iter().enumerate() {
                    let base = t * geom.stride;
                    for (kk, &wv) in wrow.iter().enumerate() {
                        let pos = base + kk;
                        if pos >= geom.padding && pos - geom.padding < l_out {
                            yrow[pos - geom.padding] += wv * xv;
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(out_ch, l_out, y)?;
        Ok(self.push(value, Op::Deconv1d { x, w, out_ch, geom }))
    }

    /// Per-channel windowed maximum. Ties go to the lowest index.
    pub fn maxpool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xt = self.value(x);
        if kernel == 0 || stride == 0 {
            return Err(Error::invalid("maxpool kernel and stride must be >= 1"));
        }
        if kernel > xt.length() {
            return Err(Error::invalid(format!(
                "length: maxpool kernel {kernel} exceeds input length {}",
                xt.length()
            )));
        }
        let (ch, l_in) = xt.shape();
        let l_out = (l_in - kernel) / stride + 1;
        let mut y = Vec::with_capacity(ch * l_out);
        let mut argmax = Vec::with_capacity(ch * l_out);
        for c in 0..ch {
            let row = xt.row(c);
            for t in 0..l_out {
                let start = t * stride;
                let mut best = start;
                for j in start + 1..start + kernel {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                y.push(row[best]);
                argmax.push(c * l_in + best);
            }
        }
        let value = Tensor::from_vec(ch, l_out, y)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::from_vec(xt.channels(), xt.length(), data).expect("same shape");
        self.push(value, Op::Relu { x })
    }

    /// `rho·a + (1 − rho)·b`, elementwise.
    pub fn weighted_sum(&mut self, a: Var, b: Var, rho: f64) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        check_same_shape(at, bt, "weighted_sum")?;
        let data = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(x, y)| rho * x + (1.0 - rho) * y)
            .collect();
        let value = Tensor::from_vec(at.channels(), at.length(), data)?;
        Ok(self.push(value, Op::WeightedSum { a, b, rho }))
    }

    /// Softmax over the channel axis, independently for every column.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let (ch, len) = xt.shape();
        let mut out = Tensor::zeros(ch, len);
        for t in 0..len {
            let probs = softmax(&xt.column(t));
            for (c, p) in probs.into_iter().enumerate() {
                out.set(c, t, p);
            }
        }
        self.push(out, Op::SoftmaxChannels { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::from_vec(xt.channels(), xt.length(), data).expect("same shape");
        self.push(value, Op::Sigmoid { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| v.exp()).collect();
        let value = Tensor::from_vec(xt.channels(), xt.length(), data).expect("same shape");
        self.push(value, Op::Exp { x })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::from_vec(xt.channels(), xt.length(), data).expect("same shape");
        self.push(value, Op::Scale { x, factor })
    }

    /// `y[c, t] = x[c, t]·scale[t] + shift[t]`.
    pub fn affine_columns(&mut self, x: Var, scale: Vec<f64>, shift: Vec<f64>) -> Result<Var> {
        let xt = self.value(x);
        if scale.len() != xt.length() || shift.len() != xt.length() {
            return Err(Error::invalid(format!(
                "affine_columns: {} columns but {} scales and {} shifts",
                xt.length(),
                scale.len(),
                shift.len()
            )));
        }
        let (ch, len) = xt.shape();
        let mut out = Tensor::zeros(ch, len);
        for c in 0..ch {
            for t in 0..len {
                out.set(c, t, xt.get(c, t) * scale[t] + shift[t]);
            }
        }
        Ok(self.push(out, Op::AffineColumns { x, scale }))
    }

    /// Rearranges a head output `[fields·ratios × cells]` (ratio-major channel groups) into
    /// `[fields × cells·ratios]`, one column per anchor in (cell, ratio) order.
    pub fn anchor_layout(&mut self, x: Var, fields: usize, ratios: usize) -> Result<Var> {
        let xt = self.value(x);
        if xt.channels() != fields * ratios {
            return Err(Error::invalid(format!(
                "anchor_layout: {} channels, expected {fields}x{ratios}",
                xt.channels()
            )));
        }
        let cells = xt.length();
        let mut out = Tensor::zeros(fields, cells * ratios);
        for r in 0..ratios {
            for f in 0..fields {
                for cell in 0..cells {
                    out.set(f, cell * ratios + r, xt.get(r * fields + f, cell));
                }
            }
        }
        Ok(self.push(out, Op::AnchorLayout { x, fields, ratios }))
    }

    /// Concatenates along the length axis.
    pub fn concat_length(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::invalid("concat_length of zero tensors"))?;
        let ch = self.value(*first).channels();
        if let Some(bad) = xs.iter().find(|v| self.value(**v).channels() != ch) {
            return Err(Error::invalid(format!(
                "concat_length: channel mismatch ({} vs {ch})",
                self.value(*bad).channels()
            )));
        }
        let total: usize = xs.iter().map(|v| self.value(*v).length()).sum();
        let mut out = Tensor::zeros(ch, total);
        for c in 0..ch {
            let row = out.row_mut(c);
            let mut off = 0;
            for v in xs {
                let src = self.nodes[v.0].value.row(c);
                row[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatLength { xs: xs.to_vec() }))
    }

    /// Channels `start..end`.
    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xt = self.value(x);
        if start >= end || end > xt.channels() {
            return Err(Error::invalid(format!(
                "slice_channels: range {start}..{end} invalid for {} channels",
                xt.channels()
            )));
        }
        let len = xt.length();
        let data = xt.data()[start * len..end * len].to_vec();
        let value = Tensor::from_vec(end - start, len, data)?;
        Ok(self.push(value, Op::SliceChannels { x, start }))
    }

    /// Mean over `selected` columns of `−ln probs[target, column]`. Empty selection gives 0.
    pub fn cross_entropy(
        &mut self,
        probs: Var,
        selected: Vec<usize>,
        targets: Vec<usize>,
    ) -> Result<Var> {
        let pt = self.value(probs);
        check_selection(pt.length(), &selected, targets.len(), "cross_entropy")?;
        if let Some(&bad) = targets.iter().find(|&&c| c >= pt.channels()) {
            return Err(Error::invalid(format!(
                "cross_entropy: class {bad} out of range for {} classes",
                pt.channels()
            )));
        }
        let n = selected.len();
        let total: f64 = selected
            .iter()
            .zip(&targets)
            .map(|(&i, &c)| -pt.get(c, i).max(MIN_PROB).ln())
            .sum();
        let value = if n == 0 { 0.0 } else { total / n as f64 };
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                probs,
                selected,
                targets,
            },
        ))
    }

    /// `Σ smooth_l1(x[0, i] − target) / n` over `selected`. Empty selection gives 0.
    pub fn smooth_l1(&mut self, x: Var, selected: Vec<usize>, targets: Vec<f64>) -> Result<Var> {
        let xt = self.value(x);
        check_selection(xt.length(), &selected, targets.len(), "smooth_l1")?;
        let n = selected.len();
        let total: f64 = selected
            .iter()
            .zip(&targets)
            .map(|(&i, &g)| smooth_l1_value(xt.get(0, i) - g))
            .sum();
        let value = if n == 0 { 0.0 } else { total / n as f64 };
        Ok(self.push(
            Tensor::scalar(value),
            Op::SmoothL1 {
                x,
                selected,
                targets,
            },
        ))
    }

    /// Mean squared error over `selected` columns of a single-row tensor.
    pub fn squared_error(
        &mut self,
        x: Var,
        selected: Vec<usize>,
        targets: Vec<f64>,
    ) -> Result<Var> {
        let xt = self.value(x);
        check_selection(xt.length(), &selected, targets.len(), "squared_error")?;
        let n = selected.len();
        let total: f64 = selected
            .iter()
            .zip(&targets)
            .map(|(&i, &g)| (xt.get(0, i) - g).powi(2))
            .sum();
        let value = if n == 0 { 0.0 } else { total / n as f64 };
        Ok(self.push(
            Tensor::scalar(value),
            Op::SquaredError {
                x,
                selected,
                targets,
            },
        ))
    }

    /// `Σ coeffs[i]·xs[i]` over same-shaped tensors.
    pub fn lincomb(&mut self, xs: &[Var], coeffs: &[f64]) -> Result<Var> {
        if xs.is_empty() || xs.len() != coeffs.len() {
            return Err(Error::invalid("lincomb needs one coefficient per input"));
        }
        let shape = self.value(xs[0]).shape();
        let mut out = vec![0.0; shape.0 * shape.1];
        for (v, &c) in xs.iter().zip(coeffs) {
            let t = self.value(*v);
            if t.shape() != shape {
                return Err(Error::invalid("lincomb: shape mismatch"));
            }
            out.iter_mut().zip(t.data()).for_each(|(o, x)| *o += c * x);
        }
        let value = Tensor::from_vec(shape.0, shape.1, out)?;
        Ok(self.push(
            value,
            Op::LinComb {
                xs: xs.to_vec(),
                coeffs: coeffs.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    /// First node (in execution order) holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            (!n.value.is_finite()).then(|| match &n.op {
                Op::Param(name) => format!("parameter `{name}` (node {i})"),
                op => format!("{} output (node {i})", op.name()),
            })
        })
    }

    /// Fingerprint of every piecewise branch taken in the forward pass
    /// (relu signs, maxpool winners, smooth-L1 regimes). Two forward passes
    /// with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> Vec<u64> {
        let mut sig = Vec::new();
        for n in &self.nodes {
            match &n.op {
                Op::Relu { x } => {
                    let mut word = 0u64;
                    for (i, &v) in self.value(*x).data().iter().enumerate() {
                        if v > 0.0 {
                            word ^= (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                        }
                    }
                    sig.push(word);
                }
                Op::MaxPool { argmax, .. } => {
                    sig.extend(argmax.iter().map(|&i| i as u64));
                }
                Op::SmoothL1 {
                    x,
                    selected,
                    targets,
                } => {
                    let xt = self.value(*x);
                    sig.extend(
                        selected
                            .iter()
                            .zip(targets)
                            .map(|(&i, &g)| u64::from((xt.get(0, i) - g).abs() < 1.0)),
                    );
                }
                _ => {}
            }
        }
        sig
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State(
                "backward called on a value that was never recorded".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_seeded(loss, vec![1.0])
    }

    /// Reverse pass from any node with an explicit upstream gradient.
    pub(crate) fn backward_seeded(&self, out: Var, seed: Vec<f64>) -> Result<Gradients> {
        if seed.len() != self.nodes[out.0].value.len() {
            return Err(Error::invalid("backward seed does not match output shape"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);

        for idx in (0..=out.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }

        let mut param_grads = Vec::new();
        for (name, &v) in &self.params {
            let mut g = grads[v.0]
                .clone()
                .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()]);
            if let Some(&f) = self.grad_faults.get(name) {
                g.iter_mut().for_each(|x| *x *= f);
            }
            param_grads.push((name.clone(), g));
        }
        param_grads.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Gradients {
            nodes: grads,
            params: param_grads,
        })
    }

    fn propagate(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        let y = &node.value;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv1d {
                x,
                w,
                b,
                in_ch,
                geom,
            } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (out_ch, l_out) = y.shape();
                let l_in = xt.length();
                let k = geom.kernel;
                let mut gx = vec![0.0; xt.len()];
                let mut gw = vec![0.0; wt.len()];
                let mut gb = vec![0.0; out_ch];
                for o in 0..out_ch {
                    let grow = &gy[o * l_out..(o + 1) * l_out];
                    gb[o] = grow.iter().sum();
                    for i in 0..*in_ch {
                        let woff = (o * in_ch + i) * k;
                        let xrow = &xt.data()[i * l_in..(i + 1) * l_in];
                        for (t, &g) in grow.iter().enumerate() {
                            let base = t * geom.stride;
                            for kk in 0..k {
                                let pos = base + kk;
                                if pos >= geom.padding && pos - geom.padding < l_in {
                                    let xi = pos - geom.padding;
                                    gw[woff + kk] += g * xrow[xi];
                                    gx[i * l_in + xi] += g * wt.data()[woff + kk];
                                }
                            }
                        }
                    }
                }
                add_into(acc(grads, *x, gx.len()), &gx);
                add_into(acc(grads, *w, gw.len()), &gw);
                add_into(acc(grads, *b, gb.len()), &gb);
            }
            Op::Deconv1d { x, w, out_ch, geom } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (in_ch, l_in) = xt.shape();
                let l_out = y.length();
                let k = geom.kernel;
                let mut gx = vec![0.0; xt.len()];
                let mut gw = vec![0.0; wt.len()];
                for i in 0..in_ch {
                    for o in 0..*out_ch {
                        let woff = (i * out_ch + o) * k;
                        let grow = &gy[o * l_out..(o + 1) * l_out];
                        for t in 0..l_in {
                            let base = t * geom.stride;
                            let xv = xt.data()[i * l_in + t];
                            let mut gsum = 0.0;
                            for kk in 0..k {
                                let pos = base + kk;
                                if pos >= geom.padding && pos - geom.padding < l_out {
                                    let g = grow[pos - geom.padding];
                                    gw[woff + kk] += g * xv;
                                    gsum += g * wt.data()[woff + kk];
                                }
                            }
                            gx[i * l_in + t] += gsum;
                        }
                    }
                }
                add_into(acc(grads, *x, gx.len()), &gx);
                add_into(acc(grads, *w, gw.len()), &gw);
            }
            Op::MaxPool { x, argmax } => {
                let len = self.value(*x).len();
                let gx = acc(grads, *x, len);
                for (&src, &g) in argmax.iter().zip(gy) {
                    gx[src] += g;
                }
            }
            Op::Relu { x } => {
                let xt = self.value(*x);
                let gx = acc(grads, *x, xt.len());
                for ((o, &v), &g) in gx.iter_mut().zip(xt.data()).zip(gy) {
                    if v > 0.0 {
                        *o += g;
                    }
                }
            }
            Op::WeightedSum { a, b, rho } => {
                let n = gy.len();
                let ga = acc(grads, *a, n);
                ga.iter_mut().zip(gy).for_each(|(o, g)| *o += rho * g);
                let gb = acc(grads, *b, n);
                gb.iter_mut().zip(gy).for_each(|(o, g)| *o += (1.0 - rho) * g);
            }
            Op::SoftmaxChannels { x } => {
                let (ch, len) = y.shape();
                let gx = acc(grads, *x, ch * len);
                for t in 0..len {
                    let dot: f64 = (0..ch).map(|c| gy[c * len + t] * y.get(c, t)).sum();
                    for c in 0..ch {
                        gx[c * len + t] += y.get(c, t) * (gy[c * len + t] - dot);
                    }
                }
            }
            Op::Sigmoid { x } => {
                let gx = acc(grads, *x, gy.len());
                for ((o, &s), &g) in gx.iter_mut().zip(y.data()).zip(gy) {
                    *o += g * s * (1.0 - s);
                }
            }
            Op::Exp { x } => {
                let gx = acc(grads, *x, gy.len());
                for ((o, &e), &g) in gx.iter_mut().zip(y.data()).zip(gy) {
                    *o += g * e;
                }
            }
            Op::Scale { x, factor } => {
                let gx = acc(grads, *x, gy.len());
                gx.iter_mut().zip(gy).for_each(|(o, g)| *o += factor * g);
            }
            Op::AffineColumns { x, scale, .. } => {
                let len = y.length();
                let gx = acc(grads, *x, gy.len());
                for (i, (o, g)) in gx.iter_mut().zip(gy).enumerate() {
                    *o += g * scale[i % len];
                }
            }
            Op::AnchorLayout { x, fields, ratios } => {
                let xt = self.value(*x);
                let cells = xt.length();
                let out_len = y.length();
                let gx = acc(grads, *x, xt.len());
                for r in 0..*ratios {
                    for f in 0..*fields {
                        for cell in 0..cells {
                            gx[(r * fields + f) * cells + cell] +=
                                gy[f * out_len + cell * ratios + r];
                        }
                    }
                }
            }
            Op::ConcatLength { xs } => {
                let (ch, total) = y.shape();
                let mut off = 0;
                for v in xs {
                    let len = self.value(*v).length();
                    let gx = acc(grads, *v, ch * len);
                    for c in 0..ch {
                        for t in 0..len {
                            gx[c * len + t] += gy[c * total + off + t];
                        }
                    }
                    off += len;
                }
            }
            Op::SliceChannels { x, start } => {
                let xt = self.value(*x);
                let len = xt.length();
                let gx = acc(grads, *x, xt.len());
                let off = start * len;
                gx[off..off + gy.len()]
                    .iter_mut()
                    .zip(gy)
                    .for_each(|(o, g)| *o += g);
            }
            Op::CrossEntropy {
                probs,
                selected,
                targets,
            } => {
                if selected.is_empty() {
                    return;
                }
                let pt = self.value(*probs);
                let len = pt.length();
                let scale = gy[0] / selected.len() as f64;
                let gp = acc(grads, *probs, pt.len());
                for (&i, &c) in selected.iter().zip(targets) {
                    let p = pt.get(c, i);
                    if p > MIN_PROB {
                        gp[c * len + i] -= scale / p;
                    }
                }
            }
            Op::SmoothL1 {
                x,
                selected,
                targets,
            } => {
                if selected.is_empty() {
                    return;
                }
                let xt = self.value(*x);
                let scale = gy[0] / selected.len() as f64;
                let row: Vec<f64> = xt.row(0).to_vec();
                let gx = acc(grads, *x, xt.len());
                for (&i, &g) in selected.iter().zip(targets) {
                    gx[i] += scale * smooth_l1_slope(row[i] - g);
                }
            }
            Op::SquaredError {
                x,
                selected,
                targets,
            } => {
                if selected.is_empty() {
                    return;
                }
                let xt = self.value(*x);
                let scale = gy[0] / selected.len() as f64;
                let row: Vec<f64> = xt.row(0).to_vec();
                let gx = acc(grads, *x, xt.len());
                for (&i, &g) in selected.iter().zip(targets) {
                    gx[i] += scale * 2.0 * (row[i] - g);
                }
            }
            Op::LinComb { xs, coeffs } => {
                for (v, &c) in xs.iter().zip(coeffs) {
                    let gx = acc(grads, *v, gy.len());
                    gx.iter_mut().zip(gy).for_each(|(o, g)| *o += c * g);
                }
            }
            Op::Sum { x } => {
                let len = self.value(*x).len();
                let gx = acc(grads, *x, len);
                gx.iter_mut().for_each(|o| *o += gy[0]);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(String, Vec<f64>)>,
}

impl Gradients {
    /// Gradient reaching `v`, or `None` when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameter gradients sorted by name. Parameters the loss does not reach get zeros.
    pub fn params(&self) -> &[(String, Vec<f64>)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(String, Vec<f64>)> {
        self.params
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, g)| g.as_slice())
    }
}

/// Numerically stable softmax of one score vector.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
