//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation in execution order. Calling
//! [`Graph::backward`] walks the tape once in reverse, and gradients of
//! trainable leaves accumulate across calls until [`Graph::zero_grad`].

use std::fmt;
use std::str::FromStr;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Output gain of the scaled hyperbolic tangent.
pub const SCALED_TANH_GAIN: f64 = 1.7159;
/// Input slope of the scaled hyperbolic tangent.
pub const SCALED_TANH_SLOPE: f64 = 2.0 / 3.0;

/// Floor applied to the target probability in [`Graph::nll`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    /// `1.7159 * tanh(2x/3)`
    ScaledTanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::ScaledTanh => SCALED_TANH_GAIN * (SCALED_TANH_SLOPE * x).tanh(),
        }
    }

    /// Derivative expressed through the output value `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::ScaledTanh => {
                let t = y / SCALED_TANH_GAIN;
                SCALED_TANH_GAIN * SCALED_TANH_SLOPE * (1.0 - t * t)
            }
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "scaled_tanh" => Ok(Activation::ScaledTanh),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::ScaledTanh => "scaled_tanh",
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { w: Var, x: Var, b: Option<Var> },
    AddN(Vec<Var>),
    Scale(Var, f64),
    Mul(Var, Var),
    Act(Activation, Var),
    Conv { input: Var, kernel: Var },
    Softmax(Var),
    ChannelScale { input: Var, map: Var },
    Reshape(Var),
    Sum(Var),
    Row { table: Var, index: usize },
    Nll { probs: Var, target: usize },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Execution tape. Confined to one thread; independent graphs may run in parallel.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node created after the graph had `len` nodes, so one
    /// bound parameter set can serve many forward passes. Handles to dropped
    /// nodes must not be used afterwards.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.leaf_grads.truncate(len);
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a leaf. It is trainable iff the tensor carries a grad buffer.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.shape().to_vec(), t.values().to_vec(), t.is_trainable())
    }

    /// Registers a non-trainable input.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.shape().to_vec(), t.values().to_vec(), false)
    }

    /// Registers a trainable leaf regardless of the tensor's own flag.
    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.shape().to_vec(), t.values().to_vec(), true)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| vec![0.0; value.len()]);
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op: Op::Leaf,
        });
        self.leaf_grads.push(grad);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some(bad) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{name} (entry {bad})")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    /// Accumulated gradient of a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        for g in self.leaf_grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// `W x + b` for `W: [o, i]`, `x: [i]`, `b: [o]`.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        self.affine_impl(w, x, Some(b))
    }

    /// `W x` for `W: [o, i]`, `x: [i]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        self.affine_impl(w, x, None)
    }

    fn affine_impl(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var> {
        let ws = self.shape(w);
        if ws.len() != 2 {
            return Err(dim_err("affine", format!("weight must be rank 2, got {ws:?}")));
        }
        let (o, i) = (ws[0], ws[1]);
        if self.numel(x) != i || self.shape(x).len() != 1 {
            return Err(dim_err(
                "affine",
                format!("weight {ws:?} vs input {:?}", self.shape(x)),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(dim_err(
                    "affine",
                    format!("weight {ws:?} vs bias {:?}", self.shape(b)),
                ));
            }
        }
        let wv = self.value(w);
        let xv = self.value(x);
        let mut out: Vec<f64> = wv
            .chunks_exact(i)
            .map(|row| row.iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        if let Some(b) = b {
            for (o, bv) in out.iter_mut().zip(self.value(b)) {
                *o += bv;
            }
        }
        let mut inputs = vec![w, x];
        inputs.extend(b);
        self.push("affine", vec![o], out, Op::Affine { w, x, b }, &inputs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_n(&[a, b])
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Contract("add_n of nothing".into()))?;
        let shape = self.shape(first).to_vec();
        let mut out = vec![0.0; self.numel(first)];
        for &x in xs {
            if self.shape(x) != shape.as_slice() {
                return Err(dim_err("add", format!("{shape:?} vs {:?}", self.shape(x))));
            }
            for (o, v) in out.iter_mut().zip(self.value(x)) {
                *o += v;
            }
        }
        self.push("add", shape, out, Op::AddN(xs.to_vec()), xs)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        self.push("scale", self.shape(x).to_vec(), out, Op::Scale(x, factor), &[x])
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        self.push("mul", self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b])
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| kind.apply(v)).collect();
        self.push("activation", self.shape(x).to_vec(), out, Op::Act(kind, x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Tanh, x)
    }

    pub fn scaled_tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::ScaledTanh, x)
    }

    /// Zero-padded "same" cross-correlation of `input: [C, H, W]` with
    /// `kernel: [K, C, kh, kw]`, giving `[K, H, W]`. Kernel extents must be odd.
    pub fn conv2d_same(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let is = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if is.len() != 3 || ks.len() != 4 {
            return Err(dim_err("conv2d_same", format!("input {is:?}, kernel {ks:?}")));
        }
        if ks[2].is_multiple_of(2) || ks[3].is_multiple_of(2) {
            return Err(Error::Config(format!(
                "same-padding needs odd kernel extents, got {}x{}",
                ks[2], ks[3]
            )));
        }
        if ks[1] != is[0] {
            return Err(dim_err(
                "conv2d_same",
                format!("kernel expects {} channels, input has {}", ks[1], is[0]),
            ));
        }
        let geo = ConvGeometry::new(&is, &ks);
        let mut out = vec![0.0; geo.k * geo.h * geo.w];
        let (iv, kv) = (self.value(input), self.value(kernel));
        geo.for_each_tap(|o_idx, i_idx, k_idx| out[o_idx] += kv[k_idx] * iv[i_idx]);
        self.push(
            "conv2d_same",
            vec![geo.k, geo.h, geo.w],
            out,
            Op::Conv { input, kernel },
            &[input, kernel],
        )
    }

    /// Softmax over every entry of `x` jointly, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let max = xv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xv.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let out = exps.into_iter().map(|e| e / total).collect();
        self.push("softmax", self.shape(x).to_vec(), out, Op::Softmax(x), &[x])
    }

    /// Softmax over all positions of an `[H, W]` map.
    pub fn softmax_spatial(&mut self, z: Var) -> Result<Var> {
        if self.shape(z).len() != 2 {
            return Err(dim_err(
                "softmax_spatial",
                format!("expected [H, W], got {:?}", self.shape(z)),
            ));
        }
        self.softmax(z)
    }

    /// Multiplies every channel of `input: [C, H, W]` elementwise by `map: [H, W]`.
    pub fn channel_scale(&mut self, input: Var, map: Var) -> Result<Var> {
        let is = self.shape(input).to_vec();
        let ms = self.shape(map);
        if is.len() != 3 || ms != [is[1], is[2]] {
            return Err(dim_err("channel_scale", format!("input {is:?}, map {ms:?}")));
        }
        let plane = is[1] * is[2];
        let mv = self.value(map);
        let out = self
            .value(input)
            .chunks_exact(plane)
            .flat_map(|ch| ch.iter().zip(mv).map(|(a, b)| a * b))
            .collect();
        self.push(
            "channel_scale",
            is,
            out,
            Op::ChannelScale { input, map },
            &[input, map],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.numel(x) || shape.contains(&0) {
            return Err(dim_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let out = self.value(x).to_vec();
        self.push("reshape", shape.to_vec(), out, Op::Reshape(x), &[x])
    }

    /// Row-major flattening to rank 1.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.numel(x);
        self.reshape(x, &[n])
    }

    /// Sum of all entries, as a `[1]` scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x), &[x])
    }

    /// Row `index` of a rank-2 table.
    pub fn row(&mut self, table: Var, index: usize) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || index >= ts[0] {
            return Err(dim_err("row", format!("row {index} of {ts:?}")));
        }
        let d = ts[1];
        let out = self.value(table)[index * d..(index + 1) * d].to_vec();
        self.push("row", vec![d], out, Op::Row { table, index }, &[table])
    }

    /// `-ln(max(p[target], 1e-12))` for a probability vector `p`.
    pub fn nll(&mut self, probs: Var, target: usize) -> Result<Var> {
        let n = self.numel(probs);
        if target >= n {
            return Err(Error::Contract(format!(
                "target index {target} out of range for {n} classes"
            )));
        }
        let p = self.value(probs)[target].max(PROB_FLOOR);
        self.push("nll", vec![1], vec![-p.ln()], Op::Nll { probs, target }, &[probs])
    }

    /// Reverse sweep from a scalar `loss`, accumulating into trainable leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                let n = &nodes[v.0];
                if n.requires_grad {
                    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
                    f(buf);
                }
            };
            match &node.op {
                Op::Leaf => {
                    if let Some(lg) = self.leaf_grads[idx].as_mut() {
                        lg.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                }
                Op::Affine { w, x, b } => {
                    let xv = &nodes[x.0].value;
                    let wv = &nodes[w.0].value;
                    let i = xv.len();
                    acc(*w, &mut |dw| {
                        for (row, go) in dw.chunks_exact_mut(i).zip(&g) {
                            if *go != 0.0 {
                                row.iter_mut().zip(xv).for_each(|(d, xi)| *d += go * xi);
                            }
                        }
                    });
                    acc(*x, &mut |dx| {
                        for (row, go) in wv.chunks_exact(i).zip(&g) {
                            dx.iter_mut().zip(row).for_each(|(d, wi)| *d += go * wi);
                        }
                    });
                    if let Some(b) = b {
                        acc(*b, &mut |db| db.iter_mut().zip(&g).for_each(|(d, go)| *d += go));
                    }
                }
                Op::AddN(xs) => {
                    for x in xs {
                        acc(*x, &mut |dx| dx.iter_mut().zip(&g).for_each(|(d, go)| *d += go));
                    }
                }
                Op::Scale(x, f) => {
                    acc(*x, &mut |dx| dx.iter_mut().zip(&g).for_each(|(d, go)| *d += f * go));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    acc(*a, &mut |da| {
                        for ((d, go), y) in da.iter_mut().zip(&g).zip(bv) {
                            *d += go * y;
                        }
                    });
                    acc(*b, &mut |db| {
                        for ((d, go), y) in db.iter_mut().zip(&g).zip(av) {
                            *d += go * y;
                        }
                    });
                }
                Op::Act(kind, x) => {
                    let out = &node.value;
                    acc(*x, &mut |dx| {
                        for ((d, go), y) in dx.iter_mut().zip(&g).zip(out) {
                            *d += go * kind.derivative_from_output(*y);
                        }
                    });
                }
                Op::Conv { input, kernel } => {
                    let geo = ConvGeometry::new(&nodes[input.0].shape, &nodes[kernel.0].shape);
                    let (iv, kv) = (&nodes[input.0].value, &nodes[kernel.0].value);
                    acc(*input, &mut |di| {
                        geo.for_each_tap(|o, i, k| di[i] += g[o] * kv[k]);
                    });
                    acc(*kernel, &mut |dk| {
                        geo.for_each_tap(|o, i, k| dk[k] += g[o] * iv[i]);
                    });
                }
                Op::Softmax(x) => {
                    let p = &node.value;
                    let dot: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
                    acc(*x, &mut |dx| {
                        for ((d, pi), go) in dx.iter_mut().zip(p).zip(&g) {
                            *d += pi * (go - dot);
                        }
                    });
                }
                Op::ChannelScale { input, map } => {
                    let (iv, mv) = (&nodes[input.0].value, &nodes[map.0].value);
                    let plane = mv.len();
                    acc(*input, &mut |di| {
                        for (c, chunk) in di.chunks_exact_mut(plane).enumerate() {
                            for (p, d) in chunk.iter_mut().enumerate() {
                                *d += g[c * plane + p] * mv[p];
                            }
                        }
                    });
                    acc(*map, &mut |dm| {
                        for (k, (go, x)) in g.iter().zip(iv).enumerate() {
                            dm[k % plane] += go * x;
                        }
                    });
                }
                Op::Reshape(x) => {
                    acc(*x, &mut |dx| dx.iter_mut().zip(&g).for_each(|(d, go)| *d += go));
                }
                Op::Sum(x) => {
                    acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0]));
                }
                Op::Row { table, index } => {
                    let d = g.len();
                    acc(*table, &mut |dt| {
                        dt[index * d..(index + 1) * d]
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(a, b)| *a += b);
                    });
                }
                Op::Nll { probs, target } => {
                    let p = nodes[probs.0].value[*target];
                    if p > PROB_FLOOR {
                        acc(*probs, &mut |dp| dp[*target] -= g[0] / p);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Index bookkeeping shared by the convolution forward and backward passes.
#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], kernel: &[usize]) -> Self {
        Self {
            c: input[0],
            h: input[1],
            w: input[2],
            k: kernel[0],
            kh: kernel[2],
            kw: kernel[3],
        }
    }

    /// Calls `f(out_index, input_index, kernel_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        for k in 0..self.k {
            for c in 0..self.c {
                for dy in 0..self.kh {
                    for dx in 0..self.kw {
                        let k_idx = ((k * self.c + c) * self.kh + dy) * self.kw + dx;
                        for y in 0..self.h {
                            let Some(iy) = (y + dy).checked_sub(ph).filter(|&v| v < self.h) else {
                                continue;
                            };
                            for x in 0..self.w {
                                let Some(ix) = (x + dx).checked_sub(pw).filter(|&v| v < self.w)
                                else {
                                    continue;
                                };
                                f(
                                    (k * self.h + y) * self.w + x,
                                    (c * self.h + iy) * self.w + ix,
                                    k_idx,
                                );
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn affine_identity_and_zero_weights() {
        let mut g = Graph::new();
        let w = g.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = g.constant(&Tensor::vector(&[3.0, 4.0]));
        let b = g.constant(&Tensor::zeros(&[2]));
        let y = g.affine(w, x, b).unwrap();
        assert_eq!(g.value(y), &[3.0, 4.0]);

        let w0 = g.constant(&Tensor::zeros(&[2, 2]));
        let b1 = g.constant(&Tensor::vector(&[1.0, 2.0]));
        let y = g.affine(w0, x, b1).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0]);
    }

    #[test]
    fn affine_hand_case_with_input_gradient() {
        let mut g = Graph::new();
        let w = g.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let x = g.variable(&Tensor::vector(&[1.0, 1.0]));
        let b = g.constant(&Tensor::zeros(&[2]));
        let y = g.affine(w, x, b).unwrap();
        assert_eq!(g.value(y), &[3.0, 7.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn affine_shape_mismatch() {
        let mut g = Graph::new();
        let w = g.constant(&Tensor::zeros(&[2, 3]));
        let x = g.constant(&Tensor::zeros(&[2]));
        let b = g.constant(&Tensor::zeros(&[2]));
        assert!(matches!(g.affine(w, x, b), Err(Error::Dimension { .. })));
        let x3 = g.constant(&Tensor::zeros(&[3]));
        let b3 = g.constant(&Tensor::zeros(&[3]));
        assert!(matches!(g.affine(w, x3, b3), Err(Error::Dimension { .. })));
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut g = Graph::new();
        let input = t(&[1, 2, 2], &[1.0, -2.0, 3.5, 4.0]);
        let i = g.constant(&input);
        let k = g.constant(&t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d_same(i, k).unwrap();
        assert_eq!(g.value(y), input.values());
    }

    #[test]
    fn conv_ones_counts_neighbours() {
        let mut g = Graph::new();
        let i = g.constant(&Tensor::full(&[1, 3, 3], 1.0));
        let k = g.constant(&Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d_same(i, k).unwrap();
        assert_eq!(g.value(y), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_zero_kernel_and_errors() {
        let mut g = Graph::new();
        let i = g.constant(&Tensor::full(&[2, 3, 3], 5.0));
        let k = g.constant(&Tensor::zeros(&[3, 2, 3, 3]));
        let y = g.conv2d_same(i, k).unwrap();
        assert_eq!(g.shape(y), &[3, 3, 3]);
        assert!(g.value(y).iter().all(|&v| v == 0.0));

        let even = g.constant(&Tensor::zeros(&[1, 2, 2, 3]));
        assert!(matches!(g.conv2d_same(i, even), Err(Error::Config(_))));
        let wrong_c = g.constant(&Tensor::zeros(&[1, 3, 1, 1]));
        assert!(matches!(g.conv2d_same(i, wrong_c), Err(Error::Dimension { .. })));
    }

    #[test]
    fn activations_at_known_points() {
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert_eq!(Activation::ScaledTanh.apply(0.0), 0.0);
        assert_abs_diff_eq!(Activation::ScaledTanh.apply(1.5), 1.306_819_412_204_497, epsilon = 1e-12);
        for x in [-1e6, -30.0, 30.0, 1e6, f64::MAX] {
            assert!(Activation::ScaledTanh.apply(x).abs() <= SCALED_TANH_GAIN);
        }
        assert!(matches!("relu".parse::<Activation>(), Err(Error::Config(_))));
        assert_eq!("scaled_tanh".parse::<Activation>().unwrap(), Activation::ScaledTanh);
    }

    #[test]
    fn softmax_hand_normalization() {
        let mut g = Graph::new();
        let z = g.constant(&t(
            &[2, 2],
            &[1f64.ln(), 3f64.ln(), 2f64.ln(), 4f64.ln()],
        ));
        let m = g.softmax_spatial(z).unwrap();
        for (a, b) in g.value(m).iter().zip([0.1, 0.3, 0.2, 0.4]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        let flat = g.constant(&Tensor::zeros(&[4]));
        assert!(g.softmax_spatial(flat).is_err());
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let mut g = Graph::new();
        let z = g.constant(&Tensor::full(&[3, 3], 0.7));
        let m = g.softmax_spatial(z).unwrap();
        assert!(g.value(m).iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-15));

        let base = t(&[2, 2], &[0.3, -1.0, 2.0, 0.1]);
        let shifted = t(&[2, 2], &[100.3, 99.0, 102.0, 100.1]);
        let a = g.constant(&base);
        let b = g.constant(&shifted);
        let ma = g.softmax_spatial(a).unwrap();
        let mb = g.softmax_spatial(b).unwrap();
        for (x, y) in g.value(ma).iter().zip(g.value(mb)) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn channel_scale_cases() {
        let mut g = Graph::new();
        let i = g.constant(&Tensor::full(&[2, 2, 2], 1.0));
        let m = g.constant(&t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]));
        let y = g.channel_scale(i, m).unwrap();
        assert_eq!(g.value(y), &[0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4]);

        let input = t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let i = g.constant(&input);
        let one_hot = g.constant(&t(&[2, 2], &[0.0, 0.0, 1.0, 0.0]));
        let y = g.channel_scale(i, one_hot).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 7.0, 0.0]);

        let uniform = g.constant(&Tensor::full(&[2, 2], 0.25));
        let y = g.channel_scale(i, uniform).unwrap();
        for (a, b) in g.value(y).iter().zip(input.values()) {
            assert_eq!(*a, b / 4.0);
        }

        let bad = g.constant(&Tensor::zeros(&[3, 2]));
        assert!(matches!(g.channel_scale(i, bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn backward_basics_and_accumulation() {
        let mut g = Graph::new();
        let x = g.variable(&Tensor::zeros(&[3]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
        g.zero_grad();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 0.0]);

        let mut g = Graph::new();
        let x = g.variable(&Tensor::zeros(&[2]));
        let y = g.sigmoid(x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.25, 0.25]);

        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::vector(&[f64::MAX]));
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn nll_values() {
        let mut g = Graph::new();
        let p = g.constant(&Tensor::full(&[4], 0.25));
        let l = g.nll(p, 2).unwrap();
        assert_abs_diff_eq!(g.value(l)[0], 4f64.ln(), epsilon = 1e-15);
        let one = g.constant(&Tensor::vector(&[0.0, 1.0]));
        let l = g.nll(one, 1).unwrap();
        assert_eq!(g.value(l)[0], 0.0);
        let l = g.nll(one, 0).unwrap();
        assert_abs_diff_eq!(g.value(l)[0], -(1e-12f64).ln(), epsilon = 1e-9);
        assert!(g.nll(one, 2).is_err());
    }
}
