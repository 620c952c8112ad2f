//! Reverse-mode automatic differentiation on a per-pass tape.
//!
//! A forward pass records every primitive into a [`Tape`]; [`Tape::backward`]
//! replays the records in reverse and accumulates adjoints. Parameters live
//! outside the tape in a [`ParamSet`] and are registered per pass, so one
//! parameter may feed many tape nodes (shared weights across frames).
//!
//! Broadcasting is deliberately restricted to the three patterns the
//! pipeline needs: scalar against anything, a channel vector `[C]` against
//! `[H, W, C]`, and a spatial map `[H, W, 1]` against `[H, W, C]`. Anything
//! else is a shape error.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;

/// A learnable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub id: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of named parameters. Order is insertion order and is
/// part of the determinism contract (checkpoints and Adam state align to it).
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    by_id: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, id: impl Into<String>, value: Tensor) -> Result<usize> {
        let id = id.into();
        if self.by_id.contains_key(&id) {
            return Err(Error::Contract(format!("duplicate parameter id {id}")));
        }
        let grad = Tensor::zeros(value.shape());
        let slot = self.params.len();
        self.by_id.insert(id.clone(), slot);
        self.params.push(Parameter { id, value, grad });
        Ok(slot)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, slot: usize) -> &Parameter {
        &self.params[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Parameter {
        &mut self.params[slot]
    }

    pub fn slot_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// How the second operand of a binary op maps onto the first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// b is `[1]`.
    Scalar,
    /// b is `[C]` against a `[H, W, C]`.
    Channel,
    /// b is `[H, W, 1]` against a `[H, W, C]`.
    Spatial,
}

fn broadcast_kind(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    if b == [1] {
        return Ok(Broadcast::Scalar);
    }
    if let ([h, w, c], [bc]) = (a, b) {
        let _ = (h, w);
        if bc == c {
            return Ok(Broadcast::Channel);
        }
    }
    if let ([h, w, _c], [bh, bw, 1]) = (a, b) {
        if bh == h && bw == w {
            return Ok(Broadcast::Spatial);
        }
    }
    Err(Error::Shape(format!(
        "shapes {a:?} and {b:?} are not broadcast-compatible"
    )))
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(#[allow(dead_code)] usize),
    Add(Var, Var, Broadcast),
    Sub(Var, Var),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    MatMul(Var, Var),
    MatVec(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        pad_top: usize,
        pad_left: usize,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Gap(Var),
    MeanChannels(Var),
    MaxChannels {
        input: Var,
        argmax: Vec<usize>,
    },
    MaxPositions {
        input: Var,
        argmax: Vec<usize>,
    },
    WapChannels {
        input: Var,
        weights: Var,
    },
    WapPositions {
        input: Var,
        weights: Var,
    },
    ConcatLast(Vec<Var>),
    SliceLast {
        input: Var,
        start: usize,
        len: usize,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: Vec<(usize, Var)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant input; receives no gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Register a parameter slot for this pass.
    pub fn param(&mut self, set: &ParamSet, slot: usize) -> Var {
        let v = self.push(set.get(slot).value.clone(), Op::Param(slot));
        self.param_nodes.push((slot, v));
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = broadcast_kind(self.value(a).shape(), self.value(b).shape())?;
        let out = binary_forward(self.value(a), self.value(b), kind, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b, kind)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "sub shape mismatch {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = broadcast_kind(self.value(a).shape(), self.value(b).shape())?;
        let out = binary_forward(self.value(a), self.value(b), kind, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b, kind)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        self.push(out, Op::Tanh(a))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims differ: {k} vs {k2}"
            )));
        }
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ta[i * k + p];
                let brow = &tb[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `[m, k] x [k] -> [m]`.
    pub fn matvec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let vt = self.value(v);
        if vt.shape() != [k] {
            return Err(Error::Shape(format!(
                "matvec expects vector [{}], got {:?}",
                k,
                vt.shape()
            )));
        }
        let (ta, tv) = (self.value(a).data(), self.value(v).data());
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &ta[i * k..(i + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += row[p] * tv[p];
            }
            out[i] = s;
        }
        let out = Tensor::new(vec![m], out)?;
        Ok(self.push(out, Op::MatVec(a, v)))
    }

    /// Cross-correlation of `[H, W, Cin]` with a `[kh, kw, Cin, Cout]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        if stride < 1 {
            return Err(Error::Contract("conv2d stride must be >= 1".into()));
        }
        let (h, w, cin) = self.value(input).dims3()?;
        let kshape = self.value(kernel).shape().to_vec();
        let [kh, kw, kcin, cout] = match kshape.as_slice() {
            [a, b, c, d] => [*a, *b, *c, *d],
            s => {
                return Err(Error::Shape(format!(
                    "conv2d kernel must be rank-4, got {s:?}"
                )))
            }
        };
        if kcin != cin {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {cin}, kernel expects {kcin}"
            )));
        }
        let (oh, ow, pad_top, pad_left) = conv_geometry(h, w, kh, kw, stride, padding)?;
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let mut out = vec![0.0; oh * ow * cout];
        for oi in 0..oh {
            for oj in 0..ow {
                let obase = (oi * ow + oj) * cout;
                for ki in 0..kh {
                    let ii = (oi * stride + ki) as isize - pad_top as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    for kj in 0..kw {
                        let jj = (oj * stride + kj) as isize - pad_left as isize;
                        if jj < 0 || jj as usize >= w {
                            continue;
                        }
                        let xbase = ((ii as usize) * w + jj as usize) * cin;
                        let kbase = (ki * kw + kj) * cin * cout;
                        for ci in 0..cin {
                            let xv = x[xbase + ci];
                            if xv == 0.0 {
                                continue;
                            }
                            let krow = &k[kbase + ci * cout..kbase + (ci + 1) * cout];
                            let orow = &mut out[obase..obase + cout];
                            for co in 0..cout {
                                orow[co] += xv * krow[co];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![oh, ow, cout], out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad_top,
                pad_left,
            },
        ))
    }

    /// 2x2 max pooling with stride 2. H and W must be even.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (h, w, c) = self.value(input).dims3()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "maxpool2 needs even spatial dims, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = vec![0.0; oh * ow * c];
        let mut argmax = vec![0usize; oh * ow * c];
        for oi in 0..oh {
            for oj in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let idx = ((2 * oi + di) * w + 2 * oj + dj) * c + ch;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (oi * ow + oj) * c + ch;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let out = Tensor::new(vec![oh, ow, c], out)?;
        Ok(self.push(out, Op::MaxPool2 { input, argmax }))
    }

    /// Global average pool `[H, W, C] -> [C]`.
    pub fn gap(&mut self, input: Var) -> Result<Var> {
        let (h, w, c) = self.value(input).dims3()?;
        let x = self.value(input).data();
        let mut out = vec![0.0; c];
        for ij in 0..h * w {
            let row = &x[ij * c..(ij + 1) * c];
            for ch in 0..c {
                out[ch] += row[ch];
            }
        }
        let norm = 1.0 / (h * w) as f64;
        out.iter_mut().for_each(|v| *v *= norm);
        let out = Tensor::new(vec![c], out)?;
        Ok(self.push(out, Op::Gap(input)))
    }

    /// Mean over channels `[H, W, C] -> [H, W, 1]`.
    pub fn mean_channels(&mut self, input: Var) -> Result<Var> {
        let (h, w, c) = self.value(input).dims3()?;
        let x = self.value(input).data();
        let mut out = vec![0.0; h * w];
        for ij in 0..h * w {
            out[ij] = x[ij * c..(ij + 1) * c].iter().sum::<f64>() / c as f64;
        }
        let out = Tensor::new(vec![h, w, 1], out)?;
        Ok(self.push(out, Op::MeanChannels(input)))
    }

    /// Max over channels `[H, W, C] -> [H, W, 1]`.
    pub fn max_channels(&mut self, input: Var) -> Result<Var> {
        let (h, w, c) = self.value(input).dims3()?;
        let x = self.value(input).data();
        let mut out = vec![0.0; h * w];
        let mut argmax = vec![0usize; h * w];
        for ij in 0..h * w {
            let mut best = f64::NEG_INFINITY;
            let mut bi = 0;
            for ch in 0..c {
                let idx = ij * c + ch;
                if x[idx] > best {
                    best = x[idx];
                    bi = idx;
                }
            }
            out[ij] = best;
            argmax[ij] = bi;
        }
        let out = Tensor::new(vec![h, w, 1], out)?;
        Ok(self.push(out, Op::MaxChannels { input, argmax }))
    }

    /// Max over spatial positions `[H, W, C] -> [C]`.
    pub fn max_positions(&mut self, input: Var) -> Result<Var> {
        let (h, w, c) = self.value(input).dims3()?;
        let x = self.value(input).data();
        let mut out = vec![f64::NEG_INFINITY; c];
        let mut argmax = vec![0usize; c];
        for ij in 0..h * w {
            for ch in 0..c {
                let idx = ij * c + ch;
                if x[idx] > out[ch] {
                    out[ch] = x[idx];
                    argmax[ch] = idx;
                }
            }
        }
        let out = Tensor::new(vec![c], out)?;
        Ok(self.push(out, Op::MaxPositions { input, argmax }))
    }

    /// Weighted average over channels: `out[i,j] = sum_c w[c] * x[i,j,c]`,
    /// shaped `[H, W, 1]`. The learned form of a per-position squeeze.
    pub fn wap_channels(&mut self, input: Var, weights: Var) -> Result<Var> {
        let (h, w, c) = self.value(input).dims3()?;
        if self.value(weights).shape() != [c] {
            return Err(Error::Shape(format!(
                "wap_channels expects weights [{}], got {:?}",
                c,
                self.value(weights).shape()
            )));
        }
        let x = self.value(input).data();
        let wt = self.value(weights).data();
        let mut out = vec![0.0; h * w];
        for ij in 0..h * w {
            let row = &x[ij * c..(ij + 1) * c];
            let mut s = 0.0;
            for ch in 0..c {
                s += wt[ch] * row[ch];
            }
            out[ij] = s;
        }
        let out = Tensor::new(vec![h, w, 1], out)?;
        Ok(self.push(out, Op::WapChannels { input, weights }))
    }

    /// Weighted average over positions: `out[c] = sum_ij w[i*W+j] * x[i,j,c]`,
    /// shaped `[C]`. The learned form of global average pooling.
    pub fn wap_positions(&mut self, input: Var, weights: Var) -> Result<Var> {
        let (h, w, c) = self.value(input).dims3()?;
        if self.value(weights).shape() != [h * w] {
            return Err(Error::Shape(format!(
                "wap_positions expects weights [{}], got {:?}",
                h * w,
                self.value(weights).shape()
            )));
        }
        let x = self.value(input).data();
        let wt = self.value(weights).data();
        let mut out = vec![0.0; c];
        for ij in 0..h * w {
            let wv = wt[ij];
            let row = &x[ij * c..(ij + 1) * c];
            for ch in 0..c {
                out[ch] += wv * row[ch];
            }
        }
        let out = Tensor::new(vec![c], out)?;
        Ok(self.push(out, Op::WapPositions { input, weights }))
    }

    /// Concatenate along the last axis. All inputs must agree on the
    /// leading dims; works for `[H, W, Ci]` maps and `[ni]` vectors.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        let lead = &first[..first.len() - 1];
        let mut total_last = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::Shape(format!(
                    "concat leading dims differ: {first:?} vs {s:?}"
                )));
            }
            total_last += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total_last];
        let mut offset = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let last = s[s.len() - 1];
            let d = self.value(p).data();
            for r in 0..rows {
                out[r * total_last + offset..r * total_last + offset + last]
                    .copy_from_slice(&d[r * last..(r + 1) * last]);
            }
            offset += last;
        }
        let mut shape = lead.to_vec();
        shape.push(total_last);
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::ConcatLast(parts.to_vec())))
    }

    /// Slice `[start, start+len)` of the last axis.
    pub fn slice_last(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        let last = *shape.last().unwrap();
        if start + len > last {
            return Err(Error::Shape(format!(
                "slice {start}..{} exceeds last dim {last}",
                start + len
            )));
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let d = self.value(input).data();
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len].copy_from_slice(&d[r * last + start..r * last + start + len]);
        }
        let mut oshape = shape[..shape.len() - 1].to_vec();
        oshape.push(len);
        let out = Tensor::new(oshape, out)?;
        Ok(self.push(out, Op::SliceLast { input, start, len }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s: f64 = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(input))
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let d = self.value(input).data();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(input))
    }

    /// Mean squared error between two same-shaped vars, as a scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Propagate adjoints from a scalar loss back through the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            by_node: grads,
            param_nodes: self.param_nodes.clone(),
        })
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let accum = |grads: &mut [Option<Tensor>], v: Var, add: Tensor| {
            match &mut grads[v.0] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(add.data()) {
                        *a += b;
                    }
                }
                slot => *slot = Some(add),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b, kind) => {
                accum(grads, *a, g.clone());
                accum(grads, *b, reduce_to(g, self.value(*b).shape(), *kind)?);
            }
            Op::Sub(a, b) => {
                accum(grads, *a, g.clone());
                let mut neg = g.clone();
                neg.data_mut().iter_mut().for_each(|v| *v = -*v);
                accum(grads, *b, neg);
            }
            Op::Mul(a, b, kind) => {
                let ga = binary_forward(g, self.value(*b), *kind, |x, y| x * y);
                accum(grads, *a, ga);
                let gxa = {
                    let (ta, td) = (self.value(*a).data(), g.data());
                    let prod: Vec<f64> = ta.iter().zip(td).map(|(x, y)| x * y).collect();
                    Tensor::new(self.value(*a).shape().to_vec(), prod)?
                };
                accum(grads, *b, reduce_to(&gxa, self.value(*b).shape(), *kind)?);
            }
            Op::Scale(a, k) => {
                let mut ga = g.clone();
                ga.data_mut().iter_mut().for_each(|v| *v *= k);
                accum(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data();
                let data = g
                    .data()
                    .iter()
                    .zip(y)
                    .map(|(gv, yv)| gv * yv * (1.0 - yv))
                    .collect();
                accum(grads, *a, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let data = g
                    .data()
                    .iter()
                    .zip(x)
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                accum(grads, *a, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::Tanh(a) => {
                let y = self.nodes[i].value.data();
                let data = g
                    .data()
                    .iter()
                    .zip(y)
                    .map(|(gv, yv)| gv * (1.0 - yv * yv))
                    .collect();
                accum(grads, *a, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                let (ta, tb, gd) = (self.value(*a).data(), self.value(*b).data(), g.data());
                // dA = G * B^T
                let mut da = vec![0.0; m * k];
                for i2 in 0..m {
                    for j in 0..n {
                        let gv = gd[i2 * n + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            da[i2 * k + p] += gv * tb[p * n + j];
                        }
                    }
                }
                accum(grads, *a, Tensor::new(vec![m, k], da)?);
                // dB = A^T * G
                let mut db = vec![0.0; k * n];
                for i2 in 0..m {
                    for p in 0..k {
                        let av = ta[i2 * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += av * gd[i2 * n + j];
                        }
                    }
                }
                accum(grads, *b, Tensor::new(vec![k, n], db)?);
            }
            Op::MatVec(a, v) => {
                let (m, k) = self.value(*a).dims2()?;
                let (ta, tv, gd) = (self.value(*a).data(), self.value(*v).data(), g.data());
                let mut da = vec![0.0; m * k];
                let mut dv = vec![0.0; k];
                for i2 in 0..m {
                    let gv = gd[i2];
                    if gv == 0.0 {
                        continue;
                    }
                    for p in 0..k {
                        da[i2 * k + p] += gv * tv[p];
                        dv[p] += gv * ta[i2 * k + p];
                    }
                }
                accum(grads, *a, Tensor::new(vec![m, k], da)?);
                accum(grads, *v, Tensor::new(vec![k], dv)?);
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad_top,
                pad_left,
            } => {
                let (h, w, cin) = self.value(*input).dims3()?;
                let kshape = self.value(*kernel).shape();
                let (kh, kw, cout) = (kshape[0], kshape[1], kshape[3]);
                let oshape = self.nodes[i].value.shape();
                let (oh, ow) = (oshape[0], oshape[1]);
                let x = self.value(*input).data();
                let kd = self.value(*kernel).data();
                let gd = g.data();
                let mut dx = vec![0.0; h * w * cin];
                let mut dk = vec![0.0; kh * kw * cin * cout];
                for oi in 0..oh {
                    for oj in 0..ow {
                        let obase = (oi * ow + oj) * cout;
                        for ki in 0..kh {
                            let ii = (oi * stride + ki) as isize - *pad_top as isize;
                            if ii < 0 || ii as usize >= h {
                                continue;
                            }
                            for kj in 0..kw {
                                let jj = (oj * stride + kj) as isize - *pad_left as isize;
                                if jj < 0 || jj as usize >= w {
                                    continue;
                                }
                                let xbase = ((ii as usize) * w + jj as usize) * cin;
                                let kbase = (ki * kw + kj) * cin * cout;
                                for ci in 0..cin {
                                    let xv = x[xbase + ci];
                                    let krow = &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                                    let grow = &gd[obase..obase + cout];
                                    let mut dxv = 0.0;
                                    let dkrow = &mut dk[kbase + ci * cout..kbase + (ci + 1) * cout];
                                    for co in 0..cout {
                                        dxv += krow[co] * grow[co];
                                        dkrow[co] += xv * grow[co];
                                    }
                                    dx[xbase + ci] += dxv;
                                }
                            }
                        }
                    }
                }
                accum(grads, *input, Tensor::new(vec![h, w, cin], dx)?);
                accum(grads, *kernel, Tensor::new(kshape.to_vec(), dk)?);
            }
            Op::MaxPool2 { input, argmax } => {
                let mut dx = Tensor::zeros(self.value(*input).shape());
                for (o, &src) in argmax.iter().enumerate() {
                    dx.data_mut()[src] += g.data()[o];
                }
                accum(grads, *input, dx);
            }
            Op::Gap(a) => {
                let (h, w, c) = self.value(*a).dims3()?;
                let norm = 1.0 / (h * w) as f64;
                let mut dx = vec![0.0; h * w * c];
                for ij in 0..h * w {
                    for ch in 0..c {
                        dx[ij * c + ch] = g.data()[ch] * norm;
                    }
                }
                accum(grads, *a, Tensor::new(vec![h, w, c], dx)?);
            }
            Op::MeanChannels(a) => {
                let (h, w, c) = self.value(*a).dims3()?;
                let norm = 1.0 / c as f64;
                let mut dx = vec![0.0; h * w * c];
                for ij in 0..h * w {
                    let gv = g.data()[ij] * norm;
                    for ch in 0..c {
                        dx[ij * c + ch] = gv;
                    }
                }
                accum(grads, *a, Tensor::new(vec![h, w, c], dx)?);
            }
            Op::MaxChannels { input, argmax } | Op::MaxPositions { input, argmax } => {
                let mut dx = Tensor::zeros(self.value(*input).shape());
                for (o, &src) in argmax.iter().enumerate() {
                    dx.data_mut()[src] += g.data()[o];
                }
                accum(grads, *input, dx);
            }
            Op::WapChannels { input, weights } => {
                let (h, w, c) = self.value(*input).dims3()?;
                let x = self.value(*input).data();
                let wt = self.value(*weights).data();
                let mut dx = vec![0.0; h * w * c];
                let mut dw = vec![0.0; c];
                for ij in 0..h * w {
                    let gv = g.data()[ij];
                    if gv == 0.0 {
                        continue;
                    }
                    for ch in 0..c {
                        dx[ij * c + ch] += wt[ch] * gv;
                        dw[ch] += x[ij * c + ch] * gv;
                    }
                }
                accum(grads, *input, Tensor::new(vec![h, w, c], dx)?);
                accum(grads, *weights, Tensor::new(vec![c], dw)?);
            }
            Op::WapPositions { input, weights } => {
                let (h, w, c) = self.value(*input).dims3()?;
                let x = self.value(*input).data();
                let wt = self.value(*weights).data();
                let mut dx = vec![0.0; h * w * c];
                let mut dw = vec![0.0; h * w];
                for ij in 0..h * w {
                    let wv = wt[ij];
                    for ch in 0..c {
                        dx[ij * c + ch] += wv * g.data()[ch];
                        dw[ij] += x[ij * c + ch] * g.data()[ch];
                    }
                }
                accum(grads, *input, Tensor::new(vec![h, w, c], dx)?);
                accum(grads, *weights, Tensor::new(vec![h * w], dw)?);
            }
            Op::ConcatLast(parts) => {
                let oshape = self.nodes[i].value.shape();
                let total_last = *oshape.last().unwrap();
                let rows: usize = oshape[..oshape.len() - 1].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let pshape = self.value(p).shape().to_vec();
                    let last = *pshape.last().unwrap();
                    let mut dp = vec![0.0; rows * last];
                    for r in 0..rows {
                        dp[r * last..(r + 1) * last].copy_from_slice(
                            &g.data()[r * total_last + offset..r * total_last + offset + last],
                        );
                    }
                    accum(grads, p, Tensor::new(pshape, dp)?);
                    offset += last;
                }
            }
            Op::SliceLast { input, start, len } => {
                let ishape = self.value(*input).shape().to_vec();
                let last = *ishape.last().unwrap();
                let rows: usize = ishape[..ishape.len() - 1].iter().product();
                let mut dx = vec![0.0; rows * last];
                for r in 0..rows {
                    dx[r * last + start..r * last + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                accum(grads, *input, Tensor::new(ishape, dx)?);
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                accum(grads, *a, Tensor::full(self.value(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let gv = g.data()[0] / self.value(*a).len() as f64;
                accum(grads, *a, Tensor::full(self.value(*a).shape(), gv));
            }
        }
        Ok(())
    }
}

/// Per-node adjoints from one backward pass.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    param_nodes: Vec<(usize, Var)>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }

    /// Add this pass's parameter adjoints into the set's `grad` buffers.
    pub fn apply_to(&self, set: &mut ParamSet) {
        for (slot, var) in &self.param_nodes {
            if let Some(g) = &self.by_node[var.0] {
                let p = set.get_mut(*slot);
                for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }

    /// Like `apply_to`, but scales the adjoints first (e.g. by `1/batch`).
    pub fn accumulate_scaled(&self, set: &mut ParamSet, scale: f64) {
        for (slot, var) in &self.param_nodes {
            if let Some(g) = &self.by_node[var.0] {
                let p = set.get_mut(*slot);
                for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn conv_geometry(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize, usize, usize)> {
    match padding {
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(Error::Shape(format!(
                    "kernel {kh}x{kw} exceeds input {h}x{w} with valid padding"
                )));
            }
            Ok(((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0))
        }
        Padding::Same => {
            let oh = h.div_ceil(stride);
            let ow = w.div_ceil(stride);
            let pad_h = ((oh - 1) * stride + kh).saturating_sub(h);
            let pad_w = ((ow - 1) * stride + kw).saturating_sub(w);
            Ok((oh, ow, pad_h / 2, pad_w / 2))
        }
    }
}

fn binary_forward(a: &Tensor, b: &Tensor, kind: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = a.clone();
    match kind {
        Broadcast::Same => {
            for (x, y) in out.data_mut().iter_mut().zip(b.data()) {
                *x = f(*x, *y);
            }
        }
        Broadcast::Scalar => {
            let y = b.data()[0];
            out.data_mut().iter_mut().for_each(|x| *x = f(*x, y));
        }
        Broadcast::Channel => {
            let c = b.len();
            for (i, x) in out.data_mut().iter_mut().enumerate() {
                *x = f(*x, b.data()[i % c]);
            }
        }
        Broadcast::Spatial => {
            let c = a.shape()[2];
            for (i, x) in out.data_mut().iter_mut().enumerate() {
                *x = f(*x, b.data()[i / c]);
            }
        }
    }
    out
}

/// Sum `t` (shaped like the broadcast output) down to `target_shape`.
fn reduce_to(t: &Tensor, target_shape: &[usize], kind: Broadcast) -> Result<Tensor> {
    match kind {
        Broadcast::Same => Ok(t.clone()),
        Broadcast::Scalar => Ok(Tensor::scalar(t.data().iter().sum())),
        Broadcast::Channel => {
            let c = target_shape[0];
            let mut out = vec![0.0; c];
            for (i, v) in t.data().iter().enumerate() {
                out[i % c] += v;
            }
            Tensor::new(vec![c], out)
        }
        Broadcast::Spatial => {
            let c = t.shape()[2];
            let hw: usize = target_shape[0] * target_shape[1];
            let mut out = vec![0.0; hw];
            for (i, v) in t.data().iter().enumerate() {
                out[i / c] += v;
            }
            Tensor::new(target_shape.to_vec(), out)
        }
    }
}

/// One gradient-check outcome.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub scalar_count: usize,
}

/// Compare analytic gradients against central differences for every scalar
/// in `set`. `f` must rebuild the same deterministic forward pass each call
/// and return the scalar loss var.
pub fn grad_check<F>(set: &mut ParamSet, eps: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamSet) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    set.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, set)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::Contract("grad_check loss must be scalar".into()));
    }
    tape.backward(loss)?.apply_to(set);
    let analytic: Vec<Tensor> = set.iter().map(|p| p.grad.clone()).collect();

    let eval = |set: &ParamSet, f: &mut F| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, set)?;
        tape.value(loss).item()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        scalar_count: set.scalar_count(),
    };
    for slot in 0..set.len() {
        for e in 0..set.get(slot).value.len() {
            let orig = set.get(slot).value.data()[e];
            set.get_mut(slot).value.data_mut()[e] = orig + eps;
            let f_plus = eval(set, &mut f)?;
            set.get_mut(slot).value.data_mut()[e] = orig - eps;
            let f_minus = eval(set, &mut f)?;
            set.get_mut(slot).value.data_mut()[e] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[slot].data()[e];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for parameter {} element {e}",
                    set.get(slot).id
                )));
            }
            let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = set.get(slot).id.clone();
                report.worst_index = e;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Nested-loop reference convolution, independent of the tape path.
    fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: (usize, usize)) -> Tensor {
        let (h, w, cin) = x.dims3().unwrap();
        let ks = k.shape();
        let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
        let oh = (h + 2 * pad.0 - kh) / stride + 1;
        let ow = (w + 2 * pad.1 - kw) / stride + 1;
        let mut out = Tensor::zeros(&[oh, ow, cout]);
        for oi in 0..oh {
            for oj in 0..ow {
                for co in 0..cout {
                    let mut s = 0.0;
                    for ki in 0..kh {
                        for kj in 0..kw {
                            for ci in 0..cin {
                                let ii = (oi * stride + ki) as isize - pad.0 as isize;
                                let jj = (oj * stride + kj) as isize - pad.1 as isize;
                                if ii < 0 || jj < 0 || ii as usize >= h || jj as usize >= w {
                                    continue;
                                }
                                s += x.at3(ii as usize, jj as usize, ci)
                                    * k.data()[((ki * kw + kj) * cin + ci) * cout + co];
                            }
                        }
                    }
                    let idx = (oi * ow + oj) * cout + co;
                    out.data_mut()[idx] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_scalar_scaling() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let k = tape.leaf(Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap());
        let y = tape.conv2d(x, k, 1, Padding::Same).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv2d_sum_case() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[3, 3, 1], 1.0));
        let k = tape.leaf(Tensor::full(&[3, 3, 1, 1], 1.0));
        let y = tape.conv2d(x, k, 1, Padding::Valid).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv2d_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[5, 5, 2]);
        let k = rand_tensor(&mut rng, &[3, 3, 2, 4]);
        let mut tape = Tape::new();
        let (xv, kv) = (tape.leaf(x.clone()), tape.leaf(k.clone()));
        let valid = tape.conv2d(xv, kv, 1, Padding::Valid).unwrap();
        let expect = conv_oracle(&x, &k, 1, (0, 0));
        assert!(tape.value(valid).max_abs_diff(&expect).unwrap() < 1e-12);
        let same = tape.conv2d(xv, kv, 1, Padding::Same).unwrap();
        let expect = conv_oracle(&x, &k, 1, (1, 1));
        assert!(tape.value(same).max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, &[4, 4, 1]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let k = tape.leaf(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let y = tape.conv2d(xv, k, 1, Padding::Same).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[4, 4, 3]));
        let k = tape.leaf(Tensor::zeros(&[3, 3, 2, 4]));
        assert!(matches!(
            tape.conv2d(x, k, 1, Padding::Same),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn maxpool2_basics() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        let c = tape.leaf(Tensor::full(&[4, 4, 2], 2.5));
        let y = tape.maxpool2(c).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 2, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.5));

        let odd = tape.leaf(Tensor::zeros(&[3, 4, 1]));
        assert!(matches!(tape.maxpool2(odd), Err(Error::Shape(_))));
    }

    #[test]
    fn maxpool2_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, &[8, 8, 3]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = tape.maxpool2(xv).unwrap();
        for oi in 0..4 {
            for oj in 0..4 {
                for c in 0..3 {
                    let mut best = f64::NEG_INFINITY;
                    for di in 0..2 {
                        for dj in 0..2 {
                            best = best.max(x.at3(2 * oi + di, 2 * oj + dj, c));
                        }
                    }
                    assert_eq!(tape.value(y).at3(oi, oj, c), best);
                }
            }
        }
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::scalar(0.0));
        let sz = tape.sigmoid(z);
        assert_eq!(tape.value(sz).data()[0], 0.5);
        let one = tape.leaf(Tensor::scalar(1.0));
        let s = tape.sigmoid(one);
        assert!((tape.value(s).data()[0] - 0.7310585786300049).abs() < 1e-12);
        let neg = tape.leaf(Tensor::scalar(-3.0));
        let r = tape.relu(neg);
        assert_eq!(tape.value(r).data()[0], 0.0);
        let pos = tape.leaf(Tensor::scalar(3.0));
        let r = tape.relu(pos);
        assert_eq!(tape.value(r).data()[0], 3.0);
    }

    #[test]
    fn matmul_cases() {
        let mut tape = Tape::new();
        let id = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![2, 3], (1..=6).map(f64::from).collect()).unwrap());
        let y = tape.matmul(id, b).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(b).data());

        let a = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let c = tape.leaf(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let y = tape.matmul(a, c).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);

        let bad = tape.leaf(Tensor::zeros(&[3, 3]));
        assert!(matches!(tape.matmul(a, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = rand_tensor(&mut rng, &[4, 5]);
        let b = rand_tensor(&mut rng, &[5, 3]);
        let mut tape = Tape::new();
        let (av, bv) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let y = tape.matmul(av, bv).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..5 {
                    s += a.data()[i * 5 + p] * b.data()[p * 3 + j];
                }
                assert!((tape.value(y).data()[i * 3 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gap_cases() {
        let mut tape = Tape::new();
        let c = tape.leaf(Tensor::full(&[3, 3, 4], 7.5));
        let y = tape.gap(c).unwrap();
        assert_eq!(tape.value(y).shape(), &[4]);
        assert!(tape.value(y).data().iter().all(|&v| (v - 7.5).abs() < 1e-15));

        let x = tape.leaf(Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.gap(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);
    }

    #[test]
    fn gap_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[8, 8, 256]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = tape.gap(xv).unwrap();
        for c in 0..256 {
            let mut s = 0.0;
            for i in 0..8 {
                for j in 0..8 {
                    s += x.at3(i, j, c);
                }
            }
            assert!((tape.value(y).data()[c] - s / 64.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut set = ParamSet::new();
        let slot = set
            .add("p", Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&set, slot);
        let loss = tape.sum(p);
        tape.backward(loss).unwrap().apply_to(&mut set);
        assert!(set.get(slot).grad.data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn backward_quadratic_gives_2p() {
        let mut set = ParamSet::new();
        let value = Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let slot = set.add("p", value.clone()).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&set, slot);
        let sq = tape.mul(p, p).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap().apply_to(&mut set);
        for (g, v) in set.get(slot).grad.data().iter().zip(value.data()) {
            assert!((g - 2.0 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_nonscalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_param_accumulates_both_uses() {
        // loss = sum(p) + sum(p) via two registrations of the same slot.
        let mut set = ParamSet::new();
        let slot = set.add("p", Tensor::full(&[3], 1.0)).unwrap();
        let mut tape = Tape::new();
        let p1 = tape.param(&set, slot);
        let p2 = tape.param(&set, slot);
        let s1 = tape.sum(p1);
        let s2 = tape.sum(p2);
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap().apply_to(&mut set);
        assert!(set.get(slot).grad.data().iter().all(|&g| g == 2.0));
    }

    #[test]
    fn grad_check_quadratic() {
        let mut set = ParamSet::new();
        let slot = set.add("theta", Tensor::scalar(3.0)).unwrap();
        let report = grad_check(&mut set, 1e-5, |tape, set| {
            let p = tape.param(set, slot);
            tape.mul(p, p)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "err {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_sigmoid_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut set = ParamSet::new();
        let w = set.add("w", rand_tensor(&mut rng, &[3, 4])).unwrap();
        let b = set.add("b", rand_tensor(&mut rng, &[3])).unwrap();
        let x = rand_tensor(&mut rng, &[4]);
        let report = grad_check(&mut set, 1e-5, |tape, set| {
            let (wv, bv) = (tape.param(set, w), tape.param(set, b));
            let xv = tape.leaf(x.clone());
            let h = tape.matvec(wv, xv)?;
            let h = tape.add(h, bv)?;
            let s = tape.sigmoid(h);
            Ok(tape.sum(s))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "err {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_eps_bounds() {
        let mut set = ParamSet::new();
        let slot = set.add("p", Tensor::scalar(1.0)).unwrap();
        assert!(grad_check(&mut set, 1e-2, |tape, set| {
            Ok(tape.param(set, slot))
        })
        .is_err());
    }

    #[test]
    fn broadcast_spatial_equals_explicit_replication() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = rand_tensor(&mut rng, &[4, 4, 6]);
        let m = rand_tensor(&mut rng, &[4, 4, 1]);
        let mut tape = Tape::new();
        let (av, mv) = (tape.leaf(a.clone()), tape.leaf(m.clone()));
        let y = tape.mul(av, mv).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                for c in 0..6 {
                    let expect = a.at3(i, j, c) * m.at3(i, j, 0);
                    assert!((tape.value(y).at3(i, j, c) - expect).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn broadcast_rejects_arbitrary_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[4, 4, 6]));
        let b = tape.leaf(Tensor::zeros(&[4, 1, 6]));
        assert!(matches!(tape.mul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn determinism_forward_backward() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut set = ParamSet::new();
            let k = set.add("k", rand_tensor(&mut rng, &[3, 3, 2, 3])).unwrap();
            let x = rand_tensor(&mut rng, &[6, 6, 2]);
            let mut tape = Tape::new();
            let kv = tape.param(&set, k);
            let xv = tape.leaf(x);
            let y = tape.conv2d(xv, kv, 1, Padding::Same).unwrap();
            let r = tape.relu(y);
            let loss = tape.mean(r);
            tape.backward(loss).unwrap().apply_to(&mut set);
            (
                tape.value(loss).data()[0].to_bits(),
                set.get(k)
                    .grad
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn grad_check_conv_maxpool_gap_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut set = ParamSet::new();
        let k = set.add("k", rand_tensor(&mut rng, &[3, 3, 2, 3])).unwrap();
        let x = rand_tensor(&mut rng, &[6, 6, 2]);
        let report = grad_check(&mut set, 1e-5, |tape, set| {
            let kv = tape.param(set, k);
            let xv = tape.leaf(x.clone());
            let y = tape.conv2d(xv, kv, 1, Padding::Same)?;
            let y = tape.relu(y);
            let y = tape.maxpool2(y)?;
            let g = tape.gap(y)?;
            Ok(tape.sum(g))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "err {}", report.max_rel_err);
    }
}
