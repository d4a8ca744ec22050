//! Eager reverse-mode automatic differentiation over a closed op set.
//!
//! A `Graph` is a Wengert tape: builder methods evaluate immediately and
//! record the op, `backward` replays the tape in reverse. Every op output
//! is checked finite at creation, so NaN/Inf surface at the op that made
//! them instead of three modules later.
//!
//! Conventions:
//! - tensors are row-major f64 (`crate::tensor::Tensor`);
//! - elementwise binary ops broadcast with leading-1 padding;
//! - matmul/transpose are rank-2 only; `linear` flattens leading axes;
//! - gradients of a node used twice accumulate.

use crate::tensor::{strides, Tensor};
use crate::{Error, Result};

pub type NodeId = usize;

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
enum Op {
    Const,
    Input,
    Param(String),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    BilinearUpsample {
        x: NodeId,
        factor: usize,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Gelu(NodeId),
    Abs(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    Softmax {
        x: NodeId,
        axis: usize,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Reshape(NodeId),
    GatherRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    SliceLast {
        x: NodeId,
        start: usize,
        end: usize,
    },
    ConcatFirst(Vec<NodeId>),
    ConcatLast(Vec<NodeId>),
    MaxLast(NodeId),
    MeanLast(NodeId),
    ColMax(NodeId),
    ColMean(NodeId),
    Sum(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Reverse-mode tape. Build nodes through the methods; values are
/// available immediately via [`Graph::value`].
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Gradient of the last `backward` root with respect to node `id`.
    /// `None` when the node did not require or receive a gradient.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool, context: &'static str) -> Result<NodeId> {
        value.check_finite(context)?;
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    // ---- leaves ----

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<NodeId> {
        self.push(Op::Const, t, false, "graph::constant")
    }

    /// Differentiable leaf (for probing gradients of non-parameter inputs).
    pub fn input(&mut self, t: Tensor) -> Result<NodeId> {
        self.push(Op::Input, t, true, "graph::input")
    }

    /// Differentiable leaf tied to a parameter path. The value is a copy;
    /// gradients flow back to the store through
    /// [`Graph::add_param_grads_to`].
    pub fn param_leaf(&mut self, path: &str, value: Tensor) -> Result<NodeId> {
        self.push(Op::Param(path.to_string()), value, true, "graph::param")
    }

    // ---- elementwise binary with broadcasting ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x + y, "graph::add", BinKind::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x - y, "graph::sub", BinKind::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x * y, "graph::mul", BinKind::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x / y, "graph::div", BinKind::Div)
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        context: &'static str,
        kind: BinKind,
    ) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let out_shape = broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| Error::Invalid {
            context,
            message: format!("cannot broadcast {:?} with {:?}", va.shape(), vb.shape()),
        })?;
        let mut out = Tensor::zeros(out_shape.clone());
        {
            let (da, db, dout) = (va.data(), vb.data(), out.data_mut());
            for_each_broadcast(va.shape(), vb.shape(), &out_shape, |oi, ai, bi| {
                dout[oi] = f(da[ai], db[bi]);
            });
        }
        let needs = self.needs(a) || self.needs(b);
        let op = match kind {
            BinKind::Add => Op::Add(a, b),
            BinKind::Sub => Op::Sub(a, b),
            BinKind::Mul => Op::Mul(a, b),
            BinKind::Div => Op::Div(a, b),
        };
        self.push(op, out, needs, context)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let v = self.nodes[x].value.clone();
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|e| e * factor).collect(),
        );
        let out = match out {
            Ok(t) => t,
            Err(_) => return Err(Error::NonFinite { context: "graph::scale" }),
        };
        let needs = self.needs(x);
        self.push(Op::Scale(x, factor), out, needs, "graph::scale")
    }

    pub fn add_scalar(&mut self, x: NodeId, offset: f64) -> Result<NodeId> {
        let v = &self.nodes[x].value;
        let out = Tensor::zeros(v.shape().to_vec());
        let mut out = out;
        for (o, i) in out.data_mut().iter_mut().zip(v.data()) {
            *o = i + offset;
        }
        let needs = self.needs(x);
        self.push(Op::AddScalar(x), out, needs, "graph::add_scalar")
    }

    // ---- matrix ops ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::Invalid {
                context: "graph::matmul",
                message: format!("incompatible shapes {:?} x {:?}", va.shape(), vb.shape()),
            });
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = Tensor::zeros(vec![m, n]);
        mm_nn(out.data_mut(), va.data(), vb.data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Matmul(a, b), out, needs, "graph::matmul")
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.nodes[x].value;
        if v.shape().len() != 2 {
            return Err(Error::Invalid {
                context: "graph::transpose",
                message: format!("rank-2 required, got {:?}", v.shape()),
            });
        }
        let (m, n) = (v.shape()[0], v.shape()[1]);
        let mut out = Tensor::zeros(vec![n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data_mut()[j * m + i] = v.data()[i * n + j];
            }
        }
        let needs = self.needs(x);
        self.push(Op::Transpose(x), out, needs, "graph::transpose")
    }

    /// `x @ w + b` where `x` is `[.., d_in]`, `w` is `[d_in, d_out]` and
    /// `b` is `[d_out]`; leading axes of `x` are preserved.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vw, vb) = (
            &self.nodes[x].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
        );
        if vw.shape().len() != 2 {
            return Err(Error::Invalid {
                context: "graph::linear",
                message: format!("weight must be rank 2, got {:?}", vw.shape()),
            });
        }
        let (din, dout) = (vw.shape()[0], vw.shape()[1]);
        if vx.shape().is_empty() || *vx.shape().last().unwrap() != din || vb.shape() != [dout] {
            return Err(Error::Invalid {
                context: "graph::linear",
                message: format!(
                    "x {:?}, w {:?}, b {:?} are inconsistent",
                    vx.shape(),
                    vw.shape(),
                    vb.shape()
                ),
            });
        }
        let rows = vx.numel() / din;
        let mut out_shape = vx.shape().to_vec();
        *out_shape.last_mut().unwrap() = dout;
        let mut out = Tensor::zeros(out_shape);
        mm_nn(out.data_mut(), vx.data(), vw.data(), rows, din, dout);
        for r in 0..rows {
            let row = &mut out.data_mut()[r * dout..(r + 1) * dout];
            for (o, bv) in row.iter_mut().zip(vb.data()) {
                *o += bv;
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Op::Linear { x, w, b }, out, needs, "graph::linear")
    }

    /// Stride-1 shape-preserving 2-D cross-correlation. `x` is
    /// `[h, w, c_in]`, `w` is `[kh, kw, c_in, c_out]` with odd kernel
    /// sides, `b` is `[c_out]`. `padding` must equal `(k - 1) / 2`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, padding: usize) -> Result<NodeId> {
        let (vx, vw, vb) = (
            &self.nodes[x].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
        );
        if vx.shape().len() != 3 || vw.shape().len() != 4 {
            return Err(Error::Invalid {
                context: "graph::conv2d",
                message: format!("x {:?}, w {:?}", vx.shape(), vw.shape()),
            });
        }
        let (h, wd, cin) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (kh, kw, wcin, cout) = (
            vw.shape()[0],
            vw.shape()[1],
            vw.shape()[2],
            vw.shape()[3],
        );
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Invalid {
                context: "graph::conv2d",
                message: format!("kernel sides must be odd, got {}x{}", kh, kw),
            });
        }
        if kh != kw || padding != (kh - 1) / 2 {
            return Err(Error::Invalid {
                context: "graph::conv2d",
                message: format!(
                    "padding {} does not preserve shape for {}x{} kernel",
                    padding, kh, kw
                ),
            });
        }
        if wcin != cin || vb.shape() != [cout] {
            return Err(Error::Invalid {
                context: "graph::conv2d",
                message: format!(
                    "channel mismatch: x {:?}, w {:?}, b {:?}",
                    vx.shape(),
                    vw.shape(),
                    vb.shape()
                ),
            });
        }
        let (ph, pw) = (kh / 2, kw / 2);
        let mut out = Tensor::zeros(vec![h, wd, cout]);
        {
            let (xd, wdat, bd, od) = (vx.data(), vw.data(), vb.data(), out.data_mut());
            let mut acc = vec![0.0f64; cout];
            for y in 0..h {
                for xc in 0..wd {
                    acc.copy_from_slice(bd);
                    for dy in 0..kh {
                        let iy = y as isize + dy as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..kw {
                            let ix = xc as isize + dx as isize - pw as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let xoff = ((iy as usize) * wd + ix as usize) * cin;
                            let woff = (dy * kw + dx) * cin * cout;
                            for ci in 0..cin {
                                let xv = xd[xoff + ci];
                                if xv == 0.0 {
                                    continue;
                                }
                                let wrow = &wdat[woff + ci * cout..woff + (ci + 1) * cout];
                                for (a, wv) in acc.iter_mut().zip(wrow) {
                                    *a += xv * wv;
                                }
                            }
                        }
                    }
                    od[(y * wd + xc) * cout..(y * wd + xc + 1) * cout].copy_from_slice(&acc);
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Op::Conv2d { x, w, b }, out, needs, "graph::conv2d")
    }

    /// Bilinear upsampling of `[h, w, c]` by an integer factor, sampling
    /// with half-pixel centers and edge clamping.
    pub fn bilinear_upsample(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let v = &self.nodes[x].value;
        if v.shape().len() != 3 || factor == 0 {
            return Err(Error::Invalid {
                context: "graph::bilinear_upsample",
                message: format!("x {:?}, factor {}", v.shape(), factor),
            });
        }
        let (h, w, c) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let (oh, ow) = (h * factor, w * factor);
        let ytab = resample_table(oh, h, factor);
        let xtab = resample_table(ow, w, factor);
        let mut out = Tensor::zeros(vec![oh, ow, c]);
        {
            let (xd, od) = (v.data(), out.data_mut());
            for oy in 0..oh {
                let (y0, y1, wy) = ytab[oy];
                for ox in 0..ow {
                    let (x0, x1, wx) = xtab[ox];
                    let o = (oy * ow + ox) * c;
                    let p00 = (y0 * w + x0) * c;
                    let p01 = (y0 * w + x1) * c;
                    let p10 = (y1 * w + x0) * c;
                    let p11 = (y1 * w + x1) * c;
                    for ch in 0..c {
                        od[o + ch] = (1.0 - wy) * (1.0 - wx) * xd[p00 + ch]
                            + (1.0 - wy) * wx * xd[p01 + ch]
                            + wy * (1.0 - wx) * xd[p10 + ch]
                            + wy * wx * xd[p11 + ch];
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            Op::BilinearUpsample { x, factor },
            out,
            needs,
            "graph::bilinear_upsample",
        )
    }

    // ---- elementwise unary ----

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x), "graph::relu")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, sigmoid, Op::Sigmoid(x), "graph::sigmoid")
    }

    /// Tanh-form GELU: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, gelu, Op::Gelu(x), "graph::gelu")
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, f64::abs, Op::Abs(x), "graph::abs")
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, f64::ln, Op::Log(x), "graph::log")
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, f64::sqrt, Op::Sqrt(x), "graph::sqrt")
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo <= hi) {
            return Err(Error::Invalid {
                context: "graph::clamp",
                message: format!("lo {} > hi {}", lo, hi),
            });
        }
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi }, "graph::clamp")
    }

    fn unary(
        &mut self,
        x: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
        context: &'static str,
    ) -> Result<NodeId> {
        let v = &self.nodes[x].value;
        let mut out = Tensor::zeros(v.shape().to_vec());
        for (o, i) in out.data_mut().iter_mut().zip(v.data()) {
            *o = f(*i);
        }
        let needs = self.needs(x);
        self.push(op, out, needs, context)
    }

    // ---- normalisation ----

    /// Softmax over one axis.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = &self.nodes[x].value;
        if axis >= v.shape().len() {
            return Err(Error::Invalid {
                context: "graph::softmax",
                message: format!("axis {} out of range for {:?}", axis, v.shape()),
            });
        }
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let mut out = Tensor::zeros(v.shape().to_vec());
        {
            let (xd, od) = (v.data(), out.data_mut());
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..len {
                        mx = mx.max(xd[base + j * inner]);
                    }
                    let mut z = 0.0;
                    for j in 0..len {
                        let e = (xd[base + j * inner] - mx).exp();
                        od[base + j * inner] = e;
                        z += e;
                    }
                    for j in 0..len {
                        od[base + j * inner] /= z;
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(Op::Softmax { x, axis }, out, needs, "graph::softmax")
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (vx, vg, vb) = (
            &self.nodes[x].value,
            &self.nodes[gamma].value,
            &self.nodes[beta].value,
        );
        let d = *vx.shape().last().ok_or_else(|| Error::Invalid {
            context: "graph::layer_norm",
            message: "rank >= 1 required".into(),
        })?;
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(Error::Invalid {
                context: "graph::layer_norm",
                message: format!(
                    "gamma {:?} / beta {:?} must be [{}]",
                    vg.shape(),
                    vb.shape(),
                    d
                ),
            });
        }
        let rows = vx.numel() / d;
        let mut out = Tensor::zeros(vx.shape().to_vec());
        {
            let (xd, gd, bd, od) = (vx.data(), vg.data(), vb.data(), out.data_mut());
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for j in 0..d {
                    od[r * d + j] = gd[j] * (row[j] - mean) * inv + bd[j];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Op::LayerNorm { x, gamma, beta },
            out,
            needs,
            "graph::layer_norm",
        )
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = &self.nodes[x].value;
        let out = v.clone().reshape(shape)?;
        let needs = self.needs(x);
        self.push(Op::Reshape(x), out, needs, "graph::reshape")
    }

    /// Selects rows (first axis) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let v = &self.nodes[x].value;
        if v.shape().is_empty() {
            return Err(Error::Invalid {
                context: "graph::gather_rows",
                message: "rank >= 1 required".into(),
            });
        }
        let n = v.shape()[0];
        if let Some(bad) = rows.iter().find(|r| **r >= n) {
            return Err(Error::Invalid {
                context: "graph::gather_rows",
                message: format!("row index {} out of range 0..{}", bad, n),
            });
        }
        let span = v.numel() / n.max(1);
        let mut shape = v.shape().to_vec();
        shape[0] = rows.len();
        let mut out = Tensor::zeros(shape);
        for (k, r) in rows.iter().enumerate() {
            out.data_mut()[k * span..(k + 1) * span]
                .copy_from_slice(&v.data()[r * span..(r + 1) * span]);
        }
        let needs = self.needs(x);
        self.push(Op::GatherRows { x, rows }, out, needs, "graph::gather_rows")
    }

    /// Slices `start..end` along the last axis.
    pub fn slice_last(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = &self.nodes[x].value;
        let d = *v.shape().last().ok_or_else(|| Error::Invalid {
            context: "graph::slice_last",
            message: "rank >= 1 required".into(),
        })?;
        if start >= end || end > d {
            return Err(Error::Invalid {
                context: "graph::slice_last",
                message: format!("range {}..{} invalid for axis of {}", start, end, d),
            });
        }
        let rows = v.numel() / d;
        let width = end - start;
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        let mut out = Tensor::zeros(shape);
        for r in 0..rows {
            out.data_mut()[r * width..(r + 1) * width]
                .copy_from_slice(&v.data()[r * d + start..r * d + end]);
        }
        let needs = self.needs(x);
        self.push(
            Op::SliceLast { x, start, end },
            out,
            needs,
            "graph::slice_last",
        )
    }

    /// Concatenates along the first axis; trailing axes must match.
    pub fn concat_first(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Invalid {
                context: "graph::concat_first",
                message: "no parts".into(),
            });
        }
        let tail = self.nodes[parts[0]].value.shape()[1..].to_vec();
        let mut first = 0usize;
        for &p in parts {
            let s = self.nodes[p].value.shape();
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::Invalid {
                    context: "graph::concat_first",
                    message: format!("part shape {:?} does not extend {:?}", s, tail),
                });
            }
            first += s[0];
        }
        let mut shape = vec![first];
        shape.extend_from_slice(&tail);
        let mut out = Tensor::zeros(shape);
        let mut off = 0usize;
        for &p in parts {
            let v = &self.nodes[p].value;
            out.data_mut()[off..off + v.numel()].copy_from_slice(v.data());
            off += v.numel();
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            Op::ConcatFirst(parts.to_vec()),
            out,
            needs,
            "graph::concat_first",
        )
    }

    /// Concatenates along the last axis; leading axes must match.
    pub fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Invalid {
                context: "graph::concat_last",
                message: "no parts".into(),
            });
        }
        let head = {
            let s = self.nodes[parts[0]].value.shape();
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.nodes[p].value.shape();
            if s.is_empty() || s[..s.len() - 1] != head[..] {
                return Err(Error::Invalid {
                    context: "graph::concat_last",
                    message: format!("part shape {:?} does not extend {:?}", s, head),
                });
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = head.iter().product();
        let mut shape = head.clone();
        shape.push(total);
        let mut out = Tensor::zeros(shape);
        for r in 0..rows {
            let mut off = 0usize;
            for (pi, &p) in parts.iter().enumerate() {
                let w = widths[pi];
                let v = &self.nodes[p].value;
                out.data_mut()[r * total + off..r * total + off + w]
                    .copy_from_slice(&v.data()[r * w..(r + 1) * w]);
                off += w;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            Op::ConcatLast(parts.to_vec()),
            out,
            needs,
            "graph::concat_last",
        )
    }

    // ---- reductions ----

    /// Max over the last axis, keeping it as size 1. Ties route the
    /// gradient to the first maximum.
    pub fn max_last(&mut self, x: NodeId) -> Result<NodeId> {
        self.reduce_last(x, true, Op::MaxLast(x), "graph::max_last")
    }

    /// Mean over the last axis, keeping it as size 1.
    pub fn mean_last(&mut self, x: NodeId) -> Result<NodeId> {
        self.reduce_last(x, false, Op::MeanLast(x), "graph::mean_last")
    }

    fn reduce_last(
        &mut self,
        x: NodeId,
        is_max: bool,
        op: Op,
        context: &'static str,
    ) -> Result<NodeId> {
        let v = &self.nodes[x].value;
        let d = *v.shape().last().ok_or_else(|| Error::Invalid {
            context: "graph::reduce_last",
            message: "rank >= 1 required".into(),
        })?;
        if d == 0 {
            return Err(Error::Invalid {
                context: "graph::reduce_last",
                message: "empty reduction axis".into(),
            });
        }
        let rows = v.numel() / d;
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let mut out = Tensor::zeros(shape);
        for r in 0..rows {
            let row = &v.data()[r * d..(r + 1) * d];
            out.data_mut()[r] = if is_max {
                row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            } else {
                row.iter().sum::<f64>() / d as f64
            };
        }
        let needs = self.needs(x);
        self.push(op, out, needs, context)
    }

    /// Column-wise max of a rank-2 tensor, shape `[1, cols]`.
    pub fn col_max(&mut self, x: NodeId) -> Result<NodeId> {
        self.reduce_first(x, true, Op::ColMax(x), "graph::col_max")
    }

    /// Column-wise mean of a rank-2 tensor, shape `[1, cols]`.
    pub fn col_mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.reduce_first(x, false, Op::ColMean(x), "graph::col_mean")
    }

    fn reduce_first(
        &mut self,
        x: NodeId,
        is_max: bool,
        op: Op,
        context: &'static str,
    ) -> Result<NodeId> {
        let v = &self.nodes[x].value;
        if v.shape().len() != 2 || v.shape()[0] == 0 {
            return Err(Error::Invalid {
                context: "graph::reduce_first",
                message: format!("non-empty rank-2 required, got {:?}", v.shape()),
            });
        }
        let (n, c) = (v.shape()[0], v.shape()[1]);
        let mut out = Tensor::zeros(vec![1, c]);
        for j in 0..c {
            let mut acc = if is_max { f64::NEG_INFINITY } else { 0.0 };
            for i in 0..n {
                let e = v.data()[i * c + j];
                if is_max {
                    acc = acc.max(e);
                } else {
                    acc += e;
                }
            }
            out.data_mut()[j] = if is_max { acc } else { acc / n as f64 };
        }
        let needs = self.needs(x);
        self.push(op, out, needs, context)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.nodes[x].value;
        let out = Tensor::scalar(v.data().iter().sum());
        let needs = self.needs(x);
        self.push(Op::Sum(x), out, needs, "graph::sum")
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.nodes[x].value.numel().max(1);
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    // ---- backward ----

    /// Reverse sweep from a single-element root. Gradients are replaced,
    /// not accumulated, across calls.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::Invalid {
                context: "graph::backward",
                message: format!(
                    "root must have one element, shape is {:?}",
                    self.nodes[root].value.shape()
                ),
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        let seed = Tensor::full(self.nodes[root].value.shape().to_vec(), 1.0);
        self.grads[root] = Some(seed);
        for id in (0..=root).rev() {
            if self.grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = self.grads[id].take().unwrap();
            g.check_finite("graph::backward")?;
            self.step_backward(id, &g)?;
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, id: NodeId, delta: Tensor) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut self.grads[id] {
            Some(g) => {
                for (a, d) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn step_backward(&mut self, id: NodeId, g: &Tensor) -> Result<()> {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Const | Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                let da = reduce_to_shape(g, self.nodes[a].value.shape());
                let db = reduce_to_shape(g, self.nodes[b].value.shape());
                self.accum(a, da);
                self.accum(b, db);
            }
            Op::Sub(a, b) => {
                let da = reduce_to_shape(g, self.nodes[a].value.shape());
                let mut db = reduce_to_shape(g, self.nodes[b].value.shape());
                for v in db.data_mut() {
                    *v = -*v;
                }
                self.accum(a, da);
                self.accum(b, db);
            }
            Op::Mul(a, b) => {
                let (da, db) = {
                    let va = &self.nodes[a].value;
                    let vb = &self.nodes[b].value;
                    let mut ga = Tensor::zeros(g.shape().to_vec());
                    let mut gb = Tensor::zeros(g.shape().to_vec());
                    {
                        let (gad, gbd) = (ga.data_mut(), gb.data_mut());
                        let (ad, bd, gd) = (va.data(), vb.data(), g.data());
                        for_each_broadcast(va.shape(), vb.shape(), g.shape(), |oi, ai, bi| {
                            gad[oi] = gd[oi] * bd[bi];
                            gbd[oi] = gd[oi] * ad[ai];
                        });
                    }
                    (
                        reduce_to_shape(&ga, va.shape()),
                        reduce_to_shape(&gb, vb.shape()),
                    )
                };
                self.accum(a, da);
                self.accum(b, db);
            }
            Op::Div(a, b) => {
                let (da, db) = {
                    let va = &self.nodes[a].value;
                    let vb = &self.nodes[b].value;
                    let mut ga = Tensor::zeros(g.shape().to_vec());
                    let mut gb = Tensor::zeros(g.shape().to_vec());
                    {
                        let (gad, gbd) = (ga.data_mut(), gb.data_mut());
                        let (ad, bd, gd) = (va.data(), vb.data(), g.data());
                        for_each_broadcast(va.shape(), vb.shape(), g.shape(), |oi, ai, bi| {
                            gad[oi] = gd[oi] / bd[bi];
                            gbd[oi] = -gd[oi] * ad[ai] / (bd[bi] * bd[bi]);
                        });
                    }
                    (
                        reduce_to_shape(&ga, va.shape()),
                        reduce_to_shape(&gb, vb.shape()),
                    )
                };
                self.accum(a, da);
                self.accum(b, db);
            }
            Op::Scale(x, f) => {
                let mut d = g.clone();
                for v in d.data_mut() {
                    *v *= f;
                }
                self.accum(x, d);
            }
            Op::AddScalar(x) => {
                self.accum(x, g.clone());
            }
            Op::Matmul(a, b) => {
                let va = &self.nodes[a].value;
                let vb = &self.nodes[b].value;
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                let mut da = Tensor::zeros(vec![m, k]);
                mm_nt(da.data_mut(), g.data(), vb.data(), m, n, k);
                let mut db = Tensor::zeros(vec![k, n]);
                mm_tn(db.data_mut(), va.data(), g.data(), m, k, n);
                self.accum(a, da);
                self.accum(b, db);
            }
            Op::Transpose(x) => {
                let (n, m) = (g.shape()[0], g.shape()[1]);
                let mut d = Tensor::zeros(vec![m, n]);
                for i in 0..n {
                    for j in 0..m {
                        d.data_mut()[j * n + i] = g.data()[i * m + j];
                    }
                }
                self.accum(x, d);
            }
            Op::Linear { x, w, b } => {
                let vx = &self.nodes[x].value;
                let vw = &self.nodes[w].value;
                let (din, dout) = (vw.shape()[0], vw.shape()[1]);
                let rows = vx.numel() / din;
                let mut dx = Tensor::zeros(vx.shape().to_vec());
                mm_nt(dx.data_mut(), g.data(), vw.data(), rows, dout, din);
                let mut dw = Tensor::zeros(vec![din, dout]);
                mm_tn(dw.data_mut(), vx.data(), g.data(), rows, din, dout);
                let mut db = Tensor::zeros(vec![dout]);
                for r in 0..rows {
                    for j in 0..dout {
                        db.data_mut()[j] += g.data()[r * dout + j];
                    }
                }
                self.accum(x, dx);
                self.accum(w, dw);
                self.accum(b, db);
            }
            Op::Conv2d { x, w, b } => {
                let (dx, dw, db) = {
                    let vx = &self.nodes[x].value;
                    let vw = &self.nodes[w].value;
                    conv2d_backward(vx, vw, g)
                };
                self.accum(x, dx);
                self.accum(w, dw);
                self.accum(b, db);
            }
            Op::BilinearUpsample { x, factor } => {
                let d = {
                    let vx = &self.nodes[x].value;
                    let (h, w, c) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                    let (oh, ow) = (h * factor, w * factor);
                    let ytab = resample_table(oh, h, factor);
                    let xtab = resample_table(ow, w, factor);
                    let mut d = Tensor::zeros(vec![h, w, c]);
                    let dd = d.data_mut();
                    for oy in 0..oh {
                        let (y0, y1, wy) = ytab[oy];
                        for ox in 0..ow {
                            let (x0, x1, wx) = xtab[ox];
                            let o = (oy * ow + ox) * c;
                            for ch in 0..c {
                                let gv = g.data()[o + ch];
                                dd[(y0 * w + x0) * c + ch] += (1.0 - wy) * (1.0 - wx) * gv;
                                dd[(y0 * w + x1) * c + ch] += (1.0 - wy) * wx * gv;
                                dd[(y1 * w + x0) * c + ch] += wy * (1.0 - wx) * gv;
                                dd[(y1 * w + x1) * c + ch] += wy * wx * gv;
                            }
                        }
                    }
                    d
                };
                self.accum(x, d);
            }
            Op::Relu(x) => {
                let d = {
                    let vx = &self.nodes[x].value;
                    let mut d = g.clone();
                    for (dv, xv) in d.data_mut().iter_mut().zip(vx.data()) {
                        if *xv <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    d
                };
                self.accum(x, d);
            }
            Op::Sigmoid(x) => {
                let d = {
                    let vy = &self.nodes[id].value;
                    let mut d = g.clone();
                    for (dv, yv) in d.data_mut().iter_mut().zip(vy.data()) {
                        *dv *= yv * (1.0 - yv);
                    }
                    d
                };
                self.accum(x, d);
            }
            Op::Gelu(x) => {
                let d = {
                    let vx = &self.nodes[x].value;
                    let mut d = g.clone();
                    for (dv, xv) in d.data_mut().iter_mut().zip(vx.data()) {
                        *dv *= gelu_grad(*xv);
                    }
                    d
                };
                self.accum(x, d);
            }
            Op::Abs(x) => {
                let d = {
                    let vx = &self.nodes[x].value;
                    let mut d = g.clone();
                    for (dv, xv) in d.data_mut().iter_mut().zip(vx.data()) {
                        *dv *= if *xv > 0.0 {
                            1.0
                        } else if *xv < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                    d
                };
                self.accum(x, d);
            }
            Op::Log(x) => {
                let d = {
                    let vx = &self.nodes[x].value;
                    let mut d = g.clone();
                    for (dv, xv) in d.data_mut().iter_mut().zip(vx.data()) {
                        *dv /= *xv;
                    }
                    d
                };
                self.accum(x, d);
            }
            Op::Sqrt(x) => {
                let d = {
                    let vy = &self.nodes[id].value;
                    let mut d = g.clone();
                    for (dv, yv) in d.data_mut().iter_mut().zip(vy.data()) {
                        *dv *= 0.5 / yv;
                    }
                    d
                };
                self.accum(x, d);
            }
            Op::Clamp { x, lo, hi } => {
                let d = {
                    let vx = &self.nodes[x].value;
                    let mut d = g.clone();
                    for (dv, xv) in d.data_mut().iter_mut().zip(vx.data()) {
                        if *xv < lo || *xv > hi {
                            *dv = 0.0;
                        }
                    }
                    d
                };
                self.accum(x, d);
            }
            Op::Softmax { x, axis } => {
                let d = {
                    let vy = &self.nodes[id].value;
                    let (outer, len, inner) = axis_split(vy.shape(), axis);
                    let mut d = Tensor::zeros(vy.shape().to_vec());
                    let (yd, gd, dd) = (vy.data(), g.data(), d.data_mut());
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for j in 0..len {
                                let p = base + j * inner;
                                dot += yd[p] * gd[p];
                            }
                            for j in 0..len {
                                let p = base + j * inner;
                                dd[p] = yd[p] * (gd[p] - dot);
                            }
                        }
                    }
                    d
                };
                self.accum(x, d);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (dx, dgamma, dbeta) = {
                    let vx = &self.nodes[x].value;
                    let vg = &self.nodes[gamma].value;
                    layer_norm_backward(vx, vg, g)
                };
                self.accum(x, dx);
                self.accum(gamma, dgamma);
                self.accum(beta, dbeta);
            }
            Op::Reshape(x) => {
                let shape = self.nodes[x].value.shape().to_vec();
                let d = g.clone().reshape(shape).expect("reshape grad");
                self.accum(x, d);
            }
            Op::GatherRows { x, rows } => {
                let d = {
                    let vx = &self.nodes[x].value;
                    let span = vx.numel() / vx.shape()[0].max(1);
                    let mut d = Tensor::zeros(vx.shape().to_vec());
                    for (k, r) in rows.iter().enumerate() {
                        let dst = &mut d.data_mut()[r * span..(r + 1) * span];
                        let src = &g.data()[k * span..(k + 1) * span];
                        for (a, s) in dst.iter_mut().zip(src) {
                            *a += s;
                        }
                    }
                    d
                };
                self.accum(x, d);
            }
            Op::SliceLast { x, start, end } => {
                let d = {
                    let vx = &self.nodes[x].value;
                    let dlast = *vx.shape().last().unwrap();
                    let width = end - start;
                    let rows = vx.numel() / dlast;
                    let mut d = Tensor::zeros(vx.shape().to_vec());
                    for r in 0..rows {
                        d.data_mut()[r * dlast + start..r * dlast + end]
                            .copy_from_slice(&g.data()[r * width..(r + 1) * width]);
                    }
                    d
                };
                self.accum(x, d);
            }
            Op::ConcatFirst(parts) => {
                let mut off = 0usize;
                for &p in &parts {
                    let v = &self.nodes[p].value;
                    let numel = v.numel();
                    let shape = v.shape().to_vec();
                    let d = Tensor::new(shape, g.data()[off..off + numel].to_vec())
                        .expect("concat grad slice");
                    off += numel;
                    self.accum(p, d);
                }
            }
            Op::ConcatLast(parts) => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|&p| *self.nodes[p].value.shape().last().unwrap())
                    .collect();
                let total: usize = widths.iter().sum();
                let rows = g.numel() / total;
                let mut off = 0usize;
                for (pi, &p) in parts.iter().enumerate() {
                    let w = widths[pi];
                    let shape = self.nodes[p].value.shape().to_vec();
                    let mut d = Tensor::zeros(shape);
                    for r in 0..rows {
                        d.data_mut()[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * total + off..r * total + off + w]);
                    }
                    off += w;
                    self.accum(p, d);
                }
            }
            Op::MaxLast(x) => {
                let d = {
                    let vx = &self.nodes[x].value;
                    let dlast = *vx.shape().last().unwrap();
                    let rows = vx.numel() / dlast;
                    let mut d = Tensor::zeros(vx.shape().to_vec());
                    for r in 0..rows {
                        let row = &vx.data()[r * dlast..(r + 1) * dlast];
                        let mut best = 0usize;
                        for j in 1..dlast {
                            if row[j] > row[best] {
                                best = j;
                            }
                        }
                        d.data_mut()[r * dlast + best] = g.data()[r];
                    }
                    d
                };
                self.accum(x, d);
            }
            Op::MeanLast(x) => {
                let d = {
                    let vx = &self.nodes[x].value;
                    let dlast = *vx.shape().last().unwrap();
                    let rows = vx.numel() / dlast;
                    let mut d = Tensor::zeros(vx.shape().to_vec());
                    for r in 0..rows {
                        let gv = g.data()[r] / dlast as f64;
                        for j in 0..dlast {
                            d.data_mut()[r * dlast + j] = gv;
                        }
                    }
                    d
                };
                self.accum(x, d);
            }
            Op::ColMax(x) => {
                let d = {
                    let vx = &self.nodes[x].value;
                    let (n, c) = (vx.shape()[0], vx.shape()[1]);
                    let mut d = Tensor::zeros(vec![n, c]);
                    for j in 0..c {
                        let mut best = 0usize;
                        for i in 1..n {
                            if vx.data()[i * c + j] > vx.data()[best * c + j] {
                                best = i;
                            }
                        }
                        d.data_mut()[best * c + j] = g.data()[j];
                    }
                    d
                };
                self.accum(x, d);
            }
            Op::ColMean(x) => {
                let d = {
                    let vx = &self.nodes[x].value;
                    let (n, c) = (vx.shape()[0], vx.shape()[1]);
                    let mut d = Tensor::zeros(vec![n, c]);
                    for i in 0..n {
                        for j in 0..c {
                            d.data_mut()[i * c + j] = g.data()[j] / n as f64;
                        }
                    }
                    d
                };
                self.accum(x, d);
            }
            Op::Sum(x) => {
                let d = {
                    let vx = &self.nodes[x].value;
                    Tensor::full(vx.shape().to_vec(), g.data()[0])
                };
                self.accum(x, d);
            }
        }
        Ok(())
    }

    /// Adds this graph's parameter-leaf gradients into the store.
    pub fn add_param_grads_to(&self, store: &mut crate::params::ParamStore) -> Result<()> {
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param(path) = &node.op {
                if let Some(g) = self.grad(id) {
                    store.accumulate_grad(path, g)?;
                }
            }
        }
        Ok(())
    }
}

enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_A * (x + GELU_B * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_A * (x + GELU_B * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_A * (1.0 + 3.0 * GELU_B * x * x)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Shape produced by broadcasting `a` with `b`, or `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for ax in 0..rank {
        let da = dim_from_right(a, rank, ax);
        let db = dim_from_right(b, rank, ax);
        out[ax] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

fn dim_from_right(shape: &[usize], rank: usize, ax: usize) -> usize {
    let pad = rank - shape.len();
    if ax < pad {
        1
    } else {
        shape[ax - pad]
    }
}

/// Calls `f(out_flat, a_flat, b_flat)` for every element of the broadcast
/// output, odometer-style so offsets update incrementally.
fn for_each_broadcast(
    a: &[usize],
    b: &[usize],
    out: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let numel: usize = out.iter().product();
    if numel == 0 {
        return;
    }
    // effective strides with 0 on broadcast axes
    let eff = |shape: &[usize]| -> Vec<usize> {
        let native = strides(shape);
        let pad = rank - shape.len();
        (0..rank)
            .map(|ax| {
                if ax < pad || shape[ax - pad] == 1 {
                    0
                } else {
                    native[ax - pad]
                }
            })
            .collect()
    };
    let (sa, sb) = (eff(a), eff(b));
    let mut idx = vec![0usize; rank];
    let (mut ai, mut bi) = (0usize, 0usize);
    for oi in 0..numel {
        f(oi, ai, bi);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ai += sa[ax];
            bi += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ai -= sa[ax] * out[ax];
            bi -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Sum-reduces `g` onto `target` shape (inverse of broadcasting).
fn reduce_to_shape(g: &Tensor, target: &[usize]) -> Tensor {
    if g.shape() == target {
        return g.clone();
    }
    let rank = g.shape().len();
    let mut out = Tensor::zeros(target.to_vec());
    {
        let od = out.data_mut();
        let gd = g.data();
        let eff = {
            let native = strides(target);
            let pad = rank - target.len();
            (0..rank)
                .map(|ax| {
                    if ax < pad || target[ax - pad] == 1 {
                        0
                    } else {
                        native[ax - pad]
                    }
                })
                .collect::<Vec<_>>()
        };
        let gshape = g.shape();
        let mut idx = vec![0usize; rank];
        let mut ti = 0usize;
        for gi in 0..gd.len() {
            od[ti] += gd[gi];
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                ti += eff[ax];
                if idx[ax] < gshape[ax] {
                    break;
                }
                ti -= eff[ax] * gshape[ax];
                idx[ax] = 0;
            }
        }
    }
    out
}

// out[m,n] += a[m,k] @ b[k,n]
fn mm_nn(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out[m,k] += a[m,n] @ b[k,n]^T
fn mm_nt(out: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * k + j] += acc;
        }
    }
}

// out[k,n] += a[m,k]^T @ b[m,n]
fn mm_tn(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// (dst0, dst1, frac): output coordinate maps to dst0/dst1 with weight
// (1-frac)/frac, half-pixel centers, edges clamped.
fn resample_table(out_len: usize, in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let f = factor as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / f - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn conv2d_backward(vx: &Tensor, vw: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (h, wd, cin) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
    let (kh, kw, _, cout) = (
        vw.shape()[0],
        vw.shape()[1],
        vw.shape()[2],
        vw.shape()[3],
    );
    let (ph, pw) = (kh / 2, kw / 2);
    let mut dx = Tensor::zeros(vec![h, wd, cin]);
    let mut dw = Tensor::zeros(vec![kh, kw, cin, cout]);
    let mut db = Tensor::zeros(vec![cout]);
    {
        let (xd, wdat, gd) = (vx.data(), vw.data(), g.data());
        let (dxd, dwd, dbd) = (dx.data_mut(), dw.data_mut(), db.data_mut());
        for y in 0..h {
            for xc in 0..wd {
                let grow = &gd[(y * wd + xc) * cout..(y * wd + xc + 1) * cout];
                for (acc, gv) in dbd.iter_mut().zip(grow) {
                    *acc += gv;
                }
                for dy in 0..kh {
                    let iy = y as isize + dy as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for dxo in 0..kw {
                        let ix = xc as isize + dxo as isize - pw as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xoff = ((iy as usize) * wd + ix as usize) * cin;
                        let woff = (dy * kw + dxo) * cin * cout;
                        for ci in 0..cin {
                            let xv = xd[xoff + ci];
                            let wrow = &wdat[woff + ci * cout..woff + (ci + 1) * cout];
                            let dwrow = &mut dwd[woff + ci * cout..woff + (ci + 1) * cout];
                            let mut s = 0.0;
                            for o in 0..cout {
                                s += wrow[o] * grow[o];
                                dwrow[o] += xv * grow[o];
                            }
                            dxd[xoff + ci] += s;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn layer_norm_backward(vx: &Tensor, vg: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let d = *vx.shape().last().unwrap();
    let rows = vx.numel() / d;
    let mut dx = Tensor::zeros(vx.shape().to_vec());
    let mut dgamma = Tensor::zeros(vec![d]);
    let mut dbeta = Tensor::zeros(vec![d]);
    {
        let (xd, gd, gr) = (vx.data(), vg.data(), g.data());
        let (dxd, dgd, dbd) = (dx.data_mut(), dgamma.data_mut(), dbeta.data_mut());
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let grow = &gr[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            // dL/dxhat_j = gamma_j * g_j; dx via the two projection terms
            let mut sum_gh = 0.0;
            let mut sum_ghx = 0.0;
            for j in 0..d {
                let xhat = (row[j] - mean) * inv;
                let gh = gd[j] * grow[j];
                sum_gh += gh;
                sum_ghx += gh * xhat;
                dgd[j] += grow[j] * xhat;
                dbd[j] += grow[j];
            }
            for j in 0..d {
                let xhat = (row[j] - mean) * inv;
                let gh = gd[j] * grow[j];
                dxd[r * d + j] =
                    inv * (gh - sum_gh / d as f64 - xhat * sum_ghx / d as f64);
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_broadcasts_and_reduces_grad() {
        let mut g = Graph::new();
        let a = g.input(t(&[2, 3], &[1., 2., 3., 4., 5., 6.])).unwrap();
        let b = g.input(t(&[1, 3], &[10., 20., 30.])).unwrap();
        let y = g.add(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[11., 22., 33., 14., 25., 36.]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1.; 6]);
        assert_eq!(g.grad(b).unwrap().data(), &[2., 2., 2.]);
    }

    #[test]
    fn mul_grad_reduces_over_broadcast_axes() {
        let mut g = Graph::new();
        let a = g.input(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let b = g.input(t(&[2, 1], &[10., 100.])).unwrap();
        let y = g.mul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[10., 20., 300., 400.]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[10., 10., 100., 100.]);
        assert_eq!(g.grad(b).unwrap().data(), &[3., 7.]);
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let mut g = Graph::new();
        let a = g.input(t(&[2, 3], &[1., 2., 3., 4., 5., 6.])).unwrap();
        let b = g.input(t(&[3, 2], &[7., 8., 9., 10., 11., 12.])).unwrap();
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[58., 64., 139., 154.]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        // dA = 1 @ B^T, dB = A^T @ 1
        assert_eq!(g.grad(a).unwrap().data(), &[15., 19., 23., 15., 19., 23.]);
        assert_eq!(g.grad(b).unwrap().data(), &[5., 5., 7., 7., 9., 9.]);
    }

    #[test]
    fn linear_keeps_leading_axes() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 2, 2], &[1., 0., 0., 1., 2., 2., 1., 1.])).unwrap();
        let w = g.input(t(&[2, 3], &[1., 2., 3., 4., 5., 6.])).unwrap();
        let b = g.input(t(&[3], &[0.5, 0.5, 0.5])).unwrap();
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 2, 3]);
        assert_eq!(&g.value(y).data()[..3], &[1.5, 2.5, 3.5]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[4., 4., 4.]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad_is_orthogonal_to_ones() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 3], &[0.1, 0.7, -0.4, 2.0, 2.0, 2.0])).unwrap();
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y);
        let r0: f64 = v.data()[..3].iter().sum();
        let r1: f64 = v.data()[3..].iter().sum();
        assert!((r0 - 1.0).abs() < 1e-12 && (r1 - 1.0).abs() < 1e-12);
        assert!((v.data()[3] - 1.0 / 3.0).abs() < 1e-12);
        // d(sum softmax)/dx = 0 since each row sums to 1 regardless of x
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        for gv in g.grad(x).unwrap().data() {
            assert!(gv.abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_middle_axis() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(vec![2, 3, 2], |ix| (ix[1] as f64) * (1.0 + ix[2] as f64) + ix[0] as f64)).unwrap();
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y);
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|j| v.at3(o, j, i)).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 4], &[1., 2., 3., 4.])).unwrap();
        let gamma = g.input(t(&[4], &[1., 1., 1., 1.])).unwrap();
        let beta = g.input(t(&[4], &[0., 0., 0., 0.])).unwrap();
        let y = g.layer_norm(x, gamma, beta).unwrap();
        let v = g.value(y);
        let mean: f64 = v.data().iter().sum::<f64>() / 4.0;
        let var: f64 = v.data().iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4); // eps shifts it slightly below 1
    }

    #[test]
    fn conv2d_identity_kernel_passes_through() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(vec![3, 3, 1], |ix| (ix[0] * 3 + ix[1]) as f64)).unwrap();
        // 3x3 kernel with 1 at center
        let mut wdat = vec![0.0; 9];
        wdat[4] = 1.0;
        let w = g.input(t(&[3, 3, 1, 1], &wdat)).unwrap();
        let b = g.input(t(&[1], &[0.0])).unwrap();
        let y = g.conv2d(x, w, b, 1).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        // padding that does not preserve shape is a contract violation
        assert!(g.conv2d(x, w, b, 0).is_err());
    }

    #[test]
    fn conv2d_matches_naive_loop_with_padding() {
        let (h, wd, cin, cout, k) = (4, 5, 3, 2, 3);
        let x = Tensor::from_fn(vec![h, wd, cin], |ix| {
            ((ix[0] * 31 + ix[1] * 7 + ix[2] * 3) % 11) as f64 * 0.25 - 1.0
        });
        let w = Tensor::from_fn(vec![k, k, cin, cout], |ix| {
            ((ix[0] * 17 + ix[1] * 13 + ix[2] * 5 + ix[3]) % 7) as f64 * 0.5 - 1.5
        });
        let b = t(&[2], &[0.25, -0.5]);
        let mut naive = Tensor::zeros(vec![h, wd, cout]);
        for y in 0..h {
            for xc in 0..wd {
                for o in 0..cout {
                    let mut acc = b.data()[o];
                    for dy in 0..k {
                        for dx in 0..k {
                            let iy = y as isize + dy as isize - 1;
                            let ix = xc as isize + dx as isize - 1;
                            if iy < 0 || iy >= h as isize || ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x.at3(iy as usize, ix as usize, ci)
                                    * w.data()[((dy * k + dx) * cin + ci) * cout + o];
                            }
                        }
                    }
                    naive.set3(y, xc, o, acc);
                }
            }
        }
        let mut g = Graph::new();
        let xn = g.input(x).unwrap();
        let wn = g.input(w).unwrap();
        let bn = g.input(b).unwrap();
        let yn = g.conv2d(xn, wn, bn, 1).unwrap();
        for (a, e) in g.value(yn).data().iter().zip(naive.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_upsample_preserves_constant_fields() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(vec![2, 2, 3], 7.5)).unwrap();
        let y = g.bilinear_upsample(x, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[4, 4, 3]);
        for v in g.value(y).data() {
            assert!((v - 7.5).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_upsample_interpolates_midpoints() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 2, 1], &[0.0, 1.0])).unwrap();
        let y = g.bilinear_upsample(x, 2).unwrap();
        // centers at src coords -0.25, 0.25, 0.75, 1.25 -> clamped ends
        let v = g.value(y);
        assert_eq!(v.shape(), &[2, 4, 1]);
        assert!((v.data()[0] - 0.0).abs() < 1e-12);
        assert!((v.data()[1] - 0.25).abs() < 1e-12);
        assert!((v.data()[2] - 0.75).abs() < 1e-12);
        assert!((v.data()[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gather_rows_accumulates_repeated_indices() {
        let mut g = Graph::new();
        let x = g.input(t(&[3, 2], &[1., 2., 3., 4., 5., 6.])).unwrap();
        let y = g.gather_rows(x, vec![2, 0, 2]).unwrap();
        assert_eq!(g.value(y).data(), &[5., 6., 1., 2., 5., 6.]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1., 1., 0., 0., 2., 2.]);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut g = Graph::new();
        let a = g.input(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let b = g.input(t(&[2, 1], &[9., 8.])).unwrap();
        let y = g.concat_last(&[a, b]).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2., 9., 3., 4., 8.]);
        let back = g.slice_last(y, 0, 2).unwrap();
        assert_eq!(g.value(back).data(), g.value(a).data());
        let s = g.sum(back).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[0., 0.]);
        assert_eq!(g.grad(a).unwrap().data(), &[1., 1., 1., 1.]);
    }

    #[test]
    fn max_last_routes_grad_to_first_argmax() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 4], &[1., 3., 3., 0.])).unwrap();
        let y = g.max_last(x).unwrap();
        assert_eq!(g.value(y).data(), &[3.]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0., 1., 0., 0.]);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![3])).unwrap();
        let y = g.sigmoid(x).unwrap();
        for v in g.value(y).data() {
            assert_eq!(*v, 0.5);
        }
    }

    #[test]
    fn relu_and_abs_subgradients_at_zero_are_zero() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[-1., 0., 2.])).unwrap();
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0., 0., 1.]);

        let mut g2 = Graph::new();
        let x2 = g2.input(t(&[3], &[-1., 0., 2.])).unwrap();
        let a = g2.abs(x2).unwrap();
        let s2 = g2.sum(a).unwrap();
        g2.backward(s2).unwrap();
        assert_eq!(g2.grad(x2).unwrap().data(), &[-1., 0., 1.]);
    }

    #[test]
    fn log_of_nonpositive_is_rejected() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 0.0])).unwrap();
        assert!(g.log(x).is_err());
    }

    #[test]
    fn div_by_zero_is_rejected() {
        let mut g = Graph::new();
        let a = g.input(t(&[1], &[1.0])).unwrap();
        let b = g.input(t(&[1], &[0.0])).unwrap();
        assert!(g.div(a, b).is_err());
    }

    #[test]
    fn backward_requires_single_element_root() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1., 2.])).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn grad_accumulates_when_node_used_twice() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[3., 4.])).unwrap();
        let y = g.mul(x, x).unwrap(); // x^2
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6., 8.]); // 2x
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1., 2.])).unwrap();
        let c = g.constant(t(&[2], &[5., 5.])).unwrap();
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[5., 5.]);
    }

    #[test]
    fn gelu_matches_reference_values() {
        // reference values computed from the tanh form directly
        let cases = [
            (0.0, 0.0),
            (1.0, 0.841_191_990_607_477_8),
            (-1.0, -0.158_808_009_392_522_2),
        ];
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[cases[0].0, cases[1].0, cases[2].0])).unwrap();
        let y = g.gelu(x).unwrap();
        for (i, (_, want)) in cases.iter().enumerate() {
            assert!((g.value(y).data()[i] - want).abs() < 1e-12);
        }
    }
}
