//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation evaluates eagerly, appends a node
//! holding its output and the ids of its inputs, and returns a [`Var`] handle.
//! Nodes are only ever appended, so the tape is topologically ordered and
//! [`Graph::backward`] is a single reverse sweep.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::cost_volume;
use crate::error::{Error, Result};
use crate::kernels::conv::{self, ConvDims, ConvGeom};
use crate::kernels::softmax;
use crate::params::ParamStore;
use crate::regress;
use crate::ssm;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Silu,
    Gelu,
    Softplus,
    Exp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ConvKind {
    Regular,
    Transposed,
    Depthwise,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Gather(Var, Rc<[usize]>),
    Concat(Vec<Var>),
    Unary(Var, Unary),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        eps: f64,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
        kind: ConvKind,
    },
    Scan {
        a: Var,
        b: Var,
        c: Var,
        x: Var,
        states: Vec<f64>,
    },
    Gwc {
        left: Var,
        right: Var,
        groups: usize,
        disparities: usize,
    },
    Upsample {
        x: Var,
        from: [usize; 3],
        to: [usize; 3],
    },
    WeightedSum0 {
        x: Var,
        weights: Rc<[f64]>,
    },
    SmoothL1 {
        pred: Var,
        target: Rc<[f64]>,
        mask: Rc<[bool]>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// The differentiation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    backward_done: bool,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `b` broadcasts against `a` when it has one element or its shape is a
/// suffix of `a`'s; in both cases element `i` of `a` pairs with `i % |b|`.
fn check_broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    let ok = b.numel() == 1 || a.shape().ends_with(b.shape());
    if !ok {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn reduce_broadcast(g: &[f64], bn: usize) -> Vec<f64> {
    let mut out = vec![0.0; bn];
    for (i, v) in g.iter().enumerate() {
        out[i % bn] += v;
    }
    out
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Silu => x * sigmoid(x),
            Unary::Gelu => gelu(x),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Gelu => gelu_grad(x),
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
        }
    }
}

fn spatial3(shape: &[usize]) -> [usize; 3] {
    match shape.len() {
        3 => [1, shape[1], shape[2]],
        4 => [shape[1], shape[2], shape[3]],
        _ => unreachable!("conv input rank checked by caller"),
    }
}

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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite output from {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_with(t, Op::Leaf, false)
    }

    /// A differentiable leaf (used for inputs whose gradient is wanted).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push_with(t, Op::Leaf, true)
    }

    /// The leaf bound to parameter `name`, created on first use so every use
    /// within one graph shares a single node (and a single gradient).
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Graph(format!("unknown parameter {name}")))?
            .clone();
        let v = self.input(t);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter leaves used by this graph, by name.
    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_broadcast("add", ta, tb)?;
        let bn = tb.numel();
        let out = Tensor::from_fn(ta.shape(), |i| ta.data()[i] + tb.data()[i % bn]);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_broadcast("sub", ta, tb)?;
        let bn = tb.numel();
        let out = Tensor::from_fn(ta.shape(), |i| ta.data()[i] - tb.data()[i % bn]);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_broadcast("mul", ta, tb)?;
        let bn = tb.numel();
        let out = Tensor::from_fn(ta.shape(), |i| ta.data()[i] * tb.data()[i % bn]);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// `out[i] = a[index[i]]` with the given output shape. Covers transposes,
    /// flips and other fixed re-orderings.
    pub fn gather(&mut self, a: Var, index: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= ta.numel()) {
            return Err(Error::invalid(format!("gather index {bad} out of range {}", ta.numel())));
        }
        let data: Vec<f64> = index.iter().map(|&i| ta.data()[i]).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Gather(a, index), &[a]))
    }

    /// Swaps the two axes of a rank-2 tensor.
    pub fn transpose2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::invalid(format!("transpose2 needs rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let idx: Rc<[usize]> = (0..r * c).map(|i| (i % r) * c + i / r).collect();
        self.gather(a, idx, &[c, r])
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != tail[..] {
                return Err(Error::shape("concat", self.shape(*first), t.shape()));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let out = self.value(a).map(|v| kind.apply(v));
        self.push(out, Op::Unary(a, kind), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.ndim() {
            return Err(Error::invalid(format!("softmax axis {axis} for shape {:?}", t.shape())));
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let len = t.shape()[axis];
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let out = softmax::softmax_forward(t.data(), outer, len, inner);
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(out, Op::Softmax { x: a, outer, len, inner }, &[a]))
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let axis = self.value(a).ndim() - 1;
        self.softmax(a, axis)
    }

    fn check_norm_params(&self, op: &'static str, x: Var, p: Var) -> Result<usize> {
        let n = *self.shape(x).last().expect("rank >= 1");
        if self.shape(p) != [n] {
            return Err(Error::shape(op, self.shape(x), self.shape(p)));
        }
        Ok(n)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.check_norm_params("layer_norm", x, gain)?;
        self.check_norm_params("layer_norm", x, bias)?;
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let mut out = vec![0.0; tx.numel()];
        for (row, o) in tx.data().chunks(n).zip(out.chunks_mut(n)) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                o[j] = (row[j] - mu) * rstd * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, eps }, &[x, gain, bias]))
    }

    /// Root-mean-square normalization over the last axis with learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let n = self.check_norm_params("rms_norm", x, gain)?;
        let (tx, tg) = (self.value(x), self.value(gain));
        let mut out = vec![0.0; tx.numel()];
        for (row, o) in tx.data().chunks(n).zip(out.chunks_mut(n)) {
            let r = (row.iter().map(|v| v * v).sum::<f64>() / n as f64 + eps).sqrt();
            for j in 0..n {
                o[j] = row[j] / r * tg.data()[j];
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(out, Op::RmsNorm { x, gain, eps }, &[x, gain]))
    }

    /// Affine map of every trailing vector: `x[.., in] · wᵀ + b`, `w[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let fan_in = *tx.shape().last().expect("rank >= 1");
        if tw.ndim() != 2 || tw.shape()[1] != fan_in {
            return Err(Error::shape("linear", tx.shape(), tw.shape()));
        }
        let fan_out = tw.shape()[0];
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return Err(Error::shape("linear bias", tw.shape(), self.shape(b)));
            }
        }
        let rows = tx.numel() / fan_in;
        let mut out = vec![0.0; rows * fan_out];
        crate::kernels::gemm::gemm(rows, fan_in, fan_out, tx.data(), false, tw.data(), true, &mut out, false);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for r in out.chunks_mut(fan_out) {
                r.iter_mut().zip(bd).for_each(|(v, bv)| *v += bv);
            }
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = fan_out;
        let out = Tensor::from_parts(shape, out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    fn conv_dims(&self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom, kind: ConvKind) -> Result<ConvDims> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let three_d = match sx.len() {
            3 => false,
            4 => true,
            _ => return Err(Error::shape("conv input", sx, sw)),
        };
        if sw.len() != sx.len() + 1 {
            return Err(Error::shape("conv kernel rank", sx, sw));
        }
        let ksz = if three_d {
            [sw[2], sw[3], sw[4]]
        } else {
            [1, sw[2], sw[3]]
        };
        if ksz != geom.kernel || geom.stride.contains(&0) {
            return Err(Error::shape("conv kernel size", sw, &geom.kernel));
        }
        let input = spatial3(sx);
        let (c_in, c_out) = match kind {
            ConvKind::Regular => (sw[1], sw[0]),
            ConvKind::Transposed => (sw[0], sw[1]),
            ConvKind::Depthwise => {
                if sw[1] != 1 || sw[0] != sx[0] || three_d || geom.stride != [1, 1, 1] {
                    return Err(Error::shape("depthwise2d", sx, sw));
                }
                (sw[0], sw[0])
            }
        };
        if sx[0] != c_in {
            return Err(Error::shape("conv channels", sx, sw));
        }
        let output = match kind {
            ConvKind::Transposed => geom.transpose_out(input),
            _ => geom.conv_out(input),
        }
        .ok_or_else(|| Error::invalid(format!("convolution of {sx:?} with {sw:?} has empty output")))?;
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv bias", sw, self.shape(b)));
            }
        }
        Ok(ConvDims {
            c_in,
            c_out,
            input,
            output,
            geom,
        })
    }

    fn conv_impl(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom, kind: ConvKind) -> Result<Var> {
        let dims = self.conv_dims(x, w, b, geom, kind)?;
        let (tx, tw) = (self.value(x).data(), self.value(w).data());
        let bias = b.map(|b| self.value(b).data());
        let y = match kind {
            ConvKind::Regular => conv::conv_forward(tx, tw, bias, &dims),
            ConvKind::Transposed => conv::transpose_forward(tx, tw, bias, &dims),
            ConvKind::Depthwise => conv::depthwise_forward(tx, tw, bias, &dims),
        };
        let shape = if self.shape(x).len() == 4 {
            vec![dims.c_out, dims.output[0], dims.output[1], dims.output[2]]
        } else {
            vec![dims.c_out, dims.output[1], dims.output[2]]
        };
        let out = Tensor::from_parts(shape, y);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv { x, w, b, dims, kind }, &inputs))
    }

    /// 2D convolution: `x[C, H, W]`, `w[O, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let k = self.kernel_extent(w, 2)?;
        self.conv_impl(x, w, b, ConvGeom::new2d(k, stride, pad), ConvKind::Regular)
    }

    /// Depthwise 2D convolution, stride 1: `x[C, H, W]`, `w[C, 1, k, k]`.
    pub fn depthwise2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let k = self.kernel_extent(w, 2)?;
        self.conv_impl(x, w, b, ConvGeom::new2d(k, 1, pad), ConvKind::Depthwise)
    }

    /// Transposed 2D convolution: `x[C_in, H, W]`, `w[C_in, C_out, k, k]`.
    pub fn transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let k = self.kernel_extent(w, 2)?;
        self.conv_impl(x, w, b, ConvGeom::new2d(k, stride, pad), ConvKind::Transposed)
    }

    /// 3D convolution: `x[C, D, H, W]`, `w[O, C, k, k, k]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let k = self.kernel_extent(w, 3)?;
        self.conv_impl(x, w, b, ConvGeom::new3d(k, stride, pad), ConvKind::Regular)
    }

    /// Transposed 3D convolution: `x[C_in, D, H, W]`, `w[C_in, C_out, k, k, k]`.
    pub fn transpose3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let k = self.kernel_extent(w, 3)?;
        self.conv_impl(x, w, b, ConvGeom::new3d(k, stride, pad), ConvKind::Transposed)
    }

    fn kernel_extent(&self, w: Var, spatial: usize) -> Result<usize> {
        let s = self.shape(w);
        if s.len() != spatial + 2 {
            return Err(Error::invalid(format!("kernel shape {s:?} is not rank {}", spatial + 2)));
        }
        Ok(s[s.len() - 1])
    }

    /// Selective scan `y = SSM(A, B, C, x)` over `P` channels sharing the
    /// per-step scalar decay: `a[T]`, `b[T, N]`, `c[T, N]`, `x[T, P]` → `y[T, P]`.
    pub fn ssm_scan(&mut self, a: Var, b: Var, c: Var, x: Var) -> Result<Var> {
        let dims = ssm::ScanDims::infer(self.shape(a), self.shape(b), self.shape(c), self.shape(x))?;
        let (y, states) = ssm::scan_forward(
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
            self.value(x).data(),
            dims,
        );
        let out = Tensor::from_parts(vec![dims.t, dims.p], y);
        Ok(self.push(out, Op::Scan { a, b, c, x, states }, &[a, b, c, x]))
    }

    /// Group-wise correlation volume `[G, D, H, W]` from two `[C, H, W]` maps.
    pub fn gwc_volume(&mut self, left: Var, right: Var, disparities: usize, groups: usize) -> Result<Var> {
        let (tl, tr) = (self.value(left), self.value(right));
        same_shape("gwc_volume", tl, tr)?;
        let dims = cost_volume::GwcDims::new(tl.shape(), groups, disparities)?;
        let out = cost_volume::gwc_forward(tl.data(), tr.data(), &dims);
        let out = Tensor::from_parts(vec![groups, disparities, dims.h, dims.w], out);
        Ok(self.push(
            out,
            Op::Gwc {
                left,
                right,
                groups,
                disparities,
            },
            &[left, right],
        ))
    }

    /// Trilinear resampling of `x[D, H, W]` to `to`.
    pub fn upsample_trilinear(&mut self, x: Var, to: [usize; 3]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || to.contains(&0) {
            return Err(Error::invalid(format!("trilinear upsample of {s:?} to {to:?}")));
        }
        let from = [s[0], s[1], s[2]];
        let out = regress::trilinear_forward(self.value(x).data(), from, to);
        let out = Tensor::from_parts(to.to_vec(), out);
        Ok(self.push(out, Op::Upsample { x, from, to }, &[x]))
    }

    /// `out[j] = Σ_k weights[k] · x[k, j]` for `x[K, ...]`.
    pub fn weighted_sum_axis0(&mut self, x: Var, weights: Rc<[f64]>) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() < 2 || t.shape()[0] != weights.len() {
            return Err(Error::invalid(format!(
                "weighted_sum_axis0 of {:?} with {} weights",
                t.shape(),
                weights.len()
            )));
        }
        let inner = t.numel() / weights.len();
        let mut out = vec![0.0; inner];
        for (k, &wk) in weights.iter().enumerate() {
            let row = &t.data()[k * inner..(k + 1) * inner];
            out.iter_mut().zip(row).for_each(|(o, v)| *o += wk * v);
        }
        let out = Tensor::from_parts(t.shape()[1..].to_vec(), out);
        Ok(self.push(out, Op::WeightedSum0 { x, weights }, &[x]))
    }

    /// Mean smooth-L1 error between `pred` and `target` over `mask`.
    pub fn smooth_l1_masked(&mut self, pred: Var, target: Rc<[f64]>, mask: Rc<[bool]>) -> Result<Var> {
        let t = self.value(pred);
        if target.len() != t.numel() || mask.len() != t.numel() {
            return Err(Error::invalid("smooth_l1 target/mask size differs from prediction"));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::invalid("empty valid mask"));
        }
        let total: f64 = t
            .data()
            .iter()
            .zip(target.iter())
            .zip(mask.iter())
            .filter(|(_, &m)| m)
            .map(|((&p, &g), _)| regress::smooth_l1(p - g))
            .sum();
        let out = Tensor::scalar(total / count as f64);
        Ok(self.push(
            out,
            Op::SmoothL1 {
                pred,
                target,
                mask,
                count,
            },
            &[pred],
        ))
    }

    /// Reverse sweep from a scalar `loss`. The tape can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Graph("backward already ran on this graph; record a new forward pass".into()));
        }
        let lt = &self.nodes[loss.0];
        if lt.value.numel() != 1 {
            return Err(Error::Graph(format!("loss must be scalar, got shape {:?}", lt.value.shape())));
        }
        if !lt.requires_grad {
            return Err(Error::Graph("loss is detached from every differentiable leaf".into()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lt.value.shape()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let shape = self.nodes[v.0].value.shape();
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        match &mut grads[v.0] {
            Some(acc) => acc.data_mut().iter_mut().zip(&data).for_each(|(a, d)| *a += d),
            slot @ None => *slot = Some(Tensor::from_parts(shape.to_vec(), data)),
        }
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[id].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate(grads, *a, gd.to_vec());
                let bn = val(*b).len();
                let mut gb = reduce_broadcast(gd, bn);
                gb.iter_mut().for_each(|v| *v *= sign);
                self.accumulate(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let bn = tb.len();
                let ga: Vec<f64> = gd.iter().enumerate().map(|(i, g)| g * tb[i % bn]).collect();
                let gprod: Vec<f64> = gd.iter().zip(ta).map(|(g, x)| g * x).collect();
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, reduce_broadcast(&gprod, bn));
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, gd.iter().map(|v| v * s).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => self.accumulate(grads, *a, gd.to_vec()),
            Op::Sum(a) => self.accumulate(grads, *a, vec![gd[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                self.accumulate(grads, *a, vec![gd[0] / n as f64; n]);
            }
            Op::Gather(a, index) => {
                let mut ga = vec![0.0; val(*a).len()];
                for (gv, &i) in gd.iter().zip(index.iter()) {
                    ga[i] += gv;
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).len();
                    self.accumulate(grads, *p, gd[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::Unary(a, kind) => {
                let (x, y) = (val(*a), self.nodes[id].value.data());
                let ga = gd
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(g, (&xv, &yv))| g * kind.derivative(xv, yv))
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Softmax { x, outer, len, inner } => {
                let gx = softmax::softmax_backward(self.nodes[id].value.data(), gd, *outer, *len, *inner);
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (tx, tg) = (val(*x), val(*gain));
                let n = tg.len();
                let mut gx = vec![0.0; tx.len()];
                let mut ggain = vec![0.0; n];
                let mut gbias = vec![0.0; n];
                for ((row, grow), gxrow) in tx.chunks(n).zip(gd.chunks(n)).zip(gx.chunks_mut(n)) {
                    let mu = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mu) * rstd).collect();
                    let dxhat: Vec<f64> = grow.iter().zip(tg).map(|(g, w)| g * w).collect();
                    let m1 = dxhat.iter().sum::<f64>() / n as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        gxrow[j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                        ggain[j] += grow[j] * xhat[j];
                        gbias[j] += grow[j];
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gain, ggain);
                self.accumulate(grads, *bias, gbias);
            }
            Op::RmsNorm { x, gain, eps } => {
                let (tx, tg) = (val(*x), val(*gain));
                let n = tg.len();
                let mut gx = vec![0.0; tx.len()];
                let mut ggain = vec![0.0; n];
                for ((row, grow), gxrow) in tx.chunks(n).zip(gd.chunks(n)).zip(gx.chunks_mut(n)) {
                    let r = (row.iter().map(|v| v * v).sum::<f64>() / n as f64 + eps).sqrt();
                    let m = row
                        .iter()
                        .zip(grow)
                        .zip(tg)
                        .map(|((xv, g), w)| g * w * xv / r)
                        .sum::<f64>()
                        / n as f64;
                    for j in 0..n {
                        let xhat = row[j] / r;
                        gxrow[j] = (grow[j] * tg[j] - xhat * m) / r;
                        ggain[j] += grow[j] * xhat;
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gain, ggain);
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let fan_out = self.nodes[w.0].value.shape()[0];
                let fan_in = self.nodes[w.0].value.shape()[1];
                let rows = tx.len() / fan_in;
                let mut gx = vec![0.0; tx.len()];
                crate::kernels::gemm::gemm(rows, fan_out, fan_in, gd, false, tw, false, &mut gx, false);
                let mut gw = vec![0.0; tw.len()];
                crate::kernels::gemm::gemm(fan_out, rows, fan_in, gd, true, tx, false, &mut gw, false);
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *w, gw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, reduce_broadcast(gd, fan_out));
                }
            }
            Op::Conv { x, w, b, dims, kind } => {
                let (tx, tw) = (val(*x), val(*w));
                let (gx, gw, gb) = match kind {
                    ConvKind::Regular => conv::conv_backward(tx, tw, gd, dims),
                    ConvKind::Transposed => conv::transpose_backward(tx, tw, gd, dims),
                    ConvKind::Depthwise => conv::depthwise_backward(tx, tw, gd, dims),
                };
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *w, gw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scan { a, b, c, x, states } => {
                let dims = ssm::ScanDims::infer(
                    self.nodes[a.0].value.shape(),
                    self.nodes[b.0].value.shape(),
                    self.nodes[c.0].value.shape(),
                    self.nodes[x.0].value.shape(),
                )
                .expect("validated in forward");
                let sg = ssm::scan_backward(val(*a), val(*b), val(*c), val(*x), states, gd, dims);
                self.accumulate(grads, *a, sg.a);
                self.accumulate(grads, *b, sg.b);
                self.accumulate(grads, *c, sg.c);
                self.accumulate(grads, *x, sg.x);
            }
            Op::Gwc {
                left,
                right,
                groups,
                disparities,
            } => {
                let dims = cost_volume::GwcDims::new(self.nodes[left.0].value.shape(), *groups, *disparities)
                    .expect("validated in forward");
                let (gl, gr) = cost_volume::gwc_backward(val(*left), val(*right), gd, &dims);
                self.accumulate(grads, *left, gl);
                self.accumulate(grads, *right, gr);
            }
            Op::Upsample { x, from, to } => {
                self.accumulate(grads, *x, regress::trilinear_backward(gd, *from, *to));
            }
            Op::WeightedSum0 { x, weights } => {
                let inner = gd.len();
                let mut gx = Vec::with_capacity(inner * weights.len());
                for &wk in weights.iter() {
                    gx.extend(gd.iter().map(|g| g * wk));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SmoothL1 {
                pred,
                target,
                mask,
                count,
            } => {
                let scale = gd[0] / *count as f64;
                let gp = val(*pred)
                    .iter()
                    .zip(target.iter())
                    .zip(mask.iter())
                    .map(|((&p, &t), &m)| if m { scale * regress::smooth_l1_grad(p - t) } else { 0.0 })
                    .collect();
                self.accumulate(grads, *pred, gp);
            }
        }
    }

    /// Gradients of every parameter leaf that the loss reached.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}
