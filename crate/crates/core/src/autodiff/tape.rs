use serde::{Deserialize, Serialize};

use super::kernels::{self, argmax_first, gemm, im2col, top2_gap, MatRef};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Avg,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    H,
    W,
    D,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::H, Axis::W, Axis::D];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Add,
    Max,
    Mult,
}

enum Op {
    Leaf,
    Linear {
        weight: Var,
        x: Var,
        bias: Option<Var>,
    },
    Conv3d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        k: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    GlobalPool {
        x: Var,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    AxisPool {
        x: Var,
        axis: Axis,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    ChannelPool {
        x: Var,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    BroadcastCombine {
        zh: Var,
        zw: Var,
        zd: Var,
        agg: Aggregation,
    },
    Mul {
        x: Var,
        gate: Var,
    },
    Add(Var, Var),
    Maximum(Var, Var),
    Sum(Var),
    Scale(Var, f64),
    Concat(Var, Var),
    MaxPoolDown2 {
        x: Var,
        argmax: Vec<usize>,
    },
    UpsampleNearest2(Var),
    InstanceNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LogSoftmax(Var),
    ScalarFn {
        x: Var,
        grad: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation. Nodes are stored in creation
/// order, which is a topological order by construction.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every gradient-tracking leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(op: &str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{op}: shapes {a} and {b} differ")));
    }
    Ok(())
}

fn axis_shape(s: Shape, axis: Axis) -> Shape {
    match axis {
        Axis::H => Shape { w: 1, d: 1, ..s },
        Axis::W => Shape { h: 1, d: 1, ..s },
        Axis::D => Shape { h: 1, w: 1, ..s },
    }
}

/// Flat indices of the input entries reduced into output entry `o` of an axis pool.
fn axis_pool_members(s: Shape, axis: Axis, o: usize) -> impl Iterator<Item = usize> {
    let (c, pos) = match axis {
        Axis::H => (o / s.h, o % s.h),
        Axis::W => (o / s.w, o % s.w),
        Axis::D => (o / s.d, o % s.d),
    };
    let (n1, n2) = match axis {
        Axis::H => (s.w, s.d),
        Axis::W => (s.h, s.d),
        Axis::D => (s.h, s.w),
    };
    (0..n1 * n2).map(move |m| {
        let (a, b) = (m / n2, m % n2);
        match axis {
            Axis::H => s.index(c, pos, a, b),
            Axis::W => s.index(c, a, pos, b),
            Axis::D => s.index(c, a, b, pos),
        }
    })
}

fn down2_window(s: Shape, o: usize) -> [usize; 8] {
    let (h2, w2, d2) = (s.h / 2, s.w / 2, s.d / 2);
    let k = o % d2;
    let j = (o / d2) % w2;
    let i = (o / (d2 * w2)) % h2;
    let c = o / (d2 * w2 * h2);
    let mut out = [0; 8];
    for (t, slot) in out.iter_mut().enumerate() {
        let (a, b, e) = (t >> 2, (t >> 1) & 1, t & 1);
        *slot = s.index(c, 2 * i + a, 2 * j + b, 2 * k + e);
    }
    out
}

fn gate_kind(x: Shape, gate: Shape) -> Option<GateKind> {
    if gate == x {
        Some(GateKind::Full)
    } else if gate.c == 1 && gate.same_spatial(&x) {
        Some(GateKind::Spatial)
    } else if gate.c == x.c && gate.h == 1 && gate.w == 1 && gate.d == 1 {
        Some(GateKind::Channel)
    } else {
        None
    }
}

#[derive(Clone, Copy)]
enum GateKind {
    Full,
    Spatial,
    Channel,
}

impl GateKind {
    #[inline]
    fn index(self, flat: usize, spatial: usize) -> usize {
        match self {
            GateKind::Full => flat,
            GateKind::Spatial => flat % spatial,
            GateKind::Channel => flat / spatial,
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Gradients are produced for it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn linear(&mut self, weight: Var, x: Var, bias: Option<Var>) -> Result<Var> {
        let ws = self.shape(weight);
        let xs = self.shape(x);
        if ws.w != 1 || ws.d != 1 {
            return Err(Error::shape(format!("linear: weight {ws} is not a matrix")));
        }
        let (m_out, m_in) = (ws.c, ws.h);
        if xs != Shape::vector(m_in)? {
            return Err(Error::shape(format!(
                "linear: weight {ws} cannot multiply input {xs}"
            )));
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != Shape::vector(m_out)? {
                return Err(Error::shape(format!("linear: bias {bs} for {m_out} outputs")));
            }
        }
        let mut y = vec![0.0; m_out];
        gemm(
            MatRef::row_major(self.value(weight).data(), m_out, m_in),
            MatRef::row_major(self.value(x).data(), m_in, 1),
            0.0,
            &mut y,
        );
        if let Some(b) = bias {
            for (yi, bi) in y.iter_mut().zip(self.value(b).data()) {
                *yi += bi;
            }
        }
        let value = Tensor::from_data(Shape::vector(m_out)?, y)?;
        let mut inputs = vec![weight, x];
        inputs.extend(bias);
        Ok(self.push(value, Op::Linear { weight, x, bias }, &inputs))
    }

    /// Same-size 3D cross-correlation with zero padding `(k−1)/2`.
    /// `kernel` has shape `(C_out, C_in, k³, 1)`, `bias` shape `(C_out, 1, 1, 1)`.
    pub fn conv3d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ks = self.shape(kernel);
        let k = (1..=ks.w).find(|k| k * k * k >= ks.w).unwrap_or(1);
        if k * k * k != ks.w || ks.d != 1 {
            return Err(Error::UnsupportedKernel(ks.w));
        }
        if k % 2 == 0 {
            return Err(Error::UnsupportedKernel(k));
        }
        if ks.h != xs.c {
            return Err(Error::shape(format!(
                "conv3d: kernel {ks} expects {} input channels, got {}",
                ks.h, xs.c
            )));
        }
        let c_out = ks.c;
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != Shape::vector(c_out)? {
                return Err(Error::shape(format!("conv3d: bias {bs} for {c_out} outputs")));
            }
        }
        let n = xs.spatial();
        let kdim = xs.c * k * k * k;
        let out_shape = xs.with_channels(c_out);
        let mut out = vec![0.0; out_shape.numel()];
        {
            let xv = self.value(x).data();
            let cols_owned;
            let cols: &[f64] = if k == 1 {
                xv
            } else {
                cols_owned = im2col(xv, xs, k);
                &cols_owned
            };
            gemm(
                MatRef::row_major(self.value(kernel).data(), c_out, kdim),
                MatRef::row_major(cols, kdim, n),
                0.0,
                &mut out,
            );
        }
        if let Some(b) = bias {
            for (row, bv) in out.chunks_mut(n).zip(self.value(b).data()) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        let value = Tensor::from_data(out_shape, out)?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        Ok(self.push(value, Op::Conv3d { x, kernel, bias, k }, &inputs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// Per-channel reduction over all spatial positions, shape `(C, 1, 1, 1)`.
    pub fn global_pool(&mut self, x: Var, mode: PoolMode) -> Var {
        let xt = self.value(x);
        let s = xt.shape();
        let mut out = Vec::with_capacity(s.c);
        let mut argmax = Vec::new();
        for c in 0..s.c {
            let ch = xt.channel(c);
            match mode {
                PoolMode::Avg => out.push(ch.iter().sum::<f64>() / ch.len() as f64),
                PoolMode::Max => {
                    let (i, v) = argmax_first(ch.iter().copied());
                    argmax.push(i);
                    out.push(v);
                }
            }
        }
        let value = Tensor::from_data(Shape { h: 1, w: 1, d: 1, ..s }, out).expect("pool shape");
        self.push(value, Op::GlobalPool { x, mode, argmax }, &[x])
    }

    /// Projection onto one spatial axis: `(C,H,1,1)`, `(C,1,W,1)` or `(C,1,1,D)`.
    pub fn axis_pool(&mut self, x: Var, axis: Axis, mode: PoolMode) -> Var {
        let xt = self.value(x);
        let s = xt.shape();
        let xv = xt.data();
        let os = axis_shape(s, axis);
        let mut out = Vec::with_capacity(os.numel());
        let mut argmax = Vec::new();
        for o in 0..os.numel() {
            let members = axis_pool_members(s, axis, o);
            match mode {
                PoolMode::Avg => {
                    let (sum, count) = members.fold((0.0, 0usize), |(s, n), i| (s + xv[i], n + 1));
                    out.push(sum / count as f64);
                }
                PoolMode::Max => {
                    let mut best = (usize::MAX, f64::NEG_INFINITY);
                    for i in members {
                        if best.0 == usize::MAX || xv[i] > best.1 {
                            best = (i, xv[i]);
                        }
                    }
                    argmax.push(best.0);
                    out.push(best.1);
                }
            }
        }
        let value = Tensor::from_data(os, out).expect("axis pool shape");
        self.push(
            value,
            Op::AxisPool {
                x,
                axis,
                mode,
                argmax,
            },
            &[x],
        )
    }

    /// Per-voxel reduction across channels, shape `(1, H, W, D)`.
    pub fn channel_pool(&mut self, x: Var, mode: PoolMode) -> Var {
        let xt = self.value(x);
        let s = xt.shape();
        let n = s.spatial();
        let xv = xt.data();
        let mut out = Vec::with_capacity(n);
        let mut argmax = Vec::new();
        for p in 0..n {
            let across = (0..s.c).map(|c| xv[c * n + p]);
            match mode {
                PoolMode::Avg => out.push(across.sum::<f64>() / s.c as f64),
                PoolMode::Max => {
                    let (c, v) = argmax_first(across);
                    argmax.push(c);
                    out.push(v);
                }
            }
        }
        let value = Tensor::from_data(s.with_channels(1), out).expect("channel pool shape");
        self.push(value, Op::ChannelPool { x, mode, argmax }, &[x])
    }

    /// Broadcasts the three axis projections back to `(C, H, W, D)` and merges them.
    pub fn broadcast_combine(&mut self, zh: Var, zw: Var, zd: Var, agg: Aggregation) -> Result<Var> {
        let (sh, sw, sd) = (self.shape(zh), self.shape(zw), self.shape(zd));
        if sh.c != sw.c || sh.c != sd.c {
            return Err(Error::shape(format!(
                "broadcast_combine: channel counts {}, {}, {} differ",
                sh.c, sw.c, sd.c
            )));
        }
        if (sh.w, sh.d) != (1, 1) || (sw.h, sw.d) != (1, 1) || (sd.h, sd.w) != (1, 1) {
            return Err(Error::shape(format!(
                "broadcast_combine: expected axis projections, got {sh}, {sw}, {sd}"
            )));
        }
        let out_shape = Shape::new(sh.c, sh.h, sw.w, sd.d)?;
        let (vh, vw, vd) = (
            self.value(zh).data(),
            self.value(zw).data(),
            self.value(zd).data(),
        );
        let mut out = Vec::with_capacity(out_shape.numel());
        for c in 0..out_shape.c {
            for i in 0..out_shape.h {
                let a = vh[c * out_shape.h + i];
                for j in 0..out_shape.w {
                    let b = vw[c * out_shape.w + j];
                    for k in 0..out_shape.d {
                        let e = vd[c * out_shape.d + k];
                        out.push(match agg {
                            Aggregation::Add => a + b + e,
                            Aggregation::Max => a.max(b).max(e),
                            Aggregation::Mult => a * b * e,
                        });
                    }
                }
            }
        }
        let value = Tensor::from_data(out_shape, out)?;
        Ok(self.push(value, Op::BroadcastCombine { zh, zw, zd, agg }, &[zh, zw, zd]))
    }

    /// Broadcast product with a full, spatial `(1,H,W,D)` or per-channel `(C,1,1,1)` gate.
    pub fn mul(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xs = self.shape(x);
        let gs = self.shape(gate);
        let kind = gate_kind(xs, gs)
            .ok_or_else(|| Error::shape(format!("mul: gate {gs} cannot scale {xs}")))?;
        let n = xs.spatial();
        let gv = self.value(gate).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(f, v)| v * gv[kind.index(f, n)])
            .collect();
        let value = Tensor::from_data(xs, out)?;
        Ok(self.push(value, Op::Mul { x, gate }, &[x, gate]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_data(self.shape(a), out)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise maximum; ties resolve to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("maximum", self.shape(a), self.shape(b))?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| if y > x { y } else { x })
            .collect();
        let value = Tensor::from_data(self.shape(a), out)?;
        Ok(self.push(value, Op::Maximum(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor), &[x])
    }

    /// Channel concatenation; channels of `a` come first.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !sa.same_spatial(&sb) {
            return Err(Error::shape(format!(
                "concat: spatial extents of {sa} and {sb} differ"
            )));
        }
        let mut out = Vec::with_capacity(sa.numel() + sb.numel());
        out.extend_from_slice(self.value(a).data());
        out.extend_from_slice(self.value(b).data());
        let value = Tensor::from_data(sa.with_channels(sa.c + sb.c), out)?;
        Ok(self.push(value, Op::Concat(a, b), &[a, b]))
    }

    /// Non-overlapping 2³ max pooling; all spatial extents must be even.
    pub fn maxpool_down2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.h % 2 != 0 || s.w % 2 != 0 || s.d % 2 != 0 {
            return Err(Error::shape(format!(
                "maxpool_down2: extents of {s} must all be even"
            )));
        }
        let os = Shape::new(s.c, s.h / 2, s.w / 2, s.d / 2)?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(os.numel());
        let mut argmax = Vec::with_capacity(os.numel());
        for o in 0..os.numel() {
            let win = down2_window(s, o);
            let (t, v) = argmax_first(win.iter().map(|&i| xv[i]));
            argmax.push(win[t]);
            out.push(v);
        }
        let value = Tensor::from_data(os, out)?;
        Ok(self.push(value, Op::MaxPoolDown2 { x, argmax }, &[x]))
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let os = Shape {
            c: s.c,
            h: 2 * s.h,
            w: 2 * s.w,
            d: 2 * s.d,
        };
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(os.numel());
        for c in 0..os.c {
            for i in 0..os.h {
                for j in 0..os.w {
                    for k in 0..os.d {
                        out.push(xv[s.index(c, i / 2, j / 2, k / 2)]);
                    }
                }
            }
        }
        let value = Tensor::from_data(os, out).expect("upsample shape");
        self.push(value, Op::UpsampleNearest2(x), &[x])
    }

    /// Per-channel standardisation over the spatial extent, then `gain·x̂ + bias`.
    pub fn instance_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Contract(format!("instance_norm: eps must be > 0, got {eps}")));
        }
        let s = self.shape(x);
        let cs = Shape::vector(s.c)?;
        if self.shape(gain) != cs || self.shape(bias) != cs {
            return Err(Error::shape(format!(
                "instance_norm: gain/bias must be {cs}, got {} and {}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let n = s.spatial();
        let xt = self.value(x);
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = Vec::with_capacity(s.numel());
        let mut inv_std = Vec::with_capacity(s.c);
        let mut out = Vec::with_capacity(s.numel());
        for c in 0..s.c {
            let ch = xt.channel(c);
            let mean = ch.iter().sum::<f64>() / n as f64;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for v in ch {
                let xh = (v - mean) * is;
                xhat.push(xh);
                out.push(gv[c] * xh + bv[c]);
            }
        }
        let value = Tensor::from_data(s, out)?;
        Ok(self.push(
            value,
            Op::InstanceNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Per-voxel log-softmax across channels (max-subtracted).
    pub fn log_softmax_channels(&mut self, x: Var) -> Var {
        let value = log_softmax_channels(self.value(x));
        self.push(value, Op::LogSoftmax(x), &[x])
    }

    /// Records a scalar function of `x` whose value and gradient were computed
    /// outside the tape.
    pub fn custom_scalar(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        same_shape("custom_scalar", self.shape(x), grad.shape())?;
        Ok(self.push(Tensor::scalar(value), Op::ScalarFn { x, grad }, &[x]))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let Some(root) = self.nodes.get(loss.0) else {
            return Err(Error::Contract(format!("backward: {loss:?} is not on this tape")));
        };
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be a scalar, got shape {}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if matches!(node.op, Op::Leaf) {
                if node.requires_grad {
                    g.get_or_insert_with(|| Tensor::zeros(node.value.shape()));
                } else {
                    *g = None;
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape();
        Some(
            grads[v.0]
                .get_or_insert_with(|| Tensor::zeros(shape))
                .data_mut(),
        )
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gv = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { weight, x, bias } => {
                let ws = self.shape(*weight);
                let (m_out, m_in) = (ws.c, ws.h);
                let xv = self.value(*x).data();
                if let Some(dw) = self.slot(grads, *weight) {
                    for i in 0..m_out {
                        for j in 0..m_in {
                            dw[i * m_in + j] += gv[i] * xv[j];
                        }
                    }
                }
                let w = self.value(*weight).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for i in 0..m_out {
                        for j in 0..m_in {
                            dx[j] += w[i * m_in + j] * gv[i];
                        }
                    }
                }
                if let Some(b) = bias {
                    if let Some(db) = self.slot(grads, *b) {
                        db.iter_mut().zip(gv).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Conv3d { x, kernel, bias, k } => {
                let k = *k;
                let xs = self.shape(*x);
                let ks = self.shape(*kernel);
                let (c_out, kdim, n) = (ks.c, xs.c * k * k * k, xs.spatial());
                let xv = self.value(*x).data();
                let needs_kernel = self.requires_grad(*kernel);
                let needs_x = self.requires_grad(*x);
                if needs_kernel {
                    let cols_owned;
                    let cols: &[f64] = if k == 1 {
                        xv
                    } else {
                        cols_owned = im2col(xv, xs, k);
                        &cols_owned
                    };
                    let dw = self.slot(grads, *kernel).expect("kernel requires grad");
                    gemm(
                        MatRef::row_major(gv, c_out, n),
                        MatRef::row_major(cols, kdim, n).t(),
                        1.0,
                        dw,
                    );
                }
                if needs_x {
                    let wmat = MatRef::row_major(self.value(*kernel).data(), c_out, kdim).t();
                    let dx = self.slot(grads, *x).expect("input requires grad");
                    if k == 1 {
                        gemm(wmat, MatRef::row_major(gv, c_out, n), 1.0, dx);
                    } else {
                        let mut dcols = vec![0.0; kdim * n];
                        gemm(wmat, MatRef::row_major(gv, c_out, n), 0.0, &mut dcols);
                        kernels::col2im_add(&dcols, xs, k, dx);
                    }
                }
                if let Some(b) = bias {
                    if let Some(db) = self.slot(grads, *b) {
                        for (d, row) in db.iter_mut().zip(gv.chunks(n)) {
                            *d += row.iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &xi), &gi) in dx.iter_mut().zip(xv).zip(gv) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let sv = node.value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &s), &gi) in dx.iter_mut().zip(sv).zip(gv) {
                        *d += gi * s * (1.0 - s);
                    }
                }
            }
            Op::GlobalPool { x, mode, argmax } => {
                let n = self.shape(*x).spatial();
                if let Some(dx) = self.slot(grads, *x) {
                    for (c, &gc) in gv.iter().enumerate() {
                        match mode {
                            PoolMode::Avg => {
                                let share = gc / n as f64;
                                dx[c * n..(c + 1) * n].iter_mut().for_each(|d| *d += share);
                            }
                            PoolMode::Max => dx[c * n + argmax[c]] += gc,
                        }
                    }
                }
            }
            Op::AxisPool {
                x,
                axis,
                mode,
                argmax,
            } => {
                let s = self.shape(*x);
                if let Some(dx) = self.slot(grads, *x) {
                    for (o, &go) in gv.iter().enumerate() {
                        match mode {
                            PoolMode::Avg => {
                                let count = s.spatial()
                                    / match axis {
                                        Axis::H => s.h,
                                        Axis::W => s.w,
                                        Axis::D => s.d,
                                    };
                                let share = go / count as f64;
                                for i in axis_pool_members(s, *axis, o) {
                                    dx[i] += share;
                                }
                            }
                            PoolMode::Max => dx[argmax[o]] += go,
                        }
                    }
                }
            }
            Op::ChannelPool { x, mode, argmax } => {
                let s = self.shape(*x);
                let n = s.spatial();
                if let Some(dx) = self.slot(grads, *x) {
                    for (p, &gp) in gv.iter().enumerate() {
                        match mode {
                            PoolMode::Avg => {
                                let share = gp / s.c as f64;
                                for c in 0..s.c {
                                    dx[c * n + p] += share;
                                }
                            }
                            PoolMode::Max => dx[argmax[p] * n + p] += gp,
                        }
                    }
                }
            }
            Op::BroadcastCombine { zh, zw, zd, agg } => {
                self.backprop_broadcast(node.value.shape(), *zh, *zw, *zd, *agg, gv, grads);
            }
            Op::Mul { x, gate } => {
                let xs = self.shape(*x);
                let kind = gate_kind(xs, self.shape(*gate)).expect("validated in forward");
                let n = xs.spatial();
                let xv = self.value(*x).data();
                let gatev = self.value(*gate).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for (f, (d, &gi)) in dx.iter_mut().zip(gv).enumerate() {
                        *d += gi * gatev[kind.index(f, n)];
                    }
                }
                if let Some(dg) = self.slot(grads, *gate) {
                    for (f, (&xi, &gi)) in xv.iter().zip(gv).enumerate() {
                        dg[kind.index(f, n)] += gi * xi;
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.slot(grads, *v) {
                        d.iter_mut().zip(gv).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Maximum(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(grads, *a) {
                    for (i, d) in da.iter_mut().enumerate() {
                        if av[i] >= bv[i] {
                            *d += gv[i];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for (i, d) in db.iter_mut().enumerate() {
                        if bv[i] > av[i] {
                            *d += gv[i];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += gv[0]);
                }
            }
            Op::Scale(x, factor) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(gv).for_each(|(d, g)| *d += g * factor);
                }
            }
            Op::Concat(a, b) => {
                let cut = self.shape(*a).numel();
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().zip(&gv[..cut]).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    db.iter_mut().zip(&gv[cut..]).for_each(|(d, g)| *d += g);
                }
            }
            Op::MaxPoolDown2 { x, argmax } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (&src, &go) in argmax.iter().zip(gv) {
                        dx[src] += go;
                    }
                }
            }
            Op::UpsampleNearest2(x) => {
                let s = self.shape(*x);
                let os = node.value.shape();
                if let Some(dx) = self.slot(grads, *x) {
                    for c in 0..os.c {
                        for i in 0..os.h {
                            for j in 0..os.w {
                                for k in 0..os.d {
                                    dx[s.index(c, i / 2, j / 2, k / 2)] += gv[os.index(c, i, j, k)];
                                }
                            }
                        }
                    }
                }
            }
            Op::InstanceNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let s = self.shape(*x);
                let n = s.spatial();
                let gainv = self.value(*gain).data();
                if let Some(dgain) = self.slot(grads, *gain) {
                    for c in 0..s.c {
                        dgain[c] += (c * n..(c + 1) * n).map(|i| gv[i] * xhat[i]).sum::<f64>();
                    }
                }
                if let Some(dbias) = self.slot(grads, *bias) {
                    for c in 0..s.c {
                        dbias[c] += gv[c * n..(c + 1) * n].iter().sum::<f64>();
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let nf = n as f64;
                    for c in 0..s.c {
                        let range = c * n..(c + 1) * n;
                        let sum_g: f64 = gv[range.clone()].iter().sum::<f64>() * gainv[c];
                        let sum_gx: f64 =
                            range.clone().map(|i| gv[i] * xhat[i]).sum::<f64>() * gainv[c];
                        let scale = inv_std[c] / nf;
                        for i in range {
                            let dxhat = gv[i] * gainv[c];
                            dx[i] += scale * (nf * dxhat - sum_g - xhat[i] * sum_gx);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let s = self.shape(*x);
                let n = s.spatial();
                let yv = node.value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for p in 0..n {
                        let total: f64 = (0..s.c).map(|c| gv[c * n + p]).sum();
                        for c in 0..s.c {
                            let i = c * n + p;
                            dx[i] += gv[i] - yv[i].exp() * total;
                        }
                    }
                }
            }
            Op::ScalarFn { x, grad } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut()
                        .zip(grad.data())
                        .for_each(|(d, l)| *d += gv[0] * l);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_broadcast(
        &self,
        os: Shape,
        zh: Var,
        zw: Var,
        zd: Var,
        agg: Aggregation,
        gv: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (vh, vw, vd) = (
            self.value(zh).data(),
            self.value(zw).data(),
            self.value(zd).data(),
        );
        let mut dh = vec![0.0; vh.len()];
        let mut dw = vec![0.0; vw.len()];
        let mut dd = vec![0.0; vd.len()];
        for c in 0..os.c {
            for i in 0..os.h {
                let ih = c * os.h + i;
                for j in 0..os.w {
                    let iw = c * os.w + j;
                    for k in 0..os.d {
                        let id = c * os.d + k;
                        let g = gv[os.index(c, i, j, k)];
                        match agg {
                            Aggregation::Add => {
                                dh[ih] += g;
                                dw[iw] += g;
                                dd[id] += g;
                            }
                            Aggregation::Mult => {
                                dh[ih] += g * vw[iw] * vd[id];
                                dw[iw] += g * vh[ih] * vd[id];
                                dd[id] += g * vh[ih] * vw[iw];
                            }
                            Aggregation::Max => {
                                let (t, _) = argmax_first([vh[ih], vw[iw], vd[id]].into_iter());
                                match t {
                                    0 => dh[ih] += g,
                                    1 => dw[iw] += g,
                                    _ => dd[id] += g,
                                }
                            }
                        }
                    }
                }
            }
        }
        for (v, local) in [(zh, dh), (zw, dw), (zd, dd)] {
            if let Some(d) = self.slot(grads, v) {
                d.iter_mut().zip(&local).for_each(|(d, l)| *d += l);
            }
        }
    }

    /// Smallest distance of any recorded non-smooth op from its kink (relu at
    /// zero, ties in max reductions). Finite-difference checks are only
    /// meaningful when this is comfortably larger than the probe step.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            let m = match &node.op {
                Op::Relu(x) => self
                    .value(*x)
                    .data()
                    .iter()
                    .map(|v| v.abs())
                    .fold(f64::INFINITY, f64::min),
                Op::GlobalPool {
                    x,
                    mode: PoolMode::Max,
                    ..
                } => {
                    let xt = self.value(*x);
                    (0..xt.shape().c)
                        .map(|c| top2_gap(xt.channel(c).iter().copied()))
                        .fold(f64::INFINITY, f64::min)
                }
                Op::AxisPool {
                    x,
                    axis,
                    mode: PoolMode::Max,
                    ..
                } => {
                    let xt = self.value(*x);
                    let s = xt.shape();
                    let xv = xt.data();
                    (0..axis_shape(s, *axis).numel())
                        .map(|o| top2_gap(axis_pool_members(s, *axis, o).map(|i| xv[i])))
                        .fold(f64::INFINITY, f64::min)
                }
                Op::ChannelPool {
                    x,
                    mode: PoolMode::Max,
                    ..
                } => {
                    let xt = self.value(*x);
                    let s = xt.shape();
                    let n = s.spatial();
                    (0..n)
                        .map(|p| top2_gap((0..s.c).map(|c| xt.data()[c * n + p])))
                        .fold(f64::INFINITY, f64::min)
                }
                Op::BroadcastCombine {
                    zh,
                    zw,
                    zd,
                    agg: Aggregation::Max,
                } => {
                    let os = node.value.shape();
                    let (vh, vw, vd) = (
                        self.value(*zh).data(),
                        self.value(*zw).data(),
                        self.value(*zd).data(),
                    );
                    let mut m = f64::INFINITY;
                    for c in 0..os.c {
                        for i in 0..os.h {
                            for j in 0..os.w {
                                for k in 0..os.d {
                                    let vals = [
                                        vh[c * os.h + i],
                                        vw[c * os.w + j],
                                        vd[c * os.d + k],
                                    ];
                                    // A bitwise tie is the shared argmax of all
                                    // projections, which is smooth.
                                    let top = vals[0].max(vals[1]).max(vals[2]);
                                    m = m.min(top2_gap(vals.into_iter().filter(|&v| v != top).chain([top])));
                                }
                            }
                        }
                    }
                    m
                }
                Op::Maximum(a, b) => self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(x, y)| (x - y).abs())
                    .fold(f64::INFINITY, f64::min),
                Op::MaxPoolDown2 { x, .. } => {
                    let xt = self.value(*x);
                    let s = xt.shape();
                    let os = node.value.shape();
                    (0..os.numel())
                        .map(|o| top2_gap(down2_window(s, o).iter().map(|&i| xt.data()[i])))
                        .fold(f64::INFINITY, f64::min)
                }
                _ => f64::INFINITY,
            };
            margin = margin.min(m);
        }
        margin
    }
}

/// Max-subtracted log-softmax over the channel axis.
pub fn log_softmax_channels(x: &Tensor) -> Tensor {
    let s = x.shape();
    let n = s.spatial();
    let xv = x.data();
    let mut out = vec![0.0; xv.len()];
    for p in 0..n {
        let m = (0..s.c).map(|c| xv[c * n + p]).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + (0..s.c).map(|c| (xv[c * n + p] - m).exp()).sum::<f64>().ln();
        for c in 0..s.c {
            out[c * n + p] = xv[c * n + p] - lse;
        }
    }
    Tensor::from_data(s, out).expect("same shape")
}
