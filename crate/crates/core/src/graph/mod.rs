//! Tape-based reverse-mode automatic differentiation over NCHW tensors.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of a
//! scalar output with respect to every leaf that requires one. Parameters
//! enter the tape through [`Graph::param`], which remembers their
//! [`ParamId`] so optimizers can pick the gradients back up.

pub mod kernels;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};
use kernels::ConvGeom;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Abs(Var),
    Relu(Var),
    Clamp(Var, T, T),
    Gelu(Var),
    Sigmoid(Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        depthwise: bool,
    },
    AvgPool(Var, usize),
    Resize(Var),
    GlobalAvgPool(Var),
    Expand(Var),
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    EmbedRows {
        table: Var,
        rows: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<usize>,
        weights: Vec<T>,
        norm: T,
    },
    BceLogits {
        x: Var,
        targets: Vec<T>,
        weights: Vec<T>,
        norm: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to the leaves of a [`Graph`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Gradients keyed by parameter, accumulated over every use on the tape.
pub type ParamGrads<T> = BTreeMap<ParamId, Tensor<T>>;

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradient (e.g. an input under test).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Insert a stored parameter; frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let trainable = store.is_trainable(id);
        let v = self.push(store.value(id).clone(), Op::Leaf, trainable);
        if trainable {
            self.nodes[v.0].param = Some(id);
        }
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let t = Tensor::from_vec(x.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("sub", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p - q).collect();
        let t = Tensor::from_vec(x.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let t = Tensor::from_vec(x.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("div", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p / q).collect();
        let t = Tensor::from_vec(x.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|v| v + s);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.abs());
        let rg = self.rg(a);
        self.push(t, Op::Abs(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.max(T::zero()));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let t = self.value(a).map(|v| v.max(lo).min(hi));
        let rg = self.rg(a);
        self.push(t, Op::Clamp(a, lo, hi), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k, half) = (T::from_f64(GELU_C), T::from_f64(GELU_K), T::from_f64(0.5));
        let t = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    /// 2-D convolution. `w` is `(cout, cin, k, k)` for a dense convolution or
    /// `(c, 1, k, k)` with `cout == cin == c` for a depth-wise one.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        depthwise: bool,
    ) -> Result<Var> {
        let [n, cin, h, wd] = self.value(x).dims4()?;
        let [cout, wcin, kh, kw] = self.value(w).dims4()?;
        let expected_cin = if depthwise { 1 } else { cin };
        if kh != kw || wcin != expected_cin || (depthwise && cout != cin) {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: self.value(x).shape().to_vec(),
                right: self.value(w).shape().to_vec(),
            });
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    left: vec![cout],
                    right: self.value(b).shape().to_vec(),
                });
            }
        }
        let geom = ConvGeom::new(n, cin, h, wd, cout, kh, stride, pad).ok_or_else(|| {
            Error::InvalidShape {
                op: "conv2d",
                detail: format!("kernel {} stride {} pad {} on {}x{}", kh, stride, pad, h, wd),
            }
        })?;
        let bias = b.map(|b| self.value(b).data());
        let out = if depthwise {
            kernels::dwconv_forward(self.value(x).data(), self.value(w).data(), bias, &geom)
        } else {
            kernels::conv_forward(self.value(x).data(), self.value(w).data(), bias, &geom)
        };
        let t = Tensor::from_vec(&[n, cout, geom.ho, geom.wo], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            t,
            Op::Conv {
                x,
                w,
                b,
                geom,
                depthwise,
            },
            rg,
        ))
    }

    /// Non-overlapping `k×k` average pooling; spatial dims must divide by `k`.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::InvalidShape {
                op: "avg_pool",
                detail: format!("{}x{} not divisible by {}", h, w, k),
            });
        }
        if k == 1 {
            return Ok(x);
        }
        let out = kernels::avgpool_forward(self.value(x).data(), n * c, h, w, k);
        let t = Tensor::from_vec(&[n, c, h / k, w / k], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::AvgPool(x, k), rg))
    }

    /// Bilinear resize (half-pixel centres, edge clamped).
    pub fn resize_bilinear(&mut self, x: Var, ho: usize, wo: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if ho == 0 || wo == 0 {
            return Err(Error::InvalidShape {
                op: "resize_bilinear",
                detail: format!("target {}x{}", ho, wo),
            });
        }
        if (h, w) == (ho, wo) {
            return Ok(x);
        }
        let out = kernels::bilinear_forward(self.value(x).data(), n * c, h, w, ho, wo);
        let t = Tensor::from_vec(&[n, c, ho, wo], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Resize(x), rg))
    }

    /// Mean over the spatial axes, keeping them as `1×1`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let inv = T::one() / T::from_f64((h * w) as f64);
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().fold(T::zero(), |s, &v| s + v) * inv)
            .collect();
        let t = Tensor::from_vec(&[n, c, 1, 1], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::GlobalAvgPool(x), rg))
    }

    /// Broadcast an `(n, c, 1, 1)` tensor over `h×w`.
    pub fn expand(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let [n, c, xh, xw] = self.value(x).dims4()?;
        if (xh, xw) != (1, 1) {
            return Err(Error::InvalidShape {
                op: "expand",
                detail: format!("expected 1x1 spatial, got {}x{}", xh, xw),
            });
        }
        let mut data = Vec::with_capacity(n * c * h * w);
        for &v in self.value(x).data() {
            data.extend(core::iter::repeat_n(v, h * w));
        }
        let t = Tensor::from_vec(&[n, c, h, w], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Expand(x), rg))
    }

    /// Per-sample, per-channel normalisation to zero mean and unit variance.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let (out, inv_std) = kernels::instance_norm_forward(self.value(x).data(), n * c, h * w, eps);
        let t = Tensor::from_vec(&[n, c, h, w], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::InstanceNorm { x, inv_std }, rg))
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::Empty("concat_channels"))?;
        let [n, _, h, w] = self.value(first).dims4()?;
        let mut total = 0;
        for &v in xs {
            let [vn, vc, vh, vw] = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    left: self.value(first).shape().to_vec(),
                    right: self.value(v).shape().to_vec(),
                });
            }
            total += vc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for &v in xs {
                let vc = self.value(v).shape()[1];
                data.extend_from_slice(&self.value(v).data()[b * vc * plane..(b + 1) * vc * plane]);
            }
        }
        let t = Tensor::from_vec(&[n, total, h, w], data)?;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(t, Op::Concat(xs.to_vec()), rg))
    }

    /// Channels `start..start+len`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if start + len > c || len == 0 {
            return Err(Error::OutOfRange(format!(
                "channel slice {}..{} of {}",
                start,
                start + len,
                c
            )));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let base = (b * c + start) * plane;
            data.extend_from_slice(&self.value(x).data()[base..base + len * plane]);
        }
        let t = Tensor::from_vec(&[n, len, h, w], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceChannels { x, start }, rg))
    }

    /// Select rows of a `(k, ...)` table, one per batch entry.
    pub fn embed_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.value(table).shape().to_vec();
        let k = shape[0];
        let row_len: usize = shape[1..].iter().product();
        if let Some(&bad) = rows.iter().find(|&&r| r >= k) {
            return Err(Error::OutOfRange(format!("embedding row {} of {}", bad, k)));
        }
        let mut data = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            data.extend_from_slice(&self.value(table).data()[r * row_len..(r + 1) * row_len]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        let t = Tensor::from_vec(&out_shape, data)?;
        let rg = self.rg(table);
        Ok(self.push(
            t,
            Op::EmbedRows {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(t, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(x);
        self.push(t, Op::Mean(x), rg)
    }

    /// `Σ weight_i · −log softmax(logits_i)[target_i] / norm`, where `i` runs
    /// over every `(n, y, x)` position and the softmax is over channels.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[T],
        norm: T,
    ) -> Result<Var> {
        let [n, k, h, w] = self.value(logits).dims4()?;
        let positions = n * h * w;
        if targets.len() != positions || weights.len() != positions {
            return Err(Error::InvalidShape {
                op: "softmax_cross_entropy",
                detail: format!("{} positions, {} targets, {} weights", positions, targets.len(), weights.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::OutOfRange(format!("class {} of {}", bad, k)));
        }
        let x = self.value(logits).data();
        let plane = h * w;
        let mut probs = vec![T::zero(); x.len()];
        let mut loss = T::zero();
        for b in 0..n {
            for p in 0..plane {
                let idx = |c: usize| (b * k + c) * plane + p;
                let m = (0..k).fold(T::neg_infinity(), |m, c| m.max(x[idx(c)]));
                let z = (0..k).fold(T::zero(), |s, c| s + (x[idx(c)] - m).exp());
                for c in 0..k {
                    probs[idx(c)] = (x[idx(c)] - m).exp() / z;
                }
                let pos = b * plane + p;
                let wgt = weights[pos];
                if wgt != T::zero() {
                    let lse = m + z.ln();
                    loss = loss + wgt * (lse - x[idx(targets[pos])]);
                }
            }
        }
        let t = Tensor::scalar(loss / norm);
        let rg = self.rg(logits);
        Ok(self.push(
            t,
            Op::SoftmaxCe {
                logits,
                probs,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                norm,
            },
            rg,
        ))
    }

    /// `Σ weight_i · BCE(sigmoid(x_i), target_i) / norm`, numerically stable.
    pub fn bce_with_logits(&mut self, x: Var, targets: &[T], weights: &[T], norm: T) -> Result<Var> {
        let xs = self.value(x).data();
        if targets.len() != xs.len() || weights.len() != xs.len() {
            return Err(Error::InvalidShape {
                op: "bce_with_logits",
                detail: format!("{} logits, {} targets, {} weights", xs.len(), targets.len(), weights.len()),
            });
        }
        let loss = xs
            .iter()
            .zip(targets)
            .zip(weights)
            .fold(T::zero(), |s, ((&v, &t), &wgt)| {
                s + wgt * (v.max(T::zero()) - v * t + (T::one() + (-v.abs()).exp()).ln())
            });
        let t = Tensor::scalar(loss / norm);
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::BceLogits {
                x,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                norm,
            },
            rg,
        ))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        if self.value(out).numel() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                detail: format!("output must be scalar, got {:?}", self.value(out).shape()),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[out.0] = Some(Tensor::full(self.value(out).shape(), T::one()));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    /// Gradients of every trainable parameter that appeared on the tape.
    pub fn param_grads(&self, grads: &Gradients<T>) -> ParamGrads<T> {
        let mut out: ParamGrads<T> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let (Some(id), Some(g)) = (node.param, grads.grads[i].as_ref()) else {
                continue;
            };
            match out.get_mut(&id) {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, &b)| *a = *a + b),
                None => {
                    out.insert(id, g.clone());
                }
            }
        }
        out
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match grads[v.0].as_mut() {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(&data)
                .for_each(|(a, &b)| *a = *a + b),
            None => {
                let shape = self.value(v).shape();
                grads[v.0] = Some(Tensor::from_vec(shape, data).expect("gradient shape"));
            }
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, gd.to_vec());
                self.accum(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, gd.to_vec());
                self.accum(grads, *b, gd.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (x, z) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    self.accum(grads, *a, gd.iter().zip(z).map(|(&g, &q)| g * q).collect());
                }
                if self.rg(*b) {
                    self.accum(grads, *b, gd.iter().zip(x).map(|(&g, &p)| g * p).collect());
                }
            }
            Op::Div(a, b) => {
                let (x, z) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    self.accum(grads, *a, gd.iter().zip(z).map(|(&g, &q)| g / q).collect());
                }
                if self.rg(*b) {
                    let d = gd
                        .iter()
                        .zip(x)
                        .zip(z)
                        .map(|((&g, &p), &q)| -g * p / (q * q))
                        .collect();
                    self.accum(grads, *b, d);
                }
            }
            Op::Scale(a, s) => self.accum(grads, *a, gd.iter().map(|&v| v * *s).collect()),
            Op::AddScalar(a) => self.accum(grads, *a, gd.to_vec()),
            Op::Abs(a) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(&g, &v)| {
                        if v > T::zero() {
                            g
                        } else if v < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accum(grads, *a, d);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.accum(grads, *a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(&g, &v)| if v >= *lo && v <= *hi { g } else { T::zero() })
                    .collect();
                self.accum(grads, *a, d);
            }
            Op::Gelu(a) => {
                let (c, k, half) = (T::from_f64(GELU_C), T::from_f64(GELU_K), T::from_f64(0.5));
                let three = T::from_f64(3.0);
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(&g, &v)| {
                        let th = (c * (v + k * v * v * v)).tanh();
                        let du = c * (T::one() + three * k * v * v);
                        g * (half * (T::one() + th) + half * v * (T::one() - th * th) * du)
                    })
                    .collect();
                self.accum(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = gd
                    .iter()
                    .zip(y)
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                self.accum(grads, *a, d);
            }
            Op::Conv {
                x,
                w,
                b,
                geom,
                depthwise,
            } => {
                let need_dx = self.rg(*x);
                let need_dw = self.rg(*w);
                let need_db = b.is_some_and(|b| self.rg(b));
                let f = if *depthwise {
                    kernels::dwconv_backward
                } else {
                    kernels::conv_backward
                };
                let (dx, dw, db) = f(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    geom,
                    need_dx,
                    need_dw,
                    need_db,
                );
                if let Some(dx) = dx {
                    self.accum(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accum(grads, *w, dw);
                }
                if let (Some(db), Some(b)) = (db, b) {
                    self.accum(grads, *b, db);
                }
            }
            Op::AvgPool(a, k) => {
                let [n, c, h, w] = self.value(*a).dims4()?;
                self.accum(grads, *a, kernels::avgpool_backward(gd, n * c, h, w, *k));
            }
            Op::Resize(a) => {
                let [n, c, h, w] = self.value(*a).dims4()?;
                let [_, _, ho, wo] = node.value.dims4()?;
                self.accum(grads, *a, kernels::bilinear_backward(gd, n * c, h, w, ho, wo));
            }
            Op::GlobalAvgPool(a) => {
                let [_, _, h, w] = self.value(*a).dims4()?;
                let inv = T::one() / T::from_f64((h * w) as f64);
                let mut d = Vec::with_capacity(self.value(*a).numel());
                for &v in gd {
                    d.extend(core::iter::repeat_n(v * inv, h * w));
                }
                self.accum(grads, *a, d);
            }
            Op::Expand(a) => {
                let [_, _, h, w] = node.value.dims4()?;
                let d = gd
                    .chunks(h * w)
                    .map(|p| p.iter().fold(T::zero(), |s, &v| s + v))
                    .collect();
                self.accum(grads, *a, d);
            }
            Op::InstanceNorm { x, inv_std } => {
                let [_, _, h, w] = node.value.dims4()?;
                self.accum(grads, *x, kernels::instance_norm_backward(y, inv_std, gd, h * w));
            }
            Op::Concat(xs) => {
                let [n, total, h, w] = node.value.dims4()?;
                let plane = h * w;
                let mut offset = 0;
                for &v in xs {
                    let vc = self.value(v).shape()[1];
                    if self.rg(v) {
                        let mut d = Vec::with_capacity(n * vc * plane);
                        for b in 0..n {
                            let base = (b * total + offset) * plane;
                            d.extend_from_slice(&gd[base..base + vc * plane]);
                        }
                        self.accum(grads, v, d);
                    }
                    offset += vc;
                }
            }
            Op::SliceChannels { x, start } => {
                let [n, c, h, w] = self.value(*x).dims4()?;
                let len = node.value.shape()[1];
                let plane = h * w;
                let mut d = vec![T::zero(); n * c * plane];
                for b in 0..n {
                    let dst = (b * c + start) * plane;
                    let src = b * len * plane;
                    d[dst..dst + len * plane].copy_from_slice(&gd[src..src + len * plane]);
                }
                self.accum(grads, *x, d);
            }
            Op::EmbedRows { table, rows } => {
                let shape = self.value(*table).shape();
                let row_len: usize = shape[1..].iter().product();
                let mut d = vec![T::zero(); self.value(*table).numel()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..row_len {
                        d[r * row_len + j] = d[r * row_len + j] + gd[i * row_len + j];
                    }
                }
                self.accum(grads, *table, d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accum(grads, *a, vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.accum(grads, *a, vec![gd[0] / T::from_f64(n as f64); n]);
            }
            Op::SoftmaxCe {
                logits,
                probs,
                targets,
                weights,
                norm,
            } => {
                let [n, k, h, w] = self.value(*logits).dims4()?;
                let plane = h * w;
                let scale = gd[0] / *norm;
                let mut d = vec![T::zero(); probs.len()];
                for b in 0..n {
                    for p in 0..plane {
                        let pos = b * plane + p;
                        let wgt = weights[pos];
                        if wgt == T::zero() {
                            continue;
                        }
                        for c in 0..k {
                            let idx = (b * k + c) * plane + p;
                            let onehot = if targets[pos] == c { T::one() } else { T::zero() };
                            d[idx] = scale * wgt * (probs[idx] - onehot);
                        }
                    }
                }
                self.accum(grads, *logits, d);
            }
            Op::BceLogits {
                x,
                targets,
                weights,
                norm,
            } => {
                let scale = gd[0] / *norm;
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&v, &t), &wgt)| scale * wgt * (sigmoid(v) - t))
                    .collect();
                self.accum(grads, *x, d);
            }
        }
        Ok(())
    }
}
