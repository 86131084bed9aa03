//! Multi-scale feature aggregation: multi-scale extraction with full-scale
//! alignment followed by prior-gated attention.
//!
//! Three branches see the block input through depth-wise convolutions with
//! kernels 1, 3 and 5 and are pooled to spatial factors 1, 2 and 4. With
//! full-scale alignment every branch is resampled to every factor; at each
//! factor the three aligned maps are concatenated and refined by a shared
//! pointwise MLP (`3C → C`, GELU, `C → C`). Each refined map is weighted by
//! its own channel means, brought back to full resolution, and the three are
//! summed. Without full-scale alignment the branches meet at a single anchor
//! factor instead.
//!
//! The attention normalises that result, derives keys `K` and values `V` with
//! pointwise convolutions, and in each of `n` channel segments gates the
//! values by `sigmoid(K ⊙ P)` with the prior query `P`.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Conv2d;
use crate::params::ParamStore;
use crate::priorgen::NORM_EPS;
use crate::tensor::Scalar;

/// Spatial factor of each branch relative to the block input.
pub const SCALE_FACTORS: [usize; 3] = [1, 2, 4];
/// Depth-wise kernel of each branch.
pub const BRANCH_KERNELS: [usize; 3] = [1, 3, 5];

/// Resample `x`, currently at spatial factor `from`, to factor `to`:
/// average pooling towards a coarser factor, bilinear interpolation towards
/// a finer one, identity otherwise.
pub fn sample_align<T: Scalar>(g: &mut Graph<T>, x: Var, from: usize, to: usize) -> Result<Var> {
    if !SCALE_FACTORS.contains(&from) || !SCALE_FACTORS.contains(&to) {
        return Err(Error::OutOfRange(format!("scale pair ({}, {})", from, to)));
    }
    if to > from {
        g.avg_pool(x, to / from)
    } else if to < from {
        let [_, _, h, w] = g.value(x).dims4()?;
        g.resize_bilinear(x, h * from / to, w * from / to)
    } else {
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct Msfe {
    pub branches: [Conv2d; 3],
    pub mlp: [Conv2d; 2],
    pub full_scale: bool,
    pub anchor: usize,
}

impl Msfe {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, cfg: &RunConfig, rng: &mut R) -> Self {
        let c = cfg.channels;
        Self {
            branches: BRANCH_KERNELS.map(|k| Conv2d::depthwise(store, &format!("{name}.dwc{k}"), c, k, rng)),
            mlp: [
                Conv2d::pointwise(store, &format!("{name}.mlp.0"), 3 * c, c, rng),
                Conv2d::pointwise(store, &format!("{name}.mlp.1"), c, c, rng),
            ],
            full_scale: cfg.enable_full_scale,
            anchor: cfg.anchor_scale,
        }
    }

    /// The three branch maps at factors 1, 2 and 4.
    pub fn scale_set<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f: Var) -> Result<[Var; 3]> {
        let [_, _, h, w] = g.value(f).dims4()?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidShape {
                op: "msfe",
                detail: format!("{}x{} is not divisible by 4", h, w),
            });
        }
        let mut out = [f; 3];
        for (i, conv) in self.branches.iter().enumerate() {
            let y = conv.forward(g, store, f)?;
            out[i] = g.avg_pool(y, SCALE_FACTORS[i])?;
        }
        Ok(out)
    }

    /// Refined map at factor `target`, weighted by its channel means and
    /// resized to `full_hw`.
    fn refine_at<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        scales: &[Var; 3],
        target: usize,
        full_hw: (usize, usize),
    ) -> Result<Var> {
        let mut aligned = Vec::with_capacity(3);
        for (i, &s) in scales.iter().enumerate() {
            aligned.push(sample_align(g, s, SCALE_FACTORS[i], target)?);
        }
        let cat = g.concat_channels(&aligned)?;
        let hidden = self.mlp[0].forward(g, store, cat)?;
        let hidden = g.gelu(hidden);
        let refined = self.mlp[1].forward(g, store, hidden)?;
        let pooled = g.global_avg_pool(refined)?;
        let [_, _, h, w] = g.value(refined).dims4()?;
        let weights = g.expand(pooled, h, w)?;
        let weighted = g.mul(refined, weights)?;
        let full = sample_align(g, weighted, target, 1)?;
        debug_assert_eq!(&g.value(full).shape()[2..], &[full_hw.0, full_hw.1]);
        Ok(full)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f: Var) -> Result<Var> {
        let [_, _, h, w] = g.value(f).dims4()?;
        let scales = self.scale_set(g, store, f)?;
        if !self.full_scale {
            return self.refine_at(g, store, &scales, self.anchor, (h, w));
        }
        let mut sum: Option<Var> = None;
        for &m in &SCALE_FACTORS {
            let part = self.refine_at(g, store, &scales, m, (h, w))?;
            sum = Some(match sum {
                None => part,
                Some(s) => g.add(s, part)?,
            });
        }
        sum.ok_or(Error::Empty("scales"))
    }
}

/// Intermediate maps of [`PriorAttention::forward_parts`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionParts {
    pub key: Var,
    pub value: Var,
    /// Concatenated activation maps `M`.
    pub gate: Var,
    pub out: Var,
}

#[derive(Clone, Debug)]
pub struct PriorAttention {
    pub key: Conv2d,
    pub value: Conv2d,
    pub segments: usize,
}

impl PriorAttention {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, cfg: &RunConfig, rng: &mut R) -> Self {
        let c = cfg.channels;
        Self {
            key: Conv2d::pointwise(store, &format!("{name}.key"), c, c, rng),
            value: Conv2d::pointwise(store, &format!("{name}.value"), c, c, rng),
            segments: cfg.attention_segments,
        }
    }

    pub fn forward_parts<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f1: Var, p: Var) -> Result<AttentionParts> {
        if g.value(f1).shape() != g.value(p).shape() {
            return Err(Error::ShapeMismatch {
                op: "prior_attention",
                left: g.value(f1).shape().to_vec(),
                right: g.value(p).shape().to_vec(),
            });
        }
        let c = g.value(f1).shape()[1];
        if self.segments == 0 || c % self.segments != 0 {
            return Err(Error::Config(format!("{} segments do not divide {} channels", self.segments, c)));
        }
        let normed = g.instance_norm(f1, T::from_f64(NORM_EPS))?;
        let key = self.key.forward(g, store, normed)?;
        let value = self.value.forward(g, store, normed)?;
        let len = c / self.segments;
        let mut gates = Vec::with_capacity(self.segments);
        let mut outs = Vec::with_capacity(self.segments);
        for s in 0..self.segments {
            let k = g.slice_channels(key, s * len, len)?;
            let q = g.slice_channels(p, s * len, len)?;
            let v = g.slice_channels(value, s * len, len)?;
            let kq = g.mul(k, q)?;
            let m = g.sigmoid(kq);
            outs.push(g.mul(m, v)?);
            gates.push(m);
        }
        let gate = g.concat_channels(&gates)?;
        let out = g.concat_channels(&outs)?;
        Ok(AttentionParts { key, value, gate, out })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f1: Var, p: Var) -> Result<Var> {
        Ok(self.forward_parts(g, store, f1, p)?.out)
    }
}

/// Extraction followed by attention.
#[derive(Clone, Debug)]
pub struct MsfaBlock {
    pub msfe: Msfe,
    pub attention: PriorAttention,
}

impl MsfaBlock {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, cfg: &RunConfig, rng: &mut R) -> Self {
        Self {
            msfe: Msfe::new(store, &format!("{name}.msfe"), cfg, rng),
            attention: PriorAttention::new(store, &format!("{name}.attn"), cfg, rng),
        }
    }

    /// `fused` is the prior query `P` at the resolution of `f`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f: Var, fused: Var) -> Result<Var> {
        let f1 = self.msfe.forward(g, store, f)?;
        self.attention.forward(g, store, f1, fused)
    }
}
