//! Parameterised layers built on the graph operators.

use alloc::format;

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Scalar;

/// Convolution layer with its own weight (and optional bias) parameters.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub depthwise: bool,
}

impl Conv2d {
    /// Dense convolution, He-uniform weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_kaiming(&format!("{name}.weight"), &[cout, cin, k, k], cin * k * k, rng);
        let bias = Some(store.add_zeros(&format!("{name}.bias"), &[cout]));
        Self {
            weight,
            bias,
            stride,
            pad,
            depthwise: false,
        }
    }

    /// Pointwise (1×1) convolution.
    pub fn pointwise<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, cin, cout, 1, 1, 0, rng)
    }

    /// Depth-wise `k×k` convolution with "same" padding.
    pub fn depthwise<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_kaiming(&format!("{name}.weight"), &[channels, 1, k, k], k * k, rng);
        let bias = Some(store.add_zeros(&format!("{name}.bias"), &[channels]));
        Self {
            weight,
            bias,
            stride: 1,
            pad: k / 2,
            depthwise: true,
        }
    }

    /// Dense convolution whose weight and bias start at exactly zero.
    pub fn zeroed<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let weight = store.add_zeros(&format!("{name}.weight"), &[cout, cin, k, k]);
        let bias = Some(store.add_zeros(&format!("{name}.bias"), &[cout]));
        Self {
            weight,
            bias,
            stride: 1,
            pad: k / 2,
            depthwise: false,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.pad, self.depthwise)
    }
}
