//! Validated image and feature-map wrappers.

use alloc::format;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Batch of RGB images, `(batch, 3, H, W)`, values in `[0, 1]`, with `H` and
/// `W` at least 16 and divisible by 8.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<T = f32>(Tensor<T>);

fn check_image_shape<T: Scalar>(t: &Tensor<T>) -> Result<()> {
    let [n, c, h, w] = t.dims4()?;
    if n == 0 || c != 3 || h < 16 || w < 16 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::InvalidShape {
            op: "image",
            detail: format!(
                "expected (batch>0, 3, H>=16, W>=16) with H, W divisible by 8, got {:?}",
                t.shape()
            ),
        });
    }
    Ok(())
}

impl<T: Scalar> ImageTensor<T> {
    /// Wrap a tensor that already satisfies every invariant.
    pub fn new(t: Tensor<T>) -> Result<Self> {
        check_image_shape(&t)?;
        t.check_finite()?;
        if let Some(v) = t.data().iter().find(|&&v| v < T::zero() || v > T::one()) {
            return Err(Error::OutOfRange(format!("pixel value {:?} outside [0, 1]", v)));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }
}

/// Clamp every entry into `[0, 1]`. Non-finite input is rejected with the
/// offending flat index.
pub fn clamp_image<T: Scalar>(x: Tensor<T>) -> Result<ImageTensor<T>> {
    x.check_finite()?;
    check_image_shape(&x)?;
    Ok(ImageTensor(x.map(|v| v.max(T::zero()).min(T::one()))))
}

/// Activation tensor `(batch, C, h, w)` at `scale`× downsampling of the input.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f32> {
    data: Tensor<T>,
    scale: usize,
}

impl<T: Scalar> FeatureMap<T> {
    /// `input_hw` is the `(H, W)` of the image the features derive from.
    pub fn new(data: Tensor<T>, scale: usize, input_hw: (usize, usize)) -> Result<Self> {
        let [_, _, h, w] = data.dims4()?;
        if scale == 0 || h * scale != input_hw.0 || w * scale != input_hw.1 {
            return Err(Error::InvalidShape {
                op: "feature_map",
                detail: format!("{}x{} at scale {} does not tile {:?}", h, w, scale, input_hw),
            });
        }
        data.check_finite()?;
        Ok(Self { data, scale })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }
}
