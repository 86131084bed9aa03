//! Water-type classifier exposing four stage features.
//!
//! Layout (input `H×W`, both divisible by 32):
//!
//! ```text
//! stem    4×4/4 conv 3→16, 3×3 conv 16→16     R0  stride 4
//! stage1  3×3/2 conv 16→32, 3×3 conv 32→32    R1  stride 8
//! stage2  3×3/2 conv 32→48, 3×3 conv 48→48    R2  stride 16
//! stage3  3×3/2 conv 48→64, 3×3 conv 64→64    R3  stride 32
//! head    global average pool, linear 64→9
//! ```
//!
//! Every convolution is followed by ReLU. There are no normalisation layers,
//! so every batch entry is processed independently.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::{FeatureMap, ImageTensor};
use crate::nn::Conv2d;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::watersim::NUM_WATER_TYPES;

/// Component tag and parameter-name prefix used in checkpoints.
pub const CLASSIFIER_TAG: &str = "classifier";
pub const CLASSIFIER_PREFIX: &str = "classifier.";

/// Channel width of each stage feature `R_i`.
pub const STAGE_CHANNELS: [usize; 4] = [16, 32, 48, 64];
/// Spatial stride of each stage feature `R_i`.
pub const STAGE_SCALES: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Debug, PartialEq)]
pub struct WaterTypePrediction<T = f32> {
    /// `(batch, 9)` softmax probabilities.
    pub prob: Tensor<T>,
    /// `R_0..R_3` at strides 4, 8, 16, 32.
    pub features: [FeatureMap<T>; 4],
}

impl<T: Scalar> WaterTypePrediction<T> {
    /// Most probable water type of each batch entry.
    pub fn argmax(&self) -> Result<Vec<usize>> {
        argmax_rows(&self.prob)
    }
}

/// Row-wise argmax of a `(batch, k)` probability table. NaN rows are rejected.
pub fn argmax_rows<T: Scalar>(prob: &Tensor<T>) -> Result<Vec<usize>> {
    let k = *prob.shape().last().ok_or(Error::Empty("probabilities"))?;
    prob.check_finite()?;
    Ok(prob
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect())
}

/// Numerically stable softmax over the last axis.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = *logits.shape().last().unwrap_or(&1);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z = z + *v;
        }
        row.iter_mut().for_each(|v| *v = *v / z);
    }
    out
}

#[derive(Clone, Debug)]
pub struct Classifier<T = f32> {
    store: ParamStore<T>,
    stem: [Conv2d; 2],
    stages: [[Conv2d; 2]; 3],
    head: Conv2d,
    frozen: bool,
}

impl<T: Scalar> Classifier<T> {
    pub fn new<R: Rng>(rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let s = &mut store;
        let c = STAGE_CHANNELS;
        let stem = [
            Conv2d::new(s, "stem.0", 3, c[0], 4, 4, 0, rng),
            Conv2d::new(s, "stem.1", c[0], c[0], 3, 1, 1, rng),
        ];
        let stages = [1, 2, 3].map(|i| {
            [
                Conv2d::new(s, &format!("stage{i}.0"), c[i - 1], c[i], 3, 2, 1, rng),
                Conv2d::new(s, &format!("stage{i}.1"), c[i], c[i], 3, 1, 1, rng),
            ]
        });
        let head = Conv2d::pointwise(s, "head", c[3], NUM_WATER_TYPES, rng);
        Self {
            store,
            stem,
            stages,
            head,
            frozen: false,
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Mark every parameter as a constant for all later graphs and optimizer
    /// steps.
    pub fn freeze(&mut self) {
        self.frozen = true;
        self.store.set_trainable(false);
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Same weights in another scalar type (frozen state preserved).
    pub fn cast<U: Scalar>(&self) -> Classifier<U> {
        Classifier {
            store: self.store.cast(),
            stem: self.stem.clone(),
            stages: self.stages.clone(),
            head: self.head.clone(),
            frozen: self.frozen,
        }
    }

    /// Append the weights to `ckpt` under [`CLASSIFIER_PREFIX`].
    pub fn push_to(&self, ckpt: &mut Checkpoint) {
        ckpt.push_store(CLASSIFIER_PREFIX, &self.store.cast());
    }

    pub fn to_checkpoint(&self, cfg: &RunConfig, step: u64) -> Checkpoint {
        let mut c = Checkpoint::new(CLASSIFIER_TAG, cfg.clone(), step);
        self.push_to(&mut c);
        c
    }

    /// Rebuild frozen weights from any checkpoint holding classifier entries.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut c = Classifier::<f32>::new(&mut ChaCha8Rng::seed_from_u64(0));
        ckpt.fill_store(CLASSIFIER_PREFIX, &mut c.store)?;
        c.freeze();
        Ok(c.cast())
    }

    /// Logits `(batch, 9, 1, 1)` and the stage features `R_0..R_3`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, [Var; 4])> {
        let [_, _, h, w] = g.value(x).dims4()?;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::InvalidShape {
                op: "classify",
                detail: format!("{}x{} is not divisible by 32", h, w),
            });
        }
        let s = &self.store;
        let centred = g.add_scalar(x, T::from_f64(-0.5));
        let mut y = centred;
        for conv in &self.stem {
            let z = conv.forward(g, s, y)?;
            y = g.relu(z);
        }
        let mut feats = [y; 4];
        for (i, stage) in self.stages.iter().enumerate() {
            for conv in stage {
                let z = conv.forward(g, s, y)?;
                y = g.relu(z);
            }
            feats[i + 1] = y;
        }
        let pooled = g.global_avg_pool(y)?;
        let logits = self.head.forward(g, s, pooled)?;
        Ok((logits, feats))
    }

    /// Probabilities and stage features of a batch, evaluated on a private
    /// graph (nothing is recorded for differentiation).
    pub fn classify(&self, x: &ImageTensor<T>) -> Result<WaterTypePrediction<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.tensor().clone());
        let (logits, feats) = self.forward(&mut g, xv)?;
        let n = x.batch();
        let logits = g.value(logits).clone().reshape(&[n, NUM_WATER_TYPES])?;
        let hw = (x.height(), x.width());
        let mut out = Vec::with_capacity(4);
        for (i, &f) in feats.iter().enumerate() {
            out.push(FeatureMap::new(g.value(f).clone(), STAGE_SCALES[i], hw)?);
        }
        let features: [FeatureMap<T>; 4] = out.try_into().map_err(|_| Error::Empty("stage features"))?;
        Ok(WaterTypePrediction {
            prob: softmax_rows(&logits),
            features,
        })
    }
}
