//! Feature enhancement network.
//!
//! ```text
//! F_0     = stem(x)
//! F_{j+1} = F_j + block_j(F_j, P_j)        P_j = Norm(P_water + P_degrad + F_j)
//! y       = clamp(x + head(F_L), 0, 1)
//! ```
//!
//! The water-type and degradation priors come from one pass of the frozen
//! classifier over `x` and are shared by all blocks. The head starts at
//! exactly zero, so a fresh model returns its input unchanged.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::classifier::Classifier;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::{FeatureMap, ImageTensor};
use crate::msfa::MsfaBlock;
use crate::nn::Conv2d;
use crate::params::ParamStore;
use crate::priorgen::PriorGenerator;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct FenOutput {
    /// Last block output `F_L`.
    pub features: Var,
    /// Clamped enhanced image.
    pub enhanced: Var,
}

#[derive(Clone, Debug)]
pub struct FenModel<T = f32> {
    pub cfg: RunConfig,
    pub classifier: Classifier<T>,
    pub stem: Conv2d,
    pub priors: PriorGenerator,
    pub blocks: Vec<MsfaBlock>,
    pub head: Conv2d,
}

impl<T: Scalar> FenModel<T> {
    /// Register the trainable parameters in `store` under `prefix`. The
    /// classifier is frozen and keeps its own parameters.
    pub fn new<R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &RunConfig,
        mut classifier: Classifier<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        classifier.freeze();
        let c = cfg.channels;
        let stem = Conv2d::new(store, &format!("{prefix}stem"), 3, c, 3, 1, 1, rng);
        let priors = PriorGenerator::new(store, &format!("{prefix}prior"), cfg, rng);
        let blocks = (0..cfg.fen_blocks)
            .map(|j| MsfaBlock::new(store, &format!("{prefix}block{j}"), cfg, rng))
            .collect();
        let head = Conv2d::zeroed(store, &format!("{prefix}head"), c, 3, 3);
        Ok(Self {
            cfg: cfg.clone(),
            classifier,
            stem,
            priors,
            blocks,
            head,
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<FenOutput> {
        let image = ImageTensor::new(g.value(x).clone())?;
        let (h, w) = (image.height(), image.width());
        let pred = self.classifier.classify(&image)?;
        let feats = pred.features.clone().map(|f| g.constant(f.into_tensor()));
        let shared = self.priors.shared(g, store, &pred.prob, &feats, (h, w))?;
        let mut f = self.stem.forward(g, store, x)?;
        for block in &self.blocks {
            let bundle = self.priors.bundle(g, &shared, f)?;
            let delta = block.forward(g, store, f, bundle.fused)?;
            f = g.add(f, delta)?;
        }
        let increment = self.head.forward(g, store, f)?;
        let sum = g.add(x, increment)?;
        let enhanced = g.clamp(sum, T::zero(), T::one());
        Ok(FenOutput { features: f, enhanced })
    }

    pub fn enhance(&self, store: &ParamStore<T>, x: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.tensor().clone());
        let out = self.forward(&mut g, store, xv)?;
        ImageTensor::new(g.value(out.enhanced).clone())
    }

    /// Pre-head features `F_L` at full resolution.
    pub fn enhance_features(&self, store: &ParamStore<T>, x: &ImageTensor<T>) -> Result<FeatureMap<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.tensor().clone());
        let out = self.forward(&mut g, store, xv)?;
        let t = g.value(out.features).clone();
        if t.check_finite().is_err() {
            return Err(Error::OutOfRange("non-finite enhancement features".into()));
        }
        FeatureMap::new(t, 1, (x.height(), x.width()))
    }
}
