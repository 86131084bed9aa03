//! Query generation from the water-type, degradation and sample priors.
//!
//! * water prior: a learned `C×g×g` map per water type, selected by the
//!   classifier's most probable type and resized to the target resolution
//!   (`g = 1` is a spatially constant channel vector);
//! * degradation prior: classifier stage features projected to `C`
//!   channels, aligned at stride 4, summed, instance-normalised, refined by a
//!   pointwise convolution with ReLU and resized to the target;
//! * sample prior: the consuming block's own input feature.
//!
//! The query is the instance-normalised sum of the enabled priors.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::classifier::{argmax_rows, STAGE_CHANNELS};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Conv2d;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::watersim::NUM_WATER_TYPES;

pub const NORM_EPS: f64 = 1e-5;

/// One learned map per water type, `(9, C, g, g)`.
#[derive(Clone, Debug)]
pub struct WaterEmbedding {
    pub table: ParamId,
}

impl WaterEmbedding {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, channels: usize, grid: usize, rng: &mut R) -> Self {
        let table = store.add_uniform(&format!("{name}.table"), &[NUM_WATER_TYPES, channels, grid, grid], 1.0, rng);
        Self { table }
    }

    /// Prior map `(batch, C, h, w)` for the argmax of each row of `prob`
    /// (`(batch, 9)`). Only the selected rows receive gradient.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        prob: &Tensor<T>,
        target_hw: (usize, usize),
    ) -> Result<Var> {
        let rows = argmax_rows(prob)?;
        let table = g.param(store, self.table);
        let selected = g.embed_rows(table, &rows)?;
        g.resize_bilinear(selected, target_hw.0, target_hw.1)
    }
}

/// Intermediate maps of [`DegradationPrior::forward_parts`].
#[derive(Clone, Copy, Debug)]
pub struct DegradationParts {
    /// Normalised aligned sum at stride 4.
    pub normalized: Var,
    /// Output of the refining convolution, before ReLU.
    pub refined: Var,
    /// Final prior at the target resolution.
    pub prior: Var,
}

#[derive(Clone, Debug)]
pub struct DegradationPrior {
    pub project: [Conv2d; 4],
    pub refine: Conv2d,
}

impl DegradationPrior {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut R) -> Self {
        let project =
            [0, 1, 2, 3].map(|i| Conv2d::pointwise(store, &format!("{name}.project{i}"), STAGE_CHANNELS[i], channels, rng));
        let refine = Conv2d::pointwise(store, &format!("{name}.refine"), channels, channels, rng);
        Self { project, refine }
    }

    /// `features` are `R_0..R_3`, each half the size of the previous one.
    pub fn forward_parts<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        features: &[Var; 4],
        target_hw: (usize, usize),
    ) -> Result<DegradationParts> {
        let [_, _, h0, w0] = g.value(features[0]).dims4()?;
        let mut sum: Option<Var> = None;
        for (i, (&f, conv)) in features.iter().zip(&self.project).enumerate() {
            let [_, _, h, w] = g.value(f).dims4()?;
            if h << i != h0 || w << i != w0 {
                return Err(Error::InvalidShape {
                    op: "degradation_prior",
                    detail: format!("stage {} is {}x{}, expected {}x{}", i, h, w, h0 >> i, w0 >> i),
                });
            }
            let projected = conv.forward(g, store, f)?;
            let aligned = g.resize_bilinear(projected, h0, w0)?;
            sum = Some(match sum {
                None => aligned,
                Some(s) => g.add(s, aligned)?,
            });
        }
        let sum = sum.ok_or(Error::Empty("stage features"))?;
        let normalized = g.instance_norm(sum, T::from_f64(NORM_EPS))?;
        let refined = self.refine.forward(g, store, normalized)?;
        let act = g.relu(refined);
        let prior = g.resize_bilinear(act, target_hw.0, target_hw.1)?;
        Ok(DegradationParts {
            normalized,
            refined,
            prior,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        features: &[Var; 4],
        target_hw: (usize, usize),
    ) -> Result<Var> {
        Ok(self.forward_parts(g, store, features, target_hw)?.prior)
    }
}

/// The sample prior is the block input itself.
pub fn sample_prior(f_j: Var) -> Var {
    f_j
}

/// Which priors enter the fused query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PriorToggles {
    pub water: bool,
    pub degrad: bool,
    pub sample: bool,
}

impl PriorToggles {
    pub const ALL: Self = Self {
        water: true,
        degrad: true,
        sample: true,
    };

    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            water: cfg.enable_water_prior,
            degrad: cfg.enable_degrad_prior,
            sample: cfg.enable_sample_prior,
        }
    }

    pub fn any(&self) -> bool {
        self.water || self.degrad || self.sample
    }
}

/// Instance-normalised sum of the enabled priors; disabled priors
/// contribute nothing.
pub fn fuse_priors<T: Scalar>(g: &mut Graph<T>, water: Var, degrad: Var, sample: Var, toggles: PriorToggles) -> Result<Var> {
    let enabled: Vec<Var> = [(toggles.water, water), (toggles.degrad, degrad), (toggles.sample, sample)]
        .into_iter()
        .filter_map(|(on, v)| on.then_some(v))
        .collect();
    normalized_sum(g, &enabled)
}

fn normalized_sum<T: Scalar>(g: &mut Graph<T>, enabled: &[Var]) -> Result<Var> {
    let mut sum = *enabled.first().ok_or(Error::NoPriorSignal)?;
    for &v in &enabled[1..] {
        sum = g.add(sum, v)?;
    }
    g.instance_norm(sum, T::from_f64(NORM_EPS))
}

/// The four maps handed to one attention block.
#[derive(Clone, Copy, Debug)]
pub struct PriorBundle {
    pub water: Option<Var>,
    pub degrad: Option<Var>,
    pub sample: Var,
    pub fused: Var,
}

/// Learned parts of the query generator.
#[derive(Clone, Debug)]
pub struct PriorGenerator {
    pub water: WaterEmbedding,
    pub degrad: DegradationPrior,
    pub toggles: PriorToggles,
}

/// Priors computed once per image and shared by every block.
#[derive(Clone, Copy, Debug)]
pub struct SharedPriors {
    pub water: Option<Var>,
    pub degrad: Option<Var>,
}

impl PriorGenerator {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, cfg: &RunConfig, rng: &mut R) -> Self {
        Self {
            water: WaterEmbedding::new(store, &format!("{name}.water"), cfg.channels, cfg.water_grid, rng),
            degrad: DegradationPrior::new(store, &format!("{name}.degrad"), cfg.channels, rng),
            toggles: PriorToggles::from_config(cfg),
        }
    }

    /// Water and degradation priors at `target_hw`; disabled ones are skipped.
    pub fn shared<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        prob: &Tensor<T>,
        features: &[Var; 4],
        target_hw: (usize, usize),
    ) -> Result<SharedPriors> {
        let water = match self.toggles.water {
            true => Some(self.water.forward(g, store, prob, target_hw)?),
            false => None,
        };
        let degrad = match self.toggles.degrad {
            true => Some(self.degrad.forward(g, store, features, target_hw)?),
            false => None,
        };
        Ok(SharedPriors { water, degrad })
    }

    /// Query for a block whose input is `f_j`.
    pub fn bundle<T: Scalar>(&self, g: &mut Graph<T>, shared: &SharedPriors, f_j: Var) -> Result<PriorBundle> {
        let sample = sample_prior(f_j);
        let mut enabled = Vec::with_capacity(3);
        enabled.extend(shared.water);
        enabled.extend(shared.degrad);
        if self.toggles.sample {
            enabled.push(sample);
        }
        let fused = normalized_sum(g, &enabled)?;
        Ok(PriorBundle {
            water: shared.water,
            degrad: shared.degrad,
            sample,
            fused,
        })
    }
}
