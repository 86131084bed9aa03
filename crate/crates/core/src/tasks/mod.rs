//! Downstream task networks with the enhancement plugin in front.

pub mod det;
pub mod metrics;
pub mod uie;

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::classifier::Classifier;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fen::FenModel;
use crate::graph::{Graph, Var};
use crate::image::ImageTensor;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::watersim::GtBox;

pub use det::DetHead;
pub use uie::UieHead;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Uie,
    Det,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Uie => "uie",
            TaskKind::Det => "det",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "uie" => Some(TaskKind::Uie),
            "det" => Some(TaskKind::Det),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub enum TaskNet {
    /// Passes the (enhanced) image through unchanged.
    Identity,
    Uie(UieHead),
    Det(DetHead),
}

/// What the training loss compares against.
#[derive(Clone, Copy, Debug)]
pub enum TaskTarget<'a, T> {
    Image(&'a Tensor<T>),
    Boxes(&'a [Vec<GtBox>]),
}

/// `task(enhance(x))`, or `task(x)` without the plugin. All trainable
/// parameters share one store; the frozen classifier keeps its own.
#[derive(Clone, Debug)]
pub struct TaskModel<T = f32> {
    pub cfg: RunConfig,
    pub store: ParamStore<T>,
    pub fen: Option<FenModel<T>>,
    pub net: TaskNet,
}

pub const FEN_PREFIX: &str = "fen.";
/// Component tag of a checkpoint holding the plugin.
pub const FEN_TAG: &str = "fen";

impl<T: Scalar> TaskModel<T> {
    /// Build the task network for `kind`; with `cfg.use_plugin` the
    /// enhancement network is placed in front and `classifier` is required.
    pub fn new<R: Rng>(kind: TaskKind, cfg: &RunConfig, classifier: Option<Classifier<T>>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let fen = match (cfg.use_plugin, classifier) {
            (true, Some(c)) => Some(FenModel::new(&mut store, FEN_PREFIX, cfg, c, rng)?),
            (true, None) => return Err(Error::Config("the plugin needs a trained classifier".into())),
            (false, _) => None,
        };
        let net = match kind {
            TaskKind::Uie => TaskNet::Uie(UieHead::new(&mut store, "uie.", rng)),
            TaskKind::Det => TaskNet::Det(DetHead::new(&mut store, "det.", rng)),
        };
        Ok(Self {
            cfg: cfg.clone(),
            store,
            fen,
            net,
        })
    }

    /// Compose an existing plugin with a task network.
    pub fn plug(fen: FenModel<T>, store: ParamStore<T>, net: TaskNet) -> Self {
        Self {
            cfg: fen.cfg.clone(),
            store,
            fen: Some(fen),
            net,
        }
    }

    pub fn kind(&self) -> Option<TaskKind> {
        match self.net {
            TaskNet::Identity => None,
            TaskNet::Uie(_) => Some(TaskKind::Uie),
            TaskNet::Det(_) => Some(TaskKind::Det),
        }
    }

    pub fn classifier(&self) -> Option<&Classifier<T>> {
        self.fen.as_ref().map(|f| &f.classifier)
    }

    /// The image handed to the task network.
    pub fn enhanced(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match &self.fen {
            Some(fen) => Ok(fen.forward(g, &self.store, x)?.enhanced),
            None => Ok(x),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = self.enhanced(g, x)?;
        match &self.net {
            TaskNet::Identity => Ok(y),
            TaskNet::Uie(h) => h.forward(g, &self.store, y),
            TaskNet::Det(h) => h.forward(g, &self.store, y),
        }
    }

    pub fn loss(&self, g: &mut Graph<T>, out: Var, target: TaskTarget<'_, T>) -> Result<Var> {
        match (&self.net, target) {
            (TaskNet::Det(_), TaskTarget::Boxes(b)) => det::detection_loss(g, out, b),
            (TaskNet::Uie(_) | TaskNet::Identity, TaskTarget::Image(t)) => {
                let r = g.constant(t.clone());
                uie::uie_loss(g, out, r, &self.cfg)
            }
            _ => Err(Error::Config("task target does not match the task network".into())),
        }
    }

    /// Trainable parameters plus, with the plugin, the frozen classifier.
    /// Tagged [`FEN_TAG`] with the plugin, else by task name.
    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        let tag = match (&self.fen, self.kind()) {
            (Some(_), _) => FEN_TAG,
            (None, Some(k)) => k.name(),
            (None, None) => "identity",
        };
        let mut c = Checkpoint::new(tag, self.cfg.clone(), step);
        c.push_store("", &self.store.cast());
        if let Some(cls) = self.classifier() {
            cls.push_to(&mut c);
        }
        c
    }

    /// Forward pass without recording gradients.
    pub fn infer(&self, x: &ImageTensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.tensor().clone());
        let out = self.forward(&mut g, xv)?;
        Ok(g.value(out).clone())
    }
}

impl TaskModel<f32> {
    /// Inverse of [`TaskModel::to_checkpoint`]; the task is recognised from
    /// the parameter names.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let has = |p: &str| ckpt.params.iter().any(|(n, _)| n.starts_with(p));
        let kind = match (has("uie."), has("det.")) {
            (true, false) => TaskKind::Uie,
            (false, true) => TaskKind::Det,
            _ => {
                return Err(Error::CorruptCheckpoint(alloc::format!(
                    "'{}' checkpoint holds no single task network",
                    ckpt.component
                )))
            }
        };
        let mut cfg = ckpt.config.clone();
        cfg.use_plugin = has(FEN_PREFIX);
        let classifier = if cfg.use_plugin {
            Some(Classifier::from_checkpoint(ckpt)?)
        } else {
            None
        };
        let mut m = TaskModel::new(kind, &cfg, classifier, &mut ChaCha8Rng::seed_from_u64(0))?;
        ckpt.fill_store("", &mut m.store)?;
        Ok(m)
    }
}
