//! Training loops and evaluation for the classifier and the two tasks.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classifier::{argmax_rows, Classifier};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::kernels::bilinear_forward;
use crate::graph::Graph;
use crate::image::ImageTensor;
use crate::optim::{AdamW, Sgd};
use crate::params::ParamStore;
use crate::schedule::lr_at;
use crate::tasks::det::{decode, per_class_ap50, Detection, CLASS_NAMES, SCORE_THRESHOLD};
use crate::tasks::metrics::MetricReport;
use crate::tasks::uie::{psnr, ssim, PSNR_CAP};
use crate::tasks::{TaskKind, TaskModel, TaskTarget};
use crate::tensor::Tensor;
use crate::watersim::{GtBox, SceneSample, NUM_WATER_TYPES};

/// Summary of one training epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// Loss of every optimisation step of the epoch.
    pub step_losses: Vec<f64>,
    /// Validation metrics, named as in [`validation_columns`].
    pub val: Vec<f64>,
    pub image_size: usize,
}

/// Names of the validation metrics reported per epoch.
pub fn validation_columns(kind: Option<TaskKind>) -> &'static [&'static str] {
    match kind {
        None => &["val_top1"],
        Some(TaskKind::Uie) => &["val_psnr", "val_ssim"],
        Some(TaskKind::Det) => &["val_map50"],
    }
}

/// Per-epoch table: `train_loss` followed by the validation columns.
pub fn history_report(kind: Option<TaskKind>, history: &[EpochStats]) -> MetricReport {
    let mut cols = vec!["train_loss"];
    cols.extend_from_slice(validation_columns(kind));
    let mut r = MetricReport::new(&cols);
    for e in history {
        let mut row = vec![e.train_loss];
        row.extend_from_slice(&e.val);
        r.push(e.epoch.to_string(), row);
    }
    r
}

fn resize_image(t: &Tensor<f32>, side: usize) -> Result<Tensor<f32>> {
    let [n, c, h, w] = t.dims4()?;
    if (h, w) == (side, side) {
        return Ok(t.clone());
    }
    Tensor::from_vec(&[n, c, side, side], bilinear_forward(t.data(), n * c, h, w, side, side))
}

fn scale_boxes(boxes: &[GtBox], from: usize, to: usize) -> Vec<GtBox> {
    let s = to as f32 / from as f32;
    boxes
        .iter()
        .map(|b| GtBox {
            x0: b.x0 * s,
            y0: b.y0 * s,
            x1: b.x1 * s,
            y1: b.y1 * s,
            ..*b
        })
        .collect()
}

/// Inputs (degraded images), clean targets and boxes of a batch, resized to
/// `side` when given.
pub struct Batch {
    pub inputs: Tensor<f32>,
    pub clean: Tensor<f32>,
    pub boxes: Vec<Vec<GtBox>>,
    pub labels: Vec<usize>,
}

pub fn make_batch(samples: &[&SceneSample], side: Option<usize>) -> Result<Batch> {
    let first = samples.first().ok_or(Error::Empty("batch"))?;
    let native = first.degraded.height();
    let side = side.unwrap_or(native);
    let stack = |f: &dyn Fn(&SceneSample) -> &ImageTensor<f32>| -> Result<Tensor<f32>> {
        let items: Vec<Tensor<f32>> = samples.iter().map(|s| f(s).tensor().clone()).collect();
        resize_image(&Tensor::stack_batch(&items)?, side)
    };
    Ok(Batch {
        inputs: stack(&|s| &s.degraded)?,
        clean: stack(&|s| &s.clean)?,
        boxes: samples.iter().map(|s| scale_boxes(&s.boxes, native, side)).collect(),
        labels: samples.iter().map(|s| s.water_type).collect(),
    })
}

fn total_steps(cfg: &RunConfig, steps_per_epoch: usize) -> usize {
    if cfg.total_steps == 0 {
        cfg.epochs * steps_per_epoch
    } else {
        cfg.total_steps
    }
}

/// Learning rate of `step`, with warmup shortened to fit very short runs.
fn scheduled_lr(cfg: &RunConfig, step: usize, total: usize) -> Result<f64> {
    lr_at(step.min(total), cfg.warmup_steps.min(total), total, cfg.min_lr, cfg.max_lr)
}

fn shuffled_batches<'a>(samples: &'a [SceneSample], batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<&'a SceneSample>> {
    let mut order: Vec<&SceneSample> = samples.iter().collect();
    order.shuffle(rng);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Train the water-type classifier on degraded images with cross-entropy and
/// AdamW. `on_epoch` sees every epoch's statistics as they are produced.
pub fn train_classifier(
    train: &[SceneSample],
    val: &[SceneSample],
    cfg: &RunConfig,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<(Classifier<f32>, Vec<EpochStats>)> {
    if train.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Classifier::<f32>::new(&mut rng);
    let mut opt = AdamW::new(cfg.beta1, cfg.beta2, cfg.weight_decay);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = total_steps(cfg, steps_per_epoch);
    let mut step = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let side = cfg.image_size_at(epoch);
        let mut losses = Vec::with_capacity(steps_per_epoch);
        for chunk in shuffled_batches(train, cfg.batch_size, &mut rng) {
            let b = make_batch(&chunk, side)?;
            let n = chunk.len();
            let mut g = Graph::new();
            let x = g.constant(b.inputs);
            let (logits, _) = model.forward(&mut g, x)?;
            let loss = g.softmax_cross_entropy(logits, &b.labels, &vec![1.0; n], n as f32)?;
            losses.push(g.value(loss).data()[0] as f64);
            let grads = g.backward(loss)?;
            let pg = g.param_grads(&grads);
            opt.step(model.store_mut(), &pg, scheduled_lr(cfg, step, total)?);
            step += 1;
        }
        let stats = EpochStats {
            epoch,
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            step_losses: losses,
            val: vec![classifier_accuracy(&model, val, cfg.batch_size)?],
            image_size: side.unwrap_or(train[0].degraded.height()),
        };
        on_epoch(&stats);
        history.push(stats);
    }
    model.freeze();
    Ok((model, history))
}

/// Top-1 accuracy on `samples` (NaN for an empty set).
pub fn classifier_accuracy(model: &Classifier<f32>, samples: &[SceneSample], batch: usize) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut correct = 0;
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&SceneSample> = chunk.iter().collect();
        let b = make_batch(&refs, None)?;
        let pred = model.classify(&ImageTensor::new(b.inputs)?)?;
        correct += argmax_rows(&pred.prob)?
            .iter()
            .zip(&b.labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Confusion counts `[true][predicted]`.
pub fn classifier_confusion(model: &Classifier<f32>, samples: &[SceneSample]) -> Result<[[usize; NUM_WATER_TYPES]; NUM_WATER_TYPES]> {
    let mut m = [[0; NUM_WATER_TYPES]; NUM_WATER_TYPES];
    for s in samples {
        let p = model.classify(&s.degraded)?;
        m[s.water_type][argmax_rows(&p.prob)?[0]] += 1;
    }
    Ok(m)
}

enum TaskOptimizer {
    Adam(AdamW<f32>),
    Sgd(Sgd<f32>),
}

impl TaskOptimizer {
    fn step(&mut self, store: &mut ParamStore<f32>, grads: &crate::graph::ParamGrads<f32>, lr: f64) {
        match self {
            TaskOptimizer::Adam(o) => o.step(store, grads, lr),
            TaskOptimizer::Sgd(o) => o.step(store, grads, lr),
        }
    }
}

/// Jointly train the plugin (when `cfg.use_plugin`) and the task network.
/// Enhancement uses AdamW, detection momentum SGD; both follow the warmup +
/// cosine schedule of `cfg`.
pub fn train_task(
    kind: TaskKind,
    classifier: Option<Classifier<f32>>,
    train: &[SceneSample],
    val: &[SceneSample],
    cfg: &RunConfig,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<(TaskModel<f32>, Vec<EpochStats>)> {
    if train.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = TaskModel::new(kind, cfg, classifier, &mut rng)?;
    let mut opt = match kind {
        TaskKind::Uie => TaskOptimizer::Adam(AdamW::new(cfg.beta1, cfg.beta2, cfg.weight_decay)),
        TaskKind::Det => TaskOptimizer::Sgd(Sgd::new(cfg.momentum, cfg.weight_decay)),
    };
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = total_steps(cfg, steps_per_epoch);
    let mut step = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let side = cfg.image_size_at(epoch);
        let mut losses = Vec::with_capacity(steps_per_epoch);
        for chunk in shuffled_batches(train, cfg.batch_size, &mut rng) {
            let b = make_batch(&chunk, side)?;
            let mut g = Graph::new();
            let x = g.constant(b.inputs);
            let out = model.forward(&mut g, x)?;
            let target = match kind {
                TaskKind::Uie => TaskTarget::Image(&b.clean),
                TaskKind::Det => TaskTarget::Boxes(&b.boxes),
            };
            let loss = model.loss(&mut g, out, target)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite { index: step, value });
            }
            losses.push(value);
            let grads = g.backward(loss)?;
            let mut pg = g.param_grads(&grads);
            if cfg.plugin_grad_scale != 1.0 {
                scale_plugin_grads(&model.store, &mut pg, cfg.plugin_grad_scale as f32);
            }
            opt.step(&mut model.store, &pg, scheduled_lr(cfg, step, total)?);
            step += 1;
        }
        let val_metrics = match kind {
            TaskKind::Uie => evaluate_uie(&model, val)?.mean(),
            TaskKind::Det => vec![evaluate_det(&model, val)?.0.mean()[0]],
        };
        let stats = EpochStats {
            epoch,
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            step_losses: losses,
            val: val_metrics,
            image_size: side.unwrap_or(train[0].degraded.height()),
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok((model, history))
}

// Adam normalises the scale away, so there only 0 (frozen plugin) matters.
fn scale_plugin_grads(store: &ParamStore<f32>, pg: &mut crate::graph::ParamGrads<f32>, k: f32) {
    for (id, g) in pg.iter_mut() {
        if store.name(*id).starts_with(crate::tasks::FEN_PREFIX) {
            *g = g.map(|v| v * k);
        }
    }
}

const EVAL_BATCH: usize = 8;

/// Per-image PSNR (capped at [`PSNR_CAP`]) and SSIM of the task output
/// against the clean image; row ids are sample positions.
pub fn evaluate_uie(model: &TaskModel<f32>, samples: &[SceneSample]) -> Result<MetricReport> {
    let mut r = MetricReport::new(&["psnr", "ssim"]);
    let mut idx = 0;
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&SceneSample> = chunk.iter().collect();
        let b = make_batch(&refs, None)?;
        let out = model.infer(&ImageTensor::new(b.inputs)?)?;
        for (k, s) in chunk.iter().enumerate() {
            let pred = ImageTensor::new(out.batch_slice(k, 1)?)?;
            let p = psnr(&pred, &s.clean)?.min(PSNR_CAP);
            r.push(format!("{idx}"), vec![p, ssim(&pred, &s.clean)?]);
            idx += 1;
        }
    }
    Ok(r)
}

/// Detections of every sample.
pub fn detect(model: &TaskModel<f32>, samples: &[SceneSample]) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&SceneSample> = chunk.iter().collect();
        let b = make_batch(&refs, None)?;
        let hw = (b.inputs.shape()[2], b.inputs.shape()[3]);
        let preds = model.infer(&ImageTensor::new(b.inputs)?)?;
        out.extend(decode(&preds, hw, SCORE_THRESHOLD)?);
    }
    Ok(out)
}

/// AP50 per class (rows named by class; the row mean is mAP50) and the
/// detections.
pub fn evaluate_det(model: &TaskModel<f32>, samples: &[SceneSample]) -> Result<(MetricReport, Vec<Vec<Detection>>)> {
    let dets = detect(model, samples)?;
    let gts: Vec<Vec<GtBox>> = samples.iter().map(|s| s.boxes.clone()).collect();
    let ap = per_class_ap50(&dets, &gts)?;
    let mut r = MetricReport::new(&["map50"]);
    for (name, v) in CLASS_NAMES.iter().zip(ap) {
        r.push(*name, vec![v]);
    }
    Ok((r, dets))
}
