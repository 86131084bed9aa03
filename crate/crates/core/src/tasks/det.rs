//! Single-scale dense detector, its loss, decoding and AP50 evaluation.
//!
//! Every cell of an 8× down-sampled grid predicts eight numbers:
//!
//! | channel | meaning                                          |
//! |---------|--------------------------------------------------|
//! | 0       | objectness logit                                 |
//! | 1..=3   | class logits (disc, square, triangle)            |
//! | 4, 5    | box centre offset inside the cell, in cell units |
//! | 6, 7    | `ln(width / 8)`, `ln(height / 8)`                |
//!
//! A cell is positive when it contains the centre of a ground-truth box (the
//! first such box wins).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Conv2d;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::watersim::{GtBox, NUM_OBJECT_CLASSES};

pub const GRID_STRIDE: usize = 8;
pub const DET_OUTPUTS: usize = 4 + NUM_OBJECT_CLASSES + 1;
pub const STAGE_WIDTHS: [usize; 3] = [16, 32, 64];
/// Initial objectness bias, a prior of about 12% per cell.
pub const OBJECTNESS_PRIOR: f64 = -2.0;
pub const SCORE_THRESHOLD: f64 = 0.05;
pub const NMS_IOU: f64 = 0.5;
pub const MATCH_IOU: f64 = 0.5;
pub const CLASS_NAMES: [&str; NUM_OBJECT_CLASSES] = ["disc", "square", "triangle"];

#[derive(Clone, Debug)]
pub struct DetHead {
    pub stages: [[Conv2d; 2]; 3],
    pub out: Conv2d,
}

impl DetHead {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, rng: &mut R) -> Self {
        let mut cin = 3;
        let stages = [0, 1, 2].map(|i| {
            let c = STAGE_WIDTHS[i];
            let s = [
                Conv2d::new(store, &format!("{prefix}stage{i}.0"), cin, c, 3, 2, 1, rng),
                Conv2d::new(store, &format!("{prefix}stage{i}.1"), c, c, 3, 1, 1, rng),
            ];
            cin = c;
            s
        });
        let out = Conv2d::pointwise(store, &format!("{prefix}out"), cin, DET_OUTPUTS, rng);
        if let Some(b) = out.bias {
            store.value_mut(b).data_mut()[0] = T::from_f64(OBJECTNESS_PRIOR);
        }
        Self { stages, out }
    }

    /// Raw predictions `(n, 8, H/8, W/8)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut y = g.add_scalar(x, T::from_f64(-0.5));
        for stage in &self.stages {
            for conv in stage {
                let z = conv.forward(g, store, y)?;
                y = g.relu(z);
            }
        }
        self.out.forward(g, store, y)
    }
}

/// Per-cell training targets of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DetTargets<T> {
    pub objectness: Vec<T>,
    pub classes: Vec<usize>,
    pub positive: Vec<T>,
    /// `(n, 4, gh, gw)`, zero outside positive cells.
    pub boxes: Tensor<T>,
    /// `(n, 4, gh, gw)` indicator of positive cells.
    pub box_mask: Tensor<T>,
    pub positives: usize,
}

pub fn encode_targets<T: Scalar>(boxes: &[Vec<GtBox>], gh: usize, gw: usize) -> DetTargets<T> {
    let n = boxes.len();
    let plane = gh * gw;
    let stride = GRID_STRIDE as f64;
    let mut t = DetTargets {
        objectness: vec![T::zero(); n * plane],
        classes: vec![0; n * plane],
        positive: vec![T::zero(); n * plane],
        boxes: Tensor::zeros(&[n, 4, gh, gw]),
        box_mask: Tensor::zeros(&[n, 4, gh, gw]),
        positives: 0,
    };
    for (b, list) in boxes.iter().enumerate() {
        for gt in list {
            let (cx, cy) = gt.center();
            let (cx, cy) = (cx as f64 / stride, cy as f64 / stride);
            let (i, j) = (num_traits::Float::floor(cx) as usize, num_traits::Float::floor(cy) as usize);
            if i >= gw || j >= gh {
                continue;
            }
            let cell = b * plane + j * gw + i;
            if t.positive[cell] != T::zero() {
                continue;
            }
            t.positive[cell] = T::one();
            t.objectness[cell] = T::one();
            t.classes[cell] = gt.class_id;
            t.positives += 1;
            let w = (gt.x1 - gt.x0) as f64 / stride;
            let h = (gt.y1 - gt.y0) as f64 / stride;
            let values = [cx - i as f64, cy - j as f64, num_traits::Float::ln(w), num_traits::Float::ln(h)];
            for (k, v) in values.into_iter().enumerate() {
                let idx = (b * 4 + k) * plane + j * gw + i;
                t.boxes.data_mut()[idx] = T::from_f64(v);
                t.box_mask.data_mut()[idx] = T::one();
            }
        }
    }
    t
}

/// Objectness BCE averaged over all cells, plus class cross-entropy and box
/// L1 averaged over positive cells.
pub fn detection_loss<T: Scalar>(g: &mut Graph<T>, preds: Var, boxes: &[Vec<GtBox>]) -> Result<Var> {
    let [n, c, gh, gw] = g.value(preds).dims4()?;
    if n == 0 {
        return Err(Error::Empty("detection batch"));
    }
    if c != DET_OUTPUTS || n != boxes.len() {
        return Err(Error::InvalidShape {
            op: "detection_loss",
            detail: format!("predictions {:?} for {} images", g.value(preds).shape(), boxes.len()),
        });
    }
    let t = encode_targets::<T>(boxes, gh, gw);
    let ones = vec![T::one(); n * gh * gw];
    let obj = g.slice_channels(preds, 0, 1)?;
    let cells = T::from_f64((n * gh * gw) as f64);
    let mut loss = g.bce_with_logits(obj, &t.objectness, &ones, cells)?;
    if t.positives > 0 {
        let npos = T::from_f64(t.positives as f64);
        let cls = g.slice_channels(preds, 1, NUM_OBJECT_CLASSES)?;
        let ce = g.softmax_cross_entropy(cls, &t.classes, &t.positive, npos)?;
        let bx = g.slice_channels(preds, 1 + NUM_OBJECT_CLASSES, 4)?;
        let target = g.constant(t.boxes);
        let mask = g.constant(t.box_mask);
        let d = g.sub(bx, target)?;
        let d = g.mul(d, mask)?;
        let d = g.abs(d);
        let l1 = g.sum(d);
        let l1 = g.scale(l1, T::one() / npos);
        loss = g.add(loss, ce)?;
        loss = g.add(loss, l1)?;
    }
    Ok(loss)
}

/// A scored box in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + num_traits::Float::exp(-x))
}

/// Decode predictions of every image, keep scores above `threshold` and
/// apply per-class greedy NMS.
pub fn decode<T: Scalar>(preds: &Tensor<T>, image_hw: (usize, usize), threshold: f64) -> Result<Vec<Vec<Detection>>> {
    let [n, c, gh, gw] = preds.dims4()?;
    if c != DET_OUTPUTS {
        return Err(Error::InvalidShape {
            op: "decode",
            detail: format!("{} prediction channels", c),
        });
    }
    let (ih, iw) = (image_hw.0 as f64, image_hw.1 as f64);
    let stride = GRID_STRIDE as f64;
    let mut out = Vec::with_capacity(n);
    for b in 0..n {
        let mut dets = Vec::new();
        for j in 0..gh {
            for i in 0..gw {
                let at = |k: usize| preds.at4(b, k, j, i).to_f64();
                let obj = sigmoid(at(0));
                let logits: Vec<f64> = (0..NUM_OBJECT_CLASSES).map(|k| at(1 + k)).collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|&l| num_traits::Float::exp(l - m)).sum();
                let (class_id, best) = logits
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |(bi, bv), (k, &l)| if l > bv { (k, l) } else { (bi, bv) });
                let score = obj * num_traits::Float::exp(best - m) / z;
                if score < threshold {
                    continue;
                }
                let cx = ((i as f64 + at(4)) * stride).clamp(0.5, iw - 0.5);
                let cy = ((j as f64 + at(5)) * stride).clamp(0.5, ih - 0.5);
                let hw = (stride * num_traits::Float::exp(at(6).clamp(-3.0, 3.0)) / 2.0).max(0.5);
                let hh = (stride * num_traits::Float::exp(at(7).clamp(-3.0, 3.0)) / 2.0).max(0.5);
                dets.push(Detection {
                    class_id,
                    score,
                    x0: (cx - hw).max(0.0),
                    y0: (cy - hh).max(0.0),
                    x1: (cx + hw).min(iw),
                    y1: (cy + hh).min(ih),
                });
            }
        }
        out.push(nms(dets, NMS_IOU));
    }
    Ok(out)
}

pub fn iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let iw = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let ih = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    let inter = iw * ih;
    let union = (a.2 - a.0) * (a.3 - a.1) + (b.2 - b.0) * (b.3 - b.1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn rect(d: &Detection) -> (f64, f64, f64, f64) {
    (d.x0, d.y0, d.x1, d.y1)
}

fn gt_rect(b: &GtBox) -> (f64, f64, f64, f64) {
    (b.x0 as f64, b.y0 as f64, b.x1 as f64, b.y1 as f64)
}

/// Greedy per-class suppression: keep the best box, drop same-class boxes
/// overlapping it by more than `threshold`, repeat.
pub fn nms(mut dets: Vec<Detection>, threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if keep
            .iter()
            .all(|k| k.class_id != d.class_id || iou(rect(k), rect(&d)) <= threshold)
        {
            keep.push(d);
        }
    }
    keep
}

/// All-points average precision at IoU ≥ 0.5 for one class.
///
/// A class with no ground truth scores 1.0 when it also has no predictions
/// and 0.0 otherwise.
pub fn average_precision(preds: &[Vec<Detection>], gts: &[Vec<GtBox>], class_id: usize) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidShape {
            op: "average_precision",
            detail: format!("{} prediction lists for {} images", preds.len(), gts.len()),
        });
    }
    let total_gt: usize = gts.iter().map(|l| l.iter().filter(|b| b.class_id == class_id).count()).sum();
    let mut scored: Vec<(usize, &Detection)> = preds
        .iter()
        .enumerate()
        .flat_map(|(img, l)| l.iter().filter(|d| d.class_id == class_id).map(move |d| (img, d)))
        .collect();
    if total_gt == 0 {
        return Ok(if scored.is_empty() { 1.0 } else { 0.0 });
    }
    scored.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|l| vec![false; l.len()]).collect();
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(scored.len());
    for (k, (img, d)) in scored.iter().enumerate() {
        let best = gts[*img]
            .iter()
            .enumerate()
            .filter(|(gi, b)| b.class_id == class_id && !used[*img][*gi])
            .map(|(gi, b)| (gi, iou(rect(d), gt_rect(b))))
            .fold(None, |acc: Option<(usize, f64)>, (gi, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((gi, v)),
            });
        if let Some((gi, v)) = best {
            if v >= MATCH_IOU {
                used[*img][gi] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / total_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // precision envelope, then area under the recall steps
    for k in (0..points.len().saturating_sub(1)).rev() {
        points[k].1 = points[k].1.max(points[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in points {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// AP50 of each class.
pub fn per_class_ap50(preds: &[Vec<Detection>], gts: &[Vec<GtBox>]) -> Result<[f64; NUM_OBJECT_CLASSES]> {
    let mut out = [0.0; NUM_OBJECT_CLASSES];
    for (c, v) in out.iter_mut().enumerate() {
        *v = average_precision(preds, gts, c)?;
    }
    Ok(out)
}

/// Mean AP50 over the three classes.
pub fn map50(preds: &[Vec<Detection>], gts: &[Vec<GtBox>]) -> Result<f64> {
    Ok(per_class_ap50(preds, gts)?.iter().sum::<f64>() / NUM_OBJECT_CLASSES as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gt(class_id: usize, x0: f32, y0: f32, x1: f32, y1: f32) -> GtBox {
        GtBox { class_id, x0, y0, x1, y1 }
    }

    fn det(class_id: usize, score: f64, b: (f64, f64, f64, f64)) -> Detection {
        Detection {
            class_id,
            score,
            x0: b.0,
            y0: b.1,
            x1: b.2,
            y1: b.3,
        }
    }

    fn scene() -> Vec<Vec<GtBox>> {
        vec![vec![gt(0, 4.0, 6.0, 20.0, 18.0), gt(2, 30.0, 33.0, 45.0, 50.0)], vec![gt(1, 10.0, 10.0, 22.0, 24.0)]]
    }

    /// Saturated logits reproducing `boxes` exactly.
    fn perfect_preds(boxes: &[Vec<GtBox>], grid: usize) -> Tensor<f64> {
        let t = encode_targets::<f64>(boxes, grid, grid);
        let n = boxes.len();
        let plane = grid * grid;
        let mut p = Tensor::zeros(&[n, DET_OUTPUTS, grid, grid]);
        for b in 0..n {
            for cell in 0..plane {
                let pos = t.positive[b * plane + cell] == 1.0;
                p.data_mut()[(b * DET_OUTPUTS) * plane + cell] = if pos { 20.0 } else { -20.0 };
                for k in 0..NUM_OBJECT_CLASSES {
                    let hit = pos && t.classes[b * plane + cell] == k;
                    p.data_mut()[(b * DET_OUTPUTS + 1 + k) * plane + cell] = if hit { 20.0 } else { -20.0 };
                }
                for k in 0..4 {
                    p.data_mut()[(b * DET_OUTPUTS + 4 + k) * plane + cell] = t.boxes.data()[(b * 4 + k) * plane + cell];
                }
            }
        }
        p
    }

    #[test]
    fn saturated_perfect_predictions_have_tiny_loss_and_full_ap() {
        let boxes = scene();
        let p = perfect_preds(&boxes, 8);
        let mut g = Graph::new();
        let v = g.constant(p.clone());
        let loss = detection_loss(&mut g, v, &boxes).unwrap();
        assert!(g.value(loss).data()[0] < 1e-3);
        let dets = decode(&p, (64, 64), SCORE_THRESHOLD).unwrap();
        assert!((map50(&dets, &boxes).unwrap() - 1.0).abs() < 1e-12);
        for d in dets.iter().flatten() {
            assert!(d.x0 < d.x1 && d.y0 < d.y1);
        }
    }

    #[test]
    fn empty_scene_loss_is_objectness_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data = (0..DET_OUTPUTS * 16).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let p = Tensor::from_vec(&[1, DET_OUTPUTS, 4, 4], data).unwrap();
        let mut g = Graph::new();
        let v = g.constant(p.clone());
        let loss = detection_loss(&mut g, v, &[vec![]]).unwrap();
        let expected: f64 = (0..16)
            .map(|i| {
                let x = p.data()[i];
                x.max(0.0) + (1.0 + (-x.abs()).exp()).ln()
            })
            .sum::<f64>()
            / 16.0;
        assert!((g.value(loss).data()[0] - expected).abs() < 1e-12);
        assert!(detection_loss(&mut g, v, &[]).is_err());
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let boxes = vec![vec![gt(0, 4.0, 6.0, 20.0, 18.0), gt(2, 30.0, 33.0, 45.0, 50.0), gt(1, 50.0, 2.0, 62.0, 13.0)]];
        let t = encode_targets::<f64>(&boxes, 8, 8);
        let mut p: Tensor<f64> = Tensor::from_vec(
            &[1, DET_OUTPUTS, 8, 8],
            (0..DET_OUTPUTS * 64).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
        )
        .unwrap();
        // keep box predictions away from the L1 kink
        for k in 0..4 * 64 {
            let target = t.boxes.data()[k];
            p.data_mut()[4 * 64 + k] = target + if k % 2 == 0 { 0.3 } else { -0.3 };
        }
        let mut store = ParamStore::new();
        let report = crate::gradcheck::check_gradients(&mut store, &[p], 1e-4, |g, _, v| detection_loss(g, v[0], &boxes)).unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn ap_hand_examples() {
        let gts = vec![vec![gt(0, 0.0, 0.0, 10.0, 10.0)]];
        assert_eq!(map50(&[vec![]], &gts).unwrap(), 2.0 / 3.0);
        assert_eq!(average_precision(&[vec![]], &gts, 0).unwrap(), 0.0);
        let preds = vec![vec![det(0, 0.9, (0.0, 0.0, 10.0, 10.0)), det(0, 0.8, (30.0, 30.0, 40.0, 40.0))]];
        assert_eq!(average_precision(&preds, &gts, 0).unwrap(), 1.0);
        // spurious box ranked first halves the precision at full recall
        let preds = vec![vec![det(0, 0.7, (0.0, 0.0, 10.0, 10.0)), det(0, 0.8, (30.0, 30.0, 40.0, 40.0))]];
        assert_eq!(average_precision(&preds, &gts, 0).unwrap(), 0.5);
    }

    #[test]
    fn ap_depends_only_on_ranking() {
        let gts = scene();
        let preds = vec![
            vec![det(0, 0.6, (5.0, 6.0, 20.0, 18.0)), det(2, 0.3, (30.0, 30.0, 44.0, 50.0)), det(1, 0.4, (0.0, 0.0, 8.0, 8.0))],
            vec![det(1, 0.2, (10.0, 11.0, 22.0, 24.0)), det(0, 0.5, (40.0, 40.0, 50.0, 50.0))],
        ];
        let a = map50(&preds, &gts).unwrap();
        let scaled: Vec<Vec<Detection>> = preds
            .iter()
            .map(|l| l.iter().map(|d| Detection { score: d.score * 7.5, ..*d }).collect())
            .collect();
        assert_eq!(a, map50(&scaled, &gts).unwrap());
    }

    #[test]
    fn nms_drops_overlapping_same_class() {
        let dets = vec![
            det(0, 0.9, (0.0, 0.0, 10.0, 10.0)),
            det(0, 0.8, (1.0, 1.0, 11.0, 11.0)),
            det(1, 0.7, (1.0, 1.0, 11.0, 11.0)),
        ];
        let kept = nms(dets, 0.5);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[1].class_id, 1);
    }
}
