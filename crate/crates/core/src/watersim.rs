//! Synthetic underwater scenes.
//!
//! Clean scenes are procedurally generated (sea-floor gradients, textured
//! patches, optional geometric objects with exact boxes) and degraded with
//! the single-scatter imaging model
//!
//! ```text
//! I_c = J_c · exp(−β_c z) + B_c · (1 − exp(−β_c z))
//! ```
//!
//! per colour channel `c`, where `β` is the attenuation coefficient (1/m),
//! `B` the backscattered veiling light and `z` the distance in metres.
//!
//! # Water-type presets
//!
//! Nine presets run from clear blue ocean water (type 0) to turbid
//! yellow-brown coastal water (type 8). Red attenuation centres are spaced
//! 0.1/m apart and jitter by at most ±[`BETA_JITTER`], so the sampled `β`
//! boxes of different types never intersect.
//!
//! | type | β (r, g, b) 1/m     | B (r, g, b)        |
//! |------|---------------------|--------------------|
//! | 0    | 0.30, 0.10, 0.06    | 0.04, 0.22, 0.62   |
//! | 1    | 0.40, 0.13, 0.09    | 0.05, 0.38, 0.70   |
//! | 2    | 0.50, 0.16, 0.13    | 0.05, 0.55, 0.65   |
//! | 3    | 0.60, 0.19, 0.19    | 0.08, 0.62, 0.48   |
//! | 4    | 0.70, 0.22, 0.27    | 0.12, 0.65, 0.30   |
//! | 5    | 0.80, 0.26, 0.37    | 0.28, 0.62, 0.20   |
//! | 6    | 0.90, 0.30, 0.50    | 0.45, 0.60, 0.16   |
//! | 7    | 1.00, 0.36, 0.65    | 0.58, 0.52, 0.18   |
//! | 8    | 1.10, 0.44, 0.85    | 0.52, 0.38, 0.24   |
//!
//! Distances are drawn uniformly from [`DEPTH_RANGE`].

use alloc::vec;
use alloc::vec::Vec;
use alloc::format;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::tensor::{Scalar, Tensor};

pub const NUM_WATER_TYPES: usize = 9;
pub const NUM_OBJECT_CLASSES: usize = 3;

/// `(β, B)` centre of each water type.
pub const PRESETS: [([f64; 3], [f64; 3]); NUM_WATER_TYPES] = [
    ([0.30, 0.10, 0.06], [0.04, 0.22, 0.62]),
    ([0.40, 0.13, 0.09], [0.05, 0.38, 0.70]),
    ([0.50, 0.16, 0.13], [0.05, 0.55, 0.65]),
    ([0.60, 0.19, 0.19], [0.08, 0.62, 0.48]),
    ([0.70, 0.22, 0.27], [0.12, 0.65, 0.30]),
    ([0.80, 0.26, 0.37], [0.28, 0.62, 0.20]),
    ([0.90, 0.30, 0.50], [0.45, 0.60, 0.16]),
    ([1.00, 0.36, 0.65], [0.58, 0.52, 0.18]),
    ([1.10, 0.44, 0.85], [0.52, 0.38, 0.24]),
];

/// Maximum absolute deviation of each `β_c` from its preset centre.
pub const BETA_JITTER: f64 = 0.01;
/// Maximum absolute deviation of each `B_c` from its preset centre.
pub const BACKLIGHT_JITTER: f64 = 0.03;
/// Uniform range of the scene distance `z`, metres.
pub const DEPTH_RANGE: (f64, f64) = (3.0, 6.0);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationParams {
    pub water_type: usize,
    pub beta: [f64; 3],
    pub backlight: [f64; 3],
    pub depth: f64,
}

impl DegradationParams {
    pub fn validate(&self) -> Result<()> {
        if self.water_type >= NUM_WATER_TYPES {
            return Err(Error::OutOfRange(format!("water type {}", self.water_type)));
        }
        let ok = self.beta.iter().all(|b| b.is_finite() && *b >= 0.0)
            && self.backlight.iter().all(|b| (0.0..=1.0).contains(b))
            && self.depth.is_finite()
            && self.depth >= 0.0;
        if !ok {
            return Err(Error::OutOfRange(format!("degradation parameters {:?}", self)));
        }
        Ok(())
    }

    /// Per-channel transmission `exp(−β_c z)`.
    pub fn transmission(&self) -> [f64; 3] {
        self.beta.map(|b| num_traits::Float::exp(-b * self.depth))
    }
}

/// Ground-truth object: class and pixel-edge box `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    pub class_id: usize,
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
}

impl GtBox {
    pub fn center(&self) -> (f32, f32) {
        ((self.x0 + self.x1) * 0.5, (self.y0 + self.y1) * 0.5)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub clean: ImageTensor<f32>,
    pub degraded: ImageTensor<f32>,
    pub water_type: usize,
    pub boxes: Vec<GtBox>,
}

/// Apply the attenuation + backscatter model to every image of the batch.
pub fn degrade<T: Scalar>(clean: &ImageTensor<T>, p: &DegradationParams) -> Result<ImageTensor<T>> {
    p.validate()?;
    let t = p.transmission();
    let [n, c, h, w] = clean.tensor().dims4()?;
    let plane = h * w;
    let mut out = clean.tensor().clone();
    for b in 0..n {
        for ch in 0..c {
            let (tc, bc) = (t[ch], p.backlight[ch]);
            let veil = bc * (1.0 - tc);
            for v in &mut out.data_mut()[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                let j = v.to_f64();
                *v = T::from_f64((j * tc + veil).clamp(0.0, 1.0));
            }
        }
    }
    ImageTensor::new(out)
}

/// Draw parameters for `water_type` with the default within-type jitter.
pub fn sample_params<R: Rng>(water_type: usize, rng: &mut R) -> Result<DegradationParams> {
    sample_params_with_jitter(water_type, 1.0, rng)
}

/// As [`sample_params`], with the jitter amplitudes scaled by `jitter`
/// (clamped to `[0, 1]`; 0 returns the preset centre exactly).
pub fn sample_params_with_jitter<R: Rng>(water_type: usize, jitter: f64, rng: &mut R) -> Result<DegradationParams> {
    let (beta_c, back_c) = PRESETS
        .get(water_type)
        .ok_or_else(|| Error::OutOfRange(format!("water type {} not in [0, 8]", water_type)))?;
    let jitter = jitter.clamp(0.0, 1.0);
    let mut sym = |amp: f64| (rng.random::<f64>() * 2.0 - 1.0) * amp * jitter;
    let beta = beta_c.map(|b| b + sym(BETA_JITTER));
    let backlight = back_c.map(|b| (b + sym(BACKLIGHT_JITTER)).clamp(0.0, 1.0));
    let depth = DEPTH_RANGE.0 + rng.random::<f64>() * (DEPTH_RANGE.1 - DEPTH_RANGE.0);
    Ok(DegradationParams {
        water_type,
        beta,
        backlight,
        depth,
    })
}

fn sq(v: f64) -> f64 {
    v * v
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + rng.random::<f64>() * (hi - lo)
}

/// Procedural clean scene of side `size`; with `with_objects`, 1–5
/// non-overlapping discs (class 0), squares (1) and triangles (2).
pub fn synth_clean_scene<R: Rng>(rng: &mut R, size: usize, with_objects: bool) -> Result<(ImageTensor<f32>, Vec<GtBox>)> {
    if size < 16 || size % 8 != 0 {
        return Err(Error::InvalidShape {
            op: "synth_clean_scene",
            detail: format!("size {} must be >= 16 and divisible by 8", size),
        });
    }
    let s = size;
    let sf = s as f64;
    let mut img = vec![[0.0f64; 3]; s * s];

    // sea-floor base: sandy or rocky tone with gentle gradients
    let level = uniform(rng, 0.35, 0.7);
    let tint = [uniform(rng, -0.02, 0.08), uniform(rng, -0.03, 0.03), uniform(rng, -0.08, 0.02)];
    let grad_y = uniform(rng, -0.15, 0.15);
    let grad_x = uniform(rng, -0.08, 0.08);
    for y in 0..s {
        for x in 0..s {
            let (u, v) = ((x as f64 + 0.5) / sf - 0.5, (y as f64 + 0.5) / sf - 0.5);
            let base = level + grad_x * u + grad_y * v;
            img[y * s + x] = [base + tint[0], base + tint[1], base + tint[2]];
        }
    }

    // textured patches (rocks, weed beds)
    for _ in 0..rng.random_range(3..=6) {
        let (cx, cy) = (uniform(rng, 0.0, sf), uniform(rng, 0.0, sf));
        let (rx, ry) = (uniform(rng, 0.08, 0.3) * sf, uniform(rng, 0.06, 0.25) * sf);
        let shift = [uniform(rng, -0.18, 0.18), uniform(rng, -0.18, 0.18), uniform(rng, -0.18, 0.18)];
        let (fx, fy) = (uniform(rng, 0.2, 1.2), uniform(rng, 0.2, 1.2));
        let phase = uniform(rng, 0.0, core::f64::consts::TAU);
        let amp = uniform(rng, 0.02, 0.08);
        for y in 0..s {
            for x in 0..s {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let d = sq((px - cx) / rx) + sq((py - cy) / ry);
                if d <= 1.0 {
                    let falloff = 1.0 - d;
                    let tex = amp * num_traits::Float::sin(fx * px + fy * py + phase);
                    for c in 0..3 {
                        img[y * s + x][c] += falloff * shift[c] + tex;
                    }
                }
            }
        }
    }

    // fine grain
    for p in img.iter_mut() {
        let g = uniform(rng, -0.015, 0.015);
        p.iter_mut().for_each(|v| *v += g);
    }

    let mut boxes: Vec<GtBox> = Vec::new();
    if with_objects {
        let target = rng.random_range(1..=5usize);
        let (min_side, max_side) = ((s / 6).max(4), (s / 3).max(6));
        let mut attempts = 0;
        while boxes.len() < target && attempts < 200 {
            attempts += 1;
            let class_id = rng.random_range(0..NUM_OBJECT_CLASSES);
            let side = rng.random_range(min_side..=max_side);
            let x0 = rng.random_range(0..=s - side);
            let y0 = rng.random_range(0..=s - side);
            let candidate = (x0 as f32, y0 as f32, (x0 + side) as f32, (y0 + side) as f32);
            let clear = boxes.iter().all(|b| {
                candidate.0 >= b.x1 + 2.0 || b.x0 >= candidate.2 + 2.0 || candidate.1 >= b.y1 + 2.0 || b.y0 >= candidate.3 + 2.0
            });
            if !clear {
                continue;
            }
            let hue = uniform(rng, 0.0, 1.0);
            let colour = bright_colour(hue, uniform(rng, 0.75, 1.0));
            if let Some(b) = draw_shape(&mut img, s, class_id, x0, y0, side, colour) {
                boxes.push(b);
            }
        }
    }

    let data = (0..3)
        .flat_map(|c| img.iter().map(move |p| p[c].clamp(0.0, 1.0) as f32))
        .collect::<Vec<_>>();
    let t = Tensor::from_vec(&[1, 3, s, s], data)?;
    Ok((ImageTensor::new(t)?, boxes))
}

fn bright_colour(hue: f64, value: f64) -> [f64; 3] {
    // saturated HSV colour, saturation 0.85
    let h6 = hue * 6.0;
    let f = h6 - num_traits::Float::floor(h6);
    let (v, s) = (value, 0.85);
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match num_traits::Float::floor(h6) as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Rasterise a shape inside the `side×side` cell at `(x0, y0)`; returns the
/// tight box of the painted pixels.
fn draw_shape(img: &mut [[f64; 3]], s: usize, class_id: usize, x0: usize, y0: usize, side: usize, colour: [f64; 3]) -> Option<GtBox> {
    let sidef = side as f64;
    let (cx, cy) = (x0 as f64 + sidef / 2.0, y0 as f64 + sidef / 2.0);
    let inside = |px: f64, py: f64| -> bool {
        match class_id {
            0 => sq(px - cx) + sq(py - cy) <= sq(sidef / 2.0),
            1 => true,
            _ => {
                // apex at top centre, base along the bottom edge
                let (ax, ay) = (cx, y0 as f64);
                let (bx, by) = (x0 as f64, (y0 + side) as f64);
                let (qx, qy) = ((x0 + side) as f64, (y0 + side) as f64);
                let e = |x1: f64, y1: f64, x2: f64, y2: f64| (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1);
                let (d1, d2, d3) = (e(ax, ay, bx, by), e(bx, by, qx, qy), e(qx, qy, ax, ay));
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
        }
    };
    let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0, 0);
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            if inside(x as f64 + 0.5, y as f64 + 0.5) {
                img[y * s + x] = colour;
                bx0 = bx0.min(x);
                by0 = by0.min(y);
                bx1 = bx1.max(x + 1);
                by1 = by1.max(y + 1);
            }
        }
    }
    (bx0 < bx1 && by0 < by1).then(|| GtBox {
        class_id,
        x0: bx0 as f32,
        y0: by0 as f32,
        x1: bx1 as f32,
        y1: by1 as f32,
    })
}

/// Random stream for sample `index` of a corpus seeded with `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}

/// One paired sample; a pure function of `(seed, index, water_type, size,
/// with_objects)`, so samples can be produced in any order.
pub fn generate_sample(seed: u64, index: u64, water_type: usize, size: usize, with_objects: bool) -> Result<SceneSample> {
    let mut rng = sample_rng(seed, index);
    let (clean, boxes) = synth_clean_scene(&mut rng, size, with_objects)?;
    let params = sample_params(water_type, &mut rng)?;
    let degraded = degrade(&clean, &params)?;
    Ok(SceneSample {
        clean,
        degraded,
        water_type,
        boxes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|sp| sp.name() == s)
    }
}

/// Planned corpus entry: a global sample index with its split and type.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlannedSample {
    pub index: u64,
    pub split: Split,
    pub water_type: usize,
}

/// Balanced plan: within each split, sample `i` gets water type `i mod 9`.
/// Global indices are consecutive across train, val, test, so splits never
/// share a random stream.
pub fn corpus_plan(n_train: usize, n_val: usize, n_test: usize) -> Result<Vec<PlannedSample>> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Empty("corpus split counts must be positive"));
    }
    let mut out = Vec::with_capacity(n_train + n_val + n_test);
    let mut index = 0u64;
    for (split, n) in [(Split::Train, n_train), (Split::Val, n_val), (Split::Test, n_test)] {
        for i in 0..n {
            out.push(PlannedSample {
                index,
                split,
                water_type: i % NUM_WATER_TYPES,
            });
            index += 1;
        }
    }
    Ok(out)
}

/// Generate a whole corpus in memory, split by split.
pub fn generate_in_memory(
    n_train: usize,
    n_val: usize,
    n_test: usize,
    size: usize,
    with_objects: bool,
    seed: u64,
) -> Result<[Vec<SceneSample>; 3]> {
    let mut splits: [Vec<SceneSample>; 3] = Default::default();
    for p in corpus_plan(n_train, n_val, n_test)? {
        let sample = generate_sample(seed, p.index, p.water_type, size, with_objects)?;
        splits[p.split as usize].push(sample);
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(value: f32) -> ImageTensor<f32> {
        ImageTensor::new(Tensor::full(&[1, 3, 16, 16], value)).unwrap()
    }

    #[test]
    fn zero_attenuation_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (clean, _) = synth_clean_scene(&mut rng, 32, true).unwrap();
        let p = DegradationParams {
            water_type: 4,
            beta: [0.0; 3],
            backlight: [0.9, 0.1, 0.5],
            depth: 7.0,
        };
        assert_eq!(degrade(&clean, &p).unwrap(), clean);
    }

    #[test]
    fn far_field_is_backlight() {
        let p = DegradationParams {
            water_type: 0,
            beta: [0.3, 0.1, 0.05],
            backlight: [0.2, 0.5, 0.7],
            depth: 1e6,
        };
        let out = degrade(&solid(0.9), &p).unwrap();
        for c in 0..3 {
            let v = out.tensor().at4(0, c, 5, 5) as f64;
            assert!((v - p.backlight[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn closed_form_pixel() {
        // 0.8 e^-1 + 0.2 (1 - e^-1), evaluated independently
        let expected: f64 = 0.8 * 0.36787944117144233 + 0.2 * (1.0 - 0.36787944117144233);
        assert!((expected - 0.420728).abs() < 1e-6);
        let p = DegradationParams {
            water_type: 2,
            beta: [0.5; 3],
            backlight: [0.2; 3],
            depth: 2.0,
        };
        let clean = ImageTensor::<f64>::new(Tensor::full(&[1, 3, 16, 16], 0.8)).unwrap();
        let out = degrade(&clean, &p).unwrap();
        assert!((out.tensor().data()[0] - 0.420728).abs() < 1e-5);
    }

    #[test]
    fn zero_jitter_returns_centres() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in 0..NUM_WATER_TYPES {
            let p = sample_params_with_jitter(t, 0.0, &mut rng).unwrap();
            assert_eq!(p.beta, PRESETS[t].0);
            assert_eq!(p.backlight, PRESETS[t].1);
            assert!(p.depth >= DEPTH_RANGE.0 && p.depth <= DEPTH_RANGE.1);
        }
    }

    #[test]
    fn water_type_out_of_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_params(9, &mut rng).is_err());
    }

    #[test]
    fn sampled_beta_boxes_are_disjoint_between_types() {
        // exhaustive over 10^4 draws per type: per-type red-β intervals never meet
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ranges = [(f64::MAX, f64::MIN); NUM_WATER_TYPES];
        for (t, range) in ranges.iter_mut().enumerate() {
            for _ in 0..10_000 {
                let p = sample_params(t, &mut rng).unwrap();
                range.0 = range.0.min(p.beta[0]);
                range.1 = range.1.max(p.beta[0]);
            }
        }
        for a in 0..NUM_WATER_TYPES {
            for b in a + 1..NUM_WATER_TYPES {
                let (ra, rb) = (ranges[a], ranges[b]);
                assert!(ra.1 < rb.0 || rb.1 < ra.0, "types {a} and {b} overlap: {ra:?} {rb:?}");
            }
        }
    }

    #[test]
    fn scenes_are_deterministic_and_boxes_valid() {
        let a = synth_clean_scene(&mut ChaCha8Rng::seed_from_u64(0), 64, true).unwrap();
        let b = synth_clean_scene(&mut ChaCha8Rng::seed_from_u64(0), 64, true).unwrap();
        assert_eq!(a, b);
        assert!((1..=5).contains(&a.1.len()));
        for bx in &a.1 {
            assert!(bx.x0 >= 0.0 && bx.y0 >= 0.0 && bx.x1 <= 64.0 && bx.y1 <= 64.0);
            assert!(bx.x0 < bx.x1 && bx.y0 < bx.y1);
        }
        let (_, none) = synth_clean_scene(&mut ChaCha8Rng::seed_from_u64(0), 64, false).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn plan_is_balanced() {
        let plan = corpus_plan(90, 18, 9).unwrap();
        assert_eq!(plan.len(), 117);
        for t in 0..NUM_WATER_TYPES {
            let n = plan.iter().filter(|p| p.split == Split::Train && p.water_type == t).count();
            assert_eq!(n, 10);
        }
        assert!(corpus_plan(0, 1, 1).is_err());
    }
}
