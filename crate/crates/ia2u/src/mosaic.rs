//! Channel mosaics of feature maps.

use ia2u_core::Tensor;

/// Tiles every channel of batch entry 0 into a near-square grid, each tile
/// min-max scaled to gray. Returns RGB bytes with the mosaic height and width.
pub fn feature_mosaic(f: &Tensor<f32>) -> (Vec<u8>, usize, usize) {
    let s = f.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let cols = (c as f64).sqrt().ceil() as usize;
    let rows = c.div_ceil(cols);
    let (mh, mw) = (rows * h, cols * w);
    let mut out = vec![0u8; mh * mw * 3];
    for ch in 0..c {
        let plane = &f.data()[ch * h * w..(ch + 1) * h * w];
        let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
        let (ty, tx) = (ch / cols * h, ch % cols * w);
        for y in 0..h {
            for x in 0..w {
                let v = ((plane[y * w + x] - lo) * scale).round() as u8;
                let o = ((ty + y) * mw + tx + x) * 3;
                out[o..o + 3].fill(v);
            }
        }
    }
    (out, mh, mw)
}
