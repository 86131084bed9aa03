//! 8-bit RGB PNG reading and writing.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ia2u_core::{ImageTensor, Tensor};

use crate::error::{Error, Result};

/// Quantise a `[0, 1]` value to 8 bits (round half up).
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5) as u8
}

/// Interleaved RGB bytes of batch entry `index`.
pub fn to_rgb8(img: &ImageTensor, index: usize) -> Vec<u8> {
    let (h, w) = (img.height(), img.width());
    let plane = h * w;
    let data = &img.tensor().data()[index * 3 * plane..(index + 1) * 3 * plane];
    (0..plane).flat_map(|p| (0..3).map(move |c| to_u8(data[c * plane + p]))).collect()
}

/// A `1×3×h×w` image from interleaved RGB bytes.
pub fn from_rgb8(bytes: &[u8], h: usize, w: usize) -> Result<ImageTensor> {
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for (p, px) in bytes.chunks_exact(3).take(plane).enumerate() {
        for c in 0..3 {
            data[c * plane + p] = px[c] as f32 / 255.0;
        }
    }
    Ok(ImageTensor::new(Tensor::from_vec(&[1, 3, h, w], data)?)?)
}

pub fn write_rgb(path: &Path, rgb: &[u8], h: usize, w: usize) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e))?;
    writer.write_image_data(rgb).map_err(|e| Error::format(path, e))?;
    writer.finish().map_err(|e| Error::format(path, e))
}

/// Write batch entry 0 of `img`.
pub fn write_png(path: &Path, img: &ImageTensor) -> Result<()> {
    write_rgb(path, &to_rgb8(img, 0), img.height(), img.width())
}

/// Read an 8-bit PNG as a `1×3×h×w` image. Gray and alpha channels are
/// expanded or dropped.
pub fn read_png(path: &Path) -> Result<ImageTensor> {
    let file = File::open(path).map_err(Error::io(path))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::format(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf.to_vec(),
        png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&v| [v, v, v]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err(Error::format(path, "unexpanded palette image")),
    };
    from_rgb8(&rgb, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantisation_round_trips_every_level() {
        for v in 0..=255u8 {
            assert_eq!(to_u8(v as f32 / 255.0), v);
        }
    }

    #[test]
    fn png_round_trip_is_exact_on_8_bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let bytes: Vec<u8> = (0..16 * 24 * 3).map(|i| (i * 37 % 256) as u8).collect();
        let img = from_rgb8(&bytes, 16, 24).unwrap();
        let p = dir.path().join("a.png");
        write_png(&p, &img).unwrap();
        let back = read_png(&p).unwrap();
        assert_eq!(back, img);
        assert_eq!(to_rgb8(&back, 0), bytes);
    }
}
