//! PNG decode/encode and bilinear resizing for `[3, H, W]` images in `[0, 1]`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Decoder, Encoder, Transformations};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Channel-first RGB image with intensities in `[0, 1]`.
pub type ImageTensor = Tensor<f32>;

fn image_err(path: &Path, reason: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Decodes any 8/16-bit gray, gray-alpha, RGB, RGBA or palette PNG to `[3, H, W]`.
/// Gray sources are replicated across the three channels; alpha is dropped.
pub fn read_png(path: &Path) -> Result<ImageTensor> {
    let file = File::open(path).map_err(|e| image_err(path, e))?;
    let mut decoder = Decoder::new(BufReader::new(file));
    decoder.set_transformations(Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => return Err(image_err(path, "palette was not expanded")),
    };
    let row = info.line_size;
    let plane = h * w;
    let mut out = vec![0f32; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let px = &buf[y * row + x * channels..];
            for c in 0..3 {
                let src = if channels < 3 { 0 } else { c };
                out[c * plane + y * w + x] = px[src] as f32 / 255.0;
            }
        }
    }
    Tensor::new(&[3, h, w], out)
}

/// Writes an image as 8-bit RGB, rounding to the nearest level.
pub fn write_png(path: &Path, img: &ImageTensor) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("write_png", format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            bytes.push(to_level(img.data()[c * plane + i]));
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(ColorType::Rgb);
    enc.set_depth(BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(&bytes).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}

pub fn to_level(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Quantizes to the 8-bit grid a PNG round trip would produce.
pub fn quantize(img: &ImageTensor) -> ImageTensor {
    img.map(|v| to_level(v) as f32 / 255.0)
}

/// Bilinear resize to `size x size` with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &ImageTensor, size: usize) -> ImageTensor {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if h == size && w == size {
        return img.clone();
    }
    let axis = |n_in: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / size as f64;
        (0..size)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let (ys, xs) = (axis(h), axis(w));
    let d = img.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        let base = ch * h * w;
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let p = |y: usize, x: usize| d[base + y * w + x];
                let top = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * fx;
                let bottom = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
    }
    Tensor::new(&[c, size, size], out).expect("resize extents")
}
