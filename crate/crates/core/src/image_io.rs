//! 8-bit RGB files <-> `[0, 1]` float tensors of shape (1, 3, H, W).
//!
//! PNG goes through the `image` crate; binary PPM (P6, maxval 255) is
//! handled here so test fixtures can be written by hand.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

pub fn decode_image(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.starts_with(PNG_MAGIC) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else {
        let head = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        Err(Error::UnsupportedFormat(format!("unrecognised magic {head:?}")))
    }
}

fn from_rgb_bytes(w: usize, h: usize, rgb: &[u8]) -> Result<Tensor<f32>> {
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(Shape::new(1, 3, h, w), data)
}

fn decode_png(bytes: &[u8]) -> Result<Tensor<f32>> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| Error::Png(e.to_string()))?;
    match img {
        image::DynamicImage::ImageRgb8(_) | image::DynamicImage::ImageRgba8(_) => {}
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "PNG color type {:?}; only 8-bit RGB/RGBA are accepted",
                other.color()
            )))
        }
    }
    let rgb = img.to_rgb8();
    from_rgb_bytes(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())
}

/// Parse `P6 <w> <h> <maxval>` and return (w, h, data offset).
fn parse_ppm_header(bytes: &[u8]) -> Result<(usize, usize, usize)> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let digits = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        *field = digits
            .parse()
            .map_err(|_| Error::CorruptHeader(format!("PPM header field {} is not a number", i + 1)))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::CorruptHeader("PPM header must end with one whitespace byte".into()));
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(Error::CorruptHeader(format!("PPM dimensions {w}x{h}")));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!("PPM maxval {maxval}; only 255 is accepted")));
    }
    Ok((w, h, pos + 1))
}

fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (w, h, offset) = parse_ppm_header(bytes)?;
    let expected = w * h * 3;
    let pixels = &bytes[offset..];
    if pixels.len() < expected {
        return Err(Error::TruncatedPixels {
            expected,
            found: pixels.len(),
        });
    }
    from_rgb_bytes(w, h, &pixels[..expected])
}

/// `round(clamp(v, 0, 1) * 255)` with halves rounded up.
pub fn quantize(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) as f64 };
    (v * 255.0 + 0.5).floor() as u8
}

fn to_rgb_bytes(t: &Tensor<f32>) -> Result<(usize, usize, Vec<u8>)> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::InvalidShape(format!("expected a 1x3xHxW image, got {s}")));
    }
    let plane = s.plane();
    let d = t.data();
    let mut out = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push(quantize(d[c * plane + i]));
        }
    }
    Ok((s.w, s.h, out))
}

pub fn encode_ppm(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let (w, h, rgb) = to_rgb_bytes(t)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&rgb);
    Ok(out)
}

/// Write by extension: `.ppm` or `.png`.
pub fn save_image(t: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    let bytes = match ext.as_deref() {
        Some("ppm") => encode_ppm(t)?,
        Some("png") => {
            let (w, h, rgb) = to_rgb_bytes(t)?;
            let mut buf = std::io::Cursor::new(Vec::new());
            image::RgbImage::from_raw(w as u32, h as u32, rgb)
                .expect("buffer matches dimensions")
                .write_to(&mut buf, image::ImageFormat::Png)
                .map_err(|e| Error::Png(e.to_string()))?;
            buf.into_inner()
        }
        _ => {
            return Err(Error::UnsupportedFormat(format!(
                "cannot infer output format from {}",
                path.display()
            )))
        }
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Source sample positions and weights for half-pixel-centre bilinear
/// resampling of one axis from `input` to `output` samples.
fn axis_weights(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Scale the shorter side to `target` (bilinear, half-pixel centres), then
/// centre-crop to `target x target`.
pub fn resize_center(t: &Tensor<f32>, target: usize) -> Result<Tensor<f32>> {
    let s = t.shape();
    if s.h < 2 || s.w < 2 {
        return Err(Error::DegenerateImage { h: s.h, w: s.w });
    }
    if target < 16 {
        return Err(Error::Config(format!("resize target {target} must be >= 16")));
    }
    let short = s.h.min(s.w);
    let scaled = |side: usize| {
        if side == short {
            target
        } else {
            ((side as f64 * target as f64 / short as f64).round() as usize).max(target)
        }
    };
    let (rh, rw) = (scaled(s.h), scaled(s.w));
    let (oy, ox) = ((rh - target) / 2, (rw - target) / 2);
    let ys = &axis_weights(s.h, rh)[oy..oy + target];
    let xs = &axis_weights(s.w, rw)[ox..ox + target];

    let d = t.data();
    let mut out = Vec::with_capacity(s.n * s.c * target * target);
    for ch in d.chunks_exact(s.plane()) {
        for &(y0, y1, fy) in ys {
            for &(x0, x1, fx) in xs {
                let at = |y: usize, x: usize| ch[y * s.w + x] as f64;
                let top = (1.0 - fx) * at(y0, x0) + fx * at(y0, x1);
                let bottom = (1.0 - fx) * at(y1, x0) + fx * at(y1, x1);
                out.push(((1.0 - fy) * top + fy * bottom) as f32);
            }
        }
    }
    Tensor::new(Shape::new(s.n, s.c, target, target), out)
}
