//! Binary PPM (P6, maxval 255) decoding and bilinear resizing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PpmImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB bytes, row-major.
    pub pixels: Vec<u8>,
}

impl PpmImage {
    /// Channels-first tensor in [0, 1].
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (h, w) = (self.height, self.width);
        Tensor::from_fn(vec![3, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            self.pixels[p * 3 + c] as f32 / 255.0
        })
    }

    /// Quantizes a `[3, H, W]` tensor, clamping to [0, 1].
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let &[3, h, w] = t.shape() else {
            return Err(Error::invalid("ppm", format!("expected [3, H, W], got {:?}", t.shape())));
        };
        let mut pixels = vec![0u8; h * w * 3];
        for (i, &v) in t.data().iter().enumerate() {
            let (c, p) = (i / (h * w), i % (h * w));
            pixels[p * 3 + c] = (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        Ok(Self {
            width: w,
            height: h,
            pixels,
        })
    }
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<PpmImage> {
    let bad = |detail: String| Error::Image {
        path: path.to_path_buf(),
        detail,
    };
    let mut pos = 0;
    if header_token(bytes, &mut pos) != Some(b"P6") {
        return Err(bad("missing P6 magic".into()));
    }
    let mut num = |what: &str| -> Result<usize> {
        let tok = header_token(bytes, &mut pos).ok_or_else(|| bad(format!("header ends before {what}")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("invalid {what} {:?}", String::from_utf8_lossy(tok))))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if width == 0 || height == 0 {
        return Err(bad(format!("zero dimension {width}x{height}")));
    }
    if maxval != 255 {
        return Err(bad(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("truncated header".into()));
    }
    pos += 1;
    let need = width * height * 3;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(bad(format!("truncated payload: {} of {need} bytes", raster.len())));
    }
    Ok(PpmImage {
        width,
        height,
        pixels: raster[..need].to_vec(),
    })
}

pub fn read_ppm(path: &Path) -> Result<PpmImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

pub fn encode_ppm(img: &PpmImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn write_ppm(path: &Path, img: &PpmImage) -> Result<()> {
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

/// Bilinear resize of `[C, H, W]` with half-pixel centers and edge clamping.
pub fn resize_bilinear<T: Real>(t: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let &[c, h, w] = t.shape() else {
        return Err(Error::invalid("resize_bilinear", format!("expected [C, H, W], got {:?}", t.shape())));
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize_bilinear", "output size must be positive"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(t.clone());
    }
    let taps = |inp: usize, out: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                (i0, (i0 + 1).min(inp - 1), src - i0 as f64)
            })
            .collect()
    };
    let (ys, xs) = (taps(h, out_h), taps(w, out_w));
    let src = t.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let at = |y: usize, x: usize| plane[y * w + x].to_f64_lossy();
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(T::from_f64_lossy(top * (1.0 - fy) + bottom * fy));
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Reads a PPM into a `[3, H, W]` tensor in [0, 1], resizing when `size` is given.
pub fn load_image(path: &Path, size: Option<(usize, usize)>) -> Result<Tensor<f32>> {
    let t = read_ppm(path)?.to_tensor();
    match size {
        Some((h, w)) => resize_bilinear(&t, h, w),
        None => Ok(t),
    }
}
