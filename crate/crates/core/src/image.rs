//! Grayscale rasters, gradients and scale pyramids.

use std::f64::consts::TAU;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest side any pyramid level may have (one dense patch).
pub const MIN_LEVEL_SIDE: usize = 24;

/// Single-channel image with intensities in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter("image sides must be positive".into()));
        }
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                actual: pixels.len(),
            });
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidParameter(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(GrayImage { width, height, pixels })
    }

    /// Builds an image from a function of `(x, y)`, clamping into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let v = f(x, y);
                pixels.push(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
            }
        }
        GrayImage::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Rotates by 180 degrees.
    pub fn rotate180(&self) -> GrayImage {
        let mut pixels = self.pixels.clone();
        pixels.reverse();
        GrayImage {
            width: self.width,
            height: self.height,
            pixels,
        }
    }
}

/// Per-pixel gradient magnitude and orientation in `[0, 2π)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub width: usize,
    pub height: usize,
    pub magnitude: Vec<f64>,
    pub orientation: Vec<f64>,
}

/// Derivative along one axis: central in the interior, one-sided at borders.
#[inline]
fn diff(prev: f64, here: f64, next: f64, at_start: bool, at_end: bool) -> f64 {
    if at_start {
        next - here
    } else if at_end {
        here - prev
    } else {
        0.5 * (next - prev)
    }
}

pub(crate) fn wrap_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    if t >= TAU {
        0.0
    } else {
        t
    }
}

pub fn compute_gradients(img: &GrayImage) -> Result<GradientField> {
    let (w, h) = (img.width, img.height);
    if w < 3 || h < 3 {
        return Err(Error::DimensionTooSmall {
            width: w,
            height: h,
            min_width: 3,
            min_height: 3,
        });
    }
    let mut magnitude = Vec::with_capacity(w * h);
    let mut orientation = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let here = img.get(x, y);
            let left = if x > 0 { img.get(x - 1, y) } else { here };
            let right = if x + 1 < w { img.get(x + 1, y) } else { here };
            let up = if y > 0 { img.get(x, y - 1) } else { here };
            let down = if y + 1 < h { img.get(x, y + 1) } else { here };
            let dx = diff(left, here, right, x == 0, x + 1 == w);
            let dy = diff(up, here, down, y == 0, y + 1 == h);
            magnitude.push((dx * dx + dy * dy).sqrt());
            orientation.push(wrap_angle(dy.atan2(dx)));
        }
    }
    Ok(GradientField {
        width: w,
        height: h,
        magnitude,
        orientation,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalePyramid {
    pub levels: Vec<GrayImage>,
    pub scale_factors: Vec<f64>,
}

impl ScalePyramid {
    pub fn original(&self) -> &GrayImage {
        &self.levels[0]
    }
}

/// Dimensions of pyramid level `level`: `round(side · factor^level)`.
pub fn level_dims(width: usize, height: usize, factor: f64, level: usize) -> (usize, usize) {
    let s = factor.powi(level as i32);
    (
        (width as f64 * s).round() as usize,
        (height as f64 * s).round() as usize,
    )
}

pub fn build_pyramid(img: &GrayImage, levels: usize, factor: f64) -> Result<ScalePyramid> {
    if levels == 0 {
        return Err(Error::InvalidParameter("pyramid needs at least one level".into()));
    }
    if levels > 1 && !(factor > 0.0 && factor < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "pyramid factor {factor} must lie in (0, 1)"
        )));
    }
    let mut out = ScalePyramid {
        levels: vec![img.clone()],
        scale_factors: vec![1.0],
    };
    for level in 1..levels {
        let (w, h) = level_dims(img.width, img.height, factor, level);
        if w < MIN_LEVEL_SIDE || h < MIN_LEVEL_SIDE {
            return Err(Error::DimensionTooSmall {
                width: w,
                height: h,
                min_width: MIN_LEVEL_SIDE,
                min_height: MIN_LEVEL_SIDE,
            });
        }
        out.levels.push(resize_bilinear(img, w, h));
        out.scale_factors.push(factor.powi(level as i32));
    }
    Ok(out)
}

/// Bilinear resampling with pixel-center alignment and edge clamping.
pub fn resize_bilinear(img: &GrayImage, width: usize, height: usize) -> GrayImage {
    let sx = img.width as f64 / width as f64;
    let sy = img.height as f64 / height as f64;
    let max_x = (img.width - 1) as f64;
    let max_y = (img.height - 1) as f64;
    let mut pixels = Vec::with_capacity(width * height);
    for y in 0..height {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let ty = fy - y0 as f64;
        for x in 0..width {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let tx = fx - x0 as f64;
            let top = img.get(x0, y0) * (1.0 - tx) + img.get(x1, y0) * tx;
            let bottom = img.get(x0, y1) * (1.0 - tx) + img.get(x1, y1) * tx;
            let v = top * (1.0 - ty) + bottom * ty;
            pixels.push(v.clamp(0.0, 1.0));
        }
    }
    GrayImage { width, height, pixels }
}

// Binary PGM (P5, maxval 255).

fn pgm_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "pgm",
        detail: detail.into(),
    }
}

pub fn read_pgm(mut r: impl Read) -> Result<GrayImage> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(pgm_err("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(pgm_err(format!("unsupported magic {:?}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| pgm_err(format!("bad integer {s:?}")));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(pgm_err(format!("only 8-bit PGM supported, maxval {maxval}")));
    }
    // exactly one whitespace byte separates header and raster
    pos += 1;
    let raster = bytes.get(pos..pos + w * h).ok_or_else(|| pgm_err("truncated raster"))?;
    let pixels = raster.iter().map(|&b| b as f64 / 255.0).collect();
    GrayImage::new(w, h, pixels)
}

pub fn write_pgm(img: &GrayImage, mut w: impl Write) -> Result<()> {
    write!(w, "P5\n{} {}\n255\n", img.width, img.height)?;
    let raster: Vec<u8> = img.pixels.iter().map(|p| (p * 255.0).round() as u8).collect();
    w.write_all(&raster)?;
    Ok(())
}

/// Quantizes to the 8-bit grid a PGM round-trip would produce.
pub fn quantize_u8(img: &GrayImage) -> GrayImage {
    GrayImage {
        width: img.width,
        height: img.height,
        pixels: img.pixels.iter().map(|p| (p * 255.0).round() / 255.0).collect(),
    }
}
