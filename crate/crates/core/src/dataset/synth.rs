//! Synthetic front-seat scenes: textured seat backgrounds, with or without an
//! occupant drawn as head, facial blobs and torso.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Label, LabeledImage};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::metrics::Rect;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub count: usize,
    pub positive_fraction: f64,
    pub width: usize,
    pub height: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Probability that an image receives occluding bars.
    pub occlusion_rate: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            count: 400,
            positive_fraction: 0.5,
            width: 128,
            height: 96,
            noise_sigma: 0.03,
            seed: 0,
            occlusion_rate: 0.25,
        }
    }
}

impl SyntheticSpec {
    pub fn positives(&self) -> usize {
        (self.count as f64 * self.positive_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.count < 2 {
            return bad(format!("count {} must be at least 2", self.count));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return bad(format!("positive fraction {} outside (0, 1)", self.positive_fraction));
        }
        let p = self.positives();
        if p == 0 || p == self.count {
            return bad(format!("{p} of {} positives leaves a class empty", self.count));
        }
        if self.width < 32 || self.height < 32 {
            return bad(format!("{}x{} is below the 32x32 minimum", self.width, self.height));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {}", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return bad(format!("occlusion rate {} outside [0, 1]", self.occlusion_rate));
        }
        Ok(())
    }
}

/// Raster under construction; values outside [0, 1] are clamped at the end.
struct Canvas {
    w: usize,
    h: usize,
    px: Vec<f64>,
}

impl Canvas {
    /// Blend `value` into every pixel where `coverage(x, y)` is positive.
    fn paint(&mut self, value: f64, coverage: impl Fn(f64, f64) -> f64) {
        for y in 0..self.h {
            for x in 0..self.w {
                let a = coverage(x as f64 + 0.5, y as f64 + 0.5).clamp(0.0, 1.0);
                if a > 0.0 {
                    let p = &mut self.px[y * self.w + x];
                    *p = *p * (1.0 - a) + value * a;
                }
            }
        }
    }
}

/// Soft-edged ellipse coverage with a one-pixel ramp.
fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64) -> impl Fn(f64, f64) -> f64 {
    move |x, y| {
        let r = (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)).sqrt();
        (1.0 - r) * rx.min(ry) + 0.5
    }
}

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> impl Fn(f64, f64) -> f64 {
    move |x, y| {
        let inside = (x - x0).min(x1 - x).min(y - y0).min(y1 - y);
        inside + 0.5
    }
}

fn background(c: &mut Canvas, rng: &mut ChaCha8Rng) {
    let (w, h) = (c.w as f64, c.h as f64);
    let base = rng.random_range(0.35..0.55);
    let theta = rng.random_range(0.0..PI);
    let period = rng.random_range(6.0..14.0);
    let amp = rng.random_range(0.04..0.10);
    let phase = rng.random_range(0.0..2.0 * PI);
    let (gx, gy) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    for y in 0..c.h {
        for x in 0..c.w {
            let (xf, yf) = (x as f64, y as f64);
            let band = (2.0 * PI * (xf * theta.cos() + yf * theta.sin()) / period + phase).sin();
            c.px[y * c.w + x] = base + amp * band + gx * (xf / w - 0.5) + gy * (yf / h - 0.5);
        }
    }
    // seat back and headrest
    let seat_cx = w * rng.random_range(0.42..0.58);
    let seat = rng.random_range(0.2..0.4);
    let top = h * rng.random_range(0.40..0.50);
    c.paint(seat, rect(seat_cx - 0.26 * w, top, seat_cx + 0.26 * w, h + 1.0));
    let hr = rng.random_range(0.15..0.35);
    let hw = w * rng.random_range(0.10..0.14);
    let hh = h * rng.random_range(0.08..0.11);
    let hy = top - hh * 0.8;
    c.paint(hr, ellipse(seat_cx, hy, hw, hh));
}

/// Draws an occupant and returns the head bounding box.
fn occupant(c: &mut Canvas, rng: &mut ChaCha8Rng) -> Rect {
    let (w, h) = (c.w as f64, c.h as f64);
    let s = rng.random_range(0.85..1.15);
    let cx = w * rng.random_range(0.40..0.60);
    let cy = h * rng.random_range(0.28..0.40);
    let rx = 0.11 * w * s;
    let ry = 0.17 * h * s;

    let cloth = rng.random_range(0.1..0.85);
    let neck = cy + 0.9 * ry;
    let (top_half, bottom_half) = (0.16 * w * s, 0.32 * w * s);
    c.paint(cloth, move |x, y| {
        if y < neck {
            return 0.0;
        }
        let t = ((y - neck) / (h - neck)).min(1.0);
        let half = top_half + (bottom_half - top_half) * t;
        (half - (x - cx).abs()).min(y - neck) + 0.5
    });

    let skin = rng.random_range(0.6..0.9);
    c.paint(
        skin * 0.9,
        rect(cx - 0.3 * rx, cy + 0.7 * ry, cx + 0.3 * rx, neck + 2.0),
    );
    c.paint(skin, ellipse(cx, cy, rx, ry));
    let hair = rng.random_range(0.05..0.3);
    c.paint(hair, move |x, y| {
        let inside = ellipse(cx, cy - 0.08 * ry, rx * 1.04, ry)(x, y);
        let above = (cy - 0.55 * ry) - y;
        inside.min(above + 0.5)
    });

    let feature = skin * rng.random_range(0.2..0.45);
    let eye_y = cy - 0.15 * ry;
    let eye_r = 0.16 * rx;
    for side in [-1.0, 1.0] {
        c.paint(feature, ellipse(cx + side * 0.4 * rx, eye_y, eye_r * 1.3, eye_r));
    }
    c.paint(feature, ellipse(cx, cy + 0.5 * ry, 0.35 * rx, 0.09 * ry));
    c.paint(skin * 0.8, ellipse(cx, cy + 0.15 * ry, 0.08 * rx, 0.16 * ry));

    Rect {
        x: cx - rx,
        y: cy - ry,
        w: 2.0 * rx,
        h: 2.0 * ry,
    }
}

fn occlusions(c: &mut Canvas, rng: &mut ChaCha8Rng) {
    let (w, h) = (c.w as f64, c.h as f64);
    for _ in 0..rng.random_range(1..=2) {
        let v = rng.random_range(0.0..1.0);
        if rng.random::<bool>() {
            let x0 = w * rng.random_range(0.25..0.7);
            let bw = w * rng.random_range(0.05..0.12);
            c.paint(v, rect(x0, -1.0, x0 + bw, h + 1.0));
        } else {
            let y0 = h * rng.random_range(0.0..0.35);
            let bh = h * rng.random_range(0.06..0.15);
            c.paint(v, rect(-1.0, y0, w + 1.0, y0 + bh));
        }
    }
}

fn render(spec: &SyntheticSpec, index: usize, label: Label) -> Result<LabeledImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let mut c = Canvas {
        w: spec.width,
        h: spec.height,
        px: vec![0.0; spec.width * spec.height],
    };
    background(&mut c, &mut rng);
    let gt_face_box = match label {
        Label::Person => Some(occupant(&mut c, &mut rng)),
        Label::Empty => None,
    };
    if rng.random::<f64>() < spec.occlusion_rate {
        occlusions(&mut c, &mut rng);
    }
    let gain = rng.random_range(0.6..1.3);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    for p in &mut c.px {
        *p = (*p * gain + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }
    Ok(LabeledImage {
        id: format!("img{index:05}"),
        image: GrayImage::new(spec.width, spec.height, c.px)?,
        label,
        gt_face_box,
    })
}

/// Deterministic in `spec`; exactly `round(count · positive_fraction)` persons.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<LabeledImage>> {
    spec.validate()?;
    let p = spec.positives();
    let mut labels: Vec<Label> = (0..spec.count)
        .map(|i| if i < p { Label::Person } else { Label::Empty })
        .collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    labels.iter().enumerate().map(|(i, &l)| render(spec, i, l)).collect()
}
