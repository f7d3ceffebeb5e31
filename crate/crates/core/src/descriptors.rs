//! Dense SIFT-style descriptors on a regular grid over every pyramid level.
//!
//! Each patch is split into 4×4 spatial cells with 8 orientation bins per
//! cell. Votes are shared bilinearly in x, y and orientation. There is no
//! dominant-orientation alignment and no Gaussian window; the descriptor
//! is L2-normalized, clipped at 0.2, and renormalized.

use std::f64::consts::TAU;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{build_pyramid, compute_gradients, level_dims, GrayImage, ScalePyramid};
use crate::par::{self, Parallelism};

pub const SPATIAL_CELLS: usize = 4;
pub const ORIENTATION_BINS: usize = 8;
pub const RAW_DIM: usize = SPATIAL_CELLS * SPATIAL_CELLS * ORIENTATION_BINS;

const CLIP: f64 = 0.2;
const NORM_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalDescriptor {
    pub vector: Vec<f64>,
    pub x_norm: f64,
    pub y_norm: f64,
    pub scale_level: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorSet {
    pub descriptors: Vec<LocalDescriptor>,
    pub source_id: String,
    pub dim: usize,
}

impl DescriptorSet {
    pub fn new(source_id: impl Into<String>, dim: usize, descriptors: Vec<LocalDescriptor>) -> Result<Self> {
        for d in &descriptors {
            crate::error::check_dim(dim, d.vector.len())?;
        }
        Ok(DescriptorSet {
            descriptors,
            source_id: source_id.into(),
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    /// Writes the debug dump: `x_norm,y_norm,scale_level,v0,...` per line.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        for d in &self.descriptors {
            write!(w, "{},{},{}", d.x_norm, d.y_norm, d.scale_level)?;
            for v in &d.vector {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_csv(source_id: impl Into<String>, text: &str) -> Result<Self> {
        let bad = |line: usize, detail: &str| Error::Format {
            what: "descriptor csv",
            detail: format!("line {}: {detail}", line + 1),
        };
        let mut descriptors = Vec::new();
        let mut dim = None;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 4 {
                return Err(bad(i, "too few fields"));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(i, "not a number"));
            let vector = fields[3..].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
            if *dim.get_or_insert(vector.len()) != vector.len() {
                return Err(bad(i, "inconsistent dimensionality"));
            }
            descriptors.push(LocalDescriptor {
                x_norm: num(fields[0])?,
                y_norm: num(fields[1])?,
                scale_level: fields[2].trim().parse().map_err(|_| bad(i, "bad scale level"))?,
                vector,
            });
        }
        let dim = dim.ok_or(Error::EmptyInput("descriptor csv"))?;
        DescriptorSet::new(source_id, dim, descriptors)
    }
}

/// Grid and pyramid parameters for dense extraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    pub patch: usize,
    pub stride: usize,
    pub levels: usize,
    pub factor: f64,
}

impl Default for DenseParams {
    fn default() -> Self {
        DenseParams {
            patch: 24,
            stride: 4,
            levels: 3,
            factor: std::f64::consts::FRAC_1_SQRT_2,
        }
    }
}

fn grid_positions(side: usize, patch: usize, stride: usize) -> usize {
    if side < patch {
        0
    } else {
        (side - patch) / stride + 1
    }
}

/// Number of descriptors `extract_dense` yields for the given geometry.
pub fn descriptor_count(width: usize, height: usize, levels: usize, factor: f64, patch: usize, stride: usize) -> usize {
    (0..levels)
        .map(|l| {
            let (w, h) = level_dims(width, height, factor, l);
            grid_positions(w, patch, stride) * grid_positions(h, patch, stride)
        })
        .sum()
}

/// Per-pixel vote precomputed once per level.
struct Vote {
    magnitude: f64,
    bin: usize,
    frac: f64,
}

fn level_votes(img: &GrayImage) -> Result<Vec<Vote>> {
    let g = compute_gradients(img)?;
    Ok(g.magnitude
        .iter()
        .zip(&g.orientation)
        .map(|(&m, &theta)| {
            let o = theta / TAU * ORIENTATION_BINS as f64;
            let b = o.floor();
            Vote {
                magnitude: m,
                bin: (b as usize) % ORIENTATION_BINS,
                frac: o - b,
            }
        })
        .collect())
}

/// Splits coordinate `c` (in cell units, cell centers at integers) into the
/// two neighbouring cells and their weights; out-of-range cells get `None`.
#[inline]
pub(crate) fn split_cell(c: f64, cells: usize) -> [(Option<usize>, f64); 2] {
    let lo = c.floor();
    let t = c - lo;
    let idx = |v: f64| (v >= 0.0 && v < cells as f64).then_some(v as usize);
    [(idx(lo), 1.0 - t), (idx(lo + 1.0), t)]
}

fn patch_histogram(votes: &[Vote], width: usize, x0: usize, y0: usize, patch: usize) -> Vec<f64> {
    let mut hist = vec![0.0; RAW_DIM];
    let cell = patch as f64 / SPATIAL_CELLS as f64;
    for py in 0..patch {
        let ys = split_cell((py as f64 + 0.5) / cell - 0.5, SPATIAL_CELLS);
        for px in 0..patch {
            let v = &votes[(y0 + py) * width + x0 + px];
            if v.magnitude == 0.0 {
                continue;
            }
            let xs = split_cell((px as f64 + 0.5) / cell - 0.5, SPATIAL_CELLS);
            let ob = [(v.bin, 1.0 - v.frac), ((v.bin + 1) % ORIENTATION_BINS, v.frac)];
            for &(cy, wy) in &ys {
                let Some(cy) = cy else { continue };
                for &(cx, wx) in &xs {
                    let Some(cx) = cx else { continue };
                    let base = (cy * SPATIAL_CELLS + cx) * ORIENTATION_BINS;
                    let w = v.magnitude * wy * wx;
                    for &(b, wo) in &ob {
                        hist[base + b] += w * wo;
                    }
                }
            }
        }
    }
    hist
}

/// L2-normalize, clip at 0.2, renormalize. Flat patches map to zero.
pub fn normalize_descriptor(v: &mut [f64]) {
    let scale = |v: &mut [f64]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < NORM_FLOOR {
            v.iter_mut().for_each(|x| *x = 0.0);
            false
        } else {
            v.iter_mut().for_each(|x| *x /= n);
            true
        }
    };
    if scale(v) {
        v.iter_mut().for_each(|x| *x = x.min(CLIP));
        scale(v);
    }
}

pub fn extract_dense(pyr: &ScalePyramid, patch: usize, stride: usize) -> Result<Vec<LocalDescriptor>> {
    if patch < SPATIAL_CELLS || stride == 0 {
        return Err(Error::InvalidParameter(format!(
            "patch {patch} / stride {stride} invalid"
        )));
    }
    let mut out = Vec::new();
    for (level, img) in pyr.levels.iter().enumerate() {
        if img.width() < patch || img.height() < patch {
            return Err(Error::DimensionTooSmall {
                width: img.width(),
                height: img.height(),
                min_width: patch,
                min_height: patch,
            });
        }
        let votes = level_votes(img)?;
        let (nx, ny) = (
            grid_positions(img.width(), patch, stride),
            grid_positions(img.height(), patch, stride),
        );
        let half = patch as f64 / 2.0;
        for j in 0..ny {
            for i in 0..nx {
                let (x0, y0) = (i * stride, j * stride);
                let mut vector = patch_histogram(&votes, img.width(), x0, y0, patch);
                normalize_descriptor(&mut vector);
                out.push(LocalDescriptor {
                    vector,
                    x_norm: (x0 as f64 + half) / img.width() as f64,
                    y_norm: (y0 as f64 + half) / img.height() as f64,
                    scale_level: level,
                });
            }
        }
    }
    Ok(out)
}

/// Builds the pyramid and extracts descriptors for one image.
pub fn extract_image(img: &GrayImage, source_id: &str, params: &DenseParams) -> Result<DescriptorSet> {
    let pyr = build_pyramid(img, params.levels, params.factor)?;
    let descriptors = extract_dense(&pyr, params.patch, params.stride)?;
    DescriptorSet::new(source_id, RAW_DIM, descriptors)
}

pub fn extract_corpus<'a>(
    images: &[(&'a str, &'a GrayImage)],
    params: &DenseParams,
    mode: Parallelism,
) -> Result<Vec<DescriptorSet>> {
    par::try_map(mode, images, |_, (id, img)| extract_image(img, id, params))
}
