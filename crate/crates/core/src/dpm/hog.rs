use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::descriptors::split_cell;
use crate::error::{check_dim, Error, Result};
use crate::image::{compute_gradients, GrayImage};

pub const DEFAULT_CELL_SIZE: usize = 8;
pub const DEFAULT_BINS: usize = 9;
const BLOCK_CLIP: f64 = 0.2;
const BLOCK_EPS: f64 = 1e-10;

/// Cell-wise unsigned orientation histograms, indexed `(cy, cx, bin)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HogFeatureMap {
    pub cells_x: usize,
    pub cells_y: usize,
    pub bins: usize,
    pub cell_size: usize,
    pub features: Vec<f64>,
}

impl HogFeatureMap {
    pub fn new(cells_x: usize, cells_y: usize, bins: usize, cell_size: usize, features: Vec<f64>) -> Result<Self> {
        check_dim(cells_x * cells_y * bins, features.len())?;
        if features.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidParameter("hog features must lie in [0, 1]".into()));
        }
        Ok(HogFeatureMap {
            cells_x,
            cells_y,
            bins,
            cell_size,
            features,
        })
    }

    #[inline]
    pub fn cell(&self, cx: usize, cy: usize) -> &[f64] {
        let i = (cy * self.cells_x + cx) * self.bins;
        &self.features[i..i + self.bins]
    }
}

/// Raw (unnormalized) bilinear-voted cell histograms.
pub(crate) fn cell_histograms(img: &GrayImage, cell_size: usize, bins: usize) -> Result<(usize, usize, Vec<f64>)> {
    let cells_x = img.width() / cell_size.max(1);
    let cells_y = img.height() / cell_size.max(1);
    if cell_size == 0 || bins == 0 || cells_x < 3 || cells_y < 3 {
        return Err(Error::DimensionTooSmall {
            width: img.width(),
            height: img.height(),
            min_width: 3 * cell_size,
            min_height: 3 * cell_size,
        });
    }
    let g = compute_gradients(img)?;
    let cs = cell_size as f64;
    let mut hist = vec![0.0; cells_x * cells_y * bins];
    for y in 0..cells_y * cell_size {
        let ys = split_cell((y as f64 + 0.5) / cs - 0.5, cells_y);
        for x in 0..cells_x * cell_size {
            let i = y * img.width() + x;
            let m = g.magnitude[i];
            if m == 0.0 {
                continue;
            }
            let o = (g.orientation[i] % PI) / PI * bins as f64;
            let b0 = o.floor();
            let frac = o - b0;
            let b0 = (b0 as usize) % bins;
            let ob = [(b0, 1.0 - frac), ((b0 + 1) % bins, frac)];
            let xs = split_cell((x as f64 + 0.5) / cs - 0.5, cells_x);
            for &(cy, wy) in &ys {
                let Some(cy) = cy else { continue };
                for &(cx, wx) in &xs {
                    let Some(cx) = cx else { continue };
                    let base = (cy * cells_x + cx) * bins;
                    for &(b, wo) in &ob {
                        hist[base + b] += m * wy * wx * wo;
                    }
                }
            }
        }
    }
    Ok((cells_x, cells_y, hist))
}

/// 2×2-block L2 normalization with clipping, averaged back onto each cell.
pub(crate) fn block_normalize(cells_x: usize, cells_y: usize, bins: usize, hist: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; hist.len()];
    let mut hits = vec![0usize; cells_x * cells_y];
    for by in 0..cells_y - 1 {
        for bx in 0..cells_x - 1 {
            let cells = [(bx, by), (bx + 1, by), (bx, by + 1), (bx + 1, by + 1)];
            let energy: f64 = cells
                .iter()
                .flat_map(|&(cx, cy)| &hist[(cy * cells_x + cx) * bins..(cy * cells_x + cx + 1) * bins])
                .map(|v| v * v)
                .sum();
            let norm = (energy + BLOCK_EPS * BLOCK_EPS).sqrt();
            for &(cx, cy) in &cells {
                let c = cy * cells_x + cx;
                hits[c] += 1;
                for b in 0..bins {
                    out[c * bins + b] += (hist[c * bins + b] / norm).min(BLOCK_CLIP);
                }
            }
        }
    }
    for (c, &n) in hits.iter().enumerate() {
        out[c * bins..(c + 1) * bins].iter_mut().for_each(|v| *v /= n as f64);
    }
    out
}

pub fn compute_hog(img: &GrayImage, cell_size: usize, bins: usize) -> Result<HogFeatureMap> {
    let (cells_x, cells_y, hist) = cell_histograms(img, cell_size, bins)?;
    let features = block_normalize(cells_x, cells_y, bins, &hist);
    Ok(HogFeatureMap {
        cells_x,
        cells_y,
        bins,
        cell_size,
        features,
    })
}
