//! Matched-template face model built from labelled example windows.
//!
//! Each template is the mean HoG block of the positive face windows minus the
//! mean block found at the same positions in face-free images. Positives are
//! split by face width into one mixture per size group.

use serde::{Deserialize, Serialize};

use super::hog::{compute_hog, HogFeatureMap};
use super::{PartEdge, PartMixtureModel, PartTemplate, PartTree};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::metrics::Rect;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceModelConfig {
    pub cell_size: usize,
    pub bins: usize,
    /// Root window size in cells, centred on the face box.
    pub root_cells: (usize, usize),
    pub mixtures: usize,
}

impl Default for FaceModelConfig {
    fn default() -> Self {
        FaceModelConfig {
            cell_size: super::DEFAULT_CELL_SIZE,
            bins: super::DEFAULT_BINS,
            root_cells: (4, 4),
            mixtures: 2,
        }
    }
}

/// Sub-windows `(offset_x, offset_y, width, height)` inside the root, in cells:
/// an eye band and a mouth band.
fn part_windows(root: (usize, usize)) -> Vec<(usize, usize, usize, usize)> {
    let (w, h) = root;
    let pw = (w.saturating_sub(2)).max(1);
    let ph = (h / 2).max(1);
    let ox = (w - pw) / 2;
    vec![(ox, h / 4, pw, ph.min(h - h / 4)), (ox, h / 2, pw, ph.min(h - h / 2))]
}

/// Root top-left cell for a face box, clamped so the window stays inside.
fn root_cell(fmap: &HogFeatureMap, root: (usize, usize), face: &Rect) -> Option<(usize, usize)> {
    if root.0 > fmap.cells_x || root.1 > fmap.cells_y {
        return None;
    }
    let cs = fmap.cell_size as f64;
    let cx = (face.x + face.w / 2.0) / cs - root.0 as f64 / 2.0;
    let cy = (face.y + face.h / 2.0) / cs - root.1 as f64 / 2.0;
    let clamp = |v: f64, hi: usize| (v.round().max(0.0) as usize).min(hi);
    Some((clamp(cx, fmap.cells_x - root.0), clamp(cy, fmap.cells_y - root.1)))
}

fn add_block(acc: &mut [f64], fmap: &HogFeatureMap, x: usize, y: usize, w: usize, h: usize) {
    let bins = fmap.bins;
    for ty in 0..h {
        for tx in 0..w {
            let dst = &mut acc[(ty * w + tx) * bins..(ty * w + tx + 1) * bins];
            dst.iter_mut().zip(fmap.cell(x + tx, y + ty)).for_each(|(a, v)| *a += v);
        }
    }
}

pub fn build_face_model(
    positives: &[(&GrayImage, Rect)],
    negatives: &[&GrayImage],
    cfg: &FaceModelConfig,
) -> Result<PartMixtureModel> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::SingleClass);
    }
    if cfg.mixtures == 0 || cfg.root_cells.0 == 0 || cfg.root_cells.1 == 0 {
        return Err(Error::InvalidParameter(
            "face model needs a mixture and a non-empty root".into(),
        ));
    }
    let pos_maps: Vec<(HogFeatureMap, Rect)> = positives
        .iter()
        .map(|(img, r)| Ok((compute_hog(img, cfg.cell_size, cfg.bins)?, *r)))
        .collect::<Result<_>>()?;
    let neg_maps: Vec<HogFeatureMap> = negatives
        .iter()
        .map(|img| compute_hog(img, cfg.cell_size, cfg.bins))
        .collect::<Result<_>>()?;

    let mut by_width: Vec<usize> = (0..pos_maps.len()).collect();
    by_width.sort_by(|&a, &b| pos_maps[a].1.w.total_cmp(&pos_maps[b].1.w).then(a.cmp(&b)));
    let groups = cfg.mixtures.min(by_width.len());

    let root = cfg.root_cells;
    let mut windows = vec![(0, 0, root.0, root.1)];
    windows.extend(part_windows(root));

    let mut mixtures = Vec::with_capacity(groups);
    for g in 0..groups {
        let members = &by_width[g * by_width.len() / groups..(g + 1) * by_width.len() / groups];
        let mut parts = Vec::with_capacity(windows.len());
        for &(ox, oy, w, h) in &windows {
            let len = w * h * cfg.bins;
            let (mut pos, mut neg) = (vec![0.0; len], vec![0.0; len]);
            let mut used = 0usize;
            for (j, &i) in members.iter().enumerate() {
                let (fmap, face) = &pos_maps[i];
                let Some((rx, ry)) = root_cell(fmap, root, face) else {
                    continue;
                };
                let nmap = &neg_maps[j % neg_maps.len()];
                if nmap.cells_x < rx + root.0 || nmap.cells_y < ry + root.1 {
                    continue;
                }
                add_block(&mut pos, fmap, rx + ox, ry + oy, w, h);
                add_block(&mut neg, nmap, rx + ox, ry + oy, w, h);
                used += 1;
            }
            if used == 0 {
                return Err(Error::InsufficientSamples { required: 1, actual: 0 });
            }
            let weights = pos.iter().zip(&neg).map(|(p, n)| (p - n) / used as f64).collect();
            parts.push(PartTemplate {
                width: w,
                height: h,
                weights,
            });
        }
        let edges = windows[1..]
            .iter()
            .enumerate()
            .map(|(k, &(ox, oy, _, _))| PartEdge {
                parent: 0,
                child: k + 1,
                anchor_dx: ox as i64,
                anchor_dy: oy as i64,
                a: -1.0,
                b: -1.0,
                c: 0.0,
                d: 0.0,
            })
            .collect();
        mixtures.push(PartTree { parts, edges, root: 0 });
    }
    let biases = vec![0.0; mixtures.len()];
    PartMixtureModel::new(mixtures, biases, cfg.bins)
}
