//! Mixture-of-trees part model: HoG appearance templates joined by quadratic
//! springs, scored exactly by leaf-to-root dynamic programming.
//!
//! Locations are `(x, y)` in HoG cells at a template's top-left corner. An
//! edge displacement is `child − (parent + anchor)`. All ties resolve to the
//! lexicographically smallest `(x, y)`, then the lowest mixture index.

mod hog;
mod synthetic;

pub use hog::{compute_hog, HogFeatureMap, DEFAULT_BINS, DEFAULT_CELL_SIZE};
pub use synthetic::{build_face_model, FaceModelConfig};

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Error, Result};
use crate::image::{build_pyramid, GrayImage};
use crate::metrics::Rect;
use crate::par::{self, Parallelism};

/// Appearance filter over a `width × height` block of cells, indexed `(ty, tx, bin)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartTemplate {
    pub width: usize,
    pub height: usize,
    pub weights: Vec<f64>,
}

impl PartTemplate {
    /// Dot product with the feature block whose top-left cell is `(x, y)`.
    pub fn response(&self, fmap: &HogFeatureMap, x: usize, y: usize) -> f64 {
        let bins = fmap.bins;
        let mut s = 0.0;
        for ty in 0..self.height {
            for tx in 0..self.width {
                let w = &self.weights[(ty * self.width + tx) * bins..(ty * self.width + tx + 1) * bins];
                s += w.iter().zip(fmap.cell(x + tx, y + ty)).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        s
    }

    fn fits(&self, fmap: &HogFeatureMap) -> bool {
        self.width <= fmap.cells_x && self.height <= fmap.cells_y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartEdge {
    pub parent: usize,
    pub child: usize,
    /// Rest offset of the child relative to its parent, in cells.
    pub anchor_dx: i64,
    pub anchor_dy: i64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl PartEdge {
    /// Spring score for a child at `child` given its parent at `parent`.
    #[inline]
    pub fn shape(&self, parent: (usize, usize), child: (usize, usize)) -> f64 {
        let dx = (child.0 as i64 - parent.0 as i64 - self.anchor_dx) as f64;
        let dy = (child.1 as i64 - parent.1 as i64 - self.anchor_dy) as f64;
        self.a * dx * dx + self.b * dy * dy + self.c * dx + self.d * dy
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartTree {
    pub parts: Vec<PartTemplate>,
    pub edges: Vec<PartEdge>,
    pub root: usize,
}

impl PartTree {
    fn validate(&self, bins: usize) -> Result<()> {
        let n = self.parts.len();
        if n == 0 {
            return Err(Error::InvalidModel("tree without parts".into()));
        }
        if self.root >= n {
            return Err(Error::InvalidModel(format!("root {} out of {n} parts", self.root)));
        }
        for (i, p) in self.parts.iter().enumerate() {
            if p.width == 0 || p.height == 0 || p.weights.len() != p.width * p.height * bins {
                return Err(Error::InvalidModel(format!("part {i} template has the wrong shape")));
            }
            check_finite(&p.weights, "part template")?;
        }
        if self.edges.len() != n - 1 {
            return Err(Error::InvalidModel(format!("{} edges for {n} parts", self.edges.len())));
        }
        let mut has_parent = vec![false; n];
        for e in &self.edges {
            if e.parent >= n || e.child >= n || e.parent == e.child {
                return Err(Error::InvalidModel(format!("bad edge {} -> {}", e.parent, e.child)));
            }
            if e.child == self.root || has_parent[e.child] {
                return Err(Error::InvalidModel(format!("part {} has two parents", e.child)));
            }
            has_parent[e.child] = true;
            if !(e.a < 0.0 && e.b < 0.0) {
                return Err(Error::InvalidModel("quadratic spring terms must be negative".into()));
            }
            check_finite(&[e.a, e.b, e.c, e.d], "spring coefficient")?;
        }
        if self.order().len() != n {
            return Err(Error::InvalidModel("part tree is not connected".into()));
        }
        Ok(())
    }

    /// Parts in root-first (preorder) sequence, children in edge order.
    pub fn order(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.parts.len());
        let mut stack = vec![self.root];
        while let Some(i) = stack.pop() {
            if out.contains(&i) {
                continue;
            }
            out.push(i);
            stack.extend(self.children(i).rev().map(|e| e.child));
        }
        out
    }

    fn children(&self, i: usize) -> impl DoubleEndedIterator<Item = &PartEdge> {
        self.edges.iter().filter(move |e| e.parent == i)
    }

    fn parent_edge(&self, i: usize) -> Option<&PartEdge> {
        self.edges.iter().find(|e| e.child == i)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartMixtureModel {
    pub mixtures: Vec<PartTree>,
    pub biases: Vec<f64>,
    pub bins: usize,
}

impl PartMixtureModel {
    pub fn new(mixtures: Vec<PartTree>, biases: Vec<f64>, bins: usize) -> Result<Self> {
        let m = PartMixtureModel { mixtures, biases, bins };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mixtures.is_empty() {
            return Err(Error::InvalidModel("model without mixtures".into()));
        }
        if self.biases.len() != self.mixtures.len() {
            return Err(Error::InvalidModel(format!(
                "{} biases for {} mixtures",
                self.biases.len(),
                self.mixtures.len()
            )));
        }
        if self.bins == 0 {
            return Err(Error::InvalidModel("zero orientation bins".into()));
        }
        check_finite(&self.biases, "mixture bias")?;
        self.mixtures.iter().try_for_each(|t| t.validate(self.bins))
    }

    fn check_map(&self, fmap: &HogFeatureMap) -> Result<()> {
        if fmap.bins != self.bins {
            return Err(Error::DimensionMismatch {
                expected: self.bins,
                actual: fmap.bins,
            });
        }
        for tree in &self.mixtures {
            if let Some(p) = tree.parts.iter().find(|p| !p.fits(fmap)) {
                return Err(Error::DimensionTooSmall {
                    width: fmap.cells_x,
                    height: fmap.cells_y,
                    min_width: p.width,
                    min_height: p.height,
                });
            }
        }
        Ok(())
    }
}

/// Appearance responses of one template at every valid placement, indexed `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMap {
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

impl ResponseMap {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[x * self.ny + y]
    }
}

pub fn response_map(part: &PartTemplate, fmap: &HogFeatureMap) -> ResponseMap {
    let nx = fmap.cells_x + 1 - part.width;
    let ny = fmap.cells_y + 1 - part.height;
    let mut values = Vec::with_capacity(nx * ny);
    for x in 0..nx {
        for y in 0..ny {
            values.push(part.response(fmap, x, y));
        }
    }
    ResponseMap { nx, ny, values }
}

/// Best placement of one mixture, or of the whole model.
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    pub score: f64,
    pub mixture: usize,
    /// Cell location of every part, in part order.
    pub locations: Vec<(usize, usize)>,
}

/// Full score of the given placement: appearance, springs and bias.
pub fn score_configuration(
    model: &PartMixtureModel,
    m: usize,
    fmap: &HogFeatureMap,
    locations: &[(usize, usize)],
) -> Result<f64> {
    let tree = model
        .mixtures
        .get(m)
        .ok_or_else(|| Error::InvalidParameter(format!("mixture {m} out of {}", model.mixtures.len())))?;
    if fmap.bins != model.bins {
        return Err(Error::DimensionMismatch {
            expected: model.bins,
            actual: fmap.bins,
        });
    }
    if locations.len() != tree.parts.len() {
        return Err(Error::DimensionMismatch {
            expected: tree.parts.len(),
            actual: locations.len(),
        });
    }
    let mut score = model.biases[m];
    for (i, (p, &(x, y))) in tree.parts.iter().zip(locations).enumerate() {
        if x + p.width > fmap.cells_x || y + p.height > fmap.cells_y {
            return Err(Error::InvalidParameter(format!(
                "part {i} at ({x}, {y}) leaves the feature map"
            )));
        }
        score += p.response(fmap, x, y);
    }
    for e in &tree.edges {
        score += e.shape(locations[e.parent], locations[e.child]);
    }
    Ok(score)
}

/// Exact maximization for one mixture given per-part response maps.
fn infer_tree(tree: &PartTree, bias: f64, mixture: usize, responses: &[ResponseMap]) -> Configuration {
    let order = tree.order();
    // subtree[i](l): best score of the subtree hanging from part i placed at l
    let mut subtree: Vec<Vec<f64>> = responses.iter().map(|r| r.values.clone()).collect();
    // choice[c][parent location] = best child location
    let mut choice: Vec<Vec<(usize, usize)>> = vec![Vec::new(); tree.parts.len()];
    for &c in order.iter().rev() {
        let Some(edge) = tree.parent_edge(c) else { continue };
        let (pr, cr) = (&responses[edge.parent], &responses[c]);
        let mut msg = Vec::with_capacity(pr.values.len());
        let mut arg = Vec::with_capacity(pr.values.len());
        for px in 0..pr.nx {
            for py in 0..pr.ny {
                let mut best = (f64::NEG_INFINITY, (0, 0));
                for cx in 0..cr.nx {
                    for cy in 0..cr.ny {
                        let s = subtree[c][cx * cr.ny + cy] + edge.shape((px, py), (cx, cy));
                        if s > best.0 {
                            best = (s, (cx, cy));
                        }
                    }
                }
                msg.push(best.0);
                arg.push(best.1);
            }
        }
        subtree[edge.parent].iter_mut().zip(&msg).for_each(|(v, m)| *v += m);
        choice[c] = arg;
    }
    let root = &responses[tree.root];
    let mut best = (f64::NEG_INFINITY, (0, 0));
    for x in 0..root.nx {
        for y in 0..root.ny {
            let s = subtree[tree.root][x * root.ny + y];
            if s > best.0 {
                best = (s, (x, y));
            }
        }
    }
    let mut locations = vec![(0, 0); tree.parts.len()];
    locations[tree.root] = best.1;
    for &c in &order {
        if let Some(edge) = tree.parent_edge(c) {
            let (px, py) = locations[edge.parent];
            locations[c] = choice[c][px * responses[edge.parent].ny + py];
        }
    }
    Configuration {
        score: best.0 + bias,
        mixture,
        locations,
    }
}

/// Best configuration over all mixtures from precomputed responses,
/// `responses[m][part]`.
pub fn infer_from_responses(model: &PartMixtureModel, responses: &[Vec<ResponseMap>]) -> Result<Configuration> {
    if responses.len() != model.mixtures.len() {
        return Err(Error::DimensionMismatch {
            expected: model.mixtures.len(),
            actual: responses.len(),
        });
    }
    let mut best: Option<Configuration> = None;
    for (m, (tree, resp)) in model.mixtures.iter().zip(responses).enumerate() {
        if resp.len() != tree.parts.len() {
            return Err(Error::DimensionMismatch {
                expected: tree.parts.len(),
                actual: resp.len(),
            });
        }
        let cfg = infer_tree(tree, model.biases[m], m, resp);
        if best.as_ref().is_none_or(|b| cfg.score > b.score) {
            best = Some(cfg);
        }
    }
    best.ok_or(Error::InvalidModel("model without mixtures".into()))
}

pub fn mixture_responses(model: &PartMixtureModel, fmap: &HogFeatureMap) -> Result<Vec<Vec<ResponseMap>>> {
    model.check_map(fmap)?;
    Ok(model
        .mixtures
        .iter()
        .map(|t| t.parts.iter().map(|p| response_map(p, fmap)).collect())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Bounding box of all part templates, in original-image pixels.
    pub rect: Rect,
    pub score: f64,
    pub mixture: usize,
    /// Top-left of every part template, in original-image pixels.
    pub part_locations: Vec<(f64, f64)>,
    /// Same locations in cells of the winning level's feature map.
    pub cells: Vec<(usize, usize)>,
    pub level: usize,
}

fn to_detection(model: &PartMixtureModel, cfg: Configuration, cell_size: usize, scale: f64, level: usize) -> Detection {
    let tree = &model.mixtures[cfg.mixture];
    let px = |c: usize| (c * cell_size) as f64 / scale;
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (p, &(x, y)) in tree.parts.iter().zip(&cfg.locations) {
        x0 = x0.min(px(x));
        y0 = y0.min(px(y));
        x1 = x1.max(px(x + p.width));
        y1 = y1.max(px(y + p.height));
    }
    Detection {
        rect: Rect {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        },
        score: cfg.score,
        mixture: cfg.mixture,
        part_locations: cfg.locations.iter().map(|&(x, y)| (px(x), px(y))).collect(),
        cells: cfg.locations,
        level,
    }
}

/// Exact best configuration on a single feature map.
pub fn infer_best(model: &PartMixtureModel, fmap: &HogFeatureMap) -> Result<Detection> {
    let responses = mixture_responses(model, fmap)?;
    let cfg = infer_from_responses(model, &responses)?;
    Ok(to_detection(model, cfg, fmap.cell_size, 1.0, 0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub cell_size: usize,
    pub bins: usize,
    pub levels: usize,
    pub factor: f64,
    pub parallelism: Parallelism,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            cell_size: DEFAULT_CELL_SIZE,
            bins: DEFAULT_BINS,
            levels: 3,
            factor: std::f64::consts::FRAC_1_SQRT_2,
            parallelism: Parallelism::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Occupancy {
    Person,
    Empty,
}

/// Best detection over the pyramid levels large enough for every template.
/// Ties go to the finer level.
pub fn detect(model: &PartMixtureModel, img: &GrayImage, cfg: &DetectorConfig) -> Result<Detection> {
    model.validate()?;
    let mut levels = cfg.levels.max(1);
    // drop levels the pyramid cannot build; the templates decide which are usable
    let pyr = loop {
        match build_pyramid(img, levels, cfg.factor) {
            Ok(p) => break p,
            Err(Error::DimensionTooSmall { .. }) if levels > 1 => levels -= 1,
            Err(e) => return Err(e),
        }
    };
    let found = par::map(cfg.parallelism, &pyr.levels, |l, level| -> Option<Result<Detection>> {
        let fmap = match compute_hog(level, cfg.cell_size, cfg.bins) {
            Ok(f) => f,
            Err(Error::DimensionTooSmall { .. }) => return None,
            Err(e) => return Some(Err(e)),
        };
        let responses = match mixture_responses(model, &fmap) {
            Ok(r) => r,
            Err(Error::DimensionTooSmall { .. }) => return None,
            Err(e) => return Some(Err(e)),
        };
        Some(
            infer_from_responses(model, &responses)
                .map(|c| to_detection(model, c, cfg.cell_size, pyr.scale_factors[l], l)),
        )
    });
    let mut best: Option<Detection> = None;
    for d in found.into_iter().flatten() {
        let d = d?;
        if best.as_ref().is_none_or(|b| d.score > b.score) {
            best = Some(d);
        }
    }
    best.ok_or(Error::DimensionTooSmall {
        width: img.width(),
        height: img.height(),
        min_width: 3 * cfg.cell_size,
        min_height: 3 * cfg.cell_size,
    })
}

/// Person iff the best score reaches `threshold`.
pub fn detect_occupancy(
    model: &PartMixtureModel,
    img: &GrayImage,
    threshold: f64,
    cfg: &DetectorConfig,
) -> Result<(Occupancy, Detection)> {
    let d = detect(model, img, cfg)?;
    let decision = if d.score >= threshold {
        Occupancy::Person
    } else {
        Occupancy::Empty
    };
    Ok((decision, d))
}
