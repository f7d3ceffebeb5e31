//! Independent oracles shared by the integration targets.
#![allow(dead_code)]

use occupancy_core::codebooks::GmmModel;
use occupancy_core::dpm::{HogFeatureMap, PartEdge, PartMixtureModel, PartTemplate, PartTree};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Multiples of 1/16, so every sum below is exact in any order.
pub fn dyadic(rng: &mut ChaCha8Rng, lo: i32, hi: i32) -> f64 {
    rng.random_range(lo..=hi) as f64 / 16.0
}

pub fn random_map(rng: &mut ChaCha8Rng, cx: usize, cy: usize, bins: usize) -> HogFeatureMap {
    let f = (0..cx * cy * bins).map(|_| dyadic(rng, 0, 16)).collect();
    HogFeatureMap::new(cx, cy, bins, 8, f).unwrap()
}

/// Random tree of up to `max_parts` parts with a random root and shuffled
/// part indices; templates never exceed the map.
pub fn random_tree(rng: &mut ChaCha8Rng, max_parts: usize, bins: usize, cx: usize, cy: usize) -> PartTree {
    let n = rng.random_range(1..=max_parts);
    let mut label: Vec<usize> = (0..n).collect();
    label.shuffle(rng);
    let parts = (0..n)
        .map(|_| {
            let (w, h) = (rng.random_range(1..=2.min(cx)), rng.random_range(1..=2.min(cy)));
            PartTemplate {
                width: w,
                height: h,
                weights: (0..w * h * bins).map(|_| dyadic(rng, -16, 16)).collect(),
            }
        })
        .collect();
    let mut edges: Vec<PartEdge> = (1..n)
        .map(|i| PartEdge {
            parent: label[rng.random_range(0..i)],
            child: label[i],
            anchor_dx: rng.random_range(-2..=2),
            anchor_dy: rng.random_range(-2..=2),
            a: -dyadic(rng, 1, 16),
            b: -dyadic(rng, 1, 16),
            c: dyadic(rng, -16, 16),
            d: dyadic(rng, -16, 16),
        })
        .collect();
    edges.shuffle(rng);
    PartTree {
        parts,
        edges,
        root: label[0],
    }
}

pub fn random_model(rng: &mut ChaCha8Rng, max_parts: usize, cx: usize, cy: usize) -> PartMixtureModel {
    let bins = 2;
    let m = rng.random_range(1..=3);
    let trees = (0..m).map(|_| random_tree(rng, max_parts, bins, cx, cy)).collect();
    let biases = (0..m).map(|_| dyadic(rng, -8, 8)).collect();
    PartMixtureModel::new(trees, biases, bins).unwrap()
}

fn naive_response(t: &PartTemplate, f: &HogFeatureMap, x: usize, y: usize) -> f64 {
    let mut s = 0.0;
    for ty in 0..t.height {
        for tx in 0..t.width {
            for b in 0..f.bins {
                s += t.weights[(ty * t.width + tx) * f.bins + b]
                    * f.features[((y + ty) * f.cells_x + x + tx) * f.bins + b];
            }
        }
    }
    s
}

pub type Best = (f64, usize, Vec<(usize, usize)>);

/// Best `(score, mixture, per-part locations)` by trying every joint
/// placement. Parts are enumerated root first, each parent before its
/// children, locations in `(x, y)` order; the first strict maximum wins.
pub fn exhaustive(model: &PartMixtureModel, f: &HogFeatureMap) -> Best {
    let mut best: Option<Best> = None;
    for (m, tree) in model.mixtures.iter().enumerate() {
        let n = tree.parts.len();
        // breadth-first order from the root
        let mut order = vec![tree.root];
        let mut k = 0;
        while k < order.len() {
            let p = order[k];
            let mut kids: Vec<usize> = tree.edges.iter().filter(|e| e.parent == p).map(|e| e.child).collect();
            kids.sort_unstable();
            order.extend(kids);
            k += 1;
        }
        let places: Vec<Vec<(usize, usize)>> = order
            .iter()
            .map(|&p| {
                let t = &tree.parts[p];
                let mut v = Vec::new();
                for x in 0..=f.cells_x - t.width {
                    for y in 0..=f.cells_y - t.height {
                        v.push((x, y));
                    }
                }
                v
            })
            .collect();
        let resp: Vec<Vec<f64>> = order
            .iter()
            .zip(&places)
            .map(|(&p, pl)| {
                pl.iter()
                    .map(|&(x, y)| naive_response(&tree.parts[p], f, x, y))
                    .collect()
            })
            .collect();
        let mut idx = vec![0usize; n];
        loop {
            let mut loc = vec![(0, 0); n];
            let mut score = model.biases[m];
            for (j, &p) in order.iter().enumerate() {
                loc[p] = places[j][idx[j]];
                score += resp[j][idx[j]];
            }
            for e in &tree.edges {
                let dx = loc[e.child].0 as f64 - loc[e.parent].0 as f64 - e.anchor_dx as f64;
                let dy = loc[e.child].1 as f64 - loc[e.parent].1 as f64 - e.anchor_dy as f64;
                score += e.a * dx * dx + e.b * dy * dy + e.c * dx + e.d * dy;
            }
            if best.as_ref().is_none_or(|b| score > b.0) {
                best = Some((score, m, loc));
            }
            // odometer over the enumeration order, last part fastest
            let mut j = n;
            loop {
                if j == 0 {
                    break;
                }
                j -= 1;
                idx[j] += 1;
                if idx[j] < places[j].len() {
                    break;
                }
                idx[j] = 0;
                if j == 0 {
                    j = usize::MAX;
                    break;
                }
            }
            if j == usize::MAX {
                break;
            }
        }
    }
    best.unwrap()
}

/// Mean log-likelihood computed straight from the density formula.
pub fn mean_log_likelihood(weights: &[f64], means: &[f64], vars: &[f64], d: usize, data: &[Vec<f64>]) -> f64 {
    let k = weights.len();
    let mut total = 0.0;
    for x in data {
        let logs: Vec<f64> = (0..k)
            .map(|i| {
                let mut l = weights[i].ln();
                for j in 0..d {
                    let v = vars[i * d + j];
                    let r = x[j] - means[i * d + j];
                    l += -0.5 * (2.0 * std::f64::consts::PI * v).ln() - r * r / (2.0 * v);
                }
                l
            })
            .collect();
        let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        total += mx + logs.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    }
    total / data.len() as f64
}

/// Central-difference gradient of the mean log-likelihood with respect to
/// each mean coordinate, scaled by `σ/√w` per component.
pub fn fd_fisher(g: &GmmModel, data: &[Vec<f64>], h: f64) -> Vec<f64> {
    let (k, d) = (g.k, g.d);
    let mut out = vec![0.0; k * d];
    for i in 0..k {
        for j in 0..d {
            let mut plus = g.means.clone();
            let mut minus = g.means.clone();
            plus[i * d + j] += h;
            minus[i * d + j] -= h;
            let lp = mean_log_likelihood(&g.weights, &plus, &g.variances, d, data);
            let lm = mean_log_likelihood(&g.weights, &minus, &g.variances, d, data);
            out[i * d + j] = (lp - lm) / (2.0 * h) * g.variances[i * d + j].sqrt() / g.weights[i].sqrt();
        }
    }
    out
}
