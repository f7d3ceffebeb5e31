use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::par::{self, Parallelism};

const CHUNK: usize = 1024;

/// `k` centroids of dimension `d`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmeansCodebook {
    pub k: usize,
    pub d: usize,
    pub centroids: Vec<f64>,
}

impl KmeansCodebook {
    pub fn new(k: usize, d: usize, centroids: Vec<f64>) -> Result<Self> {
        let cb = KmeansCodebook { k, d, centroids };
        cb.validate()?;
        Ok(cb)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.d == 0 {
            return Err(Error::InvalidModel("codebook needs k, d >= 1".into()));
        }
        check_dim(self.k * self.d, self.centroids.len())?;
        check_finite(&self.centroids, "codebook centroids")?;
        for i in 0..self.k {
            for j in 0..i {
                if self.centroid(i) == self.centroid(j) {
                    return Err(Error::InvalidModel(format!("centroids {j} and {i} coincide")));
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.d..(i + 1) * self.d]
    }

    pub fn assign_nearest(&self, x: &[f64]) -> Result<usize> {
        check_dim(self.d, x.len())?;
        Ok(self.nearest(x).0)
    }

    /// Index and squared distance of the nearest centroid, lowest index on ties.
    pub(crate) fn nearest(&self, x: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for i in 0..self.k {
            let d = sq_dist(self.centroid(i), x);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KmeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    #[serde(default)]
    pub parallelism: Parallelism,
}

impl KmeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KmeansConfig {
            k,
            seed,
            max_iter: 100,
            parallelism: Parallelism::default(),
        }
    }
}

/// Result of a k-means run with its per-iteration objective.
#[derive(Debug, Clone)]
pub struct KmeansFit {
    pub codebook: KmeansCodebook,
    pub assignments: Vec<usize>,
    /// Sum of squared distances after each assignment step.
    pub sse_trace: Vec<f64>,
}

pub fn train_kmeans(data: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KmeansCodebook> {
    Ok(train_kmeans_traced(
        data,
        &KmeansConfig {
            max_iter,
            ..KmeansConfig::new(k, seed)
        },
    )?
    .codebook)
}

fn validate_data(data: &[Vec<f64>], k: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be positive".into()));
    }
    if data.len() < k {
        return Err(Error::InsufficientSamples {
            required: k,
            actual: data.len(),
        });
    }
    let d = data[0].len();
    if d == 0 {
        return Err(Error::InvalidParameter("zero-dimensional data".into()));
    }
    for row in data {
        check_dim(d, row.len())?;
        check_finite(row, "clustering input")?;
    }
    Ok(d)
}

/// k-means++ seeding: first center uniform, then proportional to D².
fn seed_plus_plus(data: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let mut chosen = vec![rng.random_range(0..data.len())];
    let mut dist: Vec<f64> = data.iter().map(|x| sq_dist(x, &data[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        if total <= 0.0 {
            return Err(Error::InsufficientSamples {
                required: k,
                actual: chosen.len(),
            });
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &w) in dist.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            pick = Some(i);
            if target < w {
                break;
            }
            target -= w;
        }
        let next = pick.expect("positive total implies a candidate");
        chosen.push(next);
        for (dv, x) in dist.iter_mut().zip(data) {
            *dv = dv.min(sq_dist(x, &data[next]));
        }
    }
    Ok(chosen)
}

pub fn train_kmeans_traced(data: &[Vec<f64>], cfg: &KmeansConfig) -> Result<KmeansFit> {
    let k = cfg.k;
    let d = validate_data(data, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seeds = seed_plus_plus(data, k, &mut rng)?;
    let mut cb = KmeansCodebook {
        k,
        d,
        centroids: seeds.iter().flat_map(|&i| data[i].iter().copied()).collect(),
    };

    let mut assignments: Vec<usize> = vec![usize::MAX; data.len()];
    let mut sse_trace = Vec::new();
    for _ in 0..cfg.max_iter.max(1) {
        let nearest: Vec<(usize, f64)> = par::map_chunks(cfg.parallelism, data, CHUNK, |c| {
            c.iter().map(|x| cb.nearest(x)).collect::<Vec<_>>()
        })
        .into_iter()
        .flatten()
        .collect();
        let mut new_assign: Vec<usize> = nearest.iter().map(|n| n.0).collect();
        let mut dists: Vec<f64> = nearest.iter().map(|n| n.1).collect();

        // re-seed empty clusters at the point farthest from its centroid
        let mut counts = vec![0usize; k];
        new_assign.iter().for_each(|&a| counts[a] += 1);
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..data.len())
                .filter(|&i| counts[new_assign[i]] > 1)
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dists[b] >= dists[i] => Some(b),
                    _ => Some(i),
                })
                .ok_or_else(|| Error::Numerical("cannot re-seed empty cluster".into()))?;
            counts[new_assign[far]] -= 1;
            counts[c] = 1;
            new_assign[far] = c;
            dists[far] = 0.0;
            cb.centroids[c * d..(c + 1) * d].copy_from_slice(&data[far]);
        }
        sse_trace.push(dists.iter().sum());

        let changed = new_assign != assignments;
        assignments = new_assign;
        if !changed {
            break;
        }

        let mut sums = vec![0.0; k * d];
        for (x, &a) in data.iter().zip(&assignments) {
            for (s, v) in sums[a * d..(a + 1) * d].iter_mut().zip(x) {
                *s += v;
            }
        }
        for c in 0..k {
            let n = counts[c] as f64;
            for j in 0..d {
                cb.centroids[c * d + j] = sums[c * d + j] / n;
            }
        }
    }
    cb.validate()?;
    Ok(KmeansFit {
        codebook: cb,
        assignments,
        sse_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn four_points_two_clusters() {
        let data = vec![vec![0.0], vec![1.0], vec![9.0], vec![10.0]];
        // exhaustive search over all 2-partitions
        let mut best = f64::INFINITY;
        let mut best_means = (0.0, 0.0);
        for mask in 1u32..15 {
            let (a, b): (Vec<f64>, Vec<f64>) = {
                let mut a = vec![];
                let mut b = vec![];
                for (i, x) in data.iter().enumerate() {
                    if mask & (1 << i) != 0 {
                        a.push(x[0])
                    } else {
                        b.push(x[0])
                    }
                }
                (a, b)
            };
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let sse = |v: &[f64]| v.iter().map(|x| (x - mean(v)).powi(2)).sum::<f64>();
            if sse(&a) + sse(&b) < best {
                best = sse(&a) + sse(&b);
                best_means = (mean(&a).min(mean(&b)), mean(&a).max(mean(&b)));
            }
        }
        assert_eq!(best_means, (0.5, 9.5));
        for seed in 0..10 {
            let cb = train_kmeans(&data, 2, seed, 50).unwrap();
            let mut c = cb.centroids.clone();
            c.sort_by(f64::total_cmp);
            assert_eq!((c[0], c[1]), best_means);
        }
    }

    #[test]
    fn k_equals_distinct_points() {
        let data = vec![vec![0.0, 1.0], vec![3.0, 4.0], vec![-2.0, 5.0]];
        let fit = train_kmeans_traced(&data, &KmeansConfig::new(3, 4)).unwrap();
        assert_eq!(*fit.sse_trace.last().unwrap(), 0.0);
        for x in &data {
            assert!((0..3).any(|i| fit.codebook.centroid(i) == x.as_slice()));
        }
    }

    #[test]
    fn recovers_separated_blobs() {
        let means = [[0.0, 0.0], [5.0, 5.0], [-5.0, 6.0]];
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let noise = Normal::new(0.0, 0.3).unwrap();
            let data: Vec<Vec<f64>> = (0..300)
                .map(|i| {
                    let m = means[i % 3];
                    vec![m[0] + noise.sample(&mut rng), m[1] + noise.sample(&mut rng)]
                })
                .collect();
            let cb = train_kmeans(&data, 3, seed, 100).unwrap();
            for m in &means {
                let close = (0..3).any(|i| sq_dist(cb.centroid(i), m).sqrt() < 0.1);
                assert!(close, "seed {seed}: no centroid near {m:?}");
            }
        }
    }

    #[test]
    fn nearest_rules() {
        let cb = KmeansCodebook::new(3, 1, vec![-1.0, 1.0, 4.0]).unwrap();
        assert_eq!(cb.assign_nearest(&[4.0]).unwrap(), 2);
        assert_eq!(cb.assign_nearest(&[0.0]).unwrap(), 0);
        assert!(cb.assign_nearest(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn nearest_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let k = 12;
        let d = 5;
        let cb = KmeansCodebook::new(k, d, (0..k * d).map(|_| rng.random::<f64>()).collect()).unwrap();
        for _ in 0..1000 {
            let x: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
            let mut best = 0;
            let mut best_d = f64::MAX;
            for i in 0..k {
                let dist: f64 = (0..d).map(|j| (x[j] - cb.centroids[i * d + j]).powi(2)).sum();
                if dist < best_d {
                    best_d = dist;
                    best = i;
                }
            }
            assert_eq!(cb.assign_nearest(&x).unwrap(), best);
        }
    }

    #[test]
    fn sse_non_increasing_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<Vec<f64>> = (0..2000)
            .map(|_| (0..3).map(|_| rng.random::<f64>()).collect())
            .collect();
        let cfg = KmeansConfig::new(16, 9);
        let fit = train_kmeans_traced(&data, &cfg).unwrap();
        for w in fit.sse_trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
        let seq = train_kmeans_traced(
            &data,
            &KmeansConfig {
                parallelism: Parallelism::Sequential,
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(fit.codebook, seq.codebook);
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(
            train_kmeans(&[vec![1.0]], 2, 0, 10),
            Err(Error::InsufficientSamples { .. })
        ));
        // duplicates leave fewer distinct points than k
        assert!(train_kmeans(&[vec![1.0], vec![1.0], vec![1.0]], 2, 0, 10).is_err());
    }
}
