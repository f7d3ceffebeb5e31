use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::kmeans::{train_kmeans_traced, KmeansConfig};
use crate::error::{check_dim, check_finite, Error, Result};
use crate::par::{self, Parallelism};

pub const WEIGHT_FLOOR: f64 = 1e-6;
pub const VARIANCE_FLOOR: f64 = 1e-8;
/// Minimum samples per component accepted by `train_gmm`.
pub const SAMPLES_PER_COMPONENT: usize = 10;

const CHUNK: usize = 512;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Diagonal-covariance Gaussian mixture. Means and variances are `k × d`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub k: usize,
    pub d: usize,
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl GmmModel {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>, d: usize) -> Result<Self> {
        let g = GmmModel {
            k: weights.len(),
            d,
            weights,
            means,
            variances,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.d == 0 {
            return Err(Error::InvalidModel("gmm needs k, d >= 1".into()));
        }
        check_dim(self.k, self.weights.len())?;
        check_dim(self.k * self.d, self.means.len())?;
        check_dim(self.k * self.d, self.variances.len())?;
        check_finite(&self.means, "gmm means")?;
        check_finite(&self.variances, "gmm variances")?;
        check_finite(&self.weights, "gmm weights")?;
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidModel(format!("gmm weights sum to {total}")));
        }
        if self.weights.iter().any(|&w| w <= 0.0) || self.variances.iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidModel("gmm weights and variances must be positive".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn mean(&self, i: usize) -> &[f64] {
        &self.means[i * self.d..(i + 1) * self.d]
    }

    #[inline]
    pub fn variance(&self, i: usize) -> &[f64] {
        &self.variances[i * self.d..(i + 1) * self.d]
    }

    /// `ln w_i − ½ Σ_j ln(2π σ²_ij)` per component.
    fn log_norms(&self) -> Vec<f64> {
        (0..self.k)
            .map(|i| self.weights[i].ln() - 0.5 * self.variance(i).iter().map(|v| LN_2PI + v.ln()).sum::<f64>())
            .collect()
    }

    /// Fills `out` with `ln(w_i p_i(x))` and returns `ln p(x)`.
    fn joint_log(&self, log_norms: &[f64], x: &[f64], out: &mut [f64]) -> f64 {
        for i in 0..self.k {
            let q: f64 = self
                .mean(i)
                .iter()
                .zip(self.variance(i))
                .zip(x)
                .map(|((m, v), xi)| (xi - m) * (xi - m) / v)
                .sum();
            out[i] = log_norms[i] - 0.5 * q;
        }
        let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + out.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
    }

    /// Soft assignments `α_i(x)` via log-sum-exp.
    pub fn posteriors(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.d, x.len())?;
        Ok(self.posteriors_with(&self.log_norms(), x))
    }

    pub(crate) fn posterior_cache(&self) -> Vec<f64> {
        self.log_norms()
    }

    pub(crate) fn posteriors_with(&self, log_norms: &[f64], x: &[f64]) -> Vec<f64> {
        let mut l = vec![0.0; self.k];
        let total = self.joint_log(log_norms, x, &mut l);
        l.iter_mut().for_each(|v| *v = (*v - total).exp());
        l
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.d, x.len())?;
        let mut l = vec![0.0; self.k];
        Ok(self.joint_log(&self.log_norms(), x, &mut l))
    }

    /// Average `ln p(x)` over `data`.
    pub fn mean_log_likelihood(&self, data: &[Vec<f64>]) -> Result<f64> {
        let norms = self.log_norms();
        let mut buf = vec![0.0; self.k];
        let mut total = 0.0;
        for x in data {
            check_dim(self.d, x.len())?;
            total += self.joint_log(&norms, x, &mut buf);
        }
        Ok(total / data.len() as f64)
    }

    /// Plain-text dump: one block per component with w, μ and σ².
    pub fn debug_dump(&self) -> String {
        let mut s = String::new();
        for i in 0..self.k {
            s.push_str(&format!("component {i}\nw {}\n", self.weights[i]));
            let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
            s.push_str(&format!("mu {}\nvar {}\n", join(self.mean(i)), join(self.variance(i))));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    #[serde(default)]
    pub parallelism: Parallelism,
}

impl GmmConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        GmmConfig {
            k,
            seed,
            max_iter: 100,
            tol: 1e-5,
            parallelism: Parallelism::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Mean log-likelihood of the parameters entering each E-step.
    /// The last entry belongs to the returned model.
    pub log_likelihood_trace: Vec<f64>,
}

pub fn train_gmm(data: &[Vec<f64>], k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<GmmModel> {
    let cfg = GmmConfig {
        max_iter,
        tol,
        ..GmmConfig::new(k, seed)
    };
    Ok(train_gmm_traced(data, &cfg)?.model)
}

/// Per-chunk sufficient statistics, accumulated around a shift point
/// (the previous means) to limit cancellation in the variance.
struct Stats {
    ll: f64,
    n: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
}

fn e_step_chunk(gmm: &GmmModel, norms: &[f64], chunk: &[Vec<f64>]) -> Stats {
    let (k, d) = (gmm.k, gmm.d);
    let mut st = Stats {
        ll: 0.0,
        n: vec![0.0; k],
        s1: vec![0.0; k * d],
        s2: vec![0.0; k * d],
    };
    let mut l = vec![0.0; k];
    for x in chunk {
        let total = gmm.joint_log(norms, x, &mut l);
        st.ll += total;
        for (i, &li) in l.iter().enumerate() {
            let g = (li - total).exp();
            if g == 0.0 {
                continue;
            }
            st.n[i] += g;
            let m = gmm.mean(i);
            for j in 0..d {
                let c = x[j] - m[j];
                st.s1[i * d + j] += g * c;
                st.s2[i * d + j] += g * c * c;
            }
        }
    }
    st
}

fn e_step(gmm: &GmmModel, data: &[Vec<f64>], mode: Parallelism) -> Stats {
    let norms = gmm.log_norms();
    let parts = par::map_chunks(mode, data, CHUNK, |c| e_step_chunk(gmm, &norms, c));
    let mut acc = Stats {
        ll: 0.0,
        n: vec![0.0; gmm.k],
        s1: vec![0.0; gmm.k * gmm.d],
        s2: vec![0.0; gmm.k * gmm.d],
    };
    for p in parts {
        acc.ll += p.ll;
        acc.n.iter_mut().zip(&p.n).for_each(|(a, b)| *a += b);
        acc.s1.iter_mut().zip(&p.s1).for_each(|(a, b)| *a += b);
        acc.s2.iter_mut().zip(&p.s2).for_each(|(a, b)| *a += b);
    }
    acc
}

fn m_step(gmm: &GmmModel, st: &Stats, count: usize) -> GmmModel {
    let (k, d) = (gmm.k, gmm.d);
    let mut means = gmm.means.clone();
    let mut variances = gmm.variances.clone();
    let mut weights = vec![0.0; k];
    for i in 0..k {
        let n = st.n[i];
        weights[i] = (n / count as f64).max(WEIGHT_FLOOR);
        if n <= 0.0 {
            continue;
        }
        for j in 0..d {
            let shift = st.s1[i * d + j] / n;
            means[i * d + j] = gmm.means[i * d + j] + shift;
            variances[i * d + j] = (st.s2[i * d + j] / n - shift * shift).max(VARIANCE_FLOOR);
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    GmmModel {
        k,
        d,
        weights,
        means,
        variances,
    }
}

fn init_from_kmeans(data: &[Vec<f64>], cfg: &GmmConfig) -> Result<GmmModel> {
    let km = train_kmeans_traced(
        data,
        &KmeansConfig {
            k: cfg.k,
            seed: cfg.seed,
            max_iter: cfg.max_iter.max(1),
            parallelism: cfg.parallelism,
        },
    )?;
    let (k, d) = (km.codebook.k, km.codebook.d);
    let mut counts = vec![0usize; k];
    let mut variances = vec![0.0; k * d];
    for (x, &a) in data.iter().zip(&km.assignments) {
        counts[a] += 1;
        let c = km.codebook.centroid(a);
        for j in 0..d {
            variances[a * d + j] += (x[j] - c[j]).powi(2);
        }
    }
    for i in 0..k {
        for j in 0..d {
            variances[i * d + j] = (variances[i * d + j] / counts[i] as f64).max(VARIANCE_FLOOR);
        }
    }
    let mut weights: Vec<f64> = counts
        .iter()
        .map(|&c| (c as f64 / data.len() as f64).max(WEIGHT_FLOOR))
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(GmmModel {
        k,
        d,
        weights,
        means: km.codebook.centroids,
        variances,
    })
}

pub fn train_gmm_traced(data: &[Vec<f64>], cfg: &GmmConfig) -> Result<GmmFit> {
    let required = SAMPLES_PER_COMPONENT * cfg.k.max(1);
    if data.len() < required {
        return Err(Error::InsufficientSamples {
            required,
            actual: data.len(),
        });
    }
    let mut model = init_from_kmeans(data, cfg)?;
    let mut trace: Vec<f64> = Vec::new();
    let mut scored = false;
    for _ in 0..cfg.max_iter.max(1) {
        let st = e_step(&model, data, cfg.parallelism);
        let ll = st.ll / data.len() as f64;
        if !ll.is_finite() {
            return Err(Error::Numerical("non-finite GMM log-likelihood".into()));
        }
        let converged = trace.last().is_some_and(|&prev| ll - prev < cfg.tol);
        trace.push(ll);
        if converged {
            scored = true;
            break;
        }
        model = m_step(&model, &st, data.len());
    }
    if !scored {
        // the last M-step has not been scored yet
        let ll = model.mean_log_likelihood(data)?;
        if !ll.is_finite() {
            return Err(Error::Numerical("non-finite GMM log-likelihood".into()));
        }
        trace.push(ll);
    }
    model.validate()?;
    Ok(GmmFit {
        model,
        log_likelihood_trace: trace,
    })
}

/// Density of one diagonal Gaussian, evaluated directly.
pub fn gaussian_density(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((xi, m), v)| (-(xi - m).powi(2) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt())
        .product()
}
