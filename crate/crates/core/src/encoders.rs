//! Image signatures from local descriptors: spatial-pyramid BoW, VLAD and
//! mean-gradient Fisher vectors.
//!
//! Accumulations visit descriptors in a canonical order (scale, position,
//! then vector contents) so every encoding is exactly invariant to the order
//! of the input set.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::codebooks::{GmmModel, KmeansCodebook};
use crate::descriptors::{DescriptorSet, LocalDescriptor};
use crate::error::{check_dim, check_finite, Error, Result};
use crate::par::{self, Parallelism};
use crate::pca::PcaModel;

/// Grid sides of the BoW spatial pyramid: whole image, 2×2, 4×4.
pub const PYRAMID_GRIDS: [usize; 3] = [1, 2, 4];
pub const PYRAMID_REGIONS: usize = 1 + 4 + 16;
pub const POWER_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Bow,
    Vlad,
    Fisher,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 3] = [EncoderKind::Bow, EncoderKind::Vlad, EncoderKind::Fisher];

    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::Bow => "bow",
            EncoderKind::Vlad => "vlad",
            EncoderKind::Fisher => "fisher",
        }
    }

    pub fn encoded_len(self, k: usize, d: usize) -> usize {
        match self {
            EncoderKind::Bow => PYRAMID_REGIONS * k,
            EncoderKind::Vlad | EncoderKind::Fisher => k * d,
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bow" => Ok(EncoderKind::Bow),
            "vlad" => Ok(EncoderKind::Vlad),
            "fisher" | "fv" => Ok(EncoderKind::Fisher),
            other => Err(Error::InvalidParameter(format!("unknown encoder {other:?}"))),
        }
    }
}

/// Identifies the feature space a vector lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub kind: EncoderKind,
    pub k: usize,
    pub d: usize,
    pub len: usize,
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(k={}, d={}, len={})", self.kind, self.k, self.d, self.len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedVector {
    pub values: Vec<f64>,
    pub kind: EncoderKind,
    pub k: usize,
    pub d: usize,
    pub normalized: bool,
}

impl EncodedVector {
    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint {
            kind: self.kind,
            k: self.k,
            d: self.d,
            len: self.values.len(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Signed power followed by L2 normalization. All-zero input stays zero.
pub fn power_l2_normalize(v: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_finite(v, "normalization input")?;
    let powered: Vec<f64> = v.iter().map(|&z| z.signum() * z.abs().powf(alpha)).collect();
    Ok(l2_normalize(&powered))
}

pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| x / n).collect()
}

fn descriptor_cmp(a: &LocalDescriptor, b: &LocalDescriptor) -> Ordering {
    a.scale_level
        .cmp(&b.scale_level)
        .then(a.y_norm.total_cmp(&b.y_norm))
        .then(a.x_norm.total_cmp(&b.x_norm))
        .then_with(|| {
            a.vector
                .iter()
                .zip(&b.vector)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

fn canonical(ds: &DescriptorSet) -> Vec<&LocalDescriptor> {
    let mut v: Vec<&LocalDescriptor> = ds.descriptors.iter().collect();
    v.sort_by(|a, b| descriptor_cmp(a, b));
    v
}

fn check_input(ds: &DescriptorSet, d: usize) -> Result<()> {
    check_dim(d, ds.dim)?;
    if ds.is_empty() {
        return Err(Error::EmptyInput("descriptor set"));
    }
    Ok(())
}

/// Region of a normalized coordinate in an `n`-way split: `[i/n, (i+1)/n)`, last bin closed.
#[inline]
pub fn spatial_bin(c: f64, n: usize) -> usize {
    ((c * n as f64).floor().max(0.0) as usize).min(n - 1)
}

/// The 21 region histograms (L1-normalized each), before the final L2 step.
pub fn bow_histograms(ds: &DescriptorSet, cb: &KmeansCodebook) -> Result<Vec<f64>> {
    check_input(ds, cb.d)?;
    let k = cb.k;
    let mut counts = vec![0.0; PYRAMID_REGIONS * k];
    for desc in canonical(ds) {
        let word = cb.nearest(&desc.vector).0;
        let mut offset = 0;
        for &n in &PYRAMID_GRIDS {
            let region = offset + spatial_bin(desc.y_norm, n) * n + spatial_bin(desc.x_norm, n);
            counts[region * k + word] += 1.0;
            offset += n * n;
        }
    }
    for region in counts.chunks_mut(k) {
        let total: f64 = region.iter().sum();
        if total > 0.0 {
            region.iter_mut().for_each(|c| *c /= total);
        }
    }
    Ok(counts)
}

pub fn encode_bow(ds: &DescriptorSet, cb: &KmeansCodebook) -> Result<EncodedVector> {
    let h = bow_histograms(ds, cb)?;
    Ok(EncodedVector {
        values: l2_normalize(&h),
        kind: EncoderKind::Bow,
        k: cb.k,
        d: cb.d,
        normalized: true,
    })
}

/// Concatenated residual sums `v_i = Σ_{NN(x)=i} (x − μ_i)` before normalization.
pub fn vlad_residuals(ds: &DescriptorSet, cb: &KmeansCodebook) -> Result<Vec<f64>> {
    check_input(ds, cb.d)?;
    let d = cb.d;
    let mut v = vec![0.0; cb.k * d];
    for desc in canonical(ds) {
        let i = cb.nearest(&desc.vector).0;
        let c = cb.centroid(i);
        for (j, (x, m)) in desc.vector.iter().zip(c).enumerate() {
            v[i * d + j] += x - m;
        }
    }
    Ok(v)
}

pub fn encode_vlad(ds: &DescriptorSet, cb: &KmeansCodebook) -> Result<EncodedVector> {
    let v = vlad_residuals(ds, cb)?;
    Ok(EncodedVector {
        values: power_l2_normalize(&v, POWER_ALPHA)?,
        kind: EncoderKind::Vlad,
        k: cb.k,
        d: cb.d,
        normalized: true,
    })
}

/// Mean-gradient Fisher vector before power/L2 normalization:
/// `g_i = 1/(T√w_i) Σ_t α_t(i) (x_t − μ_i)/σ_i`, concatenated over `i`.
pub fn fisher_gradient(ds: &DescriptorSet, gmm: &GmmModel) -> Result<Vec<f64>> {
    check_input(ds, gmm.d)?;
    let (k, d) = (gmm.k, gmm.d);
    let cache = gmm.posterior_cache();
    let inv_sigma: Vec<f64> = gmm.variances.iter().map(|v| 1.0 / v.sqrt()).collect();
    let mut g = vec![0.0; k * d];
    for desc in canonical(ds) {
        let alpha = gmm.posteriors_with(&cache, &desc.vector);
        for i in 0..k {
            let a = alpha[i];
            if a == 0.0 {
                continue;
            }
            let m = gmm.mean(i);
            for j in 0..d {
                g[i * d + j] += a * (desc.vector[j] - m[j]) * inv_sigma[i * d + j];
            }
        }
    }
    let t = ds.len() as f64;
    for i in 0..k {
        let s = 1.0 / (t * gmm.weights[i].sqrt());
        g[i * d..(i + 1) * d].iter_mut().for_each(|v| *v *= s);
    }
    Ok(g)
}

pub fn encode_fv(ds: &DescriptorSet, gmm: &GmmModel) -> Result<EncodedVector> {
    let g = fisher_gradient(ds, gmm)?;
    Ok(EncodedVector {
        values: power_l2_normalize(&g, POWER_ALPHA)?,
        kind: EncoderKind::Fisher,
        k: gmm.k,
        d: gmm.d,
        normalized: true,
    })
}

/// Dot product of two normalized Fisher vectors.
pub fn fisher_kernel(a: &EncodedVector, b: &EncodedVector) -> Result<f64> {
    for v in [a, b] {
        if v.kind != EncoderKind::Fisher || !v.normalized {
            return Err(Error::InvalidParameter(
                "fisher kernel needs normalized fisher vectors".into(),
            ));
        }
    }
    if a.fingerprint() != b.fingerprint() {
        return Err(Error::FingerprintMismatch {
            expected: a.fingerprint().to_string(),
            actual: b.fingerprint().to_string(),
        });
    }
    Ok(a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum())
}

/// Trained vocabulary backing an encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Vocabulary {
    Kmeans(KmeansCodebook),
    Gmm(GmmModel),
}

impl Vocabulary {
    pub fn k(&self) -> usize {
        match self {
            Vocabulary::Kmeans(c) => c.k,
            Vocabulary::Gmm(g) => g.k,
        }
    }

    pub fn d(&self) -> usize {
        match self {
            Vocabulary::Kmeans(c) => c.d,
            Vocabulary::Gmm(g) => g.d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Vocabulary::Kmeans(c) => c.validate(),
            Vocabulary::Gmm(g) => g.validate(),
        }
    }

    /// Plain-text listing of the fitted components.
    pub fn debug_dump(&self) -> String {
        match self {
            Vocabulary::Kmeans(c) => (0..c.k)
                .map(|i| {
                    let v: Vec<String> = c.centroid(i).iter().map(|x| x.to_string()).collect();
                    format!("centroid {i}\n{}\n", v.join(" "))
                })
                .collect(),
            Vocabulary::Gmm(g) => g.debug_dump(),
        }
    }
}

/// An encoder kind bound to its vocabulary, plus optional compression of
/// the final vector (projection followed by L2 normalization).
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<'a> {
    pub kind: EncoderKind,
    pub vocabulary: &'a Vocabulary,
    pub compress: Option<&'a PcaModel>,
}

impl<'a> Encoder<'a> {
    pub fn new(kind: EncoderKind, vocabulary: &'a Vocabulary) -> Result<Self> {
        match (kind, vocabulary) {
            (EncoderKind::Fisher, Vocabulary::Gmm(_))
            | (EncoderKind::Bow | EncoderKind::Vlad, Vocabulary::Kmeans(_)) => Ok(Encoder {
                kind,
                vocabulary,
                compress: None,
            }),
            _ => Err(Error::InvalidParameter(format!(
                "{kind} encoder cannot use this vocabulary type"
            ))),
        }
    }

    pub fn with_compression(mut self, pca: Option<&'a PcaModel>) -> Self {
        self.compress = pca;
        self
    }

    /// Encodes without the optional compression step.
    pub fn encode_uncompressed(&self, ds: &DescriptorSet) -> Result<EncodedVector> {
        match (self.kind, self.vocabulary) {
            (EncoderKind::Bow, Vocabulary::Kmeans(cb)) => encode_bow(ds, cb),
            (EncoderKind::Vlad, Vocabulary::Kmeans(cb)) => encode_vlad(ds, cb),
            (EncoderKind::Fisher, Vocabulary::Gmm(g)) => encode_fv(ds, g),
            _ => unreachable!("checked in Encoder::new"),
        }
    }

    pub fn encode(&self, ds: &DescriptorSet) -> Result<EncodedVector> {
        let v = self.encode_uncompressed(ds)?;
        match self.compress {
            None => Ok(v),
            Some(pca) => compress(pca, &v),
        }
    }

    pub fn encode_corpus(&self, sets: &[DescriptorSet], mode: Parallelism) -> Result<Vec<EncodedVector>> {
        par::try_map(mode, sets, |_, ds| self.encode(ds))
    }
}

/// Projects an encoded vector and re-applies L2 normalization only.
/// Kind, `k` and `d` are kept; the fingerprint length records the reduction.
pub fn compress(pca: &PcaModel, v: &EncodedVector) -> Result<EncodedVector> {
    let z = pca.project(&v.values)?;
    Ok(EncodedVector {
        values: l2_normalize(&z),
        kind: v.kind,
        k: v.k,
        d: v.d,
        normalized: true,
    })
}
