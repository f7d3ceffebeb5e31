//! End-to-end training and evaluation on a labelled image collection.
//!
//! Descriptor PCA and the vocabulary are fit on subsamples drawn from the
//! training split only. Images are then extracted, projected and encoded one
//! at a time, so no full descriptor corpus is ever held in memory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{train_svm, SvmConfig};
use crate::codebooks::{train_gmm_traced, train_kmeans_traced, GmmConfig, KmeansConfig};
use crate::dataset::{split_indices, Label, LabeledImage};
use crate::descriptors::{extract_image, DenseParams, DescriptorSet, LocalDescriptor, RAW_DIM};
use crate::dpm::{build_face_model, detect, DetectorConfig, FaceModelConfig, PartMixtureModel};
use crate::encoders::{compress, EncodedVector, Encoder, EncoderKind, Vocabulary};
use crate::error::{Error, Result, Stage};
use crate::metrics::{
    accuracy, accuracy_vs_yield, best_accuracy_threshold, default_yield_grid, roc_curve, EvalCurve, ScoredSample,
};
use crate::model_file::{write_atomic, PipelineModel, FORMAT_VERSION};
use crate::par::{self, Parallelism};
use crate::pca::{fit_pca, PcaModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub descriptor: DenseParams,
    /// Descriptor PCA output size; `None` keeps raw descriptors.
    pub pca_dim: Option<usize>,
    pub encoder: EncoderKind,
    pub k: usize,
    /// PCA of the encoded vectors, followed by L2 normalization.
    pub final_pca: Option<usize>,
    pub svm: SvmConfig,
    /// Seeds vocabulary training.
    pub seed: u64,
    pub train_fraction: f64,
    pub split_seed: u64,
    /// Upper bounds on descriptors sampled for PCA and vocabulary fitting.
    pub pca_samples: usize,
    pub vocabulary_samples: usize,
    pub max_iter: usize,
    /// Also build and evaluate the part-model face detector.
    pub face_baseline: bool,
    #[serde(default)]
    pub parallelism: Parallelism,
    /// Pre-trained vocabulary used instead of fitting one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<Vocabulary>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            descriptor: DenseParams::default(),
            pca_dim: Some(64),
            encoder: EncoderKind::Fisher,
            k: 32,
            final_pca: None,
            svm: SvmConfig::default(),
            seed: 0,
            train_fraction: 0.8,
            split_seed: 0,
            pca_samples: 20_000,
            vocabulary_samples: 20_000,
            max_iter: 100,
            face_baseline: false,
            parallelism: Parallelism::default(),
            vocabulary: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceMetrics {
    pub auc: f64,
    /// Threshold maximizing test accuracy, and that accuracy.
    pub best_threshold: f64,
    pub best_accuracy: f64,
    /// Threshold chosen on the training split, and its test accuracy.
    pub train_threshold: f64,
    pub train_threshold_accuracy: f64,
    pub test_scores: Vec<ScoredSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineMetrics {
    pub encoder: EncoderKind,
    pub k: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub train_accuracy: f64,
    pub accuracy: f64,
    pub auc: f64,
    pub roc: EvalCurve,
    pub yield_curve: EvalCurve,
    pub test_scores: Vec<ScoredSample>,
    pub face: Option<FaceMetrics>,
}

impl PipelineMetrics {
    pub fn accuracy_at_yield(&self, q: f64) -> Option<f64> {
        self.yield_curve
            .points
            .iter()
            .find(|(y, _)| (y - q).abs() < 1e-12)
            .map(|p| p.1)
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub model: PipelineModel,
    pub metrics: PipelineMetrics,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl PipelineOutput {
    /// Writes `model.json`, `metrics.json`, `roc.csv` and `yield.csv`
    /// (plus `face_roc.csv` when the face baseline ran).
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        let persist = |r: Result<()>| r.map_err(|e| e.at(Stage::Persist));
        persist(self.model.save(&dir.join("model.json")))?;
        let metrics = serde_json::to_string_pretty(&self.metrics).map_err(|e| Error::from(e).at(Stage::Persist))?;
        persist(write_atomic(&dir.join("metrics.json"), metrics.as_bytes()))?;
        persist(write_atomic(
            &dir.join("roc.csv"),
            self.metrics.roc.to_csv_string().as_bytes(),
        ))?;
        persist(write_atomic(
            &dir.join("yield.csv"),
            self.metrics.yield_curve.to_csv_string().as_bytes(),
        ))?;
        if let Some(f) = &self.metrics.face {
            let (roc, _) = roc_curve(&f.test_scores).map_err(|e| e.at(Stage::Persist))?;
            persist(write_atomic(&dir.join("face_roc.csv"), roc.to_csv_string().as_bytes()))?;
        }
        Ok(())
    }
}

/// Per-image quota so that `n` images contribute at most about `cap` rows.
pub fn sample_quota(cap: usize, n: usize) -> usize {
    cap.div_ceil(n.max(1)).max(1)
}

/// Evenly spaced subsample of at most `quota` descriptor vectors.
pub fn sample_vectors(ds: &DescriptorSet, quota: usize) -> Vec<Vec<f64>> {
    let n = ds.len();
    if n <= quota {
        return ds.descriptors.iter().map(|d| d.vector.clone()).collect();
    }
    (0..quota)
        .map(|j| ds.descriptors[j * n / quota].vector.clone())
        .collect()
}

pub fn project_set(pca: &PcaModel, ds: &DescriptorSet) -> Result<DescriptorSet> {
    if pca.d_in() != ds.dim {
        return Err(Error::DimensionMismatch {
            expected: pca.d_in(),
            actual: ds.dim,
        });
    }
    let descriptors = ds
        .descriptors
        .iter()
        .map(|d| LocalDescriptor {
            vector: pca.project_unchecked(&d.vector),
            ..d.clone()
        })
        .collect();
    DescriptorSet::new(ds.source_id.clone(), pca.d_out(), descriptors)
}

/// k-means for BoW and VLAD, a GMM for Fisher vectors.
pub fn fit_vocabulary(
    kind: EncoderKind,
    samples: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iter: usize,
    parallelism: Parallelism,
) -> Result<Vocabulary> {
    Ok(match kind {
        EncoderKind::Bow | EncoderKind::Vlad => {
            let cfg = KmeansConfig {
                max_iter,
                parallelism,
                ..KmeansConfig::new(k, seed)
            };
            Vocabulary::Kmeans(train_kmeans_traced(samples, &cfg)?.codebook)
        }
        EncoderKind::Fisher => {
            let cfg = GmmConfig {
                max_iter,
                parallelism,
                ..GmmConfig::new(k, seed)
            };
            Vocabulary::Gmm(train_gmm_traced(samples, &cfg)?.model)
        }
    })
}

fn extract(img: &LabeledImage, params: &DenseParams) -> Result<DescriptorSet> {
    extract_image(&img.image, &img.id, params).map_err(|e| e.at(Stage::Extract))
}

/// Extracts, projects and encodes each image without retaining descriptors.
pub fn encode_images(
    images: &[&LabeledImage],
    params: &DenseParams,
    pca: Option<&PcaModel>,
    encoder: &Encoder<'_>,
    mode: Parallelism,
) -> Result<Vec<EncodedVector>> {
    par::try_map(mode, images, |_, img| {
        let raw = extract(img, params)?;
        let ds = match pca {
            Some(p) => project_set(p, &raw).map_err(|e| e.at(Stage::Pca))?,
            None => raw,
        };
        encoder.encode_uncompressed(&ds).map_err(|e| e.at(Stage::Encode))
    })
}

fn scored(ids: &[&LabeledImage], scores: &[f64]) -> Vec<ScoredSample> {
    ids.iter()
        .zip(scores)
        .map(|(img, &s)| ScoredSample::new(img.id.clone(), s, img.label.sign()))
        .collect()
}

/// Builds the matched-template face model on the training split and scores
/// the test split.
pub fn face_baseline(
    train: &[&LabeledImage],
    test: &[&LabeledImage],
    mode: Parallelism,
) -> Result<(PartMixtureModel, FaceMetrics)> {
    let positives: Vec<_> = train
        .iter()
        .filter_map(|d| d.gt_face_box.map(|b| (&d.image, b)))
        .collect();
    let negatives: Vec<_> = train
        .iter()
        .filter(|d| d.label == Label::Empty)
        .map(|d| &d.image)
        .collect();
    let model = build_face_model(&positives, &negatives, &FaceModelConfig::default())?;
    let cfg = DetectorConfig {
        parallelism: Parallelism::Sequential,
        ..Default::default()
    };
    let score_all = |set: &[&LabeledImage]| -> Result<Vec<ScoredSample>> {
        let s = par::try_map(mode, set, |_, d| Ok(detect(&model, &d.image, &cfg)?.score))?;
        Ok(scored(set, &s))
    };
    let train_scores = score_all(train)?;
    let test_scores = score_all(test)?;
    let (train_threshold, _) = best_accuracy_threshold(&train_scores)?;
    let (best_threshold, best_accuracy) = best_accuracy_threshold(&test_scores)?;
    let (_, auc) = roc_curve(&test_scores)?;
    let hits = test_scores
        .iter()
        .filter(|s| (s.score >= train_threshold) == (s.label == 1))
        .count();
    Ok((
        model,
        FaceMetrics {
            auc,
            best_threshold,
            best_accuracy,
            train_threshold,
            train_threshold_accuracy: hits as f64 / test_scores.len() as f64,
            test_scores,
        },
    ))
}

pub fn run_pipeline(cfg: &PipelineConfig, data: &[LabeledImage]) -> Result<PipelineOutput> {
    if cfg.k == 0 {
        return Err(Error::InvalidParameter("k must be positive".into()).at(Stage::Codebook));
    }
    let labels: Vec<Label> = data.iter().map(|d| d.label).collect();
    let (tr, te) = split_indices(&labels, cfg.train_fraction, cfg.split_seed).map_err(|e| e.at(Stage::Extract))?;
    let train: Vec<&LabeledImage> = tr.iter().map(|&i| &data[i]).collect();
    let test: Vec<&LabeledImage> = te.iter().map(|&i| &data[i]).collect();
    let mode = cfg.parallelism;

    // One pass over the training images gathers both subsamples.
    let pca_quota = sample_quota(cfg.pca_samples, train.len());
    let vocab_quota = sample_quota(cfg.vocabulary_samples, train.len());
    let samples = par::try_map(mode, &train, |_, img| {
        let ds = extract(img, &cfg.descriptor)?;
        Ok((sample_vectors(&ds, pca_quota), sample_vectors(&ds, vocab_quota)))
    })?;
    let (pca_rows, vocab_rows): (Vec<_>, Vec<_>) = samples.into_iter().unzip();
    let pca_rows: Vec<Vec<f64>> = pca_rows.into_iter().flatten().collect();
    let mut vocab_rows: Vec<Vec<f64>> = vocab_rows.into_iter().flatten().collect();

    let pca = match cfg.pca_dim {
        Some(d) => Some(fit_pca(&pca_rows, d).map_err(|e| e.at(Stage::Pca))?),
        None => None,
    };
    drop(pca_rows);
    if let Some(p) = &pca {
        vocab_rows = par::map(mode, &vocab_rows, |_, v| p.project_unchecked(v));
    }
    let dim = pca.as_ref().map_or(RAW_DIM, |p| p.d_out());

    let vocabulary = match &cfg.vocabulary {
        Some(v) => {
            v.validate().map_err(|e| e.at(Stage::Codebook))?;
            if v.d() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.d(),
                }
                .at(Stage::Codebook));
            }
            if v.k() != cfg.k {
                return Err(Error::DimensionMismatch {
                    expected: cfg.k,
                    actual: v.k(),
                }
                .at(Stage::Codebook));
            }
            v.clone()
        }
        None => fit_vocabulary(cfg.encoder, &vocab_rows, cfg.k, cfg.seed, cfg.max_iter, mode)
            .map_err(|e| e.at(Stage::Codebook))?,
    };
    drop(vocab_rows);
    let encoder = Encoder::new(cfg.encoder, &vocabulary).map_err(|e| e.at(Stage::Encode))?;

    let all: Vec<&LabeledImage> = train.iter().chain(&test).copied().collect();
    let mut encoded = encode_images(&all, &cfg.descriptor, pca.as_ref(), &encoder, mode)?;

    let final_pca = match cfg.final_pca {
        Some(d) => {
            let rows: Vec<Vec<f64>> = encoded[..train.len()].iter().map(|v| v.values.clone()).collect();
            let p = fit_pca(&rows, d).map_err(|e| e.at(Stage::FinalPca))?;
            encoded = encoded
                .iter()
                .map(|v| compress(&p, v))
                .collect::<Result<_>>()
                .map_err(|e| e.at(Stage::FinalPca))?;
            Some(p)
        }
        None => None,
    };
    let (enc_train, enc_test) = encoded.split_at(train.len());

    let train_set: Vec<(&EncodedVector, i8)> = enc_train.iter().zip(&train).map(|(v, d)| (v, d.label.sign())).collect();
    let classifier = train_svm(&train_set, &cfg.svm).map_err(|e| e.at(Stage::Classifier))?;

    let evaluate = || -> Result<(PipelineMetrics, Option<PartMixtureModel>)> {
        let score = |vs: &[EncodedVector]| vs.iter().map(|v| classifier.score(v)).collect::<Result<Vec<f64>>>();
        let train_scores = scored(&train, &score(enc_train)?);
        let test_scores = scored(&test, &score(enc_test)?);
        let (roc, auc) = roc_curve(&test_scores)?;
        let yield_curve = accuracy_vs_yield(&test_scores, &default_yield_grid())?;
        let (dpm, face) = if cfg.face_baseline {
            let (m, f) = face_baseline(&train, &test, mode)?;
            (Some(m), Some(f))
        } else {
            (None, None)
        };
        Ok((
            PipelineMetrics {
                encoder: cfg.encoder,
                k: cfg.k,
                n_train: train.len(),
                n_test: test.len(),
                train_accuracy: accuracy(&train_scores)?,
                accuracy: accuracy(&test_scores)?,
                auc,
                roc,
                yield_curve,
                test_scores,
                face,
            },
            dpm,
        ))
    };
    let (metrics, dpm) = evaluate().map_err(|e| e.at(Stage::Evaluate))?;

    let model = PipelineModel {
        version: FORMAT_VERSION,
        descriptor: cfg.descriptor,
        pca,
        vocabulary,
        encoder: cfg.encoder,
        k: cfg.k,
        final_pca,
        classifier,
        dpm,
        dpm_threshold: metrics.face.as_ref().map(|f| f.train_threshold),
    };
    model.validate().map_err(|e| e.at(Stage::Persist))?;
    Ok(PipelineOutput {
        model,
        metrics,
        train_ids: train.iter().map(|d| d.id.clone()).collect(),
        test_ids: test.iter().map(|d| d.id.clone()).collect(),
    })
}

/// Scores one image with a loaded model.
pub fn score_image(model: &PipelineModel, img: &LabeledImage) -> Result<f64> {
    let encoder = model.encoder()?;
    let enc = encode_images(
        &[img],
        &model.descriptor,
        model.pca.as_ref(),
        &encoder,
        Parallelism::Sequential,
    )?;
    let v = match &model.final_pca {
        Some(p) => compress(p, &enc[0]).map_err(|e| e.at(Stage::FinalPca))?,
        None => enc.into_iter().next().expect("one image in, one vector out"),
    };
    model.score(&v).map_err(|e| e.at(Stage::Classifier))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticSpec};

    fn small_corpus() -> Vec<LabeledImage> {
        generate_synthetic(&SyntheticSpec {
            count: 24,
            width: 64,
            height: 48,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    fn small_cfg(encoder: EncoderKind) -> PipelineConfig {
        PipelineConfig {
            encoder,
            k: 4,
            pca_dim: Some(8),
            pca_samples: 2000,
            vocabulary_samples: 2000,
            svm: SvmConfig {
                epochs: 5,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn runs_every_encoder() {
        let data = small_corpus();
        for kind in EncoderKind::ALL {
            let out = run_pipeline(&small_cfg(kind), &data).unwrap();
            let len = kind.encoded_len(4, 8);
            assert_eq!(out.model.classifier.weights.len(), len);
            assert_eq!(out.metrics.n_train + out.metrics.n_test, 24);
            out.model.validate().unwrap();
        }
    }

    #[test]
    fn mismatched_vocabulary_is_stage_tagged() {
        let data = small_corpus();
        let mut cfg = small_cfg(EncoderKind::Fisher);
        let other = run_pipeline(
            &PipelineConfig {
                pca_dim: Some(6),
                ..cfg.clone()
            },
            &data,
        )
        .unwrap();
        cfg.vocabulary = Some(other.model.vocabulary);
        let err = run_pipeline(&cfg, &data).unwrap_err();
        assert_eq!(err.stage(), Some(Stage::Codebook));
        assert!(matches!(
            err.root(),
            Error::DimensionMismatch { expected: 8, actual: 6 }
        ));
    }

    #[test]
    fn final_pca_needs_enough_images() {
        let data = small_corpus();
        let cfg = PipelineConfig {
            final_pca: Some(512),
            ..small_cfg(EncoderKind::Vlad)
        };
        let err = run_pipeline(&cfg, &data).unwrap_err();
        assert_eq!(err.stage(), Some(Stage::FinalPca));
        let cfg = PipelineConfig {
            final_pca: Some(6),
            ..small_cfg(EncoderKind::Vlad)
        };
        let out = run_pipeline(&cfg, &data).unwrap();
        assert_eq!(out.model.classifier.weights.len(), 6);
    }

    #[test]
    fn loaded_model_scores_identically() {
        let data = small_corpus();
        let out = run_pipeline(&small_cfg(EncoderKind::Fisher), &data).unwrap();
        let back = PipelineModel::from_json(&out.model.to_json().unwrap()).unwrap();
        assert_eq!(back, out.model);
        let test: Vec<&LabeledImage> = data.iter().filter(|d| out.test_ids.contains(&d.id)).collect();
        for (img, s) in test.iter().zip(&out.metrics.test_scores) {
            assert_eq!(score_image(&back, img).unwrap().to_bits(), s.score.to_bits());
        }
    }

    #[test]
    fn sampling_is_even_and_bounded() {
        assert_eq!(sample_quota(20_000, 320), 63);
        assert_eq!(sample_quota(5, 0), 5);
        let d: Vec<LocalDescriptor> = (0..10)
            .map(|i| LocalDescriptor {
                vector: vec![i as f64],
                x_norm: 0.0,
                y_norm: 0.0,
                scale_level: 0,
            })
            .collect();
        let ds = DescriptorSet::new("a", 1, d).unwrap();
        let s = sample_vectors(&ds, 4);
        assert_eq!(s, vec![vec![0.0], vec![2.0], vec![5.0], vec![7.0]]);
        assert_eq!(sample_vectors(&ds, 50).len(), 10);
    }
}
