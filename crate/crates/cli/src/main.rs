//! `occupancy`: synthetic data, staged training, evaluation and face detection.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use occupancy_core::classifier::{train_svm, LinearModel, SvmConfig};
use occupancy_core::dataset::{
    generate_synthetic, read_dataset, split_indices, write_dataset, Label, LabeledImage, SyntheticSpec,
};
use occupancy_core::descriptors::{extract_corpus, DenseParams, DescriptorSet};
use occupancy_core::dpm::{
    build_face_model, detect, detect_occupancy, DetectorConfig, FaceModelConfig, Occupancy, PartMixtureModel,
};
use occupancy_core::encoders::{compress, EncodedVector, Encoder, EncoderKind, Vocabulary};
use occupancy_core::matrix_file::EncodedMatrix;
use occupancy_core::metrics::{
    accuracy, accuracy_table, accuracy_vs_yield, best_accuracy_threshold, default_yield_grid, roc_curve, RunAccuracy,
    ScoredSample,
};
use occupancy_core::model_file::{write_atomic, PipelineModel};
use occupancy_core::pca::{fit_pca, PcaModel};
use occupancy_core::pipeline::{
    fit_vocabulary, project_set, run_pipeline, sample_quota, sample_vectors, score_image, PipelineConfig,
};
use occupancy_core::{Error, Parallelism, Result, Stage};

#[derive(Parser)]
#[command(name = "occupancy", version, about = "Front-seat occupancy detection")]
struct Cli {
    /// Run every stage on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled corpus as PGM files plus manifest.csv.
    SynthGen(SynthArgs),
    /// Extract dense descriptors for images listed in a manifest.
    Extract(ExtractArgs),
    /// Fit descriptor PCA on an extracted descriptor directory.
    TrainPca(TrainPcaArgs),
    /// Fit a k-means codebook (BoW, VLAD).
    TrainCodebook(VocabArgs),
    /// Fit a diagonal GMM (Fisher vectors).
    TrainGmm(VocabArgs),
    /// Encode descriptor sets into a binary matrix file.
    Encode(EncodeArgs),
    /// Train the linear SVM on an encoded matrix.
    TrainSvm(TrainSvmArgs),
    /// Score a matrix or a manifest and write ROC and yield curves.
    Evaluate(EvaluateArgs),
    /// Run the part-model face detector as an occupancy decision.
    DetectFace(DetectArgs),
    /// Train and evaluate the whole pipeline, optionally over a grid.
    RunAll(RunAllArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 400)]
    count: usize,
    #[arg(long, default_value_t = 0.5)]
    positive_fraction: f64,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 96)]
    height: usize,
    #[arg(long, default_value_t = 0.03)]
    noise: f64,
    #[arg(long, default_value_t = 0.25)]
    occlusion: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Subset {
    Train,
    Test,
    All,
}

#[derive(Args, Clone)]
struct SplitArgs {
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Subset::All)]
    subset: Subset,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long, default_value_t = 24)]
    patch: usize,
    #[arg(long, default_value_t = 4)]
    stride: usize,
    #[arg(long, default_value_t = 3)]
    levels: usize,
}

#[derive(Args)]
struct TrainPcaArgs {
    #[arg(long)]
    descriptors: PathBuf,
    #[arg(long, default_value_t = 64)]
    pca_dim: usize,
    #[arg(long, default_value_t = 20_000)]
    samples: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VocabArgs {
    #[arg(long)]
    descriptors: PathBuf,
    #[arg(long)]
    pca: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20_000)]
    samples: usize,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also write a plain-text listing of the components.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    descriptors: PathBuf,
    #[arg(long)]
    pca: Option<PathBuf>,
    #[arg(long)]
    vocabulary: PathBuf,
    #[arg(long, value_parser = parse_kind)]
    encoder: EncoderKind,
    /// Fit a PCA of this size on the encoded vectors and apply it.
    #[arg(long, conflicts_with = "final_pca_model")]
    final_pca: Option<usize>,
    /// Where to save the fitted final PCA.
    #[arg(long, requires = "final_pca")]
    final_pca_out: Option<PathBuf>,
    /// Apply a previously fitted final PCA.
    #[arg(long)]
    final_pca_model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the matrix as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct TrainSvmArgs {
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long, default_value_t = 1e-5)]
    lambda: f64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Encoded test matrix (with --classifier).
    #[arg(long, requires = "classifier", conflicts_with_all = ["model", "manifest"])]
    matrix: Option<PathBuf>,
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// Full model file (with --manifest).
    #[arg(long, requires = "manifest")]
    model: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Model file carrying a part model; otherwise one is built from the
    /// training split of the manifest.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Score threshold for a person decision; defaults to the threshold
    /// stored in the model, or the most accurate one on the training split.
    #[arg(long, allow_hyphen_values = true)]
    threshold: Option<f64>,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunAllArgs {
    /// Image manifest; a synthetic corpus is generated when absent.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 400)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    /// One or more encoders; every encoder and K combination is run.
    #[arg(long, value_parser = parse_kind, num_args = 1.., default_values = ["fisher"])]
    encoder: Vec<EncoderKind>,
    #[arg(long, num_args = 1.., default_values_t = [32])]
    k: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    pca_dim: usize,
    #[arg(long)]
    final_pca: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long, default_value_t = 1e-5)]
    lambda: f64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    /// Also evaluate the part-model face detector.
    #[arg(long)]
    face_baseline: bool,
}

fn parse_kind(s: &str) -> std::result::Result<EncoderKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

const INDEX_NAME: &str = "index.csv";

#[derive(Serialize, Deserialize)]
struct IndexRow {
    id: String,
    label: Label,
    file: String,
}

fn select(data: Vec<LabeledImage>, subset: Subset, split: &SplitArgs) -> Result<Vec<LabeledImage>> {
    if subset == Subset::All {
        return Ok(data);
    }
    let labels: Vec<Label> = data.iter().map(|d| d.label).collect();
    let (tr, te) = split_indices(&labels, split.train_fraction, split.split_seed)?;
    let keep = if subset == Subset::Train { tr } else { te };
    let mut data: Vec<Option<LabeledImage>> = data.into_iter().map(Some).collect();
    Ok(keep.into_iter().filter_map(|i| data[i].take()).collect())
}

fn read_descriptor_dir(dir: &Path) -> Result<Vec<(DescriptorSet, Label)>> {
    let mut r = csv::Reader::from_path(dir.join(INDEX_NAME))?;
    let mut out = Vec::new();
    for row in r.deserialize::<IndexRow>() {
        let row = row?;
        let text = fs::read_to_string(dir.join(&row.file))?;
        out.push((DescriptorSet::read_csv(row.id, &text)?, row.label));
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("descriptor index"));
    }
    Ok(out)
}

fn sampled_rows(sets: &[(DescriptorSet, Label)], cap: usize, pca: Option<&PcaModel>) -> Result<Vec<Vec<f64>>> {
    let quota = sample_quota(cap, sets.len());
    let mut rows = Vec::new();
    for (ds, _) in sets {
        let ds = match pca {
            Some(p) => project_set(p, ds)?,
            None => ds.clone(),
        };
        rows.extend(sample_vectors(&ds, quota));
    }
    Ok(rows)
}

fn write_curves(dir: &Path, prefix: &str, scores: &[ScoredSample]) -> Result<(f64, f64)> {
    let (roc, auc) = roc_curve(scores)?;
    let yc = accuracy_vs_yield(scores, &default_yield_grid())?;
    write_atomic(&dir.join(format!("{prefix}roc.csv")), roc.to_csv_string().as_bytes())?;
    write_atomic(&dir.join(format!("{prefix}yield.csv")), yc.to_csv_string().as_bytes())?;
    Ok((accuracy(scores)?, auc))
}

fn write_scores(path: &Path, scores: &[ScoredSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in scores {
        w.serialize(s)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

fn run(cli: Cli) -> Result<()> {
    let mode = if cli.sequential {
        Parallelism::Sequential
    } else {
        Parallelism::Parallel
    };
    match cli.command {
        Command::SynthGen(a) => {
            let spec = SyntheticSpec {
                count: a.count,
                positive_fraction: a.positive_fraction,
                width: a.width,
                height: a.height,
                noise_sigma: a.noise,
                seed: a.seed,
                occlusion_rate: a.occlusion,
            };
            let data = generate_synthetic(&spec)?;
            let manifest = write_dataset(&a.out, &data)?;
            println!("wrote {} images, manifest {}", data.len(), manifest.display());
        }
        Command::Extract(a) => {
            let data = select(read_dataset(&a.manifest)?, a.subset, &a.split)?;
            let params = DenseParams {
                patch: a.patch,
                stride: a.stride,
                levels: a.levels,
                ..Default::default()
            };
            let items: Vec<(&str, _)> = data.iter().map(|d| (d.id.as_str(), &d.image)).collect();
            let sets = extract_corpus(&items, &params, mode).map_err(|e| e.at(Stage::Extract))?;
            fs::create_dir_all(&a.out)?;
            let mut index = csv::Writer::from_path(a.out.join(INDEX_NAME))?;
            for (ds, d) in sets.iter().zip(&data) {
                let file = format!("{}.csv", d.id);
                let mut w = BufWriter::new(File::create(a.out.join(&file))?);
                ds.write_csv(&mut w)?;
                index.serialize(IndexRow {
                    id: d.id.clone(),
                    label: d.label,
                    file,
                })?;
            }
            index.flush()?;
            let total: usize = sets.iter().map(|s| s.len()).sum();
            println!("extracted {total} descriptors from {} images", sets.len());
        }
        Command::TrainPca(a) => {
            let sets = read_descriptor_dir(&a.descriptors)?;
            let rows = sampled_rows(&sets, a.samples, None)?;
            let pca = fit_pca(&rows, a.pca_dim).map_err(|e| e.at(Stage::Pca))?;
            write_json(&a.out, &pca)?;
            println!("pca {} -> {} from {} descriptors", pca.d_in(), pca.d_out(), rows.len());
        }
        Command::TrainCodebook(a) => train_vocab(a, EncoderKind::Vlad, mode)?,
        Command::TrainGmm(a) => train_vocab(a, EncoderKind::Fisher, mode)?,
        Command::Encode(a) => {
            let sets = read_descriptor_dir(&a.descriptors)?;
            let pca: Option<PcaModel> = a.pca.as_deref().map(read_json).transpose()?;
            let vocab: Vocabulary = read_json(&a.vocabulary)?;
            vocab.validate()?;
            let encoder = Encoder::new(a.encoder, &vocab).map_err(|e| e.at(Stage::Encode))?;
            let reduced: Vec<DescriptorSet> = sets
                .iter()
                .map(|(ds, _)| match &pca {
                    Some(p) => project_set(p, ds),
                    None => Ok(ds.clone()),
                })
                .collect::<Result<_>>()
                .map_err(|e| e.at(Stage::Pca))?;
            let mut vectors = encoder.encode_corpus(&reduced, mode).map_err(|e| e.at(Stage::Encode))?;
            let final_pca = match (a.final_pca, &a.final_pca_model) {
                (Some(d), _) => {
                    let rows: Vec<Vec<f64>> = vectors.iter().map(|v| v.values.clone()).collect();
                    let p = fit_pca(&rows, d).map_err(|e| e.at(Stage::FinalPca))?;
                    if let Some(path) = &a.final_pca_out {
                        write_json(path, &p)?;
                    }
                    Some(p)
                }
                (None, Some(path)) => Some(read_json(path)?),
                (None, None) => None,
            };
            if let Some(p) = &final_pca {
                vectors = vectors
                    .iter()
                    .map(|v| compress(p, v))
                    .collect::<Result<_>>()
                    .map_err(|e| e.at(Stage::FinalPca))?;
            }
            let rows: Vec<(String, i8, EncodedVector)> = sets
                .iter()
                .zip(vectors)
                .map(|((ds, l), v)| (ds.source_id.clone(), l.sign(), v))
                .collect();
            let m = EncodedMatrix::from_vectors(rows)?;
            write_atomic(&a.out, &m.to_bytes()?)?;
            if let Some(path) = &a.csv {
                write_atomic(path, m.to_csv()?.as_bytes())?;
            }
            println!("encoded {} vectors of length {}", m.rows.len(), m.dim);
        }
        Command::TrainSvm(a) => {
            let m = EncodedMatrix::read(File::open(&a.matrix)?)?;
            let vectors = m.vectors();
            let data: Vec<(&EncodedVector, i8)> = vectors.iter().zip(&m.rows).map(|(v, r)| (v, r.label)).collect();
            let cfg = SvmConfig {
                lambda: a.lambda,
                epochs: a.epochs,
                seed: a.seed,
            };
            let model = train_svm(&data, &cfg).map_err(|e| e.at(Stage::Classifier))?;
            write_json(&a.out, &model)?;
            println!("trained on {} vectors", data.len());
        }
        Command::Evaluate(a) => {
            let scores = match (&a.matrix, &a.classifier, &a.model, &a.manifest) {
                (Some(mp), Some(cp), _, _) => {
                    let m = EncodedMatrix::read(File::open(mp)?)?;
                    let clf: LinearModel = read_json(cp)?;
                    clf.validate()?;
                    m.rows
                        .iter()
                        .enumerate()
                        .map(|(i, r)| Ok(ScoredSample::new(r.id.clone(), clf.score(&m.vector(i))?, r.label)))
                        .collect::<Result<Vec<_>>>()
                }
                (_, _, Some(model), Some(manifest)) => {
                    let model = PipelineModel::load(model)?;
                    let data = read_dataset(manifest)?;
                    data.iter()
                        .map(|d| Ok(ScoredSample::new(d.id.clone(), score_image(&model, d)?, d.label.sign())))
                        .collect::<Result<Vec<_>>>()
                }
                _ => {
                    return Err(Error::InvalidParameter(
                        "evaluate needs --matrix with --classifier, or --model with --manifest".into(),
                    ))
                }
            }
            .map_err(|e| e.at(Stage::Evaluate))?;
            fs::create_dir_all(&a.out)?;
            let (acc, auc) = write_curves(&a.out, "", &scores).map_err(|e| e.at(Stage::Evaluate))?;
            write_scores(&a.out.join("scores.csv"), &scores)?;
            println!("accuracy {acc:.4} auc {auc:.4} on {} samples", scores.len());
        }
        Command::DetectFace(a) => {
            let data = read_dataset(&a.manifest)?;
            let cfg = DetectorConfig {
                parallelism: mode,
                ..Default::default()
            };
            let (model, threshold, eval): (PartMixtureModel, f64, Vec<&LabeledImage>) = match &a.model {
                Some(p) => {
                    let m = PipelineModel::load(p)?;
                    let dpm = m
                        .dpm
                        .ok_or_else(|| Error::InvalidModel("model file has no part model".into()))?;
                    let t = a.threshold.or(m.dpm_threshold).unwrap_or(0.0);
                    (dpm, t, data.iter().collect())
                }
                None => {
                    let labels: Vec<Label> = data.iter().map(|d| d.label).collect();
                    let (tr, te) = split_indices(&labels, a.split.train_fraction, a.split.split_seed)?;
                    let pos: Vec<_> = tr
                        .iter()
                        .filter_map(|&i| data[i].gt_face_box.map(|b| (&data[i].image, b)))
                        .collect();
                    let neg: Vec<_> = tr
                        .iter()
                        .filter(|&&i| data[i].label == Label::Empty)
                        .map(|&i| &data[i].image)
                        .collect();
                    let m = build_face_model(&pos, &neg, &FaceModelConfig::default())?;
                    let t = match a.threshold {
                        Some(t) => t,
                        None => {
                            let train: Vec<ScoredSample> = tr
                                .iter()
                                .map(|&i| {
                                    Ok(ScoredSample::new(
                                        data[i].id.clone(),
                                        detect(&m, &data[i].image, &cfg)?.score,
                                        data[i].label.sign(),
                                    ))
                                })
                                .collect::<Result<_>>()?;
                            best_accuracy_threshold(&train)?.0
                        }
                    };
                    (m, t, te.iter().map(|&i| &data[i]).collect())
                }
            };
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["id", "score", "decision", "x", "y", "w", "h"])?;
            let mut scores = Vec::with_capacity(eval.len());
            let mut correct = 0usize;
            for d in &eval {
                let (decision, det) = detect_occupancy(&model, &d.image, threshold, &cfg)?;
                let r = det.rect;
                let dec = match decision {
                    Occupancy::Person => "person",
                    Occupancy::Empty => "empty",
                };
                w.write_record([
                    d.id.clone(),
                    det.score.to_string(),
                    dec.to_string(),
                    r.x.to_string(),
                    r.y.to_string(),
                    r.w.to_string(),
                    r.h.to_string(),
                ])?;
                correct += usize::from((decision == Occupancy::Person) == (d.label == Label::Person));
                scores.push(ScoredSample::new(d.id.clone(), det.score, d.label.sign()));
            }
            fs::create_dir_all(&a.out)?;
            let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            write_atomic(&a.out.join("detections.csv"), &bytes)?;
            let acc = correct as f64 / eval.len() as f64;
            match write_curves(&a.out, "face_", &scores) {
                Ok((_, auc)) => println!(
                    "decision accuracy {acc:.4} auc {auc:.4} at threshold {threshold} on {} images",
                    eval.len()
                ),
                Err(Error::SingleClass) => println!(
                    "decision accuracy {acc:.4} at threshold {threshold} on {} images",
                    eval.len()
                ),
                Err(e) => return Err(e),
            }
        }
        Command::RunAll(a) => run_all(a, mode)?,
    }
    Ok(())
}

fn train_vocab(a: VocabArgs, kind: EncoderKind, mode: Parallelism) -> Result<()> {
    let sets = read_descriptor_dir(&a.descriptors)?;
    let pca: Option<PcaModel> = a.pca.as_deref().map(read_json).transpose()?;
    let rows = sampled_rows(&sets, a.samples, pca.as_ref()).map_err(|e| e.at(Stage::Pca))?;
    let vocab = fit_vocabulary(kind, &rows, a.k, a.seed, a.max_iter, mode).map_err(|e| e.at(Stage::Codebook))?;
    write_json(&a.out, &vocab)?;
    if let Some(path) = &a.dump {
        write_atomic(path, vocab.debug_dump().as_bytes())?;
    }
    println!(
        "vocabulary k={} d={} from {} descriptors",
        vocab.k(),
        vocab.d(),
        rows.len()
    );
    Ok(())
}

fn run_all(a: RunAllArgs, mode: Parallelism) -> Result<()> {
    let data = match &a.manifest {
        Some(m) => read_dataset(m)?,
        None => generate_synthetic(&SyntheticSpec {
            count: a.count,
            seed: a.seed,
            ..Default::default()
        })?,
    };
    let grid = a.encoder.len() * a.k.len() > 1;
    let mut runs = Vec::new();
    for &kind in &a.encoder {
        for &k in &a.k {
            let cfg = PipelineConfig {
                pca_dim: Some(a.pca_dim),
                encoder: kind,
                k,
                final_pca: a.final_pca,
                svm: SvmConfig {
                    lambda: a.lambda,
                    epochs: a.epochs,
                    seed: a.seed,
                },
                seed: a.seed,
                train_fraction: a.split.train_fraction,
                split_seed: a.split.split_seed,
                face_baseline: a.face_baseline,
                parallelism: mode,
                ..Default::default()
            };
            let out = run_pipeline(&cfg, &data)?;
            let dir = if grid {
                a.out.join(format!("{kind}_k{k}"))
            } else {
                a.out.clone()
            };
            out.write_artifacts(&dir)?;
            let m = &out.metrics;
            print!(
                "{kind} k={k}: accuracy {:.4} auc {:.4} accuracy@80% {:.4}",
                m.accuracy,
                m.auc,
                m.accuracy_at_yield(0.8).unwrap_or(f64::NAN)
            );
            if let Some(f) = &m.face {
                print!(" face {:.4}", f.best_accuracy);
            }
            println!();
            runs.push(RunAccuracy {
                kind,
                k,
                accuracy: m.accuracy,
            });
        }
    }
    write_atomic(&a.out.join("accuracy.csv"), accuracy_table(&runs).as_bytes())?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
