//! End-to-end acceptance checks, one PASS/FAIL line each.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use occupancy_core::codebooks::{
    train_gmm_traced, train_kmeans_traced, GmmConfig, GmmModel, KmeansCodebook, KmeansConfig,
};
use occupancy_core::dataset::{generate_synthetic, SyntheticSpec};
use occupancy_core::descriptors::{DescriptorSet, LocalDescriptor};
use occupancy_core::dpm::infer_best;
use occupancy_core::encoders::{encode_bow, encode_fv, encode_vlad, fisher_gradient, EncodedVector, EncoderKind};
use occupancy_core::metrics::{accuracy, accuracy_vs_yield, is_true_positive, overlap, roc_curve, Rect, ScoredSample};
use occupancy_core::model_file::PipelineModel;
use occupancy_core::pipeline::{run_pipeline, score_image, PipelineConfig};
use occupancy_core::Parallelism;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_set(rng: &mut ChaCha8Rng, t: usize, d: usize, spread: f64) -> DescriptorSet {
    let descs = (0..t)
        .map(|_| LocalDescriptor {
            vector: (0..d).map(|_| spread * rng.sample::<f64, _>(StandardNormal)).collect(),
            x_norm: rng.random(),
            y_norm: rng.random(),
            scale_level: rng.random_range(0..3),
        })
        .collect();
    DescriptorSet::new("r", d, descs).unwrap()
}

fn random_gmm(rng: &mut ChaCha8Rng, k: usize, d: usize) -> GmmModel {
    let mut w: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    let means = (0..k * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let vars = (0..k * d).map(|_| rng.random_range(0.3..2.0)).collect();
    GmmModel::new(w, means, vars, d).unwrap()
}

fn fv_gradient_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for inst in 0..50 {
        let gmm = random_gmm(&mut rng, 3, 4);
        let ds = random_set(&mut rng, 50, 4, 1.5);
        let rows: Vec<Vec<f64>> = ds.descriptors.iter().map(|d| d.vector.clone()).collect();
        let got = fisher_gradient(&ds, &gmm).map_err(|e| e.to_string())?;
        let want = common::fd_fisher(&gmm, &rows, 1e-6);
        let diff: f64 = got.iter().zip(&want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = want.iter().map(|b| b * b).sum::<f64>().sqrt();
        let rel = diff / norm;
        worst = worst.max(rel);
        ensure(rel <= 1e-5, || format!("instance {inst}: relative error {rel:e}"))?;
    }
    Ok(format!("worst relative error {worst:.2e}"))
}

fn dp_vs_exhaustive() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut parts = 0;
    for inst in 0..200 {
        let (cx, cy) = (rng.random_range(2..=6), rng.random_range(2..=6));
        let model = common::random_model(&mut rng, 4, cx, cy);
        let fmap = common::random_map(&mut rng, cx, cy, model.bins);
        let det = infer_best(&model, &fmap).map_err(|e| e.to_string())?;
        let (score, m, locs) = common::exhaustive(&model, &fmap);
        parts += model.mixtures.iter().map(|t| t.parts.len()).sum::<usize>();
        ensure(det.score == score, || {
            format!("instance {inst}: score {} vs {score}", det.score)
        })?;
        ensure(det.mixture == m && det.cells == locs, || {
            format!(
                "instance {inst}: argmax {}/{:?} vs {m}/{locs:?}",
                det.mixture, det.cells
            )
        })?;
    }
    Ok(format!("200 models, {parts} parts in total"))
}

fn clustered(rng: &mut ChaCha8Rng, n: usize, d: usize, c: usize) -> Vec<Vec<f64>> {
    let centers: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..d).map(|_| rng.random_range(-5.0..5.0)).collect())
        .collect();
    (0..n)
        .map(|_| {
            let m = &centers[rng.random_range(0..c)];
            m.iter().map(|v| v + rng.sample::<f64, _>(StandardNormal)).collect()
        })
        .collect()
}

fn em_monotonicity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut em_steps, mut km_steps) = (0, 0);
    let mut worst_drop = 0.0f64;
    for set in 0..100 {
        let d = rng.random_range(1..=5);
        let k = rng.random_range(2..=5);
        let (n, c) = (rng.random_range(150..400), rng.random_range(1..=6));
        let data = clustered(&mut rng, n, d, c);
        let seed = rng.random();
        let gmm = train_gmm_traced(&data, &GmmConfig::new(k, seed)).map_err(|e| e.to_string())?;
        for w in gmm.log_likelihood_trace.windows(2) {
            worst_drop = worst_drop.max(w[0] - w[1]);
            ensure(w[1] >= w[0] - 1e-9, || {
                format!("set {set}: log-likelihood {} -> {}", w[0], w[1])
            })?;
        }
        em_steps += gmm.log_likelihood_trace.len();
        let km = train_kmeans_traced(&data, &KmeansConfig::new(k, seed)).map_err(|e| e.to_string())?;
        for w in km.sse_trace.windows(2) {
            ensure(w[1] <= w[0] * (1.0 + 1e-12), || {
                format!("set {set}: sse {} -> {}", w[0], w[1])
            })?;
        }
        km_steps += km.sse_trace.len();
    }
    Ok(format!(
        "{em_steps} EM and {km_steps} Lloyd iterations, largest log-likelihood drop {worst_drop:.1e}"
    ))
}

fn encoder_contracts() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 64;
    for k in [32, 64, 128, 256] {
        let gmm = random_gmm(&mut rng, k, d);
        let cb = KmeansCodebook::new(k, d, gmm.means.clone()).unwrap();
        let ds = random_set(&mut rng, 300, d, 1.2);
        let mut shuffled = ds.clone();
        shuffled.descriptors.shuffle(&mut rng);
        type Enc<'a> = Box<dyn Fn(&DescriptorSet) -> occupancy_core::Result<EncodedVector> + 'a>;
        let encoders: [(EncoderKind, Enc); 3] = [
            (EncoderKind::Bow, Box::new(|s| encode_bow(s, &cb))),
            (EncoderKind::Vlad, Box::new(|s| encode_vlad(s, &cb))),
            (EncoderKind::Fisher, Box::new(|s| encode_fv(s, &gmm))),
        ];
        for (kind, enc) in &encoders {
            let v = enc(&ds).map_err(|e| e.to_string())?;
            let want = if *kind == EncoderKind::Bow { 21 * k } else { k * d };
            ensure(v.values.len() == want, || {
                format!("{kind} K={k}: length {}", v.values.len())
            })?;
            ensure((v.norm() - 1.0).abs() <= 1e-9, || {
                format!("{kind} K={k}: norm {}", v.norm())
            })?;
            let w = enc(&shuffled).map_err(|e| e.to_string())?;
            let same = v.values.iter().zip(&w.values).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(same, || format!("{kind} K={k}: shuffled input changed the encoding"))?;
        }
    }
    Ok("K in {32, 64, 128, 256}, d = 64".into())
}

struct CorpusRun {
    accuracy: f64,
    y80: f64,
    y100: f64,
    face_accuracy: f64,
}

fn corpus_run() -> std::result::Result<CorpusRun, String> {
    let data = generate_synthetic(&SyntheticSpec::default()).map_err(|e| e.to_string())?;
    let cfg = PipelineConfig {
        face_baseline: true,
        ..Default::default()
    };
    let out = run_pipeline(&cfg, &data).map_err(|e| e.to_string())?;
    let m = &out.metrics;
    Ok(CorpusRun {
        accuracy: m.accuracy,
        y80: m.accuracy_at_yield(0.8).ok_or("no yield 0.8 point")?,
        y100: m.accuracy_at_yield(1.0).ok_or("no yield 1.0 point")?,
        face_accuracy: m.face.as_ref().ok_or("face baseline missing")?.best_accuracy,
    })
}

fn synthetic_accuracy(run: &std::result::Result<CorpusRun, String>) -> Check {
    let r = run.as_ref().map_err(|e| e.clone())?;
    let detail = format!(
        "accuracy {:.4}, yield 0.8 {:.4}, yield 1.0 {:.4}",
        r.accuracy, r.y80, r.y100
    );
    ensure(r.accuracy >= 0.9 && r.y80 >= r.y100, || detail.clone())?;
    Ok(detail)
}

fn baseline_ordering(run: &std::result::Result<CorpusRun, String>) -> Check {
    let r = run.as_ref().map_err(|e| e.clone())?;
    let detail = format!("fisher {:.4} vs part model {:.4}", r.accuracy, r.face_accuracy);
    ensure(r.accuracy >= r.face_accuracy, || detail.clone())?;
    Ok(detail)
}

fn metric_exactness() -> Check {
    let r = |x, y, w, h| Rect::new(x, y, w, h).unwrap();
    let third = overlap(&r(0.0, 0.0, 2.0, 2.0), &r(1.0, 0.0, 2.0, 2.0));
    ensure(third == 1.0 / 3.0, || format!("overlap {third}"))?;
    let gt = r(0.0, 0.0, 10.0, 10.0);
    ensure(overlap(&r(0.0, 0.0, 6.0, 10.0), &gt) == 0.6, || {
        "overlap 0.6 case".into()
    })?;
    ensure(!is_true_positive(&r(0.0, 0.0, 6.0, 10.0), &gt), || {
        "overlap 0.6 counted".into()
    })?;
    ensure(is_true_positive(&r(0.0, 0.0, 6.5, 10.0), &gt), || {
        "overlap 0.65 missed".into()
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in 1..60 {
        let s: Vec<ScoredSample> = (0..n)
            .map(|i| {
                let score = (rng.random_range(-8..=8) as f64) / 4.0;
                ScoredSample::new(format!("s{i}"), score, if rng.random() { 1 } else { -1 })
            })
            .collect();
        let full = accuracy_vs_yield(&s, &[1.0]).map_err(|e| e.to_string())?.points[0].1;
        let acc = accuracy(&s).map_err(|e| e.to_string())?;
        ensure(full == acc, || format!("n={n}: yield 1 accuracy {full} vs {acc}"))?;
    }
    let sep: Vec<ScoredSample> = (0..20)
        .map(|i| ScoredSample::new(format!("s{i}"), i as f64, if i >= 10 { 1 } else { -1 }))
        .collect();
    let (_, auc) = roc_curve(&sep).map_err(|e| e.to_string())?;
    ensure(auc == 1.0, || format!("separable auc {auc}"))?;
    Ok("overlap, strict threshold, full-yield accuracy, separable AUC".into())
}

fn determinism() -> Check {
    let data = generate_synthetic(&SyntheticSpec {
        count: 120,
        seed: 5,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let cfg = PipelineConfig {
        k: 8,
        pca_dim: Some(32),
        face_baseline: true,
        ..Default::default()
    };
    let seq = PipelineConfig {
        parallelism: Parallelism::Sequential,
        ..cfg.clone()
    };
    let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let mut outputs = Vec::new();
    for (c, dir) in [&cfg, &cfg, &seq].into_iter().zip(&dirs) {
        let out = run_pipeline(c, &data).map_err(|e| e.to_string())?;
        out.write_artifacts(dir.path()).map_err(|e| e.to_string())?;
        outputs.push(out);
    }
    for name in ["model.json", "metrics.json", "roc.csv", "yield.csv", "face_roc.csv"] {
        let read = |d: &tempfile::TempDir| std::fs::read(d.path().join(name)).unwrap();
        let first = read(&dirs[0]);
        ensure(first == read(&dirs[1]), || {
            format!("{name} differs between identical runs")
        })?;
        ensure(first == read(&dirs[2]), || {
            format!("{name} differs between parallel and sequential")
        })?;
    }
    let loaded = PipelineModel::load(&dirs[0].path().join("model.json")).map_err(|e| e.to_string())?;
    let out = &outputs[0];
    for s in &out.metrics.test_scores {
        let img = data.iter().find(|d| d.id == s.id).ok_or("test id not in corpus")?;
        let got = score_image(&loaded, img).map_err(|e| e.to_string())?;
        ensure(got.to_bits() == s.score.to_bits(), || {
            format!("{}: {got} vs {}", s.id, s.score)
        })?;
    }
    Ok(format!(
        "3 runs byte-identical, {} reloaded scores exact",
        out.metrics.test_scores.len()
    ))
}

fn report(n: usize, name: &str, t: Duration, r: &Check) -> bool {
    match r {
        Ok(d) => println!("PASS {n} {name}: {d} ({:.1}s)", t.as_secs_f64()),
        Err(d) => println!("FAIL {n} {name}: {d} ({:.1}s)", t.as_secs_f64()),
    }
    r.is_ok()
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let r = f();
    (r, t.elapsed())
}

fn main() -> ExitCode {
    let budget = |r: Check, t: Duration, limit: u64| match r {
        Ok(d) if t > Duration::from_secs(limit) => Err(format!("{d}, over the {limit}s budget")),
        other => other,
    };
    let mut ok = true;
    let (r, t) = timed(fv_gradient_oracle);
    ok &= report(1, "fisher gradient vs finite differences", t, &budget(r, t, 10));
    let (r, t) = timed(dp_vs_exhaustive);
    ok &= report(2, "tree inference vs exhaustive search", t, &budget(r, t, 30));
    let (r, t) = timed(em_monotonicity);
    ok &= report(3, "EM and k-means monotonicity", t, &r);
    let (r, t) = timed(encoder_contracts);
    ok &= report(4, "encoder length, norm and order invariance", t, &r);
    let (run, t) = timed(corpus_run);
    ok &= report(
        5,
        "synthetic corpus accuracy and yield",
        t,
        &budget(synthetic_accuracy(&run), t, 300),
    );
    ok &= report(6, "fisher pipeline vs part-model baseline", t, &baseline_ordering(&run));
    let (r, t) = timed(metric_exactness);
    ok &= report(7, "metric exactness", t, &r);
    let (r, t) = timed(determinism);
    ok &= report(8, "determinism and model round trip", t, &r);
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
