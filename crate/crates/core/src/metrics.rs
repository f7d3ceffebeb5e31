//! Overlap, ROC/AUC, accuracy-versus-yield and accuracy grids.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderKind;
use crate::error::{Error, Result};

/// Detections with overlap strictly above this count as true positives.
pub const TRUE_POSITIVE_OVERLAP: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w >= 0.0 && h >= 0.0) || ![x, y, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter(format!("bad rect {x},{y},{w},{h}")));
        }
        Ok(Rect { x, y, w, h })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }
}

/// Intersection over union; 0 when both rectangles have zero area.
pub fn overlap(a: &Rect, b: &Rect) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn is_true_positive(det: &Rect, gt: &Rect) -> bool {
    overlap(det, gt) > TRUE_POSITIVE_OVERLAP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: String,
    pub score: f64,
    /// +1 or −1.
    pub label: i8,
}

impl ScoredSample {
    pub fn new(id: impl Into<String>, score: f64, label: i8) -> Self {
        ScoredSample {
            id: id.into(),
            score,
            label,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    Roc,
    AccuracyVsYield,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCurve {
    pub kind: CurveKind,
    pub points: Vec<(f64, f64)>,
}

impl EvalCurve {
    /// Two-column `x,y` CSV with a header naming the axes.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let header = match self.kind {
            CurveKind::Roc => "fpr,tpr",
            CurveKind::AccuracyVsYield => "yield,accuracy",
        };
        writeln!(w, "{header}")?;
        for (x, y) in &self.points {
            writeln!(w, "{x},{y}")?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv is ascii")
    }
}

fn check_samples(samples: &[ScoredSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("scored samples"));
    }
    for s in samples {
        if !s.score.is_finite() {
            return Err(Error::NonFinite("sample score"));
        }
        if s.label != 1 && s.label != -1 {
            return Err(Error::InvalidParameter(format!("label {} is not ±1", s.label)));
        }
    }
    Ok(())
}

fn class_counts(samples: &[ScoredSample]) -> Result<(usize, usize)> {
    let pos = samples.iter().filter(|s| s.label == 1).count();
    let neg = samples.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    Ok((pos, neg))
}

/// Sorted by score descending, ties grouped.
fn score_groups(samples: &[ScoredSample]) -> Vec<(f64, usize, usize)> {
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for s in sorted {
        let (tp, fp) = if s.label == 1 { (1, 0) } else { (0, 1) };
        match groups.last_mut() {
            Some(g) if g.0 == s.score => {
                g.1 += tp;
                g.2 += fp;
            }
            _ => groups.push((s.score, tp, fp)),
        }
    }
    groups
}

/// ROC points `(FPR, TPR)` from `(0, 0)` to `(1, 1)` and trapezoidal AUC.
pub fn roc_curve(samples: &[ScoredSample]) -> Result<(EvalCurve, f64)> {
    check_samples(samples)?;
    let (pos, neg) = class_counts(samples)?;
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    for (_, gtp, gfp) in score_groups(samples) {
        let (x0, y0) = (fp as f64 / neg as f64, tp as f64 / pos as f64);
        tp += gtp;
        fp += gfp;
        let (x1, y1) = (fp as f64 / neg as f64, tp as f64 / pos as f64);
        auc += (x1 - x0) * (y0 + y1) / 2.0;
        points.push((x1, y1));
    }
    Ok((
        EvalCurve {
            kind: CurveKind::Roc,
            points,
        },
        auc,
    ))
}

/// Threshold on the ROC sweep with the highest accuracy, `score ≥ t ⇒ +1`.
/// Returns `(threshold, accuracy)`; ties keep the higher threshold.
pub fn best_accuracy_threshold(samples: &[ScoredSample]) -> Result<(f64, f64)> {
    check_samples(samples)?;
    let (pos, neg) = class_counts(samples)?;
    let n = (pos + neg) as f64;
    let groups = score_groups(samples);
    // threshold above every score: everything negative
    let mut best = (f64::INFINITY, neg as f64 / n);
    let (mut tp, mut fp) = (0usize, 0usize);
    for (score, gtp, gfp) in groups {
        tp += gtp;
        fp += gfp;
        let acc = (tp + (neg - fp)) as f64 / n;
        if acc > best.1 {
            best = (score, acc);
        }
    }
    Ok(best)
}

pub fn accuracy(samples: &[ScoredSample]) -> Result<f64> {
    check_samples(samples)?;
    let correct = samples.iter().filter(|s| decide(s.score) == s.label).count();
    Ok(correct as f64 / samples.len() as f64)
}

#[inline]
fn decide(score: f64) -> i8 {
    if score >= 0.0 {
        1
    } else {
        -1
    }
}

/// Number of samples decided at yield `q`: `⌈q·N⌉`, with products within
/// 1e-9 of an integer snapped to it first.
pub fn decided_count(q: f64, n: usize) -> usize {
    let x = q * n as f64;
    let r = x.round();
    let c = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (c as usize).clamp(1, n)
}

/// Accuracy over the `⌈q·N⌉` most confident samples (by |score|), per yield.
pub fn accuracy_vs_yield(samples: &[ScoredSample], grid: &[f64]) -> Result<EvalCurve> {
    check_samples(samples)?;
    if let Some(q) = grid.iter().find(|q| !(**q > 0.0 && **q <= 1.0)) {
        return Err(Error::InvalidParameter(format!("yield {q} outside (0, 1]")));
    }
    let mut ranked: Vec<&ScoredSample> = samples.iter().collect();
    ranked.sort_by(|a, b| match b.score.abs().total_cmp(&a.score.abs()) {
        Ordering::Equal => a.id.cmp(&b.id),
        o => o,
    });
    let mut correct_prefix = Vec::with_capacity(ranked.len() + 1);
    correct_prefix.push(0usize);
    for s in &ranked {
        let last = *correct_prefix.last().expect("seeded");
        correct_prefix.push(last + usize::from(decide(s.score) == s.label));
    }
    let points = grid
        .iter()
        .map(|&q| {
            let m = decided_count(q, ranked.len());
            (q, correct_prefix[m] as f64 / m as f64)
        })
        .collect();
    Ok(EvalCurve {
        kind: CurveKind::AccuracyVsYield,
        points,
    })
}

/// Yields 0.05, 0.10, …, 1.00.
pub fn default_yield_grid() -> Vec<f64> {
    (1..=20).map(|i| i as f64 / 20.0).collect()
}

/// One cell of an accuracy grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAccuracy {
    pub kind: EncoderKind,
    pub k: usize,
    pub accuracy: f64,
}

/// CSV grid with one row per method and one column per K; unrun cells blank.
pub fn accuracy_table(runs: &[RunAccuracy]) -> String {
    let ks: BTreeSet<usize> = runs.iter().map(|r| r.k).collect();
    let mut cells: BTreeMap<(EncoderKind, usize), f64> = BTreeMap::new();
    for r in runs {
        cells.insert((r.kind, r.k), r.accuracy);
    }
    let mut out = String::from("method");
    for k in &ks {
        out.push_str(&format!(",{k}"));
    }
    out.push('\n');
    for kind in EncoderKind::ALL {
        if !runs.iter().any(|r| r.kind == kind) {
            continue;
        }
        out.push_str(kind.as_str());
        for k in &ks {
            out.push(',');
            if let Some(a) = cells.get(&(kind, *k)) {
                out.push_str(&format!("{a:.4}"));
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn r(x: f64, y: f64, w: f64, h: f64) -> Rect {
        Rect::new(x, y, w, h).unwrap()
    }

    fn samples(v: &[(f64, i8)]) -> Vec<ScoredSample> {
        v.iter()
            .enumerate()
            .map(|(i, &(s, l))| ScoredSample::new(format!("{i:03}"), s, l))
            .collect()
    }

    #[test]
    fn overlap_examples() {
        let a = r(0.0, 0.0, 10.0, 10.0);
        assert_eq!(overlap(&a, &a), 1.0);
        assert_eq!(overlap(&a, &r(20.0, 0.0, 5.0, 5.0)), 0.0);
        assert_eq!(overlap(&a, &r(5.0, 0.0, 10.0, 10.0)), 1.0 / 3.0);
        assert_eq!(overlap(&r(1.0, 1.0, 0.0, 0.0), &r(1.0, 1.0, 0.0, 0.0)), 0.0);
        assert!(Rect::new(0.0, 0.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn true_positive_is_strict() {
        let a = r(0.0, 0.0, 10.0, 10.0);
        assert!(is_true_positive(&a, &a));
        // IoU 60/100 = 0.6 exactly
        let b = r(0.0, 0.0, 6.0, 10.0);
        assert_eq!(overlap(&a, &b), 0.6);
        assert!(!is_true_positive(&b, &a));
        assert!(!is_true_positive(&a, &r(5.0, 0.0, 10.0, 10.0)));
    }

    #[test]
    fn roc_extremes() {
        let (_, auc) = roc_curve(&samples(&[(0.9, 1), (0.8, 1), (0.1, -1), (-0.3, -1)])).unwrap();
        assert_eq!(auc, 1.0);
        let (c, auc) = roc_curve(&samples(&[(0.5, 1), (0.5, -1), (0.5, -1), (0.5, 1)])).unwrap();
        assert_eq!(c.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(auc, 0.5);
        assert!(matches!(roc_curve(&samples(&[(0.1, 1)])), Err(Error::SingleClass)));
    }

    #[test]
    fn roc_hand_table() {
        // scores: .9+ .8- .7+ .7- .4+ .2-   (P = N = 3)
        let s = samples(&[(0.9, 1), (0.8, -1), (0.7, 1), (0.7, -1), (0.4, 1), (0.2, -1)]);
        let (c, auc) = roc_curve(&s).unwrap();
        let third = 1.0 / 3.0;
        let expect = vec![
            (0.0, 0.0),
            (0.0, third),
            (third, third),
            (2.0 * third, 2.0 * third),
            (2.0 * third, 1.0),
            (1.0, 1.0),
        ];
        for (p, q) in c.points.iter().zip(&expect) {
            assert!((p.0 - q.0).abs() < 1e-15 && (p.1 - q.1).abs() < 1e-15);
        }
        assert_eq!(c.points.len(), expect.len());
        // trapezoids: 0 + 1/9 + 1/6 + 0 + 1/3
        assert!((auc - 11.0 / 18.0).abs() < 1e-15);
    }

    #[test]
    fn yield_identities() {
        let s = samples(&[(2.0, 1), (-1.5, -1), (0.9, -1), (-0.2, 1), (3.0, 1), (0.01, -1)]);
        let c = accuracy_vs_yield(&s, &[1.0]).unwrap();
        assert_eq!(c.points[0].1, accuracy(&s).unwrap());
        // single wrong sample with the lowest |score|
        let s = samples(&[(2.0, 1), (-1.5, -1), (0.9, 1), (-0.7, -1), (0.05, -1)]);
        let c = accuracy_vs_yield(&s, &[0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
        for &(q, a) in &c.points[..4] {
            assert_eq!(a, 1.0, "yield {q}");
        }
        assert_eq!(c.points[4].1, 0.8);
        assert!(accuracy_vs_yield(&s, &[0.0]).is_err());
        assert!(accuracy_vs_yield(&[], &[1.0]).is_err());
    }

    #[test]
    fn yield_matches_recount() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let s: Vec<ScoredSample> = (0..137)
            .map(|i| {
                let l = if rng.random::<bool>() { 1 } else { -1 };
                ScoredSample::new(format!("{i:04}"), (rng.random::<f64>() - 0.5 + 0.3 * l as f64) * 4.0, l)
            })
            .collect();
        let grid = default_yield_grid();
        let c = accuracy_vs_yield(&s, &grid).unwrap();
        for (i, &q) in grid.iter().enumerate() {
            let mut sorted = s.clone();
            sorted.sort_by(|a, b| b.score.abs().partial_cmp(&a.score.abs()).unwrap().then(a.id.cmp(&b.id)));
            let m = ((q * 137.0) - 1e-9).ceil() as usize;
            let ok = sorted[..m]
                .iter()
                .filter(|x| (x.score >= 0.0) == (x.label == 1))
                .count();
            assert_eq!(c.points[i].1, ok as f64 / m as f64);
        }
    }

    #[test]
    fn decided_count_snaps() {
        assert_eq!(decided_count(0.8, 400), 320);
        assert_eq!(decided_count(0.7, 10), 7);
        assert_eq!(decided_count(0.01, 10), 1);
        assert_eq!(decided_count(0.55, 10), 6);
    }

    #[test]
    fn best_threshold() {
        let s = samples(&[(0.9, 1), (0.8, 1), (0.3, -1), (0.2, 1), (0.1, -1)]);
        let (t, a) = best_accuracy_threshold(&s).unwrap();
        assert_eq!((t, a), (0.8, 0.8));
    }

    #[test]
    fn table_layout() {
        assert_eq!(accuracy_table(&[]), "method\n");
        let one = accuracy_table(&[RunAccuracy {
            kind: EncoderKind::Fisher,
            k: 256,
            accuracy: 0.9596,
        }]);
        assert_eq!(one, "method,256\nfisher,0.9596\n");
        let mut runs = vec![];
        for kind in EncoderKind::ALL {
            for k in [32, 64] {
                runs.push(RunAccuracy {
                    kind,
                    k,
                    accuracy: 0.5 + k as f64 / 1000.0,
                });
            }
        }
        let a = accuracy_table(&runs);
        runs.reverse();
        assert_eq!(a, accuracy_table(&runs));
        assert_eq!(
            a,
            "method,32,64\nbow,0.5320,0.5640\nvlad,0.5320,0.5640\nfisher,0.5320,0.5640\n"
        );
        let sparse = accuracy_table(&[
            RunAccuracy {
                kind: EncoderKind::Bow,
                k: 4096,
                accuracy: 0.9424,
            },
            RunAccuracy {
                kind: EncoderKind::Vlad,
                k: 32,
                accuracy: 0.9244,
            },
        ]);
        assert_eq!(sparse, "method,32,4096\nbow,,0.9424\nvlad,0.9244,\n");
    }

    proptest! {
        #[test]
        fn overlap_symmetric_bounded(ax in -10i32..10, ay in -10i32..10, aw in 0i32..10, ah in 0i32..10,
                                     bx in -10i32..10, by in -10i32..10, bw in 0i32..10, bh in 0i32..10) {
            let a = r(ax as f64, ay as f64, aw as f64, ah as f64);
            let b = r(bx as f64, by as f64, bw as f64, bh as f64);
            let o = overlap(&a, &b);
            prop_assert_eq!(o, overlap(&b, &a));
            prop_assert!((0.0..=1.0).contains(&o));
            if a.area() > 0.0 {
                prop_assert_eq!(overlap(&a, &a), 1.0);
            }
        }

        #[test]
        fn roc_monotone_and_inverts(v in proptest::collection::vec((-5i32..5, any::<bool>()), 2..40)) {
            let mut s: Vec<ScoredSample> = v.iter().enumerate()
                .map(|(i, &(sc, l))| ScoredSample::new(format!("{i}"), sc as f64, if l { 1 } else { -1 }))
                .collect();
            s[0].label = 1;
            s[1].label = -1;
            let (c, auc) = roc_curve(&s).unwrap();
            prop_assert!(c.points.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
            prop_assert!((0.0..=1.0).contains(&auc));
            let inv: Vec<ScoredSample> = s.iter().map(|x| ScoredSample { label: -x.label, ..x.clone() }).collect();
            let (_, auc_inv) = roc_curve(&inv).unwrap();
            prop_assert!((auc + auc_inv - 1.0).abs() < 1e-12);
            // strictly monotone transform leaves everything unchanged
            let t: Vec<ScoredSample> = s.iter().map(|x| ScoredSample { score: 3.0 * x.score + 1.0, ..x.clone() }).collect();
            prop_assert_eq!(roc_curve(&t).unwrap().1, auc);
            let scaled: Vec<ScoredSample> = s.iter().map(|x| ScoredSample { score: 2.5 * x.score, ..x.clone() }).collect();
            prop_assert_eq!(
                accuracy_vs_yield(&s, &default_yield_grid()).unwrap(),
                accuracy_vs_yield(&scaled, &default_yield_grid()).unwrap()
            );
        }
    }
}
