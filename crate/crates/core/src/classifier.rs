//! Linear SVM trained by stochastic gradient descent on the hinge loss.
//!
//! Step size follows `η_t = 1/(λ(t + t₀))` with `t₀ = 1/λ`. The bias is an
//! unregularized extra coordinate. The returned model is the average of the
//! iterates visited during the last epoch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{EncodedVector, Fingerprint};
use crate::error::{check_finite, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub lambda: f64,
    pub trained_on: Fingerprint,
}

impl LinearModel {
    pub fn validate(&self) -> Result<()> {
        check_finite(&self.weights, "classifier weights")?;
        check_finite(&[self.bias, self.lambda], "classifier bias")?;
        if self.weights.len() != self.trained_on.len {
            return Err(Error::InvalidModel(format!(
                "{} weights for fingerprint {}",
                self.weights.len(),
                self.trained_on
            )));
        }
        Ok(())
    }

    /// Raw margin `w·x + b`.
    pub fn score(&self, x: &EncodedVector) -> Result<f64> {
        if x.fingerprint() != self.trained_on {
            return Err(Error::FingerprintMismatch {
                expected: self.trained_on.to_string(),
                actual: x.fingerprint().to_string(),
            });
        }
        Ok(self.margin(&x.values))
    }

    #[inline]
    fn margin(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.bias
    }

    pub fn predict(&self, x: &EncodedVector) -> Result<i8> {
        Ok(if self.score(x)? >= 0.0 { 1 } else { -1 })
    }

    /// `λ/2 ‖w‖² + mean hinge loss`.
    pub fn objective(&self, data: &[(&EncodedVector, i8)]) -> f64 {
        let hinge: f64 = data
            .iter()
            .map(|(x, y)| (1.0 - *y as f64 * self.margin(&x.values)).max(0.0))
            .sum();
        0.5 * self.lambda * dot(&self.weights, &self.weights) + hinge / data.len() as f64
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            lambda: 1e-5,
            epochs: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SvmFit {
    pub model: LinearModel,
    /// Objective of the averaged model before training and after each epoch.
    pub objective_trace: Vec<f64>,
}

pub fn train_svm(data: &[(&EncodedVector, i8)], cfg: &SvmConfig) -> Result<LinearModel> {
    Ok(fit(data, cfg, false)?.model)
}

pub fn train_svm_traced(data: &[(&EncodedVector, i8)], cfg: &SvmConfig) -> Result<SvmFit> {
    fit(data, cfg, true)
}

fn fit(data: &[(&EncodedVector, i8)], cfg: &SvmConfig, trace: bool) -> Result<SvmFit> {
    if !(cfg.lambda > 0.0 && cfg.lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "lambda {} must be positive",
            cfg.lambda
        )));
    }
    if cfg.epochs == 0 {
        return Err(Error::InvalidParameter("epochs must be positive".into()));
    }
    let Some((first, _)) = data.first() else {
        return Err(Error::EmptyInput("training set"));
    };
    let print = first.fingerprint();
    for (x, y) in data {
        if x.fingerprint() != print {
            return Err(Error::FingerprintMismatch {
                expected: print.to_string(),
                actual: x.fingerprint().to_string(),
            });
        }
        if *y != 1 && *y != -1 {
            return Err(Error::InvalidParameter(format!("label {y} is not ±1")));
        }
        check_finite(&x.values, "training vector")?;
    }
    if !data.iter().any(|(_, y)| *y == 1) || !data.iter().any(|(_, y)| *y == -1) {
        return Err(Error::SingleClass);
    }

    let dim = print.len;
    let lambda = cfg.lambda;
    let t0 = 1.0 / lambda;
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut avg_w = vec![0.0; dim];
    let mut avg_b = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut t = 0u64;
    let mut objective_trace = Vec::new();
    let snapshot = |w: &[f64], b: f64| LinearModel {
        weights: w.to_vec(),
        bias: b,
        lambda,
        trained_on: print,
    };
    if trace {
        objective_trace.push(snapshot(&w, b).objective(data));
    }

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let last = epoch + 1 == cfg.epochs;
        for &i in &order {
            let (x, y) = data[i];
            let y = y as f64;
            let eta = 1.0 / (lambda * (t as f64 + t0));
            let margin = y * (dot(&w, &x.values) + b);
            let shrink = 1.0 - eta * lambda;
            w.iter_mut().for_each(|v| *v *= shrink);
            if margin < 1.0 {
                for (wj, xj) in w.iter_mut().zip(&x.values) {
                    *wj += eta * y * xj;
                }
                b += eta * y;
            }
            t += 1;
            if last {
                avg_w.iter_mut().zip(&w).for_each(|(a, v)| *a += v);
                avg_b += b;
            }
        }
        if trace && !last {
            objective_trace.push(snapshot(&w, b).objective(data));
        }
    }
    let n = data.len() as f64;
    avg_w.iter_mut().for_each(|a| *a /= n);
    let model = LinearModel {
        weights: avg_w,
        bias: avg_b / n,
        lambda,
        trained_on: print,
    };
    model.validate()?;
    if trace {
        objective_trace.push(model.objective(data));
    }
    Ok(SvmFit { model, objective_trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderKind;
    use rand::Rng;

    fn vec_of(values: Vec<f64>) -> EncodedVector {
        EncodedVector {
            k: 1,
            d: values.len(),
            values,
            kind: EncoderKind::Vlad,
            normalized: false,
        }
    }

    fn accuracy(model: &LinearModel, data: &[(&EncodedVector, i8)]) -> f64 {
        data.iter().filter(|(x, y)| model.predict(x).unwrap() == *y).count() as f64 / data.len() as f64
    }

    #[test]
    fn separable_pair() {
        let a = vec_of(vec![-1.0]);
        let b = vec_of(vec![1.0]);
        let data = [(&a, -1), (&b, 1)];
        let m = train_svm(&data, &SvmConfig::default()).unwrap();
        assert!(m.score(&a).unwrap() < 0.0 && m.score(&b).unwrap() > 0.0);
    }

    #[test]
    fn separable_blobs_fully_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<(EncodedVector, i8)> = (0..200)
            .map(|i| {
                let y = if i % 2 == 0 { 1 } else { -1 };
                let c = 2.0 * y as f64;
                (
                    vec_of(vec![c + rng.random::<f64>() - 0.5, rng.random::<f64>() * 4.0 - 2.0]),
                    y,
                )
            })
            .collect();
        let data: Vec<(&EncodedVector, i8)> = pts.iter().map(|(x, y)| (x, *y)).collect();
        let fit = train_svm_traced(
            &data,
            &SvmConfig {
                epochs: 50,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(accuracy(&fit.model, &data), 1.0);
        let tr = &fit.objective_trace;
        assert!(tr.last().unwrap() <= &tr[0]);
    }

    #[test]
    fn xor_is_not_separable() {
        let pts = [
            (vec_of(vec![0.0, 0.0]), 1),
            (vec_of(vec![1.0, 1.0]), 1),
            (vec_of(vec![0.0, 1.0]), -1),
            (vec_of(vec![1.0, 0.0]), -1),
        ];
        let data: Vec<(&EncodedVector, i8)> = pts.iter().map(|(x, y)| (x, *y)).collect();
        let m = train_svm(&data, &SvmConfig::default()).unwrap();
        assert!(accuracy(&m, &data) <= 0.75);
    }

    #[test]
    fn score_properties() {
        let m = LinearModel {
            weights: vec![0.0; 3],
            bias: 0.7,
            lambda: 1e-3,
            trained_on: vec_of(vec![0.0; 3]).fingerprint(),
        };
        assert_eq!(m.score(&vec_of(vec![5.0, -2.0, 1.0])).unwrap(), 0.7);
        let m = LinearModel {
            weights: vec![0.5, -1.5, 2.0],
            ..m
        };
        let x = vec_of(vec![1.0, 2.0, 3.0]);
        let sx = m.score(&x).unwrap();
        let x3 = vec_of(vec![3.0, 6.0, 9.0]);
        assert!((m.score(&x3).unwrap() - (3.0 * (sx - 0.7) + 0.7)).abs() < 1e-12);
        assert!(m.score(&vec_of(vec![1.0])).is_err());
    }

    #[test]
    fn score_matches_naive_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w: Vec<f64> = (0..300).map(|_| rng.random::<f64>() - 0.5).collect();
        let x = vec_of((0..300).map(|_| rng.random::<f64>() - 0.5).collect());
        let m = LinearModel {
            weights: w.clone(),
            bias: -0.25,
            lambda: 1.0,
            trained_on: x.fingerprint(),
        };
        let mut naive = -0.25;
        for (wi, xi) in w.iter().zip(&x.values) {
            naive += wi * xi;
        }
        assert!((m.score(&x).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn deterministic_and_scale_invariant_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<(EncodedVector, i8)> = (0..50)
            .map(|i| {
                let y = if i < 25 { 1 } else { -1 };
                (
                    vec_of((0..4).map(|_| rng.random::<f64>() + 0.3 * y as f64).collect()),
                    y,
                )
            })
            .collect();
        let data: Vec<(&EncodedVector, i8)> = pts.iter().map(|(x, y)| (x, *y)).collect();
        let cfg = SvmConfig {
            lambda: 1e-3,
            epochs: 20,
            seed: 5,
        };
        let a = train_svm(&data, &cfg).unwrap();
        assert_eq!(a, train_svm(&data, &cfg).unwrap());
        let mut scaled = a.clone();
        scaled.weights.iter_mut().for_each(|w| *w *= 3.5);
        scaled.bias *= 3.5;
        for (x, _) in &data {
            assert_eq!(a.predict(x).unwrap(), scaled.predict(x).unwrap());
        }
    }

    #[test]
    fn rejects_bad_training_sets() {
        let a = vec_of(vec![1.0]);
        let b = vec_of(vec![1.0, 2.0]);
        assert!(matches!(
            train_svm(&[(&a, 1), (&a, 1)], &SvmConfig::default()),
            Err(Error::SingleClass)
        ));
        assert!(matches!(
            train_svm(&[(&a, 1), (&b, -1)], &SvmConfig::default()),
            Err(Error::FingerprintMismatch { .. })
        ));
    }
}
