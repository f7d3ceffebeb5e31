//! Principal component analysis on the sample covariance.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `d_out` rows of length `d_in`, orthonormal.
    pub basis: Vec<Vec<f64>>,
    /// Non-increasing variances along each row of `basis`.
    pub eigenvalues: Vec<f64>,
}

impl PcaModel {
    pub fn d_in(&self) -> usize {
        self.mean.len()
    }

    pub fn d_out(&self) -> usize {
        self.basis.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_dim(self.d_out(), self.eigenvalues.len())?;
        for row in &self.basis {
            check_dim(self.d_in(), row.len())?;
        }
        if self.d_out() == 0 || self.d_out() > self.d_in() {
            return Err(Error::InvalidModel(format!(
                "pca maps {} -> {}",
                self.d_in(),
                self.d_out()
            )));
        }
        check_finite(&self.mean, "pca mean")?;
        check_finite(&self.eigenvalues, "pca eigenvalues")?;
        Ok(())
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.d_in(), x.len())?;
        Ok(self.project_unchecked(x))
    }

    pub(crate) fn project_unchecked(&self, x: &[f64]) -> Vec<f64> {
        self.basis
            .iter()
            .map(|row| row.iter().zip(x).zip(&self.mean).map(|((r, v), m)| r * (v - m)).sum())
            .collect()
    }

    /// Maps a projected vector back to input space.
    pub fn reconstruct(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.d_out(), z.len())?;
        let mut x = self.mean.clone();
        for (row, &c) in self.basis.iter().zip(z) {
            for (xi, r) in x.iter_mut().zip(row) {
                *xi += c * r;
            }
        }
        Ok(x)
    }
}

pub fn fit_pca(data: &[Vec<f64>], d_out: usize) -> Result<PcaModel> {
    let n = data.len();
    if d_out == 0 {
        return Err(Error::InvalidParameter("pca output dimension must be positive".into()));
    }
    if n < d_out.max(2) {
        return Err(Error::InsufficientSamples {
            required: d_out.max(2),
            actual: n,
        });
    }
    let d_in = data[0].len();
    if d_out > d_in {
        return Err(Error::InvalidParameter(format!(
            "cannot reduce {d_in} dimensions to {d_out}"
        )));
    }
    for row in data {
        check_dim(d_in, row.len())?;
        check_finite(row, "pca input")?;
    }

    let mut mean = vec![0.0; d_in];
    for row in data {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = DMatrix::<f64>::zeros(d_in, d_in);
    let mut centered = vec![0.0; d_in];
    for row in data {
        for ((c, v), m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d_in {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..d_in {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    for i in 0..d_in {
        for j in i..d_in {
            let v = cov[(i, j)] / n as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d_in).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut basis = Vec::with_capacity(d_out);
    let mut eigenvalues = Vec::with_capacity(d_out);
    for &k in order.iter().take(d_out) {
        let mut row: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
        // sign convention: largest-magnitude component positive
        let lead = row
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if v.abs() > row[best].abs() { i } else { best });
        if row[lead] < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        basis.push(row);
        eigenvalues.push(eig.eigenvalues[k].max(0.0));
    }
    Ok(PcaModel {
        mean,
        basis,
        eigenvalues,
    })
}
