//! Principal component projection of logged message vectors.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit component vectors, largest variance first.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component.
    pub variances: Vec<f64>,
    /// Share of total variance along each component (zeros when there is none).
    pub explained: Vec<f64>,
}

impl Pca {
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(x.iter().zip(&self.mean)).map(|(ci, (xi, mi))| ci * (xi - mi)).sum())
            .collect()
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order with matching unit eigenvectors.
pub fn symmetric_eigen(a: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = a.len();
    if a.iter().any(|r| r.len() != n) {
        return shape_err("eigen-decomposition needs a square matrix");
    }
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let scale = m.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-14 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j][j].total_cmp(&m[i][i]));
    let values = order.iter().map(|&i| m[i][i]).collect();
    let vectors = order.iter().map(|&i| v.iter().map(|row| row[i]).collect()).collect();
    Ok((values, vectors))
}

/// Fits the top `k` principal components of `data` (one row per sample).
///
/// Each component is oriented so its first non-negligible loading is positive.
/// Without variance the components are the leading unit axes and every
/// explained share is zero.
pub fn fit(data: &[Vec<f64>], k: usize) -> Result<Pca> {
    let Some(first) = data.first() else {
        return Err(Error::Contract("PCA needs at least one sample".into()));
    };
    let d = first.len();
    if d == 0 || data.iter().any(|r| r.len() != d) {
        return shape_err("PCA rows must share a positive dimension");
    }
    if data.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("PCA input contains non-finite values".into()));
    }
    let k = k.min(d);
    let n = data.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| data.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in data {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]) / n;
            }
        }
    }
    let (values, vectors) = symmetric_eigen(&cov)?;
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    let mut components = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    let mut explained = Vec::with_capacity(k);
    for (lam, mut vec) in values.into_iter().zip(vectors).take(k) {
        if let Some(&lead) = vec.iter().find(|x| x.abs() > 1e-12) {
            if lead < 0.0 {
                vec.iter_mut().for_each(|x| *x = -*x);
            }
        }
        let lam = lam.max(0.0);
        variances.push(lam);
        explained.push(if total > 1e-300 { lam / total } else { 0.0 });
        components.push(vec);
    }
    Ok(Pca {
        mean,
        components,
        variances,
        explained,
    })
}

/// Fits two components and projects every row onto them.
pub fn project_2d(data: &[Vec<f64>]) -> Result<(Pca, Vec<[f64; 2]>)> {
    let pca = fit(data, 2)?;
    let pts = data
        .iter()
        .map(|r| {
            let p = pca.project(r);
            [p[0], p.get(1).copied().unwrap_or(0.0)]
        })
        .collect();
    Ok((pca, pts))
}
