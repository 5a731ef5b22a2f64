use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{ScalarField, VectorField};

/// Anything that flattens to a fixed-length vector.
pub trait AsFlat {
    fn as_flat(&self) -> Vec<f64>;
}

impl AsFlat for ScalarField {
    fn as_flat(&self) -> Vec<f64> {
        self.values().to_vec()
    }
}

impl AsFlat for VectorField {
    fn as_flat(&self) -> Vec<f64> {
        self.to_flat()
    }
}

impl AsFlat for Vec<f64> {
    fn as_flat(&self) -> Vec<f64> {
        self.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub data_mean: Vec<f64>,
    /// k orthonormal directions, each of the data dimension.
    pub components: Vec<Vec<f64>>,
    /// Singular values of the centered data matrix, non-increasing.
    pub singular_values: Vec<f64>,
}

impl PcaBasis {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.data_mean.len()
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::shape(format!("vector of length {} vs basis dimension {}", x.len(), self.dim())));
        }
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.data_mean).map(|((ci, xi), mi)| ci * (xi - mi)).sum())
            .collect())
    }

    pub fn reconstruct(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.k() {
            return Err(Error::shape(format!("latent of length {} vs rank {}", z.len(), self.k())));
        }
        let mut x = self.data_mean.clone();
        for (c, zi) in self.components.iter().zip(z) {
            x.iter_mut().zip(c).for_each(|(xv, cv)| *xv += zi * cv);
        }
        Ok(x)
    }

    /// Largest |CᵀC - I| entry.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, a) in self.components.iter().enumerate() {
            for (j, b) in self.components.iter().enumerate() {
                let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                worst = worst.max((d - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        worst
    }
}

pub fn pca_fit<T: AsFlat>(samples: &[T], k: usize) -> Result<PcaBasis> {
    let rows: Vec<Vec<f64>> = samples.iter().map(AsFlat::as_flat).collect();
    let n = rows.len();
    let d = rows.first().map(Vec::len).ok_or_else(|| Error::invalid("no samples"))?;
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::shape("samples of different length"));
    }
    if k == 0 || k > n || k > d {
        return Err(Error::invalid(format!("rank {k} must be in 1..=min(samples {n}, dimension {d})")));
    }
    let mut mean = vec![0.0; d];
    for r in &rows {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);

    // Eigen-decompose the smaller of the two Gram matrices.
    let (vals, dirs): (Vec<f64>, Vec<Vec<f64>>) = if d <= n {
        let eig = SymmetricEigen::new(x.transpose() * &x);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
        order
            .iter()
            .take(k)
            .map(|&i| (eig.eigenvalues[i].max(0.0), eig.eigenvectors.column(i).iter().copied().collect()))
            .unzip()
    } else {
        let eig = SymmetricEigen::new(&x * x.transpose());
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
        let top = eig.eigenvalues[order[0]].max(0.0);
        order
            .iter()
            .take(k)
            .map(|&i| {
                let lam = eig.eigenvalues[i].max(0.0);
                if lam <= top * 1e-20 || lam == 0.0 {
                    return (0.0, Vec::new());
                }
                let u = eig.eigenvectors.column(i);
                let v = x.transpose() * u / lam.sqrt();
                (lam, v.iter().copied().collect())
            })
            .unzip()
    };
    let singular_values: Vec<f64> = vals.iter().map(|l| l.sqrt()).collect();
    let components = orthonormalize(dirs, d);
    Ok(PcaBasis { data_mean: mean, components, singular_values })
}

/// Modified Gram–Schmidt; empty or dependent directions are replaced by
/// the first standard basis vectors that are still independent.
fn orthonormalize(dirs: Vec<Vec<f64>>, d: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(dirs.len());
    let mut next_unit = 0;
    for dir in dirs {
        let mut v = if dir.is_empty() { vec![0.0; d] } else { dir };
        loop {
            for _ in 0..2 {
                for o in &out {
                    let p: f64 = v.iter().zip(o).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(o).for_each(|(a, b)| *a -= p * b);
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-8 {
                v.iter_mut().for_each(|a| *a /= norm);
                break;
            }
            v = vec![0.0; d];
            v[next_unit] = 1.0;
            next_unit += 1;
        }
        out.push(v);
    }
    out
}
