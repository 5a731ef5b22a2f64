use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{BoundaryCondition, Grid, ScalarField, VectorField};

/// Affine maps to roughly zero mean and unit spread, fitted on the
/// training split. Fields use a per-cell mean and one scale per variable
/// (bathymetry, easting, northing), so cells with no variation (tapered
/// banks) never divide by zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub bathy_mean: Vec<f64>,
    pub bathy_scale: f64,
    pub bc_mean: [f64; 2],
    pub bc_scale: [f64; 2],
    /// Easting block then northing block.
    pub vel_mean: Vec<f64>,
    pub vel_scale: [f64; 2],
}

fn spread(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v * v;
        n += 1;
    }
    let rms = if n > 0 { (s / n as f64).sqrt() } else { 0.0 };
    if rms > 1e-12 {
        rms
    } else {
        1.0
    }
}

impl Normalizer {
    pub fn identity(grid: &Grid) -> Self {
        Normalizer {
            bathy_mean: vec![0.0; grid.len()],
            bathy_scale: 1.0,
            bc_mean: [0.0; 2],
            bc_scale: [1.0; 2],
            vel_mean: vec![0.0; 2 * grid.len()],
            vel_scale: [1.0; 2],
        }
    }

    pub fn fit(bathy: &[&ScalarField], bcs: &[BoundaryCondition], vel: &[&VectorField]) -> Result<Self> {
        let n = bathy.len();
        if n == 0 || bcs.len() != n || vel.len() != n {
            return Err(Error::invalid("normalizer needs equally many (non-zero) bathymetries, BCs and velocities"));
        }
        let cells = bathy[0].grid().len();
        let mut bathy_mean = vec![0.0; cells];
        for b in bathy {
            bathy_mean.iter_mut().zip(b.values()).for_each(|(m, v)| *m += v / n as f64);
        }
        let bathy_scale =
            spread(bathy.iter().flat_map(|b| b.values().iter().zip(&bathy_mean).map(|(v, m)| v - m)));
        let mut vel_mean = vec![0.0; 2 * cells];
        for v in vel {
            vel_mean.iter_mut().zip(v.to_flat()).for_each(|(m, x)| *m += x / n as f64);
        }
        let comp_scale = |c: usize| {
            spread(vel.iter().flat_map(|v| {
                let f = if c == 0 { v.easting() } else { v.northing() };
                f.iter().zip(&vel_mean[c * cells..(c + 1) * cells]).map(|(x, m)| x - m).collect::<Vec<_>>()
            }))
        };
        let vel_scale = [comp_scale(0), comp_scale(1)];
        let mut bc_mean = [0.0; 2];
        for bc in bcs {
            bc_mean[0] += bc.discharge_q / n as f64;
            bc_mean[1] += bc.surface_zf / n as f64;
        }
        let bc_scale = [
            spread(bcs.iter().map(|b| b.discharge_q - bc_mean[0])),
            spread(bcs.iter().map(|b| b.surface_zf - bc_mean[1])),
        ];
        Ok(Normalizer { bathy_mean, bathy_scale, bc_mean, bc_scale, vel_mean, vel_scale })
    }

    pub fn bathy(&self, b: &ScalarField) -> Vec<f64> {
        b.values().iter().zip(&self.bathy_mean).map(|(v, m)| (v - m) / self.bathy_scale).collect()
    }

    pub fn bc(&self, bc: &BoundaryCondition) -> [f64; 2] {
        [
            (bc.discharge_q - self.bc_mean[0]) / self.bc_scale[0],
            (bc.surface_zf - self.bc_mean[1]) / self.bc_scale[1],
        ]
    }

    pub fn velocity(&self, v: &VectorField) -> Vec<f64> {
        let n = v.grid().len();
        v.to_flat()
            .iter()
            .zip(&self.vel_mean)
            .enumerate()
            .map(|(i, (x, m))| (x - m) / self.vel_scale[i / n])
            .collect()
    }

    pub fn denorm_velocity(&self, grid: &Grid, flat: &[f64]) -> Result<VectorField> {
        let n = grid.len();
        if flat.len() != 2 * n {
            return Err(Error::shape("normalized velocity has the wrong length"));
        }
        let vals: Vec<f64> =
            flat.iter().zip(&self.vel_mean).enumerate().map(|(i, (x, m))| x * self.vel_scale[i / n] + m).collect();
        VectorField::from_flat(*grid, &vals)
    }
}
