//! Bathymetry augmentation: Gaussian-kernel random fields, shore taper,
//! boundary-condition draws and observation noise.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{BoundaryCondition, Grid, ScalarField, VectorField};
use crate::rng::RngSeed;

/// Kernel parameters: cov(Δx, Δy) = β²·exp(-Δx²/l_x² - Δy²/l_y²), plus the
/// exponent of the sin^p shore taper.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrfSpec {
    /// Marginal standard deviation β (m).
    pub beta: f64,
    /// Along-river correlation length l_x (m).
    pub len_x: f64,
    /// Across-river correlation length l_y (m).
    pub len_y: f64,
    #[serde(default = "default_taper")]
    pub taper_exp: f64,
}

fn default_taper() -> f64 {
    1.0
}

impl Default for GrfSpec {
    fn default() -> Self {
        GrfSpec { beta: 1.2, len_x: 115.0, len_y: 29.0, taper_exp: 1.0 }
    }
}

impl GrfSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.beta >= 0.0
            && self.len_x > 0.0
            && self.len_y > 0.0
            && self.taper_exp >= 0.0
            && [self.beta, self.len_x, self.len_y, self.taper_exp].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid random-field spec {self:?}")))
        }
    }
}

pub fn kernel_cov(lag_x: f64, lag_y: f64, spec: &GrfSpec) -> f64 {
    let rx = lag_x / spec.len_x;
    let ry = lag_y / spec.len_y;
    spec.beta * spec.beta * (-rx * rx - ry * ry).exp()
}

/// sin(π·y/W)^p at the cell-center across-river coordinate y.
pub fn taper_profile(grid: &Grid, taper_exp: f64) -> Vec<f64> {
    let w = grid.width();
    (0..grid.ny)
        .map(|j| {
            if taper_exp == 0.0 {
                1.0
            } else {
                (PI * grid.y_center(j) / w).sin().max(0.0).powf(taper_exp)
            }
        })
        .collect()
}

pub fn shore_taper(grid: &Grid, taper_exp: f64) -> ScalarField {
    let profile = taper_profile(grid, taper_exp);
    ScalarField::from_fn(*grid, |_, j| profile[j])
}

fn eigen_clamped(m: DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Factorization("covariance has non-finite entries".into()));
    }
    let eig = SymmetricEigen::try_new(m, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Factorization("symmetric eigensolver did not converge".into()))?;
    let lmax = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
    let floor = lmax * 1e-12;
    let vals = eig.eigenvalues.iter().map(|l| if *l < floor { 0.0 } else { *l }).collect();
    Ok((eig.eigenvectors, vals))
}

/// Eigen-factorization of the kernel covariance over all cell centers.
///
/// The Gaussian kernel separates, cov = β²·K_x ⊗ K_y, and the sin^p taper
/// only depends on y, so the (optionally tapered) dense covariance has the
/// eigenpairs (λ_x·λ_y, u_x ⊗ u_y) built from two small factors. This is the
/// exact dense eigendecomposition without forming the nx·ny square matrix.
#[derive(Debug, Clone)]
pub struct KernelFactor {
    grid: Grid,
    spec: GrfSpec,
    ux: DMatrix<f64>,
    lx: Vec<f64>,
    uy: DMatrix<f64>,
    ly: Vec<f64>,
}

impl KernelFactor {
    /// `tapered` folds the shore taper into the covariance:
    /// cov'(a, b) = s(y_a)·cov(a, b)·s(y_b).
    pub fn new(spec: &GrfSpec, grid: &Grid, tapered: bool) -> Result<Self> {
        spec.validate()?;
        grid.validate()?;
        let kx = DMatrix::from_fn(grid.nx, grid.nx, |a, b| {
            let r = (a as f64 - b as f64) * grid.dx / spec.len_x;
            (-r * r).exp()
        });
        let s = if tapered { taper_profile(grid, spec.taper_exp) } else { vec![1.0; grid.ny] };
        let ky = DMatrix::from_fn(grid.ny, grid.ny, |a, b| {
            let r = (a as f64 - b as f64) * grid.dy / spec.len_y;
            s[a] * (-r * r).exp() * s[b]
        });
        let (ux, lx) = eigen_clamped(kx)?;
        let (uy, ly) = eigen_clamped(ky)?;
        Ok(KernelFactor { grid: *grid, spec: *spec, ux, lx, uy, ly })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn spec(&self) -> &GrfSpec {
        &self.spec
    }

    /// All eigenpairs as (eigenvalue in m², x-index, y-index), sorted by
    /// non-increasing eigenvalue.
    pub fn spectrum(&self) -> Vec<(f64, usize, usize)> {
        let b2 = self.spec.beta * self.spec.beta;
        let mut out = Vec::with_capacity(self.grid.len());
        for (a, lx) in self.lx.iter().enumerate() {
            for (b, ly) in self.ly.iter().enumerate() {
                out.push((b2 * lx * ly, a, b));
            }
        }
        out.sort_by(|p, q| q.0.total_cmp(&p.0).then(p.1.cmp(&q.1)).then(p.2.cmp(&q.2)));
        out
    }

    /// Unit-norm eigenvector u_x[a] ⊗ u_y[b] as a cell array.
    pub fn eigenvector(&self, a: usize, b: usize) -> Vec<f64> {
        let g = &self.grid;
        let mut out = vec![0.0; g.len()];
        for j in 0..g.ny {
            let vy = self.uy[(j, b)];
            for i in 0..g.nx {
                out[g.idx(i, j)] = self.ux[(i, a)] * vy;
            }
        }
        out
    }

    /// Trace of the covariance (sum of all eigenvalues), m².
    pub fn total_variance(&self) -> f64 {
        let b2 = self.spec.beta * self.spec.beta;
        b2 * self.lx.iter().sum::<f64>() * self.ly.iter().sum::<f64>()
    }

    /// One zero-mean draw: β·U_y·diag(√λ_y)·Z·diag(√λ_x)·U_xᵀ.
    pub fn draw(&self, rng: RngSeed) -> ScalarField {
        let g = self.grid;
        if self.spec.beta == 0.0 {
            return ScalarField::constant(g, 0.0);
        }
        let mut r = rng.rng();
        let mut z = DMatrix::<f64>::zeros(g.ny, g.nx);
        // Column-major fill order is part of the reproducibility contract.
        for a in 0..g.nx {
            for b in 0..g.ny {
                let n: f64 = r.sample(StandardNormal);
                z[(b, a)] = n * self.ly[b].sqrt() * self.lx[a].sqrt();
            }
        }
        let f = &self.uy * z * self.ux.transpose() * self.spec.beta;
        ScalarField::from_fn(g, |i, j| f[(j, i)])
    }
}

/// Immutable, shareable sampler for one (spec, grid) pair.
#[derive(Debug, Clone)]
pub struct GrfSampler {
    factor: KernelFactor,
    taper: ScalarField,
}

impl GrfSampler {
    pub fn new(spec: &GrfSpec, grid: &Grid) -> Result<Self> {
        Ok(GrfSampler { factor: KernelFactor::new(spec, grid, false)?, taper: shore_taper(grid, spec.taper_exp) })
    }

    pub fn spec(&self) -> &GrfSpec {
        &self.factor.spec
    }

    pub fn grid(&self) -> &Grid {
        &self.factor.grid
    }

    pub fn sample(&self, rng: RngSeed) -> ScalarField {
        self.factor.draw(rng)
    }

    /// base + taper ⊙ field.
    pub fn augment(&self, base: &ScalarField, rng: RngSeed) -> Result<ScalarField> {
        if base.grid() != self.grid() {
            return Err(Error::shape("base bathymetry grid differs from sampler grid"));
        }
        if self.factor.spec.beta == 0.0 {
            return Ok(base.clone());
        }
        let field = self.sample(rng);
        let values = base
            .values()
            .iter()
            .zip(field.values())
            .zip(self.taper.values())
            .map(|((b, f), s)| b + s * f)
            .collect();
        ScalarField::new(*base.grid(), values)
    }
}

pub fn sample_grf(spec: &GrfSpec, grid: &Grid, rng: RngSeed) -> Result<ScalarField> {
    Ok(GrfSampler::new(spec, grid)?.sample(rng))
}

pub fn augment_bathymetry(base: &ScalarField, spec: &GrfSpec, rng: RngSeed) -> Result<ScalarField> {
    GrfSampler::new(spec, base.grid())?.augment(base, rng)
}

/// Uniform sampling ranges for (Q, z_f).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BcRanges {
    pub q_min: f64,
    pub q_max: f64,
    pub zf_min: f64,
    pub zf_max: f64,
}

impl Default for BcRanges {
    fn default() -> Self {
        BcRanges { q_min: 100.0, q_max: 700.0, zf_min: 29.0, zf_max: 34.5 }
    }
}

impl BcRanges {
    pub fn validate(&self) -> Result<()> {
        if !(self.q_min > 0.0 && self.q_min <= self.q_max && self.zf_min <= self.zf_max) {
            return Err(Error::invalid(format!("invalid BC ranges {self:?}")));
        }
        Ok(())
    }

    pub fn contains(&self, bc: &BoundaryCondition) -> bool {
        (self.q_min..=self.q_max).contains(&bc.discharge_q) && (self.zf_min..=self.zf_max).contains(&bc.surface_zf)
    }
}

pub fn sample_bc(ranges: &BcRanges, rng: RngSeed) -> Result<BoundaryCondition> {
    ranges.validate()?;
    let mut r = rng.rng();
    let u1: f64 = r.random();
    let u2: f64 = r.random();
    let q = ranges.q_min + u1 * (ranges.q_max - ranges.q_min);
    let zf = ranges.zf_min + u2 * (ranges.zf_max - ranges.zf_min);
    BoundaryCondition::new(q, zf)
}

/// Default relative observation noise: σ = 10% of the largest speed.
pub const NOISE_FRACTION: f64 = 0.10;

pub fn add_velocity_noise(vel: &VectorField, rng: RngSeed) -> VectorField {
    add_velocity_noise_frac(vel, NOISE_FRACTION, rng)
}

/// i.i.d. N(0, σ²) per component with σ = `fraction`·max |v|.
pub fn add_velocity_noise_frac(vel: &VectorField, fraction: f64, rng: RngSeed) -> VectorField {
    let sigma = noise_std(vel, fraction);
    if sigma == 0.0 {
        return vel.clone();
    }
    let mut r = rng.rng();
    let mut noisy = |xs: &[f64]| -> Vec<f64> {
        xs.iter()
            .map(|x| {
                let n: f64 = r.sample(StandardNormal);
                x + sigma * n
            })
            .collect()
    };
    let e = noisy(vel.easting());
    let n = noisy(vel.northing());
    VectorField::new(*vel.grid(), e, n).expect("noise keeps values finite")
}

pub fn noise_std(vel: &VectorField, fraction: f64) -> f64 {
    fraction * vel.max_speed()
}

/// Smooth synthetic reach: a meandering thalweg with a parabolic cross
/// section and a mild downstream bed slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticRiver {
    /// Thalweg bed elevation at the outlet (m).
    pub thalweg_datum: f64,
    /// Bed slope, rising upstream.
    pub bed_slope: f64,
    /// Bank height above the thalweg (m).
    pub bank_rise: f64,
    pub meander_amplitude: f64,
    pub meander_wavelength: f64,
}

impl Default for SyntheticRiver {
    fn default() -> Self {
        SyntheticRiver {
            thalweg_datum: 22.0,
            bed_slope: 1e-4,
            bank_rise: 4.5,
            meander_amplitude: 20.0,
            meander_wavelength: 800.0,
        }
    }
}

impl SyntheticRiver {
    pub fn bathymetry(&self, grid: &Grid) -> ScalarField {
        let w = grid.width();
        let l = grid.length();
        ScalarField::from_fn(*grid, |i, j| {
            let x = grid.x_center(i);
            let y = grid.y_center(j);
            let thalweg = 0.5 * w + self.meander_amplitude * (2.0 * PI * x / self.meander_wavelength).sin();
            let r = ((y - thalweg) / (0.5 * w)).abs().min(1.0);
            self.thalweg_datum + self.bed_slope * (l - x) + self.bank_rise * r * r
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::make_grid;

    fn desk() -> Grid {
        make_grid(64, 16, 25.0, 7.5).unwrap()
    }

    #[test]
    fn kernel_values() {
        let s = GrfSpec::default();
        assert!((kernel_cov(0.0, 0.0, &s) - 1.44).abs() < 1e-15);
        assert!((kernel_cov(115.0, 0.0, &s) - 1.44 * (-1.0f64).exp()).abs() < 1e-12);
        assert!((kernel_cov(115.0, 0.0, &s) - 0.52975).abs() < 1e-5);
        assert!((kernel_cov(115.0, 29.0, &s) - 0.19489).abs() < 1e-5);
        assert_eq!(kernel_cov(-40.0, 7.0, &s), kernel_cov(40.0, -7.0, &s));
    }

    #[test]
    fn kernel_monotone() {
        let s = GrfSpec::default();
        let mut prev = f64::INFINITY;
        for k in 0..50 {
            let c = kernel_cov(10.0 * k as f64, 3.0, &s);
            assert!(c <= prev);
            prev = c;
        }
    }

    #[test]
    fn taper_values() {
        let g = desk();
        assert!(shore_taper(&g, 0.0).values().iter().all(|v| *v == 1.0));
        let odd = make_grid(8, 15, 1.0, 1.0).unwrap();
        assert!((shore_taper(&odd, 1.0).at(3, 7) - 1.0).abs() < 1e-15);
        // y_c(1) = 1.5, W = 6 → y_c/W = 0.25.
        let g4 = make_grid(4, 6, 1.0, 1.0).unwrap();
        assert!((shore_taper(&g4, 2.0).at(0, 1) - 0.5).abs() < 1e-15);
        let prof = taper_profile(&g, 1.0);
        assert!(prof[0] < 0.1 && prof[15] < 0.1);
        assert!(prof.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_beta_is_degenerate() {
        let g = desk();
        let spec = GrfSpec { beta: 0.0, ..GrfSpec::default() };
        let f = sample_grf(&spec, &g, RngSeed::new(1, 0)).unwrap();
        assert!(f.values().iter().all(|v| *v == 0.0));
        let base = SyntheticRiver::default().bathymetry(&g);
        assert_eq!(augment_bathymetry(&base, &spec, RngSeed::new(3, 1)).unwrap(), base);
    }

    #[test]
    fn grf_is_reproducible() {
        let g = desk();
        let s = GrfSampler::new(&GrfSpec::default(), &g).unwrap();
        assert_eq!(s.sample(RngSeed::new(5, 9)), s.sample(RngSeed::new(5, 9)));
        assert_ne!(s.sample(RngSeed::new(5, 9)), s.sample(RngSeed::new(5, 10)));
    }

    #[test]
    fn factor_reproduces_dense_kernel() {
        // Independent route: dense matrix straight from kernel_cov.
        let g = make_grid(12, 6, 25.0, 7.5).unwrap();
        let spec = GrfSpec::default();
        let f = KernelFactor::new(&spec, &g, false).unwrap();
        let modes: Vec<(f64, Vec<f64>)> =
            f.spectrum().into_iter().map(|(l, a, b)| (l, f.eigenvector(a, b))).collect();
        for ca in 0..g.len() {
            for cb in 0..g.len() {
                let (ia, ja) = (ca % g.nx, ca / g.nx);
                let (ib, jb) = (cb % g.nx, cb / g.nx);
                let dense = kernel_cov(
                    (ia as f64 - ib as f64) * g.dx,
                    (ja as f64 - jb as f64) * g.dy,
                    &spec,
                );
                let rec: f64 = modes.iter().map(|(l, v)| l * v[ca] * v[cb]).sum();
                assert!((dense - rec).abs() < 1e-9, "cell pair {ca},{cb}: {dense} vs {rec}");
            }
        }
    }

    #[test]
    fn bank_cells_barely_move() {
        // Outermost cell centers carry taper sin(π/32) ≈ 0.098, so their
        // deviation from the base has std below 0.1·β.
        let g = desk();
        let base = SyntheticRiver::default().bathymetry(&g);
        let spec = GrfSpec::default();
        let s = GrfSampler::new(&spec, &g).unwrap();
        let (mut ss, mut n) = (0.0, 0usize);
        for k in 0..2000 {
            let a = s.augment(&base, RngSeed::new(11, k)).unwrap();
            for i in 0..g.nx {
                for j in [0, g.ny - 1] {
                    ss += (a.at(i, j) - base.at(i, j)).powi(2);
                    n += 1;
                }
            }
        }
        let sd = (ss / n as f64).sqrt();
        assert!(taper_profile(&g, 1.0)[0] < 0.1);
        assert!(sd < 0.1 * spec.beta, "bank deviation std {sd}");
    }

    #[test]
    fn bc_sampling() {
        let fixed = BcRanges { q_min: 146.1, q_max: 146.1, zf_min: 29.9, zf_max: 29.9 };
        let bc = sample_bc(&fixed, RngSeed::new(0, 0)).unwrap();
        assert_eq!((bc.discharge_q, bc.surface_zf), (146.1, 29.9));

        let r = BcRanges::default();
        assert!(r.contains(&BoundaryCondition::new(651.2, 33.9).unwrap()));
        assert!(r.contains(&BoundaryCondition::new(146.1, 29.9).unwrap()));
        let draws: Vec<_> = (0..10_000).map(|k| sample_bc(&r, RngSeed::new(4, k)).unwrap()).collect();
        assert!(draws.iter().all(|b| r.contains(b)));
        let qmin = draws.iter().map(|b| b.discharge_q).fold(f64::INFINITY, f64::min);
        let qmax = draws.iter().map(|b| b.discharge_q).fold(0.0, f64::max);
        let zmin = draws.iter().map(|b| b.surface_zf).fold(f64::INFINITY, f64::min);
        let zmax = draws.iter().map(|b| b.surface_zf).fold(0.0, f64::max);
        // For 10⁴ uniforms the extremes sit within ~0.1% of the range of
        // the bounds with overwhelming probability.
        assert!(qmin - 100.0 < 3.0 && 700.0 - qmax < 3.0);
        assert!(zmin - 29.0 < 0.03 && 34.5 - zmax < 0.03);
        assert!(sample_bc(&BcRanges { q_min: 0.0, ..r }, RngSeed::new(0, 0)).is_err());
    }

    #[test]
    fn noise_zero_field_and_determinism() {
        let g = desk();
        let z = VectorField::zeros(g);
        assert_eq!(add_velocity_noise(&z, RngSeed::new(1, 1)), z);
        let v = VectorField::new(g, vec![0.5; g.len()], vec![0.1; g.len()]).unwrap();
        assert_eq!(add_velocity_noise(&v, RngSeed::new(2, 2)), add_velocity_noise(&v, RngSeed::new(2, 2)));
    }

    #[test]
    fn noise_std_is_ten_percent_of_max_speed() {
        // One cell at |v| = 1, the rest slower; 10⁶ component draws.
        let g = make_grid(500, 1000, 1.0, 1.0).unwrap();
        let mut e = vec![0.3; g.len()];
        e[0] = 1.0;
        let v = VectorField::new(g, e.clone(), vec![0.0; g.len()]).unwrap();
        let noisy = add_velocity_noise(&v, RngSeed::new(8, 0));
        let d: Vec<f64> = noisy
            .easting()
            .iter()
            .zip(&e)
            .map(|(a, b)| a - b)
            .chain(noisy.northing().iter().copied())
            .collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
        // SE of the sample std at n = 10⁶ is σ/√(2n) ≈ 7e-5.
        assert!((sd - 0.10).abs() < 0.001, "sd = {sd}");
    }
}
