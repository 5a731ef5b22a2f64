//! Low-rank geostatistical inversion of bathymetry from velocity data.
//!
//! The prior is the shore-tapered Gaussian-kernel covariance truncated to its
//! leading k eigenmodes; bathymetry is `mean + Σ c_i·mode_i` with c ~ N(0, I).
//! Gauss–Newton iterations in coefficient space use finite-difference
//! Jacobian columns (one forward solve per mode) and a linearized Bayesian
//! update, giving a Gaussian posterior over the coefficients.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bathy::{GrfSpec, KernelFactor};
use crate::container::{self, Blobs};
use crate::error::{Error, Result};
use crate::fields::{BoundaryCondition, Grid, ScalarField, VectorField};
use crate::rng::RngSeed;
use crate::swe::{self, FlowState, SolverParams};

#[derive(Debug, Clone, PartialEq)]
pub struct PriorModes {
    mean: ScalarField,
    /// Each mode is √λ_i times a unit eigenvector, in m.
    modes: Vec<Vec<f64>>,
    eigenvalues: Vec<f64>,
    total_variance: f64,
}

/// Leading k scaled eigenvectors of the taper-adjusted kernel covariance.
/// The mean is zero until set with [`PriorModes::with_mean`].
pub fn prior_modes(spec: &GrfSpec, grid: &Grid, k: usize) -> Result<PriorModes> {
    if k == 0 || k > grid.len() {
        return Err(Error::invalid(format!("rank must be in 1..={}, got {k}", grid.len())));
    }
    let factor = KernelFactor::new(spec, grid, true)?;
    let spectrum = factor.spectrum();
    let mut modes = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    for &(lambda, a, b) in spectrum.iter().take(k) {
        let s = lambda.sqrt();
        modes.push(factor.eigenvector(a, b).into_iter().map(|v| v * s).collect());
        eigenvalues.push(lambda);
    }
    Ok(PriorModes {
        mean: ScalarField::constant(*grid, 0.0),
        modes,
        eigenvalues,
        total_variance: factor.total_variance(),
    })
}

impl PriorModes {
    pub fn with_mean(mut self, mean: ScalarField) -> Result<Self> {
        if mean.grid() != self.mean.grid() {
            return Err(Error::shape("prior mean grid differs from mode grid"));
        }
        self.mean = mean;
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.modes.len()
    }

    pub fn grid(&self) -> &Grid {
        self.mean.grid()
    }

    pub fn mean(&self) -> &ScalarField {
        &self.mean
    }

    pub fn modes(&self) -> &[Vec<f64>] {
        &self.modes
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Share of the covariance trace captured by the retained modes.
    pub fn captured_fraction(&self) -> f64 {
        if self.total_variance == 0.0 {
            return 1.0;
        }
        self.eigenvalues.iter().sum::<f64>() / self.total_variance
    }

    pub fn reconstruct(&self, coeffs: &[f64]) -> ScalarField {
        combine(&self.mean, &self.modes, coeffs)
    }
}

fn combine(mean: &ScalarField, modes: &[Vec<f64>], coeffs: &[f64]) -> ScalarField {
    let mut v = mean.values().to_vec();
    for (m, c) in modes.iter().zip(coeffs) {
        if *c != 0.0 {
            for (x, y) in v.iter_mut().zip(m) {
                *x += c * y;
            }
        }
    }
    ScalarField::new(*mean.grid(), v).expect("finite modes and coefficients")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InvertParams {
    /// Largest bed change (m) of one finite-difference probe along a mode.
    pub fd_step: f64,
    pub max_iters: usize,
    /// Stop once the coefficient update norm falls below this.
    pub tol: f64,
    pub max_halvings: usize,
    pub solver: SolverParams,
    /// Optional observed-cell mask; all wet cells when absent.
    pub obs_mask: Option<Vec<bool>>,
}

impl Default for InvertParams {
    fn default() -> Self {
        InvertParams {
            fd_step: 0.1,
            max_iters: 5,
            tol: 1e-2,
            max_halvings: 5,
            solver: SolverParams::default(),
            obs_mask: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionReport {
    pub iterations: usize,
    pub solver_calls: usize,
    /// Velocity RMSE against the observations at the prior mean.
    pub prior_misfit: f64,
    /// Same at the posterior mean.
    pub posterior_misfit: f64,
    pub objective_history: Vec<f64>,
    pub converged: bool,
}

/// Gaussian posterior over bathymetry in the prior's mode basis. The
/// posterior coefficient mean is already folded into `mean`; draws are
/// `mean + Σ c_i·mode_i` with c ~ N(0, coeff_cov).
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEnsemble {
    mean: ScalarField,
    modes: Vec<Vec<f64>>,
    coeff_mean: Vec<f64>,
    coeff_cov: DMatrix<f64>,
    /// Columns scaled so that cov = L·Lᵀ.
    factor: DMatrix<f64>,
    provenance: serde_json::Value,
}

impl PosteriorEnsemble {
    pub fn new(
        mean: ScalarField,
        modes: Vec<Vec<f64>>,
        coeff_mean: Vec<f64>,
        coeff_cov: DMatrix<f64>,
        provenance: serde_json::Value,
    ) -> Result<Self> {
        let k = modes.len();
        if coeff_mean.len() != k || coeff_cov.nrows() != k || coeff_cov.ncols() != k {
            return Err(Error::shape(format!("posterior rank {k} inconsistent with coefficient arrays")));
        }
        if modes.iter().any(|m| m.len() != mean.grid().len()) {
            return Err(Error::shape("mode length differs from grid size"));
        }
        let sym = (&coeff_cov + coeff_cov.transpose()) * 0.5;
        let (clamped, factor) = if k == 0 {
            (sym.clone(), sym)
        } else {
            let eig = SymmetricEigen::new(sym);
            let vals = eig.eigenvalues.map(|l| l.max(0.0));
            let clamped = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
            let clamped = (&clamped + clamped.transpose()) * 0.5;
            let factor = &eig.eigenvectors * DMatrix::from_diagonal(&vals.map(f64::sqrt));
            (clamped, factor)
        };
        Ok(PosteriorEnsemble { mean, modes, coeff_mean, coeff_cov: clamped, factor, provenance })
    }

    pub fn grid(&self) -> &Grid {
        self.mean.grid()
    }

    pub fn k(&self) -> usize {
        self.modes.len()
    }

    pub fn mean(&self) -> &ScalarField {
        &self.mean
    }

    pub fn modes(&self) -> &[Vec<f64>] {
        &self.modes
    }

    pub fn coeff_mean(&self) -> &[f64] {
        &self.coeff_mean
    }

    pub fn coeff_cov(&self) -> &DMatrix<f64> {
        &self.coeff_cov
    }

    pub fn provenance(&self) -> &serde_json::Value {
        &self.provenance
    }

    /// One coefficient draw c ~ N(0, coeff_cov).
    pub fn draw_coeffs(&self, rng: RngSeed) -> Vec<f64> {
        let mut r = rng.rng();
        let z = DVector::from_fn(self.k(), |_, _| r.sample::<f64, _>(StandardNormal));
        (&self.factor * z).iter().copied().collect()
    }

    pub fn draw(&self, rng: RngSeed) -> ScalarField {
        combine(&self.mean, &self.modes, &self.draw_coeffs(rng))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let meta = json!({
            "kind": "posterior_ensemble",
            "k": self.k(),
            "grid": self.grid(),
            "provenance": self.provenance,
        });
        let mut blobs = Blobs::new();
        blobs.push("mean", self.mean.values().to_vec());
        blobs.push("modes", self.modes.iter().flatten().copied().collect());
        blobs.push("coeff_mean", self.coeff_mean.clone());
        blobs.push("coeff_cov", self.coeff_cov.iter().copied().collect());
        container::write(path, POSTERIOR_MAGIC, &meta, &blobs)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (meta, mut blobs) = container::read(path, POSTERIOR_MAGIC)?;
        let bad = |r: &str| Error::CorruptFile { path: path.display().to_string(), reason: r.to_string() };
        let k = meta["k"].as_u64().ok_or_else(|| bad("missing k"))? as usize;
        let grid: Grid = serde_json::from_value(meta["grid"].clone()).map_err(|e| bad(&e.to_string()))?;
        grid.validate().map_err(|e| bad(&e.to_string()))?;
        let mean = ScalarField::new(grid, blobs.take("mean")?).map_err(|e| bad(&e.to_string()))?;
        let flat = blobs.take("modes")?;
        if flat.len() != k * grid.len() {
            return Err(bad("mode blob length mismatch"));
        }
        let modes = flat.chunks_exact(grid.len()).map(<[f64]>::to_vec).collect();
        let coeff_mean = blobs.take("coeff_mean")?;
        let cov = blobs.take("coeff_cov")?;
        if cov.len() != k * k {
            return Err(bad("covariance blob length mismatch"));
        }
        PosteriorEnsemble::new(mean, modes, coeff_mean, DMatrix::from_vec(k, k, cov), meta["provenance"].clone())
    }
}

pub const POSTERIOR_MAGIC: &[u8; 4] = b"RPEN";

pub fn sample_posterior(post: &PosteriorEnsemble, n: usize, rng: RngSeed) -> Vec<ScalarField> {
    (0..n).map(|i| post.draw(rng.child(i as u64))).collect()
}

struct Forward<'a> {
    prior: &'a PriorModes,
    bc: BoundaryCondition,
    params: &'a InvertParams,
    cells: Vec<usize>,
}

impl Forward<'_> {
    fn observe(&self, vel: &VectorField) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.cells.len());
        out.extend(self.cells.iter().map(|k| vel.easting()[*k]));
        out.extend(self.cells.iter().map(|k| vel.northing()[*k]));
        out
    }

    fn solve(&self, coeffs: &[f64], warm: Option<&FlowState>) -> Result<(FlowState, Vec<f64>)> {
        let bed = self.prior.reconstruct(coeffs);
        let (state, _) = match warm {
            Some(init) => swe::solve_from(init, &bed, &self.bc, &self.params.solver),
            None => swe::solve_steady_with_stats(&bed, &self.bc, &self.params.solver),
        }?;
        let obs = self.observe(&state.velocity());
        Ok((state, obs))
    }
}

fn misfit_rmse(a: &[f64], b: &[f64]) -> f64 {
    crate::fields::rmse(a, b)
}

fn objective(data: &[f64], pred: &[f64], coeffs: &[f64], noise: f64) -> f64 {
    let d: f64 = data.iter().zip(pred).map(|(a, b)| (a - b) * (a - b)).sum();
    d / (noise * noise) + coeffs.iter().map(|c| c * c).sum::<f64>()
}

pub fn pcga_invert(
    obs: &VectorField,
    bc: &BoundaryCondition,
    prior: &PriorModes,
    noise_std: f64,
    params: &InvertParams,
) -> Result<PosteriorEnsemble> {
    pcga_invert_with_report(obs, bc, prior, noise_std, params).map(|(p, _)| p)
}

pub fn pcga_invert_with_report(
    obs: &VectorField,
    bc: &BoundaryCondition,
    prior: &PriorModes,
    noise_std: f64,
    params: &InvertParams,
) -> Result<(PosteriorEnsemble, InversionReport)> {
    if obs.grid() != prior.grid() {
        return Err(Error::shape("observations and prior live on different grids"));
    }
    if !(noise_std > 0.0 && noise_std.is_finite()) {
        return Err(Error::invalid(format!("noise_std must be positive and finite, got {noise_std}")));
    }
    if !(params.fd_step > 0.0) || params.max_iters == 0 {
        return Err(Error::invalid("fd_step must be positive and max_iters at least 1"));
    }
    let k = prior.k();
    let n = obs.grid().len();
    if let Some(mask) = &params.obs_mask {
        if mask.len() != n {
            return Err(Error::shape("observation mask length differs from grid size"));
        }
    }

    // Observed cells: wet at the prior mean (and inside the mask, if any).
    let mean_state = swe::solve_steady(prior.mean(), bc, &params.solver)
        .map_err(|e| Error::Inversion(format!("forward solve at the prior mean failed: {e}")))?;
    let cells: Vec<usize> = (0..n)
        .filter(|c| mean_state.depth()[*c] > params.solver.dry_tol)
        .filter(|c| params.obs_mask.as_ref().is_none_or(|m| m[*c]))
        .collect();
    if cells.is_empty() {
        return Err(Error::Inversion("no observed wet cells".into()));
    }
    let fwd = Forward { prior, bc: *bc, params, cells };
    let data = fwd.observe(obs);
    let mut solver_calls = 1usize;

    let steps: Vec<f64> = prior
        .modes()
        .iter()
        .map(|m| {
            let amp = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if amp > 0.0 {
                params.fd_step / amp
            } else {
                params.fd_step
            }
        })
        .collect();

    let mut coeffs = vec![0.0; k];
    let mut state = mean_state;
    let mut pred = fwd.observe(&state.velocity());
    let prior_misfit = misfit_rmse(&data, &pred);
    let mut obj = objective(&data, &pred, &coeffs, noise_std);
    let mut history = vec![obj];
    let mut precision = DMatrix::<f64>::identity(k, k);
    let mut iterations = 0;
    let mut converged = false;
    let inv_var = 1.0 / (noise_std * noise_std);

    for _ in 0..params.max_iters {
        iterations += 1;
        // Jacobian columns by one-sided differences, warm-started from the
        // current state; the solves are independent.
        let cols: Vec<Result<Vec<f64>>> = (0..k)
            .into_par_iter()
            .map(|i| {
                let mut c = coeffs.clone();
                c[i] += steps[i];
                let (_, y) = fwd.solve(&c, Some(&state))?;
                Ok(y.iter().zip(&pred).map(|(a, b)| (a - b) / steps[i]).collect())
            })
            .collect();
        solver_calls += k;
        let m = pred.len();
        let mut jac = DMatrix::<f64>::zeros(m, k);
        for (i, col) in cols.into_iter().enumerate() {
            let col = col.map_err(|e| Error::Inversion(format!("finite-difference solve for mode {i} failed: {e}")))?;
            jac.set_column(i, &DVector::from_vec(col));
        }

        precision = jac.transpose() * &jac * inv_var + DMatrix::identity(k, k);
        let resid = DVector::from_iterator(m, data.iter().zip(&pred).map(|(d, p)| d - p));
        let c_now = DVector::from_column_slice(&coeffs);
        let rhs = jac.transpose() * (resid + &jac * &c_now) * inv_var;
        let target = precision
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Inversion("posterior precision is not positive definite".into()))?
            .solve(&rhs);
        let full_step = &target - &c_now;

        let mut accepted = None;
        let mut last_err = None;
        let mut scale = 1.0;
        for _ in 0..=params.max_halvings {
            let trial: Vec<f64> = (&c_now + &full_step * scale).iter().copied().collect();
            solver_calls += 1;
            match fwd.solve(&trial, Some(&state)) {
                Ok((s, y)) => {
                    let o = objective(&data, &y, &trial, noise_std);
                    if o <= obj {
                        accepted = Some((trial, s, y, o, scale));
                        break;
                    }
                    last_err = None;
                }
                Err(e) => last_err = Some(e),
            }
            scale *= 0.5;
        }
        let Some((trial, s, y, o, scale)) = accepted else {
            if let Some(e) = last_err {
                return Err(Error::Inversion(format!(
                    "forward solve failed after {} step halvings: {e}",
                    params.max_halvings
                )));
            }
            // No halving improved the objective: already at the optimum of
            // the linearized problem.
            converged = true;
            break;
        };
        let update = full_step.norm() * scale;
        coeffs = trial;
        state = s;
        pred = y;
        obj = o;
        history.push(obj);
        if update < params.tol {
            converged = true;
            break;
        }
    }

    let cov = precision
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Inversion("posterior precision is singular".into()))?;
    let posterior_misfit = misfit_rmse(&data, &pred);
    let mean = prior.reconstruct(&coeffs);
    let provenance = json!({
        "method": "low-rank geostatistical Gauss-Newton",
        "k": k,
        "noise_std": noise_std,
        "bc": bc,
        "iterations": iterations,
        "prior_misfit": prior_misfit,
        "posterior_misfit": posterior_misfit,
    });
    let post = PosteriorEnsemble::new(mean, prior.modes().to_vec(), coeffs, cov, provenance)?;
    let report = InversionReport {
        iterations,
        solver_calls,
        prior_misfit,
        posterior_misfit,
        objective_history: history,
        converged,
    };
    Ok((post, report))
}

/// Velocity RMSE between the solver run on `bathy` and `obs`.
pub fn data_misfit(bathy: &ScalarField, bc: &BoundaryCondition, obs: &VectorField, solver: &SolverParams) -> Result<f64> {
    let s = swe::solve_steady(bathy, bc, solver)?;
    let v = s.velocity();
    Ok(misfit_rmse(&v.to_flat(), &obs.to_flat()))
}
