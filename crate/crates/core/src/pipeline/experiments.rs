use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Config, Truth};
use crate::bathy::{add_velocity_noise_frac, noise_std};
use crate::error::{Error, Result};
use crate::fieldio::{write_atomic, write_field, Field};
use crate::fields::{rmse, rmse_velocity, BoundaryCondition, ScalarField, VectorField};
use crate::pcga::{data_misfit, pcga_invert_with_report, prior_modes, InversionReport, PosteriorEnsemble};
use crate::rng::RngSeed;
use crate::surrogates::{build_model, mean_speed, train, EpochRecord, Model, ModelKind, Sample, Splits};
use crate::swe::{solve_steady, SolverParams};

/// Relative noise level assumed by the inversion when the observations
/// are left clean.
const CLEAN_ASSUMED_NOISE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionSummary {
    pub noise_std: f64,
    pub prior_bathy_rmse: f64,
    pub posterior_bathy_rmse: f64,
    /// Velocity RMSE against the noisy observations on the observed cells.
    pub prior_misfit: f64,
    pub posterior_misfit: f64,
    /// Velocity RMSE against the noise-free truth on all cells.
    pub prior_clean_misfit: f64,
    pub posterior_clean_misfit: f64,
    pub report: InversionReport,
}

pub struct InversionArtifacts {
    pub posterior: PosteriorEnsemble,
    pub truth: ScalarField,
    pub truth_velocity: VectorField,
    pub observations: VectorField,
    pub summary: InversionSummary,
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

/// Synthetic twin: builds a truth from the prior, observes its velocities
/// with noise and inverts them. Artifacts go to `out_dir` when given.
pub fn run_inversion(cfg: &Config, out_dir: Option<&Path>) -> Result<InversionArtifacts> {
    cfg.validate()?;
    let ic = &cfg.invert;
    let bc = ic.bc()?;
    let base = cfg.river.bathymetry(&cfg.grid);
    let prior = prior_modes(&cfg.grf, &cfg.grid, ic.k)?.with_mean(base.clone())?;
    let root = RngSeed::new(cfg.seed, 0).purpose("twin");
    let coeffs: Vec<f64> = match ic.truth {
        Truth::Mode { index, amplitude } => {
            if index >= ic.k {
                return Err(Error::Config(format!("truth mode {index} outside the {} retained modes", ic.k)));
            }
            (0..ic.k).map(|i| if i == index { amplitude } else { 0.0 }).collect()
        }
        Truth::PriorDraw { scale } => {
            use rand::Rng;
            let mut r = root.purpose("truth").rng();
            (0..ic.k).map(|_| scale * r.sample::<f64, _>(rand_distr::StandardNormal)).collect()
        }
    };
    let truth = prior.reconstruct(&coeffs);
    let truth_velocity = solve_steady(&truth, &bc, &ic.params.solver)?.velocity();
    let (observations, sigma) = if ic.noise_fraction > 0.0 {
        (
            add_velocity_noise_frac(&truth_velocity, ic.noise_fraction, root.purpose("noise")),
            noise_std(&truth_velocity, ic.noise_fraction),
        )
    } else {
        (truth_velocity.clone(), noise_std(&truth_velocity, CLEAN_ASSUMED_NOISE))
    };
    let (posterior, report) = pcga_invert_with_report(&observations, &bc, &prior, sigma, &ic.params)?;
    let summary = InversionSummary {
        noise_std: sigma,
        prior_bathy_rmse: rmse(base.values(), truth.values()),
        posterior_bathy_rmse: rmse(posterior.mean().values(), truth.values()),
        prior_misfit: report.prior_misfit,
        posterior_misfit: report.posterior_misfit,
        prior_clean_misfit: data_misfit(&base, &bc, &truth_velocity, &ic.params.solver)?,
        posterior_clean_misfit: data_misfit(posterior.mean(), &bc, &truth_velocity, &ic.params.solver)?,
        report,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        cfg.record(dir)?;
        posterior.write(&dir.join("posterior.rpen"))?;
        write_field(dir.join("truth_bathy.rfsf"), &Field::Scalar(truth.clone()))?;
        write_field(dir.join("posterior_mean.rfsf"), &Field::Scalar(posterior.mean().clone()))?;
        write_field(dir.join("observations.rfsf"), &Field::Vector(observations.clone()))?;
        write_atomic(&dir.join("inversion.json"), &json_bytes(&summary))?;
    }
    Ok(InversionArtifacts { posterior, truth, truth_velocity, observations, summary })
}

/// Builds and trains one surrogate with seeds derived from `seed`.
pub fn train_model(cfg: &Config, kind: ModelKind, splits: &Splits, seed: u64) -> Result<(Model, Vec<EpochRecord>)> {
    let hyper = cfg.hyper(kind);
    hyper.validate(kind)?;
    let root = RngSeed::new(seed, 0).purpose(kind.name());
    let model = build_model(kind, &hyper, &cfg.grid, root.purpose("init"))?;
    train(model, splits, root.purpose("train"))
}

/// Anything that maps (bathymetry, BC) to a velocity field.
pub enum Predictor {
    Solver(SolverParams),
    Model(Box<Model>),
}

impl Predictor {
    pub fn name(&self) -> &'static str {
        match self {
            Predictor::Solver(_) => "solver",
            Predictor::Model(m) => m.kind().name(),
        }
    }

    /// One result per item, in item order.
    pub fn predict_all(&self, items: &[(&ScalarField, &BoundaryCondition)]) -> Vec<Result<VectorField>> {
        match self {
            Predictor::Solver(p) => items.par_iter().map(|(b, bc)| solve_steady(b, bc, p).map(|s| s.velocity())).collect(),
            Predictor::Model(m) => match m.predict_many(items) {
                Ok(v) => v.into_iter().map(Ok).collect(),
                Err(e) => {
                    let msg = e.to_string();
                    items.iter().map(|_| Err(Error::Blowup(msg.clone()))).collect()
                }
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub split: String,
    pub samples: usize,
    /// Velocity-magnitude RMSE (m/s) over all cells of the split.
    pub rmse: f64,
    pub mean_speed: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_sha256: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn get(&self, model: &str, split: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.model == model && r.split == split)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,split,samples,rmse,mean_speed,seconds\n");
        for r in &self.rows {
            s += &format!("{},{},{},{:.6e},{:.6e},{:.3}\n", r.model, r.split, r.samples, r.rmse, r.mean_speed, r.seconds);
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join("eval.csv"), self.to_csv().as_bytes())?;
        write_atomic(&dir.join("eval.json"), &json_bytes(self))
    }
}

fn split_rmse_with(p: &Predictor, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let items: Vec<_> = samples.iter().map(|s| (&s.bathy, &s.bc)).collect();
    let mut ss = 0.0;
    for (pred, s) in p.predict_all(&items).into_iter().zip(samples) {
        ss += rmse_velocity(&pred?, &s.velocity)?.powi(2);
    }
    Ok((ss / samples.len() as f64).sqrt())
}

/// Velocity-magnitude RMSE of every predictor on every split.
pub fn evaluate(predictors: &[Predictor], splits: &Splits, config_sha256: &str) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for p in predictors {
        for (name, samples) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
            let t = Instant::now();
            let rmse = split_rmse_with(p, samples)?;
            rows.push(EvalRow {
                model: p.name().into(),
                split: name.into(),
                samples: samples.len(),
                rmse,
                mean_speed: mean_speed(samples),
                seconds: t.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(EvalReport { config_sha256: config_sha256.into(), rows })
}

/// Per-cell ensemble statistics of predicted velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct UqResult {
    pub mean: VectorField,
    pub std: VectorField,
    pub successes: usize,
    pub failures: Vec<(usize, String)>,
}

impl UqResult {
    pub fn write(&self, dir: &Path, prefix: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_field(dir.join(format!("{prefix}_mean.rfsf")), &Field::Vector(self.mean.clone()))?;
        write_field(dir.join(format!("{prefix}_std.rfsf")), &Field::Vector(self.std.clone()))?;
        let failures: Vec<_> = self.failures.iter().map(|(i, e)| json!({ "draw": i, "error": e })).collect();
        let meta = json!({ "successes": self.successes, "failures": failures });
        write_atomic(&dir.join(format!("{prefix}_uq.json")), &json_bytes(&meta))
    }
}

/// Pushes `n` posterior draws through `predictor`. Draw `i` uses stream
/// `rng.child(i)`, so two predictors given the same `rng` see the same
/// bathymetries. At least 95% of the draws must succeed.
pub fn uq_ensemble(
    predictor: &Predictor,
    posterior: &PosteriorEnsemble,
    bc: &BoundaryCondition,
    n: usize,
    rng: RngSeed,
) -> Result<UqResult> {
    if n == 0 {
        return Err(Error::invalid("ensemble size must be positive"));
    }
    let draws: Vec<ScalarField> = (0..n).into_par_iter().map(|i| posterior.draw(rng.child(i as u64))).collect();
    let items: Vec<_> = draws.iter().map(|d| (d, bc)).collect();
    let grid = *posterior.grid();
    let cells = 2 * grid.len();
    let mut sum = vec![0.0; cells];
    let mut ok = Vec::with_capacity(n);
    let mut failures = Vec::new();
    for (i, r) in predictor.predict_all(&items).into_iter().enumerate() {
        match r {
            Ok(v) => {
                let f = v.to_flat();
                sum.iter_mut().zip(&f).for_each(|(s, x)| *s += x);
                ok.push(f);
            }
            Err(e) if e.is_numerical() => failures.push((i, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    let m = ok.len();
    if (m as f64) < 0.95 * n as f64 {
        return Err(Error::Inversion(format!("only {m} of {n} ensemble members succeeded")));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / m as f64).collect();
    let mut var = vec![0.0; cells];
    for f in &ok {
        var.iter_mut().zip(f).zip(&mean).for_each(|((v, x), mu)| *v += (x - mu).powi(2));
    }
    let std: Vec<f64> = var.iter().map(|v| (v / m as f64).sqrt()).collect();
    Ok(UqResult {
        mean: VectorField::from_flat(grid, &mean)?,
        std: VectorField::from_flat(grid, &std)?,
        successes: m,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub repeats: usize,
    pub solve_seconds: Vec<f64>,
    pub predict_seconds: Vec<f64>,
    pub median_solve: f64,
    pub median_predict: f64,
    pub speedup: f64,
    /// Set when a single repeat makes the medians unreliable.
    pub low_confidence: bool,
}

impl BenchReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &json_bytes(self))
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times the solver and a surrogate on identical inputs.
pub fn benchmark_speed(
    model: &Model,
    bathy: &ScalarField,
    bc: &BoundaryCondition,
    solver: &SolverParams,
    repeats: usize,
) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(Error::invalid("benchmark needs at least one repeat"));
    }
    if model.grid() != bathy.grid() {
        return Err(Error::shape("model and bathymetry grids differ"));
    }
    model.predict(bathy, bc)?;
    let mut solve_seconds = Vec::with_capacity(repeats);
    let mut predict_seconds = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        std::hint::black_box(solve_steady(bathy, bc, solver)?);
        solve_seconds.push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        std::hint::black_box(model.predict(bathy, bc)?);
        predict_seconds.push(t.elapsed().as_secs_f64());
    }
    let (ms, mp) = (median(&solve_seconds), median(&predict_seconds));
    Ok(BenchReport {
        model: model.kind().name().into(),
        repeats,
        solve_seconds,
        predict_seconds,
        median_solve: ms,
        median_predict: mp,
        speedup: ms / mp.max(f64::MIN_POSITIVE),
        low_confidence: repeats == 1,
    })
}
