use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{hex_digest, Config};
use crate::bathy::{sample_bc, BcRanges, GrfSampler, GrfSpec};
use crate::error::{Error, Result};
use crate::fieldio::{self, read_field, write_atomic, Field};
use crate::fields::{BoundaryCondition, Grid, ScalarField};
use crate::rng::RngSeed;
use crate::surrogates::{Sample, Splits};
use crate::swe::{solve_steady_with_stats, SolverParams};

pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const BASE_FILE: &str = "base_bathy.rfsf";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: usize,
    pub split: Split,
    /// Stream that produced this sample (after any retries).
    pub seed: RngSeed,
    pub attempts: usize,
    pub bathy: String,
    pub bathy_sha256: String,
    pub bc: BoundaryCondition,
    pub velocity: String,
    pub velocity_sha256: String,
    pub residual: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub id: usize,
    pub split: Split,
    pub attempts: usize,
    pub last_error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Index of a generated dataset. Paths are relative to the manifest's
/// directory and the content carries no timestamps, so equal configs give
/// byte-identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub config_sha256: String,
    pub seed: u64,
    pub grid: Grid,
    pub base_bathy: String,
    pub base_bathy_sha256: String,
    pub grf: GrfSpec,
    pub bc_ranges: BcRanges,
    pub solver: SolverParams,
    pub counts: SplitCounts,
    pub records: Vec<Record>,
    pub failures: Vec<Failure>,
    pub complete: bool,
}

impl DatasetManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(format!("manifest {}", path.display())),
            _ => Error::Io(e),
        })?;
        let m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::CorruptFile { path: path.display().to_string(), reason: e.to_string() })?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::CorruptFile {
                path: path.display().to_string(),
                reason: format!("unsupported manifest version {}", m.version),
            });
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// True when this manifest was produced from the same dataset-relevant
    /// settings as `cfg` (training or inversion settings may differ).
    pub fn matches(&self, cfg: &Config) -> bool {
        self.version == MANIFEST_VERSION
            && self.seed == cfg.seed
            && self.grid == cfg.grid
            && self.grf == cfg.grf
            && self.bc_ranges == cfg.bc
            && self.solver == cfg.solver
            && self.counts == counts(cfg)
            && self.base_bathy_sha256
                == hex_digest(&fieldio::encode(&Field::Scalar(storage_precision(cfg.river.bathymetry(&cfg.grid)))))
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

fn split_of(id: usize, c: &SplitCounts) -> Split {
    if id < c.train {
        Split::Train
    } else if id < c.train + c.val {
        Split::Val
    } else {
        Split::Test
    }
}

/// Rounds to the f32 precision of the on-disk format, so that the stored
/// bathymetry is exactly the one that was solved.
fn storage_precision(f: ScalarField) -> ScalarField {
    let g = *f.grid();
    ScalarField::new(g, f.into_values().into_iter().map(|v| v as f32 as f64).collect()).expect("finite")
}

enum Outcome {
    Done(Record),
    Failed(Failure),
}

fn make_sample(
    id: usize,
    cfg: &Config,
    sampler: &GrfSampler,
    base: &ScalarField,
    root: RngSeed,
    dir: &Path,
) -> Result<Outcome> {
    let split = split_of(id, &counts(cfg));
    let mut last_error = String::new();
    for attempt in 0..=cfg.dataset.max_retries {
        let stream = root.child(id as u64).child(attempt as u64);
        let bathy = storage_precision(sampler.augment(base, stream.purpose("bathy"))?);
        let bc = sample_bc(&cfg.bc, stream.purpose("bc"))?;
        match solve_steady_with_stats(&bathy, &bc, &cfg.solver) {
            Ok((state, stats)) => {
                let bathy_rel = format!("samples/{id:05}_bathy.rfsf");
                let vel_rel = format!("samples/{id:05}_velocity.rfsf");
                let bathy_bytes = fieldio::encode(&Field::Scalar(bathy));
                let vel_bytes = fieldio::encode(&Field::Vector(state.velocity()));
                write_atomic(&dir.join(&bathy_rel), &bathy_bytes)?;
                write_atomic(&dir.join(&vel_rel), &vel_bytes)?;
                return Ok(Outcome::Done(Record {
                    id,
                    split,
                    seed: stream,
                    attempts: attempt + 1,
                    bathy: bathy_rel,
                    bathy_sha256: hex_digest(&bathy_bytes),
                    bc,
                    velocity: vel_rel,
                    velocity_sha256: hex_digest(&vel_bytes),
                    residual: stats.residual,
                    steps: stats.steps,
                }));
            }
            Err(e) if e.is_numerical() => last_error = e.to_string(),
            Err(e) => return Err(e),
        }
    }
    Ok(Outcome::Failed(Failure { id, split, attempts: cfg.dataset.max_retries + 1, last_error }))
}

fn counts(cfg: &Config) -> SplitCounts {
    SplitCounts { train: cfg.dataset.train, val: cfg.dataset.val, test: cfg.dataset.test }
}

/// Augments the base reach, samples boundary conditions and solves every
/// sample on a pool of `jobs` workers. Sample `id` draws from stream
/// `child(id).child(attempt)`, so results do not depend on scheduling.
/// Samples whose retries run out are listed under `failures` and the
/// manifest is marked incomplete.
pub fn generate_dataset(cfg: &Config, out_dir: &Path, jobs: usize) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir.join("samples"))?;
    cfg.record(out_dir)?;
    let base = storage_precision(cfg.river.bathymetry(&cfg.grid));
    let base_bytes = fieldio::encode(&Field::Scalar(base.clone()));
    write_atomic(&out_dir.join(BASE_FILE), &base_bytes)?;
    let sampler = GrfSampler::new(&cfg.grf, &cfg.grid)?;
    let root = RngSeed::new(cfg.seed, 0).purpose("dataset");
    let c = counts(cfg);
    let total = c.train + c.val + c.test;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<Result<Outcome>> = pool
        .install(|| (0..total).into_par_iter().map(|id| make_sample(id, cfg, &sampler, &base, root, out_dir)).collect());
    let mut records = Vec::with_capacity(total);
    let mut failures = Vec::new();
    for o in outcomes {
        match o? {
            Outcome::Done(r) => records.push(r),
            Outcome::Failed(f) => failures.push(f),
        }
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        config_sha256: cfg.hash(),
        seed: cfg.seed,
        grid: cfg.grid,
        base_bathy: BASE_FILE.into(),
        base_bathy_sha256: hex_digest(&base_bytes),
        grf: cfg.grf,
        bc_ranges: cfg.bc,
        solver: cfg.solver,
        counts: c,
        complete: failures.is_empty(),
        records,
        failures,
    };
    write_atomic(&out_dir.join(MANIFEST_FILE), manifest.to_json().as_bytes())?;
    Ok(manifest)
}

/// Reuses a complete, intact dataset in `dir` generated from matching
/// settings; otherwise generates it afresh.
pub fn ensure_dataset(cfg: &Config, dir: &Path, jobs: usize) -> Result<DatasetManifest> {
    if let Ok(m) = DatasetManifest::read(dir) {
        if m.complete && m.matches(cfg) && validate_manifest(dir)?.ok() {
            return Ok(m);
        }
    }
    generate_dataset(cfg, dir, jobs)
}

/// Outcome of a manifest integrity check.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ManifestCheck {
    pub records: usize,
    pub problems: Vec<String>,
}

impl ManifestCheck {
    pub fn ok(&self) -> bool {
        self.problems.is_empty()
    }
}

fn check_file(dir: &Path, rel: &str, sha: &str, grid: &Grid, problems: &mut Vec<String>) {
    let path = dir.join(rel);
    match fs::read(&path) {
        Err(e) => problems.push(format!("{rel}: {e}")),
        Ok(bytes) => {
            if hex_digest(&bytes) != sha {
                problems.push(format!("{rel}: checksum mismatch"));
            }
            match fieldio::decode(&bytes, rel) {
                Ok(f) if f.grid() != grid => problems.push(format!("{rel}: grid differs from manifest")),
                Ok(f) if fieldio::encode(&f) != bytes => problems.push(format!("{rel}: does not round-trip")),
                Ok(_) => {}
                Err(e) => problems.push(format!("{rel}: {e}")),
            }
        }
    }
}

/// Checks split bookkeeping and that every referenced file exists, matches
/// its checksum and decodes on the manifest's grid.
pub fn validate_manifest(dir: &Path) -> Result<ManifestCheck> {
    let m = DatasetManifest::read(dir)?;
    let mut problems = Vec::new();
    let total = m.counts.train + m.counts.val + m.counts.test;
    let mut seen = vec![false; total];
    for r in m.records.iter().map(|r| (r.id, r.split)).chain(m.failures.iter().map(|f| (f.id, f.split))) {
        let (id, split) = r;
        if id >= total {
            problems.push(format!("sample {id} outside 0..{total}"));
        } else if std::mem::replace(&mut seen[id], true) {
            problems.push(format!("sample {id} listed twice"));
        } else if split != split_of(id, &m.counts) {
            problems.push(format!("sample {id} assigned to the wrong split"));
        }
    }
    if let Some(id) = seen.iter().position(|s| !s) {
        problems.push(format!("sample {id} missing from manifest"));
    }
    if m.complete != m.failures.is_empty() {
        problems.push("completeness flag disagrees with failure list".into());
    }
    check_file(dir, &m.base_bathy, &m.base_bathy_sha256, &m.grid, &mut problems);
    for r in &m.records {
        check_file(dir, &r.bathy, &r.bathy_sha256, &m.grid, &mut problems);
        check_file(dir, &r.velocity, &r.velocity_sha256, &m.grid, &mut problems);
    }
    Ok(ManifestCheck { records: m.records.len(), problems })
}

fn load_record(dir: &Path, r: &Record) -> Result<Sample> {
    Ok(Sample {
        bathy: read_field(dir.join(&r.bathy))?.into_scalar()?,
        bc: r.bc,
        velocity: read_field(dir.join(&r.velocity))?.into_vector()?,
    })
}

/// Reads every sample of a dataset into memory, grouped by split.
pub fn load_splits(dir: &Path) -> Result<(DatasetManifest, Splits)> {
    let m = DatasetManifest::read(dir)?;
    let load = |s: Split| m.records_in(s).map(|r| load_record(dir, r)).collect::<Result<Vec<_>>>();
    let splits = Splits { train: load(Split::Train)?, val: load(Split::Val)?, test: load(Split::Test)? };
    Ok((m, splits))
}
