use riverflow::bathy::{kernel_cov, GrfSampler, GrfSpec, SyntheticRiver};
use riverflow::rng::RngSeed;
use riverflow::{make_grid, Grid, ScalarField};

/// 64×16 cells sized so the two correlation lengths are whole cell offsets.
fn lag_aligned_grid(spec: &GrfSpec) -> Grid {
    make_grid(64, 16, spec.len_x / 5.0, spec.len_y / 4.0).unwrap()
}

/// Ensemble and spatial average of f(a)·f(a + offset) over all pairs.
fn empirical_cov(samples: &[ScalarField], di: usize, dj: usize) -> f64 {
    let g = samples[0].grid();
    let (mut sum, mut n) = (0.0, 0usize);
    for s in samples {
        for j in 0..g.ny - dj {
            for i in 0..g.nx - di {
                sum += s.at(i, j) * s.at(i + di, j + dj);
                n += 1;
            }
        }
    }
    sum / n as f64
}

#[test]
fn empirical_covariance_matches_kernel_at_key_lags() {
    let spec = GrfSpec::default();
    let g = lag_aligned_grid(&spec);
    let sampler = GrfSampler::new(&spec, &g).unwrap();
    let root = RngSeed::new(2024, 0);
    let samples: Vec<ScalarField> = (0..5000).map(|i| sampler.sample(root.child(i))).collect();
    for (di, dj) in [(0usize, 0usize), (5, 0), (0, 4)] {
        let want = kernel_cov(di as f64 * g.dx, dj as f64 * g.dy, &spec);
        let got = empirical_cov(&samples, di, dj);
        let rel = (got - want).abs() / want;
        assert!(rel < 0.10, "lag ({di},{dj}) cells: empirical {got:.4} vs kernel {want:.4}");
    }
}

#[test]
fn augmented_midstream_variance_matches_taper() {
    // With taper sin(πy/W)^p the variance at row j is β²·s_j².
    let spec = GrfSpec::default();
    let g = make_grid(64, 16, 25.0, 7.5).unwrap();
    let base = SyntheticRiver::default().bathymetry(&g);
    let sampler = GrfSampler::new(&spec, &g).unwrap();
    let root = RngSeed::new(9, 1);
    let n = 2000;
    let j = g.ny / 2;
    let y = g.y_center(j) / g.width();
    let s2 = (std::f64::consts::PI * y).sin().powf(2.0 * spec.taper_exp);
    let mut acc = 0.0;
    for k in 0..n {
        let a = sampler.augment(&base, root.child(k)).unwrap();
        for i in 0..g.nx {
            acc += (a.at(i, j) - base.at(i, j)).powi(2);
        }
    }
    let var = acc / (n as f64 * g.nx as f64);
    let want = spec.beta * spec.beta * s2;
    assert!((var - want).abs() / want < 0.10, "midstream variance {var:.4} vs {want:.4}");
}
