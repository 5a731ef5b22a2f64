//! wasm-bindgen bindings for a single static demo page (`www/index.html`).
//! Every export returns a flat row-major array (x fastest) that the page
//! paints as a heatmap. The plain-Rust functions underneath are what the
//! native tests exercise.

use riverflow::bathy::{shore_taper, GrfSampler, GrfSpec, SyntheticRiver};
use riverflow::rng::RngSeed;
use riverflow::swe::{solve_steady, SolverParams};
use riverflow::{make_grid, BoundaryCondition, Grid};
use wasm_bindgen::prelude::*;

/// Largest grid the page may request; keeps a solve interactive.
pub const MAX_CELLS: usize = 64 * 16;

fn demo_grid(nx: usize, ny: usize) -> riverflow::Result<Grid> {
    if nx * ny > MAX_CELLS {
        return Err(riverflow::Error::InvalidArgument(format!("at most {MAX_CELLS} cells, got {}", nx * ny)));
    }
    make_grid(nx, ny, 25.0, 7.5)
}

pub fn sample_field(nx: usize, ny: usize, beta: f64, len_x: f64, len_y: f64, seed: u64) -> riverflow::Result<Vec<f64>> {
    let grid = demo_grid(nx, ny)?;
    let spec = GrfSpec { beta, len_x, len_y, ..GrfSpec::default() };
    Ok(GrfSampler::new(&spec, &grid)?.sample(RngSeed::new(seed, 0)).into_values())
}

pub fn taper_field(nx: usize, ny: usize, exponent: f64) -> riverflow::Result<Vec<f64>> {
    let grid = demo_grid(nx, ny)?;
    if !(exponent >= 0.0 && exponent.is_finite()) {
        return Err(riverflow::Error::InvalidArgument(format!("taper exponent must be non-negative, got {exponent}")));
    }
    Ok(shore_taper(&grid, exponent).into_values())
}

/// Speed field of the synthetic reach, perturbed by one random draw.
pub fn solve_speed(nx: usize, ny: usize, discharge: f64, stage: f64, seed: u64) -> riverflow::Result<Vec<f64>> {
    let grid = demo_grid(nx, ny)?;
    let river = SyntheticRiver { meander_amplitude: 0.3 * grid.width(), ..SyntheticRiver::default() };
    let bed = GrfSampler::new(&GrfSpec::default(), &grid)?.augment(&river.bathymetry(&grid), RngSeed::new(seed, 0))?;
    let bc = BoundaryCondition::new(discharge, stage)?;
    Ok(solve_steady(&bed, &bc, &SolverParams::default())?.velocity().magnitude().into_values())
}

fn js(e: riverflow::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = grfSample)]
pub fn grf_sample(nx: usize, ny: usize, beta: f64, len_x: f64, len_y: f64, seed: u64) -> Result<Vec<f64>, JsError> {
    sample_field(nx, ny, beta, len_x, len_y, seed).map_err(js)
}

#[wasm_bindgen(js_name = shoreTaper)]
pub fn shore_taper_js(nx: usize, ny: usize, exponent: f64) -> Result<Vec<f64>, JsError> {
    taper_field(nx, ny, exponent).map_err(js)
}

#[wasm_bindgen(js_name = solveSpeed)]
pub fn solve_speed_js(nx: usize, ny: usize, discharge: f64, stage: f64, seed: u64) -> Result<Vec<f64>, JsError> {
    solve_speed(nx, ny, discharge, stage, seed).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_sizes_and_determinism() {
        let a = sample_field(32, 8, 1.2, 115.0, 29.0, 3).unwrap();
        assert_eq!(a.len(), 256);
        assert_eq!(a, sample_field(32, 8, 1.2, 115.0, 29.0, 3).unwrap());
        assert_ne!(a, sample_field(32, 8, 1.2, 115.0, 29.0, 4).unwrap());
    }

    #[test]
    fn taper_vanishes_toward_banks() {
        let t = taper_field(4, 8, 1.0).unwrap();
        assert!(t[0] < t[4 * 4]);
        assert!(t.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(taper_field(4, 8, -1.0).is_err());
    }

    #[test]
    fn small_solve_flows() {
        let s = solve_speed(24, 8, 150.0, 31.0, 1).unwrap();
        assert_eq!(s.len(), 192);
        assert!(s.iter().all(|v| v.is_finite()) && s.iter().any(|v| *v > 0.01));
        assert!(solve_speed(128, 16, 150.0, 31.0, 1).is_err());
    }
}
