use std::path::Path;

use crate::error::{Error, Result};
use crate::fieldio::write_atomic;
use crate::fields::Grid;

fn check(grid: &Grid, values: &[f64]) -> Result<()> {
    if values.len() != grid.len() {
        return Err(Error::shape(format!("{} values for a {}x{} grid", values.len(), grid.nx, grid.ny)));
    }
    Ok(())
}

/// Binary greyscale heatmap scaled from the field's min (black) to max
/// (white). The first image row is the northernmost grid row.
pub fn write_pgm(path: &Path, grid: &Grid, values: &[f64]) -> Result<()> {
    check(grid, values)?;
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{} {}\n255\n", grid.nx, grid.ny).into_bytes();
    for j in (0..grid.ny).rev() {
        for i in 0..grid.nx {
            let t = (values[grid.idx(i, j)] - lo) / span;
            bytes.push((t * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    write_atomic(path, &bytes)
}

/// One CSV line per grid row (south to north), one column per cell.
pub fn write_csv_grid(path: &Path, grid: &Grid, values: &[f64]) -> Result<()> {
    check(grid, values)?;
    let mut s = String::new();
    for j in 0..grid.ny {
        let row: Vec<String> = (0..grid.nx).map(|i| format!("{:.6e}", values[grid.idx(i, j)])).collect();
        s += &row.join(",");
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}
