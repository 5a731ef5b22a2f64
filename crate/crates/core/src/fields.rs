//! Structured river-aligned grids and the cell-centered fields living on them.
//!
//! Cells are stored row-major with x (along-river, easting) varying fastest:
//! the value of cell `(i, j)` sits at index `j * nx + i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rectilinear grid; `x` runs along the river, `y` across it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
}

impl Grid {
    pub const MIN_CELLS: usize = 4;

    pub fn new(nx: usize, ny: usize, dx: f64, dy: f64) -> Result<Self> {
        if nx < Self::MIN_CELLS || ny < Self::MIN_CELLS {
            return Err(Error::invalid(format!(
                "grid needs at least {m}x{m} cells, got {nx}x{ny}",
                m = Self::MIN_CELLS
            )));
        }
        if !(dx.is_finite() && dx > 0.0 && dy.is_finite() && dy > 0.0) {
            return Err(Error::invalid(format!("cell sizes must be positive, got dx={dx} dy={dy}")));
        }
        let grid = Grid { nx, ny, dx, dy };
        if !(grid.length().is_finite() && grid.width().is_finite()) {
            return Err(Error::invalid("domain extent overflows"));
        }
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        Grid::new(self.nx, self.ny, self.dx, self.dy).map(|_| ())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    /// Along-river extent L = nx·dx.
    pub fn length(&self) -> f64 {
        self.nx as f64 * self.dx
    }

    /// Across-river extent W = ny·dy.
    pub fn width(&self) -> f64 {
        self.ny as f64 * self.dy
    }

    #[inline]
    pub fn x_center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.dx
    }

    #[inline]
    pub fn y_center(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.dy
    }

    pub fn cell_area(&self) -> f64 {
        self.dx * self.dy
    }
}

pub fn make_grid(nx: usize, ny: usize, dx: f64, dy: f64) -> Result<Grid> {
    Grid::new(nx, ny, dx, dy)
}

fn check_values(grid: &Grid, values: &[f64], what: &str) -> Result<()> {
    if values.len() != grid.len() {
        return Err(Error::shape(format!(
            "{what}: expected {} values for a {}x{} grid, got {}",
            grid.len(),
            grid.nx,
            grid.ny,
            values.len()
        )));
    }
    if let Some(k) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what}: non-finite value at cell {k}")));
    }
    Ok(())
}

/// One real value per cell (bathymetry in m, speed in m/s, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        check_values(&grid, &values, "scalar field")?;
        Ok(ScalarField { grid, values })
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        ScalarField { grid, values: vec![value; grid.len()] }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                values.push(f(i, j));
            }
        }
        ScalarField { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.idx(i, j)]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Easting/northing velocity components per cell (m/s).
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    grid: Grid,
    easting: Vec<f64>,
    northing: Vec<f64>,
}

impl VectorField {
    pub fn new(grid: Grid, easting: Vec<f64>, northing: Vec<f64>) -> Result<Self> {
        check_values(&grid, &easting, "easting component")?;
        check_values(&grid, &northing, "northing component")?;
        Ok(VectorField { grid, easting, northing })
    }

    pub fn zeros(grid: Grid) -> Self {
        VectorField { grid, easting: vec![0.0; grid.len()], northing: vec![0.0; grid.len()] }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn easting(&self) -> &[f64] {
        &self.easting
    }

    pub fn northing(&self) -> &[f64] {
        &self.northing
    }

    pub fn into_components(self) -> (Vec<f64>, Vec<f64>) {
        (self.easting, self.northing)
    }

    /// Per-cell speed |v|.
    pub fn magnitude(&self) -> ScalarField {
        let values = self.easting.iter().zip(&self.northing).map(|(u, v)| u.hypot(*v)).collect();
        ScalarField { grid: self.grid, values }
    }

    pub fn max_speed(&self) -> f64 {
        self.easting.iter().zip(&self.northing).map(|(u, v)| u.hypot(*v)).fold(0.0, f64::max)
    }

    pub fn mean_speed(&self) -> f64 {
        self.magnitude().mean()
    }

    /// Easting block followed by northing block.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.grid.len());
        out.extend_from_slice(&self.easting);
        out.extend_from_slice(&self.northing);
        out
    }

    pub fn from_flat(grid: Grid, flat: &[f64]) -> Result<Self> {
        let n = grid.len();
        if flat.len() != 2 * n {
            return Err(Error::shape(format!("expected {} values, got {}", 2 * n, flat.len())));
        }
        VectorField::new(grid, flat[..n].to_vec(), flat[n..].to_vec())
    }
}

/// Discharge entering upstream and free-surface elevation held downstream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryCondition {
    /// Q, m³/s.
    pub discharge_q: f64,
    /// z_f, m above datum.
    pub surface_zf: f64,
}

impl BoundaryCondition {
    pub fn new(discharge_q: f64, surface_zf: f64) -> Result<Self> {
        if !(discharge_q.is_finite() && discharge_q > 0.0) {
            return Err(Error::invalid(format!("discharge must be positive, got {discharge_q}")));
        }
        if !surface_zf.is_finite() {
            return Err(Error::invalid("free-surface elevation must be finite"));
        }
        Ok(BoundaryCondition { discharge_q, surface_zf })
    }

    /// Checks that the downstream stage leaves positive depth somewhere on
    /// the outflow column of `bathy`.
    pub fn validate_for(&self, bathy: &ScalarField) -> Result<()> {
        BoundaryCondition::new(self.discharge_q, self.surface_zf)?;
        let g = bathy.grid();
        let min_out = (0..g.ny).map(|j| bathy.at(g.nx - 1, j)).fold(f64::INFINITY, f64::min);
        if self.surface_zf <= min_out {
            return Err(Error::invalid(format!(
                "free surface {} m does not exceed outflow bed minimum {min_out} m",
                self.surface_zf
            )));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.discharge_q, self.surface_zf]
    }
}

/// RMSE of velocity magnitude: sqrt(mean over cells of (|v_pred| - |v_ref|)²).
pub fn rmse_velocity(pred: &VectorField, reference: &VectorField) -> Result<f64> {
    if pred.grid != reference.grid {
        return Err(Error::shape("velocity fields live on different grids"));
    }
    let a = pred.magnitude();
    let b = reference.magnitude();
    Ok(rmse(a.values(), b.values()))
}

pub(crate) fn rmse(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (ss / a.len() as f64).sqrt()
}
