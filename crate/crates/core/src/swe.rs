//! Steady 2D depth-averaged shallow water solver.
//!
//! First-order Godunov finite volumes on the structured grid: Rusanov face
//! fluxes, hydrostatic reconstruction of the bed-slope source (Audusse et
//! al.), semi-implicit Manning friction, and explicit pseudo-time marching
//! until the normalized residual drops below tolerance.
//!
//! Boundaries: discharge enters through the upstream face (x = 0), split
//! across cells in proportion to conveyance h^(5/3); the downstream face
//! holds the free-surface stage with zero-gradient velocity; both banks are
//! reflective walls.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{BoundaryCondition, Grid, ScalarField, VectorField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverParams {
    /// Manning roughness, s·m^(-1/3). Zero gives the frictionless variant.
    pub manning_n: f64,
    pub gravity_g: f64,
    pub cfl: f64,
    /// Cells shallower than this are dry and carry no velocity.
    pub dry_tol: f64,
    /// Steady residual tolerance, 1/s.
    pub resid_tol: f64,
    pub max_steps: usize,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            manning_n: 0.03,
            gravity_g: 9.81,
            cfl: 0.45,
            dry_tol: 1e-4,
            resid_tol: 1e-7,
            max_steps: 200_000,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.cfl > 0.0 && self.cfl <= 0.9) {
            return Err(Error::invalid(format!("cfl must lie in (0, 0.9], got {}", self.cfl)));
        }
        if !(self.dry_tol > 0.0 && self.resid_tol > 0.0 && self.gravity_g > 0.0) {
            return Err(Error::invalid("dry_tol, resid_tol and gravity must be positive"));
        }
        // manning_n = 0 is accepted for frictionless verification runs.
        if !(self.manning_n >= 0.0 && self.manning_n.is_finite()) {
            return Err(Error::invalid(format!("manning_n must be non-negative, got {}", self.manning_n)));
        }
        if self.max_steps == 0 {
            return Err(Error::invalid("max_steps must be at least 1"));
        }
        Ok(())
    }

    pub fn frictionless(self) -> Self {
        SolverParams { manning_n: 0.0, ..self }
    }
}

/// Water depth and depth-averaged velocity per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    grid: Grid,
    depth_h: Vec<f64>,
    vel_u: Vec<f64>,
    vel_v: Vec<f64>,
}

impl FlowState {
    pub fn new(grid: Grid, depth_h: Vec<f64>, vel_u: Vec<f64>, vel_v: Vec<f64>) -> Result<Self> {
        for (name, a) in [("depth", &depth_h), ("u", &vel_u), ("v", &vel_v)] {
            if a.len() != grid.len() {
                return Err(Error::shape(format!("{name}: expected {} values, got {}", grid.len(), a.len())));
            }
            if a.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("{name}: non-finite value")));
            }
        }
        if depth_h.iter().any(|h| *h < 0.0) {
            return Err(Error::invalid("negative depth"));
        }
        Ok(FlowState { grid, depth_h, vel_u, vel_v })
    }

    /// Still water at stage `surface` over `bathy`.
    pub fn lake_at_rest(bathy: &ScalarField, surface: f64) -> Self {
        let depth_h = bathy.values().iter().map(|z| (surface - z).max(0.0)).collect();
        let n = bathy.grid().len();
        FlowState { grid: *bathy.grid(), depth_h, vel_u: vec![0.0; n], vel_v: vec![0.0; n] }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth_h
    }

    pub fn vel_u(&self) -> &[f64] {
        &self.vel_u
    }

    pub fn vel_v(&self) -> &[f64] {
        &self.vel_v
    }

    pub fn velocity(&self) -> VectorField {
        VectorField::new(self.grid, self.vel_u.clone(), self.vel_v.clone())
            .expect("flow state arrays are validated on construction")
    }

    pub fn max_speed(&self) -> f64 {
        self.vel_u.iter().zip(&self.vel_v).map(|(u, v)| u.hypot(*v)).fold(0.0, f64::max)
    }

    /// Free-surface elevation h + z_b.
    pub fn surface(&self, bathy: &ScalarField) -> Vec<f64> {
        self.depth_h.iter().zip(bathy.values()).map(|(h, z)| h + z).collect()
    }
}

/// Discharge through column `i`: Σ_j h·u·dy.
pub fn cross_section_flux(state: &FlowState, i: usize) -> Result<f64> {
    let g = &state.grid;
    if i >= g.nx {
        return Err(Error::invalid(format!("column {i} out of range 0..{}", g.nx)));
    }
    Ok((0..g.ny)
        .map(|j| {
            let k = g.idx(i, j);
            state.depth_h[k] * state.vel_u[k] * g.dy
        })
        .sum())
}

/// Diagnostics of a converged solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub steps: usize,
    pub residual: f64,
    pub pseudo_time: f64,
}

/// Normalization scales for the steady residual.
#[derive(Debug, Clone, Copy)]
struct Scales {
    depth: f64,
    unit_discharge: f64,
}

impl Scales {
    fn new(grid: &Grid, depth: &[f64], bc: &BoundaryCondition, p: &SolverParams) -> Result<Self> {
        let (sum, count) = depth
            .iter()
            .filter(|h| **h > p.dry_tol)
            .fold((0.0, 0usize), |(s, c), h| (s + h, c + 1));
        if count == 0 {
            return Err(Error::Dry);
        }
        let depth_scale = sum / count as f64;
        // The still-water limit Q -> 0 would otherwise divide by ~0.
        let floor = 1e-3 * depth_scale * (p.gravity_g * depth_scale).sqrt();
        Ok(Scales { depth: depth_scale, unit_discharge: (bc.discharge_q / grid.width()).max(floor) })
    }
}

/// Conserved variables plus scratch buffers reused across steps.
struct Stepper<'a> {
    grid: Grid,
    bed: &'a [f64],
    p: SolverParams,
    bc: BoundaryCondition,
    h: Vec<f64>,
    qx: Vec<f64>,
    qy: Vec<f64>,
    rh: Vec<f64>,
    rqx: Vec<f64>,
    rqy: Vec<f64>,
    inflow: Vec<f64>,
}

#[inline]
fn vel(h: f64, q: f64, dry: f64) -> f64 {
    if h > dry {
        q / h
    } else {
        0.0
    }
}

/// Rusanov flux in face-normal coordinates between reconstructed states.
/// Returns (mass, normal momentum, tangential momentum).
#[inline]
fn rusanov(hl: f64, unl: f64, utl: f64, hr: f64, unr: f64, utr: f64, g: f64) -> [f64; 3] {
    let al = unl.abs() + (g * hl).sqrt();
    let ar = unr.abs() + (g * hr).sqrt();
    let a = al.max(ar);
    let ql = hl * unl;
    let qr = hr * unr;
    let fl = [ql, ql * unl + 0.5 * g * hl * hl, ql * utl];
    let fr = [qr, qr * unr + 0.5 * g * hr * hr, qr * utr];
    [
        0.5 * (fl[0] + fr[0]) - 0.5 * a * (hr - hl),
        0.5 * (fl[1] + fr[1]) - 0.5 * a * (qr - ql),
        0.5 * (fl[2] + fr[2]) - 0.5 * a * (hr * utr - hl * utl),
    ]
}

/// Hydrostatically reconstructed interface flux. Takes face-normal unit
/// discharge and tangential velocity per side; returns the flux seen by the
/// left cell and by the right cell, which differ only in the normal momentum
/// component that absorbs the bed-slope source.
///
/// The reconstructed normal velocity preserves unit discharge (q / h*) as
/// long as the reconstructed depth keeps at least half the cell depth, so
/// a bed step does not throttle the mass flux. Below that it falls back to
/// the plain velocity scaled continuously (q / (h/2)).
#[inline]
#[allow(clippy::too_many_arguments)]
fn hr_flux(
    hl: f64,
    qnl: f64,
    utl: f64,
    zl: f64,
    hr: f64,
    qnr: f64,
    utr: f64,
    zr: f64,
    g: f64,
    dry: f64,
) -> ([f64; 3], f64, f64) {
    let zs = zl.max(zr);
    let hls = (hl + zl - zs).max(0.0);
    let hrs = (hr + zr - zs).max(0.0);
    let unl = if hl > dry { qnl / hls.max(0.5 * hl) } else { 0.0 };
    let unr = if hr > dry { qnr / hrs.max(0.5 * hr) } else { 0.0 };
    let f = rusanov(hls, unl, utl, hrs, unr, utr, g);
    let left = (f[1] - 0.5 * g * hls * hls) + 0.5 * g * hl * hl;
    let right = (f[1] - 0.5 * g * hrs * hrs) + 0.5 * g * hr * hr;
    (f, left, right)
}

impl<'a> Stepper<'a> {
    fn new(state: &FlowState, bathy: &'a ScalarField, bc: BoundaryCondition, p: SolverParams) -> Self {
        let n = state.grid.len();
        let h = state.depth_h.clone();
        let qx = h.iter().zip(&state.vel_u).map(|(h, u)| h * u).collect();
        let qy = h.iter().zip(&state.vel_v).map(|(h, v)| h * v).collect();
        Stepper {
            grid: state.grid,
            bed: bathy.values(),
            p,
            bc,
            h,
            qx,
            qy,
            rh: vec![0.0; n],
            rqx: vec![0.0; n],
            rqy: vec![0.0; n],
            inflow: vec![0.0; state.grid.ny],
        }
    }

    fn state(&self) -> FlowState {
        let dry = self.p.dry_tol;
        let vel_u = self.h.iter().zip(&self.qx).map(|(h, q)| vel(*h, *q, dry)).collect();
        let vel_v = self.h.iter().zip(&self.qy).map(|(h, q)| vel(*h, *q, dry)).collect();
        FlowState { grid: self.grid, depth_h: self.h.clone(), vel_u, vel_v }
    }

    fn stable_dt(&self) -> Result<f64> {
        let g = self.p.gravity_g;
        let dry = self.p.dry_tol;
        let mut smax = 0.0f64;
        for k in 0..self.h.len() {
            let h = self.h[k];
            if h > dry {
                let c = (g * h).sqrt();
                let u = (self.qx[k] / h).abs();
                let v = (self.qy[k] / h).abs();
                smax = smax.max(u.max(v) + c);
            }
        }
        if smax == 0.0 {
            return Err(Error::Dry);
        }
        Ok(self.p.cfl * self.grid.dx.min(self.grid.dy) / smax)
    }

    /// Splits Q across the upstream column by conveyance h^(5/3); unit
    /// discharge per cell (m²/s).
    fn distribute_inflow(&mut self) -> Result<()> {
        let gr = self.grid;
        let mut total = 0.0;
        for j in 0..gr.ny {
            let h = self.h[gr.idx(0, j)];
            let k = if h > self.p.dry_tol { h.powf(5.0 / 3.0) } else { 0.0 };
            self.inflow[j] = k;
            total += k;
        }
        if total <= 0.0 {
            return Err(Error::Dry);
        }
        let scale = self.bc.discharge_q / (total * gr.dy);
        for q in &mut self.inflow {
            *q *= scale;
        }
        Ok(())
    }

    fn compute_rhs(&mut self) -> Result<()> {
        self.distribute_inflow()?;
        let gr = self.grid;
        let (nx, ny) = (gr.nx, gr.ny);
        let g = self.p.gravity_g;
        let dry = self.p.dry_tol;
        let (idx, idy) = (1.0 / gr.dx, 1.0 / gr.dy);
        self.rh.fill(0.0);
        self.rqx.fill(0.0);
        self.rqy.fill(0.0);

        // Along-river faces.
        for j in 0..ny {
            let row = j * nx;
            // Upstream discharge face.
            {
                let k = row;
                let h = self.h[k];
                let q = self.inflow[j];
                let mom = if h > dry { q * q / h } else { 0.0 };
                self.rh[k] += q * idx;
                self.rqx[k] += (mom + 0.5 * g * h * h) * idx;
            }
            for i in 0..nx - 1 {
                let l = row + i;
                let r = l + 1;
                let (hl, hr) = (self.h[l], self.h[r]);
                let (f, fl, fr) = hr_flux(
                    hl,
                    self.qx[l],
                    vel(hl, self.qy[l], dry),
                    self.bed[l],
                    hr,
                    self.qx[r],
                    vel(hr, self.qy[r], dry),
                    self.bed[r],
                    g,
                    dry,
                );
                self.rh[l] -= f[0] * idx;
                self.rh[r] += f[0] * idx;
                self.rqx[l] -= fl * idx;
                self.rqx[r] += fr * idx;
                self.rqy[l] -= f[2] * idx;
                self.rqy[r] += f[2] * idx;
            }
            // Downstream stage face: boundary depth fixed by z_f, normal
            // velocity from the outgoing Riemann invariant u + 2c,
            // tangential velocity extrapolated.
            {
                let k = row + nx - 1;
                let h = self.h[k];
                let hb = (self.bc.surface_zf - self.bed[k]).max(0.0);
                if h > dry && hb > 0.0 {
                    let u = self.qx[k] / h;
                    let v = self.qy[k] / h;
                    let ub = u + 2.0 * ((g * h).sqrt() - (g * hb).sqrt());
                    let qb = hb * ub;
                    self.rh[k] -= qb * idx;
                    self.rqx[k] -= (qb * ub + 0.5 * g * hb * hb) * idx;
                    self.rqy[k] -= qb * v * idx;
                } else {
                    self.rqx[k] -= 0.5 * g * h * h * idx;
                }
            }
        }

        // Cross-river faces; normal direction is y, so (v, u) swap roles.
        for j in 0..ny - 1 {
            for i in 0..nx {
                let l = gr.idx(i, j);
                let r = l + nx;
                let (hl, hr) = (self.h[l], self.h[r]);
                let (f, fl, fr) = hr_flux(
                    hl,
                    self.qy[l],
                    vel(hl, self.qx[l], dry),
                    self.bed[l],
                    hr,
                    self.qy[r],
                    vel(hr, self.qx[r], dry),
                    self.bed[r],
                    g,
                    dry,
                );
                self.rh[l] -= f[0] * idy;
                self.rh[r] += f[0] * idy;
                self.rqy[l] -= fl * idy;
                self.rqy[r] += fr * idy;
                self.rqx[l] -= f[2] * idy;
                self.rqx[r] += f[2] * idy;
            }
        }
        // Reflective banks: only pressure plus the Rusanov penalty on the
        // normal momentum survive against a mirrored ghost.
        for (j, sign) in [(0usize, 1.0f64), (ny - 1, -1.0)] {
            for i in 0..nx {
                let k = gr.idx(i, j);
                let h = self.h[k];
                if h <= 0.0 {
                    continue;
                }
                let v = vel(h, self.qy[k], dry);
                let a = v.abs() + (g * h).sqrt();
                let pressure = h * v * v + 0.5 * g * h * h;
                // Bottom bank (cell above the face): flux enters with +,
                // penalty opposes v. Top bank mirrors both signs.
                let f = pressure - sign * a * h * v;
                self.rqy[k] += sign * f * idy;
            }
        }
        Ok(())
    }

    /// Advances one pseudo-time step; returns (dt, normalized residual).
    fn step(&mut self, scales: &Scales) -> Result<(f64, f64)> {
        let dt = self.stable_dt()?;
        self.compute_rhs()?;
        let g = self.p.gravity_g;
        let n2 = self.p.manning_n * self.p.manning_n;
        let dry = self.p.dry_tol;
        let mut resid = 0.0f64;
        for k in 0..self.h.len() {
            let h0 = self.h[k];
            let (qx0, qy0) = (self.qx[k], self.qy[k]);
            let mut h = h0 + dt * self.rh[k];
            let mut qx = qx0 + dt * self.rqx[k];
            let mut qy = qy0 + dt * self.rqy[k];
            if h <= dry {
                // Positivity: round-off can push a drying cell a hair below
                // zero; such cells hold no momentum.
                h = h.max(0.0);
                qx = 0.0;
                qy = 0.0;
            } else if n2 > 0.0 {
                let speed = qx.hypot(qy) / h;
                let damp = 1.0 + dt * g * n2 * speed / h.powf(4.0 / 3.0);
                qx /= damp;
                qy /= damp;
            }
            if !(h.is_finite() && qx.is_finite() && qy.is_finite()) {
                return Err(Error::Blowup(format!("non-finite state in cell {k}")));
            }
            if h > dry || h0 > dry {
                let rd = (h - h0).abs() / (dt * scales.depth);
                let rm = (qx - qx0).abs().max((qy - qy0).abs()) / (dt * scales.unit_discharge);
                resid = resid.max(rd).max(rm);
            }
            self.h[k] = h;
            self.qx[k] = qx;
            self.qy[k] = qy;
        }
        Ok((dt, resid))
    }
}

fn check_inputs(state: &FlowState, bathy: &ScalarField, bc: &BoundaryCondition, p: &SolverParams) -> Result<()> {
    p.validate()?;
    if state.grid != *bathy.grid() {
        return Err(Error::shape("flow state and bathymetry grids differ"));
    }
    bc.validate_for(bathy)
}

/// One explicit finite-volume update with dt = cfl·min(dx, dy)/max wave
/// speed. Returns the new state and its normalized residual.
pub fn step_pseudo_time(
    state: &FlowState,
    bathy: &ScalarField,
    bc: &BoundaryCondition,
    params: &SolverParams,
) -> Result<(FlowState, f64)> {
    check_inputs(state, bathy, bc, params)?;
    let scales = Scales::new(&state.grid, &state.depth_h, bc, params)?;
    let mut st = Stepper::new(state, bathy, *bc, *params);
    let (_, resid) = st.step(&scales)?;
    Ok((st.state(), resid))
}

/// Advances `steps` pseudo-time steps without a convergence test.
pub fn march(
    state: &FlowState,
    bathy: &ScalarField,
    bc: &BoundaryCondition,
    params: &SolverParams,
    steps: usize,
) -> Result<(FlowState, f64)> {
    check_inputs(state, bathy, bc, params)?;
    let scales = Scales::new(&state.grid, &state.depth_h, bc, params)?;
    let mut st = Stepper::new(state, bathy, *bc, *params);
    let mut resid = f64::NAN;
    for _ in 0..steps {
        resid = st.step(&scales)?.1;
    }
    Ok((st.state(), resid))
}

/// Starting guess: surface sloped at the bulk Manning friction slope and
/// ending at z_f, velocity split by conveyance in every column.
pub fn initial_guess(bathy: &ScalarField, bc: &BoundaryCondition, params: &SolverParams) -> FlowState {
    let g = *bathy.grid();
    let z = bathy.values();
    let flat: Vec<f64> = z.iter().map(|z| (bc.surface_zf - z).max(0.0)).collect();
    let mut conveyance = 0.0;
    let mut wet_cols = 0;
    for i in 0..g.nx {
        let k: f64 = (0..g.ny).map(|j| flat[g.idx(i, j)].powf(5.0 / 3.0) * g.dy).sum();
        if k > 0.0 {
            conveyance += k;
            wet_cols += 1;
        }
    }
    let slope = if wet_cols > 0 && params.manning_n > 0.0 {
        let k = conveyance / wet_cols as f64;
        (params.manning_n * bc.discharge_q / k).powi(2)
    } else {
        0.0
    };
    let mut depth = vec![0.0; g.len()];
    let mut vel_u = vec![0.0; g.len()];
    let vel_v = vec![0.0; g.len()];
    for i in 0..g.nx {
        let x_from_outlet = g.length() - g.x_center(i) - 0.5 * g.dx;
        let stage = bc.surface_zf + slope * x_from_outlet.max(0.0);
        let mut k_col = 0.0;
        for j in 0..g.ny {
            let h = (stage - z[g.idx(i, j)]).max(0.0);
            depth[g.idx(i, j)] = h;
            if h > params.dry_tol {
                k_col += h.powf(5.0 / 3.0) * g.dy;
            }
        }
        if k_col > 0.0 {
            for j in 0..g.ny {
                let k = g.idx(i, j);
                let h = depth[k];
                if h > params.dry_tol {
                    vel_u[k] = bc.discharge_q * h.powf(2.0 / 3.0) / k_col;
                }
            }
        }
    }
    FlowState { grid: g, depth_h: depth, vel_u, vel_v }
}

/// Marches from `initial_guess` to steady state.
pub fn solve_steady_with_stats(
    bathy: &ScalarField,
    bc: &BoundaryCondition,
    params: &SolverParams,
) -> Result<(FlowState, SolveStats)> {
    params.validate()?;
    bc.validate_for(bathy)?;
    let init = initial_guess(bathy, bc, params);
    solve_from(&init, bathy, bc, params)
}

pub fn solve_from(
    init: &FlowState,
    bathy: &ScalarField,
    bc: &BoundaryCondition,
    params: &SolverParams,
) -> Result<(FlowState, SolveStats)> {
    check_inputs(init, bathy, bc, params)?;
    let scales = Scales::new(&init.grid, &init.depth_h, bc, params)?;
    let mut st = Stepper::new(init, bathy, *bc, *params);
    let mut time = 0.0;
    let mut resid = f64::INFINITY;
    for step in 1..=params.max_steps {
        let (dt, r) = st.step(&scales)?;
        time += dt;
        resid = r;
        if r <= params.resid_tol {
            return Ok((st.state(), SolveStats { steps: step, residual: r, pseudo_time: time }));
        }
    }
    Err(Error::NotConverged { steps: params.max_steps, residual: resid })
}

pub fn solve_steady(bathy: &ScalarField, bc: &BoundaryCondition, params: &SolverParams) -> Result<FlowState> {
    solve_steady_with_stats(bathy, bc, params).map(|(s, _)| s)
}
