//! Front positions and empirical spreading speeds from renewal runs.

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::field::{CompactField, SpatialGrid};
use crate::rates::RateModel;
use crate::stationary::StationaryState;
use crate::volterra::SimState;

/// Consecutive cells at or above the level needed to accept a crossing.
pub const MIN_RUN: usize = 3;
/// Minimum number of points in the OLS window.
pub const MIN_FIT_POINTS: usize = 20;

#[derive(Debug, Clone, Serialize)]
pub struct SpeedFit {
    pub speed: f64,
    pub stderr: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Time window of the fitted points.
    pub window: (f64, f64),
    pub points: usize,
}

/// Rightmost crossing of `level·S0·ρ*` by Φ over time. Positions are NaN
/// where no crossing exists.
#[derive(Debug, Clone, Serialize)]
pub struct FrontTrajectory {
    pub level: f64,
    pub threshold: f64,
    pub times: Vec<f64>,
    pub positions: Vec<f64>,
    /// Set when the front reached the right edge of the grid.
    pub hit_boundary: bool,
    pub fit: Option<SpeedFit>,
}

impl FrontTrajectory {
    pub fn valid_points(&self) -> usize {
        self.positions.iter().filter(|p| p.is_finite()).count()
    }

    /// Write `t,x_front` rows.
    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "x_front"])?;
        for (t, x) in self.times.iter().zip(&self.positions) {
            w.write_record([crate::io::fmt_f64(*t), crate::io::fmt_f64(*x)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Burn-in time excluded from speed fits.
pub fn burn_in(i_star: Option<f64>) -> f64 {
    10f64.max(2.0 * i_star.unwrap_or(0.0))
}

/// Rightmost crossing of `threshold` in one row, or NaN.
///
/// The crossing is taken after the last run of at least [`MIN_RUN`] cells at
/// or above the threshold, interpolating linearly to the next cell.
pub fn rightmost_crossing(row: &[f64], grid: &SpatialGrid, threshold: f64) -> (f64, bool) {
    let mut run = 0usize;
    let mut last = None;
    for (j, &v) in row.iter().enumerate() {
        if v >= threshold {
            run += 1;
            if run >= MIN_RUN {
                last = Some(j);
            }
        } else {
            run = 0;
        }
    }
    match last {
        None => (f64::NAN, false),
        Some(j) if j + 1 == row.len() => (grid.x(j), true),
        Some(j) => {
            let (a, b) = (row[j], row[j + 1]);
            let frac = if a > b { (a - threshold) / (a - b) } else { 0.0 };
            (grid.x(j) + frac.clamp(0.0, 1.0) * grid.dx, false)
        }
    }
}

/// Track a front on any sequence of Φ rows.
pub fn track_rows<'a>(
    rows: impl IntoIterator<Item = &'a [f64]>,
    times: &[f64],
    grid: &SpatialGrid,
    level: f64,
    threshold: f64,
) -> Result<FrontTrajectory> {
    if !(level > 0.0 && level < 1.0) {
        return Err(invalid(format!("front level {level} must lie in (0, 1)")));
    }
    let mut positions = Vec::with_capacity(times.len());
    let mut hit_boundary = false;
    for row in rows {
        if row.len() != grid.n {
            return Err(invalid("row length does not match the grid"));
        }
        let (x, edge) = rightmost_crossing(row, grid, threshold);
        hit_boundary |= edge;
        positions.push(x);
    }
    if positions.len() != times.len() {
        return Err(invalid("number of rows does not match the number of times"));
    }
    Ok(FrontTrajectory {
        level,
        threshold,
        times: times.to_vec(),
        positions,
        hit_boundary,
        fit: None,
    })
}

/// Track the rightmost `level·S0·ρ*` crossing of the boundary trace.
pub fn track_front(state: &SimState, rho_star: f64, level: f64) -> Result<FrontTrajectory> {
    if !(rho_star > 0.0) {
        return Err(Error::Domain("front tracking needs ρ* > 0 (R0 > 1)".into()));
    }
    let times = state.times();
    let threshold = level * state.s0 * rho_star;
    let traj = track_rows(
        (0..=state.steps).map(|n| state.phi(n)),
        &times,
        &state.grid.space,
        level,
        threshold,
    )?;
    if traj.hit_boundary {
        log::warn!("front at level {level} reached the edge of the grid");
    }
    Ok(traj)
}

/// Smallest distance over the run between the outermost `level·S0·ρ*`
/// crossings and the grid edges; infinite when the level is never reached.
pub fn boundary_clearance(state: &SimState, rho_star: f64, level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(invalid(format!("front level {level} must lie in (0, 1)")));
    }
    let grid = &state.grid.space;
    let threshold = level * state.s0 * rho_star;
    let mut rev = vec![0.0; grid.n];
    let mut clearance = f64::INFINITY;
    for n in 0..=state.steps {
        let row = state.phi(n);
        let (right, _) = rightmost_crossing(row, grid, threshold);
        if right.is_nan() {
            continue;
        }
        rev.iter_mut().zip(row.iter().rev()).for_each(|(r, v)| *r = *v);
        // Mirror the row so the leftmost crossing becomes a rightmost one.
        let (left_m, _) = rightmost_crossing(&rev, grid, threshold);
        let left = grid.x_min + grid.x_max() - left_m;
        clearance = clearance.min(grid.x_max() - right).min(left - grid.x_min);
    }
    Ok(clearance)
}

/// Fail when the front came within `min_distance` of either edge.
pub fn assert_clearance(state: &SimState, rho_star: f64, min_distance: f64) -> Result<f64> {
    let c = boundary_clearance(state, rho_star, 0.5)?;
    if c < min_distance {
        return Err(Error::Boundary(format!(
            "front came within {c:.3} of the grid edge (required {min_distance:.3})"
        )));
    }
    Ok(c)
}

/// OLS slope over the last `window_fraction` of valid points after `t_min`.
pub fn estimate_speed(traj: &FrontTrajectory, window_fraction: f64, t_min: f64) -> Result<SpeedFit> {
    if !(window_fraction > 0.0 && window_fraction <= 1.0) {
        return Err(invalid("window fraction must lie in (0, 1]"));
    }
    let pts: Vec<(f64, f64)> = traj
        .times
        .iter()
        .zip(&traj.positions)
        .filter(|(t, x)| **t >= t_min && x.is_finite())
        .map(|(t, x)| (*t, *x))
        .collect();
    let take = (pts.len() as f64 * window_fraction).floor() as usize;
    if take < MIN_FIT_POINTS {
        return Err(invalid(format!(
            "speed fit needs at least {MIN_FIT_POINTS} valid points, got {take}"
        )));
    }
    let pts = &pts[pts.len() - take..];
    let n = take as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let xm = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut stt, mut stx, mut sxx) = (0.0, 0.0, 0.0);
    for &(t, x) in pts {
        stt += (t - tm) * (t - tm);
        stx += (t - tm) * (x - xm);
        sxx += (x - xm) * (x - xm);
    }
    if stt == 0.0 {
        return Err(invalid("speed fit over a single time"));
    }
    let speed = stx / stt;
    let intercept = xm - speed * tm;
    let sse: f64 = pts.iter().map(|&(t, x)| (x - intercept - speed * t).powi(2)).sum();
    let stderr = if take > 2 { (sse / (n - 2.0) / stt).sqrt() } else { 0.0 };
    let r_squared = if sxx > 0.0 { 1.0 - sse / sxx } else { 1.0 };
    Ok(SpeedFit {
        speed,
        stderr,
        intercept,
        r_squared,
        window: (pts[0].0, pts[take - 1].0),
        points: take,
    })
}

/// Sup over `|x| ≤ radius`, ages `≤ age_max` of `|ϱπ − U|`, with `field`
/// the reconstructed ϱ (ages × nx).
pub fn verify_longtime(
    field: &[f64],
    model: &RateModel,
    grid: &SpatialGrid,
    stationary: &StationaryState,
    source_cum: &CompactField,
    radius: f64,
    age_max: f64,
) -> Result<f64> {
    let (cols, ages) = region(field, model, grid, radius, age_max)?;
    if stationary.phi_hat.len() != grid.n {
        return Err(invalid("stationary state lives on a different grid"));
    }
    let pi = model.pi_tab();
    let mut sup = 0.0f64;
    for k in 0..ages {
        for j in cols.clone() {
            let rho = field[k * grid.n + j] * pi[k];
            sup = sup.max((rho - stationary.u(model, source_cum, k, j)).abs());
        }
    }
    Ok(sup)
}

/// Sup of ϱπ over `|x| ≥ x_abs` and all ages.
pub fn sup_ahead(field: &[f64], model: &RateModel, grid: &SpatialGrid, x_abs: f64) -> Result<f64> {
    if x_abs > grid.x_max().max(-grid.x_min) {
        return Err(invalid(format!("region |x| >= {x_abs} lies outside the grid")));
    }
    check_shape(field, model, grid)?;
    let pi = model.pi_tab();
    let mut sup = 0.0f64;
    for (k, row) in field.chunks(grid.n).enumerate() {
        for (j, v) in row.iter().enumerate() {
            if grid.x(j).abs() >= x_abs {
                sup = sup.max(v * pi[k]);
            }
        }
    }
    Ok(sup)
}

/// Sup of |ϱπ| over `|x| ≤ radius`, ages `≤ age_max`.
pub fn sup_region(
    field: &[f64],
    model: &RateModel,
    grid: &SpatialGrid,
    radius: f64,
    age_max: f64,
) -> Result<f64> {
    let (cols, ages) = region(field, model, grid, radius, age_max)?;
    let pi = model.pi_tab();
    let mut sup = 0.0f64;
    for k in 0..ages {
        for j in cols.clone() {
            sup = sup.max((field[k * grid.n + j] * pi[k]).abs());
        }
    }
    Ok(sup)
}

fn check_shape(field: &[f64], model: &RateModel, grid: &SpatialGrid) -> Result<()> {
    if field.len() != model.len() * grid.n {
        return Err(invalid("field shape does not match the age and spatial grids"));
    }
    Ok(())
}

fn region(
    field: &[f64],
    model: &RateModel,
    grid: &SpatialGrid,
    radius: f64,
    age_max: f64,
) -> Result<(std::ops::Range<usize>, usize)> {
    check_shape(field, model, grid)?;
    let tol = 1e-9 * grid.dx;
    if radius < 0.0 || -radius < grid.x_min - tol || radius > grid.x_max() + tol {
        return Err(invalid(format!("region |x| <= {radius} exceeds the grid")));
    }
    let age_limit = model.last_index() as f64 * model.step();
    if age_max < 0.0 || age_max > age_limit + 1e-9 * model.step() {
        return Err(invalid(format!("age bound {age_max} exceeds the age grid (max {age_limit})")));
    }
    let lo = ((-radius - grid.x_min) / grid.dx - 1e-9).ceil().max(0.0) as usize;
    let hi = (((radius - grid.x_min) / grid.dx + 1e-9).floor() as usize).min(grid.n - 1);
    let ages = ((age_max / model.step() + 1e-9).floor() as usize + 1).min(model.len());
    Ok((lo..hi + 1, ages))
}
