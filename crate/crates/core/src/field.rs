//! Spatial grids, compactly supported age×space fields and the initial-data
//! presets.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rates::RateModel;

/// Uniform grid `x_j = x_min + j·dx`, `j = 0..n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialGrid {
    pub x_min: f64,
    pub dx: f64,
    pub n: usize,
}

impl SpatialGrid {
    /// Symmetric grid on `[−half_width, half_width]`; the half-width is
    /// rounded up to a whole number of cells.
    pub fn symmetric(half_width: f64, dx: f64) -> Result<Self> {
        if !(dx > 0.0 && dx.is_finite()) {
            return Err(invalid(format!("spatial step must be positive, got {dx}")));
        }
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(invalid(format!("domain half-width must be positive, got {half_width}")));
        }
        let m = (half_width / dx - 1e-9).ceil() as usize;
        Ok(SpatialGrid {
            x_min: -(m as f64) * dx,
            dx,
            n: 2 * m + 1,
        })
    }

    pub fn x(&self, j: usize) -> f64 {
        self.x_min + j as f64 * self.dx
    }

    pub fn x_max(&self) -> f64 {
        self.x(self.n - 1)
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.x(j)).collect()
    }

    /// Index range of nodes with `a < x < b` (open interval).
    pub fn open_range(&self, a: f64, b: f64) -> std::ops::Range<usize> {
        let lo = ((a - self.x_min) / self.dx).floor() + 1.0;
        let hi = ((b - self.x_min) / self.dx).ceil();
        let lo = lo.max(0.0) as usize;
        let hi = (hi.max(0.0) as usize).min(self.n);
        lo..hi.max(lo)
    }

    /// Nearest grid index to x, if inside.
    pub fn index_of(&self, x: f64) -> Option<usize> {
        let j = ((x - self.x_min) / self.dx).round();
        (j >= 0.0 && (j as usize) < self.n).then_some(j as usize)
    }
}

/// Age×space field that vanishes outside a window of columns
/// `j0..j0 + width`. Rows are ages `0..ages`; beyond the last stored row
/// the field is either zero or held at the last row.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactField {
    pub j0: usize,
    pub width: usize,
    pub ages: usize,
    /// Value beyond the last stored age row: held (`true`) or zero.
    pub hold_last: bool,
    values: Vec<f64>,
}

impl CompactField {
    pub fn zero() -> Self {
        CompactField {
            j0: 0,
            width: 0,
            ages: 0,
            hold_last: false,
            values: Vec::new(),
        }
    }

    pub fn from_fn(
        grid: &SpatialGrid,
        columns: std::ops::Range<usize>,
        ages: usize,
        step: f64,
        hold_last: bool,
        f: impl Fn(f64, f64) -> f64,
    ) -> Self {
        let width = columns.len();
        let mut values = Vec::with_capacity(ages * width);
        for k in 0..ages {
            let i = k as f64 * step;
            for j in columns.clone() {
                values.push(f(i, grid.x(j)));
            }
        }
        CompactField {
            j0: columns.start,
            width,
            ages,
            hold_last,
            values,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Row `k` over the window, `None` if it vanishes.
    pub fn row(&self, k: usize) -> Option<&[f64]> {
        if self.width == 0 || self.ages == 0 {
            return None;
        }
        let k = if k >= self.ages {
            if !self.hold_last {
                return None;
            }
            self.ages - 1
        } else {
            k
        };
        Some(&self.values[k * self.width..(k + 1) * self.width])
    }

    /// Value at age index `k` and global column `j`.
    pub fn get(&self, k: usize, j: usize) -> f64 {
        if j < self.j0 || j >= self.j0 + self.width {
            return 0.0;
        }
        self.row(k).map_or(0.0, |r| r[j - self.j0])
    }

    pub fn columns(&self) -> std::ops::Range<usize> {
        self.j0..self.j0 + self.width
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Multiply all values by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.values {
            *v *= s;
        }
        out
    }
}

/// Normalised initial density ϱ0 = ρ0/π.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RhoInit {
    #[default]
    Zero,
    /// `height·cos²(πi/(2·age_extent))·cos²(π(x − center)/(2·width))` on
    /// `i < age_extent`, `|x − center| < width`.
    Bump {
        center: f64,
        width: f64,
        height: f64,
        age_extent: f64,
    },
}

/// Source term I0, described through its normalised density I0/π.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceInit {
    #[default]
    Zero,
    /// `I0/π = height·sin²(π(i − a)/(b − a))·cos²(π(x − m)/(r − l))` on
    /// `a < i < b`, `l < x < r`, with `m` the midpoint of `[l, r]`.
    Bump {
        age_range: (f64, f64),
        x_range: (f64, f64),
        height: f64,
    },
}

impl SourceInit {
    /// Normalised source density I0/π.
    pub fn density(&self, i: f64, x: f64) -> f64 {
        match *self {
            SourceInit::Zero => 0.0,
            SourceInit::Bump {
                age_range: (a, b),
                x_range,
                height,
            } => {
                if i <= a || i >= b {
                    return 0.0;
                }
                height * (PI * (i - a) / (b - a)).sin().powi(2) * space_bump(x, x_range)
            }
        }
    }

    /// Exact cumulative 𝓘0(i, x) = ∫₀^i I0/π.
    pub fn cumulative(&self, i: f64, x: f64) -> f64 {
        match *self {
            SourceInit::Zero => 0.0,
            SourceInit::Bump {
                age_range: (a, b),
                x_range,
                height,
            } => {
                let g = space_bump(x, x_range);
                if g == 0.0 || i <= a {
                    return 0.0;
                }
                let l = b - a;
                let u = i.min(b) - a;
                height * g * (0.5 * u - l / (4.0 * PI) * (2.0 * PI * u / l).sin())
            }
        }
    }

    /// First age at which the source is active, if any.
    pub fn age_start(&self) -> Option<f64> {
        match *self {
            SourceInit::Zero => None,
            SourceInit::Bump { age_range, height, .. } => (height != 0.0).then_some(age_range.0),
        }
    }
}

fn space_bump(x: f64, (l, r): (f64, f64)) -> f64 {
    if x <= l || x >= r {
        return 0.0;
    }
    let m = 0.5 * (l + r);
    (PI * (x - m) / (r - l)).cos().powi(2)
}

impl RhoInit {
    pub fn value(&self, i: f64, x: f64) -> f64 {
        match *self {
            RhoInit::Zero => 0.0,
            RhoInit::Bump {
                center,
                width,
                height,
                age_extent,
            } => {
                if i >= age_extent || (x - center).abs() >= width {
                    return 0.0;
                }
                height
                    * (0.5 * PI * i / age_extent).cos().powi(2)
                    * (0.5 * PI * (x - center) / width).cos().powi(2)
            }
        }
    }
}

/// Initial data sampled on the simulation grids: ϱ0 and the cumulative
/// source 𝓘0 on the model's age grid.
#[derive(Debug, Clone)]
pub struct InitialData {
    pub rho0_norm: CompactField,
    pub source_cum: CompactField,
    /// First age where the source density is positive (for i★).
    pub source_age_start: Option<f64>,
}

impl InitialData {
    pub fn from_presets(
        rho0: &RhoInit,
        source: &SourceInit,
        model: &RateModel,
        grid: &SpatialGrid,
    ) -> Result<Self> {
        let rho0_norm = match *rho0 {
            RhoInit::Zero => CompactField::zero(),
            RhoInit::Bump {
                center,
                width,
                height,
                age_extent,
            } => {
                if !(width > 0.0 && age_extent > 0.0 && height >= 0.0) {
                    return Err(invalid("rho0 bump needs positive width/age extent, nonnegative height"));
                }
                check_inside(grid, center - width, center + width, "rho0")?;
                let cols = grid.open_range(center - width, center + width);
                let ages = ((age_extent / model.step()).ceil() as usize + 1).min(model.len());
                CompactField::from_fn(grid, cols, ages, model.step(), false, |i, x| rho0.value(i, x))
            }
        };
        let source_cum = match *source {
            SourceInit::Zero => CompactField::zero(),
            SourceInit::Bump {
                age_range: (a, b),
                x_range: (l, r),
                height,
            } => {
                if !(b > a && a >= 0.0 && r > l && height >= 0.0) {
                    return Err(invalid("source bump needs a < b, l < r and nonnegative height"));
                }
                check_inside(grid, l, r, "source")?;
                let cols = grid.open_range(l, r);
                CompactField::from_fn(grid, cols, model.len(), model.step(), true, |i, x| {
                    source.cumulative(i, x)
                })
            }
        };
        Ok(InitialData {
            rho0_norm,
            source_cum,
            source_age_start: source.age_start(),
        })
    }

    pub fn zero() -> Self {
        InitialData {
            rho0_norm: CompactField::zero(),
            source_cum: CompactField::zero(),
            source_age_start: None,
        }
    }

    pub fn is_trivial(&self) -> bool {
        self.rho0_norm.is_zero() && self.source_cum.is_zero()
    }
}

fn check_inside(grid: &SpatialGrid, a: f64, b: f64, what: &str) -> Result<()> {
    if a < grid.x_min || b > grid.x_max() {
        return Err(invalid(format!(
            "{what} support [{a}, {b}] extends outside the spatial grid [{}, {}]",
            grid.x_min,
            grid.x_max()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_grid() {
        let g = SpatialGrid::symmetric(1.0, 0.1).unwrap();
        assert_eq!(g.n, 21);
        assert!((g.x_min + 1.0).abs() < 1e-12);
        assert_eq!(g.index_of(0.0), Some(10));
        assert_eq!(g.open_range(-0.1, 0.1), 10..11);
    }

    #[test]
    fn bump_cumulative_matches_quadrature() {
        let s = SourceInit::Bump {
            age_range: (0.5, 1.5),
            x_range: (-1.0, 1.0),
            height: 2.0,
        };
        let x = 0.3;
        for &i in &[0.2, 0.7, 1.1, 1.5, 4.0] {
            // Fine midpoint rule oracle.
            let n = 200_000;
            let h = i / n as f64;
            let q: f64 = (0..n).map(|k| s.density((k as f64 + 0.5) * h, x) * h).sum();
            assert!((s.cumulative(i, x) - q).abs() < 1e-9);
        }
    }
}
