//! Dispersion relation φ_c(α) = S0·K̃(α)·L[ω](αc) and the spreading speed
//! c* = min_α c(α), where c(α) solves φ_{c(α)}(α) = 1.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::Kernel;
use crate::numerics::{bisect, golden_section};
use crate::rates::RateModel;

/// Points of the log-spaced α scan.
const SCAN_POINTS: usize = 200;
/// Golden-section stopping width for α*.
const MINIMIZER_WIDTH: f64 = 1e-8;
/// Slack on c ≥ c*.
const SPEED_SLACK: f64 = 1e-10;
/// Initial α cap for kernels with Λ = ∞ and the number of doublings allowed.
const ALPHA_CAP: f64 = 10.0;
const MAX_CAP_DOUBLINGS: usize = 10;

#[derive(Debug, Clone, Serialize)]
pub struct DispersionResult {
    pub c_star: f64,
    pub alpha_star: f64,
    /// Sampled map α ↦ c(α) on the scan grid.
    pub c_of_alpha: Vec<(f64, f64)>,
    /// |φ_{c*}(α*) − 1|.
    pub phi_residual: f64,
    /// |∂_α φ_{c*}(α*)| by central differences with step 1e-5.
    pub phi_slope: f64,
    /// c* from the closed-form inverse Laplace transform (constant rates).
    pub closed_form_c_star: Option<f64>,
    /// Set when Λ comes from a tabulated kernel estimate.
    pub lambda_estimated: bool,
}

/// Dispersion relation for a fixed model, kernel and susceptible density.
#[derive(Debug, Clone, Copy)]
pub struct Dispersion<'a> {
    model: &'a RateModel,
    kernel: &'a Kernel,
    s0: f64,
}

impl<'a> Dispersion<'a> {
    pub fn new(model: &'a RateModel, kernel: &'a Kernel, s0: f64) -> Self {
        Dispersion { model, kernel, s0 }
    }

    pub fn r0(&self) -> f64 {
        self.model.basic_reproduction_number(self.s0)
    }

    /// φ_c(α); `None` when K̃(α) diverges.
    pub fn phi_opt(&self, c: f64, alpha: f64) -> Option<f64> {
        let k = self.kernel.mgf(alpha)?;
        Some(self.s0 * k * self.model.laplace_omega(alpha * c))
    }

    pub fn phi(&self, c: f64, alpha: f64) -> Result<f64> {
        if c < 0.0 {
            return Err(Error::Domain(format!("speed must be nonnegative, got {c}")));
        }
        if alpha < 0.0 {
            return Err(Error::Domain(format!("rate must be nonnegative, got {alpha}")));
        }
        self.phi_opt(c, alpha).ok_or_else(|| {
            Error::Domain(format!(
                "alpha = {alpha} is beyond the kernel abscissa {}",
                self.kernel.lambda_abscissa()
            ))
        })
    }

    fn require_invasion(&self) -> Result<f64> {
        let r0 = self.r0();
        if r0 <= 1.0 {
            return Err(Error::Domain(format!("R0 = {r0} <= 1: no invasion front")));
        }
        Ok(r0)
    }

    /// c(α), or +∞ where K̃(α) diverges.
    fn c_raw(&self, alpha: f64) -> f64 {
        let Some(k) = self.kernel.mgf(alpha) else {
            return f64::INFINITY;
        };
        let g = |c: f64| self.s0 * k * self.model.laplace_omega(alpha * c) - 1.0;
        let mut hi = 1.0;
        while g(hi) > 0.0 {
            hi *= 2.0;
            if hi > 1e300 {
                return f64::INFINITY;
            }
        }
        bisect(g, 0.0, hi, 0.0).unwrap_or(f64::NAN)
    }

    /// Unique c > 0 with φ_c(α) = 1.
    pub fn c_of_alpha(&self, alpha: f64) -> Result<f64> {
        self.require_invasion()?;
        if !(alpha > 0.0) {
            return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
        }
        let c = self.c_raw(alpha);
        if !c.is_finite() {
            return Err(Error::Domain(format!(
                "alpha = {alpha} is beyond the kernel abscissa {}",
                self.kernel.lambda_abscissa()
            )));
        }
        let res = (self.phi(c, alpha)? - 1.0).abs();
        if res >= 1e-10 {
            return Err(Error::Residual {
                what: "c(alpha) root",
                residual: res,
                tolerance: 1e-10,
            });
        }
        Ok(c)
    }

    /// Minimise c(α): log-spaced scan, then golden section.
    pub fn solve_c_star(&self) -> Result<DispersionResult> {
        self.require_invasion()?;
        let lambda = self.kernel.lambda_abscissa();
        let (lo, hi) = if lambda.is_finite() {
            (lambda * 1e-4, lambda * (1.0 - 1e-4))
        } else {
            let mut cap = ALPHA_CAP;
            let mut doublings = 0;
            while self.c_raw(cap) < self.c_raw(0.99 * cap) {
                if doublings == MAX_CAP_DOUBLINGS {
                    return Err(Error::Domain(format!(
                        "c(alpha) still decreasing at alpha = {cap}; kernel tail too heavy"
                    )));
                }
                cap *= 2.0;
                doublings += 1;
            }
            (1e-4, cap)
        };
        let ratio = (hi / lo).ln() / (SCAN_POINTS - 1) as f64;
        let samples: Vec<(f64, f64)> = (0..SCAN_POINTS)
            .map(|k| {
                let a = lo * (ratio * k as f64).exp();
                (a, self.c_raw(a))
            })
            .collect();
        let imin = samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.1.is_finite())
            .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
            .map(|(i, _)| i)
            .ok_or_else(|| Error::Domain("c(alpha) infinite on the whole scan".into()))?;
        if imin == 0 || imin == SCAN_POINTS - 1 || !samples[imin + 1].1.is_finite() {
            return Err(Error::Domain(format!(
                "minimum of c(alpha) on the boundary of the search interval (alpha = {})",
                samples[imin].0
            )));
        }
        check_unimodal(&samples, imin)?;
        let (alpha_star, c_star) = golden_section(
            |a| self.c_raw(a),
            samples[imin - 1].0,
            samples[imin + 1].0,
            MINIMIZER_WIDTH,
        );
        let phi_residual = (self.phi(c_star, alpha_star)? - 1.0).abs();
        let h = 1e-5;
        let phi_slope =
            ((self.phi(c_star, alpha_star + h)? - self.phi(c_star, alpha_star - h)?) / (2.0 * h)).abs();
        let closed_form_c_star = self.model.constant_rates().map(|(tau0, gamma0)| {
            let f = |a: f64| match self.kernel.mgf(a) {
                Some(k) => (self.s0 * tau0 * k - gamma0) / a,
                None => f64::INFINITY,
            };
            golden_section(f, samples[imin - 1].0, samples[imin + 1].0, MINIMIZER_WIDTH).1
        });
        Ok(DispersionResult {
            c_star,
            alpha_star,
            c_of_alpha: samples,
            phi_residual,
            phi_slope,
            closed_form_c_star,
            lambda_estimated: self.kernel.lambda_is_estimated(),
        })
    }

    /// Unique α ∈ (0, α*] with φ_c(α) = 1 for c ≥ c*.
    pub fn alpha_c(&self, c: f64, result: &DispersionResult) -> Result<f64> {
        let (cs, astar) = (result.c_star, result.alpha_star);
        if c < cs * (1.0 - SPEED_SLACK) {
            return Err(Error::Domain(format!("speed {c} is below c* = {cs}")));
        }
        if c <= cs * (1.0 + SPEED_SLACK) {
            return Ok(astar);
        }
        let g = |a: f64| self.phi_opt(c, a).unwrap_or(f64::INFINITY) - 1.0;
        bisect(g, 0.0, astar, 0.0)
    }
}

fn check_unimodal(samples: &[(f64, f64)], imin: usize) -> Result<()> {
    let tol = 1e-12;
    let ok_left = samples[..=imin]
        .windows(2)
        .all(|w| w[1].1 <= w[0].1 * (1.0 + tol));
    let ok_right = samples[imin..]
        .windows(2)
        .all(|w| !w[1].1.is_finite() || w[1].1 >= w[0].1 * (1.0 - tol));
    if ok_left && ok_right {
        Ok(())
    } else {
        Err(Error::Domain("sampled c(alpha) is not unimodal".into()))
    }
}

/// φ_c(α) = S0·K̃(α)·L[ω](αc).
pub fn phi_c(model: &RateModel, kernel: &Kernel, s0: f64, c: f64, alpha: f64) -> Result<f64> {
    Dispersion::new(model, kernel, s0).phi(c, alpha)
}

pub fn c_of_alpha(model: &RateModel, kernel: &Kernel, s0: f64, alpha: f64) -> Result<f64> {
    Dispersion::new(model, kernel, s0).c_of_alpha(alpha)
}

pub fn solve_c_star(model: &RateModel, kernel: &Kernel, s0: f64) -> Result<DispersionResult> {
    Dispersion::new(model, kernel, s0).solve_c_star()
}

/// α_c for a speed c ≥ c*; computes c* first.
pub fn alpha_c(model: &RateModel, kernel: &Kernel, s0: f64, c: f64) -> Result<f64> {
    let d = Dispersion::new(model, kernel, s0);
    let res = d.solve_c_star()?;
    d.alpha_c(c, &res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rates::{build_rate_model, RatePreset};

    fn default_model(step: f64) -> RateModel {
        build_rate_model(&RatePreset::Constant { tau0: 2.0, gamma0: 1.0 }, step).unwrap()
    }

    #[test]
    fn phi_at_zero_rate_is_r0() {
        let m = default_model(0.01);
        let k = Kernel::gaussian(1.0).unwrap();
        let r0 = m.basic_reproduction_number(1.0);
        for c in [0.0, 1.0, 7.5] {
            assert_eq!(phi_c(&m, &k, 1.0, c, 0.0).unwrap(), r0);
        }
        let v = phi_c(&m, &k, 1.0, 0.0, 0.8).unwrap();
        assert!((v - r0 * k.mgf(0.8).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn phi_matches_closed_form() {
        let m = default_model(0.01);
        let k = Kernel::gaussian(1.0).unwrap();
        for (c, a) in [(0.5, 0.3), (2.2, 0.8), (4.0, 1.5)] {
            let exact = 2.0 * (a * a / 2.0f64).exp() / (1.0 + a * c);
            assert!((phi_c(&m, &k, 1.0, c, a).unwrap() - exact).abs() < 1e-6);
        }
        let l = Kernel::laplace(0.5).unwrap();
        assert!(phi_c(&m, &l, 1.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn phi_decreasing_in_speed() {
        let m = default_model(0.01);
        let k = Kernel::gaussian(1.0).unwrap();
        let vals: Vec<f64> = (0..40).map(|j| phi_c(&m, &k, 1.0, j as f64 * 2.0, 0.7).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
        assert!(*vals.last().unwrap() < 0.05);
    }

    #[test]
    fn c_of_alpha_closed_forms() {
        let m = default_model(0.01);
        let k = Kernel::gaussian(1.0).unwrap();
        let c1 = c_of_alpha(&m, &k, 1.0, 1.0).unwrap();
        assert!((c1 - (2.0 * 0.5f64.exp() - 1.0)).abs() < 1e-8, "{c1}");
        assert!((c1 - 2.297443).abs() < 1e-6);
        let c2 = c_of_alpha(&m, &k, 1.0, 0.5).unwrap();
        assert!((c2 - (2.0 * 0.125f64.exp() - 1.0) / 0.5).abs() < 1e-8, "{c2}");
        assert!((c2 - 2.532594).abs() < 1e-6);
        let (a, b, c) = (
            c_of_alpha(&m, &k, 1.0, 1e-3).unwrap(),
            c_of_alpha(&m, &k, 1.0, 1e-2).unwrap(),
            c_of_alpha(&m, &k, 1.0, 1e-1).unwrap(),
        );
        assert!(a > b && b > c);
        let sub = build_rate_model(&RatePreset::Constant { tau0: 1.0, gamma0: 2.0 }, 0.01).unwrap();
        assert!(c_of_alpha(&sub, &k, 1.0, 1.0).is_err());
    }

    /// Dense scan of the closed form (2e^{α²/2} − 1)/α.
    fn scan_oracle() -> (f64, f64) {
        let n = 1_000_000;
        let (mut best, mut arg) = (f64::INFINITY, 0.0);
        for j in 1..=n {
            let a = 3.0 * j as f64 / n as f64;
            let c = (2.0 * (a * a / 2.0).exp() - 1.0) / a;
            if c < best {
                best = c;
                arg = a;
            }
        }
        (best, arg)
    }

    #[test]
    fn c_star_default_preset() {
        let m = default_model(0.01);
        let k = Kernel::gaussian(1.0).unwrap();
        let res = solve_c_star(&m, &k, 1.0).unwrap();
        let (c_scan, a_scan) = scan_oracle();
        assert!(((res.c_star - c_scan) / c_scan).abs() < 1e-6);
        assert!((res.alpha_star - a_scan).abs() < 1e-4);
        assert!(res.phi_residual < 1e-8);
        assert!(res.phi_slope < 1e-6, "slope {}", res.phi_slope);
        let cf = res.closed_form_c_star.unwrap();
        assert!(((cf - res.c_star) / cf).abs() < 1e-6);
        // Values frozen from the scan oracle above.
        assert!((res.c_star - 2.192804).abs() < 2e-6);
        assert!((res.alpha_star - 0.797648).abs() < 2e-5);
    }

    #[test]
    fn laplace_kernel_interior_minimum() {
        let m = default_model(0.01);
        let k = Kernel::laplace(0.5).unwrap();
        let res = solve_c_star(&m, &k, 1.0).unwrap();
        assert!(res.alpha_star > 0.0 && res.alpha_star < 2.0);
        let tail: Vec<f64> = res.c_of_alpha.iter().rev().take(5).map(|s| s.1).collect();
        assert!(tail[0] > 10.0 * res.c_star);
        assert!(tail.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn alpha_c_monotone() {
        let m = default_model(0.01);
        let k = Kernel::gaussian(1.0).unwrap();
        let d = Dispersion::new(&m, &k, 1.0);
        let res = d.solve_c_star().unwrap();
        assert_eq!(d.alpha_c(res.c_star, &res).unwrap(), res.alpha_star);
        assert!(d.alpha_c(0.9 * res.c_star, &res).is_err());
        let speeds = [1.01, 1.2, 1.5, 2.0, 3.0].map(|f| f * res.c_star);
        let alphas: Vec<f64> = speeds.iter().map(|&c| d.alpha_c(c, &res).unwrap()).collect();
        assert!(alphas.windows(2).all(|w| w[1] < w[0]));
        assert!(alphas.iter().all(|&a| a > 0.0 && a < res.alpha_star));
        let a2 = alphas[3];
        assert!((d.phi(speeds[3], a2).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn phi_is_convex_in_alpha() {
        let m = default_model(0.02);
        let k = Kernel::laplace(0.5).unwrap();
        let d = Dispersion::new(&m, &k, 1.0);
        for c in [0.5, 2.0, 5.0] {
            let v: Vec<f64> = (1..190).map(|j| d.phi(c, j as f64 * 0.01).unwrap()).collect();
            assert!(v.windows(3).all(|w| w[0] - 2.0 * w[1] + w[2] >= -1e-8));
        }
    }

    #[test]
    fn c_star_increases_with_s0() {
        let m = default_model(0.02);
        let k = Kernel::gaussian(1.0).unwrap();
        let c1 = solve_c_star(&m, &k, 1.0).unwrap().c_star;
        let c2 = solve_c_star(&m, &k, 2.0).unwrap().c_star;
        assert!(c2 > c1);
    }
}
