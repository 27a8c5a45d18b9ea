//! Traveling waves ρ(t, i, x) = S0·χ(x − ct + ci)·π(i) through the profile
//! equation χ = T(χ), T(χ)(z) = 1 − exp(−S0 ∫ω(i)(K0*χ)(z + ci) di).
//!
//! The age integral is taken on the z-grid itself (s = c·i), so T is a
//! spatial convolution followed by a one-sided correlation with age taps.
//! All bracket constants use the dispersion relation of this discrete
//! operator; exponentials are then exact eigenfunctions of its linear part
//! and the super/subsolution inequalities hold on the grid, not only up to
//! quadrature error.

use rayon::prelude::*;
use serde::Serialize;

use crate::dispersion::DispersionResult;
use crate::error::{Error, Result};
use crate::kernel::{Kernel, SampledKernel};
use crate::numerics::{bisect, fit_line, trapezoid_weight};
use crate::rates::RateModel;
use crate::stationary::solve_rho_star;

/// C in 1 − e^{−s} ≥ s − C s² on s ≥ 0.
const QUADRATIC_C: f64 = 0.5;
/// Relative slack when checking orderings computed in floating point.
const ORDER_SLACK: f64 = 1e-12;
const BRACKET_SLACK: f64 = 1e-9;
/// χ window for the tail fit.
const TAIL_WINDOW: (f64, f64) = (1e-8, 1e-3);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Supercritical,
    Critical,
}

#[derive(Debug, Clone, Copy)]
pub struct WaveOptions {
    pub dz: f64,
    /// Grid spans [−Z + shift, Z + shift].
    pub half_width: f64,
    pub shift: f64,
    pub max_picard: usize,
    pub picard_tol: f64,
    pub residual_tol: f64,
    /// Target for max |χ − T(χ)| / χ̄ in the Newton polish.
    pub weighted_tol: f64,
    pub max_newton: usize,
    pub gmres_restart: usize,
    pub gmres_cycles: usize,
}

impl Default for WaveOptions {
    fn default() -> Self {
        WaveOptions {
            dz: 0.02,
            half_width: 200.0,
            shift: 0.0,
            max_picard: 10_000,
            picard_tol: 1e-10,
            residual_tol: 1e-8,
            weighted_tol: 1e-12,
            max_newton: 30,
            gmres_restart: 200,
            gmres_cycles: 50,
        }
    }
}

/// Age taps on the z-grid: `w_k ≈ (Δz/c)·ω(kΔz/c)` with trapezoid end
/// weights, rescaled so that Σ w_k = R0/S0.
#[derive(Debug, Clone)]
struct AgeTaps {
    w: Vec<f64>,
    /// `(a, q)` with w_k = a·t_k·q^k (t_k trapezoid weights) for constant rates.
    geometric: Option<(f64, f64)>,
}

impl AgeTaps {
    fn new(model: &RateModel, s0: f64, c: f64, h: f64) -> Self {
        let target = model.basic_reproduction_number(s0) / s0;
        if c <= 0.0 {
            return AgeTaps {
                w: vec![target],
                geometric: None,
            };
        }
        let ks = (c * model.i_max() / h + 1e-9).floor() as usize;
        if let Some((_, gamma0)) = model.constant_rates() {
            if ks >= 1 {
                let q = (-gamma0 * h / c).exp();
                let mut w: Vec<f64> = (0..=ks).map(|k| trapezoid_weight(k, ks) * q.powi(k as i32)).collect();
                let a = target / w.iter().sum::<f64>();
                w.iter_mut().for_each(|v| *v *= a);
                return AgeTaps {
                    w,
                    geometric: Some((a, q)),
                };
            }
        }
        let mut w: Vec<f64> = (0..=ks)
            .map(|k| trapezoid_weight(k, ks) * model.omega_at(k as f64 * h / c))
            .collect();
        let sum: f64 = w.iter().sum();
        if sum > 0.0 {
            w.iter_mut().for_each(|v| *v *= target / sum);
        } else {
            w = vec![target];
        }
        AgeTaps { w, geometric: None }
    }

    fn len(&self) -> usize {
        self.w.len()
    }

    /// `out[j] = Σ_k w_k g[j + k]`, `g.len() = out.len() + len − 1`.
    fn correlate(&self, g: &[f64], out: &mut [f64]) {
        let n = out.len();
        let ks = self.len() - 1;
        debug_assert_eq!(g.len(), n + ks);
        match self.geometric {
            Some((a, q)) if ks >= 1 => {
                // S_j = Σ_{k=0}^{ks} q^k g_{j+k}, swept right to left.
                let qk = q.powi(ks as i32);
                let qk1 = qk * q;
                let mut s: f64 = (0..=ks).rev().fold(0.0, |acc, k| acc * q + g[n - 1 + k]);
                // Horner above sums in the right order: Σ q^k g_{n−1+k}.
                out[n - 1] = a * (s - 0.5 * g[n - 1] - 0.5 * qk * g[n - 1 + ks]);
                for j in (0..n - 1).rev() {
                    s = g[j] + q * s - qk1 * g[j + ks + 1];
                    out[j] = a * (s - 0.5 * g[j] - 0.5 * qk * g[j + ks]);
                }
            }
            _ => {
                let w = &self.w;
                let body = |start: usize, chunk: &mut [f64]| {
                    for (t, o) in chunk.iter_mut().enumerate() {
                        let base = &g[start + t..start + t + ks + 1];
                        *o = w.iter().zip(base).map(|(a, b)| a * b).sum();
                    }
                };
                if n * (ks + 1) > 1 << 16 {
                    out.par_chunks_mut(512)
                        .enumerate()
                        .for_each(|(c, chunk)| body(c * 512, chunk));
                } else {
                    body(0, out);
                }
            }
        }
    }

    fn laplace(&self, alpha: f64, h: f64) -> (f64, f64) {
        self.w.iter().enumerate().fold((0.0, 0.0), |(v, d), (k, w)| {
            let s = k as f64 * h;
            let e = w * (-alpha * s).exp();
            (v + e, d - s * e)
        })
    }
}

/// Discrete dispersion relation of the wave operator on a z-grid of step h:
/// φ_d(α; c) = S0·Σ_l K_l e^{αlh}·Σ_k w_k(c) e^{−αkh}.
#[derive(Debug, Clone, Copy)]
pub struct DiscreteDispersion<'a> {
    model: &'a RateModel,
    sk: &'a SampledKernel,
    s0: f64,
}

impl<'a> DiscreteDispersion<'a> {
    pub fn new(model: &'a RateModel, sk: &'a SampledKernel, s0: f64) -> Self {
        DiscreteDispersion { model, sk, s0 }
    }

    fn kernel_mgf(&self, alpha: f64) -> (f64, f64) {
        let h = self.sk.dx();
        let half = self.sk.weights_half();
        half.iter().enumerate().skip(1).fold((half[0], 0.0), |(v, d), (m, w)| {
            let x = m as f64 * h;
            (v + 2.0 * w * (alpha * x).cosh(), d + 2.0 * w * x * (alpha * x).sinh())
        })
    }

    fn phi_with_taps(&self, taps: &AgeTaps, alpha: f64) -> (f64, f64) {
        let (k, dk) = self.kernel_mgf(alpha);
        let (l, dl) = taps.laplace(alpha, self.sk.dx());
        (self.s0 * k * l, self.s0 * (dk * l + k * dl))
    }

    /// φ_d(α; c) and its α-derivative.
    pub fn phi(&self, c: f64, alpha: f64) -> (f64, f64) {
        let taps = AgeTaps::new(self.model, self.s0, c, self.sk.dx());
        self.phi_with_taps(&taps, alpha)
    }

    /// Minimiser of the convex map α ↦ φ_d(α; c) and the minimum.
    pub fn minimum(&self, c: f64) -> Result<(f64, f64)> {
        let taps = AgeTaps::new(self.model, self.s0, c, self.sk.dx());
        let mut hi = 1.0;
        while self.phi_with_taps(&taps, hi).1 <= 0.0 {
            hi *= 2.0;
            if hi > 1e6 {
                return Err(Error::Domain("discrete dispersion has no minimum".into()));
            }
        }
        let a = bisect(|a| self.phi_with_taps(&taps, a).1, 0.0, hi, 0.0)?;
        Ok((a, self.phi_with_taps(&taps, a).0))
    }

    /// (c*_d, α*_d): the speed where min_α φ_d = 1 and its minimiser.
    pub fn critical(&self, c_hint: f64) -> Result<(f64, f64)> {
        let g = |c: f64| self.minimum(c).map(|m| m.1 - 1.0).unwrap_or(f64::NAN);
        let (mut lo, mut hi) = (0.5 * c_hint, 2.0 * c_hint);
        for _ in 0..60 {
            if g(lo) > 0.0 {
                break;
            }
            lo *= 0.5;
        }
        for _ in 0..60 {
            if g(hi) < 0.0 {
                break;
            }
            hi *= 2.0;
        }
        let c = bisect(g, lo, hi, 0.0)?;
        Ok((c, self.minimum(c)?.0))
    }

    /// Smallest root α_c ∈ (0, α_max) of φ_d(α; c) = 1.
    pub fn alpha_c(&self, c: f64, alpha_max: f64) -> Result<f64> {
        let taps = AgeTaps::new(self.model, self.s0, c, self.sk.dx());
        bisect(|a| self.phi_with_taps(&taps, a).0 - 1.0, 0.0, alpha_max, 0.0)
    }
}

/// The discrete operator T for one speed on one grid.
#[derive(Debug, Clone)]
pub struct WaveOperator {
    sk: SampledKernel,
    taps: AgeTaps,
    pub c: f64,
    pub s0: f64,
    pub rho_star: f64,
    pub r0: f64,
}

/// Right-hand closure of a profile beyond the last grid point.
#[derive(Debug, Clone, Copy)]
pub enum Tail {
    /// χ(Z)·e^{−α(z − Z)}.
    Exponential(f64),
    /// Zero (used for perturbations).
    Zero,
}

impl WaveOperator {
    pub fn new(model: &RateModel, sk: SampledKernel, s0: f64, c: f64) -> Result<Self> {
        if !(c >= 0.0 && c.is_finite()) {
            return Err(Error::Domain(format!("wave speed must be nonnegative, got {c}")));
        }
        let r0 = model.basic_reproduction_number(s0);
        let taps = AgeTaps::new(model, s0, c, sk.dx());
        Ok(WaveOperator {
            sk,
            taps,
            c,
            s0,
            rho_star: solve_rho_star(r0),
            r0,
        })
    }

    pub fn dz(&self) -> f64 {
        self.sk.dx()
    }

    /// Number of grid cells looked at to the right of a point.
    pub fn lookahead(&self) -> usize {
        self.taps.len() - 1 + self.sk.half_width()
    }

    pub fn sampled_kernel(&self) -> &SampledKernel {
        &self.sk
    }

    /// `out = S0·H χ` where the profile is extended by `left` and by the
    /// explicit `right` values (length `lookahead()`).
    fn linear(&self, chi: &[f64], left: f64, right: &[f64], out: &mut [f64]) {
        let r = self.sk.half_width();
        let n = chi.len();
        let ks = self.taps.len() - 1;
        debug_assert_eq!(right.len(), ks + r);
        let mut p = Vec::with_capacity(n + ks + 2 * r);
        p.resize(r, left);
        p.extend_from_slice(chi);
        p.extend_from_slice(right);
        let mut g = vec![0.0; n + ks];
        self.sk.range_from_padded(&p, 0, &mut g);
        self.taps.correlate(&g, out);
        out.iter_mut().for_each(|v| *v *= self.s0);
    }

    fn tail_values(&self, chi: &[f64], tail: Tail) -> Vec<f64> {
        let m = self.lookahead();
        match tail {
            Tail::Zero => vec![0.0; m],
            Tail::Exponential(alpha) => {
                let last = *chi.last().expect("nonempty profile");
                (1..=m).map(|k| last * (-alpha * k as f64 * self.dz()).exp()).collect()
            }
        }
    }

    fn check_grid(&self, n: usize) -> Result<()> {
        if n < self.lookahead() + 1 {
            return Err(Error::InvalidInput(format!(
                "wave grid of {n} points is shorter than the operator reach ({} points, c·i_max plus kernel radius)",
                self.lookahead() + 1
            )));
        }
        Ok(())
    }

    /// T(χ) with left extension ρ* and the given right closure.
    pub fn apply(&self, chi: &[f64], tail: Tail) -> Result<Vec<f64>> {
        self.check_grid(chi.len())?;
        let right = self.tail_values(chi, tail);
        Ok(self.apply_with(chi, &right))
    }

    fn apply_with(&self, chi: &[f64], right: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; chi.len()];
        self.linear(chi, self.rho_star, right, &mut out);
        // The recursion can leave rounding-level negatives where χ vanishes.
        out.iter_mut().for_each(|v| *v = -(-v.max(0.0)).exp_m1());
        out
    }
}

/// T(χ) on a grid of step `dz` with exponential right closure at `tail_rate`.
pub fn apply_t(
    chi: &[f64],
    model: &RateModel,
    kernel: &Kernel,
    s0: f64,
    c: f64,
    dz: f64,
    tail_rate: f64,
) -> Result<Vec<f64>> {
    let op = WaveOperator::new(model, kernel.sample(dz)?, s0, c)?;
    op.apply(chi, Tail::Exponential(tail_rate))
}

/// Grid `z_j = z0 + j·dz`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WaveGrid {
    pub z0: f64,
    pub dz: f64,
    pub n: usize,
}

impl WaveGrid {
    pub fn centered(half_width: f64, dz: f64, shift: f64) -> Result<Self> {
        if !(dz > 0.0 && half_width > 0.0) {
            return Err(Error::InvalidInput("wave grid needs positive dz and half-width".into()));
        }
        let m = (half_width / dz - 1e-9).ceil() as usize;
        Ok(WaveGrid {
            z0: -(m as f64) * dz + shift,
            dz,
            n: 2 * m + 1,
        })
    }

    pub fn z(&self, j: usize) -> f64 {
        self.z0 + j as f64 * self.dz
    }

    pub fn zs(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.z(j)).collect()
    }
}

/// Sub- and supersolution pair on a grid.
#[derive(Debug, Clone, Serialize)]
pub struct Bracket {
    pub regime: Regime,
    pub alpha: f64,
    pub delta: f64,
    /// M (supercritical).
    pub m_coef: Option<f64>,
    /// A and B (critical).
    pub a_coef: Option<f64>,
    pub b_coef: Option<f64>,
    #[serde(skip)]
    pub sub: Vec<f64>,
    #[serde(skip)]
    pub sup: Vec<f64>,
    /// Supersolution values beyond the grid (length = operator lookahead).
    #[serde(skip)]
    pub sup_tail: Vec<f64>,
    /// max (T(χ̄) − χ̄)/χ̄ and max (χ − T(χ))/χ̄ for the subsolution.
    pub super_margin: f64,
    pub sub_margin: f64,
}

impl Bracket {
    fn super_at(regime: Regime, rho: f64, alpha: f64, a: f64, z: f64) -> f64 {
        match regime {
            Regime::Supercritical => rho * (-alpha * z).exp().min(1.0),
            Regime::Critical => {
                if z <= 1.0 / alpha {
                    rho
                } else {
                    rho * a * z * (-alpha * z).exp()
                }
            }
        }
    }
}

/// Build and verify the bracket for the discrete operator.
///
/// `alpha` is α_c (supercritical) or α*_d (critical); `alpha_star` is α*_d;
/// `lambda` the kernel abscissa.
pub fn build_bracket(
    op: &WaveOperator,
    grid: &WaveGrid,
    disp: &DiscreteDispersion,
    regime: Regime,
    alpha: f64,
    alpha_star: f64,
    lambda: f64,
) -> Result<Bracket> {
    let rho = op.rho_star;
    let c = op.c;
    let zs = grid.zs();
    let (sub, delta, m_coef, a_coef, b_coef): (Vec<f64>, f64, _, _, _) = match regime {
        Regime::Supercritical => {
            let delta = 0.5 * alpha.min(alpha_star - alpha);
            let phi_d = disp.phi(c, alpha + delta).0;
            if !(phi_d < 1.0) {
                return Err(Error::Bracket(format!(
                    "φ(α_c + δ) = {phi_d} is not below 1; speed too close to critical"
                )));
            }
            let m = (QUADRATIC_C * op.r0 * rho * phi_d / (1.0 - phi_d)).max(1.0);
            let sub = zs
                .iter()
                .map(|&z| rho * ((-alpha * z).exp() - m * (-(alpha + delta) * z).exp()).max(0.0))
                .collect();
            (sub, delta, Some(m), None, None)
        }
        Regime::Critical => {
            let gap = if lambda.is_finite() { (lambda - alpha).min(alpha) } else { alpha };
            let delta = gap / 8.0;
            let a = std::f64::consts::E * alpha;
            let phi1 = disp.phi(c, alpha + delta).0;
            let phi2 = disp.phi(c, alpha + 2.0 * delta).0;
            if !(phi1 > 1.0) {
                return Err(Error::Bracket(format!("φ(α* + δ) = {phi1} is not above 1")));
            }
            let k = alpha - 2.0 * delta;
            let holds = |b: f64| {
                let z = (b - 1.0) / a;
                z >= 2.0 / k
                    && 2.0 * z.ln() <= k * z
                    && QUADRATIC_C * op.r0 * rho * a * a * phi2 * (-delta * z).exp() <= phi1 - 1.0
            };
            let mut b = 2.0;
            let mut doublings = 0;
            while !holds(b) {
                b *= 2.0;
                doublings += 1;
                if doublings > 200 {
                    return Err(Error::Bracket("no admissible B for the critical subsolution".into()));
                }
            }
            let sub = zs
                .iter()
                .map(|&z| {
                    if z <= 0.0 {
                        0.0
                    } else {
                        rho * ((a * z - b) * (-alpha * z).exp() + (-(alpha + delta) * z).exp()).max(0.0)
                    }
                })
                .collect();
            (sub, delta, None, Some(a), Some(b))
        }
    };
    let a = a_coef.unwrap_or(0.0);
    let sup: Vec<f64> = zs.iter().map(|&z| Bracket::super_at(regime, rho, alpha, a, z)).collect();
    let z_end = grid.z(grid.n - 1);
    let sup_tail: Vec<f64> = (1..=op.lookahead())
        .map(|k| Bracket::super_at(regime, rho, alpha, a, z_end + k as f64 * grid.dz))
        .collect();
    if sub.iter().all(|&v| v == 0.0) {
        return Err(Error::Bracket("subsolution vanishes on the whole grid; enlarge Z".into()));
    }
    let t_sup = op.apply_with(&sup, &sup_tail);
    let t_sub = op.apply_with(&sub, &sup_tail);
    let super_margin = t_sup
        .iter()
        .zip(&sup)
        .map(|(t, s)| (t - s) / s)
        .fold(f64::NEG_INFINITY, f64::max);
    let sub_margin = t_sub
        .iter()
        .zip(&sub)
        .zip(&sup)
        .map(|((t, s), u)| (s - t) / u)
        .fold(f64::NEG_INFINITY, f64::max);
    if super_margin > BRACKET_SLACK || sub_margin > BRACKET_SLACK {
        return Err(Error::Bracket(format!(
            "bracket check failed: T(super) exceeds super by {super_margin:e}, sub exceeds T(sub) by {sub_margin:e} (relative)"
        )));
    }
    Ok(Bracket {
        regime,
        alpha,
        delta,
        m_coef,
        a_coef,
        b_coef,
        sub,
        sup,
        sup_tail,
        super_margin,
        sub_margin,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct WaveProfile {
    pub regime: Regime,
    /// Speed of the discrete operator (c*_d in the critical case).
    pub c: f64,
    pub c_requested: f64,
    /// Decay rate of the discrete operator: α_c or α*_d.
    pub alpha_decay: f64,
    /// The same rate from the continuous dispersion relation.
    pub alpha_continuous: f64,
    pub rho_star: f64,
    /// Anchored grid: χ(0) = ρ*/2.
    pub grid: WaveGrid,
    /// Offset subtracted from the solver grid when anchoring.
    pub anchor: f64,
    #[serde(skip)]
    pub chi: Vec<f64>,
    /// sup |χ − T(χ)| on the central half of the grid.
    pub residual: f64,
    pub picard_iterations: usize,
    pub newton_steps: usize,
    pub bracket: Bracket,
}

impl WaveProfile {
    pub fn zs(&self) -> Vec<f64> {
        self.grid.zs()
    }

    /// Cubic Lagrange interpolation; ρ* to the left and 0 to the right of
    /// the grid.
    pub fn eval(&self, z: f64) -> f64 {
        let n = self.chi.len();
        let t = (z - self.grid.z0) / self.grid.dz;
        if t <= 0.0 {
            return if t < 0.0 { self.rho_star } else { self.chi[0] };
        }
        if t >= (n - 1) as f64 {
            return if t > (n - 1) as f64 { 0.0 } else { self.chi[n - 1] };
        }
        let j = (t.floor() as usize).clamp(1, n - 3);
        let u = t - j as f64;
        let (a, b, c, d) = (self.chi[j - 1], self.chi[j], self.chi[j + 1], self.chi[j + 2]);
        let (x0, x1, x2, x3) = (u + 1.0, u, u - 1.0, u - 2.0);
        -a * x1 * x2 * x3 / 6.0 + b * x0 * x2 * x3 / 2.0 - c * x0 * x1 * x3 / 2.0 + d * x0 * x1 * x2 / 6.0
    }

    /// w(i, z) = S0·χ(z + c·i)·π(i) on the given ages and z values.
    pub fn density(&self, model: &RateModel, s0: f64, ages: &[f64], zs: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(ages.len() * zs.len());
        for &i in ages {
            let p = model.pi_at(i);
            out.extend(zs.iter().map(|&z| s0 * self.eval(z + self.c * i) * p));
        }
        out
    }
}

/// Solve the profile equation at speed `c ≥ c*`.
pub fn solve_wave(
    c: f64,
    model: &RateModel,
    kernel: &Kernel,
    s0: f64,
    dispersion: &DispersionResult,
    opts: &WaveOptions,
) -> Result<WaveProfile> {
    match solve_on_grid(c, model, kernel, s0, dispersion, opts) {
        Err(Error::Bracket(msg)) if !msg.contains("escaped") => {
            log::warn!("{msg}; retrying with dz = {}", opts.dz / 2.0);
            let finer = WaveOptions {
                dz: opts.dz / 2.0,
                ..*opts
            };
            solve_on_grid(c, model, kernel, s0, dispersion, &finer)
        }
        other => other,
    }
}

fn solve_on_grid(
    c: f64,
    model: &RateModel,
    kernel: &Kernel,
    s0: f64,
    dispersion: &DispersionResult,
    opts: &WaveOptions,
) -> Result<WaveProfile> {
    let cs = dispersion.c_star;
    if !(c >= cs * (1.0 - 1e-10)) {
        return Err(Error::Domain(format!("speed {c} is below c* = {cs}")));
    }
    let sk = kernel.sample(opts.dz)?;
    let disp = DiscreteDispersion::new(model, &sk, s0);
    let (c_d, alpha_d) = disp.critical(cs)?;
    let (regime, speed) = if c <= cs * (1.0 + 1e-10) || c <= c_d {
        (Regime::Critical, c_d)
    } else {
        (Regime::Supercritical, c)
    };
    let alpha = match regime {
        Regime::Critical => alpha_d,
        Regime::Supercritical => disp.alpha_c(speed, alpha_d)?,
    };
    let alpha_continuous = crate::dispersion::Dispersion::new(model, kernel, s0).alpha_c(c.max(cs), dispersion)?;
    let op = WaveOperator::new(model, sk.clone(), s0, speed)?;
    let grid = WaveGrid::centered(opts.half_width, opts.dz, opts.shift)?;
    op.check_grid(grid.n)?;
    let bracket = build_bracket(&op, &grid, &disp, regime, alpha, alpha_d, kernel.lambda_abscissa())?;
    log::debug!("bracket {:?} c = {speed}", (bracket.m_coef, bracket.a_coef, bracket.b_coef));

    let tail = &bracket.sup_tail;
    let mut upper = bracket.sup.clone();
    let mut lower = bracket.sub.clone();
    let mut changes: Vec<f64> = Vec::new();
    let mut picard = 0;
    let mut converged = false;
    while picard < opts.max_picard {
        let next_u = op.apply_with(&upper, tail);
        let next_l = op.apply_with(&lower, tail);
        picard += 1;
        let mut change = 0.0f64;
        for j in 0..grid.n {
            let (u0, u1, l0, l1) = (upper[j], next_u[j], lower[j], next_l[j]);
            if u1 > u0 * (1.0 + ORDER_SLACK)
                || l1 < l0 * (1.0 - ORDER_SLACK)
                || l1 > u1 * (1.0 + ORDER_SLACK)
            {
                return Err(Error::Bracket(format!(
                    "iterate escaped the bracket at z = {} after {picard} sweeps",
                    grid.z(j)
                )));
            }
            change = change.max((u1 - u0).abs());
        }
        upper = next_u;
        lower = next_l;
        changes.push(change);
        if change < opts.picard_tol {
            converged = true;
            break;
        }
        // Stagnation: less than a factor 2 gained over the last 50 sweeps.
        if picard >= 100 && change > 0.5 * changes[picard - 51] {
            break;
        }
    }
    let mut chi = upper.clone();
    let mut newton_steps = 0;
    if !converged {
        newton_steps = newton_polish(&op, &mut chi, &bracket.sup, tail, &lower, &upper, opts)?;
    }
    for j in 0..grid.n {
        if chi[j] < lower[j] * (1.0 - ORDER_SLACK) || chi[j] > upper[j] * (1.0 + ORDER_SLACK) {
            return Err(Error::Bracket(format!(
                "polished profile escaped the bracket at z = {}",
                grid.z(j)
            )));
        }
    }

    // Residual on the central half, with the exponential closure.
    let t_chi = op.apply(&chi, Tail::Exponential(alpha))?;
    let quarter = grid.n / 4;
    let residual = chi[quarter..grid.n - quarter]
        .iter()
        .zip(&t_chi[quarter..grid.n - quarter])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if !(residual < opts.residual_tol) {
        return Err(Error::Residual {
            what: "wave profile (grid diagnostics: increase Z or refine dz)",
            residual,
            tolerance: opts.residual_tol,
        });
    }

    let anchor = crossing(&chi, &grid, 0.5 * op.rho_star)?;
    let anchored = WaveGrid {
        z0: grid.z0 - anchor,
        ..grid
    };
    Ok(WaveProfile {
        regime,
        c: speed,
        c_requested: c,
        alpha_decay: alpha,
        alpha_continuous,
        rho_star: op.rho_star,
        grid: anchored,
        anchor,
        chi,
        residual,
        picard_iterations: picard,
        newton_steps,
        bracket,
    })
}

/// z where a nonincreasing profile crosses `level`, by linear interpolation.
fn crossing(chi: &[f64], grid: &WaveGrid, level: f64) -> Result<f64> {
    let j = chi
        .windows(2)
        .position(|w| w[0] >= level && w[1] < level)
        .ok_or_else(|| Error::Domain(format!("profile never crosses {level}")))?;
    let (a, b) = (chi[j], chi[j + 1]);
    Ok(grid.z(j) + grid.dz * (a - level) / (a - b))
}

/// Newton–Krylov iterations on χ − T(χ) = 0 in the variables v = χ/χ̄.
fn newton_polish(
    op: &WaveOperator,
    chi: &mut Vec<f64>,
    scale: &[f64],
    tail: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &WaveOptions,
) -> Result<usize> {
    let n = chi.len();
    let zero_tail = vec![0.0; tail.len()];
    let weighted = |chi: &[f64]| -> (Vec<f64>, Vec<f64>, f64) {
        let mut g = vec![0.0; n];
        op.linear(chi, op.rho_star, tail, &mut g);
        let r: Vec<f64> = (0..n).map(|j| (-(-g[j].max(0.0)).exp_m1() - chi[j]) / scale[j]).collect();
        let m = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        (g, r, m)
    };
    let (mut g, mut r, mut res) = weighted(chi);
    let mut steps = 0;
    while steps < opts.max_newton && res >= opts.weighted_tol {
        let d: Vec<f64> = g.iter().map(|v| (-v).exp()).collect();
        let mut buf = vec![0.0; n];
        let mut lin = vec![0.0; n];
        let matvec = |v: &[f64], out: &mut [f64]| {
            for j in 0..n {
                buf[j] = scale[j] * v[j];
            }
            op.linear(&buf, 0.0, &zero_tail, &mut lin);
            for j in 0..n {
                out[j] = v[j] - d[j] * lin[j] / scale[j];
            }
        };
        let dv = gmres(matvec, &r, opts.gmres_restart, opts.gmres_cycles, 1e-10);
        steps += 1;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            let trial: Vec<f64> = (0..n)
                .map(|j| (chi[j] + t * scale[j] * dv[j]).clamp(lower[j], upper[j]))
                .collect();
            let (g1, r1, res1) = weighted(&trial);
            if res1 < res {
                *chi = trial;
                g = g1;
                r = r1;
                res = res1;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        log::debug!("newton step {steps}: weighted residual {res:e}, step length {t}");
        if !accepted {
            break;
        }
    }
    if res >= opts.weighted_tol {
        // The interior residual check decides whether this is good enough.
        log::warn!("Newton polish stopped at weighted residual {res:e}");
    }
    Ok(steps)
}

/// Restarted GMRES for A x = b from x = 0; returns x.
fn gmres(mut matvec: impl FnMut(&[f64], &mut [f64]), b: &[f64], restart: usize, cycles: usize, rtol: f64) -> Vec<f64> {
    let n = b.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let bnorm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return x;
    }
    let m = restart.max(1);
    let mut ax = vec![0.0; n];
    for _ in 0..cycles {
        matvec(&x, &mut ax);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let beta = dot(&r, &r).sqrt();
        if beta <= rtol * bnorm {
            break;
        }
        let mut v: Vec<Vec<f64>> = vec![r.iter().map(|x| x / beta).collect()];
        let mut h = vec![vec![0.0; m]; m + 1];
        let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
        let mut gv = vec![0.0; m + 1];
        gv[0] = beta;
        let mut k = 0;
        while k < m {
            let mut w = vec![0.0; n];
            matvec(&v[k], &mut w);
            for i in 0..=k {
                let hij = dot(&w, &v[i]);
                h[i][k] = hij;
                for (a, b) in w.iter_mut().zip(&v[i]) {
                    *a -= hij * b;
                }
            }
            let hn = dot(&w, &w).sqrt();
            h[k + 1][k] = hn;
            for i in 0..k {
                let t = cs[i] * h[i][k] + sn[i] * h[i + 1][k];
                h[i + 1][k] = -sn[i] * h[i][k] + cs[i] * h[i + 1][k];
                h[i][k] = t;
            }
            let den = h[k][k].hypot(h[k + 1][k]);
            let (c, s) = if den == 0.0 { (1.0, 0.0) } else { (h[k][k] / den, h[k + 1][k] / den) };
            cs[k] = c;
            sn[k] = s;
            h[k][k] = den;
            h[k + 1][k] = 0.0;
            gv[k + 1] = -s * gv[k];
            gv[k] *= c;
            k += 1;
            if gv[k].abs() <= rtol * bnorm || hn == 0.0 {
                break;
            }
            v.push(w.iter().map(|x| x / hn).collect());
        }
        let mut y = vec![0.0; k];
        for i in (0..k).rev() {
            let s: f64 = (i + 1..k).map(|j| h[i][j] * y[j]).sum();
            y[i] = (gv[i] - s) / h[i][i];
        }
        for (i, yi) in y.iter().enumerate() {
            for (a, b) in x.iter_mut().zip(&v[i]) {
                *a += yi * b;
            }
        }
        if gv[k].abs() <= rtol * bnorm {
            break;
        }
    }
    x
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TailFit {
    pub rate: f64,
    pub z_range: (f64, f64),
    pub points: usize,
    pub r_squared: f64,
}

/// Fit the exponential decay rate of the profile tail over χ ∈ [1e-8, 1e-3]:
/// slope of log χ, or of log(χ/z) for the critical profile.
pub fn tail_decay_rate(profile: &WaveProfile) -> Result<TailFit> {
    fit_tail(&profile.zs(), &profile.chi, profile.regime)
}

pub fn fit_tail(zs: &[f64], chi: &[f64], regime: Regime) -> Result<TailFit> {
    let (lo, hi) = TAIL_WINDOW;
    let (x, y): (Vec<f64>, Vec<f64>) = zs
        .iter()
        .zip(chi)
        .filter(|(z, v)| **v >= lo && **v <= hi && (regime == Regime::Supercritical || **z > 0.0))
        .map(|(&z, &v)| match regime {
            Regime::Supercritical => (z, v.ln()),
            Regime::Critical => (z, (v / z).ln()),
        })
        .unzip();
    if x.len() < 10 {
        return Err(Error::Domain(format!(
            "tail window χ ∈ [{lo}, {hi}] holds {} grid points; enlarge Z",
            x.len()
        )));
    }
    let fit = fit_line(&x, &y)?;
    Ok(TailFit {
        rate: -fit.slope,
        z_range: (x[0], x[x.len() - 1]),
        points: x.len(),
        r_squared: fit.r_squared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dispersion::solve_c_star;
    use crate::rates::{build_rate_model, RatePreset};
    use proptest::prelude::*;

    fn setup(dz: f64) -> (RateModel, Kernel, WaveOperator) {
        let m = build_rate_model(&RatePreset::Constant { tau0: 2.0, gamma0: 1.0 }, 0.02).unwrap();
        let k = Kernel::gaussian(1.0).unwrap();
        let op = WaveOperator::new(&m, k.sample(dz).unwrap(), 1.0, 3.0).unwrap();
        (m, k, op)
    }

    #[test]
    fn constant_states_are_fixed() {
        let (_, _, op) = setup(0.05);
        let n = op.lookahead() + 200;
        let zero = op.apply(&vec![0.0; n], Tail::Zero).unwrap();
        // Left extension ρ* only reaches the first R cells.
        let r = op.sampled_kernel().half_width();
        assert!(zero[r..].iter().all(|&v| v == 0.0));
        let rs = op.rho_star;
        let flat = vec![rs; n];
        let t = op.apply_with(&flat, &vec![rs; op.lookahead()]);
        assert!(t.iter().all(|v| (v - rs).abs() < 1e-14));
    }

    #[test]
    fn geometric_and_direct_taps_agree() {
        let (m, _, op) = setup(0.05);
        let direct = AgeTaps {
            w: op.taps.w.clone(),
            geometric: None,
        };
        let n = 500;
        let g: Vec<f64> = (0..n + op.taps.len() - 1)
            .map(|j| (-(j as f64) * 0.01).exp() * (1.0 + 0.3 * (j as f64 * 0.2).sin()))
            .collect();
        let (mut a, mut b) = (vec![0.0; n], vec![0.0; n]);
        op.taps.correlate(&g, &mut a);
        direct.correlate(&g, &mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1e-300));
        }
        let sum: f64 = op.taps.w.iter().sum();
        assert!((sum - m.basic_reproduction_number(1.0)).abs() < 1e-12);
    }

    #[test]
    fn discrete_dispersion_close_to_continuous() {
        let (m, k, _) = setup(0.02);
        let res = solve_c_star(&m, &k, 1.0).unwrap();
        let sk = k.sample(0.02).unwrap();
        let d = DiscreteDispersion::new(&m, &sk, 1.0);
        let (c, a) = d.critical(res.c_star).unwrap();
        assert!((c - res.c_star).abs() < 1e-3, "{c} vs {}", res.c_star);
        assert!((a - res.alpha_star).abs() < 1e-3);
        let (phi, dphi) = d.phi(c, a);
        assert!((phi - 1.0).abs() < 1e-12 && dphi.abs() < 1e-10);
    }

    #[test]
    fn synthetic_exponential_tail() {
        let zs: Vec<f64> = (0..2000).map(|j| j as f64 * 0.02).collect();
        let chi: Vec<f64> = zs.iter().map(|z| (-0.7 * z).exp()).collect();
        let fit = fit_tail(&zs, &chi, Regime::Supercritical).unwrap();
        assert!((fit.rate - 0.7).abs() < 1e-6);
        let chi2: Vec<f64> = zs.iter().map(|z| z * (-0.7 * z).exp()).collect();
        let fit2 = fit_tail(&zs, &chi2, Regime::Critical).unwrap();
        assert!((fit2.rate - 0.7).abs() < 1e-6);
        assert!(fit_tail(&zs[..5], &chi[..5], Regime::Supercritical).is_err());
    }

    #[test]
    fn gmres_solves_small_system() {
        let a = [[4.0, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 2.0]];
        let b = [1.0, 2.0, 3.0];
        let x = gmres(
            |v, out| {
                for i in 0..3 {
                    out[i] = (0..3).map(|j| a[i][j] * v[j]).sum();
                }
            },
            &b,
            2,
            50,
            1e-14,
        );
        for i in 0..3 {
            let r: f64 = (0..3).map(|j| a[i][j] * x[j]).sum::<f64>() - b[i];
            assert!(r.abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn operator_is_monotone(seed in proptest::collection::vec(0.0f64..1.0, 64), bump in 0.0f64..0.2) {
            let (_, _, op) = setup(0.1);
            let n = op.lookahead() + 64;
            let rs = op.rho_star;
            let lo: Vec<f64> = (0..n).map(|j| rs * seed[j % 64] * 0.8).collect();
            let hi: Vec<f64> = lo.iter().enumerate().map(|(j, v)| (v + bump * seed[(j * 7) % 64]).min(rs)).collect();
            let a = op.apply(&lo, Tail::Exponential(0.5)).unwrap();
            let b = op.apply(&hi, Tail::Exponential(0.5)).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(*x <= *y * (1.0 + 1e-12) + 1e-300);
            }
        }
    }
}
