//! Epidemiological rates on the age-of-infection axis.
//!
//! A [`RateModel`] stores the recovery rate γ, the transmission rate τ, the
//! survival probability π and the infectivity ω = τπ on a uniform age grid.
//! Survival uses closed forms for the presets and cumulative trapezoid
//! integration of γ for tabulated input. ω is extended by zero past the last
//! grid node.

use std::path::Path;

use crate::error::{invalid, Result};
use crate::io::{check_increasing, read_two_column_csv};
use crate::numerics::{corrected_trapezoid, interp_linear};

/// Omitted tail of ω (relative to its integral) for infinite maximal age.
pub const TAIL_TOLERANCE: f64 = 1e-10;
/// Largest admissible fraction of ω-mass cut off below a finite maximal age.
pub const DISCARDED_MASS_TOLERANCE: f64 = 1e-6;

/// A tabulated function with strictly increasing abscissae. Values outside
/// the table are held at the end values.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Table {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(invalid("table columns differ in length"));
        }
        check_increasing(&x, "table")?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(invalid("table contains non-finite values"));
        }
        Ok(Table { x, y })
    }

    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let (x, y) = read_two_column_csv(path)?;
        Table::new(x, y)
    }

    pub fn eval(&self, x: f64) -> f64 {
        interp_linear(&self.x, &self.y, x)
    }

    pub fn xs(&self) -> &[f64] {
        &self.x
    }

    pub fn ys(&self) -> &[f64] {
        &self.y
    }
}

/// How survival is supplied for tabulated rates.
#[derive(Debug, Clone, PartialEq)]
pub enum Survival {
    /// Recovery rate γ(i); π is obtained by integrating it.
    Gamma(Table),
    /// Survival π(i) directly; must start at 1 and be nonincreasing.
    Pi(Table),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedRates {
    pub tau: Table,
    pub survival: Survival,
    /// Maximal infection age, if finite.
    pub i_dagger: Option<f64>,
    /// Numerical truncation age for infinite maximal age. Defaults to the
    /// last abscissa of the τ table.
    pub i_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RatePreset {
    /// τ ≡ τ0 and γ ≡ γ0.
    Constant { tau0: f64, gamma0: f64 },
    /// τ ≡ τ0 and γ(i) = 1/(i† − i), so that π(i) = 1 − i/i†.
    FiniteAge { tau0: f64, i_dagger: f64 },
    Tabulated(TabulatedRates),
}

/// Rates sampled on the uniform age grid `i_k = k·step`, `k = 0..len()`.
#[derive(Debug, Clone)]
pub struct RateModel {
    preset: RatePreset,
    step: f64,
    i_dagger: f64,
    gamma: Vec<f64>,
    tau: Vec<f64>,
    pi: Vec<f64>,
    omega: Vec<f64>,
    tau_inf: f64,
}

/// Build a rate model on an age grid with spacing `step`.
pub fn build_rate_model(preset: &RatePreset, step: f64) -> Result<RateModel> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(invalid(format!("age step must be positive, got {step}")));
    }
    match preset {
        RatePreset::Constant { tau0, gamma0 } => {
            let (tau0, gamma0) = (*tau0, *gamma0);
            if !(tau0 >= 0.0 && tau0.is_finite()) {
                return Err(invalid(format!("tau0 must be nonnegative, got {tau0}")));
            }
            if !(gamma0 > 0.0 && gamma0.is_finite()) {
                return Err(invalid(format!(
                    "gamma0 must be positive for an integrable infectivity, got {gamma0}"
                )));
            }
            let i_max = -TAIL_TOLERANCE.ln() / gamma0;
            let n = (i_max / step).ceil() as usize;
            let ages = (0..=n).map(|k| k as f64 * step);
            let pi: Vec<f64> = ages.map(|i| (-gamma0 * i).exp()).collect();
            let omega = pi.iter().map(|p| tau0 * p).collect();
            Ok(RateModel {
                preset: preset.clone(),
                step,
                i_dagger: f64::INFINITY,
                gamma: vec![gamma0; n + 1],
                tau: vec![tau0; n + 1],
                pi,
                omega,
                tau_inf: tau0,
            })
        }
        RatePreset::FiniteAge { tau0, i_dagger } => {
            let (tau0, idag) = (*tau0, *i_dagger);
            if !(tau0 >= 0.0 && tau0.is_finite()) {
                return Err(invalid(format!("tau0 must be nonnegative, got {tau0}")));
            }
            if !(idag > 0.0 && idag.is_finite()) {
                return Err(invalid(format!("i_dagger must be positive and finite, got {idag}")));
            }
            if step >= idag {
                return Err(invalid(format!(
                    "age step {step} must be smaller than the maximal age {idag}"
                )));
            }
            let n = last_node_before(idag, step);
            let ages: Vec<f64> = (0..=n).map(|k| k as f64 * step).collect();
            let pi: Vec<f64> = ages.iter().map(|&i| (1.0 - i / idag).max(0.0)).collect();
            let gamma = ages
                .iter()
                .map(|&i| if i < idag { 1.0 / (idag - i) } else { f64::INFINITY })
                .collect();
            let omega = pi.iter().map(|p| tau0 * p).collect();
            // Mass of ω = τ0(1 − i/i†) lost beyond the last node.
            let gap = idag - ages[n];
            let lost = (gap / idag).powi(2);
            if lost > DISCARDED_MASS_TOLERANCE {
                return Err(invalid(format!(
                    "age step {step} discards a fraction {lost:e} of the infectivity \
                     before i_dagger = {idag}; choose a step dividing i_dagger"
                )));
            }
            Ok(RateModel {
                preset: preset.clone(),
                step,
                i_dagger: idag,
                gamma,
                tau: vec![tau0; n + 1],
                pi,
                omega,
                tau_inf: tau0,
            })
        }
        RatePreset::Tabulated(tab) => build_tabulated(preset, tab, step),
    }
}

/// Index of the last grid node at or below `end` (a node within 1e-9
/// relative of `end` counts as landing on it).
fn last_node_before(end: f64, step: f64) -> usize {
    let r = end / step;
    let k = r.round();
    if (r - k).abs() <= 1e-9 * r.max(1.0) {
        k as usize
    } else {
        r.floor() as usize
    }
}

fn build_tabulated(preset: &RatePreset, tab: &TabulatedRates, step: f64) -> Result<RateModel> {
    if tab.tau.ys().iter().any(|&v| v < 0.0) {
        return Err(invalid("tabulated tau has negative values"));
    }
    let i_dagger = tab.i_dagger.unwrap_or(f64::INFINITY);
    if !(i_dagger > 0.0) {
        return Err(invalid("i_dagger must be positive"));
    }
    if i_dagger.is_finite() && step >= i_dagger {
        return Err(invalid(format!(
            "age step {step} must be smaller than the maximal age {i_dagger}"
        )));
    }
    let i_max = tab
        .i_max
        .unwrap_or_else(|| *tab.tau.xs().last().expect("validated table"));
    if !(i_max > 0.0 && i_max.is_finite()) {
        return Err(invalid(format!("i_max must be positive and finite, got {i_max}")));
    }
    let end = i_max.min(i_dagger);
    let n = last_node_before(end, step);
    if n < 2 {
        return Err(invalid("age grid has fewer than three nodes"));
    }
    let ages: Vec<f64> = (0..=n).map(|k| k as f64 * step).collect();
    let tau: Vec<f64> = ages.iter().map(|&i| tab.tau.eval(i)).collect();
    let (gamma, pi) = match &tab.survival {
        Survival::Gamma(g) => {
            if g.ys().iter().any(|&v| v < 0.0) {
                return Err(invalid("tabulated gamma has negative values"));
            }
            let gamma: Vec<f64> = ages.iter().map(|&i| g.eval(i)).collect();
            let mut pi = Vec::with_capacity(n + 1);
            let mut cum = 0.0;
            pi.push(1.0);
            for k in 1..=n {
                cum += 0.5 * step * (gamma[k - 1] + gamma[k]);
                pi.push((-cum).exp());
            }
            (gamma, pi)
        }
        Survival::Pi(p) => {
            let ys = p.ys();
            if ys.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(invalid("tabulated pi must lie in [0, 1]"));
            }
            if ys.windows(2).any(|w| w[1] > w[0]) {
                return Err(invalid("tabulated pi must be nonincreasing"));
            }
            if (p.eval(0.0) - 1.0).abs() > 1e-9 {
                return Err(invalid("tabulated pi must equal 1 at age 0"));
            }
            let pi: Vec<f64> = ages.iter().map(|&i| p.eval(i)).collect();
            // γ = −d log π / di by centred differences, one-sided at the ends.
            let mut gamma = vec![0.0; n + 1];
            for k in 0..=n {
                let (a, b) = (k.saturating_sub(1), (k + 1).min(n));
                let (pa, pb) = (pi[a], pi[b]);
                gamma[k] = if pa > 0.0 && pb > 0.0 {
                    ((pa / pb).ln() / ((b - a) as f64 * step)).max(0.0)
                } else {
                    f64::INFINITY
                };
            }
            (gamma, pi)
        }
    };
    let omega = tau.iter().zip(&pi).map(|(t, p)| t * p).collect();
    let tau_inf = tab.tau.ys().iter().cloned().fold(0.0, f64::max);
    Ok(RateModel {
        preset: preset.clone(),
        step,
        i_dagger,
        gamma,
        tau,
        pi,
        omega,
        tau_inf,
    })
}

impl RateModel {
    pub fn preset(&self) -> &RatePreset {
        &self.preset
    }

    /// Age step Δi.
    pub fn step(&self) -> f64 {
        self.step
    }

    /// Number of age nodes.
    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    /// Index of the last age node.
    pub fn last_index(&self) -> usize {
        self.omega.len() - 1
    }

    pub fn age(&self, k: usize) -> f64 {
        k as f64 * self.step
    }

    /// Last age node.
    pub fn i_max(&self) -> f64 {
        self.age(self.last_index())
    }

    /// Maximal infection age (possibly infinite).
    pub fn i_dagger(&self) -> f64 {
        self.i_dagger
    }

    pub fn tau_inf(&self) -> f64 {
        self.tau_inf
    }

    pub fn gamma_tab(&self) -> &[f64] {
        &self.gamma
    }

    pub fn tau_tab(&self) -> &[f64] {
        &self.tau
    }

    pub fn pi_tab(&self) -> &[f64] {
        &self.pi
    }

    pub fn omega_tab(&self) -> &[f64] {
        &self.omega
    }

    /// `(τ0, γ0)` for the constant-rate preset.
    pub fn constant_rates(&self) -> Option<(f64, f64)> {
        match self.preset {
            RatePreset::Constant { tau0, gamma0 } => Some((tau0, gamma0)),
            _ => None,
        }
    }

    /// ω at an arbitrary age: closed form for presets, linear interpolation
    /// otherwise; zero past the grid.
    pub fn omega_at(&self, i: f64) -> f64 {
        if i < 0.0 || i > self.i_max() * (1.0 + 1e-12) {
            return 0.0;
        }
        match self.preset {
            RatePreset::Constant { tau0, gamma0 } => tau0 * (-gamma0 * i).exp(),
            RatePreset::FiniteAge { tau0, i_dagger } => tau0 * (1.0 - i / i_dagger).max(0.0),
            RatePreset::Tabulated(_) => self.interp(&self.omega, i),
        }
    }

    /// π at an arbitrary age within the grid.
    pub fn pi_at(&self, i: f64) -> f64 {
        match self.preset {
            RatePreset::Constant { gamma0, .. } => (-gamma0 * i.max(0.0)).exp(),
            RatePreset::FiniteAge { i_dagger, .. } => (1.0 - i.max(0.0) / i_dagger).max(0.0),
            RatePreset::Tabulated(_) => self.interp(&self.pi, i.min(self.i_max())),
        }
    }

    fn interp(&self, tab: &[f64], i: f64) -> f64 {
        let r = i / self.step;
        let k = (r.floor() as usize).min(tab.len() - 1);
        if k + 1 >= tab.len() {
            return tab[tab.len() - 1];
        }
        let t = r - k as f64;
        tab[k] + t * (tab[k + 1] - tab[k])
    }

    /// ∫ω over the age grid (trapezoid with endpoint correction).
    pub fn integral_omega(&self) -> f64 {
        corrected_trapezoid(&self.omega, self.step)
    }

    /// Plain trapezoid ∫ω, the value the time stepper effectively uses.
    pub fn integral_omega_trapezoid(&self) -> f64 {
        crate::numerics::trapezoid(&self.omega, self.step)
    }

    /// R0 = S0·∫ω.
    pub fn basic_reproduction_number(&self, s0: f64) -> f64 {
        s0 * self.integral_omega()
    }

    /// Laplace transform L[ω](x) = ∫ω(i)e^{−xi} di.
    pub fn laplace_omega(&self, x: f64) -> f64 {
        let h = self.step;
        let vals: Vec<f64> = self
            .omega
            .iter()
            .enumerate()
            .map(|(k, w)| w * (-x * k as f64 * h).exp())
            .collect();
        corrected_trapezoid(&vals, h)
    }

    /// First age node with τ > 0.
    pub fn tau_support_start(&self) -> Option<usize> {
        self.tau.iter().position(|&t| t > 0.0)
    }
}

/// R0 = S0·∫ω.
pub fn basic_reproduction_number(model: &RateModel, s0: f64) -> Result<f64> {
    if !(s0 > 0.0 && s0.is_finite()) {
        return Err(invalid(format!("S0 must be positive, got {s0}")));
    }
    if model.len() < 2 {
        return Err(invalid("degenerate age grid"));
    }
    Ok(model.basic_reproduction_number(s0))
}

/// L[ω](x) by quadrature on the age grid.
pub fn laplace_omega(model: &RateModel, x: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(invalid(format!("Laplace argument must be nonnegative, got {x}")));
    }
    Ok(model.laplace_omega(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn constant(tau0: f64, gamma0: f64, step: f64) -> RateModel {
        build_rate_model(&RatePreset::Constant { tau0, gamma0 }, step).unwrap()
    }

    #[test]
    fn constant_preset_closed_forms() {
        let m = constant(2.0, 1.0, 0.01);
        for k in [0, 10, 250, 1000] {
            let i = m.age(k);
            assert!((m.pi_tab()[k] - (-i).exp()).abs() < 1e-15);
            assert!((m.omega_tab()[k] - 2.0 * (-i).exp()).abs() < 1e-15);
        }
        assert!(m.omega_tab().last().unwrap() / 2.0 <= TAIL_TOLERANCE);
    }

    #[test]
    fn finite_age_survival_is_linear() {
        let m = build_rate_model(&RatePreset::FiniteAge { tau0: 1.0, i_dagger: 1.0 }, 0.001).unwrap();
        assert_eq!(m.len(), 1001);
        for k in [0, 1, 500, 999] {
            assert!((m.pi_tab()[k] - (1.0 - m.age(k))).abs() < 1e-12);
        }
        assert_eq!(*m.pi_tab().last().unwrap(), 0.0);
        assert!(m.pi_tab()[999] < 2e-3);
    }

    #[test]
    fn tabulated_gamma_integrates_to_gaussian_survival() {
        let ages: Vec<f64> = (0..=400).map(|k| k as f64 * 0.01).collect();
        let tab = TabulatedRates {
            tau: Table::new(vec![0.0, 4.0], vec![1.0, 1.0]).unwrap(),
            survival: Survival::Gamma(Table::new(ages.clone(), ages).unwrap()),
            i_dagger: None,
            i_max: Some(4.0),
        };
        let m = build_rate_model(&RatePreset::Tabulated(tab), 1e-4).unwrap();
        let k = 10_000;
        assert!((m.age(k) - 1.0).abs() < 1e-12);
        assert!((m.pi_tab()[k] - (-0.5f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(build_rate_model(&RatePreset::Constant { tau0: -1.0, gamma0: 1.0 }, 0.01).is_err());
        assert!(build_rate_model(&RatePreset::FiniteAge { tau0: 1.0, i_dagger: 1.0 }, 1.0).is_err());
        assert!(build_rate_model(&RatePreset::FiniteAge { tau0: 1.0, i_dagger: 1.0 }, 0.3).is_err());
        let bad_pi = TabulatedRates {
            tau: Table::new(vec![0.0, 2.0], vec![1.0, 1.0]).unwrap(),
            survival: Survival::Pi(Table::new(vec![0.0, 1.0, 2.0], vec![1.0, 0.5, 0.6]).unwrap()),
            i_dagger: None,
            i_max: None,
        };
        assert!(build_rate_model(&RatePreset::Tabulated(bad_pi), 0.01).is_err());
        let neg = TabulatedRates {
            tau: Table::new(vec![0.0, 2.0], vec![1.0, -1.0]).unwrap(),
            survival: Survival::Gamma(Table::new(vec![0.0, 2.0], vec![1.0, 1.0]).unwrap()),
            i_dagger: None,
            i_max: None,
        };
        assert!(build_rate_model(&RatePreset::Tabulated(neg), 0.01).is_err());
    }

    #[test]
    fn reproduction_numbers() {
        let m = constant(2.0, 1.0, 0.01);
        assert!((basic_reproduction_number(&m, 1.0).unwrap() - 2.0).abs() < 2e-8);
        let m = constant(1.0, 2.0, 0.01);
        assert!((basic_reproduction_number(&m, 1.0).unwrap() - 0.5).abs() < 0.5e-8);
        let m = build_rate_model(&RatePreset::FiniteAge { tau0: 1.0, i_dagger: 1.0 }, 0.001).unwrap();
        assert!((basic_reproduction_number(&m, 3.0).unwrap() - 1.5).abs() < 1.5e-8);
        assert!(basic_reproduction_number(&m, 0.0).is_err());
    }

    #[test]
    fn laplace_transform_values() {
        let m = constant(2.0, 1.0, 0.01);
        assert!((m.laplace_omega(0.0) - 2.0).abs() < 1e-8);
        assert!((m.laplace_omega(1.0) - 1.0).abs() < 1e-8);
        let m = build_rate_model(&RatePreset::FiniteAge { tau0: 1.0, i_dagger: 1.0 }, 0.001).unwrap();
        // ∫₀¹ (1 − i) e^{−i} di = e^{−1}.
        assert!((m.laplace_omega(1.0) - (-1f64).exp()).abs() < 1e-9);
        assert!(laplace_omega(&m, -1.0).is_err());
    }

    #[test]
    fn laplace_is_decreasing_and_convex() {
        let m = constant(2.0, 1.0, 0.02);
        let xs: Vec<f64> = (0..60).map(|k| k as f64 * 0.25).collect();
        let v: Vec<f64> = xs.iter().map(|&x| m.laplace_omega(x)).collect();
        for w in v.windows(2) {
            assert!(w[1] < w[0]);
        }
        for w in v.windows(3) {
            assert!(w[0] - 2.0 * w[1] + w[2] > 0.0);
        }
    }

    #[test]
    fn pi_consistency_with_gamma() {
        let ages: Vec<f64> = (0..=100).map(|k| k as f64 * 0.1).collect();
        let g: Vec<f64> = ages.iter().map(|a| 0.5 + 0.3 * (a * 1.3).sin()).collect();
        let tab = TabulatedRates {
            tau: Table::new(vec![0.0, 10.0], vec![1.0, 1.0]).unwrap(),
            survival: Survival::Gamma(Table::new(ages, g).unwrap()),
            i_dagger: None,
            i_max: Some(10.0),
        };
        let m = build_rate_model(&RatePreset::Tabulated(tab), 0.005).unwrap();
        let pi = m.pi_tab();
        let gam = m.gamma_tab();
        for (a, b) in [(0usize, 100usize), (37, 900), (500, 2000)] {
            let integral = crate::numerics::trapezoid(&gam[a..=b], m.step());
            assert!((pi[b] / pi[a] - (-integral).exp()).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn r0_is_linear_in_s0(tau0 in 0.1f64..5.0, gamma0 in 0.2f64..3.0, s0 in 0.1f64..10.0) {
            let m = constant(tau0, gamma0, 0.01);
            let r1 = m.basic_reproduction_number(1.0);
            let rs = m.basic_reproduction_number(s0);
            prop_assert!((rs - s0 * r1).abs() <= 1e-12 * rs.abs());
            prop_assert!((r1 - tau0 / gamma0).abs() < 1e-8 * tau0 / gamma0);
        }
    }
}
