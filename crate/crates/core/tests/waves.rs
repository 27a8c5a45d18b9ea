use epiwave::dispersion::{solve_c_star, Dispersion, DispersionResult};
use epiwave::kernel::Kernel;
use epiwave::rates::{build_rate_model, RateModel, RatePreset};
use epiwave::waves::{solve_wave, tail_decay_rate, Regime, Tail, WaveOperator, WaveOptions, WaveProfile};

fn default_setup() -> (RateModel, Kernel, DispersionResult) {
    let m = build_rate_model(&RatePreset::Constant { tau0: 2.0, gamma0: 1.0 }, 0.02).unwrap();
    let k = Kernel::gaussian(1.0).unwrap();
    let d = solve_c_star(&m, &k, 1.0).unwrap();
    (m, k, d)
}

fn check_shape(p: &WaveProfile) {
    let rs = p.rho_star;
    let n = p.chi.len();
    assert!(p.chi[0] > rs - 1e-4, "left value {}", p.chi[0]);
    assert!(p.chi[n - 1] < 1e-4);
    assert!(p.chi.iter().all(|&v| v > 0.0 && v <= rs));
    // Strict decrease where neighbouring values are resolvable; within a
    // few ulp of ρ* only non-increase up to rounding.
    for w in p.chi.windows(2) {
        if rs - w[0] > 1e-10 {
            assert!(w[1] < w[0]);
        } else {
            assert!(w[1] <= w[0] + 4.0 * f64::EPSILON * rs);
        }
    }
    assert!(p.residual < 1e-8);
    assert!((p.eval(0.0) - 0.5 * rs).abs() < 1e-5);
}

fn max_diff(a: &WaveProfile, b: &WaveProfile, half: f64) -> f64 {
    a.zs()
        .iter()
        .filter(|z| z.abs() <= half)
        .map(|&z| (a.eval(z) - b.eval(z)).abs())
        .fold(0.0, f64::max)
}

#[test]
fn supercritical_profile_at_twice_critical_speed() {
    let (m, k, d) = default_setup();
    let c = 2.0 * d.c_star;
    let p = solve_wave(c, &m, &k, 1.0, &d, &WaveOptions::default()).unwrap();
    assert_eq!(p.regime, Regime::Supercritical);
    check_shape(&p);
    let b = &p.bracket;
    assert!(b.super_margin <= 1e-9 && b.sub_margin <= 1e-9);
    assert!(b.m_coef.unwrap() >= 1.0);
    assert!(b.sub.iter().zip(&b.sup).all(|(s, u)| s <= u));
    let alpha_c = Dispersion::new(&m, &k, 1.0).alpha_c(c, &d).unwrap();
    let fit = tail_decay_rate(&p).unwrap();
    assert!((fit.rate / alpha_c - 1.0).abs() < 0.02, "fit {} vs {alpha_c}", fit.rate);
}

#[test]
fn critical_profile() {
    let (m, k, d) = default_setup();
    let p = solve_wave(d.c_star, &m, &k, 1.0, &d, &WaveOptions::default()).unwrap();
    assert_eq!(p.regime, Regime::Critical);
    assert!((p.c / d.c_star - 1.0).abs() < 1e-4);
    check_shape(&p);
    let b = &p.bracket;
    assert!(b.super_margin <= 1e-9 && b.sub_margin <= 1e-9);
    assert!(b.b_coef.unwrap() > 1.0);
    assert!(b.sub.iter().zip(&b.sup).all(|(s, u)| s <= u));
    // Super equals ρ* up to the tangency point 1/α* (solver coordinates).
    let grid = epiwave::waves::WaveGrid { z0: p.grid.z0 + p.anchor, ..p.grid };
    for (j, v) in b.sup.iter().enumerate() {
        if grid.z(j) <= 1.0 / p.alpha_decay {
            assert_eq!(*v, p.rho_star);
        }
    }
    let fit = tail_decay_rate(&p).unwrap();
    assert!((fit.rate / d.alpha_star - 1.0).abs() < 0.02, "fit {} vs {}", fit.rate, d.alpha_star);
    // χ/(z e^{−α* z}) over the last decade of the fit window, χ ∈ [1e-8, 1e-7].
    let ratios: Vec<f64> = p
        .zs()
        .iter()
        .zip(&p.chi)
        .filter(|(z, v)| **z > 0.0 && (1e-8..=1e-7).contains(*v))
        .map(|(z, v)| v / (z * (-p.alpha_decay * z).exp()))
        .collect();
    assert!(ratios.len() > 10);
    let (lo, hi) = ratios.iter().fold((f64::MAX, 0.0f64), |(a, b), r| (a.min(*r), b.max(*r)));
    assert!(hi / lo - 1.0 < 0.05, "ratio spread {}", hi / lo - 1.0);
}

#[test]
fn translation_and_domain_independence() {
    let (m, k, d) = default_setup();
    let c = 1.5 * d.c_star;
    let base = WaveOptions {
        half_width: 100.0,
        ..Default::default()
    };
    let p = solve_wave(c, &m, &k, 1.0, &d, &base).unwrap();
    let shifted = solve_wave(c, &m, &k, 1.0, &d, &WaveOptions { shift: 3.0 * base.dz, ..base }).unwrap();
    assert!(max_diff(&p, &shifted, 50.0) < 1e-6);
    let wide = solve_wave(c, &m, &k, 1.0, &d, &WaveOptions { half_width: 200.0, ..base }).unwrap();
    assert!(max_diff(&p, &wide, 50.0) < 1e-6);
}

#[test]
fn faster_waves_have_flatter_tails() {
    let (m, k, d) = default_setup();
    let opts = WaveOptions {
        half_width: 150.0,
        ..Default::default()
    };
    let slow = solve_wave(1.3 * d.c_star, &m, &k, 1.0, &d, &opts).unwrap();
    let fast = solve_wave(1.8 * d.c_star, &m, &k, 1.0, &d, &opts).unwrap();
    assert!(slow.alpha_decay > fast.alpha_decay);
    assert!(tail_decay_rate(&slow).unwrap().rate > tail_decay_rate(&fast).unwrap().rate);
}

#[test]
fn rejects_subcritical_speed_and_short_grid() {
    let (m, k, d) = default_setup();
    assert!(solve_wave(0.9 * d.c_star, &m, &k, 1.0, &d, &WaveOptions::default()).is_err());
    let op = WaveOperator::new(&m, k.sample(0.05).unwrap(), 1.0, 3.0).unwrap();
    assert!(op.apply(&[0.1; 50], Tail::Zero).is_err());
    assert!(WaveOperator::new(&m, k.sample(0.05).unwrap(), 1.0, -1.0).is_err());
}
