//! The acceptance suite: ten checks on the default configuration, each with
//! pinned tolerances and a one-line report.

use std::time::Instant;

use serde::Serialize;

use crate::dispersion::{phi_c, solve_c_star, Dispersion, DispersionResult};
use crate::error::{invalid, Result};
use crate::field::{InitialData, RhoInit, SourceInit};
use crate::kernel::Kernel;
use crate::numerics::fit_line;
use crate::rates::{build_rate_model, RateModel, RatePreset, Survival, TabulatedRates, Table};
use crate::spread::{burn_in, estimate_speed, sup_ahead, track_front, verify_longtime};
use crate::stationary::{solve_lambda, solve_rho_star, solve_u};
use crate::volterra::{
    age_integral, cumulative_ode_oracle, physical_field, reconstruct_field, simulate, SimGrid, SimState,
    SolverOptions,
};
use crate::waves::{solve_wave, tail_decay_rate, Regime, WaveOptions};

/// Tolerances and budgets of the suite.
pub mod tol {
    pub const RHO_STAR_RESIDUAL: f64 = 1e-12;
    pub const RHO_STAR_SECONDS: f64 = 1e-3;
    pub const PHI_RESIDUAL: f64 = 1e-8;
    pub const PHI_SLOPE: f64 = 1e-6;
    pub const SCAN_REL: f64 = 1e-6;
    pub const DISPERSION_SECONDS: f64 = 5.0;
    pub const SPEED_REL: f64 = 0.05;
    pub const LEVEL_SPREAD: f64 = 0.02;
    pub const FIT_R2: f64 = 0.999;
    pub const SPREAD_SECONDS: f64 = 300.0;
    pub const LONGTIME: f64 = 1e-2;
    pub const AHEAD: f64 = 1e-4;
    pub const EXTINCTION: f64 = 1e-2;
    pub const WAVE_RESIDUAL: f64 = 1e-8;
    pub const WAVE_TAIL_REL: f64 = 0.02;
    pub const WAVE_BRACKET_MARGIN: f64 = 1e-9;
    pub const WAVE_SECONDS: f64 = 120.0;
    pub const COMPARISON_SLACK: f64 = 1e-12;
    pub const ORACLE: f64 = 1e-3;
    pub const TRIVIAL: f64 = 1e-10;
    pub const FAR_FIELD_REL: f64 = 0.10;
}

/// Default rates τ0 = 2, γ0 = 1 with S0 = 1 and a unit Gaussian kernel.
pub const TAU0: f64 = 2.0;
pub const GAMMA0: f64 = 1.0;
pub const S0: f64 = 1.0;
pub const SIGMA: f64 = 1.0;
pub const DELTA: f64 = 0.02;
pub const DX: f64 = 0.05;
pub const T_END: f64 = 100.0;

#[derive(Debug, Clone, Copy, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Bound {
    Below { limit: f64 },
    AtLeast { limit: f64 },
    /// Open interval.
    Between { lo: f64, hi: f64 },
    Equal { value: f64 },
}

impl Bound {
    fn holds(&self, v: f64) -> bool {
        match *self {
            Bound::Below { limit } => v < limit,
            Bound::AtLeast { limit } => v >= limit,
            Bound::Between { lo, hi } => v > lo && v < hi,
            Bound::Equal { value } => v == value,
        }
    }

    fn describe(&self) -> String {
        match *self {
            Bound::Below { limit } => format!("< {limit:e}"),
            Bound::AtLeast { limit } => format!(">= {limit}"),
            Bound::Between { lo, hi } => format!("in ({lo}, {hi})"),
            Bound::Equal { value } => format!("== {value}"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    pub bound: Bound,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub id: u8,
    pub title: &'static str,
    pub passed: bool,
    pub metrics: Vec<Metric>,
    /// Informational values that are reported but not judged.
    pub info: Vec<(String, f64)>,
    pub seconds: f64,
    pub error: Option<String>,
}

impl Check {
    /// `PASS [3] title: name=value (bound); ...`
    pub fn line(&self) -> String {
        let status = if self.passed { "PASS" } else { "FAIL" };
        let mut parts: Vec<String> = self
            .metrics
            .iter()
            .map(|m| {
                let flag = if m.passed { "" } else { " !" };
                format!("{}={:.6e} ({}){flag}", m.name, m.value, m.bound.describe())
            })
            .collect();
        if let Some(e) = &self.error {
            parts.push(format!("error: {e}"));
        }
        format!("{status} [{}] {}: {}", self.id, self.title, parts.join("; "))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AcceptanceReport {
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl AcceptanceReport {
    pub fn lines(&self) -> Vec<String> {
        self.checks.iter().map(Check::line).collect()
    }
}

struct Builder {
    id: u8,
    title: &'static str,
    metrics: Vec<Metric>,
    info: Vec<(String, f64)>,
    start: Instant,
}

impl Builder {
    fn new(id: u8, title: &'static str) -> Self {
        Builder {
            id,
            title,
            metrics: Vec::new(),
            info: Vec::new(),
            start: Instant::now(),
        }
    }

    fn metric(&mut self, name: impl Into<String>, value: f64, bound: Bound) {
        self.metrics.push(Metric {
            name: name.into(),
            value,
            passed: bound.holds(value),
            bound,
        });
    }

    fn below(&mut self, name: impl Into<String>, value: f64, limit: f64) {
        self.metric(name, value, Bound::Below { limit });
    }

    fn info(&mut self, name: impl Into<String>, value: f64) {
        self.info.push((name.into(), value));
    }

    fn elapsed(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn finish(self, outcome: Result<()>) -> Check {
        let seconds = self.elapsed();
        let error = outcome.err().map(|e| e.to_string());
        let passed = error.is_none() && !self.metrics.is_empty() && self.metrics.iter().all(|m| m.passed);
        Check {
            id: self.id,
            title: self.title,
            passed,
            metrics: self.metrics,
            info: self.info,
            seconds,
            error,
        }
    }
}

fn default_model(delta: f64) -> Result<RateModel> {
    build_rate_model(&RatePreset::Constant { tau0: TAU0, gamma0: GAMMA0 }, delta)
}

fn default_kernel() -> Kernel {
    Kernel::gaussian(SIGMA).expect("positive sigma")
}

/// Compact source used by the spreading runs.
pub fn default_source() -> SourceInit {
    SourceInit::Bump {
        age_range: (0.0, 1.0),
        x_range: (-1.0, 1.0),
        height: 1.0,
    }
}

fn compact_rho0() -> RhoInit {
    RhoInit::Bump {
        center: 0.0,
        width: 2.0,
        height: 0.5,
        age_extent: 1.0,
    }
}

fn recursion() -> SolverOptions {
    SolverOptions {
        exp_recursion: true,
        ..Default::default()
    }
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Criterion 1: the homogeneous level ρ*.
pub fn check_rho_star() -> Check {
    let mut b = Builder::new(1, "rho* fixed point");
    let r0s = [1.2, 1.5, 2.0, 5.0, 0.5, 1.0];
    let t = Instant::now();
    let vals: Vec<f64> = r0s.iter().map(|&r| solve_rho_star(r)).collect();
    let secs = t.elapsed().as_secs_f64();
    for (&r, &v) in r0s.iter().zip(&vals) {
        if r > 1.0 {
            b.below(format!("residual(R0={r})"), (v - 1.0 + (-r * v).exp()).abs(), tol::RHO_STAR_RESIDUAL);
            b.metric(format!("rho*(R0={r})"), v, Bound::Between { lo: 0.0, hi: 1.0 });
        } else {
            b.metric(format!("rho*(R0={r})"), v, Bound::Equal { value: 0.0 });
        }
    }
    b.below("seconds", secs, tol::RHO_STAR_SECONDS);
    b.finish(Ok(()))
}

/// Criterion 2: dispersion relation at the minimiser, dense-scan oracle and
/// the Laplace-kernel preset.
pub fn check_dispersion() -> Check {
    let mut b = Builder::new(2, "dispersion consistency");
    let outcome = (|| {
        let m = default_model(0.01)?;
        let k = default_kernel();
        let d = solve_c_star(&m, &k, S0)?;
        let (c, a) = (d.c_star, d.alpha_star);
        b.below("|phi(a*)-1|", (phi_c(&m, &k, S0, c, a)? - 1.0).abs(), tol::PHI_RESIDUAL);
        let h = 1e-5;
        let slope = (phi_c(&m, &k, S0, c, a + h)? - phi_c(&m, &k, S0, c, a - h)?) / (2.0 * h);
        b.below("|dphi/da(a*)|", slope.abs(), tol::PHI_SLOPE);
        // Closed form c(α) = (S0·τ0·e^{σ²α²/2} − γ0)/α on 10⁶ points.
        let n = 1_000_000;
        let hi = 4.0;
        let scan = (1..=n)
            .map(|j| {
                let al = hi * j as f64 / n as f64;
                (S0 * TAU0 * (0.5 * SIGMA * SIGMA * al * al).exp() - GAMMA0) / al
            })
            .fold(f64::INFINITY, f64::min);
        b.below("|c*/scan-1|", (c / scan - 1.0).abs(), tol::SCAN_REL);
        b.info("c_star", c);
        b.info("alpha_star", a);
        let lap = Kernel::laplace(0.5)?;
        let dl = solve_c_star(&m, &lap, S0)?;
        b.metric("laplace alpha*", dl.alpha_star, Bound::Between { lo: 0.0, hi: 2.0 });
        Ok(())
    })();
    let secs = b.elapsed();
    b.below("seconds", secs, tol::DISPERSION_SECONDS);
    b.finish(outcome)
}

/// Output of the long spreading run shared by criteria 3 and 4.
pub struct SpreadRun {
    pub model: RateModel,
    pub kernel: Kernel,
    pub dispersion: DispersionResult,
    pub state: SimState,
    pub seconds: f64,
}

/// Default config with the compact source on `|x| ≤ 1.5·c*·t_end`,
/// single-threaded.
pub fn spread_run() -> Result<SpreadRun> {
    let start = Instant::now();
    let model = default_model(DELTA)?;
    let kernel = default_kernel();
    let dispersion = solve_c_star(&model, &kernel, S0)?;
    let grid = SimGrid::new(DELTA, DX, 1.5 * dispersion.c_star * T_END, T_END)?;
    let init = InitialData::from_presets(&RhoInit::Zero, &default_source(), &model, &grid.space)?;
    let sk = kernel.sample(DX)?;
    let state = single_threaded(|| simulate(&model, sk, S0, init, grid, recursion()))??;
    Ok(SpreadRun {
        model,
        kernel,
        dispersion,
        state,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Criterion 3: fitted front speeds against c*.
pub fn check_speed(run: &Result<SpreadRun>) -> Check {
    let mut b = Builder::new(3, "simulated speed vs c*");
    let outcome = (|| {
        let run = run.as_ref().map_err(|e| invalid(format!("spreading run failed: {e}")))?;
        let c_star = run.dispersion.c_star;
        let rho_star = solve_rho_star(run.model.basic_reproduction_number(S0));
        let t_min = burn_in(run.state.i_star);
        let mut speeds = Vec::new();
        for level in [0.1, 0.5, 0.9] {
            let traj = track_front(&run.state, rho_star, level)?;
            let fit = estimate_speed(&traj, 0.5, t_min)?;
            b.below(format!("|c/c*-1|(l={level})"), (fit.speed / c_star - 1.0).abs(), tol::SPEED_REL);
            b.metric(format!("R2(l={level})"), fit.r_squared, Bound::AtLeast { limit: tol::FIT_R2 });
            b.info(format!("speed(l={level})"), fit.speed);
            speeds.push(fit.speed);
        }
        let (lo, hi) = speeds.iter().fold((f64::MAX, 0.0f64), |(a, c), s| (a.min(*s), c.max(*s)));
        b.below("level spread", hi / lo - 1.0, tol::LEVEL_SPREAD);
        b.below("seconds", run.seconds + b.elapsed(), tol::SPREAD_SECONDS);
        Ok(())
    })();
    b.finish(outcome)
}

/// Criterion 4: convergence to U behind the front, smallness ahead of it.
pub fn check_longtime(run: &Result<SpreadRun>) -> Check {
    let mut b = Builder::new(4, "long-time convergence to U");
    let outcome = (|| {
        let run = run.as_ref().map_err(|e| invalid(format!("spreading run failed: {e}")))?;
        let st = &run.state;
        let space = &st.grid.space;
        let field = reconstruct_field(st, st.steps, &run.model)?;
        let stat = solve_u(&run.model, &run.kernel, S0, &st.init.source_cum, space, Default::default())?;
        let behind = verify_longtime(&field, &run.model, space, &stat, &st.init.source_cum, 10.0, 2.0)?;
        b.below("sup|rho-U| (|x|<=10, i<=2)", behind, tol::LONGTIME);
        let front = 1.2 * run.dispersion.c_star * T_END;
        b.below("sup rho (|x|>=1.2c*t)", sup_ahead(&field, &run.model, space, front)?, tol::AHEAD);
        Ok(())
    })();
    b.finish(outcome)
}

/// Criterion 5: extinction for R0 = 0.5 from a compact ϱ0 without source.
pub fn check_extinction() -> Check {
    let mut b = Builder::new(5, "subcritical extinction");
    let outcome = (|| {
        let m = build_rate_model(&RatePreset::Constant { tau0: 1.0, gamma0: 2.0 }, DELTA)?;
        b.info("R0", m.basic_reproduction_number(S0));
        let grid = SimGrid::new(DELTA, DX, 50.0, T_END)?;
        let init = InitialData::from_presets(&compact_rho0(), &SourceInit::Zero, &m, &grid.space)?;
        let st = simulate(&m, default_kernel().sample(DX)?, S0, init, grid, recursion())?;
        let field = physical_field(&reconstruct_field(&st, st.steps, &m)?, &m, st.nx());
        let sup = field.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        b.below("sup rho(100)", sup, tol::EXTINCTION);
        Ok(())
    })();
    b.finish(outcome)
}

/// Criterion 6: traveling waves at c*, 1.5c*, 2c*.
pub fn check_waves() -> Check {
    let mut b = Builder::new(6, "traveling waves");
    let outcome = (|| {
        let m = default_model(DELTA)?;
        let k = default_kernel();
        let d = solve_c_star(&m, &k, S0)?;
        let disp = Dispersion::new(&m, &k, S0);
        for (label, factor) in [("c*", 1.0), ("1.5c*", 1.5), ("2c*", 2.0)] {
            let t = Instant::now();
            let c = factor * d.c_star;
            let p = solve_wave(c, &m, &k, S0, &d, &WaveOptions::default())?;
            let secs = t.elapsed().as_secs_f64();
            b.below(format!("residual({label})"), p.residual, tol::WAVE_RESIDUAL);
            let target = match p.regime {
                Regime::Critical => d.alpha_star,
                Regime::Supercritical => disp.alpha_c(c, &d)?,
            };
            let fit = tail_decay_rate(&p)?;
            b.below(format!("tail rel err({label})"), (fit.rate / target - 1.0).abs(), tol::WAVE_TAIL_REL);
            let br = &p.bracket;
            b.below(
                format!("bracket margin({label})"),
                br.super_margin.max(br.sub_margin),
                tol::WAVE_BRACKET_MARGIN,
            );
            let slack = |v: f64| 1e-12 * v.abs().max(p.rho_star);
            let violations = br
                .sub
                .iter()
                .zip(&p.chi)
                .zip(&br.sup)
                .filter(|((s, x), u)| **s > **x + slack(**x) || **x > **u + slack(**u))
                .count();
            b.metric(format!("sub<=chi<=super violations({label})"), violations as f64, Bound::Equal { value: 0.0 });
            b.below(format!("seconds({label})"), secs, tol::WAVE_SECONDS);
            b.info(format!("picard({label})"), p.picard_iterations as f64);
        }
        Ok(())
    })();
    b.finish(outcome)
}

/// Criterion 7: ordering of Φ for sources I0 and 2·I0.
pub fn check_comparison() -> Check {
    let mut b = Builder::new(7, "comparison principle");
    let outcome = (|| {
        let m = default_model(DELTA)?;
        let grid = SimGrid::new(DELTA, DX, 60.0, 20.0)?;
        let sk = default_kernel().sample(DX)?;
        let lo = InitialData::from_presets(&RhoInit::Zero, &default_source(), &m, &grid.space)?;
        let mut hi = lo.clone();
        hi.source_cum = lo.source_cum.scaled(2.0);
        let a = simulate(&m, sk.clone(), S0, lo, grid, recursion())?;
        let c = simulate(&m, sk, S0, hi, grid, recursion())?;
        let violations = a
            .phi_history()
            .iter()
            .zip(c.phi_history())
            .filter(|(x, y)| **y < **x - tol::COMPARISON_SLACK)
            .count();
        b.metric("violations", violations as f64, Bound::Equal { value: 0.0 });
        Ok(())
    })();
    b.finish(outcome)
}

/// Step of the oracle comparison. The renewal scheme lags the front by
/// O(Δ²·t): sup error 2.8e-3 at Δ = 0.02 and 7.0e-4 at Δ = 0.01 by t = 50.
pub const ORACLE_DELTA: f64 = 0.01;

/// Criterion 8: age integral of the renewal solution vs the cumulative
/// equation, compared every unit of time up to t = 50.
pub fn check_oracle() -> Check {
    let mut b = Builder::new(8, "cumulative-equation oracle");
    let outcome = (|| {
        let delta = ORACLE_DELTA;
        let m = default_model(delta)?;
        let dx = 0.1;
        let t_end = 50.0;
        let grid = SimGrid::new(delta, dx, 130.0, t_end)?;
        let sk = default_kernel().sample(dx)?;
        let init = InitialData::from_presets(&compact_rho0(), &SourceInit::Zero, &m, &grid.space)?;
        let opts = recursion();
        let st = simulate(&m, sk.clone(), S0, init, grid, opts)?;
        let c0 = age_integral(&st, 0, &m)?;
        let every = (1.0 / delta).round() as usize;
        let oracle = cumulative_ode_oracle(&m, &sk, S0, &c0, delta, t_end, every, opts.extension)?;
        let mut sup = 0.0f64;
        for (r, (t, c)) in oracle.iter().enumerate().skip(1) {
            let n = r * every;
            if (grid.time(n) - t).abs() > 1e-9 {
                return Err(invalid("oracle and solver times are misaligned"));
            }
            let rho = age_integral(&st, n, &m)?;
            sup = rho.iter().zip(c).fold(sup, |a, (x, y)| a.max((x - y).abs()));
        }
        b.below("sup|int rho - C|", sup, tol::ORACLE);
        Ok(())
    })();
    b.finish(outcome)
}

/// Criterion 9: τ supported on ages [0, 1], source on ages [2, 3], ϱ0 = 0.
/// Then Φ ≡ 0 and ϱ(t, i) = 𝓘0(i) − 𝓘0((i − t)⁺).
pub fn check_trivial() -> Check {
    let mut b = Builder::new(9, "trivial-dynamics exactness");
    let outcome = (|| {
        let tau = Table::new(vec![0.0, 1.0, 1.0 + DELTA, 8.0], vec![3.0, 3.0, 0.0, 0.0])?;
        let gamma = Table::new(vec![0.0, 8.0], vec![0.5, 0.5])?;
        let preset = RatePreset::Tabulated(TabulatedRates {
            tau,
            survival: Survival::Gamma(gamma),
            i_dagger: None,
            i_max: None,
        });
        let m = build_rate_model(&preset, DELTA)?;
        let source = SourceInit::Bump {
            age_range: (2.0, 3.0),
            x_range: (-1.0, 1.0),
            height: 1.0,
        };
        let grid = SimGrid::new(DELTA, DX, 10.0, 6.0)?;
        let init = InitialData::from_presets(&RhoInit::Zero, &source, &m, &grid.space)?;
        let st = simulate(&m, default_kernel().sample(DX)?, S0, init, grid, Default::default())?;
        let nx = st.nx();
        let xs = grid.space.xs();
        let mut err = 0.0f64;
        for n in (0..=st.steps).step_by(10) {
            let t = grid.time(n);
            let f = reconstruct_field(&st, n, &m)?;
            for (k, row) in f.chunks(nx).enumerate() {
                let i = m.age(k);
                for (v, &x) in row.iter().zip(&xs) {
                    let exact = source.cumulative(i, x) - source.cumulative((i - t).max(0.0), x);
                    err = err.max((v - exact).abs());
                }
            }
        }
        b.below("sup|rho - closed form|", err, tol::TRIVIAL);
        let trace = st.phi_history().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        b.below("sup|Phi|", trace, tol::TRIVIAL);
        Ok(())
    })();
    b.finish(outcome)
}

/// Criterion 10: far-field decay of φ̂ − ρ* against λ.
pub fn check_far_field() -> Check {
    let mut b = Builder::new(10, "stationary far field");
    let outcome = (|| {
        let m = default_model(DELTA)?;
        let k = default_kernel();
        let half = 40.0;
        let grid = crate::field::SpatialGrid::symmetric(half, DX)?;
        let init = InitialData::from_presets(&RhoInit::Zero, &default_source(), &m, &grid)?;
        let st = solve_u(&m, &k, S0, &init.source_cum, &grid, Default::default())?;
        let (xs, ys): (Vec<f64>, Vec<f64>) = (0..grid.n)
            .map(|j| (grid.x(j), st.deviation[j]))
            .filter(|(x, e)| *x >= 0.75 * half && *e > 0.0)
            .map(|(x, e)| (x, e.ln()))
            .unzip();
        if xs.len() < 10 {
            return Err(invalid("too few positive deviations in the outer quarter"));
        }
        let fit = fit_line(&xs, &ys)?;
        let x_norm = 0.5 * (xs[0] + xs[xs.len() - 1]);
        let lambda = solve_lambda(&k, st.r0, st.rho_star, x_norm)?;
        b.below("|fit/lambda-1|", (-fit.slope / lambda - 1.0).abs(), tol::FAR_FIELD_REL);
        b.info("fitted rate", -fit.slope);
        b.info("lambda", lambda);
        Ok(())
    })();
    b.finish(outcome)
}

/// Run all checks in order.
pub fn run_acceptance() -> AcceptanceReport {
    let mut checks = vec![check_rho_star(), check_dispersion()];
    let run = spread_run();
    checks.push(check_speed(&run));
    checks.push(check_longtime(&run));
    drop(run);
    checks.push(check_extinction());
    checks.push(check_waves());
    checks.push(check_comparison());
    checks.push(check_oracle());
    checks.push(check_trivial());
    checks.push(check_far_field());
    AcceptanceReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}
