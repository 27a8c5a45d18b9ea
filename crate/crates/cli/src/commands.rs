use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use epiwave::dispersion::{solve_c_star, DispersionResult};
use epiwave::field::{InitialData, SpatialGrid};
use epiwave::io::{fmt_f64, write_columns, write_matrix};
use epiwave::kernel::{ConvolutionMethod, Kernel};
use epiwave::rates::{build_rate_model, RateModel};
use epiwave::spread::{assert_clearance, burn_in, estimate_speed, sup_ahead, track_front, verify_longtime};
use epiwave::stationary::{solve_lambda, solve_rho_star, solve_u};
use epiwave::validation::run_acceptance;
use epiwave::volterra::{physical_field, reconstruct_field, RenewalSolver, SimGrid, SimState, SolverOptions};
use epiwave::waves::{solve_wave, tail_decay_rate, WaveOptions};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ConvolutionConfig, ExperimentConfig, HistoryMode};
use crate::error::CliError;

/// Margin between the front and the grid edge, in kernel radii.
const EDGE_RADII: f64 = 5.0;
/// Required domain half-width beyond c*·t_end, in kernel radii.
const DOMAIN_RADII: f64 = 10.0;

#[derive(Serialize)]
struct Metadata<'a> {
    command: &'a str,
    cli_version: &'static str,
    core_version: &'static str,
    config_hash: String,
    config: String,
    threads: usize,
    wall_seconds: f64,
    result: Value,
}

pub struct Context {
    pub cfg: ExperimentConfig,
    pub started: Instant,
}

impl Context {
    pub fn new(cfg: ExperimentConfig) -> Self {
        Context {
            cfg,
            started: Instant::now(),
        }
    }

    fn out_dir(&self) -> Result<PathBuf, CliError> {
        let dir = self.cfg.output.dir.clone();
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn path(&self, name: &str) -> Result<PathBuf, CliError> {
        Ok(self.out_dir()?.join(name))
    }

    /// Write `<command>.json` with the config echo and hash.
    fn finish(&self, command: &str, result: Value) -> Result<PathBuf, CliError> {
        let meta = Metadata {
            command,
            cli_version: env!("CARGO_PKG_VERSION"),
            core_version: epiwave::VERSION,
            config_hash: self.cfg.hash(),
            config: self.cfg.canonical(),
            threads: rayon::current_num_threads(),
            wall_seconds: self.started.elapsed().as_secs_f64(),
            result,
        };
        let path = self.path(&format!("{command}.json"))?;
        fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(path)
    }

    fn model(&self) -> Result<RateModel, CliError> {
        Ok(build_rate_model(&self.cfg.rate_preset()?, self.cfg.grid.delta)?)
    }

    fn solver_options(&self, model: &RateModel) -> SolverOptions {
        let exp_recursion = match self.cfg.solver.history {
            HistoryMode::Auto => model.constant_rates().is_some(),
            HistoryMode::Full => false,
            HistoryMode::Recursive => true,
        };
        SolverOptions {
            exp_recursion,
            method: match self.cfg.solver.convolution {
                ConvolutionConfig::Direct => ConvolutionMethod::Direct,
                ConvolutionConfig::Fft => ConvolutionMethod::Fft,
            },
            ..Default::default()
        }
    }
}

/// Finite JSON number or null.
fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

pub fn r0(ctx: &Context) -> Result<(), CliError> {
    let model = ctx.model()?;
    let r0 = model.basic_reproduction_number(ctx.cfg.s0);
    let rho_star = solve_rho_star(r0);
    println!("R0 = {}", fmt_f64(r0));
    println!("rho* = {}", fmt_f64(rho_star));
    ctx.finish("r0", json!({ "r0": r0, "rho_star": rho_star }))?;
    Ok(())
}

struct Run {
    model: RateModel,
    kernel: Kernel,
    state: SimState,
    r0: f64,
    rho_star: f64,
    dispersion: Option<DispersionResult>,
    trivial: bool,
    max_inner_sweeps: usize,
    clearance: Option<f64>,
}

fn run_simulation(ctx: &Context) -> Result<Run, CliError> {
    let cfg = &ctx.cfg;
    let model = ctx.model()?;
    let kernel = ctx.cfg.kernel()?;
    let r0 = model.basic_reproduction_number(cfg.s0);
    let rho_star = solve_rho_star(r0);
    let dispersion = if r0 > 1.0 {
        match solve_c_star(&model, &kernel, cfg.s0) {
            Ok(d) => Some(d),
            Err(e) => {
                log::warn!("spreading speed unavailable: {e}");
                None
            }
        }
    } else {
        None
    };
    let radius = kernel.support_radius();
    if let Some(d) = &dispersion {
        let needed = d.c_star * cfg.grid.t_end + DOMAIN_RADII * radius;
        if cfg.grid.half_width < needed {
            log::warn!(
                "grid half-width {} is below c*·t_end + {DOMAIN_RADII}·radius = {needed:.3}",
                cfg.grid.half_width
            );
        }
    }
    let grid = SimGrid::new(cfg.grid.delta, cfg.grid.dx, cfg.grid.half_width, cfg.grid.t_end)?;
    let init = InitialData::from_presets(&cfg.init.rho0, &cfg.init.source, &model, &grid.space)?;
    let opts = ctx.solver_options(&model);
    let sk = kernel.sample(cfg.grid.dx)?;
    let mut solver = RenewalSolver::new(&model, sk, cfg.s0, init, grid, opts)?;
    let summary = solver.run()?;
    let state = solver.into_state();
    if summary.trivial {
        println!("notice: zero initial density and zero source, trivial dynamics (all-zero output)");
    }
    let clearance = if rho_star > 0.0 {
        Some(assert_clearance(&state, rho_star, EDGE_RADII * radius)?)
    } else {
        None
    };
    Ok(Run {
        model,
        kernel,
        state,
        r0,
        rho_star,
        dispersion,
        trivial: summary.trivial,
        max_inner_sweeps: summary.max_inner_sweeps,
        clearance,
    })
}

fn write_phi(ctx: &Context, state: &SimState, path: &Path) -> Result<(), CliError> {
    let o = &ctx.cfg.output;
    let space = &state.grid.space;
    let (mut t, mut x, mut v) = (Vec::new(), Vec::new(), Vec::new());
    for n in (0..=state.steps).step_by(o.time_stride) {
        let row = state.phi(n);
        for j in (0..space.n).step_by(o.x_stride) {
            t.push(state.grid.time(n));
            x.push(space.x(j));
            v.push(row[j]);
        }
    }
    write_columns(path, &["t", "x", "phi"], &[&t, &x, &v])?;
    Ok(())
}

fn snapshot_steps(ctx: &Context, state: &SimState) -> Result<Vec<usize>, CliError> {
    let times = if ctx.cfg.output.snapshot_times.is_empty() {
        vec![ctx.cfg.grid.t_end]
    } else {
        ctx.cfg.output.snapshot_times.clone()
    };
    let mut steps = Vec::new();
    for t in times {
        let n = (t / state.grid.delta).round();
        if !(n >= 0.0 && n as usize <= state.steps) {
            return Err(CliError::Config(format!("snapshot time {t} outside [0, t_end]")));
        }
        steps.push(n as usize);
    }
    steps.sort_unstable();
    steps.dedup();
    Ok(steps)
}

/// Physical density ρ at step n, subsampled; rows are ages, columns space.
fn write_snapshot(ctx: &Context, run: &Run, n: usize) -> Result<PathBuf, CliError> {
    let o = &ctx.cfg.output;
    let nx = run.state.nx();
    let field = physical_field(&reconstruct_field(&run.state, n, &run.model)?, &run.model, nx);
    let cols: Vec<usize> = (0..nx).step_by(o.x_stride).collect();
    let mut sub = Vec::new();
    for k in (0..run.model.len()).step_by(o.age_stride) {
        sub.extend(cols.iter().map(|&j| field[k * nx + j]));
    }
    let path = ctx.path(&format!("rho_step{n:07}.csv"))?;
    write_matrix(&path, &sub, cols.len())?;
    Ok(path)
}

fn write_axes(ctx: &Context, model: &RateModel, space: &SpatialGrid) -> Result<(), CliError> {
    let o = &ctx.cfg.output;
    let ages: Vec<f64> = (0..model.len()).step_by(o.age_stride).map(|k| model.age(k)).collect();
    let xs: Vec<f64> = (0..space.n).step_by(o.x_stride).map(|j| space.x(j)).collect();
    write_columns(ctx.path("snapshot_ages.csv")?, &["age"], &[&ages])?;
    write_columns(ctx.path("snapshot_x.csv")?, &["x"], &[&xs])?;
    Ok(())
}

fn run_summary(run: &Run) -> Value {
    let space = &run.state.grid.space;
    json!({
        "r0": run.r0,
        "rho_star": run.rho_star,
        "c_star": run.dispersion.as_ref().map(|d| d.c_star),
        "steps": run.state.steps,
        "nx": space.n,
        "x_min": space.x_min,
        "dx": space.dx,
        "delta": run.state.grid.delta,
        "max_inner_sweeps": run.max_inner_sweeps,
        "trivial": run.trivial,
        "i_star": run.state.i_star,
        "front_edge_clearance": run.clearance.map(num),
    })
}

pub fn simulate(ctx: &Context) -> Result<(), CliError> {
    let run = run_simulation(ctx)?;
    write_phi(ctx, &run.state, &ctx.path("phi.csv")?)?;
    write_axes(ctx, &run.model, &run.state.grid.space)?;
    let mut files = Vec::new();
    for n in snapshot_steps(ctx, &run.state)? {
        files.push(write_snapshot(ctx, &run, n)?.display().to_string());
    }
    let mut result = run_summary(&run);
    result["snapshots"] = json!(files);
    ctx.finish("simulate", result)?;
    println!(
        "simulated {} steps on {} points (R0 = {})",
        run.state.steps,
        run.state.nx(),
        fmt_f64(run.r0)
    );
    Ok(())
}

pub fn stationary(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let model = ctx.model()?;
    let kernel = cfg.kernel()?;
    let grid = SpatialGrid::symmetric(cfg.grid.half_width, cfg.grid.dx)?;
    let init = InitialData::from_presets(&cfg.init.rho0, &cfg.init.source, &model, &grid)?;
    let st = solve_u(&model, &kernel, cfg.s0, &init.source_cum, &grid, Default::default())?;
    let lambda = solve_lambda(&kernel, st.r0, st.rho_star, cfg.stationary.x_norm)?;
    write_columns(
        ctx.path("stationary.csv")?,
        &["x", "phi_hat", "deviation", "a_coef"],
        &[&grid.xs(), &st.phi_hat, &st.deviation, &st.a_coef],
    )?;
    let o = &cfg.output;
    let cols: Vec<usize> = (0..grid.n).step_by(o.x_stride).collect();
    let mut u = Vec::new();
    for k in (0..model.len()).step_by(o.age_stride) {
        u.extend(cols.iter().map(|&j| st.u(&model, &init.source_cum, k, j)));
    }
    write_matrix(ctx.path("u.csv")?, &u, cols.len())?;
    write_axes(ctx, &model, &grid)?;
    println!("R0 = {}", fmt_f64(st.r0));
    println!("rho* = {}", fmt_f64(st.rho_star));
    println!("lambda(x_norm = {}) = {}", cfg.stationary.x_norm, fmt_f64(lambda));
    ctx.finish(
        "stationary",
        json!({
            "r0": st.r0,
            "rho_star": st.rho_star,
            "lambda": lambda,
            "x_norm": cfg.stationary.x_norm,
            "lambda_estimated": kernel.lambda_is_estimated(),
            "sweeps": st.sweeps,
        }),
    )?;
    Ok(())
}

pub fn dispersion(ctx: &Context) -> Result<(), CliError> {
    let model = ctx.model()?;
    let kernel = ctx.cfg.kernel()?;
    let d = solve_c_star(&model, &kernel, ctx.cfg.s0)?;
    let (a, c): (Vec<f64>, Vec<f64>) = d.c_of_alpha.iter().cloned().unzip();
    write_columns(ctx.path("c_of_alpha.csv")?, &["alpha", "c"], &[&a, &c])?;
    println!("c* = {}", fmt_f64(d.c_star));
    println!("alpha* = {}", fmt_f64(d.alpha_star));
    ctx.finish("dispersion", serde_json::to_value(&d)?)?;
    Ok(())
}

pub fn wave(ctx: &Context, speeds: &[f64]) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let model = ctx.model()?;
    let kernel = cfg.kernel()?;
    let d = solve_c_star(&model, &kernel, cfg.s0)?;
    let speeds: Vec<f64> = if !speeds.is_empty() {
        speeds.to_vec()
    } else if !cfg.wave.speeds.is_empty() {
        cfg.wave.speeds.clone()
    } else {
        vec![d.c_star, 2.0 * d.c_star]
    };
    let opts = WaveOptions {
        dz: cfg.wave.dz,
        half_width: cfg.wave.half_width,
        ..Default::default()
    };
    let mut results = Vec::new();
    for (idx, &c) in speeds.iter().enumerate() {
        let p = solve_wave(c, &model, &kernel, cfg.s0, &d, &opts)?;
        let fit = tail_decay_rate(&p).ok();
        write_columns(
            ctx.path(&format!("wave_{idx}.csv"))?,
            &["z", "chi", "sub", "super"],
            &[&p.zs(), &p.chi, &p.bracket.sub, &p.bracket.sup],
        )?;
        println!(
            "c = {}: {:?}, residual {:.3e}, tail rate {}",
            fmt_f64(p.c),
            p.regime,
            p.residual,
            fit.as_ref().map_or("n/a".to_string(), |f| fmt_f64(f.rate))
        );
        let mut v = serde_json::to_value(&p)?;
        v["tail_fit"] = json!(fit.as_ref().map(|f| json!({
            "rate": f.rate, "z_range": f.z_range, "points": f.points, "r_squared": f.r_squared
        })));
        results.push(v);
    }
    ctx.finish("wave", json!({ "c_star": d.c_star, "alpha_star": d.alpha_star, "profiles": results }))?;
    Ok(())
}

pub fn spread(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let run = run_simulation(ctx)?;
    let d = run.dispersion.as_ref().ok_or_else(|| {
        CliError::Model(epiwave::Error::Domain(format!(
            "spreading needs R0 > 1 and a finite c* (R0 = {})",
            run.r0
        )))
    })?;
    let t_min = burn_in(run.state.i_star);
    let mut fronts = Vec::new();
    for &level in &cfg.spread.levels {
        let mut traj = track_front(&run.state, run.rho_star, level)?;
        let fit = estimate_speed(&traj, cfg.spread.window_fraction, t_min)?;
        traj.fit = Some(fit.clone());
        traj.write_csv(ctx.path(&format!("front_l{level}.csv"))?)?;
        println!(
            "level {level}: speed {} ± {:.2e} (c* = {}, rel. error {:.3e})",
            fmt_f64(fit.speed),
            fit.stderr,
            fmt_f64(d.c_star),
            fit.speed / d.c_star - 1.0
        );
        fronts.push(json!({
            "level": level,
            "speed": fit.speed,
            "stderr": fit.stderr,
            "c_star": d.c_star,
            "relative_error": fit.speed / d.c_star - 1.0,
            "intercept": fit.intercept,
            "r_squared": fit.r_squared,
            "window": fit.window,
            "points": fit.points,
        }));
    }
    let space = &run.state.grid.space;
    let field = reconstruct_field(&run.state, run.state.steps, &run.model)?;
    let st = solve_u(&run.model, &run.kernel, cfg.s0, &run.state.init.source_cum, space, Default::default())?;
    let behind = verify_longtime(
        &field,
        &run.model,
        space,
        &st,
        &run.state.init.source_cum,
        cfg.spread.radius,
        cfg.spread.age_max,
    )?;
    let ahead_x = 1.2 * d.c_star * cfg.grid.t_end;
    let ahead = sup_ahead(&field, &run.model, space, ahead_x).ok();
    println!("sup |rho - U| behind the front: {behind:.3e}");
    if let Some(a) = ahead {
        println!("sup rho for |x| >= {ahead_x:.3}: {a:.3e}");
    }
    let mut result = run_summary(&run);
    result["fronts"] = json!(fronts);
    result["longtime"] = json!({
        "radius": cfg.spread.radius,
        "age_max": cfg.spread.age_max,
        "sup_discrepancy": behind,
        "ahead_x": ahead_x,
        "sup_ahead": ahead,
    });
    ctx.finish("spread", result)?;
    Ok(())
}

pub fn validate(ctx: &Context) -> Result<(), CliError> {
    let report = run_acceptance();
    for line in report.lines() {
        println!("{line}");
    }
    let path = ctx.path("acceptance.json")?;
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
    ctx.finish("validate", json!({ "passed": report.passed, "report": path.display().to_string() }))?;
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<String> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.id.to_string())
            .collect();
        Err(CliError::Acceptance(format!("criteria {} failed", failed.join(", "))))
    }
}

pub fn show_config(ctx: &Context) -> Result<(), CliError> {
    print!("{}", ctx.cfg.canonical());
    Ok(())
}
