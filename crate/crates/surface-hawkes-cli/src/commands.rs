//! The five batch commands. Each writes its CSV outputs plus the resolved
//! configuration into the output directory and returns the process exit code
//! (0 success, 3 no-arbitrage violations; validation and runtime failures are
//! reported through `AppError`).

use std::path::Path;

use rayon::prelude::*;

use surface_hawkes::backtest::{
    build_strategy, cross_impact_price, market_impact, run_backtest_with, BacktestOptions,
};
use surface_hawkes::hawkes::{intensity_at, simulate_thinning, stability_warning};
use surface_hawkes::scaling::{hurst_estimate, rescale, simulate_factor_limit, simulate_rough_heston};
use surface_hawkes::surface::{is_arbitrage_free, surface_from_events};

use crate::config::{
    build_fill_model, build_grid, config_err, resolve_model, runtime_err, AppError, AppResult,
    ExperimentConfig,
};
use crate::csvout::{fmt_sig, CsvFile};

/// Write the fully resolved configuration; re-running the CLI on this file
/// reproduces the outputs byte for byte.
fn write_resolved_config(cfg: &ExperimentConfig, dir: &Path) -> AppResult<()> {
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| AppError::Runtime(format!("serialize resolved config: {e}")))?;
    std::fs::write(dir.join("resolved_config.toml"), text)
        .map_err(|e| AppError::Runtime(format!("write resolved config: {e}")))
}

fn prepare(cfg: &ExperimentConfig) -> AppResult<std::path::PathBuf> {
    let dir = std::path::PathBuf::from(&cfg.output.dir);
    std::fs::create_dir_all(&dir)
        .map_err(|e| AppError::Runtime(format!("create output dir {}: {e}", dir.display())))?;
    write_resolved_config(cfg, &dir)?;
    Ok(dir)
}

fn warn_if_unstable(kernel: &surface_hawkes::hawkes::KernelMatrix) -> AppResult<()> {
    if let Some(rho) = stability_warning(kernel).map_err(config_err)? {
        eprintln!(
            "warning: kernel branching spectral radius {rho:.4} >= 1; \
             no stationary regime, finite-horizon results only"
        );
    }
    Ok(())
}

pub fn cmd_simulate(cfg: &ExperimentConfig) -> AppResult<i32> {
    let grid = build_grid(cfg)?;
    let model = resolve_model(cfg, &grid)?;
    let dir = prepare(cfg)?;
    warn_if_unstable(&model.kernel)?;
    let sim = &cfg.simulation;
    let log = simulate_thinning(&model.kernel, &model.baseline, sim.horizon, sim.seed0)
        .map_err(runtime_err)?;

    let mut events = CsvFile::create(&dir, "events.csv", &["t", "component", "sign"])?;
    for (t, c) in log.merged() {
        let sign = if c % 2 == 0 { "1" } else { "-1" };
        events.row(&[fmt_sig(t), (c / 2).to_string(), sign.to_string()])?;
    }
    events.finish()?;

    let path = surface_from_events(&grid, &log).map_err(runtime_err)?;
    let n_points = grid.n_points();
    let mut header: Vec<String> = vec!["t".into()];
    header.extend((0..n_points).map(|p| format!("sigma_{p}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut surface = CsvFile::create(&dir, "surface.csv", &header_refs)?;
    for i in 0..=sim.steps {
        let t = sim.horizon * i as f64 / sim.steps as f64;
        let mut row = vec![t];
        row.extend((0..n_points).map(|p| path.value_at(p, t)));
        surface.num_row(&row)?;
    }
    surface.finish()?;

    let d = grid.dim();
    let mut iheader: Vec<String> = vec!["t".into()];
    iheader.extend((0..d).map(|c| format!("lambda_{c}")));
    let iheader_refs: Vec<&str> = iheader.iter().map(String::as_str).collect();
    let mut intensity = CsvFile::create(&dir, "intensity.csv", &iheader_refs)?;
    for i in 0..=sim.steps {
        let t = sim.horizon * i as f64 / sim.steps as f64;
        let lam = intensity_at(t, &log, &model.kernel, &model.baseline).map_err(runtime_err)?;
        let mut row = vec![t];
        row.extend(lam);
        intensity.num_row(&row)?;
    }
    intensity.finish()?;
    Ok(0)
}

pub fn cmd_noarb(cfg: &ExperimentConfig) -> AppResult<i32> {
    let grid = build_grid(cfg)?;
    let model = resolve_model(cfg, &grid)?;
    let betas = model.betas.as_ref().ok_or_else(|| {
        AppError::Config(
            "the noarb command needs betas: use the no_arb kernel family or a [betas] section"
                .into(),
        )
    })?;
    let dir = prepare(cfg)?;
    let (pass, violations) =
        is_arbitrage_free(&model.kernel, &model.baseline, &grid, betas, model.mode)
            .map_err(config_err)?;
    let mut report = CsvFile::create(
        &dir,
        "noarb_report.csv",
        &["condition", "slice", "strike", "lhs", "rhs", "margin"],
    )?;
    for v in &violations {
        report.row(&[
            v.condition.clone(),
            fmt_sig(v.slice),
            fmt_sig(v.strike),
            fmt_sig(v.lhs),
            fmt_sig(v.rhs),
            fmt_sig(v.margin),
        ])?;
    }
    report.finish()?;
    if pass {
        Ok(0)
    } else {
        eprintln!("no-arbitrage check failed: {} violation(s)", violations.len());
        Ok(3)
    }
}

pub fn cmd_scaling(cfg: &ExperimentConfig) -> AppResult<i32> {
    let grid = build_grid(cfg)?;
    let model = resolve_model(cfg, &grid)?;
    let scaling = cfg.scaling.as_ref().ok_or_else(|| {
        AppError::Config("the scaling command needs a [scaling] section".into())
    })?;
    if scaling.steps < 512 {
        return Err(AppError::Config(
            "scaling.steps must be >= 512 so the Hurst estimate has enough samples".into(),
        ));
    }
    let dir = prepare(cfg)?;
    warn_if_unstable(&model.kernel)?;
    let sim = &cfg.simulation;

    let log = simulate_thinning(&model.kernel, &model.baseline, sim.horizon, sim.seed0)
        .map_err(runtime_err)?;
    let rescaled = rescale(&log, &model.kernel, &model.baseline, sim.horizon, sim.alpha, sim.steps)
        .map_err(runtime_err)?;
    let d = grid.dim();
    let n_points = grid.n_points();
    let mut header: Vec<String> = vec!["t".into()];
    header.extend((0..d).map(|c| format!("x_{c}")));
    header.extend((0..d).map(|c| format!("y_{c}")));
    header.extend((0..d).map(|c| format!("z_{c}")));
    header.extend((0..n_points).map(|p| format!("sigma_{p}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut out = CsvFile::create(&dir, "rescaled.csv", &header_refs)?;
    for i in 0..rescaled.times.len() {
        let mut row = vec![rescaled.times[i]];
        row.extend(&rescaled.x[i]);
        row.extend(&rescaled.y[i]);
        row.extend(&rescaled.z[i]);
        row.extend(&rescaled.sigma[i]);
        out.num_row(&row)?;
    }
    out.finish()?;

    let factors: Vec<_> =
        scaling.factors.iter().map(|f| (f.vector.clone(), f.to_params())).collect();
    let surface =
        simulate_factor_limit(&factors, scaling.horizon, scaling.steps, sim.seed0)
            .map_err(config_err)?;
    let width = factors[0].0.len();
    let mut fheader: Vec<String> = vec!["t".into()];
    fheader.extend((0..width).map(|p| format!("sigma_{p}")));
    let fheader_refs: Vec<&str> = fheader.iter().map(String::as_str).collect();
    let mut fout = CsvFile::create(&dir, "factors.csv", &fheader_refs)?;
    for (i, row) in surface.iter().enumerate() {
        let t = scaling.horizon * i as f64 / scaling.steps as f64;
        let mut r = vec![t];
        r.extend(row);
        fout.num_row(&r)?;
    }
    fout.finish()?;

    let mut hout = CsvFile::create(&dir, "hurst.csv", &["factor", "hurst"])?;
    let times: Vec<f64> = (0..=scaling.steps)
        .map(|i| scaling.horizon * i as f64 / scaling.steps as f64)
        .collect();
    for (idx, f) in scaling.factors.iter().enumerate() {
        let (_, v) =
            simulate_rough_heston(&f.to_params(), scaling.horizon, scaling.steps, sim.seed0 + idx as u64)
                .map_err(config_err)?;
        let h = hurst_estimate(&v, &times).map_err(runtime_err)?;
        hout.row(&[idx.to_string(), fmt_sig(h)])?;
    }
    hout.finish()?;
    Ok(0)
}

pub fn cmd_backtest(cfg: &ExperimentConfig) -> AppResult<i32> {
    let grid = build_grid(cfg)?;
    let model = resolve_model(cfg, &grid)?;
    let bt = cfg.backtest.as_ref().ok_or_else(|| {
        AppError::Config("the backtest command needs a [backtest] section".into())
    })?;
    let fill = build_fill_model(bt, grid.n_points())?;
    let strategy = build_strategy(&bt.strategy, &bt.strategy_params).map_err(config_err)?;
    let dir = prepare(cfg)?;
    warn_if_unstable(&model.kernel)?;
    let sim = &cfg.simulation;
    let opts = BacktestOptions { feedback: bt.feedback, output_steps: bt.output_steps };

    let results: Vec<_> = (0..sim.n_seeds)
        .into_par_iter()
        .map(|i| {
            run_backtest_with(
                &grid,
                &model.kernel,
                &model.baseline,
                &fill,
                strategy.as_ref(),
                sim.horizon,
                sim.seed0 + i as u64,
                &opts,
            )
        })
        .collect::<surface_hawkes::Result<Vec<_>>>()
        .map_err(runtime_err)?;
    for r in &results {
        if let Some(msg) = &r.abort {
            return Err(AppError::Runtime(format!("backtest aborted: {msg}")));
        }
    }

    let n_points = grid.n_points();
    let n = results.len() as f64;
    let times = &results[0].times;
    let mut header: Vec<String> = vec!["t".into(), "pnl".into(), "cash".into()];
    header.extend((0..n_points).map(|p| format!("inventory_{p}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut out = CsvFile::create(&dir, "pnl.csv", &header_refs)?;
    for i in 0..times.len() {
        let mut row = vec![times[i]];
        row.push(results.iter().map(|r| r.pnl[i]).sum::<f64>() / n);
        row.push(results.iter().map(|r| r.cash[i]).sum::<f64>() / n);
        for p in 0..n_points {
            row.push(results.iter().map(|r| r.inventory[i][p]).sum::<f64>() / n);
        }
        out.num_row(&row)?;
    }
    out.finish()?;
    Ok(0)
}

pub fn cmd_impact(cfg: &ExperimentConfig) -> AppResult<i32> {
    let grid = build_grid(cfg)?;
    let model = resolve_model(cfg, &grid)?;
    let bt = cfg.backtest.as_ref().ok_or_else(|| {
        AppError::Config("the impact command needs a [backtest] section".into())
    })?;
    let sim = &cfg.simulation;
    if sim.n_seeds < 100 {
        return Err(AppError::Config(format!(
            "the impact command needs simulation.n_seeds >= 100, got {}",
            sim.n_seeds
        )));
    }
    let fill = build_fill_model(bt, grid.n_points())?;
    let strategy = build_strategy(&bt.strategy, &bt.strategy_params).map_err(config_err)?;
    let dir = prepare(cfg)?;
    warn_if_unstable(&model.kernel)?;
    let n_points = grid.n_points();

    let seeds: Vec<u64> = (0..sim.n_seeds).map(|i| sim.seed0 + i as u64).collect();
    let report = market_impact(
        &grid,
        &model.kernel,
        &model.baseline,
        &fill,
        strategy.as_ref(),
        sim.horizon,
        &seeds,
        sim.alpha,
    )
    .map_err(runtime_err)?;
    let mut header: Vec<String> = vec!["t".into(), "mi_total".into()];
    header.extend((0..n_points).map(|p| format!("mi_{p}")));
    header.extend((0..n_points).map(|p| format!("mi_signed_{p}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut out = CsvFile::create(&dir, "impact.csv", &header_refs)?;
    for i in 0..report.times.len() {
        let mut row = vec![report.times[i], report.mi_total[i]];
        row.extend(&report.mi_point[i]);
        row.extend(&report.mi_point_signed[i]);
        out.num_row(&row)?;
    }
    out.finish()?;

    // mean temporary cross-impact in basis points per option
    let c0 = match &bt.c0 {
        Some(v) => crate::config::broadcast(v, n_points, "backtest.c0")?,
        None => vec![1.0; n_points],
    };
    let xi: Vec<f64> = c0.iter().map(|c| bt.xi_scale * c).collect();
    let opts = BacktestOptions { feedback: bt.feedback, output_steps: bt.output_steps };
    let bp_paths: Vec<Vec<Vec<f64>>> = seeds
        .par_iter()
        .map(|&seed| {
            let r = run_backtest_with(
                &grid,
                &model.kernel,
                &model.baseline,
                &fill,
                strategy.as_ref(),
                sim.horizon,
                seed,
                &opts,
            )?;
            cross_impact_price(&r, &xi, &c0)
        })
        .collect::<surface_hawkes::Result<Vec<_>>>()
        .map_err(runtime_err)?;
    let mut xout = CsvFile::create(&dir, "cross_impact.csv", &["t", "option", "bp"])?;
    let n = seeds.len() as f64;
    let n_times = bp_paths[0].len();
    for i in 0..n_times {
        let t = sim.horizon * i as f64 / (n_times - 1).max(1) as f64;
        for p in 0..n_points {
            let mean_bp = bp_paths.iter().map(|path| path[i][p]).sum::<f64>() / n;
            xout.row(&[fmt_sig(t), p.to_string(), fmt_sig(mean_bp)])?;
        }
    }
    xout.finish()?;
    Ok(0)
}
