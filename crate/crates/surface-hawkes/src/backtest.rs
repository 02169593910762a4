//! Market-making backtest on the event-driven surface: quote-modulated fills,
//! inventory/cash/PnL accounting, and market-impact measurement.
//!
//! Order flow is the signed Hawkes process of the surface model. An up event
//! at a point is client buy pressure: the market maker sells one unit at the
//! quoted ask with the logistic fill probability; a down event is client sell
//! pressure filled at the bid. Note the logistic law is applied as the
//! *probability* `1 / (1 + exp(a + (b/V) d))` thinning the flow, so the
//! stand-alone request rate of a point equals its flow rate — the per-point
//! rate scale in [`FillModel`] only sets the absolute fill intensity reported
//! by [`fill_intensity`].
//!
//! Quotes are in volatility points around the moving mid; a filled quote
//! earns `vega * spread` instantly and exposes the inventory to subsequent
//! mid moves. By convention the buy side of the book fills on down events, so
//! the inventory is exactly the difference of the two fill counters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hawkes::{Baseline, EventLog, KernelMatrix};
use crate::scaling::rescale;
use crate::stats;
use crate::surface::SurfaceGrid;

/// Logistic fill model, one rate scale and one vega per surface point.
#[derive(Debug, Clone)]
pub struct FillModel {
    /// Stand-alone request rate per point (events per unit time).
    pub lambda_scale: Vec<f64>,
    /// Logistic intercept; the fill probability at zero spread is
    /// `1 / (1 + exp(alpha_fill))`.
    pub alpha_fill: f64,
    /// Logistic spread sensitivity, >= 0 for monotone quotes.
    pub beta_fill: f64,
    /// Vega per point, converting volatility points to currency.
    pub vega: Vec<f64>,
}

impl FillModel {
    pub fn validate(&self, n_points: usize) -> Result<()> {
        if self.lambda_scale.len() != n_points || self.vega.len() != n_points {
            return Err(Error::DimensionMismatch(format!(
                "fill model sized for {} points, grid has {n_points}",
                self.lambda_scale.len()
            )));
        }
        if self.lambda_scale.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::Validation("lambda_scale entries must be positive".into()));
        }
        if self.vega.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::Validation("vega entries must be positive".into()));
        }
        Ok(())
    }

    /// Probability that a request at point `p` fills against spread `delta`.
    pub fn fill_probability(&self, p: usize, delta: f64) -> f64 {
        1.0 / (1.0 + (self.alpha_fill + self.beta_fill / self.vega[p] * delta).exp())
    }
}

/// Fill rate of a standing quote at spread `delta` on point `p`.
pub fn fill_intensity(delta: f64, p: usize, model: &FillModel) -> f64 {
    model.lambda_scale[p] * model.fill_probability(p, delta)
}

/// A quoting policy: maps time and current inventory to per-point spreads
/// `(delta_buy, delta_sell)` in volatility points. `delta_buy` prices the
/// market maker's bid (fills on down events), `delta_sell` the ask (fills on
/// up events).
pub trait QuoteStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn quotes(&self, t: f64, inventory: &[f64]) -> Vec<(f64, f64)>;
}

/// Same fixed spread on both sides of every point.
#[derive(Debug, Clone)]
pub struct ConstantSpread {
    pub spread: f64,
}

impl QuoteStrategy for ConstantSpread {
    fn name(&self) -> &'static str {
        "constant"
    }
    fn quotes(&self, _t: f64, inventory: &[f64]) -> Vec<(f64, f64)> {
        vec![(self.spread, self.spread); inventory.len()]
    }
}

/// Inventory-skewed spreads `delta_buy = c0 + c1 q`, `delta_sell = c0 - c1 q`
/// per point: a long book widens the bid and tightens the ask.
#[derive(Debug, Clone)]
pub struct InventoryLinear {
    pub c0: f64,
    pub c1: f64,
}

impl QuoteStrategy for InventoryLinear {
    fn name(&self) -> &'static str {
        "inventory_linear"
    }
    fn quotes(&self, _t: f64, inventory: &[f64]) -> Vec<(f64, f64)> {
        inventory
            .iter()
            .map(|&q| (self.c0 + self.c1 * q, self.c0 - self.c1 * q))
            .collect()
    }
}

/// Quote a single point at a fixed spread and stand away from the rest
/// (a spread wide enough to make the fill probability vanish).
#[derive(Debug, Clone)]
pub struct SinglePoint {
    pub active: usize,
    pub spread: f64,
}

const STAND_AWAY_SPREAD: f64 = 1e6;

impl QuoteStrategy for SinglePoint {
    fn name(&self) -> &'static str {
        "single_point"
    }
    fn quotes(&self, _t: f64, inventory: &[f64]) -> Vec<(f64, f64)> {
        (0..inventory.len())
            .map(|p| {
                if p == self.active {
                    (self.spread, self.spread)
                } else {
                    (STAND_AWAY_SPREAD, STAND_AWAY_SPREAD)
                }
            })
            .collect()
    }
}

/// Names accepted by [`build_strategy`].
pub fn strategy_names() -> &'static [&'static str] {
    &["constant", "inventory_linear", "single_point"]
}

/// Instantiate a built-in strategy by name.
///
/// Parameters: `constant` takes `[spread]`; `inventory_linear` takes
/// `[c0, c1]`; `single_point` takes `[point_index, spread]`.
pub fn build_strategy(name: &str, params: &[f64]) -> Result<Box<dyn QuoteStrategy>> {
    match name {
        "constant" => match params {
            [spread] => Ok(Box::new(ConstantSpread { spread: *spread })),
            _ => Err(Error::Strategy("constant takes exactly one parameter (spread)".into())),
        },
        "inventory_linear" => match params {
            [c0, c1] => Ok(Box::new(InventoryLinear { c0: *c0, c1: *c1 })),
            _ => Err(Error::Strategy(
                "inventory_linear takes exactly two parameters (c0, c1)".into(),
            )),
        },
        "single_point" => match params {
            [idx, spread] if *idx >= 0.0 && idx.fract() == 0.0 => Ok(Box::new(SinglePoint {
                active: *idx as usize,
                spread: *spread,
            })),
            _ => Err(Error::Strategy(
                "single_point takes an integer point index and a spread".into(),
            )),
        },
        other => Err(Error::Strategy(format!(
            "unknown strategy '{other}'; available: {}",
            strategy_names().join(", ")
        ))),
    }
}

#[derive(Debug, Clone)]
pub struct BacktestOptions {
    /// When set, filled requests excite the flow through the same kernel
    /// (the literal model excites only on the raw flow).
    pub feedback: bool,
    /// Number of uniform output intervals for the recorded paths.
    pub output_steps: usize,
}

impl Default for BacktestOptions {
    fn default() -> Self {
        BacktestOptions { feedback: false, output_steps: 100 }
    }
}

/// Paths and counters produced by one backtest run.
#[derive(Debug, Clone)]
pub struct BacktestResult {
    /// Uniform output times.
    pub times: Vec<f64>,
    /// Inventory per point, time-major.
    pub inventory: Vec<Vec<f64>>,
    pub cash: Vec<f64>,
    /// Mark-to-mid PnL: cash plus inventory value, net of the initial value.
    pub pnl: Vec<f64>,
    /// Mid volatility per point, time-major.
    pub mid: Vec<Vec<f64>>,
    /// Fill events; component `2p` counts market-maker buys at point `p`,
    /// `2p + 1` sells, so inventory is exactly `buys - sells`.
    pub fills: EventLog,
    /// The same fills in the flow-sign convention (a filled up event at
    /// component `2p`, a filled down event at `2p + 1`): the marked subset of
    /// `background`, directly comparable with it.
    pub filled_flow: EventLog,
    /// The raw order flow driving the run.
    pub background: EventLog,
    /// Per-point (buys, sells) totals.
    pub trade_counts: Vec<(u64, u64)>,
    /// Set when the strategy produced a non-finite spread: the paths stop at
    /// the offending time.
    pub abort: Option<String>,
}

/// Run one backtest with default options (no feedback, 100 output steps).
pub fn run_backtest(
    grid: &SurfaceGrid,
    kernel: &KernelMatrix,
    baseline: &Baseline,
    fill: &FillModel,
    strategy: &dyn QuoteStrategy,
    horizon: f64,
    seed: u64,
) -> Result<BacktestResult> {
    run_backtest_with(grid, kernel, baseline, fill, strategy, horizon, seed, &BacktestOptions::default())
}

/// Run one backtest. Deterministic per seed; the background flow coincides
/// with [`crate::hawkes::simulate_thinning`] at the same seed when feedback
/// is off, and fill decisions use an independent stream of the same seed.
#[allow(clippy::too_many_arguments)]
pub fn run_backtest_with(
    grid: &SurfaceGrid,
    kernel: &KernelMatrix,
    baseline: &Baseline,
    fill: &FillModel,
    strategy: &dyn QuoteStrategy,
    horizon: f64,
    seed: u64,
    opts: &BacktestOptions,
) -> Result<BacktestResult> {
    if horizon <= 0.0 {
        return Err(Error::Domain("backtest horizon must be positive".into()));
    }
    if opts.output_steps == 0 {
        return Err(Error::Domain("output_steps must be >= 1".into()));
    }
    let n_points = grid.n_points();
    let d = grid.dim();
    if kernel.dim() != d || baseline.dim() != d {
        return Err(Error::DimensionMismatch(
            "kernel/baseline dimension must equal the signed grid dimension".into(),
        ));
    }
    fill.validate(n_points)?;

    let mut fill_rng = ChaCha8Rng::seed_from_u64(seed);
    fill_rng.set_stream(1);

    let mut q = vec![0.0f64; n_points];
    let mut mid = grid.sigma0.clone();
    let mut cash = 0.0f64;
    let mut trade_counts = vec![(0u64, 0u64); n_points];
    let mut fills = EventLog::empty(d, horizon);
    let mut filled_flow = EventLog::empty(d, horizon);
    let mut abort = None;

    let out_times: Vec<f64> = (0..=opts.output_steps)
        .map(|i| horizon * i as f64 / opts.output_steps as f64)
        .collect();
    let mut out_inventory = Vec::with_capacity(out_times.len());
    let mut out_cash = Vec::with_capacity(out_times.len());
    let mut out_pnl = Vec::with_capacity(out_times.len());
    let mut out_mid = Vec::with_capacity(out_times.len());
    let mut out_idx = 0usize;
    let flush = |t: f64,
                     q: &[f64],
                     mid: &[f64],
                     cash: f64,
                     idx: &mut usize,
                     inv: &mut Vec<Vec<f64>>,
                     ca: &mut Vec<f64>,
                     pn: &mut Vec<f64>,
                     mi: &mut Vec<Vec<f64>>| {
        while *idx < out_times.len() && out_times[*idx] <= t {
            let value: f64 = q
                .iter()
                .zip(mid)
                .zip(&fill.vega)
                .map(|((qi, m), v)| qi * v * m)
                .sum();
            inv.push(q.to_vec());
            ca.push(cash);
            pn.push(cash + value);
            mi.push(mid.to_vec());
            *idx += 1;
        }
    };

    // in feedback mode the simulation already made the fill decisions; the
    // accounting pass below replays them exactly because it consumes the same
    // uniform stream against the same deterministic strategy state
    let background = if opts.feedback {
        simulate_with_feedback(grid, kernel, baseline, fill, strategy, horizon, seed)?
    } else {
        crate::hawkes::simulate_thinning(kernel, baseline, horizon, seed)?
    };
    let flow = background.merged();

    'events: for (t, c) in flow {
        let p = c / 2;
        let up = c % 2 == 0;
        let quotes = strategy.quotes(t, &q);
        if quotes.len() != n_points {
            return Err(Error::Strategy(format!(
                "strategy returned {} quote pairs for {n_points} points",
                quotes.len()
            )));
        }
        let delta = if up { quotes[p].1 } else { quotes[p].0 };
        if !delta.is_finite() {
            abort = Some(format!(
                "strategy '{}' returned non-finite spread {delta} at t = {t:.6}",
                strategy.name()
            ));
            break 'events;
        }
        let u: f64 = fill_rng.gen();
        if u < fill.fill_probability(p, delta) {
            if up {
                // client buys: sell one unit at the ask
                cash += fill.vega[p] * (mid[p] + delta);
                q[p] -= 1.0;
                trade_counts[p].1 += 1;
                fills.events[2 * p + 1].push(t);
                filled_flow.events[2 * p].push(t);
            } else {
                // client sells: buy one unit at the bid
                cash -= fill.vega[p] * (mid[p] - delta);
                q[p] += 1.0;
                trade_counts[p].0 += 1;
                fills.events[2 * p].push(t);
                filled_flow.events[2 * p + 1].push(t);
            }
        }
        flush(
            t,
            &q,
            &mid,
            cash,
            &mut out_idx,
            &mut out_inventory,
            &mut out_cash,
            &mut out_pnl,
            &mut out_mid,
        );
        // the request moves the mid by one tick after the trade
        if up {
            mid[p] += grid.tick;
        } else {
            mid[p] -= grid.tick;
        }
    }
    if abort.is_none() {
        flush(
            horizon,
            &q,
            &mid,
            cash,
            &mut out_idx,
            &mut out_inventory,
            &mut out_cash,
            &mut out_pnl,
            &mut out_mid,
        );
    }
    let times = out_times[..out_inventory.len()].to_vec();
    Ok(BacktestResult {
        times,
        inventory: out_inventory,
        cash: out_cash,
        pnl: out_pnl,
        mid: out_mid,
        fills,
        filled_flow,
        background,
        trade_counts,
        abort,
    })
}

/// Thinning simulation where filled requests feed back into the intensity
/// through the same kernel (a filled request excites twice: once as flow,
/// once as a fill). Fill decisions consume the dedicated uniform stream in
/// event order, exactly as the accounting pass does.
fn simulate_with_feedback(
    grid: &SurfaceGrid,
    kernel: &KernelMatrix,
    baseline: &Baseline,
    fill: &FillModel,
    strategy: &dyn QuoteStrategy,
    horizon: f64,
    seed: u64,
) -> Result<EventLog> {
    let d = kernel.dim();
    let n_points = grid.n_points();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill_rng = ChaCha8Rng::seed_from_u64(seed);
    fill_rng.set_stream(1);
    // excitation sources: flow events plus filled requests (counted twice)
    let mut excite: Vec<(f64, usize)> = Vec::new();
    let mut log = EventLog::empty(d, horizon);
    let mut q = vec![0.0f64; n_points];
    let mut t = 0.0f64;
    let intensity = |time: f64, excite: &[(f64, usize)]| -> Vec<f64> {
        let mut lam = baseline.0.clone();
        for &(s, j) in excite {
            // an event at exactly `time` contributes phi(0): the dominating
            // bound right after an event must include its own jump
            if s > time {
                continue;
            }
            for (i, l) in lam.iter_mut().enumerate() {
                *l += kernel.value_at(i, j, time - s);
            }
        }
        lam
    };
    loop {
        let lam_now = intensity(t, &excite);
        let bound: f64 = lam_now.iter().sum();
        if bound <= 0.0 {
            break;
        }
        let w: f64 = rng.gen();
        t += -w.ln() / bound;
        if t >= horizon {
            break;
        }
        let u: f64 = rng.gen();
        let lam_t = intensity(t, &excite);
        let total: f64 = lam_t.iter().sum();
        if u * bound > total {
            continue;
        }
        let mut target = u * bound;
        let mut c = d - 1;
        for (i, &l) in lam_t.iter().enumerate() {
            if target < l {
                c = i;
                break;
            }
            target -= l;
        }
        log.events[c].push(t);
        excite.push((t, c));
        // fill decision, mirroring the accounting pass
        let p = c / 2;
        let up = c % 2 == 0;
        let quotes = strategy.quotes(t, &q);
        let delta = if up { quotes[p].1 } else { quotes[p].0 };
        let filled = if delta.is_finite() {
            let uf: f64 = fill_rng.gen();
            uf < fill.fill_probability(p, delta)
        } else {
            false
        };
        if filled {
            if up {
                q[p] -= 1.0;
            } else {
                q[p] += 1.0;
            }
            excite.push((t, c));
        }
    }
    Ok(log)
}

/// Market-impact curves over an ensemble of seeds.
#[derive(Debug, Clone)]
pub struct ImpactReport {
    /// Diagnostic times on the rescaled grid `[0, 1]`.
    pub times: Vec<f64>,
    /// Mean L1 distance between the fill surface and the flow surface.
    pub mi_total: Vec<f64>,
    /// Mean absolute deviation per point, time-major.
    pub mi_point: Vec<Vec<f64>>,
    /// Mean signed deviation per point, time-major.
    pub mi_point_signed: Vec<Vec<f64>>,
    /// Standard error of the terminal per-point absolute deviation.
    pub terminal_se: Vec<f64>,
    /// Per-seed terminal absolute deviations, seed-major, for significance
    /// tests on differences between points.
    pub terminal_samples: Vec<Vec<f64>>,
}

/// Measure the market impact of a strategy: for each seed, the rescaled
/// surface built from the fills is compared with the rescaled surface of the
/// full flow. The two share every random draw (the fills are a marked subset
/// of the flow), so a strategy whose fills reproduce the flow has exactly
/// zero impact.
#[allow(clippy::too_many_arguments)]
pub fn market_impact(
    grid: &SurfaceGrid,
    kernel: &KernelMatrix,
    baseline: &Baseline,
    fill: &FillModel,
    strategy: &dyn QuoteStrategy,
    horizon: f64,
    seeds: &[u64],
    alpha: f64,
) -> Result<ImpactReport> {
    if seeds.len() < 100 {
        return Err(Error::InsufficientData(format!(
            "market impact needs >= 100 seeds, got {}",
            seeds.len()
        )));
    }
    let n_points = grid.n_points();
    let steps = 20usize;
    let mut times = Vec::new();
    let mut sum_total = vec![0.0; steps + 1];
    let mut sum_abs = vec![vec![0.0; n_points]; steps + 1];
    let mut sum_signed = vec![vec![0.0; n_points]; steps + 1];
    let mut terminal_samples: Vec<Vec<f64>> = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let result = run_backtest(grid, kernel, baseline, fill, strategy, horizon, seed)?;
        if let Some(msg) = &result.abort {
            return Err(Error::Strategy(format!("seed {seed}: {msg}")));
        }
        let r_fill = rescale(&result.filled_flow, kernel, baseline, horizon, alpha, steps)?;
        let r_flow = rescale(&result.background, kernel, baseline, horizon, alpha, steps)?;
        if times.is_empty() {
            times = r_flow.times.clone();
        }
        for i in 0..=steps {
            let mut l1 = 0.0;
            for p in 0..n_points {
                let diff = r_fill.sigma[i][p] - r_flow.sigma[i][p];
                l1 += diff.abs();
                sum_abs[i][p] += diff.abs();
                sum_signed[i][p] += diff;
            }
            sum_total[i] += l1;
        }
        terminal_samples.push(
            (0..n_points)
                .map(|p| (r_fill.sigma[steps][p] - r_flow.sigma[steps][p]).abs())
                .collect(),
        );
    }
    let n = seeds.len() as f64;
    let terminal_se: Vec<f64> = (0..n_points)
        .map(|p| {
            let col: Vec<f64> = terminal_samples.iter().map(|row| row[p]).collect();
            stats::standard_error(&col)
        })
        .collect();
    Ok(ImpactReport {
        times,
        mi_total: sum_total.into_iter().map(|s| s / n).collect(),
        mi_point: sum_abs
            .into_iter()
            .map(|row| row.into_iter().map(|s| s / n).collect())
            .collect(),
        mi_point_signed: sum_signed
            .into_iter()
            .map(|row| row.into_iter().map(|s| s / n).collect())
            .collect(),
        terminal_se,
        terminal_samples,
    })
}

/// Linear temporary cross-impact prices in basis points: each option's price
/// moves by `xi` per unit of net filled inventory, reported relative to its
/// base price. Time-major rows aligned with the backtest output grid.
pub fn cross_impact_price(
    result: &BacktestResult,
    xi: &[f64],
    c0: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let n_points = result.inventory.first().map_or(0, Vec::len);
    if xi.len() != n_points || c0.len() != n_points {
        return Err(Error::DimensionMismatch(format!(
            "xi and c0 must have one entry per point ({n_points})"
        )));
    }
    if xi.iter().any(|&x| !(x > 0.0)) || c0.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::Validation("xi and c0 entries must be positive".into()));
    }
    Ok(result
        .inventory
        .iter()
        .map(|row| {
            row.iter()
                .zip(xi)
                .zip(c0)
                .map(|((q, x), c)| 1e4 * x * q / c)
                .collect()
        })
        .collect())
}
