//! Experiment configuration: TOML schema, validation, and construction of the
//! model objects (grid, kernel, baseline, betas) from a parsed config.
//!
//! Unknown keys are rejected everywhere. Times and rates are expressed in the
//! configured `time_unit`; maturities carry their own unit and are stored on
//! the grid in year-fractions (1 year = 252 trading days = 52 weeks).

use serde::{Deserialize, Serialize};

use surface_hawkes::hawkes::{Baseline, KernelMatrix, StrikeLabel};
use surface_hawkes::kernels::{
    assemble_semi_separable, assemble_separable, KernelFn, SemiSeparableSpec, SeparableSpec,
};
use surface_hawkes::surface::{
    build_five_point, build_three_point, NoArbBetas, PipelineParams, SurfaceGrid, SurfaceMode,
};

/// Errors surfaced to the user with the CLI's exit-code discipline:
/// configuration problems exit 2, runtime failures exit 1.
#[derive(Debug)]
pub enum AppError {
    Config(String),
    Runtime(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            AppError::Config(m) | AppError::Runtime(m) => m,
        }
    }
}

pub type AppResult<T> = std::result::Result<T, AppError>;

/// Library errors during model construction are configuration mistakes;
/// errors during a run are runtime failures.
pub fn config_err(e: surface_hawkes::Error) -> AppError {
    AppError::Config(e.to_string())
}

pub fn runtime_err(e: surface_hawkes::Error) -> AppError {
    AppError::Runtime(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeUnit {
    Day,
    Week,
    Year,
}

impl TimeUnit {
    pub fn in_years(self) -> f64 {
        match self {
            TimeUnit::Day => 1.0 / 252.0,
            TimeUnit::Week => 1.0 / 52.0,
            TimeUnit::Year => 1.0,
        }
    }
}

fn default_time_unit() -> TimeUnit {
    TimeUnit::Day
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Unit of horizons and rates in this file.
    #[serde(default = "default_time_unit")]
    pub time_unit: TimeUnit,
    pub grid: GridConfig,
    pub kernel: KernelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub betas: Option<BetasConfig>,
    pub simulation: SimulationConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backtest: Option<BacktestConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<ScalingConfig>,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Delta labels: "10dp", "25dp", "atm", "25dc", "10dc". Optional when
    /// `moneyness` is given (plain moneyness strikes).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    /// Moneyness per strike; defaults to the built-in delta table when labels
    /// are used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moneyness: Option<Vec<f64>>,
    pub maturities: Vec<f64>,
    pub maturity_unit: TimeUnit,
    pub tick: f64,
    /// Initial surface, one value per point or a single broadcast value.
    pub sigma0: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelConfig {
    Zero,
    Explicit(ExplicitParams),
    ThreeStrike(ThreeStrikeParams),
    NoArb(NoArbParams),
    Separable(SeparableParams),
    SemiSeparable(SemiSeparableParams),
}

/// One scalar kernel entry; which parameters are required depends on `kind`
/// ("zero", "exponential" with `alpha`/`beta`, "power_law" with
/// `alpha`/`gamma`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelEntryConfig {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

impl KernelEntryConfig {
    pub fn build(&self) -> AppResult<KernelFn> {
        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| {
                AppError::Config(format!("kernel kind '{}' requires key '{name}'", self.kind))
            })
        };
        let forbid = |v: Option<f64>, name: &str| {
            if v.is_some() {
                Err(AppError::Config(format!(
                    "kernel kind '{}' does not take key '{name}'",
                    self.kind
                )))
            } else {
                Ok(())
            }
        };
        match self.kind.as_str() {
            "zero" => {
                forbid(self.alpha, "alpha")?;
                forbid(self.beta, "beta")?;
                forbid(self.gamma, "gamma")?;
                Ok(KernelFn::Zero)
            }
            "exponential" => {
                forbid(self.gamma, "gamma")?;
                Ok(KernelFn::exponential(need(self.alpha, "alpha")?, need(self.beta, "beta")?))
            }
            "power_law" => {
                forbid(self.beta, "beta")?;
                Ok(KernelFn::power_law(need(self.alpha, "alpha")?, need(self.gamma, "gamma")?))
            }
            other => Err(AppError::Config(format!(
                "unknown kernel kind '{other}'; expected zero, exponential or power_law"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitParams {
    pub entries: Vec<ExplicitEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitEntry {
    /// Signed component indices (row excited by column).
    pub target: usize,
    pub source: usize,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

/// The three-strike single-maturity excitation pattern with power-law decay:
/// per-strike diagonal weights, nearest-neighbour cross weights, and no
/// direct coupling between the outer strikes. Sign components share entries.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThreeStrikeParams {
    pub alpha_itm: f64,
    pub alpha_atm: f64,
    pub alpha_otm: f64,
    pub alpha_itm_atm: f64,
    pub alpha_otm_atm: f64,
    pub gamma_diag: f64,
    pub gamma_cross: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoArbParams {
    /// "three_point" or "five_point".
    pub mode: String,
    pub profile: KernelEntryConfig,
    pub atm_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub col_weights: Option<Vec<f64>>,
    pub beta_b: f64,
    pub eta: f64,
    pub beta_wing: f64,
    pub beta_phi: f64,
    pub beta_mu: f64,
    pub mu0: f64,
    pub delta_atm: f64,
    pub beta_rr_25: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparableParams {
    pub z: Vec<f64>,
    pub varphi: KernelEntryConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemiSeparableParams {
    pub factors: Vec<SemiSeparableFactor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemiSeparableFactor {
    pub z: Vec<f64>,
    pub varphi: KernelEntryConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    /// One rate per signed component, or a single broadcast value.
    pub mu: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetasConfig {
    pub beta_mu_plus: f64,
    pub beta_mu_minus: f64,
    pub beta_phi_plus: f64,
    pub beta_phi_minus: f64,
    pub beta_wing: f64,
    pub beta_b: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_btilde: Option<f64>,
    pub beta_rr_25: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_rr_10: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_ss: Option<f64>,
}

impl BetasConfig {
    pub fn to_betas(&self) -> NoArbBetas {
        NoArbBetas {
            beta_mu_plus: self.beta_mu_plus,
            beta_mu_minus: self.beta_mu_minus,
            beta_phi_plus: self.beta_phi_plus,
            beta_phi_minus: self.beta_phi_minus,
            beta_wing: self.beta_wing,
            beta_b: self.beta_b,
            beta_btilde: self.beta_btilde,
            beta_rr_25: self.beta_rr_25,
            beta_rr_10: self.beta_rr_10,
            beta_ss: self.beta_ss,
        }
    }
}

fn default_steps() -> usize {
    200
}
fn default_n_seeds() -> usize {
    1
}
fn default_alpha() -> f64 {
    0.6
}
fn default_t_sequence() -> Vec<f64> {
    vec![64.0, 256.0, 1024.0]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    /// In `time_unit`.
    pub horizon: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_n_seeds")]
    pub n_seeds: usize,
    #[serde(default)]
    pub seed0: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_t_sequence")]
    pub t_sequence: Vec<f64>,
}

fn default_xi_scale() -> f64 {
    5e-4
}
fn default_output_steps() -> usize {
    100
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BacktestConfig {
    /// Stand-alone request rates per point (or one broadcast value), in
    /// events per `time_unit`.
    pub lambda_scale: Vec<f64>,
    pub alpha_fill: f64,
    pub beta_fill: f64,
    pub vega: Vec<f64>,
    pub strategy: String,
    #[serde(default)]
    pub strategy_params: Vec<f64>,
    /// Temporary impact per unit inventory as a fraction of the base price.
    #[serde(default = "default_xi_scale")]
    pub xi_scale: f64,
    /// Base option prices per point (or one broadcast value).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c0: Option<Vec<f64>>,
    #[serde(default)]
    pub feedback: bool,
    #[serde(default = "default_output_steps")]
    pub output_steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingConfig {
    pub factors: Vec<FactorConfig>,
    /// Macroscopic horizon of the limit dynamics.
    pub horizon: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorConfig {
    /// Orthonormal loading vector over grid points.
    pub vector: Vec<f64>,
    pub c: f64,
    pub theta: f64,
    pub lambda_volvol: f64,
    pub alpha: f64,
    #[serde(default)]
    pub v0: f64,
    #[serde(default)]
    pub rho: f64,
}

impl FactorConfig {
    pub fn to_params(&self) -> surface_hawkes::scaling::RoughFactorParams {
        surface_hawkes::scaling::RoughFactorParams {
            c: self.c,
            theta: self.theta,
            lambda_volvol: self.lambda_volvol,
            alpha: self.alpha,
            v0: self.v0,
            rho: self.rho,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
}

impl ExperimentConfig {
    pub fn from_path(path: &std::path::Path) -> AppResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            AppError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        toml::from_str(&text)
            .map_err(|e| AppError::Config(format!("config {}: {e}", path.display())))
    }
}

fn parse_label(s: &str) -> AppResult<StrikeLabel> {
    match s {
        "10dp" => Ok(StrikeLabel::DeltaPut10),
        "25dp" => Ok(StrikeLabel::DeltaPut25),
        "atm" => Ok(StrikeLabel::Atm),
        "25dc" => Ok(StrikeLabel::DeltaCall25),
        "10dc" => Ok(StrikeLabel::DeltaCall10),
        other => Err(AppError::Config(format!(
            "unknown strike label '{other}'; expected 10dp, 25dp, atm, 25dc or 10dc"
        ))),
    }
}

pub fn broadcast(values: &[f64], n: usize, what: &str) -> AppResult<Vec<f64>> {
    if values.len() == n {
        Ok(values.to_vec())
    } else if values.len() == 1 {
        Ok(vec![values[0]; n])
    } else {
        Err(AppError::Config(format!(
            "{what} needs 1 or {n} values, got {}",
            values.len()
        )))
    }
}

pub fn build_grid(cfg: &ExperimentConfig) -> AppResult<SurfaceGrid> {
    let g = &cfg.grid;
    let maturities_years: Vec<f64> =
        g.maturities.iter().map(|&m| m * g.maturity_unit.in_years()).collect();
    let (labels, moneyness): (Vec<StrikeLabel>, Option<Vec<f64>>) = match (&g.labels, &g.moneyness)
    {
        (Some(ls), money) => {
            let parsed = ls.iter().map(|s| parse_label(s)).collect::<AppResult<Vec<_>>>()?;
            (parsed, money.clone())
        }
        (None, Some(ks)) => (ks.iter().map(|&k| StrikeLabel::Moneyness(k)).collect(), Some(ks.clone())),
        (None, None) => {
            return Err(AppError::Config(
                "grid needs 'labels' and/or 'moneyness'".into(),
            ))
        }
    };
    let n_points = labels.len() * maturities_years.len();
    if n_points == 0 {
        return Err(AppError::Config("grid must have at least one point".into()));
    }
    let sigma0 = broadcast(&g.sigma0, n_points, "grid.sigma0")?;
    match moneyness {
        Some(ks) => SurfaceGrid::with_moneyness(labels, ks, maturities_years, g.tick, sigma0),
        None => SurfaceGrid::new(labels, maturities_years, g.tick, sigma0),
    }
    .map_err(config_err)
}

/// Resolved model: kernel, baseline, and betas when the config provides them
/// (either from the arbitrage-free pipeline or an explicit `[betas]` table).
pub struct ResolvedModel {
    pub kernel: KernelMatrix,
    pub baseline: Baseline,
    pub betas: Option<NoArbBetas>,
    pub mode: SurfaceMode,
}

/// Duplicate a point-level kernel matrix into the signed component layout
/// (all four sign combinations share the entry).
fn expand_signed(point_level: &KernelMatrix) -> KernelMatrix {
    KernelMatrix::from_fn(2 * point_level.dim(), |i, j| {
        point_level.entry(i / 2, j / 2).clone()
    })
}

pub fn resolve_model(cfg: &ExperimentConfig, grid: &SurfaceGrid) -> AppResult<ResolvedModel> {
    let d = grid.dim();
    let explicit_baseline = |cfg: &ExperimentConfig| -> AppResult<Baseline> {
        let b = cfg.baseline.as_ref().ok_or_else(|| {
            AppError::Config("this kernel family requires a [baseline] section".into())
        })?;
        Baseline::new(broadcast(&b.mu, d, "baseline.mu")?).map_err(config_err)
    };
    let default_mode = if grid.strike_index(StrikeLabel::DeltaPut10).is_some()
        && grid.strike_index(StrikeLabel::DeltaCall10).is_some()
    {
        SurfaceMode::FivePoint
    } else {
        SurfaceMode::ThreePoint
    };
    match &cfg.kernel {
        KernelConfig::Zero => Ok(ResolvedModel {
            kernel: KernelMatrix::zero(d),
            baseline: explicit_baseline(cfg)?,
            betas: cfg.betas.as_ref().map(|b| b.to_betas()),
            mode: default_mode,
        }),
        KernelConfig::Explicit(p) => {
            let mut kernel = KernelMatrix::zero(d);
            for e in &p.entries {
                if e.target >= d || e.source >= d {
                    return Err(AppError::Config(format!(
                        "explicit kernel entry ({}, {}) out of range for dimension {d}",
                        e.target, e.source
                    )));
                }
                let entry = KernelEntryConfig {
                    kind: e.kind.clone(),
                    alpha: e.alpha,
                    beta: e.beta,
                    gamma: e.gamma,
                }
                .build()?;
                kernel.set_entry(e.target, e.source, entry);
            }
            Ok(ResolvedModel {
                kernel,
                baseline: explicit_baseline(cfg)?,
                betas: cfg.betas.as_ref().map(|b| b.to_betas()),
                mode: default_mode,
            })
        }
        KernelConfig::ThreeStrike(p) => {
            if grid.n_strikes() != 3 || grid.n_maturities() != 1 {
                return Err(AppError::Config(
                    "three_strike needs exactly 3 strikes and 1 maturity".into(),
                ));
            }
            let pl = |a: f64, g: f64| KernelFn::power_law(a, g);
            let strike = [
                [pl(p.alpha_itm, p.gamma_diag), pl(p.alpha_itm_atm, p.gamma_cross), KernelFn::Zero],
                [
                    pl(p.alpha_itm_atm, p.gamma_cross),
                    pl(p.alpha_atm, p.gamma_diag),
                    pl(p.alpha_otm_atm, p.gamma_cross),
                ],
                [KernelFn::Zero, pl(p.alpha_otm_atm, p.gamma_cross), pl(p.alpha_otm, p.gamma_diag)],
            ];
            let point_level = KernelMatrix::from_fn(3, |i, j| strike[i][j].clone());
            Ok(ResolvedModel {
                kernel: expand_signed(&point_level),
                baseline: explicit_baseline(cfg)?,
                betas: cfg.betas.as_ref().map(|b| b.to_betas()),
                mode: default_mode,
            })
        }
        KernelConfig::NoArb(p) => {
            if cfg.baseline.is_some() || cfg.betas.is_some() {
                return Err(AppError::Config(
                    "the no_arb pipeline derives [baseline] and [betas]; remove those sections"
                        .into(),
                ));
            }
            let params = PipelineParams {
                profile: p.profile.build()?,
                atm_scale: p.atm_scale,
                col_weights: p.col_weights.clone(),
                beta_b: p.beta_b,
                eta: p.eta,
                beta_wing: p.beta_wing,
                beta_phi: p.beta_phi,
                beta_mu: p.beta_mu,
                mu0: p.mu0,
                delta_atm: p.delta_atm,
                beta_rr_25: p.beta_rr_25,
            };
            let (kernel, baseline, betas, mode) = match p.mode.as_str() {
                "three_point" => {
                    let (k, b, betas) = build_three_point(grid, &params).map_err(config_err)?;
                    (k, b, betas, SurfaceMode::ThreePoint)
                }
                "five_point" => {
                    let (k, b, betas) = build_five_point(grid, &params).map_err(config_err)?;
                    (k, b, betas, SurfaceMode::FivePoint)
                }
                other => {
                    return Err(AppError::Config(format!(
                        "no_arb mode must be three_point or five_point, got '{other}'"
                    )))
                }
            };
            Ok(ResolvedModel { kernel, baseline, betas: Some(betas), mode })
        }
        KernelConfig::Separable(p) => {
            let spec = SeparableSpec {
                z: p.z.clone(),
                varphi: p.varphi.build()?,
                maturities: grid.maturities.clone(),
            };
            if p.z.len() != grid.n_strikes() {
                return Err(AppError::Config(format!(
                    "separable z needs one weight per strike ({})",
                    grid.n_strikes()
                )));
            }
            let point_level = assemble_separable(&spec).map_err(config_err)?;
            Ok(ResolvedModel {
                kernel: expand_signed(&point_level),
                baseline: explicit_baseline(cfg)?,
                betas: cfg.betas.as_ref().map(|b| b.to_betas()),
                mode: default_mode,
            })
        }
        KernelConfig::SemiSeparable(p) => {
            let factors = p
                .factors
                .iter()
                .map(|f| Ok((f.z.clone(), f.varphi.build()?)))
                .collect::<AppResult<Vec<_>>>()?;
            if factors.iter().any(|(z, _)| z.len() != grid.n_strikes()) {
                return Err(AppError::Config(format!(
                    "semi-separable factors need one weight per strike ({})",
                    grid.n_strikes()
                )));
            }
            let spec = SemiSeparableSpec { factors, maturities: grid.maturities.clone() };
            let point_level = assemble_semi_separable(&spec).map_err(config_err)?;
            Ok(ResolvedModel {
                kernel: expand_signed(&point_level),
                baseline: explicit_baseline(cfg)?,
                betas: cfg.betas.as_ref().map(|b| b.to_betas()),
                mode: default_mode,
            })
        }
    }
}

pub fn build_fill_model(
    cfg: &BacktestConfig,
    n_points: usize,
) -> AppResult<surface_hawkes::backtest::FillModel> {
    let model = surface_hawkes::backtest::FillModel {
        lambda_scale: broadcast(&cfg.lambda_scale, n_points, "backtest.lambda_scale")?,
        alpha_fill: cfg.alpha_fill,
        beta_fill: cfg.beta_fill,
        vega: broadcast(&cfg.vega, n_points, "backtest.vega")?,
    };
    model.validate(n_points).map_err(config_err)?;
    Ok(model)
}
