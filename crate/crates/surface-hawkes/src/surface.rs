//! Microscopic volatility surface: grids, paths built from event logs,
//! arbitrage-free kernel constructors and shape diagnostics.
//!
//! Component layout: grid points are maturity-major (`point = m * n_strikes +
//! strike`), and each point carries an up and a down component
//! (`component = 2 * point + sign`, `0 = up`, `1 = down`).
//!
//! The no-arbitrage constraints are imposed by scaling whole kernel rows and
//! baseline entries; membership checks compare time-integrated kernel masses
//! and baselines at relative tolerance `1e-9`. Since every constructor acts by
//! multiplicative row scaling, equality at the mass level coincides with
//! equality of the kernel functions themselves for constructor-built models.

use crate::error::{Error, Result};
use crate::hawkes::{
    stationary_intensity, Baseline, ComponentIndex, EventLog, KernelMatrix, Sign, StrikeLabel,
};
use crate::kernels::KernelFn;

/// Relative tolerance of the no-arbitrage membership checks.
pub const NOARB_REL_TOL: f64 = 1e-9;

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-12)
}

fn default_moneyness(label: StrikeLabel) -> f64 {
    match label {
        StrikeLabel::DeltaPut10 => 0.90,
        StrikeLabel::DeltaPut25 => 0.95,
        StrikeLabel::Atm => 1.00,
        StrikeLabel::DeltaCall25 => 1.05,
        StrikeLabel::DeltaCall10 => 1.10,
        StrikeLabel::Moneyness(k) => k,
    }
}

/// Strike/maturity grid with tick size and initial surface values.
#[derive(Debug, Clone)]
pub struct SurfaceGrid {
    pub strikes: Vec<StrikeLabel>,
    /// Moneyness per strike, same order as `strikes`, strictly increasing.
    pub moneyness: Vec<f64>,
    /// Year-fractions, strictly increasing.
    pub maturities: Vec<f64>,
    /// Volatility points per jump.
    pub tick: f64,
    /// Initial surface, one value >= 0 per grid point (maturity-major).
    pub sigma0: Vec<f64>,
}

impl SurfaceGrid {
    /// Build a grid with the default delta-to-moneyness table
    /// (10dP 0.90, 25dP 0.95, ATM 1.00, 25dC 1.05, 10dC 1.10).
    pub fn new(
        strikes: Vec<StrikeLabel>,
        maturities: Vec<f64>,
        tick: f64,
        sigma0: Vec<f64>,
    ) -> Result<Self> {
        let moneyness = strikes.iter().map(|&l| default_moneyness(l)).collect();
        Self::with_moneyness(strikes, moneyness, maturities, tick, sigma0)
    }

    /// Build a grid with a caller-supplied delta-to-moneyness map.
    pub fn with_moneyness(
        strikes: Vec<StrikeLabel>,
        moneyness: Vec<f64>,
        maturities: Vec<f64>,
        tick: f64,
        sigma0: Vec<f64>,
    ) -> Result<Self> {
        if strikes.is_empty() {
            return Err(Error::Validation("grid needs at least one strike".into()));
        }
        if moneyness.len() != strikes.len() {
            return Err(Error::DimensionMismatch(
                "moneyness must have one value per strike".into(),
            ));
        }
        if moneyness.iter().any(|&k| k <= 0.0) {
            return Err(Error::Validation("moneyness values must be positive".into()));
        }
        if moneyness.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation(
                "strikes must be ordered left-to-right (moneyness strictly increasing)".into(),
            ));
        }
        if maturities.is_empty() || maturities.iter().any(|&t| t <= 0.0) {
            return Err(Error::Validation("maturities must be strictly positive".into()));
        }
        if maturities.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation("maturities must be strictly increasing".into()));
        }
        if tick <= 0.0 {
            return Err(Error::Validation(format!("tick must be positive, got {tick}")));
        }
        let grid = SurfaceGrid { strikes, moneyness, maturities, tick, sigma0 };
        if grid.sigma0.len() != grid.n_points() {
            return Err(Error::DimensionMismatch(format!(
                "sigma0 needs {} values (one per grid point), got {}",
                grid.n_points(),
                grid.sigma0.len()
            )));
        }
        if grid.sigma0.iter().any(|&s| s < 0.0) {
            return Err(Error::Validation("initial surface values must be >= 0".into()));
        }
        Ok(grid)
    }

    pub fn n_strikes(&self) -> usize {
        self.strikes.len()
    }

    pub fn n_maturities(&self) -> usize {
        self.maturities.len()
    }

    pub fn n_points(&self) -> usize {
        self.n_strikes() * self.n_maturities()
    }

    /// Hawkes dimension: two signed components per grid point.
    pub fn dim(&self) -> usize {
        2 * self.n_points()
    }

    pub fn point(&self, strike: usize, maturity: usize) -> usize {
        maturity * self.n_strikes() + strike
    }

    pub fn component(&self, strike: usize, maturity: usize, sign: Sign) -> usize {
        2 * self.point(strike, maturity) + if sign == Sign::Plus { 0 } else { 1 }
    }

    pub fn component_info(&self, component: usize) -> Result<ComponentIndex> {
        if component >= self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "component {component} out of range for dimension {}",
                self.dim()
            )));
        }
        let point = component / 2;
        let sign = if component % 2 == 0 { Sign::Plus } else { Sign::Minus };
        let m = point / self.n_strikes();
        let k = point % self.n_strikes();
        ComponentIndex::new(self.strikes[k], self.maturities[m], sign)
    }

    pub fn strike_index(&self, label: StrikeLabel) -> Option<usize> {
        self.strikes.iter().position(|&l| l == label)
    }

    fn require_strike(&self, label: StrikeLabel) -> Result<usize> {
        self.strike_index(label).ok_or_else(|| {
            Error::Validation(format!("grid is missing the required strike {label:?}"))
        })
    }
}

/// Piecewise-constant surface path driven by up/down events.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroSurfacePath {
    /// Change times, starting at 0.
    pub times: Vec<f64>,
    /// `values[i][p]` = surface value of point `p` on `[times[i], times[i+1])`.
    pub values: Vec<Vec<f64>>,
    pub horizon: f64,
}

impl MicroSurfacePath {
    /// Surface value of point `p` at time `t` (right-continuous).
    pub fn value_at(&self, p: usize, t: f64) -> f64 {
        let idx = self.times.partition_point(|&s| s <= t);
        self.values[idx.saturating_sub(1).min(self.values.len() - 1)][p]
    }

    pub fn terminal(&self, p: usize) -> f64 {
        self.values.last().unwrap()[p]
    }

    pub fn n_points(&self) -> usize {
        self.values[0].len()
    }
}

/// Build the surface path `sigma_t = sigma_0 + tick * (N_t^+ - N_t^-)`.
/// The raw path is never clamped; it may go negative.
pub fn surface_from_events(grid: &SurfaceGrid, log: &EventLog) -> Result<MicroSurfacePath> {
    if log.dim() != grid.dim() {
        return Err(Error::DimensionMismatch(format!(
            "event log has {} components, grid requires {}",
            log.dim(),
            grid.dim()
        )));
    }
    let merged = log.merged();
    let mut times = Vec::with_capacity(merged.len() + 1);
    let mut values = Vec::with_capacity(merged.len() + 1);
    times.push(0.0);
    values.push(grid.sigma0.clone());
    let mut current = grid.sigma0.clone();
    for (t, c) in merged {
        let point = c / 2;
        let delta = if c % 2 == 0 { grid.tick } else { -grid.tick };
        current[point] += delta;
        times.push(t);
        values.push(current.clone());
    }
    Ok(MicroSurfacePath { times, values, horizon: log.horizon })
}

/// The beta coefficients of the arbitrage-free parametrization. The 10-delta
/// coefficients are absent on three-point grids.
#[derive(Debug, Clone, PartialEq)]
pub struct NoArbBetas {
    pub beta_mu_plus: f64,
    pub beta_mu_minus: f64,
    pub beta_phi_plus: f64,
    pub beta_phi_minus: f64,
    pub beta_wing: f64,
    pub beta_b: f64,
    pub beta_btilde: Option<f64>,
    pub beta_rr_25: f64,
    pub beta_rr_10: Option<f64>,
    pub beta_ss: Option<f64>,
}

impl NoArbBetas {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta_mu_plus", self.beta_mu_plus),
            ("beta_mu_minus", self.beta_mu_minus),
            ("beta_phi_plus", self.beta_phi_plus),
            ("beta_phi_minus", self.beta_phi_minus),
        ] {
            if v < 1.0 {
                return Err(Error::Domain(format!("{name} must be >= 1, got {v}")));
            }
        }
        if !(self.beta_wing > 0.0 && self.beta_wing < 1.0) {
            return Err(Error::Domain(format!(
                "beta_wing must lie in (0, 1), got {}",
                self.beta_wing
            )));
        }
        if self.beta_b < 1.0 {
            return Err(Error::Domain(format!("beta_b must be >= 1, got {}", self.beta_b)));
        }
        if let Some(bt) = self.beta_btilde {
            if bt <= 1.0 {
                return Err(Error::Domain(format!("beta_btilde must be > 1, got {bt}")));
            }
        }
        if self.beta_rr_25 <= 0.0 {
            return Err(Error::Domain("beta_rr_25 must be positive".into()));
        }
        if matches!(self.beta_rr_10, Some(b) if b <= 0.0) {
            return Err(Error::Domain("beta_rr_10 must be positive".into()));
        }
        if matches!(self.beta_ss, Some(b) if b <= 0.0) {
            return Err(Error::Domain("beta_ss must be positive".into()));
        }
        Ok(())
    }
}

/// Risk-reversal / butterfly measures of one maturity slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceShape {
    pub rr_25: f64,
    pub bf_25: f64,
    /// Present only when the slice carries 10-delta strikes.
    pub rr_10: Option<f64>,
    pub bf_10: Option<f64>,
}

/// Scale a kernel row and baseline entry: the shared mechanism of the calendar
/// and wing extensions.
fn scale_row(row: &[KernelFn], mu: f64, factor: f64) -> (Vec<KernelFn>, f64) {
    (row.iter().map(|k| k.scaled(factor)).collect(), mu * factor)
}

/// Calendar extension: derive the kernel row and baseline of `(k, tau_i)` from
/// those of `(k, tau_j)` by the factor `beta * sqrt(tau_j / tau_i)`.
pub fn extend_calendar(
    base_row: &[KernelFn],
    base_mu: f64,
    tau_j: f64,
    tau_i: f64,
    beta_phi: f64,
    beta_mu: f64,
) -> Result<(Vec<KernelFn>, f64)> {
    if tau_j <= 0.0 || tau_i < tau_j {
        return Err(Error::Domain(format!(
            "calendar extension requires tau_i >= tau_j > 0, got tau_j = {tau_j}, tau_i = {tau_i}"
        )));
    }
    if beta_phi < 1.0 || beta_mu < 1.0 {
        return Err(Error::Domain(format!(
            "calendar betas must be >= 1, got beta_phi = {beta_phi}, beta_mu = {beta_mu}"
        )));
    }
    let scale = (tau_j / tau_i).sqrt();
    let (row, _) = scale_row(base_row, 0.0, beta_phi * scale);
    Ok((row, beta_mu * scale * base_mu))
}

/// Wing extension: derive the row and baseline of a larger strike `k_i` from
/// `k_j` by the factor `beta_wing * sqrt(k_i / k_j)`.
pub fn extend_wing(
    base_row: &[KernelFn],
    base_mu: f64,
    k_j: f64,
    k_i: f64,
    beta_wing: f64,
) -> Result<(Vec<KernelFn>, f64)> {
    if !(beta_wing > 0.0 && beta_wing < 1.0) {
        return Err(Error::Domain(format!("beta_wing must lie in (0, 1), got {beta_wing}")));
    }
    if k_j <= 0.0 || k_i <= 0.0 {
        return Err(Error::Domain("wing strikes must be positive".into()));
    }
    let factor = beta_wing * (k_i / k_j).sqrt();
    let (row, mu) = scale_row(base_row, base_mu, factor);
    Ok((row, mu))
}

fn impose_convexity(
    kernel: &KernelMatrix,
    grid: &SurfaceGrid,
    beta: f64,
    wing_left: StrikeLabel,
    wing_right: StrikeLabel,
) -> Result<KernelMatrix> {
    if kernel.dim() != grid.dim() {
        return Err(Error::DimensionMismatch(format!(
            "kernel dimension {} vs grid dimension {}",
            kernel.dim(),
            grid.dim()
        )));
    }
    let k_left = grid.require_strike(wing_left)?;
    let k_right = grid.require_strike(wing_right)?;
    let k_atm = grid.require_strike(StrikeLabel::Atm)?;
    let mut out = kernel.clone();
    for m in 0..grid.n_maturities() {
        for sign in [Sign::Plus, Sign::Minus] {
            let row_l = grid.component(k_left, m, sign);
            let row_r = grid.component(k_right, m, sign);
            let row_a = grid.component(k_atm, m, sign);
            for c in 0..kernel.dim() {
                let e_l = kernel.entry(row_l, c);
                let e_r = kernel.entry(row_r, c);
                let e_a = kernel.entry(row_a, c);
                let m_l = e_l.mass()?;
                let m_r = e_r.mass()?;
                let m_a = e_a.mass()?;
                let mean = (m_l + m_r) / 2.0;
                if m_a == 0.0 {
                    if mean == 0.0 {
                        continue;
                    }
                    return Err(Error::Degenerate(format!(
                        "ATM kernel entry (row {row_a}, col {c}) is zero but the wing \
                         entries are not; the convexity constraint cannot be met"
                    )));
                }
                let target = beta * m_a;
                if mean == 0.0 {
                    // both wings empty: inherit the ATM shape scaled to target
                    out.set_entry(row_l, c, e_a.scaled(beta));
                    out.set_entry(row_r, c, e_a.scaled(beta));
                } else {
                    let scale = target / mean;
                    out.set_entry(row_l, c, e_l.scaled(scale));
                    out.set_entry(row_r, c, e_r.scaled(scale));
                }
            }
        }
    }
    Ok(out)
}

/// Rescale the 25-delta wing rows so that for every source column the mean of
/// the two wing entries equals `beta_b` times the ATM entry.
pub fn impose_atm_convexity(
    kernel: &KernelMatrix,
    grid: &SurfaceGrid,
    beta_b: f64,
) -> Result<KernelMatrix> {
    if beta_b < 1.0 {
        return Err(Error::Domain(format!("beta_b must be >= 1, got {beta_b}")));
    }
    impose_convexity(kernel, grid, beta_b, StrikeLabel::DeltaPut25, StrikeLabel::DeltaCall25)
}

/// Rescale the 10-delta wing rows so their per-column mean equals
/// `beta_btilde` times the ATM entry; `beta_btilde` must exceed 1.
pub fn impose_10d_convexity(
    kernel: &KernelMatrix,
    grid: &SurfaceGrid,
    beta_btilde: f64,
) -> Result<KernelMatrix> {
    if beta_btilde <= 1.0 {
        return Err(Error::Domain(format!("beta_btilde must be > 1, got {beta_btilde}")));
    }
    impose_convexity(kernel, grid, beta_btilde, StrikeLabel::DeltaPut10, StrikeLabel::DeltaCall10)
}

/// Which parametrization the membership check targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceMode {
    ThreePoint,
    FivePoint,
}

/// One violated constraint, serializable to the report CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub condition: String,
    /// Maturity of the violating slice.
    pub slice: f64,
    /// Moneyness of the violating strike.
    pub strike: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
}

fn push_violation(
    out: &mut Vec<Violation>,
    condition: &str,
    slice: f64,
    strike: f64,
    lhs: f64,
    rhs: f64,
) {
    if !rel_close(lhs, rhs, NOARB_REL_TOL) {
        out.push(Violation {
            condition: condition.to_string(),
            slice,
            strike,
            lhs,
            rhs,
            margin: lhs - rhs,
        });
    }
}

/// Membership check for the arbitrage-free kernel families: the calendar,
/// wing and convexity constraints on integrated kernel masses and baselines,
/// each at relative tolerance `1e-9`. Returns `(pass, violations)`.
pub fn is_arbitrage_free(
    kernel: &KernelMatrix,
    baseline: &Baseline,
    grid: &SurfaceGrid,
    betas: &NoArbBetas,
    mode: SurfaceMode,
) -> Result<(bool, Vec<Violation>)> {
    betas.validate()?;
    if kernel.dim() != grid.dim() || baseline.dim() != grid.dim() {
        return Err(Error::DimensionMismatch(format!(
            "kernel/baseline dimensions ({}, {}) vs grid dimension {}",
            kernel.dim(),
            baseline.dim(),
            grid.dim()
        )));
    }
    let mut required = vec![StrikeLabel::DeltaPut25, StrikeLabel::Atm, StrikeLabel::DeltaCall25];
    if mode == SurfaceMode::FivePoint {
        required.push(StrikeLabel::DeltaPut10);
        required.push(StrikeLabel::DeltaCall10);
    }
    for label in &required {
        grid.require_strike(*label)?;
    }
    let phi = kernel.branching_matrix()?;
    let d = kernel.dim();
    let mut violations = Vec::new();

    // calendar condition: rows and baselines of longer maturities are scaled
    // copies of the first-maturity rows
    for ki in 0..grid.n_strikes() {
        for m in 1..grid.n_maturities() {
            let scale = (grid.maturities[m - 1] / grid.maturities[m]).sqrt();
            for sign in [Sign::Plus, Sign::Minus] {
                let (beta_phi, beta_mu) = match sign {
                    Sign::Plus => (betas.beta_phi_plus, betas.beta_mu_plus),
                    Sign::Minus => (betas.beta_phi_minus, betas.beta_mu_minus),
                };
                let row_hi = grid.component(ki, m, sign);
                let row_lo = grid.component(ki, m - 1, sign);
                for c in 0..d {
                    push_violation(
                        &mut violations,
                        "calendar_kernel",
                        grid.maturities[m],
                        grid.moneyness[ki],
                        phi[(row_hi, c)],
                        beta_phi * scale * phi[(row_lo, c)],
                    );
                }
                push_violation(
                    &mut violations,
                    "calendar_baseline",
                    grid.maturities[m],
                    grid.moneyness[ki],
                    baseline.0[row_hi],
                    beta_mu * scale * baseline.0[row_lo],
                );
            }
        }
    }

    // wing condition: 10-delta rows are scaled copies of the adjacent 25-delta
    // rows; only checkable on five-point grids
    if mode == SurfaceMode::FivePoint {
        let pairs = [
            (StrikeLabel::DeltaCall25, StrikeLabel::DeltaCall10),
            (StrikeLabel::DeltaPut25, StrikeLabel::DeltaPut10),
        ];
        for (from, to) in pairs {
            let kj = grid.require_strike(from)?;
            let ki = grid.require_strike(to)?;
            let factor = betas.beta_wing * (grid.moneyness[ki] / grid.moneyness[kj]).sqrt();
            for m in 0..grid.n_maturities() {
                for sign in [Sign::Plus, Sign::Minus] {
                    let row_i = grid.component(ki, m, sign);
                    let row_j = grid.component(kj, m, sign);
                    for c in 0..d {
                        push_violation(
                            &mut violations,
                            "wing_kernel",
                            grid.maturities[m],
                            grid.moneyness[ki],
                            phi[(row_i, c)],
                            factor * phi[(row_j, c)],
                        );
                    }
                    push_violation(
                        &mut violations,
                        "wing_baseline",
                        grid.maturities[m],
                        grid.moneyness[ki],
                        baseline.0[row_i],
                        factor * baseline.0[row_j],
                    );
                }
            }
        }
    }

    // convexity conditions: per-column wing means against the ATM entry
    let mut convexity_checks = vec![(
        "convexity_25",
        StrikeLabel::DeltaPut25,
        StrikeLabel::DeltaCall25,
        betas.beta_b,
    )];
    if mode == SurfaceMode::FivePoint {
        let bt = betas.beta_btilde.ok_or_else(|| {
            Error::Validation("five-point check requires beta_btilde".into())
        })?;
        convexity_checks.push((
            "convexity_10",
            StrikeLabel::DeltaPut10,
            StrikeLabel::DeltaCall10,
            bt,
        ));
    }
    let k_atm = grid.require_strike(StrikeLabel::Atm)?;
    for (name, left, right, beta) in convexity_checks {
        let kl = grid.require_strike(left)?;
        let kr = grid.require_strike(right)?;
        for m in 0..grid.n_maturities() {
            for sign in [Sign::Plus, Sign::Minus] {
                let row_l = grid.component(kl, m, sign);
                let row_r = grid.component(kr, m, sign);
                let row_a = grid.component(k_atm, m, sign);
                for c in 0..d {
                    push_violation(
                        &mut violations,
                        name,
                        grid.maturities[m],
                        grid.moneyness[kr],
                        (phi[(row_l, c)] + phi[(row_r, c)]) / 2.0,
                        beta * phi[(row_a, c)],
                    );
                }
            }
        }
    }

    Ok((violations.is_empty(), violations))
}

/// Slice shape measures from per-strike volatilities of one maturity.
pub fn slice_shape(grid: &SurfaceGrid, sigma_slice: &[f64]) -> Result<SliceShape> {
    if sigma_slice.len() != grid.n_strikes() {
        return Err(Error::DimensionMismatch(format!(
            "slice has {} values for {} strikes",
            sigma_slice.len(),
            grid.n_strikes()
        )));
    }
    let v = |label| grid.require_strike(label).map(|i| sigma_slice[i]);
    let p25 = v(StrikeLabel::DeltaPut25)?;
    let atm = v(StrikeLabel::Atm)?;
    let c25 = v(StrikeLabel::DeltaCall25)?;
    let tens = match (
        grid.strike_index(StrikeLabel::DeltaPut10),
        grid.strike_index(StrikeLabel::DeltaCall10),
    ) {
        (Some(ip), Some(ic)) => Some((sigma_slice[ip], sigma_slice[ic])),
        _ => None,
    };
    Ok(SliceShape {
        rr_25: c25 - p25,
        bf_25: (c25 + p25) / 2.0 - atm,
        rr_10: tens.map(|(p10, c10)| c10 - p10),
        bf_10: tens.map(|(p10, c10)| (c10 + p10) / 2.0 - atm),
    })
}

/// Empirical calendar-spread check over a path ensemble.
#[derive(Debug, Clone)]
pub struct CalendarReport {
    pub pass: bool,
    /// Most negative `mean + 2 SE` of adjacent total-variance differences.
    pub worst_margin: f64,
    pub rows: Vec<Violation>,
}

/// Verify that the empirical mean total implied variance `sigma^2 * tau` is
/// non-decreasing in maturity, at every strike and diagnostic time, within two
/// Monte-Carlo standard errors.
pub fn check_calendar_empirical(
    grid: &SurfaceGrid,
    paths: &[MicroSurfacePath],
) -> Result<CalendarReport> {
    if grid.n_maturities() < 2 {
        return Err(Error::Validation("calendar check needs at least 2 maturities".into()));
    }
    if paths.len() < 100 {
        return Err(Error::InsufficientData(format!(
            "calendar check needs at least 100 paths, got {}",
            paths.len()
        )));
    }
    let horizon = paths[0].horizon;
    let n_times = 10;
    let times: Vec<f64> = (1..=n_times).map(|i| horizon * i as f64 / n_times as f64).collect();
    let mut rows = Vec::new();
    let mut worst = f64::INFINITY;
    let mut pass = true;
    for ki in 0..grid.n_strikes() {
        for m in 1..grid.n_maturities() {
            let p_lo = grid.point(ki, m - 1);
            let p_hi = grid.point(ki, m);
            let tau_lo = grid.maturities[m - 1];
            let tau_hi = grid.maturities[m];
            for &t in &times {
                let diffs: Vec<f64> = paths
                    .iter()
                    .map(|path| {
                        let w_lo = path.value_at(p_lo, t).powi(2) * tau_lo;
                        let w_hi = path.value_at(p_hi, t).powi(2) * tau_hi;
                        w_hi - w_lo
                    })
                    .collect();
                let mean = crate::stats::mean(&diffs);
                let se = crate::stats::standard_error(&diffs);
                let margin = mean + 2.0 * se;
                worst = worst.min(margin);
                if margin < 0.0 {
                    pass = false;
                }
                rows.push(Violation {
                    condition: "calendar_empirical".into(),
                    slice: tau_hi,
                    strike: grid.moneyness[ki],
                    lhs: mean,
                    rhs: 0.0,
                    margin,
                });
            }
        }
    }
    Ok(CalendarReport { pass, worst_margin: worst, rows })
}

/// Classification produced by [`skew_control_check`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SkewClass {
    RightSkewed,
    LeftSkewed,
    Flat,
}

#[derive(Debug, Clone)]
pub struct SkewReport {
    /// Stationary net rates `lambda_bar^+ - lambda_bar^-` per (strike, maturity).
    pub net_rates: Vec<Vec<f64>>,
    pub skew: SkewClass,
    /// `Some(true)` = smile (10-delta risk reversal exceeds 25-delta),
    /// `Some(false)` = skew; `None` on three-point grids.
    pub smile: Option<bool>,
    /// Worst relative mismatch of the beta_rr relations across slices.
    pub worst_rel_error: f64,
    pub holds: bool,
}

/// Verify the stationary skew/smile relations implied by the beta
/// coefficients and classify the surface shape.
pub fn skew_control_check(
    kernel: &KernelMatrix,
    baseline: &Baseline,
    grid: &SurfaceGrid,
    betas: &NoArbBetas,
) -> Result<SkewReport> {
    let lam = stationary_intensity(kernel, baseline)?;
    let k_p25 = grid.require_strike(StrikeLabel::DeltaPut25)?;
    let k_c25 = grid.require_strike(StrikeLabel::DeltaCall25)?;
    let tens = match (
        grid.strike_index(StrikeLabel::DeltaPut10),
        grid.strike_index(StrikeLabel::DeltaCall10),
    ) {
        (Some(p), Some(c)) => Some((p, c)),
        _ => None,
    };
    let net = |ki: usize, m: usize| {
        lam[grid.component(ki, m, Sign::Plus)] - lam[grid.component(ki, m, Sign::Minus)]
    };
    let mut net_rates = Vec::with_capacity(grid.n_strikes());
    for ki in 0..grid.n_strikes() {
        net_rates.push((0..grid.n_maturities()).map(|m| net(ki, m)).collect());
    }

    let mut worst: f64 = 0.0;
    let mut all_right = true;
    let mut all_left = true;
    let mut all_flat = true;
    let mut smile = None;
    for m in 0..grid.n_maturities() {
        let n_p25 = net(k_p25, m);
        let n_c25 = net(k_c25, m);
        let rel = |lhs: f64, rhs: f64| {
            (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12)
        };
        worst = worst.max(rel(n_c25, betas.beta_rr_25 * n_p25));
        let tol = 1e-6;
        if n_c25.abs() > tol || n_p25.abs() > tol {
            all_flat = false;
        }
        if n_c25 <= n_p25 + tol {
            all_right = false;
        }
        if n_c25 >= n_p25 - tol {
            all_left = false;
        }
        if let Some((kp10, kc10)) = tens {
            let n_p10 = net(kp10, m);
            let n_c10 = net(kc10, m);
            if let (Some(b10), Some(bss)) = (betas.beta_rr_10, betas.beta_ss) {
                worst = worst.max(rel(n_c10, b10 * n_p10));
                worst = worst.max(rel(
                    (b10 - 1.0) * n_p10,
                    bss * (betas.beta_rr_25 - 1.0) * n_p25,
                ));
            }
            let rr10_rate = n_c10 - n_p10;
            let rr25_rate = n_c25 - n_p25;
            smile = Some(rr10_rate > rr25_rate);
        }
    }
    let skew = if all_flat {
        SkewClass::Flat
    } else if all_right {
        SkewClass::RightSkewed
    } else if all_left {
        SkewClass::LeftSkewed
    } else {
        SkewClass::Flat
    };
    Ok(SkewReport { net_rates, skew, smile, worst_rel_error: worst, holds: worst <= 1e-6 })
}

/// Butterfly-arbitrage diagnostics of one slice.
#[derive(Debug, Clone)]
pub struct GdReport {
    /// Per-strike `(g, d)`.
    pub points: Vec<(f64, f64)>,
    pub min_g: f64,
    /// Tail proxy at the largest strike: total variance < 2k.
    pub tail_ok: bool,
}

/// Quadratic-fit derivative at `x` from three points; returns `(f', f'')`.
fn quad_derivatives(xs: [f64; 3], fs: [f64; 3], x: f64) -> (f64, f64) {
    let d01 = (fs[1] - fs[0]) / (xs[1] - xs[0]);
    let d12 = (fs[2] - fs[1]) / (xs[2] - xs[1]);
    let d012 = (d12 - d01) / (xs[2] - xs[0]);
    (d01 + d012 * (2.0 * x - xs[0] - xs[1]), 2.0 * d012)
}

/// Butterfly density diagnostics: `d = -k/sqrt(w) + sqrt(w)/2` and the `g`
/// function whose non-negativity characterizes absence of butterfly
/// arbitrage; derivatives by second-order finite differences (one-sided at
/// the boundary strikes). `strikes` are log-moneyness values; `w` is total
/// implied variance, strictly positive.
pub fn g_d_diagnostics(w: &[f64], strikes: &[f64]) -> Result<GdReport> {
    if w.len() != strikes.len() {
        return Err(Error::DimensionMismatch("w and strikes must have equal length".into()));
    }
    let n = w.len();
    if n < 3 {
        return Err(Error::InsufficientData("g/d diagnostics need at least 3 strikes".into()));
    }
    if w.iter().any(|&x| x <= 0.0) {
        return Err(Error::Domain("total implied variance must be positive".into()));
    }
    if strikes.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::Validation("strikes must be strictly increasing".into()));
    }
    let mut points = Vec::with_capacity(n);
    let mut min_g = f64::INFINITY;
    for i in 0..n {
        let s = i.clamp(1, n - 2);
        let xs = [strikes[s - 1], strikes[s], strikes[s + 1]];
        let fs = [w[s - 1], w[s], w[s + 1]];
        let (dw, ddw) = quad_derivatives(xs, fs, strikes[i]);
        let wi = w[i];
        let k = strikes[i];
        let d = -k / wi.sqrt() + wi.sqrt() / 2.0;
        let g = (1.0 - dw / (2.0 * wi)).powi(2) - dw * dw / 4.0 * (1.0 / wi + 0.25) + ddw / 2.0;
        min_g = min_g.min(g);
        points.push((g, d));
    }
    let tail_ok = w[n - 1] < 2.0 * strikes[n - 1];
    Ok(GdReport { points, min_g, tail_ok })
}

/// Inputs of the five-point constructor pipeline.
#[derive(Debug, Clone)]
pub struct PipelineParams {
    /// Shared time profile; scaled per entry, so its own mass sets the
    /// overall excitation level together with `atm_scale`.
    pub profile: KernelFn,
    /// Scale of the ATM row entries.
    pub atm_scale: f64,
    /// Per-point column weights (same weight for + and - source columns);
    /// `None` = uniform.
    pub col_weights: Option<Vec<f64>>,
    pub beta_b: f64,
    /// Asymmetry of the 25-delta wing split: call wing `beta_b*(1+eta)`,
    /// put wing `beta_b*(1-eta)`, `eta` in `[0, 1)`.
    pub eta: f64,
    pub beta_wing: f64,
    pub beta_phi: f64,
    pub beta_mu: f64,
    /// Gross baseline level of the first-maturity ATM components.
    pub mu0: f64,
    /// Net baseline `mu^+ - mu^-` of the ATM components (drives drift).
    pub delta_atm: f64,
    pub beta_rr_25: f64,
}

/// Build an arbitrage-free five-point model: ATM rows from the profile,
/// 25-delta wings by the convexity split, 10-delta rows by the wing
/// extension, longer maturities by the calendar extension. Returns the
/// kernel, baseline and the fully resolved betas (including the implied
/// `beta_btilde`, `beta_rr_10` and `beta_ss`); fails if the implied
/// `beta_btilde` does not exceed 1.
pub fn build_five_point(
    grid: &SurfaceGrid,
    params: &PipelineParams,
) -> Result<(KernelMatrix, Baseline, NoArbBetas)> {
    let required = [
        StrikeLabel::DeltaPut10,
        StrikeLabel::DeltaPut25,
        StrikeLabel::Atm,
        StrikeLabel::DeltaCall25,
        StrikeLabel::DeltaCall10,
    ];
    for label in required {
        grid.require_strike(label)?;
    }
    build_pipeline(grid, params, true)
}

/// Three-point variant of [`build_five_point`]: no 10-delta stage, so the
/// implied 10-delta betas stay unset.
pub fn build_three_point(
    grid: &SurfaceGrid,
    params: &PipelineParams,
) -> Result<(KernelMatrix, Baseline, NoArbBetas)> {
    for label in [StrikeLabel::DeltaPut25, StrikeLabel::Atm, StrikeLabel::DeltaCall25] {
        grid.require_strike(label)?;
    }
    build_pipeline(grid, params, false)
}

fn build_pipeline(
    grid: &SurfaceGrid,
    params: &PipelineParams,
    five_point: bool,
) -> Result<(KernelMatrix, Baseline, NoArbBetas)> {
    if params.atm_scale < 0.0 || params.mu0 <= 0.0 {
        return Err(Error::Domain("atm_scale must be >= 0 and mu0 > 0".into()));
    }
    if !(0.0..1.0).contains(&params.eta) {
        return Err(Error::Domain(format!("eta must lie in [0, 1), got {}", params.eta)));
    }
    if params.beta_b < 1.0 {
        return Err(Error::Domain(format!("beta_b must be >= 1, got {}", params.beta_b)));
    }
    if params.beta_rr_25 <= 0.0 {
        return Err(Error::Domain("beta_rr_25 must be positive".into()));
    }
    let d = grid.dim();
    let col_weights = match &params.col_weights {
        Some(w) => {
            if w.len() != grid.n_points() {
                return Err(Error::DimensionMismatch(format!(
                    "col_weights needs {} entries, got {}",
                    grid.n_points(),
                    w.len()
                )));
            }
            if w.iter().any(|&x| x < 0.0) {
                return Err(Error::Domain("col_weights must be non-negative".into()));
            }
            w.clone()
        }
        None => vec![1.0; grid.n_points()],
    };

    // base ATM row over all columns (first maturity, shared by both signs)
    let base_row: Vec<KernelFn> = (0..d)
        .map(|c| params.profile.scaled(params.atm_scale * col_weights[c / 2]))
        .collect();

    let k_atm = grid.require_strike(StrikeLabel::Atm)?;
    let k_p25 = grid.require_strike(StrikeLabel::DeltaPut25)?;
    let k_c25 = grid.require_strike(StrikeLabel::DeltaCall25)?;

    // per-strike first-maturity rows and baseline nets
    let mut rows: Vec<Option<Vec<KernelFn>>> = vec![None; grid.n_strikes()];
    let mut gross: Vec<f64> = vec![0.0; grid.n_strikes()];
    let mut net: Vec<f64> = vec![0.0; grid.n_strikes()];

    rows[k_atm] = Some(base_row.clone());
    gross[k_atm] = params.mu0;
    net[k_atm] = params.delta_atm;

    // 25-delta wings: convexity split of the ATM row; the split `eta` keeps
    // the per-column mean at beta_b times the ATM entry
    let call_factor = params.beta_b * (1.0 + params.eta);
    let put_factor = params.beta_b * (1.0 - params.eta);
    rows[k_c25] = Some(base_row.iter().map(|k| k.scaled(call_factor)).collect());
    rows[k_p25] = Some(base_row.iter().map(|k| k.scaled(put_factor)).collect());
    gross[k_c25] = params.mu0 * call_factor;
    gross[k_p25] = params.mu0 * put_factor;
    // the risk-reversal control lives in the baseline nets
    let delta_p25 = 2.0 * params.beta_b * params.delta_atm / (1.0 + params.beta_rr_25);
    let delta_c25 = params.beta_rr_25 * delta_p25;
    net[k_p25] = delta_p25;
    net[k_c25] = delta_c25;

    let mut beta_btilde = None;
    let mut beta_rr_10 = None;
    let mut beta_ss = None;
    if five_point {
        let k_p10 = grid.require_strike(StrikeLabel::DeltaPut10)?;
        let k_c10 = grid.require_strike(StrikeLabel::DeltaCall10)?;
        let f_call = params.beta_wing * (grid.moneyness[k_c10] / grid.moneyness[k_c25]).sqrt();
        let f_put = params.beta_wing * (grid.moneyness[k_p10] / grid.moneyness[k_p25]).sqrt();
        let (row_c10, _) = extend_wing(
            rows[k_c25].as_ref().unwrap(),
            gross[k_c25],
            grid.moneyness[k_c25],
            grid.moneyness[k_c10],
            params.beta_wing,
        )?;
        let (row_p10, _) = extend_wing(
            rows[k_p25].as_ref().unwrap(),
            gross[k_p25],
            grid.moneyness[k_p25],
            grid.moneyness[k_p10],
            params.beta_wing,
        )?;
        rows[k_c10] = Some(row_c10);
        rows[k_p10] = Some(row_p10);
        gross[k_c10] = gross[k_c25] * f_call;
        gross[k_p10] = gross[k_p25] * f_put;
        net[k_c10] = net[k_c25] * f_call;
        net[k_p10] = net[k_p25] * f_put;

        // resolved convexity and smile coefficients
        let implied_bt = (f_call * call_factor + f_put * put_factor) / 2.0;
        if implied_bt <= 1.0 {
            return Err(Error::Domain(format!(
                "implied beta_btilde = {implied_bt} <= 1: increase beta_b or beta_wing so the \
                 10-delta wings stay above the ATM level"
            )));
        }
        beta_btilde = Some(implied_bt);
        if net[k_p10] != 0.0 {
            let b10 = net[k_c10] / net[k_p10];
            beta_rr_10 = Some(b10);
            if (params.beta_rr_25 - 1.0).abs() > 1e-12 && delta_p25 != 0.0 {
                beta_ss =
                    Some((b10 - 1.0) * net[k_p10] / ((params.beta_rr_25 - 1.0) * delta_p25));
            }
        }
    }

    // assemble the full matrix and baseline: longer maturities by the
    // calendar extension of the first-maturity rows
    let mut entries = vec![KernelFn::Zero; d * d];
    let mut mu = vec![0.0; d];
    for ki in 0..grid.n_strikes() {
        let row = rows[ki]
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("strike {ki} missing from pipeline")))?;
        for m in 0..grid.n_maturities() {
            let (row_m, gross_m, net_m) = if m == 0 {
                (row.clone(), gross[ki], net[ki])
            } else {
                let tau1 = grid.maturities[0];
                let tau_m = grid.maturities[m];
                let (r, g) = extend_calendar(
                    row,
                    gross[ki],
                    tau1,
                    tau_m,
                    params.beta_phi.powi(m as i32),
                    params.beta_mu.powi(m as i32),
                )?;
                let n = net[ki] * params.beta_mu.powi(m as i32) * (tau1 / tau_m).sqrt();
                (r, g, n)
            };
            for sign in [Sign::Plus, Sign::Minus] {
                let r = grid.component(ki, m, sign);
                for (c, k) in row_m.iter().enumerate() {
                    entries[r * d + c] = k.clone();
                }
                let half = net_m / 2.0;
                mu[r] = gross_m + if sign == Sign::Plus { half } else { -half };
                if mu[r] < 0.0 {
                    return Err(Error::Domain(format!(
                        "baseline for component {r} is negative ({}); increase mu0 relative \
                         to the net drift",
                        mu[r]
                    )));
                }
            }
        }
    }
    let kernel = KernelMatrix::from_entries(d, entries)?;
    let baseline = Baseline::new(mu)?;
    let betas = NoArbBetas {
        beta_mu_plus: params.beta_mu,
        beta_mu_minus: params.beta_mu,
        beta_phi_plus: params.beta_phi,
        beta_phi_minus: params.beta_phi,
        beta_wing: params.beta_wing,
        beta_b: params.beta_b,
        beta_btilde,
        beta_rr_25: params.beta_rr_25,
        beta_rr_10,
        beta_ss,
    };
    Ok((kernel, baseline, betas))
}

/// Build a sign-split baseline realizing prescribed skew/convexity controls
/// through the net rates `mu^+ - mu^-`, without the wing constraint tying the
/// 10-delta nets to the 25-delta ones. Used for shape-control experiments.
///
/// The nets are: ATM `delta_atm`; 25-delta wings with mean `beta_b *
/// delta_atm` split by `beta_rr_25`; 10-delta wings with mean `beta_btilde *
/// delta_atm` split so the smile condition holds with coefficient `beta_ss`.
pub fn shape_control_baseline(
    grid: &SurfaceGrid,
    mu0: f64,
    delta_atm: f64,
    betas: &NoArbBetas,
) -> Result<(Baseline, NoArbBetas)> {
    if mu0 <= 0.0 {
        return Err(Error::Domain("mu0 must be positive".into()));
    }
    let k_atm = grid.require_strike(StrikeLabel::Atm)?;
    let k_p25 = grid.require_strike(StrikeLabel::DeltaPut25)?;
    let k_c25 = grid.require_strike(StrikeLabel::DeltaCall25)?;
    let mut net = vec![0.0; grid.n_strikes()];
    net[k_atm] = delta_atm;
    let delta_p25 = 2.0 * betas.beta_b * delta_atm / (1.0 + betas.beta_rr_25);
    let delta_c25 = betas.beta_rr_25 * delta_p25;
    net[k_p25] = delta_p25;
    net[k_c25] = delta_c25;
    let mut resolved = betas.clone();
    let has_tens = grid.strike_index(StrikeLabel::DeltaPut10).is_some()
        && grid.strike_index(StrikeLabel::DeltaCall10).is_some();
    if has_tens {
        let bt = betas.beta_btilde.ok_or_else(|| {
            Error::Validation("10-delta strikes present: beta_btilde is required".into())
        })?;
        let bss = betas.beta_ss.ok_or_else(|| {
            Error::Validation("10-delta strikes present: beta_ss is required".into())
        })?;
        let k_p10 = grid.require_strike(StrikeLabel::DeltaPut10)?;
        let k_c10 = grid.require_strike(StrikeLabel::DeltaCall10)?;
        // spread of the 10-delta nets set by the smile coefficient; their
        // mean by the extreme-strike convexity coefficient
        let s = bss * (betas.beta_rr_25 - 1.0) * delta_p25;
        let b = bt * delta_atm;
        let delta_p10 = b - s / 2.0;
        let delta_c10 = b + s / 2.0;
        net[k_p10] = delta_p10;
        net[k_c10] = delta_c10;
        resolved.beta_rr_10 = if delta_p10 != 0.0 { Some(delta_c10 / delta_p10) } else { None };
    }
    let mut mu = vec![0.0; grid.dim()];
    for ki in 0..grid.n_strikes() {
        for m in 0..grid.n_maturities() {
            let scale = (grid.maturities[0] / grid.maturities[m]).sqrt();
            let half = net[ki] * scale / 2.0;
            let g = mu0 * scale;
            let plus = g + half;
            let minus = g - half;
            if minus < 0.0 || plus < 0.0 {
                return Err(Error::Domain(
                    "net drift exceeds the gross baseline level; increase mu0".into(),
                ));
            }
            mu[grid.component(ki, m, Sign::Plus)] = plus;
            mu[grid.component(ki, m, Sign::Minus)] = minus;
        }
    }
    Ok((Baseline::new(mu)?, resolved))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn five_grid(maturities: Vec<f64>) -> SurfaceGrid {
        let strikes = vec![
            StrikeLabel::DeltaPut10,
            StrikeLabel::DeltaPut25,
            StrikeLabel::Atm,
            StrikeLabel::DeltaCall25,
            StrikeLabel::DeltaCall10,
        ];
        let n = strikes.len() * maturities.len();
        SurfaceGrid::new(strikes, maturities, 0.001, vec![0.1; n]).unwrap()
    }

    fn default_params() -> PipelineParams {
        PipelineParams {
            profile: KernelFn::exponential(1.0, 10.0),
            atm_scale: 0.2,
            col_weights: None,
            beta_b: 1.2,
            eta: 0.1,
            beta_wing: 0.99,
            beta_phi: 1.0,
            beta_mu: 1.0,
            mu0: 1.0,
            delta_atm: 0.1,
            beta_rr_25: 2.0,
        }
    }

    #[test]
    fn surface_from_events_basics() {
        let grid = SurfaceGrid::new(
            vec![StrikeLabel::Atm],
            vec![1.0 / 52.0],
            0.001,
            vec![0.1],
        )
        .unwrap();
        // empty log: constant path
        let log = EventLog::empty(2, 1.0);
        let path = surface_from_events(&grid, &log).unwrap();
        assert_eq!(path.value_at(0, 0.7), 0.1);

        // one up event at 0.5
        let mut log = EventLog::empty(2, 1.0);
        log.events[0] = vec![0.5];
        let path = surface_from_events(&grid, &log).unwrap();
        assert_eq!(path.value_at(0, 0.4), 0.1);
        assert!((path.value_at(0, 0.6) - 0.101).abs() < 1e-15);

        // equal up and down counts telescope back to sigma0
        let mut log = EventLog::empty(2, 1.0);
        log.events[0] = vec![0.1, 0.3];
        log.events[1] = vec![0.2, 0.8];
        let path = surface_from_events(&grid, &log).unwrap();
        assert!((path.terminal(0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn surface_from_events_dimension_check() {
        let grid = SurfaceGrid::new(
            vec![StrikeLabel::Atm],
            vec![1.0 / 52.0],
            0.001,
            vec![0.1],
        )
        .unwrap();
        let log = EventLog::empty(4, 1.0);
        assert!(matches!(
            surface_from_events(&grid, &log),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn extend_calendar_factors() {
        let row = vec![KernelFn::exponential(1.0, 2.0)];
        // identity case
        let (r, mu) = extend_calendar(&row, 0.5, 1.0 / 52.0, 1.0 / 52.0, 1.0, 1.0).unwrap();
        assert_eq!(r[0], row[0]);
        assert_eq!(mu, 0.5);
        // doubling maturity scales by 1/sqrt(2)
        let (r, _) = extend_calendar(&row, 0.5, 1.0 / 52.0, 2.0 / 52.0, 1.0, 1.0).unwrap();
        let mass = r[0].mass().unwrap();
        assert!((mass - 0.5 / 2.0f64.sqrt()).abs() < 1e-12);
        assert!((mass / 0.5 - 0.70711).abs() < 1e-5);
        // with beta_phi = 1.1
        let (r, _) = extend_calendar(&row, 0.5, 1.0 / 52.0, 2.0 / 52.0, 1.1, 1.0).unwrap();
        assert!((r[0].mass().unwrap() / 0.5 - 0.77782).abs() < 1e-5);
        // maturity ordering enforced
        assert!(extend_calendar(&row, 0.5, 2.0 / 52.0, 1.0 / 52.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn extend_wing_factors() {
        let row = vec![KernelFn::power_law(0.3, 0.5)];
        // k_i = 4 k_j with beta 0.5: factor exactly 1
        let (r, mu) = extend_wing(&row, 0.2, 1.0, 4.0, 0.5).unwrap();
        assert!((r[0].mass().unwrap() - 0.6).abs() < 1e-12);
        assert!((mu - 0.2).abs() < 1e-12);
        // beta outside (0,1)
        assert!(matches!(extend_wing(&row, 0.2, 1.0, 4.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(extend_wing(&row, 0.2, 1.0, 4.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn impose_atm_convexity_arithmetic() {
        let grid = five_grid(vec![1.0 / 52.0]);
        let d = grid.dim();
        // uniform rows: ATM mass 0.10 per entry, wings 0.08 / 0.16
        let mut kernel = KernelMatrix::zero(d);
        for m in 0..1 {
            for (ki, mass) in [(0usize, 0.05), (1, 0.08), (2, 0.10), (3, 0.16), (4, 0.05)] {
                for sign in [Sign::Plus, Sign::Minus] {
                    let r = grid.component(ki, m, sign);
                    for c in 0..d {
                        kernel.set_entry(r, c, KernelFn::exponential(mass, 1.0));
                    }
                }
            }
        }
        let out = impose_atm_convexity(&kernel, &grid, 1.2).unwrap();
        let phi = out.branching_matrix().unwrap();
        let r_p = grid.component(1, 0, Sign::Plus);
        let r_c = grid.component(3, 0, Sign::Plus);
        let r_a = grid.component(2, 0, Sign::Plus);
        for c in 0..d {
            let mean = (phi[(r_p, c)] + phi[(r_c, c)]) / 2.0;
            assert!((mean - 1.2 * phi[(r_a, c)]).abs() < 1e-12);
        }
        // symmetric wings at 0.12 when wings start equal
        let mut sym = kernel.clone();
        for sign in [Sign::Plus, Sign::Minus] {
            for ki in [1usize, 3] {
                let r = grid.component(ki, 0, sign);
                for c in 0..d {
                    sym.set_entry(r, c, KernelFn::exponential(0.07, 1.0));
                }
            }
        }
        let out = impose_atm_convexity(&sym, &grid, 1.2).unwrap();
        let phi = out.branching_matrix().unwrap();
        assert!((phi[(r_p, 0)] - 0.12).abs() < 1e-12);
        assert!((phi[(r_c, 0)] - 0.12).abs() < 1e-12);
    }

    #[test]
    fn impose_atm_convexity_degenerate_atm() {
        let grid = five_grid(vec![1.0 / 52.0]);
        let d = grid.dim();
        let mut kernel = KernelMatrix::zero(d);
        let r_c = grid.component(3, 0, Sign::Plus);
        kernel.set_entry(r_c, 0, KernelFn::exponential(0.1, 1.0));
        assert!(matches!(
            impose_atm_convexity(&kernel, &grid, 1.2),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn impose_10d_requires_beta_above_one() {
        let grid = five_grid(vec![1.0 / 52.0]);
        let kernel = KernelMatrix::zero(grid.dim());
        assert!(matches!(
            impose_10d_convexity(&kernel, &grid, 1.0),
            Err(Error::Domain(_))
        ));
        let out = impose_10d_convexity(&kernel, &grid, 1.5).unwrap();
        assert!(out.is_zero());
    }

    #[test]
    fn impose_10d_wing_mean() {
        let grid = five_grid(vec![1.0 / 52.0]);
        let d = grid.dim();
        let mut kernel = KernelMatrix::zero(d);
        for ki in 0..5 {
            for sign in [Sign::Plus, Sign::Minus] {
                let r = grid.component(ki, 0, sign);
                for c in 0..d {
                    kernel.set_entry(r, c, KernelFn::exponential(0.10, 1.0));
                }
            }
        }
        let out = impose_10d_convexity(&kernel, &grid, 1.5).unwrap();
        let phi = out.branching_matrix().unwrap();
        let r_p = grid.component(0, 0, Sign::Plus);
        let r_c = grid.component(4, 0, Sign::Plus);
        assert!(((phi[(r_p, 0)] + phi[(r_c, 0)]) / 2.0 - 0.15).abs() < 1e-12);
    }

    #[test]
    fn pipeline_is_arbitrage_free_and_detects_perturbations() {
        let grid = five_grid(vec![1.0 / 52.0, 2.0 / 52.0]);
        let params = default_params();
        let (kernel, baseline, betas) = build_five_point(&grid, &params).unwrap();
        let (ok, violations) =
            is_arbitrage_free(&kernel, &baseline, &grid, &betas, SurfaceMode::FivePoint).unwrap();
        assert!(ok, "unexpected violations: {violations:?}");

        // 1% perturbation of a single wing entry is detected
        let mut perturbed = kernel.clone();
        let r = grid.component(4, 0, Sign::Plus);
        let e = perturbed.entry(r, 3).clone();
        perturbed.set_entry(r, 3, e.scaled(1.01));
        let (ok, violations) =
            is_arbitrage_free(&perturbed, &baseline, &grid, &betas, SurfaceMode::FivePoint)
                .unwrap();
        assert!(!ok);
        assert!(violations.iter().any(|v| v.condition == "wing_kernel"));
    }

    #[test]
    fn zero_kernel_zero_mu_vacuously_arbitrage_free() {
        let grid = five_grid(vec![1.0 / 52.0]);
        let kernel = KernelMatrix::zero(grid.dim());
        let baseline = Baseline::new(vec![0.0; grid.dim()]).unwrap();
        let betas = NoArbBetas {
            beta_mu_plus: 1.0,
            beta_mu_minus: 1.0,
            beta_phi_plus: 1.0,
            beta_phi_minus: 1.0,
            beta_wing: 0.9,
            beta_b: 1.0,
            beta_btilde: Some(1.5),
            beta_rr_25: 1.0,
            beta_rr_10: None,
            beta_ss: None,
        };
        let (ok, v) =
            is_arbitrage_free(&kernel, &baseline, &grid, &betas, SurfaceMode::FivePoint).unwrap();
        assert!(ok, "{v:?}");
    }

    #[test]
    fn pipeline_rows_reference_one_base_row_per_strike_sign() {
        // with all calendar betas = 1 the longer-maturity rows are exact
        // multiples of the first-maturity rows
        let grid = five_grid(vec![1.0 / 52.0, 2.0 / 52.0, 4.0 / 52.0]);
        let params = default_params();
        let (kernel, _, _) = build_five_point(&grid, &params).unwrap();
        let phi = kernel.branching_matrix().unwrap();
        for ki in 0..grid.n_strikes() {
            for m in 1..grid.n_maturities() {
                let scale = (grid.maturities[0] / grid.maturities[m]).sqrt();
                for sign in [Sign::Plus, Sign::Minus] {
                    let hi = grid.component(ki, m, sign);
                    let lo = grid.component(ki, 0, sign);
                    for c in 0..grid.dim() {
                        assert!((phi[(hi, c)] - scale * phi[(lo, c)]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn pipeline_rejects_degenerate_btilde() {
        let grid = five_grid(vec![1.0 / 52.0]);
        let mut params = default_params();
        params.beta_b = 1.0;
        params.eta = 0.0;
        params.beta_wing = 0.9; // implied beta_btilde < 1
        assert!(matches!(build_five_point(&grid, &params), Err(Error::Domain(_))));
    }

    #[test]
    fn slice_shape_arithmetic() {
        let grid = SurfaceGrid::new(
            vec![StrikeLabel::DeltaPut25, StrikeLabel::Atm, StrikeLabel::DeltaCall25],
            vec![1.0 / 52.0],
            0.001,
            vec![0.1; 3],
        )
        .unwrap();
        let flat = slice_shape(&grid, &[0.1, 0.1, 0.1]).unwrap();
        assert_eq!(flat.rr_25, 0.0);
        assert_eq!(flat.bf_25, 0.0);
        assert!(flat.rr_10.is_none());

        let s = slice_shape(&grid, &[0.12, 0.10, 0.11]).unwrap();
        assert!((s.rr_25 - (-0.01)).abs() < 1e-15);
        assert!((s.bf_25 - 0.015).abs() < 1e-15);

        // symmetric smile has zero risk reversal
        let sym = slice_shape(&grid, &[0.12, 0.10, 0.12]).unwrap();
        assert_eq!(sym.rr_25, 0.0);
    }

    #[test]
    fn slice_shape_affine_invariance() {
        // RR and BF are contrasts: adding a constant to every strike's
        // volatility leaves both unchanged
        let grid = five_grid(vec![1.0 / 52.0]);
        let base = [0.13, 0.12, 0.10, 0.11, 0.125];
        let shifted: Vec<f64> = base.iter().map(|s| s + 0.05).collect();
        let a = slice_shape(&grid, &base).unwrap();
        let b = slice_shape(&grid, &shifted).unwrap();
        assert!((a.rr_25 - b.rr_25).abs() < 1e-12);
        assert!((a.bf_25 - b.bf_25).abs() < 1e-12);
        assert!((a.rr_10.unwrap() - b.rr_10.unwrap()).abs() < 1e-12);
        assert!((a.bf_10.unwrap() - b.bf_10.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn g_d_constant_variance() {
        let w = vec![0.04; 5];
        let k: Vec<f64> = vec![-0.2, -0.1, 0.0, 0.1, 0.2];
        let report = g_d_diagnostics(&w, &k).unwrap();
        // at k = 0: d = 0.2/2 = 0.1, g = 1
        let (g, d) = report.points[2];
        assert!((d - 0.1).abs() < 1e-12);
        assert!((g - 1.0).abs() < 1e-12);
        for (g, _) in &report.points {
            assert!((g - 1.0).abs() < 1e-12);
        }
        assert!(report.tail_ok);
    }

    #[test]
    fn g_d_parabolic_matches_symbolic() {
        // w(k) = a + b k + c k^2 with symbolic derivatives b + 2ck and 2c
        let (a, b, c) = (0.05, 0.01, 0.3);
        let k: Vec<f64> = (0..41).map(|i| -0.2 + 0.01 * i as f64).collect();
        let w: Vec<f64> = k.iter().map(|&x| a + b * x + c * x * x).collect();
        let report = g_d_diagnostics(&w, &k).unwrap();
        for (i, &ki) in k.iter().enumerate() {
            let wi = w[i];
            let dw = b + 2.0 * c * ki;
            let ddw = 2.0 * c;
            let g_exact = (1.0 - dw / (2.0 * wi)).powi(2)
                - dw * dw / 4.0 * (1.0 / wi + 0.25)
                + ddw / 2.0;
            assert!((report.points[i].0 - g_exact).abs() < 1e-6);
        }
    }

    #[test]
    fn g_d_rejects_bad_input() {
        assert!(g_d_diagnostics(&[0.04, 0.0, 0.04], &[-0.1, 0.0, 0.1]).is_err());
        assert!(g_d_diagnostics(&[0.04, 0.04], &[0.0, 0.1]).is_err());
    }

    #[test]
    fn skew_control_flat_and_right() {
        let grid = five_grid(vec![1.0 / 52.0]);
        let params = default_params();
        let (kernel, _, betas) = build_five_point(&grid, &params).unwrap();

        // symmetric baseline: all nets zero, flat classification
        let (flat_baseline, flat_betas) = {
            let mut b = betas.clone();
            b.beta_ss = Some(1.0);
            shape_control_baseline(&grid, 1.0, 0.0, &b).unwrap()
        };
        let report = skew_control_check(&kernel, &flat_baseline, &grid, &flat_betas).unwrap();
        assert_eq!(report.skew, SkewClass::Flat);

        // build the right-skew baseline from the pipeline itself
        let (kernel, baseline, betas) = build_five_point(&grid, &params).unwrap();
        let report = skew_control_check(&kernel, &baseline, &grid, &betas).unwrap();
        assert_eq!(report.skew, SkewClass::RightSkewed);
        assert!(report.holds, "worst relative error {}", report.worst_rel_error);
    }

    #[test]
    fn skew_control_smile_via_beta_ss() {
        let grid = five_grid(vec![1.0 / 52.0]);
        let params = default_params();
        let (kernel, _, mut betas) = build_five_point(&grid, &params).unwrap();
        betas.beta_ss = Some(2.0);
        betas.beta_btilde = Some(1.4);
        let (baseline, resolved) = shape_control_baseline(&grid, 1.0, 0.1, &betas).unwrap();
        let report = skew_control_check(&kernel, &baseline, &grid, &resolved).unwrap();
        assert_eq!(report.smile, Some(true));
        assert!(report.holds, "worst relative error {}", report.worst_rel_error);
    }

    #[test]
    fn stationary_nets_equal_baseline_nets_for_sign_symmetric_kernels() {
        // rows identical across signs make the excitation cancel exactly in
        // the +/- difference, so the stationary nets equal the baseline nets
        let grid = five_grid(vec![1.0 / 52.0, 2.0 / 52.0]);
        let params = default_params();
        let (kernel, baseline, _) = build_five_point(&grid, &params).unwrap();
        let lam = stationary_intensity(&kernel, &baseline).unwrap();
        for ki in 0..grid.n_strikes() {
            for m in 0..grid.n_maturities() {
                let p = grid.component(ki, m, Sign::Plus);
                let n = grid.component(ki, m, Sign::Minus);
                let stat_net = lam[p] - lam[n];
                let base_net = baseline.0[p] - baseline.0[n];
                assert!(
                    (stat_net - base_net).abs() < 1e-9,
                    "stationary {stat_net} vs baseline {base_net}"
                );
            }
        }
    }

    #[test]
    fn calendar_empirical_deterministic_pass_and_preconditions() {
        let grid = five_grid(vec![1.0 / 52.0, 2.0 / 52.0]);
        // constant paths: total variance strictly increasing in maturity
        let flat = MicroSurfacePath {
            times: vec![0.0],
            values: vec![grid.sigma0.clone()],
            horizon: 1.0,
        };
        let paths = vec![flat; 120];
        let report = check_calendar_empirical(&grid, &paths).unwrap();
        assert!(report.pass);
        assert!(report.worst_margin > 0.0);

        assert!(check_calendar_empirical(&grid, &paths[..10]).is_err());
        let single = five_grid(vec![1.0 / 52.0]);
        assert!(check_calendar_empirical(&single, &paths).is_err());
    }

    #[test]
    fn component_layout_round_trip() {
        let grid = five_grid(vec![1.0 / 52.0, 2.0 / 52.0]);
        assert_eq!(grid.dim(), 20);
        for c in 0..grid.dim() {
            let info = grid.component_info(c).unwrap();
            let ki = grid
                .strikes
                .iter()
                .position(|&l| l == info.strike_label)
                .unwrap();
            let m = grid
                .maturities
                .iter()
                .position(|&t| t == info.maturity)
                .unwrap();
            assert_eq!(grid.component(ki, m, info.sign), c);
        }
    }
}
