//! Parametric kernel families and structured kernel-matrix assembly.
//!
//! The two kernel families in use are the power-law kernel
//! `alpha / (1 + t)^(1 + gamma)` and the exponential kernel
//! `alpha * exp(-beta * t)`. Both are monotone non-increasing, which the
//! thinning simulator relies on. Structured matrices (separable and
//! semi-separable) are built from a strike factor `z` and a time profile
//! `varphi`, block-scaled across maturities by `sqrt(tau_1 / tau_m)`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::hawkes::KernelMatrix;

const ORTHO_TOL: f64 = 1e-10;

/// A single excitation kernel, non-negative and monotone non-increasing on `[0, inf)`.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelFn {
    Zero,
    /// `alpha * exp(-beta * t)`
    Exponential { alpha: f64, beta: f64 },
    /// `alpha / (1 + t)^(1 + gamma)`
    PowerLaw { alpha: f64, gamma: f64 },
    /// Pointwise sum of kernels; arises from rank-r semi-separable assembly.
    Sum(Vec<KernelFn>),
}

impl KernelFn {
    pub fn exponential(alpha: f64, beta: f64) -> Self {
        KernelFn::Exponential { alpha, beta }
    }

    pub fn power_law(alpha: f64, gamma: f64) -> Self {
        KernelFn::PowerLaw { alpha, gamma }
    }

    /// Kernel value at `t >= 0`.
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            KernelFn::Zero => 0.0,
            KernelFn::Exponential { alpha, beta } => alpha * (-beta * t).exp(),
            KernelFn::PowerLaw { alpha, gamma } => alpha / (1.0 + t).powf(1.0 + gamma),
            KernelFn::Sum(parts) => parts.iter().map(|k| k.eval(t)).sum(),
        }
    }

    /// Total mass `int_0^inf phi(t) dt`, in closed form.
    pub fn mass(&self) -> Result<f64> {
        match self {
            KernelFn::Zero => Ok(0.0),
            KernelFn::Exponential { alpha, beta } => {
                if *alpha == 0.0 {
                    return Ok(0.0);
                }
                if *beta <= 0.0 {
                    return Err(Error::Domain(format!(
                        "exponential kernel not integrable: beta = {beta}"
                    )));
                }
                Ok(alpha / beta)
            }
            KernelFn::PowerLaw { alpha, gamma } => {
                if *alpha == 0.0 {
                    return Ok(0.0);
                }
                if *gamma <= 0.0 {
                    return Err(Error::Domain(format!(
                        "power-law kernel not integrable: gamma = {gamma}"
                    )));
                }
                Ok(alpha / gamma)
            }
            KernelFn::Sum(parts) => parts.iter().map(|k| k.mass()).sum(),
        }
    }

    /// Partial mass `int_0^t phi(s) ds`, in closed form.
    pub fn partial_mass(&self, t: f64) -> f64 {
        match self {
            KernelFn::Zero => 0.0,
            KernelFn::Exponential { alpha, beta } => {
                if *beta == 0.0 {
                    alpha * t
                } else {
                    alpha / beta * (1.0 - (-beta * t).exp())
                }
            }
            KernelFn::PowerLaw { alpha, gamma } => {
                if *gamma == 0.0 {
                    alpha * (1.0 + t).ln()
                } else {
                    alpha / gamma * (1.0 - (1.0 + t).powf(-gamma))
                }
            }
            KernelFn::Sum(parts) => parts.iter().map(|k| k.partial_mass(t)).sum(),
        }
    }

    /// Tail mass `int_x^inf phi(s) ds`, in closed form. Errors on non-integrable kernels.
    pub fn tail_mass(&self, x: f64) -> Result<f64> {
        match self {
            KernelFn::Zero => Ok(0.0),
            KernelFn::Exponential { alpha, beta } => {
                self.mass()?;
                Ok(alpha / beta * (-beta * x).exp())
            }
            KernelFn::PowerLaw { alpha, gamma } => {
                self.mass()?;
                Ok(alpha / gamma * (1.0 + x).powf(-gamma))
            }
            KernelFn::Sum(parts) => parts.iter().map(|k| k.tail_mass(x)).sum(),
        }
    }

    /// Multiply the kernel by a non-negative scalar; stays within the family.
    pub fn scaled(&self, c: f64) -> KernelFn {
        if c == 0.0 {
            return KernelFn::Zero;
        }
        match self {
            KernelFn::Zero => KernelFn::Zero,
            KernelFn::Exponential { alpha, beta } => KernelFn::Exponential {
                alpha: alpha * c,
                beta: *beta,
            },
            KernelFn::PowerLaw { alpha, gamma } => KernelFn::PowerLaw {
                alpha: alpha * c,
                gamma: *gamma,
            },
            KernelFn::Sum(parts) => KernelFn::Sum(parts.iter().map(|k| k.scaled(c)).collect()),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            KernelFn::Zero => true,
            KernelFn::Exponential { alpha, .. } | KernelFn::PowerLaw { alpha, .. } => *alpha == 0.0,
            KernelFn::Sum(parts) => parts.iter().all(|k| k.is_zero()),
        }
    }
}

/// Separable (rank-one) kernel specification: `phi^{k,k~}(t) = z(k) z(k~) varphi(t)`.
#[derive(Debug, Clone)]
pub struct SeparableSpec {
    /// Strike factor, non-negative, not all zero.
    pub z: Vec<f64>,
    /// Time profile shared by all entries.
    pub varphi: KernelFn,
    /// Maturities in year-fractions, strictly positive, ascending.
    pub maturities: Vec<f64>,
}

impl SeparableSpec {
    pub fn validate(&self) -> Result<()> {
        if self.z.is_empty() || self.z.iter().all(|&v| v == 0.0) {
            return Err(Error::Validation("strike factor z must not be all zero".into()));
        }
        if self.z.iter().any(|&v| v < 0.0) {
            return Err(Error::Validation("strike factor z must be non-negative".into()));
        }
        if self.maturities.is_empty() || self.maturities.iter().any(|&t| t <= 0.0) {
            return Err(Error::Validation("maturities must be strictly positive".into()));
        }
        if self.maturities.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation("maturities must be sorted ascending".into()));
        }
        Ok(())
    }
}

/// Semi-separable (rank-r) kernel specification, factors pairwise orthogonal in strike.
#[derive(Debug, Clone)]
pub struct SemiSeparableSpec {
    /// Per-factor strike vector and time profile.
    pub factors: Vec<(Vec<f64>, KernelFn)>,
    pub maturities: Vec<f64>,
}

impl SemiSeparableSpec {
    pub fn rank(&self) -> usize {
        self.factors.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.factors.is_empty() {
            return Err(Error::Validation("semi-separable spec needs at least one factor".into()));
        }
        let n = self.factors[0].0.len();
        if self.factors.iter().any(|(z, _)| z.len() != n) {
            return Err(Error::DimensionMismatch(
                "all strike factors must share a length".into(),
            ));
        }
        for i in 0..self.factors.len() {
            for j in (i + 1)..self.factors.len() {
                let dot: f64 = self.factors[i]
                    .0
                    .iter()
                    .zip(&self.factors[j].0)
                    .map(|(a, b)| a * b)
                    .sum();
                if dot.abs() > ORTHO_TOL {
                    return Err(Error::Validation(format!(
                        "strike factors {i} and {j} are not orthogonal: <z_i, z_j> = {dot:e}"
                    )));
                }
            }
        }
        if self.maturities.is_empty() || self.maturities.iter().any(|&t| t <= 0.0) {
            return Err(Error::Validation("maturities must be strictly positive".into()));
        }
        if self.maturities.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation("maturities must be sorted ascending".into()));
        }
        Ok(())
    }
}

/// Assemble the rank-one separable kernel matrix over the point grid
/// (maturity-major, strikes inner). Block row `m` carries the scale
/// `sqrt(tau_1) / sqrt(tau_m)`, so the integrated matrix has the single
/// non-zero eigenvalue `sqrt(tau_1) * ||z||^2 * sum_m 1/sqrt(tau_m) * int varphi`.
pub fn assemble_separable(spec: &SeparableSpec) -> Result<KernelMatrix> {
    spec.validate()?;
    let nk = spec.z.len();
    let nm = spec.maturities.len();
    let d = nk * nm;
    let tau1 = spec.maturities[0];
    let mut entries = vec![KernelFn::Zero; d * d];
    for (m, &tau) in spec.maturities.iter().enumerate() {
        let row_scale = (tau1 / tau).sqrt();
        for ki in 0..nk {
            for mj in 0..nm {
                for kj in 0..nk {
                    let i = m * nk + ki;
                    let j = mj * nk + kj;
                    let c = row_scale * spec.z[ki] * spec.z[kj];
                    entries[i * d + j] = spec.varphi.scaled(c);
                }
            }
        }
    }
    KernelMatrix::from_entries(d, entries)
}

/// Closed-form eigenpair of the separable block structure: eigenvalue
/// `||z||^2 * sum_m 1/sqrt(tau_m)` (time profile and `sqrt(tau_1)` prefactor
/// excluded) and the unit eigenvector proportional to `(z/sqrt(tau_1), ..., z/sqrt(tau_M))`.
pub fn separable_eigenpair(spec: &SeparableSpec) -> Result<(f64, Vec<f64>)> {
    spec.validate()?;
    let z_sq: f64 = spec.z.iter().map(|v| v * v).sum();
    let eigenvalue: f64 = z_sq * spec.maturities.iter().map(|t| 1.0 / t.sqrt()).sum::<f64>();
    let mut v: Vec<f64> = spec
        .maturities
        .iter()
        .flat_map(|&tau| spec.z.iter().map(move |&zk| zk / tau.sqrt()))
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    Ok((eigenvalue, v))
}

/// Eigenvalue of the time-integrated assembled matrix (structure eigenvalue
/// times `sqrt(tau_1) * int varphi`).
pub fn separable_integrated_eigenvalue(spec: &SeparableSpec) -> Result<f64> {
    let (structure, _) = separable_eigenpair(spec)?;
    Ok(structure * spec.maturities[0].sqrt() * spec.varphi.mass()?)
}

/// The `||varphi||_1` mass putting the assembled kernel exactly at criticality:
/// `1 / (||z||^2 * (1 + sqrt(tau_1/tau_2) + ... + sqrt(tau_1/tau_M)))`.
pub fn criticality_norm(spec: &SeparableSpec) -> Result<f64> {
    spec.validate()?;
    let z_sq: f64 = spec.z.iter().map(|v| v * v).sum();
    let tau1 = spec.maturities[0];
    let s: f64 = spec.maturities.iter().map(|&t| (tau1 / t).sqrt()).sum();
    Ok(1.0 / (z_sq * s))
}

/// Assemble the rank-r semi-separable kernel matrix. Reduces to
/// [`assemble_separable`] for a single factor.
pub fn assemble_semi_separable(spec: &SemiSeparableSpec) -> Result<KernelMatrix> {
    spec.validate()?;
    let nk = spec.factors[0].0.len();
    let nm = spec.maturities.len();
    let d = nk * nm;
    let tau1 = spec.maturities[0];
    let mut entries = vec![KernelFn::Zero; d * d];
    for (m, &tau) in spec.maturities.iter().enumerate() {
        let row_scale = (tau1 / tau).sqrt();
        for ki in 0..nk {
            for mj in 0..nm {
                for kj in 0..nk {
                    let i = m * nk + ki;
                    let j = mj * nk + kj;
                    let mut parts = Vec::new();
                    for (z, varphi) in &spec.factors {
                        let c = row_scale * z[ki] * z[kj];
                        let k = varphi.scaled(c);
                        if !k.is_zero() {
                            parts.push(k);
                        }
                    }
                    entries[i * d + j] = match parts.len() {
                        0 => KernelFn::Zero,
                        1 => parts.pop().unwrap(),
                        _ => KernelFn::Sum(parts),
                    };
                }
            }
        }
    }
    KernelMatrix::from_entries(d, entries)
}

/// Level / calendar / butterfly factor shapes on a moneyness grid near 1:
/// `z1(k) = nu*k`, `z2(k) = c1*(1/(1+exp(-c2*(k-1))) - 0.5)`,
/// `z3(k) = c3*(k-1)^2 - c4`.
pub fn factor_shapes(
    strikes: &[f64],
    nu: f64,
    c1: f64,
    c2: f64,
    c3: f64,
    c4: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let z1 = strikes.iter().map(|&k| nu * k).collect();
    let z2 = strikes
        .iter()
        .map(|&k| c1 * (1.0 / (1.0 + (-c2 * (k - 1.0)).exp()) - 0.5))
        .collect();
    let z3 = strikes.iter().map(|&k| c3 * (k - 1.0).powi(2) - c4).collect();
    (z1, z2, z3)
}

/// The `c4` making the butterfly shape orthogonal to the constant vector:
/// `c4 = c3 * mean((k-1)^2)`.
pub fn butterfly_centering(strikes: &[f64], c3: f64) -> f64 {
    let mean_sq: f64 =
        strikes.iter().map(|&k| (k - 1.0).powi(2)).sum::<f64>() / strikes.len() as f64;
    c3 * mean_sq
}

/// [`factor_shapes`] followed by Gram-Schmidt, for use as pairwise-orthogonal
/// semi-separable factors. The level shape `nu*k` is not exactly orthogonal to
/// the calendar shape on finite grids; the projection is removed here.
pub fn orthogonalized_factor_shapes(
    strikes: &[f64],
    nu: f64,
    c1: f64,
    c2: f64,
    c3: f64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let c4 = butterfly_centering(strikes, c3);
    let (z1, z2, z3) = factor_shapes(strikes, nu, c1, c2, c3, c4);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(3);
    for z in [z1, z2, z3] {
        let mut v = z;
        for b in &basis {
            let bb: f64 = b.iter().map(|x| x * x).sum();
            let proj: f64 = v.iter().zip(b.iter()).map(|(a, c)| a * c).sum::<f64>() / bb;
            for (vi, bi) in v.iter_mut().zip(b.iter()) {
                *vi -= proj * bi;
            }
        }
        if v.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-12 {
            return Err(Error::Degenerate(
                "factor shapes are linearly dependent on this strike grid".into(),
            ));
        }
        basis.push(v);
    }
    let mut it = basis.into_iter();
    Ok((it.next().unwrap(), it.next().unwrap(), it.next().unwrap()))
}

/// Largest eigenvalue modulus by power iteration, relative tolerance 1e-12.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch("spectral_radius needs a square matrix".into()));
    }
    let n = m.nrows();
    if n == 0 {
        return Ok(0.0);
    }
    if m.iter().all(|&x| x == 0.0) {
        return Ok(0.0);
    }
    let mut v = nalgebra::DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0f64;
    for _ in 0..100_000 {
        let w = m * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        let next = norm;
        let vnext = w / norm;
        if (next - lambda).abs() <= 1e-12 * next.max(1.0) {
            return Ok(next);
        }
        lambda = next;
        v = vnext;
    }
    Err(Error::Numerical(
        "power iteration did not converge within 100000 iterations".into(),
    ))
}
