//! Tick-by-tick Hawkes model of the implied volatility surface.
//!
//! The crate is organized around a multivariate Hawkes process whose
//! components are up/down moves of surface points:
//!
//! - [`hawkes`]: intensities, exact thinning simulation, stationary
//!   diagnostics;
//! - [`kernels`]: excitation kernel families and (semi-)separable structures;
//! - [`surface`]: surface grids, arbitrage-free kernel constructors and shape
//!   diagnostics;
//! - [`scaling`]: rescaled long-horizon limits, rough volatility factor
//!   dynamics and Hurst estimation;
//! - [`backtest`]: market-making fill models, quoting strategies, PnL and
//!   market-impact measurement;
//! - [`stats`]: the small statistical toolbox shared by diagnostics and tests.

pub mod backtest;
pub mod error;
pub mod hawkes;
pub mod kernels;
pub mod scaling;
pub mod stats;
pub mod surface;

pub use error::{Error, Result};
