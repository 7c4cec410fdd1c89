//! Autoregressive hidden Markov models for step-length / turning-angle
//! movement data.
//!
//! Each hidden state carries a gamma step-length distribution whose mean
//! follows an autoregression on past steps (with a constant coefficient of
//! variation) and a von Mises turning-angle distribution whose mean
//! direction follows a circular autoregression on past turns. Parameters
//! are estimated by maximising a lasso-penalised conditional likelihood,
//! which also selects the autoregressive degrees.
//!
//! ```no_run
//! use arhmm::{fit, simulate, FitOptions, ModelSpec, PenaltyConfig, PooledData};
//!
//! let scenario = simulate::paper_scenario(1).unwrap();
//! let (series, _truth) = simulate::simulate(&scenario).unwrap();
//! let data = PooledData::single(series).unwrap();
//! let result = fit::fit(&data, &ModelSpec::uniform(2, 1), &PenaltyConfig::default(), &FitOptions::default()).unwrap();
//! println!("{:?}", result.params.mu_step);
//! ```

pub mod decode;
pub mod dists;
pub mod error;
pub mod fit;
pub mod geometry;
pub mod io;
pub mod likelihood;
pub mod model;
pub mod optim;
pub mod quadrature;
pub mod simulate;
pub mod study;

pub use decode::{ResidualSeries, StateSequence};
pub use error::{Error, ErrorClass, Result};
pub use fit::{Criterion, FitOptions, FitResult, LambdaPath};
pub use geometry::{StepTurnSeries, Track};
pub use likelihood::{PenaltyConfig, PooledData};
pub use model::{ModelSpec, Parameters};
pub use simulate::SimScenario;
