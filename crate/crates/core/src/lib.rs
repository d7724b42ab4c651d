//! Monthly retail sales forecasting toolkit: daily-transaction
//! ingestion, panel-grid construction, lag/aggregate feature
//! engineering, three learners (gradient-boosted trees, per-series
//! ARIMA, an LSTM regressor), and an RMSE evaluation harness.

pub mod arima;
pub mod cli;
pub mod error;
pub mod evalharness;
pub mod featuregen;
pub mod gbt;
pub mod ingest;
pub mod panel;
pub mod seqnet;
pub mod synth;

pub use error::{Error, Result};
