//! Change-point informed remaining-useful-life estimation.
//!
//! The pipeline reads C-MAPSS style run-to-failure logs, learns each
//! device's normal temporal dynamics with canonical variate analysis,
//! detects the cycle where the T² / Q monitoring statistics leave their
//! control limits for good, turns those change points into piecewise RUL
//! labels and trains a stacked LSTM regressor on sliding windows.

pub mod cmapss;
pub mod cva;
pub mod error;
pub mod eval;
pub mod labeling;
pub mod linalg;
pub mod lstm;
pub mod monitor;
pub mod pipeline;
pub mod stream;
pub mod synthetic;

pub use error::{Error, Result};
