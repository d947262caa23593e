//! Score calibration by regressing base OOD scores on features.
//!
//! A base scorer's output `Ŝ` is treated as a noisy observation of a score
//! that is linear in the feature vector. Fitting that linear map and scoring
//! with it instead of `Ŝ` removes much of the noise:
//!
//! * [`fit_dlr`] is plain least squares, `β̂ = (ZᵀZ)⁺ZᵀŜ`.
//! * [`fit_rlr`] first finds samples with large sparse residuals and refits
//!   without them.
//! * [`OnlineState`] accumulates the normal equations batch by batch.

mod dlr;
mod online;
mod preprocess;
mod rlr;

pub use dlr::{fit_dlr, fit_processed, predict, FitDiagnostics, RegressionModel};
pub use online::{online_init, online_update, OnlineCalibrator, OnlineState};
pub use preprocess::{preprocess_fit, PreprocessSpec, Preprocessor, Processed};
pub use rlr::{
    annihilator, column_space_basis, fit_rlr, residual_lasso, select_lowest, ResidualReport,
    RlrConfig,
};
