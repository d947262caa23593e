//! Dense kernels: pseudoinverse, least squares, PCA and Lasso.
//!
//! All functions are pure over immutable inputs.

mod eigen;
mod lasso;
mod matrix;
mod pca;
mod pinv;

pub use eigen::SymmetricEigen;
pub use lasso::{
    kkt_violation, lasso, lasso_with, soft_threshold, LassoFit, LassoOptions, LassoStatus,
};
pub use matrix::{axpy, dot, norm2, norm_inf, Matrix};
pub use pca::{pca_fit, pca_transform, PcaBasis};
pub use pinv::{
    default_rtol, least_squares, least_squares_full, pseudoinverse, LeastSquares, PsdPseudoInverse,
};
