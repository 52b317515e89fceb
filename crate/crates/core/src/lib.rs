//! Matrix-free inverse empirical-Fisher products.
//!
//! The empirical Fisher over `m` gradients, dampened by `lambda`,
//!
//! ```text
//! F = lambda * I + (1/m) * sum_i g_i g_i^T
//! ```
//!
//! is never materialized. Two sketches answer queries about `F^{-1}`:
//!
//! * [`StaticSketch`]: fixed gradient set, `O(dm^2)` setup, `O(dm)` products,
//!   `O(m)` single entries. Block-wise and out-of-core variants are in
//!   [`static_sketch`].
//! * [`DynamicSketch`]: sliding window with `O(dm + m^3)` replacement and
//!   `O(dm + m^2)` products.
//!
//! Built on top of them are OBD/OBS pruning ([`pruning`]) and a sliding-window
//! preconditioned gradient method ([`optimizer`]). [`oracle`] holds dense
//! reference implementations for checking everything at small scale.

pub mod bench;
pub mod cli;
pub mod config;
pub mod curvature;
pub mod dynamic_sketch;
pub mod error;
pub mod gradients;
pub mod io;
pub mod linalg;
pub mod optimizer;
pub mod oracle;
pub mod provider;
pub mod pruning;
pub mod static_sketch;
pub mod synth;
pub mod verify;

pub use config::{BlockSize, Dtype, FisherConfig};
pub use curvature::InverseCurvature;
pub use dynamic_sketch::{DynamicSketch, IhvpWork, WindowState};
pub use error::{MfacError, Result};
pub use gradients::{batch_average_gradients, BlockLayout, GradientMatrix, ParamVector};
pub use static_sketch::{BlockStaticSketch, StaticSketch};
