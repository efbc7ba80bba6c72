//! State-space Kolmogorov-Arnold networks (SS-KAN) for nonlinear system
//! identification.
//!
//! The library identifies discrete-time models of the form
//!
//! ```text
//! x(k+1) = A x(k) + B u(k) + KAN_f(x(k), u(k))
//! y(k)   = C x(k) + D u(k) + KAN_g(x(k), u(k))
//! ```
//!
//! where `KAN_f` and `KAN_g` are Kolmogorov-Arnold networks: every edge
//! carries a learnable univariate function (a cubic B-spline plus a SiLU
//! residual) and nodes sum their incoming edges. A cascade variant
//! (linear block / scalar KAN / linear block) covers Wiener-Hammerstein
//! structures.
//!
//! Modules:
//! - [`spline`]: uniform B-spline bases, derivatives, grid updates
//! - [`kan`]: edges, layers and networks of learnable univariate functions
//! - [`ssmodel`]: the dynamical models and their simulation
//! - [`diffengine`]: exact reverse-mode gradients through a rollout
//! - [`trainer`]: AdamW training loop, normalization, reports
//! - [`datagen`]: synthetic benchmark oracles, excitation signals, CSV I/O
//! - [`interp`]: slice extraction, polynomial fits, affine curve alignment

pub mod datagen;
pub mod diffengine;
pub mod interp;
pub mod kan;
pub(crate) mod linalg;
pub mod spline;
pub mod ssmodel;
pub mod trainer;

pub use kan::KanNetwork;
pub use spline::SplineBasis;
pub use ssmodel::{CascadeModel, LinearSS, SsKanModel};
pub use trainer::{TrainConfig, TrainReport};
