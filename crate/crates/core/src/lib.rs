//! Learning neural-network regularizers for PDE-constrained inverse problems.
//!
//! Given a data set of target states `ẑ_k` and desired controls `û_k`, the weights `w` of
//! a feedforward network `r(w, ·)` are trained so that the inner problems
//!
//! ```text
//! min_u ½‖𝕊(u) − ẑ_k‖² + γ(r(w, u))
//! ```
//!
//! return controls close to `û_k`. The inner problems are replaced by their
//! stationarity conditions `G(u_k, w, ẑ_k) = 0`, and the resulting equality-constrained
//! outer problem is differentiated with a costate `μ_k` solving `G'_u(u_k)ᵀ μ_k = −(u_k − û_k)`.
//!
//! Modules:
//! - [`mlp`]: networks with analytic first and second derivatives.
//! - [`fem`]: P1 finite elements for the 1D conductivity equation.
//! - [`inner`]: reduced objective, adjoint gradient and the Nesterov inner solver.
//! - [`outer`]: inner Hessian, ε-shift, costate, weight gradient and Barzilai–Borwein training.
//! - [`datagen`]: synthetic data sets.
//! - [`experiment`]: run descriptions tying generation, initialization and training together.

pub mod datagen;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod fem;
pub mod inner;
pub mod mlp;
pub mod outer;

pub use error::{Error, Result};
