//! Approximate partial blow-up solutions of the SU(3) Toda system with Neumann
//! boundary conditions on the flat unit-area disk.
//!
//! The library builds the classical objects of the Lyapunov–Schmidt construction
//! for the system
//!
//! ```text
//!   -Δu₁ = f₁(u₁) - ½ f₂(u₂)
//!   -Δu₂ = f₂(u₂) - ½ f₁(u₁)        ∂_ν u = 0 on ∂Σ,   |Σ| = 1,
//! ```
//!
//! with `f₁(u) = 2λV₁e^u - mean` and `f₂(u) = 2ρ₂(V₂e^u/∫V₂e^u - 1)`:
//! Neumann Green function and Robin function, projected Liouville bubbles and
//! their kernel elements, the singular mean-field problem for the second
//! component, the shadow system coupling it to the point configuration, and the
//! finite-dimensional reduction that assembles and corrects the ansatz.
//!
//! Modules mirror the pipeline, bottom up: [`geometry`] (disk, meshes, charts),
//! [`elliptic`] (P1 Neumann solver with exact mean-zero handling), [`green`]
//! (Green tables, Robin function), [`bubble`] (projected bubbles, kernels,
//! expansion diagnostics), [`meanfield`] (singular mean-field solver),
//! [`shadow`] (Kirchhoff–Routh landscape and the coupled homotopy), and
//! [`reduction`] (ansatz, residuals, energy, fixed-point correction, Newton
//! polish). [`cli`] drives everything from a flat config file.

pub mod bubble;
pub mod cli;
pub mod elliptic;
pub mod geometry;
pub mod green;
pub mod meanfield;
pub mod numerics;
pub mod reduction;
pub mod shadow;

/// Crate-wide error type. Variants wrap the per-module errors.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
    #[error(transparent)]
    Solve(#[from] elliptic::SolveError),
    #[error(transparent)]
    Config(#[from] cli::ConfigError),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
