//! Closed-loop adiabatic quantum dynamics.
//!
//! A d-level system evolves under H[R] while the slow parameter obeys
//! Ṙ = ε·F(R, ⟨ψ|A|ψ⟩). The crate provides the exact integrator, the
//! leading-order reduction (replicator populations, feedback phases and
//! slow drift), its mixed-state generalization and a declarative scenario
//! format tying them together.

pub mod error;
pub mod exact;
pub mod linalg;
pub mod mixed;
pub mod reduced;
pub mod scenario;
pub mod ode;
pub mod spectral;

pub use error::{Error, Result};
