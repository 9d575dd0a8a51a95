//! Phase-space solver and fundamental-solution toolkit for kinetic
//! Fokker-Planck equations `(d_t + v.grad_x) f - div_v(A grad_v f) = S` with rough `A`.

pub mod bounds;
pub mod coefficients;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod propagator;
pub mod scalar;
pub mod solver;

pub use error::{KfpError, Result};
pub use scalar::Real;

pub type PhaseGrid64 = solver::PhaseGrid<f64>;
pub type PhaseField64 = solver::PhaseField<f64>;
pub type CoefficientField64 = coefficients::CoefficientField<f64>;
pub type EvolutionFamily64 = propagator::EvolutionFamily<f64>;
pub type KineticPoint64 = geometry::KineticPoint<f64>;
pub type KineticCylinder64 = geometry::KineticCylinder<f64>;
pub type PhaseSet64 = geometry::PhaseSet<f64>;
pub type TwistFunction64 = bounds::TwistFunction<f64>;
pub type PhaseField32 = solver::PhaseField<f32>;
pub type EvolutionFamily32 = propagator::EvolutionFamily<f32>;
