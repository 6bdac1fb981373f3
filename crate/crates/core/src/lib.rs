//! Multiscale simulation of two-phase incompressible flow in a
//! periodically perforated porous medium.
//!
//! The crate provides, bottom up: staircase geometry of the perforated
//! domain ([`geometry`]), the logarithmic free energy and its regularized
//! family ([`potential`]), an energy-stable pore-scale
//! Stokes-Cahn-Hilliard stepper ([`micro`]), periodic cell problems
//! yielding the effective diffusion and permeability tensors ([`cell`]),
//! the upscaled Cahn-Hilliard-Darcy solver ([`macro_solver`]), the
//! discrete unfolding operator with two-scale convergence metrics
//! ([`unfolding`]), and the study harness gluing them together
//! ([`study`], [`config`], [`report`]).

pub mod cell;
pub mod config;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod linalg;
pub mod macro_solver;
pub mod unfolding;
pub mod micro;
pub mod potential;
pub mod report;
pub mod study;

pub use error::{Error, Result};
