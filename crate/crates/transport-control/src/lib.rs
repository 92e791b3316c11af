//! A workbench for boundary control of the steady-state linear Boltzmann
//! transport equation on disks and annuli.
//!
//! The crate solves the transport equation with data prescribed on general
//! boundary sets (one endpoint per characteristic line), builds exact
//! boundary controls by peeling thin layers, measures how the control
//! degenerates in the diffusive scaling, and computes the spectral
//! obstructions that make control of outgoing traces fail.

pub mod coeffs;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod obstruction;
pub mod quad;
pub mod control;
pub mod solver;
pub mod transport;

pub use coeffs::{Coefficients, KernelSpec, ScatterCache, SigmaSpec};
pub use error::{Error, Result};
pub use geometry::{Domain, LayerFamily, LayerPartition, Side, Vec2, VelocitySphere};
pub use grid::{BoundaryData, BoundaryField, BoundarySet, Branch, CPlusSpec, PhaseField, PolarGrid};
