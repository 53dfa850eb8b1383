//! Storage power and virtual-inertia dispatch for power-system frequency response.
//!
//! The crate covers the whole pipeline:
//!
//! - [`grid`]: network model, lossless power flow and steady-state angles,
//! - [`dynamics`]: structure-preserving swing dynamics with virtual inertia, explicit Euler,
//! - [`qp`]: a dense operator-splitting QP solver with a KKT residual checker,
//! - [`mpc`]: centralized receding-horizon control via sequential linearization,
//! - [`dmpc`]: area-distributed MPC with proximal consensus ADMM,
//! - [`scenario`] and [`export`]: scenario files, CSV and plot-data output.

pub mod dmpc;
pub mod dynamics;
pub mod export;
pub mod grid;
pub mod mpc;
pub mod qp;
pub mod scenario;

pub use dynamics::{ControlInput, SystemState, Trajectory};
pub use grid::{BusId, BusRole, GridModel};
