//! Recurrent Kalman network.
//!
//! A recurrent state estimator whose hidden state is a Gaussian belief with
//! factorized covariance, propagated by a learned locally linear transition
//! and corrected by scalar Kalman updates in a learned latent space.
//!
//! * [`cell`]: prediction / observation update and their gradients
//! * [`oracle`]: dense Kalman filter used to verify the cell
//! * [`conformance`]: seeded property suites behind `rkn check`
//! * [`nn`]: dense layers, losses, Adam, gradient checking
//! * [`model`]: encoder → cell → decoder and BPTT
//! * [`train`] and [`eval`]: training loop, metrics, calibration, baselines
//! * [`checkpoint`]: versioned parameter files
//! * [`pendulum`]: synthetic pendulum datasets

pub mod banded;
pub mod belief;
pub mod cell;
pub mod checkpoint;
pub mod conformance;
pub mod ddouble;
pub mod error;
pub mod eval;
pub mod nn;
pub mod model;
pub mod oracle;
pub mod params;
pub mod pendulum;
pub mod reference;
pub mod train;
pub mod transition;

pub use belief::{initial_belief, BeliefGrad, BeliefState, LatentObservation};
pub use error::{Error, Result};
pub use params::Parameterized;
pub use transition::{assemble_transition, default_basis_init, parameter_count, BlockTransition, TransitionModel};
