//! Gradients of diffusion-model samples by the adjoint sensitivity method.
//!
//! Samples are produced by integrating the probability-flow ODE, either on the
//! original time clock or after exponential integration on the
//! `rho = sigma_t / alpha_t` clock. Gradients of a loss on the sample with
//! respect to the initial noise, the network weights, and the conditioning
//! embedding come from integrating the augmented adjoint ODE backwards, which
//! needs memory independent of the number of solver steps.

pub mod adjoint;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nnet;
pub mod odeint;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
