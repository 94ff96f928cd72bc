//! Desk-scale conditional rectified-flow seismic inversion engine.
//!
//! The crate is organized bottom-up:
//! - [`tensor`]: reverse-mode autodiff over dense f64 tensors
//! - [`wavesim`]: 2-D acoustic finite-difference forward modeling and
//!   synthetic velocity-model generation
//! - [`flowcore`]: probability-path math shared by flow matching and
//!   diffusion (interpolants, schedules, losses, closed-form oracles)
//! - [`samplers`]: ODE/SDE integrators that turn a trained network into
//!   an inversion sampler
//! - [`nets`]: seismic encoder and conditional U-Net
//! - [`metrics`]: image-quality metrics for velocity grids
//! - [`pipeline`]: dataset generation, training, inversion, benchmarks,
//!   ablations, checkpoints, and the CLI entry points

pub mod flowcore;
pub mod metrics;
pub mod nets;
pub mod pipeline;
pub mod samplers;
pub mod tensor;
pub mod wavesim;
