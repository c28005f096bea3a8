//! Analog linear encoders for multi-user, multi-task estimation over a
//! noisy real scalar broadcast channel.
//!
//! A single sensor observes `y` and broadcasts `s = G·ỹ` (ỹ the whitened
//! observation). User `n` receives `r_n = h_n·s + u_n` with unit-variance
//! noise and estimates its own target `x_n`. The crate covers:
//!
//! - [`model`]: the jointly Gaussian task family, its synthesis and whitened
//!   second-order statistics.
//! - [`design`]: the closed-form single-user water-filling encoder and the
//!   shared-basis multi-user design with Lagrangian energy allocation.
//! - [`refopt`]: the globally optimal reference encoder, computed by
//!   projected gradient over the Gram matrix `R = GᵀG`.
//! - [`channel_eval`]: MMSE decoders, closed-form and Monte-Carlo MSE,
//!   the TDM and direct-broadcast baselines, and energy sweeps.
//! - [`neural`]: the nonlinear extension with a shared-trunk multi-task MLP
//!   whose features are whitened and encoded with the same machinery.
//! - [`validation`]: the numerical check suite used by the CLI and the
//!   acceptance tests.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod channel_eval;
pub mod design;
mod error;
pub mod linalg;
pub mod model;
pub mod neural;
pub mod refopt;
pub mod rng;
pub mod validation;

pub use channel_eval::{
    analytic_mse, direct_broadcast, energy_sweep, mmse_decoder, mmse_decoder_factored, simulate,
    tdm_baseline, write_csv, Decoder, EvalMode, EvalReport, McOptions, SweepInstance, SweepMethod,
    SweepRow, TdmSplit,
};
pub use design::{
    allocate_energy, multiuser_encoder, shared_basis, single_user_encoder, stationarity_residual,
    task_weights, water_fill_beta, Allocation, BasisMethod, Encoder, TaskWeights, WaterLevel,
    WeightMode,
};
pub use error::{Error, Result};
pub use model::{
    sample_batch, stats_from_ground_truth, synth_linear_model, ChannelSet, Dims, GaussianStats,
    LinearGroundTruth, SampleBatch,
};
pub use refopt::{solve_reference, ReferenceSolution, SolverOptions};
