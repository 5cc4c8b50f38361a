//! Desk-scale instance-adaptive neural video codec.
//!
//! The crate is organized around the pipeline: [`tensor`] provides a minimal
//! deterministic autodiff engine, [`models`] the scale-space-flow codec
//! networks, [`prior`] the spike-and-slab update prior and discretized latent
//! priors, [`entropy`] the range coder and Exp-Golomb escapes, [`insta`] the
//! per-instance finetuning loop and encode strategies, [`bitstream`] the
//! container and raw-video I/O, [`metrics`] rate-distortion evaluation, and
//! [`pipeline`] the end-to-end encode/decode drivers.

pub mod entropy;
pub mod bitstream;
pub mod gradcheck;
pub mod insta;
pub mod metrics;
pub mod pipeline;
pub mod models;
pub mod prior;
pub mod tensor;
