//! Desk-scale subject-driven image generation.
//!
//! A mini text- and time-conditioned diffusion UNet whose self-attention
//! layers run in reference self-attention (RSA) mode, fed by an
//! architecture-identical reference UNet; trained on a bootstrapped synthetic
//! triplet corpus, sampled with two-scale classifier-free guidance and
//! multi-reference feature pooling.
//!
//! See the `examples/` directory for one runnable example per capability and
//! the `bootpig` binary for the operator CLI.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod databoot;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod rng;
pub mod scheduler;
pub mod tensor;
pub mod threads;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};

/// Entry point used by the thin `bootpig` binary. Returns the process exit
/// code: 0 success, 1 usage error, 2 runtime failure.
pub fn cli_main() -> i32 {
    cli::run()
}
