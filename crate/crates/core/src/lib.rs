//! MaxSR: single-image super-resolution built on adaptive multi-axis
//! attention, with a self-contained tensor/autodiff engine, a toy training
//! loop, Y-channel PSNR/SSIM evaluation, and an attention-cost benchmark.

pub mod attention;
pub mod blocks;
pub mod cli;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod image_io;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{no_grad, Tensor};

/// Cap internal parallelism from the MAXSR_THREADS environment variable.
/// Call once near process start; later calls are no-ops.
pub fn configure_thread_pool() {
    if let Ok(v) = std::env::var("MAXSR_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
