//! Hybrid character-recognition toolkit: a from-scratch reverse-mode autodiff
//! engine, an image preprocessing pipeline, three parallel feature branches
//! (convolutional stem with CBAM attention, vision transformer, Conformer),
//! a multi-head cross-attention fusion module, a training loop with Adam and
//! plateau scheduling, an evaluation suite, and Grad-CAM explainability.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcam;
pub mod graph;
pub mod imageproc;
pub mod eval;
pub mod model;
pub mod kernels;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{grad_check, Activation, Graph, ReduceKind, TensorId};
pub use tensor::Tensor;

/// Keeps freed allocations inside the process instead of returning them to
/// the kernel. Training allocates and frees large tensor buffers every step;
/// on VM-backed hosts where first-touch page faults are expensive, letting
/// glibc trim the heap or munmap large chunks makes every step re-fault its
/// working set. Call once at process start.
pub fn tune_allocator() {
    #[cfg(target_os = "linux")]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}
