//! SDNet: single-image deraining with modified Swin-style windowed attention
//! blocks in a three-branch fusion topology, plus the composite loss, a
//! synthetic-rain data pipeline, a trainer, and an evaluation harness.
//!
//! Everything runs on a small from-scratch tensor engine with reverse-mode
//! automatic differentiation ([`tensor`]).

// The training loop allocates and frees large activation buffers every op;
// glibc malloc keeps returning those to the kernel, so the default allocator
// spends a third of each iteration in mmap/munmap.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

static ALLOC_TUNE: std::sync::Once = std::sync::Once::new();

/// Disable mimalloc's timed purging: activation buffers are recycled every
/// iteration, and handing them back to the OS between iterations costs more
/// in madvise and page-fault traffic than it saves.
pub(crate) fn tune_allocator() {
    ALLOC_TUNE.call_once(|| unsafe {
        // 15 = mi_option_purge_delay; -1 never purges
        libmimalloc_sys::mi_option_set(15, -1);
    });
}

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod model;
pub mod params;
pub mod swin;
pub mod tensor;
pub mod train;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
