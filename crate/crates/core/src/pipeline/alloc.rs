//! Allocator tuning for training workloads.

use std::sync::Once;

static TUNE: Once = Once::new();

/// Keeps large activation buffers on the heap instead of fresh mappings.
///
/// A training step allocates and frees many multi-megabyte tensors; with the
/// default glibc thresholds each one becomes an mmap/munmap pair and the
/// kernel time rivals the arithmetic. Safe to call repeatedly; a no-op on
/// other platforms.
pub fn tune_allocator() {
    TUNE.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        // SAFETY: mallopt only adjusts allocator thresholds.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TOP_PAD, 256 << 20);
        }
    });
}
