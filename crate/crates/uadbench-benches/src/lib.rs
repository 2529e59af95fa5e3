//! Placeholder; see the `kernels` bench target.
