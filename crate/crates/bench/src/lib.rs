//! Criterion benchmarks of the hot paths live in `benches/hot_paths.rs`:
//! hash-grid lookup and adjoint, dual-branch compositing, and one full
//! training step of the desk preset.
