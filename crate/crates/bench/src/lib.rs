//! Criterion benchmarks for the stepping and training kernels live in `benches/`.
