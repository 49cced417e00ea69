//! Criterion benchmarks for the esnet kernels live in `benches/`.
