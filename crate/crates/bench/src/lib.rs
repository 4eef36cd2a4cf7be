//! Benchmarks for the training pipeline live under `benches/`.
