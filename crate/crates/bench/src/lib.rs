//! Benchmarks for the descriptor pipeline; see `benches/pipeline.rs`.
