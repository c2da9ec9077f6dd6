//! Criterion benchmarks for the model, routing probes and selection live in `benches/`.
