//! Benchmark helpers; the actual benchmarks live in `benches/`.
