//! Criterion benchmarks for the qaforge core algorithms.
