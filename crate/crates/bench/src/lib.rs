//! Criterion benchmarks for the range coder, convolution kernels and the
//! split client/server path. Run with `cargo bench -p esplit-bench`.
