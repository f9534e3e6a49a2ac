//! Criterion benchmarks for the renderer, warping and SSIM; see `benches/`.
