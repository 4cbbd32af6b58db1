//! Fixtures for the kernel benchmarks.

use falcon_core::{BinaryMask, NetworkConfig, ProbMap};

/// A disc of radius `r` centred at `(cy, cx)` on an `n x n` grid.
pub fn disc(n: usize, cy: f64, cx: f64, r: f64) -> BinaryMask {
    BinaryMask::from_fn(n, n, |y, x| (y as f64 - cy).hypot(x as f64 - cx) <= r)
}

/// A smooth probability map peaking inside a disc.
pub fn soft_disc(n: usize, r: f64) -> ProbMap {
    let c = n as f64 / 2.0;
    let data = (0..n * n)
        .map(|i| {
            let d = ((i / n) as f64 - c).hypot((i % n) as f64 - c);
            1.0 / (1.0 + ((d - r) / 2.0).exp())
        })
        .collect();
    ProbMap::new(n, n, data).expect("sized")
}

/// Three-level network at `size x size`.
pub fn small_net(size: usize) -> NetworkConfig {
    NetworkConfig {
        depth: 3,
        channels_per_level: vec![8, 16, 32],
        bottleneck_channels: 32,
        input_size: [size, size],
        support_size: 3,
        ..NetworkConfig::default()
    }
}
