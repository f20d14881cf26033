//! Inference timing.
//!
//! FLOPs are tallied per primitive from operand shapes as the forward pass
//! records them (`n` batch, `c` channels, `hw` pixels, `d` head dim):
//!
//! | primitive                  | FLOPs                     |
//! |----------------------------|---------------------------|
//! | 1x1 conv, `ci -> co`       | `2 n co ci hw`            |
//! | depthwise 3x3              | `18 n c hw`               |
//! | strided 2x2 conv           | `2 n co (4 ci) hw_out`    |
//! | channel layer norm         | `8 n c hw`                |
//! | attention Gram `Q K^T`     | `2 n heads d^2 hw`        |
//! | attention apply `A V`      | `2 n c d hw`              |
//! | selective scan, state `s`  | `8 n c hw s`              |
//! | pointwise op               | 1 to 5 per element        |
//!
//! Every term is linear in `hw`, so the total scales with image area.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::network_inputs;
use crate::arch::DsdNet;
use crate::color::BayerImage;
use crate::error::{Error, Result};
use crate::tensor::ParamStore;

pub const WARMUP: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    /// Mosaic side length.
    pub size: usize,
    pub warmup: usize,
    pub repeats: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub flops: u64,
    /// Network invocations per image over warmup and timed runs.
    pub invocations_per_image: f64,
    pub image_round_trips: u64,
    pub samples_ms: Vec<f64>,
}

/// Median and nearest-rank 95th percentile.
pub fn median_p95(samples: &[f64]) -> (f64, f64) {
    if samples.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    (median, s[rank - 1])
}

/// A random mosaic with the default black and white levels.
pub fn random_mosaic(size: usize, seed: u64) -> Result<BayerImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..size * size).map(|_| rng.random_range(64..=1023u16)).collect();
    BayerImage::new(size, size, data, 64, 1023)
}

fn check_size(net: &DsdNet, size: usize) -> Result<()> {
    let stride = 2 * net.config.stride();
    if size == 0 || !size.is_multiple_of(stride) {
        return Err(Error::Config(format!("bench size {size} must be a positive multiple of {stride}")));
    }
    Ok(())
}

/// FLOPs of one forward pass on a `size x size` mosaic.
pub fn flops_estimate(net: &DsdNet, store: &ParamStore<f32>, size: usize) -> Result<u64> {
    check_size(net, size)?;
    let (raw, guide) = network_inputs(&random_mosaic(size, 0)?, net.variant)?;
    Ok(net.infer(store, &raw, &guide)?.2)
}

/// Times `repeats` single-image forward passes after [`WARMUP`] untimed ones,
/// and checks the single-stage contract: one invocation per image and no
/// intermediate image-domain tensors.
pub fn bench_inference(net: &DsdNet, store: &ParamStore<f32>, size: usize, repeats: usize) -> Result<BenchReport> {
    check_size(net, size)?;
    if repeats == 0 {
        return Err(Error::Config("repeats must be positive".into()));
    }
    let (raw, guide) = network_inputs(&random_mosaic(size, 0)?, net.variant)?;
    net.reset_counters();
    let mut flops = 0;
    for _ in 0..WARMUP {
        flops = net.infer(store, &raw, &guide)?.2;
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        let out = net.infer(store, &raw, &guide)?;
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    let images = net.images_processed();
    let invocations = net.invocations();
    let round_trips = net.image_round_trips();
    if images != (WARMUP + repeats) as u64 || invocations != images {
        return Err(Error::Contract(format!(
            "{invocations} network invocations for {images} images over {} runs",
            WARMUP + repeats
        )));
    }
    if round_trips != 0 {
        return Err(Error::Contract(format!("{round_trips} intermediate image-domain tensors")));
    }
    let (median_ms, p95_ms) = median_p95(&samples);
    Ok(BenchReport {
        size,
        warmup: WARMUP,
        repeats,
        median_ms,
        p95_ms,
        flops,
        invocations_per_image: invocations as f64 / images as f64,
        image_round_trips: round_trips,
        samples_ms: samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_statistics() {
        assert_eq!(median_p95(&[7.0]), (7.0, 7.0));
        assert_eq!(median_p95(&[3.0, 1.0]), (2.0, 3.0));
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(median_p95(&v), (50.5, 95.0));
        assert_eq!(median_p95(&[5.0, 1.0, 3.0]), (3.0, 5.0));
    }
}
