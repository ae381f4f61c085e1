//! Timed forward passes at a fixed square input.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Mode, Network, NetworkConfig};
use crate::seeding::{rng_for, tag};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub model: String,
    pub parameters: usize,
    pub edge: usize,
    /// Untimed passes run first.
    pub warmup: usize,
    /// Timed passes; equals `latencies_ms.len()`.
    pub iters: usize,
    pub latencies_ms: Vec<f64>,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    pub images_per_sec: f64,
    pub hardware: String,
}

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Named network presets accepted by `--preset`.
pub fn preset(name: &str) -> Option<NetworkConfig> {
    match name {
        "r101" => Some(NetworkConfig::r101()),
        "r18" => Some(NetworkConfig::r18()),
        "r18_half" => Some(NetworkConfig::r18_half()),
        _ => None,
    }
}

/// CPU model and thread count, for when the caller gives no descriptor.
pub fn host_descriptor() -> String {
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    format!("{model}, {} threads", rayon::current_num_threads())
}

pub fn run_benchmark(net: &Network<f32>, model: &str, edge: usize, iters: usize, warmup: usize, hardware: &str) -> Result<BenchmarkReport> {
    if edge == 0 || iters == 0 {
        return Err(Error::invalid("benchmark needs a positive edge and iteration count"));
    }
    let mut rng = rng_for(0, &[tag("benchmark")]);
    let input = Tensor::from_vec([1, 3, edge, edge], (0..3 * edge * edge).map(|_| rng.gen::<f32>()).collect());
    for _ in 0..warmup {
        net.forward_with_mode(&input, Mode::Eval)?;
    }
    let mut latencies_ms = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        net.forward_with_mode(&input, Mode::Eval)?;
        latencies_ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mut sorted = latencies_ms.clone();
    sorted.sort_by(f64::total_cmp);
    let mean_ms = latencies_ms.iter().sum::<f64>() / iters as f64;
    Ok(BenchmarkReport {
        model: model.to_string(),
        parameters: net.parameter_count(),
        edge,
        warmup,
        iters,
        mean_ms,
        p50_ms: percentile(&sorted, 50.0),
        p90_ms: percentile(&sorted, 90.0),
        p99_ms: percentile(&sorted, 99.0),
        images_per_sec: 1e3 / mean_ms,
        latencies_ms,
        hardware: hardware.to_string(),
    })
}
