//! Forward-pass latency measurement.

use std::time::Instant;

use crate::error::{invalid, Result};

/// Median of a non-empty sample; mean of the two middle values for even sizes.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub median_ms: f64,
    pub samples_ms: Vec<f64>,
    pub hardware: String,
}

pub fn hardware_note() -> String {
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{}-{}, {threads} hardware threads, single-threaded kernels", std::env::consts::ARCH, std::env::consts::OS)
}

/// Times `run` after `warmup` untimed calls and reports the median.
pub fn benchmark(warmup: usize, repeats: usize, mut run: impl FnMut() -> Result<()>) -> Result<BenchResult> {
    if repeats == 0 {
        return invalid("benchmark", "repeats must be at least 1");
    }
    for _ in 0..warmup {
        run()?;
    }
    let mut samples_ms = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        run()?;
        samples_ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let median_ms = median(&samples_ms).expect("non-empty");
    Ok(BenchResult { median_ms, samples_ms, hardware: hardware_note() })
}
