//! Forward-pass speed and memory versus input length and encoder stride.

use std::time::Instant;

use rand::Rng;
use sepformer::data::seeded_rng;
use sepformer::separator::{ModelConfig, SepFormer};
use sepformer::tensor::memory::{live_bytes, peak_bytes, reset_peak};
use sepformer::{no_grad, Error, Result, Tensor};

pub const HEADER: &str = "seconds,stride,forward_ms,peak_bytes";

pub const MIN_REPEATS: usize = 5;
pub const MIN_WARMUP: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub seconds: f64,
    pub stride: usize,
    pub chunk_size: usize,
    /// Median over the timed repeats.
    pub forward_ms: f64,
    /// High-water mark of tensor bytes allocated during one forward pass.
    pub peak_bytes: usize,
}

impl BenchRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.3},{}",
            self.seconds, self.stride, self.forward_ms, self.peak_bytes
        )
    }
}

pub struct BenchPlan {
    pub strides: Vec<usize>,
    pub seconds: Vec<f64>,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Runs every (stride, length) pair, strides outermost. `emit` sees each
/// record as soon as it is measured.
pub fn run(
    base: &ModelConfig,
    plan: &BenchPlan,
    mut emit: impl FnMut(&BenchRecord),
) -> Result<Vec<BenchRecord>> {
    if plan.repeats < MIN_REPEATS || plan.warmup < MIN_WARMUP {
        return Err(Error::Usage(format!(
            "bench needs at least {MIN_REPEATS} repeats and {MIN_WARMUP} warmup run, got {} and {}",
            plan.repeats, plan.warmup
        )));
    }
    let mut records = Vec::new();
    for &stride in &plan.strides {
        let config = ModelConfig {
            stride,
            ..base.clone()
        };
        let model = SepFormer::new(config, plan.seed)?;
        for (i, &seconds) in plan.seconds.iter().enumerate() {
            if seconds.is_nan() || seconds <= 0.0 {
                return Err(Error::Usage(format!(
                    "input length must be positive, got {seconds} s"
                )));
            }
            let len = (seconds * base.sample_rate as f64).round() as usize;
            let mut rng = seeded_rng(plan.seed, &[stride as u64, i as u64]);
            let input: Vec<f64> = (0..len).map(|_| rng.random_range(-0.5..0.5)).collect();
            let x = Tensor::new(input, &[len])?;
            for _ in 0..plan.warmup {
                no_grad(|| model.forward(&x))?;
            }
            let mut times = Vec::with_capacity(plan.repeats);
            let mut peak = 0;
            for _ in 0..plan.repeats {
                reset_peak();
                let before = live_bytes();
                let start = Instant::now();
                let out = no_grad(|| model.forward(&x))?;
                times.push(start.elapsed().as_secs_f64() * 1e3);
                drop(out);
                peak = peak.max(peak_bytes() - before);
            }
            let record = BenchRecord {
                seconds,
                stride,
                chunk_size: base.chunk_size,
                forward_ms: median(times),
                peak_bytes: peak,
            };
            emit(&record);
            records.push(record);
        }
    }
    Ok(records)
}
