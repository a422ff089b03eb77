//! Cutting trained models down to `(n, d)` and measuring per-layer latency.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Batch, EncoderModel, TokenSequence, CLS_ID, NUM_RESERVED};
use crate::rng::{self, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationSpec {
    pub n: usize,
    pub d: usize,
}

impl TruncationSpec {
    pub fn new(n: usize, d: usize) -> Self {
        Self { n, d }
    }

    /// Checks `n` and `d` against the model's usable layers and dimensions.
    pub fn validate_for(&self, model: &EncoderModel) -> Result<()> {
        if self.n == 0 || self.n > model.num_layers() {
            return Err(Error::Config(format!(
                "truncation keeps {} layers, model has {}",
                self.n,
                model.num_layers()
            )));
        }
        if self.d == 0 || self.d > model.output_dim() {
            return Err(Error::Config(format!(
                "truncation keeps {} dimensions, model provides {}",
                self.d,
                model.output_dim()
            )));
        }
        Ok(())
    }
}

/// Keeps blocks `1..=n` unchanged and advertises `d` as the embedding size.
/// The weight matrices keep their full width so the prefix slice is taken at
/// read time, exactly as on the original model.
pub fn truncate_model(model: &EncoderModel, spec: TruncationSpec) -> Result<EncoderModel> {
    spec.validate_for(model)?;
    let mut out = model.clone();
    out.truncate_layers(spec.n);
    out.set_advertised_dim(Some(spec.d));
    Ok(out)
}

/// Monotonic seconds source. Browsers have no `std::time::Instant`, so the
/// demo supplies `performance.now()` through this trait.
pub trait Clock {
    fn now_seconds(&mut self) -> f64;
}

#[cfg(not(target_arch = "wasm32"))]
#[derive(Debug)]
pub struct InstantClock(std::time::Instant);

#[cfg(not(target_arch = "wasm32"))]
impl Default for InstantClock {
    fn default() -> Self {
        Self(std::time::Instant::now())
    }
}

#[cfg(not(target_arch = "wasm32"))]
impl Clock for InstantClock {
    fn now_seconds(&mut self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLatency {
    pub layer: usize,
    pub median_seconds: f64,
    /// `time(N) / time(layer)`.
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub batch_size: usize,
    pub num_batches: usize,
    pub warmup_batches: usize,
    pub layers: Vec<LayerLatency>,
}

impl LatencyReport {
    pub fn layer(&self, n: usize) -> Option<&LayerLatency> {
        self.layers.iter().find(|l| l.layer == n)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,median_seconds,speedup\n");
        for l in &self.layers {
            s.push_str(&format!("{},{},{}\n", l.layer, l.median_seconds, l.speedup));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub batch_size: usize,
    pub num_batches: usize,
    pub warmup_batches: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            num_batches: 30,
            warmup_batches: 3,
            seed: rng::DEFAULT_SEED,
        }
    }
}

pub const MIN_TIMED_BATCHES: usize = 10;

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

/// Random full-length batch so every layer sees the same padded shape.
fn bench_batch(model: &EncoderModel, config: &BenchConfig) -> Result<Batch> {
    let cfg = model.config();
    let mut rng = rng::stream(config.seed, Stream::Bench);
    let seqs = (0..config.batch_size)
        .map(|_| {
            let mut ids = vec![CLS_ID];
            ids.extend(
                (1..cfg.max_seq_len).map(|_| rng.random_range(NUM_RESERVED..cfg.vocab_size as u32)),
            );
            TokenSequence::new(ids)
        })
        .collect::<Result<Vec<_>>>()?;
    Batch::new(&seqs, cfg)
}

/// Median wall time of an early-exit forward pass per requested layer.
/// Layers are interleaved within each round so drift affects all equally;
/// the model's final layer is always measured since speedups refer to it.
pub fn benchmark_layers(
    model: &EncoderModel,
    config: &BenchConfig,
    layers: &BTreeSet<usize>,
    clock: &mut dyn Clock,
) -> Result<LatencyReport> {
    if config.num_batches < MIN_TIMED_BATCHES {
        return Err(Error::Config(format!(
            "benchmark needs at least {MIN_TIMED_BATCHES} timed batches, got {}",
            config.num_batches
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let top = model.num_layers();
    if let Some(&bad) = layers.iter().find(|&&n| n == 0 || n > top) {
        return Err(Error::Config(format!("layer {bad} outside [1, {top}]")));
    }
    let mut layers = layers.clone();
    layers.insert(top);
    let layers: Vec<usize> = layers.into_iter().collect();

    let batch = bench_batch(model, config)?;
    let mut samples = vec![Vec::with_capacity(config.num_batches); layers.len()];
    for round in 0..config.warmup_batches + config.num_batches {
        for (slot, &n) in layers.iter().enumerate() {
            let start = clock.now_seconds();
            let out = model.forward_layers(&batch, n)?;
            let elapsed = clock.now_seconds() - start;
            std::hint::black_box(out);
            if round >= config.warmup_batches {
                samples[slot].push(elapsed);
            }
        }
    }
    let medians: Vec<f64> = samples.iter_mut().map(|s| median(s)).collect();
    let reference = *medians.last().expect("top layer measured");
    Ok(LatencyReport {
        batch_size: config.batch_size,
        num_batches: config.num_batches,
        warmup_batches: config.warmup_batches,
        layers: layers
            .iter()
            .zip(&medians)
            .map(|(&layer, &median_seconds)| LayerLatency {
                layer,
                median_seconds,
                speedup: if layer == top { 1.0 } else { reference / median_seconds },
            })
            .collect(),
    })
}
