//! In-browser playground for the elastic encoder.
//!
//! [`Demo`] holds a small synthetic corpus and up to two trained models (one
//! per training mode). It is plain Rust so it can be tested natively; the
//! `wasm` module wraps it for JavaScript and hands results over as JSON.

use std::collections::BTreeSet;

use matryoshka2d::data::{generate_synthetic_corpus, SyntheticCorpus, SyntheticCorpusSpec};
use matryoshka2d::elastic::{benchmark_layers, BenchConfig, Clock, LatencyReport, MIN_TIMED_BATCHES};
use matryoshka2d::encoder::{EncoderConfig, EncoderModel};
use matryoshka2d::eval::{evaluate, full_grid};
use matryoshka2d::trainer::{train, TrainConfig, TrainData};
use matryoshka2d::{Error, Result};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    TwoD,
    Plain,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "2dmse" => Ok(Mode::TwoD),
            "plain" => Ok(Mode::Plain),
            other => Err(Error::Config(format!("unknown mode {other:?}; use 2dmse or plain"))),
        }
    }
}

/// Layer x dimension table; `values[i][j]` belongs to `layers[i]`, `dims[j]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Grid {
    pub layers: Vec<usize>,
    pub dims: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub mode: &'static str,
    pub steps: usize,
    pub joint_losses: Vec<f64>,
    pub spearman: Grid,
}

pub fn demo_model_config(seed: u64) -> EncoderConfig {
    EncoderConfig {
        num_layers: 4,
        hidden_dim: 32,
        num_heads: 4,
        ffn_dim: 64,
        vocab_size: 512,
        max_seq_len: 16,
        seed,
    }
}

pub fn demo_corpus_spec(seed: u64) -> SyntheticCorpusSpec {
    SyntheticCorpusSpec {
        seed,
        ..SyntheticCorpusSpec::default()
    }
}

pub struct Demo {
    seed: u64,
    corpus: SyntheticCorpus,
    two_d: Option<EncoderModel>,
    plain: Option<EncoderModel>,
}

impl Demo {
    pub fn new(seed: u64) -> Result<Self> {
        Ok(Self {
            seed,
            corpus: generate_synthetic_corpus(&demo_corpus_spec(seed))?,
            two_d: None,
            plain: None,
        })
    }

    pub fn corpus(&self) -> &SyntheticCorpus {
        &self.corpus
    }

    pub fn model(&self, mode: Mode) -> Option<&EncoderModel> {
        match mode {
            Mode::TwoD => self.two_d.as_ref(),
            Mode::Plain => self.plain.as_ref(),
        }
    }

    /// Trains a fresh model in `mode` and scores it on the held-out pairs.
    pub fn train(&mut self, mode: Mode, epochs: usize) -> Result<TrainSummary> {
        let model = EncoderModel::init(demo_model_config(self.seed))?;
        let mut config = TrainConfig::for_hidden_dim(model.hidden_dim())?;
        config.seed = self.seed;
        config.epochs = epochs;
        config.batch_size = 16;
        config.ablation.plain = mode == Mode::Plain;
        let data = TrainData::Positives(self.corpus.train.clone());
        let (model, reports) = train(model, &data, &config, |_, _| Ok(()))?;
        let (layers, dims) = full_grid(&model)?;
        let report = evaluate(&model, &self.corpus.eval, &layers, &dims)?;
        let values = layers
            .iter()
            .map(|&n| dims.iter().map(|&d| report.cell(n, d).map_or(f64::NAN, |c| c.spearman)).collect())
            .collect();
        let summary = TrainSummary {
            mode: if mode == Mode::TwoD { "2dmse" } else { "plain" },
            steps: reports.len(),
            joint_losses: reports.iter().map(|r| r.joint).collect(),
            spearman: Grid {
                layers: layers.into_iter().collect(),
                dims: dims.into_iter().collect(),
                values,
            },
        };
        match mode {
            Mode::TwoD => self.two_d = Some(model),
            Mode::Plain => self.plain = Some(model),
        }
        Ok(summary)
    }

    /// Cosine similarity of two sentences at every (layer, dimension) cell.
    pub fn similarity(&self, mode: Mode, a: &str, b: &str) -> Result<Grid> {
        let model = self
            .model(mode)
            .ok_or_else(|| Error::Input("train a model in this mode first".into()))?;
        let (layers, dims) = full_grid(model)?;
        let mut values = Vec::new();
        for &n in &layers {
            let full = model.embed_texts(&[a, b], n, model.hidden_dim())?;
            let row = dims
                .iter()
                .map(|&d| {
                    let (x, y) = (&full.row(0)[..d], &full.row(1)[..d]);
                    let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                    let norm = |v: &[f64]| v.iter().map(|t| t * t).sum::<f64>().sqrt();
                    dot / (norm(x) * norm(y))
                })
                .collect();
            values.push(row);
        }
        Ok(Grid {
            layers: layers.into_iter().collect(),
            dims: dims.into_iter().collect(),
            values,
        })
    }

    /// Early-exit latency of the demo architecture at every depth.
    pub fn latency(&self, batch_size: usize, num_batches: usize, clock: &mut dyn Clock) -> Result<LatencyReport> {
        let model = match &self.two_d {
            Some(m) => m.clone(),
            None => EncoderModel::init(demo_model_config(self.seed))?,
        };
        let config = BenchConfig {
            batch_size,
            num_batches: num_batches.max(MIN_TIMED_BATCHES),
            warmup_batches: 1,
            seed: self.seed,
        };
        let layers: BTreeSet<usize> = (1..=model.num_layers()).collect();
        benchmark_layers(&model, &config, &layers, clock)
    }
}

#[cfg(target_arch = "wasm32")]
mod wasm {
    use wasm_bindgen::prelude::*;

    use super::{Demo, Mode};
    use matryoshka2d::elastic::Clock;

    #[wasm_bindgen]
    extern "C" {
        #[wasm_bindgen(js_namespace = performance)]
        fn now() -> f64;
    }

    struct PerformanceClock;

    impl Clock for PerformanceClock {
        fn now_seconds(&mut self) -> f64 {
            now() / 1000.0
        }
    }

    fn js<T: serde::Serialize>(r: matryoshka2d::Result<T>) -> Result<String, JsError> {
        let v = r.map_err(|e| JsError::new(&e.to_string()))?;
        serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
    }

    #[wasm_bindgen]
    pub struct Playground(Demo);

    #[wasm_bindgen]
    impl Playground {
        #[wasm_bindgen(constructor)]
        pub fn new(seed: u32) -> Result<Playground, JsError> {
            Demo::new(u64::from(seed))
                .map(Playground)
                .map_err(|e| JsError::new(&e.to_string()))
        }

        /// Up to `count` held-out pairs as JSON, for prefilling the inputs.
        #[wasm_bindgen(js_name = samplePairs)]
        pub fn sample_pairs(&self, count: usize) -> Result<String, JsError> {
            let pairs: Vec<_> = self.0.corpus().eval.iter().take(count).collect();
            js(Ok(pairs))
        }

        pub fn train(&mut self, mode: &str, epochs: usize) -> Result<String, JsError> {
            let mode = Mode::parse(mode).map_err(|e| JsError::new(&e.to_string()))?;
            js(self.0.train(mode, epochs))
        }

        pub fn similarity(&self, mode: &str, a: &str, b: &str) -> Result<String, JsError> {
            let mode = Mode::parse(mode).map_err(|e| JsError::new(&e.to_string()))?;
            js(self.0.similarity(mode, a, b))
        }

        pub fn latency(&self, batch_size: usize, num_batches: usize) -> Result<String, JsError> {
            js(self.0.latency(batch_size, num_batches, &mut PerformanceClock))
        }
    }
}
