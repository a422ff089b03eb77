//! Two-dimensional matryoshka training.
//!
//! Every step runs the encoder once, samples a shallow layer `n` and an
//! embedding size `d`, and combines up to five objectives:
//!
//! | key      | embedding            |
//! |----------|----------------------|
//! | `L_N_D`  | last layer, full     |
//! | `L_n_D`  | layer `n`, full      |
//! | `L_N_d`  | last layer, prefix   |
//! | `L_n_d`  | layer `n`, prefix    |
//! | `L_align`| KL of layer `n` similarities towards the last layer's |
//!
//! The joint loss is `sum(lambda_L * L)`. Objectives whose effective weight is
//! zero are never built, so a zero weight and an absent term are the same
//! computation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::TrainExample;
use crate::encoder::{self, Batch, BoundEncoder, EncoderModel, TokenSequence, Tokenizer};
use crate::eval::ScoredPair;
use crate::objectives::{self, SupervisionInfo};
use crate::rng::{self, Stream};
use crate::{Error, Result};

/// Learning rate when fine-tuning an existing checkpoint.
pub const FINETUNE_LEARNING_RATE: f64 = 5e-5;
/// Learning rate when training from random initialization.
pub const SCRATCH_LEARNING_RATE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Objective {
    #[serde(rename = "L_N_D")]
    LastFull,
    #[serde(rename = "L_n_D")]
    ShallowFull,
    #[serde(rename = "L_N_d")]
    LastPrefix,
    #[serde(rename = "L_n_d")]
    ShallowPrefix,
    #[serde(rename = "L_align")]
    Align,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::LastFull,
        Objective::ShallowFull,
        Objective::LastPrefix,
        Objective::ShallowPrefix,
        Objective::Align,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Objective::LastFull => "L_N_D",
            Objective::ShallowFull => "L_n_D",
            Objective::LastPrefix => "L_N_d",
            Objective::ShallowPrefix => "L_n_d",
            Objective::Align => "L_align",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.key() == key)
    }
}

/// Per-objective weights `lambda_L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    #[serde(rename = "L_N_D")]
    pub last_full: f64,
    #[serde(rename = "L_n_D")]
    pub shallow_full: f64,
    #[serde(rename = "L_N_d")]
    pub last_prefix: f64,
    #[serde(rename = "L_n_d")]
    pub shallow_prefix: f64,
    #[serde(rename = "L_align")]
    pub align: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

impl LossWeights {
    pub fn uniform(w: f64) -> Self {
        Self {
            last_full: w,
            shallow_full: w,
            last_prefix: w,
            shallow_prefix: w,
            align: w,
        }
    }

    pub fn get(&self, o: Objective) -> f64 {
        match o {
            Objective::LastFull => self.last_full,
            Objective::ShallowFull => self.shallow_full,
            Objective::LastPrefix => self.last_prefix,
            Objective::ShallowPrefix => self.shallow_prefix,
            Objective::Align => self.align,
        }
    }

    pub fn set(&mut self, o: Objective, w: f64) {
        match o {
            Objective::LastFull => self.last_full = w,
            Objective::ShallowFull => self.shallow_full = w,
            Objective::LastPrefix => self.last_prefix = w,
            Objective::ShallowPrefix => self.shallow_prefix = w,
            Objective::Align => self.align = w,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimMode {
    /// One `d` drawn from the dimension set per step.
    #[default]
    SampleOne,
    /// Every `d` in the set each step; prefix objectives are averaged.
    FullSweep,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Drops `L_align`.
    pub disable_align: bool,
    /// Drops `L_N_D` and `L_N_d`.
    pub disable_last_layer: bool,
    /// Last layer only: `L_N_D` and `L_N_d`.
    pub mrl_only: bool,
    /// `L_N_D` only.
    pub plain: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dims: Vec<usize>,
    pub lambdas: LossWeights,
    pub dim_mode: DimMode,
    pub ablation: Ablation,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults for a model of hidden size `hidden_dim` trained from scratch.
    pub fn for_hidden_dim(hidden_dim: usize) -> Result<Self> {
        Ok(Self {
            dims: default_dim_set(hidden_dim)?.dims,
            lambdas: LossWeights::default(),
            dim_mode: DimMode::SampleOne,
            ablation: Ablation::default(),
            learning_rate: SCRATCH_LEARNING_RATE,
            weight_decay: 0.01,
            epochs: 3,
            batch_size: 32,
            tau: objectives::DEFAULT_TAU,
            seed: rng::DEFAULT_SEED,
        })
    }

    /// Weights after applying the ablation flags.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.lambdas;
        let a = self.ablation;
        if a.disable_align {
            w.align = 0.0;
        }
        if a.disable_last_layer {
            w.last_full = 0.0;
            w.last_prefix = 0.0;
        }
        if a.mrl_only {
            w.shallow_full = 0.0;
            w.shallow_prefix = 0.0;
            w.align = 0.0;
        }
        if a.plain {
            w = LossWeights {
                last_full: w.last_full,
                ..LossWeights::uniform(0.0)
            };
        }
        w
    }

    pub fn validate(&self, num_layers: usize, hidden_dim: usize) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::Config("dimension set is empty".into()));
        }
        if self.dims.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "dimension set {:?} is not strictly increasing",
                self.dims
            )));
        }
        if self.dims[0] == 0 || *self.dims.last().unwrap() >= hidden_dim {
            return Err(Error::Config(format!(
                "dimensions must lie in [1, {}], got {:?}",
                hidden_dim - 1,
                self.dims
            )));
        }
        let lambdas = Objective::ALL.map(|o| self.lambdas.get(o));
        if lambdas.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if Objective::ALL.iter().all(|&o| self.effective_weights().get(o) == 0.0) {
            return Err(Error::Config("every loss weight is zero".into()));
        }
        if num_layers < 2 {
            return Err(Error::Config(
                "two-dimensional training needs at least 2 layers".into(),
            ));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// A dimension set, plus a note when the degenerate fallback was used.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DimSet {
    pub dims: Vec<usize>,
    pub warning: Option<String>,
}

/// Powers of two from 8 up to (excluding) `hidden_dim`; `{hidden_dim / 2}`
/// for models narrower than 8.
pub fn default_dim_set(hidden_dim: usize) -> Result<DimSet> {
    if hidden_dim >= 8 {
        let dims = std::iter::successors(Some(8usize), |d| Some(d * 2))
            .take_while(|&d| d < hidden_dim)
            .collect::<Vec<_>>();
        if dims.is_empty() {
            // hidden_dim == 8
            return Ok(DimSet {
                dims: vec![hidden_dim / 2],
                warning: Some(format!(
                    "hidden size {hidden_dim} leaves no power of two below it; using {{{}}}",
                    hidden_dim / 2
                )),
            });
        }
        return Ok(DimSet { dims, warning: None });
    }
    let half = hidden_dim / 2;
    if half == 0 {
        return Err(Error::Config(format!(
            "hidden size {hidden_dim} is too small for nested dimensions"
        )));
    }
    Ok(DimSet {
        dims: vec![half],
        warning: Some(format!(
            "hidden size {hidden_dim} is below 8; using {{{half}}}"
        )),
    })
}

/// Uniform shallow layer in `[1, num_layers - 1]`.
pub fn sample_layer(rng: &mut impl Rng, num_layers: usize) -> Result<usize> {
    if num_layers < 2 {
        return Err(Error::Config(format!(
            "a {num_layers}-layer model has no shallow layer to sample"
        )));
    }
    Ok(rng.random_range(1..num_layers))
}

/// Uniform member of `dims`.
pub fn sample_dim(rng: &mut impl Rng, dims: &[usize]) -> Result<usize> {
    if dims.is_empty() {
        return Err(Error::Config("cannot sample from an empty dimension set".into()));
    }
    Ok(dims[rng.random_range(0..dims.len())])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DimChoice {
    One(usize),
    Sweep,
}

/// Layer and dimension used by one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepSample {
    pub layer: usize,
    pub dim: DimChoice,
}

/// Tokenized batch with its supervision.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub sequences: Vec<TokenSequence>,
    pub info: SupervisionInfo,
}

impl TrainBatch {
    /// Rows: anchors, then positives, then negatives of the examples that
    /// have one.
    pub fn from_examples(examples: &[TrainExample], tokenizer: &Tokenizer) -> Result<Self> {
        let tokenized = examples
            .iter()
            .map(|e| TokenizedExample::new(e, tokenizer))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&TokenizedExample> = tokenized.iter().collect();
        Ok(Self::from_tokenized(&refs))
    }

    pub fn from_scored(pairs: &[ScoredPair], tokenizer: &Tokenizer) -> Result<Self> {
        let tokenized = pairs
            .iter()
            .map(|p| TokenizedScored::new(p, tokenizer))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&TokenizedScored> = tokenized.iter().collect();
        Ok(Self::from_tokenized_scored(&refs))
    }

    fn from_tokenized(examples: &[&TokenizedExample]) -> Self {
        let m = examples.len();
        let with_neg: Vec<&TokenizedExample> =
            examples.iter().copied().filter(|e| e.negative.is_some()).collect();
        let rows = 2 * m + with_neg.len();
        let mut sequences = Vec::with_capacity(rows);
        sequences.extend(examples.iter().map(|e| e.anchor.clone()));
        sequences.extend(examples.iter().map(|e| e.positive.clone()));
        sequences.extend(with_neg.iter().map(|e| e.negative.clone().unwrap()));
        let mut positive_of = vec![None; rows];
        for (i, p) in positive_of.iter_mut().take(m).enumerate() {
            *p = Some(m + i);
        }
        let info = if with_neg.is_empty() {
            SupervisionInfo::InBatchPositives { positive_of }
        } else {
            let mut negative_of = vec![None; rows];
            let mut next = 2 * m;
            for (i, e) in examples.iter().enumerate() {
                if e.negative.is_some() {
                    negative_of[i] = Some(next);
                    next += 1;
                }
            }
            SupervisionInfo::Triplet {
                positive_of,
                negative_of,
            }
        };
        Self { sequences, info }
    }

    fn from_tokenized_scored(pairs: &[&TokenizedScored]) -> Self {
        let mut sequences: Vec<TokenSequence> = pairs.iter().map(|p| p.a.clone()).collect();
        sequences.extend(pairs.iter().map(|p| p.b.clone()));
        Self {
            sequences,
            info: SupervisionInfo::PairScore {
                gold: pairs.iter().map(|p| p.gold).collect(),
            },
        }
    }
}

struct TokenizedExample {
    anchor: TokenSequence,
    positive: TokenSequence,
    negative: Option<TokenSequence>,
}

impl TokenizedExample {
    fn new(e: &TrainExample, tok: &Tokenizer) -> Result<Self> {
        Ok(Self {
            anchor: tok.tokenize(&e.anchor)?,
            positive: tok.tokenize(&e.positive)?,
            negative: e.negative.as_deref().map(|n| tok.tokenize(n)).transpose()?,
        })
    }
}

struct TokenizedScored {
    a: TokenSequence,
    b: TokenSequence,
    gold: f64,
}

impl TokenizedScored {
    fn new(p: &ScoredPair, tok: &Tokenizer) -> Result<Self> {
        Ok(Self {
            a: tok.tokenize(&p.text_a)?,
            b: tok.tokenize(&p.text_b)?,
            gold: p.score,
        })
    }
}

/// Joint loss and its components, recorded on a tape.
#[derive(Debug, Clone)]
pub struct StepGraph {
    pub joint: Var,
    pub components: Vec<(Objective, Var)>,
}

/// Builds the weighted joint objective for one batch and sample.
///
/// CLS states that overflow or vanish are reported as divergence with step 0;
/// [`Trainer`] substitutes its own step counter.
pub fn build_objective(
    tape: &mut Tape,
    encoder: &BoundEncoder,
    batch: &TrainBatch,
    sample: StepSample,
    config: &TrainConfig,
) -> Result<StepGraph> {
    let num_layers = encoder.blocks.len();
    if sample.layer == 0 || sample.layer >= num_layers {
        return Err(Error::Config(format!(
            "sampled layer {} outside [1, {}]",
            sample.layer,
            num_layers - 1
        )));
    }
    let padded = Batch::new(&batch.sequences, &encoder.config)?;
    let out = encoder::forward(tape, encoder, &padded, num_layers)?;
    let last = out.cls[num_layers - 1];
    let shallow = out.cls[sample.layer - 1];
    let dims = match sample.dim {
        DimChoice::One(d) => vec![d],
        DimChoice::Sweep => config.dims.clone(),
    };
    let weights = config.effective_weights();
    let tau = config.tau;
    let info = &batch.info;
    if let Some(layer) = degenerate_layer(tape, &out.cls) {
        let mut breakdown: Vec<String> = Objective::ALL
            .iter()
            .filter(|&&o| weights.get(o) != 0.0)
            .map(|o| format!("{}=NaN", o.key()))
            .collect();
        breakdown.push(format!("(layer {layer} embeddings are non-finite or zero)"));
        return Err(Error::Divergence {
            step: 0,
            breakdown: breakdown.join(" "),
        });
    }

    let mut components = Vec::new();
    for objective in Objective::ALL {
        if weights.get(objective) == 0.0 {
            continue;
        }
        let value = match objective {
            Objective::LastFull => objectives::sentence_loss(tape, last, info, tau)?,
            Objective::ShallowFull => objectives::sentence_loss(tape, shallow, info, tau)?,
            Objective::LastPrefix => prefix_mean(tape, last, &dims, |t, x| {
                objectives::sentence_loss(t, x, info, tau)
            })?,
            Objective::ShallowPrefix => prefix_mean(tape, shallow, &dims, |t, x| {
                objectives::sentence_loss(t, x, info, tau)
            })?,
            Objective::Align => {
                let full = objectives::kl_alignment_loss(tape, shallow, last, tau)?;
                let mut prefix_terms = Vec::with_capacity(dims.len());
                for &d in &dims {
                    let s = tape.slice_prefix(shallow, d)?;
                    let t = tape.slice_prefix(last, d)?;
                    prefix_terms.push(objectives::kl_alignment_loss(tape, s, t, tau)?);
                }
                let prefix = mean_of(tape, &prefix_terms)?;
                tape.add(full, prefix)?
            }
        };
        components.push((objective, value));
    }

    let mut joint: Option<Var> = None;
    for &(objective, value) in &components {
        let weighted = tape.scale(value, weights.get(objective))?;
        joint = Some(match joint {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
    }
    let joint = joint.ok_or_else(|| Error::Config("every loss weight is zero".into()))?;
    Ok(StepGraph { joint, components })
}

/// First layer whose CLS rows overflow or vanish, making cosines undefined.
fn degenerate_layer(tape: &Tape, cls: &[Var]) -> Option<usize> {
    cls.iter().position(|&v| {
        let t = tape.value(v);
        (0..t.rows()).any(|i| {
            let sq: f64 = t.row(i).iter().map(|x| x * x).sum();
            !(sq.is_finite() && sq > 0.0)
        })
    })
    .map(|i| i + 1)
}

fn prefix_mean(
    tape: &mut Tape,
    x: Var,
    dims: &[usize],
    mut loss: impl FnMut(&mut Tape, Var) -> Result<Var>,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(dims.len());
    for &d in dims {
        let p = tape.slice_prefix(x, d)?;
        terms.push(loss(tape, p)?);
    }
    mean_of(tape, &terms)
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f64)?)
}

/// One line of the step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStepReport {
    pub step: usize,
    pub layer: usize,
    /// `None` when every dimension was used (full sweep).
    pub dim: Option<usize>,
    pub dim_mode: DimMode,
    /// Only objectives that were built this step.
    pub losses: BTreeMap<Objective, f64>,
    pub joint: f64,
}

impl TrainStepReport {
    /// Value of an objective; zero when it was not part of the step.
    pub fn component(&self, o: Objective) -> f64 {
        self.losses.get(&o).copied().unwrap_or(0.0)
    }

    fn breakdown(&self) -> String {
        let mut s = String::new();
        for (o, v) in &self.losses {
            let _ = write!(s, "{}={v} ", o.key());
        }
        s.trim_end().to_string()
    }
}

/// Decoupled-weight-decay Adam with a constant learning rate.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Updates every parameter of `model`; `grads[i]` belongs to the i-th
    /// entry of [`EncoderModel::parameters`]; a missing gradient counts as zero.
    pub fn step(&mut self, model: &mut EncoderModel, grads: &[Option<Vec<f64>>]) {
        let decay: Vec<bool> = model.parameters().iter().map(|p| p.is_matrix()).collect();
        let mut params = model.parameters_mut();
        assert_eq!(params.len(), grads.len());
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let lr = self.learning_rate;
        for (i, param) in params.iter_mut().enumerate() {
            let data = Arc::make_mut(param).data_mut();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let wd = if decay[i] { self.weight_decay } else { 0.0 };
            for (j, p) in data.iter_mut().enumerate() {
                let g = grads[i].as_ref().map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *p -= lr * (update + wd * *p);
            }
        }
    }
}

/// Forward + backward for one batch without touching the weights.
pub fn compute_gradients(
    model: &EncoderModel,
    batch: &TrainBatch,
    sample: StepSample,
    config: &TrainConfig,
) -> Result<(TrainStepValues, Vec<Option<Vec<f64>>>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let graph = build_objective(&mut tape, &bound, batch, sample, config)?;
    let values = TrainStepValues {
        joint: scalar(tape.value(graph.joint)),
        losses: graph
            .components
            .iter()
            .map(|&(o, v)| (o, scalar(tape.value(v))))
            .collect(),
    };
    if !values.joint.is_finite() {
        return Ok((values, Vec::new()));
    }
    tape.backward(graph.joint)?;
    let grads = bound
        .parameters()
        .into_iter()
        .map(|p| tape.grad(p).map(<[f64]>::to_vec))
        .collect();
    Ok((values, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainStepValues {
    pub joint: f64,
    pub losses: BTreeMap<Objective, f64>,
}

fn scalar(t: &Tensor) -> f64 {
    t.data()[0]
}

/// Stateful training loop over one model.
pub struct Trainer {
    model: EncoderModel,
    config: TrainConfig,
    optimizer: AdamW,
    sampler: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(model: EncoderModel, config: TrainConfig) -> Result<Self> {
        config.validate(model.num_layers(), model.hidden_dim())?;
        Ok(Self {
            optimizer: AdamW::new(config.learning_rate, config.weight_decay),
            sampler: rng::stream(config.seed, Stream::Sampling),
            model,
            config,
            step: 0,
        })
    }

    pub fn model(&self) -> &EncoderModel {
        &self.model
    }

    pub fn into_model(self) -> EncoderModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Draws the next `(n, d)` from the sampling stream.
    pub fn sample(&mut self) -> Result<StepSample> {
        let layer = sample_layer(&mut self.sampler, self.model.num_layers())?;
        let dim = match self.config.dim_mode {
            DimMode::SampleOne => DimChoice::One(sample_dim(&mut self.sampler, &self.config.dims)?),
            DimMode::FullSweep => DimChoice::Sweep,
        };
        Ok(StepSample { layer, dim })
    }

    pub fn step(&mut self, batch: &TrainBatch) -> Result<TrainStepReport> {
        let sample = self.sample()?;
        self.step_with(batch, sample)
    }

    /// One optimizer step with an explicit sample.
    pub fn step_with(&mut self, batch: &TrainBatch, sample: StepSample) -> Result<TrainStepReport> {
        let (values, grads) = match compute_gradients(&self.model, batch, sample, &self.config) {
            Err(Error::Divergence { breakdown, .. }) => {
                return Err(Error::Divergence {
                    step: self.step,
                    breakdown,
                })
            }
            other => other?,
        };
        let report = TrainStepReport {
            step: self.step,
            layer: sample.layer,
            dim: match sample.dim {
                DimChoice::One(d) => Some(d),
                DimChoice::Sweep => None,
            },
            dim_mode: self.config.dim_mode,
            losses: values.losses,
            joint: values.joint,
        };
        if !report.joint.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                breakdown: report.breakdown(),
            });
        }
        self.optimizer.step(&mut self.model, &grads);
        self.step += 1;
        Ok(report)
    }
}

/// Training data with its supervision kind.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainData {
    /// Anchor/positive(/negative) examples, contrastive loss.
    Positives(Vec<TrainExample>),
    /// Graded pairs, pair regression loss.
    Scored(Vec<ScoredPair>),
}

impl TrainData {
    pub fn len(&self) -> usize {
        match self {
            TrainData::Positives(v) => v.len(),
            TrainData::Scored(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

enum Tokenized {
    Positives(Vec<TokenizedExample>),
    Scored(Vec<TokenizedScored>),
}

impl Tokenized {
    fn batch(&self, order: &[usize]) -> TrainBatch {
        match self {
            Tokenized::Positives(v) => {
                let refs: Vec<&TokenizedExample> = order.iter().map(|&i| &v[i]).collect();
                TrainBatch::from_tokenized(&refs)
            }
            Tokenized::Scored(v) => {
                let refs: Vec<&TokenizedScored> = order.iter().map(|&i| &v[i]).collect();
                TrainBatch::from_tokenized_scored(&refs)
            }
        }
    }
}

/// Runs `epochs` passes over `data`, reshuffling each epoch from the data
/// stream. Batches with fewer than two examples are skipped. `observer`
/// sees every step report with the model after that step.
pub fn train(
    model: EncoderModel,
    data: &TrainData,
    config: &TrainConfig,
    mut observer: impl FnMut(&TrainStepReport, &EncoderModel) -> Result<()>,
) -> Result<(EncoderModel, Vec<TrainStepReport>)> {
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if data.len() < 2 {
        return Err(Error::Input("training needs at least two examples per batch".into()));
    }
    let tok = model.tokenizer();
    let tokenized = match data {
        TrainData::Positives(v) => Tokenized::Positives(
            v.iter()
                .map(|e| TokenizedExample::new(e, &tok))
                .collect::<Result<_>>()?,
        ),
        TrainData::Scored(v) => Tokenized::Scored(
            v.iter()
                .map(|p| TokenizedScored::new(p, &tok))
                .collect::<Result<_>>()?,
        ),
    };
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut shuffler = rng::stream(config.seed, Stream::Data);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut reports = Vec::new();
    for _ in 0..config.epochs {
        order.shuffle(&mut shuffler);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = tokenized.batch(chunk);
            let report = trainer.step(&batch)?;
            observer(&report, trainer.model())?;
            reports.push(report);
        }
    }
    Ok((trainer.into_model(), reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn default_dims_follow_doubling_rule() {
        assert_eq!(default_dim_set(768).unwrap().dims, vec![8, 16, 32, 64, 128, 256, 512]);
        assert_eq!(default_dim_set(64).unwrap().dims, vec![8, 16, 32]);
        let degenerate = default_dim_set(8).unwrap();
        assert_eq!(degenerate.dims, vec![4]);
        assert!(degenerate.warning.is_some());
        assert_eq!(default_dim_set(6).unwrap().dims, vec![3]);
        assert!(default_dim_set(1).is_err());
    }

    #[test]
    fn layer_sampling_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_layer(&mut rng, 2).unwrap(), 1);
            let n = sample_layer(&mut rng, 12).unwrap();
            assert!((1..12).contains(&n));
        }
        assert!(sample_layer(&mut rng, 1).is_err());
    }

    #[test]
    fn dim_sampling_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_dim(&mut rng, &[8]).unwrap(), 8);
        for _ in 0..100 {
            assert!([8, 16, 32].contains(&sample_dim(&mut rng, &[8, 16, 32]).unwrap()));
        }
        assert!(sample_dim(&mut rng, &[]).is_err());
    }

    #[test]
    fn ablation_flags_zero_weights() {
        let mut cfg = TrainConfig::for_hidden_dim(64).unwrap();
        cfg.ablation.plain = true;
        let w = cfg.effective_weights();
        assert_eq!(
            Objective::ALL.map(|o| w.get(o)),
            [1.0, 0.0, 0.0, 0.0, 0.0]
        );
        cfg.ablation = Ablation {
            disable_last_layer: true,
            ..Ablation::default()
        };
        let w = cfg.effective_weights();
        assert_eq!(w.last_full, 0.0);
        assert_eq!(w.last_prefix, 0.0);
        assert_eq!(w.align, 1.0);
        cfg.ablation = Ablation {
            mrl_only: true,
            ..Ablation::default()
        };
        let w = cfg.effective_weights();
        assert_eq!(Objective::ALL.map(|o| w.get(o)), [1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::for_hidden_dim(64).unwrap();
        assert!(ok.validate(4, 64).is_ok());
        assert!(ok.validate(1, 64).is_err());
        let mut bad = ok.clone();
        bad.dims = vec![16, 8];
        assert!(bad.validate(4, 64).is_err());
        bad.dims = vec![8, 64];
        assert!(bad.validate(4, 64).is_err());
        let mut zero = ok.clone();
        zero.lambdas = LossWeights::uniform(0.0);
        assert!(zero.validate(4, 64).is_err());
        let mut neg = ok;
        neg.lambdas.align = -1.0;
        assert!(neg.validate(4, 64).is_err());
    }

    #[test]
    fn objective_keys_round_trip() {
        for o in Objective::ALL {
            assert_eq!(Objective::from_key(o.key()), Some(o));
            assert_eq!(serde_json::to_string(&o).unwrap(), format!("\"{}\"", o.key()));
        }
    }

    #[test]
    fn scored_batches_put_partners_in_second_half() {
        let cfg = crate::encoder::EncoderConfig::default();
        let tok = Tokenizer::new(&cfg);
        let pairs = vec![
            ScoredPair::new("a b", "c d", 1.0),
            ScoredPair::new("e", "f", 0.0),
        ];
        let batch = TrainBatch::from_scored(&pairs, &tok).unwrap();
        assert_eq!(batch.sequences.len(), 4);
        assert_eq!(batch.sequences[2], tok.tokenize("c d").unwrap());
        assert_eq!(batch.info, SupervisionInfo::PairScore { gold: vec![1.0, 0.0] });
    }

    #[test]
    fn triplet_batches_append_negatives() {
        let tok = Tokenizer::new(&crate::encoder::EncoderConfig::default());
        let ex = vec![
            TrainExample::new("a", "b").with_negative("z"),
            TrainExample::new("c", "d"),
        ];
        let batch = TrainBatch::from_examples(&ex, &tok).unwrap();
        assert_eq!(batch.sequences.len(), 5);
        match batch.info {
            SupervisionInfo::Triplet {
                positive_of,
                negative_of,
            } => {
                assert_eq!(positive_of[..2], [Some(2), Some(3)]);
                assert_eq!(negative_of[0], Some(4));
                assert_eq!(negative_of[1], None);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
