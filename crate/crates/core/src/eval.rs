//! STS-style evaluation over a layer x dimension grid.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::encoder::{Batch, EncoderModel, TokenSequence};
use crate::{Error, Result};

/// Sentences embedded per forward pass.
const EMBED_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub text_a: String,
    pub text_b: String,
    pub score: f64,
}

impl ScoredPair {
    pub fn new(a: impl Into<String>, b: impl Into<String>, score: f64) -> Self {
        Self {
            text_a: a.into(),
            text_b: b.into(),
            score,
        }
    }
}

/// Fractional ranks (1-based); ties share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let midrank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = midrank;
        }
        i = j;
    }
    ranks
}

/// Pearson correlation; errors when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Input(format!(
            "correlation inputs differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "{} observations, need at least 2",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Input("correlation inputs must be finite".into()));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("an input is constant".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation with midrank tie handling.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Input(format!(
            "correlation inputs differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Input("correlation inputs must be finite".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub layer: usize,
    pub dim: usize,
    pub spearman: f64,
    pub num_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub dataset_id: String,
    pub cells: Vec<EvalCell>,
    /// Pairs dropped because a text failed to tokenize.
    pub skipped_pairs: usize,
}

impl EvalReport {
    pub fn cell(&self, layer: usize, dim: usize) -> Option<&EvalCell> {
        self.cells.iter().find(|c| c.layer == layer && c.dim == dim)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,dim,spearman,num_pairs\n");
        for c in &self.cells {
            let _ = writeln!(out, "{},{},{},{}", c.layer, c.dim, c.spearman, c.num_pairs);
        }
        out
    }

    /// Unweighted mean over several reports' matching cells.
    pub fn average(reports: &[EvalReport]) -> Result<EvalReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Input("no reports to average".into()))?;
        let mut cells = first.cells.clone();
        for r in &reports[1..] {
            for c in &mut cells {
                let other = r.cell(c.layer, c.dim).ok_or_else(|| {
                    Error::Input(format!("report lacks cell ({}, {})", c.layer, c.dim))
                })?;
                c.spearman += other.spearman;
                c.num_pairs += other.num_pairs;
            }
        }
        for c in &mut cells {
            c.spearman /= reports.len() as f64;
        }
        Ok(EvalReport {
            model_id: first.model_id.clone(),
            dataset_id: reports
                .iter()
                .map(|r| r.dataset_id.as_str())
                .collect::<Vec<_>>()
                .join("+"),
            cells,
            skipped_pairs: reports.iter().map(|r| r.skipped_pairs).sum(),
        })
    }
}

/// Texts of the usable pairs, tokenized, plus how many pairs were dropped.
struct PreparedPairs {
    a: Vec<TokenSequence>,
    b: Vec<TokenSequence>,
    gold: Vec<f64>,
    skipped: usize,
}

fn prepare(model: &EncoderModel, pairs: &[ScoredPair]) -> Result<PreparedPairs> {
    if pairs.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let tok = model.tokenizer();
    let mut out = PreparedPairs {
        a: Vec::new(),
        b: Vec::new(),
        gold: Vec::new(),
        skipped: 0,
    };
    for p in pairs {
        if !p.score.is_finite() {
            return Err(Error::Input("gold scores must be finite".into()));
        }
        match (tok.tokenize(&p.text_a), tok.tokenize(&p.text_b)) {
            (Ok(a), Ok(b)) => {
                out.a.push(a);
                out.b.push(b);
                out.gold.push(p.score);
            }
            _ => out.skipped += 1,
        }
    }
    if out.gold.is_empty() {
        return Err(Error::Input("no evaluation pair could be tokenized".into()));
    }
    Ok(out)
}

/// Full-width CLS embeddings of `seqs` at layers `1..=max_layer`.
fn embed_all(model: &EncoderModel, seqs: &[TokenSequence], max_layer: usize) -> Result<Vec<Tensor>> {
    let chunks: Vec<&[TokenSequence]> = seqs.chunks(EMBED_CHUNK).collect();
    let run = |chunk: &&[TokenSequence]| -> Result<Vec<Tensor>> {
        let batch = Batch::new(chunk, model.config())?;
        model.forward_layers(&batch, max_layer)
    };
    #[cfg(feature = "parallel")]
    let per_chunk: Vec<Vec<Tensor>> = {
        use rayon::prelude::*;
        chunks.par_iter().map(run).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let per_chunk: Vec<Vec<Tensor>> = chunks.iter().map(run).collect::<Result<_>>()?;

    let d = model.hidden_dim();
    (0..max_layer)
        .map(|l| {
            let data: Vec<f64> = per_chunk
                .iter()
                .flat_map(|layers| layers[l].data().iter().copied())
                .collect();
            Ok(Tensor::new(vec![seqs.len(), d], data)?)
        })
        .collect()
}

fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Input("zero-norm embedding".into()));
    }
    Ok(dot / (nu * nv))
}

/// Spearman between gold scores and cosine similarity of `embed(., n, d)`
/// for every requested `(n, d)`.
///
/// Embeddings are computed once per layer at full width and prefix-sliced
/// for each `d`.
pub fn evaluate(
    model: &EncoderModel,
    pairs: &[ScoredPair],
    layers: &BTreeSet<usize>,
    dims: &BTreeSet<usize>,
) -> Result<EvalReport> {
    for &n in layers {
        for &d in dims {
            model.check_layer_dim(n, d)?;
        }
    }
    if layers.is_empty() || dims.is_empty() {
        return Err(Error::Input("empty evaluation grid".into()));
    }
    let prepared = prepare(model, pairs)?;
    let max_layer = *layers.last().unwrap();
    let emb_a = embed_all(model, &prepared.a, max_layer)?;
    let emb_b = embed_all(model, &prepared.b, max_layer)?;

    let mut cells = Vec::with_capacity(layers.len() * dims.len());
    for &n in layers {
        let (ea, eb) = (&emb_a[n - 1], &emb_b[n - 1]);
        for &d in dims {
            let predicted = (0..prepared.gold.len())
                .map(|i| cosine(&ea.row(i)[..d], &eb.row(i)[..d]))
                .collect::<Result<Vec<_>>>()?;
            cells.push(EvalCell {
                layer: n,
                dim: d,
                spearman: spearman(&predicted, &prepared.gold)?,
                num_pairs: prepared.gold.len(),
            });
        }
    }
    Ok(EvalReport {
        model_id: String::new(),
        dataset_id: String::new(),
        cells,
        skipped_pairs: prepared.skipped,
    })
}

/// The default sweep: every layer, and the dimension cascade plus full width
/// (capped at the advertised size of an exported model).
pub fn full_grid(model: &EncoderModel) -> Result<(BTreeSet<usize>, BTreeSet<usize>)> {
    let layers = (1..=model.num_layers()).collect();
    let cap = model.output_dim();
    let mut dims: BTreeSet<usize> = crate::trainer::default_dim_set(model.hidden_dim())?
        .dims
        .into_iter()
        .filter(|&d| d <= cap)
        .collect();
    dims.insert(cap);
    Ok((layers, dims))
}
