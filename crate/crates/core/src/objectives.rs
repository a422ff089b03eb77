//! Sentence-embedding losses and the layer alignment loss.
//!
//! All losses are cosine based, so they are invariant to positive rescaling
//! of the embeddings.

use crate::autodiff::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Softmax temperature shared by the contrastive and alignment losses.
pub const DEFAULT_TAU: f64 = 0.05;

const MASKED: f64 = -1e9;

/// Supervision attached to a batch of embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub enum SupervisionInfo {
    /// Rows `0..m` are first texts, rows `m..2m` their partners; `gold[i]`
    /// in `[0, 1]` is the target similarity of pair `i`.
    PairScore { gold: Vec<f64> },
    /// `positive_of[i] = Some(j)` makes row `i` an anchor whose positive is
    /// row `j`. Every other anchor's positive is an in-batch negative.
    InBatchPositives { positive_of: Vec<Option<usize>> },
    /// Like `InBatchPositives`, plus hard negatives that join the candidate
    /// set of every anchor.
    Triplet {
        positive_of: Vec<Option<usize>>,
        negative_of: Vec<Option<usize>>,
    },
}

impl SupervisionInfo {
    /// Number of embedding rows this supervision describes.
    pub fn rows(&self) -> usize {
        match self {
            SupervisionInfo::PairScore { gold } => 2 * gold.len(),
            SupervisionInfo::InBatchPositives { positive_of } => positive_of.len(),
            SupervisionInfo::Triplet { positive_of, .. } => positive_of.len(),
        }
    }
}

/// Anchor rows with their aligned positives, plus any extra negative rows.
struct ContrastiveLayout {
    anchors: Vec<usize>,
    positives: Vec<usize>,
    negatives: Vec<usize>,
}

fn contrastive_layout(info: &SupervisionInfo, rows: usize) -> Result<ContrastiveLayout> {
    let (positive_of, negative_of) = match info {
        SupervisionInfo::InBatchPositives { positive_of } => (positive_of, None),
        SupervisionInfo::Triplet {
            positive_of,
            negative_of,
        } => (positive_of, Some(negative_of)),
        SupervisionInfo::PairScore { .. } => {
            return Err(Error::Input(
                "contrastive loss needs positive-pair supervision".into(),
            ))
        }
    };
    if rows < 2 {
        return Err(Error::Input(format!("contrastive loss needs at least 2 rows, got {rows}")));
    }
    if positive_of.len() != rows || negative_of.is_some_and(|n| n.len() != rows) {
        return Err(Error::Input(format!(
            "supervision describes {} rows but the batch has {rows}",
            positive_of.len()
        )));
    }
    let mut role = vec![false; rows];
    let mut is_positive = vec![false; rows];
    let mut layout = ContrastiveLayout {
        anchors: Vec::new(),
        positives: Vec::new(),
        negatives: Vec::new(),
    };
    for (i, p) in positive_of.iter().enumerate() {
        let Some(j) = *p else { continue };
        if j >= rows || j == i {
            return Err(Error::Input(format!("row {i} has invalid positive {j}")));
        }
        if std::mem::replace(&mut is_positive[j], true) {
            return Err(Error::Input(format!("row {j} is the positive of several anchors")));
        }
        role[i] = true;
        role[j] = true;
        layout.anchors.push(i);
        layout.positives.push(j);
    }
    if let Some(negs) = negative_of {
        for (i, n) in negs.iter().enumerate() {
            let Some(j) = *n else { continue };
            if positive_of[i].is_none() {
                return Err(Error::Input(format!("row {i} has a negative but no positive")));
            }
            if j >= rows || j == i || is_positive[j] {
                return Err(Error::Input(format!("row {i} has invalid negative {j}")));
            }
            role[j] = true;
            if !layout.negatives.contains(&j) {
                layout.negatives.push(j);
            }
        }
    }
    if let Some(orphan) = role.iter().position(|r| !r) {
        return Err(Error::Input(format!(
            "row {orphan} is an anchor without a positive"
        )));
    }
    Ok(layout)
}

/// In-batch contrastive loss:
/// `mean_i -log( exp(cos(x_i, x_i+)/tau) / sum_j exp(cos(x_i, x_j+)/tau) )`.
pub fn contrastive_loss(tape: &mut Tape, embeddings: Var, info: &SupervisionInfo, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let rows = rows_of(tape, embeddings)?;
    let layout = contrastive_layout(info, rows)?;
    let m = layout.anchors.len();
    let candidates: Vec<usize> = layout
        .positives
        .iter()
        .chain(&layout.negatives)
        .copied()
        .collect();
    let anchors = tape.gather_rows(embeddings, &layout.anchors)?;
    let cands = tape.gather_rows(embeddings, &candidates)?;
    let cos = tape.cosine_matrix(anchors, cands).map_err(zero_norm_context)?;
    let logits = tape.scale(cos, 1.0 / tau)?;
    let log_probs = tape.log_softmax(logits, 1)?;
    let mut pick = Tensor::zeros(&[m, candidates.len()]);
    for k in 0..m {
        pick.data_mut()[k * candidates.len() + k] = 1.0;
    }
    let pick = tape.constant(pick);
    let picked = tape.mul(log_probs, pick)?;
    let total = tape.sum(picked)?;
    Ok(tape.scale(total, -1.0 / m as f64)?)
}

/// Mean squared error between `(cos(a_i, b_i) + 1) / 2` and `gold[i]`.
pub fn pair_cosine_loss(tape: &mut Tape, emb_a: Var, emb_b: Var, gold: &[f64]) -> Result<Var> {
    let (ra, rb) = (rows_of(tape, emb_a)?, rows_of(tape, emb_b)?);
    if ra != rb || ra != gold.len() {
        return Err(Error::Input(format!(
            "pair loss batch sizes disagree: {ra} vs {rb} rows, {} scores",
            gold.len()
        )));
    }
    if gold.iter().any(|g| !g.is_finite()) {
        return Err(Error::Input("gold scores must be finite".into()));
    }
    let cos = tape.cosine_similarity(emb_a, emb_b).map_err(zero_norm_context)?;
    let shifted = tape.add_scalar(cos, 1.0)?;
    let predicted = tape.scale(shifted, 0.5)?;
    let target = tape.constant(Tensor::new(vec![gold.len()], gold.to_vec())?);
    let diff = tape.sub(predicted, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq)?)
}

/// The pluggable `loss(X; A)`: contrastive for positive-pair supervision,
/// pair regression for scored pairs.
pub fn sentence_loss(tape: &mut Tape, embeddings: Var, info: &SupervisionInfo, tau: f64) -> Result<Var> {
    match info {
        SupervisionInfo::PairScore { gold } => {
            let rows = rows_of(tape, embeddings)?;
            let m = gold.len();
            if rows != 2 * m {
                return Err(Error::Input(format!(
                    "{m} scored pairs need {} rows, got {rows}",
                    2 * m
                )));
            }
            let a_rows: Vec<usize> = (0..m).collect();
            let b_rows: Vec<usize> = (m..2 * m).collect();
            let a = tape.gather_rows(embeddings, &a_rows)?;
            let b = tape.gather_rows(embeddings, &b_rows)?;
            pair_cosine_loss(tape, a, b, gold)
        }
        _ => contrastive_loss(tape, embeddings, info, tau),
    }
}

/// Masked, temperature-scaled cosine logits with `-1e9` on the diagonal.
fn similarity_logits(tape: &mut Tape, embeddings: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let rows = rows_of(tape, embeddings)?;
    if rows < 2 {
        return Err(Error::Input(format!(
            "similarity distribution needs at least 2 rows, got {rows}"
        )));
    }
    let cos = tape.cosine_matrix(embeddings, embeddings).map_err(zero_norm_context)?;
    let logits = tape.scale(cos, 1.0 / tau)?;
    let mut mask = Tensor::zeros(&[rows, rows]);
    for i in 0..rows {
        mask.data_mut()[i * rows + i] = MASKED;
    }
    let mask = tape.constant(mask);
    Ok(tape.add(logits, mask)?)
}

/// Row `i`: softmax over `j != i` of `cos(x_i, x_j) / tau`; the diagonal is 0.
pub fn similarity_distribution(tape: &mut Tape, embeddings: Var, tau: f64) -> Result<Var> {
    let logits = similarity_logits(tape, embeddings, tau)?;
    Ok(tape.softmax(logits, 1)?)
}

/// `mean_i KL(q_i || p_i)` with `q` the student's and `p` the (detached)
/// teacher's in-batch similarity distribution.
pub fn kl_alignment_loss(tape: &mut Tape, student: Var, teacher: Var, tau: f64) -> Result<Var> {
    let (ss, ts) = (tape.value(student).shape().to_vec(), tape.value(teacher).shape().to_vec());
    if ss != ts {
        return Err(Error::Input(format!(
            "alignment needs equal shapes, got student {ss:?} and teacher {ts:?}"
        )));
    }
    let teacher = tape.detach(teacher)?;
    let q_logits = similarity_logits(tape, student, tau)?;
    let q = tape.softmax(q_logits, 1)?;
    let log_q = tape.log_softmax(q_logits, 1)?;
    let p_logits = similarity_logits(tape, teacher, tau)?;
    let log_p = tape.log_softmax(p_logits, 1)?;
    let log_ratio = tape.sub(log_q, log_p)?;
    let terms = tape.mul(q, log_ratio)?;
    let total = tape.sum(terms)?;
    Ok(tape.scale(total, 1.0 / ss[0] as f64)?)
}

fn rows_of(tape: &Tape, x: Var) -> Result<usize> {
    let shape = tape.value(x).shape();
    if shape.len() != 2 {
        return Err(Error::Input(format!("expected [rows, dim] embeddings, got {shape:?}")));
    }
    Ok(shape[0])
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn zero_norm_context(e: crate::autodiff::AutodiffError) -> Error {
    match e {
        crate::autodiff::AutodiffError::ZeroNorm { row, .. } => {
            Error::Input(format!("embedding row {row} has zero norm"))
        }
        other => other.into(),
    }
}
