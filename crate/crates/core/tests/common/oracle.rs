//! Independent references for the trainer: a term-by-term loss build and
//! a chi-square statistic.

use matryoshka2d::autodiff::{Tape, Var};
use matryoshka2d::encoder::{forward, Batch, EncoderModel};
use matryoshka2d::objectives::{kl_alignment_loss, sentence_loss};
use matryoshka2d::trainer::{Objective, TrainBatch};

/// Chi-square critical values at significance 0.01.
pub const CHI2_CRIT_DF10: f64 = 23.209;
pub const CHI2_CRIT_DF2: f64 = 9.210;

pub fn chi_square(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
}

/// Joint loss, per-term values and per-parameter gradients.
pub type ManualBuild = (f64, Vec<(Objective, f64)>, Vec<Option<Vec<f64>>>);

/// Independent build: forward once, then only the listed terms, summed in
/// list order.
pub fn manual_build(
    model: &EncoderModel,
    batch: &TrainBatch,
    n: usize,
    d: usize,
    terms: &[(Objective, f64)],
    tau: f64,
) -> ManualBuild {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let padded = Batch::new(&batch.sequences, model.config()).unwrap();
    let out = forward(&mut tape, &bound, &padded, model.num_layers()).unwrap();
    let last = *out.cls.last().unwrap();
    let shallow = out.cls[n - 1];
    let mut joint: Option<Var> = None;
    let mut comps = Vec::new();
    for &(objective, w) in terms {
        let value = match objective {
            Objective::LastFull => sentence_loss(&mut tape, last, &batch.info, tau).unwrap(),
            Objective::ShallowFull => sentence_loss(&mut tape, shallow, &batch.info, tau).unwrap(),
            Objective::LastPrefix => {
                let x = tape.slice_prefix(last, d).unwrap();
                sentence_loss(&mut tape, x, &batch.info, tau).unwrap()
            }
            Objective::ShallowPrefix => {
                let x = tape.slice_prefix(shallow, d).unwrap();
                sentence_loss(&mut tape, x, &batch.info, tau).unwrap()
            }
            Objective::Align => {
                let full = kl_alignment_loss(&mut tape, shallow, last, tau).unwrap();
                let s = tape.slice_prefix(shallow, d).unwrap();
                let t = tape.slice_prefix(last, d).unwrap();
                let part = kl_alignment_loss(&mut tape, s, t, tau).unwrap();
                tape.add(full, part).unwrap()
            }
        };
        comps.push((objective, tape.value(value).data()[0]));
        let weighted = tape.scale(value, w).unwrap();
        joint = Some(match joint {
            None => weighted,
            Some(j) => tape.add(j, weighted).unwrap(),
        });
    }
    let joint = joint.unwrap();
    let value = tape.value(joint).data()[0];
    tape.backward(joint).unwrap();
    let grads = bound.parameters().into_iter().map(|p| tape.grad(p).map(<[f64]>::to_vec)).collect();
    (value, comps, grads)
}

/// Largest `|u - v| / (1 + |u|)` over all parameters; missing gradients
/// count as zeros.
pub fn max_grad_gap(a: &[Option<Vec<f64>>], b: &[Option<Vec<f64>>]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let n = x.as_ref().or(y.as_ref()).map_or(0, Vec::len);
        let zeros = |g: &Option<Vec<f64>>| g.clone().unwrap_or_else(|| vec![0.0; n]);
        for (u, v) in zeros(x).iter().zip(zeros(y)) {
            worst = worst.max((u - v).abs() / (1.0 + u.abs()));
        }
    }
    worst
}
