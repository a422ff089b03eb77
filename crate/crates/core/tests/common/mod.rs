//! Helpers shared by the integration tests: a central finite-difference
//! gradient oracle, seeded random tensors and small model fixtures.
#![allow(dead_code)]

pub mod cases;
pub mod oracle;

use matryoshka2d::autodiff::{Tape, Tensor, Var};
use matryoshka2d::encoder::{Batch, EncoderConfig, EncoderModel, TokenSequence, CLS_ID, NUM_RESERVED};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Step for central differences; truncation error is O(h^2).
pub const FD_STEP: f64 = 1e-5;
/// Relative errors are measured against max(|analytic|, |numeric|, floor)
/// so gradients that are exactly zero do not divide by zero.
pub const REL_FLOOR: f64 = 1e-8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Contracts any tensor to a scalar with fixed pseudo-random weights so
/// every output element contributes a distinct amount to the gradient.
pub fn project(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let mut r = rng(seed ^ 0x9e37_79b9);
    let w = random_tensor(&mut r, &shape, 1.0);
    let w = tape.constant(w);
    let prod = tape.mul(x, w).unwrap();
    tape.sum(prod).unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Compares reverse-mode gradients of `f(inputs)` with central differences.
/// `f` must build a scalar from the given leaves on a fresh tape.
pub fn grad_check<F>(inputs: &[Tensor], f: F) -> GradCheck
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars);
    assert_eq!(tape.value(loss).len(), 1, "objective must be scalar");
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).data()[0]
    };

    let mut worst = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let h = FD_STEP;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let x = input.data()[j];
            let mut at = |offset: f64| {
                work[k].data_mut()[j] = x + offset;
                let v = eval(&work);
                work[k].data_mut()[j] = x;
                v
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            let a = analytic[k][j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst.max_abs_error = worst.max_abs_error.max(abs);
            worst.max_rel_error = worst.max_rel_error.max(rel);
            worst.checked += 1;
        }
    }
    worst
}

pub fn tiny_config(seed: u64) -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        hidden_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        vocab_size: 40,
        max_seq_len: 8,
        seed,
    }
}

pub fn desk_model(seed: u64) -> EncoderModel {
    EncoderModel::init(EncoderConfig {
        seed,
        ..EncoderConfig::default()
    })
    .unwrap()
}

/// Random token sequences of length `min_len..=max_len` (including CLS).
pub fn random_sequences(
    rng: &mut impl Rng,
    cfg: &EncoderConfig,
    count: usize,
    min_len: usize,
    max_len: usize,
) -> Vec<TokenSequence> {
    (0..count)
        .map(|_| {
            let len = rng.random_range(min_len..=max_len);
            let mut ids = vec![CLS_ID];
            ids.extend((1..len).map(|_| rng.random_range(NUM_RESERVED..cfg.vocab_size as u32)));
            TokenSequence::new(ids).unwrap()
        })
        .collect()
}

pub fn random_batch(seed: u64, cfg: &EncoderConfig, count: usize) -> Batch {
    let mut r = rng(seed);
    let seqs = random_sequences(&mut r, cfg, count, 2, cfg.max_seq_len);
    Batch::new(&seqs, cfg).unwrap()
}

/// Bitwise equality of two tensors, NaN-safe.
pub fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}
