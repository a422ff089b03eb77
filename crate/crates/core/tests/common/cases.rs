//! Gradient-check cases: one per differentiable op, plus randomly composed
//! graphs.

use matryoshka2d::autodiff::{Tape, Tensor, Var};
use matryoshka2d::objectives::{self, SupervisionInfo};
use rand::Rng;

use super::{project, random_tensor, rng};

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

pub struct Case {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

fn case(name: &str, inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var + 'static) -> Case {
    Case {
        name: name.to_string(),
        inputs,
        build: Box::new(build),
    }
}

/// One case per op; each output is projected to a scalar.
pub fn op_cases() -> Vec<Case> {
    let mut r = rng(7);
    let mut t = |shape: &[usize]| random_tensor(&mut r, shape, 1.0);
    let p = |tape: &mut Tape, v: Var| project(tape, v, 11);
    vec![
        case("matmul", vec![t(&[3, 4]), t(&[4, 5])], move |tp, v| {
            let y = tp.matmul(v[0], v[1]).unwrap();
            p(tp, y)
        }),
        case("transpose", vec![t(&[3, 4])], move |tp, v| {
            let y = tp.transpose(v[0]).unwrap();
            p(tp, y)
        }),
        case("batch_matmul", vec![t(&[2, 3, 4]), t(&[2, 4, 3])], move |tp, v| {
            let y = tp.batch_matmul(v[0], v[1], false).unwrap();
            p(tp, y)
        }),
        case("batch_matmul_transposed", vec![t(&[2, 3, 4]), t(&[2, 5, 4])], move |tp, v| {
            let y = tp.batch_matmul(v[0], v[1], true).unwrap();
            p(tp, y)
        }),
        case("add", vec![t(&[3, 4]), t(&[3, 4])], move |tp, v| {
            let y = tp.add(v[0], v[1]).unwrap();
            p(tp, y)
        }),
        case("sub", vec![t(&[3, 4]), t(&[3, 4])], move |tp, v| {
            let y = tp.sub(v[0], v[1]).unwrap();
            p(tp, y)
        }),
        case("mul", vec![t(&[3, 4]), t(&[3, 4])], move |tp, v| {
            let y = tp.mul(v[0], v[1]).unwrap();
            p(tp, y)
        }),
        case("mul_self", vec![t(&[3, 4])], move |tp, v| {
            let y = tp.mul(v[0], v[0]).unwrap();
            p(tp, y)
        }),
        case("add_row", vec![t(&[2, 3, 4]), t(&[4])], move |tp, v| {
            let y = tp.add_row(v[0], v[1]).unwrap();
            p(tp, y)
        }),
        case("scale", vec![t(&[3, 4])], move |tp, v| {
            let y = tp.scale(v[0], -2.5).unwrap();
            p(tp, y)
        }),
        case("add_scalar", vec![t(&[3, 4])], move |tp, v| {
            let y = tp.add_scalar(v[0], 0.75).unwrap();
            p(tp, y)
        }),
        case("gelu", vec![t(&[3, 4])], move |tp, v| {
            let x = tp.scale(v[0], 3.0).unwrap();
            let y = tp.gelu(x).unwrap();
            p(tp, y)
        }),
        case("layer_norm", vec![t(&[3, 5]), t(&[5]), t(&[5])], move |tp, v| {
            let y = tp.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            p(tp, y)
        }),
        case("softmax_last", vec![t(&[3, 4])], move |tp, v| {
            let y = tp.softmax(v[0], 1).unwrap();
            p(tp, y)
        }),
        case("softmax_first", vec![t(&[3, 4])], move |tp, v| {
            let y = tp.softmax(v[0], 0).unwrap();
            p(tp, y)
        }),
        case("softmax_middle", vec![t(&[2, 3, 4])], move |tp, v| {
            let y = tp.softmax(v[0], 1).unwrap();
            p(tp, y)
        }),
        case("log_softmax_last", vec![t(&[3, 4])], move |tp, v| {
            let y = tp.log_softmax(v[0], 1).unwrap();
            p(tp, y)
        }),
        case("log_softmax_middle", vec![t(&[2, 3, 4])], move |tp, v| {
            let y = tp.log_softmax(v[0], 1).unwrap();
            p(tp, y)
        }),
        case("slice_last", vec![t(&[3, 6])], move |tp, v| {
            let y = tp.slice_last(v[0], 2, 3).unwrap();
            p(tp, y)
        }),
        case("slice_prefix", vec![t(&[3, 6])], move |tp, v| {
            let y = tp.slice_prefix(v[0], 4).unwrap();
            p(tp, y)
        }),
        case("concat_last", vec![t(&[3, 2]), t(&[3, 3])], move |tp, v| {
            let y = tp.concat_last(&[v[0], v[1], v[0]]).unwrap();
            p(tp, y)
        }),
        case("gather_rows", vec![t(&[4, 3])], move |tp, v| {
            let y = tp.gather_rows(v[0], &[2, 0, 2, 3]).unwrap();
            p(tp, y)
        }),
        case("reshape", vec![t(&[3, 4])], move |tp, v| {
            let y = tp.reshape(v[0], &[2, 6]).unwrap();
            p(tp, y)
        }),
        case("sum", vec![t(&[3, 4])], move |tp, v| {
            let y = tp.mul(v[0], v[0]).unwrap();
            tp.sum(y).unwrap()
        }),
        case("mean", vec![t(&[3, 4])], move |tp, v| {
            let y = tp.mul(v[0], v[0]).unwrap();
            tp.mean(y).unwrap()
        }),
        case("sum_last", vec![t(&[2, 3, 4])], move |tp, v| {
            let y = tp.sum_last(v[0]).unwrap();
            p(tp, y)
        }),
        case("normalize_rows", vec![t(&[3, 4])], move |tp, v| {
            let y = tp.normalize_rows(v[0]).unwrap();
            p(tp, y)
        }),
        case("cosine_similarity", vec![t(&[3, 4]), t(&[3, 4])], move |tp, v| {
            let y = tp.cosine_similarity(v[0], v[1]).unwrap();
            p(tp, y)
        }),
        case("cosine_matrix", vec![t(&[3, 4]), t(&[5, 4])], move |tp, v| {
            let y = tp.cosine_matrix(v[0], v[1]).unwrap();
            p(tp, y)
        }),
        case("contrastive_loss", vec![t(&[4, 5])], move |tp, v| {
            let info = SupervisionInfo::InBatchPositives {
                positive_of: vec![Some(2), Some(3), None, None],
            };
            objectives::contrastive_loss(tp, v[0], &info, 0.5).unwrap()
        }),
        case("pair_cosine_loss", vec![t(&[3, 4]), t(&[3, 4])], move |tp, v| {
            objectives::pair_cosine_loss(tp, v[0], v[1], &[0.2, 0.9, -0.4]).unwrap()
        }),
        {
            // the teacher is detached inside the loss, so only the student is
            // a differentiable input here
            let teacher = t(&[4, 5]);
            case("kl_alignment_student", vec![t(&[4, 5])], move |tp, v| {
                let target = tp.constant(teacher.clone());
                objectives::kl_alignment_loss(tp, v[0], target, 0.5).unwrap()
            })
        },
    ]
}

/// A random composition of shape-preserving ops on `[3, 4]` operands.
pub fn random_graph(seed: u64) -> Case {
    let mut r = rng(1000 + seed);
    let inputs: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut r, &[3, 4], 1.0)).collect();
    let weight = random_tensor(&mut r, &[4, 4], 0.7);
    let steps: Vec<(u32, usize, usize)> = (0..r.random_range(4..9))
        .map(|_| (r.random_range(0..11), r.random_range(0..64), r.random_range(0..64)))
        .collect();
    let mut all = inputs;
    all.push(weight);
    case(&format!("random_graph_{seed}"), all, move |tp, v| {
        let w = v[3];
        let mut pool: Vec<Var> = v[..3].to_vec();
        for &(op, a, b) in &steps {
            let x = pool[a % pool.len()];
            let y = pool[b % pool.len()];
            let out = match op {
                0 => tp.add(x, y).unwrap(),
                1 => tp.sub(x, y).unwrap(),
                2 => tp.mul(x, y).unwrap(),
                3 => tp.gelu(x).unwrap(),
                4 => tp.softmax(x, 1).unwrap(),
                5 => tp.log_softmax(x, 0).unwrap(),
                6 => tp.matmul(x, w).unwrap(),
                7 => {
                    // rows near zero norm (e.g. after x - x) have no stable
                    // direction; the threshold is far from any FD step
                    let rows = tp.value(x).to_rows();
                    if rows.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 0.01) {
                        tp.normalize_rows(x).unwrap()
                    } else {
                        tp.gelu(x).unwrap()
                    }
                }
                8 => {
                    let lo = tp.slice_last(x, 0, 1).unwrap();
                    let hi = tp.slice_last(y, 1, 3).unwrap();
                    tp.concat_last(&[lo, hi]).unwrap()
                }
                9 => tp.gather_rows(x, &[2, 0, 1]).unwrap(),
                _ => {
                    let t = tp.scale(x, 0.5).unwrap();
                    tp.add_scalar(t, 0.1).unwrap()
                }
            };
            pool.push(out);
        }
        let last = *pool.last().unwrap();
        project(tp, last, seed)
    })
}
