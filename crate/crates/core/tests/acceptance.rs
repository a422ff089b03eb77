//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints one PASS/FAIL line; the process fails if any criterion
//! does. `ACCEPTANCE_ONLY=2,9` restricts the run to the listed criteria.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::oracle::{chi_square, manual_build, max_grad_gap, CHI2_CRIT_DF10, CHI2_CRIT_DF2};
use common::{cases, grad_check};
use matryoshka2d::data::{generate_synthetic_corpus, save_checkpoint, SyntheticCorpus, SyntheticCorpusSpec};
use matryoshka2d::elastic::{benchmark_layers, truncate_model, BenchConfig, InstantClock, TruncationSpec};
use matryoshka2d::encoder::{Batch, EncoderConfig, EncoderModel};
use matryoshka2d::eval::{evaluate, EvalReport};
use matryoshka2d::rng::{self, Stream};
use matryoshka2d::trainer::{
    compute_gradients, sample_dim, sample_layer, train, DimChoice, LossWeights, Objective, StepSample,
    TrainBatch, TrainConfig, TrainData, TrainStepReport,
};

const GRAD_REL_TOL: f64 = 1e-4;
const DECOMPOSITION_TOL: f64 = 1e-10;
const OMITTED_TERM_GRAD_TOL: f64 = 1e-12;
const SAMPLE_DRAWS: usize = 100_000;
const LAYER_QUALITY_FLOOR: f64 = 0.85;
const CASCADE_INVERSION_TOL: f64 = 0.02;
const ABLATION_GAP: f64 = 0.01;
const LATENCY_SLACK: f64 = 0.05;
const MIN_SPEEDUP_AT_HALF_DEPTH: f64 = 1.3;
const SEEDS: [u64; 3] = [42, 43, 44];
const GRID_DIMS: [usize; 4] = [8, 16, 32, 64];

type Verdict = Result<String, String>;

fn check(cond: bool, detail: String) -> Verdict {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fmt_row(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" ")
}

fn gradient_correctness() -> Verdict {
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    let mut cases = cases::op_cases();
    cases.extend((0..20).map(cases::random_graph));
    let total = cases.len();
    for case in cases {
        let g = grad_check(&case.inputs, &case.build);
        checked += g.checked;
        if !worst.0.is_nan() && !(g.max_rel_error <= worst.0) {
            worst = (g.max_rel_error, case.name.to_string());
        }
    }
    check(
        worst.0 < GRAD_REL_TOL,
        format!("{total} cases, {checked} partials, worst relative error {:.2e} ({})", worst.0, worst.1),
    )
}

fn prefix_exactness() -> Verdict {
    let model = common::desk_model(42);
    let cfg = *model.config();
    let mut r = common::rng(2024);
    let seqs = common::random_sequences(&mut r, &cfg, 100, 2, cfg.max_seq_len);
    let batch = Batch::new(&seqs, &cfg).unwrap();
    let mut compared = 0;
    for n in 1..=cfg.num_layers {
        let full = model.embed(&batch, n, cfg.hidden_dim).unwrap();
        for d in GRID_DIMS {
            let sliced = model.embed(&batch, n, d).unwrap();
            let truncated = truncate_model(&model, TruncationSpec::new(n, d)).unwrap();
            let exported = truncated.embed(&batch, n, d).unwrap();
            let prefix = full.prefix_columns(d).unwrap();
            if common::bits(&sliced) != common::bits(&prefix) {
                return Err(format!("embed(n={n}, d={d}) is not the prefix of embed(n={n}, D)"));
            }
            if common::bits(&sliced) != common::bits(&exported) {
                return Err(format!("truncated model differs at n={n}, d={d}"));
            }
            compared += 1;
        }
    }
    Ok(format!("100 inputs, {compared} (n, d) cells bitwise equal"))
}

fn loss_composition() -> Verdict {
    let cfg = EncoderConfig {
        num_layers: 3,
        hidden_dim: 16,
        num_heads: 2,
        ffn_dim: 32,
        vocab_size: 256,
        max_seq_len: 16,
        seed: 5,
    };
    let model = EncoderModel::init(cfg).unwrap();
    let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec {
        pairs_per_cluster: 1,
        ..Default::default()
    })
    .unwrap();
    let batch = TrainBatch::from_examples(&corpus.train, &model.tokenizer()).unwrap();
    let mut config = TrainConfig::for_hidden_dim(16).unwrap();
    let weights = [1.0, 0.5, 2.0, 0.25, 3.0];
    let mut worst_joint = 0.0f64;
    let mut worst_grad = 0.0f64;
    for (layer, d) in [(1, 8), (2, 8), (2, 4)] {
        let sample = StepSample { layer, dim: DimChoice::One(d) };
        config.lambdas = LossWeights::uniform(1.0);
        for (o, w) in Objective::ALL.iter().zip(weights) {
            config.lambdas.set(*o, w);
        }
        let (values, _) = compute_gradients(&model, &batch, sample, &config).unwrap();
        let terms: Vec<(Objective, f64)> = Objective::ALL.iter().copied().zip(weights).collect();
        let (joint, comps, _) = manual_build(&model, &batch, layer, d, &terms, config.tau);
        let recomputed: f64 = comps.iter().zip(weights).map(|((_, v), w)| w * v).sum();
        worst_joint = worst_joint.max((values.joint - recomputed).abs()).max((values.joint - joint).abs());

        for dropped in Objective::ALL {
            config.lambdas = LossWeights::uniform(1.0);
            config.lambdas.set(dropped, 0.0);
            let (values, grads) = compute_gradients(&model, &batch, sample, &config).unwrap();
            let kept: Vec<(Objective, f64)> =
                Objective::ALL.iter().filter(|&&o| o != dropped).map(|&o| (o, 1.0)).collect();
            let (joint, _, manual) = manual_build(&model, &batch, layer, d, &kept, config.tau);
            worst_joint = worst_joint.max((values.joint - joint).abs());
            worst_grad = worst_grad.max(max_grad_gap(&grads, &manual));
        }
    }
    check(
        worst_joint < DECOMPOSITION_TOL && worst_grad <= OMITTED_TERM_GRAD_TOL,
        format!("joint gap {worst_joint:.2e}, omitted-term gradient gap {worst_grad:.2e}"),
    )
}

fn sampling_distributions() -> Verdict {
    let mut r = rng::stream(rng::DEFAULT_SEED, Stream::Sampling);
    let mut layer_counts = [0usize; 11];
    for _ in 0..SAMPLE_DRAWS {
        layer_counts[sample_layer(&mut r, 12).unwrap() - 1] += 1;
    }
    let mut small_counts = [0usize; 3];
    for _ in 0..SAMPLE_DRAWS {
        small_counts[sample_layer(&mut r, 4).unwrap() - 1] += 1;
    }
    let dims = [8, 16, 32];
    let mut dim_counts = [0usize; 3];
    for _ in 0..SAMPLE_DRAWS {
        let d = sample_dim(&mut r, &dims).unwrap();
        dim_counts[dims.iter().position(|&x| x == d).unwrap()] += 1;
    }
    let (a, b, c) = (chi_square(&layer_counts), chi_square(&small_counts), chi_square(&dim_counts));
    check(
        a < CHI2_CRIT_DF10 && b < CHI2_CRIT_DF2 && c < CHI2_CRIT_DF2,
        format!(
            "chi-square n|N=12 {a:.2} (crit {CHI2_CRIT_DF10}), n|N=4 {b:.2} (crit {CHI2_CRIT_DF2}), d {c:.2} (crit {CHI2_CRIT_DF2})"
        ),
    )
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Variant {
    TwoD,
    Plain,
    NoAlign,
    NoLastLayer,
}

struct Run {
    model: EncoderModel,
    report: EvalReport,
    steps: Vec<TrainStepReport>,
}

struct Runs {
    corpus: SyntheticCorpus,
    runs: Vec<(Variant, u64, Run)>,
}

impl Runs {
    fn train_all() -> Self {
        let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec::default()).unwrap();
        let data = TrainData::Positives(corpus.train.clone());
        let layers: BTreeSet<usize> = (1..=4).collect();
        let dims: BTreeSet<usize> = GRID_DIMS.into_iter().collect();
        let mut runs = Vec::new();
        for variant in [Variant::TwoD, Variant::Plain, Variant::NoAlign, Variant::NoLastLayer] {
            for seed in SEEDS {
                let model = EncoderModel::init(EncoderConfig { seed, ..Default::default() }).unwrap();
                let mut config = TrainConfig::for_hidden_dim(64).unwrap();
                config.seed = seed;
                match variant {
                    Variant::TwoD => {}
                    Variant::Plain => config.ablation.plain = true,
                    Variant::NoAlign => config.ablation.disable_align = true,
                    Variant::NoLastLayer => config.ablation.disable_last_layer = true,
                }
                let (model, steps) = train(model, &data, &config, |_, _| Ok(())).unwrap();
                let report = evaluate(&model, &corpus.eval, &layers, &dims).unwrap();
                runs.push((variant, seed, Run { model, report, steps }));
            }
        }
        Self { corpus, runs }
    }

    fn of(&self, variant: Variant) -> impl Iterator<Item = &Run> {
        self.runs.iter().filter(move |(v, _, _)| *v == variant).map(|(_, _, r)| r)
    }

    fn mean_report(&self, variant: Variant) -> EvalReport {
        let reports: Vec<EvalReport> = self.of(variant).map(|r| r.report.clone()).collect();
        EvalReport::average(&reports).unwrap()
    }
}

fn layer_quality(runs: &Runs) -> Verdict {
    let two_d = runs.mean_report(Variant::TwoD);
    let plain = runs.mean_report(Variant::Plain);
    let at = |r: &EvalReport, n| r.cell(n, 64).unwrap().spearman;
    let ours: Vec<f64> = (1..=4).map(|n| at(&two_d, n)).collect();
    let base: Vec<f64> = (1..=4).map(|n| at(&plain, n)).collect();
    let shallow_wins = (0..3).all(|i| ours[i] > base[i]);
    check(
        shallow_wins && ours[3] >= LAYER_QUALITY_FLOOR,
        format!("d=64 by layer, 2DMSE [{}] vs plain [{}]", fmt_row(&ours), fmt_row(&base)),
    )
}

fn dimension_cascade(runs: &Runs) -> Verdict {
    let two_d = runs.mean_report(Variant::TwoD);
    let cascade: Vec<f64> = GRID_DIMS.iter().map(|&d| two_d.cell(4, d).unwrap().spearman).collect();
    let drops: Vec<f64> = cascade.windows(2).map(|w| w[0] - w[1]).filter(|&drop| drop > 0.0).collect();
    let ok = drops.len() <= 1 && drops.iter().all(|&drop| drop <= CASCADE_INVERSION_TOL);
    check(ok, format!("(N, d) for d in {GRID_DIMS:?}: [{}], {} inversion(s)", fmt_row(&cascade), drops.len()))
}

fn ablation_order(runs: &Runs) -> Verdict {
    let top = |v| runs.mean_report(v).cell(4, 64).unwrap().spearman;
    let (full, no_align, no_last) = (top(Variant::TwoD), top(Variant::NoAlign), top(Variant::NoLastLayer));
    check(
        full >= no_align && no_align >= no_last && full - no_last >= ABLATION_GAP,
        format!("(N, D): full {full:.4}, no-align {no_align:.4}, no-last-layer {no_last:.4}"),
    )
}

fn alignment_effect(runs: &Runs) -> Verdict {
    let mut parts = Vec::new();
    let mut ok = true;
    for run in runs.of(Variant::TwoD) {
        let k = (run.steps.len() / 10).max(1);
        let mean = |s: &[TrainStepReport]| s.iter().map(|r| r.component(Objective::Align)).sum::<f64>() / s.len() as f64;
        let (first, last) = (mean(&run.steps[..k]), mean(&run.steps[run.steps.len() - k..]));
        ok &= last < first;
        parts.push(format!("{first:.4} -> {last:.4}"));
    }
    check(ok, format!("mean L_align first vs last 10% of steps: {}", parts.join(", ")))
}

fn efficiency() -> Verdict {
    let model = EncoderModel::init(EncoderConfig { num_layers: 12, ..Default::default() }).unwrap();
    let layers: BTreeSet<usize> = (1..=12).collect();
    let report = benchmark_layers(&model, &BenchConfig::default(), &layers, &mut InstantClock::default()).unwrap();
    let medians: Vec<f64> = report.layers.iter().map(|l| l.median_seconds).collect();
    let monotone = medians.windows(2).all(|w| w[1] >= w[0] * (1.0 - LATENCY_SLACK));
    let speedup = report.layer(6).unwrap().speedup;
    check(
        monotone && speedup >= MIN_SPEEDUP_AT_HALF_DEPTH,
        format!(
            "median ms by layer [{}], speedup at n=6 {speedup:.2}x",
            medians.iter().map(|m| format!("{:.1}", m * 1e3)).collect::<Vec<_>>().join(" ")
        ),
    )
}

fn m2d(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_m2d"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("m2d {args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8(out.stdout).unwrap())
}

fn spearman_cells(csv: &str) -> Vec<(String, String)> {
    csv.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (format!("{},{}", f[0], f[1]), f[2].to_string())
        })
        .collect()
}

fn lossless_export(runs: &Runs) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let model = &runs.of(Variant::TwoD).next().unwrap().model;
    save_checkpoint(model, p("model.ckpt")).unwrap();
    matryoshka2d::data::write_jsonl(Path::new(&p("eval.jsonl")), &runs.corpus.eval).unwrap();
    let grid = spearman_cells(&m2d(&["eval", "--model", &p("model.ckpt"), "--data", &p("eval.jsonl"), "--grid", "full"])?);
    if grid.len() != 16 {
        return Err(format!("full grid has {} cells", grid.len()));
    }
    for (cell, value) in &grid {
        let (n, d) = cell.split_once(',').unwrap();
        let out = p(&format!("export-{n}-{d}.ckpt"));
        m2d(&["export", "--model", &p("model.ckpt"), "--layers", n, "--dims", d, "--out", &out])?;
        let exported = spearman_cells(&m2d(&["eval", "--model", &out, "--data", &p("eval.jsonl"), "--layers", n, "--dims", d])?);
        if exported != [(cell.clone(), value.clone())] {
            return Err(format!("cell ({cell}) {value} vs exported {exported:?}"));
        }
        fs::remove_file(&out).unwrap();
    }
    Ok("all 16 exported (n, d) checkpoints reproduce their grid cell exactly".into())
}

struct Criterion {
    id: usize,
    name: &'static str,
    needs_runs: bool,
    /// Wall-clock budget in seconds, including any shared training it triggers.
    budget: Option<f64>,
    check: fn(&Runs) -> Verdict,
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria = [
        Criterion { id: 1, name: "gradient correctness", needs_runs: false, budget: Some(60.0), check: |_| gradient_correctness() },
        Criterion { id: 2, name: "prefix and early-exit exactness", needs_runs: false, budget: Some(60.0), check: |_| prefix_exactness() },
        Criterion { id: 3, name: "loss-composition audit", needs_runs: false, budget: None, check: |_| loss_composition() },
        Criterion { id: 4, name: "sampling distributions", needs_runs: false, budget: None, check: |_| sampling_distributions() },
        Criterion { id: 5, name: "layer-wise quality", needs_runs: true, budget: Some(900.0), check: layer_quality },
        Criterion { id: 6, name: "dimension cascade", needs_runs: true, budget: None, check: dimension_cascade },
        Criterion { id: 7, name: "ablation direction", needs_runs: true, budget: None, check: ablation_order },
        Criterion { id: 8, name: "alignment effect", needs_runs: true, budget: None, check: alignment_effect },
        Criterion { id: 9, name: "early-exit efficiency", needs_runs: false, budget: Some(300.0), check: |_| efficiency() },
        Criterion { id: 10, name: "lossless export", needs_runs: true, budget: None, check: lossless_export },
    ];
    let selected: Vec<&Criterion> = criteria
        .iter()
        .filter(|c| only.as_ref().is_none_or(|o| o.contains(&c.id)))
        .collect();

    let empty = Runs { corpus: SyntheticCorpus { train: vec![], eval: vec![] }, runs: vec![] };
    let mut shared: Option<Runs> = None;
    let mut failures = 0;
    for c in selected {
        let start = Instant::now();
        if c.needs_runs && shared.is_none() {
            eprintln!("training 4 variants x {} seeds on the synthetic corpus ...", SEEDS.len());
            shared = Some(Runs::train_all());
        }
        let runs = shared.as_ref().unwrap_or(&empty);
        let mut verdict = panic::catch_unwind(AssertUnwindSafe(|| (c.check)(runs))).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed().as_secs_f64();
        if let (Some(budget), Ok(detail)) = (c.budget, &verdict) {
            if elapsed > budget {
                verdict = Err(format!("{detail}; took {elapsed:.0}s, budget {budget:.0}s"));
            }
        }
        let (tag, detail) = match &verdict {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} [{}] {} ({elapsed:.1}s): {detail}", c.id, c.name);
    }
    if failures > 0 {
        println!("{failures} acceptance criterion(s) failed");
        std::process::exit(1);
    }
}
