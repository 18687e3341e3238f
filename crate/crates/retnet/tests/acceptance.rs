//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (visible with `cargo test --test acceptance -- --nocapture`).
//!
//! Tolerances and budgets are pinned here; timing-based checks are seeded
//! and machine-local by nature.

use std::time::Instant;

use retnet::bench::{
    infer_bench_cell, linear_fit, model_equivalence_suite, retention_equivalence_suite,
    stabilizer_neutrality_suite, InferBenchOptions,
};
use retnet::model::{forward, init_params, Arch, ModelConfig};
use retnet::msr::{gamma_schedule, msr_param_count, GammaSchedule, Paradigm};
use retnet::tensor::{Precision, Rng};
use retnet::train::{
    batch_gradients, eval_perplexity, gradcheck, run_training, task_accuracy, Corpus,
    SyntheticTask, TaskData, TrainConfig, TrainExample, BYTE_VOCAB,
};

fn verdict(criterion: usize, pass: bool, detail: &str) {
    println!(
        "[criterion {criterion}] {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion}: {detail}");
}

/// Three-paradigm retention equivalence across the full seeded sweep, both
/// precisions, under two minutes.
#[test]
fn criterion_01_three_paradigm_equivalence() {
    let t0 = Instant::now();
    let r64 = retention_equivalence_suite(Precision::Fp64, 20260810, false, None);
    let r32 = retention_equivalence_suite(Precision::Fp32, 20260811, false, None);
    let elapsed = t0.elapsed().as_secs_f64();
    let pass = r64.passed() && r32.passed() && elapsed < 120.0;
    verdict(
        1,
        pass,
        &format!(
            "fp64 {} cases dev {:.2e} (tol 1e-10); fp32 {} cases dev {:.2e} (tol 1e-5); {:.1}s",
            r64.cases, r64.max_deviation, r32.cases, r32.max_deviation, elapsed
        ),
    );
}

/// Full-model logits agree across paradigms; greedy 256-step decode matches
/// the parallel-forward argmax trace token for token.
#[test]
fn criterion_02_full_model_equivalence() {
    let report = model_equivalence_suite(20260812, 256).unwrap();
    verdict(
        2,
        report.passed(),
        &format!(
            "2-layer d=64 len=96 + 256-step trace: {} cases, max dev {:.2e} (tol 1e-9)",
            report.cases, report.max_deviation
        ),
    );
}

/// Reverse-mode gradients match central finite differences on one-layer
/// models of both architectures, under five minutes.
#[test]
fn criterion_03_gradient_correctness() {
    let t0 = Instant::now();
    let mut retnet_parallel = ModelConfig::retnet(1, 16, 2, 16);
    retnet_parallel.precision = Precision::Fp64;
    let mut retnet_chunkwise = retnet_parallel.clone();
    retnet_chunkwise.paradigm = Paradigm::Chunkwise(4);
    let mut transformer = ModelConfig::transformer(1, 16, 2, 16);
    transformer.precision = Precision::Fp64;

    let mut detail = String::new();
    let mut pass = true;
    for config in [retnet_parallel, retnet_chunkwise, transformer] {
        let report = gradcheck(&config, 12, 1e-5, 1e-5, 32, 20260813).unwrap();
        pass &= report.passed;
        detail.push_str(&format!(
            "{}[{}] {:.2e}; ",
            report.arch, report.paradigm, report.max_rel_err
        ));
    }
    let elapsed = t0.elapsed().as_secs_f64();
    pass &= elapsed < 300.0;
    detail.push_str(&format!("tol 1e-5, step 1e-5, {elapsed:.1}s"));
    verdict(3, pass, &detail);
}

/// Chunkwise and parallel training are the same computation: gradients
/// agree to 1e-8 in fp64 and 100-step fp32 loss curves track each other.
#[test]
fn criterion_04_training_paradigm_consistency() {
    // gradients on an identical batch
    let mut mcfg = ModelConfig::retnet(1, 32, 2, 64);
    mcfg.precision = Precision::Fp64;
    mcfg.seed = 14;
    let mut rng = Rng::new(14);
    let params = init_params(&mcfg, &mut rng).unwrap();
    let batch: Vec<TrainExample> = (0..2)
        .map(|_| {
            TrainExample::full((0..33).map(|_| rng.below(64) as u32).collect())
        })
        .collect();
    let (_, gp) = batch_gradients(&params, &batch, &mcfg, Paradigm::Parallel, None).unwrap();
    let (_, gc) = batch_gradients(&params, &batch, &mcfg, Paradigm::Chunkwise(8), None).unwrap();
    let grad_err = retnet::autodiff::max_rel_err(&gp, &gc, 1e-8);

    // 100-step fp32 loss curves
    let corpus = Corpus::from_bytes(
        include_bytes!("../data/tiny_corpus.txt").to_vec(),
        0.1,
    )
    .unwrap();
    let mut mcfg32 = ModelConfig::retnet(1, 32, 2, BYTE_VOCAB);
    mcfg32.precision = Precision::Fp32;
    mcfg32.seed = 15;
    let base = TrainConfig {
        steps: 100,
        batch_size: 4,
        seq_len: 33,
        lr: 1e-3,
        warmup_steps: 20,
        eval_interval: 0,
        seed: 15,
        ..Default::default()
    };
    let losses = |paradigm: Paradigm| {
        let tcfg = TrainConfig { paradigm, ..base.clone() };
        run_training(&mcfg32, &tcfg, &TaskData::Corpus(&corpus), None, None)
            .unwrap()
            .2
            .losses
    };
    let a = losses(Paradigm::Parallel);
    let b = losses(Paradigm::Chunkwise(8));
    let mut curve_err = 0.0f64;
    for (x, y) in a.iter().zip(&b) {
        curve_err = curve_err.max((x - y).abs() / x.abs().max(1e-12));
    }

    let pass = grad_err <= 1e-8 && curve_err <= 1e-4 && a.len() == 100;
    verdict(
        4,
        pass,
        &format!(
            "grad divergence {grad_err:.2e} (tol 1e-8); 100-step fp32 loss divergence {curve_err:.2e} (tol 1e-4)"
        ),
    );
}

/// Constant decode state for retention vs exactly linear cache growth for
/// the baseline, and flat vs positive per-token latency slope.
#[test]
fn criterion_05_inference_memory_and_latency() {
    // exact state counts
    let ret = retnet::bench::state_scaling_probe(Arch::RetNet, &[128, 1024, 8192], 64, 2, 16)
        .unwrap();
    let constant = ret.iter().all(|(_, n)| *n == ret[0].1);

    let base =
        retnet::bench::state_scaling_probe(Arch::Transformer, &[128, 256, 512, 1024], 64, 2, 16)
            .unwrap();
    let doubling = base.windows(2).all(|w| w[1].1 == 2 * w[0].1)
        && base.iter().all(|(len, n)| *n == 2 * 2 * len * 64);

    // latency trend at the desk model size
    let opts = InferBenchOptions {
        lengths: vec![128, 512, 1024],
        batches: vec![1],
        d_model: 256,
        layers: 4,
        warmup: 16,
        seed: 16,
        ..Default::default()
    };
    let mut fit = |arch: Arch| {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &len in &opts.lengths {
            let rec = infer_bench_cell(arch, len, 1, &opts).unwrap();
            xs.push(len as f64);
            ys.push(rec.latency_ms_p50);
        }
        linear_fit(&xs, &ys)
    };
    let (slope_ret, _, stderr_ret) = fit(Arch::RetNet);
    let (slope_base, _, stderr_base) = fit(Arch::Transformer);
    let t_ret = slope_ret / stderr_ret.max(1e-12);
    let t_base = slope_base / stderr_base.max(1e-12);
    // flat means statistically indistinguishable from zero (or negligible
    // next to the baseline's slope)
    let flat = t_ret.abs() < 3.0 || slope_ret.abs() <= 0.15 * slope_base.abs();
    let rising = slope_base > 0.0 && t_base >= 3.0;

    let pass = constant && doubling && flat && rising;
    verdict(
        5,
        pass,
        &format!(
            "retention state {:?} constant={constant}; cache doubling={doubling}; \
             latency slopes ret {slope_ret:.2e} (t={t_ret:.1}) vs base {slope_base:.2e} (t={t_base:.1})",
            ret.iter().map(|(_, n)| *n).collect::<Vec<_>>()
        ),
    );
}

/// Both architectures spend exactly 12 d^2 weights per block; the retention
/// layer itself spends 8 d^2.
#[test]
fn criterion_06_parameter_parity() {
    let mut pass = true;
    let mut detail = String::new();
    for d in [64usize, 256] {
        let r = ModelConfig::retnet(1, d, 2, 32);
        let t = ModelConfig::transformer(1, d, 2, 32);
        let rp = init_params(&r, &mut Rng::new(1)).unwrap();
        let tp = init_params(&t, &mut Rng::new(1)).unwrap();
        let ok = r.block_param_count() == 12 * d * d
            && t.block_param_count() == 12 * d * d
            && rp.non_embedding_param_count() == 12 * d * d
            && tp.non_embedding_param_count() == 12 * d * d
            && msr_param_count(d, 2) == 8 * d * d;
        pass &= ok;
        detail.push_str(&format!("d={d}: block {} = {}; ", r.block_param_count(), 12 * d * d));
    }
    verdict(6, pass, &detail);
}

/// Decay schedules match their closed forms exactly.
#[test]
fn criterion_07_gamma_schedules() {
    let d8 = gamma_schedule(8, GammaSchedule::Default).unwrap();
    let default_ok = (0..8).all(|i| d8[i] == 1.0 - 2f64.powi(-5 - i as i32));
    let s8 = gamma_schedule(8, GammaSchedule::SizeInvariant).unwrap();
    let endpoint_ok = s8[0] == 1.0 - 1.0 / 32.0 && s8[7] == 1.0 - 1.0 / 512.0;
    let increasing = s8.windows(2).all(|w| w[1] > w[0]) && d8.windows(2).all(|w| w[1] > w[0]);
    verdict(
        7,
        default_ok && endpoint_ok && increasing,
        &format!(
            "default h=8 exact={default_ok}; size-invariant endpoints {} / {} exact={endpoint_ok}",
            s8[0], s8[7]
        ),
    );
}

/// The desk-scale capability probe: both architectures learn length-16 copy
/// within the 2000-step budget, and every ablation variant trains with
/// finite losses under one shared budget.
#[test]
fn criterion_08_capability_and_ablations() {
    let task = SyntheticTask::Copy { payload_len: 16, alphabet: 16 };
    let tcfg = TrainConfig {
        steps: 2000,
        batch_size: 16,
        seq_len: 34,
        lr: 3e-3,
        warmup_steps: 100,
        eval_interval: 100,
        seed: 7,
        ..Default::default()
    };

    let mut detail = String::new();
    let mut pass = true;
    for arch in [Arch::RetNet, Arch::Transformer] {
        let mut mcfg = match arch {
            Arch::RetNet => ModelConfig::retnet(2, 64, 2, BYTE_VOCAB),
            Arch::Transformer => ModelConfig::transformer(2, 64, 2, BYTE_VOCAB),
        };
        mcfg.precision = Precision::Fp32;
        mcfg.seed = 7;
        let mut probe_rng = Rng::new(99);
        let probe_cfg = mcfg.clone();
        let mut stop = |_step: usize, params: &retnet::model::ModelParams| {
            task_accuracy(params, &probe_cfg, &task, 16, &mut probe_rng).unwrap() >= 0.98
        };
        let (params, _, out) = run_training(
            &mcfg,
            &tcfg,
            &TaskData::Synthetic(task),
            None,
            Some(&mut stop),
        )
        .unwrap();
        let acc = task_accuracy(&params, &mcfg, &task, 64, &mut Rng::new(123)).unwrap();
        pass &= acc >= 0.95 && out.steps_run <= 2000;
        detail.push_str(&format!("{} {:.1}% @ {} steps; ", arch.name(), acc * 100.0, out.steps_run));
    }

    // the six retention variants plus the baseline all finish one shared
    // budget with finite losses
    let mut base = ModelConfig::retnet(2, 64, 2, BYTE_VOCAB);
    base.precision = Precision::Fp32;
    base.seed = 7;
    let ablate_budget = TrainConfig {
        steps: 80,
        batch_size: 8,
        seq_len: 34,
        lr: 3e-3,
        warmup_steps: 20,
        eval_interval: 0,
        seed: 7,
        ..Default::default()
    };
    let rows = retnet::bench::ablate(&base, &ablate_budget, task, None).unwrap();
    let all_finite = rows.iter().all(|r| r.final_loss.is_finite() && r.steps == 80);
    pass &= all_finite && rows.len() == 7;
    detail.push_str(&format!("{} ablation rows finite={all_finite}", rows.len()));
    verdict(8, pass, &detail);
}

/// The three stabilizers only rescale: post-normalization outputs are
/// unchanged when they toggle.
#[test]
fn criterion_09_normalization_neutrality() {
    let report = stabilizer_neutrality_suite(20260814, false);
    verdict(
        9,
        report.passed(),
        &format!(
            "{} config pairs, max post-norm deviation {:.2e} (tol 1e-4)",
            report.cases, report.max_deviation
        ),
    );
}

/// Last-K evaluation protocol: one perplexity per context length, and on a
/// memorizable corpus longer context never scores worse.
#[test]
fn criterion_10_eval_protocol_monotonicity() {
    // periodic text whose short contexts are genuinely ambiguous
    let unit: &[u8] = b"the cat sat on the mat. the fox ran by the den. the owl hid in the oak. ";
    let mut bytes = Vec::new();
    while bytes.len() < 6000 {
        bytes.extend_from_slice(unit);
    }
    let corpus = Corpus::from_bytes(bytes, 0.25).unwrap();

    let mut mcfg = ModelConfig::retnet(2, 64, 2, BYTE_VOCAB);
    mcfg.precision = Precision::Fp32;
    mcfg.seed = 11;
    let tcfg = TrainConfig {
        steps: 400,
        batch_size: 8,
        seq_len: 64,
        lr: 2e-3,
        warmup_steps: 50,
        eval_interval: 0,
        seed: 11,
        ..Default::default()
    };
    let (params, _, _) =
        run_training(&mcfg, &tcfg, &TaskData::Corpus(&corpus), None, None).unwrap();

    let contexts = [8usize, 16, 32, 64];
    let last_k = 4;
    let table = eval_perplexity(&params, &mcfg, corpus.valid_bytes(), &contexts, last_k).unwrap();

    let one_per_context = table.len() == contexts.len()
        && table.iter().zip(&contexts).all(|((c, _), want)| c == want);
    // protocol: longer context never conditions on less history
    let conditioning_monotone = contexts.windows(2).all(|w| (w[1] - 1 - last_k) > (w[0] - 1 - last_k));
    let ppl_monotone = table.windows(2).all(|w| w[1].1 <= w[0].1);

    let detail = table
        .iter()
        .map(|(c, p)| format!("ctx {c}: {p:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        10,
        one_per_context && conditioning_monotone && ppl_monotone,
        &detail,
    );
}
