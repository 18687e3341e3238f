//! Verification suites and cost benchmarks behind the command-line surface:
//! cross-paradigm equivalence sweeps, stabilizer-neutrality checks, the
//! decoding cost benchmark (state size, throughput, latency), and the
//! architecture ablation sweep. All output lands in versioned CSV files.
//!
//! Every function here is deterministic for a fixed seed except wall-clock
//! timing fields.

use std::fs::File;
use std::io::Write as IoWrite;
use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::{forward, init_params, Arch, DecodeSession, ModelConfig};
use crate::msr::{
    gamma_schedule, msr_forward, AblationFlags, GammaSchedule, MSRLayerParams, Paradigm,
};
use crate::ops;
use crate::retention::{
    decay_mask, retention_chunkwise, retention_parallel, retention_recurrent_step,
    NormalizationConfig, RetentionState,
};
use crate::tensor::{Precision, Rng, Tensor};
use crate::train::{run_training, SyntheticTask, TaskData, TrainConfig, TrainOutcome};

pub const SUITE_SCHEMA: &str = "retnet-suite-v1";
pub const BENCH_SCHEMA: &str = "retnet-infer-bench-v1";
pub const ABLATE_SCHEMA: &str = "retnet-ablate-v1";

/// Outcome of one verification sweep.
#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: String,
    pub cases: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub worst_case: String,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_deviation <= self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{}: {} cases, max deviation {:.3e} (tol {:.0e}) -> {}{}",
            self.suite,
            self.cases,
            self.max_deviation,
            self.tolerance,
            if self.passed() { "pass" } else { "FAIL" },
            if self.passed() { String::new() } else { format!("  worst: {}", self.worst_case) },
        )
    }
}

/// Deliberate defects for proving the suites can see a real bug.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Defect {
    /// Decays the carried chunk state once too often, emulating an
    /// off-by-one in the chunkwise decay exponents.
    StateDecayOffByOne,
}

struct Sweep {
    max_dev: f64,
    worst: String,
    cases: usize,
}

impl Sweep {
    fn new() -> Self {
        Sweep { max_dev: 0.0, worst: String::new(), cases: 0 }
    }

    fn record(&mut self, dev: f64, case: impl Fn() -> String) {
        self.cases += 1;
        if dev > self.max_dev {
            self.max_dev = dev;
            self.worst = case();
        }
    }
}

fn rollout_recurrent(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    gamma: f64,
    cfg: NormalizationConfig,
) -> Tensor {
    let (len, d_k, d_v) = (q.rows(), q.cols(), v.cols());
    let p = q.precision();
    let mut state = RetentionState::zeros(d_k, d_v, p);
    let mut rows = Vec::with_capacity(len);
    for n in 0..len {
        let qn = Tensor::new(vec![d_k], q.row(n).to_vec(), p).expect("row");
        let kn = Tensor::new(vec![d_k], k.row(n).to_vec(), p).expect("row");
        let vn = Tensor::new(vec![d_v], v.row(n).to_vec(), p).expect("row");
        let (out, next) =
            retention_recurrent_step(&qn, &kn, &vn, &state, gamma, cfg).expect("step");
        rows.push(out.into_data());
        state = next;
    }
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    Tensor::from_rows(&refs, p).expect("rows")
}

fn rollout_chunkwise(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    gamma: f64,
    chunk: usize,
    cfg: NormalizationConfig,
    inject: Option<Defect>,
) -> Tensor {
    let (len, d_k, d_v) = (q.rows(), q.cols(), v.cols());
    let p = q.precision();
    let mut state = RetentionState::zeros(d_k, d_v, p);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(len);
    let mut at = 0;
    while at < len {
        let b = chunk.min(len - at);
        let take = |t: &Tensor, cols: usize| {
            Tensor::new(vec![b, cols], t.data()[at * cols..(at + b) * cols].to_vec(), p)
                .expect("chunk")
        };
        let (out, mut next) = retention_chunkwise(
            &take(q, d_k),
            &take(k, d_k),
            &take(v, d_v),
            &state,
            gamma,
            chunk,
            cfg,
        )
        .expect("chunk");
        if inject == Some(Defect::StateDecayOffByOne) {
            next.s = next.s.scale(gamma);
        }
        for j in 0..b {
            rows.push(out.row(j).to_vec());
        }
        state = next;
        at += b;
    }
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    Tensor::from_rows(&refs, p).expect("rows")
}

fn sweep_gammas() -> Vec<f64> {
    // endpoints of both schedules at h = 8, plus the shared-scale rate
    let d8 = gamma_schedule(8, GammaSchedule::Default).expect("schedule");
    let s8 = gamma_schedule(8, GammaSchedule::SizeInvariant).expect("schedule");
    vec![d8[0], 127.0 / 128.0, *s8.last().expect("nonempty")]
}

/// Single-head three-paradigm equivalence sweep at one precision.
///
/// Inputs are drawn with std 1/4 so raw-path outputs stay order-one even at
/// the slowest decay rates and the absolute tolerance binds. Queries and
/// keys carry their position rotation.
pub fn retention_equivalence_suite(
    precision: Precision,
    seed: u64,
    quick: bool,
    inject: Option<Defect>,
) -> SuiteReport {
    let tolerance = match precision {
        Precision::Fp64 => 1e-10,
        Precision::Fp32 => 1e-5,
    };
    let lengths: Vec<usize> =
        if quick { vec![1, 2, 3, 8, 32] } else { vec![1, 2, 3, 5, 8, 16, 32, 64, 96, 128] };
    let dims: &[(usize, usize)] = if quick { &[(16, 16)] } else { &[(16, 16), (64, 64), (16, 64)] };
    let gammas = sweep_gammas();
    let mut rng = Rng::new(seed);
    let mut sweep = Sweep::new();

    for &len in &lengths {
        for &(d_k, d_v) in dims {
            for &gamma in &gammas {
                let q = rng.normal_tensor(vec![len, d_k], 0.25, precision);
                let k = rng.normal_tensor(vec![len, d_k], 0.25, precision);
                let v = rng.normal_tensor(vec![len, d_v], 0.25, precision);
                let positions: Vec<usize> = (0..len).collect();
                let q = crate::retention::apply_xpos(&q, &positions, ops::Sign::Pos).expect("rot");
                let k = crate::retention::apply_xpos(&k, &positions, ops::Sign::Pos).expect("rot");
                for cfg in NormalizationConfig::all_combinations() {
                    let mask = decay_mask(gamma, len, cfg, precision).expect("mask");
                    let par = retention_parallel(&q, &k, &v, &mask, cfg).expect("parallel");
                    let rec = rollout_recurrent(&q, &k, &v, gamma, cfg);
                    sweep.record(par.max_abs_diff(&rec), || {
                        format!("recurrent len={len} d=({d_k},{d_v}) gamma={gamma} cfg={cfg:?}")
                    });
                    for &chunk in &[1usize, 4, 16, len] {
                        if chunk > len {
                            continue;
                        }
                        let cw = rollout_chunkwise(&q, &k, &v, gamma, chunk, cfg, inject);
                        sweep.record(par.max_abs_diff(&cw), || {
                            format!(
                                "chunkwise B={chunk} len={len} d=({d_k},{d_v}) gamma={gamma} cfg={cfg:?}"
                            )
                        });
                    }
                }
            }
        }
    }
    SuiteReport {
        suite: format!("retention-equivalence-{}", precision.name()),
        cases: sweep.cases,
        max_deviation: sweep.max_dev,
        tolerance,
        worst_case: sweep.worst,
    }
}

/// Layer-level paradigm agreement across ablation settings.
pub fn msr_equivalence_suite(precision: Precision, seed: u64) -> SuiteReport {
    let tolerance = match precision {
        Precision::Fp64 => 1e-9,
        Precision::Fp32 => 1e-4,
    };
    let mut rng = Rng::new(seed);
    let mut sweep = Sweep::new();
    let flag_sets = [
        AblationFlags::default(),
        AblationFlags { no_gate: true, ..Default::default() },
        AblationFlags { no_groupnorm: true, ..Default::default() },
        AblationFlags { no_decay: true, ..Default::default() },
        AblationFlags { single_scale: true, ..Default::default() },
    ];
    for (d, h, len) in [(16, 2, 33), (32, 4, 64)] {
        for flags in &flag_sets {
            let gammas = crate::msr::effective_gammas(h, GammaSchedule::Default, flags)
                .expect("gammas");
            let params =
                MSRLayerParams::init(d, gammas, true, 0.3, 0.3, &mut rng, precision).expect("init");
            let x = rng.normal_tensor(vec![len, d], 0.5, precision);
            let cfg = NormalizationConfig::default();
            let (par, _) =
                msr_forward(&x, &params, flags, cfg, Paradigm::Parallel, None).expect("parallel");
            let (rec, _) =
                msr_forward(&x, &params, flags, cfg, Paradigm::Recurrent, None).expect("recurrent");
            let (cw, _) = msr_forward(&x, &params, flags, cfg, Paradigm::Chunkwise(7), None)
                .expect("chunkwise");
            sweep.record(par.max_abs_diff(&rec), || {
                format!("recurrent d={d} h={h} len={len} flags={flags:?}")
            });
            sweep.record(par.max_abs_diff(&cw), || {
                format!("chunkwise d={d} h={h} len={len} flags={flags:?}")
            });
        }
    }
    SuiteReport {
        suite: format!("msr-equivalence-{}", precision.name()),
        cases: sweep.cases,
        max_deviation: sweep.max_dev,
        tolerance,
        worst_case: sweep.worst,
    }
}

/// Full-model equivalence: logits across paradigms, plus a greedy decode
/// trace that must reproduce the parallel-forward argmax trace.
pub fn model_equivalence_suite(seed: u64, decode_steps: usize) -> Result<SuiteReport> {
    let mut config = ModelConfig::retnet(2, 64, 2, 64);
    config.seed = seed;
    config.precision = Precision::Fp64;
    let mut rng = Rng::new(seed);
    let params = init_params(&config, &mut rng)?;
    let mut sweep = Sweep::new();

    let tokens: Vec<u32> = (0..96).map(|_| rng.below(config.vocab_size) as u32).collect();
    let par = forward(&tokens, &config, &params, Paradigm::Parallel)?;
    for chunk in [7usize, 32] {
        let cw = forward(&tokens, &config, &params, Paradigm::Chunkwise(chunk))?;
        sweep.record(par.max_abs_diff(&cw), || format!("chunkwise B={chunk} len=96"));
    }
    let rec = forward(&tokens, &config, &params, Paradigm::Recurrent)?;
    sweep.record(par.max_abs_diff(&rec), || "recurrent len=96".into());

    // greedy rollout: the decode path must match repeated parallel forwards
    // token for token
    let mut session = DecodeSession::new(&config)?;
    let mut prefix = vec![5u32];
    let mut logits = session.step(5, &params)?;
    for step in 0..decode_steps {
        let via_decode = crate::model::argmax(logits.data());
        let full = forward(&prefix, &config, &params, Paradigm::Parallel)?;
        let via_forward = crate::model::argmax(full.row(prefix.len() - 1));
        if via_decode != via_forward {
            sweep.record(1.0, || format!("argmax trace diverged at step {step}"));
            break;
        }
        sweep.record(0.0, || String::new());
        let next = via_decode as u32;
        prefix.push(next);
        logits = session.step(next, &params)?;
    }

    Ok(SuiteReport {
        suite: "model-equivalence-fp64".into(),
        cases: sweep.cases,
        max_deviation: sweep.max_dev,
        tolerance: 1e-9,
        worst_case: sweep.worst,
    })
}

/// Stabilizer neutrality: any normalization configuration produces the same
/// per-position group-normalized head output (fp32).
pub fn stabilizer_neutrality_suite(seed: u64, quick: bool) -> SuiteReport {
    let precision = Precision::Fp32;
    let lengths: Vec<usize> = if quick { vec![1, 3, 16] } else { vec![1, 2, 3, 8, 32, 64, 128] };
    let dims: &[(usize, usize)] = if quick { &[(16, 16)] } else { &[(16, 16), (64, 64)] };
    let gammas = sweep_gammas();
    let mut rng = Rng::new(seed);
    let mut sweep = Sweep::new();
    let baseline_cfg = NormalizationConfig::none();

    for &len in &lengths {
        for &(d_k, d_v) in dims {
            for &gamma in &gammas {
                let q = rng.normal_tensor(vec![len, d_k], 0.25, precision);
                let k = rng.normal_tensor(vec![len, d_k], 0.25, precision);
                let v = rng.normal_tensor(vec![len, d_v], 0.25, precision);
                let post = |cfg: NormalizationConfig| -> Tensor {
                    let mask = decay_mask(gamma, len, cfg, precision).expect("mask");
                    let out = retention_parallel(&q, &k, &v, &mask, cfg).expect("parallel");
                    ops::group_norm(&out, 1, precision.eps(), None).expect("norm")
                };
                let base = post(baseline_cfg);
                for cfg in NormalizationConfig::all_combinations() {
                    if cfg == baseline_cfg {
                        continue;
                    }
                    let other = post(cfg);
                    sweep.record(base.max_abs_diff(&other), || {
                        format!("len={len} d=({d_k},{d_v}) gamma={gamma} cfg={cfg:?}")
                    });
                }
            }
        }
    }
    SuiteReport {
        suite: "stabilizer-neutrality-fp32".into(),
        cases: sweep.cases,
        max_deviation: sweep.max_dev,
        tolerance: 1e-4,
        worst_case: sweep.worst,
    }
}

/// Run every equivalence suite; the standard `equivalence` command body.
pub fn equivalence_suites(seed: u64, quick: bool) -> Result<Vec<SuiteReport>> {
    let decode_steps = if quick { 32 } else { 128 };
    Ok(vec![
        retention_equivalence_suite(Precision::Fp64, seed, quick, None),
        retention_equivalence_suite(Precision::Fp32, seed ^ 1, quick, None),
        msr_equivalence_suite(Precision::Fp64, seed ^ 2),
        msr_equivalence_suite(Precision::Fp32, seed ^ 3),
        model_equivalence_suite(seed ^ 4, decode_steps)?,
        stabilizer_neutrality_suite(seed ^ 5, quick),
    ])
}

// ── inference cost ──────────────────────────────────────────────────

/// One measured benchmark cell.
#[derive(Clone, Debug)]
pub struct BenchRecord {
    pub arch: String,
    pub mode: String,
    pub seq_len: usize,
    pub batch: usize,
    pub tokens_per_sec: f64,
    pub latency_ms_mean: f64,
    pub latency_ms_p50: f64,
    pub latency_ms_p99: f64,
    /// Exact count of floats held in decode state across the batch.
    pub state_elements: usize,
    pub peak_workspace_elements: usize,
}

#[derive(Clone, Debug)]
pub struct InferBenchOptions {
    pub lengths: Vec<usize>,
    pub batches: Vec<usize>,
    pub d_model: usize,
    pub layers: usize,
    pub warmup: usize,
    /// Refuse cells whose projected state would exceed this element count.
    pub element_budget: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for InferBenchOptions {
    fn default() -> Self {
        InferBenchOptions {
            lengths: vec![64, 128, 256, 512],
            batches: vec![1],
            d_model: 256,
            layers: 4,
            warmup: 3,
            element_budget: 1 << 30,
            seed: 0,
            precision: Precision::Fp32,
        }
    }
}

pub fn bench_config(arch: Arch, opts: &InferBenchOptions) -> ModelConfig {
    let heads = (opts.d_model / 64).max(1);
    let mut config = match arch {
        Arch::RetNet => ModelConfig::retnet(opts.layers, opts.d_model, heads, 64),
        Arch::Transformer => ModelConfig::transformer(opts.layers, opts.d_model, heads, 64),
    };
    config.precision = opts.precision;
    config.seed = opts.seed;
    config
}

/// Projected end-of-decode state elements for a cell.
pub fn projected_state_elements(config: &ModelConfig, len: usize, batch: usize) -> usize {
    match config.arch {
        Arch::Transformer => 2 * config.layers * len * config.d_model * batch,
        Arch::RetNet => {
            let h = config.effective_heads().expect("validated");
            let d_k = config.d_model / h;
            let d_v = 2 * config.d_model / h;
            config.layers * h * (d_k * d_v + d_k + 1) * batch
        }
    }
}

/// Decode `len` tokens with `batch` lockstep sessions, timing each step.
/// Content is irrelevant to cost, so a fixed token id is fed throughout.
pub fn infer_bench_cell(
    arch: Arch,
    len: usize,
    batch: usize,
    opts: &InferBenchOptions,
) -> Result<BenchRecord> {
    let config = bench_config(arch, opts);
    let projected = projected_state_elements(&config, len, batch);
    if projected > opts.element_budget {
        return Err(Error::invalid(
            "infer_bench",
            format!(
                "cell ({},{len},{batch}) needs {projected} state elements, budget {}",
                arch.name(),
                opts.element_budget
            ),
        ));
    }
    let mut rng = Rng::new(opts.seed);
    let params = init_params(&config, &mut rng)?;
    let mut sessions: Vec<DecodeSession> =
        (0..batch).map(|_| DecodeSession::new(&config)).collect::<Result<_>>()?;

    let mut latencies = Vec::with_capacity(len.saturating_sub(opts.warmup));
    let mut measured_time = 0.0f64;
    for step in 0..len {
        let t0 = Instant::now();
        for s in sessions.iter_mut() {
            let _ = s.step(7, &params)?;
        }
        let dt = t0.elapsed().as_secs_f64();
        if step >= opts.warmup {
            latencies.push(dt * 1e3);
            measured_time += dt;
        }
    }
    latencies.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = latencies.len().max(1);
    let mean = latencies.iter().sum::<f64>() / n as f64;
    let p50 = latencies[(n - 1) / 2];
    let p99 = latencies[((n - 1) * 99) / 100];
    let state: usize = sessions.iter().map(DecodeSession::state_element_count).sum();
    let workspace = sessions
        .iter()
        .map(DecodeSession::peak_workspace_elements)
        .max()
        .unwrap_or(0);

    Ok(BenchRecord {
        arch: arch.name().into(),
        mode: match arch {
            Arch::RetNet => "recurrent".into(),
            Arch::Transformer => "kv-cache".into(),
        },
        seq_len: len,
        batch,
        tokens_per_sec: (n * batch) as f64 / measured_time.max(1e-12),
        latency_ms_mean: mean,
        latency_ms_p50: p50,
        latency_ms_p99: p99,
        state_elements: state,
        peak_workspace_elements: workspace,
    })
}

pub fn infer_bench(archs: &[Arch], opts: &InferBenchOptions) -> Result<Vec<BenchRecord>> {
    let mut records = Vec::new();
    for &arch in archs {
        for &len in &opts.lengths {
            for &batch in &opts.batches {
                records.push(infer_bench_cell(arch, len, batch, opts)?);
            }
        }
    }
    Ok(records)
}

/// Decode once to `max(marks)` and record the exact state element count at
/// each mark. Cheap way to verify the memory scaling law.
pub fn state_scaling_probe(
    arch: Arch,
    marks: &[usize],
    d_model: usize,
    layers: usize,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    let opts = InferBenchOptions {
        d_model,
        layers,
        seed,
        precision: Precision::Fp32,
        ..Default::default()
    };
    let config = bench_config(arch, &opts);
    let mut rng = Rng::new(seed);
    let params = init_params(&config, &mut rng)?;
    let mut session = DecodeSession::new(&config)?;
    let top = *marks.iter().max().expect("non-empty marks");
    let mut out = Vec::with_capacity(marks.len());
    for step in 1..=top {
        session.step(3, &params)?;
        if marks.contains(&step) {
            out.push((step, session.state_element_count()));
        }
    }
    Ok(out)
}

/// Ordinary least squares with the slope's standard error.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let dof = (xs.len() as f64 - 2.0).max(1.0);
    let sse: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    let stderr = (sse / dof / sxx).sqrt();
    (slope, intercept, stderr)
}

// ── ablations ───────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct AblateRow {
    pub variant: String,
    pub final_loss: f64,
    pub final_perplexity: f64,
    pub steps: usize,
}

/// The ablation roster: the full model, its five single-change variants,
/// and the parameter-matched transformer baseline.
pub fn ablation_variants(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let mut out = Vec::new();
    out.push(("retnet".to_string(), base.clone()));
    let with = |f: AblationFlags| {
        let mut c = base.clone();
        c.flags = f;
        c
    };
    out.push(("no_gate".into(), with(AblationFlags { no_gate: true, ..base.flags })));
    out.push((
        "no_groupnorm".into(),
        with(AblationFlags { no_groupnorm: true, ..base.flags }),
    ));
    out.push(("no_decay".into(), with(AblationFlags { no_decay: true, ..base.flags })));
    out.push((
        "single_scale".into(),
        with(AblationFlags { single_scale: true, ..base.flags }),
    ));
    let halved = (base.d_model / base.heads / 2).max(2);
    out.push((
        "half_head_dim".into(),
        with(AblationFlags { head_dim_override: Some(halved), ..base.flags }),
    ));
    let mut transformer = base.clone();
    transformer.arch = Arch::Transformer;
    transformer.ffn_dim = None;
    out.push(("transformer".into(), transformer));
    out
}

/// Train every selected variant under exactly the same seed and budget.
pub fn ablate(
    base_model: &ModelConfig,
    tcfg: &TrainConfig,
    task: SyntheticTask,
    rows: Option<&[String]>,
) -> Result<Vec<AblateRow>> {
    let mut out = Vec::new();
    for (name, config) in ablation_variants(base_model) {
        if let Some(wanted) = rows {
            if !wanted.iter().any(|w| w == &name) {
                continue;
            }
        }
        let data = TaskData::Synthetic(task);
        let (_, _, outcome): (_, _, TrainOutcome) =
            run_training(&config, tcfg, &data, None, None)?;
        out.push(AblateRow {
            variant: name,
            final_loss: outcome.final_loss,
            final_perplexity: outcome.final_perplexity,
            steps: outcome.steps_run,
        });
    }
    if out.is_empty() {
        return Err(Error::Config("no ablation rows matched the selection".into()));
    }
    Ok(out)
}

// ── CSV output ──────────────────────────────────────────────────────

pub fn write_suite_csv(path: impl AsRef<Path>, reports: &[SuiteReport]) -> Result<()> {
    let mut f = File::create(path)?;
    writeln!(f, "# schema: {SUITE_SCHEMA}")?;
    writeln!(f, "suite,cases,max_deviation,tolerance,passed")?;
    for r in reports {
        writeln!(
            f,
            "{},{},{:.6e},{:.0e},{}",
            r.suite,
            r.cases,
            r.max_deviation,
            r.tolerance,
            r.passed()
        )?;
    }
    Ok(())
}

pub fn write_bench_csv(path: impl AsRef<Path>, records: &[BenchRecord]) -> Result<()> {
    let mut f = File::create(path)?;
    writeln!(f, "# schema: {BENCH_SCHEMA}")?;
    writeln!(
        f,
        "arch,mode,seq_len,batch,tokens_per_sec,latency_ms_mean,latency_ms_p50,latency_ms_p99,state_elements,peak_workspace_elements"
    )?;
    for r in records {
        writeln!(
            f,
            "{},{},{},{},{:.1},{:.4},{:.4},{:.4},{},{}",
            r.arch,
            r.mode,
            r.seq_len,
            r.batch,
            r.tokens_per_sec,
            r.latency_ms_mean,
            r.latency_ms_p50,
            r.latency_ms_p99,
            r.state_elements,
            r.peak_workspace_elements
        )?;
    }
    Ok(())
}

pub fn write_ablate_csv(path: impl AsRef<Path>, rows: &[AblateRow]) -> Result<()> {
    let mut f = File::create(path)?;
    writeln!(f, "# schema: {ABLATE_SCHEMA}")?;
    writeln!(f, "variant,final_loss,final_perplexity,steps")?;
    for r in rows {
        writeln!(
            f,
            "{},{:.6},{:.6},{}",
            r.variant, r.final_loss, r.final_perplexity, r.steps
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_retention_sweep_passes_both_precisions() {
        let r64 = retention_equivalence_suite(Precision::Fp64, 7, true, None);
        assert!(r64.passed(), "{}", r64.line());
        assert!(r64.cases > 100);
        let r32 = retention_equivalence_suite(Precision::Fp32, 8, true, None);
        assert!(r32.passed(), "{}", r32.line());
    }

    #[test]
    fn injected_defect_is_detected_and_named() {
        let r = retention_equivalence_suite(
            Precision::Fp64,
            7,
            true,
            Some(Defect::StateDecayOffByOne),
        );
        assert!(!r.passed(), "defect must trip the suite");
        assert!(r.worst_case.contains("chunkwise"), "worst case: {}", r.worst_case);
    }

    #[test]
    fn single_position_sweep_trivially_passes() {
        // a length-1 sweep cannot distinguish the paradigms
        let mut rng = Rng::new(1);
        let q = rng.normal_tensor(vec![1, 8], 0.3, Precision::Fp64);
        let k = rng.normal_tensor(vec![1, 8], 0.3, Precision::Fp64);
        let v = rng.normal_tensor(vec![1, 8], 0.3, Precision::Fp64);
        let cfg = NormalizationConfig::default();
        let mask = decay_mask(0.9, 1, cfg, Precision::Fp64).unwrap();
        let par = retention_parallel(&q, &k, &v, &mask, cfg).unwrap();
        let cw = rollout_chunkwise(&q, &k, &v, 0.9, 1, cfg, Some(Defect::StateDecayOffByOne));
        assert!(par.max_abs_diff(&cw) <= 1e-12);
    }

    #[test]
    fn neutrality_suite_quick() {
        let r = stabilizer_neutrality_suite(9, true);
        assert!(r.passed(), "{}", r.line());
    }

    #[test]
    fn model_suite_short_trace() {
        let r = model_equivalence_suite(3, 8).unwrap();
        assert!(r.passed(), "{}", r.line());
    }

    #[test]
    fn state_probe_shapes() {
        let marks = [8usize, 16, 32];
        let ret = state_scaling_probe(Arch::RetNet, &marks, 32, 1, 4).unwrap();
        assert_eq!(ret.len(), 3);
        assert_eq!(ret[0].1, ret[2].1, "retention state must not grow");
        let base = state_scaling_probe(Arch::Transformer, &marks, 32, 1, 4).unwrap();
        assert_eq!(base[1].1, 2 * base[0].1);
        assert_eq!(base[2].1, 2 * base[1].1);
        assert_eq!(base[0].1, 2 * 32 * 8);
    }

    #[test]
    fn bench_cell_budget_refusal() {
        let opts = InferBenchOptions { element_budget: 10, ..Default::default() };
        let err = infer_bench_cell(Arch::Transformer, 64, 1, &opts);
        let msg = err.unwrap_err().to_string();
        assert!(msg.contains("budget"), "{msg}");
        assert!(msg.contains("state elements"), "{msg}");
    }

    #[test]
    fn bench_cell_runs_and_counts() {
        let opts = InferBenchOptions {
            lengths: vec![16],
            batches: vec![2],
            d_model: 32,
            layers: 1,
            warmup: 2,
            ..Default::default()
        };
        let rec = infer_bench_cell(Arch::Transformer, 16, 2, &opts).unwrap();
        assert_eq!(rec.state_elements, 2 * 2 * 1 * 16 * 32);
        assert!(rec.tokens_per_sec > 0.0);
        assert!(rec.latency_ms_p99 >= rec.latency_ms_p50);
        let ret = infer_bench_cell(Arch::RetNet, 16, 2, &opts).unwrap();
        assert_eq!(ret.state_elements, projected_state_elements(&bench_config(Arch::RetNet, &opts), 16, 2));
    }

    #[test]
    fn linear_fit_recovers_a_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [3.0, 5.0, 7.0, 9.0];
        let (slope, intercept, stderr) = linear_fit(&xs, &ys);
        assert!((slope - 2.0).abs() <= 1e-12);
        assert!((intercept - 1.0).abs() <= 1e-12);
        assert!(stderr <= 1e-9);
    }

    #[test]
    fn ablation_roster_is_complete() {
        let base = ModelConfig::retnet(2, 16, 2, 12);
        let variants = ablation_variants(&base);
        let names: Vec<&str> = variants.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            [
                "retnet",
                "no_gate",
                "no_groupnorm",
                "no_decay",
                "single_scale",
                "half_head_dim",
                "transformer"
            ]
        );
        assert_eq!(variants.last().unwrap().1.arch, Arch::Transformer);
    }

    #[test]
    fn csv_writers_emit_schema_headers() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("suite.csv");
        write_suite_csv(
            &p1,
            &[SuiteReport {
                suite: "demo".into(),
                cases: 3,
                max_deviation: 1e-12,
                tolerance: 1e-10,
                worst_case: String::new(),
            }],
        )
        .unwrap();
        let text = std::fs::read_to_string(&p1).unwrap();
        assert!(text.starts_with(&format!("# schema: {SUITE_SCHEMA}")));
        assert!(text.contains("demo,3,"));
    }
}
