//! Desk-scale training and evaluation: byte-level corpora, the language
//! modeling objective, a decoupled-weight-decay Adam optimizer with a
//! warmup-then-linear-decay schedule, gradient verification against finite
//! differences, and last-K-token perplexity evaluation.
//!
//! Training runs entirely on the tape (parallel or chunkwise paradigm);
//! batches are processed one sequence at a time with gradients summed in
//! index order, so runs are deterministic for a fixed seed.

use std::fs::OpenOptions;
use std::io::Write as IoWrite;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{init_params, model_graph, ModelConfig, ModelParams};
use crate::msr::Paradigm;
use crate::tensor::{Precision, Rng, Tensor};

/// Start-of-sequence token id for the byte vocabulary (256 raw bytes plus
/// the two specials; vocabulary size 258).
pub const BOS: u32 = 256;
/// Padding token id (reserved; ordinary byte training never emits it).
pub const PAD: u32 = 257;
/// Byte vocabulary size: 256 byte values + BOS + PAD.
pub const BYTE_VOCAB: usize = 258;

/// Metrics CSV schema string written at the top of every metrics file.
pub const METRICS_SCHEMA: &str = "retnet-metrics-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    /// Sequences per step.
    pub batch_size: usize,
    /// Tokens per sequence including the leading start token.
    pub seq_len: usize,
    /// Peak learning rate.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Global-norm gradient clip threshold.
    pub grad_clip: f64,
    /// Training paradigm; parallel or chunkwise only.
    pub paradigm: Paradigm,
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 8,
            seq_len: 64,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.05,
            warmup_steps: 100,
            grad_clip: 1.0,
            paradigm: Paradigm::Parallel,
            eval_interval: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::Config("warmup_steps must not exceed steps".into()));
        }
        if self.seq_len < 2 || self.batch_size == 0 {
            return Err(Error::Config("seq_len >= 2 and batch_size >= 1 required".into()));
        }
        if matches!(self.paradigm, Paradigm::Recurrent) {
            return Err(Error::Config(
                "training uses the parallel or chunkwise paradigm".into(),
            ));
        }
        Ok(())
    }
}

/// Warmup-then-linear-decay schedule: 0 at step 0, peak at `warmup_steps`,
/// 0 again at `steps`.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    let step = step.min(cfg.steps);
    if cfg.warmup_steps > 0 && step <= cfg.warmup_steps {
        cfg.lr * step as f64 / cfg.warmup_steps as f64
    } else if cfg.steps == cfg.warmup_steps {
        cfg.lr
    } else {
        cfg.lr * (cfg.steps - step) as f64 / (cfg.steps - cfg.warmup_steps) as f64
    }
}

// ── objective ───────────────────────────────────────────────────────

/// Mean negative log-likelihood in nats; `exp` of it is the perplexity.
/// `targets[i]` is scored against `logits` row `i`.
pub fn cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<f64> {
    if logits.rows() != targets.len() {
        return Err(Error::invalid(
            "cross_entropy",
            format!("{} logit rows for {} targets", logits.rows(), targets.len()),
        ));
    }
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        if t as usize >= row.len() {
            return Err(Error::OutOfVocab { id: t, vocab: row.len() });
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[t as usize];
    }
    Ok(total / targets.len() as f64)
}

pub fn perplexity(mean_nll: f64) -> f64 {
    mean_nll.exp()
}

// ── optimizer ───────────────────────────────────────────────────────

/// First/second moment buffers, aligned with `ModelParams::flat_mut` order.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &mut ModelParams) -> Self {
        let flats = params.flat_mut();
        AdamState {
            m: flats
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec(), t.precision()))
                .collect(),
            v: flats
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec(), t.precision()))
                .collect(),
            t: 0,
        }
    }
}

const ADAM_EPS: f64 = 1e-8;

/// One decoupled-weight-decay Adam update over flat tensors.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
) {
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let pd = p.data_mut();
        for j in 0..pd.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            pd[j] -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + weight_decay * pd[j]);
        }
        p.quantize_in_place();
        state.m[i].quantize_in_place();
        state.v[i].quantize_in_place();
    }
}

// ── training step ───────────────────────────────────────────────────

/// One training sequence: tokens plus the first logits row that counts
/// toward the loss (synthetic tasks score only their answer span).
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub tokens: Vec<u32>,
    pub loss_start: usize,
}

impl TrainExample {
    pub fn full(tokens: Vec<u32>) -> Self {
        TrainExample { tokens, loss_start: 0 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Loss and parameter gradients for a batch, without an update. Gradients
/// are the batch mean, summed in sequence order.
pub fn batch_gradients(
    params: &ModelParams,
    batch: &[TrainExample],
    mcfg: &ModelConfig,
    paradigm: Paradigm,
    dropout_rng: Option<&mut Rng>,
) -> Result<(f64, Vec<Tensor>)> {
    let mut total_loss = 0.0;
    let mut grads: Option<Vec<Tensor>> = None;
    let mut rng = dropout_rng;
    for ex in batch {
        let len = ex.tokens.len();
        if len < 2 || ex.loss_start + 1 >= len {
            return Err(Error::invalid("train_step", "sequence too short for a target"));
        }
        let mut g = Graph::new(mcfg.precision);
        let (logits, nodes) = model_graph(
            &mut g,
            &ex.tokens,
            mcfg,
            params,
            paradigm,
            rng.as_deref_mut(),
        )?;
        let span = (len - 1) - ex.loss_start;
        let scored = g.slice_rows(logits, ex.loss_start, span);
        let targets = &ex.tokens[ex.loss_start + 1..];
        let loss = g.cross_entropy(scored, targets);
        let loss_val = g.value(loss).item();
        total_loss += loss_val;
        g.backward(loss)?;

        let ids = nodes.flat();
        match &mut grads {
            None => grads = Some(ids.iter().map(|&id| g.grad_tensor(id)).collect()),
            Some(acc) => {
                for (slot, &id) in acc.iter_mut().zip(&ids) {
                    let delta = g.grad_tensor(id);
                    for (a, b) in slot.data_mut().iter_mut().zip(delta.data()) {
                        *a += b;
                    }
                }
            }
        }
    }
    let n = batch.len() as f64;
    let mut grads = grads.expect("non-empty batch");
    for t in &mut grads {
        for x in t.data_mut() {
            *x /= n;
        }
    }
    Ok((total_loss / n, grads))
}

pub fn global_grad_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .map(|t| t.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Forward + backward + clipped AdamW update on one batch. Deterministic
/// for a fixed seed; aborts with a diagnostic if the loss is not finite.
pub fn train_step(
    params: &mut ModelParams,
    batch: &[TrainExample],
    adam: &mut AdamState,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    step: usize,
) -> Result<StepStats> {
    let mut dropout_rng = (mcfg.dropout > 0.0)
        .then(|| Rng::new(tcfg.seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
    let (loss, mut grads) =
        batch_gradients(params, batch, mcfg, tcfg.paradigm, dropout_rng.as_mut())?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step, value: loss });
    }

    let norm = global_grad_norm(&grads);
    if tcfg.grad_clip > 0.0 && norm > tcfg.grad_clip {
        let scale = tcfg.grad_clip / norm;
        for t in &mut grads {
            for x in t.data_mut() {
                *x *= scale;
            }
        }
    }
    let lr = lr_at(tcfg, step);
    let mut flat = params.flat_mut();
    adamw_step(
        &mut flat,
        &grads,
        adam,
        lr,
        tcfg.beta1,
        tcfg.beta2,
        tcfg.weight_decay,
    );
    Ok(StepStats { loss, lr, grad_norm: norm })
}

// ── corpus ──────────────────────────────────────────────────────────

/// Byte-level corpus with a train/valid split. Training sequences are
/// contiguous non-overlapping windows, each prefixed with the start token.
#[derive(Clone, Debug)]
pub struct Corpus {
    bytes: Vec<u8>,
    split: usize,
}

impl Corpus {
    pub fn from_bytes(bytes: Vec<u8>, valid_fraction: f64) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::InsufficientData("corpus is empty".into()));
        }
        if !(0.0..1.0).contains(&valid_fraction) {
            return Err(Error::Config("valid_fraction must be in [0, 1)".into()));
        }
        let split = bytes.len() - (bytes.len() as f64 * valid_fraction) as usize;
        Ok(Corpus { bytes, split })
    }

    pub fn load(path: impl AsRef<Path>, valid_fraction: f64) -> Result<Self> {
        Corpus::from_bytes(std::fs::read(path)?, valid_fraction)
    }

    pub fn train_bytes(&self) -> &[u8] {
        &self.bytes[..self.split]
    }

    pub fn valid_bytes(&self) -> &[u8] {
        &self.bytes[self.split..]
    }

    /// Number of full training windows for a given sequence length.
    pub fn window_count(&self, seq_len: usize) -> usize {
        self.train_bytes().len() / (seq_len - 1)
    }

    /// Window `i` as tokens: start token then `seq_len - 1` bytes.
    pub fn window(&self, i: usize, seq_len: usize) -> Vec<u32> {
        let w = seq_len - 1;
        let bytes = &self.train_bytes()[i * w..(i + 1) * w];
        let mut tokens = Vec::with_capacity(seq_len);
        tokens.push(BOS);
        tokens.extend(bytes.iter().map(|&b| b as u32));
        tokens
    }

    pub fn sample_batch(&self, rng: &mut Rng, tcfg: &TrainConfig) -> Result<Vec<TrainExample>> {
        let count = self.window_count(tcfg.seq_len);
        if count == 0 {
            return Err(Error::InsufficientData(format!(
                "corpus has {} training bytes, needs {}",
                self.train_bytes().len(),
                tcfg.seq_len - 1
            )));
        }
        Ok((0..tcfg.batch_size)
            .map(|_| TrainExample::full(self.window(rng.below(count), tcfg.seq_len)))
            .collect())
    }
}

// ── synthetic tasks ─────────────────────────────────────────────────

/// Seeded capability probes with exact-match ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyntheticTask {
    /// `[bos, payload, 0, payload]`: learn to repeat the payload after the
    /// zero separator. Payload bytes are drawn from `1..=alphabet`.
    Copy { payload_len: usize, alphabet: usize },
    /// `[bos, k1, v1, ..., kP, vP, kq]`: emit the value paired with the
    /// queried key.
    Induction { pairs: usize, alphabet: usize },
}

impl SyntheticTask {
    pub fn sample(&self, rng: &mut Rng) -> TrainExample {
        match *self {
            SyntheticTask::Copy { payload_len, alphabet } => {
                let payload: Vec<u32> =
                    (0..payload_len).map(|_| 1 + rng.below(alphabet) as u32).collect();
                let mut tokens = Vec::with_capacity(2 * payload_len + 2);
                tokens.push(BOS);
                tokens.extend(&payload);
                tokens.push(0);
                tokens.extend(&payload);
                TrainExample { tokens, loss_start: payload_len + 1 }
            }
            SyntheticTask::Induction { pairs, alphabet } => {
                let half = alphabet / 2;
                let mut keys: Vec<u32> = Vec::with_capacity(pairs);
                while keys.len() < pairs {
                    let k = 1 + rng.below(half) as u32;
                    if !keys.contains(&k) {
                        keys.push(k);
                    }
                }
                let vals: Vec<u32> =
                    (0..pairs).map(|_| 1 + half as u32 + rng.below(half) as u32).collect();
                let pick = rng.below(pairs);
                let mut tokens = Vec::with_capacity(2 * pairs + 3);
                tokens.push(BOS);
                for (k, v) in keys.iter().zip(&vals) {
                    tokens.push(*k);
                    tokens.push(*v);
                }
                tokens.push(keys[pick]);
                tokens.push(vals[pick]);
                TrainExample { tokens, loss_start: 2 * pairs + 1 }
            }
        }
    }

    pub fn sample_batch(&self, rng: &mut Rng, batch: usize) -> Vec<TrainExample> {
        (0..batch).map(|_| self.sample(rng)).collect()
    }
}

/// Teacher-forced exact-token accuracy over each example's answer span.
pub fn task_accuracy(
    params: &ModelParams,
    mcfg: &ModelConfig,
    task: &SyntheticTask,
    samples: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for _ in 0..samples {
        let ex = task.sample(rng);
        let logits =
            crate::model::forward(&ex.tokens, mcfg, params, Paradigm::Parallel)?;
        for row in ex.loss_start..ex.tokens.len() - 1 {
            let predicted = crate::model::argmax(logits.row(row));
            if predicted as u32 == ex.tokens[row + 1] {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

// ── gradient verification ───────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub arch: String,
    pub paradigm: String,
    pub params_checked: usize,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn line(&self) -> String {
        format!(
            "gradcheck {} [{}]: {} tensors, {} coords, max rel err {:.3e} (tol {:.0e}) -> {}",
            self.arch,
            self.paradigm,
            self.params_checked,
            self.coords_checked,
            self.max_rel_err,
            self.tolerance,
            if self.passed { "pass" } else { "FAIL" }
        )
    }
}

/// Relative-error denominator floor: coordinates whose gradients sit below
/// this compare absolutely, since central differences at step 1e-5 carry
/// ~1e-9 of truncation/cancellation noise regardless of the gradient size.
pub const GRADCHECK_DENOM_FLOOR: f64 = 1e-4;

/// Parameter point for gradient checking: weights at fan-in scale and
/// perturbed norm affines, so every activation is order one. The standard
/// training init (std 0.02) leaves retention outputs near 1e-4, where the
/// group normalization's curvature swamps a step-1e-5 central difference.
fn gradcheck_params(mcfg: &ModelConfig, rng: &mut Rng) -> Result<ModelParams> {
    let mut params = init_params(mcfg, rng)?;
    let names = params.trainable_names();
    for (tensor, name) in params.flat_mut().into_iter().zip(names) {
        let shape = tensor.shape().to_vec();
        *tensor = if name.contains("gain") {
            let mut t = rng.normal_tensor(shape, 0.2, tensor.precision());
            for x in t.data_mut() {
                *x += 1.0;
            }
            t
        } else if name.contains("bias") {
            rng.normal_tensor(shape, 0.2, tensor.precision())
        } else if name == "embed" || name == "head" {
            rng.normal_tensor(shape, 0.5, tensor.precision())
        } else {
            let fan_in = shape[0] as f64;
            rng.normal_tensor(shape, 1.0 / fan_in.sqrt(), tensor.precision())
        };
    }
    Ok(params)
}

/// Compare tape gradients of the full loss against central finite
/// differences over every parameter coordinate (or an evenly spaced
/// subsample above `coord_cap` per tensor). fp64 only.
pub fn gradcheck(
    mcfg: &ModelConfig,
    seq_len: usize,
    tolerance: f64,
    fd_step: f64,
    coord_cap: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if mcfg.precision != Precision::Fp64 {
        return Err(Error::Config("gradcheck requires fp64".into()));
    }
    let mut rng = Rng::new(seed);
    let mut params = gradcheck_params(mcfg, &mut rng)?;
    let tokens: Vec<u32> =
        (0..seq_len).map(|_| rng.below(mcfg.vocab_size) as u32).collect();
    let ex = TrainExample::full(tokens);

    let (_, analytic) =
        batch_gradients(&params, std::slice::from_ref(&ex), mcfg, mcfg.paradigm, None)?;

    // finite differences, re-running the forward loss per coordinate
    let flat: Vec<Tensor> = params.flat_mut().into_iter().map(|t| t.clone()).collect();
    let eval = |ts: &[Tensor]| -> f64 {
        let mut probe = params.clone();
        for (slot, t) in probe.flat_mut().iter_mut().zip(ts) {
            **slot = t.clone();
        }
        let mut g = Graph::new(mcfg.precision);
        let (logits, _) =
            model_graph(&mut g, &ex.tokens, mcfg, &probe, mcfg.paradigm, None).expect("graph");
        let len = ex.tokens.len();
        let scored = g.slice_rows(logits, 0, len - 1);
        let loss = g.cross_entropy(scored, &ex.tokens[1..]);
        g.value(loss).item()
    };

    let mut worst: f64 = 0.0;
    let mut coords = 0usize;
    for (pi, tensor) in flat.iter().enumerate() {
        let numel = tensor.numel();
        let stride = numel.div_ceil(coord_cap).max(1);
        let mut work = flat.clone();
        for j in (0..numel).step_by(stride) {
            let orig = tensor.data()[j];
            work[pi].data_mut()[j] = orig + fd_step;
            let fp = eval(&work);
            work[pi].data_mut()[j] = orig - fd_step;
            let fm = eval(&work);
            work[pi].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * fd_step);
            let a = analytic[pi].data()[j];
            let denom = a.abs().max(numeric.abs()).max(GRADCHECK_DENOM_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
            coords += 1;
        }
    }
    Ok(GradCheckReport {
        arch: mcfg.arch.name().into(),
        paradigm: mcfg.paradigm.name(),
        params_checked: flat.len(),
        coords_checked: coords,
        max_rel_err: worst,
        tolerance,
        passed: worst <= tolerance,
    })
}

// ── evaluation ──────────────────────────────────────────────────────

/// Last-K-token perplexity per context length.
///
/// For each context length `C`, the slice is cut into non-overlapping
/// chunks of `C - 1` bytes, each prefixed with the start token; only the
/// final `last_k` tokens of every chunk are scored. Longer contexts
/// therefore never condition on less history than shorter ones.
pub fn eval_perplexity(
    params: &ModelParams,
    mcfg: &ModelConfig,
    data: &[u8],
    context_lengths: &[usize],
    last_k: usize,
) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::with_capacity(context_lengths.len());
    for &ctx in context_lengths {
        if ctx < 2 || last_k == 0 || last_k > ctx - 1 {
            return Err(Error::Config(format!(
                "context {ctx} cannot score its last {last_k} tokens"
            )));
        }
        let w = ctx - 1;
        let chunks = data.len() / w;
        if chunks == 0 {
            return Err(Error::InsufficientData(format!(
                "{} bytes cannot fill one context of {ctx}",
                data.len()
            )));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for c in 0..chunks {
            let bytes = &data[c * w..(c + 1) * w];
            let mut tokens = Vec::with_capacity(ctx);
            tokens.push(BOS);
            tokens.extend(bytes.iter().map(|&b| b as u32));
            let logits = crate::model::forward(&tokens, mcfg, params, mcfg.paradigm)?;
            // score rows ctx-1-last_k .. ctx-1 (predicting the last K tokens)
            let start = ctx - 1 - last_k;
            for row in start..ctx - 1 {
                let slice = Tensor::new(
                    vec![1, mcfg.vocab_size],
                    logits.row(row).to_vec(),
                    mcfg.precision,
                )?;
                total += cross_entropy(&slice, &[tokens[row + 1]])?;
                count += 1;
            }
        }
        out.push((ctx, perplexity(total / count as f64)));
    }
    Ok(out)
}

// ── training driver ─────────────────────────────────────────────────

pub enum TaskData<'a> {
    Corpus(&'a Corpus),
    Synthetic(SyntheticTask),
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps_run: usize,
    pub final_loss: f64,
    pub final_perplexity: f64,
    pub losses: Vec<f64>,
}

/// Full training loop. Writes one metrics row per step when `metrics_path`
/// is given; `probe` runs every `eval_interval` steps and can stop the run
/// early by returning `true`.
pub fn run_training(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    data: &TaskData,
    metrics_path: Option<&Path>,
    mut probe: Option<&mut dyn FnMut(usize, &ModelParams) -> bool>,
) -> Result<(ModelParams, AdamState, TrainOutcome)> {
    mcfg.validate()?;
    tcfg.validate()?;
    if matches!(data, TaskData::Corpus(_)) && mcfg.vocab_size != BYTE_VOCAB {
        return Err(Error::Config(format!(
            "byte-corpus training requires vocab_size {BYTE_VOCAB}, got {}",
            mcfg.vocab_size
        )));
    }
    let mut rng = Rng::new(mcfg.seed);
    let mut params = init_params(mcfg, &mut rng)?;
    let mut adam = AdamState::new(&mut params);
    let mut batch_rng = Rng::new(tcfg.seed);

    let mut metrics = match metrics_path {
        Some(p) => {
            let mut f = OpenOptions::new().create(true).append(true).open(p)?;
            if f.metadata()?.len() == 0 {
                writeln!(f, "# schema: {METRICS_SCHEMA}")?;
                writeln!(f, "step,loss,lr,tokens_per_sec,grad_norm")?;
            }
            Some(f)
        }
        None => None,
    };

    let mut losses = Vec::with_capacity(tcfg.steps);
    let mut steps_run = 0;
    for step in 0..tcfg.steps {
        let batch = match data {
            TaskData::Corpus(c) => c.sample_batch(&mut batch_rng, tcfg)?,
            TaskData::Synthetic(t) => t.sample_batch(&mut batch_rng, tcfg.batch_size),
        };
        let tokens: usize = batch.iter().map(|b| b.tokens.len()).sum();
        let t0 = Instant::now();
        let stats = train_step(&mut params, &batch, &mut adam, mcfg, tcfg, step)?;
        let dt = t0.elapsed().as_secs_f64();
        losses.push(stats.loss);
        steps_run = step + 1;
        if let Some(f) = metrics.as_mut() {
            writeln!(
                f,
                "{},{:.6},{:.6e},{:.1},{:.6e}",
                step,
                stats.loss,
                stats.lr,
                tokens as f64 / dt.max(1e-9),
                stats.grad_norm
            )?;
        }
        if tcfg.eval_interval > 0 && (step + 1) % tcfg.eval_interval == 0 {
            if let Some(cb) = probe.as_mut() {
                if cb(step + 1, &params) {
                    break;
                }
            }
        }
    }
    let final_loss = *losses.last().expect("at least one step");
    Ok((
        params,
        adam,
        TrainOutcome {
            steps_run,
            final_loss,
            final_perplexity: perplexity(final_loss),
            losses,
        },
    ))
}
