//! Command-line surface: verification suites, gradient checks, training,
//! evaluation, decode-cost benchmarks, and ablation sweeps.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use retnet::bench::{self, equivalence_suites, infer_bench, linear_fit, InferBenchOptions};
use retnet::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerSnapshot};
use retnet::config::FileConfig;
use retnet::error::{Error, Result};
use retnet::model::{Arch, ModelConfig};
use retnet::msr::Paradigm;
use retnet::tensor::Precision;
use retnet::train::{
    eval_perplexity, gradcheck, run_training, AdamState, Corpus, TaskData, BYTE_VOCAB,
};

/// Sample text bundled for tests and smoke runs (see `[data] corpus`).
const BUNDLED_CORPUS: &[u8] = include_bytes!("../data/tiny_corpus.txt");

#[derive(Parser)]
#[command(
    name = "retnet",
    about = "Retention-based sequence modeling: equivalence suites, training, evaluation, and decode-cost benchmarks"
)]
struct Cli {
    /// TOML run configuration; every field has a default when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the seeds in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the model precision ("fp32" or "fp64").
    #[arg(long, global = true)]
    precision: Option<String>,

    /// Directory for CSV outputs and checkpoints.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the cross-paradigm equivalence and stabilizer-neutrality suites.
    Equivalence {
        /// Smaller sweep for fast iteration.
        #[arg(long)]
        quick: bool,
    },
    /// Compare reverse-mode gradients against central finite differences
    /// on small models of both architectures.
    Gradcheck,
    /// Train on the configured corpus or synthetic task; writes metrics CSV
    /// and a checkpoint.
    Train,
    /// Evaluate last-K-token perplexity of a checkpoint per context length.
    Eval {
        /// Checkpoint produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Context lengths, comma separated; defaults to the config's.
        #[arg(long, value_delimiter = ',')]
        contexts: Vec<usize>,
    },
    /// Autoregressive decode-cost benchmark: exact state sizes, throughput,
    /// and per-token latency across lengths and batch sizes.
    InferBench {
        /// "retnet", "transformer", or "both".
        #[arg(long, default_value = "both")]
        arch: String,
        #[arg(long, value_delimiter = ',', default_value = "64,128,256,512")]
        lengths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        batches: Vec<usize>,
        #[arg(long, default_value_t = 256)]
        d_model: usize,
        #[arg(long, default_value_t = 4)]
        layers: usize,
        /// Refuse cells whose projected state exceeds this element count.
        #[arg(long, default_value_t = 1 << 30)]
        element_budget: usize,
    },
    /// Train every architecture variant under one identical budget and
    /// emit a comparison CSV.
    Ablate {
        /// "all" or a comma-separated subset of variant names.
        #[arg(long, default_value = "all")]
        rows: String,
    },
}

fn load_file_config(cli: &Cli) -> Result<FileConfig> {
    let mut fc = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    if let Some(seed) = cli.seed {
        fc.model.seed = seed;
        fc.train.seed = seed;
    }
    if let Some(p) = &cli.precision {
        Precision::parse(p)?;
        fc.model.precision = p.clone();
    }
    Ok(fc)
}

fn load_corpus(fc: &FileConfig) -> Result<Corpus> {
    if fc.data.corpus.is_empty() {
        Corpus::from_bytes(BUNDLED_CORPUS.to_vec(), fc.data.valid_fraction)
    } else {
        Corpus::load(&fc.data.corpus, fc.data.valid_fraction)
    }
}

fn ensure_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn cmd_equivalence(cli: &Cli, quick: bool) -> Result<bool> {
    let fc = load_file_config(cli)?;
    let reports = equivalence_suites(fc.model.seed, quick)?;
    for r in &reports {
        println!("{}", r.line());
    }
    ensure_out(&cli.out)?;
    let path = cli.out.join("equivalence.csv");
    bench::write_suite_csv(&path, &reports)?;
    println!("wrote {}", path.display());
    Ok(reports.iter().all(|r| r.passed()))
}

fn cmd_gradcheck(cli: &Cli) -> Result<bool> {
    let fc = load_file_config(cli)?;
    let seed = fc.model.seed;
    let mut all = true;
    let mut retnet_parallel = ModelConfig::retnet(1, 16, 2, 16);
    retnet_parallel.precision = Precision::Fp64;
    let mut retnet_chunkwise = retnet_parallel.clone();
    retnet_chunkwise.paradigm = Paradigm::Chunkwise(4);
    let mut transformer = ModelConfig::transformer(1, 16, 2, 16);
    transformer.precision = Precision::Fp64;
    for config in [retnet_parallel, retnet_chunkwise, transformer] {
        let report = gradcheck(&config, 12, 1e-5, 1e-5, 32, seed.wrapping_add(11))?;
        println!("{}", report.line());
        all &= report.passed;
    }
    Ok(all)
}

fn snapshot_optimizer(
    adam: &AdamState,
    params: &mut retnet::model::ModelParams,
) -> OptimizerSnapshot {
    let names = params.trainable_names();
    let mut arrays = Vec::with_capacity(2 * names.len());
    for (name, t) in names.iter().zip(&adam.m) {
        arrays.push((format!("m.{name}"), t.clone()));
    }
    for (name, t) in names.iter().zip(&adam.v) {
        arrays.push((format!("v.{name}"), t.clone()));
    }
    OptimizerSnapshot { t: adam.t, arrays }
}

fn cmd_train(cli: &Cli) -> Result<bool> {
    let fc = load_file_config(cli)?;
    let mcfg = fc.model_config()?;
    let tcfg = fc.train_config()?;
    ensure_out(&cli.out)?;
    let metrics = cli.out.join("metrics.csv");

    let corpus;
    let data = match fc.synthetic_task()? {
        Some(task) => TaskData::Synthetic(task),
        None => {
            corpus = load_corpus(&fc)?;
            TaskData::Corpus(&corpus)
        }
    };
    let t0 = std::time::Instant::now();
    let (mut params, adam, outcome) = run_training(&mcfg, &tcfg, &data, Some(&metrics), None)?;
    let dt = t0.elapsed().as_secs_f64();

    let ckpt_path = cli.out.join("model.ckpt");
    let mut ckpt = Checkpoint::of_model(&mcfg, &params, outcome.steps_run as u64);
    ckpt.optimizer = Some(snapshot_optimizer(&adam, &mut params));
    save_checkpoint(&ckpt_path, &ckpt)?;

    println!(
        "trained {} steps in {:.1}s: final loss {:.4}, perplexity {:.3}",
        outcome.steps_run, dt, outcome.final_loss, outcome.final_perplexity
    );
    println!("metrics: {}", metrics.display());
    println!("checkpoint: {}", ckpt_path.display());
    Ok(true)
}

fn cmd_eval(cli: &Cli, ckpt_path: &Path, contexts: &[usize]) -> Result<bool> {
    let fc = load_file_config(cli)?;
    let ckpt = load_checkpoint(ckpt_path)?;
    if cli.config.is_some() {
        ckpt.ensure_matches(&fc.model_config()?)?;
    }
    let params = ckpt.params()?;
    if ckpt.config.vocab_size != BYTE_VOCAB {
        return Err(Error::Config(
            "eval scores byte corpora; the checkpoint is not a byte-vocab model".into(),
        ));
    }
    let corpus = load_corpus(&fc)?;
    let contexts = if contexts.is_empty() { fc.context_lengths() } else { contexts.to_vec() };
    let table = eval_perplexity(
        &params,
        &ckpt.config,
        corpus.valid_bytes(),
        &contexts,
        fc.eval.last_k,
    )?;

    ensure_out(&cli.out)?;
    let path = cli.out.join("eval.csv");
    let mut f = std::fs::File::create(&path)?;
    use std::io::Write;
    writeln!(f, "# schema: retnet-eval-v1")?;
    writeln!(f, "context_length,last_k,perplexity")?;
    println!("context_length  perplexity (last {} tokens)", fc.eval.last_k);
    for (ctx, ppl) in &table {
        writeln!(f, "{},{},{:.6}", ctx, fc.eval.last_k, ppl)?;
        println!("{ctx:>14}  {ppl:.4}");
    }
    println!("wrote {}", path.display());
    Ok(true)
}

fn cmd_infer_bench(
    cli: &Cli,
    arch: &str,
    lengths: Vec<usize>,
    batches: Vec<usize>,
    d_model: usize,
    layers: usize,
    element_budget: usize,
) -> Result<bool> {
    let fc = load_file_config(cli)?;
    let archs: Vec<Arch> = match arch {
        "both" => vec![Arch::RetNet, Arch::Transformer],
        other => vec![Arch::parse(other)?],
    };
    let opts = InferBenchOptions {
        lengths,
        batches,
        d_model,
        layers,
        warmup: 3,
        element_budget,
        seed: fc.model.seed,
        precision: Precision::Fp32,
    };
    let records = infer_bench(&archs, &opts)?;
    println!("arch         len  batch  tok/s      lat p50 ms  state elems");
    for r in &records {
        println!(
            "{:<11} {:>5} {:>5}  {:>9.1}  {:>10.4}  {:>11}",
            r.arch, r.seq_len, r.batch, r.tokens_per_sec, r.latency_ms_p50, r.state_elements
        );
    }
    // qualitative trend: per-token latency slope against length
    for &a in &archs {
        let pts: Vec<(f64, f64)> = records
            .iter()
            .filter(|r| r.arch == a.name() && r.batch == opts.batches[0])
            .map(|r| (r.seq_len as f64, r.latency_ms_p50))
            .collect();
        if pts.len() >= 2 {
            let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
            let (slope, _, stderr) = linear_fit(&xs, &ys);
            println!(
                "{}: latency slope {:.3e} ms per token of length (stderr {:.1e})",
                a.name(),
                slope,
                stderr
            );
        }
    }
    ensure_out(&cli.out)?;
    let path = cli.out.join("infer_bench.csv");
    bench::write_bench_csv(&path, &records)?;
    println!("wrote {}", path.display());
    Ok(true)
}

fn cmd_ablate(cli: &Cli, rows: &str) -> Result<bool> {
    let fc = load_file_config(cli)?;
    let mut base = fc.model_config()?;
    if base.arch != Arch::RetNet {
        base.arch = Arch::RetNet;
        base.ffn_dim = None;
    }
    let tcfg = fc.train_config()?;
    let task = fc.synthetic_task()?.unwrap_or(retnet::train::SyntheticTask::Copy {
        payload_len: fc.data.copy_len,
        alphabet: fc.data.alphabet,
    });
    let selection: Option<Vec<String>> = match rows {
        "all" => None,
        list => Some(list.split(',').map(str::to_string).collect()),
    };
    let table = bench::ablate(&base, &tcfg, task, selection.as_deref())?;
    println!("variant        final_loss  final_ppl  steps");
    for r in &table {
        println!(
            "{:<13} {:>10.4} {:>10.3} {:>6}",
            r.variant, r.final_loss, r.final_perplexity, r.steps
        );
    }
    ensure_out(&cli.out)?;
    let path = cli.out.join("ablate.csv");
    bench::write_ablate_csv(&path, &table)?;
    println!("wrote {}", path.display());
    Ok(table.iter().all(|r| r.final_loss.is_finite()))
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Equivalence { quick } => cmd_equivalence(cli, *quick),
        Command::Gradcheck => cmd_gradcheck(cli),
        Command::Train => cmd_train(cli),
        Command::Eval { checkpoint, contexts } => cmd_eval(cli, checkpoint, contexts),
        Command::InferBench { arch, lengths, batches, d_model, layers, element_budget } => {
            cmd_infer_bench(
                cli,
                arch,
                lengths.clone(),
                batches.clone(),
                *d_model,
                *layers,
                *element_budget,
            )
        }
        Command::Ablate { rows } => cmd_ablate(cli, rows),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("one or more checks failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
