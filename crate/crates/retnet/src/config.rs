//! The structured run configuration file: one TOML document with `[model]`,
//! `[train]`, `[eval]`, and `[data]` sections. Every field has a default;
//! an empty file (or no file at all) is a complete, runnable configuration.
//! See `config.example.toml` at the repository root for the annotated
//! template.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Arch, ModelConfig};
use crate::msr::{AblationFlags, GammaSchedule, Paradigm};
use crate::retention::NormalizationConfig;
use crate::tensor::Precision;
use crate::train::{SyntheticTask, TrainConfig, BYTE_VOCAB};

fn default_layers() -> usize {
    2
}
fn default_d_model() -> usize {
    64
}
fn default_heads() -> usize {
    2
}
fn default_vocab() -> usize {
    BYTE_VOCAB
}
fn default_chunk() -> usize {
    32
}
fn default_arch() -> String {
    "retnet".into()
}
fn default_paradigm() -> String {
    "parallel".into()
}
fn default_schedule() -> String {
    "default".into()
}
fn default_precision() -> String {
    "fp32".into()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// "retnet" or "transformer".
    pub arch: String,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub vocab_size: usize,
    /// 0 means the architecture default (2*d for retention, 4*d baseline).
    pub ffn_dim: usize,
    /// "parallel", "recurrent", or "chunkwise".
    pub paradigm: String,
    pub chunk_size: usize,
    /// "default" or "size-invariant".
    pub gamma_schedule: String,
    pub no_gate: bool,
    pub no_groupnorm: bool,
    pub no_decay: bool,
    pub single_scale: bool,
    /// 0 keeps the configured head count.
    pub head_dim_override: usize,
    pub scale_qk: bool,
    pub normalize_d: bool,
    pub clamp_row_sum: bool,
    pub groupnorm_affine: bool,
    pub tied_embedding: bool,
    pub dropout: f64,
    /// "fp32" or "fp64".
    pub precision: String,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            arch: default_arch(),
            layers: default_layers(),
            d_model: default_d_model(),
            heads: default_heads(),
            vocab_size: default_vocab(),
            ffn_dim: 0,
            paradigm: default_paradigm(),
            chunk_size: default_chunk(),
            gamma_schedule: default_schedule(),
            no_gate: false,
            no_groupnorm: false,
            no_decay: false,
            single_scale: false,
            head_dim_override: 0,
            scale_qk: true,
            normalize_d: true,
            clamp_row_sum: true,
            groupnorm_affine: true,
            tied_embedding: true,
            dropout: 0.0,
            precision: default_precision(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    /// "parallel" or "chunkwise"; chunk size comes from `chunk_size`.
    pub paradigm: String,
    pub chunk_size: usize,
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 1000,
            batch_size: 8,
            seq_len: 64,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.05,
            warmup_steps: 100,
            grad_clip: 1.0,
            paradigm: default_paradigm(),
            chunk_size: default_chunk(),
            eval_interval: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Tokens scored at the end of each evaluation window.
    pub last_k: usize,
    /// Context lengths evaluated; empty means `[window]`.
    pub context_lengths: Vec<usize>,
    /// Default context window when `context_lengths` is empty.
    pub window: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { last_k: 32, context_lengths: Vec::new(), window: 256 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Path to a raw-byte corpus file; empty uses the bundled sample text.
    pub corpus: String,
    pub valid_fraction: f64,
    /// "" trains on the corpus; "copy" or "induction" trains a synthetic
    /// task instead.
    pub task: String,
    pub copy_len: usize,
    pub induction_pairs: usize,
    pub alphabet: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            corpus: String::new(),
            valid_fraction: 0.1,
            task: String::new(),
            copy_len: 16,
            induction_pairs: 8,
            alphabet: 16,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub data: DataSection,
}

fn parse_paradigm(name: &str, chunk: usize) -> Result<Paradigm> {
    match name {
        "parallel" => Ok(Paradigm::Parallel),
        "recurrent" => Ok(Paradigm::Recurrent),
        "chunkwise" => {
            if chunk < 1 {
                return Err(Error::Config("chunk_size must be >= 1".into()));
            }
            Ok(Paradigm::Chunkwise(chunk))
        }
        other => Err(Error::Config(format!("unknown paradigm {other:?}"))),
    }
}

impl FileConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("config parse: {e}")))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let config = ModelConfig {
            arch: Arch::parse(&m.arch)?,
            layers: m.layers,
            d_model: m.d_model,
            heads: m.heads,
            vocab_size: m.vocab_size,
            ffn_dim: (m.ffn_dim > 0).then_some(m.ffn_dim),
            paradigm: parse_paradigm(&m.paradigm, m.chunk_size)?,
            flags: AblationFlags {
                no_gate: m.no_gate,
                no_groupnorm: m.no_groupnorm,
                no_decay: m.no_decay,
                single_scale: m.single_scale,
                head_dim_override: (m.head_dim_override > 0).then_some(m.head_dim_override),
            },
            gamma_schedule: GammaSchedule::parse(&m.gamma_schedule)?,
            norm: NormalizationConfig {
                scale_qk: m.scale_qk,
                normalize_d: m.normalize_d,
                clamp_row_sum: m.clamp_row_sum,
            },
            groupnorm_affine: m.groupnorm_affine,
            tied_embedding: m.tied_embedding,
            dropout: m.dropout,
            precision: Precision::parse(&m.precision)?,
            seed: m.seed,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let config = TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            seq_len: t.seq_len,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            weight_decay: t.weight_decay,
            warmup_steps: t.warmup_steps,
            grad_clip: t.grad_clip,
            paradigm: parse_paradigm(&t.paradigm, t.chunk_size)?,
            eval_interval: t.eval_interval,
            seed: t.seed,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn synthetic_task(&self) -> Result<Option<SyntheticTask>> {
        match self.data.task.as_str() {
            "" => Ok(None),
            "copy" => Ok(Some(SyntheticTask::Copy {
                payload_len: self.data.copy_len,
                alphabet: self.data.alphabet,
            })),
            "induction" => Ok(Some(SyntheticTask::Induction {
                pairs: self.data.induction_pairs,
                alphabet: self.data.alphabet,
            })),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }

    pub fn context_lengths(&self) -> Vec<usize> {
        if self.eval.context_lengths.is_empty() {
            vec![self.eval.window]
        } else {
            self.eval.context_lengths.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_toml_is_a_full_config() {
        let fc: FileConfig = toml::from_str("").unwrap();
        let mc = fc.model_config().unwrap();
        assert_eq!(mc.d_model, 64);
        assert_eq!(mc.vocab_size, BYTE_VOCAB);
        assert_eq!(mc.ffn_dim(), 128);
        let tc = fc.train_config().unwrap();
        assert_eq!(tc.steps, 1000);
        assert_eq!(fc.context_lengths(), vec![256]);
        assert!(fc.synthetic_task().unwrap().is_none());
    }

    #[test]
    fn sections_parse_and_override() {
        let text = r#"
            [model]
            arch = "transformer"
            d_model = 32
            heads = 4
            paradigm = "chunkwise"
            chunk_size = 8
            precision = "fp64"

            [train]
            steps = 50
            warmup_steps = 10
            paradigm = "chunkwise"
            chunk_size = 4

            [eval]
            context_lengths = [64, 128]

            [data]
            task = "copy"
            copy_len = 12
        "#;
        let fc: FileConfig = toml::from_str(text).unwrap();
        let mc = fc.model_config().unwrap();
        assert_eq!(mc.arch, Arch::Transformer);
        assert_eq!(mc.paradigm, Paradigm::Chunkwise(8));
        assert_eq!(mc.ffn_dim(), 128);
        assert_eq!(mc.precision, Precision::Fp64);
        let tc = fc.train_config().unwrap();
        assert_eq!(tc.paradigm, Paradigm::Chunkwise(4));
        assert_eq!(fc.context_lengths(), vec![64, 128]);
        match fc.synthetic_task().unwrap() {
            Some(SyntheticTask::Copy { payload_len, .. }) => assert_eq!(payload_len, 12),
            other => panic!("unexpected task {other:?}"),
        }
    }

    #[test]
    fn bad_values_are_rejected() {
        let fc: FileConfig =
            toml::from_str("[model]\nparadigm = \"sideways\"").unwrap();
        assert!(fc.model_config().is_err());
        let fc: FileConfig = toml::from_str("[model]\nprecision = \"fp16\"").unwrap();
        assert!(fc.model_config().is_err());
        let err: std::result::Result<FileConfig, _> = toml::from_str("[model]\nbogus = 1");
        assert!(err.is_err(), "unknown keys must be rejected");
        let fc: FileConfig = toml::from_str("[train]\nlr = 0.0").unwrap();
        assert!(fc.train_config().is_err());
    }
}
