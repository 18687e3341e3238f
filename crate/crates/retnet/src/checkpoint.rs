//! Versioned binary checkpoints.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic     8  bytes   "RETNETCK"
//! version   u32        currently 1
//! cfg_len   u32        length of the JSON-encoded ModelConfig
//! cfg       cfg_len    serde_json of ModelConfig
//! step      u64        training step the snapshot was taken at
//! n_arrays  u32
//! array * n_arrays:
//!   name_len u16, name utf-8
//!   dtype    u8        0 = f32 payload, 1 = f64 payload
//!   ndim     u8
//!   dims     u64 * ndim
//!   payload  little-endian floats, row-major
//! has_opt   u8         0 or 1
//! if 1: t u64, n u32, then n arrays as above (optimizer moments)
//! ```
//!
//! fp32 tensors store exact f32 payloads (storage is always
//! f32-representable under that precision), so save / load round-trips are
//! bit-exact for both precisions. Array names and order are fixed by
//! [`named_arrays`], making checkpoint bytes deterministic for given
//! parameters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{MixerParams, ModelConfig, ModelParams};
use crate::tensor::{Precision, Tensor};

pub const MAGIC: &[u8; 8] = b"RETNETCK";
pub const VERSION: u32 = 1;

/// Optimizer snapshot: step count plus named moment arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub t: u64,
    pub arrays: Vec<(String, Tensor)>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub arrays: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerSnapshot>,
}

/// Flatten parameters into `(name, tensor)` pairs in a fixed order.
pub fn named_arrays(params: &ModelParams) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = vec![("embed".into(), params.embed.clone())];
    for (i, b) in params.blocks.iter().enumerate() {
        let p = |suffix: &str| format!("block{i}.{suffix}");
        out.push((p("norm1.gain"), b.norm1.gain.clone()));
        out.push((p("norm1.bias"), b.norm1.bias.clone()));
        match &b.mixer {
            MixerParams::Retention(m) => {
                out.push((p("msr.w_q"), m.w_q.clone()));
                out.push((p("msr.w_k"), m.w_k.clone()));
                out.push((p("msr.w_v"), m.w_v.clone()));
                out.push((p("msr.w_g"), m.w_g.clone()));
                out.push((p("msr.w_o"), m.w_o.clone()));
                out.push((
                    p("msr.gammas"),
                    Tensor::new(vec![m.gammas.len()], m.gammas.clone(), Precision::Fp64)
                        .expect("gammas"),
                ));
                if let Some(g) = &m.gn_gain {
                    out.push((p("msr.gn_gain"), g.clone()));
                }
                if let Some(bn) = &m.gn_bias {
                    out.push((p("msr.gn_bias"), bn.clone()));
                }
            }
            MixerParams::Attention(a) => {
                out.push((p("attn.w_q"), a.w_q.clone()));
                out.push((p("attn.w_k"), a.w_k.clone()));
                out.push((p("attn.w_v"), a.w_v.clone()));
                out.push((p("attn.w_o"), a.w_o.clone()));
            }
        }
        out.push((p("norm2.gain"), b.norm2.gain.clone()));
        out.push((p("norm2.bias"), b.norm2.bias.clone()));
        out.push((p("ffn.w1"), b.ffn_w1.clone()));
        out.push((p("ffn.w2"), b.ffn_w2.clone()));
    }
    out.push(("final_norm.gain".into(), params.final_norm.gain.clone()));
    out.push(("final_norm.bias".into(), params.final_norm.bias.clone()));
    if let Some(h) = &params.head {
        out.push(("head".into(), h.clone()));
    }
    out
}

/// Rebuild parameters from named arrays; every expected array must be
/// present with the right shape, and the decay rates must match the config.
pub fn params_from_arrays(
    config: &ModelConfig,
    arrays: &[(String, Tensor)],
) -> Result<ModelParams> {
    use crate::model::{AttnParams, BlockParams, LayerNormParams};
    use crate::msr::{effective_gammas, MSRLayerParams};

    let lookup = |name: &str| -> Result<Tensor> {
        arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name:?}")))
    };
    let d = config.d_model;
    let expect = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = lookup(name)?;
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "array {name:?} has shape {:?}, config wants {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    };

    let embed = expect("embed", &[config.vocab_size, d])?;
    let mut blocks = Vec::with_capacity(config.layers);
    for i in 0..config.layers {
        let p = |suffix: &str| format!("block{i}.{suffix}");
        let mixer = match config.arch {
            crate::model::Arch::RetNet => {
                let h = config.effective_heads()?;
                let gammas_t = expect(&p("msr.gammas"), &[h])?;
                let want = effective_gammas(h, config.gamma_schedule, &config.flags)?;
                for (a, b) in gammas_t.data().iter().zip(&want) {
                    if (a - b).abs() > 1e-12 {
                        return Err(Error::Checkpoint(
                            "decay rates in checkpoint do not match the config".into(),
                        ));
                    }
                }
                let affine = config.groupnorm_affine && !config.flags.no_groupnorm;
                MixerParams::Retention(MSRLayerParams {
                    w_q: expect(&p("msr.w_q"), &[d, d])?,
                    w_k: expect(&p("msr.w_k"), &[d, d])?,
                    w_v: expect(&p("msr.w_v"), &[d, 2 * d])?,
                    w_g: expect(&p("msr.w_g"), &[d, 2 * d])?,
                    w_o: expect(&p("msr.w_o"), &[2 * d, d])?,
                    gammas: gammas_t.data().to_vec(),
                    gn_gain: if affine { Some(expect(&p("msr.gn_gain"), &[2 * d])?) } else { None },
                    gn_bias: if affine { Some(expect(&p("msr.gn_bias"), &[2 * d])?) } else { None },
                })
            }
            crate::model::Arch::Transformer => MixerParams::Attention(AttnParams {
                w_q: expect(&p("attn.w_q"), &[d, d])?,
                w_k: expect(&p("attn.w_k"), &[d, d])?,
                w_v: expect(&p("attn.w_v"), &[d, d])?,
                w_o: expect(&p("attn.w_o"), &[d, d])?,
                heads: config.heads,
            }),
        };
        blocks.push(BlockParams {
            norm1: LayerNormParams {
                gain: expect(&p("norm1.gain"), &[d])?,
                bias: expect(&p("norm1.bias"), &[d])?,
            },
            mixer,
            norm2: LayerNormParams {
                gain: expect(&p("norm2.gain"), &[d])?,
                bias: expect(&p("norm2.bias"), &[d])?,
            },
            ffn_w1: expect(&p("ffn.w1"), &[d, config.ffn_dim()])?,
            ffn_w2: expect(&p("ffn.w2"), &[config.ffn_dim(), d])?,
        });
    }
    let head = if config.tied_embedding {
        None
    } else {
        Some(expect("head", &[config.vocab_size, d])?)
    };
    Ok(ModelParams {
        embed,
        blocks,
        final_norm: LayerNormParams {
            gain: expect("final_norm.gain", &[d])?,
            bias: expect("final_norm.bias", &[d])?,
        },
        head,
    })
}

impl Checkpoint {
    pub fn of_model(config: &ModelConfig, params: &ModelParams, step: u64) -> Self {
        Checkpoint {
            config: config.clone(),
            step,
            arrays: named_arrays(params),
            optimizer: None,
        }
    }

    pub fn params(&self) -> Result<ModelParams> {
        params_from_arrays(&self.config, &self.arrays)
    }

    /// Reject use under any config other than the one saved.
    pub fn ensure_matches(&self, config: &ModelConfig) -> Result<()> {
        if &self.config != config {
            return Err(Error::Checkpoint(
                "checkpoint was saved under a different config".into(),
            ));
        }
        Ok(())
    }
}

fn write_array(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    let name_bytes = name.as_bytes();
    w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
    w.write_all(name_bytes)?;
    let dtype: u8 = match t.precision() {
        Precision::Fp32 => 0,
        Precision::Fp64 => 1,
    };
    w.write_all(&[dtype, t.shape().len() as u8])?;
    for &dim in t.shape() {
        w.write_all(&(dim as u64).to_le_bytes())?;
    }
    match t.precision() {
        Precision::Fp32 => {
            for &x in t.data() {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        Precision::Fp64 => {
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_exact_vec(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    Ok(u16::from_le_bytes(read_exact_vec(r, 2)?.try_into().unwrap()))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact_vec(r, 4)?.try_into().unwrap()))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact_vec(r, 8)?.try_into().unwrap()))
}

fn read_array(r: &mut impl Read) -> Result<(String, Tensor)> {
    let name_len = read_u16(r)? as usize;
    let name = String::from_utf8(read_exact_vec(r, name_len)?)
        .map_err(|_| Error::Checkpoint("array name is not utf-8".into()))?;
    let meta = read_exact_vec(r, 2)?;
    let (dtype, ndim) = (meta[0], meta[1] as usize);
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u64(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let (precision, data) = match dtype {
        0 => {
            let raw = read_exact_vec(r, numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            (Precision::Fp32, data)
        }
        1 => {
            let raw = read_exact_vec(r, numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            (Precision::Fp64, data)
        }
        other => return Err(Error::Checkpoint(format!("unknown dtype tag {other}"))),
    };
    Ok((name, Tensor::new(shape, data, precision)?))
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(&ckpt.config)
        .map_err(|e| Error::Checkpoint(format!("config encode: {e}")))?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    w.write_all(&ckpt.step.to_le_bytes())?;
    w.write_all(&(ckpt.arrays.len() as u32).to_le_bytes())?;
    for (name, t) in &ckpt.arrays {
        write_array(&mut w, name, t)?;
    }
    match &ckpt.optimizer {
        None => w.write_all(&[0u8])?,
        Some(opt) => {
            w.write_all(&[1u8])?;
            w.write_all(&opt.t.to_le_bytes())?;
            w.write_all(&(opt.arrays.len() as u32).to_le_bytes())?;
            for (name, t) in &opt.arrays {
                write_array(&mut w, name, t)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_exact_vec(&mut r, 8)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let cfg_len = read_u32(&mut r)? as usize;
    let config: ModelConfig = serde_json::from_slice(&read_exact_vec(&mut r, cfg_len)?)
        .map_err(|e| Error::Checkpoint(format!("config decode: {e}")))?;
    let step = read_u64(&mut r)?;
    let n = read_u32(&mut r)? as usize;
    let mut arrays = Vec::with_capacity(n);
    for _ in 0..n {
        arrays.push(read_array(&mut r)?);
    }
    let has_opt = read_exact_vec(&mut r, 1)?[0];
    let optimizer = if has_opt == 1 {
        let t = read_u64(&mut r)?;
        let n = read_u32(&mut r)? as usize;
        let mut oa = Vec::with_capacity(n);
        for _ in 0..n {
            oa.push(read_array(&mut r)?);
        }
        Some(OptimizerSnapshot { t, arrays: oa })
    } else {
        None
    };
    Ok(Checkpoint { config, step, arrays, optimizer })
}
