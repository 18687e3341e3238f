//! The retention operator for a single head, in its three equivalent
//! computation paths.
//!
//! Retention replaces softmax attention with a decayed linear mixing:
//!
//! ```text
//! out[n] = sum_{m<=n} gamma^(n-m) * (q[n].k[m]) * v[m]
//! ```
//!
//! The same map can be computed three ways:
//!
//! * **parallel** — one masked matrix product over the whole sequence,
//!   `(Q K^T ⊙ D) V` with `D[n][m] = gamma^(n-m)` under the causal
//!   triangle ([`retention_parallel`]);
//! * **recurrent** — a per-step state update `S[n] = gamma*S[n-1] +
//!   k[n]^T v[n]`, `out[n] = q[n] S[n]`, with constant memory
//!   ([`retention_recurrent_step`]);
//! * **chunkwise** — parallel inside fixed-size chunks, recurrent state
//!   handoff between chunks ([`retention_chunkwise`]).
//!
//! Equivalence of the three is the crate's central contract and is enforced
//! by the test suite down to 1e-10 in fp64.
//!
//! Three optional stabilizers ([`NormalizationConfig`]) rescale rows without
//! changing what a downstream per-position group normalization sees: the
//! query-key product is divided by `sqrt(d_k)`, each mask row by the square
//! root of its sum, and each retention row by `max(|row sum|, 1)`. The
//! recurrent and chunkwise paths keep two extra accumulators (the decay mass
//! `scale` and the decayed key sum `k_sum`) so that all three paths apply
//! identical rescalings and equivalence is preserved exactly rather than
//! only up to the normalization layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, Sign};
use crate::tensor::{Precision, Tensor};

/// Which of the three numerical stabilizers are active.
///
/// All three are rescalings only; with a per-position group normalization
/// downstream they do not change layer outputs (beyond float noise).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizationConfig {
    /// Divide `Q K^T` by `sqrt(d_k)`.
    pub scale_qk: bool,
    /// Divide mask row `n` by `sqrt(sum_i D[n][i])`.
    pub normalize_d: bool,
    /// Divide retention row `n` by `max(|sum_m R[n][m]|, 1)`.
    pub clamp_row_sum: bool,
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        NormalizationConfig { scale_qk: true, normalize_d: true, clamp_row_sum: true }
    }
}

impl NormalizationConfig {
    pub fn none() -> Self {
        NormalizationConfig { scale_qk: false, normalize_d: false, clamp_row_sum: false }
    }

    /// All eight on/off combinations, for sweeps.
    pub fn all_combinations() -> [NormalizationConfig; 8] {
        let mut out = [NormalizationConfig::none(); 8];
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = NormalizationConfig {
                scale_qk: i & 1 != 0,
                normalize_d: i & 2 != 0,
                clamp_row_sum: i & 4 != 0,
            };
        }
        out
    }

    fn qk_scale(&self, d_k: usize) -> f64 {
        if self.scale_qk {
            1.0 / (d_k as f64).sqrt()
        } else {
            1.0
        }
    }
}

/// Causal decay mask `D[n][m] = gamma^(n-m)` for `n >= m`, zero above the
/// diagonal, optionally row-normalized.
#[derive(Clone, Debug)]
pub struct DecayMask {
    gamma: f64,
    length: usize,
    /// The mask actually applied to scores (row-normalized iff `normalized`).
    matrix: Tensor,
    /// Per-row normalizers `sqrt(sum_i D[n][i])`, kept even when unused.
    row_scales: Vec<f64>,
    normalized: bool,
}

impl DecayMask {
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn row_scales(&self) -> &[f64] {
        &self.row_scales
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
}

/// Build the decay mask for a sequence of `length` positions.
///
/// Rejects `gamma` outside `(0, 1]`. With `cfg.normalize_d` each raw row is
/// divided by `sqrt(sum_i D[n][i])`.
pub fn decay_mask(
    gamma: f64,
    length: usize,
    cfg: NormalizationConfig,
    precision: Precision,
) -> Result<DecayMask> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::invalid(
            "decay_mask",
            format!("gamma {gamma} outside (0, 1]"),
        ));
    }
    if length == 0 {
        return Err(Error::invalid("decay_mask", "length must be >= 1"));
    }
    let mut data = vec![0.0f64; length * length];
    let mut row_scales = Vec::with_capacity(length);
    for n in 0..length {
        let mut row_sum = 0.0;
        let mut pow = 1.0;
        // m descending from n: pow = gamma^(n-m)
        for m in (0..=n).rev() {
            data[n * length + m] = pow;
            row_sum += pow;
            pow *= gamma;
        }
        let scale = row_sum.sqrt();
        if cfg.normalize_d {
            for m in 0..=n {
                data[n * length + m] /= scale;
            }
        }
        row_scales.push(scale);
    }
    Ok(DecayMask {
        gamma,
        length,
        matrix: Tensor::new(vec![length, length], data, precision)?,
        row_scales,
        normalized: cfg.normalize_d,
    })
}

/// The O(1) inference memory for one retention head.
///
/// `s` accumulates decayed `k^T v` outer products; `scale` the decay mass
/// `sum_i gamma^(n-i)`; `k_sum` the decayed key sum. The element count is
/// `d_k * d_v + d_k + 1` regardless of how many steps have been absorbed.
#[derive(Clone, Debug)]
pub struct RetentionState {
    /// `d_k x d_v` accumulated state.
    pub s: Tensor,
    /// Decayed key sum, `1 x d_k` (clamp-trick row sums in O(d)).
    pub k_sum: Tensor,
    /// Decay mass accumulator, equals `sum_{i=1..n} gamma^(n-i)`.
    pub scale: f64,
    /// Number of positions absorbed so far.
    pub position: usize,
}

impl RetentionState {
    pub fn zeros(d_k: usize, d_v: usize, precision: Precision) -> Self {
        RetentionState {
            s: Tensor::zeros(vec![d_k, d_v], precision),
            k_sum: Tensor::zeros(vec![1, d_k], precision),
            scale: 0.0,
            position: 0,
        }
    }

    /// Exact number of stored floats.
    pub fn element_count(&self) -> usize {
        self.s.numel() + self.k_sum.numel() + 1
    }

    /// State equivalent to absorbing a whole rotated sequence from zero:
    /// `S = sum_j gamma^(len-1-j) k[j]^T v[j]`, with matching `k_sum` and
    /// `scale`. Lets a full-sequence (parallel) pass hand off to decoding.
    pub fn from_sequence(k: &Tensor, v: &Tensor, gamma: f64) -> Result<Self> {
        if k.rows() != v.rows() {
            return Err(Error::ShapeMismatch {
                op: "retention_state",
                lhs: k.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        let (len, d_k, d_v) = (k.rows(), k.cols(), v.cols());
        let precision = k.precision();
        let mut s = vec![0.0f64; d_k * d_v];
        let mut k_sum = vec![0.0f64; d_k];
        let mut scale = 0.0f64;
        for j in 0..len {
            let w = gamma.powi((len - 1 - j) as i32);
            scale += w;
            for i in 0..d_k {
                let kw = w * k.at(j, i);
                k_sum[i] += kw;
                if kw == 0.0 {
                    continue;
                }
                for t in 0..d_v {
                    s[i * d_v + t] += kw * v.at(j, t);
                }
            }
        }
        Ok(RetentionState {
            s: Tensor::new(vec![d_k, d_v], s, precision)?,
            k_sum: Tensor::new(vec![1, d_k], k_sum, precision)?,
            scale: precision.quantize(scale),
            position: len,
        })
    }
}

fn head_dims(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize)> {
    if q.shape() != k.shape() {
        return Err(Error::ShapeMismatch {
            op: "retention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if q.rows() != v.rows() {
        return Err(Error::ShapeMismatch {
            op: "retention",
            lhs: q.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    Ok((q.rows(), q.cols(), v.cols()))
}

/// Parallel path: `(Q K^T ⊙ D) V` with optional stabilizers.
///
/// `q` and `k` must already carry their position rotations. Output row `n`
/// depends only on rows `<= n`.
pub fn retention_parallel(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &DecayMask,
    cfg: NormalizationConfig,
) -> Result<Tensor> {
    let (len, d_k, _) = head_dims(q, k, v)?;
    if mask.length != len {
        return Err(Error::invalid(
            "retention_parallel",
            format!("mask length {} != sequence length {len}", mask.length),
        ));
    }
    if mask.normalized != cfg.normalize_d {
        return Err(Error::invalid(
            "retention_parallel",
            "mask normalization does not match cfg.normalize_d",
        ));
    }
    let mut scores = ops::matmul_ex(q, false, k, true)?;
    let qk_scale = cfg.qk_scale(d_k);
    {
        let md = mask.matrix.data();
        let sd = scores.data_mut();
        for (s, m) in sd.iter_mut().zip(md) {
            *s *= qk_scale * m;
        }
    }
    scores.quantize_in_place();
    if cfg.clamp_row_sum {
        let sd = scores.data_mut();
        for n in 0..len {
            let row = &mut sd[n * len..(n + 1) * len];
            let t = row.iter().sum::<f64>().abs().max(1.0);
            for x in row.iter_mut() {
                *x /= t;
            }
        }
        scores.quantize_in_place();
    }
    ops::matmul(&scores, v)
}

/// Recurrent path: absorb one position, emit one output row.
///
/// `q`, `k`, `v` are single rows (shape `[d]` or `[1, d]`), rotated for the
/// state's current position. Accepts `gamma` in `[0, 1]` (zero means "no
/// memory"). Returns the output row and the advanced state; the input state
/// is never mutated.
pub fn retention_recurrent_step(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    state: &RetentionState,
    gamma: f64,
    cfg: NormalizationConfig,
) -> Result<(Tensor, RetentionState)> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(
            "retention_recurrent_step",
            format!("gamma {gamma} outside [0, 1]"),
        ));
    }
    let (d_k, d_v) = (q.numel(), v.numel());
    if k.numel() != d_k {
        return Err(Error::ShapeMismatch {
            op: "retention_recurrent_step",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if state.s.rows() != d_k || state.s.cols() != d_v {
        return Err(Error::ShapeMismatch {
            op: "retention_recurrent_step",
            lhs: state.s.shape().to_vec(),
            rhs: vec![d_k, d_v],
        });
    }
    let precision = state.s.precision();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());

    // S' = gamma * S + k^T v
    let sd = state.s.data();
    let mut s_new = vec![0.0f64; d_k * d_v];
    for i in 0..d_k {
        for j in 0..d_v {
            s_new[i * d_v + j] = gamma * sd[i * d_v + j] + kd[i] * vd[j];
        }
    }
    let s_new = Tensor::new(vec![d_k, d_v], s_new, precision)?;

    let ud = state.k_sum.data();
    let k_sum: Vec<f64> = (0..d_k).map(|i| gamma * ud[i] + kd[i]).collect();
    let k_sum = Tensor::new(vec![1, d_k], k_sum, precision)?;
    let scale = precision.quantize(gamma * state.scale + 1.0);

    // out = q S', rescaled by the active stabilizers
    let qk_scale = cfg.qk_scale(d_k);
    let row_div = if cfg.normalize_d { scale.sqrt() } else { 1.0 };
    let snd = s_new.data();
    let mut out = vec![0.0f64; d_v];
    for i in 0..d_k {
        let qi = qd[i];
        if qi == 0.0 {
            continue;
        }
        for j in 0..d_v {
            out[j] += qi * snd[i * d_v + j];
        }
    }
    let mut factor = qk_scale / row_div;
    if cfg.clamp_row_sum {
        let r: f64 = qd
            .iter()
            .zip(k_sum.data())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            * qk_scale
            / row_div;
        factor /= r.abs().max(1.0);
    }
    for x in &mut out {
        *x *= factor;
    }
    let out = Tensor::new(vec![d_v], out, precision)?;

    Ok((
        out,
        RetentionState { s: s_new, k_sum, scale, position: state.position + 1 },
    ))
}

/// Chunkwise path: parallel inside the chunk, recurrent across chunks.
///
/// `q`, `k`, `v` hold one chunk of at most `chunk_size` rows (only the final
/// chunk of a sequence may be shorter), rotated by absolute position. With
/// 0-based in-chunk index `j`, the carried state contributes
/// `gamma^(j+1) * (q[j] @ S)` to output row `j`, and the state update weighs
/// value row `j` by `gamma^(b-1-j)` where `b` is the actual chunk length:
///
/// ```text
/// S' = gamma^b * S + sum_j gamma^(b-1-j) * k[j]^T v[j]
/// ```
///
/// Correctness is pinned by equivalence with [`retention_parallel`] over the
/// concatenated sequence.
pub fn retention_chunkwise(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    state: &RetentionState,
    gamma: f64,
    chunk_size: usize,
    cfg: NormalizationConfig,
) -> Result<(Tensor, RetentionState)> {
    if chunk_size < 1 {
        return Err(Error::invalid("retention_chunkwise", "chunk size must be >= 1"));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(
            "retention_chunkwise",
            format!("gamma {gamma} outside [0, 1]"),
        ));
    }
    let (b, d_k, d_v) = head_dims(q, k, v)?;
    if b == 0 || b > chunk_size {
        return Err(Error::invalid(
            "retention_chunkwise",
            format!("chunk holds {b} rows, declared size {chunk_size}"),
        ));
    }
    if state.s.rows() != d_k || state.s.cols() != d_v {
        return Err(Error::ShapeMismatch {
            op: "retention_chunkwise",
            lhs: state.s.shape().to_vec(),
            rhs: vec![d_k, d_v],
        });
    }
    let precision = state.s.precision();
    let qk_scale = cfg.qk_scale(d_k);

    // Running decay mass and key sum give every row its global rescalers.
    let mut scales = Vec::with_capacity(b);
    let mut running_scale = state.scale;
    for _ in 0..b {
        running_scale = precision.quantize(gamma * running_scale + 1.0);
        scales.push(running_scale);
    }
    let mut k_sums = vec![0.0f64; b * d_k]; // k_sum after each in-chunk row
    {
        let kd = k.data();
        let mut prev = state.k_sum.data().to_vec();
        for j in 0..b {
            for i in 0..d_k {
                prev[i] = precision.quantize(gamma * prev[i] + kd[j * d_k + i]);
                k_sums[j * d_k + i] = prev[i];
            }
        }
    }

    // Inner-chunk: (Qc Kc^T ⊙ D_local) V, raw local decay mask.
    let mut scores = ops::matmul_ex(q, false, k, true)?;
    {
        let sd = scores.data_mut();
        for j in 0..b {
            for jp in 0..b {
                let w = if jp <= j { gamma.powi((j - jp) as i32) } else { 0.0 };
                sd[j * b + jp] *= qk_scale * w;
            }
        }
    }
    scores.quantize_in_place();
    let inner = ops::matmul(&scores, v)?;

    // Cross-chunk: row j picks up gamma^(j+1) * q[j] S.
    let cross = ops::matmul(q, &state.s)?;

    let mut out = vec![0.0f64; b * d_v];
    let qd = q.data();
    for j in 0..b {
        let cross_decay = gamma.powi(j as i32 + 1);
        let row_div = if cfg.normalize_d { scales[j].sqrt() } else { 1.0 };
        let mut factor = 1.0 / row_div;
        if cfg.clamp_row_sum {
            // row sum of the full (inner + cross) score row = q . k_sum
            let r: f64 = (0..d_k)
                .map(|i| qd[j * d_k + i] * k_sums[j * d_k + i])
                .sum::<f64>()
                * qk_scale
                / row_div;
            factor /= r.abs().max(1.0);
        }
        for t in 0..d_v {
            let raw = inner.at(j, t) + cross_decay * qk_scale * cross.at(j, t);
            out[j * d_v + t] = raw * factor;
        }
    }
    let out = Tensor::new(vec![b, d_v], out, precision)?;

    // State handoff.
    let sd = state.s.data();
    let kd = k.data();
    let vd = v.data();
    let chunk_decay = gamma.powi(b as i32);
    let mut s_new = vec![0.0f64; d_k * d_v];
    for i in 0..d_k {
        for t in 0..d_v {
            s_new[i * d_v + t] = chunk_decay * sd[i * d_v + t];
        }
    }
    for j in 0..b {
        let w = gamma.powi((b - 1 - j) as i32);
        for i in 0..d_k {
            let kw = w * kd[j * d_k + i];
            if kw == 0.0 {
                continue;
            }
            for t in 0..d_v {
                s_new[i * d_v + t] += kw * vd[j * d_v + t];
            }
        }
    }
    let s_new = Tensor::new(vec![d_k, d_v], s_new, precision)?;
    let k_sum_new = Tensor::new(vec![1, d_k], k_sums[(b - 1) * d_k..].to_vec(), precision)?;

    Ok((
        out,
        RetentionState {
            s: s_new,
            k_sum: k_sum_new,
            scale: scales[b - 1],
            position: state.position + b,
        },
    ))
}

/// Rotate row `i` of `x` by `positions[i] * theta` over consecutive feature
/// pairs. Angles follow [`ops::rotation_angles`].
///
/// Queries and keys both rotate with `Sign::Pos`: under a real dot product
/// the conjugate rotation of the complex formulation is realized by the
/// transpose in `Q K^T`, so `q[n] . k[m]` depends on `n - m` only. `Sign::Neg`
/// is the inverse map.
pub fn apply_xpos(x: &Tensor, positions: &[usize], sign: Sign) -> Result<Tensor> {
    let angles = ops::rotation_angles(x.cols(), x.precision())?;
    ops::rotate_rows(x, &angles, positions, sign)
}

/// Convenience for a full prefix `0..len`, offset by `start`.
pub fn apply_xpos_from(x: &Tensor, start: usize, sign: Sign) -> Result<Tensor> {
    let positions: Vec<usize> = (start..start + x.rows()).collect();
    apply_xpos(x, &positions, sign)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    /// Independent oracle: the retention sum evaluated term by term with
    /// plain loops, no matrix products shared with the implementation.
    fn reference_retention(
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        gamma: f64,
        cfg: NormalizationConfig,
    ) -> Tensor {
        let (len, d_k, d_v) = (q.rows(), q.cols(), v.cols());
        let qk_scale = if cfg.scale_qk { 1.0 / (d_k as f64).sqrt() } else { 1.0 };
        let mut out = vec![0.0f64; len * d_v];
        for n in 0..len {
            let c_n: f64 = (0..=n).map(|m| gamma.powi((n - m) as i32)).sum();
            let row_div = if cfg.normalize_d { c_n.sqrt() } else { 1.0 };
            let mut weights = vec![0.0f64; n + 1];
            for m in 0..=n {
                let dot: f64 = (0..d_k).map(|i| q.at(n, i) * k.at(m, i)).sum();
                weights[m] = gamma.powi((n - m) as i32) * dot * qk_scale / row_div;
            }
            let t = if cfg.clamp_row_sum {
                weights.iter().sum::<f64>().abs().max(1.0)
            } else {
                1.0
            };
            for m in 0..=n {
                for j in 0..d_v {
                    out[n * d_v + j] += weights[m] / t * v.at(m, j);
                }
            }
        }
        Tensor::new(vec![len, d_v], out, q.precision()).unwrap()
    }

    fn random_qkv(rng: &mut Rng, len: usize, d_k: usize, d_v: usize) -> (Tensor, Tensor, Tensor) {
        // std 1/3 keeps raw-path outputs order-one so absolute tolerances bind
        let q = rng.normal_tensor(vec![len, d_k], 1.0 / 3.0, Precision::Fp64);
        let k = rng.normal_tensor(vec![len, d_k], 1.0 / 3.0, Precision::Fp64);
        let v = rng.normal_tensor(vec![len, d_v], 1.0 / 3.0, Precision::Fp64);
        (q, k, v)
    }

    fn run_recurrent(
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        gamma: f64,
        cfg: NormalizationConfig,
    ) -> (Tensor, RetentionState) {
        let (len, d_k, d_v) = (q.rows(), q.cols(), v.cols());
        let mut state = RetentionState::zeros(d_k, d_v, q.precision());
        let mut rows = Vec::with_capacity(len);
        for n in 0..len {
            let qn = Tensor::new(vec![d_k], q.row(n).to_vec(), q.precision()).unwrap();
            let kn = Tensor::new(vec![d_k], k.row(n).to_vec(), q.precision()).unwrap();
            let vn = Tensor::new(vec![d_v], v.row(n).to_vec(), q.precision()).unwrap();
            let (out, next) = retention_recurrent_step(&qn, &kn, &vn, &state, gamma, cfg).unwrap();
            rows.push(out.into_data());
            state = next;
        }
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        (Tensor::from_rows(&refs, q.precision()).unwrap(), state)
    }

    fn run_chunkwise(
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        gamma: f64,
        chunk: usize,
        cfg: NormalizationConfig,
    ) -> (Tensor, RetentionState) {
        let (len, d_k, d_v) = (q.rows(), q.cols(), v.cols());
        let mut state = RetentionState::zeros(d_k, d_v, q.precision());
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(len);
        let mut start = 0;
        while start < len {
            let b = chunk.min(len - start);
            let slice = |t: &Tensor, cols: usize| {
                Tensor::new(
                    vec![b, cols],
                    t.data()[start * cols..(start + b) * cols].to_vec(),
                    t.precision(),
                )
                .unwrap()
            };
            let (out, next) = retention_chunkwise(
                &slice(q, d_k),
                &slice(k, d_k),
                &slice(v, d_v),
                &state,
                gamma,
                chunk,
                cfg,
            )
            .unwrap();
            for j in 0..b {
                rows.push(out.row(j).to_vec());
            }
            state = next;
            start += b;
        }
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        (Tensor::from_rows(&refs, q.precision()).unwrap(), state)
    }

    #[test]
    fn mask_matches_hand_computed_powers() {
        let m = decay_mask(0.5, 3, NormalizationConfig::none(), Precision::Fp64).unwrap();
        let expect = [1.0, 0.0, 0.0, 0.5, 1.0, 0.0, 0.25, 0.5, 1.0];
        assert_eq!(m.matrix().data(), &expect);
    }

    #[test]
    fn mask_gamma_one_is_causal_ones() {
        let m = decay_mask(1.0, 4, NormalizationConfig::none(), Precision::Fp64).unwrap();
        for n in 0..4 {
            for c in 0..4 {
                let want = if c <= n { 1.0 } else { 0.0 };
                assert_eq!(m.matrix().at(n, c), want);
            }
        }
    }

    #[test]
    fn mask_normalized_first_row_is_unit() {
        let m = decay_mask(0.9, 3, NormalizationConfig::default(), Precision::Fp64).unwrap();
        assert_eq!(m.matrix().at(0, 0), 1.0);
        assert_eq!(m.matrix().at(0, 1), 0.0);
    }

    #[test]
    fn mask_rejects_bad_gamma() {
        assert!(decay_mask(0.0, 3, NormalizationConfig::none(), Precision::Fp64).is_err());
        assert!(decay_mask(1.5, 3, NormalizationConfig::none(), Precision::Fp64).is_err());
        assert!(decay_mask(-0.1, 3, NormalizationConfig::none(), Precision::Fp64).is_err());
    }

    #[test]
    fn mask_rows_decay_monotonically() {
        let m = decay_mask(0.96875, 16, NormalizationConfig::none(), Precision::Fp64).unwrap();
        for n in 0..16 {
            for c in 1..=n {
                assert!(m.matrix().at(n, c) >= m.matrix().at(n, c - 1));
            }
        }
    }

    #[test]
    fn parallel_matches_term_by_term_reference() {
        let mut rng = Rng::new(31);
        for cfg in NormalizationConfig::all_combinations() {
            let (q, k, v) = random_qkv(&mut rng, 16, 8, 12);
            let gamma = 0.9;
            let mask = decay_mask(gamma, 16, cfg, Precision::Fp64).unwrap();
            let got = retention_parallel(&q, &k, &v, &mask, cfg).unwrap();
            let want = reference_retention(&q, &k, &v, gamma, cfg);
            assert!(got.max_abs_diff(&want) <= 1e-12, "cfg {cfg:?}");
        }
    }

    #[test]
    fn parallel_len_one_is_single_product() {
        let mut rng = Rng::new(32);
        let (q, k, v) = random_qkv(&mut rng, 1, 4, 4);
        let cfg = NormalizationConfig::none();
        let mask = decay_mask(0.7, 1, cfg, Precision::Fp64).unwrap();
        let got = retention_parallel(&q, &k, &v, &mask, cfg).unwrap();
        let dot: f64 = (0..4).map(|i| q.at(0, i) * k.at(0, i)).sum();
        for j in 0..4 {
            assert!((got.at(0, j) - dot * v.at(0, j)).abs() <= 1e-14);
        }
    }

    #[test]
    fn parallel_gamma_near_zero_is_diagonal() {
        let mut rng = Rng::new(33);
        let (q, k, v) = random_qkv(&mut rng, 6, 4, 4);
        let cfg = NormalizationConfig::none();
        let mask = decay_mask(1e-300, 6, cfg, Precision::Fp64).unwrap();
        let got = retention_parallel(&q, &k, &v, &mask, cfg).unwrap();
        for n in 0..6 {
            let dot: f64 = (0..4).map(|i| q.at(n, i) * k.at(n, i)).sum();
            for j in 0..4 {
                assert!((got.at(n, j) - dot * v.at(n, j)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn recurrent_gamma_zero_has_no_memory() {
        let mut rng = Rng::new(34);
        let (q, k, v) = random_qkv(&mut rng, 3, 4, 4);
        let cfg = NormalizationConfig::none();
        let mut state = RetentionState::zeros(4, 4, Precision::Fp64);
        for n in 0..3 {
            let qn = Tensor::new(vec![4], q.row(n).to_vec(), Precision::Fp64).unwrap();
            let kn = Tensor::new(vec![4], k.row(n).to_vec(), Precision::Fp64).unwrap();
            let vn = Tensor::new(vec![4], v.row(n).to_vec(), Precision::Fp64).unwrap();
            let (out, next) = retention_recurrent_step(&qn, &kn, &vn, &state, 0.0, cfg).unwrap();
            let dot: f64 = (0..4).map(|i| q.at(n, i) * k.at(n, i)).sum();
            for j in 0..4 {
                // summation order differs, so only reassociation noise remains
                assert!((out.data()[j] - dot * v.at(n, j)).abs() <= 1e-15);
            }
            state = next;
        }
    }

    #[test]
    fn first_recurrent_step_equals_len_one_parallel() {
        let mut rng = Rng::new(35);
        for cfg in NormalizationConfig::all_combinations() {
            let (q, k, v) = random_qkv(&mut rng, 1, 6, 10);
            let gamma = 0.96875;
            let mask = decay_mask(gamma, 1, cfg, Precision::Fp64).unwrap();
            let par = retention_parallel(&q, &k, &v, &mask, cfg).unwrap();
            let state = RetentionState::zeros(6, 10, Precision::Fp64);
            let qn = Tensor::new(vec![6], q.row(0).to_vec(), Precision::Fp64).unwrap();
            let kn = Tensor::new(vec![6], k.row(0).to_vec(), Precision::Fp64).unwrap();
            let vn = Tensor::new(vec![10], v.row(0).to_vec(), Precision::Fp64).unwrap();
            let (out, next) = retention_recurrent_step(&qn, &kn, &vn, &state, gamma, cfg).unwrap();
            for j in 0..10 {
                assert!((out.data()[j] - par.at(0, j)).abs() <= 1e-13, "cfg {cfg:?}");
            }
            assert_eq!(next.position, 1);
        }
    }

    #[test]
    fn recurrent_rollout_matches_parallel() {
        let mut rng = Rng::new(36);
        for cfg in NormalizationConfig::all_combinations() {
            let (q, k, v) = random_qkv(&mut rng, 32, 8, 8);
            let gamma = 0.96875;
            let mask = decay_mask(gamma, 32, cfg, Precision::Fp64).unwrap();
            let par = retention_parallel(&q, &k, &v, &mask, cfg).unwrap();
            let (rec, _) = run_recurrent(&q, &k, &v, gamma, cfg);
            assert!(par.max_abs_diff(&rec) <= 1e-10, "cfg {cfg:?}");
        }
    }

    #[test]
    fn single_chunk_equals_parallel_exactly_in_structure() {
        let mut rng = Rng::new(37);
        for cfg in NormalizationConfig::all_combinations() {
            let (q, k, v) = random_qkv(&mut rng, 12, 8, 8);
            let gamma = 0.9;
            let mask = decay_mask(gamma, 12, cfg, Precision::Fp64).unwrap();
            let par = retention_parallel(&q, &k, &v, &mask, cfg).unwrap();
            let (cw, state) = run_chunkwise(&q, &k, &v, gamma, 12, cfg);
            assert!(par.max_abs_diff(&cw) <= 1e-12, "cfg {cfg:?}");
            assert_eq!(state.position, 12);
        }
    }

    #[test]
    fn chunk_of_one_matches_recurrent_rollout() {
        let mut rng = Rng::new(38);
        for cfg in NormalizationConfig::all_combinations() {
            let (q, k, v) = random_qkv(&mut rng, 9, 4, 6);
            let gamma = 0.999;
            let (rec, rs) = run_recurrent(&q, &k, &v, gamma, cfg);
            let (cw, cs) = run_chunkwise(&q, &k, &v, gamma, 1, cfg);
            assert!(rec.max_abs_diff(&cw) <= 1e-12, "cfg {cfg:?}");
            assert!(rs.s.max_abs_diff(&cs.s) <= 1e-12);
        }
    }

    #[test]
    fn chunkwise_matches_parallel_across_chunk_sizes() {
        let mut rng = Rng::new(39);
        for &chunk in &[4usize, 16, 32] {
            for cfg in [NormalizationConfig::none(), NormalizationConfig::default()] {
                let (q, k, v) = random_qkv(&mut rng, 64, 8, 8);
                let gamma = 0.96875;
                let mask = decay_mask(gamma, 64, cfg, Precision::Fp64).unwrap();
                let par = retention_parallel(&q, &k, &v, &mask, cfg).unwrap();
                let (cw, _) = run_chunkwise(&q, &k, &v, gamma, chunk, cfg);
                assert!(
                    par.max_abs_diff(&cw) <= 1e-10,
                    "chunk {chunk} cfg {cfg:?} diff {}",
                    par.max_abs_diff(&cw)
                );
            }
        }
    }

    #[test]
    fn partial_final_chunk_is_exact() {
        let mut rng = Rng::new(40);
        let cfg = NormalizationConfig::default();
        let (q, k, v) = random_qkv(&mut rng, 29, 8, 8); // 29 = 3*8 + 5
        let gamma = 0.96875;
        let mask = decay_mask(gamma, 29, cfg, Precision::Fp64).unwrap();
        let par = retention_parallel(&q, &k, &v, &mask, cfg).unwrap();
        let (cw, _) = run_chunkwise(&q, &k, &v, gamma, 8, cfg);
        assert!(par.max_abs_diff(&cw) <= 1e-10);
    }

    #[test]
    fn chunkwise_rejects_bad_chunk_size() {
        let mut rng = Rng::new(41);
        let (q, k, v) = random_qkv(&mut rng, 4, 4, 4);
        let state = RetentionState::zeros(4, 4, Precision::Fp64);
        let cfg = NormalizationConfig::none();
        assert!(retention_chunkwise(&q, &k, &v, &state, 0.9, 0, cfg).is_err());
        // more rows than the declared chunk size
        assert!(retention_chunkwise(&q, &k, &v, &state, 0.9, 3, cfg).is_err());
    }

    #[test]
    fn state_matches_direct_decayed_sum() {
        let mut rng = Rng::new(42);
        let (q, k, v) = random_qkv(&mut rng, 24, 6, 6);
        let gamma = 0.9;
        let (_, state) = run_recurrent(&q, &k, &v, gamma, NormalizationConfig::none());
        // direct sum: S = sum_m gamma^(n-1-m) k_m^T v_m, 0-based
        let mut direct = vec![0.0f64; 36];
        for m in 0..24 {
            let w = gamma.powi((24 - 1 - m) as i32);
            for i in 0..6 {
                for j in 0..6 {
                    direct[i * 6 + j] += w * k.at(m, i) * v.at(m, j);
                }
            }
        }
        for (got, want) in state.s.data().iter().zip(&direct) {
            assert!((got - want).abs() <= 1e-12);
        }
        assert_eq!(state.position, 24);
        assert_eq!(state.element_count(), 36 + 6 + 1);
    }

    #[test]
    fn causality_exact_zero_before_perturbation() {
        let mut rng = Rng::new(43);
        let cfg = NormalizationConfig::default();
        let (q, k, mut v) = random_qkv(&mut rng, 20, 8, 8);
        let gamma = 0.96875;
        let mask = decay_mask(gamma, 20, cfg, Precision::Fp64).unwrap();
        let base = retention_parallel(&q, &k, &v, &mask, cfg).unwrap();
        let p = 11;
        v.data_mut()[p * 8] += 10.0;
        let bumped = retention_parallel(&q, &k, &v, &mask, cfg).unwrap();
        for n in 0..p {
            for j in 0..8 {
                assert_eq!(base.at(n, j), bumped.at(n, j), "row {n} changed");
            }
        }
        let mut changed = false;
        for n in p..20 {
            for j in 0..8 {
                changed |= base.at(n, j) != bumped.at(n, j);
            }
        }
        assert!(changed);
    }

    #[test]
    fn xpos_dot_products_depend_on_relative_position_only() {
        let mut rng = Rng::new(44);
        let d = 16;
        let x = rng.normal_tensor(vec![1, d], 1.0, Precision::Fp64);
        let y = rng.normal_tensor(vec![1, d], 1.0, Precision::Fp64);
        let dot = |a: &Tensor, b: &Tensor| -> f64 {
            a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum()
        };
        // equal positions: the shared rotation cancels
        let qa = apply_xpos(&x, &[7], Sign::Pos).unwrap();
        let ka = apply_xpos(&y, &[7], Sign::Pos).unwrap();
        assert!((dot(&qa, &ka) - dot(&x, &y)).abs() <= 1e-12);

        // distinct position pairs with equal offset agree
        let q5 = apply_xpos(&x, &[5], Sign::Pos).unwrap();
        let k2 = apply_xpos(&y, &[2], Sign::Pos).unwrap();
        let q9 = apply_xpos(&x, &[9], Sign::Pos).unwrap();
        let k6 = apply_xpos(&y, &[6], Sign::Pos).unwrap();
        assert!((dot(&q5, &k2) - dot(&q9, &k6)).abs() <= 1e-12);
        let q20 = apply_xpos(&x, &[20], Sign::Pos).unwrap();
        let k17 = apply_xpos(&y, &[17], Sign::Pos).unwrap();
        assert!((dot(&q5, &k2) - dot(&q20, &k17)).abs() <= 1e-12);
    }

    #[test]
    fn xpos_position_zero_is_identity() {
        let mut rng = Rng::new(45);
        let x = rng.normal_tensor(vec![1, 8], 1.0, Precision::Fp64);
        let r = apply_xpos(&x, &[0], Sign::Pos).unwrap();
        assert_eq!(x.data(), r.data());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn three_paradigms_agree(
            seed in 0u64..10_000,
            len in 1usize..48,
            chunk in 1usize..16,
            gamma_pick in 0usize..3,
            cfg_pick in 0usize..8,
        ) {
            let gamma = [0.9, 0.96875, 0.999][gamma_pick];
            let cfg = NormalizationConfig::all_combinations()[cfg_pick];
            let mut rng = Rng::new(seed);
            let (q, k, v) = random_qkv(&mut rng, len, 8, 8);
            let mask = decay_mask(gamma, len, cfg, Precision::Fp64).unwrap();
            let par = retention_parallel(&q, &k, &v, &mask, cfg).unwrap();
            let (rec, _) = run_recurrent(&q, &k, &v, gamma, cfg);
            let (cw, _) = run_chunkwise(&q, &k, &v, gamma, chunk, cfg);
            prop_assert!(par.max_abs_diff(&rec) <= 1e-10);
            prop_assert!(par.max_abs_diff(&cw) <= 1e-10);
        }
    }
}
