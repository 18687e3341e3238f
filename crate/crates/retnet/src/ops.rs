//! Pure math kernels: matrix products, normalizations, activations, and the
//! paired-feature rotation used for relative position encoding.
//!
//! All kernels are plain functions `&Tensor -> Tensor`, deterministic for a
//! fixed configuration (fixed summation order, no threading), and quantize
//! their result to the input precision.

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

/// Rotation direction for [`rotate_pairs`]: queries rotate forward, keys
/// backward, so their inner product depends only on relative position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sign {
    Pos,
    Neg,
}

impl Sign {
    pub fn factor(self) -> f64 {
        match self {
            Sign::Pos => 1.0,
            Sign::Neg => -1.0,
        }
    }

    pub fn flip(self) -> Sign {
        match self {
            Sign::Pos => Sign::Neg,
            Sign::Neg => Sign::Pos,
        }
    }
}

/// Standard matrix product `a @ b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_ex(a, false, b, false)
}

/// Matrix product with optional transposes: `op(a) @ op(b)` where `op(x)` is
/// `x` or `x^T`. Shapes are validated before any work happens.
pub fn matmul_ex(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Result<Tensor> {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    if k != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0f64; m * n];
    match (ta, tb) {
        (false, false) => {
            // ikj order: sequential access on both b and out.
            for i in 0..m {
                for p in 0..k {
                    let av = ad[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &ad[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &bd[j * k..(j + 1) * k];
                    let mut s = 0.0;
                    for p in 0..k {
                        s += arow[p] * brow[p];
                    }
                    out[i * n + j] = s;
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let arow = &ad[p * m..(p + 1) * m];
                let brow = &bd[p * n..(p + 1) * n];
                for i in 0..m {
                    let av = arow[i];
                    if av == 0.0 {
                        continue;
                    }
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += ad[p * m + i] * bd[j * k + p];
                    }
                    out[i * n + j] = s;
                }
            }
        }
    }
    Tensor::new(vec![m, n], out, a.precision())
}

/// Group normalization over the last dimension, applied independently at
/// each row (sequence position).
///
/// Each row is split into `groups` equal blocks; each block is shifted to
/// zero mean and scaled to unit variance. The denominator is
/// `sqrt(max(var, eps^2))`: `eps` acts as a variance floor, so scaling a
/// group by any `alpha > 0` leaves the output exactly unchanged whenever the
/// group's deviation exceeds `eps`. Optional `affine = (gain, bias)` applies
/// a per-feature transform after normalization.
pub fn group_norm(
    x: &Tensor,
    groups: usize,
    eps: f64,
    affine: Option<(&Tensor, &Tensor)>,
) -> Result<Tensor> {
    let cols = x.cols();
    if groups == 0 || cols % groups != 0 {
        return Err(Error::invalid(
            "group_norm",
            format!("{groups} groups do not divide feature dim {cols}"),
        ));
    }
    if let Some((gain, bias)) = affine {
        if gain.numel() != cols || bias.numel() != cols {
            return Err(Error::ShapeMismatch {
                op: "group_norm affine",
                lhs: x.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
    }
    let gsize = cols / groups;
    let rows = x.rows();
    let xd = x.data();
    let mut out = vec![0.0f64; rows * cols];
    for r in 0..rows {
        for g in 0..groups {
            let start = r * cols + g * gsize;
            let block = &xd[start..start + gsize];
            let mean = block.iter().sum::<f64>() / gsize as f64;
            let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gsize as f64;
            let denom = var.max(eps * eps).sqrt();
            for (i, v) in block.iter().enumerate() {
                out[start + i] = (v - mean) / denom;
            }
        }
        if let Some((gain, bias)) = affine {
            let gd = gain.data();
            let bd = bias.data();
            for c in 0..cols {
                out[r * cols + c] = out[r * cols + c] * gd[c] + bd[c];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out, x.precision())
}

/// LayerNorm: group normalization with a single group spanning the feature
/// dimension, plus per-feature affine.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    group_norm(x, 1, eps, Some((gain, bias)))
}

/// Rotation angles `theta_k = base^(-2k/d)` for `d/2` feature pairs, the
/// usual rotary convention with base 10000.
pub fn rotation_angles(d: usize, precision: Precision) -> Result<Tensor> {
    if d % 2 != 0 {
        return Err(Error::invalid("rotation_angles", format!("feature dim {d} is odd")));
    }
    let half = d / 2;
    let data = (0..half)
        .map(|k| 10000f64.powf(-2.0 * k as f64 / d as f64))
        .collect();
    Tensor::new(vec![half], data, precision)
}

/// Rotate each consecutive feature pair `(x[2k], x[2k+1])` of every row by
/// `sign * position * theta_k`. The map is orthogonal: norms are preserved
/// and the opposite sign undoes it.
pub fn rotate_pairs(x: &Tensor, angles: &Tensor, position: usize, sign: Sign) -> Result<Tensor> {
    rotate_rows(x, angles, &vec![position; x.rows()], sign)
}

/// Like [`rotate_pairs`] but with one position per row.
pub fn rotate_rows(x: &Tensor, angles: &Tensor, positions: &[usize], sign: Sign) -> Result<Tensor> {
    let d = x.cols();
    if d % 2 != 0 {
        return Err(Error::invalid("rotate_pairs", format!("feature dim {d} is odd")));
    }
    if angles.numel() != d / 2 {
        return Err(Error::ShapeMismatch {
            op: "rotate_pairs",
            lhs: x.shape().to_vec(),
            rhs: angles.shape().to_vec(),
        });
    }
    if positions.len() != x.rows() {
        return Err(Error::invalid(
            "rotate_pairs",
            format!("{} positions for {} rows", positions.len(), x.rows()),
        ));
    }
    let xd = x.data();
    let ad = angles.data();
    let mut out = vec![0.0f64; xd.len()];
    for (r, &pos) in positions.iter().enumerate() {
        let row = &xd[r * d..(r + 1) * d];
        let orow = &mut out[r * d..(r + 1) * d];
        for k in 0..d / 2 {
            let angle = sign.factor() * pos as f64 * ad[k];
            let (sin, cos) = angle.sin_cos();
            let (x0, x1) = (row[2 * k], row[2 * k + 1]);
            orow[2 * k] = x0 * cos - x1 * sin;
            orow[2 * k + 1] = x0 * sin + x1 * cos;
        }
    }
    Tensor::new(x.shape().to_vec(), out, x.precision())
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// swish(x) = x * sigmoid(x)
pub fn swish(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid_scalar(v))
}

#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    // tanh approximation
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// Row-wise softmax with max-subtraction; each output row sums to 1.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let cols = x.cols();
    let rows = x.rows();
    let xd = x.data();
    let mut out = vec![0.0f64; xd.len()];
    for r in 0..rows {
        let row = &xd[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (i, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out[r * cols + i] = e;
            sum += e;
        }
        for i in 0..cols {
            out[r * cols + i] /= sum;
        }
    }
    let mut t = Tensor::new(x.shape().to_vec(), out, x.precision()).expect("same shape");
    t.quantize_in_place();
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows, Precision::Fp64).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i2 = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let c = matmul(&i2, &a).unwrap();
        assert_eq!(c.data(), a.data());
    }

    #[test]
    fn matmul_projector() {
        let p = t2(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let b = t2(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let c = matmul(&p, &b).unwrap();
        assert_eq!(c.data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let a = Tensor::zeros(vec![2, 3], Precision::Fp64);
        let b = Tensor::zeros(vec![2, 3], Precision::Fp64);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "dims not reported: {msg}");
    }

    /// Oracle: naive triple loop, independent of the kernel's loop order.
    fn matmul_reference(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(i, p) * b.at(p, j);
                }
                out[i * n + j] = s;
            }
        }
        Tensor::new(vec![m, n], out, a.precision()).unwrap()
    }

    #[test]
    fn matmul_matches_triple_loop_reference() {
        let mut rng = Rng::new(11);
        let a = rng.normal_tensor(vec![4, 5], 1.0, Precision::Fp64);
        let b = rng.normal_tensor(vec![5, 3], 1.0, Precision::Fp64);
        let c = matmul(&a, &b).unwrap();
        let r = matmul_reference(&a, &b);
        assert!(c.max_abs_diff(&r) <= 1e-12);
    }

    #[test]
    fn matmul_transpose_flags_agree_with_explicit_transposes() {
        let mut rng = Rng::new(12);
        let a = rng.normal_tensor(vec![4, 6], 1.0, Precision::Fp64);
        let b = rng.normal_tensor(vec![6, 3], 1.0, Precision::Fp64);

        let transpose = |t: &Tensor| {
            let (r, c) = (t.rows(), t.cols());
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = t.at(i, j);
                }
            }
            Tensor::new(vec![c, r], out, t.precision()).unwrap()
        };

        let at = transpose(&a); // 6x4
        let bt = transpose(&b); // 3x6
        let plain = matmul(&a, &b).unwrap();
        assert!(matmul_ex(&at, true, &b, false).unwrap().max_abs_diff(&plain) <= 1e-12);
        assert!(matmul_ex(&a, false, &bt, true).unwrap().max_abs_diff(&plain) <= 1e-12);
        assert!(matmul_ex(&at, true, &bt, true).unwrap().max_abs_diff(&plain) <= 1e-12);
    }

    #[test]
    fn group_norm_constant_group_is_zero() {
        let x = t2(&[&[3.0, 3.0, 3.0, 3.0]]);
        let y = group_norm(&x, 2, 1e-12, None).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn group_norm_moments() {
        let mut rng = Rng::new(3);
        let x = rng.normal_tensor(vec![5, 32], 2.5, Precision::Fp64);
        let y = group_norm(&x, 4, 1e-12, None).unwrap();
        for r in 0..5 {
            for g in 0..4 {
                let block: Vec<f64> = (0..8).map(|i| y.at(r, g * 8 + i)).collect();
                let mean = block.iter().sum::<f64>() / 8.0;
                let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
                assert!(mean.abs() <= 1e-10, "mean {mean}");
                assert!((var - 1.0).abs() <= 1e-8, "var {var}");
            }
        }
    }

    #[test]
    fn rotate_position_zero_is_identity() {
        let mut rng = Rng::new(5);
        let x = rng.normal_tensor(vec![3, 8], 1.0, Precision::Fp64);
        let angles = rotation_angles(8, Precision::Fp64).unwrap();
        let y = rotate_pairs(&x, &angles, 0, Sign::Pos).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn rotate_quarter_turn() {
        let x = t2(&[&[1.0, 0.0]]);
        let angles = Tensor::new(vec![1], vec![std::f64::consts::FRAC_PI_2], Precision::Fp64).unwrap();
        let y = rotate_pairs(&x, &angles, 1, Sign::Pos).unwrap();
        assert!((y.at(0, 0) - 0.0).abs() <= 1e-15);
        assert!((y.at(0, 1) - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn rotate_rejects_odd_dim() {
        let x = Tensor::zeros(vec![1, 3], Precision::Fp64);
        let angles = Tensor::zeros(vec![1], Precision::Fp64);
        assert!(rotate_pairs(&x, &angles, 1, Sign::Pos).is_err());
    }

    #[test]
    fn activation_fixed_points() {
        assert_eq!(swish(&Tensor::scalar(0.0, Precision::Fp64)).item(), 0.0);
        assert!(gelu_scalar(-40.0).abs() < 1e-12);
        let s = softmax_rows(&t2(&[&[0.0, 0.0, 0.0]]));
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() <= 1e-15);
        }
    }

    proptest! {
        #[test]
        fn group_norm_positive_scale_invariance(alpha in 1e-3f64..1e3, seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let x = rng.normal_tensor(vec![4, 16], 1.0, Precision::Fp32);
            let scaled = Tensor::new(
                x.shape().to_vec(),
                x.data().iter().map(|v| v * alpha).collect(),
                Precision::Fp32,
            ).unwrap();
            let a = group_norm(&x, 4, Precision::Fp32.eps(), None).unwrap();
            let b = group_norm(&scaled, 4, Precision::Fp32.eps(), None).unwrap();
            prop_assert!(a.max_abs_diff(&b) <= 1e-6);
        }

        #[test]
        fn rotation_preserves_norm_and_inverts(pos in 0usize..512, seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let x = rng.normal_tensor(vec![2, 16], 1.0, Precision::Fp64);
            let angles = rotation_angles(16, Precision::Fp64).unwrap();
            let y = rotate_pairs(&x, &angles, pos, Sign::Pos).unwrap();
            prop_assert!((y.norm() - x.norm()).abs() <= 1e-12 * x.norm().max(1.0));
            let back = rotate_pairs(&y, &angles, pos, Sign::Neg).unwrap();
            prop_assert!(back.max_abs_diff(&x) <= 1e-12);
        }

        #[test]
        fn softmax_rows_sum_to_one(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let x = rng.normal_tensor(vec![3, 7], 3.0, Precision::Fp64);
            let s = softmax_rows(&x);
            for r in 0..3 {
                let sum: f64 = s.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
            }
        }
    }
}
