//! Pure numeric building blocks shared by the tape and by forward-only paths.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Squared-distance classification logits against a prototype matrix.
///
/// For feature row h and prototype p_c the logit is
/// `2 h.p_c - |h|^2 - |p_c|^2`, which equals `-|h - p_c|^2`, so the argmax
/// is the nearest prototype. `h` may be a single vector `[d]` or a batch
/// `[n, d]`; `protos` is `[c, d]`. Output is `[c]` or `[n, c]` accordingly.
pub fn proto_logits(h: &Tensor, protos: &Tensor) -> Result<Tensor> {
    if !protos.is_matrix() {
        return Err(Error::Shape {
            op: "proto_logits",
            expected: "prototype matrix [c, d]".into(),
            got: format!("{:?}", protos.shape()),
        });
    }
    let d = protos.cols();
    if h.cols() != d || (!h.is_vector() && !h.is_matrix()) {
        return Err(Error::Shape {
            op: "proto_logits",
            expected: format!("features [d={d}] or [n, {d}]"),
            got: format!("{:?}", h.shape()),
        });
    }
    let n = h.rows();
    let c = protos.rows();
    let proto_sq: Vec<f64> = (0..c).map(|j| sq(protos.row(j))).collect();
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n {
        let hi = h.row(i);
        let h_sq = sq(hi);
        for j in 0..c {
            let pj = protos.row(j);
            let dot: f64 = hi.iter().zip(pj).map(|(a, b)| a * b).sum();
            out.push(2.0 * dot - h_sq - proto_sq[j]);
        }
    }
    if h.is_vector() {
        Ok(Tensor::vector(out))
    } else {
        Tensor::matrix(n, c, out)
    }
}

fn sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Temperature softmax: `softmax(scores / scale)`, numerically stabilized by
/// max subtraction. Output entries are positive and sum to 1 (within
/// float rounding, <= 1e-12 for sane inputs).
pub fn softmax_scaled(scores: &[f64], scale: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Domain {
            op: "softmax_scaled",
            message: "empty score vector".into(),
        });
    }
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Domain {
            op: "softmax_scaled",
            message: format!("scale must be finite and > 0, got {scale}"),
        });
    }
    let scaled: Vec<f64> = scores.iter().map(|s| s / scale).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Softmax over the `true` positions of `mask`; masked positions are exactly
/// 0 in the output. At least one position must be unmasked.
pub fn softmax_masked(scores: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    debug_assert_eq!(scores.len(), mask.len());
    if !mask.iter().any(|&m| m) {
        return Err(Error::Domain {
            op: "softmax_masked",
            message: "all positions masked".into(),
        });
    }
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0; scores.len()];
    let mut sum = 0.0;
    for i in 0..scores.len() {
        if mask[i] {
            let e = (scores[i] - max).exp();
            out[i] = e;
            sum += e;
        }
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(out)
}

/// Per-vector layer normalization with learned gain/bias:
/// `gain * (x - mean) / sqrt(var + eps) + bias`, variance taken over the
/// vector (population form, divisor d). Requires d >= 2: a single entry has
/// zero variance by construction and normalizes to pure bias, which is never
/// what a caller wants.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    let d = x.len();
    if d < 2 {
        return Err(Error::Domain {
            op: "layer_norm",
            message: format!("need at least 2 entries, got {d}"),
        });
    }
    if gain.len() != d || bias.len() != d {
        return Err(Error::Shape {
            op: "layer_norm",
            expected: format!("gain and bias of length {d}"),
            got: format!("{} and {}", gain.len(), bias.len()),
        });
    }
    if !(eps >= 0.0) {
        return Err(Error::Domain {
            op: "layer_norm",
            message: format!("eps must be >= 0, got {eps}"),
        });
    }
    let mean = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let inv = 1.0 / (var + eps).sqrt();
    Ok((0..d)
        .map(|i| gain[i] * (x[i] - mean) * inv + bias[i])
        .collect())
}

/// Cosine similarity with a zero-norm guard: the denominator is
/// `max(|a| * |b|, eps)`, so a zero vector yields 0 rather than NaN and
/// `cosine_sim(a, a, eps)` is 1 up to the rounding of `sqrt(|a|^2)^2`
/// (exactly 1 for many inputs, within a few ulp for the rest).
pub fn cosine_sim(a: &[f64], b: &[f64], eps: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape {
            op: "cosine_sim",
            expected: "two nonempty vectors of equal length".into(),
            got: format!("{} and {}", a.len(), b.len()),
        });
    }
    if !(eps > 0.0) {
        return Err(Error::Domain {
            op: "cosine_sim",
            message: format!("eps must be > 0, got {eps}"),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = sq(a).sqrt();
    let nb = sq(b).sqrt();
    Ok(dot / (na * nb).max(eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn proto_logit_is_negative_squared_distance() {
        // h=(1,0), p=(0,1): -|h-p|^2 = -2.
        let h = Tensor::vector(vec![1.0, 0.0]);
        let p = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        let l = proto_logits(&h, &p).unwrap();
        assert_eq!(l.data(), &[-2.0]);
    }

    #[test]
    fn proto_logits_batch_matches_vector_calls() {
        let h = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.0, 0.25, -0.5]).unwrap();
        let p = Tensor::matrix(2, 3, vec![1.0, 1.0, 1.0, -1.0, 0.0, 0.5]).unwrap();
        let batch = proto_logits(&h, &p).unwrap();
        for i in 0..2 {
            let single = proto_logits(&h.row_tensor(i), &p).unwrap();
            assert_eq!(batch.row(i), single.data());
        }
    }

    #[test]
    fn proto_logits_rejects_width_mismatch() {
        let h = Tensor::vector(vec![1.0, 0.0, 0.0]);
        let p = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        assert!(proto_logits(&h, &p).is_err());
    }

    #[test]
    fn softmax_frozen_value() {
        // scores (ln 2, 0) at scale 1 -> (2/3, 1/3).
        let w = softmax_scaled(&[2.0_f64.ln(), 0.0], 1.0).unwrap();
        assert_abs_diff_eq!(w[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn softmax_handles_large_scores() {
        let w = softmax_scaled(&[1000.0, 999.0], 1.0).unwrap();
        assert!(w.iter().all(|x| x.is_finite()));
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_scale() {
        assert!(softmax_scaled(&[1.0], 0.0).is_err());
        assert!(softmax_scaled(&[], 1.0).is_err());
    }

    #[test]
    fn softmax_sums_to_one_randomized() {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(11, &[99]);
        for _ in 0..200 {
            let n = rng.gen_range(1..12);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let scale = rng.gen_range(0.1..10.0);
            let w = softmax_scaled(&scores, scale).unwrap();
            assert!(w.iter().all(|&x| x > 0.0));
            assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let w = softmax_masked(&[5.0, 1.0, 3.0], &[true, false, true]).unwrap();
        assert_eq!(w[1], 0.0);
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(softmax_masked(&[1.0], &[false]).is_err());
    }

    #[test]
    fn layer_norm_constant_vector_maps_to_bias() {
        // Constant input: variance 0, normalized value 0 everywhere.
        let y = layer_norm(&[3.0, 3.0, 3.0], &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        assert_eq!(y, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_unit_example() {
        // x=(1,-1), unit gain, zero bias: mean 0, var 1 -> output (1,-1) as eps -> 0.
        let y = layer_norm(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0], 1e-12).unwrap();
        assert_abs_diff_eq!(y[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(y[1], -1.0, epsilon = 1e-9);
    }

    #[test]
    fn layer_norm_rejects_short_input() {
        assert!(layer_norm(&[1.0], &[1.0], &[0.0], 1e-5).is_err());
    }

    #[test]
    fn cosine_frozen_value() {
        // (1,1) vs (1,0) -> 1/sqrt(2).
        let c = cosine_sim(&[1.0, 1.0], &[1.0, 0.0], 1e-8).unwrap();
        assert_abs_diff_eq!(c, 1.0 / 2.0_f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn cosine_self_is_one() {
        // Exact for this vector; in general self-similarity is 1 +/- a few ulp.
        let v = [0.3, -2.0, 0.7, 1.1];
        assert_eq!(cosine_sim(&v, &v, 1e-8).unwrap(), 1.0);
        let mut rng = crate::rng::derive_rng(5, &[21]);
        for _ in 0..200 {
            use rand::Rng;
            let w: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            assert!((cosine_sim(&w, &w, 1e-8).unwrap() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn cosine_zero_vector_is_zero() {
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 2.0], 1e-8).unwrap(), 0.0);
    }
}
