//! Central-difference validation of tape gradients.

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use crate::rng::{derive_rng, stream};
use rand::seq::SliceRandom;

/// Compares analytic gradients against central differences for a scalar
/// computation rebuilt from leaf tensors by `build`.
///
/// `step` must lie in [1e-6, 1e-3]: larger steps truncate badly, smaller ones
/// drown in cancellation. The returned value is the maximum over all checked
/// coordinates of `|analytic - numeric| / max(1, |numeric|)`.
///
/// `coord_cap` bounds the number of coordinates probed per input tensor
/// (chosen by a fixed-seed shuffle, so results are reproducible). `None`
/// checks every coordinate. All analytic gradients come from a single
/// backward pass either way; the cap only limits the finite-difference work.
pub fn grad_check<F>(
    inputs: &[Tensor],
    step: f64,
    coord_cap: Option<usize>,
    build: F,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    if !(1e-6..=1e-3).contains(&step) {
        return Err(Error::Domain {
            op: "grad_check",
            message: format!("step must lie in [1e-6, 1e-3], got {step}"),
        });
    }
    if inputs.is_empty() {
        return Err(Error::Domain {
            op: "grad_check",
            message: "no input tensors".into(),
        });
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    if !tape.value(loss).is_scalar() {
        return Err(Error::Domain {
            op: "grad_check",
            message: "build must produce a scalar loss".into(),
        });
    }
    if !tape.value(loss).all_finite() {
        return Err(Error::NonFinite {
            context: "grad_check forward loss".into(),
        });
    }
    tape.backward(loss);
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v)).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone())).collect();
        let l = build(&mut t, &vs);
        let v = t.scalar_value(l);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "grad_check perturbed loss".into(),
            });
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel = 0.0_f64;
    for ti in 0..inputs.len() {
        let numel = inputs[ti].numel();
        let coords: Vec<usize> = match coord_cap {
            Some(cap) if cap < numel => {
                let mut idx: Vec<usize> = (0..numel).collect();
                let mut rng = derive_rng(0xC0FFEE, &[stream::GRAD_CHECK, ti as u64]);
                idx.shuffle(&mut rng);
                idx.truncate(cap);
                idx
            }
            _ => (0..numel).collect(),
        };
        for ci in coords {
            let orig = work[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + step;
            let plus = eval(&work)?;
            work[ti].data_mut()[ci] = orig - step;
            let minus = eval(&work)?;
            work[ti].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let rel = (analytic[ti].data()[ci] - numeric).abs() / numeric.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    const STEP: f64 = 1e-4;
    const TOL: f64 = 1e-4;

    #[test]
    fn quadratic_is_exact_under_central_differences() {
        // f(x) = sum(x^2) at x = (3, -1): central differences are exact for
        // quadratics up to rounding, so the max relative error is ~1e-12.
        let x = Tensor::vector(vec![3.0, -1.0]);
        let err = grad_check(&[x], STEP, None, |t, vs| t.sum_squares(vs[0])).unwrap();
        assert!(err < 1e-9, "rel err {err}");
    }

    #[test]
    fn rejects_out_of_range_step() {
        let x = Tensor::vector(vec![1.0]);
        assert!(grad_check(std::slice::from_ref(&x), 1e-7, None, |t, vs| t.sum(vs[0])).is_err());
        assert!(grad_check(&[x], 1e-2, None, |t, vs| t.sum(vs[0])).is_err());
    }

    #[test]
    fn rejects_non_scalar_loss() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        assert!(grad_check(&[x], STEP, None, |t, vs| t.tanh(vs[0])).is_err());
    }

    #[test]
    fn coordinate_cap_is_deterministic() {
        let x = Tensor::vector((0..40).map(|i| 0.1 * i as f64 - 2.0).collect());
        let f = |t: &mut Tape, vs: &[Var]| {
            let y = t.tanh(vs[0]);
            t.sum_squares(y)
        };
        let a = grad_check(std::slice::from_ref(&x), STEP, Some(8), f).unwrap();
        let b = grad_check(&[x], STEP, Some(8), f).unwrap();
        assert_eq!(a, b);
        assert!(a < TOL);
    }

    // Per-op gradient coverage. Each closure builds a scalar through the op
    // under test with smooth surroundings so central differences are valid.

    fn check<F>(inputs: &[Tensor], build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let err = grad_check(inputs, STEP, None, build).unwrap();
        assert!(err < TOL, "max relative error {err}");
    }

    fn mat(r: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = crate::rng::derive_rng(seed, &[77]);
        Tensor::randn(&[r, c], 1.0, &mut rng)
    }

    fn vec_t(n: usize, seed: u64) -> Tensor {
        let mut rng = crate::rng::derive_rng(seed, &[78]);
        Tensor::randn(&[n], 1.0, &mut rng)
    }

    #[test]
    fn grad_matmul_and_add_row() {
        check(&[mat(3, 4, 1), mat(4, 2, 2), vec_t(2, 3)], |t, vs| {
            let y = t.matmul(vs[0], vs[1]);
            let y = t.add_row(y, vs[2]);
            let y = t.tanh(y);
            t.sum_squares(y)
        });
    }

    #[test]
    fn grad_matmul_bt() {
        check(&[mat(3, 4, 4), mat(2, 4, 5)], |t, vs| {
            let y = t.matmul_bt(vs[0], vs[1]);
            let y = t.sigmoid(y);
            t.sum(y)
        });
    }

    #[test]
    fn grad_mul_div_col() {
        // Divisors bounded away from zero via sigmoid + 0.5.
        check(&[mat(3, 4, 6), vec_t(3, 7)], |t, vs| {
            let s = t.sigmoid(vs[1]);
            let s = t.affine(s, 1.0, 0.5);
            let y = t.mul_col(vs[0], s);
            let y = t.div_col(y, s);
            let z = t.mul_col(y, s);
            t.sum_squares(z)
        });
    }

    #[test]
    fn grad_row_reductions() {
        check(&[mat(4, 3, 8), mat(4, 3, 9)], |t, vs| {
            let d = t.row_dot(vs[0], vs[1]);
            let n = t.row_norm(vs[0]);
            let c = t.row_cosine(vs[0], vs[1], 1e-8);
            let dn = t.mul(d, n);
            let dnc = t.mul(dn, c);
            t.mean(dnc)
        });
    }

    #[test]
    fn grad_proto_logits_cross_entropy() {
        check(&[mat(5, 3, 10), mat(4, 3, 11)], |t, vs| {
            let l = t.proto_logits(vs[0], vs[1]);
            t.cross_entropy(l, &[0, 3, 1, 2, 0])
        });
    }

    #[test]
    fn grad_masked_softmax() {
        check(&[mat(3, 4, 12), mat(4, 2, 13)], |t, vs| {
            let p = t.softmax_rows_masked(vs[0], &[true, false, true, true]);
            let y = t.matmul(p, vs[1]);
            t.sum_squares(y)
        });
    }

    #[test]
    fn grad_layer_norm_rows() {
        check(&[mat(3, 5, 14), vec_t(5, 15), vec_t(5, 16)], |t, vs| {
            let y = t.layer_norm_rows(vs[0], vs[1], vs[2], 1e-5);
            let y = t.tanh(y);
            t.sum_squares(y)
        });
    }

    #[test]
    fn grad_gather_stack_concat_slice() {
        check(&[vec_t(3, 17), vec_t(3, 18), mat(2, 3, 19)], |t, vs| {
            let m = t.stack_rows(&[vs[0], vs[1]]);
            let g = t.gather_rows(m, &[1, 0, 1]);
            let c = t.concat_cols(&[g, g]);
            let s = t.slice_cols(c, 2, 3);
            let gg = t.gather_rows(vs[2], &[0, 1, 0]);
            let p = t.mul(s, gg);
            t.sum_squares(p)
        });
    }

    #[test]
    fn grad_scatter_group_mean() {
        check(&[mat(2, 3, 20)], |t, vs| {
            let base = Tensor::matrix(4, 3, vec![0.5; 12]).unwrap();
            let sc = t.scatter_rows(vs[0], &[0, 2], base);
            let gm = t.group_mean_rows(sc, &[vec![0, 1], vec![2, 3]]);
            t.sum_squares(gm)
        });
    }

    #[test]
    fn grad_abs_away_from_kink() {
        // Inputs shifted away from zero so |.| is differentiable at the probe.
        let mut x = mat(3, 3, 21);
        for v in x.data_mut() {
            *v += if *v >= 0.0 { 0.5 } else { -0.5 };
        }
        check(&[x], |t, vs| {
            let a = t.abs(vs[0]);
            t.sum_squares(a)
        });
    }
}
