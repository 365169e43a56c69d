//! Finite-difference verification of registered backward passes.
//!
//! Runs central differences with step 1e-3 on 64-bit copies of the inputs
//! and compares against the analytic gradients from a backward sweep, over
//! a random subset of coordinates.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{CbctError, Result};

use super::tape::{Tape, TensorId};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

const FD_STEP: f64 = 1e-3;
/// Gradients this small (both analytic and numeric) are treated as zero.
const NEGLIGIBLE: f64 = 1e-7;

/// Check `build` (a closure that assembles a scalar loss from leaf ids in
/// input order) against central finite differences. At least `min_coords`
/// coordinates are probed across all inputs, chosen with a seeded
/// generator.
pub fn grad_check<B>(
    inputs: &[Array4<f64>],
    build: B,
    min_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
{
    let eval = |tensors: &[Array4<f64>]| -> Result<(f64, Vec<Option<Array4<f64>>>)> {
        let mut tape = Tape::<f64>::new();
        let ids: Vec<TensorId> = tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect();
        let loss = build(&mut tape, &ids)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(CbctError::CheckFailed(format!(
                "loss value {value} is not finite"
            )));
        }
        tape.backward(loss)?;
        let grads = ids.iter().map(|&id| tape.take_grad(id)).collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let per_input = min_coords.div_ceil(inputs.len().max(1));

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let probes = per_input.min(n);
        for _ in 0..probes {
            let flat = rng.gen_range(0..n);
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            {
                let p = plus[i].as_slice_mut().expect("contiguous");
                p[flat] += FD_STEP;
                let m = minus[i].as_slice_mut().expect("contiguous");
                m[flat] -= FD_STEP;
            }
            let (fp, _) = eval_value_only(&plus, &build)?;
            let (fm, _) = eval_value_only(&minus, &build)?;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic[i]
                .as_ref()
                .map(|g| g.as_slice().expect("contiguous")[flat])
                .unwrap_or(0.0);
            if !numeric.is_finite() || !a.is_finite() {
                return Err(CbctError::CheckFailed(format!(
                    "non-finite gradient at input {i} coord {flat}: analytic {a}, numeric {numeric}"
                )));
            }
            let denom = a.abs().max(numeric.abs());
            let rel = if denom < NEGLIGIBLE {
                0.0
            } else {
                (a - numeric).abs() / denom
            };
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        coords_checked: checked,
    })
}

fn eval_value_only<B>(tensors: &[Array4<f64>], build: &B) -> Result<(f64, ())>
where
    B: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
{
    let mut tape = Tape::<f64>::new();
    let ids: Vec<TensorId> = tensors
        .iter()
        .map(|t| tape.leaf(t.clone(), false))
        .collect();
    let loss = build(&mut tape, &ids)?;
    Ok((tape.scalar(loss), ()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random4(shape: (usize, usize, usize, usize), seed: u64, lo: f64, hi: f64) -> Array4<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.gen_range(lo..hi))
    }

    #[test]
    fn identity_op_is_exact_to_rounding() {
        // relu on strictly positive inputs is the identity
        let x = random4((1, 1, 4, 4), 1, 0.5, 2.0);
        let target = Array4::zeros((1, 1, 4, 4));
        let report = grad_check(
            &[x],
            |tape, ids| {
                let y = tape.relu(ids[0]);
                tape.mse_loss(y, &target)
            },
            120,
            7,
        )
        .unwrap();
        assert!(
            report.max_rel_err <= 1e-8,
            "identity grad check err {}",
            report.max_rel_err
        );
    }

    #[test]
    fn conv2d_matches_finite_differences() {
        let x = random4((2, 2, 6, 6), 2, -1.0, 1.0);
        let w = random4((3, 2, 3, 3), 3, -0.5, 0.5);
        let b = random4((1, 3, 1, 1), 4, -0.1, 0.1);
        let target = random4((2, 3, 6, 6), 5, -1.0, 1.0);
        let report = grad_check(
            &[x, w, b],
            |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
                tape.mse_loss(y, &target)
            },
            150,
            11,
        )
        .unwrap();
        assert!(
            report.max_rel_err <= 1e-5,
            "conv grad check err {}",
            report.max_rel_err
        );
        assert!(report.coords_checked >= 100);
    }

    #[test]
    fn pooling_upsampling_and_activations_check_out() {
        let x = random4((1, 2, 8, 8), 6, -1.0, 1.0);
        let target = random4((1, 2, 8, 8), 7, 0.0, 1.0);
        let report = grad_check(
            &[x],
            |tape, ids| {
                let p = tape.maxpool2(ids[0])?;
                let u = tape.upsample2(p);
                let s = tape.sigmoid(u);
                tape.mse_loss(s, &target)
            },
            120,
            13,
        )
        .unwrap();
        assert!(
            report.max_rel_err <= 1e-5,
            "pool/upsample err {}",
            report.max_rel_err
        );
    }

    #[test]
    fn two_layer_net_with_combined_loss_checks_out() {
        use super::super::loss::combined_loss;
        let x = random4((1, 1, 8, 8), 20, -1.0, 1.0);
        let w1 = random4((4, 1, 3, 3), 21, -0.4, 0.4);
        let b1 = random4((1, 4, 1, 1), 22, -0.1, 0.1);
        let w2 = random4((1, 4, 3, 3), 23, -0.4, 0.4);
        let b2 = random4((1, 1, 1, 1), 24, -0.1, 0.1);
        let w3 = random4((1, 4, 3, 3), 25, -0.4, 0.4);
        let b3 = random4((1, 1, 1, 1), 26, -0.1, 0.1);
        let g_r = random4((1, 1, 8, 8), 27, -1.0, 1.0);
        let mut rng = ChaCha12Rng::seed_from_u64(28);
        let g_s = Array4::from_shape_fn((1, 1, 8, 8), |_| {
            if rng.gen_bool(0.4) {
                1.0
            } else {
                0.0
            }
        });
        let report = grad_check(
            &[x, w1, b1, w2, b2, w3, b3],
            |tape, ids| {
                let h = tape.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
                let h = tape.relu(h);
                let p_r = tape.conv2d(h, ids[3], ids[4], 1, 1)?;
                let p_s_logits = tape.conv2d(h, ids[5], ids[6], 1, 1)?;
                let p_s = tape.sigmoid(p_s_logits);
                let (total, _) =
                    combined_loss(tape, p_r, Some(p_s), &g_r, Some(&g_s), 1e-3)?;
                Ok(total)
            },
            200,
            31,
        )
        .unwrap();
        assert!(
            report.max_rel_err <= 1e-4,
            "two-layer net err {}",
            report.max_rel_err
        );
    }
}
