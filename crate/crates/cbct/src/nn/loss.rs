//! The training objective: MSE on the reconstruction head plus λ-weighted
//! soft Dice on the segmentation head.

use ndarray::Array4;

use crate::error::{CbctError, Result};

use super::tape::{Element, Tape, TensorId};

/// Additive smoothing in the soft-Dice numerator and denominator; keeps the
/// gradient defined on empty masks.
pub const DICE_EPSILON: f64 = 1.0;

/// The three loss terms of one forward pass. `total` is taken from the
/// same accumulation that produced the backward graph, so
/// `total == mse + lambda · dice` holds bitwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<F> {
    pub mse: F,
    pub dice: F,
    pub total: F,
    pub lambda: F,
}

/// Build the combined loss on the tape. Models without a segmentation head
/// pass `None`; their dice term is zero and `total` aliases the MSE node.
pub fn combined_loss<F: Element>(
    tape: &mut Tape<F>,
    p_r: TensorId,
    p_s: Option<TensorId>,
    g_r: &Array4<F>,
    g_s: Option<&Array4<F>>,
    lambda: F,
) -> Result<(TensorId, LossBreakdown<F>)> {
    let mse_id = tape.mse_loss(p_r, g_r)?;
    match (p_s, g_s) {
        (Some(p_s), Some(g_s)) => {
            let dice_id = tape.dice_loss(p_s, g_s, F::from_f64(DICE_EPSILON))?;
            let total_id = tape.scaled_add(mse_id, dice_id, lambda)?;
            Ok((
                total_id,
                LossBreakdown {
                    mse: tape.scalar(mse_id),
                    dice: tape.scalar(dice_id),
                    total: tape.scalar(total_id),
                    lambda,
                },
            ))
        }
        (None, None) => Ok((
            mse_id,
            LossBreakdown {
                mse: tape.scalar(mse_id),
                dice: F::zero(),
                total: tape.scalar(mse_id),
                lambda,
            },
        )),
        _ => Err(CbctError::InvalidArgument(
            "segmentation prediction and target must come together".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn perfect_prediction_is_epsilon_bounded() {
        let mut tape = Tape::<f64>::new();
        let g_r = Array4::from_shape_fn((1, 1, 8, 8), |(_, _, r, c)| (r + c) as f64 * 0.1);
        let g_s = Array4::from_shape_fn((1, 1, 8, 8), |(_, _, r, c)| {
            if r < 4 && c < 4 {
                1.0
            } else {
                0.0
            }
        });
        let p_r = tape.leaf(g_r.clone(), false);
        // p_s approaching the binary target
        let p_s = tape.leaf(g_s.clone(), false);
        let (_, breakdown) =
            combined_loss(&mut tape, p_r, Some(p_s), &g_r, Some(&g_s), 1e-3).unwrap();
        assert_eq!(breakdown.mse, 0.0);
        let mask_sum: f64 = g_s.sum();
        assert!(breakdown.dice <= DICE_EPSILON / (2.0 * mask_sum + DICE_EPSILON) + 1e-12);
    }

    #[test]
    fn lambda_weighting_matches_paper_arithmetic() {
        // mse = 0.01, dice = 0.5, λ = 1e-3 → total = 0.0105
        let mse = 0.01f64;
        let dice = 0.5f64;
        let lambda = 1e-3f64;
        let total = mse + lambda * dice;
        assert_relative_eq!(total, 0.0105, epsilon = 1e-15);
    }

    #[test]
    fn half_probability_on_half_mask_approaches_half() {
        let n = 64;
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Array4::from_elem((1, 1, n, n), 0.5), false);
        let g = Array4::from_shape_fn((1, 1, n, n), |(_, _, r, _)| {
            if r < n / 2 {
                1.0
            } else {
                0.0
            }
        });
        let dice = tape.dice_loss(p, &g, DICE_EPSILON).unwrap();
        let v = tape.scalar(dice);
        // closed form: 1 − (N/2 + ε)/(N + ε) → 0.5 as ε/N → 0
        let n_tot = (n * n) as f64;
        let expected = 1.0 - (n_tot / 2.0 + DICE_EPSILON) / (n_tot + DICE_EPSILON);
        assert_relative_eq!(v, expected, epsilon = 1e-12);
        assert!((v - 0.5).abs() < 2.0 * DICE_EPSILON / n_tot);
    }

    #[test]
    fn total_is_bitwise_sum_over_random_batches() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for _ in 0..200 {
            let mut tape = Tape::<f32>::new();
            let shape = (2, 1, 6, 6);
            let p_r_v = Array4::from_shape_fn(shape, |_| rng.gen_range(-1.0f32..1.0));
            let g_r = Array4::from_shape_fn(shape, |_| rng.gen_range(-1.0f32..1.0));
            let p_s_v = Array4::from_shape_fn(shape, |_| rng.gen_range(0.01f32..0.99));
            let g_s = Array4::from_shape_fn(shape, |_| {
                if rng.gen_bool(0.3) {
                    1.0f32
                } else {
                    0.0
                }
            });
            let p_r = tape.leaf(p_r_v, false);
            let p_s = tape.leaf(p_s_v, false);
            let lambda = 1e-3f32;
            let (_, b) =
                combined_loss(&mut tape, p_r, Some(p_s), &g_r, Some(&g_s), lambda).unwrap();
            assert_eq!(b.total.to_bits(), (b.mse + lambda * b.dice).to_bits());
            assert!(b.dice >= 0.0 && b.dice <= 1.0);
            assert!(b.mse >= 0.0);
        }
    }

    #[test]
    fn dice_is_monotone_in_true_pixels() {
        // raising p on a pixel where g = 1 never increases the loss
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let shape = (1, 1, 8, 8);
        let base = Array4::from_shape_fn(shape, |_| rng.gen_range(0.05f64..0.95));
        let g = Array4::from_shape_fn(shape, |(_, _, r, c)| {
            if (r + c) % 3 == 0 {
                1.0
            } else {
                0.0
            }
        });
        let loss_of = |p: &Array4<f64>| {
            let mut tape = Tape::<f64>::new();
            let id = tape.leaf(p.clone(), false);
            let d = tape.dice_loss(id, &g, DICE_EPSILON).unwrap();
            tape.scalar(d)
        };
        let before = loss_of(&base);
        for r in 0..8 {
            for c in 0..8 {
                if g[[0, 0, r, c]] == 1.0 {
                    let mut bumped = base.clone();
                    bumped[[0, 0, r, c]] = (bumped[[0, 0, r, c]] + 0.04).min(1.0);
                    assert!(loss_of(&bumped) <= before + 1e-15);
                }
            }
        }
    }
}
