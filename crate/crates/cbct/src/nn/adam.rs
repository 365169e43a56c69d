//! Adam with bias correction.

use ndarray::Array4;

use crate::error::{CbctError, Result};

use super::tape::Element;

/// Optimizer state: first/second moment buffers per parameter tensor plus
/// the shared step counter and hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub t: usize,
    pub m: Vec<Array4<F>>,
    pub v: Vec<Array4<F>>,
}

impl<F: Element> AdamState<F> {
    /// Fresh state for parameters of the given shapes, with β₁ = 0.9,
    /// β₂ = 0.999, ε = 1e-8.
    pub fn new(params: &[Array4<F>], lr: F) -> Self {
        AdamState {
            lr,
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            eps: F::from_f64(1e-8),
            t: 0,
            m: params.iter().map(|p| Array4::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Array4::zeros(p.dim())).collect(),
        }
    }
}

/// One Adam update over all parameter tensors; increments the step counter
/// once.
pub fn adam_step<F: Element>(
    params: &mut [Array4<F>],
    grads: &[Array4<F>],
    state: &mut AdamState<F>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(CbctError::InvalidArgument(format!(
            "adam: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.dim() != grads[i].dim() || p.dim() != state.m[i].dim() {
            return Err(CbctError::InvalidArgument(format!(
                "adam: shape mismatch on parameter {i}"
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = F::one() - state.beta1.powi(t);
    let bc2 = F::one() - state.beta2.powi(t);
    let one = F::one();
    for i in 0..params.len() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let g = &grads[i];
        let p = &mut params[i];
        ndarray::Zip::from(p)
            .and(m)
            .and(v)
            .and(g)
            .for_each(|pv, mv, vv, &gv| {
                *mv = state.beta1 * *mv + (one - state.beta1) * gv;
                *vv = state.beta2 * *vv + (one - state.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv = *pv - state.lr * m_hat / (v_hat.sqrt() + state.eps);
            });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = vec![Array4::from_elem((1, 1, 2, 2), 1.5f64)];
        let grads = vec![Array4::zeros((1, 1, 2, 2))];
        let mut state = AdamState::new(&params, 1e-3);
        adam_step(&mut params, &grads, &mut state).unwrap();
        assert!(params[0].iter().all(|&v| v == 1.5));
        assert_eq!(state.t, 1);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // θ=1, g=0.5, lr=1e-3: m̂=g, v̂=g² → θ' = 1 − lr·g/(|g| + ε) ≈ 0.9990
        let mut params = vec![Array4::from_elem((1, 1, 1, 1), 1.0f64)];
        let grads = vec![Array4::from_elem((1, 1, 1, 1), 0.5f64)];
        let mut state = AdamState::new(&params, 1e-3);
        adam_step(&mut params, &grads, &mut state).unwrap();
        let got = params[0][[0, 0, 0, 0]];
        assert!((got - 0.9990).abs() <= 1e-4, "first Adam step gave {got}");
    }

    #[test]
    fn identical_gradients_update_identically() {
        let mut params = vec![
            Array4::from_elem((1, 1, 2, 2), 0.3f64),
            Array4::from_elem((1, 1, 2, 2), 0.3f64),
        ];
        let g = Array4::from_elem((1, 1, 2, 2), -0.7f64);
        let grads = vec![g.clone(), g];
        let mut state = AdamState::new(&params, 1e-2);
        for _ in 0..5 {
            adam_step(&mut params, &grads, &mut state).unwrap();
        }
        assert_eq!(params[0], params[1]);
        assert_eq!(state.t, 5);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![Array4::<f64>::zeros((1, 1, 2, 2))];
        let grads = vec![Array4::zeros((1, 1, 3, 3))];
        let mut state = AdamState::new(&params, 1e-3);
        assert!(adam_step(&mut params, &grads, &mut state).is_err());
    }
}
