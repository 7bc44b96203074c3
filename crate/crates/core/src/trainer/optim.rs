//! Plain SGD and bias-corrected Adam over flat parameter vectors.

use crate::error::{Error, Result};
use crate::nn::{real, Real};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape {
            stage: "optimizer".into(),
            detail: format!("{what} has {got} elements, parameters have {want}"),
        });
    }
    Ok(())
}

/// One bias-corrected Adam update in place:
/// m ← β₁m + (1−β₁)g, v ← β₂v + (1−β₂)g², θ ← θ − lr·m̂/(√v̂ + ε).
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    lr: T,
) -> Result<()> {
    check_len("gradient", grads.len(), params.len())?;
    check_len("optimizer state", state.m.len(), params.len())?;
    state.step += 1;
    let b1 = real::<T>(ADAM_BETA1);
    let b2 = real::<T>(ADAM_BETA2);
    let eps = real::<T>(ADAM_EPS);
    let one = T::one();
    let c1 = real::<T>(1.0 / (1.0 - ADAM_BETA1.powi(state.step as i32)));
    let c2 = real::<T>(1.0 / (1.0 - ADAM_BETA2.powi(state.step as i32)));
    for ((p, &g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m * c1;
        let v_hat = *v * c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// θ ← θ − lr·g.
pub fn sgd_step<T: Real>(params: &mut [T], grads: &[T], lr: T) -> Result<()> {
    check_len("gradient", grads.len(), params.len())?;
    for (p, &g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_is_lr_times_sign() {
        let mut theta = vec![1.0f64];
        let mut state = AdamState::new(1);
        adam_step(&mut theta, &[3.0], &mut state, 1e-4).unwrap();
        // m̂ = g, v̂ = g² → update = lr·g/(|g| + ε) ≈ lr.
        let expected = 1.0 - 1e-4 * 3.0 / (3.0 + ADAM_EPS);
        assert!((theta[0] - expected).abs() < 1e-15, "{}", theta[0]);
        assert!((theta[0] - (1.0 - 1e-4)).abs() < 1e-10);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut theta = vec![0.5f64, -2.0, 3.25];
        let mut state = AdamState::new(3);
        adam_step(&mut theta, &[0.0; 3], &mut state, 0.1).unwrap();
        assert_eq!(theta, vec![0.5, -2.0, 3.25]);
    }

    #[test]
    fn adam_is_pure_given_state() {
        let grads = vec![0.3f64, -1.1];
        let mut t1 = vec![1.0f64, 2.0];
        let mut s1 = AdamState::new(2);
        adam_step(&mut t1, &grads, &mut s1, 0.01).unwrap();
        let mut t2 = vec![1.0f64, 2.0];
        let mut s2 = AdamState::new(2);
        adam_step(&mut t2, &grads, &mut s2, 0.01).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn first_step_is_scale_invariant() {
        // Scaling the loss by 10 scales g by 10 but leaves the first
        // bias-corrected update essentially unchanged.
        let mut t_base = vec![1.0f64];
        let mut s_base = AdamState::new(1);
        adam_step(&mut t_base, &[0.7], &mut s_base, 0.01).unwrap();
        let mut t_scaled = vec![1.0f64];
        let mut s_scaled = AdamState::new(1);
        adam_step(&mut t_scaled, &[7.0], &mut s_scaled, 0.01).unwrap();
        let ratio = (1.0 - t_scaled[0]) / (1.0 - t_base[0]);
        assert!((0.999..=1.001).contains(&ratio), "{ratio}");
    }

    #[test]
    fn sgd_hand_example_and_identity() {
        let mut theta = vec![1.0f64];
        sgd_step(&mut theta, &[2.0], 0.006).unwrap();
        assert!((theta[0] - 0.988).abs() < 1e-15);
        sgd_step(&mut theta, &[123.0], 0.0).unwrap();
        assert!((theta[0] - 0.988).abs() < 1e-15);
    }

    #[test]
    fn sgd_is_linear_in_the_gradient() {
        let g1 = vec![0.25f64, -0.5];
        let g2 = vec![1.5f64, 0.75];
        let summed: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
        let mut once = vec![1.0f64, -1.0];
        sgd_step(&mut once, &summed, 0.1).unwrap();
        let mut twice = vec![1.0f64, -1.0];
        sgd_step(&mut twice, &g1, 0.1).unwrap();
        sgd_step(&mut twice, &g2, 0.1).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let mut theta = vec![1.0f64, 2.0];
        assert!(sgd_step(&mut theta, &[1.0], 0.1).is_err());
        let mut state = AdamState::new(3);
        assert!(adam_step(&mut theta, &[1.0, 1.0], &mut state, 0.1).is_err());
    }
}
