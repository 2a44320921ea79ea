//! Adam optimizer with bias correction.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One in-place update of `params` against `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::shape("adam params", self.m.len(), params.len()));
        }
        if grads.len() != self.m.len() {
            return Err(Error::shape("adam grads", self.m.len(), grads.len()));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Functional form: returns updated copies of the parameters and state.
pub fn adam_step(state: &AdamState, params: &[f64], grads: &[f64]) -> Result<(Vec<f64>, AdamState)> {
    let mut state = state.clone();
    let mut params = params.to_vec();
    state.step(&mut params, grads)?;
    Ok((params, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let s = AdamState::new(3, 0.1);
        let (p, s) = adam_step(&s, &[1.0, 2.0, 3.0], &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, 2.0, 3.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        for g in [3.0, -0.25, 1e-3] {
            let s = AdamState::new(1, 0.01);
            let (p, _) = adam_step(&s, &[0.0], &[g]).unwrap();
            // update = lr * g / (|g| + eps)
            let want = -0.01 * g.signum();
            let slack = 0.01 * (1e-8 / g.abs()) * (1.0 + 1e-6);
            assert!((p[0] - want).abs() <= slack + 1e-16, "g={g} p={}", p[0]);
        }
    }

    #[test]
    fn second_identical_step_no_larger() {
        let s = AdamState::new(1, 0.01);
        let (p1, s) = adam_step(&s, &[0.0], &[0.5]).unwrap();
        let (p2, _) = adam_step(&s, &p1, &[0.5]).unwrap();
        let first = p1[0].abs();
        let second = (p2[0] - p1[0]).abs();
        assert!(second <= first + 1e-15, "{second} > {first}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut s = AdamState::new(2, 0.1);
        assert!(s.step(&mut [0.0; 3], &[0.0; 3]).is_err());
        assert!(s.step(&mut [0.0; 2], &[0.0; 1]).is_err());
    }

    proptest! {
        #[test]
        fn zero_learning_rate_is_identity(
            params in prop::collection::vec(-10.0f64..10.0, 1..20),
            seed in any::<u64>(),
        ) {
            let n = params.len();
            let mut rng = crate::numerics::RngStream::new(seed, 0);
            let mut s = AdamState::new(n, 0.0);
            let mut p = params.clone();
            for _ in 0..3 {
                let g = rng.draw_gaussian(n);
                s.step(&mut p, &g).unwrap();
            }
            prop_assert_eq!(p, params);
            prop_assert!(s.v.iter().all(|&v| v >= 0.0));
        }
    }
}
