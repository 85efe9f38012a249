//! Adam optimizer over plain tensors.
//!
//! Keeps first/second moment estimates per parameter. `step_masked` supports
//! lazy row updates: rows excluded by the mask touch neither the parameter
//! nor the moments that step (bias correction uses the global step count).

use super::Tensor;
use crate::error::{EcfError, Result};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Default::default()
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: Vec<(Tensor, Tensor)>,
}

impl Adam {
    /// One moment pair per parameter, in the order later passed to `step`.
    pub fn new(cfg: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        let moments = shapes
            .iter()
            .map(|&(r, c)| (Tensor::zeros(r, c), Tensor::zeros(r, c)))
            .collect();
        Adam {
            cfg,
            step: 0,
            moments,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        let masks: Vec<Option<&[bool]>> = params.iter().map(|_| None).collect();
        self.step_masked(params, grads, &masks)
    }

    /// Like `step`, but a `Some(mask)` restricts the update of that
    /// parameter to rows where the mask is true.
    pub fn step_masked(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[&Tensor],
        row_masks: &[Option<&[bool]>],
    ) -> Result<()> {
        assert_eq!(params.len(), self.moments.len());
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), row_masks.len());
        self.step += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        for ((param, grad), (mask, (m, v))) in params
            .iter_mut()
            .zip(grads)
            .zip(row_masks.iter().zip(&mut self.moments))
        {
            assert_eq!(param.shape(), grad.shape());
            if let Some(mask) = mask {
                assert_eq!(mask.len(), param.rows());
            }
            let rows = param.rows();
            for r in 0..rows {
                if let Some(mask) = mask {
                    if !mask[r] {
                        continue;
                    }
                }
                let gr = grad.row(r);
                if gr.iter().any(|g| !g.is_finite()) {
                    return Err(EcfError::NonFinite { op: "adam_step" });
                }
                let pr = param.row_mut(r);
                let mr = m.row_mut(r);
                let vr = v.row_mut(r);
                for i in 0..pr.len() {
                    let g = gr[i];
                    mr[i] = self.cfg.beta1 * mr[i] + (1.0 - self.cfg.beta1) * g;
                    vr[i] = self.cfg.beta2 * vr[i] + (1.0 - self.cfg.beta2) * g * g;
                    let m_hat = mr[i] / bc1;
                    let v_hat = vr[i] / bc2;
                    pr[i] -= self.cfg.learning_rate * m_hat / (v_hat.sqrt() + self.cfg.epsilon);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Tensor::from_vec(1, 2, vec![0.4, -0.7]).unwrap();
        let g = Tensor::zeros(1, 2);
        let mut adam = Adam::new(AdamConfig::default(), &[(1, 2)]);
        adam.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p.data(), &[0.4, -0.7]);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // Fresh moments, grad g: m_hat = g, v_hat = g^2, so the update is
        // lr * g / (|g| + eps).
        let mut p = Tensor::from_vec(1, 2, vec![1.0, -2.0]).unwrap();
        let g = Tensor::from_vec(1, 2, vec![2.0, -4.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &[(1, 2)]);
        adam.step(&mut [&mut p], &[&g]).unwrap();
        let expect0 = 1.0 - 1e-3 * 2.0 / (2.0 + 1e-8);
        let expect1 = -2.0 + 1e-3 * 4.0 / (4.0 + 1e-8);
        assert!((p.data()[0] - expect0).abs() < 1e-15);
        assert!((p.data()[1] - expect1).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = Tensor::zeros(1, 2);
        let g = Tensor::from_vec(1, 2, vec![f64::NAN, 0.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &[(1, 2)]);
        assert!(adam.step(&mut [&mut p], &[&g]).is_err());
    }

    #[test]
    fn masked_rows_are_left_untouched_including_moments() {
        let mut p = Tensor::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        let g = Tensor::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &[(2, 1)]);
        let mask = vec![true, false];
        adam.step_masked(&mut [&mut p], &[&g], &[Some(&mask)]).unwrap();
        assert!(p.data()[0] < 1.0);
        assert_eq!(p.data()[1], 1.0);
        // A later unmasked step must start row 1 from zero moments.
        let g2 = Tensor::zeros(2, 1);
        adam.step(&mut [&mut p], &[&g2]).unwrap();
        assert_eq!(p.data()[1], 1.0);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // Minimize sum((x - c)^2); 500 steps from zero must land within 1e-2.
        let target = Tensor::from_vec(1, 3, vec![0.25, -0.2, 0.1]).unwrap();
        let mut x = Tensor::zeros(1, 3);
        let mut adam = Adam::new(AdamConfig::default(), &[(1, 3)]);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone()).unwrap();
            let c = tape.constant(target.clone()).unwrap();
            let d = tape.sub(xv, c).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let loss = tape.sum(sq).unwrap();
            tape.backward(loss).unwrap();
            let g = tape.grad(xv).unwrap().clone();
            adam.step(&mut [&mut x], &[&g]).unwrap();
        }
        for (xv, tv) in x.data().iter().zip(target.data()) {
            assert!(
                (xv - tv).abs() < 1e-2,
                "did not converge: {} vs {}",
                xv,
                tv
            );
        }
    }
}
