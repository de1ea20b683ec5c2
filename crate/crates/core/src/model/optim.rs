use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

/// Fails with the tensor name and index of the first non-finite entry.
pub fn check_finite<F: Real>(grads: &[(String, &[F])]) -> Result<()> {
    for (name, g) in grads {
        if let Some((i, v)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Numerical {
                message: format!("non-finite gradient {v:?} in {name}[{i}]"),
                sequences: Vec::new(),
            });
        }
    }
    Ok(())
}

impl<F: Real> AdamState<F> {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
        }
    }

    /// One Adam step with learning rate `lr`. Gradients are validated before
    /// anything is modified.
    pub fn update(&mut self, params: Vec<&mut [F]>, grads: &[(String, &[F])], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, (name, g)), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::Shape(format!("gradient shape mismatch for {name}")));
            }
        }
        check_finite(grads)?;

        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, (_, g)), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = g[i].to_f64_lossy();
                let mi = beta1 * m[i].to_f64_lossy() + (1.0 - beta1) * gi;
                let vi = beta2 * v[i].to_f64_lossy() + (1.0 - beta2) * gi * gi;
                m[i] = F::from_f64_lossy(mi);
                v[i] = F::from_f64_lossy(vi);
                let step = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                if step != 0.0 {
                    p[i] = F::from_f64_lossy(p[i].to_f64_lossy() - step);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(grads: &[f64], lr: f64) -> (f64, AdamState<f64>) {
        let mut p = vec![1.0f64];
        let mut st = AdamState::new(AdamConfig::default(), &[1]);
        for &g in grads {
            let gv = [g];
            st.update(vec![&mut p], &[("p".into(), &gv[..])], lr).unwrap();
        }
        (p[0], st)
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let (p, _) = run(&[0.0, 0.0, 0.0], 0.1);
        assert_eq!(p, 1.0);
    }

    #[test]
    fn zero_step_size_leaves_parameter() {
        let (p, st) = run(&[0.5, -1.0], 0.0);
        assert_eq!(p, 1.0);
        assert_eq!(st.step, 2);
    }

    #[test]
    fn matches_closed_form_recurrence() {
        let grads = [0.5, -0.25, 1.0];
        let lr = 0.01;
        let (p, st) = run(&grads, lr);
        // Hand recurrence.
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v, mut x) = (0.0, 0.0, 1.0);
        for (t, g) in grads.iter().enumerate() {
            let t = t as i32 + 1;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        assert!((p - x).abs() < 1e-15);
        assert!((st.m[0][0] - m).abs() < 1e-15);
        assert!((st.v[0][0] - v).abs() < 1e-15);
        // First step of Adam moves by ~lr regardless of gradient scale.
        let (p1, _) = run(&[123.0], lr);
        assert!((1.0 - p1 - lr).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_mutation() {
        let mut p = vec![1.0f64, 2.0];
        let mut st = AdamState::new(AdamConfig::default(), &[2]);
        let g = [0.1, f64::NAN];
        let err = st.update(vec![&mut p], &[("w".into(), &g[..])], 0.1).unwrap_err();
        assert!(matches!(err, Error::Numerical { .. }));
        assert!(err.to_string().contains("w[1]"));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(st.step, 0);
    }
}
