//! Desk-scale transformer used both as the frozen base model and, with
//! low-rank adapter deltas, as the model being trained.

pub mod adapter;
pub mod checkpoint;
pub mod optim;
pub mod params;
pub mod transformer;

use std::sync::Arc;

use sha2::{Digest, Sha256};

pub use adapter::{AdapterSet, AdapterTarget, LoraPair};
pub use checkpoint::{Checkpoint, RngState};
pub use optim::{AdamConfig, AdamState};
pub use params::{ModelArch, Params};
pub use transformer::{ForwardOutput, Transformer};

use crate::error::{Error, Result};
use crate::linalg::{Mat, Real};

/// SHA-256 over every tensor name and its values as f32 LE.
pub fn params_hash<F: Real>(params: &Params<F>) -> String {
    let mut h = Sha256::new();
    for (name, s) in params.slots() {
        h.update(name.as_bytes());
        for v in s {
            h.update(v.le_bytes_f32());
        }
    }
    hex::encode(h.finalize())
}

/// Frozen base parameters plus trainable adapters. The base sits behind an
/// `Arc` and is never handed out mutably.
#[derive(Debug, Clone)]
pub struct ModelBundle<F> {
    base: Arc<Transformer<F>>,
    pub adapters: AdapterSet<F>,
}

impl<F: Real> ModelBundle<F> {
    pub fn new(base: Arc<Transformer<F>>, adapters: AdapterSet<F>) -> Result<Self> {
        if adapters.layers.len() != base.arch.n_layers {
            return Err(Error::Shape(format!(
                "adapters cover {} layers, model has {}",
                adapters.layers.len(),
                base.arch.n_layers
            )));
        }
        for (l, slots) in adapters.layers.iter().enumerate() {
            for (t, pair) in AdapterTarget::ALL.iter().zip(slots) {
                if let Some(p) = pair {
                    if (p.d_in, p.d_out) != t.dims(&base.arch) {
                        return Err(Error::Shape(format!("adapter h{l}.{t} has wrong dimensions")));
                    }
                }
            }
        }
        Ok(Self { base, adapters })
    }

    pub fn arch(&self) -> &ModelArch {
        &self.base.arch
    }

    pub fn base(&self) -> &Arc<Transformer<F>> {
        &self.base
    }

    /// Logits of the frozen base model; no activations are kept.
    pub fn forward_base(&self, tokens: &[usize]) -> Result<ForwardOutput<F>> {
        self.base.forward(tokens, None, false)
    }

    /// Logits of base + adapters. With `keep_cache` the output can be passed
    /// to [`ModelBundle::student_backward`].
    pub fn forward_student(&self, tokens: &[usize], keep_cache: bool) -> Result<ForwardOutput<F>> {
        self.base.forward(tokens, Some(&self.adapters), keep_cache)
    }

    /// Accumulates adapter gradients of `dlogits` into `grads`. Base
    /// parameters receive no gradient.
    pub fn student_backward(&self, out: &ForwardOutput<F>, dlogits: &Mat<F>, grads: &mut AdapterSet<F>) -> Result<()> {
        self.base.backward(out, dlogits, Some(&self.adapters), None, Some(grads))
    }

    pub fn new_optimizer(&self, config: AdamConfig) -> AdamState<F> {
        let sizes: Vec<usize> = self.adapters.slots().iter().map(|(_, s)| s.len()).collect();
        AdamState::new(config, &sizes)
    }

    /// One Adam step on the adapters only.
    pub fn apply_adapter_update(&mut self, grads: &AdapterSet<F>, lr: f64, opt: &mut AdamState<F>) -> Result<()> {
        let g = grads.slots();
        opt.update(self.adapters.slots_mut(), &g, lr)
    }

    pub fn base_hash(&self) -> String {
        params_hash(&self.base.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::softmax_rows;
    use crate::losses::cross_entropy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch() -> ModelArch {
        ModelArch {
            vocab: 11,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_context: 10,
        }
    }

    fn bundle(seed: u64, targets: &[AdapterTarget]) -> ModelBundle<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = arch();
        let base = Transformer::new(a.clone(), Params::init(&a, &mut rng)).unwrap();
        let ad = AdapterSet::init(&a, 2, 1.0, targets, &mut rng).unwrap();
        ModelBundle::new(Arc::new(base), ad).unwrap()
    }

    #[test]
    fn forward_is_deterministic() {
        let b = bundle(1, &AdapterTarget::DEFAULT);
        let x = b.forward_base(&[1, 2, 3, 4]).unwrap().logits;
        let y = b.forward_base(&[1, 2, 3, 4]).unwrap().logits;
        let bits = |m: &Mat<f64>| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x), bits(&y));
    }

    #[test]
    fn zero_model_gives_uniform_rows() {
        let a = arch();
        let t = Transformer::new(a.clone(), Params::<f32>::zeros(&a)).unwrap();
        let out = t.forward(&[0, 5, 7], None, false).unwrap();
        let probs = softmax_rows(&out.logits);
        for v in probs.as_slice() {
            assert!((v - 1.0 / 11.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_adapters_are_bit_identical_to_base() {
        let b = bundle(2, &AdapterTarget::ALL);
        let s = b.forward_student(&[3, 1, 4, 1, 5], false).unwrap().logits;
        let base = b.forward_base(&[3, 1, 4, 1, 5]).unwrap().logits;
        let bits = |m: &Mat<f64>| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&s), bits(&base));
    }

    #[test]
    fn context_overflow_rejected() {
        let b = bundle(3, &AdapterTarget::DEFAULT);
        assert!(b.forward_base(&[1; 10]).is_ok());
        assert!(matches!(
            b.forward_base(&[1; 11]),
            Err(Error::ContextOverflow { len: 11, max: 10 })
        ));
        assert!(matches!(b.forward_base(&[11]), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn one_step_decreases_ce() {
        let mut b = bundle(4, &AdapterTarget::ALL);
        // Make the up-projections non-zero so the first gradient reaches `down` too.
        for s in b.adapters.slots_mut() {
            for (i, v) in s.iter_mut().enumerate() {
                if *v == 0.0 {
                    *v = 0.01 * ((i % 7) as f64 - 3.0);
                }
            }
        }
        let tokens = [1, 2, 3, 4, 5, 6];
        let (input, targets) = (&tokens[..5], &tokens[1..]);
        let mask = [true; 5];
        let out = b.forward_student(input, true).unwrap();
        let ce = cross_entropy(&out.logits, targets, &mask).unwrap();
        let mut grads = b.adapters.zeros_like();
        b.student_backward(&out, &ce.grad, &mut grads).unwrap();
        // Plain gradient descent with a small step.
        let step = 1e-3;
        let g_flat: Vec<Vec<f64>> = grads.slots().into_iter().map(|(_, s)| s.to_vec()).collect();
        for (p, g) in b.adapters.slots_mut().into_iter().zip(&g_flat) {
            for (pv, gv) in p.iter_mut().zip(g) {
                *pv -= step * gv;
            }
        }
        let after = b.forward_student(input, false).unwrap();
        let ce_after = cross_entropy(&after.logits, targets, &mask).unwrap();
        assert!(ce_after.value < ce.value);
    }

    #[test]
    fn base_hash_unchanged_by_adapter_updates() {
        let mut b = bundle(5, &AdapterTarget::DEFAULT);
        let before = b.base_hash();
        let mut opt = b.new_optimizer(AdamConfig::default());
        let mut grads = b.adapters.zeros_like();
        for s in grads.slots_mut() {
            s.fill(0.1);
        }
        b.apply_adapter_update(&grads, 0.01, &mut opt).unwrap();
        assert_ne!(b.adapters, grads.zeros_like());
        assert_eq!(b.base_hash(), before);
    }
}
