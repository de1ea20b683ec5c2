//! Central finite-difference checks of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::Result;
use crate::linalg::{softmax_rows, Mat};
use crate::losses::{cross_entropy, reverse_kl_truncated};
use crate::model::{AdapterSet, AdapterTarget, ModelArch, Params, Transformer};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Relative-error threshold for the loss kernels.
pub const LOSS_TOLERANCE: f64 = 1e-5;
/// Relative-error threshold for adapter gradients through the model.
pub const MODEL_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so coordinates whose true
/// gradient is ~0 are judged by absolute error.
pub const REL_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Worst coordinate of one check.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct Worst {
    pub rel_err: f64,
    pub analytic: f64,
    pub numeric: f64,
}

impl Worst {
    fn observe(&mut self, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        if e > self.rel_err || e.is_nan() {
            *self = Worst {
                rel_err: e,
                analytic,
                numeric,
            };
        }
    }
}

/// Random loss-kernel inputs with `V <= 64`, `T <= 8`.
#[derive(Debug, Clone)]
pub struct LossInstance {
    pub logits: Mat<f64>,
    pub base_probs: Mat<f64>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    pub n: usize,
}

impl LossInstance {
    pub fn random(rng: &mut impl Rng) -> Self {
        let vocab = rng.random_range(2..=64);
        let rows = rng.random_range(1..=8);
        let scale = [0.5, 2.0, 4.0][rng.random_range(0..3)];
        let normal = Normal::new(0.0, scale).expect("valid std");
        let logits: Vec<f64> = (0..rows * vocab).map(|_| normal.sample(rng)).collect();
        let base_logits: Vec<f64> = (0..rows * vocab).map(|_| normal.sample(rng)).collect();
        let logits = Mat::from_vec(rows, vocab, logits).expect("shape");
        let base_probs = softmax_rows(&Mat::from_vec(rows, vocab, base_logits).expect("shape"));
        let targets = (0..rows).map(|_| rng.random_range(0..vocab)).collect();
        let mut mask: Vec<bool> = (0..rows).map(|_| rng.random_bool(0.7)).collect();
        let forced = rng.random_range(0..rows);
        mask[forced] = true;
        let n = rng.random_range(1..=vocab);
        Self {
            logits,
            base_probs,
            targets,
            mask,
            n,
        }
    }

    fn fd(&self, f: impl Fn(&Mat<f64>) -> f64, analytic: &Mat<f64>, worst: &mut Worst) {
        let mut x = self.logits.clone();
        for k in 0..x.as_slice().len() {
            let orig = x.as_slice()[k];
            x.as_mut_slice()[k] = orig + STEP;
            let up = f(&x);
            x.as_mut_slice()[k] = orig - STEP;
            let down = f(&x);
            x.as_mut_slice()[k] = orig;
            worst.observe(analytic.as_slice()[k], (up - down) / (2.0 * STEP));
        }
    }

    pub fn check_ce(&self) -> Result<Worst> {
        let g = cross_entropy(&self.logits, &self.targets, &self.mask)?.grad;
        let mut w = Worst::default();
        self.fd(
            |x| cross_entropy(x, &self.targets, &self.mask).map_or(f64::NAN, |l| l.value),
            &g,
            &mut w,
        );
        Ok(w)
    }

    pub fn check_kl(&self) -> Result<Worst> {
        let g = reverse_kl_truncated(&self.logits, &self.base_probs, &self.mask, self.n)?.grad;
        let mut w = Worst::default();
        self.fd(
            |x| reverse_kl_truncated(x, &self.base_probs, &self.mask, self.n).map_or(f64::NAN, |l| l.value),
            &g,
            &mut w,
        );
        Ok(w)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LossSuiteReport {
    pub instances: usize,
    pub seed: u64,
    pub ce: Worst,
    pub kl: Worst,
    pub max_rel_err: f64,
}

impl LossSuiteReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < LOSS_TOLERANCE
    }
}

/// Checks CE and truncated-KL gradients on `instances` random inputs.
pub fn loss_suite(instances: usize, seed: u64) -> Result<LossSuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ce, mut kl) = (Worst::default(), Worst::default());
    for _ in 0..instances {
        let inst = LossInstance::random(&mut rng);
        let c = inst.check_ce()?;
        if c.rel_err > ce.rel_err || c.rel_err.is_nan() {
            ce = c;
        }
        let k = inst.check_kl()?;
        if k.rel_err > kl.rel_err || k.rel_err.is_nan() {
            kl = k;
        }
    }
    let max_rel_err = if ce.rel_err.is_nan() || kl.rel_err.is_nan() {
        f64::NAN
    } else {
        ce.rel_err.max(kl.rel_err)
    };
    Ok(LossSuiteReport {
        instances,
        seed,
        ce,
        kl,
        max_rel_err,
    })
}

fn toy_arch(n_layers: usize) -> ModelArch {
    ModelArch {
        vocab: 13,
        d_model: 8,
        n_layers,
        n_heads: 2,
        d_ff: 12,
        max_context: 8,
    }
}

/// A fixed scalar loss of the logits, `sum_ij c_ij z_ij`, whose gradient
/// w.r.t. the logits is `c`.
fn probe(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Mat::from_vec(rows, cols, data).expect("shape")
}

fn probe_loss(logits: &Mat<f64>, c: &Mat<f64>) -> f64 {
    logits.as_slice().iter().zip(c.as_slice()).map(|(a, b)| a * b).sum()
}

/// Adapter gradients of a random toy model (all four targets attached,
/// non-zero up-projections) against finite differences.
pub fn adapter_check(n_layers: usize, seed: u64) -> Result<Worst> {
    let arch = toy_arch(n_layers);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Params<f64> = Params::init(&arch, &mut rng);
    let model = Transformer::new(arch.clone(), params)?;
    let mut adapters: AdapterSet<f64> = AdapterSet::init(&arch, 2, 1.5, &AdapterTarget::ALL, &mut rng)?;
    for slots in &mut adapters.layers {
        for pair in slots.iter_mut().flatten() {
            for v in &mut pair.up {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    let tokens: Vec<usize> = (0..7).map(|_| rng.random_range(0..arch.vocab)).collect();
    let c = probe(tokens.len(), arch.vocab, &mut rng);

    let out = model.forward(&tokens, Some(&adapters), true)?;
    let mut grads = adapters.zeros_like();
    model.backward(&out, &c, Some(&adapters), None, Some(&mut grads))?;
    let analytic: Vec<f64> = grads.slots().iter().flat_map(|(_, s)| s.to_vec()).collect();

    let eval = |a: &AdapterSet<f64>| -> Result<f64> { Ok(probe_loss(&model.forward(&tokens, Some(a), false)?.logits, &c)) };
    let mut worst = Worst::default();
    let mut k = 0;
    let n_slots = adapters.slots().len();
    for s in 0..n_slots {
        let len = adapters.slots()[s].1.len();
        for i in 0..len {
            let orig = adapters.slots_mut()[s][i];
            adapters.slots_mut()[s][i] = orig + STEP;
            let up = eval(&adapters)?;
            adapters.slots_mut()[s][i] = orig - STEP;
            let down = eval(&adapters)?;
            adapters.slots_mut()[s][i] = orig;
            worst.observe(analytic[k], (up - down) / (2.0 * STEP));
            k += 1;
        }
    }
    Ok(worst)
}

/// Full-parameter gradients (used by base pre-training) against finite
/// differences.
pub fn params_check(n_layers: usize, seed: u64) -> Result<Worst> {
    let arch = toy_arch(n_layers);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: Params<f64> = Params::init(&arch, &mut rng);
    // Move layer-norm parameters off their defaults so their gradients are
    // exercised in general position.
    for b in &mut params.blocks {
        for v in b.ln1.gain.iter_mut().chain(b.ln2.gain.iter_mut()) {
            *v += rng.random_range(-0.2..0.2);
        }
        for v in b.ln1.bias.iter_mut().chain(b.ln2.bias.iter_mut()) {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let tokens: Vec<usize> = (0..6).map(|_| rng.random_range(0..arch.vocab)).collect();
    let c = probe(tokens.len(), arch.vocab, &mut rng);

    let model = Transformer::new(arch.clone(), params.clone())?;
    let out = model.forward(&tokens, None, true)?;
    let mut grads = Params::zeros(&arch);
    model.backward(&out, &c, None, Some(&mut grads), None)?;
    let analytic: Vec<f64> = grads.slots().iter().flat_map(|(_, s)| s.to_vec()).collect();

    let mut worst = Worst::default();
    let mut k = 0;
    let n_slots = params.slots().len();
    for s in 0..n_slots {
        let len = params.slots()[s].1.len();
        for i in 0..len {
            let orig = params.slots_mut()[s][i];
            let mut at = |v: f64| -> Result<f64> {
                params.slots_mut()[s][i] = v;
                let m = Transformer::new(arch.clone(), params.clone())?;
                Ok(probe_loss(&m.forward(&tokens, None, false)?.logits, &c))
            };
            let up = at(orig + STEP)?;
            let down = at(orig - STEP)?;
            params.slots_mut()[s][i] = orig;
            worst.observe(analytic[k], (up - down) / (2.0 * STEP));
            k += 1;
        }
    }
    Ok(worst)
}
