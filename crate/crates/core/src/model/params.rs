use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Real;

/// Architecture descriptor shared by base and student.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_context: usize,
}

impl Default for ModelArch {
    fn default() -> Self {
        Self {
            vocab: crate::data::tokenizer::VOCAB_SIZE,
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            d_ff: 512,
            max_context: 512,
        }
    }
}

impl ModelArch {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model architecture: {m}")));
        if self.vocab < 2 {
            return bad("vocab must be at least 2");
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_context == 0 {
            return bad("n_layers, d_ff and max_context must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Dense layer `y = x W + b`, weights stored input-major (`d_in` rows of
/// `d_out`) so the forward pass is a sequence of contiguous axpys.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub d_in: usize,
    pub d_out: usize,
    pub w: Vec<F>,
    pub b: Vec<F>,
}

impl<F: Real> Linear<F> {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            d_in,
            d_out,
            w: vec![F::zero(); d_in * d_out],
            b: vec![F::zero(); d_out],
        }
    }

    fn random(d_in: usize, d_out: usize, std: f64, rng: &mut impl Rng) -> Self {
        let mut lin = Self::zeros(d_in, d_out);
        fill_normal(&mut lin.w, std, rng);
        lin
    }

    pub fn w_row(&self, i: usize) -> &[F] {
        &self.w[i * self.d_out..(i + 1) * self.d_out]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<F> {
    pub gain: Vec<F>,
    pub bias: Vec<F>,
}

impl<F: Real> LayerNormParams<F> {
    fn new(d: usize, gain: F) -> Self {
        Self {
            gain: vec![gain; d],
            bias: vec![F::zero(); d],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<F> {
    pub ln1: LayerNormParams<F>,
    pub attn_qkv: Linear<F>,
    pub attn_out: Linear<F>,
    pub ln2: LayerNormParams<F>,
    pub mlp_up: Linear<F>,
    pub mlp_down: Linear<F>,
}

/// Full parameter set of the transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    /// Token embeddings, `vocab x d_model`.
    pub wte: Vec<F>,
    /// Position embeddings, `max_context x d_model`.
    pub wpe: Vec<F>,
    pub blocks: Vec<Block<F>>,
    pub ln_f: LayerNormParams<F>,
    pub head: Linear<F>,
}

pub(crate) fn fill_normal<F: Real>(dst: &mut [F], std: f64, rng: &mut impl Rng) {
    let normal = Normal::new(0.0, std).expect("finite std");
    for v in dst {
        *v = F::from_f64_lossy(normal.sample(rng));
    }
}

impl<F: Real> Params<F> {
    /// Every weight zero (layer-norm gains included): logits are identically 0.
    pub fn zeros(arch: &ModelArch) -> Self {
        Self::with_gain(arch, F::zero())
    }

    fn with_gain(arch: &ModelArch, gain: F) -> Self {
        let d = arch.d_model;
        let blocks = (0..arch.n_layers)
            .map(|_| Block {
                ln1: LayerNormParams::new(d, gain),
                attn_qkv: Linear::zeros(d, 3 * d),
                attn_out: Linear::zeros(d, d),
                ln2: LayerNormParams::new(d, gain),
                mlp_up: Linear::zeros(d, arch.d_ff),
                mlp_down: Linear::zeros(arch.d_ff, d),
            })
            .collect();
        Self {
            wte: vec![F::zero(); arch.vocab * d],
            wpe: vec![F::zero(); arch.max_context * d],
            blocks,
            ln_f: LayerNormParams::new(d, gain),
            head: Linear::zeros(d, arch.vocab),
        }
    }

    /// GPT-2 style initialisation: N(0, 0.02), residual projections scaled by
    /// `1/sqrt(2 n_layers)`, unit layer-norm gains.
    pub fn init(arch: &ModelArch, rng: &mut impl Rng) -> Self {
        let d = arch.d_model;
        let std = 0.02;
        let resid_std = std / (2.0 * arch.n_layers as f64).sqrt();
        let mut p = Self::with_gain(arch, F::one());
        fill_normal(&mut p.wte, std, rng);
        fill_normal(&mut p.wpe, std * 0.5, rng);
        for block in &mut p.blocks {
            block.attn_qkv = Linear::random(d, 3 * d, std, rng);
            block.attn_out = Linear::random(d, d, resid_std, rng);
            block.mlp_up = Linear::random(d, arch.d_ff, std, rng);
            block.mlp_down = Linear::random(arch.d_ff, d, resid_std, rng);
        }
        p.head = Linear::random(d, arch.vocab, std, rng);
        p
    }

    /// Named tensors in a fixed order (checkpoints, hashing, optimiser state).
    pub fn slots(&self) -> Vec<(String, &[F])> {
        let mut out: Vec<(String, &[F])> = vec![("wte".into(), &self.wte), ("wpe".into(), &self.wpe)];
        for (l, b) in self.blocks.iter().enumerate() {
            out.extend([
                (format!("h{l}.ln1.gain"), b.ln1.gain.as_slice()),
                (format!("h{l}.ln1.bias"), b.ln1.bias.as_slice()),
                (format!("h{l}.attn_qkv.w"), b.attn_qkv.w.as_slice()),
                (format!("h{l}.attn_qkv.b"), b.attn_qkv.b.as_slice()),
                (format!("h{l}.attn_out.w"), b.attn_out.w.as_slice()),
                (format!("h{l}.attn_out.b"), b.attn_out.b.as_slice()),
                (format!("h{l}.ln2.gain"), b.ln2.gain.as_slice()),
                (format!("h{l}.ln2.bias"), b.ln2.bias.as_slice()),
                (format!("h{l}.mlp_up.w"), b.mlp_up.w.as_slice()),
                (format!("h{l}.mlp_up.b"), b.mlp_up.b.as_slice()),
                (format!("h{l}.mlp_down.w"), b.mlp_down.w.as_slice()),
                (format!("h{l}.mlp_down.b"), b.mlp_down.b.as_slice()),
            ]);
        }
        out.extend([
            ("ln_f.gain".to_string(), self.ln_f.gain.as_slice()),
            ("ln_f.bias".to_string(), self.ln_f.bias.as_slice()),
            ("head.w".to_string(), self.head.w.as_slice()),
            ("head.b".to_string(), self.head.b.as_slice()),
        ]);
        out
    }

    /// Mutable tensors, same order as [`Params::slots`].
    pub fn slots_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = vec![&mut self.wte, &mut self.wpe];
        for b in &mut self.blocks {
            out.extend([
                b.ln1.gain.as_mut_slice(),
                b.ln1.bias.as_mut_slice(),
                b.attn_qkv.w.as_mut_slice(),
                b.attn_qkv.b.as_mut_slice(),
                b.attn_out.w.as_mut_slice(),
                b.attn_out.b.as_mut_slice(),
                b.ln2.gain.as_mut_slice(),
                b.ln2.bias.as_mut_slice(),
                b.mlp_up.w.as_mut_slice(),
                b.mlp_up.b.as_mut_slice(),
                b.mlp_down.w.as_mut_slice(),
                b.mlp_down.b.as_mut_slice(),
            ]);
        }
        out.extend([
            self.ln_f.gain.as_mut_slice(),
            self.ln_f.bias.as_mut_slice(),
            self.head.w.as_mut_slice(),
            self.head.b.as_mut_slice(),
        ]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.slots().iter().map(|(_, s)| s.len()).sum()
    }

    pub fn cast<G: Real>(&self, arch: &ModelArch) -> Params<G> {
        let mut out = Params::<G>::zeros(arch);
        for ((_, src), dst) in self.slots().into_iter().zip(out.slots_mut()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = G::from_f64_lossy(s.to_f64_lossy());
            }
        }
        out
    }

    pub fn set_zero(&mut self) {
        for s in self.slots_mut() {
            s.fill(F::zero());
        }
    }
}
