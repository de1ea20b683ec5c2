//! Pre-norm decoder-only transformer with a hand-written backward pass.
//!
//! Layout per block: `x += attn_out(attn(ln1(x)))`, `x += mlp_down(gelu(mlp_up(ln2(x))))`,
//! then a final layer norm and an untied output head.

use super::adapter::{AdapterSet, AdapterTarget, LoraPair};
use super::params::{LayerNormParams, Linear, ModelArch, Params};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Mat, Real};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Transformer<F> {
    pub arch: ModelArch,
    pub params: Params<F>,
}

#[derive(Debug, Clone)]
struct LnCache<F> {
    out: Vec<F>,
    mean: Vec<F>,
    rstd: Vec<F>,
}

#[derive(Debug, Clone)]
struct LayerCache<F> {
    x_in: Vec<F>,
    ln1: LnCache<F>,
    qkv: Vec<F>,
    qkv_u: Vec<F>,
    att: Vec<F>,
    att_y: Vec<F>,
    out_u: Vec<F>,
    x_mid: Vec<F>,
    ln2: LnCache<F>,
    up_pre: Vec<F>,
    up_u: Vec<F>,
    act: Vec<F>,
    down_u: Vec<F>,
}

/// Intermediate activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    tokens: Vec<usize>,
    layers: Vec<LayerCache<F>>,
    x_final: Vec<F>,
    ln_f: LnCache<F>,
}

impl<F> ForwardCache<F> {
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<F> {
    pub logits: Mat<F>,
    pub cache: Option<ForwardCache<F>>,
}

type Lora<'a, F> = Option<(&'a LoraPair<F>, F)>;

fn layer_norm<F: Real>(x: &[F], t_len: usize, d: usize, p: &LayerNormParams<F>) -> LnCache<F> {
    let inv_d = F::from_f64_lossy(1.0 / d as f64);
    let eps = F::from_f64_lossy(LN_EPS);
    let mut out = vec![F::zero(); t_len * d];
    let mut means = Vec::with_capacity(t_len);
    let mut rstds = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let row = &x[t * d..(t + 1) * d];
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rstd = (var + eps).sqrt().recip();
        let o = &mut out[t * d..(t + 1) * d];
        for i in 0..d {
            o[i] = (row[i] - mean) * rstd * p.gain[i] + p.bias[i];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    LnCache {
        out,
        mean: means,
        rstd: rstds,
    }
}

/// Accumulates into `dx`; optionally into the layer-norm parameter grads.
fn layer_norm_backward<F: Real>(
    x: &[F],
    cache: &LnCache<F>,
    dout: &[F],
    d: usize,
    p: &LayerNormParams<F>,
    dx: &mut [F],
    mut grads: Option<&mut LayerNormParams<F>>,
) {
    let inv_d = F::from_f64_lossy(1.0 / d as f64);
    let mut xhat = vec![F::zero(); d];
    let mut dxhat = vec![F::zero(); d];
    for t in 0..cache.mean.len() {
        let (mean, rstd) = (cache.mean[t], cache.rstd[t]);
        let row = &x[t * d..(t + 1) * d];
        let drow = &dout[t * d..(t + 1) * d];
        let mut m1 = F::zero();
        let mut m2 = F::zero();
        for i in 0..d {
            xhat[i] = (row[i] - mean) * rstd;
            dxhat[i] = drow[i] * p.gain[i];
            m1 += dxhat[i];
            m2 += dxhat[i] * xhat[i];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let dst = &mut dx[t * d..(t + 1) * d];
        for i in 0..d {
            dst[i] += rstd * (dxhat[i] - m1 - xhat[i] * m2);
        }
        if let Some(g) = grads.as_deref_mut() {
            for i in 0..d {
                g.gain[i] += drow[i] * xhat[i];
                g.bias[i] += drow[i];
            }
        }
    }
}

/// `y = x W + b (+ scale * (x down^T) up)`; returns `(y, u)` with `u = x down^T`.
fn linear_forward<F: Real>(lin: &Linear<F>, lora: Lora<'_, F>, x: &[F], t_len: usize) -> (Vec<F>, Vec<F>) {
    let (d_in, d_out) = (lin.d_in, lin.d_out);
    let mut y = vec![F::zero(); t_len * d_out];
    for t in 0..t_len {
        let xt = &x[t * d_in..(t + 1) * d_in];
        let yt = &mut y[t * d_out..(t + 1) * d_out];
        yt.copy_from_slice(&lin.b);
        for (i, &xi) in xt.iter().enumerate() {
            axpy(xi, lin.w_row(i), yt);
        }
    }
    let mut u = Vec::new();
    if let Some((pair, scale)) = lora {
        let r = pair.rank;
        u = vec![F::zero(); t_len * r];
        let mut delta = vec![F::zero(); d_out];
        for t in 0..t_len {
            let xt = &x[t * d_in..(t + 1) * d_in];
            delta.fill(F::zero());
            for j in 0..r {
                let uj = dot(pair.down_row(j), xt);
                u[t * r + j] = uj;
                axpy(scale * uj, pair.up_row(j), &mut delta);
            }
            // Skipping exact zeros keeps a zero adapter bit-identical to the
            // base model (adding +0.0 would turn -0.0 into +0.0).
            for (yv, &dv) in y[t * d_out..(t + 1) * d_out].iter_mut().zip(&delta) {
                if dv != F::zero() {
                    *yv += dv;
                }
            }
        }
    }
    (y, u)
}

#[allow(clippy::too_many_arguments)]
fn linear_backward<F: Real>(
    lin: &Linear<F>,
    lora: Lora<'_, F>,
    x: &[F],
    u: &[F],
    dy: &[F],
    t_len: usize,
    dx: &mut [F],
    mut grad_lin: Option<&mut Linear<F>>,
    mut grad_lora: Option<&mut LoraPair<F>>,
) {
    let (d_in, d_out) = (lin.d_in, lin.d_out);
    let mut du = Vec::new();
    for t in 0..t_len {
        let xt = &x[t * d_in..(t + 1) * d_in];
        let dyt = &dy[t * d_out..(t + 1) * d_out];
        let dxt = &mut dx[t * d_in..(t + 1) * d_in];
        for (i, dxi) in dxt.iter_mut().enumerate() {
            *dxi += dot(dyt, lin.w_row(i));
        }
        if let Some(g) = grad_lin.as_deref_mut() {
            for (i, &xi) in xt.iter().enumerate() {
                axpy(xi, dyt, &mut g.w[i * d_out..(i + 1) * d_out]);
            }
            for (gb, &v) in g.b.iter_mut().zip(dyt) {
                *gb += v;
            }
        }
        if let Some((pair, scale)) = lora {
            let r = pair.rank;
            du.clear();
            du.extend((0..r).map(|j| scale * dot(pair.up_row(j), dyt)));
            for (j, &duj) in du.iter().enumerate() {
                axpy(duj, pair.down_row(j), dxt);
            }
            if let Some(g) = grad_lora.as_deref_mut() {
                for (j, &duj) in du.iter().enumerate() {
                    let uj = u[t * r + j];
                    axpy(scale * uj, dyt, &mut g.up[j * d_out..(j + 1) * d_out]);
                    axpy(duj, xt, &mut g.down[j * d_in..(j + 1) * d_in]);
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu<F: Real>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let k = F::from_f64_lossy(GELU_K);
    let half = F::from_f64_lossy(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let k = F::from_f64_lossy(GELU_K);
    let half = F::from_f64_lossy(0.5);
    let three = F::from_f64_lossy(3.0);
    let th = (c * (x + k * x * x * x)).tanh();
    half * (F::one() + th) + half * x * (F::one() - th * th) * c * (F::one() + three * k * x * x)
}

impl<F: Real> Transformer<F> {
    pub fn new(arch: ModelArch, params: Params<F>) -> Result<Self> {
        arch.validate()?;
        let expected = Params::<F>::zeros(&arch);
        let shapes_match = expected
            .slots()
            .iter()
            .zip(params.slots())
            .all(|((_, a), (_, b))| a.len() == b.len())
            && expected.slots().len() == params.slots().len();
        if !shapes_match {
            return Err(Error::Shape("parameters do not match architecture".into()));
        }
        Ok(Self { arch, params })
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if tokens.len() > self.arch.max_context {
            return Err(Error::ContextOverflow {
                len: tokens.len(),
                max: self.arch.max_context,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.arch.vocab) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.arch.vocab,
            });
        }
        Ok(())
    }

    fn lora<'a>(adapters: Option<&'a AdapterSet<F>>, layer: usize, target: AdapterTarget) -> Lora<'a, F> {
        adapters.and_then(|a| a.get(layer, target).map(|p| (p, F::from_f64_lossy(a.scale))))
    }

    fn attention(&self, qkv: &[F], t_len: usize) -> (Vec<F>, Vec<F>) {
        let d = self.arch.d_model;
        let (h_n, hd) = (self.arch.n_heads, self.arch.head_dim());
        let scale = F::from_f64_lossy(1.0 / (hd as f64).sqrt());
        let mut att = vec![F::zero(); h_n * t_len * t_len];
        let mut y = vec![F::zero(); t_len * d];
        for h in 0..h_n {
            for t in 0..t_len {
                let q = &qkv[t * 3 * d + h * hd..t * 3 * d + (h + 1) * hd];
                let a = &mut att[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                let mut max = F::neg_infinity();
                for u in 0..=t {
                    let k = &qkv[u * 3 * d + d + h * hd..u * 3 * d + d + (h + 1) * hd];
                    a[u] = dot(q, k) * scale;
                    max = max.max(a[u]);
                }
                let mut sum = F::zero();
                for v in &mut a[..=t] {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                let inv = sum.recip();
                let yt = &mut y[t * d + h * hd..t * d + (h + 1) * hd];
                for u in 0..=t {
                    a[u] *= inv;
                    let v = &qkv[u * 3 * d + 2 * d + h * hd..u * 3 * d + 2 * d + (h + 1) * hd];
                    axpy(a[u], v, yt);
                }
            }
        }
        (att, y)
    }

    fn attention_backward(&self, qkv: &[F], att: &[F], dy: &[F], t_len: usize) -> Vec<F> {
        let d = self.arch.d_model;
        let (h_n, hd) = (self.arch.n_heads, self.arch.head_dim());
        let scale = F::from_f64_lossy(1.0 / (hd as f64).sqrt());
        let mut dqkv = vec![F::zero(); t_len * 3 * d];
        let mut da = vec![F::zero(); t_len];
        for h in 0..h_n {
            let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
            for t in 0..t_len {
                let a = &att[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                let dyt = &dy[t * d + h * hd..t * d + (h + 1) * hd];
                let mut weighted = F::zero();
                for u in 0..=t {
                    let v = &qkv[u * 3 * d + vo..u * 3 * d + vo + hd];
                    da[u] = dot(dyt, v);
                    weighted += a[u] * da[u];
                    axpy(a[u], dyt, &mut dqkv[u * 3 * d + vo..u * 3 * d + vo + hd]);
                }
                for u in 0..=t {
                    let ds = a[u] * (da[u] - weighted) * scale;
                    if ds == F::zero() {
                        continue;
                    }
                    let (q_lo, k_lo) = (t * 3 * d + qo, u * 3 * d + ko);
                    for i in 0..hd {
                        let kv = qkv[k_lo + i];
                        let qv = qkv[q_lo + i];
                        dqkv[q_lo + i] += ds * kv;
                        dqkv[k_lo + i] += ds * qv;
                    }
                }
            }
        }
        dqkv
    }

    /// Logits for every position. `adapters` turns the base forward into the
    /// student forward; `keep_cache` retains activations for [`Self::backward`].
    pub fn forward(
        &self,
        tokens: &[usize],
        adapters: Option<&AdapterSet<F>>,
        keep_cache: bool,
    ) -> Result<ForwardOutput<F>> {
        self.check_tokens(tokens)?;
        let (d, t_len) = (self.arch.d_model, tokens.len());
        let p = &self.params;
        let mut x = vec![F::zero(); t_len * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let (te, pe) = (&p.wte[tok * d..(tok + 1) * d], &p.wpe[t * d..(t + 1) * d]);
            for ((x, &a), &b) in x[t * d..(t + 1) * d].iter_mut().zip(te).zip(pe) {
                *x = a + b;
            }
        }
        let mut layers = Vec::with_capacity(if keep_cache { p.blocks.len() } else { 0 });
        for (l, block) in p.blocks.iter().enumerate() {
            let ln1 = layer_norm(&x, t_len, d, &block.ln1);
            let (qkv, qkv_u) = linear_forward(
                &block.attn_qkv,
                Self::lora(adapters, l, AdapterTarget::AttnQkv),
                &ln1.out,
                t_len,
            );
            let (att, att_y) = self.attention(&qkv, t_len);
            let (o, out_u) = linear_forward(
                &block.attn_out,
                Self::lora(adapters, l, AdapterTarget::AttnOut),
                &att_y,
                t_len,
            );
            let mut x_mid = x.clone();
            for (a, b) in x_mid.iter_mut().zip(&o) {
                *a += *b;
            }
            let ln2 = layer_norm(&x_mid, t_len, d, &block.ln2);
            let (up_pre, up_u) = linear_forward(
                &block.mlp_up,
                Self::lora(adapters, l, AdapterTarget::MlpUp),
                &ln2.out,
                t_len,
            );
            let act: Vec<F> = up_pre.iter().map(|&v| gelu(v)).collect();
            let (down, down_u) = linear_forward(
                &block.mlp_down,
                Self::lora(adapters, l, AdapterTarget::MlpDown),
                &act,
                t_len,
            );
            let mut x_out = x_mid.clone();
            for (a, b) in x_out.iter_mut().zip(&down) {
                *a += *b;
            }
            let x_in = std::mem::replace(&mut x, x_out);
            if keep_cache {
                layers.push(LayerCache {
                    x_in,
                    ln1,
                    qkv,
                    qkv_u,
                    att,
                    att_y,
                    out_u,
                    x_mid,
                    ln2,
                    up_pre,
                    up_u,
                    act,
                    down_u,
                });
            }
        }
        let ln_f = layer_norm(&x, t_len, d, &p.ln_f);
        let (logits, _) = linear_forward(&p.head, None, &ln_f.out, t_len);
        let logits = Mat::from_vec(t_len, self.arch.vocab, logits)?;
        let cache = keep_cache.then(|| ForwardCache {
            tokens: tokens.to_vec(),
            layers,
            x_final: x,
            ln_f,
        });
        Ok(ForwardOutput { logits, cache })
    }

    /// Back-propagates `dlogits` through a cached forward pass. Full-parameter
    /// gradients go to `param_grads`, adapter gradients to `adapter_grads`;
    /// either may be omitted.
    pub fn backward(
        &self,
        out: &ForwardOutput<F>,
        dlogits: &Mat<F>,
        adapters: Option<&AdapterSet<F>>,
        mut param_grads: Option<&mut Params<F>>,
        mut adapter_grads: Option<&mut AdapterSet<F>>,
    ) -> Result<()> {
        let cache = out
            .cache
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("forward pass was run without a cache".into()))?;
        let (d, ff, t_len) = (self.arch.d_model, self.arch.d_ff, cache.tokens.len());
        if dlogits.rows() != t_len || dlogits.cols() != self.arch.vocab {
            return Err(Error::Shape(format!(
                "dlogits {}x{} for {t_len} positions",
                dlogits.rows(),
                dlogits.cols()
            )));
        }
        let p = &self.params;

        let mut dln = vec![F::zero(); t_len * d];
        linear_backward(
            &p.head,
            None,
            &cache.ln_f.out,
            &[],
            dlogits.as_slice(),
            t_len,
            &mut dln,
            param_grads.as_deref_mut().map(|g| &mut g.head),
            None,
        );
        let mut dx = vec![F::zero(); t_len * d];
        layer_norm_backward(
            &cache.x_final,
            &cache.ln_f,
            &dln,
            d,
            &p.ln_f,
            &mut dx,
            param_grads.as_deref_mut().map(|g| &mut g.ln_f),
        );

        for (l, (block, lc)) in p.blocks.iter().zip(&cache.layers).enumerate().rev() {
            let mut g_block = param_grads.as_deref_mut().map(|g| &mut g.blocks[l]);
            // Slot order follows AdapterTarget::ALL.
            let (ga_qkv, ga_out, ga_up, ga_down) = match adapter_grads.as_deref_mut() {
                Some(a) => {
                    let [q, o, u, dn] = &mut a.layers[l];
                    (q.as_mut(), o.as_mut(), u.as_mut(), dn.as_mut())
                }
                None => (None, None, None, None),
            };

            let mut dact = vec![F::zero(); t_len * ff];
            linear_backward(
                &block.mlp_down,
                Self::lora(adapters, l, AdapterTarget::MlpDown),
                &lc.act,
                &lc.down_u,
                &dx,
                t_len,
                &mut dact,
                g_block.as_deref_mut().map(|g| &mut g.mlp_down),
                ga_down,
            );
            for (da, &pre) in dact.iter_mut().zip(&lc.up_pre) {
                *da *= gelu_grad(pre);
            }
            let mut dln2 = vec![F::zero(); t_len * d];
            linear_backward(
                &block.mlp_up,
                Self::lora(adapters, l, AdapterTarget::MlpUp),
                &lc.ln2.out,
                &lc.up_u,
                &dact,
                t_len,
                &mut dln2,
                g_block.as_deref_mut().map(|g| &mut g.mlp_up),
                ga_up,
            );
            let mut dx_mid = dx;
            layer_norm_backward(
                &lc.x_mid,
                &lc.ln2,
                &dln2,
                d,
                &block.ln2,
                &mut dx_mid,
                g_block.as_deref_mut().map(|g| &mut g.ln2),
            );

            let mut datt_y = vec![F::zero(); t_len * d];
            linear_backward(
                &block.attn_out,
                Self::lora(adapters, l, AdapterTarget::AttnOut),
                &lc.att_y,
                &lc.out_u,
                &dx_mid,
                t_len,
                &mut datt_y,
                g_block.as_deref_mut().map(|g| &mut g.attn_out),
                ga_out,
            );
            let dqkv = self.attention_backward(&lc.qkv, &lc.att, &datt_y, t_len);
            let mut dln1 = vec![F::zero(); t_len * d];
            linear_backward(
                &block.attn_qkv,
                Self::lora(adapters, l, AdapterTarget::AttnQkv),
                &lc.ln1.out,
                &lc.qkv_u,
                &dqkv,
                t_len,
                &mut dln1,
                g_block.as_deref_mut().map(|g| &mut g.attn_qkv),
                ga_qkv,
            );
            let mut dx_in = dx_mid;
            layer_norm_backward(
                &lc.x_in,
                &lc.ln1,
                &dln1,
                d,
                &block.ln1,
                &mut dx_in,
                g_block.map(|g| &mut g.ln1),
            );
            dx = dx_in;
        }

        if let Some(g) = param_grads {
            for (t, &tok) in cache.tokens.iter().enumerate() {
                let dxt = &dx[t * d..(t + 1) * d];
                for (w, &v) in g.wte[tok * d..(tok + 1) * d].iter_mut().zip(dxt) {
                    *w += v;
                }
                for (w, &v) in g.wpe[t * d..(t + 1) * d].iter_mut().zip(dxt) {
                    *w += v;
                }
            }
        }
        Ok(())
    }
}
