//! Loss kernels: masked next-token cross-entropy, truncated reverse KL against
//! a frozen base distribution, tag-dependent blending and per-sequence routing.
//!
//! All kernels work in `f64` and return the analytic gradient with respect to
//! the student logits alongside the value. Logarithms are natural, so values
//! are in nats per effective token.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{softmax_f64, Mat, Real};

/// Default blend coefficient.
pub const DEFAULT_ALPHA: f64 = 0.01;
/// Default number of base-model tokens kept by the truncated KL.
pub const DEFAULT_TRUNCATION: usize = 31;
/// Floor applied to a base-side probability of exactly zero facing a nonzero
/// student probability.
pub const BASE_PROB_FLOOR: f64 = 1e-12;
/// Tolerance on `sum == 1` for probability vectors.
pub const PROB_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusTag {
    Domain,
    General,
}

impl CorpusTag {
    pub fn as_str(self) -> &'static str {
        match self {
            CorpusTag::Domain => "domain",
            CorpusTag::General => "general",
        }
    }
}

impl fmt::Display for CorpusTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorpusTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "domain" => Ok(CorpusTag::Domain),
            "general" => Ok(CorpusTag::General),
            other => Err(Error::UnknownTag(other.to_string())),
        }
    }
}

/// Which objective general sequences receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// CE on domain sequences, truncated reverse KL on general sequences.
    #[default]
    Mol,
    /// CE on every sequence; the KL is never computed.
    CeOnly,
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::Mol => "mol",
            LossMode::CeOnly => "ce_only",
        })
    }
}

/// A probability distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("empty probability vector".into()));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!("invalid probability {v}")));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > PROB_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(Self(values))
    }

    pub fn from_logits<F: Real>(logits: &[F]) -> Self {
        let mut out = vec![0.0; logits.len()];
        softmax_f64(logits, &mut out);
        Self(out)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Base and student distributions reduced to the base model's top-n tokens
/// plus one residual outcome holding the remaining mass.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedPair {
    pub kept_ids: Vec<usize>,
    pub base_kept: Vec<f64>,
    pub student_kept: Vec<f64>,
    pub base_residual: f64,
    pub student_residual: f64,
}

impl TruncatedPair {
    /// `KL[student' || base']` over the n + 1 reduced outcomes, plus the
    /// number of base-side zeros that had to be floored.
    pub fn reverse_kl(&self) -> (f64, usize) {
        let mut clamps = 0;
        let mut kl = 0.0;
        for (&q, &p) in self.student_kept.iter().zip(&self.base_kept) {
            kl += kl_term(q, p, &mut clamps);
        }
        kl += kl_term(self.student_residual, self.base_residual, &mut clamps);
        (kl, clamps)
    }
}

#[inline]
fn floored(p: f64, clamps: &mut usize) -> f64 {
    if p > 0.0 {
        p
    } else {
        *clamps += 1;
        BASE_PROB_FLOOR
    }
}

#[inline]
fn kl_term(q: f64, p: f64, clamps: &mut usize) -> f64 {
    if q > 0.0 {
        q * (q / floored(p, clamps)).ln()
    } else {
        0.0
    }
}

/// Indices of the `n` largest base probabilities, largest first, ties broken
/// by ascending token id.
fn top_n_ids(base: &[f64], n: usize) -> Vec<usize> {
    let by_rank = |&a: &usize, &b: &usize| -> Ordering {
        base[b]
            .partial_cmp(&base[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    };
    let mut ids: Vec<usize> = (0..base.len()).collect();
    if n < ids.len() {
        ids.select_nth_unstable_by(n - 1, by_rank);
        ids.truncate(n);
    }
    ids.sort_unstable_by(by_rank);
    ids
}

fn truncate_slices(base: &[f64], student: &[f64], n: usize) -> Result<TruncatedPair> {
    if base.len() != student.len() {
        return Err(Error::Shape(format!(
            "base has {} entries, student {}",
            base.len(),
            student.len()
        )));
    }
    if n < 1 || n > base.len() {
        return Err(Error::InvalidArgument(format!(
            "truncation n={n} outside [1, {}]",
            base.len()
        )));
    }
    let kept_ids = top_n_ids(base, n);
    let mut kept = vec![false; base.len()];
    for &id in &kept_ids {
        kept[id] = true;
    }
    // Residuals are summed over the complement rather than taken as 1 - kept
    // so that small tails keep full relative precision.
    let mut base_residual = 0.0;
    let mut student_residual = 0.0;
    for (i, keep) in kept.iter().enumerate() {
        if !keep {
            base_residual += base[i];
            student_residual += student[i];
        }
    }
    Ok(TruncatedPair {
        base_kept: kept_ids.iter().map(|&i| base[i]).collect(),
        student_kept: kept_ids.iter().map(|&i| student[i]).collect(),
        kept_ids,
        base_residual,
        student_residual,
    })
}

/// Reduces both distributions to the base model's top-n tokens plus a
/// residual bucket on each side.
pub fn truncate_pair(base: &ProbVector, student: &ProbVector, n: usize) -> Result<TruncatedPair> {
    truncate_slices(base.as_slice(), student.as_slice(), n)
}

/// `sum_t q(t) ln(q(t)/p(t))` over the full vocabulary. Reference
/// implementation for tests and the gradient-check tool.
pub fn full_reverse_kl_oracle(student: &ProbVector, base: &ProbVector) -> f64 {
    let mut total = 0.0;
    for (&q, &p) in student.as_slice().iter().zip(base.as_slice()) {
        if q == 0.0 {
            continue;
        }
        let p = if p == 0.0 { BASE_PROB_FLOOR } else { p };
        total += q * (q / p).ln();
    }
    total
}

/// A loss value with its gradient w.r.t. the student logits.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Mat<f64>,
    pub n_eff: usize,
}

#[derive(Debug, Clone)]
pub struct KlLoss {
    pub value: f64,
    pub grad: Mat<f64>,
    pub n_eff: usize,
    /// Base-side zero probabilities floored to [`BASE_PROB_FLOOR`].
    pub clamp_count: usize,
}

fn check_mask(rows: usize, mask: &[bool]) -> Result<usize> {
    if mask.len() != rows {
        return Err(Error::Shape(format!(
            "mask has {} entries for {rows} rows",
            mask.len()
        )));
    }
    match mask.iter().filter(|&&m| m).count() {
        0 => Err(Error::NoEffectiveTokens),
        n => Ok(n),
    }
}

/// Mean negative log-likelihood of `targets` over masked rows.
pub fn cross_entropy<F: Real>(logits: &Mat<F>, targets: &[usize], mask: &[bool]) -> Result<LossGrad> {
    let (rows, vocab) = (logits.rows(), logits.cols());
    if targets.len() != rows {
        return Err(Error::Shape(format!(
            "{} targets for {rows} logit rows",
            targets.len()
        )));
    }
    let n_eff = check_mask(rows, mask)?;
    if let Some(&id) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::TokenOutOfRange { id, vocab });
    }
    let scale = 1.0 / n_eff as f64;
    let mut grad = Mat::zeros(rows, vocab);
    let mut total = 0.0;
    for i in (0..rows).filter(|&i| mask[i]) {
        let row = logits.row(i);
        let max = row
            .iter()
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64_lossy()));
        let g = grad.row_mut(i);
        let mut sum = 0.0;
        for (gv, &z) in g.iter_mut().zip(row) {
            *gv = (z.to_f64_lossy() - max).exp();
            sum += *gv;
        }
        let target = targets[i];
        total += sum.ln() + max - row[target].to_f64_lossy();
        for gv in g.iter_mut() {
            *gv *= scale / sum;
        }
        g[target] -= scale;
    }
    Ok(LossGrad {
        value: total * scale,
        grad,
        n_eff,
    })
}

/// Mean truncated reverse KL `KL[p_student' || p_base']` over masked rows.
pub fn reverse_kl_truncated<F: Real>(
    student_logits: &Mat<F>,
    base_probs: &Mat<f64>,
    mask: &[bool],
    n: usize,
) -> Result<KlLoss> {
    let (rows, vocab) = (student_logits.rows(), student_logits.cols());
    if base_probs.rows() != rows || base_probs.cols() != vocab {
        return Err(Error::Shape(format!(
            "student logits {rows}x{vocab} vs base probs {}x{}",
            base_probs.rows(),
            base_probs.cols()
        )));
    }
    let n_eff = check_mask(rows, mask)?;
    let scale = 1.0 / n_eff as f64;
    let mut grad = Mat::zeros(rows, vocab);
    let mut total = 0.0;
    let mut clamp_count = 0;
    let mut student = vec![0.0; vocab];
    let mut in_kept = vec![usize::MAX; vocab];
    for i in (0..rows).filter(|&i| mask[i]) {
        softmax_f64(student_logits.row(i), &mut student);
        let pair = truncate_slices(base_probs.row(i), &student, n)?;
        let (kl, clamps) = pair.reverse_kl();
        total += kl;
        clamp_count += clamps;

        // d KL / d z_k = q_k * (ln(q'_b / p'_b) - KL), b the bucket holding k.
        let mut scratch = 0;
        let log_ratio = |q: f64, p: f64, scratch: &mut usize| {
            if q > 0.0 {
                (q / floored(p, scratch)).ln()
            } else {
                0.0
            }
        };
        let residual_lr = log_ratio(pair.student_residual, pair.base_residual, &mut scratch);
        for (slot, &id) in pair.kept_ids.iter().enumerate() {
            in_kept[id] = slot;
        }
        let g = grad.row_mut(i);
        for k in 0..vocab {
            let q = student[k];
            if q == 0.0 {
                continue;
            }
            let lr = match in_kept[k] {
                usize::MAX => residual_lr,
                slot => log_ratio(pair.student_kept[slot], pair.base_kept[slot], &mut scratch),
            };
            g[k] = scale * q * (lr - kl);
        }
        for &id in &pair.kept_ids {
            in_kept[id] = usize::MAX;
        }
    }
    Ok(KlLoss {
        value: total * scale,
        grad,
        n_eff,
        clamp_count,
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")))
    }
}

/// `(ce_weight, kl_weight)` for a sequence with the given tag.
pub fn blend_weights(tag: CorpusTag, alpha: f64) -> Result<(f64, f64)> {
    check_alpha(alpha)?;
    Ok(match tag {
        CorpusTag::Domain => (1.0 - alpha, alpha),
        CorpusTag::General => (alpha, 1.0 - alpha),
    })
}

/// Domain: `(1 - alpha) ce + alpha kl`. General: `alpha ce + (1 - alpha) kl`.
pub fn blend(ce: f64, kl: f64, tag: CorpusTag, alpha: f64) -> Result<f64> {
    let (wc, wk) = blend_weights(tag, alpha)?;
    Ok(wc * ce + wk * kl)
}

/// Per-batch loss scalars. CE and KL fields are effective-token-weighted means
/// over the sequences of the matching tag (0 when the batch has none).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_domain: f64,
    /// Unweighted CE on general sequences; only its blended share is trained.
    pub ce_general_monitor: f64,
    pub kl_general: f64,
    pub kl_domain: f64,
    pub blended_total: f64,
    pub n_eff_domain: usize,
    pub n_eff_general: usize,
    pub clamp_count: usize,
}

impl LossBreakdown {
    pub fn n_eff(&self) -> usize {
        self.n_eff_domain + self.n_eff_general
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RouteSettings {
    pub alpha: f64,
    pub n_trunc: usize,
    pub mode: LossMode,
}

impl Default for RouteSettings {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            n_trunc: DEFAULT_TRUNCATION,
            mode: LossMode::Mol,
        }
    }
}

impl RouteSettings {
    /// Weights `(ce, kl)` applied to a sequence with this tag.
    pub fn weights(&self, tag: CorpusTag) -> Result<(f64, f64)> {
        match self.mode {
            LossMode::CeOnly => Ok((1.0, 0.0)),
            LossMode::Mol => blend_weights(tag, self.alpha),
        }
    }

    /// Whether sequences with this tag need base-model probabilities.
    pub fn needs_base(&self, tag: CorpusTag) -> bool {
        matches!(self.weights(tag), Ok((_, kl)) if kl > 0.0)
    }
}

/// Loss inputs for one sequence. Row `i` of the logits predicts `targets[i]`.
#[derive(Debug, Clone, Copy)]
pub struct SequenceLossInput<'a, F> {
    pub tag: CorpusTag,
    pub student_logits: &'a Mat<F>,
    pub base_probs: Option<&'a Mat<f64>>,
    pub targets: &'a [usize],
    pub mask: &'a [bool],
}

#[derive(Debug, Clone)]
pub struct RoutedBatch {
    pub breakdown: LossBreakdown,
    /// Gradient of `blended_total` w.r.t. each sequence's logits.
    pub grads: Vec<Mat<f64>>,
    /// Per-sequence blended loss (before token weighting).
    pub sequence_losses: Vec<f64>,
}

/// Applies the tag's loss to every sequence and aggregates by
/// effective-token-weighted mean.
pub fn route_batch<F: Real>(
    sequences: &[SequenceLossInput<'_, F>],
    settings: &RouteSettings,
) -> Result<RoutedBatch> {
    check_alpha(settings.alpha)?;
    if sequences.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }

    struct Parts {
        ce: LossGrad,
        kl: Option<KlLoss>,
        ce_w: f64,
        kl_w: f64,
    }

    let mut parts = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let ce = cross_entropy(seq.student_logits, seq.targets, seq.mask)?;
        let (ce_w, kl_w) = settings.weights(seq.tag)?;
        let kl = match (settings.mode, seq.base_probs) {
            (LossMode::Mol, Some(base)) => Some(reverse_kl_truncated(
                seq.student_logits,
                base,
                seq.mask,
                settings.n_trunc,
            )?),
            (LossMode::Mol, None) if kl_w > 0.0 => {
                return Err(Error::InvalidArgument(format!(
                    "{} sequence needs base probabilities",
                    seq.tag
                )))
            }
            _ => None,
        };
        parts.push(Parts { ce, kl, ce_w, kl_w });
    }

    let total_eff: usize = parts.iter().map(|p| p.ce.n_eff).sum();
    let mut b = LossBreakdown::default();
    let mut grads = Vec::with_capacity(parts.len());
    let mut sequence_losses = Vec::with_capacity(parts.len());
    for (seq, p) in sequences.iter().zip(parts) {
        let n = p.ce.n_eff as f64;
        let kl_value = p.kl.as_ref().map_or(0.0, |k| k.value);
        let loss = p.ce_w * p.ce.value + p.kl_w * kl_value;
        sequence_losses.push(loss);
        b.blended_total += n * loss;
        if let Some(k) = &p.kl {
            b.clamp_count += k.clamp_count;
        }
        match seq.tag {
            CorpusTag::Domain => {
                b.n_eff_domain += p.ce.n_eff;
                b.ce_domain += n * p.ce.value;
                b.kl_domain += n * kl_value;
            }
            CorpusTag::General => {
                b.n_eff_general += p.ce.n_eff;
                b.ce_general_monitor += n * p.ce.value;
                b.kl_general += n * kl_value;
            }
        }

        let share = n / total_eff as f64;
        let mut grad = p.ce.grad;
        let ce_scale = share * p.ce_w;
        for g in grad.as_mut_slice() {
            *g *= ce_scale;
        }
        if let Some(k) = p.kl {
            let kl_scale = share * p.kl_w;
            if kl_scale != 0.0 {
                for (g, &d) in grad.as_mut_slice().iter_mut().zip(k.grad.as_slice()) {
                    *g += kl_scale * d;
                }
            }
        }
        grads.push(grad);
    }

    b.blended_total /= total_eff as f64;
    if b.n_eff_domain > 0 {
        b.ce_domain /= b.n_eff_domain as f64;
        b.kl_domain /= b.n_eff_domain as f64;
    }
    if b.n_eff_general > 0 {
        b.ce_general_monitor /= b.n_eff_general as f64;
        b.kl_general /= b.n_eff_general as f64;
    }
    Ok(RoutedBatch {
        breakdown: b,
        grads,
        sequence_losses,
    })
}
