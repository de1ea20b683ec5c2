//! Run configuration: one flat TOML table, unknown keys rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::tokenizer::VOCAB_SIZE;
use crate::data::{MixPlan, PackingOptions};
use crate::error::{Error, Result};
use crate::losses::{LossMode, RouteSettings, DEFAULT_ALPHA, DEFAULT_TRUNCATION};
use crate::model::{AdamConfig, AdapterTarget, ModelArch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // Loss.
    pub alpha: f64,
    pub n_trunc: usize,
    pub loss_mode: LossMode,

    // Data.
    pub domain_corpora: Vec<PathBuf>,
    pub general_corpora: Vec<PathBuf>,
    /// Base pre-training corpora; empty means `general_corpora`.
    pub pretrain_corpora: Vec<PathBuf>,
    pub context: usize,
    pub count_prompt_tokens: bool,
    pub val_per_source: usize,
    pub ratio_domain: f64,
    pub ratio_general: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch_len: Option<usize>,

    // Optimisation.
    pub lr: f64,
    pub warmup_frac: f64,
    pub schedule: ScheduleKind,
    pub batch_size: usize,
    pub max_epochs: f64,
    pub val_interval: usize,
    pub convergence_delta: f64,
    pub convergence_window: usize,
    pub stop_at_convergence: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,

    // Adapters.
    pub adapter_rank: usize,
    pub adapter_scale: f64,
    pub adapter_targets: Vec<AdapterTarget>,

    // Base model.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_checkpoint: Option<PathBuf>,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub pretrain_epochs: f64,
    pub pretrain_lr: f64,

    // Seeds.
    pub data_seed: u64,
    pub split_seed: u64,
    pub init_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            n_trunc: DEFAULT_TRUNCATION,
            loss_mode: LossMode::Mol,
            domain_corpora: Vec::new(),
            general_corpora: Vec::new(),
            pretrain_corpora: Vec::new(),
            context: 512,
            count_prompt_tokens: true,
            val_per_source: 32,
            ratio_domain: 1.0,
            ratio_general: 1.0,
            epoch_len: None,
            lr: 3e-3,
            warmup_frac: 0.1,
            schedule: ScheduleKind::Cosine,
            batch_size: 16,
            max_epochs: 2.0,
            val_interval: 10,
            convergence_delta: 0.005,
            convergence_window: 5,
            stop_at_convergence: false,
            grad_clip: None,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            adapter_rank: 4,
            adapter_scale: 1.0,
            adapter_targets: AdapterTarget::DEFAULT.to_vec(),
            base_checkpoint: None,
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            d_ff: 512,
            pretrain_epochs: 3.0,
            pretrain_lr: 3e-3,
            data_seed: 0,
            split_seed: 0,
            init_seed: 0,
        }
    }
}

impl RunConfig {
    /// Parses TOML text. Relative paths are kept as written.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative corpus and checkpoint paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(dir);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        self.domain_corpora.iter_mut().for_each(fix);
        self.general_corpora.iter_mut().for_each(fix);
        self.pretrain_corpora.iter_mut().for_each(fix);
        if let Some(p) = &mut self.base_checkpoint {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if self.n_trunc == 0 {
            return bad("n_trunc must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad(format!("warmup_frac {} outside [0, 1)", self.warmup_frac));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.val_interval == 0 {
            return bad("val_interval must be at least 1".into());
        }
        if self.convergence_window < 2 {
            return bad("convergence_window must be at least 2".into());
        }
        if !(self.max_epochs.is_finite() && self.max_epochs >= 0.0) {
            return bad(format!("max_epochs {} must be finite and non-negative", self.max_epochs));
        }
        if !(self.pretrain_epochs.is_finite() && self.pretrain_epochs >= 0.0) {
            return bad(format!("pretrain_epochs {} must be finite and non-negative", self.pretrain_epochs));
        }
        for (name, v) in [("lr", self.lr), ("pretrain_lr", self.pretrain_lr), ("adapter_scale", self.adapter_scale)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} {v} must be finite and non-negative"));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("grad_clip {c} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return bad("Adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.context < 2 {
            return bad("context must be at least 2".into());
        }
        self.mix_plan()?;
        self.arch().validate()?;
        Ok(())
    }

    pub fn pretrain_sources(&self) -> &[PathBuf] {
        if self.pretrain_corpora.is_empty() {
            &self.general_corpora
        } else {
            &self.pretrain_corpora
        }
    }

    pub fn arch(&self) -> ModelArch {
        ModelArch {
            vocab: VOCAB_SIZE,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_context: self.context,
        }
    }

    pub fn packing(&self) -> PackingOptions {
        PackingOptions {
            context: self.context,
            count_prompt_tokens: self.count_prompt_tokens,
        }
    }

    pub fn mix_plan(&self) -> Result<MixPlan> {
        let plan = MixPlan {
            domain: self.ratio_domain,
            general: self.ratio_general,
            epoch_len: self.epoch_len,
            seed: self.data_seed,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Loss settings with the truncation clamped to the vocabulary.
    pub fn route_settings(&self) -> RouteSettings {
        RouteSettings {
            alpha: self.alpha,
            n_trunc: self.n_trunc.min(VOCAB_SIZE),
            mode: self.loss_mode,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}
