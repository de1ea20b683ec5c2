//! Training loop: cosine schedule with warmup, mixed batches routed through
//! the loss kernels, adapter-only Adam updates, per-source validation,
//! convergence detection and append-only metrics.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::{self, split_validation, Mixer, StreamItem, TaggedSequence, ValidationSet};
use crate::error::{Error, Result};
use crate::linalg::{l2_norm_sq, softmax_rows, Mat};
use crate::losses::{cross_entropy, route_batch, CorpusTag, LossBreakdown, RouteSettings, SequenceLossInput};
use crate::model::{
    params_hash, AdamState, AdapterSet, Checkpoint, ModelBundle, Params, RngState, Transformer,
};

/// Linear warmup from 0 to `peak` over `round(warmup_frac * total)` steps,
/// then cosine decay to 0 at `total`.
pub fn lr_at(step: usize, total: usize, peak: f64, warmup_frac: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let step = step.min(total);
    let warmup = (warmup_frac * total as f64).round() as usize;
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total == warmup {
        return peak;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    peak * 0.5 * (1.0 + (PI * progress).cos())
}

/// Optimiser steps needed for `epochs` passes over `epoch_len` sequences.
pub fn total_steps(epochs: f64, epoch_len: usize, batch: usize) -> usize {
    (epochs * epoch_len as f64 / batch as f64).ceil() as usize
}

/// One validation measurement, with domain-source CEs in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ValPoint {
    pub step: usize,
    pub epoch: f64,
    pub domain_ce: Vec<f64>,
}

/// Earliest epoch at which every domain source improved by less than `delta`
/// (relative) across the last `window` validation points.
pub fn detect_convergence(history: &[ValPoint], delta: f64, window: usize) -> Option<f64> {
    if window < 2 || history.len() < window {
        return None;
    }
    (window - 1..history.len()).find_map(|j| {
        let (first, last) = (&history[j + 1 - window], &history[j]);
        let plateau = first
            .domain_ce
            .iter()
            .zip(&last.domain_ce)
            .all(|(&a, &b)| (a - b) / a < delta);
        plateau.then_some(last.epoch)
    })
}

/// One row of the metrics CSV. Training fields are empty on the step-0 row;
/// validation fields are filled on validation steps only.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: f64,
    pub lr: f64,
    pub train_loss: Option<f64>,
    pub train_ce_domain: Option<f64>,
    pub train_ce_general: Option<f64>,
    pub train_kl_general: Option<f64>,
    pub grad_norm: Option<f64>,
    pub general_grad_norm: Option<f64>,
    pub clamp_count: Option<usize>,
    pub n_eff_domain: Option<usize>,
    pub n_eff_general: Option<usize>,
    /// Keyed `"<tag>.<source>"`.
    pub val_ce: BTreeMap<String, f64>,
}

pub const FIXED_COLUMNS: [&str; 12] = [
    "step",
    "epoch",
    "lr",
    "train_loss",
    "train_ce_domain",
    "train_ce_general",
    "train_kl_general",
    "grad_norm",
    "general_grad_norm",
    "clamp_count",
    "n_eff_domain",
    "n_eff_general",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl MetricsRecord {
    fn fields(&self, val_keys: &[String]) -> Vec<String> {
        let mut out = vec![
            self.step.to_string(),
            self.epoch.to_string(),
            self.lr.to_string(),
            opt(self.train_loss),
            opt(self.train_ce_domain),
            opt(self.train_ce_general),
            opt(self.train_kl_general),
            opt(self.grad_norm),
            opt(self.general_grad_norm),
            opt(self.clamp_count),
            opt(self.n_eff_domain),
            opt(self.n_eff_general),
        ];
        out.extend(val_keys.iter().map(|k| opt(self.val_ce.get(k))));
        out
    }
}

/// Append-only CSV with the fixed columns followed by `val_ce.<key>` columns
/// in sorted key order. Values use Rust's shortest round-trip formatting.
pub struct MetricsWriter {
    writer: csv::Writer<File>,
    path: PathBuf,
    val_keys: Vec<String>,
    last_step: Option<usize>,
}

impl MetricsWriter {
    pub fn create(path: &Path, mut val_keys: Vec<String>) -> Result<Self> {
        val_keys.sort();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
        header.extend(val_keys.iter().map(|k| format!("val_ce.{k}")));
        let mut w = Self {
            writer: csv::Writer::from_writer(file),
            path: path.to_path_buf(),
            val_keys,
            last_step: None,
        };
        w.write_row(&header)?;
        Ok(w)
    }

    fn write_row(&mut self, row: &[String]) -> Result<()> {
        let to_err = |e: csv::Error| Error::Data(format!("{}: {e}", self.path.display()));
        self.writer.write_record(row).map_err(to_err)?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        if self.last_step.is_some_and(|s| record.step <= s) {
            return Err(Error::InvalidArgument(format!(
                "metrics step {} does not increase",
                record.step
            )));
        }
        self.last_step = Some(record.step);
        let row = record.fields(&self.val_keys);
        self.write_row(&row)
    }
}

fn val_key(tag: CorpusTag, source: &str) -> String {
    format!("{tag}.{source}")
}

/// Token-weighted mean CE on each validation set, with logits from `logits`.
pub fn validate_with(
    sets: &[ValidationSet],
    logits: impl Fn(&[usize]) -> Result<Mat<f32>>,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for set in sets {
        if set.sequences.is_empty() {
            return Err(Error::Data(format!("validation set {} is empty", set.source)));
        }
        let (mut total, mut n) = (0.0, 0usize);
        for seq in &set.sequences {
            let ce = cross_entropy(&logits(seq.inputs())?, seq.targets(), seq.target_mask())?;
            total += ce.value * ce.n_eff as f64;
            n += ce.n_eff;
        }
        out.insert(val_key(set.tag, &set.source), total / n as f64);
    }
    Ok(out)
}

/// Student validation CE per source. Never mutates parameters.
pub fn validate(bundle: &ModelBundle<f32>, sets: &[ValidationSet]) -> Result<BTreeMap<String, f64>> {
    validate_with(sets, |t| Ok(bundle.forward_student(t, false)?.logits))
}

/// Scalars of one optimiser step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepStats {
    pub breakdown: LossBreakdown,
    /// Pre-clip L2 norm of the full adapter gradient.
    pub grad_norm: f64,
    /// L2 norm of the general sequences' share of the gradient.
    pub general_grad_norm: f64,
}

fn set_norm(g: &AdapterSet<f32>) -> f64 {
    g.slots().iter().map(|(_, s)| l2_norm_sq(s)).sum::<f64>().sqrt()
}

fn numerical(message: String, batch: &[&TaggedSequence]) -> Error {
    let sequences: Vec<String> = batch.iter().map(|s| s.id.clone()).collect();
    log::error!("{message}; sequences: {}", sequences.join(", "));
    Error::Numerical { message, sequences }
}

/// Adapters, optimiser state and loss settings of one run.
pub struct Trainer {
    pub bundle: ModelBundle<f32>,
    pub opt: AdamState<f32>,
    pub settings: RouteSettings,
    pub grad_clip: Option<f64>,
}

impl Trainer {
    /// Fresh adapters (zero up-projections) on top of `base`.
    pub fn new(cfg: &RunConfig, base: Arc<Transformer<f32>>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let adapters = AdapterSet::init(&base.arch, cfg.adapter_rank, cfg.adapter_scale, &cfg.adapter_targets, &mut rng)?;
        let bundle = ModelBundle::new(base, adapters)?;
        let opt = bundle.new_optimizer(cfg.adam());
        Ok(Self {
            bundle,
            opt,
            settings: cfg.route_settings(),
            grad_clip: cfg.grad_clip,
        })
    }

    /// Loss breakdown and adapter gradient of `blended_total`, split into the
    /// domain and general sequences' contributions.
    pub fn gradients(&self, batch: &[&TaggedSequence]) -> Result<(LossBreakdown, AdapterSet<f32>, AdapterSet<f32>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut outs = Vec::with_capacity(batch.len());
        let mut base_probs: Vec<Option<Mat<f64>>> = Vec::with_capacity(batch.len());
        for seq in batch {
            let out = self.bundle.forward_student(seq.inputs(), true)?;
            base_probs.push(if self.settings.needs_base(seq.tag) {
                Some(softmax_rows(&self.bundle.forward_base(seq.inputs())?.logits))
            } else {
                None
            });
            outs.push(out);
        }
        let inputs: Vec<SequenceLossInput<'_, f32>> = batch
            .iter()
            .zip(&outs)
            .zip(&base_probs)
            .map(|((seq, out), base)| SequenceLossInput {
                tag: seq.tag,
                student_logits: &out.logits,
                base_probs: base.as_ref(),
                targets: seq.targets(),
                mask: seq.target_mask(),
            })
            .collect();
        let routed = route_batch(&inputs, &self.settings)?;
        if !routed.breakdown.blended_total.is_finite() {
            let bad: Vec<&TaggedSequence> = batch
                .iter()
                .zip(&routed.sequence_losses)
                .filter(|(_, l)| !l.is_finite())
                .map(|(s, _)| *s)
                .collect();
            let culprits = if bad.is_empty() { batch } else { &bad };
            return Err(numerical(
                format!("non-finite loss {}", routed.breakdown.blended_total),
                culprits,
            ));
        }
        let mut domain = self.bundle.adapters.zeros_like();
        let mut general = self.bundle.adapters.zeros_like();
        for ((seq, out), grad) in batch.iter().zip(&outs).zip(&routed.grads) {
            let dlogits = grad.map(|v| v as f32);
            let target = match seq.tag {
                CorpusTag::Domain => &mut domain,
                CorpusTag::General => &mut general,
            };
            self.bundle.student_backward(out, &dlogits, target)?;
        }
        Ok((routed.breakdown, domain, general))
    }

    /// Forward, loss routing, backward and one Adam step at `lr`.
    pub fn train_step(&mut self, batch: &[&TaggedSequence], lr: f64) -> Result<StepStats> {
        let (breakdown, mut grads, general) = self.gradients(batch)?;
        let general_grad_norm = set_norm(&general);
        for (g, h) in grads.slots_mut().into_iter().zip(general.slots()) {
            for (a, &b) in g.iter_mut().zip(h.1) {
                *a += b;
            }
        }
        let grad_norm = set_norm(&grads);
        if !grad_norm.is_finite() {
            return Err(numerical(format!("non-finite gradient norm {grad_norm}"), batch));
        }
        if let Some(clip) = self.grad_clip {
            if grad_norm > clip {
                let s = (clip / grad_norm) as f32;
                grads.slots_mut().into_iter().flatten().for_each(|v| *v *= s);
            }
        }
        self.bundle.apply_adapter_update(&grads, lr, &mut self.opt)?;
        Ok(StepStats {
            breakdown,
            grad_norm,
            general_grad_norm,
        })
    }
}

/// Packed, split corpora for one run.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train_domain: Vec<TaggedSequence>,
    pub train_general: Vec<TaggedSequence>,
    pub val: Vec<ValidationSet>,
    pub corpora: Vec<CorpusFile>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusFile {
    pub path: PathBuf,
    pub tag: CorpusTag,
    pub sha256: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Ingests, packs and splits one side (all files of one tag). Every source
/// holds out `val_per_source` sequences.
pub fn load_side(
    paths: &[PathBuf],
    tag: CorpusTag,
    cfg: &RunConfig,
) -> Result<(Vec<TaggedSequence>, Vec<ValidationSet>, Vec<CorpusFile>)> {
    if paths.is_empty() {
        return Err(Error::Config(format!("no {tag} corpora configured")));
    }
    let mut docs = Vec::new();
    let mut files = Vec::new();
    for p in paths {
        docs.extend(data::ingest(p, tag)?);
        files.push(CorpusFile {
            path: p.clone(),
            tag,
            sha256: sha256_file(p)?,
        });
    }
    let seqs = data::template_and_pack(&docs, cfg.packing())?;
    if seqs.is_empty() {
        return Err(Error::Data(format!("{tag} corpora produced no sequences")));
    }
    let n_sources = seqs.iter().map(|s| s.source.as_str()).collect::<std::collections::BTreeSet<_>>().len();
    let (train, val) = split_validation(seqs, cfg.val_per_source * n_sources, cfg.split_seed)?;
    Ok((train, ValidationSet::group(val), files))
}

pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let (train_domain, mut val, mut corpora) = load_side(&cfg.domain_corpora, CorpusTag::Domain, cfg)?;
    let (train_general, gval, gfiles) = load_side(&cfg.general_corpora, CorpusTag::General, cfg)?;
    val.extend(gval);
    corpora.extend(gfiles);
    Ok(PreparedData {
        train_domain,
        train_general,
        val,
        corpora,
    })
}

/// Reads a base checkpoint and checks it against the configured architecture.
pub fn load_base(cfg: &RunConfig) -> Result<(Arc<Transformer<f32>>, PathBuf)> {
    let path = cfg
        .base_checkpoint
        .clone()
        .ok_or_else(|| Error::Config("base_checkpoint is required".into()))?;
    let ckpt = Checkpoint::load(&path)?;
    if ckpt.arch != cfg.arch() {
        return Err(Error::Config(format!(
            "base checkpoint architecture {:?} differs from the configured {:?}",
            ckpt.arch,
            cfg.arch()
        )));
    }
    Ok((Arc::new(Transformer::new(ckpt.arch, ckpt.base)?), path))
}

/// Cycles through epochs of the mixed stream, one item at a time.
struct Stream {
    mixer: Mixer,
    pos: usize,
    current: Option<(u64, Vec<StreamItem>)>,
    /// `(domain, general)` per generated epoch.
    composition: BTreeMap<u64, (usize, usize)>,
}

impl Stream {
    fn next(&mut self) -> (u64, StreamItem) {
        let len = self.mixer.epoch_len();
        let (epoch, offset) = ((self.pos / len) as u64, self.pos % len);
        if self.current.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let items = self.mixer.epoch(epoch);
            let domain = items.iter().filter(|i| i.tag == CorpusTag::Domain).count();
            self.composition.insert(epoch, (domain, items.len() - domain));
            self.current = Some((epoch, items));
        }
        self.pos += 1;
        (epoch, self.current.as_ref().expect("epoch cached").1[offset])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochCount {
    pub epoch: u64,
    /// Sequences consumed from this epoch.
    pub domain: usize,
    pub general: usize,
    /// Whether the whole epoch was consumed.
    pub complete: bool,
    /// Composition of the full epoch stream as generated.
    pub stream_domain: usize,
    pub stream_general: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergencePoint {
    pub epoch: f64,
    pub step: usize,
    pub val_ce: BTreeMap<String, f64>,
}

/// What a finished run reports beside its metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub total_steps: usize,
    pub epoch_len: usize,
    /// Planned `(domain, general)` sequences per epoch.
    pub planned_counts: (usize, usize),
    pub epoch_counts: Vec<EpochCount>,
    pub initial_val: BTreeMap<String, f64>,
    pub final_val: BTreeMap<String, f64>,
    pub convergence: Option<ConvergencePoint>,
    pub mean_grad_norm_first_epoch: Option<f64>,
    pub mean_grad_norm: Option<f64>,
    pub base_hash_start: String,
    pub base_hash_end: String,
}

impl RunSummary {
    /// Validation CE at the convergence checkpoint, else at the end.
    pub fn eval_val(&self) -> &BTreeMap<String, f64> {
        self.convergence.as_ref().map_or(&self.final_val, |c| &c.val_ce)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    pub corpora: Vec<CorpusFile>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_checkpoint_sha256: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_params_hash: Option<String>,
}

impl Manifest {
    fn new(command: &str, cfg: &RunConfig, corpora: Vec<CorpusFile>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: cfg.clone(),
            seeds: BTreeMap::from([
                ("data_seed".into(), cfg.data_seed),
                ("split_seed".into(), cfg.split_seed),
                ("init_seed".into(), cfg.init_seed),
            ]),
            corpora,
            base_checkpoint_sha256: None,
            base_params_hash: None,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serialisable");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn prepare_run_dir(out: &Path, cfg: &RunConfig, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(out.join(CHECKPOINT_DIR)).map_err(|e| Error::io(out, e))?;
    write_json(&out.join(MANIFEST_FILE), manifest)?;
    let p = out.join(CONFIG_FILE);
    fs::write(&p, cfg.to_toml()).map_err(|e| Error::io(&p, e))
}

struct Timing {
    file: File,
    path: PathBuf,
    start: Instant,
}

impl Timing {
    fn create(path: &Path) -> Result<Self> {
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "step,wall_seconds").map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
            start: Instant::now(),
        })
    }

    fn mark(&mut self, step: usize) -> Result<()> {
        writeln!(self.file, "{step},{:.6}", self.start.elapsed().as_secs_f64()).map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Validate config and data, write the manifest, train nothing.
    pub dry_run: bool,
}

fn adapter_checkpoint(trainer: &Trainer, data_seed: u64, epoch: u64, meta: BTreeMap<String, String>) -> Checkpoint {
    let base = trainer.bundle.base();
    let mut ck = Checkpoint::new(base.arch.clone(), base.params.clone());
    ck.adapters = Some(trainer.bundle.adapters.clone());
    ck.optimizer = Some(trainer.opt.clone());
    ck.rng = Some(RngState { seed: data_seed, epoch });
    ck.meta = meta;
    ck
}

/// Continual pre-training of adapters on the mixed stream, writing the run
/// directory under `out`.
pub fn run_training(cfg: &RunConfig, out: &Path, opts: RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let (base, base_path) = load_base(cfg)?;
    let mut manifest = Manifest::new("train", cfg, data.corpora.clone());
    manifest.base_checkpoint_sha256 = Some(sha256_file(&base_path)?);
    manifest.base_params_hash = Some(params_hash(&base.params));
    prepare_run_dir(out, cfg, &manifest)?;
    train_prepared(cfg, &data, base, out, opts)
}

/// The training loop over already prepared data and base model.
pub fn train_prepared(
    cfg: &RunConfig,
    data: &PreparedData,
    base: Arc<Transformer<f32>>,
    out: &Path,
    opts: RunOptions,
) -> Result<RunSummary> {
    fs::create_dir_all(out.join(CHECKPOINT_DIR)).map_err(|e| Error::io(out, e))?;
    let mixer = Mixer::new(data.train_domain.len(), data.train_general.len(), cfg.mix_plan()?)?;
    let epoch_len = mixer.epoch_len();
    let total = if opts.dry_run {
        0
    } else {
        total_steps(cfg.max_epochs, epoch_len, cfg.batch_size)
    };
    let planned_counts = mixer.counts();
    let mut trainer = Trainer::new(cfg, base)?;
    let base_hash_start = trainer.bundle.base_hash();

    let val_keys: Vec<String> = data.val.iter().map(|s| val_key(s.tag, &s.source)).collect();
    let domain_keys: Vec<String> = data
        .val
        .iter()
        .filter(|s| s.tag == CorpusTag::Domain)
        .map(|s| val_key(s.tag, &s.source))
        .collect();
    let mut metrics = MetricsWriter::create(&out.join(METRICS_FILE), val_keys)?;
    let mut timing = Timing::create(&out.join(TIMING_FILE))?;

    let mut summary = RunSummary {
        steps: 0,
        total_steps: total,
        epoch_len,
        planned_counts,
        epoch_counts: Vec::new(),
        initial_val: BTreeMap::new(),
        final_val: BTreeMap::new(),
        convergence: None,
        mean_grad_norm_first_epoch: None,
        mean_grad_norm: None,
        base_hash_start: base_hash_start.clone(),
        base_hash_end: base_hash_start.clone(),
    };
    if opts.dry_run {
        write_json(&out.join(SUMMARY_FILE), &summary)?;
        return Ok(summary);
    }

    let epoch_of = |step: usize| (step * cfg.batch_size) as f64 / epoch_len as f64;
    let mut history: Vec<ValPoint> = Vec::new();
    let observe = |step: usize, val: &BTreeMap<String, f64>, history: &mut Vec<ValPoint>| {
        history.push(ValPoint {
            step,
            epoch: epoch_of(step),
            domain_ce: domain_keys.iter().map(|k| val[k]).collect(),
        });
        detect_convergence(history, cfg.convergence_delta, cfg.convergence_window)
    };

    let val0 = validate(&trainer.bundle, &data.val)?;
    observe(0, &val0, &mut history);
    metrics.append(&MetricsRecord {
        step: 0,
        epoch: 0.0,
        lr: lr_at(0, total, cfg.lr, cfg.warmup_frac),
        val_ce: val0.clone(),
        ..MetricsRecord::default()
    })?;
    timing.mark(0)?;
    summary.initial_val = val0.clone();
    summary.final_val = val0;

    let mut stream = Stream {
        mixer,
        pos: 0,
        current: None,
        composition: BTreeMap::new(),
    };
    let (mut norms_first, mut norms_all) = (Vec::new(), Vec::new());
    let mut counts: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
    for step in 1..=total {
        let lr = lr_at(step, total, cfg.lr, cfg.warmup_frac);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (epoch, item) = stream.next();
            let c = counts.entry(epoch).or_default();
            match item.tag {
                CorpusTag::Domain => {
                    c.0 += 1;
                    batch.push(&data.train_domain[item.index]);
                }
                CorpusTag::General => {
                    c.1 += 1;
                    batch.push(&data.train_general[item.index]);
                }
            }
        }
        let stats = trainer.train_step(&batch, lr)?;
        norms_all.push(stats.grad_norm);
        if step * cfg.batch_size <= epoch_len {
            norms_first.push(stats.grad_norm);
        }
        let b = &stats.breakdown;
        let mut rec = MetricsRecord {
            step,
            epoch: epoch_of(step),
            lr,
            train_loss: Some(b.blended_total),
            train_ce_domain: (b.n_eff_domain > 0).then_some(b.ce_domain),
            train_ce_general: (b.n_eff_general > 0).then_some(b.ce_general_monitor),
            train_kl_general: (b.n_eff_general > 0 && trainer.settings.needs_base(CorpusTag::General))
                .then_some(b.kl_general),
            grad_norm: Some(stats.grad_norm),
            general_grad_norm: Some(stats.general_grad_norm),
            clamp_count: Some(b.clamp_count),
            n_eff_domain: Some(b.n_eff_domain),
            n_eff_general: Some(b.n_eff_general),
            val_ce: BTreeMap::new(),
        };
        summary.steps = step;
        let mut stop = false;
        if step % cfg.val_interval == 0 || step == total {
            let val = validate(&trainer.bundle, &data.val)?;
            let converged = observe(step, &val, &mut history);
            if let (Some(epoch), None) = (converged, &summary.convergence) {
                log::info!("domain validation CE plateaued at epoch {epoch:.3} (step {step})");
                let meta = BTreeMap::from([
                    ("step".to_string(), step.to_string()),
                    ("epoch".to_string(), epoch.to_string()),
                    ("kind".to_string(), "converged".to_string()),
                ]);
                adapter_checkpoint(&trainer, cfg.data_seed, epoch.floor() as u64, meta)
                    .save(&out.join(CHECKPOINT_DIR).join("converged.ckpt"))?;
                summary.convergence = Some(ConvergencePoint {
                    epoch,
                    step,
                    val_ce: val.clone(),
                });
                stop = cfg.stop_at_convergence;
            }
            rec.val_ce = val.clone();
            summary.final_val = val;
        }
        metrics.append(&rec)?;
        timing.mark(step)?;
        if stop {
            break;
        }
    }

    let full_epochs = (summary.steps * cfg.batch_size) / epoch_len;
    summary.epoch_counts = counts
        .into_iter()
        .map(|(epoch, (domain, general))| {
            let (stream_domain, stream_general) = stream.composition[&epoch];
            EpochCount {
                epoch,
                domain,
                general,
                complete: (epoch as usize) < full_epochs,
                stream_domain,
                stream_general,
            }
        })
        .collect();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    summary.mean_grad_norm_first_epoch = mean(&norms_first);
    summary.mean_grad_norm = mean(&norms_all);
    summary.base_hash_end = trainer.bundle.base_hash();
    let meta = BTreeMap::from([
        ("step".to_string(), summary.steps.to_string()),
        ("epoch".to_string(), epoch_of(summary.steps).to_string()),
        ("kind".to_string(), "final".to_string()),
    ]);
    adapter_checkpoint(&trainer, cfg.data_seed, full_epochs as u64, meta)
        .save(&out.join(CHECKPOINT_DIR).join("final.ckpt"))?;
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    if summary.base_hash_end != summary.base_hash_start {
        return Err(Error::Numerical {
            message: "base parameters changed during training".into(),
            sequences: Vec::new(),
        });
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub steps: usize,
    pub initial_val: BTreeMap<String, f64>,
    pub final_val: BTreeMap<String, f64>,
    pub params_hash: String,
    pub checkpoint: PathBuf,
}

pub const BASE_CHECKPOINT_FILE: &str = "base.ckpt";

/// Plain-CE full-parameter training of a fresh model on the pre-training
/// corpora (by default the general corpora); the result is the frozen base
/// for later runs.
pub fn pretrain(cfg: &RunConfig, out: &Path) -> Result<PretrainSummary> {
    cfg.validate()?;
    let (train, val, corpora) = load_side(cfg.pretrain_sources(), CorpusTag::General, cfg)?;
    prepare_run_dir(out, cfg, &Manifest::new("pretrain", cfg, corpora))?;
    let arch = cfg.arch();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let mut model = Transformer::new(arch.clone(), Params::<f32>::init(&arch, &mut rng))?;
    let sizes: Vec<usize> = model.params.slots().iter().map(|(_, s)| s.len()).collect();
    let mut adam = AdamState::<f32>::new(cfg.adam(), &sizes);
    let total = total_steps(cfg.pretrain_epochs, train.len(), cfg.batch_size);

    let val_keys = val.iter().map(|s| val_key(s.tag, &s.source)).collect();
    let mut metrics = MetricsWriter::create(&out.join(METRICS_FILE), val_keys)?;
    let mut timing = Timing::create(&out.join(TIMING_FILE))?;
    let check_val = |model: &Transformer<f32>| validate_with(&val, |t| Ok(model.forward(t, None, false)?.logits));
    let val0 = check_val(&model)?;
    let epoch_of = |step: usize| (step * cfg.batch_size) as f64 / train.len() as f64;
    metrics.append(&MetricsRecord {
        step: 0,
        lr: lr_at(0, total, cfg.pretrain_lr, cfg.warmup_frac),
        val_ce: val0.clone(),
        ..MetricsRecord::default()
    })?;
    timing.mark(0)?;
    let mut last_val = val0.clone();

    let mut order: Vec<usize> = Vec::new();
    let mut pos = 0;
    for step in 1..=total {
        let lr = lr_at(step, total, cfg.pretrain_lr, cfg.warmup_frac);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (epoch, offset) = (pos / train.len(), pos % train.len());
            if offset == 0 {
                let mut r = ChaCha8Rng::seed_from_u64(cfg.data_seed);
                r.set_stream(epoch as u64);
                order = (0..train.len()).collect();
                order.shuffle(&mut r);
            }
            batch.push(&train[order[offset]]);
            pos += 1;
        }
        let total_eff: usize = batch.iter().map(|s| s.n_eff()).sum();
        let mut grads = Params::<f32>::zeros(&arch);
        let mut loss = 0.0;
        for seq in &batch {
            let out = model.forward(seq.inputs(), None, true)?;
            let ce = cross_entropy(&out.logits, seq.targets(), seq.target_mask())?;
            let share = ce.n_eff as f64 / total_eff as f64;
            loss += share * ce.value;
            let dlogits = ce.grad.map(|v| (v * share) as f32);
            model.backward(&out, &dlogits, None, Some(&mut grads), None)?;
        }
        if !loss.is_finite() {
            return Err(numerical(format!("non-finite pre-training loss {loss}"), &batch));
        }
        let g = grads.slots();
        let grad_norm = g.iter().map(|(_, s)| l2_norm_sq(s)).sum::<f64>().sqrt();
        adam.update(model.params.slots_mut(), &g, lr)?;
        let mut rec = MetricsRecord {
            step,
            epoch: epoch_of(step),
            lr,
            train_loss: Some(loss),
            train_ce_general: Some(loss),
            grad_norm: Some(grad_norm),
            n_eff_domain: Some(0),
            n_eff_general: Some(total_eff),
            ..MetricsRecord::default()
        };
        if step % cfg.val_interval == 0 || step == total {
            let v = check_val(&model)?;
            rec.val_ce = v.clone();
            last_val = v;
        }
        metrics.append(&rec)?;
        timing.mark(step)?;
    }

    let path = out.join(BASE_CHECKPOINT_FILE);
    let mut ck = Checkpoint::new(arch, model.params.clone());
    ck.optimizer = Some(adam);
    ck.rng = Some(RngState {
        seed: cfg.data_seed,
        epoch: (pos / train.len()) as u64,
    });
    ck.meta.insert("kind".into(), "base".into());
    ck.meta.insert("steps".into(), total.to_string());
    ck.save(&path)?;
    let summary = PretrainSummary {
        steps: total,
        initial_val: val0,
        final_val: last_val,
        params_hash: params_hash(&model.params),
        checkpoint: path,
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}
