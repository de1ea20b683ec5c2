//! Experiment matrices (ratio sweep, loss ablation), their execution and the
//! comparison report.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::synth::CorpusFiles;
use crate::error::{Error, Result};
use crate::losses::LossMode;
use crate::model::AdapterTarget;
use crate::trainer::{run_training, write_json, EpochCount, RunOptions, RunSummary};

/// Domain:general ratios of the sweep.
pub const SWEEP_RATIOS: [(f64, f64); 4] = [(1.0, 0.5), (1.0, 1.0), (1.0, 1.5), (1.0, 2.0)];

pub const MOL_CELL: &str = "mol_a0.01";
pub const CE_ONLY_CELL: &str = "ce_only";
pub const MOL_HIGH_ALPHA_CELL: &str = "mol_a0.5";

pub const CELLS_DIR: &str = "cells";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const MATRIX_JSON: &str = "matrix.json";

/// The desk-scale toy setup over synthetic corpora: a 2-layer byte model,
/// rank-8 adapters on every projection, ratio 1:1, mol with α=0.01.
pub fn toy_config(files: &CorpusFiles) -> RunConfig {
    RunConfig {
        domain_corpora: files.domain.clone(),
        general_corpora: files.general.clone(),
        pretrain_corpora: files.pretrain.clone(),
        context: 128,
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        d_ff: 256,
        pretrain_epochs: 3.0,
        pretrain_lr: 1e-2,
        adapter_rank: 8,
        adapter_targets: AdapterTarget::ALL.to_vec(),
        lr: 3e-3,
        max_epochs: 1.5,
        stop_at_convergence: true,
        ..RunConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub name: String,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMatrix {
    pub name: String,
    /// Config fields allowed to differ between cells.
    pub varied: Vec<String>,
    pub cells: Vec<Cell>,
}

fn fields(cfg: &RunConfig) -> BTreeMap<String, toml::Value> {
    match toml::Value::try_from(cfg).expect("config serialises") {
        toml::Value::Table(t) => t.into_iter().collect(),
        _ => unreachable!("config serialises to a table"),
    }
}

/// Names of the serialized config fields on which `a` and `b` differ.
pub fn differing_fields(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    let (fa, fb) = (fields(a), fields(b));
    let mut keys: Vec<&String> = fa.keys().chain(fb.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter().filter(|k| fa.get(*k) != fb.get(*k)).cloned().collect()
}

impl ExperimentMatrix {
    /// Fields differing between cells that are not declared as varied.
    pub fn isolation_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, a) in self.cells.iter().enumerate() {
            for b in &self.cells[i + 1..] {
                for f in differing_fields(&a.config, &b.config) {
                    if !self.varied.contains(&f) {
                        out.push(format!("cells {} and {} differ in undeclared field {f}", a.name, b.name));
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::Config(format!("matrix {} has no cells", self.name)));
        }
        let mut seen = HashSet::new();
        for c in &self.cells {
            if c.name.is_empty() || c.name.contains(['/', '\\']) {
                return Err(Error::Config(format!("invalid cell name {:?}", c.name)));
            }
            if !seen.insert(&c.name) {
                return Err(Error::Config(format!("duplicate cell name {}", c.name)));
            }
            c.config.validate()?;
        }
        Ok(())
    }
}

fn fmt_ratio(v: f64) -> String {
    format!("{v}")
}

/// Four cells at domain:general 1:0.5, 1:1, 1:1.5 and 1:2; everything else
/// as in `base`.
pub fn build_ratio_sweep(base: &RunConfig) -> Result<ExperimentMatrix> {
    base.validate()?;
    let cells = SWEEP_RATIOS
        .iter()
        .map(|&(d, g)| Cell {
            name: format!("ratio_{}_{}", fmt_ratio(d), fmt_ratio(g)),
            config: RunConfig {
                ratio_domain: d,
                ratio_general: g,
                ..base.clone()
            },
        })
        .collect();
    Ok(ExperimentMatrix {
        name: "ratio_sweep".into(),
        varied: vec!["ratio_domain".into(), "ratio_general".into()],
        cells,
    })
}

/// Three cells at ratio 1:1: mol with α=0.01, CE on all data, mol with α=0.5.
/// The CE-only cell keeps α=0.01, which it ignores.
pub fn build_ablation(base: &RunConfig) -> Result<ExperimentMatrix> {
    base.validate()?;
    let at = |mode: LossMode, alpha: f64| RunConfig {
        loss_mode: mode,
        alpha,
        ratio_domain: 1.0,
        ratio_general: 1.0,
        ..base.clone()
    };
    Ok(ExperimentMatrix {
        name: "ablation".into(),
        varied: vec!["loss_mode".into(), "alpha".into()],
        cells: vec![
            Cell {
                name: MOL_CELL.into(),
                config: at(LossMode::Mol, 0.01),
            },
            Cell {
                name: CE_ONLY_CELL.into(),
                config: at(LossMode::CeOnly, 0.01),
            },
            Cell {
                name: MOL_HIGH_ALPHA_CELL.into(),
                config: at(LossMode::Mol, 0.5),
            },
        ],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub name: String,
    pub status: CellStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub ratio_domain: f64,
    pub ratio_general: f64,
    pub loss_mode: LossMode,
    pub alpha: f64,
    /// Step whose validation is reported: the convergence step, else the last.
    pub eval_step: Option<usize>,
    pub convergence_epoch: Option<f64>,
    pub initial_val: BTreeMap<String, f64>,
    pub eval_val: BTreeMap<String, f64>,
    /// Relative drop `(ce0 - ce) / ce0` per domain source.
    pub domain_drops: BTreeMap<String, f64>,
    /// Mean of `domain_drops`.
    pub domain_improvement: Option<f64>,
    /// Mean of `|ce - ce0| / ce0` over general sources.
    pub general_drift: Option<f64>,
    pub combined_score: Option<f64>,
    pub mean_grad_norm_first_epoch: Option<f64>,
    pub mean_grad_norm: Option<f64>,
    pub epoch_counts: Vec<EpochCount>,
    /// Every generated epoch within one sequence of the exact ratio.
    pub ratio_ok: bool,
    pub rank: Option<usize>,
}

/// Whether an epoch's composition is within one sequence of `domain:general`.
pub fn ratio_within_one(count: &EpochCount, domain: f64, general: f64) -> bool {
    let expected = count.stream_domain as f64 * general / domain;
    (count.stream_general as f64 - expected).abs() <= 1.0 + 1e-9
}

fn relative_changes(initial: &BTreeMap<String, f64>, now: &BTreeMap<String, f64>, prefix: &str) -> BTreeMap<String, f64> {
    initial
        .iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .filter_map(|(k, &v0)| now.get(k).map(|&v| (k.clone(), (v - v0) / v0)))
        .collect()
}

fn mean<'a>(xs: impl Iterator<Item = &'a f64>) -> Option<f64> {
    let v: Vec<f64> = xs.copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl CellReport {
    fn new(cell: &Cell, outcome: &Result<RunSummary>) -> Self {
        let cfg = &cell.config;
        let mut r = CellReport {
            name: cell.name.clone(),
            status: CellStatus::Failed,
            error: None,
            ratio_domain: cfg.ratio_domain,
            ratio_general: cfg.ratio_general,
            loss_mode: cfg.loss_mode,
            alpha: cfg.alpha,
            eval_step: None,
            convergence_epoch: None,
            initial_val: BTreeMap::new(),
            eval_val: BTreeMap::new(),
            domain_drops: BTreeMap::new(),
            domain_improvement: None,
            general_drift: None,
            combined_score: None,
            mean_grad_norm_first_epoch: None,
            mean_grad_norm: None,
            epoch_counts: Vec::new(),
            ratio_ok: false,
            rank: None,
        };
        let s = match outcome {
            Ok(s) => s,
            Err(e) => {
                r.error = Some(e.to_string());
                return r;
            }
        };
        r.status = CellStatus::Ok;
        r.eval_step = Some(s.convergence.as_ref().map_or(s.steps, |c| c.step));
        r.convergence_epoch = s.convergence.as_ref().map(|c| c.epoch);
        r.initial_val = s.initial_val.clone();
        r.eval_val = s.eval_val().clone();
        r.domain_drops = relative_changes(&r.initial_val, &r.eval_val, "domain.")
            .into_iter()
            .map(|(k, c)| (k, -c))
            .collect();
        r.domain_improvement = mean(r.domain_drops.values());
        let general = relative_changes(&r.initial_val, &r.eval_val, "general.");
        r.general_drift = mean(general.values().map(|c| c.abs()).collect::<Vec<_>>().iter());
        r.combined_score = r.domain_improvement.zip(r.general_drift).map(|(d, g)| d - g);
        r.mean_grad_norm_first_epoch = s.mean_grad_norm_first_epoch;
        r.mean_grad_norm = s.mean_grad_norm;
        r.epoch_counts = s.epoch_counts.clone();
        r.ratio_ok = s
            .epoch_counts
            .iter()
            .all(|c| ratio_within_one(c, cfg.ratio_domain, cfg.ratio_general));
        r
    }
}

/// Difference `b - a` of two cells' headline metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDelta {
    pub a: String,
    pub b: String,
    pub domain_improvement: Option<f64>,
    pub general_drift: Option<f64>,
    pub mean_grad_norm_first_epoch: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradNormComparison {
    pub mol_cell: String,
    pub ce_only_cell: String,
    pub mol_mean: f64,
    pub ce_only_mean: f64,
    /// Strictly smaller mean first-epoch norm for the mol cell.
    pub mol_smaller: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub matrix: String,
    pub varied: Vec<String>,
    pub cells: Vec<CellReport>,
    /// Successful cells by descending combined score.
    pub ranking: Vec<String>,
    pub pairwise: Vec<PairDelta>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<GradNormComparison>,
    pub failed: Vec<String>,
    pub violations: Vec<String>,
}

fn diff(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    a.zip(b).map(|(a, b)| b - a)
}

impl ComparisonReport {
    /// Assembles the report from per-cell outcomes, in matrix order.
    pub fn build(matrix: &ExperimentMatrix, outcomes: &[Result<RunSummary>]) -> Self {
        assert_eq!(matrix.cells.len(), outcomes.len(), "one outcome per cell");
        let mut cells: Vec<CellReport> = matrix.cells.iter().zip(outcomes).map(|(c, o)| CellReport::new(c, o)).collect();

        let mut ranked: Vec<(f64, String)> = cells
            .iter()
            .filter_map(|c| c.combined_score.map(|s| (s, c.name.clone())))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        let ranking: Vec<String> = ranked.into_iter().map(|(_, n)| n).collect();
        for c in &mut cells {
            c.rank = ranking.iter().position(|n| *n == c.name).map(|p| p + 1);
        }

        let mut pairwise = Vec::new();
        for (i, a) in cells.iter().enumerate() {
            for b in &cells[i + 1..] {
                pairwise.push(PairDelta {
                    a: a.name.clone(),
                    b: b.name.clone(),
                    domain_improvement: diff(a.domain_improvement, b.domain_improvement),
                    general_drift: diff(a.general_drift, b.general_drift),
                    mean_grad_norm_first_epoch: diff(a.mean_grad_norm_first_epoch, b.mean_grad_norm_first_epoch),
                });
            }
        }

        let first_norm = |mode: LossMode, alpha: Option<f64>| {
            cells
                .iter()
                .filter(|c| c.loss_mode == mode && alpha.is_none_or(|a| c.alpha == a))
                .find_map(|c| c.mean_grad_norm_first_epoch.map(|m| (c.name.clone(), m)))
        };
        let mol = first_norm(LossMode::Mol, Some(0.01)).or_else(|| first_norm(LossMode::Mol, None));
        let grad_norm = mol.zip(first_norm(LossMode::CeOnly, None)).map(|((m, mv), (c, cv))| GradNormComparison {
            mol_cell: m,
            ce_only_cell: c,
            mol_mean: mv,
            ce_only_mean: cv,
            mol_smaller: mv < cv,
        });

        let failed = cells.iter().filter(|c| c.status == CellStatus::Failed).map(|c| c.name.clone()).collect();
        let mut violations = matrix.isolation_violations();
        for c in cells.iter().filter(|c| c.status == CellStatus::Ok && !c.ratio_ok) {
            violations.push(format!("cell {} realized mix off its ratio by more than one sequence", c.name));
        }
        let names: HashSet<&String> = cells.iter().map(|c| &c.name).collect();
        if names.len() != matrix.cells.len() {
            violations.push("report does not cover every cell exactly once".into());
        }

        ComparisonReport {
            matrix: matrix.name.clone(),
            varied: matrix.varied.clone(),
            cells,
            ranking,
            pairwise,
            grad_norm,
            failed,
            violations,
        }
    }

    pub fn cell(&self, name: &str) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.name == name)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let mut rows = vec![vec![
            "rank",
            "name",
            "status",
            "ratio_domain",
            "ratio_general",
            "loss_mode",
            "alpha",
            "domain_improvement",
            "general_drift",
            "combined_score",
            "mean_grad_norm_first_epoch",
            "mean_grad_norm",
            "convergence_epoch",
            "eval_step",
            "ratio_ok",
            "error",
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>()];
        for c in &self.cells {
            rows.push(vec![
                c.rank.map_or(String::new(), |r| r.to_string()),
                c.name.clone(),
                serde_json::to_value(c.status).expect("status").as_str().unwrap_or_default().to_string(),
                c.ratio_domain.to_string(),
                c.ratio_general.to_string(),
                c.loss_mode.to_string(),
                c.alpha.to_string(),
                opt(c.domain_improvement),
                opt(c.general_drift),
                opt(c.combined_score),
                opt(c.mean_grad_norm_first_epoch),
                opt(c.mean_grad_norm),
                opt(c.convergence_epoch),
                c.eval_step.map_or(String::new(), |s| s.to_string()),
                c.ratio_ok.to_string(),
                c.error.clone().unwrap_or_default(),
            ]);
        }
        for r in rows {
            w.write_record(&r).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// A fixed-width summary table.
    pub fn render(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let mut s = format!(
            "{:<4} {:<14} {:<7} {:>9} {:>9} {:>9} {:>9} {:>7}\n",
            "rank", "cell", "status", "domain", "drift", "score", "gnorm1", "conv"
        );
        for c in &self.cells {
            s += &format!(
                "{:<4} {:<14} {:<7} {:>9} {:>9} {:>9} {:>9} {:>7}\n",
                c.rank.map_or("-".into(), |r| r.to_string()),
                c.name,
                if c.status == CellStatus::Ok { "ok" } else { "failed" },
                f(c.domain_improvement),
                f(c.general_drift),
                f(c.combined_score),
                f(c.mean_grad_norm_first_epoch),
                c.convergence_epoch.map_or("-".into(), |e| format!("{e:.2}")),
            );
        }
        if let Some(g) = &self.grad_norm {
            s += &format!(
                "first-epoch grad norm: {} {:.4} vs {} {:.4}\n",
                g.mol_cell, g.mol_mean, g.ce_only_cell, g.ce_only_mean
            );
        }
        for v in &self.violations {
            s += &format!("violation: {v}\n");
        }
        s
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MatrixOptions {
    /// Run cells on separate threads.
    pub parallel: bool,
}

/// Trains every cell under `out/cells/<name>/` and writes the report beside
/// them. A failing cell is recorded as failed; the others still run.
pub fn run_matrix(matrix: &ExperimentMatrix, out: &Path, opts: MatrixOptions) -> Result<ComparisonReport> {
    matrix.validate()?;
    fs::create_dir_all(out.join(CELLS_DIR)).map_err(|e| Error::io(out, e))?;
    write_json(&out.join(MATRIX_JSON), matrix)?;
    let run = |cell: &Cell| -> Result<RunSummary> {
        log::info!("running cell {}", cell.name);
        let r = run_training(&cell.config, &out.join(CELLS_DIR).join(&cell.name), RunOptions::default());
        if let Err(e) = &r {
            log::warn!("cell {} failed: {e}", cell.name);
        }
        r
    };
    let outcomes: Vec<Result<RunSummary>> = if opts.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = matrix.cells.iter().map(|c| s.spawn(move || run(c))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Data("cell thread panicked".into()))))
                .collect()
        })
    } else {
        matrix.cells.iter().map(run).collect()
    };
    let report = ComparisonReport::build(matrix, &outcomes);
    write_json(&out.join(REPORT_JSON), &report)?;
    report.write_csv(&out.join(REPORT_CSV))?;
    Ok(report)
}
