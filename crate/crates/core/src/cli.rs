//! Command-line surface.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::RunConfig;
use crate::data::synth::{self, CorpusFiles, SynthSpec};
use crate::data::{corpus_stats, ingest, CorpusStats};
use crate::error::{Error, Result};
use crate::experiments::{build_ablation, build_ratio_sweep, run_matrix, toy_config, MatrixOptions};
use crate::gradcheck::{loss_suite, LOSS_TOLERANCE};
use crate::losses::CorpusTag;
use crate::trainer::{pretrain, run_training, RunOptions, BASE_CHECKPOINT_FILE, METRICS_FILE};

/// Environment variable holding the default output root.
pub const OUT_ENV: &str = "MOLCPT_OUT";
/// Config written by `synth` beside the corpora.
pub const TOY_CONFIG_FILE: &str = "toy.toml";

#[derive(Debug, Parser)]
#[command(name = "molcpt", version, about = "Continual pre-training with per-sequence loss routing")]
pub struct Cli {
    /// Root for default output directories.
    #[arg(long, global = true, env = OUT_ENV, default_value = "runs")]
    pub out_root: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the base model on the general corpora.
    Pretrain(RunArgs),
    /// Train adapters on the mixed stream.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Validate config and data and write the manifest without training.
        #[arg(long)]
        dry_run: bool,
        /// Stop at the detected convergence epoch.
        #[arg(long)]
        stop_at_convergence: bool,
    },
    /// Run the four-cell domain:general ratio sweep.
    Sweep(MatrixArgs),
    /// Run the mol / ce_only / high-alpha ablation.
    Ablate(MatrixArgs),
    /// Finite-difference check of the loss gradients.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Token and packing statistics of the configured corpora.
    Stats {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Domain corpus files (instead of a config).
        #[arg(long)]
        domain: Vec<PathBuf>,
        /// General corpus files (instead of a config).
        #[arg(long)]
        general: Vec<PathBuf>,
        #[arg(long)]
        context: Option<usize>,
    },
    /// Write per-series plot data from a run's metrics.
    ExportPlots {
        /// Run directory holding the metrics CSV.
        run: PathBuf,
        /// Output directory (default: <run>/plots).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic toy corpora and a matching config.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = SynthSpec::default().min_tokens)]
        min_tokens: usize,
        #[arg(long, default_value_t = SynthSpec::default().conditions)]
        conditions: usize,
        #[arg(long, default_value_t = SynthSpec::default().seed)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
pub struct SeedArgs {
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub init_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (default: <out-root>/<command>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub seeds: SeedArgs,
}

#[derive(Debug, Args)]
pub struct MatrixArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Run cells concurrently.
    #[arg(long)]
    pub parallel: bool,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        let s = &self.seeds;
        cfg.data_seed = s.data_seed.unwrap_or(cfg.data_seed);
        cfg.split_seed = s.split_seed.unwrap_or(cfg.split_seed);
        cfg.init_seed = s.init_seed.unwrap_or(cfg.init_seed);
        Ok(cfg)
    }

    fn out(&self, root: &Path, command: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| root.join(command))
    }
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serialisable"));
}

/// Executes one parsed invocation.
pub fn run(cli: Cli) -> Result<()> {
    let root = &cli.out_root;
    match cli.command {
        Command::Pretrain(args) => {
            let cfg = args.load()?;
            print_json(&pretrain(&cfg, &args.out(root, "pretrain"))?);
        }
        Command::Train {
            run,
            dry_run,
            stop_at_convergence,
        } => {
            let mut cfg = run.load()?;
            cfg.stop_at_convergence |= stop_at_convergence;
            print_json(&run_training(&cfg, &run.out(root, "train"), RunOptions { dry_run })?);
        }
        Command::Sweep(m) => {
            let matrix = build_ratio_sweep(&m.run.load()?)?;
            let report = run_matrix(&matrix, &m.run.out(root, "sweep"), MatrixOptions { parallel: m.parallel })?;
            print!("{}", report.render());
        }
        Command::Ablate(m) => {
            let matrix = build_ablation(&m.run.load()?)?;
            let report = run_matrix(&matrix, &m.run.out(root, "ablate"), MatrixOptions { parallel: m.parallel })?;
            print!("{}", report.render());
        }
        Command::Gradcheck { instances, seed } => {
            if instances == 0 {
                return Err(Error::InvalidArgument("instances must be at least 1".into()));
            }
            let r = loss_suite(instances, seed)?;
            print_json(&r);
            println!("max relative error {:e}", r.max_rel_err);
            if !r.passed() {
                return Err(Error::Numerical {
                    message: format!("max relative error {:e} not below {LOSS_TOLERANCE:e}", r.max_rel_err),
                    sequences: Vec::new(),
                });
            }
        }
        Command::Stats {
            config,
            domain,
            general,
            context,
        } => print_json(&stats(config.as_deref(), &domain, &general, context)?),
        Command::ExportPlots { run, out } => {
            let out = out.unwrap_or_else(|| run.join("plots"));
            for f in export_plots(&run, &out)? {
                println!("{}", f.display());
            }
        }
        Command::Synth {
            out,
            min_tokens,
            conditions,
            seed,
        } => {
            let out = out.unwrap_or_else(|| root.join("corpora"));
            let corpora = synth::generate(&SynthSpec {
                min_tokens,
                conditions,
                seed,
            });
            let files = synth::write_corpora(&corpora, &out)?;
            for p in files.domain.iter().chain(&files.general).chain(&files.pretrain) {
                println!("{}", p.display());
            }
            // A ready-to-run config next to the corpora, with relative paths.
            let name = |p: &PathBuf| PathBuf::from(p.file_name().expect("corpus file name"));
            let rel = CorpusFiles {
                domain: files.domain.iter().map(name).collect(),
                general: files.general.iter().map(name).collect(),
                pretrain: files.pretrain.iter().map(name).collect(),
            };
            let cfg = RunConfig {
                base_checkpoint: Some(PathBuf::from("pretrain").join(BASE_CHECKPOINT_FILE)),
                ..toy_config(&rel)
            };
            let p = out.join(TOY_CONFIG_FILE);
            fs::write(&p, cfg.to_toml()).map_err(|e| Error::io(&p, e))?;
            println!("{}", p.display());
        }
    }
    Ok(())
}

/// Corpus statistics from a config, or from explicit file lists.
pub fn stats(config: Option<&Path>, domain: &[PathBuf], general: &[PathBuf], context: Option<usize>) -> Result<CorpusStats> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.domain_corpora.extend(domain.iter().cloned());
    cfg.general_corpora.extend(general.iter().cloned());
    if let Some(c) = context {
        cfg.context = c;
    }
    if cfg.domain_corpora.is_empty() && cfg.general_corpora.is_empty() {
        return Err(Error::InvalidArgument("no corpora given".into()));
    }
    let mut docs = Vec::new();
    for p in &cfg.domain_corpora {
        docs.extend(ingest(p, CorpusTag::Domain)?);
    }
    for p in &cfg.general_corpora {
        docs.extend(ingest(p, CorpusTag::General)?);
    }
    corpus_stats(&docs, cfg.packing())
}

/// Columns exported as plot series besides the validation curves.
pub const PLOT_COLUMNS: [&str; 3] = ["train_loss", "grad_norm", "general_grad_norm"];

/// Writes one `step,epoch,value` CSV per series of the run's metrics into
/// `out`, replacing it. Values are copied verbatim. Nothing is written when
/// the metrics are missing, empty or malformed.
pub fn export_plots(run: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let path = run.join(METRICS_FILE);
    if !path.exists() {
        return Err(Error::MissingPath(path));
    }
    let corrupt = |m: String| Error::Data(format!("{}: {m}", path.display()));
    let mut reader = csv::Reader::from_path(&path).map_err(|e| corrupt(e.to_string()))?;
    let header = reader.headers().map_err(|e| corrupt(e.to_string()))?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let (step_col, epoch_col) = match (col("step"), col("epoch")) {
        (Some(s), Some(e)) => (s, e),
        _ => return Err(corrupt("missing step or epoch column".into())),
    };
    let series: Vec<(String, usize)> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| PLOT_COLUMNS.contains(h) || h.starts_with("val_ce."))
        .map(|(i, h)| (h.to_string(), i))
        .collect();

    let mut rows: Vec<Vec<String>> = vec![Vec::new(); series.len()];
    let mut n_records = 0;
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| corrupt(e.to_string()))?;
        n_records += 1;
        let (step, epoch) = (&rec[step_col], &rec[epoch_col]);
        if step.parse::<u64>().is_err() || epoch.parse::<f64>().is_err() {
            return Err(corrupt(format!("record {}: bad step or epoch", line + 1)));
        }
        for ((_, i), out_rows) in series.iter().zip(&mut rows) {
            let v = &rec[*i];
            if v.is_empty() {
                continue;
            }
            if v.parse::<f64>().is_err() {
                return Err(corrupt(format!("record {}: bad value {v:?}", line + 1)));
            }
            out_rows.push(format!("{step},{epoch},{v}"));
        }
    }
    if n_records == 0 {
        return Err(corrupt("no records".into()));
    }

    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let staging = parent.join(format!(
        ".{}.partial",
        out.file_name().map_or("plots".into(), |n| n.to_string_lossy())
    ));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    let mut written = Vec::new();
    for ((name, _), lines) in series.iter().zip(&rows) {
        if lines.is_empty() {
            continue;
        }
        let file = format!("{name}.csv");
        let p = staging.join(&file);
        fs::write(&p, format!("step,epoch,value\n{}\n", lines.join("\n"))).map_err(|e| Error::io(&p, e))?;
        written.push(out.join(file));
    }
    if out.exists() {
        fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    fs::rename(&staging, out).map_err(|e| Error::io(out, e))?;
    Ok(written)
}

/// The machine-readable record printed on stderr for a failed invocation.
pub fn error_record(e: &Error) -> serde_json::Value {
    let mut rec = json!({
        "kind": e.kind(),
        "message": e.to_string(),
        "exit_code": e.exit_code(),
    });
    match e {
        Error::MissingPath(p) | Error::Io { path: p, .. } | Error::Parse { path: p, .. } => {
            rec["path"] = json!(p);
        }
        Error::Numerical { sequences, .. } if !sequences.is_empty() => {
            rec["sequences"] = json!(sequences);
        }
        _ => {}
    }
    json!({ "error": rec })
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            if code != 0 {
                let rec = json!({ "error": { "kind": "usage", "message": e.kind().to_string(), "exit_code": 1 } });
                eprintln!("{rec}");
            }
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("{}", error_record(&e));
            e.exit_code()
        }
    }
}
