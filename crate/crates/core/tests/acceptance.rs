//! Acceptance run. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any fails. Set `MOLCPT_ACCEPTANCE_DIR` to keep the run directories.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use molcpt::config::RunConfig;
use molcpt::data::synth::{self, SynthSpec};
use molcpt::data::TaggedSequence;
use molcpt::experiments::{
    build_ablation, build_ratio_sweep, run_matrix, toy_config, ComparisonReport, MatrixOptions, CE_ONLY_CELL,
    MOL_CELL, MOL_HIGH_ALPHA_CELL,
};
use molcpt::gradcheck::{loss_suite, LOSS_TOLERANCE};
use molcpt::linalg::{softmax_rows, Mat};
use molcpt::losses::{
    blend, cross_entropy, full_reverse_kl_oracle, reverse_kl_truncated, route_batch, truncate_pair, CorpusTag,
    LossMode, ProbVector, RouteSettings, SequenceLossInput,
};
use molcpt::model::{ModelArch, Params, Transformer};
use molcpt::trainer::{pretrain, run_training, RunOptions, Trainer, BASE_CHECKPOINT_FILE, METRICS_FILE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Line {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn report(id: usize, name: &'static str, passed: bool, detail: String) -> Line {
    let line = Line {
        id,
        name,
        passed,
        detail,
    };
    println!(
        "[{}] criterion {}: {}: {}",
        if line.passed { "PASS" } else { "FAIL" },
        line.id,
        line.name,
        line.detail
    );
    line
}

fn gradient_correctness() -> Line {
    let t = Instant::now();
    let r = loss_suite(200, 2024).expect("loss suite runs");
    let secs = t.elapsed().as_secs_f64();
    report(
        1,
        "gradient correctness",
        r.passed() && secs < 60.0,
        format!(
            "{} instances, max rel err {:.2e} (ce {:.2e}, kl {:.2e}) < {LOSS_TOLERANCE:e}, {secs:.1}s",
            r.instances, r.max_rel_err, r.ce.rel_err, r.kl.rel_err
        ),
    )
}

fn random_distribution(rng: &mut impl Rng, v: usize) -> ProbVector {
    let scale: f64 = [0.5, 3.0, 8.0][rng.random_range(0..3)];
    let mut p: Vec<f64> = (0..v).map(|_| (rng.random_range(-1.0..1.0) * scale).exp()).collect();
    if rng.random_bool(0.3) {
        for x in p.iter_mut() {
            if rng.random_bool(0.2) {
                *x = 0.0;
            }
        }
        p[rng.random_range(0..v)] = 1.0;
    }
    let z: f64 = p.iter().sum();
    ProbVector::new(p.into_iter().map(|x| x / z).collect()).expect("valid distribution")
}

fn truncation_equivalence() -> Line {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut worst_full, mut worst_sum, mut min_kl) = (0.0f64, 0.0f64, f64::INFINITY);
    let pairs = 2000;
    for _ in 0..pairs {
        let v = rng.random_range(1..=300);
        let base = random_distribution(&mut rng, v);
        let student = random_distribution(&mut rng, v);
        let full = truncate_pair(&base, &student, v).expect("n = V").reverse_kl().0;
        worst_full = worst_full.max((full - full_reverse_kl_oracle(&student, &base)).abs());
        let n = rng.random_range(1..=v);
        let pair = truncate_pair(&base, &student, n).expect("n <= V");
        let bs: f64 = pair.base_kept.iter().sum::<f64>() + pair.base_residual;
        let ss: f64 = pair.student_kept.iter().sum::<f64>() + pair.student_residual;
        worst_sum = worst_sum.max((bs - 1.0).abs()).max((ss - 1.0).abs());
        min_kl = min_kl.min(pair.reverse_kl().0);
    }
    let secs = t.elapsed().as_secs_f64();
    report(
        2,
        "truncation equivalence",
        worst_full <= 1e-10 && worst_sum <= 1e-9 && min_kl >= -1e-12 && secs < 60.0,
        format!(
            "{pairs} pairs, |KL(n=V) - oracle| <= {worst_full:.1e}, |mass - 1| <= {worst_sum:.1e}, min KL {min_kl:.1e}, {secs:.1}s"
        ),
    )
}

fn random_logits(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect();
    Mat::from_vec(rows, cols, data).expect("shape")
}

fn routing_algebra() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // Tag swap against alpha -> 1 - alpha, on alphas whose complement is exact.
    let mut symmetric = true;
    for i in 0..2000 {
        let alpha = if i % 2 == 0 {
            rng.random_range(0..=(1u32 << 20)) as f64 / (1u64 << 20) as f64
        } else {
            rng.random_range(0.5..=1.0)
        };
        let (ce, kl) = (rng.random_range(0.0..10.0), rng.random_range(0.0..10.0));
        for (a, b) in [(alpha, 1.0 - alpha), (1.0 - alpha, alpha)] {
            symmetric &= blend(ce, kl, CorpusTag::Domain, a).unwrap() == blend(ce, kl, CorpusTag::General, b).unwrap();
        }
    }

    let batches = 300;
    let mut worst = 0.0f64;
    for _ in 0..batches {
        let vocab = rng.random_range(2..=40);
        let settings = RouteSettings {
            alpha: rng.random_range(0.0..=1.0),
            n_trunc: rng.random_range(1..=vocab),
            mode: if rng.random_bool(0.8) { LossMode::Mol } else { LossMode::CeOnly },
        };
        let n_seq = rng.random_range(1..=6);
        let mut owned = Vec::new();
        for _ in 0..n_seq {
            let rows = rng.random_range(1..=8);
            let tag = if rng.random_bool(0.5) { CorpusTag::Domain } else { CorpusTag::General };
            let logits = random_logits(&mut rng, rows, vocab);
            let base = softmax_rows(&random_logits(&mut rng, rows, vocab));
            let targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..vocab)).collect();
            let mut mask: Vec<bool> = (0..rows).map(|_| rng.random_bool(0.7)).collect();
            mask[0] = true;
            owned.push((tag, logits, base, targets, mask));
        }
        let inputs: Vec<SequenceLossInput<'_, f64>> = owned
            .iter()
            .map(|(tag, logits, base, targets, mask)| SequenceLossInput {
                tag: *tag,
                student_logits: logits,
                base_probs: Some(base),
                targets,
                mask,
            })
            .collect();
        let routed = route_batch(&inputs, &settings).expect("routes");
        // Independent decomposition: per-sequence kernels, blended, then the
        // effective-token-weighted mean.
        let (mut num, mut den) = (0.0, 0.0);
        for (tag, logits, base, targets, mask) in &owned {
            let ce = cross_entropy(logits, targets, mask).unwrap();
            let loss = match settings.mode {
                LossMode::CeOnly => ce.value,
                LossMode::Mol => {
                    let kl = reverse_kl_truncated(logits, base, mask, settings.n_trunc).unwrap();
                    blend(ce.value, kl.value, *tag, settings.alpha).unwrap()
                }
            };
            num += ce.n_eff as f64 * loss;
            den += ce.n_eff as f64;
        }
        worst = worst.max((routed.breakdown.blended_total - num / den).abs());
    }
    report(
        3,
        "routing and blend algebra",
        symmetric && worst <= 1e-9,
        format!("tag swap exact: {symmetric}; {batches} batches, max |route - decomposition| {worst:.1e}"),
    )
}

fn self_alignment() -> Line {
    let arch = ModelArch {
        vocab: molcpt::data::tokenizer::VOCAB_SIZE,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_context: 24,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let base = Arc::new(Transformer::new(arch.clone(), Params::<f32>::init(&arch, &mut rng)).unwrap());
    let cfg = RunConfig {
        alpha: 0.0,
        context: 24,
        ..RunConfig::default()
    };
    let trainer = Trainer::new(&cfg, base).unwrap();
    let batch: Vec<TaggedSequence> = (0..4)
        .map(|i| {
            let tokens: Vec<usize> = (0..24).map(|_| rng.random_range(0..256)).collect();
            let mut mask = vec![true; 24];
            mask[0] = false;
            TaggedSequence {
                id: format!("g{i}"),
                tokens,
                mask,
                tag: CorpusTag::General,
                source: "g".into(),
                doc_ids: vec![format!("g{i}")],
            }
        })
        .collect();
    let refs: Vec<&TaggedSequence> = batch.iter().collect();
    let (b, dom, gen) = trainer.gradients(&refs).unwrap();
    let norm = |s: &molcpt::model::AdapterSet<f32>| {
        s.slots().iter().flat_map(|(_, v)| v.iter()).map(|&x| (x as f64).powi(2)).sum::<f64>()
    };
    let gnorm = (norm(&dom) + norm(&gen)).sqrt();
    report(
        4,
        "self-alignment fixed point",
        b.blended_total.abs() <= 1e-9 && gnorm <= 1e-6,
        format!("loss {:.1e}, adapter gradient norm {gnorm:.1e}", b.blended_total),
    )
}

struct Toy {
    cfg: RunConfig,
    root: PathBuf,
}

fn toy_setup(root: &Path) -> Toy {
    let t = Instant::now();
    let files = synth::write_corpora(&synth::generate(&SynthSpec::default()), &root.join("corpora")).unwrap();
    let cfg = toy_config(&files);
    let p = pretrain(&cfg, &root.join("pretrain")).expect("pre-training runs");
    println!(
        "toy base: general val {:?} -> {:?} in {:.0}s",
        p.initial_val,
        p.final_val,
        t.elapsed().as_secs_f64()
    );
    Toy {
        cfg: RunConfig {
            base_checkpoint: Some(root.join("pretrain").join(BASE_CHECKPOINT_FILE)),
            ..cfg
        },
        root: root.to_path_buf(),
    }
}

fn fmt_drops(r: &ComparisonReport, cell: &str) -> String {
    let c = r.cell(cell).expect("cell present");
    c.domain_drops
        .iter()
        .map(|(k, v)| format!("{}={v:.3}", k.trim_start_matches("domain.")))
        .collect::<Vec<_>>()
        .join(" ")
}

fn ablation_criteria(toy: &Toy) -> Vec<Line> {
    let t = Instant::now();
    let matrix = build_ablation(&toy.cfg).unwrap();
    let r = run_matrix(&matrix, &toy.root.join("ablate"), MatrixOptions::default()).expect("ablation runs");
    let secs = t.elapsed().as_secs_f64();
    print!("{}", r.render());
    let get = |name: &str| r.cell(name).filter(|c| c.error.is_none());
    let (mol, ce, high) = (get(MOL_CELL), get(CE_ONLY_CELL), get(MOL_HIGH_ALPHA_CELL));
    let mut out = Vec::new();

    out.push(match mol {
        Some(m) => {
            let drops_ok = !m.domain_drops.is_empty() && m.domain_drops.values().all(|&d| d >= 0.20);
            let drift = m.general_drift.unwrap_or(f64::INFINITY);
            report(
                5,
                "toy dynamics (mol, alpha=0.01)",
                m.convergence_epoch.is_some() && drops_ok && drift < 0.05,
                format!(
                    "converged at epoch {:?}; domain drops {}; general drift {:.4} (< 0.05); ablation {secs:.0}s",
                    m.convergence_epoch.map(|e| (e * 1000.0).round() / 1000.0),
                    fmt_drops(&r, MOL_CELL),
                    drift
                ),
            )
        }
        None => report(5, "toy dynamics (mol, alpha=0.01)", false, "mol cell failed".into()),
    });

    out.push(match &r.grad_norm {
        Some(g) => report(
            6,
            "first-epoch gradient norm",
            g.mol_smaller,
            format!("mol {:.4} < ce_only {:.4}", g.mol_mean, g.ce_only_mean),
        ),
        None => report(6, "first-epoch gradient norm", false, "no paired norms".into()),
    });

    out.push(match (mol, ce, high) {
        (Some(m), Some(c), Some(h)) => {
            let (dm, dc) = (m.general_drift.unwrap(), c.general_drift.unwrap());
            let (im, ih) = (m.domain_improvement.unwrap(), h.domain_improvement.unwrap());
            report(
                7,
                "ablation direction",
                dc >= 2.0 * dm && ih < im,
                format!(
                    "drift ce_only {dc:.4} vs mol {dm:.4} (ratio {:.2} >= 2); domain drop alpha=0.5 {ih:.4} < alpha=0.01 {im:.4}",
                    dc / dm
                ),
            )
        }
        _ => report(7, "ablation direction", false, format!("failed cells: {:?}", r.failed)),
    });
    out
}

fn sweep_criterion(toy: &Toy) -> Line {
    let t = Instant::now();
    // Plumbing check: a shorter horizon than the ablation.
    let cfg = RunConfig {
        max_epochs: 0.5,
        ..toy.cfg.clone()
    };
    let matrix = build_ratio_sweep(&cfg).unwrap();
    let r = run_matrix(&matrix, &toy.root.join("sweep"), MatrixOptions::default()).expect("sweep runs");
    print!("{}", r.render());
    let counts: Vec<String> = r
        .cells
        .iter()
        .map(|c| {
            let e = c.epoch_counts.first();
            format!("{}={:?}", c.name, e.map(|e| (e.stream_domain, e.stream_general)))
        })
        .collect();
    report(
        8,
        "ratio sweep plumbing",
        r.failed.is_empty() && r.violations.is_empty() && r.ranking.len() == 4 && r.cells.iter().all(|c| c.ratio_ok),
        format!(
            "ranking {:?}; epoch composition {}; violations {}; {:.0}s",
            r.ranking,
            counts.join(" "),
            r.violations.len(),
            t.elapsed().as_secs_f64()
        ),
    )
}

fn determinism(toy: &Toy) -> Line {
    let cfg = RunConfig {
        max_epochs: 0.1,
        stop_at_convergence: false,
        ..toy.cfg.clone()
    };
    let dirs = [toy.root.join("det_a"), toy.root.join("det_b")];
    for d in &dirs {
        run_training(&cfg, d, RunOptions::default()).expect("run completes");
    }
    let read = |d: &PathBuf, f: &str| fs::read(d.join(f)).unwrap();
    let same_manifest = read(&dirs[0], "manifest.json") == read(&dirs[1], "manifest.json");
    let (a, b) = (read(&dirs[0], METRICS_FILE), read(&dirs[1], METRICS_FILE));
    report(
        9,
        "determinism",
        same_manifest && a == b,
        format!("identical manifests: {same_manifest}; metrics CSVs {} bytes, identical: {}", a.len(), a == b),
    )
}

fn main() {
    let start = Instant::now();
    let mut lines = vec![gradient_correctness(), truncation_equivalence(), routing_algebra(), self_alignment()];

    let kept = std::env::var_os("MOLCPT_ACCEPTANCE_DIR").map(PathBuf::from);
    let tmp = tempfile::tempdir().unwrap();
    let root = kept.clone().unwrap_or_else(|| tmp.path().to_path_buf());
    fs::create_dir_all(&root).unwrap();
    let toy = toy_setup(&root);
    lines.extend(ablation_criteria(&toy));
    lines.push(sweep_criterion(&toy));
    lines.push(determinism(&toy));

    lines.sort_by_key(|l| l.id);
    let failed: Vec<usize> = lines.iter().filter(|l| !l.passed).map(|l| l.id).collect();
    println!("---");
    for l in &lines {
        println!("criterion {} {}: {}", l.id, l.name, if l.passed { "PASS" } else { "FAIL" });
    }
    println!(
        "{} of {} criteria passed in {:.0}s{}",
        lines.len() - failed.len(),
        lines.len(),
        start.elapsed().as_secs_f64(),
        kept.map_or(String::new(), |d| format!("; runs kept in {}", d.display()))
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
