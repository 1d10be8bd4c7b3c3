//! `bdd`: run gradient checks, train/distill toy models, sweep seeds and
//! loss modes, and inspect datasets and checkpoints from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bdd_core::checks::{all_passed, run_gradient_checks, run_property_checks};
use bdd_core::data::{
    gen_gaussian_mixture, gen_segmentation_grids, save_classification, train_val_split,
};
use bdd_core::harness::{
    alpha_ablation_variants, distill_student, distill_student_seg, prepare_classification,
    prepare_segmentation, run_seed_sweep, run_variant_sweep, tau_ablation_variants,
    write_delta_csv, write_summary_csv, write_sweep_csv, LossMode, SweepResult, TrainConfig,
};
use bdd_core::metrics::{evaluate_top1, probability_histograms};
use bdd_core::model::{load_checkpoint, save_checkpoint};

#[derive(Parser)]
#[command(name = "bdd", version, about = "Desk-scale knowledge-distillation laboratory")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for artifacts (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Comma-separated seed list, e.g. `--seeds 0,1,2`.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Loss mode: ce | kd | bdd | bdd_accum | bdd_seg.
    #[arg(long, global = true)]
    mode: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Compare analytic gradients of every loss against finite differences.
    Gradcheck {
        /// Random points per loss.
        #[arg(long, default_value_t = 5)]
        trials: usize,
    },
    /// Train a teacher and distill a student; writes checkpoints and metrics.
    Distill,
    /// Paired multi-seed comparison across loss modes; writes CSV tables.
    Sweep {
        /// Modes to compare, comma separated (defaults to ce,kd,bdd).
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<String>>,
    },
    /// Numeric invariant probes (simplex, divergence sign, log-domain guard).
    Properties {
        /// Probability floor used inside logarithms; 0 disables the guard.
        #[arg(long, default_value_t = 1e-12)]
        epsilon: f64,
    },
    /// Generate the synthetic dataset and dump it to disk.
    GenData,
    /// Evaluate a saved checkpoint on the validation split.
    Eval {
        /// Checkpoint produced by `distill`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    configure_threads()?;
    let cfg = load_config(&cli.common)?;
    fs::create_dir_all(&cli.common.out)
        .with_context(|| format!("creating {}", cli.common.out.display()))?;

    match &cli.command {
        Command::Gradcheck { trials } => cmd_gradcheck(&cli.common, *trials),
        Command::Distill => cmd_distill(&cli.common, &cfg),
        Command::Sweep { modes } => cmd_sweep(&cli.common, &cfg, modes.as_deref()),
        Command::Properties { epsilon } => cmd_properties(*epsilon),
        Command::GenData => cmd_gen_data(&cli.common, &cfg),
        Command::Eval { checkpoint } => cmd_eval(&cfg, checkpoint),
    }
}

/// BDD_THREADS bounds worker parallelism; unset means rayon's default.
fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("BDD_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("BDD_THREADS must be a positive integer, got `{v}`"))?;
        if n == 0 {
            bail!("BDD_THREADS must be >= 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("initializing thread pool")?;
    }
    Ok(())
}

fn load_config(common: &CommonArgs) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(mode) = &common.mode {
        cfg.mode = LossMode::from_str(mode)?;
    }
    if let Some(seeds) = &common.seeds {
        if let Some(&first) = seeds.first() {
            cfg.seed = first;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn seeds_or_default(common: &CommonArgs) -> Vec<u64> {
    common.seeds.clone().unwrap_or_else(|| vec![0, 1, 2])
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_gradcheck(common: &CommonArgs, trials: usize) -> Result<()> {
    let seed = seeds_or_default(common)[0];
    let outcomes = run_gradient_checks(trials, seed);
    for o in &outcomes {
        println!(
            "{:6} {:28} {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.detail
        );
    }
    write_json(&common.out.join("gradcheck.json"), &outcomes)?;
    if !all_passed(&outcomes) {
        bail!("gradient check failed");
    }
    Ok(())
}

fn cmd_properties(epsilon: f64) -> Result<()> {
    let outcomes = run_property_checks(epsilon, 0);
    for o in &outcomes {
        println!(
            "{:6} {:28} {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.detail
        );
    }
    if !all_passed(&outcomes) {
        bail!("property check failed (epsilon = {epsilon})");
    }
    Ok(())
}

fn cmd_distill(common: &CommonArgs, cfg: &TrainConfig) -> Result<()> {
    if cfg.mode.is_segmentation() {
        let exp = prepare_segmentation(cfg)?;
        println!(
            "teacher trained: mIoU {:.4} ({} grids train / {} val)",
            exp.teacher_report.final_metric, exp.train.n, exp.val.n
        );
        let (student, report) = distill_student_seg(cfg, &exp.teacher, &exp.train, &exp.val)?;
        println!(
            "student distilled ({}): mIoU {:.4} in {:.1}s",
            report.mode, report.final_metric, report.wall_time_s
        );
        save_checkpoint(&common.out.join("teacher.ckpt"), &exp.teacher)?;
        save_checkpoint(&common.out.join("student.ckpt"), &student)?;
        write_json(&common.out.join("teacher_metrics.json"), &exp.teacher_report)?;
        write_json(&common.out.join("student_metrics.json"), &report)?;
        return Ok(());
    }

    let exp = prepare_classification(cfg)?;
    println!(
        "teacher trained: top-1 {:.4} ({} train / {} val)",
        exp.teacher_report.final_metric, exp.train.n, exp.val.n
    );
    let (student, report) = match cfg.mode {
        LossMode::Ce => bdd_core::harness::train_student_ce(cfg, &exp.train, &exp.val)?,
        _ => distill_student(cfg, &exp.teacher, &exp.train, &exp.val)?,
    };
    println!(
        "student trained ({}): top-1 {:.4} in {:.1}s",
        report.mode, report.final_metric, report.wall_time_s
    );
    save_checkpoint(&common.out.join("teacher.ckpt"), &exp.teacher)?;
    save_checkpoint(&common.out.join("student.ckpt"), &student)?;
    write_json(&common.out.join("teacher_metrics.json"), &exp.teacher_report)?;
    write_json(&common.out.join("student_metrics.json"), &report)?;

    let hist = probability_histograms(&exp.teacher, &student, &exp.val, cfg.distill.tau_f, 64)?;
    write_json(&common.out.join("histograms.json"), &hist)?;
    Ok(())
}

fn emit_sweep(out: &Path, prefix: &str, seeds: &[u64], result: &SweepResult) -> Result<()> {
    let runs = fs::File::create(out.join(format!("{prefix}_runs.csv")))?;
    write_sweep_csv(runs, &result.rows)?;
    let summary = fs::File::create(out.join(format!("{prefix}_summary.csv")))?;
    write_summary_csv(summary, &result.summary)?;
    let names: Vec<String> = result.summary.iter().map(|s| s.mode.clone()).collect();
    let deltas = fs::File::create(out.join(format!("{prefix}_deltas.csv")))?;
    write_delta_csv(deltas, &result.rows, seeds, &names)?;
    for s in &result.summary {
        println!(
            "{prefix:6} {:12} mean {:.4}  sigma {:.4}  (n = {})",
            s.mode, s.mean, s.std_dev, s.n
        );
    }
    Ok(())
}

fn cmd_sweep(common: &CommonArgs, cfg: &TrainConfig, modes: Option<&[String]>) -> Result<()> {
    let seeds = seeds_or_default(common);

    // mode comparison (paired-seed delta table)
    let modes: Vec<LossMode> = match modes {
        Some(names) => names
            .iter()
            .map(|n| LossMode::from_str(n))
            .collect::<bdd_core::Result<_>>()?,
        None => vec![LossMode::Ce, LossMode::Kd, LossMode::Bdd],
    };
    let result = run_seed_sweep(cfg, &seeds, &modes)?;
    emit_sweep(&common.out, "modes", &seeds, &result)?;
    write_json(&common.out.join("sweep_reports.json"), &result.reports)?;

    // reverse-weight ablation with its plain-KD reference
    let alpha = run_variant_sweep(cfg, &seeds, &alpha_ablation_variants(cfg))?;
    emit_sweep(&common.out, "alpha", &seeds, &alpha)?;

    // temperature-split ablation plus the accumulated variant
    let tau = run_variant_sweep(cfg, &seeds, &tau_ablation_variants(cfg))?;
    emit_sweep(&common.out, "tau", &seeds, &tau)?;
    Ok(())
}

fn cmd_gen_data(common: &CommonArgs, cfg: &TrainConfig) -> Result<()> {
    if cfg.mode.is_segmentation() {
        let ds = gen_segmentation_grids(&cfg.seg_dataset)?;
        println!(
            "generated {} grids of {}x{} with {} classes (not dumped; binary dump covers classification only)",
            ds.n, ds.height, ds.width, ds.class_count
        );
        return Ok(());
    }
    let ds = gen_gaussian_mixture(&cfg.dataset)?;
    let path = common.out.join("dataset.bin");
    save_classification(&path, &ds)?;
    println!(
        "generated {} samples ({} classes, dim {}) -> {}",
        ds.n,
        ds.class_count,
        ds.dim,
        path.display()
    );
    Ok(())
}

fn cmd_eval(cfg: &TrainConfig, checkpoint: &Path) -> Result<()> {
    let params = load_checkpoint(checkpoint)?;
    let ds = gen_gaussian_mixture(&cfg.dataset)?;
    let (_, val) = train_val_split(&ds, cfg.train_fraction, cfg.dataset.seed)?;
    if params.input_dim() != val.dim || params.class_count() != val.class_count {
        bail!(
            "checkpoint geometry {}x{} does not match dataset {}x{}",
            params.input_dim(),
            params.class_count(),
            val.dim,
            val.class_count
        );
    }
    let top1 = evaluate_top1(&params, &val)?;
    println!("val top-1: {top1:.4} ({} samples)", val.n);
    Ok(())
}
