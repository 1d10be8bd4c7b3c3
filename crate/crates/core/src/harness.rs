//! Training harness: teacher pretraining, student distillation under any
//! configured loss, evaluation, and paired multi-seed sweeps.
//!
//! Pairing guarantee: within one sweep, every (seed, mode) run sees the
//! same dataset, the same split (a dataset property) and the same student
//! initialization for that seed; the mode only changes the loss.

use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    gen_gaussian_mixture, gen_segmentation_grids, seg_train_val_split, train_val_split,
    ClassificationDataset, MixtureSpec, SegGridSpec, SegmentationGridDataset,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{
    bdd_loss_accumulated, cross_entropy, overall_loss, DistillConfig, LogitBatch,
};
use crate::metrics::{evaluate_miou, evaluate_top1};
use crate::model::{forward_grid_logits, forward_logits, init_params, MlpSpec, ModelParams};
use crate::optim::SgdMomentum;
use crate::tensor::Tensor;

/// Training objective for the student (Ce is also used for teachers).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Ce,
    Kd,
    Bdd,
    BddAccum,
    BddSeg,
}

impl LossMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossMode::Ce => "ce",
            LossMode::Kd => "kd",
            LossMode::Bdd => "bdd",
            LossMode::BddAccum => "bdd_accum",
            LossMode::BddSeg => "bdd_seg",
        }
    }

    pub fn is_segmentation(&self) -> bool {
        matches!(self, LossMode::BddSeg)
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<LossMode> {
        match s {
            "ce" => Ok(LossMode::Ce),
            "kd" => Ok(LossMode::Kd),
            "bdd" => Ok(LossMode::Bdd),
            "bdd_accum" => Ok(LossMode::BddAccum),
            "bdd_seg" => Ok(LossMode::BddSeg),
            other => Err(Error::Config(format!(
                "unknown loss mode `{other}` (expected ce|kd|bdd|bdd_accum|bdd_seg)"
            ))),
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Full experiment configuration; loadable from TOML.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Hidden widths; input and class widths come from the dataset.
    pub teacher_hidden: Vec<usize>,
    pub student_hidden: Vec<usize>,
    pub mode: LossMode,
    /// Temperature of the plain-KD baseline.
    pub kd_tau: f64,
    pub train_fraction: f64,
    pub distill: DistillConfig,
    pub dataset: MixtureSpec,
    pub seg_dataset: SegGridSpec,
    /// Epochs for teacher pretraining (sweeps train the teacher once).
    pub teacher_epochs: usize,
    pub teacher_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 64,
            lr: 0.02,
            momentum: 0.9,
            seed: 0,
            teacher_hidden: vec![64, 64],
            student_hidden: vec![6],
            mode: LossMode::Bdd,
            kd_tau: 4.0,
            train_fraction: 0.8,
            // the distillation-term weight is an experiment knob, not a
            // loss default; 4.0 is calibrated for the default mixture
            distill: DistillConfig {
                beta: 4.0,
                ..DistillConfig::default()
            },
            dataset: MixtureSpec::default(),
            seg_dataset: SegGridSpec::default(),
            teacher_epochs: 60,
            teacher_seed: 1_000_003,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.teacher_epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must be in (0, 1)".into()));
        }
        if !(self.kd_tau > 0.0) {
            return Err(Error::Config("kd_tau must be > 0".into()));
        }
        self.distill.validate()?;
        Ok(())
    }

    pub fn teacher_spec(&self, input_dim: usize, classes: usize) -> Result<MlpSpec> {
        let mut widths = vec![input_dim];
        widths.extend(&self.teacher_hidden);
        widths.push(classes);
        MlpSpec::new(widths, self.teacher_seed)
    }

    pub fn student_spec(&self, input_dim: usize, classes: usize) -> Result<MlpSpec> {
        let mut widths = vec![input_dim];
        widths.extend(&self.student_hidden);
        widths.push(classes);
        MlpSpec::new(widths, self.seed)
    }

    /// Effective distillation config for a mode: plain KD is the balanced
    /// loss with alpha = 0 at a single temperature.
    pub fn distill_for(&self, mode: LossMode) -> DistillConfig {
        match mode {
            LossMode::Kd => DistillConfig {
                alpha: 0.0,
                tau_f: self.kd_tau,
                tau_r: self.kd_tau,
                ..self.distill.clone()
            },
            _ => self.distill.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// top-1 accuracy, or mIoU for segmentation runs
    pub val_metric: f64,
}

/// Per-run result trace with config provenance.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub mode: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub final_train_loss: f64,
    pub final_metric: f64,
    /// Not covered by the determinism guarantee; zeroed in comparisons.
    pub wall_time_s: f64,
    pub config: TrainConfig,
}

impl MetricsReport {
    /// Copy with wall time removed, for bit-exact rerun comparison.
    pub fn normalized(&self) -> MetricsReport {
        MetricsReport {
            wall_time_s: 0.0,
            ..self.clone()
        }
    }
}

fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn check_finite(loss: f64, epoch: usize, step: usize) -> Result<f64> {
    if !loss.is_finite() {
        return Err(Error::Diverged(format!(
            "non-finite loss {loss} at epoch {epoch}, step {step}"
        )));
    }
    Ok(loss)
}

fn classification_loss(
    graph: &Graph,
    mode: LossMode,
    cfg: &TrainConfig,
    student_logits: &Tensor,
    teacher_logits: Option<&Tensor>,
    labels: &[usize],
) -> Result<Tensor> {
    match mode {
        LossMode::Ce => cross_entropy(graph, student_logits, labels),
        LossMode::Kd | LossMode::Bdd => {
            let teacher = teacher_logits
                .ok_or_else(|| Error::Config("distillation mode without a teacher".into()))?;
            let pair = LogitBatch::new(student_logits.clone(), teacher.clone())?;
            overall_loss(graph, &pair, labels, &cfg.distill_for(mode))
        }
        LossMode::BddAccum => {
            let teacher = teacher_logits
                .ok_or_else(|| Error::Config("distillation mode without a teacher".into()))?;
            let pair = LogitBatch::new(student_logits.clone(), teacher.clone())?;
            let dcfg = cfg.distill_for(mode);
            let ce = cross_entropy(graph, student_logits, labels)?;
            let acc = bdd_loss_accumulated(graph, &pair, &dcfg)?;
            graph.add(&ce, &graph.scale(&acc, dcfg.beta))
        }
        LossMode::BddSeg => Err(Error::Config(
            "bdd_seg is a segmentation mode; use the segmentation runner".into(),
        )),
    }
}

/// Mean cross-entropy of a model over a classification split.
fn val_ce_loss(params: &ModelParams, ds: &ClassificationDataset) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in (0..ds.n).collect::<Vec<_>>().chunks(256) {
        let graph = Graph::new();
        let (x, labels) = ds.batch(chunk);
        let logits = forward_logits(&graph, params, &x)?;
        let ce = cross_entropy(&graph, &logits, &labels)?;
        total += ce.item() * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count as f64)
}

fn run_classification(
    cfg: &TrainConfig,
    mode: LossMode,
    teacher: Option<&ModelParams>,
    train: &ClassificationDataset,
    val: &ClassificationDataset,
) -> Result<(ModelParams, MetricsReport)> {
    cfg.validate()?;
    let start = Instant::now();
    if let Some(t) = teacher {
        if !t.is_frozen() {
            return Err(Error::Contract("teacher must be frozen".into()));
        }
        if t.class_count() != train.class_count || t.input_dim() != train.dim {
            return Err(Error::Config(format!(
                "teacher geometry {}x{} does not match dataset {}x{}",
                t.input_dim(),
                t.class_count(),
                train.dim,
                train.class_count
            )));
        }
    }
    let spec = if mode == LossMode::Ce && teacher.is_none() && cfg.seed == cfg.teacher_seed {
        cfg.teacher_spec(train.dim, train.class_count)?
    } else {
        cfg.student_spec(train.dim, train.class_count)?
    };
    let params = init_params(&spec)?;
    let mut opt = SgdMomentum::new(cfg.lr, cfg.momentum)?;
    let mut rng = shuffle_rng(cfg.seed);
    let mut indices: Vec<usize> = (0..train.n).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut final_train_loss = f64::INFINITY;
    for epoch in 0..cfg.epochs {
        indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for batch in indices.chunks(cfg.batch_size) {
            let graph = Graph::new();
            let (x, labels) = train.batch(batch);
            let student_logits = forward_logits(&graph, &params, &x)?;
            let teacher_logits = match teacher {
                Some(t) => Some(forward_logits(&graph, t, &x)?),
                None => None,
            };
            let loss = classification_loss(
                &graph,
                mode,
                cfg,
                &student_logits,
                teacher_logits.as_ref(),
                labels.as_slice(),
            )?;
            epoch_loss += check_finite(loss.item(), epoch, steps)?;
            steps += 1;
            graph.backward(&loss)?;
            opt.step(&params.all_tensors())?;
        }
        final_train_loss = epoch_loss / steps as f64;
        records.push(EpochRecord {
            epoch,
            train_loss: final_train_loss,
            val_loss: val_ce_loss(&params, val)?,
            val_metric: evaluate_top1(&params, val)?,
        });
    }
    let final_metric = records.last().map(|r| r.val_metric).unwrap_or(0.0);
    let report = MetricsReport {
        mode: mode.as_str().to_string(),
        seed: cfg.seed,
        epochs: records,
        final_train_loss,
        final_metric,
        wall_time_s: start.elapsed().as_secs_f64(),
        config: cfg.clone(),
    };
    Ok((params, report))
}

/// Pretrain a teacher with cross-entropy; returned params are frozen.
pub fn train_teacher(
    cfg: &TrainConfig,
    train: &ClassificationDataset,
    val: &ClassificationDataset,
) -> Result<(ModelParams, MetricsReport)> {
    let mut tc = cfg.clone();
    tc.seed = cfg.teacher_seed;
    tc.epochs = cfg.teacher_epochs;
    let (params, report) = run_classification(&tc, LossMode::Ce, None, train, val)?;
    params.freeze();
    Ok((params, report))
}

/// Distill a student from a frozen teacher under the configured mode.
pub fn distill_student(
    cfg: &TrainConfig,
    teacher: &ModelParams,
    train: &ClassificationDataset,
    val: &ClassificationDataset,
) -> Result<(ModelParams, MetricsReport)> {
    if cfg.mode == LossMode::BddSeg {
        return Err(Error::Config(
            "use distill_student_seg for segmentation".into(),
        ));
    }
    run_classification(cfg, cfg.mode, Some(teacher), train, val)
}

/// CE-only student baseline (no teacher involved).
pub fn train_student_ce(
    cfg: &TrainConfig,
    train: &ClassificationDataset,
    val: &ClassificationDataset,
) -> Result<(ModelParams, MetricsReport)> {
    run_classification(cfg, LossMode::Ce, None, train, val)
}

fn run_segmentation(
    cfg: &TrainConfig,
    mode: LossMode,
    teacher: Option<&ModelParams>,
    train: &SegmentationGridDataset,
    val: &SegmentationGridDataset,
) -> Result<(ModelParams, MetricsReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let spec = if mode == LossMode::Ce && teacher.is_none() && cfg.seed == cfg.teacher_seed {
        cfg.teacher_spec(train.feature_dim, train.class_count)?
    } else {
        cfg.student_spec(train.feature_dim, train.class_count)?
    };
    let params = init_params(&spec)?;
    let mut opt = SgdMomentum::new(cfg.lr, cfg.momentum)?;
    let mut rng = shuffle_rng(cfg.seed);
    let mut indices: Vec<usize> = (0..train.n).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut final_train_loss = f64::INFINITY;
    let seg_cfg = cfg.distill.clone();
    for epoch in 0..cfg.epochs {
        indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for batch in indices.chunks(cfg.batch_size) {
            let graph = Graph::new();
            let (x, labels) = train.batch(batch);
            let student_logits = forward_grid_logits(&graph, &params, &x)?;
            let loss = match (mode, teacher) {
                (LossMode::Ce, _) | (_, None) => {
                    // per-pixel cross-entropy on flattened rows
                    let shape = student_logits.shape();
                    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let idx = crate::losses::bchw_to_rows_indices(b, c, h, w);
                    let rows = graph.select(&student_logits, &idx, &[b * h * w, c])?;
                    cross_entropy(&graph, &rows, &labels)?
                }
                (_, Some(t)) => {
                    let teacher_logits = forward_grid_logits(&graph, t, &x)?;
                    let pair = LogitBatch::new(student_logits.clone(), teacher_logits)?;
                    overall_loss(&graph, &pair, &labels, &seg_cfg)?
                }
            };
            epoch_loss += check_finite(loss.item(), epoch, steps)?;
            steps += 1;
            graph.backward(&loss)?;
            opt.step(&params.all_tensors())?;
        }
        final_train_loss = epoch_loss / steps as f64;
        records.push(EpochRecord {
            epoch,
            train_loss: final_train_loss,
            val_loss: f64::NAN,
            val_metric: evaluate_miou(&params, val)?,
        });
    }
    let final_metric = records.last().map(|r| r.val_metric).unwrap_or(0.0);
    let report = MetricsReport {
        mode: mode.as_str().to_string(),
        seed: cfg.seed,
        epochs: records,
        final_train_loss,
        final_metric,
        wall_time_s: start.elapsed().as_secs_f64(),
        config: cfg.clone(),
    };
    Ok((params, report))
}

/// Pretrain a per-pixel teacher on segmentation grids; frozen on return.
pub fn train_teacher_seg(
    cfg: &TrainConfig,
    train: &SegmentationGridDataset,
    val: &SegmentationGridDataset,
) -> Result<(ModelParams, MetricsReport)> {
    let mut tc = cfg.clone();
    tc.seed = cfg.teacher_seed;
    tc.epochs = cfg.teacher_epochs;
    let (params, report) = run_segmentation(&tc, LossMode::Ce, None, train, val)?;
    params.freeze();
    Ok((params, report))
}

/// Distill a segmentation student with the channel-wise loss.
pub fn distill_student_seg(
    cfg: &TrainConfig,
    teacher: &ModelParams,
    train: &SegmentationGridDataset,
    val: &SegmentationGridDataset,
) -> Result<(ModelParams, MetricsReport)> {
    if !teacher.is_frozen() {
        return Err(Error::Contract("teacher must be frozen".into()));
    }
    run_segmentation(cfg, LossMode::BddSeg, Some(teacher), train, val)
}

/// One sweep entry: a (seed, mode) run plus the hyperparameters it used.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SweepRow {
    pub seed: u64,
    pub mode: String,
    pub alpha: f64,
    pub tau_f: f64,
    pub tau_r: f64,
    pub beta: f64,
    pub final_metric: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SweepSummaryRow {
    pub mode: String,
    pub mean: f64,
    pub std_dev: f64,
    pub n: usize,
}

/// Sweep output: per-run rows in canonical (seed-major, mode order)
/// order, per-mode mean/σ, and per-seed deltas against the first mode.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummaryRow>,
    pub reports: Vec<MetricsReport>,
    /// Final validation metric of the shared teacher.
    pub teacher_metric: f64,
}

impl SweepResult {
    pub fn mean_for(&self, mode: &str) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.mode == mode)
            .map(|s| s.mean)
    }
}

/// One configuration under comparison in a sweep: a loss mode plus
/// optional hyperparameter overrides, under a stable row label.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub mode: LossMode,
    pub distill: Option<DistillConfig>,
    pub kd_tau: Option<f64>,
}

impl Variant {
    pub fn of_mode(mode: LossMode) -> Variant {
        Variant {
            name: mode.as_str().to_string(),
            mode,
            distill: None,
            kd_tau: None,
        }
    }

    fn apply(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.mode = self.mode;
        if let Some(d) = &self.distill {
            cfg.distill = d.clone();
        }
        if let Some(t) = self.kd_tau {
            cfg.kd_tau = t;
        }
        cfg
    }
}

/// Reverse-weight ablation: alpha over {0, 1, 2, 4, 8}, plus a plain-KD
/// reference at the forward temperature. The alpha = 0 run must match
/// that reference, which exercises a structurally different code path.
pub fn alpha_ablation_variants(base: &TrainConfig) -> Vec<Variant> {
    let mut variants: Vec<Variant> = [0.0, 1.0, 2.0, 4.0, 8.0]
        .iter()
        .map(|&alpha| Variant {
            name: format!("alpha_{alpha}"),
            mode: LossMode::Bdd,
            distill: Some(DistillConfig {
                alpha,
                ..base.distill.clone()
            }),
            kd_tau: None,
        })
        .collect();
    variants.push(Variant {
        name: "kd_baseline".to_string(),
        mode: LossMode::Kd,
        distill: None,
        kd_tau: Some(base.distill.tau_f),
    });
    variants
}

/// Temperature ablation: the three (tau_f, tau_r) splits plus the
/// accumulated variant that averages over the whole temperature set.
pub fn tau_ablation_variants(base: &TrainConfig) -> Vec<Variant> {
    let mut variants: Vec<Variant> = [(2.0, 8.0), (4.0, 4.0), (8.0, 2.0)]
        .iter()
        .map(|&(tau_f, tau_r)| Variant {
            name: format!("tau_{tau_f}_{tau_r}"),
            mode: LossMode::Bdd,
            distill: Some(DistillConfig {
                tau_f,
                tau_r,
                ..base.distill.clone()
            }),
            kd_tau: None,
        })
        .collect();
    variants.push(Variant {
        name: "accumulate".to_string(),
        mode: LossMode::BddAccum,
        distill: None,
        kd_tau: None,
    });
    variants
}

/// Run every (seed, variant) pair against one shared dataset, split and
/// teacher. Runs may execute in parallel; output order is canonical
/// (seed-major, variant order) regardless of scheduling.
pub fn run_variant_sweep(
    base: &TrainConfig,
    seeds: &[u64],
    variants: &[Variant],
) -> Result<SweepResult> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::Config("seeds and variants must be nonempty".into()));
    }
    base.validate()?;
    if variants.iter().any(|v| v.mode.is_segmentation()) {
        return Err(Error::Config(
            "segmentation modes are not part of classification sweeps".into(),
        ));
    }
    let ds = gen_gaussian_mixture(&base.dataset)?;
    let (train, val) = train_val_split(&ds, base.train_fraction, base.dataset.seed)?;
    let (teacher_store, teacher_metric) = {
        let (teacher, report) = train_teacher(base, &train, &val)?;
        (teacher.to_store(), report.final_metric)
    };

    let jobs: Vec<(u64, &Variant)> = seeds
        .iter()
        .flat_map(|&s| variants.iter().map(move |v| (s, v)))
        .collect();
    let results: Vec<Result<MetricsReport>> = jobs
        .par_iter()
        .map(|&(seed, variant)| {
            let cfg = variant.apply(base, seed);
            let report = match variant.mode {
                LossMode::Ce => train_student_ce(&cfg, &train, &val)?.1,
                _ => {
                    let teacher = ModelParams::from_store(&teacher_store)?;
                    teacher.freeze();
                    distill_student(&cfg, &teacher, &train, &val)?.1
                }
            };
            Ok(report)
        })
        .collect();

    let mut reports = Vec::with_capacity(results.len());
    for r in results {
        reports.push(r?);
    }
    let rows: Vec<SweepRow> = jobs
        .iter()
        .zip(&reports)
        .map(|(&(seed, variant), rep)| {
            let cfg = variant.apply(base, seed);
            let d = cfg.distill_for(variant.mode);
            SweepRow {
                seed,
                mode: variant.name.clone(),
                alpha: if variant.mode == LossMode::Ce { 0.0 } else { d.alpha },
                tau_f: d.tau_f,
                tau_r: d.tau_r,
                beta: if variant.mode == LossMode::Ce { 0.0 } else { d.beta },
                final_metric: rep.final_metric,
                wall_time_s: rep.wall_time_s,
            }
        })
        .collect();
    let names: Vec<String> = variants.iter().map(|v| v.name.clone()).collect();
    let summary = summarize(&rows, &names);
    Ok(SweepResult {
        rows,
        summary,
        reports,
        teacher_metric,
    })
}

/// Mode-comparison sweep: one variant per loss mode, default settings.
pub fn run_seed_sweep(
    base: &TrainConfig,
    seeds: &[u64],
    modes: &[LossMode],
) -> Result<SweepResult> {
    let variants: Vec<Variant> = modes.iter().map(|&m| Variant::of_mode(m)).collect();
    run_variant_sweep(base, seeds, &variants)
}

fn summarize(rows: &[SweepRow], names: &[String]) -> Vec<SweepSummaryRow> {
    names
        .iter()
        .map(|name| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| &r.mode == name)
                .map(|r| r.final_metric)
                .collect();
            let n = vals.len();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            SweepSummaryRow {
                mode: name.clone(),
                mean,
                std_dev: var.sqrt(),
                n,
            }
        })
        .collect()
}

/// Fixed-order CSV of per-run sweep rows.
pub fn write_sweep_csv<W: std::io::Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "seed",
        "mode",
        "alpha",
        "tau_f",
        "tau_r",
        "beta",
        "final_top1_or_miou",
        "wall_time_s",
    ])
    .map_err(csv_err)?;
    for r in rows {
        out.write_record([
            r.seed.to_string(),
            r.mode.clone(),
            fmt_f64(r.alpha),
            fmt_f64(r.tau_f),
            fmt_f64(r.tau_r),
            fmt_f64(r.beta),
            fmt_f64(r.final_metric),
            fmt_f64(r.wall_time_s),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Mean ± σ per mode.
pub fn write_summary_csv<W: std::io::Write>(w: W, summary: &[SweepSummaryRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["mode", "mean", "std_dev", "n"]).map_err(csv_err)?;
    for s in summary {
        out.write_record([
            s.mode.clone(),
            fmt_f64(s.mean),
            fmt_f64(s.std_dev),
            s.n.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Per-seed paired delta table: one metric column per variant plus
/// deltas against the first variant.
pub fn write_delta_csv<W: std::io::Write>(
    w: W,
    rows: &[SweepRow],
    seeds: &[u64],
    names: &[String],
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["seed".to_string()];
    header.extend(names.iter().cloned());
    header.extend(
        names
            .iter()
            .skip(1)
            .map(|n| format!("delta_{}_{}", n, names[0])),
    );
    out.write_record(&header).map_err(csv_err)?;
    for &seed in seeds {
        let metric = |name: &str| -> f64 {
            rows.iter()
                .find(|r| r.seed == seed && r.mode == name)
                .map(|r| r.final_metric)
                .unwrap_or(f64::NAN)
        };
        let mut rec = vec![seed.to_string()];
        rec.extend(names.iter().map(|n| fmt_f64(metric(n))));
        rec.extend(
            names
                .iter()
                .skip(1)
                .map(|n| fmt_f64(metric(n) - metric(&names[0]))),
        );
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

fn fmt_f64(v: f64) -> String {
    // shortest round-trip representation keeps reruns bit-identical
    format!("{v}")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv write failed: {e}"))
}

/// Convenience: dataset + split + pretrained teacher for one config.
pub struct ClassificationExperiment {
    pub train: ClassificationDataset,
    pub val: ClassificationDataset,
    pub teacher: ModelParams,
    pub teacher_report: MetricsReport,
}

pub fn prepare_classification(cfg: &TrainConfig) -> Result<ClassificationExperiment> {
    let ds = gen_gaussian_mixture(&cfg.dataset)?;
    let (train, val) = train_val_split(&ds, cfg.train_fraction, cfg.dataset.seed)?;
    let (teacher, teacher_report) = train_teacher(cfg, &train, &val)?;
    Ok(ClassificationExperiment {
        train,
        val,
        teacher,
        teacher_report,
    })
}

/// Convenience: segmentation dataset + split + pretrained teacher.
pub struct SegmentationExperiment {
    pub train: SegmentationGridDataset,
    pub val: SegmentationGridDataset,
    pub teacher: ModelParams,
    pub teacher_report: MetricsReport,
}

pub fn prepare_segmentation(cfg: &TrainConfig) -> Result<SegmentationExperiment> {
    let ds = gen_segmentation_grids(&cfg.seg_dataset)?;
    let (train, val) = seg_train_val_split(&ds, cfg.train_fraction, cfg.seg_dataset.seed)?;
    let (teacher, teacher_report) = train_teacher_seg(cfg, &train, &val)?;
    Ok(SegmentationExperiment {
        train,
        val,
        teacher,
        teacher_report,
    })
}
