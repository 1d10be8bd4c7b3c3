//! Distillation losses: cross-entropy, forward/reverse KL at separate
//! temperatures, their balanced combination, a temperature-accumulated
//! variant, and the channel-wise form for dense prediction.
//!
//! Convention: per-sample class SUM for the divergences, MEAN over the
//! batch (and over channels in the dense-prediction form). Probabilities
//! are clamped to `epsilon` inside logarithms only; the multiplicative
//! weights stay unclamped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

/// Paired student/teacher raw logits. Shapes must match; the teacher is a
/// constant and never receives gradient.
pub struct LogitBatch {
    pub student: Tensor,
    pub teacher: Tensor,
}

impl LogitBatch {
    pub fn new(student: Tensor, teacher: Tensor) -> Result<LogitBatch> {
        if student.shape() != teacher.shape() {
            return Err(Error::ShapeMismatch {
                op: "logit_batch",
                lhs: student.shape(),
                rhs: teacher.shape(),
            });
        }
        if teacher.requires_grad() {
            return Err(Error::Contract(
                "teacher logits must not require gradients".into(),
            ));
        }
        Ok(LogitBatch { student, teacher })
    }
}

/// Hyperparameters for the balanced divergence family.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DistillConfig {
    /// Weight on the reverse-KL term.
    pub alpha: f64,
    /// Weight on the whole distillation term in the overall loss.
    pub beta: f64,
    /// Temperature for the forward divergence.
    pub tau_f: f64,
    /// Temperature for the reverse divergence.
    pub tau_r: f64,
    /// Temperatures averaged over by the accumulated variant.
    pub tau_set: Vec<f64>,
    /// Probability floor applied inside logs.
    pub epsilon: f64,
    /// Divide the per-sample class sum by the class count.
    pub normalize_by_classes: bool,
    /// Multiply each divergence by its temperature squared.
    pub tau_square_rescale: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 4.0,
            beta: 1.0,
            tau_f: 2.0,
            tau_r: 8.0,
            tau_set: vec![1.0, 2.0, 4.0, 8.0],
            epsilon: 1e-12,
            normalize_by_classes: false,
            tau_square_rescale: false,
        }
    }
}

impl DistillConfig {
    /// Dense-prediction defaults: heavier distillation weight, channel
    /// normalization baked into the channel-wise loss.
    pub fn segmentation_default() -> Self {
        DistillConfig {
            beta: 3.0,
            normalize_by_classes: true,
            ..DistillConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::invalid("alpha", "must be >= 0"));
        }
        if self.beta < 0.0 {
            return Err(Error::invalid("beta", "must be >= 0"));
        }
        if !(self.tau_f > 0.0) || !(self.tau_r > 0.0) {
            return Err(Error::invalid("tau", "temperatures must be > 0"));
        }
        if self.tau_set.is_empty() {
            return Err(Error::invalid("tau_set", "must be nonempty"));
        }
        if self.tau_set.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::invalid("tau_set", "all entries must be > 0"));
        }
        if !(self.epsilon > 0.0) || self.epsilon > 1e-6 {
            return Err(Error::invalid("epsilon", "must be in (0, 1e-6]"));
        }
        Ok(())
    }
}

/// Σ over all entries of p_ref·(log p_ref − log p_other) divided by the
/// number of lanes (leading dims). Gradient flows through whichever side
/// requires it.
fn kl_mean(
    graph: &Graph,
    ref_logits: &Tensor,
    other_logits: &Tensor,
    tau: f64,
    eps: f64,
) -> Result<Tensor> {
    let shape = ref_logits.shape();
    if shape != other_logits.shape() {
        return Err(Error::ShapeMismatch {
            op: "kl",
            lhs: shape,
            rhs: other_logits.shape(),
        });
    }
    let axis = shape.len() - 1;
    let rows: usize = shape[..axis].iter().product();
    let p_ref = graph.softmax_tau(ref_logits, tau, axis)?;
    let p_other = graph.softmax_tau(other_logits, tau, axis)?;
    let log_ref = graph.ln_clamped(&p_ref, eps);
    let log_other = graph.ln_clamped(&p_other, eps);
    let diff = graph.sub(&log_ref, &log_other)?;
    let term = graph.mul(&p_ref, &diff)?;
    let total = graph.sum_all(&term);
    Ok(graph.scale(&total, 1.0 / rows as f64))
}

/// KL(teacher ‖ student) at temperature `tau`, mean over the batch.
pub fn forward_kl(graph: &Graph, pair: &LogitBatch, tau: f64, eps: f64) -> Result<Tensor> {
    kl_mean(graph, &pair.teacher, &pair.student, tau, eps)
}

/// KL(student ‖ teacher) at temperature `tau`, mean over the batch.
/// Gradient reaches the student through both the weight and the log.
pub fn reverse_kl(graph: &Graph, pair: &LogitBatch, tau: f64, eps: f64) -> Result<Tensor> {
    kl_mean(graph, &pair.student, &pair.teacher, tau, eps)
}

fn term_weights(cfg: &DistillConfig, classes: usize) -> (f64, f64) {
    let norm = if cfg.normalize_by_classes {
        1.0 / classes as f64
    } else {
        1.0
    };
    let wf = norm * if cfg.tau_square_rescale { cfg.tau_f * cfg.tau_f } else { 1.0 };
    let wr = cfg.alpha * norm * if cfg.tau_square_rescale { cfg.tau_r * cfg.tau_r } else { 1.0 };
    (wf, wr)
}

/// Forward KL at τ_f plus α times reverse KL at τ_r.
pub fn bdd_loss(graph: &Graph, pair: &LogitBatch, cfg: &DistillConfig) -> Result<Tensor> {
    cfg.validate()?;
    let classes = *pair.student.shape().last().unwrap();
    let fwd = forward_kl(graph, pair, cfg.tau_f, cfg.epsilon)?;
    let rev = reverse_kl(graph, pair, cfg.tau_r, cfg.epsilon)?;
    let (wf, wr) = term_weights(cfg, classes);
    graph.add(&graph.scale(&fwd, wf), &graph.scale(&rev, wr))
}

/// Uniform average over `tau_set` of the forward term plus α times the
/// uniform average of the reverse term.
pub fn bdd_loss_accumulated(graph: &Graph, pair: &LogitBatch, cfg: &DistillConfig) -> Result<Tensor> {
    cfg.validate()?;
    let classes = *pair.student.shape().last().unwrap();
    let norm = if cfg.normalize_by_classes {
        1.0 / classes as f64
    } else {
        1.0
    };
    let n = cfg.tau_set.len() as f64;
    let mut acc: Option<Tensor> = None;
    for &tau in &cfg.tau_set {
        let rescale = if cfg.tau_square_rescale { tau * tau } else { 1.0 };
        let fwd = forward_kl(graph, pair, tau, cfg.epsilon)?;
        let rev = reverse_kl(graph, pair, tau, cfg.epsilon)?;
        let term = graph.add(
            &graph.scale(&fwd, norm * rescale / n),
            &graph.scale(&rev, cfg.alpha * norm * rescale / n),
        )?;
        acc = Some(match acc {
            None => term,
            Some(prev) => graph.add(&prev, &term)?,
        });
    }
    Ok(acc.unwrap())
}

/// Channel-wise balanced divergence for `[B,C,H,W]` logits: softmax over
/// flattened spatial positions per channel, averaged over channels and
/// batch.
pub fn bdd_seg_loss(graph: &Graph, pair: &LogitBatch, cfg: &DistillConfig) -> Result<Tensor> {
    cfg.validate()?;
    let shape = pair.student.shape();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "bdd_seg",
            lhs: shape,
            rhs: vec![0, 0, 0, 0],
        });
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let flat = [b * c, h * w];
    let student = graph.reshape(&pair.student, &flat)?;
    let teacher = graph.reshape(&pair.teacher, &flat)?;
    // kl_mean's 1/rows is the mean over batch and channels (Eq-style 1/C
    // normalization); normalize_by_classes is already accounted for here.
    let fwd = kl_mean(graph, &teacher, &student, cfg.tau_f, cfg.epsilon)?;
    let rev = kl_mean(graph, &student, &teacher, cfg.tau_r, cfg.epsilon)?;
    let wf = if cfg.tau_square_rescale { cfg.tau_f * cfg.tau_f } else { 1.0 };
    let wr = cfg.alpha * if cfg.tau_square_rescale { cfg.tau_r * cfg.tau_r } else { 1.0 };
    graph.add(&graph.scale(&fwd, wf), &graph.scale(&rev, wr))
}

/// Mean −log softmax(logits)[label] over the batch, in log-sum-exp form.
pub fn cross_entropy(graph: &Graph, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let logp = graph.log_softmax_tau(logits, 1.0, logits.ndim() - 1)?;
    graph.nll(&logp, labels)
}

/// Index map turning `[B,C,H,W]` storage into `[B·H·W, C]` rows.
pub fn bchw_to_rows_indices(b: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    let hw = h * w;
    let mut idx = Vec::with_capacity(b * c * hw);
    for bi in 0..b {
        for s in 0..hw {
            for ci in 0..c {
                idx.push((bi * c + ci) * hw + s);
            }
        }
    }
    idx
}

/// Cross-entropy plus β times the balanced divergence; 4-D logits use the
/// channel-wise form with per-pixel cross-entropy.
pub fn overall_loss(
    graph: &Graph,
    pair: &LogitBatch,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let shape = pair.student.shape();
    let (ce, distill) = match shape.len() {
        2 => {
            let ce = cross_entropy(graph, &pair.student, labels)?;
            let d = bdd_loss(graph, pair, cfg)?;
            (ce, d)
        }
        4 => {
            let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let idx = bchw_to_rows_indices(b, c, h, w);
            let rows = graph.select(&pair.student, &idx, &[b * h * w, c])?;
            let ce = cross_entropy(graph, &rows, labels)?;
            let d = bdd_seg_loss(graph, pair, cfg)?;
            (ce, d)
        }
        _ => {
            return Err(Error::Contract(format!(
                "overall_loss expects 2-D or 4-D logits, got {shape:?}"
            )))
        }
    };
    graph.add(&ce, &graph.scale(&distill, cfg.beta))
}

/// Stable softmax of a logit slice at temperature `tau`.
pub fn softmax_slice(z: &[f64], tau: f64) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// Per-class gradient contributions of the two divergences with respect to
/// that class's student logit: the class-c term of the forward divergence
/// contributes p_T(c)·(1 − p_S(c))/τ in magnitude, which vanishes with the
/// teacher probability, while the reverse-side term keeps a log(p_S/p_T)
/// factor alive. Used by the zero-avoiding diagnostics.
pub fn zero_avoiding_gradients(
    teacher_logits: &[f64],
    student_logits: &[f64],
    tau: f64,
    eps: f64,
    class: usize,
) -> (f64, f64) {
    assert_eq!(teacher_logits.len(), student_logits.len());
    assert!(class < teacher_logits.len());
    let pt = softmax_slice(teacher_logits, tau);
    let ps = softmax_slice(student_logits, tau);
    let fwd = pt[class] * (1.0 - ps[class]) / tau;
    let log_ratio = ps[class].max(eps).ln() - pt[class].max(eps).ln();
    let rev = ps[class] * (1.0 - ps[class]) * (log_ratio + 1.0) / tau;
    (fwd.abs(), rev.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    /// Direct-summation KL oracle, independent of the graph path.
    fn kl_oracle(ref_logits: &[f64], other_logits: &[f64], tau: f64) -> f64 {
        let p = softmax_slice(ref_logits, tau);
        let q = softmax_slice(other_logits, tau);
        p.iter()
            .zip(&q)
            .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
            .sum()
    }

    fn pair(student: Vec<f64>, teacher: Vec<f64>) -> LogitBatch {
        let n = student.len();
        LogitBatch::new(
            Tensor::param(&[1, n], student).unwrap(),
            Tensor::from_vec(&[1, n], teacher).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn forward_kl_zero_on_identical_logits() {
        let g = Graph::new();
        let p = pair(vec![1.0, 1.0], vec![1.0, 1.0]);
        assert!(forward_kl(&g, &p, 1.0, 1e-12).unwrap().item().abs() < 1e-15);
        assert!(reverse_kl(&g, &p, 1.0, 1e-12).unwrap().item().abs() < 1e-15);
    }

    #[test]
    fn forward_kl_matches_direct_summation() {
        let g = Graph::new();
        let p = pair(vec![0.0, 0.0], vec![2.0, 0.0]);
        let got = forward_kl(&g, &p, 1.0, 1e-12).unwrap().item();
        assert_abs_diff_eq!(got, kl_oracle(&[2.0, 0.0], &[0.0, 0.0], 1.0), epsilon = 1e-12);
        assert_relative_eq!(got, 0.327_813_325_472_737_6, max_relative = 1e-12);

        let got2 = forward_kl(&g, &p, 2.0, 1e-12).unwrap().item();
        assert_abs_diff_eq!(got2, kl_oracle(&[2.0, 0.0], &[0.0, 0.0], 2.0), epsilon = 1e-12);
        assert_relative_eq!(got2, 0.110_944_071_671_727_37, max_relative = 1e-12);
        // higher temperature flattens both distributions
        assert!(got2 < got);
    }

    #[test]
    fn reverse_kl_matches_direct_summation_and_is_asymmetric() {
        let g = Graph::new();
        let p = pair(vec![0.0, 0.0], vec![2.0, 0.0]);
        let rev = reverse_kl(&g, &p, 1.0, 1e-12).unwrap().item();
        let fwd = forward_kl(&g, &p, 1.0, 1e-12).unwrap().item();
        assert_abs_diff_eq!(rev, kl_oracle(&[0.0, 0.0], &[2.0, 0.0], 1.0), epsilon = 1e-12);
        assert_relative_eq!(rev, 0.433_780_830_483_027_3, max_relative = 1e-12);
        assert!((fwd - rev).abs() > 0.1, "asymmetry witness");
    }

    #[test]
    fn reverse_kl_mirrors_forward_under_role_swap() {
        let g = Graph::new();
        let p = pair(vec![2.0, 0.0], vec![0.0, 0.0]);
        let rev = reverse_kl(&g, &p, 1.0, 1e-12).unwrap().item();
        assert_relative_eq!(rev, 0.327_813_325_472_737_6, max_relative = 1e-12);
    }

    #[test]
    fn bdd_is_exact_composition_of_separate_calls() {
        let g = Graph::new();
        let p = pair(vec![0.0, 0.0], vec![2.0, 0.0]);
        let cfg = DistillConfig {
            alpha: 1.0,
            tau_f: 1.0,
            tau_r: 1.0,
            ..DistillConfig::default()
        };
        let loss = bdd_loss(&g, &p, &cfg).unwrap().item();
        let fwd = forward_kl(&g, &p, 1.0, cfg.epsilon).unwrap().item();
        let rev = reverse_kl(&g, &p, 1.0, cfg.epsilon).unwrap().item();
        assert_eq!(loss, fwd + rev, "exact in double precision");
        assert_relative_eq!(loss, 0.761_594_155_955_764_9, max_relative = 1e-12);

        let cfg4 = DistillConfig { alpha: 4.0, ..cfg };
        let loss4 = bdd_loss(&g, &p, &cfg4).unwrap().item();
        assert_eq!(loss4, fwd + 4.0 * rev);
    }

    #[test]
    fn bdd_zero_on_identical_logits() {
        let g = Graph::new();
        let p = pair(vec![0.3, -1.0, 2.0], vec![0.3, -1.0, 2.0]);
        let loss = bdd_loss(&g, &p, &DistillConfig::default()).unwrap().item();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn accumulated_degenerates_to_single_temperature() {
        let g = Graph::new();
        let p = pair(vec![0.5, -0.5, 0.0], vec![2.0, 0.0, -1.0]);
        let cfg = DistillConfig {
            tau_set: vec![3.0],
            tau_f: 3.0,
            tau_r: 3.0,
            ..DistillConfig::default()
        };
        let acc = bdd_loss_accumulated(&g, &p, &cfg).unwrap().item();
        let single = bdd_loss(&g, &p, &cfg).unwrap().item();
        assert_abs_diff_eq!(acc, single, epsilon = 1e-15);
    }

    #[test]
    fn accumulated_is_mean_over_tau_set() {
        let g = Graph::new();
        let p = pair(vec![0.0, 0.0], vec![2.0, 0.0]);
        let cfg = DistillConfig {
            alpha: 0.0,
            tau_set: vec![1.0, 2.0],
            ..DistillConfig::default()
        };
        let acc = bdd_loss_accumulated(&g, &p, &cfg).unwrap().item();
        assert_relative_eq!(acc, 0.219_378_698_572_232_5, max_relative = 1e-10);
    }

    #[test]
    fn accumulated_rejects_empty_tau_set() {
        let g = Graph::new();
        let p = pair(vec![0.0, 0.0], vec![2.0, 0.0]);
        let cfg = DistillConfig {
            tau_set: vec![],
            ..DistillConfig::default()
        };
        assert!(bdd_loss_accumulated(&g, &p, &cfg).is_err());
    }

    #[test]
    fn seg_loss_single_channel_reduces_to_two_class_bdd() {
        let g = Graph::new();
        let p = LogitBatch::new(
            Tensor::param(&[1, 1, 1, 2], vec![0.0, 0.0]).unwrap(),
            Tensor::from_vec(&[1, 1, 1, 2], vec![2.0, 0.0]).unwrap(),
        )
        .unwrap();
        let cfg = DistillConfig {
            alpha: 1.0,
            tau_f: 1.0,
            tau_r: 1.0,
            ..DistillConfig::default()
        };
        let loss = bdd_seg_loss(&g, &p, &cfg).unwrap().item();
        assert_relative_eq!(loss, 0.761_594_155_955_764_9, max_relative = 1e-12);
    }

    #[test]
    fn seg_loss_zero_on_identical_grids() {
        let g = Graph::new();
        let vals: Vec<f64> = (0..2 * 3 * 2 * 2).map(|i| (i as f64) * 0.17 - 1.0).collect();
        let p = LogitBatch::new(
            Tensor::param(&[2, 3, 2, 2], vals.clone()).unwrap(),
            Tensor::from_vec(&[2, 3, 2, 2], vals).unwrap(),
        )
        .unwrap();
        let loss = bdd_seg_loss(&g, &p, &DistillConfig::default()).unwrap().item();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn seg_loss_rejects_non_4d() {
        let g = Graph::new();
        let p = pair(vec![0.0, 0.0], vec![2.0, 0.0]);
        assert!(bdd_seg_loss(&g, &p, &DistillConfig::default()).is_err());
    }

    #[test]
    fn cross_entropy_uniform_and_shifted() {
        let g = Graph::new();
        let logits = Tensor::param(&[1, 2], vec![0.0, 0.0]).unwrap();
        let ce = cross_entropy(&g, &logits, &[0]).unwrap().item();
        assert_relative_eq!(ce, std::f64::consts::LN_2, max_relative = 1e-12);

        let logits = Tensor::param(&[1, 2], vec![2.0, 0.0]).unwrap();
        let ce0 = cross_entropy(&g, &logits, &[0]).unwrap().item();
        let ce1 = cross_entropy(&g, &logits, &[1]).unwrap().item();
        assert_relative_eq!(ce0, 0.126_928_011_042_972_52, max_relative = 1e-12);
        assert_relative_eq!(ce1, 2.126_928_011_042_972_7, max_relative = 1e-12);
    }

    #[test]
    fn overall_loss_beta_zero_is_cross_entropy() {
        let g = Graph::new();
        let p = pair(vec![0.0, 0.0], vec![2.0, 0.0]);
        let cfg = DistillConfig {
            beta: 0.0,
            ..DistillConfig::default()
        };
        let loss = overall_loss(&g, &p, &[0], &cfg).unwrap().item();
        assert_relative_eq!(loss, std::f64::consts::LN_2, max_relative = 1e-12);
    }

    #[test]
    fn overall_loss_sums_component_oracles() {
        let g = Graph::new();
        let p = pair(vec![0.0, 0.0], vec![2.0, 0.0]);
        let cfg = DistillConfig {
            alpha: 1.0,
            beta: 1.0,
            tau_f: 1.0,
            tau_r: 1.0,
            ..DistillConfig::default()
        };
        let loss = overall_loss(&g, &p, &[0], &cfg).unwrap().item();
        assert_relative_eq!(
            loss,
            std::f64::consts::LN_2 + 0.761_594_155_955_764_9,
            max_relative = 1e-12
        );
    }

    #[test]
    fn teacher_receives_no_gradient_from_any_loss() {
        let g = Graph::new();
        let p = pair(vec![0.1, -0.7, 1.3], vec![2.0, 0.0, -1.0]);
        let loss = overall_loss(&g, &p, &[0], &DistillConfig::default()).unwrap();
        g.backward(&loss).unwrap();
        assert!(p.teacher.grad().is_none());
        assert!(p.student.grad().is_some());
    }

    #[test]
    fn zero_avoiding_ratio_exceeds_threshold() {
        let (fwd, rev) =
            zero_avoiding_gradients(&[0.0, 0.0, -20.0], &[0.0, 0.0, 0.0], 1.0, 1e-12, 2);
        let pt2 = softmax_slice(&[0.0, 0.0, -20.0], 1.0)[2];
        assert!(fwd <= 2.0 * pt2 + 1e-9, "forward bounded by teacher mass");
        assert!(rev > 1e-2);
        assert!(rev / fwd > 1e3);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = DistillConfig::default();
        cfg.tau_f = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = DistillConfig::default();
        cfg.epsilon = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = DistillConfig::default();
        cfg.alpha = -1.0;
        assert!(cfg.validate().is_err());
        assert!(DistillConfig::default().validate().is_ok());
    }
}
