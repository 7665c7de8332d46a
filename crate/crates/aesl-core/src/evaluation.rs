//! Multi-label metrics (mAP, macro-F1, micro-F1), per-task trajectories, and
//! the rank-based statistical tests used to compare methods.

use crate::error::{AeslError, Result};
use crate::numerics::matrix::Matrix;
use serde::{Deserialize, Serialize};

/// Decision threshold for turning scores into predicted label sets.
pub const DECISION_THRESHOLD: f64 = 0.5;

/// Friedman critical value at the 0.05 level for k = 9 algorithms over
/// N = 7 datasets (F distribution with 8 and 48 degrees of freedom).
pub const FRIEDMAN_CRITICAL_F_K9_N7: f64 = 2.138;

/// Nemenyi q at the 0.05 level for k = 9.
pub const NEMENYI_Q_005_K9: f64 = 3.102;

/// Precision-at-rank averaged over relevant items; scores sorted descending,
/// ties broken by ascending index. Errors when nothing is relevant.
pub fn average_precision(scores: &[f64], relevance: &[f64]) -> Result<f64> {
    if scores.len() != relevance.len() {
        return Err(AeslError::invalid(
            "average_precision: scores and relevance differ in length",
        ));
    }
    let positives = relevance.iter().filter(|&&r| r != 0.0).count();
    if positives == 0 {
        return Err(AeslError::invalid(
            "average_precision is undefined without a relevant item",
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let mut hits = 0.0;
    let mut acc = 0.0;
    for (pos, &idx) in order.iter().enumerate() {
        if relevance[idx] != 0.0 {
            hits += 1.0;
            acc += hits / (pos + 1) as f64;
        }
    }
    Ok(acc / positives as f64)
}

fn check_metric_shapes(scores: &Matrix, labels: &Matrix) -> Result<()> {
    if scores.is_empty() || labels.is_empty() {
        return Err(AeslError::invalid("metrics need non-empty matrices"));
    }
    if scores.shape() != labels.shape() {
        return Err(AeslError::ShapeMismatch {
            op: "metrics",
            left_rows: scores.rows(),
            left_cols: scores.cols(),
            right_rows: labels.rows(),
            right_cols: labels.cols(),
        });
    }
    Ok(())
}

/// Mean per-class average precision over classes with at least one positive.
pub fn mean_average_precision(scores: &Matrix, labels: &Matrix) -> Result<f64> {
    check_metric_shapes(scores, labels)?;
    let mut acc = 0.0;
    let mut evaluated = 0usize;
    for c in 0..scores.cols() {
        let rel: Vec<f64> = (0..labels.rows()).map(|r| labels.get(r, c)).collect();
        if rel.iter().all(|&v| v == 0.0) {
            continue;
        }
        let col: Vec<f64> = (0..scores.rows()).map(|r| scores.get(r, c)).collect();
        acc += average_precision(&col, &rel)?;
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(AeslError::invalid(
            "mean_average_precision: no class has a positive test instance",
        ));
    }
    Ok(acc / evaluated as f64)
}

fn confusion_counts(scores: &Matrix, labels: &Matrix, class: usize) -> (f64, f64, f64) {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    for r in 0..scores.rows() {
        let predicted = scores.get(r, class) > DECISION_THRESHOLD;
        let actual = labels.get(r, class) != 0.0;
        match (predicted, actual) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            (false, false) => {}
        }
    }
    (tp, fp, fn_)
}

fn f1_from_counts(tp: f64, fp: f64, fn_: f64) -> f64 {
    let denom = 2.0 * tp + fp + fn_;
    if denom == 0.0 {
        0.0
    } else {
        2.0 * tp / denom
    }
}

/// Mean per-class F1 at the 0.5 threshold; a class with empty precision and
/// recall contributes zero.
pub fn macro_f1(scores: &Matrix, labels: &Matrix) -> Result<f64> {
    check_metric_shapes(scores, labels)?;
    let mut acc = 0.0;
    for c in 0..scores.cols() {
        let (tp, fp, fn_) = confusion_counts(scores, labels, c);
        acc += f1_from_counts(tp, fp, fn_);
    }
    Ok(acc / scores.cols() as f64)
}

/// F1 of the pooled true/false positive and false negative counts.
pub fn micro_f1(scores: &Matrix, labels: &Matrix) -> Result<f64> {
    check_metric_shapes(scores, labels)?;
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    for c in 0..scores.cols() {
        let (t, f, n) = confusion_counts(scores, labels, c);
        tp += t;
        fp += f;
        fn_ += n;
    }
    Ok(f1_from_counts(tp, fp, fn_))
}

/// Ranks with rank 1 for the largest value; ties get the average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).expect("finite values"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j share the same value; average ranks preserve sums.
        let rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Per-dataset ranks of k methods over N datasets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankTable {
    pub methods: Vec<String>,
    /// One row per dataset; entry j is the rank of method j on that dataset.
    pub ranks: Vec<Vec<f64>>,
}

impl RankTable {
    /// Ranks methods by score (higher is better) on each dataset.
    pub fn from_scores(methods: Vec<String>, scores_per_dataset: &[Vec<f64>]) -> Result<Self> {
        for row in scores_per_dataset {
            if row.len() != methods.len() {
                return Err(AeslError::invalid(
                    "rank table rows must cover every method",
                ));
            }
        }
        let ranks = scores_per_dataset
            .iter()
            .map(|row| average_ranks(row))
            .collect();
        Ok(RankTable { methods, ranks })
    }

    pub fn method_count(&self) -> usize {
        self.methods.len()
    }

    pub fn dataset_count(&self) -> usize {
        self.ranks.len()
    }

    /// R_j: mean rank of each method across datasets.
    pub fn mean_ranks(&self) -> Vec<f64> {
        let k = self.method_count();
        let n = self.dataset_count() as f64;
        let mut out = vec![0.0; k];
        for row in &self.ranks {
            for (acc, &r) in out.iter_mut().zip(row) {
                *acc += r;
            }
        }
        for v in &mut out {
            *v /= n;
        }
        out
    }
}

/// Friedman statistics (chi^2_F, F_F). Errors when the F statistic's
/// denominator vanishes, which happens under perfect cross-dataset agreement.
pub fn friedman(table: &RankTable) -> Result<(f64, f64)> {
    let k = table.method_count();
    let n = table.dataset_count();
    if k < 2 || n < 2 {
        return Err(AeslError::invalid(
            "friedman needs at least two methods and two datasets",
        ));
    }
    let mean_ranks = table.mean_ranks();
    let sum_sq: f64 = mean_ranks.iter().map(|r| r * r).sum();
    let kf = k as f64;
    let nf = n as f64;
    let chi2 = 12.0 * nf / (kf * (kf + 1.0)) * (sum_sq - kf * (kf + 1.0) * (kf + 1.0) / 4.0);
    let denominator = nf * (kf - 1.0) - chi2;
    if denominator.abs() < 1e-12 {
        return Err(AeslError::DegenerateRanks(format!(
            "all {n} datasets rank the {k} methods identically; F statistic is undefined"
        )));
    }
    let ff = (nf - 1.0) * chi2 / denominator;
    Ok((chi2, ff))
}

/// Critical difference of the Nemenyi test: q_alpha * sqrt(k (k + 1) / (6 N)).
pub fn nemenyi_cd(q_alpha: f64, k: usize, n: usize) -> Result<f64> {
    if k < 2 || n < 1 {
        return Err(AeslError::invalid(
            "nemenyi_cd requires k >= 2 methods and n >= 1 datasets",
        ));
    }
    if q_alpha < 0.0 {
        return Err(AeslError::invalid("q_alpha must be non-negative"));
    }
    let kf = k as f64;
    Ok(q_alpha * (kf * (kf + 1.0) / (6.0 * n as f64)).sqrt())
}

/// Studentized-range-based q values for the Nemenyi test (two-sided).
pub fn nemenyi_q_alpha(alpha: f64, k: usize) -> Result<f64> {
    const Q_005: [f64; 9] = [1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164];
    const Q_010: [f64; 9] = [1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920];
    if !(2..=10).contains(&k) {
        return Err(AeslError::invalid(format!(
            "nemenyi q table covers 2..=10 methods, got {k}"
        )));
    }
    let table = if (alpha - 0.05).abs() < 1e-9 {
        &Q_005
    } else if (alpha - 0.10).abs() < 1e-9 {
        &Q_010
    } else {
        return Err(AeslError::invalid(format!(
            "nemenyi q table covers alpha in {{0.05, 0.10}}, got {alpha}"
        )));
    };
    Ok(table[k - 2])
}

/// Critical value of the F distribution with (k-1, (k-1)(N-1)) degrees of
/// freedom at level `alpha`.
pub fn friedman_critical_value(alpha: f64, k: usize, n: usize) -> Result<f64> {
    if k < 2 || n < 2 {
        return Err(AeslError::invalid(
            "friedman critical value needs k >= 2 and n >= 2",
        ));
    }
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(AeslError::invalid("alpha must lie in (0, 1)"));
    }
    let d1 = (k - 1) as f64;
    let d2 = ((k - 1) * (n - 1)) as f64;
    use statrs::distribution::ContinuousCDF;
    let dist = statrs::distribution::FisherSnedecor::new(d1, d2)
        .map_err(|e| AeslError::invalid(format!("F distribution: {e}")))?;
    Ok(dist.inverse_cdf(1.0 - alpha))
}

/// Metrics measured after one task, over all classes seen so far.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskStepRecord {
    pub task: usize,
    pub seen_classes: usize,
    pub map: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub erg_pcc: Option<f64>,
}

/// Per-task metric trajectory of one run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub steps: Vec<TaskStepRecord>,
}

impl MetricsReport {
    /// Mean of per-step mAP, the base task included.
    pub fn avg_acc(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.map).sum::<f64>() / self.steps.len() as f64
    }

    pub fn last(&self) -> Option<&TaskStepRecord> {
        self.steps.last()
    }
}
