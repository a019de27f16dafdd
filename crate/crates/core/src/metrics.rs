//! Multi-label evaluation metrics and the Wilcoxon signed-rank test.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{shape_err, Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Largest sample size evaluated by exact enumeration.
pub const WILCOXON_EXACT_MAX: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub map: f64,
    pub o_map: f64,
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub op: f64,
    #[serde(rename = "or")]
    pub or_: f64,
    pub of1: f64,
    pub threshold: f64,
    /// Labels without positives, left out of mAP.
    pub skipped_labels: usize,
    /// Precision/recall terms whose denominator was zero and were set to 0.
    pub zero_denominators: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "mAP,O_mAP,CP,CR,CF1,OP,OR,OF1";

    /// The eight metrics in table order.
    pub fn values(&self) -> [f64; 8] {
        [self.map, self.o_map, self.cp, self.cr, self.cf1, self.op, self.or_, self.of1]
    }

    /// Percentages with one decimal, in table order.
    pub fn to_csv_row(&self) -> String {
        self.values()
            .iter()
            .map(|v| format!("{:.1}", 100.0 * v))
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Mean over positives of the precision at each positive's rank. Ranks are
/// by descending score; ties keep the original order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(shape_err(scores.len(), labels.len()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::NoPositives);
    }
    Ok(acc / hits as f64)
}

fn column_ap(scores: ArrayView1<'_, f64>, labels: ArrayView1<'_, bool>) -> Result<f64> {
    average_precision(&scores.to_vec(), &labels.to_vec())
}

pub fn report(scores: &Array2<f64>, labels: &Array2<bool>, threshold: f64) -> Result<MetricReport> {
    if scores.dim() != labels.dim() {
        return Err(shape_err(format!("{:?}", scores.dim()), format!("{:?}", labels.dim())));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidParameter {
            name: "threshold",
            reason: format!("must lie in (0, 1), got {threshold}"),
        });
    }
    let (n, c) = scores.dim();
    if n == 0 || c == 0 {
        return Err(Error::EmptyInput("metric inputs"));
    }

    let mut ap_sum = 0.0;
    let mut ap_count = 0usize;
    for j in 0..c {
        match column_ap(scores.column(j), labels.column(j)) {
            Ok(ap) => {
                ap_sum += ap;
                ap_count += 1;
            }
            Err(Error::NoPositives) => {}
            Err(e) => return Err(e),
        }
    }
    let map = if ap_count > 0 { ap_sum / ap_count as f64 } else { 0.0 };
    let flat_scores: Vec<f64> = scores.iter().copied().collect();
    let flat_labels: Vec<bool> = labels.iter().copied().collect();
    let o_map = average_precision(&flat_scores, &flat_labels).unwrap_or(0.0);

    let mut zero_denominators = 0;
    let mut ratio = |num: usize, den: usize| {
        if den == 0 {
            zero_denominators += 1;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let (mut tp_all, mut pred_all, mut pos_all) = (0, 0, 0);
    let (mut cp, mut cr) = (0.0, 0.0);
    for j in 0..c {
        let (mut tp, mut pred, mut pos) = (0, 0, 0);
        for i in 0..n {
            let hit = scores[[i, j]] >= threshold;
            let truth = labels[[i, j]];
            tp += usize::from(hit && truth);
            pred += usize::from(hit);
            pos += usize::from(truth);
        }
        cp += ratio(tp, pred);
        cr += ratio(tp, pos);
        tp_all += tp;
        pred_all += pred;
        pos_all += pos;
    }
    cp /= c as f64;
    cr /= c as f64;
    let op = ratio(tp_all, pred_all);
    let or_ = ratio(tp_all, pos_all);
    Ok(MetricReport {
        map,
        o_map,
        cp,
        cr,
        cf1: harmonic(cp, cr),
        op,
        or_,
        of1: harmonic(op, or_),
        threshold,
        skipped_labels: c - ap_count,
        zero_denominators,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    pub p_value: f64,
    /// Pairs left after dropping zero differences.
    pub n_effective: usize,
    pub method: WilcoxonMethod,
    /// Every difference was zero.
    pub degenerate: bool,
}

/// Two-sided Wilcoxon signed-rank test on paired samples.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<WilcoxonResult> {
    wilcoxon_with(pairs, None)
}

/// Same as [`wilcoxon_signed_rank`] but forces the p-value method.
pub fn wilcoxon_with(pairs: &[(f64, f64)], method: Option<WilcoxonMethod>) -> Result<WilcoxonResult> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("wilcoxon needs at least one pair"));
    }
    let diffs: Vec<f64> = pairs.iter().map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            statistic: 0.0,
            w_plus: 0.0,
            w_minus: 0.0,
            p_value: 1.0,
            n_effective: 0,
            method: WilcoxonMethod::Exact,
            degenerate: true,
        });
    }
    let (ranks, ties) = average_ranks(&diffs);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let w_minus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d < 0.0).map(|(_, r)| r).sum();
    let statistic = w_plus.min(w_minus);
    let method = method.unwrap_or(if n <= WILCOXON_EXACT_MAX {
        WilcoxonMethod::Exact
    } else {
        WilcoxonMethod::Normal
    });
    let p_value = match method {
        WilcoxonMethod::Exact => exact_p(&ranks, statistic),
        WilcoxonMethod::Normal => normal_p(n, &ties, statistic),
    };
    Ok(WilcoxonResult {
        statistic,
        w_plus,
        w_minus,
        p_value,
        n_effective: n,
        method,
        degenerate: false,
    })
}

/// Average ranks of `|d|` (1-based) and the sizes of tie groups.
fn average_ranks(diffs: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&a, &b| diffs[a].abs().total_cmp(&diffs[b].abs()));
    let mut ranks = vec![0.0; diffs.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let rank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        if j > i {
            ties.push(j - i + 1);
        }
        i = j + 1;
    }
    (ranks, ties)
}

/// `P(W+ <= w)` doubled, from the exact null distribution of the signed-rank
/// sum. Average ranks are half-integers, so the sums are tracked doubled.
fn exact_p(ranks: &[f64], statistic: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; max + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    let target = (2.0 * statistic).round() as usize;
    let total = 2f64.powi(ranks.len() as i32);
    let tail: f64 = counts[..=target.min(max)].iter().sum();
    (2.0 * tail / total).min(1.0)
}

fn normal_p(n: usize, ties: &[usize], statistic: f64) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    if var <= 0.0 {
        return 1.0;
    }
    // continuity correction towards the mean
    let z = ((statistic - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::standard();
    (2.0 * normal.cdf(-z)).min(1.0)
}
