//! Classification metrics, ROC AUC, a one-tailed paired t-test, and a small
//! benchmark record type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("AUC needs both classes present")]
    SingleClassAuc,
    #[error("paired t-test needs at least two pairs")]
    TooFewPairs,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// Binary confusion counts; class 1 is "positive".
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn tally(labels: &[u8], predictions: &[u8]) -> Result<Self, EvalError> {
        if labels.len() != predictions.len() {
            return Err(EvalError::LengthMismatch(labels.len(), predictions.len()));
        }
        let mut c = Confusion::default();
        for (&l, &p) in labels.iter().zip(predictions) {
            match (l, p) {
                (1, 1) => c.tp += 1,
                (0, 0) => c.tn += 1,
                (0, 1) => c.fp += 1,
                _ => c.fn_ += 1,
            }
        }
        Ok(c)
    }
}

/// The headline metrics; any ratio with a zero denominator is reported as
/// 0.0 and flagged in `degenerate`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSet {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    pub degenerate: bool,
}

impl MetricSet {
    pub fn from_confusion(c: &Confusion) -> Self {
        let mut degenerate = false;
        let mut ratio = |num: usize, den: usize| -> f64 {
            if den == 0 {
                degenerate = true;
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let total = c.tp + c.tn + c.fp + c.fn_;
        let accuracy = ratio(c.tp + c.tn, total);
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let specificity = ratio(c.tn, c.tn + c.fp);
        let f1 = if precision + recall == 0.0 {
            degenerate = true;
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        MetricSet {
            accuracy,
            precision,
            recall,
            specificity,
            f1,
            degenerate,
        }
    }
}

/// ROC AUC via the Mann-Whitney statistic with midranks for ties.
pub fn auc(labels: &[u8], scores: &[f64]) -> Result<f64, EvalError> {
    if labels.len() != scores.len() {
        return Err(EvalError::LengthMismatch(labels.len(), scores.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClassAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = midrank;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&l, _)| l == 1)
        .map(|(_, &r)| r)
        .sum();
    let u = rank_sum_pos - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Quadratic-time AUC oracle: fraction of (positive, negative) pairs ranked
/// correctly, ties counting half.
pub fn auc_pair_count(labels: &[u8], scores: &[f64]) -> Result<f64, EvalError> {
    let pos: Vec<f64> = labels
        .iter()
        .zip(scores)
        .filter(|(&l, _)| l == 1)
        .map(|(_, &s)| s)
        .collect();
    let neg: Vec<f64> = labels
        .iter()
        .zip(scores)
        .filter(|(&l, _)| l == 0)
        .map(|(_, &s)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(EvalError::SingleClassAuc);
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

// ---------------------------------------------------------------------------
// Student's t distribution via the regularized incomplete beta function.

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7.
    const COEFFS: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEFFS[0];
    let t = x + 7.5;
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta I_x(a, b) by Lentz's continued fraction.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0 && (0.0..=1.0).contains(&x));
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
        return 1.0;
    }
    // symmetry for faster convergence
    if x > (a + 1.0) / (a + b + 2.0) {
        return 1.0 - incomplete_beta(b, a, 1.0 - x);
    }
    let front =
        (a * x.ln() + b * (1.0 - x).ln() + ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b)).exp() / a;
    let tiny = 1e-30;
    let mut f = 1.0;
    let mut c = 1.0;
    let mut d = 0.0;
    for m in 0..=200 {
        let numerator = if m == 0 {
            1.0
        } else if m % 2 == 0 {
            let k = m as f64 / 2.0;
            k * (b - k) * x / ((a + 2.0 * k - 1.0) * (a + 2.0 * k))
        } else {
            let k = (m as f64 - 1.0) / 2.0;
            -(a + k) * (a + b + k) * x / ((a + 2.0 * k) * (a + 2.0 * k + 1.0))
        };
        d = 1.0 + numerator * d;
        if d.abs() < tiny {
            d = tiny;
        }
        d = 1.0 / d;
        c = 1.0 + numerator / c;
        if c.abs() < tiny {
            c = tiny;
        }
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-12 {
            break;
        }
    }
    front * (f - 1.0)
}

/// Upper-tail probability of Student's t with `df` degrees of freedom.
pub fn t_sf(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    let tail = 0.5 * incomplete_beta(df / 2.0, 0.5, x);
    if t >= 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// One-tailed paired t-test for H1: mean(a - b) > 0. Returns (t, p).
/// Zero-variance differences yield a flag and p = 0 or 1 by the sign of the
/// mean difference.
pub fn paired_t_one_tailed(a: &[f64], b: &[f64]) -> Result<(f64, f64, bool), EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let k = a.len();
    if k < 2 {
        return Err(EvalError::TooFewPairs);
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / k as f64;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k as f64 - 1.0);
    if var == 0.0 {
        let p = if mean > 0.0 { 0.0 } else { 1.0 };
        return Ok((f64::INFINITY * mean.signum(), p, true));
    }
    let t = mean / (var.sqrt() / (k as f64).sqrt());
    Ok((t, t_sf(t, k as f64 - 1.0), false))
}

/// Mean and population standard deviation, for "mean +/- std" summaries.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One benchmark measurement for the parameter/runtime comparison tables.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BenchRecord {
    pub config: String,
    pub params: usize,
    pub seconds: f64,
}

pub fn bench_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from("config,params,seconds\n");
    for r in records {
        out.push_str(&format!("{},{},{}\n", r.config, r.params, r.seconds));
    }
    out
}
