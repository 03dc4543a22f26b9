//! Evaluation metrics: mean absolute error, Pearson and Spearman
//! correlation, and the inter-rater human baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub mae: f64,
    pub pcc: f64,
    pub scc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub pcc: f64,
    pub scc: f64,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_fold: Option<Vec<FoldMetrics>>,
}

impl EvalReport {
    pub fn from_predictions(predictions: &[f64], truth: &[f64], per_fold: Option<Vec<FoldMetrics>>) -> Result<Self> {
        Ok(EvalReport {
            mae: mae(predictions, truth)?,
            pcc: pcc(predictions, truth)?,
            scc: scc(predictions, truth)?,
            n: predictions.len(),
            per_fold,
        })
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<8} {:>8} {:>8} {:>8}\n", "", "MAE", "PCC", "SCC"));
        if let Some(folds) = &self.per_fold {
            for (i, f) in folds.iter().enumerate() {
                s.push_str(&format!(
                    "{:<8} {:>8.4} {:>8.4} {:>8.4}\n",
                    format!("fold {}", i + 1),
                    f.mae,
                    f.pcc,
                    f.scc
                ));
            }
        }
        s.push_str(&format!(
            "{:<8} {:>8.4} {:>8.4} {:>8.4}   (n = {})\n",
            "overall", self.mae, self.pcc, self.scc, self.n
        ));
        s
    }
}

fn check_lengths(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    Ok(())
}

pub fn mae(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(x, y)?;
    if x.is_empty() {
        return Err(Error::Shape("mae of empty sequences".into()));
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64)
}

pub fn pcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(x, y)?;
    let n = x.len();
    if n < 2 {
        return Err(Error::UndefinedCorrelation("need at least 2 points".into()));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant sequence".into()));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Fractional ranks, ties get the average of the positions they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| x[i].partial_cmp(&x[j]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn scc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(x, y)?;
    pcc(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InterRaterMethod {
    /// Each rater against the mean of the remaining raters, averaged.
    #[default]
    LeaveOneOut,
    /// Each ordered rater pair scored directly, averaged.
    Pairwise,
}

/// Human-agreement baseline from a raters-by-utterances score matrix.
pub fn inter_rater_baseline(rater_scores: &[Vec<f64>], method: InterRaterMethod) -> Result<EvalReport> {
    let r = rater_scores.len();
    if r < 2 {
        return Err(Error::InvalidConfig("need at least 2 raters".into()));
    }
    let n = rater_scores[0].len();
    if rater_scores.iter().any(|row| row.len() != n) {
        return Err(Error::Shape("raters scored different utterance counts".into()));
    }
    let mut maes = Vec::new();
    let mut pccs = Vec::new();
    let mut sccs = Vec::new();
    match method {
        InterRaterMethod::LeaveOneOut => {
            for held in 0..r {
                let others: Vec<f64> = (0..n)
                    .map(|u| {
                        let mut s = 0.0;
                        for (ri, row) in rater_scores.iter().enumerate() {
                            if ri != held {
                                s += row[u];
                            }
                        }
                        s / (r - 1) as f64
                    })
                    .collect();
                maes.push(mae(&rater_scores[held], &others)?);
                pccs.push(pcc(&rater_scores[held], &others)?);
                sccs.push(scc(&rater_scores[held], &others)?);
            }
        }
        InterRaterMethod::Pairwise => {
            for a in 0..r {
                for b in 0..r {
                    if a != b {
                        maes.push(mae(&rater_scores[a], &rater_scores[b])?);
                        pccs.push(pcc(&rater_scores[a], &rater_scores[b])?);
                        sccs.push(scc(&rater_scores[a], &rater_scores[b])?);
                    }
                }
            }
        }
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(EvalReport {
        mae: avg(&maes),
        pcc: avg(&pccs),
        scc: avg(&sccs),
        n,
        per_fold: None,
    })
}
