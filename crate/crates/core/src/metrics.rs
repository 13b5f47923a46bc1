//! OOD detection metrics with exact tie handling.
//!
//! Scores are higher-is-ID. AUPR treats OOD as the positive class and ranks
//! by the negated score.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Result};
use crate::features::LogitMatrix;

/// CSV header matching [`MetricsReport::csv_row`].
pub const METRICS_CSV_HEADER: &str = "auroc,aupr,fpr_at_95,id_accuracy,n_id,n_ood";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auroc: f64,
    pub aupr: f64,
    pub fpr_at_95: f64,
    /// Closed-set accuracy on ID rows, when logits and labels were given.
    pub id_accuracy: Option<f64>,
    pub n_id: usize,
    pub n_ood: usize,
}

impl MetricsReport {
    /// One CSV row in [`METRICS_CSV_HEADER`] order; a missing accuracy is
    /// left empty.
    pub fn csv_row(&self) -> String {
        let acc = self.id_accuracy.map(|a| format!("{a}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.auroc, self.aupr, self.fpr_at_95, acc, self.n_id, self.n_ood
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

struct Group {
    n_id: u64,
    n_ood: u64,
}

/// Groups equal scores after sorting ascending.
fn tie_groups(scores: &[f64], is_ood: &[bool]) -> Vec<Group> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut groups: Vec<Group> = Vec::new();
    let mut last = f64::NAN;
    for i in idx {
        if groups.is_empty() || scores[i] != last {
            groups.push(Group { n_id: 0, n_ood: 0 });
            last = scores[i];
        }
        let g = groups.last_mut().unwrap();
        if is_ood[i] {
            g.n_ood += 1;
        } else {
            g.n_id += 1;
        }
    }
    groups
}

fn counts(scores: &[f64], is_ood: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != is_ood.len() {
        return dim_err(format!("{} scores for {} flags", scores.len(), is_ood.len()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return arg_err(format!("score {i} is not finite"));
    }
    let n_ood = is_ood.iter().filter(|&&o| o).count();
    let n_id = is_ood.len() - n_ood;
    if n_id == 0 || n_ood == 0 {
        return arg_err("need at least one ID and one OOD row");
    }
    Ok((n_id, n_ood))
}

/// Probability that a random ID row outscores a random OOD row, ties ½.
pub fn auroc(scores: &[f64], is_ood: &[bool]) -> Result<f64> {
    let (n_id, n_ood) = counts(scores, is_ood)?;
    // Twice the Mann-Whitney count, kept in integers so the result is the
    // exact rational rounded once.
    let mut ood_below: u128 = 0;
    let mut twice: u128 = 0;
    for g in tie_groups(scores, is_ood) {
        twice += 2 * g.n_id as u128 * ood_below + g.n_id as u128 * g.n_ood as u128;
        ood_below += g.n_ood as u128;
    }
    Ok(twice as f64 / (2 * n_id as u128 * n_ood as u128) as f64)
}

/// Average precision with OOD as the positive class, ranked by descending
/// negated score. Tied rows enter the ranking together.
pub fn aupr(scores: &[f64], is_ood: &[bool]) -> Result<f64> {
    let (_, n_ood) = counts(scores, is_ood)?;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut ap = 0.0;
    // Ascending score = descending OOD-ness.
    for g in tie_groups(scores, is_ood) {
        tp += g.n_ood;
        fp += g.n_id;
        if g.n_ood > 0 {
            ap += (g.n_ood as f64 / n_ood as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

/// Fraction of OOD rows scoring at or above the largest threshold that
/// still accepts at least 95% of ID rows.
pub fn fpr_at_95(scores: &[f64], is_ood: &[bool]) -> Result<f64> {
    let (n_id, n_ood) = counts(scores, is_ood)?;
    let mut id: Vec<f64> = scores.iter().zip(is_ood).filter(|p| !*p.1).map(|p| *p.0).collect();
    id.sort_by(|a, b| b.total_cmp(a));
    // ceil(0.95 n) in integers.
    let k = (95 * n_id).div_ceil(100);
    let eta = id[k - 1];
    let fp = scores.iter().zip(is_ood).filter(|&(&s, &o)| o && s >= eta).count();
    Ok(fp as f64 / n_ood as f64)
}

/// O(n_id · n_ood) pairwise AUROC for cross-checking.
pub fn brute_force_auroc(scores: &[f64], is_ood: &[bool]) -> Result<f64> {
    let (n_id, n_ood) = counts(scores, is_ood)?;
    if n_id as u128 * n_ood as u128 > 1_000_000 {
        return arg_err("brute-force AUROC limited to 10^6 pairs");
    }
    let mut twice = 0u64;
    for (s, _) in scores.iter().zip(is_ood).filter(|p| !*p.1) {
        for (t, _) in scores.iter().zip(is_ood).filter(|p| *p.1) {
            twice += if s > t {
                2
            } else if s == t {
                1
            } else {
                0
            };
        }
    }
    Ok(twice as f64 / (2 * n_id * n_ood) as f64)
}

/// Fraction of rows whose argmax logit equals the label. Ties resolve to
/// the lowest class index.
pub fn id_accuracy(lm: &LogitMatrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != lm.n_rows() {
        return dim_err(format!("{} labels for {} rows", labels.len(), lm.n_rows()));
    }
    let correct = lm.rows().zip(labels).filter(|(z, &y)| argmax(z) == y).count();
    Ok(correct as f64 / labels.len() as f64)
}

pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = k;
        }
    }
    best
}

/// AUROC, AUPR and FPR@95 in one report; `id_accuracy` is left empty.
pub fn compute_ood_metrics(scores: &[f64], is_ood: &[bool]) -> Result<MetricsReport> {
    let (n_id, n_ood) = counts(scores, is_ood)?;
    Ok(MetricsReport {
        auroc: auroc(scores, is_ood)?,
        aupr: aupr(scores, is_ood)?,
        fpr_at_95: fpr_at_95(scores, is_ood)?,
        id_accuracy: None,
        n_id,
        n_ood,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureMatrix;

    #[test]
    fn separated_and_tied() {
        let s = [3.0, 4.0, 1.0, 0.0];
        let o = [false, false, true, true];
        let r = compute_ood_metrics(&s, &o).unwrap();
        assert_eq!((r.auroc, r.aupr, r.fpr_at_95), (1.0, 1.0, 0.0));
        let tied = compute_ood_metrics(&[1.0; 4], &o).unwrap();
        assert_eq!(tied.auroc, 0.5);
        assert_eq!(tied.fpr_at_95, 1.0);
        assert_eq!(tied.aupr, 0.5);
    }

    #[test]
    fn hand_pairs() {
        let s = [3.0, 1.0, 2.0, 0.0];
        let o = [false, false, true, true];
        assert_eq!(auroc(&s, &o).unwrap(), 0.75);
        assert_eq!(brute_force_auroc(&s, &o).unwrap(), 0.75);
        assert_eq!(brute_force_auroc(&[1.0, 0.0], &[false, true]).unwrap(), 1.0);
        assert_eq!(brute_force_auroc(&[0.0, 1.0], &[false, true]).unwrap(), 0.0);
    }

    #[test]
    fn single_class_rejected() {
        assert!(compute_ood_metrics(&[1.0, 2.0], &[false, false]).is_err());
        assert!(compute_ood_metrics(&[1.0, 2.0], &[true, true]).is_err());
    }

    #[test]
    fn fpr_threshold_counts() {
        // 20 ID rows 1..=20: 95% acceptance needs 19 rows, threshold 2.
        let mut s: Vec<f64> = (1..=20).map(f64::from).collect();
        let mut o = vec![false; 20];
        s.extend([1.5, 2.0, 2.5, 30.0]);
        o.extend([true; 4]);
        assert_eq!(fpr_at_95(&s, &o).unwrap(), 0.75);
    }

    #[test]
    fn accuracy_counts() {
        let lm = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5], vec![2.0, 1.0]]).unwrap();
        assert_eq!(id_accuracy(&lm, &[0, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(id_accuracy(&lm, &[1, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(id_accuracy(&lm, &[0, 1, 1, 0]).unwrap(), 0.75);
    }

    #[test]
    fn csv_layout() {
        let r = MetricsReport {
            auroc: 0.5,
            aupr: 0.25,
            fpr_at_95: 1.0,
            id_accuracy: None,
            n_id: 3,
            n_ood: 2,
        };
        assert_eq!(r.csv_row(), "0.5,0.25,1,,3,2");
        assert_eq!(METRICS_CSV_HEADER.split(',').count(), r.csv_row().split(',').count());
    }
}
