//! Diagnostics: which confusion pairs annotators share, how well learned
//! confusion matrices match planted ones, and which classes attract a high
//! common-noise probability.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::data::{empirical_confusion, ConfusionMatrix, CrowdDataset, OmegaMatrix};
use crate::error::{Error, Result};

/// For every ordered class pair (a, b), the fraction of annotators whose
/// empirical confusion entry (a, b) reaches `tau`, among annotators that
/// labeled at least one instance of class a.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionPairReport {
    pub tau: f64,
    /// `None` for classes no annotator labeled.
    pub fractions: Vec<Vec<Option<f64>>>,
    pub counts: Vec<Vec<usize>>,
    /// Annotators with at least one annotation on each reference class.
    pub eligible: Vec<usize>,
}

impl ConfusionPairReport {
    pub fn num_classes(&self) -> usize {
        self.eligible.len()
    }

    /// Off-diagonal pairs by decreasing fraction, ties by (a, b).
    pub fn ranked_pairs(&self) -> Vec<(usize, usize, f64)> {
        let c = self.num_classes();
        let mut pairs: Vec<(usize, usize, f64)> = (0..c)
            .flat_map(|a| (0..c).filter(move |&b| b != a).map(move |b| (a, b)))
            .filter_map(|(a, b)| self.fractions[a][b].map(|f| (a, b, f)))
            .collect();
        pairs.sort_by(|x, y| y.2.total_cmp(&x.2).then((x.0, x.1).cmp(&(y.0, y.1))));
        pairs
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# tau={}\nfrom,to,fraction,annotators,eligible\n", self.tau);
        for a in 0..self.num_classes() {
            for b in 0..self.num_classes() {
                let f = self.fractions[a][b].map_or_else(|| "absent".to_string(), |f| f.to_string());
                out.push_str(&format!("{a},{b},{f},{},{}\n", self.counts[a][b], self.eligible[a]));
            }
        }
        out
    }

    /// Percent grid for terminal display.
    pub fn text_grid(&self) -> String {
        let c = self.num_classes();
        let mut out = format!("tau = {:.4}\n      ", self.tau);
        out.push_str(&(0..c).map(|b| format!("{b:>6}")).join(""));
        out.push('\n');
        for a in 0..c {
            out.push_str(&format!("{a:>6}"));
            for b in 0..c {
                match self.fractions[a][b] {
                    Some(f) => out.push_str(&format!("{:>6.1}", 100.0 * f)),
                    None => out.push_str(&format!("{:>6}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_pair_heatmap(dataset: &CrowdDataset, reference: &[usize], tau: f64) -> Result<ConfusionPairReport> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau must be in [0, 1], got {tau}")));
    }
    let c = dataset.num_classes();
    let mut counts = vec![vec![0usize; c]; c];
    let mut eligible = vec![0usize; c];
    for r in 0..dataset.num_annotators() {
        let emp = match empirical_confusion(dataset, r, reference) {
            Ok(e) => e,
            Err(Error::EmptyAnnotator(_)) => continue,
            Err(e) => return Err(e),
        };
        for a in (0..c).filter(|&a| emp.row_counts[a] > 0) {
            eligible[a] += 1;
            for b in 0..c {
                if emp.matrix.get(a, b) >= tau {
                    counts[a][b] += 1;
                }
            }
        }
    }
    let fractions = (0..c)
        .map(|a| (0..c).map(|b| (eligible[a] > 0).then(|| counts[a][b] as f64 / eligible[a] as f64)).collect())
        .collect();
    Ok(ConfusionPairReport { tau, fractions, counts, eligible })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScore {
    /// Total-variation distance of each truth row to its learned counterpart.
    pub per_row: Vec<f64>,
    pub mean: f64,
    /// Learned row matched to each truth row (identity unless aligned).
    pub assignment: Vec<usize>,
}

/// Row-wise total-variation distance between two confusion matrices.
pub fn recovery_score(learned: &ConfusionMatrix, truth: &ConfusionMatrix) -> Result<RecoveryScore> {
    let c = truth.num_classes();
    if learned.num_classes() != c {
        return Err(Error::Shape(format!("{}x{} vs {c}x{c}", learned.num_classes(), learned.num_classes())));
    }
    Ok(score_assignment(learned, truth, (0..c).collect()))
}

pub const MAX_ALIGN_CLASSES: usize = 10;

/// Recovery score under the relabeling of learned rows that minimizes the
/// mean distance, found by exhaustive search (C <= 10).
pub fn aligned_recovery_score(learned: &ConfusionMatrix, truth: &ConfusionMatrix) -> Result<RecoveryScore> {
    let c = truth.num_classes();
    recovery_score(learned, truth)?;
    if c > MAX_ALIGN_CLASSES {
        return Err(Error::InvalidArgument(format!("alignment supports at most {MAX_ALIGN_CLASSES} classes, got {c}")));
    }
    let cost: Vec<Vec<f64>> = (0..c).map(|z| (0..c).map(|l| row_tv(learned.row(l), truth.row(z))).collect()).collect();
    let best = (0..c)
        .permutations(c)
        .map(|p| (p.iter().enumerate().map(|(z, &l)| cost[z][l]).sum::<f64>(), p))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, p)| p)
        .unwrap_or_default();
    Ok(score_assignment(learned, truth, best))
}

fn row_tv(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

fn score_assignment(learned: &ConfusionMatrix, truth: &ConfusionMatrix, assignment: Vec<usize>) -> RecoveryScore {
    let per_row: Vec<f64> = assignment.iter().enumerate().map(|(z, &l)| row_tv(learned.row(l), truth.row(z))).collect();
    let mean = per_row.iter().sum::<f64>() / per_row.len().max(1) as f64;
    RecoveryScore { per_row, mean, assignment }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmegaLabelDistribution {
    /// Instances by decreasing mean gate (ties by index), with that mean.
    pub ranking: Vec<(usize, f64)>,
    /// True-label counts in the top half.
    pub top: Vec<usize>,
    /// True-label counts in the bottom half, which takes the extra instance
    /// when the count is odd.
    pub bottom: Vec<usize>,
    /// Instances without any defined gate value.
    pub excluded: Vec<usize>,
}

impl OmegaLabelDistribution {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,top,bottom\n");
        for (c, (t, b)) in self.top.iter().zip(&self.bottom).enumerate() {
            out.push_str(&format!("{c},{t},{b}\n"));
        }
        out
    }
}

pub fn omega_label_distribution(omega: &OmegaMatrix, dataset: &CrowdDataset) -> Result<OmegaLabelDistribution> {
    let truth = dataset.require_labels("omega label distribution")?;
    if omega.rows() != dataset.len() {
        return Err(Error::Shape(format!("omega has {} rows for {} instances", omega.rows(), dataset.len())));
    }
    let mut ranking = Vec::new();
    let mut excluded = Vec::new();
    for i in 0..dataset.len() {
        match omega.row_mean(i) {
            Some(m) => ranking.push((i, m)),
            None => excluded.push(i),
        }
    }
    ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let half = ranking.len() / 2;
    let mut top = vec![0; dataset.num_classes()];
    let mut bottom = vec![0; dataset.num_classes()];
    for (k, &(i, _)) in ranking.iter().enumerate() {
        if k < half {
            top[truth[i]] += 1;
        } else {
            bottom[truth[i]] += 1;
        }
    }
    Ok(OmegaLabelDistribution { ranking, top, bottom, excluded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ConfusionRole, Split, MISSING};
    use crate::numerics::Matrix;

    fn conf(rows: Vec<Vec<f64>>) -> ConfusionMatrix {
        ConfusionMatrix::new(Matrix::from_rows(&rows).unwrap(), ConfusionRole::Global).unwrap()
    }

    fn labeled(ann: Vec<i64>, r: usize, truth: Vec<usize>, c: usize) -> CrowdDataset {
        let n = truth.len();
        CrowdDataset::new(Matrix::zeros(n, 1), r, ann, Some(truth), c, Split::Train).unwrap()
    }

    #[test]
    fn noise_free_has_no_mistakes() {
        let truth = vec![0, 1, 2, 0, 1, 2];
        let ann = truth.iter().flat_map(|&z| [z as i64, z as i64]).collect();
        let ds = labeled(ann, 2, truth.clone(), 3);
        let rep = confusion_pair_heatmap(&ds, &truth, 0.1).unwrap();
        assert!(rep.ranked_pairs().iter().all(|p| p.2 == 0.0));
        assert_eq!(rep.fractions[1][1], Some(1.0));
    }

    #[test]
    fn unlabeled_class_is_absent() {
        let truth = vec![0, 0, 1];
        let ds = labeled(vec![0, MISSING, 1, MISSING, MISSING, 1], 2, truth.clone(), 3);
        let rep = confusion_pair_heatmap(&ds, &truth, 0.5).unwrap();
        assert_eq!(rep.fractions[2][0], None);
        assert_eq!(rep.fractions[1], vec![Some(0.0), Some(1.0), Some(0.0)]);
        assert_eq!(rep.eligible, vec![1, 1, 0]);
        assert!(rep.to_csv().contains("2,0,absent,0,0"));
    }

    #[test]
    fn tau_one_keeps_only_deterministic_confusions() {
        let truth = vec![0, 0, 1, 1];
        // annotator 0 always flips 0 -> 1, annotator 1 is split on class 0
        let ds = labeled(vec![1, 0, 1, 1, 1, 1, 1, 1], 2, truth.clone(), 2);
        let rep = confusion_pair_heatmap(&ds, &truth, 1.0).unwrap();
        assert_eq!(rep.fractions[0][1], Some(0.5));
        assert_eq!(rep.fractions[1][0], Some(0.0));
    }

    #[test]
    fn recovery_examples() {
        let id = conf(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let anti = conf(vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(recovery_score(&id, &id).unwrap().mean, 0.0);
        assert_eq!(recovery_score(&id, &anti).unwrap().mean, 1.0);
        let id4 = ConfusionMatrix::identity(4, ConfusionRole::Global);
        let u4 = ConfusionMatrix::uniform(4, ConfusionRole::Global);
        let s = recovery_score(&u4, &id4).unwrap();
        assert!(s.per_row.iter().all(|&v| (v - 0.75).abs() < 1e-15));
    }

    #[test]
    fn alignment_undoes_row_relabeling() {
        let truth = conf(vec![vec![0.3, 0.7, 0.0], vec![0.0, 0.3, 0.7], vec![0.7, 0.0, 0.3]]);
        let relabeled = conf(vec![truth.row(2).to_vec(), truth.row(0).to_vec(), truth.row(1).to_vec()]);
        assert!(recovery_score(&relabeled, &truth).unwrap().mean > 0.5);
        let aligned = aligned_recovery_score(&relabeled, &truth).unwrap();
        assert!(aligned.mean < 1e-15);
        assert_eq!(aligned.assignment, vec![1, 2, 0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = ConfusionMatrix::identity(2, ConfusionRole::Global);
        let b = ConfusionMatrix::identity(3, ConfusionRole::Global);
        assert!(recovery_score(&a, &b).is_err());
    }

    #[test]
    fn omega_ranking_splits_by_class() {
        let truth = vec![0, 1, 0, 1];
        let ds = labeled(vec![0, 1, 0, 1], 1, truth.clone(), 2);
        let mut om = OmegaMatrix::empty(4, 1);
        for (i, &z) in truth.iter().enumerate() {
            om.set(i, 0, if z == 0 { 1.0 } else { 0.0 }).unwrap();
        }
        let d = omega_label_distribution(&om, &ds).unwrap();
        assert_eq!(d.top, vec![2, 0]);
        assert_eq!(d.bottom, vec![0, 2]);
    }

    #[test]
    fn omega_odd_count_and_exclusions() {
        let truth = vec![0, 1, 1, 0];
        let ds = labeled(vec![0, 1, 1, 0], 1, truth, 2);
        let mut om = OmegaMatrix::empty(4, 1);
        for i in 0..3 {
            om.set(i, 0, 0.5).unwrap();
        }
        let d = omega_label_distribution(&om, &ds).unwrap();
        assert_eq!(d.excluded, vec![3]);
        assert_eq!(d.ranking.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!((d.top.iter().sum::<usize>(), d.bottom.iter().sum::<usize>()), (1, 2));
    }
}
