//! Majority-vote aggregation and the two deep-learning baselines.

use crate::classifier::ClassifierParams;
use crate::conal::{ConalParams, Gate};
use crate::data::{CrowdDataset, CrowdSplits, MISSING};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};
use crate::training::{accuracy, train, ConalObjective, SoftLabelObjective, TrainConfig, TrainOutcome};

/// Most frequent label in an annotation row; ties go to the lowest class.
pub fn majority_vote(row: &[i64]) -> Result<usize> {
    let max_label = row.iter().copied().filter(|&l| l != MISSING).max();
    let Some(max_label) = max_label else {
        return Err(Error::InvalidArgument("annotation row has no labels".into()));
    };
    let mut counts = vec![0usize; max_label as usize + 1];
    for &l in row.iter().filter(|&&l| l != MISSING) {
        counts[l as usize] += 1;
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    Ok(counts.iter().position(|&c| c == best).unwrap_or(0))
}

/// Majority vote for every instance of an annotated dataset.
pub fn majority_labels(dataset: &CrowdDataset) -> Result<Vec<usize>> {
    (0..dataset.len())
        .map(|i| majority_vote(dataset.annotation_row(i)).map_err(|_| Error::EmptyAnnotationRow(i)))
        .collect()
}

pub fn one_hot(labels: &[usize], classes: usize) -> Matrix {
    Matrix::from_fn(labels.len(), classes, |i, j| if labels[i] == j { 1.0 } else { 0.0 })
}

/// Classifier trained on majority-vote labels.
pub fn train_dl_mv(splits: &CrowdSplits, config: &TrainConfig, rng: &Rng) -> Result<TrainOutcome<ClassifierParams>> {
    let labels = majority_labels(&splits.train)?;
    let objective = SoftLabelObjective {
        hidden: config.hidden,
        dropout: config.dropout,
        targets: one_hot(&labels, splits.train.num_classes()),
    };
    let mut outcome = train(&objective, splits, config, "dl_mv", rng)?;
    if let Some(truth) = splits.train.true_labels() {
        outcome.report.train_label_accuracy = Some(accuracy(&labels, truth));
    }
    Ok(outcome)
}

/// Crowd layer: per-annotator adaptation layers with no common component.
pub fn train_crowd_layer(splits: &CrowdSplits, config: &TrainConfig, rng: &Rng) -> Result<TrainOutcome<ConalParams>> {
    let objective = ConalObjective::from_config(config, Gate::Fixed(0.0), 0.0);
    train(&objective, splits, config, "dl_cl", rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vote_ties_go_low() {
        assert_eq!(majority_vote(&[2, 1, MISSING, 2, 1]).unwrap(), 1);
        assert_eq!(majority_vote(&[3, MISSING, 3, 0]).unwrap(), 3);
        assert_eq!(majority_vote(&[MISSING, 4]).unwrap(), 4);
    }

    #[test]
    fn vote_on_empty_row_fails() {
        assert!(majority_vote(&[MISSING, MISSING]).is_err());
        assert!(majority_vote(&[]).is_err());
    }

    #[test]
    fn one_hot_rows() {
        let m = one_hot(&[2, 0], 3);
        assert_eq!(m.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }
}
