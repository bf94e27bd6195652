//! Minimax lower bound on the label error rate, the log-sum decomposition
//! of mixture KL terms, and the sample-size threshold beyond which the bound
//! shrinks. All logarithms are natural.

use serde::{Deserialize, Serialize};

use crate::data::{ClassPrior, ConfusionMatrix, OmegaMatrix};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, LOG_FLOOR};

/// KL(p || q) with q floored at 1e-12 and 0 log 0 = 0.
pub fn kl_rows(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(LOG_FLOOR)).ln())
        .sum()
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Inputs to the bound: one class-prior row per instance, the confusion
/// matrices, and the common-noise probabilities. Annotators whose gate is
/// undefined for an instance do not contribute to that instance's term.
#[derive(Clone, Debug)]
pub struct BoundInput {
    pub priors: Matrix,
    pub global: ConfusionMatrix,
    pub individual: Vec<ConfusionMatrix>,
    pub omega: OmegaMatrix,
}

impl BoundInput {
    pub fn new(priors: Matrix, global: ConfusionMatrix, individual: Vec<ConfusionMatrix>, omega: OmegaMatrix) -> Result<Self> {
        let c = global.num_classes();
        if c < 2 {
            return Err(Error::InvalidArgument("the bound needs at least two classes".into()));
        }
        if priors.cols() != c || individual.iter().any(|m| m.num_classes() != c) {
            return Err(Error::Shape(format!("prior width and confusion sizes must all be {c}")));
        }
        if omega.rows() != priors.rows() || omega.cols() != individual.len() {
            return Err(Error::Shape(format!(
                "omega is {}x{}, expected {}x{}",
                omega.rows(),
                omega.cols(),
                priors.rows(),
                individual.len()
            )));
        }
        for row in priors.row_iter() {
            ClassPrior::new(row.to_vec())?;
        }
        Ok(Self { priors, global, individual, omega })
    }

    /// Every instance shares `prior` and every (instance, annotator) pair
    /// shares `omega`.
    pub fn replicated(
        prior: &[f64],
        n: usize,
        global: ConfusionMatrix,
        individual: Vec<ConfusionMatrix>,
        omega: f64,
    ) -> Result<Self> {
        let priors = Matrix::from_fn(n, prior.len(), |_, c| prior[c]);
        let mut om = OmegaMatrix::empty(n, individual.len());
        for i in 0..n {
            for r in 0..individual.len() {
                om.set(i, r, omega)?;
            }
        }
        Self::new(priors, global, individual, om)
    }

    pub fn num_instances(&self) -> usize {
        self.priors.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.global.num_classes()
    }

    /// Number of confusion entries that fall below the 1e-12 floor.
    pub fn floored_entries(&self) -> usize {
        std::iter::once(&self.global)
            .chain(&self.individual)
            .map(|m| m.entries().data().iter().filter(|&&v| v < LOG_FLOOR).count())
            .sum()
    }
}

fn pairwise_kl(m: &ConfusionMatrix) -> Matrix {
    let c = m.num_classes();
    Matrix::from_fn(c, c, |a, b| kl_rows(m.row(a), m.row(b)))
}

/// Per-instance term H(rho_i) minus the prior-weighted pairwise KL of the
/// confusion rows, summed over annotators.
pub fn f_terms(input: &BoundInput) -> Vec<f64> {
    let c = input.num_classes();
    let global_kl = pairwise_kl(&input.global);
    let individual_kl: Vec<Matrix> = input.individual.iter().map(pairwise_kl).collect();
    (0..input.num_instances())
        .map(|i| {
            let rho = input.priors.row(i);
            let mut penalty = 0.0;
            for (r, ind_kl) in individual_kl.iter().enumerate() {
                let Some(w) = input.omega.get(i, r) else { continue };
                for a in 0..c {
                    for b in 0..c {
                        penalty += rho[a] * rho[b] * (w * global_kl[(a, b)] + (1.0 - w) * ind_kl[(a, b)]);
                    }
                }
            }
            entropy(rho) - penalty
        })
        .collect()
}

/// (sum_i F_i) / (N^2 log C) - log 2 / (N^2 log C).
pub fn lower_bound(input: &BoundInput) -> f64 {
    let n = input.num_instances() as f64;
    let denom = n * n * (input.num_classes() as f64).ln();
    let total: f64 = f_terms(input).iter().sum();
    (total - std::f64::consts::LN_2) / denom
}

/// (mixture KL, decomposed KL) for rows `c` and `c2` of the
/// omega-weighted mixture of two confusion matrices.
pub fn decomposition_gap(global: &ConfusionMatrix, individual: &ConfusionMatrix, omega: f64, c: usize, c2: usize) -> (f64, f64) {
    let mix = |row: usize| -> Vec<f64> {
        global.row(row).iter().zip(individual.row(row)).map(|(g, r)| omega * g + (1.0 - omega) * r).collect()
    };
    let mixture = kl_rows(&mix(c), &mix(c2));
    let decomposed = omega * kl_rows(global.row(c), global.row(c2))
        + (1.0 - omega) * kl_rows(individual.row(c), individual.row(c2));
    (mixture, decomposed)
}

/// Smallest N for which adding instances lowers the bound:
/// ceil(2 log 2 / max_i F_i).
pub fn corollary_threshold(input: &BoundInput) -> Result<u64> {
    let max_f = f_terms(input).into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max_f <= 0.0 || !max_f.is_finite() {
        return Err(Error::VacuousBound);
    }
    Ok((2.0 * std::f64::consts::LN_2 / max_f).ceil() as u64)
}

pub fn error_rate(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", predicted.len(), truth.len())));
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    Ok(predicted.iter().zip(truth).filter(|(a, b)| a != b).count() as f64 / truth.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub num_instances: usize,
    pub num_classes: usize,
    pub bound: f64,
    pub f_min: f64,
    pub f_mean: f64,
    pub f_max: f64,
    /// `None` when every F term is non-positive.
    pub corollary_threshold: Option<u64>,
    pub floored_entries: usize,
}

pub fn bound_report(input: &BoundInput) -> BoundReport {
    let f = f_terms(input);
    let n = f.len().max(1) as f64;
    BoundReport {
        num_instances: input.num_instances(),
        num_classes: input.num_classes(),
        bound: lower_bound(input),
        f_min: f.iter().copied().fold(f64::INFINITY, f64::min),
        f_mean: f.iter().sum::<f64>() / n,
        f_max: f.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        corollary_threshold: corollary_threshold(input).ok(),
        floored_entries: input.floored_entries(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ConfusionRole;
    use std::f64::consts::LN_2;

    fn conf(rows: &[Vec<f64>]) -> ConfusionMatrix {
        ConfusionMatrix::new(Matrix::from_rows(rows).unwrap(), ConfusionRole::Global).unwrap()
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_rows(&[0.2, 0.8], &[0.2, 0.8]), 0.0);
        assert!((kl_rows(&[1.0, 0.0], &[0.5, 0.5]) - LN_2).abs() < 1e-15);
        let a = kl_rows(&[0.9, 0.1], &[0.5, 0.5]);
        let b = kl_rows(&[0.5, 0.5], &[0.9, 0.1]);
        assert!((a - 0.3681).abs() < 5e-5, "{a}");
        assert!((b - 0.5108).abs() < 5e-5, "{b}");
    }

    #[test]
    fn kl_floors_zero_denominators() {
        let v = kl_rows(&[0.5, 0.5], &[1.0, 0.0]);
        assert!(v.is_finite() && v > 10.0);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-15);
        assert!((entropy(&[0.5, 0.25, 0.25]) - 1.0397).abs() < 5e-5);
    }

    #[test]
    fn identical_rows_give_entropy() {
        let same = conf(&vec![vec![0.6, 0.3, 0.1]; 3]);
        let prior = [0.2, 0.5, 0.3];
        let input = BoundInput::replicated(&prior, 4, same.clone(), vec![same.clone(), same], 0.4).unwrap();
        for f in f_terms(&input) {
            assert!((f - entropy(&prior)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_instance_cancels() {
        let same = conf(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let input = BoundInput::replicated(&[0.5, 0.5], 1, same.clone(), vec![same], 0.5).unwrap();
        assert_eq!(lower_bound(&input), 0.0);
    }

    #[test]
    fn decomposition_endpoints() {
        let g = conf(&[vec![0.7, 0.3], vec![0.2, 0.8]]);
        let r = conf(&[vec![0.4, 0.6], vec![0.9, 0.1]]);
        let (m0, d0) = decomposition_gap(&g, &r, 0.0, 0, 1);
        assert!((m0 - kl_rows(r.row(0), r.row(1))).abs() < 1e-15 && (d0 - m0).abs() < 1e-15);
        let (m1, d1) = decomposition_gap(&g, &r, 1.0, 0, 1);
        assert!((m1 - kl_rows(g.row(0), g.row(1))).abs() < 1e-15 && (d1 - m1).abs() < 1e-15);
    }

    #[test]
    fn threshold_examples() {
        // identical rows make F = H(rho); H([1/2,1/2]) = log 2, H(uniform 4) = 2 log 2
        let same2 = conf(&vec![vec![0.5, 0.5]; 2]);
        let input = BoundInput::replicated(&[0.5, 0.5], 3, same2.clone(), vec![same2], 0.5).unwrap();
        assert_eq!(corollary_threshold(&input).unwrap(), 2);
        let same4 = conf(&vec![vec![0.25; 4]; 4]);
        let input = BoundInput::replicated(&[0.25; 4], 3, same4.clone(), vec![same4], 0.5).unwrap();
        assert_eq!(corollary_threshold(&input).unwrap(), 1);
    }

    #[test]
    fn vacuous_threshold() {
        let id = conf(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let input = BoundInput::replicated(&[0.5, 0.5], 2, id.clone(), vec![id], 0.5).unwrap();
        assert!(matches!(corollary_threshold(&input), Err(Error::VacuousBound)));
        assert!(bound_report(&input).floored_entries == 4);
    }

    #[test]
    fn error_rate_examples() {
        assert_eq!(error_rate(&[1, 2], &[1, 2]).unwrap(), 0.0);
        assert_eq!(error_rate(&[0, 0], &[1, 1]).unwrap(), 1.0);
        assert_eq!(error_rate(&[0, 1, 2], &[0, 1, 0]).unwrap(), 1.0 / 3.0);
        assert!(error_rate(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn one_class_rejected() {
        let one = conf(&[vec![1.0]]);
        assert!(BoundInput::replicated(&[1.0], 1, one.clone(), vec![one], 0.5).is_err());
    }
}
