//! Named learning methods behind a common interface.

use std::collections::BTreeMap;

use crate::baselines::{train_crowd_layer, train_dl_mv};
use crate::conal::{self, Checkpoint, Gate};
use crate::data::{ConfusionMatrix, CrowdSplits, OmegaMatrix};
use crate::em::{run_em, run_em_with, ClassModel, EmVariant};
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::training::{accuracy, evaluate, train, train_conal, EpochRecord, SoftLabelObjective, TrainConfig, TrainReport};

/// Everything a method produces on one split set and seed.
#[derive(Clone, Debug)]
pub struct MethodRun {
    pub report: TrainReport,
    pub checkpoint: Checkpoint,
    pub global_confusion: Option<ConfusionMatrix>,
    pub individual_confusions: Vec<ConfusionMatrix>,
    /// Estimated common-noise probability on the training cells.
    pub train_omega: Option<OmegaMatrix>,
    /// EM observed-data log-likelihood per iteration.
    pub log_likelihood: Vec<f64>,
}

impl MethodRun {
    fn classifier_only(report: TrainReport, checkpoint: Checkpoint) -> Self {
        Self {
            report,
            checkpoint,
            global_confusion: None,
            individual_confusions: Vec::new(),
            train_omega: None,
            log_likelihood: Vec::new(),
        }
    }
}

pub trait Method: Send + Sync {
    fn name(&self) -> &'static str;
    fn description(&self) -> &'static str;
    fn run(&self, splits: &CrowdSplits, config: &TrainConfig, seed: u64) -> Result<MethodRun>;
}

pub struct Conal;

impl Method for Conal {
    fn name(&self) -> &'static str {
        "conal"
    }

    fn description(&self) -> &'static str {
        "classifier with gated common and per-annotator adaptation layers"
    }

    fn run(&self, splits: &CrowdSplits, config: &TrainConfig, seed: u64) -> Result<MethodRun> {
        let outcome = train_conal(splits, config, &Rng::new(seed))?;
        let (global, individual) = conal::recover_confusions(&outcome.best);
        let trace = conal::forward(&outcome.best, &splits.train, Gate::Learned, None)?;
        Ok(MethodRun {
            report: outcome.report,
            global_confusion: Some(global),
            individual_confusions: individual,
            train_omega: Some(trace.omega_matrix(&splits.train)),
            checkpoint: Checkpoint::Conal(outcome.best),
            log_likelihood: Vec::new(),
        })
    }
}

pub struct DlMv;

impl Method for DlMv {
    fn name(&self) -> &'static str {
        "dl_mv"
    }

    fn description(&self) -> &'static str {
        "classifier trained on majority-vote labels"
    }

    fn run(&self, splits: &CrowdSplits, config: &TrainConfig, seed: u64) -> Result<MethodRun> {
        let outcome = train_dl_mv(splits, config, &Rng::new(seed))?;
        Ok(MethodRun::classifier_only(outcome.report, Checkpoint::Classifier(outcome.best)))
    }
}

pub struct CrowdLayer;

impl Method for CrowdLayer {
    fn name(&self) -> &'static str {
        "dl_cl"
    }

    fn description(&self) -> &'static str {
        "classifier with per-annotator adaptation layers only"
    }

    fn run(&self, splits: &CrowdSplits, config: &TrainConfig, seed: u64) -> Result<MethodRun> {
        let outcome = train_crowd_layer(splits, config, &Rng::new(seed))?;
        let (_, individual) = conal::recover_confusions(&outcome.best);
        Ok(MethodRun {
            report: outcome.report,
            global_confusion: None,
            individual_confusions: individual,
            train_omega: None,
            checkpoint: Checkpoint::Conal(outcome.best),
            log_likelihood: Vec::new(),
        })
    }
}

/// EM with a class prior, then a classifier fit to the posterior labels.
pub struct EmFeatureless;

impl Method for EmFeatureless {
    fn name(&self) -> &'static str {
        "em_featureless"
    }

    fn description(&self) -> &'static str {
        "EM over common/individual noise with a class prior, then a classifier on the posteriors"
    }

    fn run(&self, splits: &CrowdSplits, config: &TrainConfig, seed: u64) -> Result<MethodRun> {
        let rng = Rng::new(seed);
        let em = run_em(&splits.train, EmVariant::Featureless, &config.em, &mut rng.fork(10))?;
        let objective = SoftLabelObjective {
            hidden: config.hidden,
            dropout: config.dropout,
            targets: em.posteriors.qz.clone(),
        };
        let mut outcome = train(&objective, splits, config, self.name(), &rng)?;
        if let Some(truth) = splits.train.true_labels() {
            outcome.report.train_label_accuracy = Some(accuracy(&em.labels, truth));
        }
        Ok(MethodRun {
            report: outcome.report,
            checkpoint: Checkpoint::Classifier(outcome.best),
            global_confusion: (!em.state.tied).then(|| em.state.global.clone()),
            individual_confusions: em.state.individual,
            train_omega: Some(em.state.omega),
            log_likelihood: em.state.log_likelihood,
        })
    }
}

/// EM whose class prior is a classifier refit in every M-step; the
/// iteration with the best validation accuracy is kept.
pub struct EmCoupled;

impl Method for EmCoupled {
    fn name(&self) -> &'static str {
        "em_coupled"
    }

    fn description(&self) -> &'static str {
        "EM over common/individual noise with a neural class model"
    }

    fn run(&self, splits: &CrowdSplits, config: &TrainConfig, seed: u64) -> Result<MethodRun> {
        let rng = Rng::new(seed);
        splits.validation.require_labels("validation accuracy")?;
        splits.test.require_labels("test accuracy")?;
        let mut records = Vec::new();
        let mut best: Option<(EpochRecord, crate::em::EmState)> = None;
        let mut failure = None;
        let n = splits.train.len().max(1) as f64;
        let em_config = crate::em::EmConfig { classifier_hidden: config.hidden, ..config.em.clone() };
        let em = run_em_with(&splits.train, EmVariant::Coupled, &em_config, &mut rng.fork(10), |state, _| {
            let ClassModel::Classifier(theta) = &state.class_model else { return };
            let scores = evaluate(theta, &splits.validation).and_then(|v| Ok((v, evaluate(theta, &splits.test)?)));
            let (val_accuracy, test_accuracy) = match scores {
                Ok(s) => s,
                Err(e) => {
                    failure.get_or_insert(e);
                    return;
                }
            };
            let record = EpochRecord {
                epoch: state.iteration,
                train_loss: -state.log_likelihood.last().copied().unwrap_or(f64::NAN) / n,
                val_accuracy,
                test_accuracy,
            };
            if best.as_ref().is_none_or(|(b, _)| record.val_accuracy > b.val_accuracy) {
                best = Some((record.clone(), state.clone()));
            }
            records.push(record);
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        let (record, state) = best.ok_or_else(|| Error::InvalidArgument("em.max_iters must be positive".into()))?;
        let ClassModel::Classifier(theta) = state.class_model.clone() else {
            unreachable!("coupled EM keeps a classifier")
        };
        let report = TrainReport {
            method: self.name().to_string(),
            seed,
            epochs: records,
            selected_epoch: record.epoch,
            val_accuracy: record.val_accuracy,
            test_accuracy: record.test_accuracy,
            train_label_accuracy: splits.train.true_labels().map(|t| accuracy(&em.labels, t)),
        };
        Ok(MethodRun {
            report,
            checkpoint: Checkpoint::Classifier(theta),
            global_confusion: (!state.tied).then(|| state.global.clone()),
            individual_confusions: state.individual.clone(),
            train_omega: Some(state.omega.clone()),
            log_likelihood: em.state.log_likelihood,
        })
    }
}

/// Methods selectable by name.
pub struct MethodRegistry {
    methods: BTreeMap<&'static str, Box<dyn Method>>,
}

impl MethodRegistry {
    pub fn empty() -> Self {
        Self { methods: BTreeMap::new() }
    }

    pub fn register(&mut self, method: Box<dyn Method>) {
        self.methods.insert(method.name(), method);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Method> {
        self.methods.get(name).map(|m| m.as_ref()).ok_or_else(|| Error::UnknownMethod(name.to_string()))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.methods.keys().copied().collect()
    }
}

impl Default for MethodRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(Conal));
        r.register(Box::new(DlMv));
        r.register(Box::new(CrowdLayer));
        r.register(Box::new(EmFeatureless));
        r.register(Box::new(EmCoupled));
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_lookup() {
        let r = MethodRegistry::default();
        assert_eq!(r.names(), vec!["conal", "dl_cl", "dl_mv", "em_coupled", "em_featureless"]);
        assert_eq!(r.get("dl_cl").unwrap().name(), "dl_cl");
        assert!(matches!(r.get("svm"), Err(Error::UnknownMethod(n)) if n == "svm"));
    }
}
