//! Mini-batch training with validation-based checkpoint selection, and the
//! multi-seed grid runner.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{soft_cross_entropy, ClassifierParams};
use crate::conal::{self, ConalParams, Gate, InitConfig, ModelDims};
use crate::data::{CrowdDataset, CrowdSplits};
use crate::em::EmConfig;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};
use crate::optim::{make_optimizer, AdamConfig, OptimizerKind, Parameters};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lambda: f64,
    pub embed_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub optimizer: OptimizerKind,
    pub adam: AdamConfig,
    pub init: InitConfig,
    pub em: EmConfig,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            lambda: 1e-5,
            embed_dim: 20,
            hidden: 128,
            epochs: 100,
            batch_size: 256,
            dropout: 0.5,
            optimizer: OptimizerKind::Adam,
            adam: AdamConfig::default(),
            init: InitConfig::default(),
            em: EmConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.learning_rate > 0.0 && self.learning_rate.is_finite();
        if !positive || self.batch_size == 0 || self.hidden == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidArgument(
                "learning_rate, batch_size, hidden and embed_dim must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !self.lambda.is_finite() {
            return Err(Error::InvalidArgument("lambda must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: String,
    pub seed: u64,
    /// Epoch 0 is the initialization for gradient-trained methods; EM
    /// methods record one entry per iteration.
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    /// Accuracy of the labels a method aggregated on the training split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_label_accuracy: Option<f64>,
}

impl TrainReport {
    /// Per-epoch curve as CSV text.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_acc,test_acc\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.val_accuracy, e.test_accuracy));
        }
        out
    }
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// A trainable model: parameters, a stochastic batch gradient and the
/// classifier used for evaluation.
pub trait Objective: Sync {
    type Params: Parameters + Send + Sync + 'static;

    fn init(&self, train: &CrowdDataset, rng: &mut Rng) -> Self::Params;

    /// Loss and gradient on the training instances `batch`, dropout on.
    fn batch_loss_and_grad(
        &self,
        params: &Self::Params,
        train: &CrowdDataset,
        batch: &[usize],
        rng: &mut Rng,
    ) -> Result<(f64, Self::Params)>;

    /// Loss on the whole training split, dropout off.
    fn eval_loss(&self, params: &Self::Params, train: &CrowdDataset) -> Result<f64>;

    fn classifier<'a>(&self, params: &'a Self::Params) -> &'a ClassifierParams;
}

/// The full model, or the crowd layer when `gate` is fixed at 0.
#[derive(Clone, Debug)]
pub struct ConalObjective {
    pub hidden: usize,
    pub embed: usize,
    pub init: InitConfig,
    pub dropout: f64,
    pub gate: Gate,
    pub lambda: f64,
}

impl ConalObjective {
    pub fn from_config(cfg: &TrainConfig, gate: Gate, lambda: f64) -> Self {
        Self { hidden: cfg.hidden, embed: cfg.embed_dim, init: cfg.init, dropout: cfg.dropout, gate, lambda }
    }
}

impl Objective for ConalObjective {
    type Params = ConalParams;

    fn init(&self, train: &CrowdDataset, rng: &mut Rng) -> ConalParams {
        let dims = ModelDims {
            input: train.feature_dim(),
            hidden: self.hidden,
            classes: train.num_classes(),
            annotators: train.num_annotators(),
            embed: self.embed,
        };
        conal::init_params(dims, self.init, rng)
    }

    fn batch_loss_and_grad(
        &self,
        params: &ConalParams,
        train: &CrowdDataset,
        batch: &[usize],
        rng: &mut Rng,
    ) -> Result<(f64, ConalParams)> {
        let data = train.subset(batch);
        let trace = conal::forward(params, &data, self.gate, Some((self.dropout, rng)))?;
        let loss = conal::loss(params, &data, self.lambda, &trace);
        Ok((loss, conal::backward(params, &data, self.lambda, &trace)))
    }

    fn eval_loss(&self, params: &ConalParams, train: &CrowdDataset) -> Result<f64> {
        let trace = conal::forward(params, train, self.gate, None)?;
        Ok(conal::loss(params, train, self.lambda, &trace))
    }

    fn classifier<'a>(&self, params: &'a ConalParams) -> &'a ClassifierParams {
        &params.classifier
    }
}

/// Plain classifier trained on fixed (possibly soft) per-instance targets.
#[derive(Clone, Debug)]
pub struct SoftLabelObjective {
    pub hidden: usize,
    pub dropout: f64,
    /// N_train x C, rows sum to one.
    pub targets: Matrix,
}

impl Objective for SoftLabelObjective {
    type Params = ClassifierParams;

    fn init(&self, train: &CrowdDataset, rng: &mut Rng) -> ClassifierParams {
        ClassifierParams::init(train.feature_dim(), self.hidden, train.num_classes(), rng)
    }

    fn batch_loss_and_grad(
        &self,
        params: &ClassifierParams,
        train: &CrowdDataset,
        batch: &[usize],
        rng: &mut Rng,
    ) -> Result<(f64, ClassifierParams)> {
        let x = train.features().select_rows(batch);
        let t = self.targets.select_rows(batch);
        let trace = params.forward(&x, Some((self.dropout, rng)));
        let (loss, g) = soft_cross_entropy(&trace.probs, &t);
        Ok((loss, params.backward_from_logits(&x, &trace, &g)))
    }

    fn eval_loss(&self, params: &ClassifierParams, train: &CrowdDataset) -> Result<f64> {
        let probs = params.forward(train.features(), None).probs;
        Ok(soft_cross_entropy(&probs, &self.targets).0)
    }

    fn classifier<'a>(&self, params: &'a ClassifierParams) -> &'a ClassifierParams {
        params
    }
}

pub struct TrainOutcome<P> {
    pub report: TrainReport,
    /// Parameters at the selected epoch.
    pub best: P,
}

/// Classifier accuracy on a labeled evaluation split.
pub fn evaluate(classifier: &ClassifierParams, data: &CrowdDataset) -> Result<f64> {
    let truth = data.require_labels("evaluation")?;
    let (_, pred) = classifier.predict(data.features());
    Ok(accuracy(&pred, truth))
}

/// Runs `config.epochs` epochs of shuffled mini-batches and keeps the
/// parameters with the best validation accuracy (earliest epoch on ties).
///
/// Sub-streams of `rng`: 0 initialization, 1 shuffling, 2 dropout.
pub fn train<O: Objective>(
    objective: &O,
    splits: &CrowdSplits,
    config: &TrainConfig,
    method: &str,
    rng: &Rng,
) -> Result<TrainOutcome<O::Params>> {
    config.validate()?;
    splits.validation.require_labels("validation accuracy")?;
    splits.test.require_labels("test accuracy")?;
    let train = &splits.train;
    let mut params = objective.init(train, &mut rng.fork(0));
    let mut shuffle_rng = rng.fork(1);
    let mut dropout_rng = rng.fork(2);
    let mut optimizer = make_optimizer(config.optimizer, &params, config.adam);

    let evaluate_epoch = |epoch: usize, params: &O::Params| -> Result<EpochRecord> {
        let train_loss = objective.eval_loss(params, train)?;
        if !train_loss.is_finite() {
            return Err(Error::Diverged { epoch, learning_rate: config.learning_rate });
        }
        let clf = objective.classifier(params);
        Ok(EpochRecord {
            epoch,
            train_loss,
            val_accuracy: evaluate(clf, &splits.validation)?,
            test_accuracy: evaluate(clf, &splits.test)?,
        })
    };

    let first = evaluate_epoch(0, &params)?;
    let mut best = params.clone();
    let mut best_record = first.clone();
    let mut records = vec![first];
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.epochs {
        shuffle_rng.shuffle(&mut order);
        for batch in order.chunks(config.batch_size) {
            let (loss, grads) = objective.batch_loss_and_grad(&params, train, batch, &mut dropout_rng)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged { epoch, learning_rate: config.learning_rate });
            }
            optimizer.step(&mut params, &grads, config.learning_rate);
        }
        let record = evaluate_epoch(epoch, &params)?;
        if record.val_accuracy > best_record.val_accuracy {
            best_record = record.clone();
            best = params.clone();
        }
        records.push(record);
    }
    log::debug!(
        "{method} seed {}: selected epoch {} (val {:.4}, test {:.4})",
        rng.seed(),
        best_record.epoch,
        best_record.val_accuracy,
        best_record.test_accuracy
    );
    Ok(TrainOutcome {
        report: TrainReport {
            method: method.to_string(),
            seed: rng.seed(),
            epochs: records,
            selected_epoch: best_record.epoch,
            val_accuracy: best_record.val_accuracy,
            test_accuracy: best_record.test_accuracy,
            train_label_accuracy: None,
        },
        best,
    })
}

/// The full model with a learned gate.
pub fn train_conal(splits: &CrowdSplits, config: &TrainConfig, rng: &Rng) -> Result<TrainOutcome<ConalParams>> {
    let objective = ConalObjective::from_config(config, Gate::Learned, config.lambda);
    train(&objective, splits, config, "conal", rng)
}

pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub name: String,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub name: String,
    pub config: TrainConfig,
    pub mean_test: f64,
    pub std_test: f64,
    pub mean_val: f64,
    pub std_val: f64,
    pub reports: Vec<TrainReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub cells: Vec<CellSummary>,
    /// Index of the cell with the highest mean validation accuracy
    /// (earliest on ties).
    pub best_cell: usize,
}

/// Runs `run(cell config, seed)` for every cell and seed in parallel and
/// summarizes test accuracy per cell.
pub fn run_grid<F>(grid: &[GridCell], seeds: &[u64], run: F) -> Result<GridSummary>
where
    F: Fn(&TrainConfig, u64) -> Result<TrainReport> + Sync,
{
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("grid and seed list must be nonempty".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..grid.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let reports: Vec<Result<TrainReport>> = jobs.par_iter().map(|&(c, s)| run(&grid[c].config, s)).collect();
    let mut reports = reports.into_iter();
    let mut cells = Vec::with_capacity(grid.len());
    for cell in grid {
        let rs = reports.by_ref().take(seeds.len()).collect::<Result<Vec<_>>>()?;
        let (mean_test, std_test) = mean_and_std(&rs.iter().map(|r| r.test_accuracy).collect::<Vec<_>>());
        let (mean_val, std_val) = mean_and_std(&rs.iter().map(|r| r.val_accuracy).collect::<Vec<_>>());
        cells.push(CellSummary {
            name: cell.name.clone(),
            config: cell.config.clone(),
            mean_test,
            std_test,
            mean_val,
            std_val,
            reports: rs,
        });
    }
    let mut best_cell = 0;
    for (i, c) in cells.iter().enumerate() {
        if c.mean_val > cells[best_cell].mean_val {
            best_cell = i;
        }
    }
    Ok(GridSummary { cells, best_cell })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        let (m, s) = mean_and_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_and_std(&[0.7; 5]).1, 0.0);
        assert_eq!(mean_and_std(&[0.3]), (0.3, 0.0));
    }

    #[test]
    fn accuracy_counts() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 0]), 2.0 / 3.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { dropout: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_config_keys_rejected() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 0.1, "lr": 2}"#);
        assert!(err.is_err());
        let ok: TrainConfig = serde_json::from_str(r#"{"learning_rate": 0.02}"#).unwrap();
        assert_eq!(ok.learning_rate, 0.02);
        assert_eq!(ok.batch_size, 256);
    }

    #[test]
    fn grid_rejects_empty() {
        let r = run_grid(&[], &[1], |_, _| unreachable!());
        assert!(r.is_err());
    }
}
