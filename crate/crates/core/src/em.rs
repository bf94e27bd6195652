//! EM aggregation under the common/individual confusion model.
//!
//! Each observed annotation `y` of instance `i` by annotator `r` is drawn from
//! `w * pi_g[z, .] + (1 - w) * pi_r[z, .]` with a free per-cell weight `w`.
//! The E-step computes `q(z_i)` in the log domain and, for every cell and
//! class, the source responsibility `p(s = 1 | z = c, y)`. The M-step uses
//! the joint weights `q(z = c) * p(s | z = c, y)`, which is the exact EM update
//! for this model, so the featureless variant never decreases the observed-data
//! log-likelihood.
//!
//! Two variants differ only in the class prior: a shared distribution `rho`
//! (featureless) or a classifier `p_theta(z | x)` refit to `q(z)` each
//! iteration (coupled).

use serde::{Deserialize, Serialize};

use crate::baselines::majority_vote;
use crate::classifier::{soft_cross_entropy, ClassifierParams};
use crate::data::{ClassPrior, ConfusionMatrix, ConfusionRole, CrowdDataset, OmegaMatrix};
use crate::error::{Error, Result};
use crate::numerics::{argmax, log_sum_exp, Matrix, Rng, LOG_FLOOR};
use crate::optim::{Adam, AdamConfig, Optimizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmVariant {
    Featureless,
    Coupled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once the log-likelihood gains less than this.
    pub tol: f64,
    /// Diagonal of the initial confusion matrices; off-diagonal mass is uniform.
    pub init_diagonal: f64,
    pub init_omega: f64,
    /// Use each annotator's own matrix in place of the global one, which
    /// reduces the model to classical Dawid-Skene.
    pub tie_global_to_individual: bool,
    /// Coupled variant: gradient steps per M-step, learning rate and width.
    pub classifier_steps: usize,
    pub classifier_lr: f64,
    pub classifier_hidden: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
            init_diagonal: 0.8,
            init_omega: 0.5,
            tie_global_to_individual: false,
            classifier_steps: 50,
            classifier_lr: 0.01,
            classifier_hidden: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ClassModel {
    Prior(ClassPrior),
    Classifier(ClassifierParams),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmState {
    pub global: ConfusionMatrix,
    pub individual: Vec<ConfusionMatrix>,
    pub omega: OmegaMatrix,
    pub class_model: ClassModel,
    pub iteration: usize,
    /// Observed-data log-likelihood after each E-step.
    pub log_likelihood: Vec<f64>,
    pub tied: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Posteriors {
    /// q(z_i = c), N x C.
    pub qz: Matrix,
    /// q(s = 1) per observed cell, aligned with `dataset.cells()`.
    pub qs: Vec<f64>,
    /// p(s = 1 | z = c, y) per observed cell, cells x C.
    pub qs_given_class: Matrix,
}

/// Outcome of one M-step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MStepReport {
    /// Global rows whose responsibility mass was zero and kept their value.
    pub global_fallback_rows: Vec<usize>,
    /// (annotator, row) pairs that fell back likewise.
    pub individual_fallback_rows: Vec<(usize, usize)>,
}

fn near_identity(c: usize, diagonal: f64, role: ConfusionRole) -> Result<ConfusionMatrix> {
    let off = (1.0 - diagonal) / (c - 1) as f64;
    ConfusionMatrix::new(Matrix::from_fn(c, c, |a, b| if a == b { diagonal } else { off }), role)
}

impl EmState {
    /// Near-identity matrices, constant gate and a uniform prior (or a fresh
    /// classifier for the coupled variant).
    pub fn initial(dataset: &CrowdDataset, variant: EmVariant, config: &EmConfig, rng: &mut Rng) -> Result<Self> {
        let c = dataset.num_classes();
        if !(0.0..=1.0).contains(&config.init_diagonal) || !(0.0..=1.0).contains(&config.init_omega) {
            return Err(Error::InvalidArgument("init_diagonal and init_omega must be in [0, 1]".into()));
        }
        let class_model = match variant {
            EmVariant::Featureless => ClassModel::Prior(ClassPrior::uniform(c)),
            EmVariant::Coupled => ClassModel::Classifier(ClassifierParams::init(
                dataset.feature_dim(),
                config.classifier_hidden,
                c,
                rng,
            )),
        };
        Ok(Self {
            global: near_identity(c, config.init_diagonal, ConfusionRole::Global)?,
            individual: (0..dataset.num_annotators())
                .map(|r| near_identity(c, config.init_diagonal, ConfusionRole::Individual(r)))
                .collect::<Result<_>>()?,
            omega: OmegaMatrix::constant_on(dataset, config.init_omega),
            class_model,
            iteration: 0,
            log_likelihood: Vec::new(),
            tied: config.tie_global_to_individual,
        })
    }

    /// Per-instance class prior rows, N x C.
    pub fn class_priors(&self, dataset: &CrowdDataset) -> Matrix {
        match &self.class_model {
            ClassModel::Prior(p) => Matrix::from_fn(dataset.len(), p.probs().len(), |_, c| p.probs()[c]),
            ClassModel::Classifier(theta) => theta.forward(dataset.features(), None).probs,
        }
    }

    fn global_for(&self, annotator: usize) -> &ConfusionMatrix {
        if self.tied {
            &self.individual[annotator]
        } else {
            &self.global
        }
    }
}

/// Posterior over true classes and noise sources, plus the observed-data
/// log-likelihood under the current parameters.
pub fn e_step(state: &EmState, dataset: &CrowdDataset) -> (Posteriors, f64) {
    let c = dataset.num_classes();
    let priors = state.class_priors(dataset);
    let mut qz = Matrix::zeros(dataset.len(), c);
    let mut qs_given_class = Matrix::zeros(dataset.num_observed(), c);
    let mut qs = vec![0.0; dataset.num_observed()];
    let mut log_lik = 0.0;
    let mut log_joint = vec![0.0; c];
    let mut j = 0;
    for i in 0..dataset.len() {
        let cells = dataset.cells_of(i);
        for (k, lj) in log_joint.iter_mut().enumerate() {
            *lj = priors[(i, k)].max(LOG_FLOOR).ln();
        }
        for (off, cell) in cells.iter().enumerate() {
            let w = state.omega.get(i, cell.annotator).unwrap_or(0.0);
            let g = state.global_for(cell.annotator);
            let ind = &state.individual[cell.annotator];
            for (k, lj) in log_joint.iter_mut().enumerate() {
                let common = w * g.get(k, cell.label).max(LOG_FLOOR);
                let own = (1.0 - w) * ind.get(k, cell.label).max(LOG_FLOOR);
                *lj += (common + own).ln();
                qs_given_class[(j + off, k)] = if common + own > 0.0 { common / (common + own) } else { 0.0 };
            }
        }
        let norm = log_sum_exp(&log_joint);
        log_lik += norm;
        for (k, lj) in log_joint.iter().enumerate() {
            qz[(i, k)] = (lj - norm).exp();
        }
        for off in 0..cells.len() {
            qs[j + off] = (0..c).map(|k| qz[(i, k)] * qs_given_class[(j + off, k)]).sum::<f64>().clamp(0.0, 1.0);
        }
        j += cells.len();
    }
    (Posteriors { qz, qs, qs_given_class }, log_lik)
}

/// Closed-form updates of the gate, confusion matrices and (featureless)
/// class prior. Rows without responsibility mass keep their previous value.
pub fn m_step(state: &mut EmState, post: &Posteriors, dataset: &CrowdDataset) -> Result<MStepReport> {
    let c = dataset.num_classes();
    let r_count = dataset.num_annotators();
    let mut g_counts = Matrix::zeros(c, c);
    let mut r_counts = vec![Matrix::zeros(c, c); r_count];
    let mut omega = OmegaMatrix::empty(dataset.len(), r_count);
    for (j, cell) in dataset.cells().iter().enumerate() {
        omega.set(cell.instance, cell.annotator, post.qs[j])?;
        for k in 0..c {
            let qz = post.qz[(cell.instance, k)];
            let common = qz * post.qs_given_class[(j, k)];
            let own = qz - common;
            if state.tied {
                r_counts[cell.annotator][(k, cell.label)] += qz;
            } else {
                g_counts[(k, cell.label)] += common;
                r_counts[cell.annotator][(k, cell.label)] += own;
            }
        }
    }
    let mut report = MStepReport::default();
    let normalize = |counts: &Matrix, previous: &ConfusionMatrix, fallback: &mut Vec<usize>| -> Result<ConfusionMatrix> {
        let mut m = previous.entries().clone();
        for k in 0..c {
            let total: f64 = counts.row(k).iter().sum();
            if total > 0.0 {
                for (dst, v) in m.row_mut(k).iter_mut().zip(counts.row(k)) {
                    *dst = v / total;
                }
            } else {
                fallback.push(k);
            }
        }
        ConfusionMatrix::new(m, previous.role())
    };
    if !state.tied {
        state.global = normalize(&g_counts, &state.global, &mut report.global_fallback_rows)?;
    }
    for r in 0..r_count {
        let mut rows = Vec::new();
        state.individual[r] = normalize(&r_counts[r], &state.individual[r], &mut rows)?;
        report.individual_fallback_rows.extend(rows.into_iter().map(|k| (r, k)));
    }
    state.omega = omega;
    if let ClassModel::Prior(_) = state.class_model {
        let n = dataset.len().max(1) as f64;
        let mut rho: Vec<f64> = post.qz.sum_rows().into_iter().map(|v| v / n).collect();
        let total: f64 = rho.iter().sum();
        rho.iter_mut().for_each(|v| *v /= total);
        state.class_model = ClassModel::Prior(ClassPrior::new(rho)?);
    }
    Ok(report)
}

/// `steps` full-batch Adam steps on the cross-entropy between the
/// classifier's output and the `qz` targets.
pub fn m_step_classifier(
    qz: &Matrix,
    dataset: &CrowdDataset,
    params: &ClassifierParams,
    steps: usize,
    learning_rate: f64,
) -> Result<ClassifierParams> {
    let mut p = params.clone();
    let mut opt = Adam::new(&p, AdamConfig::default());
    let x = dataset.features();
    for step in 0..steps {
        let trace = p.forward(x, None);
        let (loss, g_logits) = soft_cross_entropy(&trace.probs, qz);
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch: step, learning_rate });
        }
        let grads = p.backward_from_logits(x, &trace, &g_logits);
        opt.step(&mut p, &grads, learning_rate);
    }
    Ok(p)
}

#[derive(Clone, Debug)]
pub struct EmOutcome {
    pub state: EmState,
    pub posteriors: Posteriors,
    /// argmax of `qz`, ties to the lowest class.
    pub labels: Vec<usize>,
}

/// Majority-vote soft counts, the starting posterior.
pub fn soft_vote(dataset: &CrowdDataset) -> Result<Matrix> {
    let c = dataset.num_classes();
    let mut qz = Matrix::zeros(dataset.len(), c);
    for i in 0..dataset.len() {
        let cells = dataset.cells_of(i);
        if cells.is_empty() {
            return Err(Error::EmptyAnnotationRow(i));
        }
        for cell in cells {
            qz[(i, cell.label)] += 1.0 / cells.len() as f64;
        }
    }
    Ok(qz)
}

/// Alternates M- and E-steps starting from the soft vote. `on_iteration`
/// sees the state after each E-step (used for model selection).
pub fn run_em_with(
    dataset: &CrowdDataset,
    variant: EmVariant,
    config: &EmConfig,
    rng: &mut Rng,
    mut on_iteration: impl FnMut(&EmState, &Posteriors),
) -> Result<EmOutcome> {
    // every instance must carry at least one annotation
    for i in 0..dataset.len() {
        majority_vote(dataset.annotation_row(i))?;
    }
    let mut state = EmState::initial(dataset, variant, config, rng)?;
    let qz = soft_vote(dataset)?;
    let qs_given_class = Matrix::filled(dataset.num_observed(), dataset.num_classes(), config.init_omega);
    let mut post = Posteriors { qz, qs: vec![config.init_omega; dataset.num_observed()], qs_given_class };

    for _ in 0..config.max_iters {
        m_step(&mut state, &post, dataset)?;
        if let ClassModel::Classifier(theta) = &state.class_model {
            let theta = m_step_classifier(&post.qz, dataset, theta, config.classifier_steps, config.classifier_lr)?;
            state.class_model = ClassModel::Classifier(theta);
        }
        let (next, ll) = e_step(&state, dataset);
        post = next;
        state.iteration += 1;
        let previous = state.log_likelihood.last().copied();
        state.log_likelihood.push(ll);
        on_iteration(&state, &post);
        if let Some(prev) = previous {
            if (ll - prev).abs() < config.tol {
                break;
            }
        }
    }
    let labels = post.qz.row_iter().map(argmax).collect();
    Ok(EmOutcome { state, posteriors: post, labels })
}

pub fn run_em(dataset: &CrowdDataset, variant: EmVariant, config: &EmConfig, rng: &mut Rng) -> Result<EmOutcome> {
    run_em_with(dataset, variant, config, rng, |_, _| {})
}
