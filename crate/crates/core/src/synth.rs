//! Synthetic crowdsourced data with planted common and individual confusions.
//!
//! Instances are unit-covariance Gaussians around per-class means. Each
//! training instance is labeled by a fixed number of annotators drawn without
//! replacement. For every annotation a hidden gate
//! `omega = sigmoid(u_r . v_i + offset)` picks the global confusion matrix
//! (probability `omega`) or the annotator's own matrix, and the label is drawn
//! from the chosen matrix's row for the true class. `u_r` and `v_i` come from
//! private linear maps and are L2-normalized, matching the learner's gate.

use serde::{Deserialize, Serialize};

use crate::data::{ConfusionMatrix, ConfusionRole, CrowdDataset, CrowdSplits, OmegaMatrix, Split, MISSING};
use crate::error::{Error, Result};
use crate::numerics::{dot, l2_norm, sample_categorical, sigmoid, Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoisePattern {
    /// Every class flips to one uniformly chosen other class.
    Asymmetric,
    /// Classes are paired at random and flip into each other.
    Symmetric,
}

impl std::str::FromStr for NoisePattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asymmetric" => Ok(Self::Asymmetric),
            "symmetric" => Ok(Self::Symmetric),
            _ => Err(Error::InvalidArgument(format!("unknown noise pattern `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// Pattern of the global matrix. Individual matrices are always asymmetric.
    pub pattern: NoisePattern,
    /// Per-row off-diagonal mass of the global matrix.
    pub common_strength: f64,
    /// Per-row off-diagonal mass of every individual matrix.
    pub individual_strength: f64,
    /// Mean gate over observed annotations; 0 disables the global matrix.
    pub target_common_proportion: f64,
    pub num_annotators: usize,
    pub labels_per_instance: usize,
    /// Width of the hidden annotator/instance embeddings.
    pub embed_dim: usize,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            pattern: NoisePattern::Asymmetric,
            common_strength: 0.7,
            individual_strength: 0.7,
            target_common_proportion: 0.5,
            num_annotators: 30,
            labels_per_instance: 3,
            embed_dim: 20,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be in [0, 1], got {v}")))
            }
        };
        unit("common_strength", self.common_strength)?;
        unit("individual_strength", self.individual_strength)?;
        unit("target_common_proportion", self.target_common_proportion)?;
        if self.target_common_proportion == 1.0 {
            return Err(Error::InvalidArgument("target_common_proportion must be below 1".into()));
        }
        if self.num_annotators == 0 || self.labels_per_instance == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidArgument("annotator count, labels per instance and embed_dim must be positive".into()));
        }
        if self.labels_per_instance > self.num_annotators {
            return Err(Error::InvalidArgument(format!(
                "labels_per_instance {} exceeds num_annotators {}",
                self.labels_per_instance, self.num_annotators
            )));
        }
        Ok(())
    }
}

/// Instance layout of a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InstanceSpec {
    pub num_instances: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Standard deviation of the class-mean prior.
    pub mean_scale: f64,
    pub train_fraction: f64,
    pub validation_fraction: f64,
}

impl Default for InstanceSpec {
    fn default() -> Self {
        Self {
            num_instances: 10_000,
            num_classes: 6,
            feature_dim: 20,
            mean_scale: 2.0,
            train_fraction: 0.8,
            validation_fraction: 0.1,
        }
    }
}

impl InstanceSpec {
    /// (train, validation, test) sizes; rounding goes to the test split.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.num_instances;
        let train = (n as f64 * self.train_fraction).round() as usize;
        let val = ((n as f64 * self.validation_fraction).round() as usize).min(n - train);
        (train, val, n - train - val)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_instances == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidArgument("num_instances and feature_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        if !(self.mean_scale >= 0.0 && self.mean_scale.is_finite()) {
            return Err(Error::InvalidArgument("mean_scale must be non-negative".into()));
        }
        let (tr, va, _) = (self.train_fraction, self.validation_fraction, ());
        if !(0.0..=1.0).contains(&tr) || !(0.0..=1.0).contains(&va) || tr + va > 1.0 {
            return Err(Error::InvalidArgument("split fractions must lie in [0, 1] and sum to at most 1".into()));
        }
        if self.split_sizes().0 == 0 {
            return Err(Error::InvalidArgument("training split is empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instances {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub class_means: Matrix,
}

/// Everything the generator knows and the learner does not.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthWorld {
    pub noise: NoiseSpec,
    pub instances: InstanceSpec,
    pub class_means: Matrix,
    pub global_confusion: ConfusionMatrix,
    pub individual_confusions: Vec<ConfusionMatrix>,
    /// Raw annotator features, R x K.
    pub annotator_features: Matrix,
    pub instance_map: Matrix,
    pub instance_bias: Vec<f64>,
    pub annotator_map: Matrix,
    pub annotator_bias: Vec<f64>,
    /// Scalar added to every gating logit to hit the target proportion.
    pub gate_offset: f64,
    /// Gate values on observed training cells.
    pub omega: OmegaMatrix,
    /// Source indicator per training cell: 1 global, 0 individual, -1 missing.
    pub source_indicators: Vec<Vec<i8>>,
}

impl GroundTruthWorld {
    /// Gating logit without the calibration offset.
    pub fn raw_gate_logit(&self, x: &[f64], annotator: usize) -> f64 {
        let v = embed(x, &self.instance_map, &self.instance_bias);
        let u = embed(self.annotator_features.row(annotator), &self.annotator_map, &self.annotator_bias);
        dot(&u, &v)
    }

    pub fn gate(&self, x: &[f64], annotator: usize) -> f64 {
        if self.noise.target_common_proportion == 0.0 {
            return 0.0;
        }
        sigmoid(self.raw_gate_logit(x, annotator) + self.gate_offset)
    }

    /// Law of annotation (i, r): `omega * pi_g[z] + (1 - omega) * pi_r[z]`.
    pub fn annotation_law(&self, x: &[f64], z: usize, annotator: usize) -> Vec<f64> {
        let w = self.gate(x, annotator);
        let g = self.global_confusion.row(z);
        let ind = self.individual_confusions[annotator].row(z);
        g.iter().zip(ind).map(|(a, b)| w * a + (1.0 - w) * b).collect()
    }
}

/// `normalize(x W + b)`.
fn embed(x: &[f64], map: &Matrix, bias: &[f64]) -> Vec<f64> {
    let mut out = bias.to_vec();
    for (k, &xk) in x.iter().enumerate() {
        for (o, w) in out.iter_mut().zip(map.row(k)) {
            *o += xk * w;
        }
    }
    let n = l2_norm(&out) + 1e-12;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

pub fn make_confusion(
    pattern: NoisePattern,
    strength: f64,
    num_classes: usize,
    role: ConfusionRole,
    rng: &mut Rng,
) -> Result<ConfusionMatrix> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {num_classes}")));
    }
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::InvalidArgument(format!("strength must be in [0, 1], got {strength}")));
    }
    let c = num_classes;
    let mut partner: Vec<Option<usize>> = vec![None; c];
    match pattern {
        NoisePattern::Asymmetric => {
            for (a, p) in partner.iter_mut().enumerate() {
                let pick = rng.below(c - 1);
                *p = Some(if pick >= a { pick + 1 } else { pick });
            }
        }
        NoisePattern::Symmetric => {
            let mut order: Vec<usize> = (0..c).collect();
            rng.shuffle(&mut order);
            for pair in order.chunks_exact(2) {
                partner[pair[0]] = Some(pair[1]);
                partner[pair[1]] = Some(pair[0]);
            }
        }
    }
    let mut m = Matrix::zeros(c, c);
    for (a, p) in partner.iter().enumerate() {
        match p {
            Some(b) => {
                m[(a, a)] = 1.0 - strength;
                m[(a, *b)] = strength;
            }
            None => m[(a, a)] = 1.0,
        }
    }
    ConfusionMatrix::new(m, role)
}

/// Class-balanced Gaussian instances; labels are `i mod C`, shuffled.
pub fn make_instances(
    n: usize,
    num_classes: usize,
    dim: usize,
    mean_scale: f64,
    rng: &mut Rng,
) -> Instances {
    let class_means = rng.normal_matrix(num_classes, dim, mean_scale);
    let mut labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    rng.shuffle(&mut labels);
    let mut features = Matrix::zeros(n, dim);
    for (i, &z) in labels.iter().enumerate() {
        for (j, v) in features.row_mut(i).iter_mut().enumerate() {
            *v = class_means[(z, j)] + rng.normal();
        }
    }
    Instances { features, labels, class_means }
}

/// Offset `b` such that the mean of `sigmoid(logit + b)` is within 0.01 of
/// `target`. The mean is increasing in `b`, so bisection on [-60, 60]
/// converges.
pub fn calibrate_offset(logits: &[f64], target: f64) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidArgument(format!("target proportion must be in (0, 1), got {target}")));
    }
    if logits.is_empty() {
        return Err(Error::InvalidArgument("no gating logits to calibrate".into()));
    }
    let mean_at = |b: f64| logits.iter().map(|l| sigmoid(l + b)).sum::<f64>() / logits.len() as f64;
    let (mut lo, mut hi) = (-60.0, 60.0);
    const MAX_STEPS: usize = 100;
    for _ in 0..MAX_STEPS {
        let mid = 0.5 * (lo + hi);
        let m = mean_at(mid);
        if (m - target).abs() < 1e-9 {
            return Ok(mid);
        }
        if m < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mid = 0.5 * (lo + hi);
    if (mean_at(mid) - target).abs() <= 0.01 {
        Ok(mid)
    } else {
        Err(Error::NoConvergence(MAX_STEPS))
    }
}

/// Generates the three splits and the hidden world that produced them.
///
/// Sub-streams of `rng`: 0 instances, 1 confusions, 2 gating maps,
/// 3 annotator assignment, 4 source and label draws.
pub fn generate(noise: &NoiseSpec, inst: &InstanceSpec, rng: &Rng) -> Result<(CrowdSplits, GroundTruthWorld)> {
    noise.validate()?;
    inst.validate()?;
    let (c, d, r, k) = (inst.num_classes, inst.feature_dim, noise.num_annotators, noise.embed_dim);

    let instances = make_instances(inst.num_instances, c, d, inst.mean_scale, &mut rng.fork(0));

    let mut crng = rng.fork(1);
    let global = make_confusion(noise.pattern, noise.common_strength, c, ConfusionRole::Global, &mut crng)?;
    let individual = (0..r)
        .map(|a| {
            make_confusion(NoisePattern::Asymmetric, noise.individual_strength, c, ConfusionRole::Individual(a), &mut crng)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut grng = rng.fork(2);
    let annotator_features = grng.normal_matrix(r, k, 1.0);
    let instance_map = grng.normal_matrix(d, k, 1.0 / (d as f64).sqrt());
    let instance_bias = (0..k).map(|_| grng.normal()).collect();
    let annotator_map = grng.normal_matrix(k, k, 1.0 / (k as f64).sqrt());
    let annotator_bias = (0..k).map(|_| grng.normal()).collect();

    let (n_train, n_val, _) = inst.split_sizes();
    let mut arng = rng.fork(3);
    let assignment: Vec<Vec<usize>> = (0..n_train)
        .map(|_| {
            let mut a = arng.choose_distinct(r, noise.labels_per_instance);
            a.sort_unstable();
            a
        })
        .collect();

    let mut world = GroundTruthWorld {
        noise: noise.clone(),
        instances: inst.clone(),
        class_means: instances.class_means.clone(),
        global_confusion: global,
        individual_confusions: individual,
        annotator_features,
        instance_map,
        instance_bias,
        annotator_map,
        annotator_bias,
        gate_offset: 0.0,
        omega: OmegaMatrix::empty(n_train, r),
        source_indicators: vec![vec![MISSING as i8; r]; n_train],
    };

    let train_x = instances.features.select_rows(&(0..n_train).collect::<Vec<_>>());
    if noise.target_common_proportion > 0.0 {
        let logits: Vec<f64> = assignment
            .iter()
            .enumerate()
            .flat_map(|(i, anns)| anns.iter().map(|&a| (i, a)).collect::<Vec<_>>())
            .map(|(i, a)| world.raw_gate_logit(train_x.row(i), a))
            .collect();
        world.gate_offset = calibrate_offset(&logits, noise.target_common_proportion)?;
    }

    let mut srng = rng.fork(4);
    let mut annotations = vec![MISSING; n_train * r];
    for (i, anns) in assignment.iter().enumerate() {
        let z = instances.labels[i];
        for &a in anns {
            let w = world.gate(train_x.row(i), a);
            world.omega.set(i, a, w)?;
            let common = srng.bernoulli(w);
            world.source_indicators[i][a] = common as i8;
            let law = if common { world.global_confusion.row(z) } else { world.individual_confusions[a].row(z) };
            annotations[i * r + a] = sample_categorical(law, &mut srng)? as i64;
        }
    }

    let labels = &instances.labels;
    let train = CrowdDataset::new(train_x, r, annotations, Some(labels[..n_train].to_vec()), c, Split::Train)?;
    let eval_split = |range: std::ops::Range<usize>, split: Split| {
        let idx: Vec<usize> = range.collect();
        let lab = idx.iter().map(|&i| labels[i]).collect();
        CrowdDataset::unannotated(instances.features.select_rows(&idx), r, Some(lab), c, split)
    };
    let n = inst.num_instances;
    let splits = CrowdSplits {
        train,
        validation: eval_split(n_train..n_train + n_val, Split::Validation)?,
        test: eval_split(n_train + n_val..n, Split::Test)?,
    };
    Ok((splits, world))
}
