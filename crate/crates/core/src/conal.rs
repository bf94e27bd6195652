//! Classifier with a global and per-annotator noise adaptation layers mixed by
//! an instance/annotator gate.
//!
//! For an observed annotation `(i, r)` the predicted annotation distribution is
//!
//! ```text
//! p(. | x_i, r) = w * softmax(f_i W_g) + (1 - w) * softmax(f_i W_r)
//! w             = sigmoid(u_r . v_i)
//! v_i = normalize(x_i W_v + b_v),   u_r = normalize(W_u[r] + b_u)
//! ```
//!
//! where `f_i` is the classifier's softmax output (a row vector, so row `z`
//! of a layer's weights is the annotation logits for true class `z`). The
//! training objective is the mean negative log-likelihood over observed
//! annotations minus `lambda * sum_r ||W_g - W_r||_F`.
//!
//! Gradients are written out by hand; `backward` is checked against central
//! finite differences in the tests and in the acceptance suite.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierParams, ClassifierTrace};
use crate::data::{save_matrix, load_matrix, write_atomic, ConfusionMatrix, ConfusionRole, CrowdDataset, OmegaMatrix};
use crate::error::{Error, Result};
use crate::numerics::{dot, l2_norm, sigmoid, softmax_in_place, softmax_rows, Matrix, Rng, LOG_FLOOR};
use crate::optim::Parameters;

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
    pub annotators: usize,
    pub embed: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    /// Diagonal scale of the adaptation-layer initialization.
    pub kappa: f64,
    /// Std of the Gaussian noise added to the adaptation layers.
    pub noise: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { kappa: 4.0, noise: 0.01 }
    }
}

/// How the mixing weight of each annotation is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Gate {
    /// `sigmoid(u_r . v_i)` from the auxiliary network.
    Learned,
    /// Constant weight; the auxiliary network is bypassed.
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConalParams {
    pub classifier: ClassifierParams,
    /// C x C
    pub global_w: Matrix,
    /// R matrices, C x C
    pub individual_w: Vec<Matrix>,
    /// D x K
    pub instance_w: Matrix,
    pub instance_b: Vec<f64>,
    /// R x K (input is the annotator's one-hot vector)
    pub annotator_w: Matrix,
    pub annotator_b: Vec<f64>,
}

impl Parameters for ConalParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.classifier.tensors();
        v.push(self.global_w.data());
        v.extend(self.individual_w.iter().map(Matrix::data));
        v.extend([self.instance_w.data(), &self.instance_b[..], self.annotator_w.data(), &self.annotator_b[..]]);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.classifier.tensors_mut();
        v.push(self.global_w.data_mut());
        v.extend(self.individual_w.iter_mut().map(Matrix::data_mut));
        v.push(self.instance_w.data_mut());
        v.push(&mut self.instance_b);
        v.push(self.annotator_w.data_mut());
        v.push(&mut self.annotator_b);
        v
    }
}

/// Names of the parameter groups, in `tensors()` order after expanding the
/// individual layers into one group.
pub const PARAM_GROUPS: [&str; 10] = [
    "classifier.hidden_w",
    "classifier.hidden_b",
    "classifier.out_w",
    "classifier.out_b",
    "global_w",
    "individual_w",
    "instance_w",
    "instance_b",
    "annotator_w",
    "annotator_b",
];

impl ConalParams {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input: self.classifier.input_dim(),
            hidden: self.classifier.hidden_dim(),
            classes: self.classifier.num_classes(),
            annotators: self.individual_w.len(),
            embed: self.instance_w.cols(),
        }
    }

    /// Flat views grouped as in [`PARAM_GROUPS`].
    pub fn groups(&self) -> Vec<(&'static str, Vec<&[f64]>)> {
        let t = self.tensors();
        let r = self.individual_w.len();
        let mut out: Vec<(&'static str, Vec<&[f64]>)> = Vec::new();
        for (k, name) in PARAM_GROUPS.iter().enumerate().take(5) {
            out.push((name, vec![t[k]]));
        }
        out.push((PARAM_GROUPS[5], t[5..5 + r].to_vec()));
        for (k, name) in PARAM_GROUPS.iter().enumerate().skip(6) {
            out.push((name, vec![t[5 + r + (k - 6)]]));
        }
        out
    }
}

pub fn init_params(dims: ModelDims, init: InitConfig, rng: &mut Rng) -> ConalParams {
    let ModelDims { input, hidden, classes, annotators, embed } = dims;
    let classifier = ClassifierParams::init(input, hidden, classes, rng);
    let adaptation = |rng: &mut Rng| {
        let mut w = rng.normal_matrix(classes, classes, init.noise);
        for c in 0..classes {
            w[(c, c)] += init.kappa;
        }
        w
    };
    let global_w = adaptation(rng);
    let individual_w = (0..annotators).map(|_| adaptation(rng)).collect();
    ConalParams {
        classifier,
        global_w,
        individual_w,
        instance_w: rng.normal_matrix(input, embed, (1.0 / input as f64).sqrt()),
        instance_b: vec![0.0; embed],
        annotator_w: rng.normal_matrix(annotators, embed, 1.0),
        annotator_b: vec![0.0; embed],
    }
}

/// Everything computed by [`forward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub classifier: ClassifierTrace,
    /// Raw and normalized instance embeddings, N x K.
    pub v_raw: Matrix,
    pub v: Matrix,
    /// Raw and normalized annotator embeddings, R x K.
    pub u_raw: Matrix,
    pub u: Matrix,
    /// Global-branch annotation distribution per instance, N x C.
    pub p_global: Matrix,
    /// Individual-branch distribution per observed cell, cells x C.
    pub p_individual: Matrix,
    /// Gate per observed cell, aligned with `dataset.cells()`.
    pub omega: Vec<f64>,
    pub gate: Gate,
}

impl ForwardTrace {
    /// Classifier output f, N x C.
    pub fn f(&self) -> &Matrix {
        &self.classifier.probs
    }

    /// Mixture distribution of observed cell `j`.
    pub fn mixture_row(&self, dataset: &CrowdDataset, j: usize) -> Vec<f64> {
        let cell = dataset.cells()[j];
        mix(self.p_global.row(cell.instance), self.p_individual.row(j), self.omega[j])
    }

    /// Probability assigned to the observed label of cell `j`.
    pub fn observed_prob(&self, dataset: &CrowdDataset, j: usize) -> f64 {
        let cell = dataset.cells()[j];
        let w = self.omega[j];
        w * self.p_global[(cell.instance, cell.label)] + (1.0 - w) * self.p_individual[(j, cell.label)]
    }

    pub fn omega_matrix(&self, dataset: &CrowdDataset) -> OmegaMatrix {
        let mut m = OmegaMatrix::empty(dataset.len(), dataset.num_annotators());
        for (cell, &w) in dataset.cells().iter().zip(&self.omega) {
            m.set(cell.instance, cell.annotator, w.clamp(0.0, 1.0)).expect("gate in [0, 1]");
        }
        m
    }
}

pub fn mix(p_global: &[f64], p_individual: &[f64], omega: f64) -> Vec<f64> {
    p_global.iter().zip(p_individual).map(|(g, r)| omega * g + (1.0 - omega) * r).collect()
}

/// `f W` with a softmax on the result.
fn adapt(f: &[f64], w: &Matrix) -> Vec<f64> {
    let c = w.cols();
    let mut out = vec![0.0; c];
    for (k, &fk) in f.iter().enumerate() {
        for (o, wkj) in out.iter_mut().zip(w.row(k)) {
            *o += fk * wkj;
        }
    }
    softmax_in_place(&mut out);
    out
}

fn normalize_rows(raw: &Matrix) -> Matrix {
    let mut out = raw.clone();
    for i in 0..out.rows() {
        let n = l2_norm(raw.row(i)) + NORM_EPS;
        out.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    out
}

/// Gradient of `y = x / (|x| + eps)` pulled back to `x`.
fn normalize_backward(raw: &[f64], g: &[f64]) -> Vec<f64> {
    let n = l2_norm(raw);
    let d = n + NORM_EPS;
    if n == 0.0 {
        return g.iter().map(|v| v / d).collect();
    }
    let proj = dot(raw, g) / (n * d * d);
    raw.iter().zip(g).map(|(x, gi)| gi / d - x * proj).collect()
}

pub fn forward(
    params: &ConalParams,
    dataset: &CrowdDataset,
    gate: Gate,
    dropout: Option<(f64, &mut Rng)>,
) -> Result<ForwardTrace> {
    let dims = params.dims();
    if dataset.feature_dim() != dims.input
        || dataset.num_classes() != dims.classes
        || dataset.num_annotators() != dims.annotators
    {
        return Err(Error::Shape(format!(
            "dataset (D={}, C={}, R={}) does not match model {dims:?}",
            dataset.feature_dim(),
            dataset.num_classes(),
            dataset.num_annotators()
        )));
    }
    let x = dataset.features();
    let classifier = params.classifier.forward(x, dropout);
    let f = &classifier.probs;

    let (v_raw, v, u_raw, u) = match gate {
        Gate::Learned => {
            let mut v_raw = x.matmul(&params.instance_w);
            v_raw.add_row_vector(&params.instance_b);
            let mut u_raw = params.annotator_w.clone();
            u_raw.add_row_vector(&params.annotator_b);
            let (v, u) = (normalize_rows(&v_raw), normalize_rows(&u_raw));
            (v_raw, v, u_raw, u)
        }
        Gate::Fixed(_) => {
            let e = || Matrix::zeros(0, 0);
            (e(), e(), e(), e())
        }
    };

    let p_global = Matrix::from_vec(
        f.rows(),
        dims.classes,
        f.row_iter().flat_map(|fi| adapt(fi, &params.global_w)).collect(),
    )?;
    let cells = dataset.cells();
    let mut p_individual = Matrix::zeros(cells.len(), dims.classes);
    let mut omega = Vec::with_capacity(cells.len());
    for (j, cell) in cells.iter().enumerate() {
        let p = adapt(f.row(cell.instance), &params.individual_w[cell.annotator]);
        p_individual.row_mut(j).copy_from_slice(&p);
        omega.push(match gate {
            Gate::Learned => sigmoid(dot(u.row(cell.annotator), v.row(cell.instance))),
            Gate::Fixed(w) => w,
        });
    }
    Ok(ForwardTrace { classifier, v_raw, v, u_raw, u, p_global, p_individual, omega, gate })
}

/// `lambda * sum_r ||W_g - W_r||_F`.
pub fn regularizer(params: &ConalParams) -> f64 {
    params
        .individual_w
        .iter()
        .map(|wr| {
            let mut d = params.global_w.clone();
            d.axpy(-1.0, wr);
            d.frobenius_norm()
        })
        .sum()
}

/// Mean negative log-likelihood of the observed annotations (divided by the
/// number of instances) minus `lambda` times the layer-difference norm.
pub fn loss(params: &ConalParams, dataset: &CrowdDataset, lambda: f64, trace: &ForwardTrace) -> f64 {
    let n = dataset.len().max(1) as f64;
    let nll: f64 = (0..dataset.num_observed())
        .map(|j| -trace.observed_prob(dataset, j).max(LOG_FLOOR).ln())
        .sum();
    let reg = if lambda != 0.0 { lambda * regularizer(params) } else { 0.0 };
    nll / n - reg
}

pub fn backward(params: &ConalParams, dataset: &CrowdDataset, lambda: f64, trace: &ForwardTrace) -> ConalParams {
    let dims = params.dims();
    let c = dims.classes;
    let n = dataset.len().max(1) as f64;
    let f = trace.f();
    let mut grads = params.zeros_like();

    let mut g_f = Matrix::zeros(f.rows(), c);
    // dL/d(logits of the global branch), summed per instance
    let mut g_global_logits = Matrix::zeros(f.rows(), c);
    let learned = matches!(trace.gate, Gate::Learned);
    let mut g_v = if learned { Matrix::zeros(trace.v.rows(), trace.v.cols()) } else { Matrix::zeros(0, 0) };
    let mut g_u = if learned { Matrix::zeros(trace.u.rows(), trace.u.cols()) } else { Matrix::zeros(0, 0) };

    let mut g_ind = vec![0.0; c];
    for (j, cell) in dataset.cells().iter().enumerate() {
        let (i, r, y) = (cell.instance, cell.annotator, cell.label);
        let w = trace.omega[j];
        let pg = trace.p_global.row(i);
        let pr = trace.p_individual.row(j);
        let p = w * pg[y] + (1.0 - w) * pr[y];
        if p < LOG_FLOOR {
            continue;
        }
        let dp = -1.0 / (n * p);

        if learned {
            let g_logit = dp * (pg[y] - pr[y]) * w * (1.0 - w);
            for k in 0..g_v.cols() {
                g_v[(i, k)] += g_logit * trace.u[(r, k)];
                g_u[(r, k)] += g_logit * trace.v[(i, k)];
            }
        }

        let a = dp * w * pg[y];
        if a != 0.0 {
            for (l, g) in g_global_logits.row_mut(i).iter_mut().enumerate() {
                *g += a * (f64::from(u8::from(l == y)) - pg[l]);
            }
        }

        let b = dp * (1.0 - w) * pr[y];
        if b == 0.0 {
            continue;
        }
        for (l, g) in g_ind.iter_mut().enumerate() {
            *g = b * (f64::from(u8::from(l == y)) - pr[l]);
        }
        let wr = &params.individual_w[r];
        let gwr = &mut grads.individual_w[r];
        let fi = f.row(i);
        for k in 0..c {
            let gf_k: f64 = dot(wr.row(k), &g_ind);
            g_f[(i, k)] += gf_k;
            for (gw, gl) in gwr.row_mut(k).iter_mut().zip(&g_ind) {
                *gw += fi[k] * gl;
            }
        }
    }

    grads.global_w = f.t_matmul(&g_global_logits);
    g_f.axpy(1.0, &g_global_logits.matmul_t(&params.global_w));

    grads.classifier = params.classifier.backward_from_probs(dataset.features(), &trace.classifier, &g_f);

    if learned {
        let mut g_v_raw = Matrix::zeros(g_v.rows(), g_v.cols());
        for i in 0..g_v.rows() {
            g_v_raw.row_mut(i).copy_from_slice(&normalize_backward(trace.v_raw.row(i), g_v.row(i)));
        }
        grads.instance_w = dataset.features().t_matmul(&g_v_raw);
        grads.instance_b = g_v_raw.sum_rows();
        for r in 0..g_u.rows() {
            let g = normalize_backward(trace.u_raw.row(r), g_u.row(r));
            grads.annotator_w.row_mut(r).copy_from_slice(&g);
            for (b, gk) in grads.annotator_b.iter_mut().zip(&g) {
                *b += gk;
            }
        }
    }

    if lambda != 0.0 {
        for (r, wr) in params.individual_w.iter().enumerate() {
            let mut d = params.global_w.clone();
            d.axpy(-1.0, wr);
            let norm = d.frobenius_norm();
            if norm == 0.0 {
                continue;
            }
            grads.global_w.axpy(-lambda / norm, &d);
            grads.individual_w[r].axpy(lambda / norm, &d);
        }
    }
    grads
}

/// Classifier probabilities and argmax labels, dropout off.
pub fn predict(params: &ConalParams, features: &Matrix) -> (Matrix, Vec<usize>) {
    params.classifier.predict(features)
}

/// Row-softmax of the adaptation weights.
pub fn recover_confusions(params: &ConalParams) -> (ConfusionMatrix, Vec<ConfusionMatrix>) {
    let to_conf = |w: &Matrix, role| {
        ConfusionMatrix::new(softmax_rows(w), role).expect("softmax rows are stochastic")
    };
    let global = to_conf(&params.global_w, ConfusionRole::Global);
    let individual = params
        .individual_w
        .iter()
        .enumerate()
        .map(|(r, w)| to_conf(w, ConfusionRole::Individual(r)))
        .collect();
    (global, individual)
}

// ---------------------------------------------------------------------------
// checkpoints

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    kind: String,
    dims: ModelDims,
    #[serde(default)]
    hyperparameters: serde_json::Value,
}

fn vector(v: &[f64]) -> Matrix {
    Matrix::from_vec(1, v.len(), v.to_vec()).expect("finite parameters")
}

fn save_classifier(p: &ClassifierParams, dir: &Path) -> Result<()> {
    save_matrix(&p.hidden_w, "classifier.hidden_w", &dir.join("classifier_hidden_w.csv"))?;
    save_matrix(&vector(&p.hidden_b), "classifier.hidden_b", &dir.join("classifier_hidden_b.csv"))?;
    save_matrix(&p.out_w, "classifier.out_w", &dir.join("classifier_out_w.csv"))?;
    save_matrix(&vector(&p.out_b), "classifier.out_b", &dir.join("classifier_out_b.csv"))
}

fn load_classifier(dir: &Path) -> Result<ClassifierParams> {
    let m = |name: &str| load_matrix(&dir.join(name)).map(|(m, _)| m);
    Ok(ClassifierParams {
        hidden_w: m("classifier_hidden_w.csv")?,
        hidden_b: m("classifier_hidden_b.csv")?.into_vec(),
        out_w: m("classifier_out_w.csv")?,
        out_b: m("classifier_out_b.csv")?.into_vec(),
    })
}

/// Trained weights of any method.
#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Conal(ConalParams),
    Classifier(ClassifierParams),
}

impl Checkpoint {
    pub fn classifier(&self) -> &ClassifierParams {
        match self {
            Checkpoint::Conal(p) => &p.classifier,
            Checkpoint::Classifier(p) => p,
        }
    }

    /// Writes one CSV per tensor plus `checkpoint.json`.
    pub fn save(&self, dir: &Path, hyperparameters: serde_json::Value) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (kind, dims) = match self {
            Checkpoint::Conal(p) => {
                save_classifier(&p.classifier, dir)?;
                save_matrix(&p.global_w, "global_w", &dir.join("global_w.csv"))?;
                for (r, w) in p.individual_w.iter().enumerate() {
                    save_matrix(w, &format!("individual_w:{r}"), &dir.join(format!("individual_w_{r}.csv")))?;
                }
                save_matrix(&p.instance_w, "instance_w", &dir.join("instance_w.csv"))?;
                save_matrix(&vector(&p.instance_b), "instance_b", &dir.join("instance_b.csv"))?;
                save_matrix(&p.annotator_w, "annotator_w", &dir.join("annotator_w.csv"))?;
                save_matrix(&vector(&p.annotator_b), "annotator_b", &dir.join("annotator_b.csv"))?;
                ("conal", p.dims())
            }
            Checkpoint::Classifier(p) => {
                save_classifier(p, dir)?;
                let dims = ModelDims {
                    input: p.input_dim(),
                    hidden: p.hidden_dim(),
                    classes: p.num_classes(),
                    annotators: 0,
                    embed: 0,
                };
                ("classifier", dims)
            }
        };
        let manifest = CheckpointManifest { kind: kind.into(), dims, hyperparameters };
        write_atomic(&dir.join("checkpoint.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("checkpoint.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        let classifier = load_classifier(dir)?;
        match manifest.kind.as_str() {
            "classifier" => Ok(Checkpoint::Classifier(classifier)),
            "conal" => {
                let m = |name: &str| load_matrix(&dir.join(name)).map(|(m, _)| m);
                let individual_w = (0..manifest.dims.annotators)
                    .map(|r| m(&format!("individual_w_{r}.csv")))
                    .collect::<Result<Vec<_>>>()?;
                let p = ConalParams {
                    classifier,
                    global_w: m("global_w.csv")?,
                    individual_w,
                    instance_w: m("instance_w.csv")?,
                    instance_b: m("instance_b.csv")?.into_vec(),
                    annotator_w: m("annotator_w.csv")?,
                    annotator_b: m("annotator_b.csv")?.into_vec(),
                };
                if p.dims() != manifest.dims {
                    return Err(Error::Parse { path, message: "tensor shapes disagree with manifest".into() });
                }
                Ok(Checkpoint::Conal(p))
            }
            other => Err(Error::Parse { path, message: format!("unknown checkpoint kind `{other}`") }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    fn dims() -> ModelDims {
        ModelDims { input: 8, hidden: 16, classes: 4, annotators: 5, embed: 6 }
    }

    fn random_dataset(n: usize, d: ModelDims, rng: &mut Rng) -> CrowdDataset {
        let x = rng.normal_matrix(n, d.input, 1.0);
        let mut ann = vec![-1i64; n * d.annotators];
        for i in 0..n {
            for r in 0..d.annotators {
                if r == i % d.annotators || rng.bernoulli(0.4) {
                    ann[i * d.annotators + r] = rng.below(d.classes) as i64;
                }
            }
        }
        CrowdDataset::new(x, d.annotators, ann, None, d.classes, Split::Train).unwrap()
    }

    #[test]
    fn same_seed_same_params() {
        let a = init_params(dims(), InitConfig::default(), &mut Rng::new(1));
        let b = init_params(dims(), InitConfig::default(), &mut Rng::new(1));
        assert_eq!(a, b);
        assert_ne!(a.global_w, a.individual_w[0]);
    }

    #[test]
    fn initialized_layers_are_near_diagonal() {
        for c in 2..=10 {
            let d = ModelDims { classes: c, ..dims() };
            let exact = init_params(d, InitConfig { noise: 0.0, ..InitConfig::default() }, &mut Rng::new(0));
            let (g, _) = recover_confusions(&exact);
            let closed = 4f64.exp() / (4f64.exp() + (c - 1) as f64);
            for k in 0..c {
                assert!((g.get(k, k) - closed).abs() < 1e-12, "C={c}");
            }
            let noisy = init_params(d, InitConfig::default(), &mut Rng::new(c as u64));
            let (g, _) = recover_confusions(&noisy);
            for k in 0..c {
                assert!((g.get(k, k) - closed).abs() < 0.01, "C={c}");
                if c <= 6 {
                    assert!(g.get(k, k) > 0.9);
                }
            }
        }
    }

    #[test]
    fn identity_limit_channels_f() {
        let mut rng = Rng::new(2);
        let init = InitConfig { kappa: 200.0, noise: 0.0 };
        let mut p = init_params(dims(), init, &mut rng);
        // sharpen the classifier so f is close to one-hot, where kappa*I is an identity channel
        p.classifier.out_w.scale(1e3);
        let ds = random_dataset(10, dims(), &mut rng);
        let t = forward(&p, &ds, Gate::Learned, None).unwrap();
        for j in 0..ds.num_observed() {
            let i = ds.cells()[j].instance;
            let mix = t.mixture_row(&ds, j);
            for (a, b) in mix.iter().zip(t.f().row(i)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn forced_gate_selects_branch() {
        let mut rng = Rng::new(3);
        let p = init_params(dims(), InitConfig { kappa: 1.0, noise: 0.5 }, &mut rng);
        let ds = random_dataset(12, dims(), &mut rng);
        let t = forward(&p, &ds, Gate::Fixed(1.0), None).unwrap();
        for j in 0..ds.num_observed() {
            let i = ds.cells()[j].instance;
            assert_eq!(t.mixture_row(&ds, j), t.p_global.row(i).to_vec());
        }
    }

    #[test]
    fn half_gate_averages() {
        let m = mix(&[0.8, 0.2], &[0.2, 0.8], 0.5);
        assert!((m[0] - 0.5).abs() < 1e-15 && (m[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn loss_examples() {
        // uniform prediction over 4 classes, one annotation, lambda 0
        let d = ModelDims { input: 1, hidden: 2, classes: 4, annotators: 1, embed: 2 };
        let mut p = init_params(d, InitConfig { kappa: 0.0, noise: 0.0 }, &mut Rng::new(0));
        let x = Matrix::zeros(2, 1);
        let ds = CrowdDataset::new(x, 1, vec![2, -1], None, 4, Split::Test).unwrap();
        let t = forward(&p, &ds, Gate::Learned, None).unwrap();
        assert!((loss(&p, &ds, 0.0, &t) - 4f64.ln() / 2.0).abs() < 1e-12);

        // identical layers: regularizer vanishes
        p.individual_w[0] = p.global_w.clone();
        assert_eq!(regularizer(&p), 0.0);
        assert!((loss(&p, &ds, 1e-5, &t) - 4f64.ln() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_zero_loss_and_gradient() {
        let d = ModelDims { input: 2, hidden: 3, classes: 2, annotators: 1, embed: 2 };
        let mut p = init_params(d, InitConfig { kappa: 60.0, noise: 0.0 }, &mut Rng::new(4));
        p.classifier.out_b = vec![60.0, -60.0];
        p.individual_w[0] = p.global_w.clone();
        let x = Matrix::zeros(3, 2);
        let ds = CrowdDataset::new(x, 1, vec![0, 0, 0], None, 2, Split::Train).unwrap();
        let t = forward(&p, &ds, Gate::Learned, None).unwrap();
        assert!(loss(&p, &ds, 0.0, &t) < 1e-12);
        let g = backward(&p, &ds, 0.0, &t);
        assert!(g.tensors().iter().all(|t| t.iter().all(|v| v.abs() < 1e-12)));
    }

    #[test]
    fn zero_gate_leaves_only_regularizer_on_global() {
        let mut rng = Rng::new(5);
        let p = init_params(dims(), InitConfig { kappa: 1.0, noise: 0.3 }, &mut rng);
        let ds = random_dataset(15, dims(), &mut rng);
        let t = forward(&p, &ds, Gate::Fixed(0.0), None).unwrap();
        let lambda = 1e-3;
        let g = backward(&p, &ds, lambda, &t);
        let mut expected = Matrix::zeros(4, 4);
        for wr in &p.individual_w {
            let mut d = p.global_w.clone();
            d.axpy(-1.0, wr);
            expected.axpy(-lambda / d.frobenius_norm(), &d);
        }
        assert_eq!(g.global_w, expected);
        assert!(g.instance_w.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn prediction_ties_and_argmax() {
        use crate::numerics::argmax;
        assert_eq!(argmax(&[0.1, 0.8, 0.1]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn recover_all_zero_is_uniform() {
        let mut p = init_params(dims(), InitConfig::default(), &mut Rng::new(6));
        p.global_w = Matrix::zeros(4, 4);
        let (g, inds) = recover_confusions(&p);
        assert!(g.entries().data().iter().all(|v| (v - 0.25).abs() < 1e-15));
        for m in inds {
            for row in m.entries().row_iter() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn recover_kappa_identity() {
        let d = ModelDims { classes: 6, ..dims() };
        let p = init_params(d, InitConfig { kappa: 4.0, noise: 0.0 }, &mut Rng::new(0));
        let (g, _) = recover_confusions(&p);
        for k in 0..6 {
            assert!((g.get(k, k) - 0.916_104_778_466_792).abs() < 1e-12);
        }
    }

    /// Per-group relative error `|a - fd| / max(|a|, |fd|)` in the L2 sense.
    fn gradient_errors(gate: Gate, lambda: f64, seed: u64) -> Vec<(&'static str, f64)> {
        let mut rng = Rng::new(seed);
        let p = init_params(dims(), InitConfig { kappa: 1.5, noise: 0.5 }, &mut rng);
        let ds = random_dataset(20, dims(), &mut rng);
        let eval = |p: &ConalParams| loss(p, &ds, lambda, &forward(p, &ds, gate, None).unwrap());
        let analytic = backward(&p, &ds, lambda, &forward(&p, &ds, gate, None).unwrap());
        let h = 1e-5;
        let mut numeric = p.zeros_like();
        let n_tensors = p.tensors().len();
        for t in 0..n_tensors {
            for e in 0..p.tensors()[t].len() {
                let mut plus = p.clone();
                plus.tensors_mut()[t][e] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[t][e] -= h;
                numeric.tensors_mut()[t][e] = (eval(&plus) - eval(&minus)) / (2.0 * h);
            }
        }
        analytic
            .groups()
            .into_iter()
            .zip(numeric.groups())
            .map(|((name, a), (_, n))| {
                let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
                for (ta, tn) in a.iter().zip(&n) {
                    for (x, y) in ta.iter().zip(tn.iter()) {
                        diff += (x - y) * (x - y);
                        na += x * x;
                        nn += y * y;
                    }
                }
                let scale = na.sqrt().max(nn.sqrt());
                (name, if scale == 0.0 { 0.0 } else { diff.sqrt() / scale })
            })
            .collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (gate, lambda) in [(Gate::Learned, 0.0), (Gate::Learned, 1e-2), (Gate::Fixed(0.3), 1e-2)] {
            for (name, err) in gradient_errors(gate, lambda, 21) {
                assert!(err < 1e-6, "{gate:?} lambda={lambda} {name}: {err}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = init_params(dims(), InitConfig::default(), &mut Rng::new(7));
        let ck = Checkpoint::Conal(p);
        ck.save(dir.path(), serde_json::json!({"lambda": 1e-5})).unwrap();
        assert_eq!(Checkpoint::load(dir.path()).unwrap(), ck);
        let ck = Checkpoint::Classifier(ClassifierParams::init(3, 4, 2, &mut Rng::new(1)));
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path(), serde_json::Value::Null).unwrap();
        assert_eq!(Checkpoint::load(dir.path()).unwrap(), ck);
    }
}
