//! Crowd datasets, confusion matrices and their CSV persistence.
//!
//! Class indices are 0-based everywhere. Annotation files are dense N x R
//! integer grids where `-1` marks a missing annotation. Matrices are written
//! with a one-line `# rows cols role` header followed by full-precision
//! decimal text, which round-trips `f64` exactly.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Sentinel for a missing annotation.
pub const MISSING: i64 = -1;

const STOCHASTIC_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// One observed annotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub instance: usize,
    pub annotator: usize,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrowdDataset {
    features: Matrix,
    num_annotators: usize,
    annotations: Vec<i64>,
    true_labels: Option<Vec<usize>>,
    num_classes: usize,
    split: Split,
    cells: Vec<Cell>,
    // cells of instance i live in cells[offsets[i]..offsets[i + 1]]
    offsets: Vec<usize>,
}

impl CrowdDataset {
    /// Validates and builds a dataset. `annotations` is row-major N x R.
    pub fn new(
        features: Matrix,
        num_annotators: usize,
        annotations: Vec<i64>,
        true_labels: Option<Vec<usize>>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let n = features.rows();
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {num_classes}")));
        }
        if annotations.len() != n * num_annotators {
            return Err(Error::Shape(format!(
                "annotations have {} entries, expected {n}x{num_annotators}",
                annotations.len()
            )));
        }
        if let Some(labels) = &true_labels {
            if labels.len() != n {
                return Err(Error::Shape(format!("{} labels for {n} instances", labels.len())));
            }
            if let Some((i, &z)) = labels.iter().enumerate().find(|(_, &z)| z >= num_classes) {
                return Err(Error::InvalidArgument(format!("true label {z} at row {i} out of range")));
            }
        }
        let mut cells = Vec::new();
        let mut offsets = Vec::with_capacity(n + 1);
        for i in 0..n {
            offsets.push(cells.len());
            for r in 0..num_annotators {
                let y = annotations[i * num_annotators + r];
                if y == MISSING {
                    continue;
                }
                if y < 0 || y as usize >= num_classes {
                    return Err(Error::AnnotationRange { row: i, col: r, value: y, classes: num_classes });
                }
                cells.push(Cell { instance: i, annotator: r, label: y as usize });
            }
            if split == Split::Train && cells.len() == offsets[i] {
                return Err(Error::EmptyAnnotationRow(i));
            }
        }
        offsets.push(cells.len());
        Ok(Self { features, num_annotators, annotations, true_labels, num_classes, split, cells, offsets })
    }

    /// Dataset with every annotation missing, for evaluation splits.
    pub fn unannotated(
        features: Matrix,
        num_annotators: usize,
        true_labels: Option<Vec<usize>>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let n = features.rows();
        Self::new(features, num_annotators, vec![MISSING; n * num_annotators], true_labels, num_classes, split)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_annotators(&self) -> usize {
        self.num_annotators
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn true_labels(&self) -> Option<&[usize]> {
        self.true_labels.as_deref()
    }

    pub fn require_labels(&self, what: &'static str) -> Result<&[usize]> {
        self.true_labels().ok_or(Error::MissingLabels(what))
    }

    pub fn annotation(&self, instance: usize, annotator: usize) -> Option<usize> {
        let y = self.annotations[instance * self.num_annotators + annotator];
        (y != MISSING).then_some(y as usize)
    }

    /// Raw annotation row with the `-1` sentinel.
    pub fn annotation_row(&self, instance: usize) -> &[i64] {
        &self.annotations[instance * self.num_annotators..(instance + 1) * self.num_annotators]
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn cells_of(&self, instance: usize) -> &[Cell] {
        &self.cells[self.offsets[instance]..self.offsets[instance + 1]]
    }

    pub fn num_observed(&self) -> usize {
        self.cells.len()
    }

    /// Copy of the listed instances, in order.
    pub fn subset(&self, idx: &[usize]) -> CrowdDataset {
        let features = self.features.select_rows(idx);
        let mut annotations = Vec::with_capacity(idx.len() * self.num_annotators);
        for &i in idx {
            annotations.extend_from_slice(self.annotation_row(i));
        }
        let true_labels = self.true_labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
        // indices come from a valid dataset, so validation cannot fail
        Self::new(features, self.num_annotators, annotations, true_labels, self.num_classes, self.split)
            .expect("subset of a valid dataset")
    }

    /// Same instances with annotations replaced by one label per instance,
    /// stored as annotator 0 of a single-annotator dataset.
    pub fn with_single_labels(&self, labels: &[usize]) -> Result<CrowdDataset> {
        if labels.len() != self.len() {
            return Err(Error::Shape(format!("{} labels for {} instances", labels.len(), self.len())));
        }
        Self::new(
            self.features.clone(),
            1,
            labels.iter().map(|&l| l as i64).collect(),
            self.true_labels.clone(),
            self.num_classes,
            self.split,
        )
    }
}

/// Train/validation/test bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct CrowdSplits {
    pub train: CrowdDataset,
    pub validation: CrowdDataset,
    pub test: CrowdDataset,
}

impl CrowdSplits {
    pub fn get(&self, split: Split) -> &CrowdDataset {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for split in [Split::Train, Split::Validation, Split::Test] {
            save_dataset(self.get(split), dir, split.as_str())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, num_classes: usize) -> Result<Self> {
        let load = |split: Split| {
            let p = DatasetPaths::in_dir(dir, split.as_str());
            let labels = p.labels.exists().then_some(p.labels.as_path());
            load_dataset(&p.features, &p.annotations, labels, num_classes, split)
        };
        Ok(Self { train: load(Split::Train)?, validation: load(Split::Validation)?, test: load(Split::Test)? })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "annotator")]
pub enum ConfusionRole {
    Global,
    Individual(usize),
    Empirical,
}

impl fmt::Display for ConfusionRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfusionRole::Global => write!(f, "global"),
            ConfusionRole::Individual(r) => write!(f, "individual:{r}"),
            ConfusionRole::Empirical => write!(f, "empirical"),
        }
    }
}

impl std::str::FromStr for ConfusionRole {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(ConfusionRole::Global),
            "empirical" => Ok(ConfusionRole::Empirical),
            _ => s
                .strip_prefix("individual:")
                .and_then(|r| r.parse().ok())
                .map(ConfusionRole::Individual)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown confusion role `{s}`"))),
        }
    }
}

/// Row-stochastic C x C matrix; entry (a, b) is the probability that true
/// class `a` is annotated as `b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConfusionRepr", into = "ConfusionRepr")]
pub struct ConfusionMatrix {
    entries: Matrix,
    role: ConfusionRole,
}

#[derive(Serialize, Deserialize)]
struct ConfusionRepr {
    role: ConfusionRole,
    rows: Vec<Vec<f64>>,
}

impl TryFrom<ConfusionRepr> for ConfusionMatrix {
    type Error = Error;
    fn try_from(r: ConfusionRepr) -> Result<Self> {
        ConfusionMatrix::new(Matrix::from_rows(&r.rows)?, r.role)
    }
}

impl From<ConfusionMatrix> for ConfusionRepr {
    fn from(c: ConfusionMatrix) -> Self {
        ConfusionRepr { role: c.role, rows: c.entries.row_iter().map(<[f64]>::to_vec).collect() }
    }
}

impl ConfusionMatrix {
    pub fn new(entries: Matrix, role: ConfusionRole) -> Result<Self> {
        if entries.rows() != entries.cols() || entries.rows() == 0 {
            return Err(Error::Shape(format!("confusion matrix must be square, got {:?}", entries.shape())));
        }
        validate_stochastic_rows(&entries)?;
        Ok(Self { entries, role })
    }

    pub fn identity(c: usize, role: ConfusionRole) -> Self {
        Self { entries: Matrix::identity(c), role }
    }

    pub fn uniform(c: usize, role: ConfusionRole) -> Self {
        Self { entries: Matrix::filled(c, c, 1.0 / c as f64), role }
    }

    pub fn num_classes(&self) -> usize {
        self.entries.rows()
    }

    pub fn entries(&self) -> &Matrix {
        &self.entries
    }

    pub fn role(&self) -> ConfusionRole {
        self.role
    }

    pub fn with_role(mut self, role: ConfusionRole) -> Self {
        self.role = role;
        self
    }

    pub fn row(&self, c: usize) -> &[f64] {
        self.entries.row(c)
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.entries[(from, to)]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_matrix(&self.entries, &self.role.to_string(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, role) = load_matrix(path)?;
        Self::new(m, role.parse()?)
    }
}

fn validate_stochastic_rows(m: &Matrix) -> Result<()> {
    for (i, row) in m.row_iter().enumerate() {
        if row.iter().any(|v| !(-STOCHASTIC_TOL..=1.0 + STOCHASTIC_TOL).contains(v)) {
            return Err(Error::InvalidProbability(format!("row {i} has an entry outside [0, 1]")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::NotStochastic { row: i, sum });
        }
    }
    Ok(())
}

/// Class distribution; one row per instance when used per-instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    probs: Vec<f64>,
}

impl ClassPrior {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let m = Matrix::from_vec(1, probs.len(), probs)?;
        validate_stochastic_rows(&m)?;
        Ok(Self { probs: m.into_vec() })
    }

    pub fn uniform(c: usize) -> Self {
        Self { probs: vec![1.0 / c as f64; c] }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_matrix(&Matrix::from_vec(1, self.probs.len(), self.probs.clone())?, "prior", path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(load_matrix(path)?.0.into_vec())
    }
}

/// Common-noise probabilities on observed cells; `None` elsewhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmegaMatrix {
    rows: usize,
    cols: usize,
    values: Vec<Option<f64>>,
}

impl OmegaMatrix {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self { rows, cols, values: vec![None; rows * cols] }
    }

    /// Fills every observed cell of `dataset` with `value`.
    pub fn constant_on(dataset: &CrowdDataset, value: f64) -> Self {
        let mut m = Self::empty(dataset.len(), dataset.num_annotators());
        for cell in dataset.cells() {
            m.values[cell.instance * m.cols + cell.annotator] = Some(value);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, r: usize) -> Option<f64> {
        self.values[i * self.cols + r]
    }

    pub fn set(&mut self, i: usize, r: usize, value: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::InvalidProbability(format!("omega {value} at ({i}, {r})")));
        }
        self.values[i * self.cols + r] = Some(value);
        Ok(())
    }

    /// Mean over defined cells, `None` if there are none.
    pub fn mean(&self) -> Option<f64> {
        let (sum, n) = self.values.iter().flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        (n > 0).then(|| sum / n as f64)
    }

    /// Mean over the defined cells of instance `i`.
    pub fn row_mean(&self, i: usize) -> Option<f64> {
        let row = &self.values[i * self.cols..(i + 1) * self.cols];
        let (sum, n) = row.iter().flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        (n > 0).then(|| sum / n as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let data = self.values.iter().map(|v| v.unwrap_or(-1.0)).collect();
        save_matrix(&Matrix::from_vec(self.rows, self.cols, data)?, "omega", path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, _) = load_matrix(path)?;
        let mut out = Self::empty(m.rows(), m.cols());
        for (slot, &v) in out.values.iter_mut().zip(m.data()) {
            if v == -1.0 {
                continue;
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Parse { path: path.into(), message: format!("omega value {v} outside [0, 1]") });
            }
            *slot = Some(v);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// persistence

/// Writes to a sibling temp file then renames, so a failed write never
/// leaves a partial file at `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl fmt::Display) -> Error {
    Error::Parse { path: path.into(), message: format!("line {}: {message}", line + 1) }
}

/// Parses a headerless numeric CSV into rows of fields.
fn parse_grid<T: std::str::FromStr>(path: &Path, text: &str) -> Result<Vec<Vec<T>>>
where
    T::Err: fmt::Display,
{
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<T>().map_err(|e| parse_err(path, ln, format!("`{f}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            let first: &Vec<T> = first;
            if first.len() != row.len() {
                return Err(parse_err(path, ln, format!("expected {} fields, found {}", first.len(), row.len())));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

fn format_rows<T: fmt::Display>(rows: impl Iterator<Item = impl IntoIterator<Item = T>>) -> String {
    let mut out = String::new();
    for row in rows {
        let fields: Vec<String> = row.into_iter().map(|v| v.to_string()).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Writes `# rows cols role` then the rows.
pub fn save_matrix(m: &Matrix, role: &str, path: &Path) -> Result<()> {
    if role.contains(char::is_whitespace) {
        return Err(Error::InvalidArgument(format!("matrix role `{role}` contains whitespace")));
    }
    let mut text = format!("# {} {} {role}\n", m.rows(), m.cols());
    text.push_str(&format_rows(m.row_iter().map(|r| r.iter().copied())));
    write_atomic(path, text.as_bytes())
}

/// Reads a matrix written by [`save_matrix`], returning it with its role.
pub fn load_matrix(path: &Path) -> Result<(Matrix, String)> {
    let text = read_text(path)?;
    let header = text.lines().next().unwrap_or_default();
    let parts: Vec<&str> = header.trim_start_matches('#').split_whitespace().collect();
    let (rows, cols, role) = match parts.as_slice() {
        [r, c, role] if header.starts_with('#') => {
            let r = r.parse::<usize>().map_err(|e| parse_err(path, 0, e))?;
            let c = c.parse::<usize>().map_err(|e| parse_err(path, 0, e))?;
            (r, c, role.to_string())
        }
        _ => return Err(parse_err(path, 0, "expected `# rows cols role` header")),
    };
    let grid: Vec<Vec<f64>> = parse_grid(path, &text)?;
    if grid.len() != rows || grid.iter().any(|r| r.len() != cols) {
        return Err(parse_err(path, 0, format!("header says {rows}x{cols}, body disagrees")));
    }
    let m = Matrix::from_vec(rows, cols, grid.concat()).map_err(|e| Error::Parse {
        path: path.into(),
        message: e.to_string(),
    })?;
    Ok((m, role))
}

/// Conventional file names for one split.
#[derive(Clone, Debug)]
pub struct DatasetPaths {
    pub features: PathBuf,
    pub annotations: PathBuf,
    pub labels: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: &Path, prefix: &str) -> Self {
        Self {
            features: dir.join(format!("{prefix}_features.csv")),
            annotations: dir.join(format!("{prefix}_annotations.csv")),
            labels: dir.join(format!("{prefix}_labels.csv")),
        }
    }
}

pub fn load_dataset(
    features_path: &Path,
    annotations_path: &Path,
    labels_path: Option<&Path>,
    num_classes: usize,
    split: Split,
) -> Result<CrowdDataset> {
    let feats: Vec<Vec<f64>> = parse_grid(features_path, &read_text(features_path)?)?;
    let n = feats.len();
    let d = feats.first().map_or(0, Vec::len);
    let features = Matrix::from_vec(n, d, feats.concat())
        .map_err(|e| Error::Parse { path: features_path.into(), message: e.to_string() })?;

    let ann: Vec<Vec<i64>> = parse_grid(annotations_path, &read_text(annotations_path)?)?;
    if ann.len() != n {
        return Err(Error::Shape(format!(
            "{} has {} rows but {} has {n}",
            annotations_path.display(),
            ann.len(),
            features_path.display()
        )));
    }
    let r = ann.first().map_or(0, Vec::len);

    let labels = match labels_path {
        None => None,
        Some(p) => {
            let grid: Vec<Vec<i64>> = parse_grid(p, &read_text(p)?)?;
            if grid.len() != n || grid.iter().any(|row| row.len() != 1) {
                return Err(Error::Shape(format!("{} must be {n} rows x 1 column", p.display())));
            }
            let mut out = Vec::with_capacity(n);
            for (i, row) in grid.iter().enumerate() {
                if row[0] < 0 {
                    return Err(parse_err(p, i, format!("negative label {}", row[0])));
                }
                out.push(row[0] as usize);
            }
            Some(out)
        }
    };
    CrowdDataset::new(features, r, ann.concat(), labels, num_classes, split)
}

/// Writes `{prefix}_features.csv`, `{prefix}_annotations.csv` and, when true
/// labels are present, `{prefix}_labels.csv` into `dir`.
pub fn save_dataset(ds: &CrowdDataset, dir: &Path, prefix: &str) -> Result<DatasetPaths> {
    let paths = DatasetPaths::in_dir(dir, prefix);
    let f = ds.features();
    write_atomic(&paths.features, format_rows(f.row_iter().map(|r| r.iter().copied())).as_bytes())?;
    let ann = format_rows((0..ds.len()).map(|i| ds.annotation_row(i).iter().copied()));
    write_atomic(&paths.annotations, ann.as_bytes())?;
    if let Some(labels) = ds.true_labels() {
        write_atomic(&paths.labels, format_rows(labels.iter().map(|&z| [z])).as_bytes())?;
    }
    Ok(paths)
}

// ---------------------------------------------------------------------------
// statistics

/// Empirical confusion of one annotator against reference labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalConfusion {
    pub matrix: ConfusionMatrix,
    /// Classes with no observed annotation; their rows are uniform.
    pub unobserved_rows: Vec<usize>,
    /// Number of annotations per reference class.
    pub row_counts: Vec<usize>,
}

pub fn empirical_confusion(
    dataset: &CrowdDataset,
    annotator: usize,
    reference: &[usize],
) -> Result<EmpiricalConfusion> {
    let c = dataset.num_classes();
    if reference.len() != dataset.len() {
        return Err(Error::Shape(format!("{} reference labels for {} instances", reference.len(), dataset.len())));
    }
    if annotator >= dataset.num_annotators() {
        return Err(Error::InvalidArgument(format!("annotator {annotator} out of range")));
    }
    if let Some(z) = reference.iter().find(|&&z| z >= c) {
        return Err(Error::InvalidArgument(format!("reference label {z} out of range")));
    }
    let mut counts = Matrix::zeros(c, c);
    let mut row_counts = vec![0usize; c];
    for (i, &z) in reference.iter().enumerate() {
        if let Some(y) = dataset.annotation(i, annotator) {
            counts[(z, y)] += 1.0;
            row_counts[z] += 1;
        }
    }
    if row_counts.iter().all(|&n| n == 0) {
        return Err(Error::EmptyAnnotator(annotator));
    }
    let mut unobserved_rows = Vec::new();
    for (a, &n) in row_counts.iter().enumerate() {
        let row = counts.row_mut(a);
        if n == 0 {
            row.fill(1.0 / c as f64);
            unobserved_rows.push(a);
        } else {
            row.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    Ok(EmpiricalConfusion {
        matrix: ConfusionMatrix::new(counts, ConfusionRole::Empirical)?,
        unobserved_rows,
        row_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CrowdDataset {
        let x = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        CrowdDataset::new(x, 2, vec![0, 1, 1, -1, 1, 1], Some(vec![0, 0, 1]), 2, Split::Train).unwrap()
    }

    #[test]
    fn counts_observed_annotations() {
        let ds = small();
        assert_eq!(ds.num_observed(), 5);
        assert_eq!(ds.cells_of(1), &[Cell { instance: 1, annotator: 0, label: 1 }]);
        assert_eq!(ds.annotation(1, 1), None);
    }

    #[test]
    fn rejects_out_of_range_and_empty_rows() {
        let x = Matrix::zeros(2, 1);
        let err = CrowdDataset::new(x.clone(), 1, vec![0, 2], None, 2, Split::Train).unwrap_err();
        assert!(matches!(err, Error::AnnotationRange { row: 1, col: 0, value: 2, .. }), "{err}");
        let err = CrowdDataset::new(x.clone(), 1, vec![0, -1], None, 2, Split::Train).unwrap_err();
        assert!(matches!(err, Error::EmptyAnnotationRow(1)));
        // evaluation splits may be unannotated
        CrowdDataset::new(x, 1, vec![0, -1], None, 2, Split::Test).unwrap();
    }

    #[test]
    fn missing_labels_refused() {
        let x = Matrix::zeros(1, 1);
        let ds = CrowdDataset::new(x, 1, vec![0], None, 2, Split::Train).unwrap();
        assert!(matches!(ds.require_labels("accuracy"), Err(Error::MissingLabels(_))));
    }

    #[test]
    fn confusion_rejects_non_stochastic() {
        let m = Matrix::from_rows(&[vec![0.5, 0.6], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(ConfusionMatrix::new(m, ConfusionRole::Global), Err(Error::NotStochastic { row: 0, .. })));
        let m = Matrix::from_rows(&[vec![1.5, -0.5], vec![0.0, 1.0]]).unwrap();
        assert!(ConfusionMatrix::new(m, ConfusionRole::Global).is_err());
    }

    #[test]
    fn empirical_confusion_examples() {
        let x = Matrix::zeros(3, 1);
        let ds = CrowdDataset::new(x, 1, vec![0, 1, 1], None, 2, Split::Train).unwrap();
        let e = empirical_confusion(&ds, 0, &[0, 0, 1]).unwrap();
        assert_eq!(e.matrix.entries().data(), &[0.5, 0.5, 0.0, 1.0]);
        assert!(e.unobserved_rows.is_empty());

        let e = empirical_confusion(&ds, 0, &[0, 1, 1]).unwrap();
        assert_eq!(e.matrix.entries(), &Matrix::identity(2));

        let x = Matrix::zeros(2, 1);
        let ds = CrowdDataset::new(x, 1, vec![0, 0], None, 3, Split::Train).unwrap();
        let e = empirical_confusion(&ds, 0, &[0, 0]).unwrap();
        assert_eq!(e.unobserved_rows, vec![1, 2]);
        assert_eq!(e.matrix.row(2), &[1.0 / 3.0; 3]);
    }

    #[test]
    fn empirical_confusion_requires_annotations() {
        let x = Matrix::zeros(2, 1);
        let ds = CrowdDataset::new(x, 2, vec![0, -1, 1, -1], None, 2, Split::Train).unwrap();
        assert!(matches!(empirical_confusion(&ds, 1, &[0, 1]), Err(Error::EmptyAnnotator(1))));
    }

    #[test]
    fn role_parses() {
        for role in [ConfusionRole::Global, ConfusionRole::Empirical, ConfusionRole::Individual(7)] {
            assert_eq!(role.to_string().parse::<ConfusionRole>().unwrap(), role);
        }
    }
}
