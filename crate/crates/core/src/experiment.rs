//! Experiment configuration, seeded data generation, sweeps and manifests.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::recovery_score;
use crate::data::{write_atomic, CrowdSplits};
use crate::error::{Error, Result};
use crate::methods::{MethodRegistry, MethodRun};
use crate::numerics::Rng;
use crate::synth::{generate, GroundTruthWorld, InstanceSpec, NoiseSpec};
use crate::training::{mean_and_std, TrainConfig};

/// Sub-stream of a run seed that drives data generation; training uses the
/// seed's root stream.
pub const DATA_STREAM: u64 = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub common_strength: Vec<f64>,
    pub proportion: Vec<f64>,
    pub lambda: Vec<f64>,
    pub methods: Vec<String>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            common_strength: vec![0.4, 0.5, 0.6, 0.7, 0.8],
            proportion: vec![0.5],
            lambda: vec![1e-5],
            methods: vec!["conal".into(), "dl_cl".into(), "dl_mv".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSpec {
    /// Confusion-pair threshold; 1/C when absent.
    pub tau: Option<f64>,
    /// Reference labels for the heatmap: ground truth or majority vote.
    pub reference: ReferenceLabels,
    /// Score recovery under the best relabeling of learned rows.
    pub align: bool,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        Self { tau: None, reference: ReferenceLabels::Truth, align: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceLabels {
    Truth,
    Majority,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: InstanceSpec,
    pub noise: NoiseSpec,
    pub train: TrainConfig,
    pub method: String,
    /// Load splits from here instead of generating them.
    pub data_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Worker threads for sweeps; 0 means one per core.
    pub jobs: usize,
    pub sweep: SweepSpec,
    pub analysis: AnalysisSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: InstanceSpec::default(),
            noise: NoiseSpec::default(),
            train: TrainConfig::default(),
            method: "conal".into(),
            data_dir: None,
            output_dir: PathBuf::from("out"),
            jobs: 0,
            sweep: SweepSpec::default(),
            analysis: AnalysisSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.noise.validate()?;
        self.train.validate()?;
        let registry = MethodRegistry::default();
        registry.get(&self.method)?;
        for m in &self.sweep.methods {
            registry.get(m)?;
        }
        let unit = |v: &f64| (0.0..=1.0).contains(v);
        if !self.sweep.common_strength.iter().all(unit) || !self.sweep.proportion.iter().all(unit) {
            return Err(Error::InvalidArgument("sweep strengths and proportions must lie in [0, 1]".into()));
        }
        if self.train.seeds.is_empty() {
            return Err(Error::InvalidArgument("train.seeds must not be empty".into()));
        }
        if let Some(t) = self.analysis.tau {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidArgument(format!("analysis.tau must be in [0, 1], got {t}")));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// Synthetic splits and planted world for a run seed.
pub fn generate_for_seed(noise: &NoiseSpec, instances: &InstanceSpec, seed: u64) -> Result<(CrowdSplits, GroundTruthWorld)> {
    generate(noise, instances, &Rng::new(seed).fork(DATA_STREAM))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub config: ExperimentConfig,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig, seeds: Vec<u64>, outputs: Vec<String>) -> Self {
        Self {
            tool: "conal".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash: config.hash(),
            seeds,
            config: config.clone(),
            outputs,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("manifest.json"), self)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse { path, message: e.to_string() })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// One run of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub common_strength: f64,
    pub proportion: f64,
    pub lambda: f64,
    pub method: String,
    pub seed: u64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub selected_epoch: usize,
    /// Mean row-wise TV distance of the learned global matrix to the
    /// planted one, for methods that learn one.
    pub global_tv: Option<f64>,
}

/// Mean and sample standard deviation per (strength, proportion, lambda,
/// method) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub common_strength: f64,
    pub proportion: f64,
    pub lambda: f64,
    pub method: String,
    pub runs: usize,
    pub mean_test: f64,
    pub std_test: f64,
    pub mean_val: f64,
    pub std_val: f64,
    pub mean_global_tv: Option<f64>,
}

fn run_row(run: &MethodRun, world: &GroundTruthWorld, key: (f64, f64, f64), method: &str, seed: u64) -> Result<SweepRow> {
    let global_tv = match &run.global_confusion {
        Some(g) => Some(recovery_score(g, &world.global_confusion)?.mean),
        None => None,
    };
    Ok(SweepRow {
        common_strength: key.0,
        proportion: key.1,
        lambda: key.2,
        method: method.to_string(),
        seed,
        val_accuracy: run.report.val_accuracy,
        test_accuracy: run.report.test_accuracy,
        selected_epoch: run.report.selected_epoch,
        global_tv,
    })
}

/// Runs every (strength, proportion, lambda, method, seed) combination.
/// Data depend only on (strength, proportion, seed), so methods and lambdas
/// are compared on identical splits. Rows come back in grid order.
pub fn run_sweep(config: &ExperimentConfig, registry: &MethodRegistry) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let spec = &config.sweep;
    let seeds = &config.train.seeds;
    let data_keys: Vec<(f64, f64, u64)> = spec
        .common_strength
        .iter()
        .flat_map(|&s| spec.proportion.iter().flat_map(move |&p| seeds.iter().map(move |&seed| (s, p, seed))))
        .collect();
    let worlds: Vec<(CrowdSplits, GroundTruthWorld)> = data_keys
        .par_iter()
        .map(|&(s, p, seed)| {
            let noise = NoiseSpec { common_strength: s, target_common_proportion: p, ..config.noise.clone() };
            generate_for_seed(&noise, &config.dataset, seed)
        })
        .collect::<Result<_>>()?;

    let mut jobs = Vec::new();
    for (s_idx, &s) in spec.common_strength.iter().enumerate() {
        for (p_idx, &p) in spec.proportion.iter().enumerate() {
            for &lambda in &spec.lambda {
                for method in &spec.methods {
                    for (k, &seed) in seeds.iter().enumerate() {
                        let world_idx = (s_idx * spec.proportion.len() + p_idx) * seeds.len() + k;
                        jobs.push((s, p, lambda, method.as_str(), seed, world_idx));
                    }
                }
            }
        }
    }
    jobs.par_iter()
        .map(|&(s, p, lambda, method, seed, w)| {
            let (splits, world) = &worlds[w];
            let train = TrainConfig { lambda, ..config.train.clone() };
            let run = registry.get(method)?.run(splits, &train, seed)?;
            log::info!("strength {s} proportion {p} lambda {lambda} {method} seed {seed}: test {:.4}", run.report.test_accuracy);
            run_row(&run, world, (s, p, lambda), method, seed)
        })
        .collect()
}

/// Groups rows by cell in first-appearance order.
pub fn summarize(rows: &[SweepRow]) -> Vec<SweepCell> {
    let mut keys: Vec<(f64, f64, f64, String)> = Vec::new();
    for r in rows {
        let k = (r.common_strength, r.proportion, r.lambda, r.method.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(s, p, l, m)| {
            let cell: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| r.common_strength == s && r.proportion == p && r.lambda == l && r.method == m)
                .collect();
            let (mean_test, std_test) = mean_and_std(&cell.iter().map(|r| r.test_accuracy).collect::<Vec<_>>());
            let (mean_val, std_val) = mean_and_std(&cell.iter().map(|r| r.val_accuracy).collect::<Vec<_>>());
            let tvs: Vec<f64> = cell.iter().filter_map(|r| r.global_tv).collect();
            SweepCell {
                common_strength: s,
                proportion: p,
                lambda: l,
                method: m,
                runs: cell.len(),
                mean_test,
                std_test,
                mean_val,
                std_val,
                mean_global_tv: (!tvs.is_empty()).then(|| tvs.iter().sum::<f64>() / tvs.len() as f64),
            }
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })?;
    write_atomic(path, &bytes)
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() }))
        .collect()
}

pub const SUMMARY_FILE: &str = "summary.csv";
pub const TABLE_FILE: &str = "table.csv";

/// Runs the sweep and writes `summary.csv` (one row per run), `table.csv`
/// (one row per cell) and `manifest.json` into `dir`.
pub fn sweep_to_dir(config: &ExperimentConfig, registry: &MethodRegistry, dir: &Path) -> Result<Vec<SweepCell>> {
    let rows = run_sweep(config, registry)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(&dir.join(SUMMARY_FILE), &rows)?;
    let table = summarize(&rows);
    write_csv(&dir.join(TABLE_FILE), &table)?;
    Manifest::new("sweep", config, config.train.seeds.clone(), vec![SUMMARY_FILE.into(), TABLE_FILE.into()]).write(dir)?;
    Ok(table)
}

/// Rebuilds `table.csv` from a finished sweep's `summary.csv`.
pub fn report_from_dir(dir: &Path) -> Result<Vec<SweepCell>> {
    Manifest::read(dir)?;
    let rows: Vec<SweepRow> = read_csv(&dir.join(SUMMARY_FILE))?;
    let table = summarize(&rows);
    write_csv(&dir.join(TABLE_FILE), &table)?;
    Ok(table)
}

/// Markdown rendering of a sweep table, mean ± std in percent.
pub fn markdown_table(cells: &[SweepCell]) -> String {
    let mut out = String::from("| strength | proportion | lambda | method | runs | test acc (%) | global TV |\n|---|---|---|---|---|---|---|\n");
    for c in cells {
        let tv = c.mean_global_tv.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {:.2} ± {:.2} | {} |\n",
            c.common_strength,
            c.proportion,
            c.lambda,
            c.method,
            c.runs,
            100.0 * c.mean_test,
            100.0 * c.std_test,
            tv
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"method": "conal", "bogus": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"noise": {"strength": 0.3}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"method": "svm"}"#).is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"method": "dl_mv", "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.dataset.num_classes, 6);
        assert_eq!(cfg.method, "dl_mv");
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.epochs += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn summary_groups_cells() {
        let row = |m: &str, seed, acc| SweepRow {
            common_strength: 0.4,
            proportion: 0.5,
            lambda: 0.0,
            method: m.into(),
            seed,
            val_accuracy: acc,
            test_accuracy: acc,
            selected_epoch: 1,
            global_tv: None,
        };
        let cells = summarize(&[row("a", 0, 0.5), row("a", 1, 0.7), row("b", 0, 0.9)]);
        assert_eq!(cells.len(), 2);
        assert!((cells[0].mean_test - 0.6).abs() < 1e-15);
        assert!((cells[0].std_test - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!(cells[1].runs, 1);
    }
}
