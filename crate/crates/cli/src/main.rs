use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use conal_core::analysis::{aligned_recovery_score, confusion_pair_heatmap, omega_label_distribution, recovery_score};
use conal_core::baselines::majority_labels;
use conal_core::data::{save_matrix, write_atomic, ConfusionMatrix, CrowdSplits, OmegaMatrix};
use conal_core::em::{run_em, ClassModel, EmVariant};
use conal_core::experiment::{
    generate_for_seed, markdown_table, report_from_dir, sweep_to_dir, write_json, ExperimentConfig, Manifest,
    ReferenceLabels,
};
use conal_core::methods::{MethodRegistry, MethodRun};
use conal_core::numerics::{Matrix, Rng};
use conal_core::synth::GroundTruthWorld;
use conal_core::theory::{bound_report, BoundInput};
use conal_core::training::accuracy;

#[derive(Parser)]
#[command(name = "conal", version, about = "Learning from crowds with common and individual annotation noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed (overrides train.seeds).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    jobs: Option<usize>,
    /// Learning method (overrides `method`).
    #[arg(long)]
    method: Option<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic splits and the planted world.
    Generate(Common),
    /// Train one method on one seed.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory with saved splits (overrides `data_dir`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Aggregate training annotations with EM.
    Em {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "featureless")]
        variant: Variant,
    },
    /// Minimax lower bound for a generated world.
    Bound {
        #[command(flatten)]
        common: Common,
        /// Output directory of `generate`; generated from the config otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "empirical")]
        prior: PriorKind,
    },
    /// Confusion-pair heatmap, recovery scores and gate histograms.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Output directory of `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory of `train`.
        #[arg(long)]
        learned: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, value_enum)]
        reference: Option<Reference>,
        /// Score recovery under the best relabeling of learned rows.
        #[arg(long)]
        align: bool,
    },
    /// Grid over common strength, proportion, lambda and method.
    Sweep(Common),
    /// Rebuild the sweep table from a finished sweep directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// List the registered methods.
    Methods,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Featureless,
    Coupled,
}

#[derive(Clone, Copy, ValueEnum)]
enum PriorKind {
    Empirical,
    Uniform,
}

#[derive(Clone, Copy, ValueEnum)]
enum Reference {
    Truth,
    Majority,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.train.seeds = vec![s];
    }
    if let Some(j) = common.jobs {
        cfg.jobs = j;
    }
    if let Some(m) = &common.method {
        cfg.method = m.clone();
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn first_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.train.seeds[0]
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

const WORLD_DIR: &str = "world";

fn save_world(world: &GroundTruthWorld, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_json(&dir.join("world.json"), world)?;
    world.global_confusion.save(&dir.join("global_confusion.csv"))?;
    for (r, m) in world.individual_confusions.iter().enumerate() {
        m.save(&dir.join(format!("individual_confusion_{r}.csv")))?;
    }
    world.omega.save(&dir.join("omega.csv"))?;
    Ok(())
}

fn load_world(data_dir: &Path) -> Result<GroundTruthWorld> {
    let path = data_dir.join(WORLD_DIR).join("world.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Splits from `data_dir` when given, generated from the config otherwise.
fn obtain_splits(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<(CrowdSplits, Option<GroundTruthWorld>)> {
    match data.or(cfg.data_dir.as_deref()) {
        Some(dir) => {
            let splits = CrowdSplits::load(dir, cfg.dataset.num_classes)?;
            let world = load_world(dir).ok();
            Ok((splits, world))
        }
        None => {
            let (splits, world) = generate_for_seed(&cfg.noise, &cfg.dataset, first_seed(cfg))?;
            Ok((splits, Some(world)))
        }
    }
}

fn save_confusions(dir: &Path, global: Option<&ConfusionMatrix>, individual: &[ConfusionMatrix]) -> Result<Vec<String>> {
    let mut written = Vec::new();
    if let Some(g) = global {
        g.save(&dir.join("global_confusion.csv"))?;
        written.push("global_confusion.csv".to_string());
    }
    for (r, m) in individual.iter().enumerate() {
        let name = format!("individual_confusion_{r}.csv");
        m.save(&dir.join(&name))?;
        written.push(name);
    }
    Ok(written)
}

fn cmd_generate(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let seed = first_seed(&cfg);
    let (splits, world) = generate_for_seed(&cfg.noise, &cfg.dataset, seed)?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    splits.save(out)?;
    save_world(&world, &out.join(WORLD_DIR))?;
    Manifest::new("generate", &cfg, vec![seed], vec!["train_*.csv".into(), "validation_*.csv".into(), "test_*.csv".into(), "world/".into()])
        .write(out)?;
    println!(
        "{}",
        json!({
            "output_dir": out,
            "seed": seed,
            "train": splits.train.len(),
            "validation": splits.validation.len(),
            "test": splits.test.len(),
            "common_proportion": world.omega.mean(),
        })
    );
    Ok(())
}

fn write_run(run: &MethodRun, out: &Path, world: Option<&GroundTruthWorld>, align: bool) -> Result<Vec<String>> {
    let mut outputs = vec!["report.json".to_string(), "curves.csv".to_string(), "checkpoint/".to_string()];
    write_json(&out.join("report.json"), &run.report)?;
    write_atomic(&out.join("curves.csv"), run.report.curves_csv().as_bytes())?;
    run.checkpoint.save(&out.join("checkpoint"), json!({ "method": run.report.method, "seed": run.report.seed }))?;
    outputs.extend(save_confusions(out, run.global_confusion.as_ref(), &run.individual_confusions)?);
    if let Some(om) = &run.train_omega {
        om.save(&out.join("omega.csv"))?;
        outputs.push("omega.csv".into());
    }
    if !run.log_likelihood.is_empty() {
        write_atomic(&out.join("log_likelihood.csv"), log_likelihood_csv(&run.log_likelihood).as_bytes())?;
        outputs.push("log_likelihood.csv".into());
    }
    if let (Some(w), Some(g)) = (world, &run.global_confusion) {
        let score = if align { aligned_recovery_score(g, &w.global_confusion)? } else { recovery_score(g, &w.global_confusion)? };
        write_json(&out.join("recovery.json"), &score)?;
        outputs.push("recovery.json".into());
    }
    Ok(outputs)
}

fn log_likelihood_csv(ll: &[f64]) -> String {
    let mut s = String::from("iteration,log_likelihood\n");
    for (i, v) in ll.iter().enumerate() {
        s.push_str(&format!("{},{v}\n", i + 1));
    }
    s
}

fn cmd_train(common: &Common, data: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let seed = first_seed(&cfg);
    let (splits, world) = obtain_splits(&cfg, data)?;
    let registry = MethodRegistry::default();
    let run = registry.get(&cfg.method)?.run(&splits, &cfg.train, seed)?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    let outputs = write_run(&run, out, world.as_ref(), cfg.analysis.align)?;
    Manifest::new("train", &cfg, vec![seed], outputs).write(out)?;
    println!(
        "{}",
        json!({
            "method": cfg.method,
            "seed": seed,
            "selected_epoch": run.report.selected_epoch,
            "val_accuracy": run.report.val_accuracy,
            "test_accuracy": run.report.test_accuracy,
        })
    );
    Ok(())
}

fn cmd_em(common: &Common, data: Option<&Path>, variant: Variant) -> Result<()> {
    let cfg = load_config(common)?;
    let seed = first_seed(&cfg);
    let (splits, _) = obtain_splits(&cfg, data)?;
    let variant = match variant {
        Variant::Featureless => EmVariant::Featureless,
        Variant::Coupled => EmVariant::Coupled,
    };
    let em_cfg = conal_core::em::EmConfig { classifier_hidden: cfg.train.hidden, ..cfg.train.em.clone() };
    let outcome = run_em(&splits.train, variant, &em_cfg, &mut Rng::new(seed).fork(10))?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    let mut labels = String::from("instance,label\n");
    for (i, l) in outcome.labels.iter().enumerate() {
        labels.push_str(&format!("{i},{l}\n"));
    }
    write_atomic(&out.join("labels.csv"), labels.as_bytes())?;
    save_matrix(&outcome.posteriors.qz, "posteriors", &out.join("posteriors.csv"))?;
    write_atomic(&out.join("log_likelihood.csv"), log_likelihood_csv(&outcome.state.log_likelihood).as_bytes())?;
    let state = &outcome.state;
    let mut outputs = vec!["labels.csv".into(), "posteriors.csv".into(), "log_likelihood.csv".into(), "omega.csv".into()];
    outputs.extend(save_confusions(out, (!state.tied).then_some(&state.global), &state.individual)?);
    state.omega.save(&out.join("omega.csv"))?;
    if let ClassModel::Prior(p) = &state.class_model {
        p.save(&out.join("prior.csv"))?;
        outputs.push("prior.csv".into());
    }
    let label_accuracy = splits.train.true_labels().map(|t| accuracy(&outcome.labels, t));
    let summary = json!({
        "variant": format!("{variant:?}").to_lowercase(),
        "iterations": state.iteration,
        "final_log_likelihood": state.log_likelihood.last(),
        "label_accuracy": label_accuracy,
    });
    write_json(&out.join("summary.json"), &summary)?;
    outputs.push("summary.json".into());
    Manifest::new("em", &cfg, vec![seed], outputs).write(out)?;
    println!("{summary}");
    Ok(())
}

fn cmd_bound(common: &Common, data: Option<&Path>, prior: PriorKind) -> Result<()> {
    let cfg = load_config(common)?;
    let seed = first_seed(&cfg);
    let (splits, world) = match data {
        Some(dir) => (CrowdSplits::load(dir, cfg.dataset.num_classes)?, load_world(dir)?),
        None => generate_for_seed(&cfg.noise, &cfg.dataset, seed)?,
    };
    let train = &splits.train;
    let c = train.num_classes();
    let rho = match (prior, train.true_labels()) {
        (PriorKind::Empirical, Some(t)) => {
            let mut counts = vec![0.0; c];
            t.iter().for_each(|&z| counts[z] += 1.0);
            counts.iter().map(|v| v / t.len() as f64).collect()
        }
        (PriorKind::Empirical, None) => bail!("the empirical prior needs true training labels; use --prior uniform"),
        (PriorKind::Uniform, _) => vec![1.0 / c as f64; c],
    };
    let priors = Matrix::from_fn(train.len(), c, |_, k| rho[k]);
    let omega = if world.omega.rows() == train.len() { world.omega.clone() } else { OmegaMatrix::empty(train.len(), train.num_annotators()) };
    let input = BoundInput::new(priors, world.global_confusion.clone(), world.individual_confusions.clone(), omega)?;
    let report = bound_report(&input);
    let out = &cfg.output_dir;
    create_dir(out)?;
    write_json(&out.join("bound.json"), &report)?;
    Manifest::new("bound", &cfg, vec![seed], vec!["bound.json".into()]).write(out)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_analyze(
    common: &Common,
    data: &Path,
    learned: Option<&Path>,
    tau: Option<f64>,
    reference: Option<Reference>,
    align: bool,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    if tau.is_some() {
        cfg.analysis.tau = tau;
    }
    if let Some(r) = reference {
        cfg.analysis.reference = match r {
            Reference::Truth => ReferenceLabels::Truth,
            Reference::Majority => ReferenceLabels::Majority,
        };
    }
    cfg.analysis.align |= align;
    cfg.validate()?;
    let splits = CrowdSplits::load(data, cfg.dataset.num_classes)?;
    let train = &splits.train;
    let out = &cfg.output_dir;
    create_dir(out)?;
    let mut outputs = Vec::new();

    let reference_labels = match cfg.analysis.reference {
        ReferenceLabels::Truth => train.require_labels("a ground-truth reference")?.to_vec(),
        ReferenceLabels::Majority => majority_labels(train)?,
    };
    let tau = cfg.analysis.tau.unwrap_or(1.0 / train.num_classes() as f64);
    let heatmap = confusion_pair_heatmap(train, &reference_labels, tau)?;
    write_atomic(&out.join("heatmap.csv"), heatmap.to_csv().as_bytes())?;
    outputs.push("heatmap.csv".to_string());
    print!("{}", heatmap.text_grid());

    let world = load_world(data).ok();
    if let Some(w) = &world {
        let planted = omega_label_distribution(&w.omega, train)?;
        write_atomic(&out.join("omega_planted.csv"), planted.to_csv().as_bytes())?;
        outputs.push("omega_planted.csv".into());
    }
    if let Some(dir) = learned {
        let mut rows = String::from("matrix,row,tv\n");
        let mut any = false;
        if let Some(w) = &world {
            let score = |learned: &ConfusionMatrix, truth: &ConfusionMatrix| {
                if cfg.analysis.align { aligned_recovery_score(learned, truth) } else { recovery_score(learned, truth) }
            };
            let global_path = dir.join("global_confusion.csv");
            if global_path.exists() {
                let s = score(&ConfusionMatrix::load(&global_path)?, &w.global_confusion)?;
                s.per_row.iter().enumerate().for_each(|(z, v)| rows.push_str(&format!("global,{z},{v}\n")));
                println!("global recovery (mean TV): {:.4}", s.mean);
                any = true;
            }
            for (r, truth) in w.individual_confusions.iter().enumerate() {
                let p = dir.join(format!("individual_confusion_{r}.csv"));
                if p.exists() {
                    let s = score(&ConfusionMatrix::load(&p)?, truth)?;
                    s.per_row.iter().enumerate().for_each(|(z, v)| rows.push_str(&format!("individual:{r},{z},{v}\n")));
                    any = true;
                }
            }
        }
        if any {
            write_atomic(&out.join("recovery.csv"), rows.as_bytes())?;
            outputs.push("recovery.csv".into());
        }
        let omega_path = dir.join("omega.csv");
        if omega_path.exists() {
            let learned_omega = OmegaMatrix::load(&omega_path)?;
            let dist = omega_label_distribution(&learned_omega, train)?;
            write_atomic(&out.join("omega_learned.csv"), dist.to_csv().as_bytes())?;
            outputs.push("omega_learned.csv".into());
        }
    }
    Manifest::new("analyze", &cfg, cfg.train.seeds.clone(), outputs).write(out)?;
    Ok(())
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    Ok(pool.install(f))
}

fn cmd_sweep(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let registry = MethodRegistry::default();
    let table = with_pool(cfg.jobs, || sweep_to_dir(&cfg, &registry, &cfg.output_dir))??;
    print!("{}", markdown_table(&table));
    Ok(())
}

fn cmd_report(out: &Path) -> Result<()> {
    let table = report_from_dir(out)?;
    print!("{}", markdown_table(&table));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => cmd_generate(&c),
        Command::Train { common, data } => cmd_train(&common, data.as_deref()),
        Command::Em { common, data, variant } => cmd_em(&common, data.as_deref(), variant),
        Command::Bound { common, data, prior } => cmd_bound(&common, data.as_deref(), prior),
        Command::Analyze { common, data, learned, tau, reference, align } => {
            cmd_analyze(&common, &data, learned.as_deref(), tau, reference, align)
        }
        Command::Sweep(c) => cmd_sweep(&c),
        Command::Report { out } => cmd_report(&out),
        Command::Methods => {
            let registry = MethodRegistry::default();
            for name in registry.names() {
                println!("{name}\t{}", registry.get(name)?.description());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<conal_core::Error>().map_or("error", |c| c.kind());
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("{}", json!({ "error": { "kind": kind, "message": chain.join(": ") } }));
            ExitCode::FAILURE
        }
    }
}
