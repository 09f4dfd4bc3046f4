use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use canopy::cloudio::{load_cloud, save_cloud};
use canopy::eval::MetricsReport;
use canopy::harness::{self, scene_files, ExperimentConfig, RunInputs, RunRecord, Strategy, Task};
use canopy::instseg::ClusterConfig;
use canopy::semseg::evaluate_semseg;
use canopy::ssl::{pretrain, PretrainConfig};
use canopy::synthforest::{
    catalog, generate_scene, generate_tree_dataset_with, load_tree_dataset, save_tree_dataset, ScanNuisance,
    SceneSpec,
};
use canopy::training::prepare_all;
use canopy::treecls::{evaluate_trees, prepare_trees};
use canopy::{Checkpoint, EncoderConfig, EncoderModel, InstanceModel, ReductionSpec, SemanticModel};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "canopy", version, about = "Label-efficient forest point-cloud experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON configuration document.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes or a tree classification dataset.
    Synth(Common),
    /// Contrastive pretraining of an encoder on unlabeled scenes.
    Pretrain(Common),
    /// Run an experiment configuration (any strategy) for all its seeds.
    Train(Common),
    /// Supervised training on the source domain only.
    Adapt(Common),
    /// Fine-tune a pretrained or adapted checkpoint on the target data.
    Finetune(Common),
    /// Apply a label-reduction protocol to a directory of clouds.
    Reduce(Common),
    /// Evaluate a checkpoint on test data.
    Eval(Common),
    /// Summarise run records into tables and curves.
    Report(Common),
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: serde_json::Value,
    outputs: Vec<String>,
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            list_files(root, &path, out)?;
        } else if let Ok(rel) = path.strip_prefix(root) {
            let rel = rel.to_string_lossy().replace('\\', "/");
            if rel != "manifest.json" {
                out.push(rel);
            }
        }
    }
    Ok(())
}

/// Records the command, its configuration and every file under `out`.
fn write_manifest(out: &Path, command: &str, config: &Path) -> Result<()> {
    let config: serde_json::Value = read_config(config)?;
    let mut outputs = Vec::new();
    list_files(out, out, &mut outputs)?;
    outputs.sort();
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            command,
            config,
            outputs,
        },
    )
}

#[derive(Deserialize)]
#[serde(rename_all = "snake_case")]
enum Preset {
    Source,
    Target,
    Mixed,
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum SynthConfig {
    Scenes {
        #[serde(default)]
        preset: Option<Preset>,
        /// Full scene description; its seed is replaced per scene.
        #[serde(default)]
        spec: Option<SceneSpec>,
        count: usize,
        #[serde(default)]
        seed: u64,
    },
    Trees {
        species: Vec<u32>,
        per_species: usize,
        density: f64,
        max_points: usize,
        #[serde(default = "ScanNuisance::none")]
        nuisance: ScanNuisance,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Serialize)]
struct SceneEntry {
    file: String,
    seed: u64,
    trees: usize,
}

fn synth(cfg: SynthConfig, out: &Path) -> Result<()> {
    match cfg {
        SynthConfig::Scenes {
            preset,
            spec,
            count,
            seed,
        } => {
            let mut listing = Vec::with_capacity(count);
            for i in 0..count as u64 {
                let s = seed.wrapping_add(i);
                let spec = match (&spec, &preset) {
                    (Some(spec), _) => SceneSpec { seed: s, ..spec.clone() },
                    (None, Some(Preset::Source)) => SceneSpec::source(s),
                    (None, Some(Preset::Target)) => SceneSpec::target(s),
                    (None, Some(Preset::Mixed) | None) => SceneSpec::mixed(s),
                };
                let scene = generate_scene(&spec)?;
                let file = format!("scene_{i:03}.csv");
                save_cloud(&scene.cloud, &out.join(&file))?;
                listing.push(SceneEntry {
                    file,
                    seed: s,
                    trees: scene.trees.len(),
                });
            }
            write_json(&out.join("scenes.json"), &listing)?;
        }
        SynthConfig::Trees {
            species,
            per_species,
            density,
            max_points,
            nuisance,
            seed,
        } => {
            let cat = catalog();
            let archetypes = species
                .iter()
                .map(|&s| {
                    cat.iter()
                        .find(|a| a.species_id == s)
                        .cloned()
                        .with_context(|| format!("unknown species {s}"))
                })
                .collect::<Result<Vec<_>>>()?;
            let trees = generate_tree_dataset_with(&archetypes, per_species, density, max_points, &nuisance, seed);
            save_tree_dataset(&trees, out)?;
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct PretrainJob {
    scenes: PathBuf,
    #[serde(default)]
    held_out: Option<PathBuf>,
    #[serde(default)]
    encoder: EncoderConfig,
    steps: usize,
    #[serde(default)]
    seed: u64,
    /// Replaces the defaults derived from `steps` when given.
    #[serde(default)]
    pretrain: Option<PretrainConfig>,
}

fn load_dir(dir: &Path) -> Result<Vec<canopy::PointCloud>> {
    scene_files(dir)?
        .iter()
        .map(|p| load_cloud(p).map_err(Into::into))
        .collect()
}

fn pretrain_cmd(job: PretrainJob, out: &Path) -> Result<()> {
    let scenes = load_dir(&job.scenes)?;
    let held_out = match &job.held_out {
        Some(d) => load_dir(d)?,
        None => Vec::new(),
    };
    let cfg = job.pretrain.unwrap_or_else(|| PretrainConfig {
        seed: job.seed,
        ..PretrainConfig::new(job.steps)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
    let mut model = EncoderModel::new(job.encoder, &mut rng)?;
    let history = pretrain(&mut model, &scenes, &held_out, &cfg)?;
    let mut ckpt = Checkpoint::default();
    model.write_checkpoint(&mut ckpt);
    ckpt.optimizer = Some(cfg.sgd);
    ckpt.save(&out.join("encoder.json"))?;
    fs::write(out.join("history.csv"), history.to_csv())?;
    if let Some((step, pos, neg)) = history.similarity.last() {
        log::info!("step {step}: positive similarity {pos:.3}, negative {neg:.3}");
    }
    Ok(())
}

fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    let inputs = RunInputs::load(cfg)?;
    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        let record = harness::run_with_inputs(cfg, &inputs, seed)?;
        log::info!("seed {seed}: {:.1} s", record.duration_seconds);
        records.push(record);
    }
    Ok(records)
}

fn adapt_cmd(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.strategy == Strategy::Scratch && cfg.pretrained.is_some() {
        bail!("scratch adaptation ignores the pretrained checkpoint; use ssl_adapt_finetune");
    }
    let inputs = RunInputs::load_for_adaptation(cfg)?;
    for &seed in &cfg.seeds {
        let model = harness::adapt(cfg, &inputs, seed)?;
        let dir = cfg.out.join(format!("seed_{seed}"));
        fs::create_dir_all(&dir)?;
        model.checkpoint().save(&dir.join("checkpoint.json"))?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct ReduceJob {
    input: PathBuf,
    reduction: ReductionSpec,
}

fn reduce_cmd(job: ReduceJob, out: &Path) -> Result<()> {
    for (i, path) in scene_files(&job.input)?.iter().enumerate() {
        let cloud = load_cloud(path)?;
        let seed = match job.reduction {
            ReductionSpec::Uniform { seed, .. } | ReductionSpec::TreeLevel { seed, .. } => seed,
        };
        let reduced = job.reduction.reseeded(seed.wrapping_add(i as u64)).apply(&cloud)?;
        let name = path.file_name().context("input file without a name")?;
        let mut target = out.join(name);
        target.set_extension("csv");
        save_cloud(&reduced, &target)?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct EvalJob {
    task: Task,
    checkpoint: PathBuf,
    test: PathBuf,
    #[serde(default)]
    cluster: ClusterConfig,
    /// Tree task: species in class order.
    #[serde(default)]
    species: Vec<u32>,
}

fn eval_cmd(job: EvalJob, out: &Path) -> Result<MetricsReport> {
    let ckpt = Checkpoint::load(&job.checkpoint)?;
    let metrics = match job.task {
        Task::Instseg => {
            let model = InstanceModel::from_checkpoint(&ckpt)?;
            let test = prepare_all(load_dir(&job.test)?, &model.encoder.config)?;
            let preds = test
                .iter()
                .map(|s| model.predict(s, &job.cluster))
                .collect::<canopy::Result<Vec<_>>>()?;
            let pairs: Vec<_> = preds.iter().zip(&test).map(|(p, s)| (p, &s.cloud)).collect();
            let metrics = MetricsReport::instance(&pairs)?;
            fs::write(out.join("per_scene.csv"), harness::per_scene_csv(&metrics))?;
            for (i, p) in preds.iter().enumerate() {
                fs::write(out.join(format!("instances_{i:03}.csv")), p.to_csv())?;
                write_json(&out.join(format!("clusters_{i:03}.json")), &p.cluster_table())?;
            }
            metrics
        }
        Task::Semseg => {
            let model = SemanticModel::from_checkpoint(&ckpt)?;
            let test = prepare_all(load_dir(&job.test)?, &model.encoder.config)?;
            let semantic = evaluate_semseg(&model, &test)?;
            write_json(&out.join("iou.json"), &semantic)?;
            MetricsReport {
                semantic: Some(semantic),
                ..Default::default()
            }
        }
        Task::Treecls => {
            let model = canopy::treecls::TreeClassifier::from_checkpoint(&ckpt)?;
            if job.species.len() != model.head.classes() {
                bail!(
                    "checkpoint has {} classes but {} species were listed",
                    model.head.classes(),
                    job.species.len()
                );
            }
            let trees: Vec<_> = load_tree_dataset(&job.test)?
                .into_iter()
                .filter(|t| job.species.contains(&t.species_id))
                .collect();
            let prepared = prepare_trees(&trees, &model.encoder.config.scales)?;
            let label = |t: &canopy::synthforest::TreeSample| {
                job.species.iter().position(|&s| s == t.species_id).unwrap_or(0)
            };
            let classification = evaluate_trees(&model, &prepared, label, job.species.len())?;
            MetricsReport {
                classification: Some(classification),
                ..Default::default()
            }
        }
    };
    write_json(&out.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

#[derive(Deserialize)]
struct ReportJob {
    /// Run record files, or directories searched for `record.json`.
    records: Vec<PathBuf>,
}

fn collect_records(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_file() {
        out.push(path.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_records(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "record.json") {
            out.push(p);
        }
    }
    Ok(())
}

fn report_cmd(job: ReportJob, out: &Path) -> Result<()> {
    let mut paths = Vec::new();
    for p in &job.records {
        collect_records(p, &mut paths)?;
    }
    let records = paths
        .iter()
        .map(|p| read_config::<RunRecord>(p))
        .collect::<Result<Vec<_>>>()?;
    let tables = harness::report(&records)?;
    for t in &tables {
        fs::write(out.join(format!("table_{}.csv", t.task.name())), t.to_csv())?;
    }
    write_json(&out.join("tables.json"), &tables)?;
    fs::write(out.join("curves.csv"), harness::curves_csv(&records))?;
    Ok(())
}

fn experiment(config: &Path, out: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)?;
    if let Some(obj) = value.as_object_mut() {
        obj.insert("out".into(), serde_json::Value::String(out.to_string_lossy().into_owned()));
    }
    let cfg: ExperimentConfig = serde_json::from_value(value)?;
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (name, common) = match &cli.command {
        Command::Synth(c) => ("synth", c),
        Command::Pretrain(c) => ("pretrain", c),
        Command::Train(c) => ("train", c),
        Command::Adapt(c) => ("adapt", c),
        Command::Finetune(c) => ("finetune", c),
        Command::Reduce(c) => ("reduce", c),
        Command::Eval(c) => ("eval", c),
        Command::Report(c) => ("report", c),
    };
    let out = common.out.as_path();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match &cli.command {
        Command::Synth(c) => synth(read_config(&c.config)?, out)?,
        Command::Pretrain(c) => pretrain_cmd(read_config(&c.config)?, out)?,
        Command::Train(c) => {
            run_experiment(&experiment(&c.config, out)?)?;
        }
        Command::Adapt(c) => adapt_cmd(&experiment(&c.config, out)?)?,
        Command::Finetune(c) => {
            let cfg = experiment(&c.config, out)?;
            if cfg.strategy == Strategy::Scratch {
                bail!("finetune needs an ssl_* strategy and a pretrained checkpoint");
            }
            run_experiment(&cfg)?;
        }
        Command::Reduce(c) => reduce_cmd(read_config(&c.config)?, out)?,
        Command::Eval(c) => {
            eval_cmd(read_config(&c.config)?, out)?;
        }
        Command::Report(c) => report_cmd(read_config(&c.config)?, out)?,
    }
    write_manifest(out, name, &common.config)
}
