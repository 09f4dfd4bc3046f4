//! Experiment orchestration: the training strategies, the three-stage
//! adaptation pipeline, label-reduction runs and summary tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloudio::{load_cloud, PointCloud};
use crate::encoder::{EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::eval::{average_precision, MetricsReport, SemanticMetrics};
use crate::instseg::{train_instseg_with, ClusterConfig, InstanceModel, InstancePrediction};
use crate::labelreduce::ReductionSpec;
use crate::semseg::{argmax_classes, evaluate_semseg, predictions_csv, train_semseg_with, SemanticModel};
use crate::synthforest::{load_tree_dataset, TreeSample};
use crate::tensorcore::Checkpoint;
use crate::training::{prepare_all, PreparedScene, TrainConfig};
use crate::treecls::{
    evaluate_trees, finetune_species, prepare_trees, pretrain_coarse, ClsTrainConfig, FewShotSplit, FinetuneConfig,
    predict_trees, FinetuneMode, TreeClassifier,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Instseg,
    Semseg,
    Treecls,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Instseg => "instseg",
            Task::Semseg => "semseg",
            Task::Treecls => "treecls",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Scratch,
    SslFinetune,
    SslAdaptFinetune,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Scratch => "scratch",
            Strategy::SslFinetune => "ssl_finetune",
            Strategy::SslAdaptFinetune => "ssl_adapt_finetune",
        }
    }
}

fn mode_name(mode: FinetuneMode) -> &'static str {
    match mode {
        FinetuneMode::HeadOnly => "head_only",
        FinetuneMode::All => "all",
        FinetuneMode::TwoStage => "two_stage",
    }
}

/// Input locations. Scene tasks read directories of CSV/PLY clouds; the tree
/// task reads tree dataset directories.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DataPaths {
    /// Labeled source domain for adaptation (coarse-labelled trees for the
    /// tree task).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<PathBuf>,
    /// Target training data; reduced by the configured protocol.
    #[serde(default)]
    pub train: PathBuf,
    #[serde(default)]
    pub test: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budgets {
    pub adapt_steps: usize,
    /// Steps of head-only or all-layer fine-tuning.
    pub finetune_steps: usize,
    /// Two-stage budgets: head-only steps, then all-layer steps.
    pub stage1_steps: Option<usize>,
    pub stage2_steps: Option<usize>,
    pub batch_points: usize,
    /// Defaults to 0.1 for the scene tasks and 0.01 for the tree task.
    pub initial_lr: Option<f64>,
    /// Stage-two learning rate relative to stage one.
    pub stage2_lr_factor: f64,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            adapt_steps: 400,
            finetune_steps: 200,
            stage1_steps: None,
            stage2_steps: None,
            batch_points: 1024,
            initial_lr: None,
            stage2_lr_factor: 0.2,
        }
    }
}

fn default_mode() -> FinetuneMode {
    FinetuneMode::All
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_shots() -> usize {
    40
}

fn default_hidden() -> usize {
    64
}

fn default_curve_points() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: Task,
    pub strategy: Strategy,
    #[serde(default = "default_mode")]
    pub finetune_mode: FinetuneMode,
    #[serde(default)]
    pub reduction: Option<ReductionSpec>,
    pub data: DataPaths,
    /// Encoder (or tree-classifier) checkpoint for the `ssl_*` strategies.
    #[serde(default)]
    pub pretrained: Option<PathBuf>,
    #[serde(default)]
    pub budgets: Budgets,
    /// Architecture of a from-scratch encoder.
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub cluster: ClusterConfig,
    /// Species fine-tuned by the tree task, one class each.
    #[serde(default)]
    pub species: Vec<u32>,
    #[serde(default = "default_shots")]
    pub shots: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Validation points recorded along fine-tuning (0 disables the curve).
    #[serde(default = "default_curve_points")]
    pub curve_points: usize,
    pub out: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strategy != Strategy::Scratch && self.pretrained.is_none() {
            return Err(Error::Config(format!(
                "strategy {} needs a pretrained checkpoint",
                self.strategy.name()
            )));
        }
        if self.finetune_mode == FinetuneMode::TwoStage
            && (self.budgets.stage1_steps.is_none() || self.budgets.stage2_steps.is_none())
        {
            return Err(Error::Config("two_stage needs stage1_steps and stage2_steps".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.task == Task::Treecls {
            if self.species.len() < 2 {
                return Err(Error::Config("the tree task needs at least two species".into()));
            }
            if self.reduction.is_some() {
                return Err(Error::Config("label reduction does not apply to the tree task".into()));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn initial_lr(&self) -> f64 {
        self.budgets.initial_lr.unwrap_or(match self.task {
            Task::Treecls => 0.01,
            _ => 0.1,
        })
    }

    /// Row label shared by every seed of this condition.
    pub fn condition(&self) -> String {
        let mut s = format!("{}/{}", self.strategy.name(), mode_name(self.finetune_mode));
        match self.reduction {
            Some(ReductionSpec::Uniform { proportion, .. }) => {
                let _ = write!(s, "/uniform {proportion}");
            }
            Some(ReductionSpec::TreeLevel { n_trees, .. }) => {
                let _ = write!(s, "/trees {n_trees}");
            }
            None => s.push_str("/full"),
        }
        s
    }
}

/// Everything a run reads, already in memory.
#[derive(Debug, Clone, Default)]
pub struct RunInputs {
    pub pretrained: Option<Checkpoint>,
    pub source: Vec<PointCloud>,
    pub train: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
    pub source_trees: Vec<TreeSample>,
    pub train_trees: Vec<TreeSample>,
    pub test_trees: Vec<TreeSample>,
}

/// CSV and PLY files of a directory, by file name.
pub fn scene_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if path.is_file() && (ext.eq_ignore_ascii_case("csv") || ext.eq_ignore_ascii_case("ply")) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Input(format!("{}: no point cloud files", dir.display())));
    }
    Ok(files)
}

fn load_scenes(dir: &Path) -> Result<Vec<PointCloud>> {
    scene_files(dir)?.iter().map(|p| load_cloud(p)).collect()
}

impl RunInputs {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        Self::load_inner(cfg, wants_adaptation(cfg), true)
    }

    /// Inputs of [`adapt`]: the checkpoint and the source domain only.
    pub fn load_for_adaptation(cfg: &ExperimentConfig) -> Result<Self> {
        Self::load_inner(cfg, true, false)
    }

    fn load_inner(cfg: &ExperimentConfig, needs_source: bool, targets: bool) -> Result<Self> {
        cfg.validate()?;
        let mut inputs = RunInputs {
            pretrained: cfg.pretrained.as_deref().map(Checkpoint::load).transpose()?,
            ..Default::default()
        };
        let source = match (&cfg.data.source, needs_source) {
            (Some(p), true) => Some(p.as_path()),
            (None, true) => return Err(Error::Config("adaptation needs data.source".into())),
            _ => None,
        };
        match cfg.task {
            Task::Instseg | Task::Semseg => {
                if let Some(p) = source {
                    inputs.source = load_scenes(p)?;
                }
                if targets {
                    inputs.train = load_scenes(&cfg.data.train)?;
                    inputs.test = load_scenes(&cfg.data.test)?;
                }
            }
            Task::Treecls => {
                if let Some(p) = source {
                    inputs.source_trees = load_tree_dataset(p)?;
                }
                if targets {
                    inputs.train_trees = load_tree_dataset(&cfg.data.train)?;
                    inputs.test_trees = load_tree_dataset(&cfg.data.test)?;
                }
            }
        }
        Ok(inputs)
    }
}

#[derive(Debug, Clone)]
pub enum TrainedModel {
    Instance(InstanceModel),
    Semantic(SemanticModel),
    Tree(TreeClassifier),
}

impl TrainedModel {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        match self {
            TrainedModel::Instance(m) => m.write_checkpoint(&mut ckpt),
            TrainedModel::Semantic(m) => m.write_checkpoint(&mut ckpt),
            TrainedModel::Tree(m) => m.write_checkpoint(&mut ckpt),
        }
        ckpt
    }
}

#[derive(Debug, Clone)]
pub enum Predictions {
    Instance(Vec<InstancePrediction>),
    Semantic(Vec<Vec<usize>>),
    Tree(Vec<usize>),
}

/// Result of one in-memory run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics: MetricsReport,
    /// (fine-tuning step, headline metric) along fine-tuning.
    pub curve: Vec<(usize, f64)>,
    pub model: TrainedModel,
    pub predictions: Predictions,
}

/// On-disk record of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub checkpoints: Vec<PathBuf>,
    pub metrics: MetricsReport,
    pub curve: Vec<(usize, f64)>,
    pub duration_seconds: f64,
}

fn pretrained_encoder(inputs: &RunInputs) -> Result<EncoderModel> {
    let ckpt = inputs
        .pretrained
        .as_ref()
        .ok_or_else(|| Error::Config("no pretrained checkpoint supplied".into()))?;
    EncoderModel::from_checkpoint(ckpt)
}

fn initial_encoder(cfg: &ExperimentConfig, inputs: &RunInputs, rng: &mut ChaCha8Rng) -> Result<EncoderModel> {
    match cfg.strategy {
        Strategy::Scratch => EncoderModel::new(cfg.encoder.clone(), rng),
        _ => pretrained_encoder(inputs),
    }
}

fn reduce_scenes(cfg: &ExperimentConfig, scenes: &[PointCloud], seed: u64) -> Result<Vec<PointCloud>> {
    match cfg.reduction {
        None => Ok(scenes.to_vec()),
        Some(spec) => scenes
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let base = match spec {
                    ReductionSpec::Uniform { seed, .. } | ReductionSpec::TreeLevel { seed, .. } => seed,
                };
                let s = base
                    .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                    .wrapping_add(seed.wrapping_mul(1_000_003))
                    .wrapping_add(i as u64);
                spec.reseeded(s).apply(c)
            })
            .collect(),
    }
}

/// Fine-tuning stages as (steps, learning rate, frozen encoder).
fn stages(cfg: &ExperimentConfig) -> Vec<(usize, f64, bool)> {
    let lr = cfg.initial_lr();
    let b = &cfg.budgets;
    match cfg.finetune_mode {
        FinetuneMode::HeadOnly => vec![(b.finetune_steps, lr, true)],
        FinetuneMode::All => vec![(b.finetune_steps, lr, false)],
        FinetuneMode::TwoStage => vec![
            (b.stage1_steps.unwrap_or(0), lr, true),
            (b.stage2_steps.unwrap_or(0), lr * b.stage2_lr_factor, false),
        ],
    }
}

fn eval_every(cfg: &ExperimentConfig, total: usize) -> usize {
    if cfg.curve_points == 0 || total == 0 {
        0
    } else {
        total.div_ceil(cfg.curve_points).max(1)
    }
}

fn instance_predictions(model: &InstanceModel, test: &[PreparedScene], cc: &ClusterConfig) -> Result<Vec<InstancePrediction>> {
    test.iter().map(|s| model.predict(s, cc)).collect()
}

fn ap50(preds: &[InstancePrediction], test: &[PreparedScene]) -> Result<f64> {
    let pairs: Vec<_> = preds.iter().zip(test).map(|(p, s)| (p, &s.cloud)).collect();
    average_precision(&pairs, 0.5)
}

fn base_train_config(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        batch_points: cfg.budgets.batch_points,
        initial_lr: cfg.initial_lr(),
        ..Default::default()
    }
}

fn adapt_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        steps: cfg.budgets.adapt_steps,
        seed: seed ^ 0xada9,
        ..base_train_config(cfg)
    }
}

fn wants_adaptation(cfg: &ExperimentConfig) -> bool {
    cfg.strategy == Strategy::SslAdaptFinetune && cfg.budgets.adapt_steps > 0
}

/// Starting instance model: random, pretrained encoder with fresh heads, or
/// a full model when the checkpoint carries the heads.
fn initial_instance(cfg: &ExperimentConfig, inputs: &RunInputs, rng: &mut ChaCha8Rng) -> Result<InstanceModel> {
    match &inputs.pretrained {
        Some(c) if cfg.strategy != Strategy::Scratch && c.networks.contains_key("offset_head") => {
            InstanceModel::from_checkpoint(c)
        }
        _ => InstanceModel::new(initial_encoder(cfg, inputs, rng)?, rng),
    }
}

fn initial_semantic(cfg: &ExperimentConfig, inputs: &RunInputs, rng: &mut ChaCha8Rng) -> Result<SemanticModel> {
    match &inputs.pretrained {
        Some(c) if cfg.strategy != Strategy::Scratch && c.networks.contains_key("semantic_head") => {
            SemanticModel::from_checkpoint(c)
        }
        _ => SemanticModel::new(initial_encoder(cfg, inputs, rng)?, rng),
    }
}

/// Supervised training on the source domain only (coarse pretraining for
/// the tree task), starting from the configured initial model.
pub fn adapt(cfg: &ExperimentConfig, inputs: &RunInputs, seed: u64) -> Result<TrainedModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match cfg.task {
        Task::Instseg => {
            let mut model = initial_instance(cfg, inputs, &mut rng)?;
            let source = prepare_all(inputs.source.clone(), &model.encoder.config)?;
            train_instseg_with(&mut model, &source, &adapt_config(cfg, seed), 0, |_, _| Ok(()))?;
            Ok(TrainedModel::Instance(model))
        }
        Task::Semseg => {
            let mut model = initial_semantic(cfg, inputs, &mut rng)?;
            let source = prepare_all(inputs.source.clone(), &model.encoder.config)?;
            train_semseg_with(&mut model, &source, &adapt_config(cfg, seed), 0, |_, _| Ok(()))?;
            Ok(TrainedModel::Semantic(model))
        }
        Task::Treecls => {
            let mut model = initial_tree_model(cfg, inputs, &mut rng)?;
            coarse_pretrain(cfg, inputs, &mut model, seed)?;
            Ok(TrainedModel::Tree(model))
        }
    }
}

fn coarse_pretrain(cfg: &ExperimentConfig, inputs: &RunInputs, model: &mut TreeClassifier, seed: u64) -> Result<()> {
    let source = prepare_trees(&inputs.source_trees, &model.encoder.config.scales)?;
    let ccfg = ClsTrainConfig {
        steps: cfg.budgets.adapt_steps,
        initial_lr: cfg.initial_lr(),
        seed: seed ^ 0xada9,
        ..Default::default()
    };
    pretrain_coarse(model, &source, &ccfg)?;
    Ok(())
}

fn run_instseg(cfg: &ExperimentConfig, inputs: &RunInputs, seed: u64) -> Result<RunOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = initial_instance(cfg, inputs, &mut rng)?;
    let ecfg = model.encoder.config.clone();
    let base = base_train_config(cfg);
    if wants_adaptation(cfg) {
        let source = prepare_all(inputs.source.clone(), &ecfg)?;
        train_instseg_with(&mut model, &source, &adapt_config(cfg, seed), 0, |_, _| Ok(()))?;
    }
    let train = prepare_all(reduce_scenes(cfg, &inputs.train, seed)?, &ecfg)?;
    let test = prepare_all(inputs.test.clone(), &ecfg)?;
    let plan = stages(cfg);
    let every = eval_every(cfg, plan.iter().map(|s| s.0).sum());
    let mut curve = Vec::new();
    let mut offset = 0;
    for (k, &(steps, lr, frozen)) in plan.iter().enumerate() {
        model.encoder.set_frozen(frozen);
        let tcfg = TrainConfig {
            steps,
            initial_lr: lr,
            seed: seed.wrapping_add(k as u64 + 1),
            ..base
        };
        train_instseg_with(&mut model, &train, &tcfg, every, |step, m| {
            let preds = instance_predictions(m, &test, &cfg.cluster)?;
            curve.push((offset + step, ap50(&preds, &test)?));
            Ok(())
        })?;
        offset += steps;
    }
    model.encoder.set_frozen(false);
    let preds = instance_predictions(&model, &test, &cfg.cluster)?;
    let pairs: Vec<_> = preds.iter().zip(&test).map(|(p, s)| (p, &s.cloud)).collect();
    let metrics = MetricsReport::instance(&pairs)?;
    Ok(RunOutcome {
        metrics,
        curve,
        model: TrainedModel::Instance(model),
        predictions: Predictions::Instance(preds),
    })
}

fn run_semseg(cfg: &ExperimentConfig, inputs: &RunInputs, seed: u64) -> Result<RunOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = initial_semantic(cfg, inputs, &mut rng)?;
    let ecfg = model.encoder.config.clone();
    let base = base_train_config(cfg);
    if wants_adaptation(cfg) {
        let source = prepare_all(inputs.source.clone(), &ecfg)?;
        train_semseg_with(&mut model, &source, &adapt_config(cfg, seed), 0, |_, _| Ok(()))?;
    }
    let train = prepare_all(reduce_scenes(cfg, &inputs.train, seed)?, &ecfg)?;
    let test = prepare_all(inputs.test.clone(), &ecfg)?;
    let plan = stages(cfg);
    let every = eval_every(cfg, plan.iter().map(|s| s.0).sum());
    let mut curve = Vec::new();
    let mut offset = 0;
    for (k, &(steps, lr, frozen)) in plan.iter().enumerate() {
        model.encoder.set_frozen(frozen);
        let tcfg = TrainConfig {
            steps,
            initial_lr: lr,
            seed: seed.wrapping_add(k as u64 + 1),
            ..base
        };
        train_semseg_with(&mut model, &train, &tcfg, every, |step, m| {
            curve.push((offset + step, evaluate_semseg(m, &test)?.miou));
            Ok(())
        })?;
        offset += steps;
    }
    model.encoder.set_frozen(false);
    let semantic: SemanticMetrics = evaluate_semseg(&model, &test)?;
    let preds = test
        .iter()
        .map(|s| {
            let logits = model.logits_from_features(&s.features)?;
            Ok(argmax_classes(&logits).into_iter().map(|c| c.id()).collect())
        })
        .collect::<Result<Vec<Vec<usize>>>>()?;
    Ok(RunOutcome {
        metrics: MetricsReport {
            semantic: Some(semantic),
            ..Default::default()
        },
        curve,
        model: TrainedModel::Semantic(model),
        predictions: Predictions::Semantic(preds),
    })
}

fn initial_tree_model(cfg: &ExperimentConfig, inputs: &RunInputs, rng: &mut ChaCha8Rng) -> Result<TreeClassifier> {
    let k = cfg.species.len();
    match (cfg.strategy, &inputs.pretrained) {
        (Strategy::Scratch, _) => TreeClassifier::new(EncoderModel::new(cfg.encoder.clone(), rng)?, cfg.hidden, k, rng),
        (_, Some(ckpt)) if ckpt.networks.contains_key("tree_classifier") => TreeClassifier::from_checkpoint(ckpt),
        _ => TreeClassifier::new(pretrained_encoder(inputs)?, cfg.hidden, k, rng),
    }
}

fn run_treecls(cfg: &ExperimentConfig, inputs: &RunInputs, seed: u64) -> Result<RunOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = initial_tree_model(cfg, inputs, &mut rng)?;
    let scales = model.encoder.config.scales.clone();
    if wants_adaptation(cfg) {
        coarse_pretrain(cfg, inputs, &mut model, seed)?;
    }
    let split = FewShotSplit::new(&inputs.train_trees, &cfg.species, cfg.shots, seed)?;
    let pool = prepare_trees(&inputs.train_trees, &scales)?;
    let plan = stages(cfg);
    let stage = |i: usize| {
        plan.get(i).map_or(ClsTrainConfig::default(), |&(steps, lr, _)| ClsTrainConfig {
            steps,
            initial_lr: lr,
            seed: seed.wrapping_add(i as u64 + 1),
            ..Default::default()
        })
    };
    let fcfg = FinetuneConfig {
        mode: cfg.finetune_mode,
        stage1: stage(0),
        stage2: stage(1),
        eval_every: eval_every(cfg, plan.iter().map(|s| s.0).sum()).max(1),
        ..Default::default()
    };
    let outcome = finetune_species(&mut model, &pool, &split, &fcfg)?;
    let test: Vec<TreeSample> = inputs
        .test_trees
        .iter()
        .filter(|t| split.class_of(t.species_id).is_some())
        .cloned()
        .collect();
    if test.is_empty() {
        return Err(Error::Input("no test trees of the fine-tuned species".into()));
    }
    let test = prepare_trees(&test, &scales)?;
    let label = |t: &TreeSample| split.class_of(t.species_id).unwrap_or(0);
    let classification = evaluate_trees(&model, &test, label, split.species.len())?;
    let preds = predict_trees(&model, &test)?;
    Ok(RunOutcome {
        metrics: MetricsReport {
            classification: Some(classification),
            ..Default::default()
        },
        curve: if cfg.curve_points == 0 { Vec::new() } else { outcome.validation },
        model: TrainedModel::Tree(model),
        predictions: Predictions::Tree(preds),
    })
}

/// Runs one seed of an experiment entirely in memory.
pub fn execute(cfg: &ExperimentConfig, inputs: &RunInputs, seed: u64) -> Result<RunOutcome> {
    cfg.validate()?;
    match cfg.task {
        Task::Instseg => run_instseg(cfg, inputs, seed),
        Task::Semseg => run_semseg(cfg, inputs, seed),
        Task::Treecls => run_treecls(cfg, inputs, seed),
    }
}

/// Executes twice and fails unless both runs report identical metrics.
pub fn check_determinism(cfg: &ExperimentConfig, inputs: &RunInputs, seed: u64) -> Result<MetricsReport> {
    let a = execute(cfg, inputs, seed)?;
    let b = execute(cfg, inputs, seed)?;
    let ja = serde_json::to_string(&a.metrics)?;
    let jb = serde_json::to_string(&b.metrics)?;
    if ja != jb {
        return Err(Error::Determinism(format!("seed {seed} produced different metrics on repeat")));
    }
    Ok(a.metrics)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Flat CSV of the per-scene detection counts and rates.
pub fn per_scene_csv(metrics: &MetricsReport) -> String {
    let mut out = String::from("scene,tp,fp,fn,precision,recall,f1\n");
    for (i, c) in metrics.per_scene.iter().enumerate() {
        let m = crate::eval::detection_metrics(*c);
        let _ = writeln!(
            out,
            "{i},{},{},{},{:.6},{:.6},{:.6}",
            c.tp, c.fp, c.fn_, m.precision, m.recall, m.f1
        );
    }
    out
}

pub fn curve_csv(curve: &[(usize, f64)]) -> String {
    let mut out = String::from("step,metric\n");
    for (s, v) in curve {
        let _ = writeln!(out, "{s},{v:.6}");
    }
    out
}

/// Writes a run's artifacts into `dir` and returns the checkpoint paths.
pub fn write_outcome(outcome: &RunOutcome, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ckpt_path = dir.join("checkpoint.json");
    outcome.model.checkpoint().save(&ckpt_path)?;
    write_text(&dir.join("metrics.json"), &serde_json::to_string_pretty(&outcome.metrics)?)?;
    write_text(&dir.join("curve.csv"), &curve_csv(&outcome.curve))?;
    match &outcome.predictions {
        Predictions::Instance(preds) => {
            write_text(&dir.join("per_scene.csv"), &per_scene_csv(&outcome.metrics))?;
            for (i, p) in preds.iter().enumerate() {
                write_text(&dir.join(format!("instances_{i:03}.csv")), &p.to_csv())?;
                let table = serde_json::to_string_pretty(&p.cluster_table())?;
                write_text(&dir.join(format!("clusters_{i:03}.json")), &table)?;
            }
        }
        Predictions::Semantic(preds) => {
            for (i, p) in preds.iter().enumerate() {
                let classes: Vec<_> = p
                    .iter()
                    .map(|&c| crate::cloudio::SemanticClass::ALL[c])
                    .collect();
                write_text(&dir.join(format!("semantic_{i:03}.csv")), &predictions_csv(&classes))?;
            }
            if let Some(s) = &outcome.metrics.semantic {
                write_text(&dir.join("iou.json"), &serde_json::to_string_pretty(s)?)?;
            }
        }
        Predictions::Tree(preds) => {
            let mut out = String::from("tree,predicted_class\n");
            for (i, p) in preds.iter().enumerate() {
                let _ = writeln!(out, "{i},{p}");
            }
            write_text(&dir.join("trees.csv"), &out)?;
        }
    }
    Ok(vec![ckpt_path])
}

/// Loads inputs, runs one seed and writes its artifacts under
/// `out/seed_<seed>/`, including `record.json`.
pub fn run_strategy(cfg: &ExperimentConfig, seed: u64) -> Result<RunRecord> {
    let inputs = RunInputs::load(cfg)?;
    run_with_inputs(cfg, &inputs, seed)
}

pub fn run_with_inputs(cfg: &ExperimentConfig, inputs: &RunInputs, seed: u64) -> Result<RunRecord> {
    let start = Instant::now();
    let outcome = execute(cfg, inputs, seed)?;
    let duration_seconds = start.elapsed().as_secs_f64();
    let dir = cfg.out.join(format!("seed_{seed}"));
    let checkpoints = write_outcome(&outcome, &dir)?;
    let record = RunRecord {
        config: cfg.clone(),
        seed,
        checkpoints,
        metrics: outcome.metrics,
        curve: outcome.curve,
        duration_seconds,
    };
    write_text(&dir.join("record.json"), &serde_json::to_string_pretty(&record)?)?;
    Ok(record)
}

/// One condition of a summary table, averaged over its seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub condition: String,
    pub seeds: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub task: Task,
    pub columns: Vec<String>,
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("condition,seeds,{}\n", self.columns.join(","));
        for r in &self.rows {
            let vals: Vec<String> = r.values.iter().map(|v| format!("{v:.4}")).collect();
            let _ = writeln!(out, "{},{},{}", r.condition, r.seeds, vals.join(","));
        }
        out
    }
}

fn metric_columns(task: Task) -> Vec<&'static str> {
    match task {
        Task::Instseg => vec!["ap50", "map", "precision", "recall", "f1", "duration_s"],
        Task::Semseg => vec!["miou", "macc", "overall_accuracy", "duration_s"],
        Task::Treecls => vec!["mean_jaccard", "mean_accuracy", "overall_accuracy", "duration_s"],
    }
}

fn metric_values(r: &RunRecord) -> Vec<f64> {
    let m = &r.metrics;
    let mut v = match r.config.task {
        Task::Instseg => {
            let d = m.detection.unwrap_or_else(|| crate::eval::detection_metrics(Default::default()));
            vec![m.ap50.unwrap_or(0.0), m.map.unwrap_or(0.0), d.precision, d.recall, d.f1]
        }
        Task::Semseg => m
            .semantic
            .as_ref()
            .map_or(vec![0.0; 3], |s| vec![s.miou, s.macc, s.overall_accuracy]),
        Task::Treecls => m.classification.as_ref().map_or(vec![0.0; 3], |c| {
            vec![c.mean_jaccard, c.mean_accuracy, c.overall_accuracy]
        }),
    };
    v.push(r.duration_seconds);
    v
}

/// Rows ordered from the densest to the sparsest labelling: full labels,
/// then uniform proportions, then labelled-tree counts, each descending.
fn sort_key(cfg: &ExperimentConfig) -> (u8, i64, Strategy, u8) {
    let mode = match cfg.finetune_mode {
        FinetuneMode::HeadOnly => 0,
        FinetuneMode::All => 1,
        FinetuneMode::TwoStage => 2,
    };
    let (kind, amount) = match cfg.reduction {
        None => (0, 0),
        Some(ReductionSpec::Uniform { proportion, .. }) => (1, -((proportion * 1e12).round() as i64)),
        Some(ReductionSpec::TreeLevel { n_trees, .. }) => (2, -(n_trees as i64)),
    };
    (kind, amount, cfg.strategy, mode)
}

/// Summary tables, one per task, with seeds of a condition averaged.
pub fn report(records: &[RunRecord]) -> Result<Vec<SummaryTable>> {
    if records.is_empty() {
        return Err(Error::Input("report needs at least one run record".into()));
    }
    let mut groups: BTreeMap<Task, BTreeMap<String, (_, Vec<&RunRecord>)>> = BTreeMap::new();
    for r in records {
        let entry = groups
            .entry(r.config.task)
            .or_default()
            .entry(r.config.condition())
            .or_insert_with(|| (sort_key(&r.config), Vec::new()));
        entry.1.push(r);
    }
    let mut tables = Vec::new();
    for (task, conditions) in groups {
        let mut rows: Vec<_> = conditions.into_iter().collect();
        rows.sort_by(|a, b| a.1 .0.cmp(&b.1 .0).then_with(|| a.0.cmp(&b.0)));
        let rows = rows
            .into_iter()
            .map(|(condition, (_, recs))| {
                let n = recs.len() as f64;
                let mut values = vec![0.0; metric_columns(task).len()];
                for r in &recs {
                    for (acc, v) in values.iter_mut().zip(metric_values(r)) {
                        *acc += v / n;
                    }
                }
                SummaryRow {
                    condition,
                    seeds: recs.len(),
                    values,
                }
            })
            .collect();
        tables.push(SummaryTable {
            task,
            columns: metric_columns(task).into_iter().map(String::from).collect(),
            rows,
        });
    }
    Ok(tables)
}

/// Plot-ready curves: condition, seed, step, metric.
pub fn curves_csv(records: &[RunRecord]) -> String {
    let mut out = String::from("task,condition,seed,step,metric\n");
    for r in records {
        for (s, v) in &r.curve {
            let _ = writeln!(out, "{},{},{},{s},{v:.6}", r.config.task.name(), r.config.condition(), r.seed);
        }
    }
    out
}
