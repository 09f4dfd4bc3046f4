//! Per-tree classification with a max-pooled point head, coarse
//! broadleaf/conifer pretraining and few-shot species fine-tuning.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloudio::PointCloud;
use crate::encoder::{point_features, EncoderModel};
use crate::error::{Error, Result};
use crate::eval::{classification_metrics, ClassificationMetrics};
use crate::semseg::{argmax, softmax_rows};
use crate::synthforest::TreeSample;
use crate::tensorcore::{weighted_cross_entropy, Checkpoint, LrSchedule, Matrix, Network, Sgd, SgdConfig};

/// Per-point network, global max-pool, classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub point_net: Network,
    pub classifier: Network,
}

impl ClassifierHead {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, classes: usize, rng: &mut R) -> Result<Self> {
        Ok(ClassifierHead {
            point_net: Network::mlp(&[dim, hidden, hidden], rng)?,
            classifier: Network::mlp(&[hidden, classes], rng)?,
        })
    }

    pub fn classes(&self) -> usize {
        self.classifier.output_dim().unwrap_or(0)
    }

    pub fn zero_weights(&mut self) {
        self.point_net.zero_weights();
        self.classifier.zero_weights();
    }
}

/// Column-wise maximum over a block of rows, with the winning row per
/// column (first one on ties).
fn max_pool(m: &Matrix, rows: std::ops::Range<usize>) -> (Vec<f64>, Vec<usize>) {
    let mut best = m.row(rows.start).to_vec();
    let mut arg = vec![rows.start; m.cols()];
    for r in rows.start + 1..rows.end {
        for (c, &v) in m.row(r).iter().enumerate() {
            if v > best[c] {
                best[c] = v;
                arg[c] = r;
            }
        }
    }
    (best, arg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeClassifier {
    pub encoder: EncoderModel,
    pub head: ClassifierHead,
    /// Species seen during coarse pretraining.
    pub pretrained_species: BTreeSet<u32>,
}

impl TreeClassifier {
    pub fn new<R: Rng + ?Sized>(encoder: EncoderModel, hidden: usize, classes: usize, rng: &mut R) -> Result<Self> {
        let head = ClassifierHead::new(encoder.dim(), hidden, classes, rng)?;
        Ok(TreeClassifier {
            encoder,
            head,
            pretrained_species: BTreeSet::new(),
        })
    }

    /// Class probabilities of one tree from cached features.
    pub fn probabilities_from_features(&self, features: &Matrix) -> Result<Vec<f64>> {
        if features.rows() == 0 {
            return Err(Error::Input("cannot classify an empty tree".into()));
        }
        let h = self.head.point_net.infer(&self.encoder.embed(features)?)?;
        let (pooled, _) = max_pool(&h, 0..h.rows());
        let logits = self.head.classifier.infer(&Matrix::from_vec(1, pooled.len(), pooled)?)?;
        Ok(softmax_rows(&logits).row(0).to_vec())
    }

    pub fn write_checkpoint(&self, ckpt: &mut Checkpoint) {
        self.encoder.write_checkpoint(ckpt);
        ckpt.insert("tree_point_net", &self.head.point_net);
        ckpt.insert("tree_classifier", &self.head.classifier);
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(TreeClassifier {
            encoder: EncoderModel::from_checkpoint(ckpt)?,
            head: ClassifierHead {
                point_net: ckpt.network("tree_point_net")?,
                classifier: ckpt.network("tree_classifier")?,
            },
            pretrained_species: BTreeSet::new(),
        })
    }
}

/// Softmax class probabilities of one tree.
pub fn classify_tree(encoder: &EncoderModel, head: &ClassifierHead, tree: &PointCloud) -> Result<Vec<f64>> {
    if tree.is_empty() {
        return Err(Error::Input("cannot classify an empty tree".into()));
    }
    let h = head.point_net.infer(&encoder.encode(tree)?)?;
    let (pooled, _) = max_pool(&h, 0..h.rows());
    let logits = head.classifier.infer(&Matrix::from_vec(1, pooled.len(), pooled)?)?;
    Ok(softmax_rows(&logits).row(0).to_vec())
}

/// A tree with cached encoder features and a class label.
#[derive(Debug, Clone)]
pub struct PreparedTree {
    pub sample: TreeSample,
    pub features: Matrix,
}

pub fn prepare_trees(trees: &[TreeSample], scales: &[f64]) -> Result<Vec<PreparedTree>> {
    trees
        .par_iter()
        .map(|t| {
            Ok(PreparedTree {
                features: point_features(&t.cloud, scales)?,
                sample: t.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClsTrainConfig {
    pub steps: usize,
    pub trees_per_step: usize,
    pub initial_lr: f64,
    pub sgd: SgdConfig,
    pub seed: u64,
}

impl Default for ClsTrainConfig {
    fn default() -> Self {
        ClsTrainConfig {
            steps: 300,
            trees_per_step: 8,
            initial_lr: 0.01,
            sgd: SgdConfig::finetune(),
            seed: 0,
        }
    }
}

/// One cross-entropy step on a minibatch of trees.
fn train_step(
    model: &mut TreeClassifier,
    trees: &[&PreparedTree],
    labels: &[usize],
    opt: &mut Sgd,
    lr: f64,
) -> Result<f64> {
    let width = trees[0].features.cols();
    let mut data = Vec::new();
    let mut spans = Vec::with_capacity(trees.len());
    for t in trees {
        let start = data.len() / width;
        data.extend_from_slice(t.features.as_slice());
        spans.push(start..start + t.features.rows());
    }
    let x = Matrix::from_vec(data.len() / width, width, data)?;
    let train_encoder = !model.encoder.is_frozen();
    let emb = if train_encoder {
        model.encoder.embed_train(&x)?
    } else {
        model.encoder.embed(&x)?
    };
    let h = model.head.point_net.forward(&emb)?;
    let hidden = h.cols();
    let mut pooled = Matrix::zeros(trees.len(), hidden);
    let mut args = Vec::with_capacity(trees.len());
    for (b, span) in spans.iter().enumerate() {
        let (p, a) = max_pool(&h, span.clone());
        pooled.row_mut(b).copy_from_slice(&p);
        args.push(a);
    }
    let logits = model.head.classifier.forward(&pooled)?;
    let k = logits.cols();
    let out = weighted_cross_entropy(&logits, labels, &vec![1.0; k], &vec![true; trees.len()])?;
    let g_pool = model.head.classifier.backward(&out.grad)?;
    let mut g_h = Matrix::zeros(h.rows(), hidden);
    for (b, a) in args.iter().enumerate() {
        for (c, &r) in a.iter().enumerate() {
            g_h.row_mut(r)[c] += g_pool.row(b)[c];
        }
    }
    let g_emb = model.head.point_net.backward(&g_h)?;
    if train_encoder {
        model.encoder.backward(&g_emb)?;
    }
    let mut params = model.encoder.net.params_mut();
    params.extend(model.head.point_net.params_mut());
    params.extend(model.head.classifier.params_mut());
    opt.step(&mut params, lr)?;
    Ok(out.loss)
}

/// Supervised training loop over labeled trees; `observe` is called after
/// every `eval_every` steps and may return `false` to stop early.
fn train_loop(
    model: &mut TreeClassifier,
    trees: &[PreparedTree],
    label: impl Fn(&TreeSample) -> usize,
    cfg: &ClsTrainConfig,
    eval_every: usize,
    mut observe: impl FnMut(usize, &TreeClassifier) -> Result<bool>,
) -> Result<Vec<f64>> {
    if trees.is_empty() {
        return Err(Error::NoLabels);
    }
    let schedule = LrSchedule::Polynomial {
        total_steps: cfg.steps,
        initial_lr: cfg.initial_lr,
        power: 0.9,
    };
    let mut opt = Sgd::new(cfg.sgd);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..trees.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.trees_per_step);
        while batch.len() < cfg.trees_per_step.min(trees.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&trees[order[cursor]]);
            cursor += 1;
        }
        let labels: Vec<usize> = batch.iter().map(|t| label(&t.sample)).collect();
        losses.push(train_step(model, &batch, &labels, &mut opt, schedule.lr_at(step)?)?);
        if eval_every > 0 && (step + 1) % eval_every == 0 && !observe(step + 1, model)? {
            break;
        }
    }
    Ok(losses)
}

/// Predicted class of every tree.
pub fn predict_trees(model: &TreeClassifier, trees: &[PreparedTree]) -> Result<Vec<usize>> {
    trees
        .iter()
        .map(|t| Ok(argmax(&model.probabilities_from_features(&t.features)?)))
        .collect()
}

pub fn evaluate_trees(
    model: &TreeClassifier,
    trees: &[PreparedTree],
    label: impl Fn(&TreeSample) -> usize,
    k: usize,
) -> Result<ClassificationMetrics> {
    let pred = predict_trees(model, trees)?;
    let gt: Vec<usize> = trees.iter().map(|t| label(&t.sample)).collect();
    classification_metrics(&pred, &gt, k)
}

/// Two-way broadleaf/conifer training. The classifier is replaced by a
/// fresh two-class layer; the species seen are recorded on the model.
pub fn pretrain_coarse(model: &mut TreeClassifier, trees: &[PreparedTree], cfg: &ClsTrainConfig) -> Result<Vec<f64>> {
    let groups: BTreeSet<usize> = trees.iter().map(|t| t.sample.group.id()).collect();
    if groups.len() < 2 {
        return Err(Error::DegenerateTask(
            "coarse pretraining needs both broadleaf and conifer trees".into(),
        ));
    }
    if cfg.steps == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc0a2);
    if model.head.classes() != 2 {
        let hidden = model.head.point_net.output_dim().unwrap_or(0);
        model.head.classifier = Network::mlp(&[hidden, 2], &mut rng)?;
    }
    let losses = train_loop(model, trees, |t| t.group.id(), cfg, 0, |_, _| Ok(true))?;
    model.pretrained_species.extend(trees.iter().map(|t| t.sample.species_id));
    Ok(losses)
}

/// Species list with per-species train and validation trees (indices into
/// a tree pool).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub species: Vec<u32>,
    pub train: Vec<Vec<usize>>,
    pub validation: Vec<Vec<usize>>,
    pub seed: u64,
}

impl FewShotSplit {
    /// Draws `shots` training trees per species from `pool`; the remaining
    /// trees of that species form the validation set.
    pub fn new(pool: &[TreeSample], species: &[u32], shots: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut validation = Vec::new();
        for &s in species {
            let members: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].species_id == s).collect();
            if members.len() <= shots {
                return Err(Error::Input(format!(
                    "species {s} has {} trees, need more than {shots}",
                    members.len()
                )));
            }
            let picked: BTreeSet<usize> = index::sample(&mut rng, members.len(), shots).into_iter().collect();
            let (mut t, mut v) = (Vec::new(), Vec::new());
            for (k, &i) in members.iter().enumerate() {
                if picked.contains(&k) {
                    t.push(i);
                } else {
                    v.push(i);
                }
            }
            train.push(t);
            validation.push(v);
        }
        let split = FewShotSplit {
            species: species.to_vec(),
            train,
            validation,
            seed,
        };
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        let train: BTreeSet<usize> = self.train.iter().flatten().copied().collect();
        if self.validation.iter().flatten().any(|i| train.contains(i)) {
            return Err(Error::Input("train and validation trees overlap".into()));
        }
        if self.species.len() != self.train.len() || self.species.len() != self.validation.len() {
            return Err(Error::Input("split lists disagree in length".into()));
        }
        Ok(())
    }

    /// Class index of a species within this split.
    pub fn class_of(&self, species: u32) -> Option<usize> {
        self.species.iter().position(|&s| s == species)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    HeadOnly,
    All,
    TwoStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    /// Head-only steps (two-stage) or the whole budget (other modes).
    pub stage1: ClsTrainConfig,
    /// All-layer steps of the two-stage schedule.
    pub stage2: ClsTrainConfig,
    pub eval_every: usize,
    pub patience: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            mode: FinetuneMode::TwoStage,
            stage1: ClsTrainConfig {
                steps: 150,
                ..Default::default()
            },
            stage2: ClsTrainConfig {
                steps: 150,
                initial_lr: 0.002,
                seed: 1,
                ..Default::default()
            },
            eval_every: 10,
            patience: 10,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub losses: Vec<f64>,
    /// (global step, validation accuracy) at each evaluation.
    pub validation: Vec<(usize, f64)>,
    pub best_step: usize,
    pub stopped_early: bool,
}

/// Few-shot species fine-tuning with early stopping on validation accuracy.
/// The classifier is replaced by a fresh layer over the split's species.
/// The best-scoring weights are kept, the latest among equals.
pub fn finetune_species(
    model: &mut TreeClassifier,
    pool: &[PreparedTree],
    split: &FewShotSplit,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    split.validate()?;
    if let Some(s) = split.species.iter().find(|s| model.pretrained_species.contains(s)) {
        return Err(Error::Leakage(format!("species {s} was seen during coarse pretraining")));
    }
    let train: Vec<PreparedTree> = split.train.iter().flatten().map(|&i| pool[i].clone()).collect();
    let val: Vec<PreparedTree> = split.validation.iter().flatten().map(|&i| pool[i].clone()).collect();
    let k = split.species.len();
    let label = |t: &TreeSample| split.class_of(t.species_id).expect("split species");
    let mut rng = ChaCha8Rng::seed_from_u64(split.seed ^ 0xf1e7);
    let hidden = model.head.point_net.output_dim().unwrap_or(0);
    model.head.classifier = Network::mlp(&[hidden, k], &mut rng)?;

    let stages: Vec<(ClsTrainConfig, bool)> = match cfg.mode {
        FinetuneMode::HeadOnly => vec![(cfg.stage1, true)],
        FinetuneMode::All => vec![(cfg.stage1, false)],
        FinetuneMode::TwoStage => vec![(cfg.stage1, true), (cfg.stage2, false)],
    };
    let was_frozen = model.encoder.is_frozen();
    let mut outcome = FinetuneOutcome::default();
    let mut best: Option<(f64, TreeClassifier)> = None;
    let mut offset = 0;
    let mut since_best = 0;
    for (stage_cfg, freeze) in stages {
        model.encoder.set_frozen(freeze);
        let mut stop = false;
        let losses = train_loop(model, &train, label, &stage_cfg, cfg.eval_every, |step, m| {
            let acc = evaluate_trees(m, &val, label, k)?.overall_accuracy;
            outcome.validation.push((offset + step, acc));
            if best.as_ref().is_none_or(|(b, _)| acc >= *b) {
                best = Some((acc, m.clone()));
                outcome.best_step = offset + step;
                since_best = 0;
            } else {
                since_best += 1;
            }
            stop = since_best >= cfg.patience;
            Ok(!stop)
        })?;
        offset += losses.len();
        outcome.losses.extend(losses);
        if stop {
            outcome.stopped_early = true;
            break;
        }
    }
    if let Some((_, m)) = best {
        *model = m;
    }
    model.encoder.set_frozen(was_frozen);
    Ok(outcome)
}
