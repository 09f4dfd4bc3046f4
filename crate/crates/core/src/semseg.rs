//! Per-point semantic segmentation head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloudio::{PointCloud, SemanticClass};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::eval::{semantic_metrics, Confusion, SemanticMetrics};
use crate::tensorcore::{weighted_cross_entropy, Checkpoint, Matrix, Network, Sgd};
use crate::training::{gather_features, labeled_points, sample_batch, PreparedScene, TrainConfig};

/// Shared per-point classifier `D → D → 5`.
pub fn semantic_head<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Network> {
    Network::mlp(&[dim, dim, SemanticClass::COUNT], rng)
}

/// Inverse-frequency weights `N / (K_present · N_c)`; absent classes get 0.
pub fn class_weights(labels: &[usize], k: usize) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::NoLabels);
    }
    let mut counts = vec![0usize; k];
    for &l in labels {
        if l >= k {
            return Err(Error::Range(format!("label {l} with {k} classes")));
        }
        counts[l] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    let n = labels.len() as f64;
    Ok(counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { n / (present * c as f64) })
        .collect())
}

/// Class weights from the labeled points of a training set.
pub fn scene_class_weights(scenes: &[PreparedScene]) -> Result<Vec<f64>> {
    let labels: Vec<usize> = scenes
        .iter()
        .flat_map(|s| {
            s.cloud
                .semantic
                .iter()
                .zip(&s.cloud.labeled)
                .filter(|(_, &l)| l)
                .map(|(c, _)| c.id())
        })
        .collect();
    class_weights(&labels, SemanticClass::COUNT)
}

pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for i in 0..p.rows() {
        let row = p.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    p
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn argmax_classes(logits: &Matrix) -> Vec<SemanticClass> {
    logits.row_iter().map(|r| SemanticClass::ALL[argmax(r)]).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticModel {
    pub encoder: EncoderModel,
    pub head: Network,
}

impl SemanticModel {
    pub fn new<R: Rng + ?Sized>(encoder: EncoderModel, rng: &mut R) -> Result<Self> {
        let head = semantic_head(encoder.dim(), rng)?;
        Ok(SemanticModel { encoder, head })
    }

    pub fn logits_from_features(&self, features: &Matrix) -> Result<Matrix> {
        self.head.infer(&self.encoder.embed(features)?)
    }

    pub fn write_checkpoint(&self, ckpt: &mut Checkpoint) {
        self.encoder.write_checkpoint(ckpt);
        ckpt.insert("semantic_head", &self.head);
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(SemanticModel {
            encoder: EncoderModel::from_checkpoint(ckpt)?,
            head: ckpt.network("semantic_head")?,
        })
    }
}

/// Per-point class logits (n × 5).
pub fn predict_semantics(encoder: &EncoderModel, head: &Network, cloud: &PointCloud) -> Result<Matrix> {
    if cloud.is_empty() {
        return Ok(Matrix::zeros(0, SemanticClass::COUNT));
    }
    head.infer(&encoder.encode(cloud)?)
}

/// Accumulates the confusion matrix of a model over scenes (all points).
pub fn confusion(model: &SemanticModel, scenes: &[PreparedScene]) -> Result<Confusion> {
    let mut conf = Confusion::new(SemanticClass::COUNT);
    for s in scenes {
        let logits = model.logits_from_features(&s.features)?;
        for (row, gt) in logits.row_iter().zip(&s.cloud.semantic) {
            conf.add(gt.id(), argmax(row));
        }
    }
    Ok(conf)
}

pub fn evaluate_semseg(model: &SemanticModel, scenes: &[PreparedScene]) -> Result<SemanticMetrics> {
    semantic_metrics(&confusion(model, scenes)?)
}

/// Trains encoder (unless frozen) and head with class-weighted cross-entropy
/// on labeled points. `observe` is called every `eval_every` steps (and
/// after the last one) with the step count; returns the per-step losses.
pub fn train_semseg_with(
    model: &mut SemanticModel,
    scenes: &[PreparedScene],
    cfg: &TrainConfig,
    eval_every: usize,
    mut observe: impl FnMut(usize, &SemanticModel) -> Result<()>,
) -> Result<Vec<f64>> {
    if scenes.is_empty() {
        return Err(Error::Input("no training scenes".into()));
    }
    let pool = labeled_points(scenes);
    if pool.is_empty() {
        return Err(Error::NoLabels);
    }
    let weights = scene_class_weights(scenes)?;
    let schedule = cfg.schedule();
    let mut opt = Sgd::new(cfg.sgd);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    let train_encoder = !model.encoder.is_frozen();
    for step in 0..cfg.steps {
        let batch = sample_batch(&pool, cfg.batch_points, &mut rng);
        let x = gather_features(scenes, &batch);
        let labels: Vec<usize> = batch.iter().map(|&(s, i)| scenes[s].cloud.semantic[i].id()).collect();
        let emb = if train_encoder {
            model.encoder.embed_train(&x)?
        } else {
            model.encoder.embed(&x)?
        };
        let logits = model.head.forward(&emb)?;
        let out = weighted_cross_entropy(&logits, &labels, &weights, &vec![true; batch.len()])?;
        let g_emb = model.head.backward(&out.grad)?;
        if train_encoder {
            model.encoder.backward(&g_emb)?;
        }
        let mut params = model.encoder.net.params_mut();
        params.extend(model.head.params_mut());
        opt.step(&mut params, schedule.lr_at(step)?)?;
        losses.push(out.loss);
        if eval_every > 0 && (step + 1) % eval_every == 0 && step + 1 != cfg.steps {
            observe(step + 1, model)?;
        }
    }
    if cfg.steps > 0 && eval_every > 0 {
        observe(cfg.steps, model)?;
    }
    Ok(losses)
}

pub fn train_semseg(model: &mut SemanticModel, scenes: &[PreparedScene], cfg: &TrainConfig) -> Result<Vec<f64>> {
    train_semseg_with(model, scenes, cfg, 0, |_, _| Ok(()))
}

/// `point_index,semantic_pred` rows.
pub fn predictions_csv(pred: &[SemanticClass]) -> String {
    let mut s = String::from("point_index,semantic_pred\n");
    for (i, c) in pred.iter().enumerate() {
        s.push_str(&format!("{i},{}\n", c.id()));
    }
    s
}
