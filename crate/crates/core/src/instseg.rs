//! Tree instance segmentation: offset regression towards instance
//! centroids, radius-graph BFS clustering of the shifted points, and
//! panoptic assembly with the semantic head.

use std::collections::{BTreeMap, HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloudio::{PointCloud, SemanticClass};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::semseg::{argmax, scene_class_weights, semantic_head, softmax_rows};
use crate::tensorcore::{offset_loss, weighted_cross_entropy, Checkpoint, Matrix, Network, Sgd};
use crate::training::{gather_features, labeled_points, sample_batch, PreparedScene, TrainConfig};

/// Panoptic output for one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstancePrediction {
    /// Cluster id per point, −1 when unassigned.
    pub instance_id: Vec<i64>,
    /// Confidence per cluster id.
    pub confidence: Vec<f64>,
    pub semantic: Vec<SemanticClass>,
}

impl InstancePrediction {
    /// Prediction with the given ids, unit confidence and crown/terrain
    /// semantics.
    pub fn from_ids(ids: Vec<i64>) -> Self {
        let n_clusters = ids.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
        let semantic = ids
            .iter()
            .map(|&i| if i >= 0 { SemanticClass::Crown } else { SemanticClass::Terrain })
            .collect();
        InstancePrediction {
            instance_id: ids,
            confidence: vec![1.0; n_clusters],
            semantic,
        }
    }

    pub fn n_clusters(&self) -> usize {
        self.confidence.len()
    }

    pub fn confidence_of(&self, id: i64) -> f64 {
        usize::try_from(id)
            .ok()
            .and_then(|i| self.confidence.get(i))
            .copied()
            .unwrap_or(0.0)
    }

    /// `point_index,instance_id,semantic,confidence` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("point_index,instance_id,semantic,confidence\n");
        for (i, (&id, c)) in self.instance_id.iter().zip(&self.semantic).enumerate() {
            s.push_str(&format!("{i},{id},{},{:.6}\n", c.id(), self.confidence_of(id)));
        }
        s
    }

    pub fn cluster_table(&self) -> Vec<ClusterSummary> {
        let mut sizes: BTreeMap<i64, usize> = BTreeMap::new();
        for &id in self.instance_id.iter().filter(|&&i| i >= 0) {
            *sizes.entry(id).or_default() += 1;
        }
        sizes
            .into_iter()
            .map(|(id, size)| ClusterSummary {
                id,
                size,
                confidence: self.confidence_of(id),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub id: i64,
    pub size: usize,
    pub confidence: f64,
}

/// Reference density for `min_cluster_size`, points per m².
pub const REFERENCE_DENSITY: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub radius: f64,
    pub min_cluster_size: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            radius: 0.6,
            min_cluster_size: 50,
        }
    }
}

impl ClusterConfig {
    /// Default radius with the minimum size scaled linearly by density.
    pub fn for_density(points_per_m2: f64) -> Self {
        let scaled = (50.0 * points_per_m2 / REFERENCE_DENSITY).round();
        ClusterConfig {
            radius: 0.6,
            min_cluster_size: (scaled as usize).max(1),
        }
    }
}

/// Instance centroid minus point for tree points, zero elsewhere (n × 3).
pub fn gt_offsets(cloud: &PointCloud) -> Matrix {
    let mut out = Matrix::zeros(cloud.len(), 3);
    for members in cloud.instance_members().values() {
        let mut c = [0.0; 3];
        for &i in members {
            for k in 0..3 {
                c[k] += cloud.xyz[i][k];
            }
        }
        let n = members.len() as f64;
        for v in &mut c {
            *v /= n;
        }
        for &i in members {
            let row = out.row_mut(i);
            for k in 0..3 {
                row[k] = c[k] - cloud.xyz[i][k];
            }
        }
    }
    out
}

/// Stem/branch/crown → true, terrain/low vegetation → false.
pub fn remap_tree_mask(semantic: &[i64]) -> Result<Vec<bool>> {
    semantic
        .iter()
        .map(|&s| SemanticClass::from_id(s).map(SemanticClass::is_tree))
        .collect()
}

struct Grid {
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl Grid {
    fn new(points: &[[f64; 3]], idx: impl Iterator<Item = usize>, cell: f64) -> Self {
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for i in idx {
            cells.entry(Self::key(&points[i], cell)).or_default().push(i);
        }
        Grid { cell, cells }
    }

    fn key(p: &[f64; 3], cell: f64) -> [i64; 3] {
        [
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        ]
    }

    fn for_each_near(&self, p: &[f64; 3], mut f: impl FnMut(usize)) {
        let k = Self::key(p, self.cell);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(v) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        v.iter().for_each(|&j| f(j));
                    }
                }
            }
        }
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Connected components of the graph joining masked points at distance
/// ≤ `radius`. Components smaller than `min_cluster_size` get −1; the rest
/// are numbered in order of discovery.
pub fn bfs_cluster(points: &[[f64; 3]], cfg: &ClusterConfig, tree_mask: &[bool]) -> Result<Vec<i64>> {
    if !(cfg.radius > 0.0) {
        return Err(Error::Range(format!("cluster radius must be positive, got {}", cfg.radius)));
    }
    if tree_mask.len() != points.len() {
        return Err(Error::Dimension(format!(
            "{} points but {} mask entries",
            points.len(),
            tree_mask.len()
        )));
    }
    let grid = Grid::new(points, (0..points.len()).filter(|&i| tree_mask[i]), cfg.radius);
    let r2 = cfg.radius * cfg.radius;
    let mut ids = vec![-1i64; points.len()];
    let mut seen = vec![false; points.len()];
    let mut next = 0i64;
    let mut queue = VecDeque::new();
    for start in 0..points.len() {
        if !tree_mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let p = points[i];
            grid.for_each_near(&p, |j| {
                if !seen[j] && dist2(&p, &points[j]) <= r2 {
                    seen[j] = true;
                    queue.push_back(j);
                }
            });
        }
        if comp.len() >= cfg.min_cluster_size.max(1) {
            for i in comp {
                ids[i] = next;
            }
            next += 1;
        }
    }
    Ok(ids)
}

/// Attaches per-point argmax semantics and per-cluster confidence (mean
/// tree-class probability of the members) to a clustering.
pub fn assemble_panoptic(cluster_ids: &[i64], semantic_logits: &Matrix) -> Result<InstancePrediction> {
    if cluster_ids.len() != semantic_logits.rows() || semantic_logits.cols() != SemanticClass::COUNT {
        return Err(Error::Dimension(format!(
            "{} cluster ids vs logits {:?}",
            cluster_ids.len(),
            semantic_logits.shape()
        )));
    }
    let probs = softmax_rows(semantic_logits);
    let n_clusters = cluster_ids.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
    let mut mass = vec![0.0; n_clusters];
    let mut count = vec![0usize; n_clusters];
    let mut semantic = Vec::with_capacity(cluster_ids.len());
    for (i, &id) in cluster_ids.iter().enumerate() {
        let row = probs.row(i);
        semantic.push(SemanticClass::ALL[argmax(row)]);
        if id >= 0 {
            let tree: f64 = SemanticClass::ALL
                .iter()
                .filter(|c| c.is_tree())
                .map(|c| row[c.id()])
                .sum();
            mass[id as usize] += tree;
            count[id as usize] += 1;
        }
    }
    let confidence = mass
        .iter()
        .zip(&count)
        .map(|(&m, &c)| if c == 0 { 0.0 } else { m / c as f64 })
        .collect();
    Ok(InstancePrediction {
        instance_id: cluster_ids.to_vec(),
        confidence,
        semantic,
    })
}

/// Offset head `D → D → 3`.
pub fn offset_head<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Network> {
    Network::mlp(&[dim, dim, 3], rng)
}

/// Encoder with offset and semantic heads.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceModel {
    pub encoder: EncoderModel,
    pub offset_head: Network,
    pub semantic_head: Network,
}

impl InstanceModel {
    pub fn new<R: Rng + ?Sized>(encoder: EncoderModel, rng: &mut R) -> Result<Self> {
        let d = encoder.dim();
        Ok(InstanceModel {
            offset_head: offset_head(d, rng)?,
            semantic_head: semantic_head(d, rng)?,
            encoder,
        })
    }

    /// Fresh heads on the given encoder.
    pub fn reset_heads<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let d = self.encoder.dim();
        self.offset_head = offset_head(d, rng)?;
        self.semantic_head = semantic_head(d, rng)?;
        Ok(())
    }

    /// Offsets (n × 3) and semantic logits (n × 5) from cached features.
    pub fn infer(&self, features: &Matrix) -> Result<(Matrix, Matrix)> {
        let emb = self.encoder.embed(features)?;
        Ok((self.offset_head.infer(&emb)?, self.semantic_head.infer(&emb)?))
    }

    pub fn predict(&self, scene: &PreparedScene, cluster: &ClusterConfig) -> Result<InstancePrediction> {
        let (offsets, logits) = self.infer(&scene.features)?;
        segment(&scene.cloud, &offsets, &logits, cluster)
    }

    pub fn write_checkpoint(&self, ckpt: &mut Checkpoint) {
        self.encoder.write_checkpoint(ckpt);
        ckpt.insert("offset_head", &self.offset_head);
        ckpt.insert("semantic_head", &self.semantic_head);
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(InstanceModel {
            encoder: EncoderModel::from_checkpoint(ckpt)?,
            offset_head: ckpt.network("offset_head")?,
            semantic_head: ckpt.network("semantic_head")?,
        })
    }
}

/// Shift, mask, cluster and assemble.
pub fn segment(
    cloud: &PointCloud,
    offsets: &Matrix,
    logits: &Matrix,
    cluster: &ClusterConfig,
) -> Result<InstancePrediction> {
    if offsets.rows() != cloud.len() || offsets.cols() != 3 {
        return Err(Error::Dimension(format!("offsets {:?} for {} points", offsets.shape(), cloud.len())));
    }
    let shifted: Vec<[f64; 3]> = cloud
        .xyz
        .iter()
        .zip(offsets.row_iter())
        .map(|(p, o)| [p[0] + o[0], p[1] + o[1], p[2] + o[2]])
        .collect();
    let mask: Vec<bool> = logits.row_iter().map(|r| SemanticClass::ALL[argmax(r)].is_tree()).collect();
    let ids = bfs_cluster(&shifted, cluster, &mask)?;
    assemble_panoptic(&ids, logits)
}

pub fn predict_offsets(encoder: &EncoderModel, head: &Network, cloud: &PointCloud) -> Result<Matrix> {
    if cloud.is_empty() {
        return Ok(Matrix::zeros(0, 3));
    }
    head.infer(&encoder.encode(cloud)?)
}

/// Joint training: offset loss on labeled tree points plus class-weighted
/// cross-entropy on all labeled points. Returns per-step losses.
pub fn train_instseg(model: &mut InstanceModel, scenes: &[PreparedScene], cfg: &TrainConfig) -> Result<Vec<f64>> {
    train_instseg_with(model, scenes, cfg, 0, |_, _| Ok(()))
}

/// [`train_instseg`] calling `observe` every `eval_every` steps and after the
/// last step (never when `eval_every` is 0).
pub fn train_instseg_with(
    model: &mut InstanceModel,
    scenes: &[PreparedScene],
    cfg: &TrainConfig,
    eval_every: usize,
    mut observe: impl FnMut(usize, &InstanceModel) -> Result<()>,
) -> Result<Vec<f64>> {
    if scenes.is_empty() {
        return Err(Error::Input("no training scenes".into()));
    }
    let pool = labeled_points(scenes);
    if pool.is_empty() {
        return Err(Error::NoLabels);
    }
    let weights = scene_class_weights(scenes)?;
    let offsets: Vec<Matrix> = scenes.iter().map(|s| gt_offsets(&s.cloud)).collect();
    let schedule = cfg.schedule();
    let mut opt = Sgd::new(cfg.sgd);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    let train_encoder = !model.encoder.is_frozen();
    for step in 0..cfg.steps {
        let batch = sample_batch(&pool, cfg.batch_points, &mut rng);
        let x = gather_features(scenes, &batch);
        let mut labels = Vec::with_capacity(batch.len());
        let mut tree = Vec::with_capacity(batch.len());
        let mut gt = Matrix::zeros(batch.len(), 3);
        for (r, &(s, i)) in batch.iter().enumerate() {
            let c = scenes[s].cloud.semantic[i];
            labels.push(c.id());
            tree.push(scenes[s].cloud.instance[i] >= 0);
            gt.row_mut(r).copy_from_slice(offsets[s].row(i));
        }
        let emb = if train_encoder {
            model.encoder.embed_train(&x)?
        } else {
            model.encoder.embed(&x)?
        };
        let pred = model.offset_head.forward(&emb)?;
        let logits = model.semantic_head.forward(&emb)?;
        let (off_loss, off_grad) = match offset_loss(&pred, &gt, &tree) {
            Ok(o) => (o.loss, o.grad),
            Err(Error::NoLabels) => (0.0, Matrix::zeros(batch.len(), 3)),
            Err(e) => return Err(e),
        };
        let ce = weighted_cross_entropy(&logits, &labels, &weights, &vec![true; batch.len()])?;
        let mut g_emb = model.offset_head.backward(&off_grad)?;
        let g_sem = model.semantic_head.backward(&ce.grad)?;
        for (a, b) in g_emb.as_mut_slice().iter_mut().zip(g_sem.as_slice()) {
            *a += b;
        }
        if train_encoder {
            model.encoder.backward(&g_emb)?;
        }
        let mut params = model.encoder.net.params_mut();
        params.extend(model.offset_head.params_mut());
        params.extend(model.semantic_head.params_mut());
        opt.step(&mut params, schedule.lr_at(step)?)?;
        losses.push(off_loss + ce.loss);
        if eval_every > 0 && (step + 1) % eval_every == 0 && step + 1 != cfg.steps {
            observe(step + 1, model)?;
        }
    }
    if cfg.steps > 0 && eval_every > 0 {
        observe(cfg.steps, model)?;
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn pts(v: &[[f64; 3]]) -> PointCloud {
        let mut c = PointCloud::default();
        for (i, p) in v.iter().enumerate() {
            c.push(*p, 0.5, 0.5, SemanticClass::Crown, (i % 2) as i64);
        }
        c
    }

    #[test]
    fn offsets_reach_centroid() {
        let mut c = PointCloud::default();
        c.push([1.0, 2.0, 3.0], 0.0, 0.0, SemanticClass::Stem, 0);
        c.push([-2.0, 0.5, 1.0], 0.0, 0.0, SemanticClass::Crown, 1);
        c.push([2.0, -0.5, -1.0], 0.0, 0.0, SemanticClass::Crown, 1);
        c.push([5.0, 5.0, 0.0], 0.0, 0.0, SemanticClass::Terrain, -1);
        let o = gt_offsets(&c);
        assert_eq!(o.row(0), &[0.0, 0.0, 0.0]);
        assert_eq!(o.row(1), &[2.0, -0.5, -1.0]);
        assert_eq!(o.row(2), &[-2.0, 0.5, 1.0]);
        assert_eq!(o.row(3), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn collinear_radius() {
        let p = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let mask = [true; 3];
        let cfg = |r| ClusterConfig {
            radius: r,
            min_cluster_size: 1,
        };
        assert_eq!(bfs_cluster(&p, &cfg(1.5), &mask).unwrap(), vec![0, 0, 0]);
        assert_eq!(bfs_cluster(&p, &cfg(0.9), &mask).unwrap(), vec![0, 1, 2]);
        assert_eq!(bfs_cluster(&p[..1], &cfg(0.6), &[true]).unwrap(), vec![0]);
        let small = ClusterConfig {
            radius: 0.9,
            min_cluster_size: 2,
        };
        assert_eq!(bfs_cluster(&p, &small, &mask).unwrap(), vec![-1, -1, -1]);
        assert_eq!(bfs_cluster(&p, &cfg(1.5), &[true, false, true]).unwrap(), vec![0, -1, 1]);
        assert!(bfs_cluster(&p, &cfg(0.0), &mask).is_err());
    }

    #[test]
    fn remap() {
        assert_eq!(remap_tree_mask(&[0, 0]).unwrap(), vec![false, false]);
        assert_eq!(remap_tree_mask(&[4, 4]).unwrap(), vec![true, true]);
        assert_eq!(
            remap_tree_mask(&[0, 1, 2, 3, 4]).unwrap(),
            vec![false, false, true, true, true]
        );
        assert!(remap_tree_mask(&[7]).is_err());
    }

    #[test]
    fn panoptic_confidence() {
        let mut certain = Matrix::zeros(3, 5);
        for i in 0..3 {
            certain.row_mut(i)[4] = 50.0;
        }
        let p = assemble_panoptic(&[0, 0, 0], &certain).unwrap();
        assert!((p.confidence[0] - 1.0).abs() < 1e-12);
        assert!(p.semantic.iter().all(|&c| c == SemanticClass::Crown));
        let p = assemble_panoptic(&[0, 0], &Matrix::zeros(2, 5)).unwrap();
        assert!((p.confidence[0] - 0.6).abs() < 1e-12);
        let p = assemble_panoptic(&[-1, -1], &Matrix::zeros(2, 5)).unwrap();
        assert_eq!(p.n_clusters(), 0);
        assert!(p.instance_id.iter().all(|&i| i == -1));
    }

    #[test]
    fn zero_head_zero_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = EncoderModel::new(EncoderConfig::default(), &mut rng).unwrap();
        let mut head = offset_head(enc.dim(), &mut rng).unwrap();
        head.zero_weights();
        let c = pts(&[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]);
        let o = predict_offsets(&enc, &head, &c).unwrap();
        assert!(o.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_steps_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = EncoderModel::new(EncoderConfig::default(), &mut rng).unwrap();
        let mut m = InstanceModel::new(enc, &mut rng).unwrap();
        let before = m.clone();
        let s = PreparedScene::new(pts(&[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]), &m.encoder.config).unwrap();
        let cfg = TrainConfig {
            steps: 0,
            ..Default::default()
        };
        train_instseg(&mut m, &[s.clone()], &cfg).unwrap();
        assert_eq!(m, before);

        let mut unlabeled = s.cloud.clone();
        unlabeled.labeled.iter_mut().for_each(|l| *l = false);
        let s = s.with_labels(unlabeled).unwrap();
        assert!(matches!(train_instseg(&mut m, &[s], &cfg), Err(Error::NoLabels)));
    }
}
