//! Multi-scale sparse-voxel encoder.
//!
//! Each point is described by fixed statistics of the occupied voxels that
//! contain it at several voxel sizes (its own voxel, the 3×3×3 block around
//! it, and the 3×3 block of vertical columns around it), concatenated with
//! its position inside the finest voxel and its own attributes. A learned
//! per-point network maps that description to an embedding. All statistics
//! are taken relative to voxel boundaries, so translating a cloud by a
//! multiple of every voxel size leaves the embedding unchanged.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cloudio::PointCloud;
use crate::error::{Error, Result};
use crate::tensorcore::{Checkpoint, EncoderSection, Matrix, Network};

/// Aggregates of one occupied voxel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelFeature {
    pub count: usize,
    pub mean_intensity: f64,
    pub mean_echo: f64,
    /// Centroid of the voxel's points relative to the voxel centre, in voxel
    /// units; each component lies in [−0.5, 0.5].
    pub centroid_offset: [f64; 3],
    /// Occupancy of the face neighbours −x, +x, −y, +y, −z, +z (0 or 1).
    pub neighbors: [f64; 6],
}

type Key = [i64; 3];

const FACE_NEIGHBORS: [Key; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

/// Occupied voxels only, in order of first occurrence in the cloud.
#[derive(Debug, Clone)]
pub struct SparseVoxelGrid {
    pub voxel_size: f64,
    keys: Vec<Key>,
    index: HashMap<Key, usize>,
    features: Vec<VoxelFeature>,
    /// Sum of member coordinates, in voxel units.
    sums: Vec<[f64; 3]>,
    point_voxel: Vec<usize>,
}

#[inline]
fn voxel_key(p: &[f64; 3], size: f64) -> Key {
    [
        (p[0] / size).floor() as i64,
        (p[1] / size).floor() as i64,
        (p[2] / size).floor() as i64,
    ]
}

impl SparseVoxelGrid {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[Key] {
        &self.keys
    }

    pub fn features(&self) -> &[VoxelFeature] {
        &self.features
    }

    pub fn get(&self, key: &Key) -> Option<&VoxelFeature> {
        self.index.get(key).map(|&i| &self.features[i])
    }

    /// Voxel index of every input point.
    pub fn point_voxel(&self) -> &[usize] {
        &self.point_voxel
    }
}

/// Builds the sparse grid of occupied voxels of side `voxel_size`.
pub fn voxelize(cloud: &PointCloud, voxel_size: f64) -> Result<SparseVoxelGrid> {
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(Error::Range(format!("voxel size must be positive, got {voxel_size}")));
    }
    let mut keys = Vec::new();
    let mut index = HashMap::new();
    let mut point_voxel = Vec::with_capacity(cloud.len());
    let mut acc: Vec<(usize, f64, f64, [f64; 3])> = Vec::new();
    for (i, p) in cloud.xyz.iter().enumerate() {
        let k = voxel_key(p, voxel_size);
        let v = *index.entry(k).or_insert_with(|| {
            keys.push(k);
            acc.push((0, 0.0, 0.0, [0.0; 3]));
            keys.len() - 1
        });
        point_voxel.push(v);
        let a = &mut acc[v];
        a.0 += 1;
        a.1 += cloud.intensity[i];
        a.2 += cloud.echo[i];
        for c in 0..3 {
            // Local coordinate inside the voxel, in voxel units.
            a.3[c] += p[c] / voxel_size - k[c] as f64;
        }
    }
    let mut features = Vec::with_capacity(keys.len());
    let mut sums = Vec::with_capacity(keys.len());
    for (k, a) in keys.iter().zip(&acc) {
        let n = a.0 as f64;
        let mut centroid_offset = [0.0; 3];
        let mut sum = [0.0; 3];
        for c in 0..3 {
            let local = a.3[c] / n;
            centroid_offset[c] = (local - 0.5).clamp(-0.5, 0.5);
            sum[c] = a.3[c];
        }
        let mut neighbors = [0.0; 6];
        for (slot, d) in neighbors.iter_mut().zip(FACE_NEIGHBORS) {
            if index.contains_key(&[k[0] + d[0], k[1] + d[1], k[2] + d[2]]) {
                *slot = 1.0;
            }
        }
        features.push(VoxelFeature {
            count: a.0,
            mean_intensity: a.1 / n,
            mean_echo: a.2 / n,
            centroid_offset,
            neighbors,
        });
        sums.push(sum);
    }
    Ok(SparseVoxelGrid {
        voxel_size,
        keys,
        index,
        features,
        sums,
        point_voxel,
    })
}

/// Features contributed by each scale.
pub const FEATURES_PER_SCALE: usize = 22;
/// Position within the finest voxel plus the point's own intensity and echo.
pub const POINT_FEATURES: usize = 5;

/// Height normalisation for column features, metres.
const HEIGHT_SCALE: f64 = 10.0;

pub fn feature_width(n_scales: usize) -> usize {
    n_scales * FEATURES_PER_SCALE + POINT_FEATURES
}

/// Fixed per-point input features (n × [`feature_width`]).
///
/// Points are put in a canonical order and exact duplicates merged before
/// any statistic is taken, so each row depends only on the set of distinct
/// points, never on their order or multiplicity.
pub fn point_features(cloud: &PointCloud, scales: &[f64]) -> Result<Matrix> {
    if scales.is_empty() {
        return Err(Error::Config("encoder needs at least one voxel scale".into()));
    }
    let (unique, rep) = canonical_points(cloud);
    let feats = distinct_point_features(&unique, scales)?;
    let mut out = Matrix::zeros(cloud.len(), feats.cols());
    for (i, &u) in rep.iter().enumerate() {
        out.row_mut(i).copy_from_slice(feats.row(u));
    }
    Ok(out)
}

fn point_key(cloud: &PointCloud, i: usize) -> [f64; 5] {
    let p = cloud.xyz[i];
    [p[0], p[1], p[2], cloud.intensity[i], cloud.echo[i]]
}

/// Distinct points in lexicographic order, and the position of every input
/// point in that list.
fn canonical_points(cloud: &PointCloud) -> (PointCloud, Vec<usize>) {
    let cmp = |a: &[f64; 5], b: &[f64; 5]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    };
    let mut order: Vec<usize> = (0..cloud.len()).collect();
    order.sort_by(|&a, &b| cmp(&point_key(cloud, a), &point_key(cloud, b)));
    let mut keep = Vec::new();
    let mut rep = vec![0; cloud.len()];
    for (k, &i) in order.iter().enumerate() {
        if k == 0 || cmp(&point_key(cloud, order[k - 1]), &point_key(cloud, i)).is_ne() {
            keep.push(i);
        }
        rep[i] = keep.len() - 1;
    }
    (cloud.select(&keep), rep)
}

fn distinct_point_features(cloud: &PointCloud, scales: &[f64]) -> Result<Matrix> {
    let n = cloud.len();
    let width = feature_width(scales.len());
    let mut out = Matrix::zeros(n, width);
    for (s, &size) in scales.iter().enumerate() {
        let grid = voxelize(cloud, size)?;
        // 3×3×3 block aggregates per voxel: count and coordinate sum in
        // voxel units relative to the voxel's own key.
        let mut block = Vec::with_capacity(grid.len());
        for k in &grid.keys {
            let mut cnt = 0usize;
            let mut sum = [0.0; 3];
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(&j) = grid.index.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                            let c = grid.features[j].count;
                            cnt += c;
                            sum[0] += grid.sums[j][0] + (dx * c as i64) as f64;
                            sum[1] += grid.sums[j][1] + (dy * c as i64) as f64;
                            sum[2] += grid.sums[j][2] + (dz * c as i64) as f64;
                        }
                    }
                }
            }
            block.push((cnt, sum));
        }
        // Vertical extent of every occupied column, relative to its key.
        let mut columns: HashMap<[i64; 2], (f64, f64)> = HashMap::new();
        for (p, &v) in cloud.xyz.iter().zip(&grid.point_voxel) {
            let k = grid.keys[v];
            let local = p[2] / size;
            let e = columns.entry([k[0], k[1]]).or_insert((f64::INFINITY, f64::NEG_INFINITY));
            e.0 = e.0.min(local);
            e.1 = e.1.max(local);
        }
        let mut column_range = Vec::with_capacity(grid.len());
        for k in &grid.keys {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    if let Some(&(a, b)) = columns.get(&[k[0] + dx, k[1] + dy]) {
                        lo = lo.min(a);
                        hi = hi.max(b);
                    }
                }
            }
            column_range.push((lo, hi));
        }
        // Canopy surface cues per occupied column: slope of the column tops
        // and the direction to the highest column within two columns.
        let top = |c: [i64; 2]| columns.get(&c).map(|e| e.1);
        let mut canopy: HashMap<[i64; 2], [f64; 4]> = HashMap::with_capacity(columns.len());
        for (&c, &(_, own)) in &columns {
            let slope = |a: [i64; 2], b: [i64; 2]| (top(a).unwrap_or(own) - top(b).unwrap_or(own)) / 2.0;
            let gx = slope([c[0] + 1, c[1]], [c[0] - 1, c[1]]);
            let gy = slope([c[0], c[1] + 1], [c[0], c[1] - 1]);
            let (mut best, mut dir) = (own, [0.0, 0.0]);
            for dx in -2..=2i64 {
                for dy in -2..=2i64 {
                    if let Some(h) = top([c[0] + dx, c[1] + dy]) {
                        if h > best {
                            best = h;
                            dir = [dx as f64 / 2.0, dy as f64 / 2.0];
                        }
                    }
                }
            }
            canopy.insert(c, [gx * size / HEIGHT_SCALE, gy * size / HEIGHT_SCALE, dir[0], dir[1]]);
        }

        let off = s * FEATURES_PER_SCALE;
        for (i, p) in cloud.xyz.iter().enumerate() {
            let v = grid.point_voxel[i];
            let f = &grid.features[v];
            let k = grid.keys[v];
            let row = out.row_mut(i);
            row[off] = (1.0 + f.count as f64).ln() / 5.0;
            row[off + 1] = f.mean_intensity;
            row[off + 2] = f.mean_echo;
            row[off + 3..off + 6].copy_from_slice(&f.centroid_offset);
            row[off + 6..off + 12].copy_from_slice(&f.neighbors);
            let (cnt, sum) = block[v];
            row[off + 12] = (1.0 + cnt as f64).ln() / 7.0;
            for c in 0..3 {
                let local = p[c] / size - k[c] as f64;
                row[off + 13 + c] = (sum[c] / cnt as f64 - local) / 1.5;
            }
            let (lo, hi) = column_range[v];
            let z = p[2] / size;
            row[off + 16] = (z - lo) * size / HEIGHT_SCALE;
            row[off + 17] = (hi - z) * size / HEIGHT_SCALE;
            row[off + 18..off + 22].copy_from_slice(&canopy[&[k[0], k[1]]]);
        }
    }
    let fine = scales[0];
    let base = scales.len() * FEATURES_PER_SCALE;
    for (i, p) in cloud.xyz.iter().enumerate() {
        let k = voxel_key(p, fine);
        let row = out.row_mut(i);
        for c in 0..3 {
            row[base + c] = p[c] / fine - k[c] as f64 - 0.5;
        }
        row[base + 3] = cloud.intensity[i];
        row[base + 4] = cloud.echo[i];
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Voxel sizes, finest first, metres.
    pub scales: Vec<f64>,
    /// Embedding dimension.
    pub dim: usize,
    pub hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            scales: vec![0.25, 1.0, 4.0],
            dim: 32,
            hidden: 64,
        }
    }
}

/// Fixed multi-scale voxel statistics followed by a learned per-point MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub net: Network,
}

impl EncoderModel {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        if config.scales.is_empty() {
            return Err(Error::Config("encoder needs at least one voxel scale".into()));
        }
        let width = feature_width(config.scales.len());
        let net = Network::mlp(&[width, config.hidden, config.hidden, config.dim], rng)?;
        Ok(EncoderModel { config, net })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn features(&self, cloud: &PointCloud) -> Result<Matrix> {
        point_features(cloud, &self.config.scales)
    }

    /// Per-point embeddings (n × D). Read-only.
    pub fn encode(&self, cloud: &PointCloud) -> Result<Matrix> {
        if cloud.is_empty() {
            return Ok(Matrix::zeros(0, self.dim()));
        }
        self.net.infer(&self.features(cloud)?)
    }

    /// Embeddings from precomputed features, read-only.
    pub fn embed(&self, features: &Matrix) -> Result<Matrix> {
        self.net.infer(features)
    }

    /// Embeddings from precomputed features with the tape recorded.
    pub fn embed_train(&mut self, features: &Matrix) -> Result<Matrix> {
        self.net.forward(features)
    }

    /// Back-propagates an embedding gradient into the encoder parameters.
    pub fn backward(&mut self, grad: &Matrix) -> Result<()> {
        self.net.backward(grad).map(|_| ())
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.net.set_frozen(frozen);
    }

    pub fn is_frozen(&self) -> bool {
        self.net.is_frozen()
    }

    pub fn write_checkpoint(&self, ckpt: &mut Checkpoint) {
        ckpt.insert("encoder", &self.net);
        ckpt.encoder = Some(EncoderSection {
            scales: self.config.scales.clone(),
            dim: self.config.dim,
        });
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let section = ckpt
            .encoder
            .as_ref()
            .ok_or_else(|| Error::Input("checkpoint has no encoder section".into()))?;
        let net = ckpt.network("encoder")?;
        let width = feature_width(section.scales.len());
        if net.input_dim() != Some(width) || net.output_dim() != Some(section.dim) {
            return Err(Error::Dimension(format!(
                "encoder network does not map {width} features to {} dims",
                section.dim
            )));
        }
        let hidden = net.specs().iter().find_map(|s| match s {
            crate::tensorcore::LayerSpec::Affine { outputs, .. } => Some(*outputs),
            _ => None,
        });
        Ok(EncoderModel {
            config: EncoderConfig {
                scales: section.scales.clone(),
                dim: section.dim,
                hidden: hidden.unwrap_or(section.dim),
            },
            net,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloudio::SemanticClass;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = PointCloud::default();
        for _ in 0..n {
            c.push(
                [rng.random_range(0.0..8.0), rng.random_range(0.0..8.0), rng.random_range(0.0..6.0)],
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                SemanticClass::Terrain,
                -1,
            );
        }
        c
    }

    #[test]
    fn single_point_voxel() {
        let mut c = PointCloud::default();
        c.push([0.3, 1.6, -0.2], 0.4, 0.9, SemanticClass::Terrain, -1);
        let g = voxelize(&c, 1.0).unwrap();
        assert_eq!(g.len(), 1);
        let f = g.features()[0];
        assert_eq!(f.count, 1);
        assert_eq!(g.keys()[0], [0, 1, -1]);
        let want = [0.3 - 0.5, 0.6 - 0.5, 0.8 - 0.5];
        for c in 0..3 {
            assert!((f.centroid_offset[c] - want[c]).abs() < 1e-12);
        }
        assert_eq!(f.neighbors, [0.0; 6]);
        assert!(voxelize(&c, 0.0).is_err());
    }

    #[test]
    fn shared_cell_counts_two() {
        let mut c = PointCloud::default();
        c.push([0.1, 0.1, 0.1], 0.0, 0.0, SemanticClass::Terrain, -1);
        c.push([0.2, 0.2, 0.2], 0.0, 0.0, SemanticClass::Terrain, -1);
        c.push([1.2, 0.2, 0.2], 0.0, 0.0, SemanticClass::Terrain, -1);
        let g = voxelize(&c, 1.0).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.features()[0].count, 2);
        assert_eq!(g.features()[0].neighbors[1], 1.0);
        assert_eq!(g.features()[1].neighbors[0], 1.0);
    }

    #[test]
    fn voxel_counts_sum_to_points() {
        let c = random_cloud(2000, 1);
        for size in [0.1, 0.5, 2.0] {
            let g = voxelize(&c, size).unwrap();
            assert_eq!(g.features().iter().map(|f| f.count).sum::<usize>(), c.len());
            for f in g.features() {
                assert!(f.count >= 1);
                assert!(f.centroid_offset.iter().all(|v| (-0.5..=0.5).contains(v)));
            }
        }
    }

    #[test]
    fn zero_network_gives_zero_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = EncoderModel::new(EncoderConfig::default(), &mut rng).unwrap();
        m.net.zero_weights();
        let e = m.encode(&random_cloud(50, 2)).unwrap();
        assert_eq!(e.shape(), (50, 32));
        assert!(e.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(m.encode(&PointCloud::default()).unwrap().shape(), (0, 32));
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = EncoderModel::new(EncoderConfig::default(), &mut rng).unwrap();
        let c = random_cloud(300, 3);
        let perm: Vec<usize> = (0..c.len()).rev().collect();
        let a = m.encode(&c).unwrap();
        let b = m.encode(&c.select(&perm)).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            for (x, y) in a.row(i).iter().zip(b.row(j)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn voxel_multiple_translation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = EncoderModel::new(EncoderConfig::default(), &mut rng).unwrap();
        let c = random_cloud(400, 4);
        let mut t = c.clone();
        for p in &mut t.xyz {
            p[0] += 8.0;
            p[1] -= 12.0;
            p[2] += 4.0;
        }
        let a = m.encode(&c).unwrap();
        let b = m.encode(&t).unwrap();
        let worst = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = EncoderModel::new(EncoderConfig::default(), &mut rng).unwrap();
        let mut ck = Checkpoint::default();
        m.write_checkpoint(&mut ck);
        assert_eq!(EncoderModel::from_checkpoint(&ck).unwrap(), m);
    }
}
