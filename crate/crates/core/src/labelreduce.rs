//! Annotation-reduction protocols: uniform per-tree point subsampling and
//! tree-level selection. Both only ever rewrite the `labeled` mask.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloudio::PointCloud;
use crate::error::{Error, Result};

/// The label proportions of the uniform protocol sweep.
pub const UNIFORM_LEVELS: [f64; 7] = [1.0, 0.5, 0.2, 0.1, 0.01, 0.001, 0.0001];

/// Labeled trees per scene in the tree-level protocol sweep.
pub const TREE_LEVELS: [usize; 4] = [10, 5, 2, 1];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReductionSpec {
    Uniform { proportion: f64, seed: u64 },
    TreeLevel { n_trees: usize, seed: u64 },
}

impl ReductionSpec {
    pub fn apply(&self, cloud: &PointCloud) -> Result<PointCloud> {
        match *self {
            ReductionSpec::Uniform { proportion, seed } => uniform_reduce(cloud, proportion, seed),
            ReductionSpec::TreeLevel { n_trees, seed } => tree_level_reduce(cloud, n_trees, seed),
        }
    }

    /// Same protocol with a different seed (used to vary masks per scene).
    pub fn reseeded(&self, seed: u64) -> Self {
        match *self {
            ReductionSpec::Uniform { proportion, .. } => ReductionSpec::Uniform { proportion, seed },
            ReductionSpec::TreeLevel { n_trees, .. } => ReductionSpec::TreeLevel { n_trees, seed },
        }
    }

    /// Sort key placing the densest labelling first.
    pub fn label_fraction_key(&self) -> f64 {
        match *self {
            ReductionSpec::Uniform { proportion, .. } => proportion,
            ReductionSpec::TreeLevel { n_trees, .. } => n_trees as f64,
        }
    }
}

/// Number of points kept from a stratum of `n` labeled points.
pub fn kept_count(n: usize, proportion: f64) -> usize {
    if n == 0 {
        return 0;
    }
    // The epsilon absorbs representation error in products such as
    // 49785 × 0.2, which must floor to the exact integer.
    let k = (n as f64 * proportion + 1e-9).floor() as usize;
    k.clamp(1, n)
}

fn keep_subset(labeled: &mut [bool], stratum: &[usize], proportion: f64, rng: &mut ChaCha8Rng) {
    let k = kept_count(stratum.len(), proportion);
    for &i in stratum {
        labeled[i] = false;
    }
    for j in index::sample(rng, stratum.len(), k) {
        labeled[stratum[j]] = true;
    }
}

/// Keeps `max(1, floor(N·p))` of the labeled points of every tree, and the
/// same fraction of labeled non-tree points; everything else is unlabeled.
pub fn uniform_reduce(cloud: &PointCloud, proportion: f64, seed: u64) -> Result<PointCloud> {
    if !(proportion > 0.0 && proportion <= 1.0) {
        return Err(Error::Range(format!("proportion must lie in (0, 1], got {proportion}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = cloud.clone();
    for members in cloud.instance_members().values() {
        let stratum: Vec<usize> = members.iter().copied().filter(|&i| cloud.labeled[i]).collect();
        keep_subset(&mut out.labeled, &stratum, proportion, &mut rng);
    }
    let background: Vec<usize> = (0..cloud.len())
        .filter(|&i| cloud.instance[i] < 0 && cloud.labeled[i])
        .collect();
    keep_subset(&mut out.labeled, &background, proportion, &mut rng);
    Ok(out)
}

/// Fully labels `min(n_trees, available)` randomly chosen trees and
/// unlabels every other point, ground included.
pub fn tree_level_reduce(cloud: &PointCloud, n_trees: usize, seed: u64) -> Result<PointCloud> {
    if n_trees == 0 {
        return Err(Error::Range("n_trees must be at least 1".into()));
    }
    let ids = cloud.instance_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = n_trees.min(ids.len());
    let mut chosen: Vec<i64> = index::sample(&mut rng, ids.len(), k)
        .into_iter()
        .map(|j| ids[j])
        .collect();
    chosen.sort_unstable();
    let mut out = cloud.clone();
    for (l, id) in out.labeled.iter_mut().zip(&cloud.instance) {
        *l = *id >= 0 && chosen.binary_search(id).is_ok();
    }
    Ok(out)
}
