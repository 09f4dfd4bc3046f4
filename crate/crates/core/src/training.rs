//! Plumbing shared by the supervised training loops: cached encoder inputs,
//! labeled-point minibatches, and the step budget / schedule settings.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloudio::PointCloud;
use crate::encoder::{point_features, EncoderConfig};
use crate::error::{Error, Result};
use crate::tensorcore::{LrSchedule, Matrix, SgdConfig};

/// A scene together with its fixed encoder input features.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub cloud: PointCloud,
    pub features: Matrix,
}

impl PreparedScene {
    pub fn new(cloud: PointCloud, encoder: &EncoderConfig) -> Result<Self> {
        let features = point_features(&cloud, &encoder.scales)?;
        Ok(PreparedScene { cloud, features })
    }

    /// Same features, different label mask.
    pub fn with_labels(&self, cloud: PointCloud) -> Result<Self> {
        if cloud.xyz != self.cloud.xyz {
            return Err(Error::Input("relabeled cloud has different geometry".into()));
        }
        Ok(PreparedScene {
            cloud,
            features: self.features.clone(),
        })
    }
}

/// Computes features for many clouds in parallel.
pub fn prepare_all(clouds: Vec<PointCloud>, encoder: &EncoderConfig) -> Result<Vec<PreparedScene>> {
    clouds
        .into_par_iter()
        .map(|c| PreparedScene::new(c, encoder))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    /// Labeled points per step, drawn across all scenes.
    pub batch_points: usize,
    /// Polynomial decay from this rate.
    pub initial_lr: f64,
    pub power: f64,
    pub sgd: SgdConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 400,
            batch_points: 1024,
            initial_lr: 0.1,
            power: 0.9,
            sgd: SgdConfig::finetune(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::Polynomial {
            total_steps: self.steps,
            initial_lr: self.initial_lr,
            power: self.power,
        }
    }
}

/// Every labeled point as (scene, point) pairs, in scene order.
pub fn labeled_points(scenes: &[PreparedScene]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (s, sc) in scenes.iter().enumerate() {
        for (i, &l) in sc.cloud.labeled.iter().enumerate() {
            if l {
                out.push((s, i));
            }
        }
    }
    out
}

/// Draws up to `batch` distinct entries of `pool`; returns all of them when
/// the pool is smaller than the batch.
pub fn sample_batch<R: Rng + ?Sized>(pool: &[(usize, usize)], batch: usize, rng: &mut R) -> Vec<(usize, usize)> {
    if pool.len() <= batch {
        return pool.to_vec();
    }
    let mut picks = index::sample(rng, pool.len(), batch).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|j| pool[j]).collect()
}

/// Stacks the feature rows of a batch.
pub fn gather_features(scenes: &[PreparedScene], batch: &[(usize, usize)]) -> Matrix {
    let width = scenes.first().map_or(0, |s| s.features.cols());
    let mut data = Vec::with_capacity(batch.len() * width);
    for &(s, i) in batch {
        data.extend_from_slice(scenes[s].features.row(i));
    }
    Matrix::from_vec(batch.len(), width, data).expect("rows share the feature width")
}

/// Mean of the first and last `window` entries of a loss curve.
pub fn smoothed_ends(curve: &[f64], window: usize) -> Option<(f64, f64)> {
    if curve.is_empty() {
        return None;
    }
    let w = window.clamp(1, curve.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&curve[..w]), mean(&curve[curve.len() - w..])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batch_sampling() {
        let pool: Vec<(usize, usize)> = (0..50).map(|i| (i % 3, i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_batch(&pool, 100, &mut rng), pool);
        let b = sample_batch(&pool, 10, &mut rng);
        assert_eq!(b.len(), 10);
        let mut d = b.clone();
        d.dedup();
        assert_eq!(d.len(), 10);
    }

    #[test]
    fn smoothing() {
        assert_eq!(smoothed_ends(&[4.0, 2.0, 1.0, 1.0], 2), Some((3.0, 1.0)));
        assert_eq!(smoothed_ends(&[], 2), None);
    }
}
