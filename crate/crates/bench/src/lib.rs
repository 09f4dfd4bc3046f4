//! Benchmark fixtures shared by the criterion suites.

use canopy::synthforest::{generate_scene, SceneSpec};
use canopy::PointCloud;

/// A synthetic scene of roughly `trees` trees on a proportionally sized plot.
pub fn scene(trees: usize, seed: u64) -> PointCloud {
    let side = 8.0 * (trees as f64).sqrt();
    let spec = SceneSpec {
        extent_m: [side, side],
        n_trees: trees,
        ..SceneSpec::mixed(seed)
    };
    generate_scene(&spec).expect("benchmark scene").cloud
}
