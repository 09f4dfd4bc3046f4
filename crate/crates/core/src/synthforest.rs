//! Deterministic procedural forest scenes and single trees with full
//! semantic and instance labels.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use std::path::Path;

use crate::cloudio::{load_cloud, save_cloud, PointCloud, SemanticClass};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeGroup {
    Conifer,
    Broadleaf,
}

impl TreeGroup {
    pub fn id(self) -> usize {
        match self {
            TreeGroup::Conifer => 0,
            TreeGroup::Broadleaf => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrownShape {
    Cone,
    Ellipsoid,
    Irregular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeArchetype {
    pub name: String,
    pub group: TreeGroup,
    pub species_id: u32,
    pub crown_shape: CrownShape,
    /// Total height, metres.
    pub height_range: (f64, f64),
    /// Crown length as a fraction of height.
    pub crown_ratio_range: (f64, f64),
    /// Crown radius as a fraction of height.
    pub crown_radius_range: (f64, f64),
    /// Branch points per m² of crown surface.
    pub branch_density: f64,
}

impl TreeArchetype {
    pub fn validate(&self) -> Result<()> {
        let ok_shape = match self.group {
            TreeGroup::Conifer => self.crown_shape == CrownShape::Cone,
            TreeGroup::Broadleaf => self.crown_shape != CrownShape::Cone,
        };
        if !ok_shape {
            return Err(Error::Input(format!(
                "{}: {:?} archetype cannot have a {:?} crown",
                self.name, self.group, self.crown_shape
            )));
        }
        let (lo, hi) = self.height_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Input(format!("{}: bad height range", self.name)));
        }
        let (clo, chi) = self.crown_ratio_range;
        if !(clo > 0.0 && chi >= clo && chi < 1.0) {
            return Err(Error::Input(format!("{}: bad crown ratio range", self.name)));
        }
        let (rlo, rhi) = self.crown_radius_range;
        if !(rlo > 0.0 && rhi >= rlo) {
            return Err(Error::Input(format!("{}: bad crown radius range", self.name)));
        }
        Ok(())
    }

    /// Draws concrete dimensions for one tree.
    pub fn sample_params<R: Rng + ?Sized>(&self, rng: &mut R) -> TreeParams {
        let u = |rng: &mut R, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
        let height = u(rng, self.height_range);
        let crown_ratio = u(rng, self.crown_ratio_range);
        let crown_radius = u(rng, self.crown_radius_range) * height;
        TreeParams {
            height,
            crown_length: crown_ratio * height,
            crown_radius,
            stem_radius: 0.03 + 0.006 * height,
        }
    }
}

/// Concrete dimensions of one generated tree, metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub height: f64,
    pub crown_length: f64,
    pub crown_radius: f64,
    pub stem_radius: f64,
}

impl TreeParams {
    pub fn crown_base(&self) -> f64 {
        self.height - self.crown_length
    }
}

fn archetype(
    name: &str,
    group: TreeGroup,
    species_id: u32,
    crown_shape: CrownShape,
    height_range: (f64, f64),
    crown_ratio_range: (f64, f64),
    crown_radius_range: (f64, f64),
    branch_density: f64,
) -> TreeArchetype {
    TreeArchetype {
        name: name.to_string(),
        group,
        species_id,
        crown_shape,
        height_range,
        crown_ratio_range,
        crown_radius_range,
        branch_density,
    }
}

/// The built-in species catalogue: four conifers followed by four
/// broadleaves. Species ids equal catalogue positions.
pub fn catalog() -> Vec<TreeArchetype> {
    use CrownShape::*;
    use TreeGroup::*;
    vec![
        archetype("spruce", Conifer, 0, Cone, (11.0, 16.0), (0.70, 0.85), (0.10, 0.13), 0.30),
        archetype("pine", Conifer, 1, Cone, (10.0, 15.0), (0.30, 0.45), (0.12, 0.16), 0.20),
        archetype("fir", Conifer, 2, Cone, (8.0, 12.0), (0.75, 0.90), (0.13, 0.17), 0.35),
        archetype("larch", Conifer, 3, Cone, (12.0, 17.0), (0.45, 0.60), (0.08, 0.11), 0.15),
        archetype("oak", Broadleaf, 4, Ellipsoid, (9.0, 13.0), (0.50, 0.65), (0.26, 0.33), 0.12),
        archetype("beech", Broadleaf, 5, Ellipsoid, (11.0, 16.0), (0.60, 0.75), (0.18, 0.24), 0.10),
        archetype("maple", Broadleaf, 6, Irregular, (7.0, 10.0), (0.55, 0.70), (0.25, 0.32), 0.12),
        archetype("birch", Broadleaf, 7, Irregular, (10.0, 14.0), (0.40, 0.55), (0.13, 0.18), 0.08),
    ]
}

const CROWN_SURFACE_FRACTION: f64 = 0.7;
const LOW_VEGETATION_MAX_HEIGHT: f64 = 0.5;
const LOW_VEGETATION_DENSITY_FRACTION: f64 = 0.1;
const TERRAIN_DENSITY_FRACTION: f64 = 0.5;
const STEM_STEP_M: f64 = 0.08;

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Per-class intensity and echo distributions.
fn attributes<R: Rng + ?Sized>(class: SemanticClass, rng: &mut R) -> (f64, f64) {
    let (mu, echo_range) = match class {
        SemanticClass::Terrain => (0.60, (0.7, 1.0)),
        SemanticClass::LowVegetation => (0.40, (0.5, 1.0)),
        SemanticClass::Stem => (0.55, (0.5, 1.0)),
        SemanticClass::Branch => (0.45, (0.3, 0.8)),
        SemanticClass::Crown => (0.35, (0.0, 0.4)),
    };
    let n = Normal::new(mu, 0.1).expect("valid normal");
    (clamp01(n.sample(rng)), rng.random_range(echo_range.0..echo_range.1))
}

fn push_point<R: Rng + ?Sized>(
    cloud: &mut PointCloud,
    rng: &mut R,
    xyz: [f64; 3],
    class: SemanticClass,
    instance: i64,
) {
    let (i, e) = attributes(class, rng);
    cloud.push(xyz, i, e, class, instance);
}

/// Crown radius at height `z`, or `None` outside the crown.
fn crown_radius_at(shape: CrownShape, p: &TreeParams, z: f64, lobes: &[f64; 3], theta: f64) -> Option<f64> {
    let base = p.crown_base();
    if z < base || z > p.height {
        return None;
    }
    let t = (z - base) / p.crown_length; // 0 at base, 1 at top
    let r = match shape {
        CrownShape::Cone => p.crown_radius * (1.0 - t),
        CrownShape::Ellipsoid | CrownShape::Irregular => {
            let s = 2.0 * t - 1.0;
            p.crown_radius * (1.0 - s * s).max(0.0).sqrt()
        }
    };
    let r = if shape == CrownShape::Irregular {
        r * (1.0 + lobes[0] * (3.0 * theta + lobes[1]).sin() * (PI * t * lobes[2]).cos().abs())
    } else {
        r
    };
    Some(r.max(0.0))
}

/// Generates one tree with its stem base at the origin. `density` is the
/// number of crown points per m² of crown surface.
pub fn generate_tree(
    archetype: &TreeArchetype,
    params: &TreeParams,
    density: f64,
    seed: u64,
) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = PointCloud::default();
    let jitter = Normal::new(0.0, 0.02).expect("valid normal");
    let lobes = [
        rng.random_range(0.15..0.3),
        rng.random_range(0.0..TAU),
        rng.random_range(1.0..3.0),
    ];
    let shape = archetype.crown_shape;

    // Stem: noisy cylinder surface from the ground to near the top.
    let stem_top = match shape {
        CrownShape::Cone => params.height * 0.97,
        _ => params.crown_base() + 0.4 * params.crown_length,
    };
    let stem_n = ((stem_top / STEM_STEP_M).ceil() as usize).max(2);
    for k in 0..stem_n {
        let z = stem_top * (k as f64 + rng.random_range(0.0..1.0)) / stem_n as f64;
        let taper = 1.0 - 0.6 * z / params.height;
        for _ in 0..2 {
            let th = rng.random_range(0.0..TAU);
            let r = params.stem_radius * taper;
            let xyz = [
                r * th.cos() + jitter.sample(&mut rng) * 0.3,
                r * th.sin() + jitter.sample(&mut rng) * 0.3,
                z,
            ];
            push_point(&mut cloud, &mut rng, xyz, SemanticClass::Stem, 0);
        }
    }

    // Crown surface area estimate for point budgets: lateral area of the
    // body of revolution, integrated numerically.
    let mut area = 0.0;
    let slices = 64;
    let dz = params.crown_length / slices as f64;
    let mut prev_r = crown_radius_at(shape, params, params.crown_base(), &[0.0; 3], 0.0).unwrap_or(0.0);
    for s in 1..=slices {
        let z = params.crown_base() + s as f64 * dz;
        let r = crown_radius_at(shape, params, z.min(params.height), &[0.0; 3], 0.0).unwrap_or(0.0);
        area += PI * (r + prev_r) * ((r - prev_r).powi(2) + dz * dz).sqrt();
        prev_r = r;
    }
    let crown_n = (area * density).round().max(8.0) as usize;
    let surface_n = (crown_n as f64 * CROWN_SURFACE_FRACTION).round() as usize;
    let volume_n = crown_n - surface_n;

    // Surface samples: z drawn proportionally to local radius.
    let r_max = params.crown_radius * if shape == CrownShape::Irregular { 1.3 } else { 1.0 };
    let mut placed = 0;
    let mut guard = 0;
    while placed < surface_n && guard < surface_n * 200 {
        guard += 1;
        let z = params.crown_base() + rng.random_range(0.0..1.0) * params.crown_length;
        let th = rng.random_range(0.0..TAU);
        let Some(r) = crown_radius_at(shape, params, z, &lobes, th) else { continue };
        if rng.random_range(0.0..r_max) > r.max(0.05 * r_max) {
            continue;
        }
        let rr = r * (1.0 + 0.05 * jitter.sample(&mut rng) / 0.02);
        let xyz = [rr * th.cos(), rr * th.sin(), z + jitter.sample(&mut rng)];
        push_point(&mut cloud, &mut rng, xyz, SemanticClass::Crown, 0);
        placed += 1;
    }
    // Interior samples by rejection.
    let mut placed = 0;
    let mut guard = 0;
    while placed < volume_n && guard < volume_n * 400 + 100 {
        guard += 1;
        let x = rng.random_range(-r_max..r_max);
        let y = rng.random_range(-r_max..r_max);
        let z = params.crown_base() + rng.random_range(0.0..1.0) * params.crown_length;
        let th = y.atan2(x);
        let Some(r) = crown_radius_at(shape, params, z, &lobes, th) else { continue };
        if (x * x + y * y).sqrt() <= r {
            push_point(&mut cloud, &mut rng, [x, y, z], SemanticClass::Crown, 0);
            placed += 1;
        }
    }

    // Branches: radial segments leaving the stem inside the crown.
    let n_branches = ((archetype.branch_density * area).round() as usize).max(3);
    let branch_step = 0.06;
    for _ in 0..n_branches {
        let z0 = params.crown_base() + rng.random_range(0.0..0.85) * params.crown_length;
        let z0 = z0.min(stem_top);
        let th = rng.random_range(0.0..TAU);
        let reach = crown_radius_at(shape, params, z0, &lobes, th).unwrap_or(0.0) * rng.random_range(0.5..0.85);
        let rise = match shape {
            CrownShape::Cone => -0.15,
            _ => 0.45,
        };
        let steps = (reach / branch_step).ceil() as usize;
        for k in 0..steps {
            let d = params.stem_radius + k as f64 * branch_step;
            let xyz = [
                d * th.cos() + jitter.sample(&mut rng),
                d * th.sin() + jitter.sample(&mut rng),
                z0 + rise * d + jitter.sample(&mut rng),
            ];
            push_point(&mut cloud, &mut rng, xyz, SemanticClass::Branch, 0);
        }
    }
    cloud
}

/// Full description of a synthetic scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub extent_m: [f64; 2],
    pub n_trees: usize,
    pub archetypes: Vec<TreeArchetype>,
    /// Sampling weight of each archetype.
    pub archetype_mix: Vec<f64>,
    /// Allowed crown interpenetration: trees may stand as close as
    /// `(1 − overlap_factor)·(R_i + R_j)`.
    pub overlap_factor: f64,
    /// Crown points per m² of crown surface; terrain and low vegetation are
    /// sampled at fixed fractions of it per m² of ground.
    pub point_density: f64,
    pub terrain_roughness: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.archetypes.len() != self.archetype_mix.len() {
            return Err(Error::Input("archetype_mix length differs from archetypes".into()));
        }
        if self.archetype_mix.iter().any(|&w| !(w >= 0.0)) || self.archetype_mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Input("archetype weights must be nonnegative with positive sum".into()));
        }
        for a in &self.archetypes {
            a.validate()?;
        }
        if !(self.extent_m[0] > 0.0 && self.extent_m[1] > 0.0) {
            return Err(Error::Input("scene extent must be positive".into()));
        }
        if !(self.overlap_factor >= 0.0 && self.overlap_factor < 1.0) {
            return Err(Error::Input("overlap_factor must lie in [0, 1)".into()));
        }
        if !(self.point_density > 0.0) || !(self.terrain_roughness >= 0.0) {
            return Err(Error::Input("density must be positive and roughness nonnegative".into()));
        }
        Ok(())
    }

    /// Labeled source domain: dense conifer stands.
    pub fn source(seed: u64) -> Self {
        let cat = catalog();
        SceneSpec {
            extent_m: [20.0, 20.0],
            n_trees: 9,
            archetype_mix: cat.iter().map(|a| if a.group == TreeGroup::Conifer { 1.0 } else { 0.0 }).collect(),
            archetypes: cat,
            overlap_factor: 0.3,
            point_density: 40.0,
            terrain_roughness: 0.5,
            seed,
        }
    }

    /// Target domain: broadleaf stands at half the source density.
    pub fn target(seed: u64) -> Self {
        let cat = catalog();
        SceneSpec {
            extent_m: [20.0, 20.0],
            n_trees: 6,
            archetype_mix: cat
                .iter()
                .map(|a| if a.crown_shape == CrownShape::Ellipsoid { 1.0 } else { 0.0 })
                .collect(),
            archetypes: cat,
            overlap_factor: 0.3,
            point_density: 20.0,
            terrain_roughness: 0.5,
            seed,
        }
    }

    /// Mixed stand of every catalogue species.
    pub fn mixed(seed: u64) -> Self {
        let cat = catalog();
        SceneSpec {
            extent_m: [20.0, 20.0],
            n_trees: 7,
            archetype_mix: vec![1.0; cat.len()],
            archetypes: cat,
            overlap_factor: 0.3,
            point_density: 30.0,
            terrain_roughness: 0.5,
            seed,
        }
    }
}

/// Smooth terrain height field built from a few random plane waves.
#[derive(Debug, Clone)]
struct Terrain {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Terrain {
    fn new<R: Rng + ?Sized>(roughness: f64, rng: &mut R) -> Self {
        let waves = (0..4)
            .map(|_| {
                let k = rng.random_range(0.05..0.3);
                let dir = rng.random_range(0.0..TAU);
                (k * dir.cos(), k * dir.sin(), rng.random_range(0.0..TAU), roughness * rng.random_range(0.2..0.5))
            })
            .collect();
        Terrain { waves }
    }

    fn height(&self, x: f64, y: f64) -> f64 {
        self.waves.iter().map(|(kx, ky, ph, a)| a * (kx * x + ky * y + ph).sin()).sum()
    }
}

/// A placed tree in a generated scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedTree {
    pub instance: i64,
    pub species_id: u32,
    pub group: TreeGroup,
    pub base: [f64; 3],
    pub params: TreeParams,
}

/// Generated scene together with its tree inventory.
#[derive(Debug, Clone)]
pub struct Scene {
    pub cloud: PointCloud,
    pub trees: Vec<PlacedTree>,
}

fn pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

const PLACEMENT_ATTEMPTS: usize = 20_000;

/// Generates a labeled scene: terrain, low vegetation and `n_trees` trees
/// with instance ids `0..n_trees` in placement order.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let terrain = Terrain::new(spec.terrain_roughness, &mut rng);
    let [ex, ey] = spec.extent_m;

    let mut trees: Vec<PlacedTree> = Vec::with_capacity(spec.n_trees);
    for id in 0..spec.n_trees {
        let a = &spec.archetypes[pick(&spec.archetype_mix, &mut rng)];
        let params = a.sample_params(&mut rng);
        let margin = (0.5 * params.crown_radius).min(0.25 * ex.min(ey));
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let x = rng.random_range(margin..ex - margin);
            let y = rng.random_range(margin..ey - margin);
            let ok = trees.iter().all(|t| {
                let d = ((t.base[0] - x).powi(2) + (t.base[1] - y).powi(2)).sqrt();
                let min = ((1.0 - spec.overlap_factor) * (t.params.crown_radius + params.crown_radius)).max(1.0);
                d >= min
            });
            if ok {
                placed = Some([x, y, terrain.height(x, y)]);
                break;
            }
        }
        let base = placed.ok_or_else(|| {
            Error::Placement(format!(
                "no room for tree {id} of {} in a {ex}x{ey} m scene",
                spec.n_trees
            ))
        })?;
        trees.push(PlacedTree {
            instance: id as i64,
            species_id: a.species_id,
            group: a.group,
            base,
            params,
        });
    }

    let mut cloud = PointCloud::default();
    let jitter = Normal::new(0.0, 0.02).expect("valid normal");

    let n_terrain = (ex * ey * spec.point_density * TERRAIN_DENSITY_FRACTION).round() as usize;
    for _ in 0..n_terrain {
        let x = rng.random_range(0.0..ex);
        let y = rng.random_range(0.0..ey);
        let z = terrain.height(x, y) + jitter.sample(&mut rng);
        push_point(&mut cloud, &mut rng, [x, y, z], SemanticClass::Terrain, -1);
    }

    // Low vegetation grows in patches covering about half the ground.
    let patches: Vec<[f64; 3]> = (0..6)
        .map(|_| [rng.random_range(0.0..ex), rng.random_range(0.0..ey), rng.random_range(2.0..5.0)])
        .collect();
    let n_low = (ex * ey * spec.point_density * LOW_VEGETATION_DENSITY_FRACTION).round() as usize;
    let mut placed = 0;
    let mut guard = 0;
    while placed < n_low && guard < n_low * 50 {
        guard += 1;
        let x = rng.random_range(0.0..ex);
        let y = rng.random_range(0.0..ey);
        if !patches.iter().any(|p| (p[0] - x).powi(2) + (p[1] - y).powi(2) < p[2] * p[2]) {
            continue;
        }
        let z = terrain.height(x, y) + rng.random_range(0.05..LOW_VEGETATION_MAX_HEIGHT);
        push_point(&mut cloud, &mut rng, [x, y, z], SemanticClass::LowVegetation, -1);
        placed += 1;
    }

    for t in &trees {
        let a = spec
            .archetypes
            .iter()
            .find(|a| a.species_id == t.species_id)
            .expect("placed tree species comes from the spec");
        let tree_seed: u64 = rng.random();
        let tree = generate_tree(a, &t.params, spec.point_density, tree_seed);
        for i in 0..tree.len() {
            let p = tree.xyz[i];
            cloud.xyz.push([p[0] + t.base[0], p[1] + t.base[1], p[2] + t.base[2]]);
            cloud.intensity.push(tree.intensity[i]);
            cloud.echo.push(tree.echo[i]);
            cloud.semantic.push(tree.semantic[i]);
            cloud.instance.push(t.instance);
            cloud.labeled.push(true);
        }
    }
    Ok(Scene { cloud, trees })
}

/// One tree of a classification dataset.
#[derive(Debug, Clone)]
pub struct TreeSample {
    pub tree_id: usize,
    pub cloud: PointCloud,
    pub group: TreeGroup,
    pub species_id: u32,
}

/// Per-tree acquisition variation applied to classification datasets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanNuisance {
    /// Crown density is scaled by a factor drawn from `[1 − j, 1 + j]`.
    pub density_jitter: f64,
    /// Random azimuth of the whole tree.
    pub rotate: bool,
    /// Probability of dropping each point on the far side of a random
    /// vertical plane through the stem (one-sided scanning shadow).
    pub occlusion: f64,
}

impl ScanNuisance {
    pub fn none() -> Self {
        ScanNuisance {
            density_jitter: 0.0,
            rotate: false,
            occlusion: 0.0,
        }
    }
}

impl Default for ScanNuisance {
    fn default() -> Self {
        ScanNuisance {
            density_jitter: 0.5,
            rotate: true,
            occlusion: 0.6,
        }
    }
}

fn apply_nuisance<R: Rng + ?Sized>(cloud: PointCloud, n: &ScanNuisance, rng: &mut R) -> PointCloud {
    let mut cloud = cloud;
    if n.rotate {
        let (sin, cos) = rng.random_range(0.0..TAU).sin_cos();
        for p in &mut cloud.xyz {
            *p = [cos * p[0] - sin * p[1], sin * p[0] + cos * p[1], p[2]];
        }
    }
    if n.occlusion > 0.0 {
        let (sin, cos) = rng.random_range(0.0..TAU).sin_cos();
        let keep: Vec<usize> = (0..cloud.len())
            .filter(|&i| {
                let p = cloud.xyz[i];
                cos * p[0] + sin * p[1] <= 0.0 || rng.random::<f64>() >= n.occlusion
            })
            .collect();
        if !keep.is_empty() {
            cloud = cloud.select(&keep);
        }
    }
    cloud
}

/// Generates `per_species` trees for each listed archetype, subsampled to at
/// most `max_points` points each.
pub fn generate_tree_dataset(
    archetypes: &[TreeArchetype],
    per_species: usize,
    density: f64,
    max_points: usize,
    seed: u64,
) -> Vec<TreeSample> {
    generate_tree_dataset_with(archetypes, per_species, density, max_points, &ScanNuisance::none(), seed)
}

/// [`generate_tree_dataset`] with per-tree acquisition variation.
pub fn generate_tree_dataset_with(
    archetypes: &[TreeArchetype],
    per_species: usize,
    density: f64,
    max_points: usize,
    nuisance: &ScanNuisance,
    seed: u64,
) -> Vec<TreeSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(archetypes.len() * per_species);
    for a in archetypes {
        for _ in 0..per_species {
            let params = a.sample_params(&mut rng);
            let tree_seed: u64 = rng.random();
            let j = nuisance.density_jitter.clamp(0.0, 0.95);
            let d = if j > 0.0 { density * rng.random_range(1.0 - j..1.0 + j) } else { density };
            let cloud = generate_tree(a, &params, d, tree_seed);
            let mut cloud = apply_nuisance(cloud, nuisance, &mut rng);
            if cloud.len() > max_points {
                let mut idx = rand::seq::index::sample(&mut rng, cloud.len(), max_points).into_vec();
                idx.sort_unstable();
                cloud = cloud.select(&idx);
            }
            out.push(TreeSample {
                tree_id: out.len(),
                cloud,
                group: a.group,
                species_id: a.species_id,
            });
        }
    }
    out
}

/// Manifest entry of a tree dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeRecord {
    pub tree_id: usize,
    pub group: TreeGroup,
    pub species: u32,
    pub file: String,
}

pub const TREE_MANIFEST: &str = "trees.json";

/// Writes one CSV per tree plus `trees.json` into `dir`.
pub fn save_tree_dataset(trees: &[TreeSample], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Vec::with_capacity(trees.len());
    for t in trees {
        let file = format!("tree_{:05}.csv", t.tree_id);
        save_cloud(&t.cloud, &dir.join(&file))?;
        manifest.push(TreeRecord {
            tree_id: t.tree_id,
            group: t.group,
            species: t.species_id,
            file,
        });
    }
    let path = dir.join(TREE_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Reads a directory written by [`save_tree_dataset`], in manifest order.
pub fn load_tree_dataset(dir: &Path) -> Result<Vec<TreeSample>> {
    let path = dir.join(TREE_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Vec<TreeRecord> = serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    manifest
        .into_iter()
        .map(|r| {
            Ok(TreeSample {
                tree_id: r.tree_id,
                cloud: load_cloud(&dir.join(&r.file))?,
                group: r.group,
                species_id: r.species,
            })
        })
        .collect()
}
