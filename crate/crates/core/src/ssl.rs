//! Contrastive self-supervised pretraining of the encoder.
//!
//! Two augmented views are drawn from the same cloud; points whose source
//! positions coincide (within `match_radius`) form positive pairs, and every
//! other point of the batch serves as a negative.

use std::collections::HashMap;
use std::f64::consts::TAU;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cloudio::PointCloud;
use crate::encoder::{point_features, EncoderModel};
use crate::error::{Error, Result};
use crate::tensorcore::{dot, infonce_loss, LrSchedule, Matrix, Sgd, SgdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Random rotation about the vertical axis over the full circle.
    pub rotate: bool,
    pub scale: (f64, f64),
    pub jitter_sigma: f64,
    /// Range of the fraction of points dropped independently per view.
    pub dropout: (f64, f64),
    /// Range of the fraction of points removed from view b by spherical
    /// masks.
    pub mask: (f64, f64),
    pub mask_radius: f64,
    pub match_radius: f64,
    pub min_matches: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotate: true,
            scale: (0.9, 1.1),
            jitter_sigma: 0.01,
            dropout: (0.0, 0.3),
            mask: (0.0, 0.3),
            mask_radius: 1.0,
            match_radius: 0.05,
            min_matches: 64,
        }
    }
}

impl AugmentConfig {
    /// No geometric change, no dropout, no masking.
    pub fn identity() -> Self {
        AugmentConfig {
            rotate: false,
            scale: (1.0, 1.0),
            jitter_sigma: 0.0,
            dropout: (0.0, 0.0),
            mask: (0.0, 0.0),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let frac = |r: (f64, f64)| (0.0..=1.0).contains(&r.0) && (0.0..=1.0).contains(&r.1) && r.0 <= r.1;
        if !frac(self.dropout) || !frac(self.mask) {
            return Err(Error::Config("dropout and mask fractions must be ordered ranges in [0, 1]".into()));
        }
        if !(self.scale.0 > 0.0 && self.scale.0 <= self.scale.1) {
            return Err(Error::Config("scale range must be positive and ordered".into()));
        }
        if !(self.match_radius > 0.0) || self.jitter_sigma < 0.0 || !(self.mask_radius > 0.0) {
            return Err(Error::Config("radii must be positive and jitter non-negative".into()));
        }
        Ok(())
    }
}

/// Two views of one cloud and their positive pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view_a: PointCloud,
    pub view_b: PointCloud,
    /// (index in a, index in b).
    pub matches: Vec<(usize, usize)>,
    /// Source index of every point of each view.
    pub source_a: Vec<usize>,
    pub source_b: Vec<usize>,
    pub seed: u64,
}

fn augment<R: Rng + ?Sized>(
    cloud: &PointCloud,
    keep: &[usize],
    cfg: &AugmentConfig,
    center: [f64; 2],
    rng: &mut R,
) -> PointCloud {
    let mut v = cloud.select(keep);
    let theta = if cfg.rotate { rng.random_range(0.0..TAU) } else { 0.0 };
    let s = if cfg.scale.0 < cfg.scale.1 {
        rng.random_range(cfg.scale.0..cfg.scale.1)
    } else {
        cfg.scale.0
    };
    let (sin, cos) = theta.sin_cos();
    let noise = Normal::new(0.0, cfg.jitter_sigma.max(0.0)).expect("non-negative sigma");
    for p in &mut v.xyz {
        let x = p[0] - center[0];
        let y = p[1] - center[1];
        let mut q = [
            center[0] + s * (cos * x - sin * y),
            center[1] + s * (sin * x + cos * y),
            s * p[2],
        ];
        if cfg.jitter_sigma > 0.0 {
            for c in &mut q {
                *c += noise.sample(rng);
            }
        }
        *p = q;
    }
    v
}

fn frac<R: Rng + ?Sized>(r: (f64, f64), rng: &mut R) -> f64 {
    if r.0 < r.1 {
        rng.random_range(r.0..r.1)
    } else {
        r.0
    }
}

fn dropout<R: Rng + ?Sized>(idx: Vec<usize>, p: f64, rng: &mut R) -> Vec<usize> {
    if p <= 0.0 {
        return idx;
    }
    idx.into_iter().filter(|_| rng.random::<f64>() >= p).collect()
}

/// Removes spheres centred on random surviving points until at least
/// `fraction` of the points are gone.
fn mask_regions<R: Rng + ?Sized>(cloud: &PointCloud, idx: Vec<usize>, fraction: f64, radius: f64, rng: &mut R) -> Vec<usize> {
    let target = (fraction * idx.len() as f64).floor() as usize;
    let mut alive = idx;
    let start = alive.len();
    let r2 = radius * radius;
    while start - alive.len() < target && !alive.is_empty() {
        let c = cloud.xyz[alive[rng.random_range(0..alive.len())]];
        alive.retain(|&i| {
            let p = cloud.xyz[i];
            (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2) > r2
        });
    }
    alive
}

fn cell_key(p: &[f64; 3], cell: f64) -> [i64; 3] {
    [
        (p[0] / cell).floor() as i64,
        (p[1] / cell).floor() as i64,
        (p[2] / cell).floor() as i64,
    ]
}

/// Nearest neighbour in source coordinates within `radius`, for each point
/// of view a.
fn match_views(cloud: &PointCloud, src_a: &[usize], src_b: &[usize], radius: f64) -> Vec<(usize, usize)> {
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (j, &s) in src_b.iter().enumerate() {
        grid.entry(cell_key(&cloud.xyz[s], radius)).or_default().push(j);
    }
    let r2 = radius * radius;
    let mut out = Vec::new();
    for (i, &s) in src_a.iter().enumerate() {
        let p = cloud.xyz[s];
        let k = cell_key(&p, radius);
        let mut best: Option<(f64, usize)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(cands) = grid.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) else {
                        continue;
                    };
                    for &j in cands {
                        let q = cloud.xyz[src_b[j]];
                        let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                        if d <= r2 && best.is_none_or(|(bd, bj)| d < bd || (d == bd && j < bj)) {
                            best = Some((d, j));
                        }
                    }
                }
            }
        }
        if let Some((_, j)) = best {
            out.push((i, j));
        }
    }
    out
}

/// Two independently augmented views; spherical masking applies to view b
/// only.
pub fn make_views(cloud: &PointCloud, cfg: &AugmentConfig, seed: u64) -> Result<ViewPair> {
    if cloud.is_empty() {
        return Err(Error::Input("cannot make views of an empty cloud".into()));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cloud.len() as f64;
    let mut center = [0.0; 2];
    for p in &cloud.xyz {
        center[0] += p[0] / n;
        center[1] += p[1] / n;
    }
    let all: Vec<usize> = (0..cloud.len()).collect();
    let pa = frac(cfg.dropout, &mut rng);
    let source_a = dropout(all.clone(), pa, &mut rng);
    let pb = frac(cfg.dropout, &mut rng);
    let mut source_b = dropout(all, pb, &mut rng);
    let pm = frac(cfg.mask, &mut rng);
    if pm > 0.0 {
        source_b = mask_regions(cloud, source_b, pm, cfg.mask_radius, &mut rng);
    }
    let view_a = augment(cloud, &source_a, cfg, center, &mut rng);
    let view_b = augment(cloud, &source_b, cfg, center, &mut rng);
    let matches = match_views(cloud, &source_a, &source_b, cfg.match_radius);
    if matches.len() < cfg.min_matches {
        return Err(Error::InsufficientOverlap {
            found: matches.len(),
            required: cfg.min_matches,
        });
    }
    Ok(ViewPair {
        view_a,
        view_b,
        matches,
        source_a,
        source_b,
        seed,
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = (dot(a, a) * dot(b, b)).sqrt();
    if d == 0.0 {
        return 0.0;
    }
    (dot(a, b) / d).clamp(-1.0, 1.0)
}

/// Cap on positives scored per view pair by [`similarity_stats`].
pub const MAX_STAT_PAIRS: usize = 1024;

/// Mean cosine similarity of matched pairs and of an equal number of
/// uniformly drawn non-matching pairs, for an arbitrary embedding function.
pub fn similarity_stats_with(
    pairs: &[ViewPair],
    mut embed: impl FnMut(&PointCloud) -> Result<Matrix>,
) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::Input("no view pairs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let (mut pos, mut neg, mut np, mut nn) = (0.0, 0.0, 0usize, 0usize);
    for vp in pairs {
        let za = embed(&vp.view_a)?;
        let zb = embed(&vp.view_b)?;
        let chosen: Vec<(usize, usize)> = if vp.matches.len() > MAX_STAT_PAIRS {
            let mut k = index::sample(&mut rng, vp.matches.len(), MAX_STAT_PAIRS).into_vec();
            k.sort_unstable();
            k.into_iter().map(|j| vp.matches[j]).collect()
        } else {
            vp.matches.clone()
        };
        let matched: HashMap<usize, usize> = vp.matches.iter().copied().collect();
        for &(i, j) in &chosen {
            pos += cosine(za.row(i), zb.row(j));
            np += 1;
        }
        if vp.view_b.len() < 2 {
            continue;
        }
        for _ in 0..chosen.len() {
            let i = rng.random_range(0..vp.view_a.len());
            let mut j = rng.random_range(0..vp.view_b.len());
            while matched.get(&i) == Some(&j) {
                j = rng.random_range(0..vp.view_b.len());
            }
            neg += cosine(za.row(i), zb.row(j));
            nn += 1;
        }
    }
    Ok((pos / np.max(1) as f64, neg / nn.max(1) as f64))
}

pub fn similarity_stats(model: &EncoderModel, pairs: &[ViewPair]) -> Result<(f64, f64)> {
    similarity_stats_with(pairs, |c| model.encode(c))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub tau: f64,
    /// Positive pairs per step; the rest of the batch are negatives.
    pub pairs_per_step: usize,
    pub schedule: LrSchedule,
    pub sgd: SgdConfig,
    pub augment: AugmentConfig,
    /// View pairs generated per scene up front and cycled through.
    pub views_per_scene: usize,
    /// Side of the square xy crop each view pair is drawn from, metres.
    pub crop_m: Option<f64>,
    /// Similarity monitoring cadence in steps (0 disables).
    pub eval_every: usize,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn new(steps: usize) -> Self {
        PretrainConfig {
            steps,
            tau: 0.4,
            pairs_per_step: 1024,
            schedule: LrSchedule::one_cycle(steps),
            sgd: SgdConfig::pretrain(),
            augment: AugmentConfig::default(),
            views_per_scene: 4,
            crop_m: Some(10.0),
            eval_every: (steps / 20).max(1),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainHistory {
    pub loss: Vec<f64>,
    /// (step, mean positive similarity, mean negative similarity).
    pub similarity: Vec<(usize, f64, f64)>,
}

impl PretrainHistory {
    /// `step,loss,pos_sim,neg_sim`; similarity columns are blank between
    /// evaluations.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,pos_sim,neg_sim\n");
        let mut sims = self.similarity.iter().peekable();
        for (i, l) in self.loss.iter().enumerate() {
            let step = i + 1;
            match sims.peek() {
                Some(&&(k, p, n)) if k == step => {
                    s.push_str(&format!("{step},{l:.6},{p:.6},{n:.6}\n"));
                    sims.next();
                }
                _ => s.push_str(&format!("{step},{l:.6},,\n")),
            }
        }
        s
    }

    /// Fraction of consecutive evaluations where pos − neg did not shrink.
    pub fn gap_nondecreasing_fraction(&self) -> f64 {
        let gaps: Vec<f64> = self.similarity.iter().map(|s| s.1 - s.2).collect();
        if gaps.len() < 2 {
            return 1.0;
        }
        let ok = gaps.windows(2).filter(|w| w[1] >= w[0]).count();
        ok as f64 / (gaps.len() - 1) as f64
    }
}

fn crop<R: Rng + ?Sized>(cloud: &PointCloud, size: f64, rng: &mut R) -> PointCloud {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &cloud.xyz {
        for c in 0..2 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    let mut origin = [0.0; 2];
    for c in 0..2 {
        let span = hi[c] - lo[c] - size;
        origin[c] = if span > 0.0 { lo[c] + rng.random_range(0.0..span) } else { lo[c] };
    }
    let keep: Vec<usize> = (0..cloud.len())
        .filter(|&i| {
            let p = cloud.xyz[i];
            p[0] >= origin[0] && p[0] < origin[0] + size && p[1] >= origin[1] && p[1] < origin[1] + size
        })
        .collect();
    cloud.select(&keep)
}

/// View pairs with their encoder input features.
pub struct PreparedPair {
    pub pair: ViewPair,
    pub features_a: Matrix,
    pub features_b: Matrix,
}

/// Builds `views_per_scene` pairs per scene, each from an optional crop.
pub fn build_pairs(scenes: &[PointCloud], cfg: &PretrainConfig, scales: &[f64], seed: u64) -> Result<Vec<PreparedPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jobs = Vec::new();
    for scene in scenes {
        for _ in 0..cfg.views_per_scene {
            let src = match cfg.crop_m {
                Some(s) => crop(scene, s, &mut rng),
                None => scene.clone(),
            };
            jobs.push((src, rng.random::<u64>()));
        }
    }
    use rayon::prelude::*;
    jobs.into_par_iter()
        .map(|(src, s)| {
            let pair = make_views(&src, &cfg.augment, s)?;
            Ok(PreparedPair {
                features_a: point_features(&pair.view_a, scales)?,
                features_b: point_features(&pair.view_b, scales)?,
                pair,
            })
        })
        .collect()
}

fn stats_prepared(model: &EncoderModel, pairs: &[PreparedPair]) -> Result<(f64, f64)> {
    let mut k = 0;
    let views: Vec<ViewPair> = pairs.iter().map(|p| p.pair.clone()).collect();
    // Embeddings come from the cached features, in view order a, b, a, b...
    let feats: Vec<&Matrix> = pairs.iter().flat_map(|p| [&p.features_a, &p.features_b]).collect();
    similarity_stats_with(&views, |_| {
        let f = feats[k];
        k += 1;
        model.embed(f)
    })
}

/// InfoNCE pretraining. On a non-finite loss the model is restored to its
/// state before the failing step and the error is returned.
pub fn pretrain(
    model: &mut EncoderModel,
    scenes: &[PointCloud],
    held_out: &[PointCloud],
    cfg: &PretrainConfig,
) -> Result<PretrainHistory> {
    if scenes.is_empty() {
        return Err(Error::Input("pretraining needs at least one scene".into()));
    }
    let mut history = PretrainHistory::default();
    if cfg.steps == 0 {
        return Ok(history);
    }
    let schedule = cfg.schedule.with_total_steps(cfg.steps);
    let pairs = build_pairs(scenes, cfg, &model.config.scales, cfg.seed)?;
    let monitor = if held_out.is_empty() || cfg.eval_every == 0 {
        Vec::new()
    } else {
        let mut m = cfg.clone();
        m.views_per_scene = 1;
        build_pairs(held_out, &m, &model.config.scales, cfg.seed ^ 0x9e37_79b9)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = Sgd::new(cfg.sgd);
    let mut last_good = model.clone();
    for step in 0..cfg.steps {
        let pp = &pairs[step % pairs.len()];
        let m = pp.pair.matches.len();
        let pick: Vec<usize> = if m > cfg.pairs_per_step {
            let mut k = index::sample(&mut rng, m, cfg.pairs_per_step).into_vec();
            k.sort_unstable();
            k
        } else {
            (0..m).collect()
        };
        let rows_a: Vec<usize> = pick.iter().map(|&k| pp.pair.matches[k].0).collect();
        let rows_b: Vec<usize> = pick.iter().map(|&k| pp.pair.matches[k].1).collect();
        let x = stack(&pp.features_a.select_rows(&rows_a), &pp.features_b.select_rows(&rows_b));
        let z = model.embed_train(&x)?;
        let n = pick.len();
        let za = z.select_rows(&(0..n).collect::<Vec<_>>());
        let zb = z.select_rows(&(n..2 * n).collect::<Vec<_>>());
        let out = infonce_loss(&za, &zb, cfg.tau)?;
        if !out.loss.is_finite() {
            *model = last_good;
            return Err(Error::NonFinite(format!("contrastive loss at step {step}")));
        }
        model.backward(&stack(&out.grad_a, &out.grad_b))?;
        let lr = schedule.lr_at(step)?;
        if let Err(e) = opt.step(&mut model.net.params_mut(), lr) {
            *model = last_good;
            return Err(e);
        }
        history.loss.push(out.loss);
        if !monitor.is_empty() && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps) {
            let (p, q) = stats_prepared(model, &monitor)?;
            history.similarity.push((step + 1, p, q));
        }
        last_good.clone_from(model);
    }
    Ok(history)
}

fn stack(a: &Matrix, b: &Matrix) -> Matrix {
    let mut data = a.as_slice().to_vec();
    data.extend_from_slice(b.as_slice());
    Matrix::from_vec(a.rows() + b.rows(), a.cols(), data).expect("equal widths")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloudio::SemanticClass;
    use crate::encoder::EncoderConfig;

    fn cloud(n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut c = PointCloud::default();
        for _ in 0..n {
            c.push(
                [rng.random_range(0.0..6.0), rng.random_range(0.0..6.0), rng.random_range(0.0..4.0)],
                rng.random(),
                rng.random(),
                SemanticClass::Terrain,
                -1,
            );
        }
        c
    }

    #[test]
    fn identity_views_match_everything() {
        let c = cloud(200);
        let v = make_views(&c, &AugmentConfig::identity(), 1).unwrap();
        assert_eq!(v.view_a, c);
        assert_eq!(v.matches, (0..200).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn full_dropout_fails() {
        let mut cfg = AugmentConfig::identity();
        cfg.dropout = (1.0, 1.0);
        assert!(matches!(
            make_views(&cloud(200), &cfg, 1),
            Err(Error::InsufficientOverlap { found: 0, .. })
        ));
    }

    #[test]
    fn rotated_matches_close_in_source() {
        let c = cloud(500);
        let cfg = AugmentConfig::default();
        let v = make_views(&c, &cfg, 3).unwrap();
        assert!(v.matches.len() >= 64);
        for &(i, j) in &v.matches {
            let p = c.xyz[v.source_a[i]];
            let q = c.xyz[v.source_b[j]];
            let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
            assert!(d <= cfg.match_radius);
        }
        assert_eq!(make_views(&c, &cfg, 3).unwrap(), v);
    }

    #[test]
    fn duplicate_view_similarity_is_one() {
        let c = cloud(100);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = EncoderModel::new(EncoderConfig::default(), &mut rng).unwrap();
        let v = make_views(&c, &AugmentConfig::identity(), 0).unwrap();
        let (pos, _) = similarity_stats(&m, &[v.clone()]).unwrap();
        assert_eq!(pos, 1.0);
        let (pos, neg) = similarity_stats_with(&[v], |c| Matrix::from_rows(&c.xyz)).unwrap();
        assert!((pos - 1.0).abs() < 1e-12);
        assert!(neg < pos);
    }

    #[test]
    fn zero_steps_leave_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = EncoderModel::new(EncoderConfig::default(), &mut rng).unwrap();
        let before = m.clone();
        let h = pretrain(&mut m, &[cloud(300)], &[], &PretrainConfig::new(0)).unwrap();
        assert!(h.loss.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn history_csv_shape() {
        let h = PretrainHistory {
            loss: vec![2.0, 1.5],
            similarity: vec![(2, 0.5, 0.1)],
        };
        assert_eq!(h.to_csv(), "step,loss,pos_sim,neg_sim\n1,2.000000,,\n2,1.500000,0.500000,0.100000\n");
    }
}
