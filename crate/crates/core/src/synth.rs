//! Synthetic fragment pairs with planted ground truth, and the degradation
//! protocols (noise, abrasion, downsampling).
//!
//! The base surface is a heightfield built from Gaussian bumps of both signs,
//! which gives the patches concave and convex structure. Surface A samples
//! the full extent on a jittered lattice; surface B independently re-samples
//! the trailing `overlap_fraction` of it along x and is then moved by the
//! planted transform, so the truth maps A's frame onto B's.

use std::fmt::Write as _;

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::mix_seed;
use crate::pointcloud::{
    apply_transform, estimate_normals_like, Point, PointCloud, RigidTransform,
};

/// Neighbourhood used when normals are re-estimated after perturbation.
pub const NOISY_NORMAL_NEIGHBORS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Extent along x.
    pub width: f64,
    /// Extent along y.
    pub height: f64,
    /// Lattice spacing; the resolution of the result is close to this.
    pub spacing: f64,
    /// Uniform jitter as a fraction of the spacing (per axis, ± half of it).
    pub jitter: f64,
    pub bump_count: usize,
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    pub bump_sigma_min: f64,
    pub bump_sigma_max: f64,
    pub overlap_fraction: f64,
    pub transform: RigidTransform,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 70.0,
            height: 70.0,
            spacing: 1.0,
            jitter: 0.5,
            bump_count: 40,
            amplitude_min: 1.5,
            amplitude_max: 4.0,
            bump_sigma_min: 2.5,
            bump_sigma_max: 5.0,
            overlap_fraction: 1.0,
            transform: RigidTransform::from_axis_angle(
                &Vector3::new(0.3, -0.4, 1.0),
                0.9,
                Vector3::new(12.0, -7.0, 5.0),
            ),
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.width > 0.0 && self.height > 0.0 && self.spacing > 0.0) {
            return bad("extent and spacing must be positive");
        }
        if !(self.overlap_fraction > 0.0 && self.overlap_fraction <= 1.0) {
            return bad("overlap_fraction must be in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return bad("jitter must be in [0, 1)");
        }
        if self.amplitude_min > self.amplitude_max
            || self.bump_sigma_min > self.bump_sigma_max
            || self.bump_sigma_min <= 0.0
        {
            return bad("bump ranges must be ordered and sigmas positive");
        }
        if !self.transform.is_valid(1e-9) {
            return bad("planted transform is not a rotation");
        }
        Ok(())
    }

    /// `key = value` lines (the transform is written separately as a matrix).
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let pairs: [(&str, String); 11] = [
            ("width", self.width.to_string()),
            ("height", self.height.to_string()),
            ("spacing", self.spacing.to_string()),
            ("jitter", self.jitter.to_string()),
            ("bump_count", self.bump_count.to_string()),
            ("amplitude_min", self.amplitude_min.to_string()),
            ("amplitude_max", self.amplitude_max.to_string()),
            ("bump_sigma_min", self.bump_sigma_min.to_string()),
            ("bump_sigma_max", self.bump_sigma_max.to_string()),
            ("overlap_fraction", self.overlap_fraction.to_string()),
            ("seed", self.seed.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Bump {
    x: f64,
    y: f64,
    amplitude: f64,
    sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heightfield {
    bumps: Vec<Bump>,
}

impl Heightfield {
    fn random(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let margin = config.bump_sigma_max;
        let bumps = (0..config.bump_count)
            .map(|_| {
                let magnitude = rng.random_range(config.amplitude_min..=config.amplitude_max);
                Bump {
                    x: rng.random_range(-margin..config.width + margin),
                    y: rng.random_range(-margin..config.height + margin),
                    amplitude: if rng.random_bool(0.5) {
                        magnitude
                    } else {
                        -magnitude
                    },
                    sigma: rng.random_range(config.bump_sigma_min..=config.bump_sigma_max),
                }
            })
            .collect();
        Heightfield { bumps }
    }

    /// Height and its gradient at `(x, y)`.
    pub fn eval(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let mut h = 0.0;
        let mut hx = 0.0;
        let mut hy = 0.0;
        for b in &self.bumps {
            let (dx, dy) = (x - b.x, y - b.y);
            let s2 = b.sigma * b.sigma;
            let v = b.amplitude * (-(dx * dx + dy * dy) / (2.0 * s2)).exp();
            h += v;
            hx -= v * dx / s2;
            hy -= v * dy / s2;
        }
        (h, hx, hy)
    }

    pub fn point(&self, x: f64, y: f64) -> Point {
        let (h, hx, hy) = self.eval(x, y);
        Point::with_normal(Vector3::new(x, y, h), Vector3::new(-hx, -hy, 1.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Maps surface A's frame onto surface B's.
    pub transform: RigidTransform,
    /// `(A point index, B point index)` keypoint pairs, filled in after detection.
    pub keypoint_pairs: Vec<(usize, usize)>,
    /// Per point of A: inside the region B re-samples.
    pub overlap_a: Vec<bool>,
    pub overlap_b: Vec<bool>,
}

impl GroundTruth {
    /// Transform matrix followed by the generating configuration.
    pub fn to_text(&self, config: &SynthConfig) -> String {
        format!("{}{}", self.transform.to_text(), config.to_key_values())
    }
}

/// Reads the transform from a ground-truth file (its first four lines).
pub fn parse_ground_truth(text: &str) -> Result<RigidTransform> {
    let rows: Vec<&str> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .take(4)
        .collect();
    RigidTransform::from_text(&rows.join("\n"))
}

fn lattice(
    field: &Heightfield,
    config: &SynthConfig,
    x_start: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Point> {
    let s = config.spacing;
    let nx = ((config.width - x_start) / s).floor() as usize + 1;
    let ny = (config.height / s).floor() as usize + 1;
    let j = config.jitter * s;
    let mut pts = Vec::with_capacity(nx * ny);
    let first = (x_start / s).ceil() as usize;
    for ix in first..first + nx {
        for iy in 0..ny {
            let mut x = ix as f64 * s;
            let mut y = iy as f64 * s;
            if j > 0.0 {
                x += rng.random_range(-0.5 * j..0.5 * j);
                y += rng.random_range(-0.5 * j..0.5 * j);
            }
            if x > config.width + 0.5 * s || x < x_start - 0.5 * s {
                continue;
            }
            pts.push(field.point(x, y));
        }
    }
    pts
}

pub fn generate_fragment_pair(
    config: &SynthConfig,
) -> Result<(PointCloud, PointCloud, GroundTruth)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let field = Heightfield::random(config, &mut rng);
    let mut rng_a = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 1));
    let mut rng_b = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 2));
    let x_start = config.width * (1.0 - config.overlap_fraction);
    let a = PointCloud::new(lattice(&field, config, 0.0, &mut rng_a), "synth-a")?;
    let b_local = PointCloud::new(lattice(&field, config, x_start, &mut rng_b), "synth-b")?;
    let b = apply_transform(&b_local, &config.transform);
    let overlap_a = a
        .points()
        .iter()
        .map(|p| p.position.x >= x_start - 0.5 * config.spacing)
        .collect();
    let gt = GroundTruth {
        transform: config.transform,
        keypoint_pairs: Vec::new(),
        overlap_a,
        overlap_b: vec![true; b.len()],
    };
    Ok((a, b, gt))
}

/// Isotropic per-coordinate Gaussian displacement; normals are re-estimated
/// and oriented like the originals.
pub fn add_gaussian_noise(cloud: &PointCloud, sigma: f64, seed: u64) -> Result<PointCloud> {
    if !(sigma >= 0.0) {
        return Err(Error::Config("noise sigma must be non-negative".into()));
    }
    if sigma == 0.0 {
        return Ok(cloud.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Normal::new(0.0, sigma).expect("valid sigma");
    let points: Vec<Point> = cloud
        .points()
        .iter()
        .map(|p| Point {
            position: p.position
                + Vector3::new(g.sample(&mut rng), g.sample(&mut rng), g.sample(&mut rng)),
            normal: p.normal,
        })
        .collect();
    let reference: Vec<Option<Vector3<f64>>> = cloud.points().iter().map(|p| p.normal).collect();
    let moved = cloud.with_points(points)?;
    estimate_normals_like(&moved, NOISY_NORMAL_NEIGHBORS, &reference)
}

/// Defect centres, drawn one after another from the cloud's points. With the
/// same seed, the first `n` centres do not depend on how many are requested.
pub fn defect_centers(cloud: &PointCloud, n_defects: usize, seed: u64) -> Vec<Vector3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_defects)
        .map(|_| *cloud.position(rng.random_range(0..cloud.len())))
        .collect()
}

/// Removes every point closer than `defect_radius` to any defect centre.
pub fn apply_abrasion(
    cloud: &PointCloud,
    n_defects: usize,
    defect_radius: f64,
    seed: u64,
) -> Result<PointCloud> {
    let mut removed = vec![false; cloud.len()];
    for c in defect_centers(cloud, n_defects, seed) {
        for i in cloud.radius_search(&c, defect_radius) {
            removed[i] = true;
        }
    }
    let keep: Vec<usize> = (0..cloud.len()).filter(|&i| !removed[i]).collect();
    if keep.is_empty() {
        return Err(Error::InvalidCloud("abrasion removed every point".into()));
    }
    cloud.subset(&keep)
}

/// Uniform random subset of `⌈keep_fraction · M⌉` points, in original order.
pub fn downsample(cloud: &PointCloud, keep_fraction: f64, seed: u64) -> Result<PointCloud> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Config("keep_fraction must be in (0, 1]".into()));
    }
    let m = cloud.len();
    let n = ((keep_fraction * m as f64).ceil() as usize).min(m);
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, m, n).into_vec();
    idx.sort_unstable();
    cloud.subset(&idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{icp_refine, IcpParams};
    use crate::metrics::poc;
    use crate::pointcloud::compute_resolution;

    fn small_config() -> SynthConfig {
        SynthConfig {
            width: 30.0,
            height: 30.0,
            bump_count: 10,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn identity_full_overlap_without_jitter_is_identical() {
        let config = SynthConfig {
            jitter: 0.0,
            transform: RigidTransform::identity(),
            ..small_config()
        };
        let (a, b, gt) = generate_fragment_pair(&config).unwrap();
        assert_eq!(a.len(), b.len());
        for (p, q) in a.points().iter().zip(b.points()) {
            assert_eq!(p.position, q.position);
            assert!((p.normal.unwrap() - q.normal.unwrap()).norm() < 1e-15);
        }
        assert!(gt.overlap_a.iter().all(|&m| m));
    }

    #[test]
    fn normals_match_finite_differences() {
        let config = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let field = Heightfield::random(&config, &mut rng);
        let h = 1e-6;
        for (x, y) in [(3.0, 4.0), (12.5, 20.1), (29.0, 0.5)] {
            let (_, hx, hy) = field.eval(x, y);
            let fx = (field.eval(x + h, y).0 - field.eval(x - h, y).0) / (2.0 * h);
            let fy = (field.eval(x, y + h).0 - field.eval(x, y - h).0) / (2.0 * h);
            assert!((hx - fx).abs() < 1e-6 && (hy - fy).abs() < 1e-6);
        }
    }

    #[test]
    fn ground_truth_aligns_the_pair() {
        let config = small_config();
        let (a, b, gt) = generate_fragment_pair(&config).unwrap();
        let back = apply_transform(&b, &gt.transform.inverse());
        assert!(poc(&a, &back, 2.0 * config.spacing).unwrap() >= 99.0);
        let r = compute_resolution(&a).unwrap();
        let icp = icp_refine(&a, &b, &gt.transform, &IcpParams::for_resolution(r)).unwrap();
        assert!(icp.iterations_used <= 2);
        // Independent jitter leaves a sampling gap, not a misalignment.
        assert!(icp.transform.rotation_angle_to(&gt.transform) < 1.0);
    }

    #[test]
    fn half_overlap() {
        let config = SynthConfig {
            overlap_fraction: 0.5,
            ..small_config()
        };
        let (a, b, gt) = generate_fragment_pair(&config).unwrap();
        let ratio = b.len() as f64 / a.len() as f64;
        assert!((ratio - 0.5).abs() < 0.05, "ratio {ratio}");
        let back = apply_transform(&b, &gt.transform.inverse());
        assert!(poc(&a, &back, 2.0).unwrap() >= 99.0);
        let in_overlap = gt.overlap_a.iter().filter(|&&m| m).count() as f64 / a.len() as f64;
        assert!((in_overlap - 0.5).abs() < 0.05);
    }

    #[test]
    fn generation_is_deterministic() {
        let config = small_config();
        let (a1, b1, _) = generate_fragment_pair(&config).unwrap();
        let (a2, b2, _) = generate_fragment_pair(&config).unwrap();
        assert_eq!(a1.points(), a2.points());
        assert_eq!(b1.points(), b2.points());
    }

    #[test]
    fn invalid_configs() {
        for c in [
            SynthConfig {
                overlap_fraction: 0.0,
                ..small_config()
            },
            SynthConfig {
                overlap_fraction: 1.5,
                ..small_config()
            },
            SynthConfig {
                spacing: 0.0,
                ..small_config()
            },
            SynthConfig {
                bump_sigma_min: 0.0,
                ..small_config()
            },
        ] {
            assert!(matches!(generate_fragment_pair(&c), Err(Error::Config(_))));
        }
    }

    #[test]
    fn ground_truth_text_round_trip() {
        let config = small_config();
        let (_, _, gt) = generate_fragment_pair(&config).unwrap();
        let text = gt.to_text(&config);
        assert!(text.contains("overlap_fraction = 1\n"));
        let t = parse_ground_truth(&text).unwrap();
        assert!((t.rotation - gt.transform.rotation).abs().max() < 1e-15);
        assert!((t.translation - gt.transform.translation).norm() < 1e-14);
    }

    #[test]
    fn noise_statistics() {
        let config = SynthConfig {
            width: 100.0,
            height: 100.0,
            bump_count: 20,
            ..SynthConfig::default()
        };
        let (a, _, _) = generate_fragment_pair(&config).unwrap();
        assert!(a.len() >= 10_000);
        assert_eq!(add_gaussian_noise(&a, 0.0, 1).unwrap().points(), a.points());
        let sigma = 0.5;
        let noisy = add_gaussian_noise(&a, sigma, 3).unwrap();
        let d: Vec<f64> = a
            .points()
            .iter()
            .zip(noisy.points())
            .flat_map(|(p, q)| {
                (q.position - p.position)
                    .iter()
                    .copied()
                    .collect::<Vec<_>>()
            })
            .collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
        assert!((std - sigma).abs() < 0.05 * sigma);
        // Re-estimated normals still face the same side as the originals.
        let agree = a
            .points()
            .iter()
            .zip(noisy.points())
            .filter(|(p, q)| q.normal.is_some_and(|n| n.dot(&p.normal.unwrap()) > 0.0))
            .count();
        assert!(agree as f64 > 0.99 * a.len() as f64);
        assert_eq!(
            add_gaussian_noise(&a, sigma, 3).unwrap().points(),
            noisy.points()
        );
    }

    #[test]
    fn abrasion_matches_brute_force() {
        let (a, _, _) = generate_fragment_pair(&small_config()).unwrap();
        assert_eq!(apply_abrasion(&a, 0, 3.0, 1).unwrap().points(), a.points());
        let radius = 2.5;
        let out = apply_abrasion(&a, 6, radius, 11).unwrap();
        let centers = defect_centers(&a, 6, 11);
        let expected = a
            .points()
            .iter()
            .filter(|p| centers.iter().all(|c| (p.position - c).norm() >= radius))
            .count();
        assert_eq!(out.len(), expected);
        // prefix property: more defects never bring points back
        let more = apply_abrasion(&a, 12, radius, 11).unwrap();
        assert!(more.len() <= out.len());
        assert!(apply_abrasion(&a, 5, 1e6, 1).is_err());
    }

    #[test]
    fn downsample_sizes() {
        let (a, _, _) = generate_fragment_pair(&small_config()).unwrap();
        assert_eq!(downsample(&a, 1.0, 1).unwrap().points(), a.points());
        let d = downsample(&a, 0.4, 1).unwrap();
        assert_eq!(d.len(), (0.4 * a.len() as f64).ceil() as usize);
        assert_eq!(d.points(), downsample(&a, 0.4, 1).unwrap().points());
        assert!(downsample(&a, 0.0, 1).is_err());
        assert!(downsample(&a, 1e-9, 1).is_err());
    }
}
