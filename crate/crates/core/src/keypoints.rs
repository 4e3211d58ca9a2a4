//! Keypoint detection and support-patch extraction.
//!
//! Fractured surfaces carry no colour, so the scale space is built over an
//! intrinsic scalar field: the surface variation `λ0 / (λ0 + λ1 + λ2)` of the
//! local PCA. Each octave works on a distance-based subsample of the cloud
//! (greedy in index order, hence rigid-invariant), smooths the field with
//! Gaussian weights over the full-resolution cloud, and keeps difference of
//! Gaussian extrema across space and scale. Detections are refined to the
//! full-resolution point with the strongest response nearby, ranked by
//! response, and thinned by non-maximum suppression.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{centroid, scatter, sorted_eigen};
use crate::pointcloud::{KdTree, PointCloud};

/// Default minimum number of points in a support patch.
pub const MIN_PATCH_POINTS: usize = 20;

/// Responses at or below this are treated as numerical noise.
const RESPONSE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointParams {
    /// Smallest Gaussian scale, in model units.
    pub min_scale: f64,
    pub octaves: usize,
    pub scales_per_octave: usize,
    /// Minimum absolute DoG response; zero keeps every extremum.
    pub contrast_threshold: f64,
    pub nms_radius: f64,
    /// Neighbourhood size for the surface-variation field.
    pub curvature_neighbors: usize,
}

impl KeypointParams {
    /// Defaults tied to the cloud resolution `r`.
    pub fn for_resolution(r: f64) -> Self {
        KeypointParams {
            min_scale: r,
            octaves: 3,
            scales_per_octave: 4,
            contrast_threshold: 0.0,
            nms_radius: r,
            curvature_neighbors: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub index: usize,
    pub position: Vector3<f64>,
    pub response: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfacePatch {
    pub center_index: usize,
    /// Ascending point indices with `|p_i - p| < radius`; includes the center.
    pub point_indices: Vec<usize>,
    pub radius: f64,
}

impl SurfacePatch {
    pub fn len(&self) -> usize {
        self.point_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_indices.is_empty()
    }
}

/// Surface variation of the PCA over each point's k nearest neighbours.
pub fn surface_variation(cloud: &PointCloud, k: usize) -> Vec<f64> {
    let tree = cloud.kdtree();
    (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let nbrs: Vec<Vector3<f64>> = tree
                .knn(cloud.position(i), k + 1)
                .into_iter()
                .map(|(j, _)| *cloud.position(j))
                .collect();
            let c = centroid(&nbrs).expect("self is a neighbour");
            let (v, _) = sorted_eigen(&scatter(&nbrs, &c));
            let total = v.sum();
            if total > 0.0 {
                (v[0] / total).max(0.0)
            } else {
                0.0
            }
        })
        .collect()
}

/// Greedy subsample: walk points in index order, keep a point unless an
/// already kept point lies closer than `spacing`.
fn subsample(cloud: &PointCloud, spacing: f64) -> Vec<usize> {
    let tree = cloud.kdtree();
    let mut blocked = vec![false; cloud.len()];
    let mut kept = Vec::new();
    for i in 0..cloud.len() {
        if blocked[i] {
            continue;
        }
        kept.push(i);
        for j in tree.radius_search(cloud.position(i), spacing) {
            blocked[j] = true;
        }
    }
    kept
}

/// Gaussian-smoothed field values at `center` for each of `sigmas` (ascending),
/// using full-resolution points within `3 * max(sigma)`.
fn smooth_at(tree: &KdTree, field: &[f64], center: &Vector3<f64>, sigmas: &[f64]) -> Vec<f64> {
    let reach = 3.0 * sigmas.last().copied().unwrap_or(0.0);
    let nbrs = tree.radius_search(center, reach);
    let d2: Vec<f64> = nbrs
        .iter()
        .map(|&j| (tree.point(j) - center).norm_squared())
        .collect();
    sigmas
        .iter()
        .map(|&s| {
            let cut = 9.0 * s * s;
            let inv = 0.5 / (s * s);
            let mut num = 0.0;
            let mut den = 0.0;
            for (&j, &dd) in nbrs.iter().zip(&d2) {
                if dd < cut {
                    let w = (-dd * inv).exp();
                    num += w * field[j];
                    den += w;
                }
            }
            if den > 0.0 {
                num / den
            } else {
                0.0
            }
        })
        .collect()
}

fn dog_at(tree: &KdTree, field: &[f64], center: &Vector3<f64>, sigmas: &[f64]) -> Vec<f64> {
    let l = smooth_at(tree, field, center, sigmas);
    l.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Detects keypoints ordered by descending response. An empty result means
/// no extremum was found; the caller decides whether that is a failure.
pub fn detect_keypoints(cloud: &PointCloud, params: &KeypointParams) -> Result<Vec<Keypoint>> {
    if params.min_scale <= 0.0 || params.scales_per_octave == 0 {
        return Err(Error::Config("keypoint scales must be positive".into()));
    }
    if cloud.len() <= params.curvature_neighbors {
        return Ok(Vec::new());
    }
    let field = surface_variation(cloud, params.curvature_neighbors);
    let tree = cloud.kdtree();
    let s_per = params.scales_per_octave;
    let floor = params.contrast_threshold.max(RESPONSE_FLOOR);

    let mut detections: Vec<Keypoint> = Vec::new();
    for octave in 0..params.octaves {
        let spacing = params.min_scale * 2f64.powi(octave as i32);
        let sigmas: Vec<f64> = (0..s_per + 3)
            .map(|s| spacing * 2f64.powf(s as f64 / s_per as f64))
            .collect();
        let samples = subsample(cloud, spacing);
        let sample_pos: Vec<Vector3<f64>> = samples.iter().map(|&i| *cloud.position(i)).collect();
        let sample_tree = KdTree::new(&sample_pos);
        let dog: Vec<Vec<f64>> = sample_pos
            .par_iter()
            .map(|p| dog_at(tree, &field, p, &sigmas))
            .collect();

        let found: Vec<Vec<Keypoint>> = (0..samples.len())
            .into_par_iter()
            .map(|q| {
                let nbrs = sample_tree.radius_search(&sample_pos[q], 2.0 * spacing);
                let mut out = Vec::new();
                for s in 1..=s_per {
                    let v = dog[q][s];
                    if v.abs() <= floor {
                        continue;
                    }
                    let is_max = v > 0.0;
                    let beaten = nbrs.iter().any(|&n| {
                        (s - 1..=s + 1).any(|t| {
                            if n == q && t == s {
                                return false;
                            }
                            let w = dog[n][t];
                            if is_max {
                                w >= v
                            } else {
                                w <= v
                            }
                        })
                    });
                    if !beaten {
                        out.push(refine(
                            cloud, tree, &field, samples[q], spacing, &sigmas, s, is_max,
                        ));
                    }
                }
                out
            })
            .collect();
        detections.extend(found.into_iter().flatten());
    }

    detections.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.index.cmp(&b.index))
    });
    let mut kept: Vec<Keypoint> = Vec::new();
    for kp in detections {
        if kept
            .iter()
            .all(|k| (k.position - kp.position).norm() >= params.nms_radius)
        {
            kept.push(kp);
        }
    }
    Ok(kept)
}

/// Moves a detection to the full-resolution point within `spacing` of the
/// sample whose DoG at scale `s` is most extreme in the same direction.
#[allow(clippy::too_many_arguments)]
fn refine(
    cloud: &PointCloud,
    tree: &KdTree,
    field: &[f64],
    sample: usize,
    spacing: f64,
    sigmas: &[f64],
    s: usize,
    is_max: bool,
) -> Keypoint {
    let pair = [sigmas[s], sigmas[s + 1]];
    let mut best = sample;
    let mut best_v = {
        let d = dog_at(tree, field, cloud.position(sample), &pair);
        d[0]
    };
    for j in tree.radius_search(cloud.position(sample), spacing) {
        if j == sample {
            continue;
        }
        let v = dog_at(tree, field, cloud.position(j), &pair)[0];
        let better = if is_max { v > best_v } else { v < best_v };
        if better {
            best = j;
            best_v = v;
        }
    }
    Keypoint {
        index: best,
        position: *cloud.position(best),
        response: best_v.abs(),
        scale: sigmas[s],
    }
}

/// Points within `radius` of keypoint `center` (strict), rejected when fewer
/// than `min_points` fall inside.
pub fn extract_patch(
    cloud: &PointCloud,
    center: usize,
    radius: f64,
    min_points: usize,
) -> Result<SurfacePatch> {
    if radius <= 0.0 {
        return Err(Error::Config("support radius must be positive".into()));
    }
    let point_indices = cloud.radius_search(cloud.position(center), radius);
    if point_indices.len() < min_points {
        return Err(Error::InsufficientSupport {
            needed: min_points,
            got: point_indices.len(),
        });
    }
    Ok(SurfacePatch {
        center_index: center,
        point_indices,
        radius,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::{apply_transform, compute_resolution, Point, RigidTransform};

    fn bump_surface(n: usize, spacing: f64, bumps: &[(f64, f64, f64, f64)]) -> PointCloud {
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let x = i as f64 * spacing;
                let y = j as f64 * spacing;
                let z: f64 = bumps
                    .iter()
                    .map(|&(cx, cy, a, s)| {
                        a * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp()
                    })
                    .sum();
                pts.push(Point::new(Vector3::new(x, y, z)));
            }
        }
        PointCloud::new(pts, "bump").unwrap()
    }

    #[test]
    fn plane_has_no_keypoints() {
        let c = bump_surface(30, 1.0, &[]);
        let kps = detect_keypoints(&c, &KeypointParams::for_resolution(1.0)).unwrap();
        assert!(kps.len() <= 2, "{} keypoints on a plane", kps.len());
    }

    #[test]
    fn bump_apex_is_detected() {
        let apex = Vector3::new(15.0, 15.0, 4.0);
        let c = bump_surface(31, 1.0, &[(15.0, 15.0, 4.0, 3.0)]);
        let r = compute_resolution(&c).unwrap();
        let kps = detect_keypoints(&c, &KeypointParams::for_resolution(r)).unwrap();
        assert!(!kps.is_empty());
        assert!(
            kps.iter().any(|k| (k.position - apex).norm() < 2.0 * r),
            "no keypoint near apex"
        );
        assert!(kps.windows(2).all(|w| w[0].response >= w[1].response));
    }

    #[test]
    fn detection_is_deterministic_and_rigid_equivariant() {
        let c = bump_surface(
            36,
            1.0,
            &[
                (10.0, 12.0, 3.0, 3.0),
                (24.0, 20.0, -2.5, 4.0),
                (15.0, 27.0, 2.0, 2.5),
            ],
        );
        let params = KeypointParams::for_resolution(1.0);
        let a = detect_keypoints(&c, &params).unwrap();
        let b = detect_keypoints(&c, &params).unwrap();
        assert_eq!(a, b);
        let t = RigidTransform::from_axis_angle(
            &Vector3::new(0.3, -0.5, 0.8),
            1.1,
            Vector3::new(5.0, -3.0, 7.0),
        );
        let moved = detect_keypoints(&apply_transform(&c, &t), &params).unwrap();
        assert!(!a.is_empty());
        let mut matched = 0;
        for k in &a {
            let p = t.apply_point(&k.position);
            if moved.iter().any(|m| (m.position - p).norm() <= 1.0) {
                matched += 1;
            }
        }
        assert!(
            matched as f64 >= 0.9 * a.len() as f64,
            "{matched}/{}",
            a.len()
        );
    }

    #[test]
    fn patch_on_grid() {
        let c = bump_surface(7, 1.0, &[]);
        let center = 3 * 7 + 3;
        let patch = extract_patch(&c, center, 1.5, 5).unwrap();
        assert_eq!(patch.len(), 9);
        assert!(patch.point_indices.contains(&center));
        assert_eq!(extract_patch(&c, center, 1.2, 5).unwrap().len(), 5);
        let err = extract_patch(&c, center, 1.5, MIN_PATCH_POINTS).unwrap_err();
        assert!(matches!(err, Error::InsufficientSupport { got: 9, .. }));
    }

    #[test]
    fn tiny_radius_is_insufficient() {
        let c = bump_surface(7, 1.0, &[]);
        assert!(matches!(
            extract_patch(&c, 10, 0.5, MIN_PATCH_POINTS),
            Err(Error::InsufficientSupport { got: 1, .. })
        ));
    }

    #[test]
    fn patch_membership_is_exact() {
        let c = bump_surface(20, 0.7, &[(7.0, 7.0, 2.0, 2.0)]);
        let patch = extract_patch(&c, 150, 4.2, 1).unwrap();
        let brute: Vec<usize> = (0..c.len())
            .filter(|&i| (c.position(i) - c.position(150)).norm() < 4.2)
            .collect();
        assert_eq!(patch.point_indices, brute);
    }
}
