//! Evaluation metrics for an aligned surface pair.

use std::collections::HashSet;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    angle_deg, centroid, folded_angle_deg, rank_at_least_two, scatter, sorted_eigen,
};
use crate::matching::{Correspondence, MatchDecision};
use crate::pointcloud::{KdTree, Plane, PointCloud, RigidTransform};
use crate::regions::{fit_plane_to_points, surface_edge_points};

/// Orthogonal projection of each point onto the plane.
pub fn project_to_plane(points: &[Vector3<f64>], plane: &Plane) -> Vec<Vector3<f64>> {
    let nn = plane.normal.norm_squared();
    points
        .iter()
        .map(|p| p - plane.normal * ((plane.normal.dot(p) + plane.offset) / nn))
        .collect()
}

fn edge_plane(cloud: &PointCloud, orient_like: &Vector3<f64>) -> Result<Plane> {
    let edges = surface_edge_points(cloud)?;
    let pts: Vec<Vector3<f64>> = edges.iter().map(|&i| *cloud.position(i)).collect();
    fit_plane_to_points(&pts, orient_like)
}

/// Percentage of the smaller surface's projected points that have a projected
/// point of the bigger surface closer than `chi`. Both are projected onto the
/// plane fitted to the bigger surface's boundary points. Ties in size count
/// `src` as the bigger surface.
pub fn poc(aligned_src: &PointCloud, aligned_dst: &PointCloud, chi: f64) -> Result<f64> {
    let (big, small) = if aligned_src.len() >= aligned_dst.len() {
        (aligned_src, aligned_dst)
    } else {
        (aligned_dst, aligned_src)
    };
    let plane = edge_plane(big, &Vector3::z())?;
    let big_proj = project_to_plane(&big.positions(), &plane);
    let small_proj = project_to_plane(&small.positions(), &plane);
    let tree = KdTree::new(&big_proj);
    let covered = small_proj
        .par_iter()
        .filter(|p| tree.nearest(p).is_some_and(|(_, d)| d < chi))
        .count();
    Ok(100.0 * covered as f64 / small.len() as f64)
}

/// Mean point normal, or `fallback` if the cloud has none.
fn mean_normal(cloud: &PointCloud, fallback: Vector3<f64>) -> Vector3<f64> {
    let sum: Vector3<f64> = cloud.points().iter().filter_map(|p| p.normal).sum();
    if sum.norm() > 0.0 {
        sum
    } else {
        fallback
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneAngle {
    /// Angle between the two plane normals as lines, in `[0, 90]`.
    pub folded: f64,
    /// Angle between normals oriented like each surface's mean point normal, in `[0, 180]`.
    pub raw: f64,
}

/// Angle between the boundary-fitted planes of two aligned surfaces.
pub fn aonv(src: &PointCloud, dst: &PointCloud) -> Result<PlaneAngle> {
    let ps = edge_plane(src, &mean_normal(src, Vector3::z()))?;
    let pd = edge_plane(dst, &mean_normal(dst, Vector3::z()))?;
    Ok(PlaneAngle {
        folded: folded_angle_deg(&ps.normal, &pd.normal),
        raw: angle_deg(&ps.normal, &pd.normal),
    })
}

/// PCA axes of a cloud (columns, ascending variance).
fn principal_axes(cloud: &PointCloud) -> Matrix3<f64> {
    let pts = cloud.positions();
    let c = centroid(&pts).expect("non-empty cloud");
    sorted_eigen(&scatter(&pts, &c)).1
}

fn box_normal(points: &[Vector3<f64>]) -> Option<Vector3<f64>> {
    if points.len() < 3 {
        return None;
    }
    let c = centroid(points)?;
    let (values, vectors) = sorted_eigen(&scatter(points, &c));
    rank_at_least_two(&values).then(|| vectors.column(0).into_owned())
}

/// Mean folded angle between planes fitted to both surfaces inside cubes of
/// side `l` centred on the given `dst` points. Cubes are aligned with the
/// principal axes of `dst`. Cubes where either surface has fewer than three
/// non-collinear points are skipped.
pub fn local_aonv(src: &PointCloud, dst: &PointCloud, keypoints: &[usize], l: f64) -> Result<f64> {
    let axes = principal_axes(dst).transpose();
    let half = 0.5 * l;
    // A cube of half-side h fits inside the ball of radius h·√3.
    let reach = half * 3f64.sqrt() * (1.0 + 1e-12);
    let inside = |cloud: &PointCloud, c: &Vector3<f64>| -> Vec<Vector3<f64>> {
        cloud
            .radius_search(c, reach)
            .into_iter()
            .map(|i| *cloud.position(i))
            .filter(|p| (axes * (p - c)).amax() < half)
            .collect()
    };
    let angles: Vec<Option<f64>> = keypoints
        .par_iter()
        .map(|&k| {
            let c = *dst.position(k);
            let ns = box_normal(&inside(src, &c))?;
            let nd = box_normal(&inside(dst, &c))?;
            Some(folded_angle_deg(&ns, &nd))
        })
        .collect();
    let valid: Vec<f64> = angles.into_iter().flatten().collect();
    if valid.is_empty() {
        return Err(Error::NoValidBox);
    }
    Ok(valid.iter().sum::<f64>() / valid.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleStats {
    pub max: f64,
    pub min: f64,
    pub mean: f64,
}

/// Angles between each source normal and the normal of its nearest target point.
pub fn angle_stats(src: &PointCloud, dst: &PointCloud) -> Result<AngleStats> {
    let angles: Vec<f64> = (0..src.len())
        .into_par_iter()
        .map(|i| {
            let p = src.point(i);
            let ns = p.normal.ok_or(Error::MissingNormal(i))?;
            let (j, _) = dst.nearest(&p.position);
            let nd = dst.point(j).normal.ok_or(Error::MissingNormal(j))?;
            Ok(angle_deg(&ns, &nd))
        })
        .collect::<Result<_>>()?;
    Ok(AngleStats {
        max: angles.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        min: angles.iter().copied().fold(f64::INFINITY, f64::min),
        mean: angles.iter().sum::<f64>() / angles.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rmse {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub total: f64,
}

pub fn rmse(
    correspondences: &[Correspondence],
    src: &PointCloud,
    dst: &PointCloud,
    transform: &RigidTransform,
) -> Result<Rmse> {
    if correspondences.is_empty() {
        return Err(Error::NoCorrespondences(0.0));
    }
    let mut sq = Vector3::zeros();
    for c in correspondences {
        let e = transform.apply_point(src.position(c.source_keypoint))
            - dst.position(c.target_keypoint);
        sq += e.component_mul(&e);
    }
    let m = sq / correspondences.len() as f64;
    Ok(Rmse {
        x: m.x.sqrt(),
        y: m.y.sqrt(),
        z: m.z.sqrt(),
        total: m.sum().sqrt(),
    })
}

/// Keypoint pairs `(source point index, target point index)` whose source
/// keypoint lands within `tol` of the target keypoint under `truth`.
pub fn ground_truth_pairs(
    src: &PointCloud,
    src_keypoints: &[usize],
    dst: &PointCloud,
    dst_keypoints: &[usize],
    truth: &RigidTransform,
    tol: f64,
) -> HashSet<(usize, usize)> {
    let targets: Vec<Vector3<f64>> = dst_keypoints.iter().map(|&j| *dst.position(j)).collect();
    let tree = KdTree::new(&targets);
    let mut out = HashSet::new();
    for &i in src_keypoints {
        for j in tree.radius_search(&truth.apply_point(src.position(i)), tol) {
            out.insert((i, dst_keypoints[j]));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

impl PrCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{}", p.threshold, p.precision, p.recall);
        }
        s
    }
}

/// Precision and recall of the candidate matches with distance ≤ threshold,
/// for each threshold. Precision is 1 when nothing is returned.
pub fn pr_curve(
    matches: &[Correspondence],
    ground_truth: &HashSet<(usize, usize)>,
    thresholds: &[f64],
) -> Result<PrCurve> {
    if ground_truth.is_empty() {
        return Err(Error::Config(
            "empty ground truth for precision/recall".into(),
        ));
    }
    let points = thresholds
        .iter()
        .map(|&threshold| {
            let returned: Vec<&Correspondence> =
                matches.iter().filter(|c| c.distance <= threshold).collect();
            let correct = returned
                .iter()
                .filter(|c| ground_truth.contains(&(c.source_keypoint, c.target_keypoint)))
                .count();
            let found: HashSet<(usize, usize)> = returned
                .iter()
                .map(|c| (c.source_keypoint, c.target_keypoint))
                .filter(|p| ground_truth.contains(p))
                .collect();
            PrPoint {
                threshold,
                precision: if returned.is_empty() {
                    1.0
                } else {
                    correct as f64 / returned.len() as f64
                },
                recall: found.len() as f64 / ground_truth.len() as f64,
            }
        })
        .collect();
    Ok(PrCurve { points })
}

/// Metric summary for one aligned pair. The runtime is kept out of the
/// serialized forms so that reports are reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub accepted: bool,
    pub correspondences: usize,
    pub aggregate_distance: Option<f64>,
    pub zeta: f64,
    pub psi: f64,
    pub ransac_inlier_ratio: Option<f64>,
    pub icp_final_error: Option<f64>,
    pub poc: Option<f64>,
    pub aonv: Option<f64>,
    pub aonv_raw: Option<f64>,
    pub local_aonv: Option<f64>,
    pub max_angle: Option<f64>,
    pub min_angle: Option<f64>,
    pub mean_angle: Option<f64>,
    pub rmse_x: Option<f64>,
    pub rmse_y: Option<f64>,
    pub rmse_z: Option<f64>,
    pub rmse_total: Option<f64>,
    #[serde(skip)]
    pub runtime_seconds: f64,
}

const REPORT_FIELDS: [&str; 18] = [
    "accepted",
    "correspondences",
    "aggregate_distance",
    "zeta",
    "psi",
    "ransac_inlier_ratio",
    "icp_final_error",
    "poc",
    "aonv",
    "aonv_raw",
    "local_aonv",
    "max_angle",
    "min_angle",
    "mean_angle",
    "rmse_x",
    "rmse_y",
    "rmse_z",
    "rmse_total",
];

impl MatchReport {
    /// A report carrying only the decision; alignment metrics are `None`.
    pub fn empty(decision: &MatchDecision) -> Self {
        MatchReport {
            accepted: decision.accepted,
            correspondences: decision.correspondences.len(),
            aggregate_distance: decision
                .aggregate_distance
                .is_finite()
                .then_some(decision.aggregate_distance),
            zeta: decision.zeta,
            psi: decision.psi,
            ransac_inlier_ratio: None,
            icp_final_error: None,
            poc: None,
            aonv: None,
            aonv_raw: None,
            local_aonv: None,
            max_angle: None,
            min_angle: None,
            mean_angle: None,
            rmse_x: None,
            rmse_y: None,
            rmse_z: None,
            rmse_total: None,
            runtime_seconds: 0.0,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Header plus one row; absent values are empty fields.
    pub fn to_csv(&self) -> String {
        let value = serde_json::to_value(self).expect("report serializes");
        let row: Vec<String> = REPORT_FIELDS
            .iter()
            .map(|k| match &value[*k] {
                serde_json::Value::Null => String::new(),
                v => v.to_string(),
            })
            .collect();
        format!("{}\n{}\n", REPORT_FIELDS.join(","), row.join(","))
    }
}
