//! Reference plane fitting, boundary points, and the concave/convex split of
//! a support patch.

use std::f64::consts::{FRAC_PI_2, TAU};
use std::fmt::Write as _;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{centroid, rank_at_least_two, scatter, sorted_eigen};
use crate::keypoints::SurfacePatch;
use crate::pointcloud::{KdTree, Plane, PointCloud};

/// Neighbourhood size for the angular-gap boundary test.
pub const EDGE_NEIGHBORS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ConcavityRule {
    /// `+1` when the point normal has a non-negative dot product with the plane normal.
    #[default]
    NormalDot,
    /// `+1` when the point lies on or above the plane (signed distance ≥ 0).
    SignedDistance,
}

pub const CONVEX: i8 = 1;
pub const CONCAVE: i8 = -1;

/// One label per patch point, in patch order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConcavityLabels {
    pub labels: Vec<i8>,
}

impl ConcavityLabels {
    pub fn convex_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == CONVEX).count()
    }

    pub fn concave_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == CONCAVE).count()
    }
}

/// Boundary test on one point: the largest angular gap between its projected
/// neighbours exceeds 90°. Neighbourhoods too degenerate to define a tangent
/// plane count as boundary.
fn is_edge(center: &Vector3<f64>, neighbors: &[Vector3<f64>]) -> bool {
    let mut all = neighbors.to_vec();
    all.push(*center);
    let c = centroid(&all).expect("non-empty");
    let (values, vectors) = sorted_eigen(&scatter(&all, &c));
    if !rank_at_least_two(&values) {
        return true;
    }
    let n: Vector3<f64> = vectors.column(0).into_owned();
    let helper = match n.iamin() {
        0 => Vector3::x(),
        1 => Vector3::y(),
        _ => Vector3::z(),
    };
    let u = n.cross(&helper).normalize();
    let v = n.cross(&u);
    let mut angles: Vec<f64> = neighbors
        .iter()
        .filter_map(|q| {
            let d = q - center;
            let (a, b) = (d.dot(&u), d.dot(&v));
            (a.hypot(b) > 1e-12 * (1.0 + d.norm())).then(|| b.atan2(a))
        })
        .collect();
    if angles.len() < 2 {
        return true;
    }
    angles.sort_by(f64::total_cmp);
    let wrap = angles[0] + TAU - angles[angles.len() - 1];
    let max_gap = angles.windows(2).map(|w| w[1] - w[0]).fold(wrap, f64::max);
    max_gap > FRAC_PI_2
}

fn edge_points_in(positions: &[Vector3<f64>], tree: &KdTree, k: usize) -> Vec<usize> {
    (0..positions.len())
        .into_par_iter()
        .filter(|&i| {
            let nbrs: Vec<Vector3<f64>> = tree
                .knn(&positions[i], k + 1)
                .into_iter()
                .filter(|&(j, _)| j != i)
                .take(k)
                .map(|(j, _)| positions[j])
                .collect();
            is_edge(&positions[i], &nbrs)
        })
        .collect()
}

/// Boundary points of a patch (cloud indices, ascending). Neighbourhoods are
/// restricted to the patch itself.
pub fn extract_edge_points(cloud: &PointCloud, patch: &SurfacePatch) -> Result<Vec<usize>> {
    let positions: Vec<Vector3<f64>> = patch
        .point_indices
        .iter()
        .map(|&i| *cloud.position(i))
        .collect();
    let tree = KdTree::new(&positions);
    let local = edge_points_in(&positions, &tree, EDGE_NEIGHBORS);
    if local.len() < 3 {
        return Err(Error::TooFewPoints {
            needed: 3,
            got: local.len(),
        });
    }
    Ok(local.into_iter().map(|i| patch.point_indices[i]).collect())
}

/// Boundary points of a whole surface.
pub fn surface_edge_points(cloud: &PointCloud) -> Result<Vec<usize>> {
    let edges = edge_points_in(&cloud.positions(), cloud.kdtree(), EDGE_NEIGHBORS);
    if edges.len() < 3 {
        return Err(Error::TooFewPoints {
            needed: 3,
            got: edges.len(),
        });
    }
    Ok(edges)
}

/// Total-least-squares plane through the centroid, normal oriented so that
/// `normal · orient_like ≥ 0`.
pub fn fit_plane_to_points(points: &[Vector3<f64>], orient_like: &Vector3<f64>) -> Result<Plane> {
    if points.len() < 3 {
        return Err(Error::TooFewPoints {
            needed: 3,
            got: points.len(),
        });
    }
    let c = centroid(points).expect("non-empty");
    let (values, vectors) = sorted_eigen(&scatter(points, &c));
    if !rank_at_least_two(&values) {
        return Err(Error::RankDeficient("collinear plane support"));
    }
    let mut n: Vector3<f64> = vectors.column(0).normalize();
    if n.dot(orient_like) < 0.0 {
        n = -n;
    }
    Ok(Plane::through(&c, &n))
}

pub fn fit_plane(
    cloud: &PointCloud,
    indices: &[usize],
    orient_like: &Vector3<f64>,
) -> Result<Plane> {
    let pts: Vec<Vector3<f64>> = indices.iter().map(|&i| *cloud.position(i)).collect();
    fit_plane_to_points(&pts, orient_like)
}

pub fn classify_concavity(
    cloud: &PointCloud,
    patch: &SurfacePatch,
    plane: &Plane,
    rule: ConcavityRule,
) -> Result<ConcavityLabels> {
    let labels = patch
        .point_indices
        .iter()
        .map(|&i| {
            let p = cloud.point(i);
            let score = match rule {
                ConcavityRule::NormalDot => {
                    p.normal.ok_or(Error::MissingNormal(i))?.dot(&plane.normal)
                }
                ConcavityRule::SignedDistance => plane.signed_distance(&p.position),
            };
            Ok(if score >= 0.0 { CONVEX } else { CONCAVE })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConcavityLabels { labels })
}

/// `index,x,y,z,label` rows for inspecting a split.
pub fn labels_csv(cloud: &PointCloud, patch: &SurfacePatch, labels: &ConcavityLabels) -> String {
    let mut s = String::from("index,x,y,z,label\n");
    for (&i, &l) in patch.point_indices.iter().zip(&labels.labels) {
        let p = cloud.position(i);
        let _ = writeln!(s, "{i},{},{},{},{l}", p.x, p.y, p.z);
    }
    s
}
