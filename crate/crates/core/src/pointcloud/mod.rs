//! Point clouds with optional normals, rigid transforms, planes and the
//! spatial queries every other stage relies on.

mod kdtree;
pub mod ply;

use std::fmt::Write as _;
use std::sync::OnceLock;

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use kdtree::KdTree;

use crate::error::{Error, Result};
use crate::geometry::{centroid, rank_at_least_two, scatter, sorted_eigen};

/// Default neighbourhood size for PCA normal estimation.
pub const DEFAULT_NORMAL_NEIGHBORS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub position: Vector3<f64>,
    /// Unit normal; `None` before estimation or when the neighbourhood is degenerate.
    pub normal: Option<Vector3<f64>>,
}

impl Point {
    pub fn new(position: Vector3<f64>) -> Self {
        Point {
            position,
            normal: None,
        }
    }

    pub fn with_normal(position: Vector3<f64>, normal: Vector3<f64>) -> Self {
        Point {
            position,
            normal: Some(normal.normalize()),
        }
    }
}

/// An ordered, non-empty set of points. The KD-tree is built lazily on the
/// first spatial query and never invalidated, since points are immutable.
#[derive(Debug, Clone)]
pub struct PointCloud {
    points: Vec<Point>,
    source_id: String,
    index: OnceLock<KdTree>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, source_id: impl Into<String>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidCloud("cloud has no points".into()));
        }
        for (i, p) in points.iter().enumerate() {
            if !p.position.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidCloud(format!("point {i} is not finite")));
            }
            if let Some(n) = p.normal {
                if !n.iter().all(|v| v.is_finite()) || (n.norm() - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidCloud(format!(
                        "normal {i} is not unit length"
                    )));
                }
            }
        }
        Ok(PointCloud {
            points,
            source_id: source_id.into(),
            index: OnceLock::new(),
        })
    }

    pub fn from_positions(
        positions: &[Vector3<f64>],
        source_id: impl Into<String>,
    ) -> Result<Self> {
        Self::new(
            positions.iter().copied().map(Point::new).collect(),
            source_id,
        )
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &Point {
        &self.points[i]
    }

    pub fn position(&self, i: usize) -> &Vector3<f64> {
        &self.points[i].position
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.points.iter().map(|p| p.position).collect()
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn has_normals(&self) -> bool {
        self.points.iter().all(|p| p.normal.is_some())
    }

    pub fn centroid(&self) -> Vector3<f64> {
        centroid(self.points.iter().map(|p| &p.position)).expect("non-empty cloud")
    }

    pub fn kdtree(&self) -> &KdTree {
        self.index.get_or_init(|| KdTree::new(&self.positions()))
    }

    /// Indices with `|p_i - center| < radius` (strict), ascending.
    pub fn radius_search(&self, center: &Vector3<f64>, radius: f64) -> Vec<usize> {
        self.kdtree().radius_search(center, radius)
    }

    pub fn knn(&self, center: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        self.kdtree().knn(center, k)
    }

    pub fn nearest(&self, center: &Vector3<f64>) -> (usize, f64) {
        self.kdtree().nearest(center).expect("non-empty cloud")
    }

    /// A new cloud holding the listed points, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<PointCloud> {
        PointCloud::new(
            indices.iter().map(|&i| self.points[i]).collect(),
            self.source_id.clone(),
        )
    }

    pub fn with_points(&self, points: Vec<Point>) -> Result<PointCloud> {
        PointCloud::new(points, self.source_id.clone())
    }
}

/// Mean nearest-neighbour distance `r = (1/M) Σ_i min_{j≠i} |p_i - p_j|`.
pub fn compute_resolution(cloud: &PointCloud) -> Result<f64> {
    if cloud.len() < 2 {
        return Err(Error::TooFewPoints {
            needed: 2,
            got: cloud.len(),
        });
    }
    let tree = cloud.kdtree();
    let nn: Vec<f64> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            tree.knn(cloud.position(i), 2)
                .into_iter()
                .find(|&(j, _)| j != i)
                .map(|(_, d)| d)
                .expect("at least two points")
        })
        .collect();
    Ok(nn.iter().sum::<f64>() / cloud.len() as f64)
}

pub fn radius_search(cloud: &PointCloud, center: &Vector3<f64>, radius: f64) -> Vec<usize> {
    cloud.radius_search(center, radius)
}

/// PCA normals over the `k_neighbors` nearest neighbours (plus the point itself),
/// flipped to face `viewpoint`. Rank-deficient neighbourhoods leave the normal unset.
pub fn estimate_normals(
    cloud: &PointCloud,
    k_neighbors: usize,
    viewpoint: &Vector3<f64>,
) -> Result<PointCloud> {
    let normals = pca_normals(cloud, k_neighbors)?;
    let points = cloud
        .points()
        .iter()
        .zip(normals)
        .map(|(p, n)| Point {
            position: p.position,
            normal: n.map(|n| {
                if n.dot(&(viewpoint - p.position)) < 0.0 {
                    -n
                } else {
                    n
                }
            }),
        })
        .collect();
    cloud.with_points(points)
}

/// Re-estimates normals, orienting each one to agree with `reference[i]`
/// (typically the normal the point carried before it was perturbed).
/// Points with no reference fall back to the cloud's default viewpoint.
pub fn estimate_normals_like(
    cloud: &PointCloud,
    k_neighbors: usize,
    reference: &[Option<Vector3<f64>>],
) -> Result<PointCloud> {
    let normals = pca_normals(cloud, k_neighbors)?;
    let viewpoint = default_viewpoint(cloud);
    let points = cloud
        .points()
        .iter()
        .zip(normals)
        .zip(reference)
        .map(|((p, n), r)| {
            let guide = r.unwrap_or(viewpoint - p.position);
            Point {
                position: p.position,
                normal: n.map(|n| if n.dot(&guide) < 0.0 { -n } else { n }),
            }
        })
        .collect();
    cloud.with_points(points)
}

fn pca_normals(cloud: &PointCloud, k_neighbors: usize) -> Result<Vec<Option<Vector3<f64>>>> {
    if k_neighbors < 3 {
        return Err(Error::Config("k_neighbors must be at least 3".into()));
    }
    if cloud.len() <= k_neighbors {
        return Err(Error::TooFewPoints {
            needed: k_neighbors + 1,
            got: cloud.len(),
        });
    }
    let tree = cloud.kdtree();
    Ok((0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let nbrs: Vec<Vector3<f64>> = tree
                .knn(cloud.position(i), k_neighbors + 1)
                .into_iter()
                .map(|(j, _)| *cloud.position(j))
                .collect();
            let c = centroid(&nbrs)?;
            let (values, vectors) = sorted_eigen(&scatter(&nbrs, &c));
            rank_at_least_two(&values).then(|| vectors.column(0).normalize())
        })
        .collect())
}

/// Viewpoint used when a cloud arrives without normals: far off the cloud
/// along its overall surface normal (least-variance axis), with the axis sign
/// fixed so its largest component is positive.
pub fn default_viewpoint(cloud: &PointCloud) -> Vector3<f64> {
    let c = cloud.centroid();
    let positions = cloud.positions();
    let (_, vectors) = sorted_eigen(&scatter(&positions, &c));
    let mut axis: Vector3<f64> = vectors.column(0).into_owned();
    if axis[axis.iamax()] < 0.0 {
        axis = -axis;
    }
    let extent = positions
        .iter()
        .map(|p| (p - c).norm())
        .fold(0.0f64, f64::max)
        .max(1.0);
    c + axis * (10.0 * extent)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = RigidTransform {
            rotation,
            translation,
        };
        if !t.is_valid(1e-6) {
            return Err(Error::Config(
                "rotation is not orthonormal with det +1".into(),
            ));
        }
        Ok(t)
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle_rad: f64, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle_rad);
        RigidTransform {
            rotation: *rot.matrix(),
            translation,
        }
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        (r.transpose() * r - Matrix3::identity()).abs().max() <= tol
            && (r.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|v| v.is_finite())
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ first`: applies `first`, then `self`.
    pub fn compose(&self, first: &RigidTransform) -> Self {
        RigidTransform {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation + self.translation,
        }
    }

    /// Geodesic angle of the relative rotation, in degrees.
    pub fn rotation_angle_to(&self, other: &RigidTransform) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        ((rel.trace() - 1.0) * 0.5)
            .clamp(-1.0, 1.0)
            .acos()
            .to_degrees()
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix4(m: &Matrix4<f64>) -> Result<Self> {
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    /// Row-major 4×4 matrix as 16 whitespace-separated decimals, one row per line.
    pub fn to_text(&self) -> String {
        let m = self.to_matrix4();
        let mut s = String::new();
        for r in 0..4 {
            let row: Vec<String> = (0..4).map(|c| format!("{:.16e}", m[(r, c)])).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let values: Vec<f64> = text
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format {
                what: "transform",
                message: e.to_string(),
            })?;
        if values.len() != 16 {
            return Err(Error::Format {
                what: "transform",
                message: format!("expected 16 values, found {}", values.len()),
            });
        }
        Self::from_matrix4(&Matrix4::from_row_slice(&values))
    }
}

pub fn apply_transform(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    let points = cloud
        .points()
        .iter()
        .map(|p| Point {
            position: t.apply_point(&p.position),
            normal: p.normal.map(|n| t.apply_vector(&n).normalize()),
        })
        .collect();
    cloud
        .with_points(points)
        .expect("rigid transform keeps points finite")
}

/// Plane `normal · x + offset = 0` with unit normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl Plane {
    pub fn through(point: &Vector3<f64>, normal: &Vector3<f64>) -> Self {
        let n = normal.normalize();
        Plane {
            normal: n,
            offset: -n.dot(point),
        }
    }

    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) + self.offset
    }

    pub fn transformed(&self, t: &RigidTransform) -> Plane {
        let n = t.apply_vector(&self.normal);
        let p = t.apply_point(&(-self.offset * self.normal));
        Plane::through(&p, &n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn grid(n: usize, spacing: f64) -> PointCloud {
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                pts.push(Point::new(Vector3::new(
                    i as f64 * spacing,
                    j as f64 * spacing,
                    0.0,
                )));
            }
        }
        PointCloud::new(pts, "grid").unwrap()
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vector3<f64>> = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-2.0..2.0),
                )
            })
            .collect();
        PointCloud::from_positions(&pts, "rand").unwrap()
    }

    fn brute_resolution(cloud: &PointCloud) -> f64 {
        let pts = cloud.positions();
        let mut total = 0.0;
        for (i, p) in pts.iter().enumerate() {
            let mut best = f64::INFINITY;
            for (j, q) in pts.iter().enumerate() {
                if i != j {
                    best = best.min((p - q).norm());
                }
            }
            total += best;
        }
        total / pts.len() as f64
    }

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        RigidTransform::from_axis_angle(
            &(axis + Vector3::new(1e-3, 0.0, 0.0)),
            rng.random_range(-3.0..3.0),
            Vector3::new(
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
            ),
        )
    }

    #[test]
    fn resolution_of_pair() {
        let c = PointCloud::from_positions(&[Vector3::zeros(), Vector3::new(3.0, 0.0, 0.0)], "p")
            .unwrap();
        assert!((compute_resolution(&c).unwrap() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn resolution_of_grid() {
        assert!((compute_resolution(&grid(10, 1.0)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn resolution_matches_brute_force() {
        let c = random_cloud(200, 11);
        let fast = compute_resolution(&c).unwrap();
        assert!((fast - brute_resolution(&c)).abs() < 1e-9);
    }

    #[test]
    fn resolution_needs_two_points() {
        let c = PointCloud::from_positions(&[Vector3::zeros()], "one").unwrap();
        assert!(matches!(
            compute_resolution(&c),
            Err(Error::TooFewPoints { .. })
        ));
    }

    #[test]
    fn cloud_rejects_non_finite() {
        let r = PointCloud::from_positions(&[Vector3::new(f64::NAN, 0.0, 0.0)], "bad");
        assert!(r.is_err());
        assert!(PointCloud::new(vec![], "empty").is_err());
    }

    #[test]
    fn normals_of_plane() {
        let c = estimate_normals(&grid(12, 1.0), 10, &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        for p in c.points() {
            assert!((p.normal.unwrap() - Vector3::z()).norm() < 1e-6);
        }
    }

    #[test]
    fn normals_of_sphere_are_radial() {
        // Fibonacci sphere, viewpoint outside: flip toward it, then compare to
        // the analytic outward normal only where the viewpoint faces the point.
        let n = 2000;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let pts: Vec<Vector3<f64>> = (0..n)
            .map(|i| {
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let rad = (1.0 - y * y).sqrt();
                let th = golden * i as f64;
                Vector3::new(rad * th.cos(), y, rad * th.sin())
            })
            .collect();
        let c = PointCloud::from_positions(&pts, "sphere").unwrap();
        let vp = Vector3::new(0.0, 0.0, 100.0);
        let est = estimate_normals(&c, 10, &vp).unwrap();
        let mut checked = 0;
        for p in est.points() {
            let radial = p.position.normalize();
            if radial.z > 0.2 {
                let ang = crate::geometry::angle_deg(&p.normal.unwrap(), &radial);
                assert!(ang < 5.0, "angle {ang}");
                checked += 1;
            }
        }
        assert!(checked > 500);
    }

    #[test]
    fn collinear_neighbourhood_leaves_normal_unset() {
        let pts: Vec<Vector3<f64>> = (0..6).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let c = PointCloud::from_positions(&pts, "line").unwrap();
        let est = estimate_normals(&c, 3, &Vector3::z()).unwrap();
        assert!(est.points().iter().all(|p| p.normal.is_none()));
    }

    #[test]
    fn radius_search_tiny_radius() {
        let mut pts = grid(5, 1.0).positions();
        pts.push(pts[7]);
        let c = PointCloud::from_positions(&pts, "dup").unwrap();
        assert_eq!(c.radius_search(&pts[7], 1e-9), vec![7, 25]);
    }

    #[test]
    fn radius_search_grid_interior() {
        let c = grid(7, 1.0);
        let center = Vector3::new(3.0, 3.0, 0.0);
        // Enumerated: 4 axis neighbours at 1, 4 diagonals at sqrt(2) < 1.5, plus self.
        assert_eq!(c.radius_search(&center, 1.5).len(), 9);
        assert_eq!(c.radius_search(&center, 1.2).len(), 5);
    }

    #[test]
    fn transform_identity_and_inverse() {
        let c = random_cloud(50, 2);
        let id = apply_transform(&c, &RigidTransform::identity());
        assert_eq!(id.positions(), c.positions());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = random_transform(&mut rng);
        let back = apply_transform(&apply_transform(&c, &t), &t.inverse());
        for (a, b) in back.positions().iter().zip(c.positions()) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn transform_text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_transform(&mut rng);
        let back = RigidTransform::from_text(&t.to_text()).unwrap();
        assert_eq!(back, t);
        assert_eq!(t.to_text().split_whitespace().count(), 16);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn resolution_rigid_and_permutation_invariant(seed in 0u64..10_000) {
            let c = random_cloud(120, seed);
            let r = compute_resolution(&c).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            let t = random_transform(&mut rng);
            let moved = apply_transform(&c, &t);
            prop_assert!((compute_resolution(&moved).unwrap() - r).abs() < 1e-9);
            let mut idx: Vec<usize> = (0..c.len()).collect();
            idx.reverse();
            idx.rotate_left((seed % 37) as usize);
            let perm = c.subset(&idx).unwrap();
            prop_assert!((compute_resolution(&perm).unwrap() - r).abs() < 1e-9);
        }

        #[test]
        fn radius_search_equals_linear_scan(seed in 0u64..10_000, radius in 0.1f64..6.0) {
            let c = random_cloud(300, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let center = Vector3::new(
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-2.0..2.0),
            );
            let brute: Vec<usize> = c
                .positions()
                .iter()
                .enumerate()
                .filter(|(_, p)| (*p - center).norm() < radius)
                .map(|(i, _)| i)
                .collect();
            prop_assert_eq!(radius_search(&c, &center, radius), brute);
        }
    }
}
