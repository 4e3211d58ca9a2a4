//! Local reference frames at keypoints.
//!
//! The frame comes from the covariance of the patch about the feature point
//! itself (not the patch centroid). The z-axis is the least-variance
//! direction, signed so it agrees with `Σ (p - p_i)`; the x-axis is that same
//! sum with its z component removed; y completes a right-handed frame.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rank_at_least_two, scatter, sorted_eigen};
use crate::keypoints::SurfacePatch;
use crate::pointcloud::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lrf {
    pub origin: Vector3<f64>,
    pub x_axis: Vector3<f64>,
    pub y_axis: Vector3<f64>,
    pub z_axis: Vector3<f64>,
}

impl Lrf {
    /// Rows are the axes, so `rotation() * (p - origin)` gives local coordinates.
    pub fn rotation(&self) -> Matrix3<f64> {
        Matrix3::from_rows(&[
            self.x_axis.transpose(),
            self.y_axis.transpose(),
            self.z_axis.transpose(),
        ])
    }

    pub fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * (p - self.origin)
    }
}

/// Unbiased covariance of the patch about the feature point `p`.
pub fn patch_covariance(cloud: &PointCloud, patch: &SurfacePatch) -> Matrix3<f64> {
    let p = cloud.position(patch.center_index);
    let n = patch.len();
    let s = scatter(patch.point_indices.iter().map(|&i| cloud.position(i)), p);
    if n > 1 {
        s / (n - 1) as f64
    } else {
        s
    }
}

pub fn compute_lrf(cloud: &PointCloud, patch: &SurfacePatch) -> Result<Lrf> {
    let p = *cloud.position(patch.center_index);
    let cov = patch_covariance(cloud, patch);
    let (values, vectors) = sorted_eigen(&cov);
    if !rank_at_least_two(&values) {
        return Err(Error::RankDeficient("collinear patch"));
    }
    let to_center: Vector3<f64> = patch
        .point_indices
        .iter()
        .map(|&i| p - cloud.position(i))
        .sum();
    let mut z: Vector3<f64> = vectors.column(0).normalize();
    if z.dot(&to_center) < 0.0 {
        z = -z;
    }
    let x_perp = to_center - z * z.dot(&to_center);
    let floor = 1e-9 * patch.len() as f64 * patch.radius;
    if x_perp.norm() <= (1e-6 * to_center.norm()).max(floor) {
        return Err(Error::DegenerateFrame);
    }
    let x = x_perp.normalize();
    let y = z.cross(&x);
    Ok(Lrf {
        origin: p,
        x_axis: x,
        y_axis: y,
        z_axis: z,
    })
}

/// Patch points in the frame's coordinates, in patch order.
pub fn to_local_frame(cloud: &PointCloud, patch: &SurfacePatch, lrf: &Lrf) -> Vec<Vector3<f64>> {
    let rot = lrf.rotation();
    patch
        .point_indices
        .iter()
        .map(|&i| rot * (cloud.position(i) - lrf.origin))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keypoints::extract_patch;
    use crate::pointcloud::{apply_transform, RigidTransform};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud_of(points: &[Vector3<f64>]) -> PointCloud {
        PointCloud::from_positions(points, "t").unwrap()
    }

    fn full_patch(cloud: &PointCloud, center: usize) -> SurfacePatch {
        SurfacePatch {
            center_index: center,
            point_indices: (0..cloud.len()).collect(),
            radius: 100.0,
        }
    }

    fn curved_patch(seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = vec![Vector3::new(0.3, -0.2, 0.05)];
        for _ in 0..200 {
            let x: f64 = rng.random_range(-3.0..3.0);
            let y: f64 = rng.random_range(-3.0..3.0);
            if x * x + y * y < 9.0 {
                pts.push(Vector3::new(x, y, 0.2 * x * x - 0.1 * y * y + 0.05 * x * y));
            }
        }
        pts
    }

    #[test]
    fn planar_patch_axes() {
        // Heavier mass toward -x, so p - centroid points toward +x.
        let mut pts = vec![Vector3::zeros()];
        for i in -4..=1 {
            for j in -3..=3 {
                if (i, j) != (0, 0) {
                    pts.push(Vector3::new(i as f64, j as f64, 0.0));
                }
            }
        }
        let c = cloud_of(&pts);
        let lrf = compute_lrf(&c, &full_patch(&c, 0)).unwrap();
        assert!((lrf.z_axis.z.abs() - 1.0).abs() < 1e-9);
        assert!((lrf.x_axis - Vector3::x()).norm() < 1e-9);
        assert!((lrf.x_axis.cross(&lrf.y_axis) - lrf.z_axis).norm() < 1e-9);
    }

    #[test]
    fn centro_symmetric_patch_is_degenerate() {
        let mut pts = vec![Vector3::zeros()];
        for i in -3i32..=3 {
            for j in -3i32..=3 {
                if (i, j) != (0, 0) {
                    pts.push(Vector3::new(
                        i as f64,
                        j as f64,
                        0.1 * (i * i + j * j) as f64,
                    ));
                }
            }
        }
        // Remove the z asymmetry's effect on x: sum of (p - p_i) is purely along z.
        let c = cloud_of(&pts);
        assert!(matches!(
            compute_lrf(&c, &full_patch(&c, 0)),
            Err(Error::DegenerateFrame)
        ));
    }

    #[test]
    fn collinear_patch_is_rank_deficient() {
        let pts: Vec<Vector3<f64>> = (0..10).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let c = cloud_of(&pts);
        assert!(matches!(
            compute_lrf(&c, &full_patch(&c, 0)),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn covariance_about_feature_point() {
        let pts = curved_patch(5);
        let c = cloud_of(&pts);
        let patch = full_patch(&c, 0);
        let p = pts[0];
        let mut direct = Matrix3::zeros();
        for q in &pts {
            let d = q - p;
            for a in 0..3 {
                for b in 0..3 {
                    direct[(a, b)] += d[a] * d[b];
                }
            }
        }
        direct /= (pts.len() - 1) as f64;
        assert!((patch_covariance(&c, &patch) - direct).abs().max() < 1e-12);
        // differs from the centroid-based covariance
        let cen: Vector3<f64> = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
        let about_centroid = scatter(&pts, &cen) / (pts.len() - 1) as f64;
        assert!((about_centroid - direct).abs().max() > 1e-6);
    }

    #[test]
    fn local_coordinates_of_axis_points() {
        let pts = curved_patch(8);
        let c = cloud_of(&pts);
        let patch = full_patch(&c, 0);
        let lrf = compute_lrf(&c, &patch).unwrap();
        let local = to_local_frame(&c, &patch, &lrf);
        assert!(local[0].norm() < 1e-15);
        let r = 3.0;
        let probe = lrf.origin + lrf.x_axis * (0.5 * r);
        assert!((lrf.to_local(&probe) - Vector3::new(0.5 * r, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn frame_is_orthonormal_and_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for seed in 0..20 {
            let pts = curved_patch(seed);
            let c = cloud_of(&pts);
            let patch = extract_patch(&c, 0, 3.5, 10).unwrap();
            let lrf = compute_lrf(&c, &patch).unwrap();
            for (a, b) in [
                (lrf.x_axis, lrf.y_axis),
                (lrf.y_axis, lrf.z_axis),
                (lrf.x_axis, lrf.z_axis),
            ] {
                assert!(a.dot(&b).abs() < 1e-6);
                assert!((a.norm() - 1.0).abs() < 1e-6);
            }
            assert!((lrf.x_axis.cross(&lrf.y_axis) - lrf.z_axis).norm() < 1e-6);

            let t = RigidTransform::from_axis_angle(
                &Vector3::new(rng.random(), rng.random(), rng.random()),
                rng.random_range(-3.0..3.0),
                Vector3::new(rng.random(), rng.random(), rng.random()) * 20.0,
            );
            let moved = apply_transform(&c, &t);
            let patch2 = extract_patch(&moved, 0, 3.5, 10).unwrap();
            assert_eq!(patch2.point_indices, patch.point_indices);
            let lrf2 = compute_lrf(&moved, &patch2).unwrap();
            assert!((t.rotation * lrf.x_axis - lrf2.x_axis).norm() < 1e-6);
            assert!((t.rotation * lrf.z_axis - lrf2.z_axis).norm() < 1e-6);
            let l1 = to_local_frame(&c, &patch, &lrf);
            let l2 = to_local_frame(&moved, &patch2, &lrf2);
            for (a, b) in l1.iter().zip(&l2) {
                assert!((a - b).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn opposite_direction_convention_flips_z_consistently() {
        // Using p_i - p instead of p - p_i negates the sign-test vector, which
        // negates z while leaving the x direction (after projection) negated too.
        let pts = curved_patch(3);
        let c = cloud_of(&pts);
        let patch = full_patch(&c, 0);
        let lrf = compute_lrf(&c, &patch).unwrap();
        let p = pts[0];
        let rev: Vector3<f64> = pts.iter().map(|q| q - p).sum();
        assert!(rev.dot(&lrf.z_axis) <= 0.0);
        let x_rev = (rev - lrf.z_axis * lrf.z_axis.dot(&rev)).normalize();
        assert!((x_rev + lrf.x_axis).norm() < 1e-9);
    }
}
