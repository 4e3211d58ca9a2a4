//! Small linear-algebra helpers shared by the frame, plane and mixture code.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

/// Eigen-decomposition of a symmetric 3×3 matrix with eigenvalues sorted
/// ascending; column `i` of the returned matrix pairs with value `i`.
pub fn sorted_eigen(m: &Matrix3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
    let eig = SymmetricEigen::new(*m);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = Vector3::new(
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    let vectors = Matrix3::from_columns(&[
        eig.eigenvectors.column(order[0]).into_owned(),
        eig.eigenvectors.column(order[1]).into_owned(),
        eig.eigenvectors.column(order[2]).into_owned(),
    ]);
    (values, vectors)
}

pub fn centroid<'a, I>(points: I) -> Option<Vector3<f64>>
where
    I: IntoIterator<Item = &'a Vector3<f64>>,
{
    let mut sum = Vector3::zeros();
    let mut n = 0usize;
    for p in points {
        sum += p;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Scatter matrix `Σ (p - c)(p - c)ᵀ` about `center` (not normalised).
pub fn scatter<'a, I>(points: I, center: &Vector3<f64>) -> Matrix3<f64>
where
    I: IntoIterator<Item = &'a Vector3<f64>>,
{
    let mut s = Matrix3::zeros();
    for p in points {
        let d = p - center;
        s += d * d.transpose();
    }
    s
}

/// Relative rank test on sorted eigenvalues of a scatter matrix.
pub(crate) fn rank_at_least_two(values: &Vector3<f64>) -> bool {
    values[2] > 0.0 && values[1] > 1e-12 * values[2]
}

/// Clamps eigenvalues of a symmetric matrix from below.
pub fn clamp_eigenvalues(m: &Matrix3<f64>, floor: f64) -> Matrix3<f64> {
    let (values, vectors) = sorted_eigen(m);
    if values[0] >= floor {
        return (m + m.transpose()) * 0.5;
    }
    let clamped = values.map(|v| v.max(floor));
    vectors * Matrix3::from_diagonal(&clamped) * vectors.transpose()
}

/// Angle between two vectors in degrees, in `[0, 180]`.
pub fn angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let c = a.dot(b) / (a.norm() * b.norm());
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Angle between two undirected lines in degrees, in `[0, 90]`.
pub fn folded_angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let raw = angle_deg(a, b);
    raw.min(180.0 - raw)
}

/// SplitMix64 finaliser; used to derive per-item seeds from a run seed.
pub fn mix_seed(seed: u64, item: u64) -> u64 {
    let mut z = seed ^ item.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_sorted_ascending() {
        let m = Matrix3::from_diagonal(&Vector3::new(3.0, 1.0, 2.0));
        let (v, e) = sorted_eigen(&m);
        assert_eq!(v, Vector3::new(1.0, 2.0, 3.0));
        assert!((e.column(0).abs() - Vector3::y()).norm() < 1e-12);
    }

    #[test]
    fn clamp_raises_small_eigenvalues() {
        let m = Matrix3::from_diagonal(&Vector3::new(1e-9, 1.0, 2.0));
        let c = clamp_eigenvalues(&m, 1e-4);
        let (v, _) = sorted_eigen(&c);
        assert!((v[0] - 1e-4).abs() < 1e-12);
        assert!((v[2] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn folded_angles() {
        let a = Vector3::z();
        assert!((folded_angle_deg(&a, &-a)).abs() < 1e-9);
        assert!((angle_deg(&a, &-a) - 180.0).abs() < 1e-9);
    }
}
