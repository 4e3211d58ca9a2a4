//! x-means: grow k by 2-splitting clusters while the split improves BIC.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{centroid, clamp_eigenvalues, scatter, sorted_eigen};

use super::mixture::gaussian_log_pdf;

/// Lloyd iterations used when refining a split.
const KMEANS_ITERS: usize = 10;
/// Cap on Lloyd iterations over the full point set.
const GLOBAL_KMEANS_ITERS: usize = 100;
/// Children smaller than this are not worth a full-covariance Gaussian.
const MIN_CHILD: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XMeansParams {
    pub k_max: usize,
    pub seed: u64,
    /// Eigenvalue floor applied to cluster covariances in the BIC.
    pub var_floor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSet {
    pub centers: Vec<Vector3<f64>>,
    /// Cluster index for every input point.
    pub assignments: Vec<usize>,
    /// Per-cluster sample covariance (maximum likelihood, about the center).
    pub covariances: Vec<Matrix3<f64>>,
}

impl ClusterSet {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k()];
        for &a in &self.assignments {
            s[a] += 1;
        }
        s
    }

    /// Builds a cluster set from an assignment, dropping empty clusters.
    pub fn from_assignments(points: &[Vector3<f64>], assignments: &[usize]) -> Self {
        let k = assignments.iter().copied().max().map_or(0, |m| m + 1);
        let mut members: Vec<Vec<Vector3<f64>>> = vec![Vec::new(); k];
        for (p, &a) in points.iter().zip(assignments) {
            members[a].push(*p);
        }
        let mut remap = vec![usize::MAX; k];
        let mut centers = Vec::new();
        let mut covariances = Vec::new();
        for (c, m) in members.iter().enumerate() {
            if let Some(center) = centroid(m) {
                remap[c] = centers.len();
                covariances.push(scatter(m, &center) / m.len() as f64);
                centers.push(center);
            }
        }
        ClusterSet {
            centers,
            assignments: assignments.iter().map(|&a| remap[a]).collect(),
            covariances,
        }
    }
}

fn nearest_center(p: &Vector3<f64>, centers: &[Vector3<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centers.iter().enumerate() {
        let d = (p - c).norm_squared();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Lloyd iterations from the given centers; empty clusters keep their center.
fn lloyd(points: &[Vector3<f64>], centers: &mut [Vector3<f64>], iters: usize) -> Vec<usize> {
    let mut assign: Vec<usize> = points.iter().map(|p| nearest_center(p, centers)).collect();
    for _ in 0..iters {
        let mut sums = vec![Vector3::zeros(); centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (p, &a) in points.iter().zip(&assign) {
            sums[a] += p;
            counts[a] += 1;
        }
        for (c, (s, n)) in centers.iter_mut().zip(sums.iter().zip(&counts)) {
            if *n > 0 {
                *c = s / *n as f64;
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest_center(p, centers)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    assign
}

/// Log-likelihood of `points` under one full-covariance Gaussian fitted by
/// maximum likelihood, with the mixing term `ln(n / total)`.
fn cluster_log_likelihood(points: &[Vector3<f64>], total: usize, var_floor: f64) -> f64 {
    let n = points.len() as f64;
    let c = centroid(points).expect("non-empty cluster");
    let cov = clamp_eigenvalues(&(scatter(points, &c) / n), var_floor);
    let ll: f64 = points
        .iter()
        .map(|p| gaussian_log_pdf(&(p - c), &cov))
        .sum();
    ll + n * (n / total as f64).ln()
}

/// BIC (larger is better) of a hard partition, counting 10 parameters per
/// component (weight, mean, covariance) minus one for the weight constraint.
fn bic(groups: &[&[Vector3<f64>]], total: usize, var_floor: f64) -> f64 {
    let ll: f64 = groups
        .iter()
        .map(|g| cluster_log_likelihood(g, total, var_floor))
        .sum();
    let params = (10 * groups.len() - 1) as f64;
    ll - 0.5 * params * (total as f64).ln()
}

/// Tries to split one cluster in two along its principal axis. Returns the
/// two child point sets if the split is structurally valid.
fn split(
    points: &[Vector3<f64>],
    rng: &mut ChaCha8Rng,
) -> Option<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)> {
    if points.len() < 2 * MIN_CHILD {
        return None;
    }
    let c = centroid(points)?;
    let (values, vectors) = sorted_eigen(&(scatter(points, &c) / points.len() as f64));
    let mut centers = if values[2] > 0.0 {
        let offset = vectors.column(2) * values[2].sqrt();
        [c + offset, c - offset]
    } else {
        // All points coincide along every axis; nothing to split.
        return None;
    };
    let mut assign = lloyd(points, &mut centers, KMEANS_ITERS);
    if assign.iter().all(|&a| a == assign[0]) {
        // Principal-axis seeds collapsed onto one side; retry from two sample points.
        let i = rng.random_range(0..points.len());
        let mut j = rng.random_range(0..points.len() - 1);
        if j >= i {
            j += 1;
        }
        centers = [points[i], points[j]];
        assign = lloyd(points, &mut centers, KMEANS_ITERS);
    }
    let (a, b): (Vec<_>, Vec<_>) = points.iter().zip(&assign).partition(|(_, &l)| l == 0);
    let a: Vec<Vector3<f64>> = a.into_iter().map(|(p, _)| *p).collect();
    let b: Vec<Vector3<f64>> = b.into_iter().map(|(p, _)| *p).collect();
    (a.len() >= MIN_CHILD && b.len() >= MIN_CHILD).then_some((a, b))
}

/// x-means clustering starting from a single cluster. Each round proposes a
/// 2-split of every cluster, accepts the ones whose local BIC improves, then
/// re-runs Lloyd over all points. Stops when no split is accepted or `k_max`
/// is reached.
pub fn run_xmeans(points: &[Vector3<f64>], params: &XMeansParams) -> ClusterSet {
    assert!(!points.is_empty(), "x-means needs at least one point");
    let k_max = params.k_max.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centers = vec![centroid(points).expect("non-empty")];
    let mut assign = vec![0usize; points.len()];

    // Lloyd can empty a freshly split cluster, so cap the rounds as well.
    for _ in 0..4 * k_max {
        if centers.len() >= k_max {
            break;
        }
        let mut members: Vec<Vec<Vector3<f64>>> = vec![Vec::new(); centers.len()];
        for (p, &a) in points.iter().zip(&assign) {
            members[a].push(*p);
        }
        let mut next_centers = Vec::new();
        let mut split_any = false;
        let live = members.iter().filter(|m| !m.is_empty()).count();
        let mut remaining = live;
        for (c, m) in centers.iter().zip(&members) {
            if m.is_empty() {
                continue;
            }
            remaining -= 1;
            // Count after this split: already emitted + two children + untouched rest.
            let room = next_centers.len() + 2 + remaining <= k_max;
            let accepted = room.then(|| split(m, &mut rng)).flatten().filter(|(a, b)| {
                bic(&[a, b], m.len(), params.var_floor)
                    > bic(&[m.as_slice()], m.len(), params.var_floor)
            });
            match accepted {
                Some((a, b)) => {
                    next_centers.push(centroid(&a).expect("non-empty"));
                    next_centers.push(centroid(&b).expect("non-empty"));
                    split_any = true;
                }
                None => next_centers.push(*c),
            }
        }
        if !split_any {
            break;
        }
        assign = lloyd(points, &mut next_centers, GLOBAL_KMEANS_ITERS);
        centers = next_centers;
    }
    merge_pass(points, &mut assign, params.var_floor);
    ClusterSet::from_assignments(points, &assign)
}

/// Greedily merges the pair of clusters whose union has the best BIC gain,
/// while any merge improves BIC. Undoes splits that cut a single Gaussian.
fn merge_pass(points: &[Vector3<f64>], assign: &mut [usize], var_floor: f64) {
    loop {
        let k = assign.iter().copied().max().map_or(0, |m| m + 1);
        let mut members: Vec<Vec<Vector3<f64>>> = vec![Vec::new(); k];
        for (p, &a) in points.iter().zip(assign.iter()) {
            members[a].push(*p);
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..k {
            for j in i + 1..k {
                if members[i].is_empty() || members[j].is_empty() {
                    continue;
                }
                let n = members[i].len() + members[j].len();
                let union: Vec<Vector3<f64>> =
                    members[i].iter().chain(&members[j]).copied().collect();
                let gain =
                    bic(&[&union], n, var_floor) - bic(&[&members[i], &members[j]], n, var_floor);
                if gain > 0.0 && best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, i, j));
                }
            }
        }
        let Some((_, i, j)) = best else { return };
        for a in assign.iter_mut() {
            if *a == j {
                *a = i;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(centers: &[Vector3<f64>], n: usize, sigma: f64, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Normal::new(0.0, sigma).unwrap();
        let mut pts = Vec::new();
        for c in centers {
            for _ in 0..n {
                pts.push(
                    c + Vector3::new(g.sample(&mut rng), g.sample(&mut rng), g.sample(&mut rng)),
                );
            }
        }
        pts
    }

    fn params(k_max: usize, seed: u64) -> XMeansParams {
        XMeansParams {
            k_max,
            seed,
            var_floor: 1e-8,
        }
    }

    #[test]
    fn one_tight_cluster() {
        for seed in 0..10 {
            let pts = blobs(&[Vector3::new(1.0, 2.0, 3.0)], 200, 0.1, seed);
            assert_eq!(run_xmeans(&pts, &params(8, seed)).k(), 1);
        }
    }

    #[test]
    fn three_separated_clusters() {
        let centers = [
            Vector3::zeros(),
            Vector3::new(10.0, 0.0, 0.0),
            Vector3::new(0.0, 10.0, 0.0),
        ];
        for seed in 0..10 {
            let pts = blobs(&centers, 100, 1.0, seed);
            let cs = run_xmeans(&pts, &params(8, seed));
            assert_eq!(cs.k(), 3, "seed {seed}");
            // each planted cluster maps to one label
            for b in 0..3 {
                let label = cs.assignments[b * 100];
                assert!(cs.assignments[b * 100..(b + 1) * 100]
                    .iter()
                    .all(|&a| a == label));
            }
        }
    }

    #[test]
    fn k_max_caps_growth() {
        // Evenly spaced collinear blobs look uniform to a local split test, so
        // spread them out.
        let centers = [
            Vector3::zeros(),
            Vector3::new(20.0, 0.0, 0.0),
            Vector3::new(0.0, 20.0, 0.0),
            Vector3::new(0.0, 0.0, 20.0),
            Vector3::new(20.0, 20.0, 20.0),
        ];
        let pts = blobs(&centers, 50, 0.5, 3);
        for k_max in 1..=6 {
            let cs = run_xmeans(&pts, &params(k_max, 1));
            assert!(cs.k() <= k_max);
            assert!(cs.k() >= 1);
        }
        assert_eq!(run_xmeans(&pts, &params(8, 1)).k(), 5);
    }

    #[test]
    fn deterministic_given_seed() {
        let pts = blobs(&[Vector3::zeros(), Vector3::new(3.0, 1.0, 0.0)], 80, 1.0, 9);
        assert_eq!(
            run_xmeans(&pts, &params(8, 5)),
            run_xmeans(&pts, &params(8, 5))
        );
    }

    #[test]
    fn flat_disc_is_one_cluster() {
        let mut pts = Vec::new();
        for i in -6..=6 {
            for j in -6..=6 {
                if i * i + j * j <= 36 {
                    pts.push(Vector3::new(i as f64, j as f64, 0.0));
                }
            }
        }
        assert_eq!(run_xmeans(&pts, &params(8, 0)).k(), 1);
    }

    #[test]
    fn tiny_inputs() {
        let pts = vec![Vector3::zeros(), Vector3::x()];
        let cs = run_xmeans(&pts, &params(8, 0));
        assert_eq!(cs.k(), 1);
        assert_eq!(cs.assignments, vec![0, 0]);
        let same = vec![Vector3::new(1.0, 1.0, 1.0); 10];
        assert_eq!(run_xmeans(&same, &params(8, 0)).k(), 1);
    }
}
