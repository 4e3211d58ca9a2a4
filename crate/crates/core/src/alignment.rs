//! Rigid alignment: least-squares fit from point pairs, RANSAC over
//! descriptor correspondences, and point-to-point ICP on the full surfaces.

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{centroid, rank_at_least_two, sorted_eigen};
use crate::matching::Correspondence;
use crate::pointcloud::{PointCloud, RigidTransform};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub transform: RigidTransform,
    /// Indices into the correspondence list that are inliers under `transform`.
    pub inlier_indices: Vec<usize>,
    pub ransac_inlier_ratio: f64,
    /// Mean point-to-point distance over the final ICP pairs.
    pub icp_final_error: f64,
    pub iterations_used: usize,
    /// ICP mean residual per accepted iteration, starting with the initial pose.
    pub error_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    pub inlier_tol: f64,
    pub max_iters: usize,
    pub seed: u64,
    /// Reject samples whose pairwise edge lengths disagree by more than
    /// `2 · inlier_tol` before fitting.
    pub edge_prefilter: bool,
}

impl RansacParams {
    pub fn for_resolution(r: f64, seed: u64) -> Self {
        RansacParams {
            inlier_tol: 2.0 * r,
            max_iters: 2000,
            seed,
            edge_prefilter: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcpParams {
    pub max_corr_dist: f64,
    pub max_iters: usize,
    pub eps: f64,
}

impl IcpParams {
    pub fn for_resolution(r: f64) -> Self {
        IcpParams {
            max_corr_dist: 5.0 * r,
            max_iters: 100,
            eps: 1e-6,
        }
    }
}

/// Least-squares rigid transform taking `src[i]` to `dst[i]` (SVD, with the
/// determinant forced to +1).
pub fn estimate_rigid_from_triplets(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        return Err(Error::AlignmentFailed(format!(
            "{} source points but {} target points",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(Error::TooFewPoints {
            needed: 3,
            got: src.len(),
        });
    }
    let cs = centroid(src).expect("non-empty");
    let cd = centroid(dst).expect("non-empty");
    let mut h = Matrix3::zeros();
    let mut s_scatter = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let a = s - cs;
        h += a * (d - cd).transpose();
        s_scatter += a * a.transpose();
    }
    if !rank_at_least_two(&sorted_eigen(&s_scatter).0) {
        return Err(Error::RankDeficient("collinear correspondences"));
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("requested");
    let v_t = svd.v_t.expect("requested");
    let mut v = v_t.transpose();
    if (v * u.transpose()).determinant() < 0.0 {
        let mut col = v.column_mut(2);
        col *= -1.0;
    }
    let rotation = v * u.transpose();
    Ok(RigidTransform {
        rotation,
        translation: cd - rotation * cs,
    })
}

fn inliers(
    t: &RigidTransform,
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    tol: f64,
) -> (Vec<usize>, f64) {
    let mut idx = Vec::new();
    let mut residual = 0.0;
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        let e = (t.apply_point(s) - d).norm();
        if e < tol {
            idx.push(i);
            residual += e;
        }
    }
    (idx, residual)
}

fn edges_agree(src: &[Vector3<f64>], dst: &[Vector3<f64>], pick: &[usize], tol: f64) -> bool {
    (0..3).all(|a| {
        let b = (a + 1) % 3;
        let ls = (src[pick[a]] - src[pick[b]]).norm();
        let ld = (dst[pick[a]] - dst[pick[b]]).norm();
        (ls - ld).abs() <= 2.0 * tol
    })
}

/// RANSAC over correspondence positions. The best sample model (most
/// inliers, then smallest summed residual) is refit on its inliers until the
/// inlier set stops changing.
pub fn ransac_align(
    correspondences: &[Correspondence],
    src: &PointCloud,
    dst: &PointCloud,
    params: &RansacParams,
) -> Result<AlignmentResult> {
    let n = correspondences.len();
    if n < 3 {
        return Err(Error::AlignmentFailed(format!(
            "{n} correspondences, need 3"
        )));
    }
    let sp: Vec<Vector3<f64>> = correspondences
        .iter()
        .map(|c| *src.position(c.source_keypoint))
        .collect();
    let dp: Vec<Vector3<f64>> = correspondences
        .iter()
        .map(|c| *dst.position(c.target_keypoint))
        .collect();
    let tol = params.inlier_tol;

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(RigidTransform, Vec<usize>, f64)> = None;
    for _ in 0..params.max_iters {
        let pick = sample(&mut rng, n, 3).into_vec();
        if params.edge_prefilter && !edges_agree(&sp, &dp, &pick, tol) {
            continue;
        }
        let s3: Vec<Vector3<f64>> = pick.iter().map(|&i| sp[i]).collect();
        let d3: Vec<Vector3<f64>> = pick.iter().map(|&i| dp[i]).collect();
        let Ok(t) = estimate_rigid_from_triplets(&s3, &d3) else {
            continue;
        };
        let (idx, res) = inliers(&t, &sp, &dp, tol);
        let better = match &best {
            None => true,
            Some((_, bi, br)) => idx.len() > bi.len() || (idx.len() == bi.len() && res < *br),
        };
        if better {
            best = Some((t, idx, res));
        }
    }
    let Some((mut t, mut idx, _)) = best else {
        return Err(Error::AlignmentFailed("no valid sample".into()));
    };

    for _ in 0..10 {
        if idx.len() < 3 {
            break;
        }
        let s_in: Vec<Vector3<f64>> = idx.iter().map(|&i| sp[i]).collect();
        let d_in: Vec<Vector3<f64>> = idx.iter().map(|&i| dp[i]).collect();
        let Ok(refit) = estimate_rigid_from_triplets(&s_in, &d_in) else {
            break;
        };
        let (next, _) = inliers(&refit, &sp, &dp, tol);
        if next.len() < idx.len() {
            break;
        }
        let stable = next == idx;
        t = refit;
        idx = next;
        if stable {
            break;
        }
    }
    if idx.len() < 3 {
        return Err(Error::AlignmentFailed(format!(
            "best model has {} inliers",
            idx.len()
        )));
    }
    Ok(AlignmentResult {
        transform: t,
        ransac_inlier_ratio: idx.len() as f64 / n as f64,
        inlier_indices: idx,
        icp_final_error: 0.0,
        iterations_used: params.max_iters,
        error_history: Vec::new(),
    })
}

/// Nearest-target pairs for the transformed source, capped at `max_dist`.
/// Returns `(source index, target index, distance)`.
fn closest_pairs(
    src: &PointCloud,
    dst: &PointCloud,
    t: &RigidTransform,
    max_dist: f64,
) -> Vec<(usize, usize, f64)> {
    let found: Vec<Option<(usize, usize, f64)>> = (0..src.len())
        .into_par_iter()
        .map(|i| {
            let (j, d) = dst.nearest(&t.apply_point(src.position(i)));
            (d < max_dist).then_some((i, j, d))
        })
        .collect();
    found.into_iter().flatten().collect()
}

fn mean_distance(pairs: &[(usize, usize, f64)]) -> f64 {
    pairs.iter().map(|p| p.2).sum::<f64>() / pairs.len() as f64
}

/// Point-to-point ICP. An update is kept only if it does not raise the mean
/// residual, so `error_history` is non-increasing.
pub fn icp_refine(
    src: &PointCloud,
    dst: &PointCloud,
    init: &RigidTransform,
    params: &IcpParams,
) -> Result<AlignmentResult> {
    let mut t = *init;
    let mut pairs = closest_pairs(src, dst, &t, params.max_corr_dist);
    if pairs.is_empty() {
        return Err(Error::NoCorrespondences(params.max_corr_dist));
    }
    let mut err = mean_distance(&pairs);
    let mut history = vec![err];
    let mut iterations = 0;
    while iterations < params.max_iters {
        iterations += 1;
        let s: Vec<Vector3<f64>> = pairs.iter().map(|p| *src.position(p.0)).collect();
        let d: Vec<Vector3<f64>> = pairs.iter().map(|p| *dst.position(p.1)).collect();
        let Ok(candidate) = estimate_rigid_from_triplets(&s, &d) else {
            break;
        };
        let next_pairs = closest_pairs(src, dst, &candidate, params.max_corr_dist);
        if next_pairs.is_empty() {
            break;
        }
        let next_err = mean_distance(&next_pairs);
        if next_err > err {
            break;
        }
        let change = err - next_err;
        t = candidate;
        pairs = next_pairs;
        err = next_err;
        history.push(err);
        if change < params.eps {
            break;
        }
    }
    Ok(AlignmentResult {
        transform: t,
        inlier_indices: Vec::new(),
        ransac_inlier_ratio: 0.0,
        icp_final_error: err,
        iterations_used: iterations,
        error_history: history,
    })
}
