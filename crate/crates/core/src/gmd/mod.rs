//! Gaussian mixture descriptors.
//!
//! A descriptor is built from a keypoint's support patch expressed in its
//! local reference frame. The patch is split into convex and concave regions
//! against a plane fitted to the patch boundary; each region gets its own
//! mixture (x-means picks k, EM refines it) and the two are merged with
//! weights proportional to the region sizes.

mod em;
mod io;
mod mixture;
mod xmeans;

pub use em::{em_fit, init_from_clusters, EmParams, EmState};
pub use io::{
    decode_descriptors, descriptors_csv, encode_descriptors, read_descriptors, write_descriptors,
};
pub use mixture::{gaussian_log_pdf, gaussian_pdf, gmm_pdf, standard_normal_peak, Gmm};
pub use xmeans::{run_xmeans, ClusterSet, XMeansParams};

use log::warn;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::mix_seed;
use crate::keypoints::{extract_patch, MIN_PATCH_POINTS};
use crate::lrf::{compute_lrf, to_local_frame, Lrf};
use crate::pointcloud::PointCloud;
use crate::regions::{classify_concavity, extract_edge_points, fit_plane, ConcavityRule, CONVEX};

/// Regions smaller than this are folded into the other region before fitting.
pub const MIN_REGION_POINTS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmdParams {
    /// Support radius.
    pub radius: f64,
    pub k_max: usize,
    pub tau: f64,
    pub max_iters: usize,
    /// Covariance eigenvalue floor (squared length).
    pub var_floor: f64,
    pub min_patch_points: usize,
    pub min_region_points: usize,
    pub concavity_rule: ConcavityRule,
}

impl GmdParams {
    /// Defaults for a cloud of resolution `r`: `R = radius_mult · r`.
    pub fn for_resolution(r: f64, radius_mult: f64) -> Self {
        GmdParams {
            radius: radius_mult * r,
            k_max: 8,
            tau: 1e-6,
            max_iters: 200,
            var_floor: (0.01 * r).powi(2),
            min_patch_points: MIN_PATCH_POINTS,
            min_region_points: MIN_REGION_POINTS,
            concavity_rule: ConcavityRule::NormalDot,
        }
    }

    fn em(&self) -> EmParams {
        EmParams {
            tau: self.tau,
            max_iters: self.max_iters,
            var_floor: self.var_floor,
            ..EmParams::default()
        }
    }
}

/// Descriptor of one keypoint. Convex components come first in `mixture`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gmd {
    /// Index of the keypoint's point in its cloud.
    pub keypoint: usize,
    pub mixture: Gmm,
    /// Convex component count.
    pub k1: usize,
    /// Concave component count.
    pub k2: usize,
    pub e_conc: usize,
    pub e_conv: usize,
    /// Not stored in the binary sidecar, so absent after decoding.
    pub lrf: Option<Lrf>,
}

impl Gmd {
    pub fn k(&self) -> usize {
        self.mixture.k()
    }

    pub fn point_count(&self) -> usize {
        self.e_conc + self.e_conv
    }

    /// Number of scalars in the flattened mixture: weights, means, covariances.
    pub fn serialized_len(&self) -> usize {
        13 * self.k()
    }
}

/// Fits one region: x-means for k and initial clusters, then EM.
pub fn build_regional_gmd(points: &[Vector3<f64>], params: &GmdParams, seed: u64) -> Result<Gmm> {
    if points.len() < 2 {
        return Err(Error::TooFewPoints {
            needed: 2,
            got: points.len(),
        });
    }
    let clusters = run_xmeans(
        points,
        &XMeansParams {
            k_max: params.k_max,
            seed,
            var_floor: params.var_floor,
        },
    );
    let (g, _) = em_fit(points, &clusters, &params.em())?;
    Ok(g)
}

/// Concatenates the regional mixtures (convex first) and rescales each
/// region's weights by its share of the patch points.
pub fn merge_gmd(
    keypoint: usize,
    conc: Option<&Gmm>,
    conv: Option<&Gmm>,
    e_conc: usize,
    e_conv: usize,
    lrf: Option<Lrf>,
) -> Result<Gmd> {
    let e_conc = if conc.is_some() { e_conc } else { 0 };
    let e_conv = if conv.is_some() { e_conv } else { 0 };
    let total = (e_conc + e_conv) as f64;
    if total == 0.0 {
        return Err(Error::EmptyDescriptor);
    }
    let mut mixture = Gmm {
        weights: Vec::new(),
        means: Vec::new(),
        covariances: Vec::new(),
    };
    let mut append = |g: &Gmm, share: f64| {
        mixture.weights.extend(g.weights.iter().map(|w| w * share));
        mixture.means.extend_from_slice(&g.means);
        mixture.covariances.extend_from_slice(&g.covariances);
    };
    let k1 = conv.map_or(0, |g| {
        append(g, e_conv as f64 / total);
        g.k()
    });
    let k2 = conc.map_or(0, |g| {
        append(g, e_conc as f64 / total);
        g.k()
    });
    Ok(Gmd {
        keypoint,
        mixture,
        k1,
        k2,
        e_conc,
        e_conv,
        lrf,
    })
}

/// Full descriptor for the point `keypoint` of `cloud`. The cloud must carry
/// normals. `seed` is the run seed; the per-keypoint stream is derived from it.
pub fn compute_gmd(
    cloud: &PointCloud,
    keypoint: usize,
    params: &GmdParams,
    seed: u64,
) -> Result<Gmd> {
    let patch = extract_patch(cloud, keypoint, params.radius, params.min_patch_points)?;
    let lrf = compute_lrf(cloud, &patch)?;
    let local = to_local_frame(cloud, &patch, &lrf);
    let edges = extract_edge_points(cloud, &patch)?;
    let plane = fit_plane(cloud, &edges, &lrf.z_axis)?;
    let labels = classify_concavity(cloud, &patch, &plane, params.concavity_rule)?;

    let mut conv = Vec::new();
    let mut conc = Vec::new();
    for (p, &l) in local.iter().zip(&labels.labels) {
        if l == CONVEX {
            conv.push(*p);
        } else {
            conc.push(*p);
        }
    }
    // Fold an undersized region into the larger one.
    if conv.len() < params.min_region_points || conc.len() < params.min_region_points {
        if conv.len() >= conc.len() {
            if !conc.is_empty() {
                warn!(
                    "keypoint {keypoint}: concave region of {} points folded into convex",
                    conc.len()
                );
            }
            conv.append(&mut conc);
        } else {
            if !conv.is_empty() {
                warn!(
                    "keypoint {keypoint}: convex region of {} points folded into concave",
                    conv.len()
                );
            }
            conc.append(&mut conv);
        }
    }

    let kp_seed = mix_seed(seed, keypoint as u64);
    let fit = |pts: &[Vector3<f64>], region: u64| -> Result<Option<Gmm>> {
        if pts.is_empty() {
            Ok(None)
        } else {
            build_regional_gmd(pts, params, mix_seed(kp_seed, region)).map(Some)
        }
    };
    let conv_g = fit(&conv, 0)?;
    let conc_g = fit(&conc, 1)?;
    merge_gmd(
        keypoint,
        conc_g.as_ref(),
        conv_g.as_ref(),
        conc.len(),
        conv.len(),
        Some(lrf),
    )
}
