//! End-to-end pairwise matching: detect, describe, match, decide, align,
//! evaluate, and write the results.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{icp_refine, ransac_align, AlignmentResult, IcpParams, RansacParams};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::mix_seed;
use crate::gmd::{compute_gmd, descriptors_csv, write_descriptors, Gmd, GmdParams};
use crate::keypoints::{detect_keypoints, Keypoint, KeypointParams};
use crate::matching::{
    correspondences_csv, match_descriptors, match_surfaces, Correspondence, MatchDecision,
    MatchParams,
};
use crate::metrics::{
    angle_stats, aonv, ground_truth_pairs, local_aonv, poc, pr_curve, rmse, MatchReport, PrCurve,
};
use crate::pointcloud::ply::load_ply;
use crate::pointcloud::{
    apply_transform, compute_resolution, default_viewpoint, estimate_normals, PointCloud,
    RigidTransform,
};

/// Keypoints, descriptors, and skipped keypoints of one surface.
#[derive(Debug, Clone)]
pub struct SurfaceDescription {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Gmd>,
    /// `(point index, reason code)` for keypoints without a descriptor.
    pub skipped: Vec<(usize, &'static str)>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub resolution: f64,
    pub source: SurfaceDescription,
    pub target: SurfaceDescription,
    pub decision: MatchDecision,
    /// Present when the match was accepted and aligned.
    pub alignment: Option<AlignmentResult>,
    pub report: MatchReport,
}

impl PipelineOutput {
    pub fn accepted(&self) -> bool {
        self.decision.accepted
    }

    /// Process exit code: 0 accepted, 2 rejected.
    pub fn exit_code(&self) -> i32 {
        if self.accepted() {
            0
        } else {
            2
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Estimates normals when the cloud arrives without them.
pub fn ensure_normals(cloud: PointCloud, k: usize) -> Result<PointCloud> {
    if cloud.has_normals() {
        return Ok(cloud);
    }
    let vp = default_viewpoint(&cloud);
    estimate_normals(&cloud, k, &vp)
}

pub fn keypoint_params(r: f64, cfg: &RunConfig) -> KeypointParams {
    KeypointParams {
        min_scale: cfg.keypoint_min_scale_mult * r,
        octaves: cfg.keypoint_octaves,
        scales_per_octave: cfg.keypoint_scales,
        contrast_threshold: cfg.keypoint_contrast,
        nms_radius: cfg.keypoint_nms_mult * r,
        ..KeypointParams::for_resolution(r)
    }
}

pub fn gmd_params(r: f64, cfg: &RunConfig) -> GmdParams {
    GmdParams {
        k_max: cfg.k_max,
        tau: cfg.em_tau,
        max_iters: cfg.em_max_iters,
        var_floor: (cfg.var_floor_mult * r).powi(2),
        concavity_rule: cfg.concavity_rule,
        ..GmdParams::for_resolution(r, cfg.radius_mult)
    }
}

/// Detects keypoints and computes a descriptor for each, in parallel.
/// Keypoints whose descriptor fails are skipped with their reason code.
pub fn describe_surface(
    cloud: &PointCloud,
    r: f64,
    cfg: &RunConfig,
    seed: u64,
) -> Result<SurfaceDescription> {
    let keypoints =
        detect_keypoints(cloud, &keypoint_params(r, cfg)).map_err(|e| e.in_stage("keypoints"))?;
    let params = gmd_params(r, cfg);
    let results: Vec<Result<Gmd>> = keypoints
        .par_iter()
        .map(|k| compute_gmd(cloud, k.index, &params, seed))
        .collect();
    let mut descriptors = Vec::new();
    let mut skipped = Vec::new();
    for (k, res) in keypoints.iter().zip(results) {
        match res {
            Ok(g) => descriptors.push(g),
            Err(e) => skipped.push((k.index, e.reason_code())),
        }
    }
    if !skipped.is_empty() {
        info!(
            "{}: {} of {} keypoints skipped",
            cloud.source_id(),
            skipped.len(),
            keypoints.len()
        );
    }
    Ok(SurfaceDescription {
        keypoints,
        descriptors,
        skipped,
    })
}

/// Common resolution for a pair: the mean of both clouds' resolutions.
pub fn pair_resolution(src: &PointCloud, dst: &PointCloud) -> Result<f64> {
    Ok(0.5 * (compute_resolution(src)? + compute_resolution(dst)?))
}

pub fn run_pipeline_clouds(
    src: &PointCloud,
    dst: &PointCloud,
    cfg: &RunConfig,
) -> Result<PipelineOutput> {
    let start = Instant::now();
    cfg.validate()?;
    let r = pair_resolution(src, dst).map_err(|e| e.in_stage("resolution"))?;
    let source =
        describe_surface(src, r, cfg, mix_seed(cfg.seed, 0)).map_err(|e| e.in_stage("describe"))?;
    let target =
        describe_surface(dst, r, cfg, mix_seed(cfg.seed, 1)).map_err(|e| e.in_stage("describe"))?;

    let match_params = MatchParams {
        zeta_mult: cfg.zeta_mult,
        psi_mult: cfg.psi_mult,
        ratio: cfg.ratio,
        min_count: cfg.min_matches,
    };
    let mut decision = if source.descriptors.is_empty() || target.descriptors.is_empty() {
        warn!("no descriptors on one side; rejecting");
        crate::matching::decide_surface_pair(Vec::new(), 0.0, 0.0, cfg.min_matches)
    } else {
        match_surfaces(&source.descriptors, &target.descriptors, &match_params)
    };

    let mut alignment = None;
    if decision.accepted {
        match align_correspondences(&decision.correspondences, src, dst, r, cfg) {
            Ok(al) if al.inlier_indices.len() >= cfg.min_inliers => alignment = Some(al),
            Ok(al) => {
                warn!(
                    "only {} RANSAC inliers, {} required; rejecting",
                    al.inlier_indices.len(),
                    cfg.min_inliers
                );
                decision.accepted = false;
            }
            Err(e @ Error::Stage { .. }) => return Err(e),
            Err(e) => {
                warn!("accepted match could not be aligned ({e}); rejecting");
                decision.accepted = false;
            }
        }
    }

    let mut report = MatchReport::empty(&decision);
    if let Some(al) = &alignment {
        let dst_keys: Vec<usize> = target.keypoints.iter().map(|k| k.index).collect();
        let inliers: Vec<_> = al
            .inlier_indices
            .iter()
            .map(|&i| decision.correspondences[i])
            .collect();
        evaluate_alignment(
            &mut report,
            src,
            dst,
            &al.transform,
            &dst_keys,
            &inliers,
            r,
            cfg,
        );
        report.ransac_inlier_ratio = Some(al.ransac_inlier_ratio);
        report.icp_final_error = Some(al.icp_final_error);
    }
    report.runtime_seconds = start.elapsed().as_secs_f64();
    Ok(PipelineOutput {
        resolution: r,
        source,
        target,
        decision,
        alignment,
        report,
    })
}

/// RANSAC on the correspondences, then ICP from the RANSAC estimate. The
/// inlier set and ratio come from RANSAC; the transform, error and history
/// from ICP.
pub fn align_correspondences(
    correspondences: &[Correspondence],
    src: &PointCloud,
    dst: &PointCloud,
    r: f64,
    cfg: &RunConfig,
) -> Result<AlignmentResult> {
    let ransac = RansacParams {
        inlier_tol: cfg.ransac_tol_mult * r,
        max_iters: cfg.ransac_iters,
        seed: mix_seed(cfg.seed, 2),
        edge_prefilter: true,
    };
    let coarse = ransac_align(correspondences, src, dst, &ransac)?;
    let icp = IcpParams {
        max_corr_dist: cfg.icp_max_corr_mult * r,
        max_iters: cfg.icp_max_iters,
        eps: cfg.icp_eps,
    };
    let fine = icp_refine(src, dst, &coarse.transform, &icp).map_err(|e| e.in_stage("icp"))?;
    Ok(AlignmentResult {
        inlier_indices: coarse.inlier_indices,
        ransac_inlier_ratio: coarse.ransac_inlier_ratio,
        ..fine
    })
}

/// Fills the alignment metrics of `report` for `src` moved by `transform`.
/// Metrics that cannot be computed stay `None` and are logged.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_alignment(
    report: &mut MatchReport,
    src: &PointCloud,
    dst: &PointCloud,
    transform: &RigidTransform,
    dst_keypoints: &[usize],
    correspondences: &[Correspondence],
    r: f64,
    cfg: &RunConfig,
) {
    let aligned = apply_transform(src, transform);
    report.poc = metric("poc", poc(&aligned, dst, cfg.chi_mult * r));
    if let Some(a) = metric("aonv", aonv(&aligned, dst)) {
        report.aonv = Some(a.folded);
        report.aonv_raw = Some(a.raw);
    }
    report.local_aonv = metric(
        "local_aonv",
        local_aonv(&aligned, dst, dst_keypoints, cfg.box_mult * r),
    );
    if let Some(s) = metric("angles", angle_stats(&aligned, dst)) {
        report.max_angle = Some(s.max);
        report.min_angle = Some(s.min);
        report.mean_angle = Some(s.mean);
    }
    if let Some(e) = metric("rmse", rmse(correspondences, src, dst, transform)) {
        report.rmse_x = Some(e.x);
        report.rmse_y = Some(e.y);
        report.rmse_z = Some(e.z);
        report.rmse_total = Some(e.total);
    }
}

/// Precision/recall of descriptor matching against a known transform.
/// Candidates are the mutual nearest neighbours passing the ratio test with
/// no distance cut; thresholds are `steps` evenly spaced distances up to the
/// largest candidate distance. A keypoint pair is correct when the source
/// keypoint lands within `2r` of the target keypoint.
pub fn matching_pr_curve(
    output: &PipelineOutput,
    src: &PointCloud,
    dst: &PointCloud,
    truth: &RigidTransform,
    cfg: &RunConfig,
    steps: usize,
) -> Result<PrCurve> {
    let candidates = match_descriptors(
        &output.source.descriptors,
        &output.target.descriptors,
        f64::INFINITY,
        cfg.ratio,
    );
    let src_keys: Vec<usize> = output
        .source
        .descriptors
        .iter()
        .map(|d| d.keypoint)
        .collect();
    let dst_keys: Vec<usize> = output
        .target
        .descriptors
        .iter()
        .map(|d| d.keypoint)
        .collect();
    let truth_pairs = ground_truth_pairs(
        src,
        &src_keys,
        dst,
        &dst_keys,
        truth,
        2.0 * output.resolution,
    );
    let top = candidates.iter().map(|c| c.distance).fold(0.0, f64::max);
    let steps = steps.max(1);
    let thresholds: Vec<f64> = (1..=steps).map(|i| top * i as f64 / steps as f64).collect();
    pr_curve(&candidates, &truth_pairs, &thresholds)
}

fn metric<T>(name: &str, r: Result<T>) -> Option<T> {
    r.map_err(|e| warn!("metric {name} unavailable: {e}")).ok()
}

/// Loads both surfaces (estimating normals if absent) and runs the pipeline.
pub fn run_pipeline(src_path: &Path, dst_path: &Path, cfg: &RunConfig) -> Result<PipelineOutput> {
    let load = |p: &Path| -> Result<PointCloud> {
        let c = load_ply(p).map_err(|e| e.in_stage("load"))?;
        ensure_normals(c, cfg.normal_neighbors).map_err(|e| e.in_stage("normals"))
    };
    let src = load(src_path)?;
    let dst = load(dst_path)?;
    run_pipeline_clouds(&src, &dst, cfg)
}

pub fn keypoints_csv(cloud: &PointCloud, keypoints: &[Keypoint]) -> String {
    let mut s = String::from("index,x,y,z,response\n");
    for k in keypoints {
        let p = cloud.position(k.index);
        let _ = writeln!(s, "{},{},{},{},{}", k.index, p.x, p.y, p.z, k.response);
    }
    s
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `transform.txt` (accepted runs only), `correspondences.csv`,
/// `report.json` or `report.csv`, descriptor sidecars for both surfaces and
/// `timing.txt` with the wall-clock runtime. Everything except the timing
/// file is reproducible byte for byte.
pub fn write_outputs(out_dir: &Path, output: &PipelineOutput, format: ReportFormat) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    if let Some(al) = &output.alignment {
        write(&out_dir.join("transform.txt"), al.transform.to_text())?;
    }
    write(
        &out_dir.join("correspondences.csv"),
        correspondences_csv(&output.decision.correspondences),
    )?;
    match format {
        ReportFormat::Json => write(&out_dir.join("report.json"), output.report.to_json())?,
        ReportFormat::Csv => write(&out_dir.join("report.csv"), output.report.to_csv())?,
    }
    write_descriptors(&out_dir.join("source.gmd.bin"), &output.source.descriptors)?;
    write_descriptors(&out_dir.join("target.gmd.bin"), &output.target.descriptors)?;
    write(
        &out_dir.join("source.gmd.csv"),
        descriptors_csv(&output.source.descriptors),
    )?;
    write(
        &out_dir.join("target.gmd.csv"),
        descriptors_csv(&output.target.descriptors),
    )?;
    write(
        &out_dir.join("timing.txt"),
        format!("runtime_seconds = {}\n", output.report.runtime_seconds),
    )?;
    Ok(())
}
