//! `gmd`: describe, match, align and evaluate fractured surface pairs.
//!
//! Exit codes: 0 accepted (or the stage succeeded), 2 rejected, 1 error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use gmd_core::gmd::{descriptors_csv, read_descriptors, write_descriptors};
use gmd_core::matching::{correspondences_csv, match_surfaces, parse_correspondences_csv, MatchParams};
use gmd_core::metrics::MatchReport;
use gmd_core::pipeline::{
    align_correspondences, describe_surface, ensure_normals, evaluate_alignment, keypoints_csv, matching_pr_curve,
    pair_resolution, run_pipeline_clouds, write_outputs, ReportFormat,
};
use gmd_core::pointcloud::ply::{load_ply, save_ply};
use gmd_core::pointcloud::compute_resolution;
use gmd_core::synth::{add_gaussian_noise, apply_abrasion, generate_fragment_pair, parse_ground_truth};
use gmd_core::{Error, MatchDecision, PointCloud, Result, RigidTransform, RunConfig, SynthConfig};

#[derive(Parser, Debug)]
#[command(name = "gmd", version, about = "Pairwise matching of fractured surfaces with Gaussian mixture descriptors")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat `key = value` configuration file. Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory for all outputs.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,

    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    report_format: Format,

    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => ReportFormat::Json,
            Format::Csv => ReportFormat::Csv,
        }
    }
}

// One optional flag per configuration key, named like the key.
macro_rules! config_flags {
    ($($(#[$doc:meta])* $field:ident: $ty:ty),* $(,)?) => {
        #[derive(Args, Debug, Default)]
        struct ConfigFlags {
            $($(#[$doc])* #[arg(long, global = true)] $field: Option<$ty>,)*
        }

        impl ConfigFlags {
            fn overrides(&self) -> Vec<(&'static str, String)> {
                let mut out = Vec::new();
                $(if let Some(v) = &self.$field {
                    out.push((stringify!($field), v.to_string()));
                })*
                out
            }
        }
    };
}

config_flags! {
    /// Support radius in units of the resolution.
    radius_mult: f64,
    /// PoC neighbourhood in units of the resolution.
    chi_mult: f64,
    /// localAoNV cube side in units of the resolution.
    box_mult: f64,
    zeta_mult: f64,
    psi_mult: f64,
    ratio: f64,
    min_matches: usize,
    min_inliers: usize,
    ransac_tol_mult: f64,
    ransac_iters: usize,
    icp_max_corr_mult: f64,
    icp_max_iters: usize,
    icp_eps: f64,
    em_tau: f64,
    em_max_iters: usize,
    k_max: usize,
    var_floor_mult: f64,
    normal_neighbors: usize,
    keypoint_min_scale_mult: f64,
    keypoint_octaves: usize,
    keypoint_scales: usize,
    keypoint_contrast: f64,
    keypoint_nms_mult: f64,
    /// `normal_dot` or `signed_distance`.
    concavity_rule: String,
    seed: u64,
    /// Worker threads, 0 for all cores.
    threads: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Detect keypoints and write descriptor sidecars for one surface.
    Describe {
        cloud: PathBuf,
        /// Resolution to scale lengths by; measured on the cloud if absent.
        #[arg(long)]
        resolution: Option<f64>,
    },
    /// Match two descriptor sidecars and decide whether the surfaces match.
    Match { source: PathBuf, target: PathBuf },
    /// Estimate the transform from correspondences with RANSAC and ICP.
    Align {
        source: PathBuf,
        target: PathBuf,
        correspondences: PathBuf,
        #[arg(long)]
        resolution: Option<f64>,
    },
    /// Compute the metrics of a given alignment.
    Evaluate {
        source: PathBuf,
        target: PathBuf,
        transform: PathBuf,
        /// Correspondences for the RMSE.
        #[arg(long)]
        correspondences: Option<PathBuf>,
        #[arg(long)]
        resolution: Option<f64>,
    },
    /// Write a synthetic surface pair and its ground truth.
    Synth {
        /// Gaussian noise in units of the clean resolution.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Spherical defects removed from the source surface.
        #[arg(long, default_value_t = 0)]
        defects: usize,
        /// Defect radius in units of the clean resolution.
        #[arg(long, default_value_t = 4.0)]
        defect_radius_mult: f64,
        /// Fraction of the source extent covered by the target.
        #[arg(long, default_value_t = 1.0)]
        overlap: f64,
    },
    /// Run detection, description, matching, alignment and evaluation.
    Pipeline {
        source: PathBuf,
        target: PathBuf,
        /// Ground-truth file; enables the precision/recall curve.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        pr_steps: usize,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply_text(&text)?;
    }
    for (k, v) in cli.flags.overrides() {
        cfg.set(k, &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_cloud(path: &Path, cfg: &RunConfig) -> Result<PointCloud> {
    let cloud = load_ply(path).map_err(|e| e.in_stage("load"))?;
    ensure_normals(cloud, cfg.normal_neighbors).map_err(|e| e.in_stage("normals"))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_report(dir: &Path, report: &MatchReport, format: Format) -> Result<()> {
    match format {
        Format::Json => write(&dir.join("report.json"), report.to_json()),
        Format::Csv => write(&dir.join("report.csv"), report.to_csv()),
    }
}

fn stem(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.strip_suffix(".ply").unwrap_or(&name).to_string()
}

fn exit_for(accepted: bool) -> u8 {
    if accepted {
        0
    } else {
        2
    }
}

fn run(cli: Cli) -> Result<u8> {
    let cfg = load_config(&cli)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let out = cli.out_dir.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    match &cli.command {
        Command::Describe { cloud, resolution } => {
            let c = load_cloud(cloud, &cfg)?;
            let r = match resolution {
                Some(r) => *r,
                None => compute_resolution(&c).map_err(|e| e.in_stage("resolution"))?,
            };
            let d = describe_surface(&c, r, &cfg, cfg.seed).map_err(|e| e.in_stage("describe"))?;
            let name = stem(cloud);
            write(&out.join(format!("{name}.keypoints.csv")), keypoints_csv(&c, &d.keypoints))?;
            write_descriptors(&out.join(format!("{name}.gmd.bin")), &d.descriptors)?;
            write(&out.join(format!("{name}.gmd.csv")), descriptors_csv(&d.descriptors))?;
            info!("{} keypoints, {} descriptors, {} skipped", d.keypoints.len(), d.descriptors.len(), d.skipped.len());
            Ok(0)
        }
        Command::Match { source, target } => {
            let a = read_descriptors(source).map_err(|e| e.in_stage("load"))?;
            let b = read_descriptors(target).map_err(|e| e.in_stage("load"))?;
            let params = MatchParams {
                zeta_mult: cfg.zeta_mult,
                psi_mult: cfg.psi_mult,
                ratio: cfg.ratio,
                min_count: cfg.min_matches,
            };
            let decision = if a.is_empty() || b.is_empty() {
                gmd_core::matching::decide_surface_pair(Vec::new(), 0.0, 0.0, cfg.min_matches)
            } else {
                match_surfaces(&a, &b, &params)
            };
            write(&out.join("correspondences.csv"), correspondences_csv(&decision.correspondences))?;
            write_report(out, &MatchReport::empty(&decision), cli.report_format)?;
            Ok(exit_for(decision.accepted))
        }
        Command::Align { source, target, correspondences, resolution } => {
            let (src, dst) = (load_cloud(source, &cfg)?, load_cloud(target, &cfg)?);
            let text = std::fs::read_to_string(correspondences).map_err(|e| Error::io(correspondences, e))?;
            let corrs = parse_correspondences_csv(&text)?;
            let r = match resolution {
                Some(r) => *r,
                None => pair_resolution(&src, &dst)?,
            };
            match align_correspondences(&corrs, &src, &dst, r, &cfg) {
                Ok(al) if al.inlier_indices.len() >= cfg.min_inliers => {
                    write(&out.join("transform.txt"), al.transform.to_text())?;
                    Ok(0)
                }
                Ok(al) => {
                    eprintln!("rejected: {} RANSAC inliers, {} required", al.inlier_indices.len(), cfg.min_inliers);
                    Ok(2)
                }
                Err(Error::AlignmentFailed(msg)) => {
                    eprintln!("rejected: {msg}");
                    Ok(2)
                }
                Err(e) => Err(e),
            }
        }
        Command::Evaluate { source, target, transform, correspondences, resolution } => {
            let (src, dst) = (load_cloud(source, &cfg)?, load_cloud(target, &cfg)?);
            let text = std::fs::read_to_string(transform).map_err(|e| Error::io(transform, e))?;
            let t = RigidTransform::from_text(&text)?;
            let corrs = match correspondences {
                Some(p) => parse_correspondences_csv(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
                None => Vec::new(),
            };
            let r = match resolution {
                Some(r) => *r,
                None => pair_resolution(&src, &dst)?,
            };
            // localAoNV boxes sit on the target's keypoints.
            let target_desc = describe_surface(&dst, r, &cfg, cfg.seed).map_err(|e| e.in_stage("keypoints"))?;
            let keys: Vec<usize> = target_desc.keypoints.iter().map(|k| k.index).collect();
            let decision = MatchDecision {
                aggregate_distance: f64::INFINITY,
                accepted: true,
                zeta: 0.0,
                psi: 0.0,
                correspondences: corrs,
            };
            let mut report = MatchReport::empty(&decision);
            evaluate_alignment(&mut report, &src, &dst, &t, &keys, &decision.correspondences, r, &cfg);
            write_report(out, &report, cli.report_format)?;
            Ok(0)
        }
        Command::Synth { noise, defects, defect_radius_mult, overlap } => {
            let sc = SynthConfig {
                seed: cfg.seed,
                overlap_fraction: *overlap,
                ..SynthConfig::default()
            };
            let (mut a, mut b, gt) = generate_fragment_pair(&sc)?;
            let r = compute_resolution(&a)?;
            if *noise > 0.0 {
                a = add_gaussian_noise(&a, noise * r, cfg.seed.wrapping_add(1))?;
                b = add_gaussian_noise(&b, noise * r, cfg.seed.wrapping_add(2))?;
            }
            if *defects > 0 {
                a = apply_abrasion(&a, *defects, defect_radius_mult * r, cfg.seed.wrapping_add(3))?;
            }
            save_ply(&a, out.join("source.ply"))?;
            save_ply(&b, out.join("target.ply"))?;
            let mut text = gt.to_text(&sc);
            text.push_str(&format!(
                "noise_mult = {noise}\ndefects = {defects}\ndefect_radius_mult = {defect_radius_mult}\nclean_resolution = {r}\n"
            ));
            write(&out.join("ground_truth.txt"), text)?;
            Ok(0)
        }
        Command::Pipeline { source, target, ground_truth, pr_steps } => {
            let (src, dst) = (load_cloud(source, &cfg)?, load_cloud(target, &cfg)?);
            let output = run_pipeline_clouds(&src, &dst, &cfg)?;
            write_outputs(out, &output, cli.report_format.into())?;
            write(&out.join("source.keypoints.csv"), keypoints_csv(&src, &output.source.keypoints))?;
            write(&out.join("target.keypoints.csv"), keypoints_csv(&dst, &output.target.keypoints))?;
            if let Some(gt) = ground_truth {
                let truth = parse_ground_truth(&std::fs::read_to_string(gt).map_err(|e| Error::io(gt, e))?)?;
                match matching_pr_curve(&output, &src, &dst, &truth, &cfg, *pr_steps) {
                    Ok(curve) => write(&out.join("pr_curve.csv"), curve.to_csv())?,
                    Err(e) => log::warn!("precision/recall curve unavailable: {e}"),
                }
            }
            println!(
                "{} with {} correspondences",
                if output.accepted() { "accepted" } else { "rejected" },
                output.decision.correspondences.len()
            );
            Ok(exit_for(output.accepted()))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // Usage errors exit with 1, keeping 2 for rejected matches.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
