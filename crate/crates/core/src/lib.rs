//! Pairwise matching of fractured 3D surfaces with Gaussian mixture
//! descriptors.
//!
//! The pipeline runs keypoint detection, local reference frames, a
//! concave/convex split of each support patch, regional mixture fitting
//! (x-means + EM), closed-form L2 matching between mixtures, RANSAC + ICP
//! alignment, and a set of evaluation metrics. See [`pipeline::run_pipeline`].

pub mod alignment;
pub mod config;
pub mod error;
pub mod geometry;
pub mod gmd;
pub mod keypoints;
pub mod lrf;
pub mod matching;
pub mod metrics;
pub mod pipeline;
pub mod pointcloud;
pub mod regions;
pub mod synth;

pub use alignment::AlignmentResult;
pub use config::RunConfig;
pub use error::{Error, Result};
pub use gmd::{Gmd, Gmm};
pub use keypoints::{Keypoint, SurfacePatch};
pub use lrf::Lrf;
pub use matching::{Correspondence, MatchDecision};
pub use metrics::{MatchReport, PrCurve};
pub use pipeline::{run_pipeline, PipelineOutput};
pub use pointcloud::{Plane, Point, PointCloud, RigidTransform};
pub use synth::{GroundTruth, SynthConfig};
