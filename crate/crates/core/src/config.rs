//! Run configuration: every tunable of the pipeline, read from a flat
//! `key = value` file. Length parameters are multipliers of the resolution.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regions::ConcavityRule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Support radius `R` in units of `r`.
    pub radius_mult: f64,
    /// PoC neighbourhood `χ` in units of `r`.
    pub chi_mult: f64,
    /// localAoNV cube side `l` in units of `r`.
    pub box_mult: f64,
    pub zeta_mult: f64,
    pub psi_mult: f64,
    pub ratio: f64,
    pub min_matches: usize,
    /// RANSAC inliers an accepted match must keep. Three are always
    /// consistent, so this is the geometric consensus on top of the
    /// descriptor decision.
    pub min_inliers: usize,
    pub ransac_tol_mult: f64,
    pub ransac_iters: usize,
    pub icp_max_corr_mult: f64,
    pub icp_max_iters: usize,
    pub icp_eps: f64,
    pub em_tau: f64,
    pub em_max_iters: usize,
    pub k_max: usize,
    /// Covariance floor standard deviation in units of `r`.
    pub var_floor_mult: f64,
    pub normal_neighbors: usize,
    pub keypoint_min_scale_mult: f64,
    pub keypoint_octaves: usize,
    pub keypoint_scales: usize,
    pub keypoint_contrast: f64,
    pub keypoint_nms_mult: f64,
    pub concavity_rule: ConcavityRule,
    pub seed: u64,
    /// Worker threads; 0 means all available cores.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            radius_mult: 6.0,
            chi_mult: 2.0,
            box_mult: 10.0,
            zeta_mult: 0.6,
            psi_mult: 0.8,
            ratio: 0.9,
            min_matches: 3,
            min_inliers: 6,
            ransac_tol_mult: 2.0,
            ransac_iters: 2000,
            icp_max_corr_mult: 5.0,
            icp_max_iters: 100,
            icp_eps: 1e-6,
            em_tau: 1e-6,
            em_max_iters: 200,
            k_max: 8,
            var_floor_mult: 0.01,
            normal_neighbors: 10,
            keypoint_min_scale_mult: 1.0,
            keypoint_octaves: 3,
            keypoint_scales: 4,
            keypoint_contrast: 0.0,
            keypoint_nms_mult: 1.0,
            concavity_rule: ConcavityRule::NormalDot,
            seed: 0,
            threads: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value}: {e}")))
}

fn rule_name(rule: ConcavityRule) -> &'static str {
    match rule {
        ConcavityRule::NormalDot => "normal_dot",
        ConcavityRule::SignedDistance => "signed_distance",
    }
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim().replace('-', "_").as_str() {
            "radius_mult" => self.radius_mult = parse(key, v)?,
            "chi_mult" => self.chi_mult = parse(key, v)?,
            "box_mult" => self.box_mult = parse(key, v)?,
            "zeta_mult" => self.zeta_mult = parse(key, v)?,
            "psi_mult" => self.psi_mult = parse(key, v)?,
            "ratio" => self.ratio = parse(key, v)?,
            "min_matches" => self.min_matches = parse(key, v)?,
            "min_inliers" => self.min_inliers = parse(key, v)?,
            "ransac_tol_mult" => self.ransac_tol_mult = parse(key, v)?,
            "ransac_iters" => self.ransac_iters = parse(key, v)?,
            "icp_max_corr_mult" => self.icp_max_corr_mult = parse(key, v)?,
            "icp_max_iters" => self.icp_max_iters = parse(key, v)?,
            "icp_eps" => self.icp_eps = parse(key, v)?,
            "em_tau" => self.em_tau = parse(key, v)?,
            "em_max_iters" => self.em_max_iters = parse(key, v)?,
            "k_max" => self.k_max = parse(key, v)?,
            "var_floor_mult" => self.var_floor_mult = parse(key, v)?,
            "normal_neighbors" => self.normal_neighbors = parse(key, v)?,
            "keypoint_min_scale_mult" => self.keypoint_min_scale_mult = parse(key, v)?,
            "keypoint_octaves" => self.keypoint_octaves = parse(key, v)?,
            "keypoint_scales" => self.keypoint_scales = parse(key, v)?,
            "keypoint_contrast" => self.keypoint_contrast = parse(key, v)?,
            "keypoint_nms_mult" => self.keypoint_nms_mult = parse(key, v)?,
            "concavity_rule" => {
                self.concavity_rule = match v {
                    "normal_dot" => ConcavityRule::NormalDot,
                    "signed_distance" => ConcavityRule::SignedDistance,
                    _ => return Err(Error::Config(format!("unknown concavity_rule {v}"))),
                }
            }
            "seed" => self.seed = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values. Blank lines
    /// and lines starting with `#` are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("radius_mult", self.radius_mult),
            ("chi_mult", self.chi_mult),
            ("box_mult", self.box_mult),
            ("zeta_mult", self.zeta_mult),
            ("psi_mult", self.psi_mult),
            ("ratio", self.ratio),
            ("ransac_tol_mult", self.ransac_tol_mult),
            ("icp_max_corr_mult", self.icp_max_corr_mult),
            ("em_tau", self.em_tau),
            ("var_floor_mult", self.var_floor_mult),
            ("keypoint_min_scale_mult", self.keypoint_min_scale_mult),
            ("keypoint_nms_mult", self.keypoint_nms_mult),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if self.k_max == 0 || self.keypoint_octaves == 0 || self.keypoint_scales == 0 {
            return Err(Error::Config(
                "k_max, keypoint_octaves and keypoint_scales must be at least 1".into(),
            ));
        }
        if self.normal_neighbors < 3 {
            return Err(Error::Config("normal_neighbors must be at least 3".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("radius_mult", self.radius_mult.to_string());
        kv("chi_mult", self.chi_mult.to_string());
        kv("box_mult", self.box_mult.to_string());
        kv("zeta_mult", self.zeta_mult.to_string());
        kv("psi_mult", self.psi_mult.to_string());
        kv("ratio", self.ratio.to_string());
        kv("min_matches", self.min_matches.to_string());
        kv("min_inliers", self.min_inliers.to_string());
        kv("ransac_tol_mult", self.ransac_tol_mult.to_string());
        kv("ransac_iters", self.ransac_iters.to_string());
        kv("icp_max_corr_mult", self.icp_max_corr_mult.to_string());
        kv("icp_max_iters", self.icp_max_iters.to_string());
        kv("icp_eps", self.icp_eps.to_string());
        kv("em_tau", self.em_tau.to_string());
        kv("em_max_iters", self.em_max_iters.to_string());
        kv("k_max", self.k_max.to_string());
        kv("var_floor_mult", self.var_floor_mult.to_string());
        kv("normal_neighbors", self.normal_neighbors.to_string());
        kv(
            "keypoint_min_scale_mult",
            self.keypoint_min_scale_mult.to_string(),
        );
        kv("keypoint_octaves", self.keypoint_octaves.to_string());
        kv("keypoint_scales", self.keypoint_scales.to_string());
        kv("keypoint_contrast", self.keypoint_contrast.to_string());
        kv("keypoint_nms_mult", self.keypoint_nms_mult.to_string());
        kv("concavity_rule", rule_name(self.concavity_rule).to_string());
        kv("seed", self.seed.to_string());
        kv("threads", self.threads.to_string());
        s
    }
}
