//! Closed-form L2 distance between descriptors, correspondence selection and
//! the surface-pair decision.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmd::{gaussian_pdf, Gmd, Gmm};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    /// Point index of the keypoint in the source cloud.
    pub source_keypoint: usize,
    /// Point index of the keypoint in the target cloud.
    pub target_keypoint: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchDecision {
    pub correspondences: Vec<Correspondence>,
    /// Mean distance over the correspondences; infinite when there are none.
    pub aggregate_distance: f64,
    pub accepted: bool,
    pub zeta: f64,
    pub psi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchParams {
    /// `ζ = zeta_mult · median` of all pairwise descriptor distances.
    pub zeta_mult: f64,
    /// `ψ = psi_mult · ζ`.
    pub psi_mult: f64,
    /// Best / second-best ratio bound, applied along both rows and columns.
    pub ratio: f64,
    pub min_count: usize,
}

impl Default for MatchParams {
    fn default() -> Self {
        MatchParams {
            zeta_mult: 0.6,
            psi_mult: 0.8,
            ratio: 0.9,
            min_count: 3,
        }
    }
}

fn cross_term(a: &Gmm, b: &Gmm) -> f64 {
    let mut sum = 0.0;
    for i in 0..a.k() {
        for j in 0..b.k() {
            let d = a.means[i] - b.means[j];
            let cov = a.covariances[i] + b.covariances[j];
            sum += a.weights[i] * b.weights[j] * gaussian_pdf(&d, &cov);
        }
    }
    sum
}

/// `∫ (p_a − p_b)²` for two mixtures, via the Gaussian product identity.
/// Tiny negative round-off is floored at zero.
pub fn mixture_l2(a: &Gmm, b: &Gmm) -> f64 {
    let d = cross_term(a, a) + cross_term(b, b) - cross_term(a, b) - cross_term(b, a);
    d.max(0.0)
}

pub fn l2_distance(a: &Gmd, b: &Gmd) -> f64 {
    mixture_l2(&a.mixture, &b.mixture)
}

/// `source.len() × target.len()` distances, rows computed in parallel.
pub fn distance_matrix(source: &[Gmd], target: &[Gmd]) -> DMatrix<f64> {
    let rows: Vec<Vec<f64>> = source
        .par_iter()
        .map(|s| target.iter().map(|t| l2_distance(s, t)).collect())
        .collect();
    DMatrix::from_fn(source.len(), target.len(), |i, j| rows[i][j])
}

/// Median of all matrix entries (mean of the two middle values when even).
pub fn median_distance(m: &DMatrix<f64>) -> Option<f64> {
    let mut v: Vec<f64> = m.iter().copied().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Best and second-best (value, index) in an iterator; ties go to the lower index.
fn two_smallest(values: impl Iterator<Item = f64>) -> (Option<(f64, usize)>, Option<f64>) {
    let mut best: Option<(f64, usize)> = None;
    let mut second: Option<f64> = None;
    for (i, v) in values.enumerate() {
        match best {
            Some((b, _)) if v >= b => {
                if second.is_none_or(|s| v < s) {
                    second = Some(v);
                }
            }
            _ => {
                second = best.map(|(b, _)| b);
                best = Some((v, i));
            }
        }
    }
    (best, second)
}

fn passes_ratio(best: f64, second: Option<f64>, ratio: f64) -> bool {
    match second {
        Some(s) => best < ratio * s || (best == 0.0 && s > 0.0),
        None => true,
    }
}

/// Selection on a precomputed matrix: entries below `zeta` that are mutual
/// nearest neighbours and pass the ratio test along their row and column.
/// Returned as `(row, col, distance)` sorted by distance.
pub fn select_pairs(m: &DMatrix<f64>, zeta: f64, ratio: f64) -> Vec<(usize, usize, f64)> {
    let col_best: Vec<(Option<(f64, usize)>, Option<f64>)> = m
        .column_iter()
        .map(|c| two_smallest(c.iter().copied()))
        .collect();
    let mut out = Vec::new();
    for (i, row) in m.row_iter().enumerate() {
        let (Some((d, j)), second) = two_smallest(row.iter().copied()) else {
            continue;
        };
        if d >= zeta || !passes_ratio(d, second, ratio) {
            continue;
        }
        let (Some((_, back)), col_second) = col_best[j] else {
            continue;
        };
        if back == i && passes_ratio(d, col_second, ratio) {
            out.push((i, j, d));
        }
    }
    out.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    out
}

pub fn match_descriptors(
    source: &[Gmd],
    target: &[Gmd],
    zeta: f64,
    ratio: f64,
) -> Vec<Correspondence> {
    let m = distance_matrix(source, target);
    to_correspondences(&select_pairs(&m, zeta, ratio), source, target)
}

pub fn to_correspondences(
    pairs: &[(usize, usize, f64)],
    source: &[Gmd],
    target: &[Gmd],
) -> Vec<Correspondence> {
    pairs
        .iter()
        .map(|&(i, j, d)| Correspondence {
            source_keypoint: source[i].keypoint,
            target_keypoint: target[j].keypoint,
            distance: d,
        })
        .collect()
}

pub fn decide_surface_pair(
    correspondences: Vec<Correspondence>,
    zeta: f64,
    psi: f64,
    min_count: usize,
) -> MatchDecision {
    let aggregate_distance = if correspondences.is_empty() {
        f64::INFINITY
    } else {
        correspondences.iter().map(|c| c.distance).sum::<f64>() / correspondences.len() as f64
    };
    let accepted = aggregate_distance < psi && correspondences.len() >= min_count.max(1);
    MatchDecision {
        correspondences,
        aggregate_distance,
        accepted,
        zeta,
        psi,
    }
}

/// Full matching stage with adaptive thresholds.
pub fn match_surfaces(source: &[Gmd], target: &[Gmd], params: &MatchParams) -> MatchDecision {
    let m = distance_matrix(source, target);
    let zeta = median_distance(&m).map_or(0.0, |med| params.zeta_mult * med);
    let psi = params.psi_mult * zeta;
    let pairs = select_pairs(&m, zeta, params.ratio);
    decide_surface_pair(
        to_correspondences(&pairs, source, target),
        zeta,
        psi,
        params.min_count,
    )
}

pub fn correspondences_csv(correspondences: &[Correspondence]) -> String {
    let mut s = String::from("source_idx,target_idx,distance\n");
    for c in correspondences {
        let _ = writeln!(
            s,
            "{},{},{}",
            c.source_keypoint, c.target_keypoint, c.distance
        );
    }
    s
}

pub fn parse_correspondences_csv(text: &str) -> Result<Vec<Correspondence>> {
    let bad = |line: usize, message: String| Error::Format {
        what: "correspondence csv",
        message: format!("line {line}: {message}"),
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("source")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(bad(
                n + 1,
                format!("expected 3 fields, found {}", fields.len()),
            ));
        }
        out.push(Correspondence {
            source_keypoint: fields[0].parse().map_err(|e| bad(n + 1, format!("{e}")))?,
            target_keypoint: fields[1].parse().map_err(|e| bad(n + 1, format!("{e}")))?,
            distance: fields[2].parse().map_err(|e| bad(n + 1, format!("{e}")))?,
        });
    }
    Ok(out)
}
