//! Expectation-maximisation for full-covariance 3D mixtures.
//!
//! The M-step clamps covariance eigenvalues from below. With the eigenvectors
//! of the weighted scatter kept, that clamp is the exact maximiser of the
//! expected log-likelihood under the eigenvalue constraint, so the
//! log-likelihood sequence stays non-decreasing.

use log::warn;
use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::clamp_eigenvalues;

use super::mixture::{gaussian_log_pdf, Gmm};
use super::xmeans::ClusterSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmParams {
    /// Stop once `|ΔlogL| < tau · max(1, |logL|)`.
    pub tau: f64,
    pub max_iters: usize,
    pub var_floor: f64,
    /// Components whose effective count drops below this are pruned.
    pub min_effective_count: f64,
}

impl Default for EmParams {
    fn default() -> Self {
        EmParams {
            tau: 1e-6,
            max_iters: 200,
            var_floor: 1e-12,
            min_effective_count: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmState {
    /// `N × k` responsibilities from the last E-step.
    pub responsibilities: DMatrix<f64>,
    /// Column sums of the responsibilities.
    pub effective_counts: Vec<f64>,
    pub log_likelihood: f64,
    /// Log-likelihood at each E-step since the last pruning event.
    pub history: Vec<f64>,
    pub iterations: usize,
    pub pruned: usize,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// E-step: responsibilities and total log-likelihood.
fn e_step(points: &[Vector3<f64>], g: &Gmm) -> (DMatrix<f64>, f64) {
    let k = g.k();
    let mut resp = DMatrix::zeros(points.len(), k);
    let mut total = 0.0;
    let mut logs = vec![0.0; k];
    for (n, x) in points.iter().enumerate() {
        for j in 0..k {
            logs[j] = g.weights[j].ln() + gaussian_log_pdf(&(x - g.means[j]), &g.covariances[j]);
        }
        let lse = log_sum_exp(&logs);
        total += lse;
        for j in 0..k {
            resp[(n, j)] = (logs[j] - lse).exp();
        }
    }
    (resp, total)
}

fn m_step(points: &[Vector3<f64>], resp: &DMatrix<f64>, counts: &[f64], var_floor: f64) -> Gmm {
    let n = points.len() as f64;
    let k = counts.len();
    let mut means = vec![Vector3::zeros(); k];
    let mut covariances = vec![Matrix3::zeros(); k];
    for j in 0..k {
        let mut m = Vector3::zeros();
        for (i, x) in points.iter().enumerate() {
            m += x * resp[(i, j)];
        }
        m /= counts[j];
        let mut s = Matrix3::zeros();
        for (i, x) in points.iter().enumerate() {
            let d = x - m;
            s += d * d.transpose() * resp[(i, j)];
        }
        means[j] = m;
        covariances[j] = clamp_eigenvalues(&(s / counts[j]), var_floor);
    }
    Gmm {
        weights: counts.iter().map(|c| c / n).collect(),
        means,
        covariances,
    }
}

/// Initial mixture from a hard clustering: centers as means, cluster sample
/// covariances (clamped) and cluster size fractions as weights.
pub fn init_from_clusters(points: &[Vector3<f64>], init: &ClusterSet, var_floor: f64) -> Gmm {
    let sizes = init.sizes();
    let n = points.len() as f64;
    Gmm {
        weights: sizes.iter().map(|&s| s as f64 / n).collect(),
        means: init.centers.clone(),
        covariances: init
            .covariances
            .iter()
            .map(|c| clamp_eigenvalues(c, var_floor))
            .collect(),
    }
}

pub fn em_fit(
    points: &[Vector3<f64>],
    init: &ClusterSet,
    params: &EmParams,
) -> Result<(Gmm, EmState)> {
    let k = init.k();
    if k == 0 {
        return Err(Error::AllComponentsCollapsed);
    }
    if points.len() < 3 * k {
        return Err(Error::TooFewPoints {
            needed: 3 * k,
            got: points.len(),
        });
    }
    let mut g = init_from_clusters(points, init, params.var_floor);
    let mut history = Vec::new();
    let mut pruned = 0;
    let mut iterations = 0;
    loop {
        let (resp, ll) = e_step(points, &g);
        let counts: Vec<f64> = resp.column_iter().map(|c| c.sum()).collect();
        let converged = history
            .last()
            .is_some_and(|prev: &f64| (ll - prev).abs() < params.tau * ll.abs().max(1.0));
        history.push(ll);
        if converged || iterations >= params.max_iters {
            return Ok((
                g,
                EmState {
                    responsibilities: resp,
                    effective_counts: counts,
                    log_likelihood: ll,
                    history,
                    iterations,
                    pruned,
                },
            ));
        }

        let keep: Vec<usize> = (0..counts.len())
            .filter(|&j| counts[j] >= params.min_effective_count)
            .collect();
        if keep.is_empty() {
            return Err(Error::AllComponentsCollapsed);
        }
        if keep.len() < counts.len() {
            let dropped = counts.len() - keep.len();
            warn!("EM pruned {dropped} collapsed component(s)");
            pruned += dropped;
            g = Gmm {
                weights: keep.iter().map(|&j| g.weights[j]).collect(),
                means: keep.iter().map(|&j| g.means[j]).collect(),
                covariances: keep.iter().map(|&j| g.covariances[j]).collect(),
            };
            let total: f64 = g.weights.iter().sum();
            g.weights.iter_mut().for_each(|w| *w /= total);
            history.clear();
            continue;
        }
        g = m_step(points, &resp, &counts, params.var_floor);
        iterations += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{centroid, scatter};
    use crate::gmd::xmeans::{run_xmeans, XMeansParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn sample(centers: &[Vector3<f64>], n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Normal::new(0.0, 1.0).unwrap();
        centers
            .iter()
            .flat_map(|c| {
                (0..n)
                    .map(|_| {
                        c + Vector3::new(g.sample(&mut rng), g.sample(&mut rng), g.sample(&mut rng))
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    #[test]
    fn single_component_is_closed_form() {
        let pts = sample(&[Vector3::new(1.0, -2.0, 0.5)], 300, 4);
        let init = ClusterSet::from_assignments(&pts, &vec![0; pts.len()]);
        let (g, state) = em_fit(&pts, &init, &EmParams::default()).unwrap();
        let mean = centroid(&pts).unwrap();
        let cov = scatter(&pts, &mean) / pts.len() as f64;
        assert!((g.means[0] - mean).norm() < 1e-12);
        assert!((g.covariances[0] - cov).abs().max() < 1e-12);
        assert_eq!(g.weights, vec![1.0]);
        assert!(state.iterations <= 2);
    }

    #[test]
    fn recovers_two_planted_components() {
        let truth = [Vector3::new(5.0, 0.0, 0.0), Vector3::new(-5.0, 0.0, 0.0)];
        let pts = sample(&truth, 500, 11);
        let xp = XMeansParams {
            k_max: 8,
            seed: 1,
            var_floor: 1e-8,
        };
        let init = run_xmeans(&pts, &xp);
        assert_eq!(init.k(), 2);
        let (g, state) = em_fit(&pts, &init, &EmParams::default()).unwrap();
        for t in &truth {
            let j = (0..2)
                .min_by(|&a, &b| (g.means[a] - t).norm().total_cmp(&(g.means[b] - t).norm()))
                .unwrap();
            assert!((g.means[j] - t).norm() < 0.2);
            assert!((g.weights[j] - 0.5).abs() < 0.05);
        }
        for w in state.history.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
        for row in state.responsibilities.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
        let counts: f64 = state.effective_counts.iter().sum();
        assert!((counts - pts.len() as f64).abs() < 1e-6);
    }

    #[test]
    fn monotone_from_poor_initialisation() {
        let pts = sample(
            &[
                Vector3::zeros(),
                Vector3::new(2.0, 1.0, 0.0),
                Vector3::new(0.0, 3.0, 1.0),
            ],
            100,
            2,
        );
        // arbitrary round-robin labels
        let labels: Vec<usize> = (0..pts.len()).map(|i| i % 3).collect();
        let init = ClusterSet::from_assignments(&pts, &labels);
        let params = EmParams {
            var_floor: 0.05,
            ..EmParams::default()
        };
        let (g, state) = em_fit(&pts, &init, &params).unwrap();
        assert!(state.history.len() > 3);
        for w in state.history.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{} then {}", w[0], w[1]);
        }
        g.validate().unwrap();
    }

    #[test]
    fn planar_points_hit_the_floor() {
        let mut pts = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                pts.push(Vector3::new(i as f64, j as f64, 0.0));
            }
        }
        let init = ClusterSet::from_assignments(&pts, &vec![0; pts.len()]);
        let params = EmParams {
            var_floor: 1e-4,
            ..EmParams::default()
        };
        let (g, _) = em_fit(&pts, &init, &params).unwrap();
        assert!((g.covariances[0][(2, 2)] - 1e-4).abs() < 1e-12);
        g.validate().unwrap();
    }

    #[test]
    fn too_few_points() {
        let pts = vec![
            Vector3::zeros(),
            Vector3::x(),
            Vector3::y(),
            Vector3::z(),
            Vector3::new(1.0, 1.0, 0.0),
        ];
        let init = ClusterSet::from_assignments(&pts, &[0, 0, 0, 1, 1]);
        assert!(matches!(
            em_fit(&pts, &init, &EmParams::default()),
            Err(Error::TooFewPoints { needed: 6, got: 5 })
        ));
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp(&[-1000.0, -1000.0]) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }
}
