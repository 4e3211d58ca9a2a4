use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::sorted_eigen;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// A 3D Gaussian mixture. Components are stored as parallel vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gmm {
    pub weights: Vec<f64>,
    pub means: Vec<Vector3<f64>>,
    pub covariances: Vec<Matrix3<f64>>,
}

impl Gmm {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vector3<f64>>,
        covariances: Vec<Matrix3<f64>>,
    ) -> Result<Self> {
        let g = Gmm {
            weights,
            means,
            covariances,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn single(mean: Vector3<f64>, covariance: Matrix3<f64>) -> Self {
        Gmm {
            weights: vec![1.0],
            means: vec![mean],
            covariances: vec![covariance],
        }
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        let bad = |message: String| Error::Format {
            what: "mixture",
            message,
        };
        if k == 0 {
            return Err(bad("no components".into()));
        }
        if self.means.len() != k || self.covariances.len() != k {
            return Err(bad(format!(
                "{k} weights, {} means, {} covariances",
                self.means.len(),
                self.covariances.len()
            )));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(bad("negative or non-finite weight".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(bad(format!("weights sum to {total}")));
        }
        for (i, c) in self.covariances.iter().enumerate() {
            if (c - c.transpose()).abs().max() > 1e-9 * c.abs().max().max(1.0) {
                return Err(bad(format!("covariance {i} is not symmetric")));
            }
            if sorted_eigen(c).0[0] <= 0.0 {
                return Err(bad(format!("covariance {i} is not positive definite")));
            }
        }
        Ok(())
    }

    /// Mixture density at `x`.
    pub fn pdf(&self, x: &Vector3<f64>) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.covariances)
            .map(|((w, m), c)| w * gaussian_pdf(&(x - m), c))
            .sum()
    }
}

pub fn gmm_pdf(mixture: &Gmm, x: &Vector3<f64>) -> f64 {
    mixture.pdf(x)
}

/// Log of the zero-mean Gaussian density with covariance `cov`, evaluated at
/// `d`. Returns `-inf` if `cov` is not positive definite.
pub fn gaussian_log_pdf(d: &Vector3<f64>, cov: &Matrix3<f64>) -> f64 {
    match cov.cholesky() {
        Some(ch) => {
            let l = ch.l();
            let log_det = 2.0 * (0..3).map(|i| l[(i, i)].ln()).sum::<f64>();
            let y = l
                .solve_lower_triangular(d)
                .expect("cholesky factor is invertible");
            -0.5 * (3.0 * LN_2PI + log_det + y.norm_squared())
        }
        None => f64::NEG_INFINITY,
    }
}

pub fn gaussian_pdf(d: &Vector3<f64>, cov: &Matrix3<f64>) -> f64 {
    gaussian_log_pdf(d, cov).exp()
}

/// `(2π)^{-3/2}`, the peak of the standard 3D normal.
pub fn standard_normal_peak() -> f64 {
    (2.0 * PI).powf(-1.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_mode() {
        let g = Gmm::single(Vector3::zeros(), Matrix3::identity());
        assert!((g.pdf(&Vector3::zeros()) - 0.063_493_635_934_240_97).abs() < 1e-15);
        assert!((standard_normal_peak() - 0.063_493_635_934_240_97).abs() < 1e-15);
    }

    #[test]
    fn gaussian_matches_explicit_formula() {
        let cov = Matrix3::new(2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.5);
        let d = Vector3::new(0.4, -1.0, 0.7);
        let inv = cov.try_inverse().unwrap();
        let quad: f64 = (d.transpose() * inv * d)[0];
        let det: f64 = cov.determinant();
        let expected = (-0.5 * quad).exp() / ((2.0 * PI).powf(1.5) * det.sqrt());
        assert!((gaussian_pdf(&d, &cov) - expected).abs() < 1e-15);
    }

    fn symmetric_pair() -> Gmm {
        Gmm::new(
            vec![0.5, 0.5],
            vec![Vector3::new(1.0, 0.5, 0.0), Vector3::new(-1.0, -0.5, 0.0)],
            vec![Matrix3::identity() * 0.7; 2],
        )
        .unwrap()
    }

    #[test]
    fn symmetric_mixture_is_even() {
        let g = symmetric_pair();
        for x in [Vector3::new(0.3, 1.0, -2.0), Vector3::new(2.0, 0.0, 0.1)] {
            assert!((g.pdf(&x) - g.pdf(&-x)).abs() < 1e-15);
        }
    }

    #[test]
    fn integrates_to_one_on_grid() {
        let g = Gmm::new(
            vec![0.2, 0.3, 0.5],
            vec![
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(-1.0, 1.0, 0.5),
                Vector3::new(0.0, -1.0, -0.5),
            ],
            vec![
                Matrix3::from_diagonal(&Vector3::new(0.5, 0.8, 0.3)),
                Matrix3::new(1.0, 0.2, 0.0, 0.2, 0.6, 0.1, 0.0, 0.1, 0.4),
                Matrix3::identity() * 0.3,
            ],
        )
        .unwrap();
        let h: f64 = 0.1;
        let mut total = 0.0;
        for i in -70..=70 {
            for j in -70..=70 {
                for k in -70..=70 {
                    let x: Vector3<f64> = Vector3::new(i as f64, j as f64, k as f64) * h;
                    total += g.pdf(&x);
                }
            }
        }
        assert!((total * h * h * h - 1.0).abs() < 1e-2);
    }

    #[test]
    fn validation() {
        assert!(Gmm::new(vec![0.5], vec![Vector3::zeros()], vec![Matrix3::identity()]).is_err());
        assert!(Gmm::new(vec![1.0], vec![Vector3::zeros()], vec![Matrix3::zeros()]).is_err());
        assert!(Gmm::new(Vec::new(), Vec::new(), Vec::new()).is_err());
        assert!(symmetric_pair().validate().is_ok());
    }

    #[test]
    fn singular_covariance_has_zero_density() {
        assert_eq!(gaussian_pdf(&Vector3::zeros(), &Matrix3::zeros()), 0.0);
    }
}
