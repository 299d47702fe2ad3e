//! Multivariate kernel density estimation over activity-parameter vectors,
//! with plain sampling and tail-biased importance sampling.
//!
//! The estimator is a product-Gaussian KDE with per-dimension Silverman
//! bandwidths. Tail bias is realized as an importance-sampling proposal: the
//! same KDE with all bandwidths inflated by a factor `c > 1`, so draws land
//! further out in the tails while the attached weights keep expectation
//! estimates statistically valid.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::rng_from_seed;

#[derive(Debug, Error, PartialEq)]
pub enum DensityError {
    #[error("need at least two training points, got {0}")]
    TooFewPoints(usize),
    #[error("dimension {0} ('{1}') has zero variance")]
    DegenerateDimension(usize, String),
    #[error("training points have inconsistent dimensions")]
    RaggedInput,
    #[error("training data contains non-finite values")]
    NonFinite,
}

/// A sampled point together with its importance weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedSample {
    pub point: Vec<f64>,
    pub weight: f64,
}

/// Product-Gaussian kernel density estimate of an activity-parameter
/// distribution. Immutable after fitting; evaluation and sampling are safe
/// to run concurrently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDensity {
    pub field_names: Vec<String>,
    pub bandwidth: Vec<f64>,
    pub samples: Vec<Vec<f64>>,
}

const INV_SQRT_2PI: f64 = 0.39894228040143267794;

fn gaussian(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

impl ParameterDensity {
    pub fn dim(&self) -> usize {
        self.field_names.len()
    }

    pub fn n(&self) -> usize {
        self.samples.len()
    }

    /// Fits the KDE with the per-dimension Silverman rule
    /// `h_j = sigma_j * (4 / ((d + 2) n))^(1 / (d + 4))`.
    pub fn fit(field_names: Vec<String>, points: Vec<Vec<f64>>) -> Result<Self, DensityError> {
        let n = points.len();
        if n < 2 {
            return Err(DensityError::TooFewPoints(n));
        }
        let dim = field_names.len();
        if points.iter().any(|p| p.len() != dim) {
            return Err(DensityError::RaggedInput);
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(DensityError::NonFinite);
        }
        let mut bandwidth = Vec::with_capacity(dim);
        let factor = (4.0 / ((dim as f64 + 2.0) * n as f64)).powf(1.0 / (dim as f64 + 4.0));
        for j in 0..dim {
            let mean = points.iter().map(|p| p[j]).sum::<f64>() / n as f64;
            let var = points.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            if var <= 0.0 {
                return Err(DensityError::DegenerateDimension(j, field_names[j].clone()));
            }
            bandwidth.push(var.sqrt() * factor);
        }
        Ok(Self {
            field_names,
            bandwidth,
            samples: points,
        })
    }

    /// Fits with externally chosen bandwidths (testing and tooling).
    pub fn with_bandwidth(
        field_names: Vec<String>,
        points: Vec<Vec<f64>>,
        bandwidth: Vec<f64>,
    ) -> Result<Self, DensityError> {
        let mut d = Self::fit(field_names, points)?;
        assert_eq!(d.bandwidth.len(), bandwidth.len());
        assert!(bandwidth.iter().all(|h| *h > 0.0));
        d.bandwidth = bandwidth;
        Ok(d)
    }

    fn eval_with_bandwidth(&self, x: &[f64], scale: f64) -> f64 {
        assert_eq!(x.len(), self.dim());
        let mut total = 0.0;
        for point in &self.samples {
            let mut term = 1.0;
            for ((xj, sj), hj) in x.iter().zip(point).zip(&self.bandwidth) {
                let h = hj * scale;
                term *= gaussian((xj - sj) / h) / h;
            }
            total += term;
        }
        total / self.n() as f64
    }

    /// Density value at `x`: `(1/n) sum_i prod_j (1/h_j) phi((x_j - s_ij)/h_j)`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.eval_with_bandwidth(x, 1.0)
    }

    /// Density of the bandwidth-inflated proposal used for tail-biased
    /// sampling.
    pub fn eval_proposal(&self, x: &[f64], c: f64) -> f64 {
        self.eval_with_bandwidth(x, c)
    }

    fn draw_one<R: Rng>(&self, rng: &mut R, scale: f64) -> Vec<f64> {
        let idx = rng.random_range(0..self.n());
        self.samples[idx]
            .iter()
            .zip(&self.bandwidth)
            .map(|(s, h)| {
                let z: f64 = rng.sample(StandardNormal);
                s + scale * h * z
            })
            .collect()
    }

    /// Standard KDE sampling: pick a training point uniformly and perturb it
    /// with the diagonal kernel. Deterministic given the seed.
    pub fn sample(&self, n_out: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_from_seed(seed);
        (0..n_out).map(|_| self.draw_one(&mut rng, 1.0)).collect()
    }

    /// Tail-biased sampling: draws from the KDE with bandwidth inflated by
    /// `c > 1` and attaches importance weights `p(x) / q(x)`. With c -> 1
    /// the proposal equals the target and all weights are 1.
    pub fn sample_tail_biased(&self, n_out: usize, c: f64, seed: u64) -> Vec<WeightedSample> {
        assert!(c >= 1.0, "bandwidth inflation must be >= 1");
        let mut rng = rng_from_seed(seed);
        (0..n_out)
            .map(|_| {
                let point = self.draw_one(&mut rng, c);
                let weight = self.eval(&point) / self.eval_proposal(&point, c);
                WeightedSample { point, weight }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn normal_points(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|_| vec![rng.sample::<f64, _>(StandardNormal)])
            .collect()
    }

    #[test]
    fn degenerate_dimension_rejected() {
        let points = vec![vec![3.0], vec![3.0], vec![3.0]];
        assert_eq!(
            ParameterDensity::fit(vec!["x".to_string()], points),
            Err(DensityError::DegenerateDimension(0, "x".to_string()))
        );
    }

    #[test]
    fn too_few_points_rejected() {
        assert_eq!(
            ParameterDensity::fit(vec!["x".to_string()], vec![vec![1.0]]),
            Err(DensityError::TooFewPoints(1))
        );
    }

    #[test]
    fn two_point_density_with_unit_bandwidth() {
        // Average of two unit Gaussians centered at 0 and 2, evaluated at 1:
        // both kernels contribute phi(1).
        let d = ParameterDensity::with_bandwidth(
            vec!["x".to_string()],
            vec![vec![0.0], vec![2.0]],
            vec![1.0],
        )
        .unwrap();
        let expected = gaussian(1.0); // 0.24197...
        assert!((d.eval(&[1.0]) - expected).abs() < 1e-12);
        assert!((expected - 0.2419707245191433).abs() < 1e-12);
    }

    #[test]
    fn peak_at_cluster_center() {
        let points = vec![vec![5.0], vec![5.1], vec![4.9], vec![5.05], vec![4.95]];
        let d = ParameterDensity::fit(vec!["x".to_string()], points).unwrap();
        let peak = d.eval(&[5.0]);
        for k in -40..=40 {
            let x = 5.0 + k as f64 * 0.1;
            assert!(d.eval(&[x]) <= peak + 1e-12, "density at {x} above center");
        }
    }

    #[test]
    fn far_field_decays() {
        let d = ParameterDensity::with_bandwidth(
            vec!["x".to_string()],
            vec![vec![0.0], vec![1.0]],
            vec![0.5],
        )
        .unwrap();
        let peak = d.eval(&[0.5]);
        let far = d.eval(&[0.5 + 10.0 * 0.5 + 1.0]);
        assert!(far < 1e-20 * peak, "far value {far} vs peak {peak}");
    }

    #[test]
    fn eval_matches_naive_double_loop_oracle() {
        let mut rng = rng_from_seed(42);
        let points: Vec<Vec<f64>> = (0..50)
            .map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(0.0..5.0)])
            .collect();
        let d = ParameterDensity::fit(
            vec!["a".to_string(), "b".to_string()],
            points.clone(),
        )
        .unwrap();
        for _ in 0..200 {
            let x = [rng.random_range(-3.0..3.0), rng.random_range(-1.0..6.0)];
            // Independent straightforward summation.
            let mut oracle = 0.0;
            for p in &points {
                let z0 = (x[0] - p[0]) / d.bandwidth[0];
                let z1 = (x[1] - p[1]) / d.bandwidth[1];
                oracle += (-0.5 * (z0 * z0 + z1 * z1)).exp()
                    / (2.0 * std::f64::consts::PI * d.bandwidth[0] * d.bandwidth[1]);
            }
            oracle /= points.len() as f64;
            let got = d.eval(&x);
            assert!(
                (got - oracle).abs() <= 1e-12 * oracle.max(1e-300),
                "{got} vs {oracle}"
            );
        }
    }

    #[test]
    fn integral_over_box_is_one() {
        let d = ParameterDensity::fit(vec!["x".to_string()], normal_points(1000, 7)).unwrap();
        let (lo, hi) = (-8.0, 8.0);
        let steps = 4000;
        let w = (hi - lo) / steps as f64;
        let mut integral = 0.0;
        for k in 0..=steps {
            let x = lo + k as f64 * w;
            let weight = if k == 0 || k == steps { 0.5 } else { 1.0 };
            integral += weight * d.eval(&[x]) * w;
        }
        assert!((integral - 1.0).abs() < 1e-3, "integral {integral}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let d = ParameterDensity::fit(vec!["x".to_string()], normal_points(100, 1)).unwrap();
        assert_eq!(d.sample(50, 99), d.sample(50, 99));
        assert_ne!(d.sample(50, 99), d.sample(50, 100));
        let a = d.sample_tail_biased(50, 2.0, 3);
        let b = d.sample_tail_biased(50, 2.0, 3);
        assert_eq!(a, b);
    }

    #[test]
    fn sample_moments_match_kde_variance_inflation() {
        let points = normal_points(2000, 13);
        let n = points.len() as f64;
        let train_mean = points.iter().map(|p| p[0]).sum::<f64>() / n;
        let train_var = points
            .iter()
            .map(|p| (p[0] - train_mean).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        let d = ParameterDensity::fit(vec!["x".to_string()], points).unwrap();
        let h = d.bandwidth[0];
        let draws = d.sample(10_000, 21);
        let m = draws.iter().map(|p| p[0]).sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|p| (p[0] - m).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!((m - train_mean).abs() < 0.05, "mean {m} vs {train_mean}");
        // KDE sampling inflates the variance to sigma^2 + h^2.
        let expected = train_var + h * h;
        assert!(
            (var - expected).abs() < 0.1 * expected,
            "variance {var} vs {expected}"
        );
    }

    #[test]
    fn unit_weights_at_c_one() {
        let d = ParameterDensity::fit(vec!["x".to_string()], normal_points(100, 3)).unwrap();
        for ws in d.sample_tail_biased(200, 1.0, 5) {
            assert!((ws.weight - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn inflated_proposal_reaches_further_into_tails() {
        let d = ParameterDensity::fit(vec!["x".to_string()], normal_points(1000, 17)).unwrap();
        let plain = d.sample(10_000, 23);
        let biased = d.sample_tail_biased(10_000, 3.0, 23);
        let mean_abs_plain =
            plain.iter().map(|p| p[0].abs()).sum::<f64>() / plain.len() as f64;
        let mean_abs_biased =
            biased.iter().map(|w| w.point[0].abs()).sum::<f64>() / biased.len() as f64;
        assert!(
            mean_abs_biased > mean_abs_plain,
            "biased {mean_abs_biased} <= plain {mean_abs_plain}"
        );
    }

    #[test]
    fn self_normalized_importance_estimate_consistent() {
        let d = ParameterDensity::fit(vec!["x".to_string()], normal_points(1000, 29)).unwrap();
        let plain = d.sample(10_000, 31);
        let plain_e_x2 =
            plain.iter().map(|p| p[0] * p[0]).sum::<f64>() / plain.len() as f64;
        let biased = d.sample_tail_biased(10_000, 2.0, 37);
        let wsum: f64 = biased.iter().map(|w| w.weight).sum();
        let weighted: f64 = biased.iter().map(|w| w.weight * w.point[0] * w.point[0]).sum();
        let is_e_x2 = weighted / wsum;
        assert!(
            (is_e_x2 - plain_e_x2).abs() < 0.05 * plain_e_x2,
            "importance {is_e_x2} vs plain {plain_e_x2}"
        );
        for w in &biased {
            assert!(w.weight.is_finite() && w.weight > 0.0);
        }
    }
}
