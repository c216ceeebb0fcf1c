//! Shared numeric primitives: stabilized softmax/log-sum-exp, categorical
//! divergences, the Gaussian log-density used as the reward likelihood, seeded
//! categorical sampling, a row-major tensor with declared dimensions, and a
//! central-difference gradient probe used by the gradient-audit tests.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// log(Σ exp(x_i)), stabilized by subtracting the maximum.
///
/// Returns `f64::NEG_INFINITY` for an empty slice or when every entry is
/// `-inf` (an all-zero mixture).
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Softmax with max subtraction. Entries of `-inf` get probability 0;
/// if all entries are `-inf` the result falls back to uniform.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return vec![1.0 / logits.len() as f64; logits.len()];
    }
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Log-softmax: logits minus their log-sum-exp.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&x| x - lse).collect()
}

/// KL(p ‖ q) for categorical distributions over the same support.
///
/// Terms with p_i = 0 contribute 0; a term with p_i > 0 and q_i = 0 makes the
/// divergence `+inf`.
pub fn categorical_kl(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return f64::INFINITY;
            }
            kl += pi * (pi / qi).ln();
        }
    }
    kl
}

/// Shannon entropy of a categorical distribution, in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&pi| pi > 0.0).map(|&pi| pi * pi.ln()).sum::<f64>()
}

/// Log-density of a Gaussian with the given mean and standard deviation.
pub fn gaussian_log_density(x: f64, mean: f64, sigma: f64) -> f64 {
    debug_assert!(sigma > 0.0);
    let z = (x - mean) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Sample an index from a categorical distribution by inverse CDF.
///
/// `probs` must be non-negative with positive total mass; the last positive
/// entry absorbs any floating-point shortfall.
pub fn sample_categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Central-difference gradient of `f` at `x` with step `h`, evaluated only at
/// the given coordinates (the full gradient when `coords` covers all of them).
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64, coords: &[usize]) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut point = x.to_vec();
    let mut grad = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = point[i];
        point[i] = orig + h;
        let up = f(&point);
        point[i] = orig - h;
        let down = f(&point);
        point[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    grad
}

/// Relative error between an analytic and a finite-difference derivative,
/// with a floor so near-zero pairs compare absolutely.
pub fn gradient_relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

/// `w · v` with the convention that a weight of exactly 0 annihilates any
/// value, including ±inf. Used for 0·log 0 = 0 in exact expectation sums.
pub fn weighted(w: f64, v: f64) -> f64 {
    if w == 0.0 {
        0.0
    } else {
        w * v
    }
}

/// Logistic function 1/(1+e^(−z)), evaluated without overflow on either tail.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ln σ(z), evaluated without overflow on either tail.
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Row-major tensor with explicitly declared dimensions, serialized as
/// `{dims, data}` so files are self-describing. The last dimension is the
/// row; all leading dimensions are flattened into a row index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: Vec<usize>) -> Self {
        let len = dims.iter().product();
        Self { dims, data: vec![0.0; len] }
    }

    pub fn from_data(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "tensor data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Self { dims, data })
    }

    /// Length of one row (the last dimension).
    pub fn row_len(&self) -> usize {
        *self.dims.last().unwrap_or(&0)
    }

    /// Number of rows (product of all leading dimensions).
    pub fn n_rows(&self) -> usize {
        if self.dims.is_empty() {
            0
        } else {
            self.dims[..self.dims.len() - 1].iter().product()
        }
    }

    /// Flat row index for leading-dimension coordinates.
    pub fn row_index(&self, coords: &[usize]) -> usize {
        debug_assert_eq!(coords.len() + 1, self.dims.len());
        let mut idx = 0;
        for (i, &c) in coords.iter().enumerate() {
            debug_assert!(c < self.dims[i]);
            idx = idx * self.dims[i] + c;
        }
        idx
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let len = self.row_len();
        &self.data[row * len..(row + 1) * len]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        let len = self.row_len();
        &mut self.data[row * len..(row + 1) * len]
    }

    pub fn validate_shape(&self, name: &str, dims: &[usize]) -> Result<()> {
        if self.dims != dims {
            return Err(Error::Validation(format!(
                "{name}: dims {:?} do not match expected {:?}",
                self.dims, dims
            )));
        }
        if self.data.len() != dims.iter().product::<usize>() {
            return Err(Error::Validation(format!(
                "{name}: data length {} does not match dims {:?}",
                self.data.len(),
                dims
            )));
        }
        Ok(())
    }

    pub fn validate_finite(&self, name: &str) -> Result<()> {
        if self.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("{name} contains a non-finite entry")));
        }
        Ok(())
    }

    /// Check that every row is a probability distribution within `tol`.
    pub fn validate_stochastic(&self, name: &str, tol: f64) -> Result<()> {
        for row in 0..self.n_rows() {
            let r = self.row(row);
            if r.iter().any(|&x| !x.is_finite() || x < 0.0) {
                return Err(Error::Validation(format!("{name} row {row} has a bad entry")));
            }
            let total: f64 = r.iter().sum();
            if (total - 1.0).abs() > tol {
                return Err(Error::Validation(format!(
                    "{name} row {row} sums to {total}, outside 1 ± {tol}"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn log_sum_exp_matches_direct_sum() {
        let xs: [f64; 3] = [0.3, -1.2, 2.5];
        let direct: f64 = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert_relative_eq!(log_sum_exp(&xs), direct, epsilon = 1e-12);
    }

    #[test]
    fn log_sum_exp_is_stable_for_large_inputs() {
        let xs = [1000.0, 1000.0];
        assert_relative_eq!(log_sum_exp(&xs), 1000.0 + 2f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let p = softmax(&[0.0; 4]);
        for &pi in &p {
            assert_relative_eq!(pi, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[0.1, 0.7, -0.4]);
        let b = softmax(&[100.1, 100.7, 99.6]);
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn softmax_handles_neg_infinity_entries() {
        let p = softmax(&[0.0, f64::NEG_INFINITY]);
        assert_relative_eq!(p[0], 1.0, epsilon = 1e-12);
        assert_eq!(p[1], 0.0);
    }

    #[test]
    fn kl_is_zero_for_identical_distributions() {
        let p = [0.2, 0.5, 0.3];
        assert_relative_eq!(categorical_kl(&p, &p), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn kl_is_infinite_when_support_escapes() {
        assert!(categorical_kl(&[0.5, 0.5], &[1.0, 0.0]).is_infinite());
        assert!(categorical_kl(&[1.0, 0.0], &[0.5, 0.5]).is_finite());
    }

    #[test]
    fn gaussian_log_density_peak_value() {
        let sigma = 0.1f64;
        let peak = gaussian_log_density(0.5, 0.5, sigma);
        assert_relative_eq!(
            peak,
            -(sigma * (2.0 * std::f64::consts::PI).sqrt()).ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn categorical_sampler_matches_weights() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let probs = [0.1, 0.6, 0.3];
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            counts[sample_categorical(&mut rng, &probs)] += 1;
        }
        for (c, &p) in counts.iter().zip(&probs) {
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!(((*c as f64 / n as f64) - p).abs() < 3.0 * se + 1e-4);
        }
    }

    #[test]
    fn central_difference_recovers_quadratic_gradient() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let g = central_difference(f, &[2.0, -1.0], 1e-5, &[0, 1]);
        assert_relative_eq!(g[0], 4.0, epsilon = 1e-7);
        assert_relative_eq!(g[1], 3.0, epsilon = 1e-7);
    }

    #[test]
    fn weighted_annihilates_infinities_at_zero_weight() {
        assert_eq!(weighted(0.0, f64::NEG_INFINITY), 0.0);
        assert_eq!(weighted(0.0, f64::INFINITY), 0.0);
        assert_eq!(weighted(0.5, 2.0), 1.0);
    }

    #[test]
    fn tensor_row_indexing_is_row_major() {
        let mut t = Tensor::zeros(vec![2, 3, 4]);
        assert_eq!(t.n_rows(), 6);
        assert_eq!(t.row_len(), 4);
        let idx = t.row_index(&[1, 2]);
        assert_eq!(idx, 5);
        t.row_mut(idx)[3] = 7.0;
        assert_eq!(t.data[23], 7.0);
    }

    #[test]
    fn tensor_validation_catches_shape_and_row_errors() {
        assert!(Tensor::from_data(vec![2, 2], vec![0.0; 3]).is_err());
        let t = Tensor::from_data(vec![2, 2], vec![0.5, 0.5, 0.9, 0.2]).unwrap();
        assert!(t.validate_stochastic("t", 1e-9).is_err());
        let ok = Tensor::from_data(vec![2, 2], vec![0.5, 0.5, 0.1, 0.9]).unwrap();
        ok.validate_stochastic("ok", 1e-9).unwrap();
        ok.validate_shape("ok", &[2, 2]).unwrap();
        assert!(ok.validate_shape("ok", &[4]).is_err());
    }

    #[test]
    fn tensor_round_trips_through_json() {
        let t = Tensor::from_data(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let json = serde_json::to_string(&t).unwrap();
        let back: Tensor = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn sigmoid_midpoint_and_saturation() {
        assert_relative_eq!(sigmoid(0.0), 0.5, epsilon = 1e-15);
        assert_relative_eq!(sigmoid(800.0), 1.0, epsilon = 1e-15);
        assert_relative_eq!(sigmoid(-800.0), 0.0, epsilon = 1e-15);
        assert_relative_eq!(sigmoid(2.0) + sigmoid(-2.0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn log_sigmoid_matches_log_of_sigmoid_and_stays_finite() {
        for z in [-5.0, -0.3, 0.0, 1.7, 4.0] {
            assert_relative_eq!(log_sigmoid(z), sigmoid(z).ln(), epsilon = 1e-12);
        }
        assert_relative_eq!(log_sigmoid(-800.0), -800.0, epsilon = 1e-9);
        assert!(log_sigmoid(800.0).abs() < 1e-12);
    }
}
