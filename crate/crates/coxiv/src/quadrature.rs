//! Gauss-Hermite quadrature, used as the deterministic oracle for posterior
//! expectations and the closed-form frailty/treatment integral. The
//! estimator path never calls this module; the E-step is Monte Carlo.

use nalgebra::DMatrix;

const SQRT_PI: f64 = 1.772_453_850_905_516;

/// Nodes and weights for ∫ f(x) e^{-x²} dx ≈ Σ w_i f(x_i).
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Computes the n-point rule by the Golub-Welsch eigendecomposition of
    /// the Hermite Jacobi matrix.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "quadrature order must be at least 1");
        let mut jacobi = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let b = (k as f64 / 2.0).sqrt();
            jacobi[(k - 1, k)] = b;
            jacobi[(k, k - 1)] = b;
        }
        let eig = jacobi.symmetric_eigen();
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|j| {
                let node = eig.eigenvalues[j];
                let first = eig.eigenvectors[(0, j)];
                (node, SQRT_PI * first * first)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// ∫ f(x) e^{-x²} dx.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }

    /// ∫ f(u) φ(u; 0, sigma²) du via the substitution u = √2 σ x.
    pub fn integrate_gaussian<F: FnMut(f64) -> f64>(&self, sigma: f64, mut f: F) -> f64 {
        let scale = std::f64::consts::SQRT_2 * sigma;
        self.integrate(|x| f(scale * x)) / SQRT_PI
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_sqrt_pi() {
        let gh = GaussHermite::new(61);
        let total: f64 = gh.weights().iter().sum();
        assert!((total - SQRT_PI).abs() < 1e-12);
    }

    #[test]
    fn integrates_monomials_exactly() {
        let gh = GaussHermite::new(61);
        // ∫ x² e^{-x²} = √π/2, ∫ x⁴ e^{-x²} = 3√π/4
        assert!((gh.integrate(|x| x * x) - SQRT_PI / 2.0).abs() < 1e-11);
        assert!((gh.integrate(|x| x.powi(4)) - 0.75 * SQRT_PI).abs() < 1e-10);
        assert!(gh.integrate(|x| x.powi(3)).abs() < 1e-12);
    }

    #[test]
    fn gaussian_moments() {
        let gh = GaussHermite::new(61);
        let sigma = 1.7f64;
        assert!((gh.integrate_gaussian(sigma, |_| 1.0) - 1.0).abs() < 1e-13);
        assert!((gh.integrate_gaussian(sigma, |u| u * u) - sigma * sigma).abs() < 1e-11);
        // E[e^U] for U ~ N(0, sigma²) is exp(sigma²/2)
        let expected = (0.5 * sigma * sigma).exp();
        assert!((gh.integrate_gaussian(sigma, f64::exp) - expected).abs() < 1e-9 * expected);
    }
}
