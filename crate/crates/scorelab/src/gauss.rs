//! Multivariate Gaussians and Gaussian mixtures.
//!
//! These carry their Cholesky factor and precision around so densities,
//! scores, and samples are cheap to evaluate repeatedly.

use crate::error::{Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

const LN_2PI: f64 = 1.837877066409345483560659472811;

/// Gaussian N(mean, cov) with cached factorizations.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    precision: DMatrix<f64>,
    log_norm: f64,
    min_eig: f64,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: cov.nrows(),
            });
        }
        let asym = (&cov - cov.transpose()).abs().max();
        if asym > 1e-10 * (1.0 + cov.abs().max()) {
            return Err(Error::NotPositiveDefinite(format!(
                "asymmetry {asym:.3e} exceeds tolerance"
            )));
        }
        let sym = 0.5 * (&cov + cov.transpose());
        let min_eig = sym
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if !(min_eig > 1e-10) {
            return Err(Error::NotPositiveDefinite(format!(
                "min eigenvalue {min_eig:.3e} <= 1e-10"
            )));
        }
        let chol = Cholesky::new(sym.clone())
            .ok_or_else(|| Error::NotPositiveDefinite("Cholesky failed".into()))?;
        let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let precision = chol.inverse();
        let log_norm = -0.5 * (d as f64 * LN_2PI + log_det);
        Ok(Self {
            mean,
            cov: sym,
            chol,
            precision,
            log_norm,
            min_eig,
        })
    }

    pub fn isotropic(mean: DVector<f64>, variance: f64) -> Result<Self> {
        if !(variance > 0.0) || !variance.is_finite() {
            return Err(Error::InvalidParameter {
                name: "variance",
                reason: format!("must be positive and finite, got {variance}"),
            });
        }
        let d = mean.len();
        Self::new(mean, DMatrix::identity(d, d) * variance)
    }

    pub fn standard(dim: usize) -> Self {
        Self::isotropic(DVector::zeros(dim), 1.0).expect("standard gaussian")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eig
    }

    pub fn max_precision_eigenvalue(&self) -> f64 {
        self.precision
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .fold(0.0, f64::max)
    }

    /// True when the covariance is (numerically) a multiple of the identity.
    pub fn isotropy(&self) -> Option<f64> {
        let d = self.dim();
        let c = self.cov[(0, 0)];
        for i in 0..d {
            for j in 0..d {
                let want = if i == j { c } else { 0.0 };
                if (self.cov[(i, j)] - want).abs() > 1e-12 * c.max(1.0) {
                    return None;
                }
            }
        }
        Some(c)
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let diff = x - &self.mean;
        let solved = self.chol.solve(&diff);
        self.log_norm - 0.5 * diff.dot(&solved)
    }

    /// ∇ ln density = -Σ⁻¹ (x - μ).
    pub fn score(&self, x: &DVector<f64>) -> DVector<f64> {
        let diff = x - &self.mean;
        -self.chol.solve(&diff)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let d = self.dim();
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + self.chol.l() * z
    }

    /// E‖X‖² = ‖μ‖² + tr Σ.
    pub fn second_moment(&self) -> f64 {
        self.mean.norm_squared() + self.cov.trace()
    }

    /// Pushforward under x ↦ A x + b.
    pub fn affine_map(&self, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<Self> {
        Self::new(a * &self.mean + b, a * &self.cov * a.transpose())
    }
}

pub fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Finite mixture of Gaussians with simplex weights.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    components: Vec<Gaussian>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(Error::InvalidWeights(format!(
                "{} weights for {} components",
                weights.len(),
                components.len()
            )));
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidWeights("negative weight".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidWeights(format!(
                "weights sum to {sum}, not 1 within 1e-12"
            )));
        }
        let d = components[0].dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(Error::DimensionMismatch { expected: d, got: 0 });
        }
        let log_weights = weights
            .iter()
            .map(|&w| if w == 0.0 { f64::NEG_INFINITY } else { w.ln() })
            .collect();
        Ok(Self {
            weights,
            log_weights,
            components,
        })
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| lw + c.log_density(x))
            .collect();
        log_sum_exp(&terms)
    }

    /// Posterior component responsibilities, computed in log space with
    /// max subtraction so tail points stay finite.
    pub fn responsibilities(&self, x: &DVector<f64>) -> Vec<f64> {
        let terms: Vec<f64> = self
            .components
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| lw + c.log_density(x))
            .collect();
        let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = terms.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = unnorm.iter().sum();
        unnorm.into_iter().map(|v| v / z).collect()
    }

    /// Posterior-weighted combination of component scores.
    pub fn score(&self, x: &DVector<f64>) -> DVector<f64> {
        let r = self.responsibilities(x);
        let mut acc = DVector::zeros(self.dim());
        for (ri, c) in r.iter().zip(&self.components) {
            if *ri > 0.0 {
                acc += c.score(x) * *ri;
            }
        }
        acc
    }

    /// ∇² ln q = Σ rᵢ (Hᵢ + gᵢgᵢᵀ) − g gᵀ with Hᵢ = −Pᵢ and g = Σ rᵢ gᵢ.
    pub fn hessian_log_density(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let d = self.dim();
        let r = self.responsibilities(x);
        let mut acc = DMatrix::zeros(d, d);
        let mut g = DVector::zeros(d);
        for (ri, c) in r.iter().zip(&self.components) {
            if *ri > 0.0 {
                let gi = c.score(x);
                acc += (&gi * gi.transpose() - c.precision()) * *ri;
                g += gi * *ri;
            }
        }
        acc - &g * g.transpose()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        self.sample_with_component(rng).0
    }

    pub fn sample_with_component<R: Rng + ?Sized>(&self, rng: &mut R) -> (DVector<f64>, usize) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                idx = i;
                break;
            }
        }
        (self.components[idx].sample(rng), idx)
    }

    pub fn second_moment(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| w * c.second_moment())
            .sum()
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim());
        for (w, c) in self.weights.iter().zip(&self.components) {
            m += c.mean() * *w;
        }
        m
    }
}
