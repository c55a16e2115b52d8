//! Analytic target distributions.
//!
//! Each target knows its density (where one exists), score, exact sampler,
//! and summary statistics against the standard Gaussian.

use crate::error::{Error, Result};
use crate::gauss::{Gaussian, GaussianMixture};
use crate::streams::{Domain, StreamFactory};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Supported target families.
#[derive(Debug, Clone)]
pub enum TargetKind {
    IsotropicGaussian { mean: DVector<f64>, variance: f64 },
    FullGaussian(Gaussian),
    Mixture(GaussianMixture),
    /// Uniform on the sphere of radius R (singular law).
    Sphere { radius: f64 },
    /// Uniform on the ball of radius R.
    Ball { radius: f64 },
}

#[derive(Debug, Clone)]
pub struct TargetDistribution {
    kind: TargetKind,
    dim: usize,
    /// Radii below 1 are permitted but flagged; the early-stopping
    /// schedule is stated for R >= 1.
    small_radius: bool,
}

/// A statistic that is either closed form, Monte Carlo with a standard
/// error, or infinite (singular laws have no density w.r.t. Lebesgue).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StatValue {
    Exact(f64),
    MonteCarlo { value: f64, se: f64 },
    Infinite,
}

impl StatValue {
    pub fn value(&self) -> f64 {
        match self {
            StatValue::Exact(v) => *v,
            StatValue::MonteCarlo { value, .. } => *value,
            StatValue::Infinite => f64::INFINITY,
        }
    }

    pub fn is_finite(&self) -> bool {
        !matches!(self, StatValue::Infinite)
    }
}

/// Summary statistics of a target against γ_d.
#[derive(Debug, Clone)]
pub struct TargetStats {
    /// E‖X‖².
    pub second_moment: f64,
    /// Lipschitz constant of the score at t = 0; `None` when unavailable
    /// (mixtures and singular kinds; see the forward module for noised
    /// estimates).
    pub lipschitz: Option<f64>,
    pub kl_to_gaussian: StatValue,
    pub fi_to_gaussian: StatValue,
}

const STATS_MC_SAMPLES: usize = 200_000;

impl TargetDistribution {
    pub fn isotropic_gaussian(mean: DVector<f64>, variance: f64) -> Result<Self> {
        if !(variance > 0.0) || !variance.is_finite() {
            return Err(Error::InvalidParameter {
                name: "variance",
                reason: format!("must be positive, got {variance}"),
            });
        }
        let dim = mean.len();
        Ok(Self {
            kind: TargetKind::IsotropicGaussian { mean, variance },
            dim,
            small_radius: false,
        })
    }

    pub fn standard_gaussian(dim: usize) -> Self {
        Self::isotropic_gaussian(DVector::zeros(dim), 1.0).expect("standard gaussian")
    }

    pub fn full_gaussian(g: Gaussian) -> Self {
        let dim = g.dim();
        Self {
            kind: TargetKind::FullGaussian(g),
            dim,
            small_radius: false,
        }
    }

    pub fn mixture(m: GaussianMixture) -> Self {
        let dim = m.dim();
        Self {
            kind: TargetKind::Mixture(m),
            dim,
            small_radius: false,
        }
    }

    pub fn sphere(dim: usize, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::InvalidParameter {
                name: "radius",
                reason: format!("must be positive, got {radius}"),
            });
        }
        Ok(Self {
            kind: TargetKind::Sphere { radius },
            dim,
            small_radius: radius < 1.0,
        })
    }

    pub fn ball(dim: usize, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::InvalidParameter {
                name: "radius",
                reason: format!("must be positive, got {radius}"),
            });
        }
        Ok(Self {
            kind: TargetKind::Ball { radius },
            dim,
            small_radius: radius < 1.0,
        })
    }

    pub fn kind(&self) -> &TargetKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn small_radius_flagged(&self) -> bool {
        self.small_radius
    }

    /// Singular laws (sphere, ball) have no smooth positive density.
    pub fn is_singular(&self) -> bool {
        matches!(self.kind, TargetKind::Sphere { .. } | TargetKind::Ball { .. })
    }

    pub fn support_radius(&self) -> Option<f64> {
        match &self.kind {
            TargetKind::Sphere { radius } | TargetKind::Ball { radius } => Some(*radius),
            _ => None,
        }
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// ln q(x), or `None` for the singular kinds.
    pub fn log_density(&self, x: &DVector<f64>) -> Result<Option<f64>> {
        self.check_dim(x)?;
        Ok(match &self.kind {
            TargetKind::IsotropicGaussian { mean, variance } => {
                let d = self.dim as f64;
                let diff = x - mean;
                Some(
                    -0.5 * d * (2.0 * std::f64::consts::PI * variance).ln()
                        - 0.5 * diff.norm_squared() / variance,
                )
            }
            TargetKind::FullGaussian(g) => Some(g.log_density(x)),
            TargetKind::Mixture(m) => Some(m.log_density(x)),
            TargetKind::Sphere { .. } | TargetKind::Ball { .. } => None,
        })
    }

    /// ∇ ln q(x). Singular kinds have no score at t = 0; callers must
    /// noise first through the forward process.
    pub fn score(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(x)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score input".into()));
        }
        match &self.kind {
            TargetKind::IsotropicGaussian { mean, variance } => Ok(-(x - mean) / *variance),
            TargetKind::FullGaussian(g) => Ok(g.score(x)),
            TargetKind::Mixture(m) => Ok(m.score(x)),
            TargetKind::Sphere { .. } | TargetKind::Ball { .. } => Err(Error::ScoreUndefinedAtZero),
        }
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match &self.kind {
            TargetKind::IsotropicGaussian { mean, variance } => {
                let s = variance.sqrt();
                DVector::from_fn(self.dim, |i, _| {
                    mean[i] + s * rng.sample::<f64, _>(StandardNormal)
                })
            }
            TargetKind::FullGaussian(g) => g.sample(rng),
            TargetKind::Mixture(m) => m.sample(rng),
            TargetKind::Sphere { radius } => *radius * sample_unit_sphere(self.dim, rng),
            TargetKind::Ball { radius } => {
                let u: f64 = rng.random();
                let r = *radius * u.powf(1.0 / self.dim as f64);
                r * sample_unit_sphere(self.dim, rng)
            }
        }
    }

    /// `n` i.i.d. draws as rows.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(n, self.dim);
        for i in 0..n {
            let x = self.sample_one(rng);
            out.row_mut(i).copy_from(&x.transpose());
        }
        out
    }

    /// Closed-form statistics where available; Monte Carlo (with standard
    /// error) for mixture KL and Fisher information.
    pub fn stats(&self, factory: &StreamFactory) -> TargetStats {
        let d = self.dim as f64;
        match &self.kind {
            TargetKind::IsotropicGaussian { mean, variance } => {
                let m2 = mean.norm_squared() + d * variance;
                let kl = 0.5 * (d * variance + mean.norm_squared() - d - d * variance.ln());
                let fi = mean.norm_squared() + d * variance - 2.0 * d + d / variance;
                TargetStats {
                    second_moment: m2,
                    lipschitz: Some(1.0 / variance),
                    kl_to_gaussian: StatValue::Exact(kl),
                    fi_to_gaussian: StatValue::Exact(fi),
                }
            }
            TargetKind::FullGaussian(g) => {
                let log_det: f64 = g
                    .cov()
                    .clone()
                    .symmetric_eigen()
                    .eigenvalues
                    .iter()
                    .map(|v| v.ln())
                    .sum();
                let kl = 0.5 * (g.cov().trace() + g.mean().norm_squared() - d - log_det);
                let fi = g.mean().norm_squared() + g.cov().trace() - 2.0 * d
                    + g.precision().trace();
                TargetStats {
                    second_moment: g.second_moment(),
                    lipschitz: Some(g.max_precision_eigenvalue()),
                    kl_to_gaussian: StatValue::Exact(kl),
                    fi_to_gaussian: StatValue::Exact(fi),
                }
            }
            TargetKind::Mixture(m) => {
                let (kl, fi) = mixture_divergences_mc(m, factory);
                TargetStats {
                    second_moment: m.second_moment(),
                    lipschitz: None,
                    kl_to_gaussian: kl,
                    fi_to_gaussian: fi,
                }
            }
            TargetKind::Sphere { radius } => TargetStats {
                second_moment: radius * radius,
                lipschitz: None,
                kl_to_gaussian: StatValue::Infinite,
                fi_to_gaussian: StatValue::Infinite,
            },
            TargetKind::Ball { radius } => TargetStats {
                second_moment: radius * radius * d / (d + 2.0),
                lipschitz: None,
                kl_to_gaussian: StatValue::Infinite,
                fi_to_gaussian: StatValue::Infinite,
            },
        }
    }
}

pub fn sample_unit_sphere<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let g = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = g.norm();
        if n > 1e-12 {
            return g / n;
        }
    }
}

/// KL(q ‖ γ_d) and FI(q ‖ γ_d) for a mixture, by Monte Carlo under q.
fn mixture_divergences_mc(m: &GaussianMixture, factory: &StreamFactory) -> (StatValue, StatValue) {
    let mut rng = factory.stream(Domain::Stats, 0);
    let d = m.dim();
    let n = STATS_MC_SAMPLES;
    let ln_gamma_norm = -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
    let (mut kl_sum, mut kl_sq, mut fi_sum, mut fi_sq) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..n {
        let x = m.sample(&mut rng);
        let lg = ln_gamma_norm - 0.5 * x.norm_squared();
        let kl_term = m.log_density(&x) - lg;
        let fi_term = (m.score(&x) + &x).norm_squared();
        kl_sum += kl_term;
        kl_sq += kl_term * kl_term;
        fi_sum += fi_term;
        fi_sq += fi_term * fi_term;
    }
    let nf = n as f64;
    let kl_mean = kl_sum / nf;
    let fi_mean = fi_sum / nf;
    let kl_se = ((kl_sq / nf - kl_mean * kl_mean).max(0.0) / nf).sqrt();
    let fi_se = ((fi_sq / nf - fi_mean * fi_mean).max(0.0) / nf).sqrt();
    (
        StatValue::MonteCarlo {
            value: kl_mean,
            se: kl_se,
        },
        StatValue::MonteCarlo {
            value: fi_mean,
            se: fi_se,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::fd_gradient;
    use approx::assert_relative_eq;

    fn two_mode_mixture_1d() -> TargetDistribution {
        let c1 = Gaussian::isotropic(DVector::from_element(1, -3.0), 1.0).unwrap();
        let c2 = Gaussian::isotropic(DVector::from_element(1, 3.0), 1.0).unwrap();
        TargetDistribution::mixture(GaussianMixture::new(vec![0.5, 0.5], vec![c1, c2]).unwrap())
    }

    #[test]
    fn log_density_examples() {
        let g = TargetDistribution::standard_gaussian(1);
        let v = g.log_density(&DVector::zeros(1)).unwrap().unwrap();
        assert_relative_eq!(v, -0.9189385332046727, epsilon = 1e-12);

        let mix = two_mode_mixture_1d();
        let v = mix.log_density(&DVector::zeros(1)).unwrap().unwrap();
        assert_relative_eq!(v, -5.418938533204673, epsilon = 1e-10);

        let sph = TargetDistribution::sphere(2, 1.0).unwrap();
        assert!(sph.log_density(&DVector::zeros(2)).unwrap().is_none());
    }

    #[test]
    fn dimension_mismatch_is_usage_error() {
        let g = TargetDistribution::standard_gaussian(2);
        assert!(matches!(
            g.log_density(&DVector::zeros(3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn singular_score_errors() {
        let s = TargetDistribution::sphere(2, 1.5).unwrap();
        assert!(matches!(
            s.score(&DVector::zeros(2)),
            Err(Error::ScoreUndefinedAtZero)
        ));
    }

    #[test]
    fn score_matches_finite_difference() {
        let factory = StreamFactory::new(11);
        let mut rng = factory.stream(Domain::TargetSampling, 0);
        let cov = DMatrix::from_row_slice(2, 2, &[1.5, 0.4, 0.4, 0.8]);
        let full = TargetDistribution::full_gaussian(
            Gaussian::new(DVector::from_vec(vec![0.5, -0.2]), cov).unwrap(),
        );
        let c1 = Gaussian::isotropic(DVector::from_vec(vec![-1.0, 0.0]), 0.7).unwrap();
        let c2 = Gaussian::isotropic(DVector::from_vec(vec![2.0, 1.0]), 1.3).unwrap();
        let mix = TargetDistribution::mixture(
            GaussianMixture::new(vec![0.3, 0.7], vec![c1, c2]).unwrap(),
        );
        for dist in [full, mix] {
            for _ in 0..100 {
                let x = dist.sample_one(&mut rng);
                let analytic = dist.score(&x).unwrap();
                let fd = fd_gradient(|y| dist.log_density(y).unwrap().unwrap(), &x, 1e-5);
                let rel = (&analytic - &fd).norm() / analytic.norm().max(1e-8);
                assert!(rel < 1e-5, "rel err {rel} at {x:?}");
            }
        }
    }

    #[test]
    fn mixture_score_is_convex_combination() {
        let mix = match two_mode_mixture_1d().kind().clone() {
            TargetKind::Mixture(m) => m,
            _ => unreachable!(),
        };
        for i in -20..=20 {
            let x = DVector::from_element(1, 0.3 * i as f64);
            let s = mix.score(&x).norm();
            let max_comp = mix
                .components()
                .iter()
                .map(|c| c.score(&x).norm())
                .fold(0.0, f64::max);
            assert!(s <= max_comp + 1e-12);
        }
    }

    #[test]
    fn sphere_samples_have_exact_radius() {
        let s = TargetDistribution::sphere(3, 2.0).unwrap();
        let factory = StreamFactory::new(1);
        let mut rng = factory.stream(Domain::TargetSampling, 1);
        for _ in 0..100 {
            let x = s.sample_one(&mut rng);
            assert!((x.norm() - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ball_samples_inside_and_moment_matches() {
        let b = TargetDistribution::ball(3, 2.0).unwrap();
        let factory = StreamFactory::new(2);
        let mut rng = factory.stream(Domain::TargetSampling, 0);
        let n = 100_000;
        let mut m2 = 0.0;
        for _ in 0..n {
            let x = b.sample_one(&mut rng);
            assert!(x.norm() <= 2.0 + 1e-12);
            m2 += x.norm_squared();
        }
        m2 /= n as f64;
        // E‖X‖² = R² d/(d+2) = 4·3/5
        assert!((m2 - 2.4).abs() < 0.02, "{m2}");
    }

    #[test]
    fn gaussian_sample_mean_within_clt_band() {
        let g = TargetDistribution::standard_gaussian(4);
        let factory = StreamFactory::new(3);
        let mut rng = factory.stream(Domain::TargetSampling, 0);
        let n = 100_000;
        let mut mean = DVector::zeros(4);
        for _ in 0..n {
            mean += g.sample_one(&mut rng);
        }
        mean /= n as f64;
        assert!(mean.norm() < 3.0 * (4.0 / n as f64).sqrt());
    }

    #[test]
    fn mixture_hit_fraction_within_bernoulli_band() {
        let c1 = Gaussian::isotropic(DVector::from_element(1, -3.0), 1.0).unwrap();
        let c2 = Gaussian::isotropic(DVector::from_element(1, 3.0), 1.0).unwrap();
        let mix = GaussianMixture::new(vec![0.9, 0.1], vec![c1, c2]).unwrap();
        let factory = StreamFactory::new(4);
        let mut rng = factory.stream(Domain::TargetSampling, 0);
        let n = 100_000;
        let mut hits = 0usize;
        for _ in 0..n {
            let (_, idx) = mix.sample_with_component(&mut rng);
            if idx == 0 {
                hits += 1;
            }
        }
        let frac = hits as f64 / n as f64;
        assert!((frac - 0.9).abs() < 3.0 * (0.09f64 / n as f64).sqrt());
    }

    #[test]
    fn stats_examples() {
        let factory = StreamFactory::new(5);
        // N(0, 2) in d = 1
        let g = TargetDistribution::isotropic_gaussian(DVector::zeros(1), 2.0).unwrap();
        let st = g.stats(&factory);
        assert_relative_eq!(
            st.kl_to_gaussian.value(),
            0.5 * (2.0 - 1.0 - 2.0f64.ln()),
            epsilon = 1e-12
        );
        assert_relative_eq!(st.fi_to_gaussian.value(), 0.5, epsilon = 1e-12);
        assert_relative_eq!(st.second_moment, 2.0, epsilon = 1e-12);
        assert_relative_eq!(st.lipschitz.unwrap(), 0.5, epsilon = 1e-12);

        // standard gaussian fixed point
        let std = TargetDistribution::standard_gaussian(3);
        let st = std.stats(&factory);
        assert_eq!(st.second_moment, 3.0);
        assert_eq!(st.lipschitz, Some(1.0));
        assert_eq!(st.kl_to_gaussian.value(), 0.0);
        assert_eq!(st.fi_to_gaussian.value(), 0.0);

        // sphere R = 3, d = 2
        let sph = TargetDistribution::sphere(2, 3.0).unwrap();
        let st = sph.stats(&factory);
        assert_relative_eq!(st.second_moment, 9.0, epsilon = 1e-12);
        assert!(!st.kl_to_gaussian.is_finite());
    }

    #[test]
    fn mixture_stats_mc_consistency() {
        // mixture of two gaussians equal to a single gaussian: mixture with
        // identical components must reproduce the closed form.
        let comp = Gaussian::isotropic(DVector::zeros(2), 2.0).unwrap();
        let m = GaussianMixture::new(vec![0.4, 0.6], vec![comp.clone(), comp]).unwrap();
        let mix = TargetDistribution::mixture(m);
        let factory = StreamFactory::new(6);
        let st = mix.stats(&factory);
        let exact_kl = 0.5 * 2.0 * (2.0 - 1.0 - 2.0f64.ln());
        let exact_fi = 2.0 * (2.0 - 2.0 + 0.5);
        match st.kl_to_gaussian {
            StatValue::MonteCarlo { value, se } => {
                assert!((value - exact_kl).abs() < 4.0 * se.max(1e-4), "{value} vs {exact_kl}");
            }
            _ => panic!("expected MC"),
        }
        match st.fi_to_gaussian {
            StatValue::MonteCarlo { value, se } => {
                assert!((value - exact_fi).abs() < 4.0 * se.max(1e-4));
            }
            _ => panic!("expected MC"),
        }
    }

    #[test]
    fn second_moment_matches_monte_carlo() {
        let factory = StreamFactory::new(7);
        let mut rng = factory.stream(Domain::TargetSampling, 9);
        let c1 = Gaussian::isotropic(DVector::from_vec(vec![-1.0, 0.5]), 0.7).unwrap();
        let c2 = Gaussian::isotropic(DVector::from_vec(vec![2.0, 1.0]), 1.3).unwrap();
        let mix = TargetDistribution::mixture(
            GaussianMixture::new(vec![0.3, 0.7], vec![c1, c2]).unwrap(),
        );
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let v = mix.sample_one(&mut rng).norm_squared();
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
        let exact = mix.stats(&factory).second_moment;
        assert!((mean - exact).abs() < 4.0 * se, "{mean} vs {exact} (se {se})");
    }
}
