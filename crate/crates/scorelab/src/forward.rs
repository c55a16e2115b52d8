//! Exact transition kernels and marginal laws of the two forward
//! noising processes.
//!
//! The position process is the Ornstein–Uhlenbeck SDE dZ = -Z dt + √2 dB,
//! whose time-t kernel is Z_t = e^{-t} Z_0 + sqrt(1 - e^{-2t}) ξ. The
//! phase-space process ("CLD") couples position and velocity through the
//! block drift A_γ = [[0, 1], [-1, -γ]] with noise √(2γ) on the velocity
//! only; its kernel is given by the matrix exponential M0 = exp(t A_γ)
//! and the covariance integral M1.
//!
//! Gaussian and mixture targets push forward in closed form. Sphere and
//! ball targets become smooth for t > 0 and are evaluated by
//! Gauss–Legendre quadrature over the mixing angle (and radius).

use crate::error::{Error, Result};
use crate::gauss::{Gaussian, GaussianMixture};
use crate::quad;
use crate::streams::{Domain, StreamFactory};
use crate::targets::{sample_unit_sphere, TargetDistribution, TargetKind};
use nalgebra::{DMatrix, DVector, Matrix2};
use rand::Rng;
use rand_distr::StandardNormal;
use std::sync::{Arc, Mutex, OnceLock};

/// OU kernel parameters at time t.
#[derive(Debug, Clone, Copy)]
pub struct OuTransition {
    pub t: f64,
    /// e^{-t}
    pub mean_scale: f64,
    /// 1 - e^{-2t}
    pub noise_var: f64,
}

impl OuTransition {
    pub fn new(t: f64) -> Result<Self> {
        if !(t >= 0.0) {
            return Err(Error::Usage(format!("time must be nonnegative, got {t}")));
        }
        Ok(Self {
            t,
            mean_scale: (-t).exp(),
            noise_var: -(-2.0 * t).exp_m1(),
        })
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_var.sqrt()
    }
}

/// Law of the OU process at time t started from a target.
#[derive(Debug, Clone)]
pub enum OuMarginal {
    /// Gaussian-type targets stay in the analytic family.
    Analytic(TargetDistribution),
    /// Noised uniform-on-sphere, d >= 2.
    SphereConv(SphereConvolution),
    /// Noised uniform-on-ball, d >= 2.
    BallConv(BallConvolution),
    /// Noised uniform on [-R, R] (d = 1 ball), closed form via Φ.
    Ball1d(Ball1dConvolution),
}

/// Exact law q_t of the forward OU process.
pub fn ou_marginal(dist: &TargetDistribution, t: f64) -> Result<OuMarginal> {
    let tr = OuTransition::new(t)?;
    let a = tr.mean_scale;
    let s2 = tr.noise_var;
    match dist.kind() {
        TargetKind::IsotropicGaussian { mean, variance } => Ok(OuMarginal::Analytic(
            TargetDistribution::isotropic_gaussian(mean * a, a * a * variance + s2)?,
        )),
        TargetKind::FullGaussian(g) => {
            let d = g.dim();
            let cov = g.cov() * (a * a) + DMatrix::<f64>::identity(d, d) * s2;
            Ok(OuMarginal::Analytic(TargetDistribution::full_gaussian(
                Gaussian::new(g.mean() * a, cov)?,
            )))
        }
        TargetKind::Mixture(m) => {
            let d = m.dim();
            let comps = m
                .components()
                .iter()
                .map(|c| {
                    Gaussian::new(
                        c.mean() * a,
                        c.cov() * (a * a) + DMatrix::<f64>::identity(d, d) * s2,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(OuMarginal::Analytic(TargetDistribution::mixture(
                GaussianMixture::new(m.weights().to_vec(), comps)?,
            )))
        }
        TargetKind::Sphere { radius } => {
            if t <= 0.0 {
                return Err(Error::DensityUndefined);
            }
            if dist.dim() == 1 {
                // the 1-d sphere is the two-point law {±R}
                let c1 = Gaussian::isotropic(DVector::from_element(1, -radius * a), s2)?;
                let c2 = Gaussian::isotropic(DVector::from_element(1, radius * a), s2)?;
                Ok(OuMarginal::Analytic(TargetDistribution::mixture(
                    GaussianMixture::new(vec![0.5, 0.5], vec![c1, c2])?,
                )))
            } else {
                Ok(OuMarginal::SphereConv(SphereConvolution::new(
                    dist.dim(),
                    *radius,
                    tr,
                )?))
            }
        }
        TargetKind::Ball { radius } => {
            if t <= 0.0 {
                return Err(Error::DensityUndefined);
            }
            if dist.dim() == 1 {
                Ok(OuMarginal::Ball1d(Ball1dConvolution {
                    radius: *radius,
                    tr,
                }))
            } else {
                Ok(OuMarginal::BallConv(BallConvolution::new(
                    dist.dim(),
                    *radius,
                    tr,
                )?))
            }
        }
    }
}

impl OuMarginal {
    pub fn dim(&self) -> usize {
        match self {
            OuMarginal::Analytic(t) => t.dim(),
            OuMarginal::SphereConv(s) => s.dim,
            OuMarginal::BallConv(b) => b.dim,
            OuMarginal::Ball1d(_) => 1,
        }
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        match self {
            OuMarginal::Analytic(t) => t
                .log_density(x)?
                .ok_or(Error::DensityUndefined),
            OuMarginal::SphereConv(s) => Ok(s.log_density(x)),
            OuMarginal::BallConv(b) => Ok(b.log_density(x)),
            OuMarginal::Ball1d(b) => Ok(b.log_density(x[0])),
        }
    }

    pub fn score(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            OuMarginal::Analytic(t) => t.score(x),
            OuMarginal::SphereConv(s) => Ok(s.score(x)),
            OuMarginal::BallConv(b) => Ok(b.score(x)),
            OuMarginal::Ball1d(b) => Ok(DVector::from_element(1, b.score(x[0]))),
        }
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match self {
            OuMarginal::Analytic(t) => t.sample_one(rng),
            OuMarginal::SphereConv(s) => s.sample_one(rng),
            OuMarginal::BallConv(b) => b.sample_one(rng),
            OuMarginal::Ball1d(b) => DVector::from_element(1, b.sample_one(rng)),
        }
    }

    /// Scores for a batch of points (rows). The sphere path builds an
    /// interpolation table of the radial posterior mean when the batch is
    /// large, since the reverse sampler evaluates thousands of points at
    /// one fixed time.
    pub fn score_batch(&self, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            OuMarginal::SphereConv(s) => Ok(s.score_batch(points)),
            _ => {
                let mut out = DMatrix::zeros(points.nrows(), points.ncols());
                let mut x = DVector::zeros(points.ncols());
                for i in 0..points.nrows() {
                    for j in 0..points.ncols() {
                        x[j] = points[(i, j)];
                    }
                    let s = self.score(&x)?;
                    out.row_mut(i).copy_from(&s.transpose());
                }
                Ok(out)
            }
        }
    }
}

/// Exact joint draws (Z_s, Z_t) of the forward OU process, via the Markov
/// decomposition Z_t = e^{-(t-s)} Z_s + sqrt(1 - e^{-2(t-s)}) ξ.
pub fn ou_joint_sample<R: Rng + ?Sized>(
    dist: &TargetDistribution,
    s: f64,
    t: f64,
    rng: &mut R,
    n: usize,
) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
    if !(s >= 0.0) || !(t >= s) {
        return Err(Error::Usage(format!(
            "need 0 <= s <= t, got s = {s}, t = {t}"
        )));
    }
    let first = OuTransition::new(s)?;
    let inc = OuTransition::new(t - s)?;
    let d = dist.dim();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let z0 = dist.sample_one(rng);
        let zs = &z0 * first.mean_scale
            + DVector::from_fn(d, |_, _| {
                first.noise_std() * rng.sample::<f64, _>(StandardNormal)
            });
        let zt = &zs * inc.mean_scale
            + DVector::from_fn(d, |_, _| {
                inc.noise_std() * rng.sample::<f64, _>(StandardNormal)
            });
        out.push((zs, zt));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// CLD kernel
// ---------------------------------------------------------------------------

/// Kernel of the phase-space forward process at time t: the law of
/// (Z_t, V_t) given (Z_0, V_0) is N(M0 (z,v), M1) with 2x2 blocks acting
/// per coordinate.
#[derive(Debug, Clone, Copy)]
pub struct CldTransition {
    pub t: f64,
    pub gamma: f64,
    pub m0: Matrix2<f64>,
    pub m1: Matrix2<f64>,
}

/// exp(t A_γ) for A_γ = [[0, 1], [-1, -γ]], in closed form for every γ.
pub fn cld_exp_drift(t: f64, gamma: f64) -> Matrix2<f64> {
    let a = Matrix2::new(0.0, 1.0, -1.0, -gamma);
    exp_trace_det_one(t, gamma, a)
}

/// exp(tM) for a 2x2 matrix M with det 1 and trace -γ, via the
/// Cayley–Hamilton form e^{-γt/2} (c(t) I + s(t) (M + γ/2 I)).
fn exp_trace_det_one(t: f64, gamma: f64, m: Matrix2<f64>) -> Matrix2<f64> {
    let half = gamma / 2.0;
    let disc = half * half - 1.0;
    let (c, s) = if disc.abs() < 1e-12 {
        // critically damped: nilpotent part, second order in t exactly 0
        (1.0 + 0.5 * disc * t * t, t)
    } else if disc > 0.0 {
        let w = disc.sqrt();
        ((w * t).cosh(), (w * t).sinh() / w)
    } else {
        let w = (-disc).sqrt();
        ((w * t).cos(), (w * t).sin() / w)
    };
    let shifted = m + Matrix2::identity() * half;
    (Matrix2::identity() * c + shifted * s) * (-half * t).exp()
}

/// Eigenvalues of A_γ: -γ/2 ± sqrt(γ²/4 - 1) (complex for γ < 2).
pub fn cld_drift_spectrum(gamma: f64) -> [(f64, f64); 2] {
    let half = gamma / 2.0;
    let disc = half * half - 1.0;
    if disc >= 0.0 {
        let w = disc.sqrt();
        [(-half + w, 0.0), (-half - w, 0.0)]
    } else {
        let w = (-disc).sqrt();
        [(-half, w), (-half, -w)]
    }
}

/// Forward kernel (M0, M1) at time t with friction γ.
///
/// M1 is closed form in the critically damped case γ = 2; other frictions
/// integrate the Gramian by composite quadrature to 1e-12.
pub fn cld_transition(t: f64, gamma: f64) -> Result<CldTransition> {
    if !(t >= 0.0) {
        return Err(Error::Usage(format!("time must be nonnegative, got {t}")));
    }
    if !(gamma > 0.0) {
        return Err(Error::InvalidParameter {
            name: "gamma",
            reason: format!("friction must be positive, got {gamma}"),
        });
    }
    let m0 = cld_exp_drift(t, gamma);
    let m1 = if (gamma - 2.0).abs() < 1e-12 {
        let e = (-2.0 * t).exp();
        Matrix2::new(
            1.0 - e * (1.0 + 2.0 * t + 2.0 * t * t),
            2.0 * t * t * e,
            2.0 * t * t * e,
            1.0 - e * (1.0 - 2.0 * t + 2.0 * t * t),
        )
    } else {
        cld_noise_cov_quadrature(t, gamma, 1e-12)
    };
    Ok(CldTransition { t, gamma, m0, m1 })
}

/// ∫_0^t exp(uA) Σ Σᵀ exp(uAᵀ) du entrywise; Σ = (0, sqrt(2γ)).
pub fn cld_noise_cov_quadrature(t: f64, gamma: f64, tol: f64) -> Matrix2<f64> {
    if t == 0.0 {
        return Matrix2::zeros();
    }
    let col = |u: f64| {
        let e = cld_exp_drift(u, gamma);
        let k = (2.0 * gamma).sqrt();
        (e[(0, 1)] * k, e[(1, 1)] * k)
    };
    let xx = quad::integrate_adaptive(|u| col(u).0 * col(u).0, 0.0, t, tol);
    let xv = quad::integrate_adaptive(|u| col(u).0 * col(u).1, 0.0, t, tol);
    let vv = quad::integrate_adaptive(|u| col(u).1 * col(u).1, 0.0, t, tol);
    Matrix2::new(xx, xv, xv, vv)
}

/// Phase-space marginal law of the CLD started at q ⊗ γ_d, as a mixture
/// of Gaussians on R^{2d} (one component for plain Gaussian targets).
#[derive(Debug, Clone)]
pub struct CldMarginal {
    law: GaussianMixture,
    dim: usize,
}

/// Exact joint law of (Z_t, V_t) for Gaussian and mixture targets.
pub fn cld_marginal(dist: &TargetDistribution, t: f64, gamma: f64) -> Result<CldMarginal> {
    let tr = cld_transition(t, gamma)?;
    let d = dist.dim();
    let comps: Vec<(f64, DVector<f64>, DMatrix<f64>)> = match dist.kind() {
        TargetKind::IsotropicGaussian { mean, variance } => {
            vec![(
                1.0,
                mean.clone(),
                DMatrix::identity(d, d) * *variance,
            )]
        }
        TargetKind::FullGaussian(g) => vec![(1.0, g.mean().clone(), g.cov().clone())],
        TargetKind::Mixture(m) => m
            .weights()
            .iter()
            .zip(m.components())
            .map(|(w, c)| (*w, c.mean().clone(), c.cov().clone()))
            .collect(),
        _ => {
            return Err(Error::Unsupported(
                "phase-space marginals are restricted to Gaussian and mixture targets".into(),
            ))
        }
    };
    let (m0, m1) = (tr.m0, tr.m1);
    let mut weights = Vec::with_capacity(comps.len());
    let mut gaussians = Vec::with_capacity(comps.len());
    for (w, mu, sigma) in comps {
        let mut mean = DVector::zeros(2 * d);
        for i in 0..d {
            mean[i] = m0[(0, 0)] * mu[i];
            mean[d + i] = m0[(1, 0)] * mu[i];
        }
        // M0 blockdiag(Σ, I) M0ᵀ + M1, assembled per 2x2 block
        let eye = DMatrix::<f64>::identity(d, d);
        let cxx = &sigma * (m0[(0, 0)] * m0[(0, 0)])
            + &eye * (m0[(0, 1)] * m0[(0, 1)] + m1[(0, 0)]);
        let cxv = &sigma * (m0[(0, 0)] * m0[(1, 0)])
            + &eye * (m0[(0, 1)] * m0[(1, 1)] + m1[(0, 1)]);
        let cvv = &sigma * (m0[(1, 0)] * m0[(1, 0)])
            + &eye * (m0[(1, 1)] * m0[(1, 1)] + m1[(1, 1)]);
        let mut cov = DMatrix::zeros(2 * d, 2 * d);
        cov.view_mut((0, 0), (d, d)).copy_from(&cxx);
        cov.view_mut((0, d), (d, d)).copy_from(&cxv);
        cov.view_mut((d, 0), (d, d)).copy_from(&cxv.transpose());
        cov.view_mut((d, d), (d, d)).copy_from(&cvv);
        weights.push(w);
        gaussians.push(Gaussian::new(mean, cov)?);
    }
    Ok(CldMarginal {
        law: GaussianMixture::new(weights, gaussians)?,
        dim: d,
    })
}

impl CldMarginal {
    /// Position dimension d (the law lives on R^{2d}).
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn law(&self) -> &GaussianMixture {
        &self.law
    }

    pub fn log_density(&self, theta: &DVector<f64>) -> f64 {
        self.law.log_density(theta)
    }

    /// Full score on phase space.
    pub fn score(&self, theta: &DVector<f64>) -> DVector<f64> {
        self.law.score(theta)
    }

    /// ∇_v ln q̄_t: the velocity block of the full score.
    pub fn velocity_score(&self, theta: &DVector<f64>) -> DVector<f64> {
        self.law.score(theta).rows(self.dim, self.dim).into_owned()
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        self.law.sample(rng)
    }
}

// ---------------------------------------------------------------------------
// Noised Lipschitz constants
// ---------------------------------------------------------------------------

/// Upper estimate of the Lipschitz constant of ∇ ln q_t.
///
/// Closed form for Gaussian kinds; the explicit smoothing bound
/// max{1/(1-e^{-2t}), e^{-2t} R² / (1-e^{-2t})²} for sphere and ball; a
/// grid-sampled Hessian norm for mixtures (an estimate, not a bound).
pub fn noised_lipschitz(
    dist: &TargetDistribution,
    t: f64,
    factory: &StreamFactory,
) -> Result<f64> {
    let tr = OuTransition::new(t)?;
    let a2 = tr.mean_scale * tr.mean_scale;
    let s2 = tr.noise_var;
    match dist.kind() {
        TargetKind::IsotropicGaussian { variance, .. } => Ok(1.0 / (a2 * variance + s2)),
        TargetKind::FullGaussian(g) => {
            let d = g.dim();
            let cov_t = g.cov() * a2 + DMatrix::<f64>::identity(d, d) * s2;
            let min = cov_t
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
            Ok(1.0 / min)
        }
        TargetKind::Sphere { radius } | TargetKind::Ball { radius } => {
            if t <= 0.0 {
                return Err(Error::ScoreUndefinedAtZero);
            }
            let r2 = radius * radius;
            Ok((1.0 / s2).max(a2 * r2 / (s2 * s2)))
        }
        TargetKind::Mixture(_) => {
            if t < 0.0 {
                return Err(Error::Usage("negative time".into()));
            }
            let marginal = ou_marginal(dist, t)?;
            let noised = match marginal {
                OuMarginal::Analytic(td) => td,
                _ => unreachable!("mixtures stay analytic"),
            };
            let mix = match noised.kind() {
                TargetKind::Mixture(m) => m.clone(),
                _ => unreachable!(),
            };
            let mut rng = factory.stream(Domain::Stats, 1);
            let mut worst: f64 = 0.0;
            for _ in 0..256 {
                let x = mix.sample(&mut rng);
                let h = mix.hessian_log_density(&x);
                let norm = h
                    .symmetric_eigen()
                    .eigenvalues
                    .iter()
                    .map(|v| v.abs())
                    .fold(0.0, f64::max);
                worst = worst.max(norm);
            }
            Ok(worst)
        }
    }
}

// ---------------------------------------------------------------------------
// Sphere convolution
// ---------------------------------------------------------------------------

/// Quadrature rule for the angular integral ∫ f(cos θ) sin^{d-2} θ dθ,
/// normalized to a probability weight.
#[derive(Debug)]
struct AngularRule {
    cos: Vec<f64>,
    /// w_j sin^{d-2} θ_j / Z_d — sums to 1
    weight: Vec<f64>,
}

fn angular_rule(dim: usize, n: usize) -> Arc<AngularRule> {
    static CACHE: OnceLock<Mutex<std::collections::HashMap<(usize, usize), Arc<AngularRule>>>> =
        OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(std::collections::HashMap::new()));
    let mut guard = cache.lock().unwrap();
    guard
        .entry((dim, n))
        .or_insert_with(|| {
            let gl = quad::rule(n);
            let half = 0.5 * std::f64::consts::PI;
            let mut cos = Vec::with_capacity(n);
            let mut weight = Vec::with_capacity(n);
            for (&x, &w) in gl.nodes.iter().zip(&gl.weights) {
                let theta = half * (x + 1.0);
                cos.push(theta.cos());
                weight.push(half * w * theta.sin().powi(dim as i32 - 2));
            }
            let z: f64 = weight.iter().sum();
            for w in &mut weight {
                *w /= z;
            }
            Arc::new(AngularRule { cos, weight })
        })
        .clone()
}

/// Tilted angular moments: S0 = E[e^{κ(cosθ - 1)}], S1 = E[cosθ e^{κ(cosθ-1)}]
/// under the sin^{d-2} weight. Stable for all κ >= 0.
fn angular_moments(rule: &AngularRule, kappa: f64) -> (f64, f64) {
    let mut s0 = 0.0;
    let mut s1 = 0.0;
    for (&c, &w) in rule.cos.iter().zip(&rule.weight) {
        let e = w * (kappa * (c - 1.0)).exp();
        s0 += e;
        s1 += c * e;
    }
    (s0, s1)
}

fn angular_level_for(kappa: f64, base: usize) -> usize {
    // resolve the e^{κ cos θ} peak of width ~ 1/sqrt(κ)
    let need = (6.0 * kappa.max(1.0).sqrt()).ceil() as usize;
    let mut n = base;
    while n < need && n < 4096 {
        n *= 2;
    }
    n
}

/// Law of e^{-t} R ω + sqrt(1-e^{-2t}) ξ with ω uniform on the unit
/// sphere, d >= 2. Radially symmetric; all integrals reduce to the polar
/// angle.
#[derive(Debug, Clone)]
pub struct SphereConvolution {
    pub dim: usize,
    pub radius: f64,
    pub tr: OuTransition,
    /// base angular node count, doubled at construction until the probe
    /// integrals move by < 1e-9 relatively
    base_nodes: usize,
}

impl SphereConvolution {
    fn new(dim: usize, radius: f64, tr: OuTransition) -> Result<Self> {
        debug_assert!(dim >= 2);
        let a = tr.mean_scale;
        let s2 = tr.noise_var;
        // pick the base level on a probe range of κ
        let kappa_probe = a * radius * (a * radius + 10.0 * s2.sqrt()) / s2;
        let mut base = 256usize;
        loop {
            let coarse = angular_rule(dim, base);
            let fine = angular_rule(dim, base * 2);
            let mut ok = true;
            for frac in [0.0, 0.1, 0.3, 1.0] {
                let kappa = kappa_probe * frac;
                let (c0, c1) = angular_moments(&coarse, kappa);
                let (f0, f1) = angular_moments(&fine, kappa);
                if (c0 - f0).abs() > 1e-9 * f0.abs() || (c1 - f1).abs() > 1e-9 * f0.abs() {
                    ok = false;
                    break;
                }
            }
            if ok || base >= 4096 {
                break;
            }
            base *= 2;
        }
        Ok(Self {
            dim,
            radius,
            tr,
            base_nodes: base,
        })
    }

    fn kappa(&self, r: f64) -> f64 {
        self.tr.mean_scale * self.radius * r / self.tr.noise_var
    }

    fn moments(&self, kappa: f64) -> (f64, f64) {
        let rule = angular_rule(self.dim, angular_level_for(kappa, self.base_nodes));
        angular_moments(&rule, kappa)
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let a = self.tr.mean_scale;
        let s2 = self.tr.noise_var;
        let r = x.norm();
        let kappa = self.kappa(r);
        let (s0, _) = self.moments(kappa);
        let d = self.dim as f64;
        -0.5 * d * (2.0 * std::f64::consts::PI * s2).ln()
            - (r * r + a * a * self.radius * self.radius) / (2.0 * s2)
            + kappa
            + s0.ln()
    }

    /// Posterior mean of ⟨x̂, ω⟩ given the observation radius r.
    fn tilted_cosine(&self, r: f64) -> f64 {
        let (s0, s1) = self.moments(self.kappa(r));
        s1 / s0
    }

    pub fn score(&self, x: &DVector<f64>) -> DVector<f64> {
        let a = self.tr.mean_scale;
        let s2 = self.tr.noise_var;
        let r = x.norm();
        if r < 1e-14 {
            return DVector::zeros(self.dim);
        }
        let g = a * self.radius * self.tilted_cosine(r);
        (x * (g / r) - x) / s2
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let omega = sample_unit_sphere(self.dim, rng);
        let s = self.tr.noise_std();
        omega * (self.tr.mean_scale * self.radius)
            + DVector::from_fn(self.dim, |_, _| s * rng.sample::<f64, _>(StandardNormal))
    }

    /// Batched scores; builds a cubic interpolant of the radial posterior
    /// mean when the batch is large enough to amortize it.
    pub fn score_batch(&self, points: &DMatrix<f64>) -> DMatrix<f64> {
        let n = points.nrows();
        let d = self.dim;
        let a = self.tr.mean_scale;
        let s2 = self.tr.noise_var;
        let table = if n >= 2048 {
            Some(RadialTable::build(self, 1024))
        } else {
            None
        };
        let mut out = DMatrix::zeros(n, d);
        for i in 0..n {
            let mut r2 = 0.0;
            for j in 0..d {
                r2 += points[(i, j)] * points[(i, j)];
            }
            let r = r2.sqrt();
            if r < 1e-14 {
                continue;
            }
            let kappa = self.kappa(r);
            let m = match &table {
                Some(t) => t.eval(kappa).unwrap_or_else(|| {
                    let (s0, s1) = self.moments(kappa);
                    s1 / s0
                }),
                None => {
                    let (s0, s1) = self.moments(kappa);
                    s1 / s0
                }
            };
            let coef = (a * self.radius * m / r - 1.0) / s2;
            for j in 0..d {
                out[(i, j)] = coef * points[(i, j)];
            }
        }
        out
    }
}

/// Cubic interpolation of κ ↦ E[cos θ] on the stretched coordinate
/// u = κ/(κ + κ₀), which resolves both the small-κ linear regime and the
/// large-κ saturation with a uniform grid.
struct RadialTable {
    kappa0: f64,
    values: Vec<f64>,
}

impl RadialTable {
    fn build(conv: &SphereConvolution, nodes: usize) -> Self {
        let kappa0 = 16.0;
        let values = (0..nodes)
            .map(|i| {
                let u = i as f64 / (nodes - 1) as f64 * 0.999;
                let kappa = kappa0 * u / (1.0 - u);
                let (s0, s1) = conv.moments(kappa);
                s1 / s0
            })
            .collect();
        Self { kappa0, values }
    }

    fn eval(&self, kappa: f64) -> Option<f64> {
        let n = self.values.len();
        let u = kappa / (kappa + self.kappa0);
        let pos = u / 0.999 * (n - 1) as f64;
        let i = pos.floor() as usize;
        if i + 2 >= n || i == 0 {
            return if i + 2 >= n { None } else { Some(self.values[0] + (self.values[1] - self.values[0]) * pos) };
        }
        // Catmull-Rom through the four surrounding nodes
        let s = pos - i as f64;
        let (p0, p1, p2, p3) = (
            self.values[i - 1],
            self.values[i],
            self.values[i + 1],
            self.values[i + 2],
        );
        Some(
            p1 + 0.5
                * s
                * (p2 - p0
                    + s * (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3 + s * (3.0 * (p1 - p2) + p3 - p0))),
        )
    }
}

// ---------------------------------------------------------------------------
// Ball convolutions
// ---------------------------------------------------------------------------

/// Noised uniform on [-R, R]: density (Φ((x+aR)/s) - Φ((x-aR)/s)) / (2Ra).
#[derive(Debug, Clone)]
pub struct Ball1dConvolution {
    pub radius: f64,
    pub tr: OuTransition,
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl Ball1dConvolution {
    pub fn log_density(&self, x: f64) -> f64 {
        let a = self.tr.mean_scale;
        let s = self.tr.noise_std();
        let hi = (x + a * self.radius) / s;
        let lo = (x - a * self.radius) / s;
        ((normal_cdf(hi) - normal_cdf(lo)).max(f64::MIN_POSITIVE)).ln()
            - (2.0 * self.radius * a).ln()
    }

    pub fn score(&self, x: f64) -> f64 {
        let a = self.tr.mean_scale;
        let s = self.tr.noise_std();
        let hi = (x + a * self.radius) / s;
        let lo = (x - a * self.radius) / s;
        (normal_pdf(hi) - normal_pdf(lo)) / (s * (normal_cdf(hi) - normal_cdf(lo)))
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let z0 = self.radius * (2.0 * u - 1.0);
        self.tr.mean_scale * z0 + self.tr.noise_std() * rng.sample::<f64, _>(StandardNormal)
    }
}

/// Noised uniform on the ball of radius R, d >= 2: mixture over the
/// latent radius ρ (weight d ρ^{d-1}/R^d) of sphere convolutions.
#[derive(Debug, Clone)]
pub struct BallConvolution {
    pub dim: usize,
    pub radius: f64,
    pub tr: OuTransition,
    base_nodes: usize,
    radial_nodes: usize,
}

impl BallConvolution {
    fn new(dim: usize, radius: f64, tr: OuTransition) -> Result<Self> {
        let probe = SphereConvolution::new(dim, radius, tr)?;
        Ok(Self {
            dim,
            radius,
            tr,
            base_nodes: probe.base_nodes,
            radial_nodes: 128,
        })
    }

    /// log of ∫ w(ρ) e^{exponent(ρ)} S0(κ_ρ) dρ and the tilted mean
    /// E[ρ cos θ], stabilized across radial nodes.
    fn radial_moments(&self, r: f64) -> (f64, f64) {
        let a = self.tr.mean_scale;
        let s2 = self.tr.noise_var;
        let gl = quad::rule(self.radial_nodes);
        let half = 0.5 * self.radius;
        let d = self.dim as f64;
        let mut exponents = Vec::with_capacity(self.radial_nodes);
        let mut s0s = Vec::with_capacity(self.radial_nodes);
        let mut s1s = Vec::with_capacity(self.radial_nodes);
        let mut lnw = Vec::with_capacity(self.radial_nodes);
        for (&x, &w) in gl.nodes.iter().zip(&gl.weights) {
            let rho = half * (x + 1.0);
            let kappa = a * rho * r / s2;
            let rule = angular_rule(self.dim, angular_level_for(kappa, self.base_nodes));
            let (s0, s1) = angular_moments(&rule, kappa);
            exponents.push(-a * a * rho * rho / (2.0 * s2) + kappa);
            s0s.push(s0);
            s1s.push(s1 * rho);
            lnw.push((half * w * d * rho.max(1e-300).powf(d - 1.0) / self.radius.powf(d)).ln());
        }
        let m = exponents
            .iter()
            .zip(&lnw)
            .map(|(e, l)| e + l)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        let mut num = 0.0;
        for i in 0..self.radial_nodes {
            let scale = (exponents[i] + lnw[i] - m).exp();
            z += scale * s0s[i];
            num += scale * s1s[i];
        }
        (m + z.ln(), num / z)
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let s2 = self.tr.noise_var;
        let r = x.norm();
        let d = self.dim as f64;
        let (log_mix, _) = self.radial_moments(r);
        -0.5 * d * (2.0 * std::f64::consts::PI * s2).ln() - r * r / (2.0 * s2) + log_mix
    }

    pub fn score(&self, x: &DVector<f64>) -> DVector<f64> {
        let a = self.tr.mean_scale;
        let s2 = self.tr.noise_var;
        let r = x.norm();
        if r < 1e-14 {
            return DVector::zeros(self.dim);
        }
        let (_, rho_cos) = self.radial_moments(r);
        (x * (a * rho_cos / r) - x) / s2
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let u: f64 = rng.random();
        let rho = self.radius * u.powf(1.0 / self.dim as f64);
        let omega = sample_unit_sphere(self.dim, rng);
        let s = self.tr.noise_std();
        omega * (self.tr.mean_scale * rho)
            + DVector::from_fn(self.dim, |_, _| s * rng.sample::<f64, _>(StandardNormal))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{fd_gradient, mean_se};
    use approx::assert_relative_eq;

    #[test]
    fn ou_transition_identity() {
        for t in [0.0, 1e-6, 0.1, 1.0, 10.0] {
            let tr = OuTransition::new(t).unwrap();
            assert!(
                (tr.mean_scale * tr.mean_scale + tr.noise_var - 1.0).abs() < 1e-14,
                "t = {t}"
            );
        }
        let t0 = OuTransition::new(0.0).unwrap();
        assert_eq!(t0.mean_scale, 1.0);
        assert_eq!(t0.noise_var, 0.0);
        assert!(OuTransition::new(-0.1).is_err());
    }

    #[test]
    fn mixture_marginal_at_ln2_has_unit_variance() {
        let c1 = Gaussian::isotropic(DVector::from_element(1, -3.0), 1.0).unwrap();
        let c2 = Gaussian::isotropic(DVector::from_element(1, 3.0), 1.0).unwrap();
        let mix = TargetDistribution::mixture(
            GaussianMixture::new(vec![0.5, 0.5], vec![c1, c2]).unwrap(),
        );
        let m = ou_marginal(&mix, 2.0f64.ln()).unwrap();
        match m {
            OuMarginal::Analytic(td) => match td.kind() {
                TargetKind::Mixture(mm) => {
                    let means: Vec<f64> = mm.components().iter().map(|c| c.mean()[0]).collect();
                    assert_relative_eq!(means[0], -1.5, epsilon = 1e-12);
                    assert_relative_eq!(means[1], 1.5, epsilon = 1e-12);
                    for c in mm.components() {
                        assert_relative_eq!(c.cov()[(0, 0)], 1.0, epsilon = 1e-12);
                    }
                }
                _ => panic!("expected mixture"),
            },
            _ => panic!("expected analytic"),
        }
    }

    #[test]
    fn marginal_converges_to_standard_gaussian() {
        let g = TargetDistribution::isotropic_gaussian(DVector::from_element(2, 5.0), 7.0).unwrap();
        let m = ou_marginal(&g, 40.0).unwrap();
        match m {
            OuMarginal::Analytic(td) => match td.kind() {
                TargetKind::IsotropicGaussian { mean, variance } => {
                    assert!(mean.norm() < 1e-15);
                    assert_relative_eq!(*variance, 1.0, epsilon = 1e-12);
                }
                _ => panic!(),
            },
            _ => panic!(),
        }
    }

    #[test]
    fn ou_semigroup_parameter_identity() {
        let g = TargetDistribution::isotropic_gaussian(DVector::from_element(1, 2.0), 4.0).unwrap();
        for (s, t) in [(0.1, 0.3), (0.5, 1.5), (1e-3, 2.0)] {
            let once = ou_marginal(&g, s + t).unwrap();
            let first = match ou_marginal(&g, s).unwrap() {
                OuMarginal::Analytic(td) => td,
                _ => unreachable!(),
            };
            let twice = ou_marginal(&first, t).unwrap();
            match (once, twice) {
                (OuMarginal::Analytic(a), OuMarginal::Analytic(b)) => {
                    match (a.kind(), b.kind()) {
                        (
                            TargetKind::IsotropicGaussian { mean: m1, variance: v1 },
                            TargetKind::IsotropicGaussian { mean: m2, variance: v2 },
                        ) => {
                            assert_relative_eq!(m1[0], m2[0], epsilon = 1e-12);
                            assert_relative_eq!(v1, v2, epsilon = 1e-12);
                        }
                        _ => panic!(),
                    }
                }
                _ => panic!(),
            }
        }
    }

    #[test]
    fn sphere_marginal_density_undefined_at_zero() {
        let s = TargetDistribution::sphere(2, 1.0).unwrap();
        assert!(ou_marginal(&s, 0.0).is_err());
    }

    #[test]
    fn joint_sample_stationary_increment() {
        let g = TargetDistribution::standard_gaussian(3);
        let f = StreamFactory::new(9);
        let mut rng = f.stream(Domain::TargetSampling, 0);
        let (s, t) = (0.4, 0.9);
        let pairs = ou_joint_sample(&g, s, t, &mut rng, 40_000).unwrap();
        let sq: Vec<f64> = pairs.iter().map(|(a, b)| (b - a).norm_squared()).collect();
        let (mean, se) = mean_se(&sq);
        let exact = 2.0 * 3.0 * (1.0 - (-(t - s) as f64).exp());
        assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact}");
        // δ = 0 gives identical pairs
        let same = ou_joint_sample(&g, 0.5, 0.5, &mut rng, 10).unwrap();
        for (a, b) in same {
            assert_eq!(a, b);
        }
        assert!(ou_joint_sample(&g, 0.9, 0.4, &mut rng, 1).is_err());
    }

    #[test]
    fn movement_bound_small_delta() {
        // E‖Z_t - Z_s‖² <= C (δ² m2² + δ d) with C = 10
        let f = StreamFactory::new(10);
        let c1 = Gaussian::isotropic(DVector::from_vec(vec![-2.0, 1.0]), 0.5).unwrap();
        let c2 = Gaussian::isotropic(DVector::from_vec(vec![3.0, 0.0]), 2.0).unwrap();
        let mix = TargetDistribution::mixture(
            GaussianMixture::new(vec![0.4, 0.6], vec![c1, c2]).unwrap(),
        );
        let m2 = mix.stats(&f).second_moment;
        let mut rng = f.stream(Domain::TargetSampling, 1);
        for (s, delta) in [(0.0, 0.05), (0.3, 0.5), (1.0, 1.0)] {
            let pairs = ou_joint_sample(&mix, s, s + delta, &mut rng, 20_000).unwrap();
            let sq: Vec<f64> = pairs.iter().map(|(a, b)| (b - a).norm_squared()).collect();
            let (mean, _) = mean_se(&sq);
            let bound = 10.0 * (delta * delta * m2 + delta * 2.0);
            assert!(mean <= bound, "mean {mean} bound {bound} at s={s} δ={delta}");
        }
    }

    #[test]
    fn cld_exp_critical_matches_closed_form() {
        // exp(t A_2) = e^{-t} (I + t (A_2 + I))
        let t = 1.0;
        let m0 = cld_exp_drift(t, 2.0);
        let e = (-1.0f64).exp();
        assert_relative_eq!(m0[(0, 0)], 2.0 * e, epsilon = 1e-12);
        assert_relative_eq!(m0[(0, 1)], e, epsilon = 1e-12);
        assert_relative_eq!(m0[(1, 0)], -e, epsilon = 1e-12);
        assert_relative_eq!(m0[(1, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn cld_exp_matches_series_oracle() {
        // scaling-and-squaring Taylor oracle
        fn exp_taylor(t: f64, gamma: f64) -> Matrix2<f64> {
            let a = Matrix2::new(0.0, 1.0, -1.0, -gamma);
            let mut k = 0;
            let mut scaled = a * t;
            while scaled.norm() > 0.25 {
                scaled /= 2.0;
                k += 1;
            }
            let mut term = Matrix2::identity();
            let mut acc = Matrix2::identity();
            for i in 1..30 {
                term = term * scaled / i as f64;
                acc += term;
            }
            for _ in 0..k {
                acc = acc * acc;
            }
            acc
        }
        for gamma in [0.5, 1.0, 2.0, 3.0, 4.0] {
            for t in [0.01, 0.3, 1.7] {
                let fast = cld_exp_drift(t, gamma);
                let slow = exp_taylor(t, gamma);
                assert!((fast - slow).norm() < 1e-10, "γ={gamma} t={t}");
            }
        }
    }

    #[test]
    fn cld_spectrum_example() {
        let spec = cld_drift_spectrum(4.0);
        let sqrt3 = 3.0f64.sqrt();
        assert_relative_eq!(spec[0].0, -2.0 + sqrt3, epsilon = 1e-12);
        assert_relative_eq!(spec[1].0, -2.0 - sqrt3, epsilon = 1e-12);
    }

    #[test]
    fn cld_transition_zero_and_semigroup() {
        let tr = cld_transition(0.0, 2.0).unwrap();
        assert!((tr.m0 - Matrix2::identity()).norm() < 1e-14);
        assert!(tr.m1.norm() < 1e-14);
        for gamma in [1.0, 2.0, 3.5] {
            for (s, t) in [(0.2, 0.7), (1.0, 2.0)] {
                let a = cld_exp_drift(s, gamma) * cld_exp_drift(t, gamma);
                let b = cld_exp_drift(s + t, gamma);
                assert!((a - b).norm() < 1e-12, "γ={gamma}");
            }
        }
    }

    #[test]
    fn cld_noise_cov_closed_form_matches_quadrature() {
        for t in [1e-4, 0.05, 0.5, 2.0, 10.0] {
            let closed = cld_transition(t, 2.0).unwrap().m1;
            let quad = cld_noise_cov_quadrature(t, 2.0, 1e-13);
            assert!((closed - quad).norm() < 1e-9, "t={t}: {closed} vs {quad}");
        }
    }

    #[test]
    fn cld_m1_psd_and_operator_norm() {
        for i in 0..40 {
            let t = 1e-4 * (10.0f64 / 1e-4).powf(i as f64 / 39.0);
            let m1 = cld_transition(t, 2.0).unwrap().m1;
            let eig = nalgebra::SymmetricEigen::new(m1);
            let min = eig.eigenvalues.min();
            let max = eig.eigenvalues.max();
            assert!(min > -1e-12, "t={t} min eig {min}");
            if t <= 1.0 {
                assert!(max <= 8.0 * t, "t={t} ‖M1‖ = {max}");
            }
        }
    }

    #[test]
    fn cld_marginal_initialization_and_stationarity() {
        // t = 0 gives q ⊗ γ_d exactly
        let g = TargetDistribution::isotropic_gaussian(DVector::from_element(2, 1.0), 3.0).unwrap();
        let m = cld_marginal(&g, 0.0, 2.0).unwrap();
        let comp = &m.law().components()[0];
        assert_relative_eq!(comp.mean()[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(comp.mean()[2], 0.0, epsilon = 1e-12);
        assert_relative_eq!(comp.cov()[(0, 0)], 3.0, epsilon = 1e-12);
        assert_relative_eq!(comp.cov()[(2, 2)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(comp.cov()[(0, 2)], 0.0, epsilon = 1e-10);

        // q = γ_d is stationary: marginal is γ_{2d} for all t
        let std = TargetDistribution::standard_gaussian(2);
        for t in [0.05, 0.7, 3.0] {
            let m = cld_marginal(&std, t, 2.0).unwrap();
            let comp = &m.law().components()[0];
            assert!(comp.mean().norm() < 1e-13);
            assert!((comp.cov() - DMatrix::<f64>::identity(4, 4)).norm() < 1e-10, "t={t}");
        }
    }

    #[test]
    fn velocity_score_matches_finite_difference() {
        let c1 = Gaussian::isotropic(DVector::from_vec(vec![-1.0, 0.5]), 0.8).unwrap();
        let c2 = Gaussian::isotropic(DVector::from_vec(vec![1.5, -0.5]), 1.2).unwrap();
        let mix = TargetDistribution::mixture(
            GaussianMixture::new(vec![0.35, 0.65], vec![c1, c2]).unwrap(),
        );
        let m = cld_marginal(&mix, 0.4, 2.0).unwrap();
        let f = StreamFactory::new(21);
        let mut rng = f.stream(Domain::TargetSampling, 0);
        for _ in 0..50 {
            let theta = m.sample_one(&mut rng);
            let vs = m.velocity_score(&theta);
            let full_fd = fd_gradient(|y| m.log_density(y), &theta, 1e-5);
            let fd_v = full_fd.rows(2, 2).into_owned();
            let rel = (&vs - &fd_v).norm() / vs.norm().max(1e-6);
            assert!(rel < 1e-5, "rel {rel}");
        }
    }

    #[test]
    fn noised_lipschitz_examples() {
        let f = StreamFactory::new(3);
        let std = TargetDistribution::standard_gaussian(2);
        for t in [0.0, 0.2, 3.0] {
            assert_relative_eq!(noised_lipschitz(&std, t, &f).unwrap(), 1.0, epsilon = 1e-12);
        }
        let wide = TargetDistribution::isotropic_gaussian(DVector::zeros(1), 4.0).unwrap();
        let l = noised_lipschitz(&wide, 2.0f64.ln(), &f).unwrap();
        assert_relative_eq!(l, 1.0 / 1.75, epsilon = 1e-12);

        // sphere bound ~ R²/t² for small t (within the a², (1-e^{-2t}) ≈ 2t factors)
        let sph = TargetDistribution::sphere(2, 3.0).unwrap();
        let t = 1e-3;
        let l = noised_lipschitz(&sph, t, &f).unwrap();
        let order = 9.0 / (t * t);
        assert!(l > order / 8.0 && l < order, "{l} vs {order}");
        assert!(noised_lipschitz(&sph, 0.0, &f).is_err());
    }

    #[test]
    fn sphere_convolution_density_normalizes() {
        // d = 2: integrate the radial density over [0, ∞)
        let s = TargetDistribution::sphere(2, 1.0).unwrap();
        let m = ou_marginal(&s, 0.3).unwrap();
        let conv = match &m {
            OuMarginal::SphereConv(c) => c,
            _ => panic!(),
        };
        let total = quad::integrate_adaptive(
            |r| {
                if r <= 0.0 {
                    return 0.0;
                }
                let x = DVector::from_vec(vec![r, 0.0]);
                2.0 * std::f64::consts::PI * r * conv.log_density(&x).exp()
            },
            0.0,
            12.0,
            1e-10,
        );
        assert!((total - 1.0).abs() < 1e-7, "total mass {total}");
    }

    #[test]
    fn sphere_convolution_score_matches_finite_difference() {
        let s = TargetDistribution::sphere(3, 2.0).unwrap();
        for t in [0.05, 0.5, 2.0] {
            let m = ou_marginal(&s, t).unwrap();
            let f = StreamFactory::new(5);
            let mut rng = f.stream(Domain::TargetSampling, 0);
            for _ in 0..25 {
                let x = m.sample_one(&mut rng);
                let analytic = m.score(&x).unwrap();
                let fd = fd_gradient(|y| m.log_density(y).unwrap(), &x, 1e-5);
                let rel = (&analytic - &fd).norm() / analytic.norm().max(1e-6);
                assert!(rel < 2e-5, "t={t} rel {rel}");
            }
        }
    }

    #[test]
    fn sphere_batch_scores_match_pointwise() {
        let s = TargetDistribution::sphere(2, 1.0).unwrap();
        let m = ou_marginal(&s, 0.01).unwrap();
        let f = StreamFactory::new(6);
        let mut rng = f.stream(Domain::TargetSampling, 0);
        let n = 3000;
        let mut pts = DMatrix::zeros(n, 2);
        for i in 0..n {
            let x = m.sample_one(&mut rng);
            pts.row_mut(i).copy_from(&x.transpose());
        }
        let batch = m.score_batch(&pts).unwrap();
        for i in (0..n).step_by(97) {
            let x = DVector::from_vec(vec![pts[(i, 0)], pts[(i, 1)]]);
            let direct = m.score(&x).unwrap();
            let diff = ((batch[(i, 0)] - direct[0]).powi(2) + (batch[(i, 1)] - direct[1]).powi(2))
                .sqrt();
            assert!(diff <= 1e-6 * direct.norm().max(1.0), "row {i}: {diff}");
        }
    }

    #[test]
    fn ball_convolution_matches_finite_difference_and_1d_closed_form() {
        let b2 = TargetDistribution::ball(2, 1.5).unwrap();
        let m = ou_marginal(&b2, 0.2).unwrap();
        let f = StreamFactory::new(7);
        let mut rng = f.stream(Domain::TargetSampling, 0);
        for _ in 0..15 {
            let x = m.sample_one(&mut rng);
            let analytic = m.score(&x).unwrap();
            let fd = fd_gradient(|y| m.log_density(y).unwrap(), &x, 1e-5);
            let rel = (&analytic - &fd).norm() / analytic.norm().max(1e-6);
            assert!(rel < 5e-5, "rel {rel}");
        }

        let b1 = TargetDistribution::ball(1, 1.0).unwrap();
        let m1 = ou_marginal(&b1, 0.3).unwrap();
        for x in [-1.2, -0.3, 0.0, 0.8, 1.4] {
            let xv = DVector::from_element(1, x);
            let fd = fd_gradient(|y| m1.log_density(y).unwrap(), &xv, 1e-6);
            let sc = m1.score(&xv).unwrap();
            assert!((sc[0] - fd[0]).abs() < 1e-4 * sc[0].abs().max(1.0));
        }
    }
}
