//! Denoising score matching on simple hypothesis classes.
//!
//! The DSM objective E‖s_t(X_t) + Z/sqrt(1-e^{-2t})‖² differs from the
//! explicit L²(q_t) score loss by a constant that does not depend on the
//! model, so the two share minimizers. `objective_equivalence_check`
//! verifies that numerically with common random numbers; `fit_dsm` solves
//! the empirical problem per grid time in closed form.

use crate::error::{Error, Result};
use crate::forward::{ou_marginal, OuTransition};
use crate::streams::{Domain, StreamFactory};
use crate::targets::TargetDistribution;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// s(x) = A x + b.
#[derive(Debug, Clone)]
pub struct AffineScore {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl AffineScore {
    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b
    }
}

/// Random Fourier feature map φ_j(x) = cos(⟨ω_j, x⟩ + φ_j).
#[derive(Debug, Clone)]
pub struct FourierFeatures {
    pub omegas: Vec<DVector<f64>>,
    pub phases: Vec<f64>,
}

impl FourierFeatures {
    pub fn draw<R: Rng + ?Sized>(
        input_dim: usize,
        count: usize,
        bandwidth: f64,
        rng: &mut R,
    ) -> Self {
        let omegas = (0..count)
            .map(|_| {
                DVector::from_fn(input_dim, |_, _| {
                    bandwidth * rng.sample::<f64, _>(StandardNormal)
                })
            })
            .collect();
        let phases = (0..count)
            .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
            .collect();
        Self { omegas, phases }
    }

    pub fn len(&self) -> usize {
        self.omegas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omegas.is_empty()
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.len(), |j, _| {
            (self.omegas[j].dot(x) + self.phases[j]).cos()
        })
    }
}

/// Hypothesis class for the per-time fits.
#[derive(Debug, Clone)]
pub enum ModelClass {
    Affine,
    RandomFeatures {
        count: usize,
        bandwidth: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone)]
enum ModelKind {
    Affine(Vec<AffineScore>),
    RandomFeatures {
        features: FourierFeatures,
        /// per time: d × m weight matrix
        weights: Vec<DMatrix<f64>>,
    },
}

/// A score model defined on a fixed time grid.
#[derive(Debug, Clone)]
pub struct ScoreModel {
    times: Vec<f64>,
    kind: ModelKind,
}

impl ScoreModel {
    pub fn from_affine(times: Vec<f64>, maps: Vec<AffineScore>) -> Result<Self> {
        if times.len() != maps.len() || times.is_empty() {
            return Err(Error::Usage(
                "times and maps must align and be nonempty".into(),
            ));
        }
        Ok(Self {
            times,
            kind: ModelKind::Affine(maps),
        })
    }

    pub fn from_random_features(
        times: Vec<f64>,
        features: FourierFeatures,
        weights: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        if times.len() != weights.len() || times.is_empty() {
            return Err(Error::Usage(
                "times and weights must align and be nonempty".into(),
            ));
        }
        Ok(Self {
            times,
            kind: ModelKind::RandomFeatures { features, weights },
        })
    }

    /// Per-time views for serialization: affine maps or feature weights.
    pub fn parts(&self) -> ModelParts<'_> {
        match &self.kind {
            ModelKind::Affine(maps) => ModelParts::Affine(maps),
            ModelKind::RandomFeatures { features, weights } => ModelParts::RandomFeatures {
                features,
                weights,
            },
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            ModelKind::Affine(maps) => maps[0].b.len(),
            ModelKind::RandomFeatures { weights, .. } => weights[0].nrows(),
        }
    }

    fn index_of(&self, t: f64) -> Result<usize> {
        self.times
            .iter()
            .position(|&g| (g - t).abs() <= 1e-9 * t.abs().max(1.0))
            .ok_or_else(|| Error::Usage(format!("time {t} is not on the model grid")))
    }

    pub fn affine_at(&self, t: f64) -> Result<&AffineScore> {
        let i = self.index_of(t)?;
        match &self.kind {
            ModelKind::Affine(maps) => Ok(&maps[i]),
            _ => Err(Error::Unsupported("model is not affine".into())),
        }
    }

    pub fn eval(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let i = self.index_of(t)?;
        Ok(match &self.kind {
            ModelKind::Affine(maps) => maps[i].eval(x),
            ModelKind::RandomFeatures { features, weights } => &weights[i] * features.eval(x),
        })
    }
}

/// Borrowed view of a model's internals, for file serialization.
pub enum ModelParts<'a> {
    Affine(&'a [AffineScore]),
    RandomFeatures {
        features: &'a FourierFeatures,
        weights: &'a [DMatrix<f64>],
    },
}

/// Monte Carlo estimate of the DSM objective at time t.
pub fn dsm_loss<R: Rng + ?Sized>(
    model: &ScoreModel,
    target: &TargetDistribution,
    t: f64,
    n: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if !(t > 0.0) {
        return Err(Error::Usage(
            "dsm loss undefined at t = 0: the noise scale 1/sqrt(1-e^{-2t}) diverges".into(),
        ));
    }
    let tr = OuTransition::new(t)?;
    let s = tr.noise_std();
    let d = target.dim();
    let mut sum = 0.0;
    let mut sq = 0.0;
    for _ in 0..n {
        let x0 = target.sample_one(rng);
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let xt = &x0 * tr.mean_scale + &z * s;
        let v = (model.eval(t, &xt)? + &z / s).norm_squared();
        sum += v;
        sq += v * v;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let se = ((sq / nf - mean * mean).max(0.0) / nf).sqrt();
    Ok((mean, se))
}

/// Diagnostics of a per-time least squares fit.
#[derive(Debug, Clone)]
pub struct FitDiagnostics {
    pub t: f64,
    /// standard errors of the stacked coefficients; rows = features (plus
    /// intercept for the affine class), columns = output coordinates
    pub coef_se: DMatrix<f64>,
    pub residual_variance: f64,
}

#[derive(Debug, Clone)]
pub struct FittedModel {
    pub model: ScoreModel,
    pub diagnostics: Vec<FitDiagnostics>,
}

const RIDGE: f64 = 1e-8;

/// Per-time least squares solution of the empirical DSM problem.
pub fn fit_dsm(
    class: &ModelClass,
    target: &TargetDistribution,
    times: &[f64],
    n_per_time: usize,
    factory: &StreamFactory,
) -> Result<FittedModel> {
    let d = target.dim();
    let dof = match class {
        ModelClass::Affine => d + 1,
        ModelClass::RandomFeatures { count, .. } => *count,
    };
    if n_per_time < dof * 10 {
        return Err(Error::Usage(format!(
            "need n >= 10x degrees of freedom ({}), got {n_per_time}",
            dof * 10
        )));
    }
    let features = match class {
        ModelClass::RandomFeatures {
            count,
            bandwidth,
            seed,
        } => {
            let mut rng = StreamFactory::new(*seed).stream(Domain::ScoreMatching, u64::MAX);
            Some(FourierFeatures::draw(d, *count, *bandwidth, &mut rng))
        }
        ModelClass::Affine => None,
    };

    let mut affine_maps = Vec::new();
    let mut rf_weights = Vec::new();
    let mut diagnostics = Vec::new();
    for (k, &t) in times.iter().enumerate() {
        if !(t > 0.0) {
            return Err(Error::Usage("fit times must be positive".into()));
        }
        let tr = OuTransition::new(t)?;
        let s = tr.noise_std();
        let mut rng = factory.stream(Domain::ScoreMatching, k as u64);
        let mut design = DMatrix::zeros(n_per_time, dof);
        let mut response = DMatrix::zeros(n_per_time, d);
        for i in 0..n_per_time {
            let x0 = target.sample_one(&mut rng);
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let xt = &x0 * tr.mean_scale + &z * s;
            match &features {
                None => {
                    for j in 0..d {
                        design[(i, j)] = xt[j];
                    }
                    design[(i, d)] = 1.0;
                }
                Some(f) => {
                    let phi = f.eval(&xt);
                    for j in 0..dof {
                        design[(i, j)] = phi[j];
                    }
                }
            }
            for j in 0..d {
                response[(i, j)] = -z[j] / s;
            }
        }
        let gram = design.transpose() * &design + DMatrix::<f64>::identity(dof, dof) * RIDGE;
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::SingularFit(format!("normal equations singular at t = {t}")))?;
        let rhs = design.transpose() * &response;
        let coef = chol.solve(&rhs); // dof × d

        // classical OLS standard errors from the residual variance
        let resid = &design * &coef - &response;
        let dofree = (n_per_time - dof).max(1) as f64;
        let gram_inv = chol.inverse();
        let mut coef_se = DMatrix::zeros(dof, d);
        let mut total_rv = 0.0;
        for j in 0..d {
            let rss: f64 = resid.column(j).iter().map(|r| r * r).sum();
            let sigma2 = rss / dofree;
            total_rv += sigma2;
            for i in 0..dof {
                coef_se[(i, j)] = (sigma2 * gram_inv[(i, i)]).sqrt();
            }
        }
        diagnostics.push(FitDiagnostics {
            t,
            coef_se,
            residual_variance: total_rv / d as f64,
        });
        match &features {
            None => {
                let a = coef.rows(0, d).transpose();
                let b = coef.row(d).transpose();
                affine_maps.push(AffineScore { a, b });
            }
            Some(_) => rf_weights.push(coef.transpose()),
        }
    }
    let kind = match features {
        None => ModelKind::Affine(affine_maps),
        Some(features) => ModelKind::RandomFeatures {
            features,
            weights: rf_weights,
        },
    };
    Ok(FittedModel {
        model: ScoreModel {
            times: times.to_vec(),
            kind,
        },
        diagnostics,
    })
}

/// Both objective gaps between two models and their difference, estimated
/// with common random numbers so the model-independent constant cancels
/// pathwise.
#[derive(Debug, Clone)]
pub struct EquivalenceReport {
    pub dsm_gap: (f64, f64),
    pub l2_gap: (f64, f64),
    pub difference: (f64, f64),
    pub pass: bool,
}

pub fn objective_equivalence_check<R: Rng + ?Sized>(
    s1: &ScoreModel,
    s2: &ScoreModel,
    target: &TargetDistribution,
    t: f64,
    n: usize,
    rng: &mut R,
) -> Result<EquivalenceReport> {
    if !(t > 0.0) {
        return Err(Error::Usage("equivalence check needs t > 0".into()));
    }
    let marginal = ou_marginal(target, t)?;
    let tr = OuTransition::new(t)?;
    let s = tr.noise_std();
    let d = target.dim();
    let mut dsm = Vec::with_capacity(n);
    let mut l2 = Vec::with_capacity(n);
    let mut diff = Vec::with_capacity(n);
    for _ in 0..n {
        let x0 = target.sample_one(rng);
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let xt = &x0 * tr.mean_scale + &z * s;
        let truth = marginal.score(&xt)?;
        let e1 = s1.eval(t, &xt)?;
        let e2 = s2.eval(t, &xt)?;
        let dsm_i = (&e1 + &z / s).norm_squared() - (&e2 + &z / s).norm_squared();
        let l2_i = (&e1 - &truth).norm_squared() - (&e2 - &truth).norm_squared();
        dsm.push(dsm_i);
        l2.push(l2_i);
        diff.push(dsm_i - l2_i);
    }
    let stats = |v: &[f64]| {
        let nf = v.len() as f64;
        let mean = v.iter().sum::<f64>() / nf;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (nf - 1.0);
        (mean, (var / nf).sqrt())
    };
    let dsm_gap = stats(&dsm);
    let l2_gap = stats(&l2);
    let difference = stats(&diff);
    let pass = difference.0.abs() <= 3.0 * difference.1;
    Ok(EquivalenceReport {
        dsm_gap,
        l2_gap,
        difference,
        pass,
    })
}
