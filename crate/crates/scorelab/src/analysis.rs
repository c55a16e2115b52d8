//! Path-KL estimators, the exact Gaussian chain law, evaluable bound
//! right-hand sides, and the lemma verification drivers.
//!
//! The path KL between the true reverse process and the frozen-score
//! algorithm started from the same law is the time integral of the
//! squared drift mismatch (prefactor 1 on position space, 2 on phase
//! space). The true reverse paths are simulated without discretization
//! bias by sampling the forward process exactly on a fine grid and
//! reversing the index; the integral is a trapezoid over the inner grid.

use crate::error::{Error, Result};
use crate::forward::{cld_marginal, cld_transition, ou_marginal, CldMarginal, OuMarginal, OuTransition};
use crate::gauss::Gaussian;
use crate::metrics;
use crate::samplers::{CldStepKernel, DdpmStepKernel, SamplerConfig};
use crate::score_matching::AffineScore;
use crate::score_oracle::{exact_score, Process, ScoreEstimate};
use crate::streams::{Domain, StreamFactory};
use crate::targets::TargetDistribution;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// Monte Carlo estimate of the Girsanov path KL.
#[derive(Debug, Clone)]
pub struct GirsanovEstimate {
    pub process: Process,
    /// (mean, se) of each step's contribution.
    pub per_step: Vec<(f64, f64)>,
    pub total: f64,
    pub total_se: f64,
    pub inner_substeps: usize,
    pub n_paths: usize,
}

const GIRSANOV_BLOCK: usize = 256;

/// KL(true reverse ‖ frozen-score algorithm started from q_T), by exact
/// forward-bridge simulation and trapezoid integration of the squared
/// drift mismatch. Prefactor 1 for the position process, 2 for the
/// phase-space process.
pub fn girsanov_kl(
    estimate: &ScoreEstimate,
    cfg: &SamplerConfig,
    n_paths: usize,
    inner_substeps: usize,
) -> Result<GirsanovEstimate> {
    let out = girsanov_core(estimate, cfg, n_paths, inner_substeps, &[1])?;
    Ok(out.into_iter().next().unwrap())
}

/// The same estimate at inner resolutions m and 2m on common paths, for
/// trapezoid-refinement stability checks.
pub fn girsanov_kl_refinement_pair(
    estimate: &ScoreEstimate,
    cfg: &SamplerConfig,
    n_paths: usize,
    inner_substeps: usize,
) -> Result<(GirsanovEstimate, GirsanovEstimate)> {
    let out = girsanov_core(estimate, cfg, n_paths, 2 * inner_substeps, &[2, 1])?;
    let mut it = out.into_iter();
    Ok((it.next().unwrap(), it.next().unwrap()))
}

enum FineMarginals {
    Ou(Vec<OuMarginal>),
    Cld(Vec<CldMarginal>),
}

fn girsanov_core(
    estimate: &ScoreEstimate,
    cfg: &SamplerConfig,
    n_paths: usize,
    m_fine: usize,
    strides: &[usize],
) -> Result<Vec<GirsanovEstimate>> {
    let target = estimate.target();
    let run_steps = cfg.run_steps() as usize;
    if run_steps == 0 {
        return Ok(strides
            .iter()
            .map(|&s| GirsanovEstimate {
                process: cfg.process,
                per_step: Vec::new(),
                total: 0.0,
                total_se: 0.0,
                inner_substeps: m_fine / s,
                n_paths,
            })
            .collect());
    }
    if m_fine / strides.iter().copied().max().unwrap() < 4 {
        return Err(Error::Usage("need at least 4 inner substeps".into()));
    }
    if target.is_singular() && cfg.early_stop_steps == 0 {
        return Err(Error::Usage(
            "singular target needs an early stop for the path-KL estimator".into(),
        ));
    }
    let d = target.dim();
    let sd = cfg.process.state_dim(d);
    let h = cfg.step_size();
    let delta = h / m_fine as f64;
    let fine = run_steps * m_fine;
    let k0 = cfg.early_stop_steps as usize * m_fine;
    let fine_time = |i: usize| (k0 + i) as f64 * delta;

    // exact marginal laws on the fine grid: the ground-truth scores
    let gamma = match cfg.process {
        Process::Ddpm => 0.0,
        Process::Cld { gamma } => gamma,
    };
    let marginals = match cfg.process {
        Process::Ddpm => FineMarginals::Ou(
            (0..=fine)
                .map(|i| ou_marginal(target, fine_time(i)))
                .collect::<Result<Vec<_>>>()?,
        ),
        Process::Cld { .. } => FineMarginals::Cld(
            (0..=fine)
                .map(|i| cld_marginal(target, fine_time(i), gamma))
                .collect::<Result<Vec<_>>>()?,
        ),
    };

    // exact one-increment forward kernels
    let ou_inc = OuTransition::new(delta)?;
    let cld_inc = if cfg.process.is_cld() {
        Some(cld_transition(delta, gamma)?)
    } else {
        None
    };
    let cld_inc_chol = cld_inc.map(|tr| {
        let m1 = tr.m1;
        let lxx = m1[(0, 0)].max(0.0).sqrt();
        let (lvx, lvv) = if lxx > 1e-300 {
            let lvx = m1[(0, 1)] / lxx;
            (lvx, (m1[(1, 1)] - lvx * lvx).max(0.0).sqrt())
        } else {
            (0.0, m1[(1, 1)].max(0.0).sqrt())
        };
        (tr.m0, [lxx, lvx, lvv])
    });

    let factory = StreamFactory::new(cfg.seed);
    let n_blocks = n_paths.div_ceil(GIRSANOV_BLOCK);

    struct BlockOut {
        /// per stride: per-step sums and per-path totals
        sums: Vec<Vec<f64>>,
        sumsqs: Vec<Vec<f64>>,
        totals: Vec<Vec<f64>>,
    }

    let block_results: Vec<Result<BlockOut>> = (0..n_blocks)
        .into_par_iter()
        .map(|block| {
            let lo = block * GIRSANOV_BLOCK;
            let hi = ((block + 1) * GIRSANOV_BLOCK).min(n_paths);
            let bn = hi - lo;
            // simulate exact forward paths on the fine grid
            let mut paths = vec![0.0f64; bn * (fine + 1) * sd];
            for (p, path_idx) in (lo..hi).enumerate() {
                let mut rng = factory.stream(Domain::Girsanov, path_idx as u64);
                let base = p * (fine + 1) * sd;
                match cfg.process {
                    Process::Ddpm => {
                        let z0 = target.sample_one(&mut rng);
                        let first = OuTransition::new(fine_time(0)).unwrap();
                        for j in 0..d {
                            paths[base + j] = first.mean_scale * z0[j]
                                + first.noise_std() * rng.sample::<f64, _>(StandardNormal);
                        }
                        for i in 1..=fine {
                            let prev = base + (i - 1) * sd;
                            let cur = base + i * sd;
                            for j in 0..d {
                                paths[cur + j] = ou_inc.mean_scale * paths[prev + j]
                                    + ou_inc.noise_std() * rng.sample::<f64, _>(StandardNormal);
                            }
                        }
                    }
                    Process::Cld { .. } => {
                        // initial phase point at the first fine time
                        if k0 == 0 {
                            let z0 = target.sample_one(&mut rng);
                            for j in 0..d {
                                paths[base + j] = z0[j];
                                paths[base + d + j] = rng.sample::<f64, _>(StandardNormal);
                            }
                        } else {
                            let init = cld_marginal(target, fine_time(0), gamma).unwrap();
                            let theta = init.sample_one(&mut rng);
                            for j in 0..sd {
                                paths[base + j] = theta[j];
                            }
                        }
                        let (m0, l) = cld_inc_chol.unwrap();
                        for i in 1..=fine {
                            let prev = base + (i - 1) * sd;
                            let cur = base + i * sd;
                            for j in 0..d {
                                let x = paths[prev + j];
                                let v = paths[prev + d + j];
                                let z1: f64 = rng.sample(StandardNormal);
                                let z2: f64 = rng.sample(StandardNormal);
                                paths[cur + j] =
                                    m0[(0, 0)] * x + m0[(0, 1)] * v + l[0] * z1;
                                paths[cur + d + j] =
                                    m0[(1, 0)] * x + m0[(1, 1)] * v + l[1] * z1 + l[2] * z2;
                            }
                        }
                    }
                }
            }

            let prefactor = if cfg.process.is_cld() { 2.0 } else { 1.0 };
            let mut sums = vec![vec![0.0f64; run_steps]; strides.len()];
            let mut sumsqs = vec![vec![0.0f64; run_steps]; strides.len()];
            let mut totals = vec![vec![0.0f64; bn]; strides.len()];

            // per algorithm step: frozen estimate at the left endpoint,
            // mismatch against the exact score along the bridge
            let mut states = DMatrix::zeros(bn, sd);
            for k in 0..run_steps {
                let anchor = (run_steps - k) * m_fine;
                for p in 0..bn {
                    let base = p * (fine + 1) * sd + anchor * sd;
                    for j in 0..sd {
                        states[(p, j)] = paths[base + j];
                    }
                }
                let t_fwd = (cfg.steps - k as u32) as f64 * h;
                let frozen = estimate.eval_batch(t_fwd, &states)?;

                let mut theta = DVector::zeros(sd);
                for p in 0..bn {
                    // integrand at every fine node of this step
                    let mut integrand = vec![0.0f64; m_fine + 1];
                    for (j, val) in integrand.iter_mut().enumerate() {
                        let idx = anchor - j;
                        let base = p * (fine + 1) * sd + idx * sd;
                        for c in 0..sd {
                            theta[c] = paths[base + c];
                        }
                        let truth = match &marginals {
                            FineMarginals::Ou(ms) => ms[idx].score(&theta)?,
                            FineMarginals::Cld(ms) => ms[idx].velocity_score(&theta),
                        };
                        let mut acc = 0.0;
                        for c in 0..d {
                            let diff = frozen[(p, c)] - truth[c];
                            acc += diff * diff;
                        }
                        *val = acc;
                    }
                    for (si, &stride) in strides.iter().enumerate() {
                        let msub = m_fine / stride;
                        let dt = h / msub as f64;
                        let mut tz = 0.5 * (integrand[0] + integrand[m_fine]);
                        for j in 1..msub {
                            tz += integrand[j * stride];
                        }
                        let contrib = prefactor * dt * tz;
                        sums[si][k] += contrib;
                        sumsqs[si][k] += contrib * contrib;
                        totals[si][p] += contrib;
                    }
                }
            }
            Ok(BlockOut {
                sums,
                sumsqs,
                totals,
            })
        })
        .collect();

    // deterministic sequential reduction in block order
    let mut sums = vec![vec![0.0f64; run_steps]; strides.len()];
    let mut sumsqs = vec![vec![0.0f64; run_steps]; strides.len()];
    let mut totals: Vec<Vec<f64>> = vec![Vec::with_capacity(n_paths); strides.len()];
    for block in block_results {
        let block = block?;
        for si in 0..strides.len() {
            for k in 0..run_steps {
                sums[si][k] += block.sums[si][k];
                sumsqs[si][k] += block.sumsqs[si][k];
            }
            totals[si].extend(&block.totals[si]);
        }
    }
    let nf = n_paths as f64;
    Ok(strides
        .iter()
        .enumerate()
        .map(|(si, &stride)| {
            let per_step: Vec<(f64, f64)> = (0..run_steps)
                .map(|k| {
                    let mean = sums[si][k] / nf;
                    let var = (sumsqs[si][k] / nf - mean * mean).max(0.0);
                    (mean, (var / nf).sqrt())
                })
                .collect();
            let total_mean = totals[si].iter().sum::<f64>() / nf;
            let total_var = totals[si]
                .iter()
                .map(|t| (t - total_mean) * (t - total_mean))
                .sum::<f64>()
                / (nf - 1.0).max(1.0);
            GirsanovEstimate {
                process: cfg.process,
                per_step,
                total: total_mean,
                total_se: (total_var / nf).sqrt(),
                inner_substeps: m_fine / stride,
                n_paths,
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Exact Gaussian chain law
// ---------------------------------------------------------------------------

/// Exact output law of the algorithm when every per-step score is affine:
/// the chain stays Gaussian and its mean/covariance propagate through the
/// exact step kernels. `scores[k]` is the map used at step k (evaluated
/// at forward time T - kh); for the phase-space process it maps R^{2d}
/// to R^d.
pub fn gaussian_chain_law(
    cfg: &SamplerConfig,
    init: &Gaussian,
    scores: &[AffineScore],
) -> Result<Gaussian> {
    let run_steps = cfg.run_steps() as usize;
    if scores.len() != run_steps {
        return Err(Error::Usage(format!(
            "need one affine score per executed step ({run_steps}), got {}",
            scores.len()
        )));
    }
    let h = cfg.step_size();
    let mut law = init.clone();
    match cfg.process {
        Process::Ddpm => {
            let kernel = DdpmStepKernel::new(h)?;
            let d = law.dim();
            let eye = DMatrix::<f64>::identity(d, d);
            for map in scores {
                let m = &eye * kernel.coef_x + &map.a * kernel.coef_s;
                let mean = &m * law.mean() + &map.b * kernel.coef_s;
                let cov = &m * law.cov() * m.transpose()
                    + &eye * (kernel.noise_std * kernel.noise_std);
                law = Gaussian::new(mean, cov)?;
            }
        }
        Process::Cld { gamma } => {
            let kernel = CldStepKernel::new(h, gamma)?;
            let sd = law.dim();
            let d = sd / 2;
            let mut exp_b = DMatrix::<f64>::zeros(sd, sd);
            for i in 0..d {
                exp_b[(i, i)] = kernel.exp_b[(0, 0)];
                exp_b[(i, d + i)] = kernel.exp_b[(0, 1)];
                exp_b[(d + i, i)] = kernel.exp_b[(1, 0)];
                exp_b[(d + i, d + i)] = kernel.exp_b[(1, 1)];
            }
            let mut k_in = DMatrix::<f64>::zeros(sd, d);
            for i in 0..d {
                k_in[(i, i)] = kernel.input[0];
                k_in[(d + i, i)] = kernel.input[1];
            }
            let mut step_cov = DMatrix::<f64>::zeros(sd, sd);
            for i in 0..d {
                step_cov[(i, i)] = kernel.cov[(0, 0)];
                step_cov[(i, d + i)] = kernel.cov[(0, 1)];
                step_cov[(d + i, i)] = kernel.cov[(1, 0)];
                step_cov[(d + i, d + i)] = kernel.cov[(1, 1)];
            }
            for map in scores {
                let m = &exp_b + &k_in * &map.a;
                let mean = &m * law.mean() + &k_in * &map.b;
                let cov = &m * law.cov() * m.transpose() + &step_cov;
                law = Gaussian::new(mean, cov)?;
            }
        }
    }
    Ok(law)
}

/// Per-step affine maps of an exact or bias-perturbed estimate on a
/// Gaussian target, in step order.
pub fn affine_score_schedule(
    estimate: &ScoreEstimate,
    cfg: &SamplerConfig,
) -> Result<Vec<AffineScore>> {
    let h = cfg.step_size();
    (0..cfg.run_steps())
        .map(|k| {
            let t_fwd = (cfg.steps - k) as f64 * h;
            estimate.affine_at(t_fwd).ok_or_else(|| {
                Error::Unsupported("estimate is not affine on this target".into())
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Bound right-hand sides
// ---------------------------------------------------------------------------

/// Inputs of the evaluable convergence-bound right-hand sides. All hidden
/// constants are set to 1; `constant` rescales the total.
#[derive(Debug, Clone)]
pub enum BoundParams {
    Ddpm {
        kl_to_gaussian: f64,
        lipschitz: f64,
        dim: usize,
        m2: f64,
        horizon: f64,
        h: f64,
        eps_sc: f64,
        constant: f64,
    },
    Cld {
        kl_to_gaussian: f64,
        fisher_info: f64,
        /// decay rate c in e^{-cT}; the statement fixes only its existence
        rate_c: f64,
        lipschitz: f64,
        dim: usize,
        m2: f64,
        horizon: f64,
        h: f64,
        eps_sc: f64,
        constant: f64,
    },
    /// Order-level iteration count for compactly supported data,
    /// logarithmic factors dropped.
    CompactN {
        dim: usize,
        radius: f64,
        eps_tv: f64,
        eps_w2: f64,
    },
}

#[derive(Debug, Clone)]
pub struct BoundRhs {
    pub total: f64,
    /// labeled nonnegative terms (forward convergence, discretization,
    /// score error)
    pub terms: Vec<(String, f64)>,
}

pub fn theorem_bound_rhs(params: &BoundParams) -> Result<BoundRhs> {
    match params {
        BoundParams::Ddpm {
            kl_to_gaussian,
            lipschitz,
            dim,
            m2,
            horizon,
            h,
            eps_sc,
            constant,
        } => {
            if !kl_to_gaussian.is_finite() {
                return Err(Error::Usage(
                    "KL(q ‖ γ_d) must be finite for the position-space bound".into(),
                ));
            }
            let d = *dim as f64;
            let fc = kl_to_gaussian.max(0.0).sqrt() * (-horizon).exp();
            let disc = (lipschitz * (d * h).sqrt() + lipschitz * m2 * h) * horizon.sqrt();
            let score = eps_sc * horizon.sqrt();
            Ok(BoundRhs {
                total: constant * (fc + disc + score),
                terms: vec![
                    ("forward_convergence".into(), fc),
                    ("discretization".into(), disc),
                    ("score_error".into(), score),
                ],
            })
        }
        BoundParams::Cld {
            kl_to_gaussian,
            fisher_info,
            rate_c,
            lipschitz,
            dim,
            m2,
            horizon,
            h,
            eps_sc,
            constant,
        } => {
            if !fisher_info.is_finite() || !kl_to_gaussian.is_finite() {
                return Err(Error::Usage(
                    "phase-space bound needs finite KL and Fisher information".into(),
                ));
            }
            let d = *dim as f64;
            let fc = (kl_to_gaussian + fisher_info).max(0.0).sqrt() * (-rate_c * horizon).exp();
            let disc = (lipschitz * (d * h).sqrt() + lipschitz * m2 * h) * horizon.sqrt();
            let score = eps_sc * horizon.sqrt();
            Ok(BoundRhs {
                total: constant * (fc + disc + score),
                terms: vec![
                    ("forward_convergence".into(), fc),
                    ("discretization".into(), disc),
                    ("score_error".into(), score),
                ],
            })
        }
        BoundParams::CompactN {
            dim,
            radius,
            eps_tv,
            eps_w2,
        } => {
            let d = *dim as f64;
            let rvd = radius.max(d.sqrt());
            let n = d.powi(3) * radius.powi(4) * rvd.powi(4)
                / (eps_tv * eps_tv * eps_w2.powi(8));
            Ok(BoundRhs {
                total: n,
                terms: vec![("iteration_count".into(), n)],
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Lower bound for the phase-space sampler
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LowerBoundReport {
    pub d: usize,
    pub h: f64,
    pub horizon: f64,
    pub kl_mc: f64,
    pub kl_se: f64,
    /// d·h·T
    pub threshold: f64,
    pub pass: bool,
}

/// Checks the path-KL lower bound d·h·T for the exact-score phase-space
/// sampler on the stationary Gaussian. Requires h <= 1/10.
pub fn cld_lower_bound_check(
    d: usize,
    h: f64,
    horizon: f64,
    n_paths: usize,
    seed: u64,
) -> Result<LowerBoundReport> {
    if h > 0.1 + 1e-12 {
        return Err(Error::HypothesisViolated(format!(
            "lower bound requires step size h <= 1/10, got {h}"
        )));
    }
    let steps_f = horizon / h;
    let steps = steps_f.round() as u32;
    if ((steps as f64) - steps_f).abs() > 1e-9 {
        return Err(Error::Usage("horizon must be a multiple of h".into()));
    }
    let target = TargetDistribution::standard_gaussian(d);
    let estimate = exact_score(&target, Process::Cld { gamma: 2.0 })?;
    let cfg = SamplerConfig {
        process: Process::Cld { gamma: 2.0 },
        horizon,
        steps,
        early_stop_steps: 0,
        n_samples: 1,
        seed,
        record_trajectory: false,
        guard: crate::samplers::GuardMode::Off,
    };
    let est = girsanov_kl(&estimate, &cfg, n_paths, 8)?;
    let threshold = d as f64 * h * horizon;
    let pass = est.total >= 0.98 * threshold - 4.0 * est.total_se;
    Ok(LowerBoundReport {
        d,
        h,
        horizon,
        kl_mc: est.total,
        kl_se: est.total_se,
        threshold,
        pass,
    })
}

/// Stationary velocity increments of the phase-space forward process:
/// E‖V_t - V_s‖² = 2d(1 - e^{-δ}(1 - δ)) for γ = 2, which lies in
/// [2dδ - 10dδ², 4dδ] for δ <= 0.1.
pub fn stationary_velocity_increment(d: usize, delta: f64) -> f64 {
    2.0 * d as f64 * (1.0 - (-delta).exp() * (1.0 - delta))
}

// ---------------------------------------------------------------------------
// Lemma verification drivers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BoundRow {
    pub label: String,
    pub t: f64,
    pub value: f64,
    pub se: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct LemmaReport {
    pub rows: Vec<BoundRow>,
    /// max over rows of value / reference-envelope, where applicable
    pub fitted_c: f64,
    pub pass: bool,
}

/// Second-moment and score-norm rows along the forward process.
///
/// Position process: E‖Z_t‖² <= (d ∨ m2²)(1 + 4/√n) and
/// E‖∇ ln q_t(Z_t)‖² <= L_t d (1 + 4/√n). Phase space: E‖(Z,V)‖² <=
/// C (d + m2²) with the fitted C required <= 10, and the full-score norm
/// against L̄·2d.
pub fn verify_moment_bounds(
    target: &TargetDistribution,
    process: Process,
    grid: &[f64],
    n: usize,
    factory: &StreamFactory,
) -> Result<LemmaReport> {
    let d = target.dim() as f64;
    let m2sq = target.stats(factory).second_moment;
    let slack = 1.0 + 4.0 / (n as f64).sqrt();
    let mut rows = Vec::new();
    let mut fitted_c: f64 = 0.0;
    for (gi, &t) in grid.iter().enumerate() {
        let mut rng = factory.stream(Domain::LemmaChecks, gi as u64);
        match process {
            Process::Ddpm => {
                let marginal = ou_marginal(target, t)?;
                let mut m_sum = 0.0;
                let mut s_sum = 0.0;
                let mut m_sq = 0.0;
                let mut s_sq = 0.0;
                for _ in 0..n {
                    let x = marginal.sample_one(&mut rng);
                    let mv = x.norm_squared();
                    let sv = marginal.score(&x)?.norm_squared();
                    m_sum += mv;
                    m_sq += mv * mv;
                    s_sum += sv;
                    s_sq += sv * sv;
                }
                let nf = n as f64;
                let m_mean = m_sum / nf;
                let s_mean = s_sum / nf;
                let m_se = ((m_sq / nf - m_mean * m_mean).max(0.0) / nf).sqrt();
                let s_se = ((s_sq / nf - s_mean * s_mean).max(0.0) / nf).sqrt();
                let m_bound = d.max(m2sq) * slack;
                let lip = crate::forward::noised_lipschitz(target, t, factory)?;
                let s_bound = lip * d * slack;
                fitted_c = fitted_c.max(m_mean / d.max(m2sq));
                rows.push(BoundRow {
                    label: "second_moment".into(),
                    t,
                    value: m_mean,
                    se: m_se,
                    bound: m_bound,
                    pass: m_mean <= m_bound,
                });
                rows.push(BoundRow {
                    label: "score_norm".into(),
                    t,
                    value: s_mean,
                    se: s_se,
                    bound: s_bound,
                    pass: s_mean <= s_bound,
                });
            }
            Process::Cld { gamma } => {
                let marginal = cld_marginal(target, t, gamma)?;
                let mut m_sum = 0.0;
                let mut s_sum = 0.0;
                let mut m_sq = 0.0;
                let mut s_sq = 0.0;
                for _ in 0..n {
                    let theta = marginal.sample_one(&mut rng);
                    let mv = theta.norm_squared();
                    let sv = marginal.score(&theta).norm_squared();
                    m_sum += mv;
                    m_sq += mv * mv;
                    s_sum += sv;
                    s_sq += sv * sv;
                }
                let nf = n as f64;
                let m_mean = m_sum / nf;
                let s_mean = s_sum / nf;
                let m_se = ((m_sq / nf - m_mean * m_mean).max(0.0) / nf).sqrt();
                let s_se = ((s_sq / nf - s_mean * s_mean).max(0.0) / nf).sqrt();
                let envelope = d + m2sq;
                let c_here = m_mean / envelope;
                fitted_c = fitted_c.max(c_here);
                // Lipschitz constant of the full phase-space score: all
                // components are Gaussian mixtures on R^{2d}
                let lbar = match marginal.law().components().len() {
                    1 => marginal.law().components()[0].max_precision_eigenvalue(),
                    _ => {
                        let mut worst: f64 = 0.0;
                        for _ in 0..128 {
                            let theta = marginal.sample_one(&mut rng);
                            let hess = marginal.law().hessian_log_density(&theta);
                            let norm = hess
                                .symmetric_eigen()
                                .eigenvalues
                                .iter()
                                .map(|v| v.abs())
                                .fold(0.0, f64::max);
                            worst = worst.max(norm);
                        }
                        worst
                    }
                };
                let s_bound = lbar * 2.0 * d * slack;
                rows.push(BoundRow {
                    label: "second_moment".into(),
                    t,
                    value: m_mean,
                    se: m_se,
                    bound: 10.0 * envelope,
                    pass: c_here <= 10.0,
                });
                rows.push(BoundRow {
                    label: "score_norm".into(),
                    t,
                    value: s_mean,
                    se: s_se,
                    bound: s_bound,
                    pass: s_mean <= s_bound,
                });
            }
        }
    }
    let pass = rows.iter().all(|r| r.pass);
    Ok(LemmaReport {
        rows,
        fitted_c,
        pass,
    })
}

/// Movement rows E‖state_t - state_s‖² against C (δ² m2² + δ d) with the
/// fitted C required <= 10 (δ = t - s <= 1).
pub fn verify_movement_bounds(
    target: &TargetDistribution,
    process: Process,
    pairs: &[(f64, f64)],
    n: usize,
    factory: &StreamFactory,
) -> Result<LemmaReport> {
    let d = target.dim() as f64;
    let m2sq = target.stats(factory).second_moment;
    let mut rows = Vec::new();
    let mut fitted_c: f64 = 0.0;
    for (pi, &(s, t)) in pairs.iter().enumerate() {
        let delta = t - s;
        if !(delta > 0.0) || delta > 1.0 {
            return Err(Error::Usage(format!(
                "movement pairs need 0 < t - s <= 1, got ({s}, {t})"
            )));
        }
        let mut rng = factory.stream(Domain::LemmaChecks, 1000 + pi as u64);
        let mut sum = 0.0;
        let mut sq = 0.0;
        match process {
            Process::Ddpm => {
                let draws = crate::forward::ou_joint_sample(target, s, t, &mut rng, n)?;
                for (zs, zt) in draws {
                    let v = (zt - zs).norm_squared();
                    sum += v;
                    sq += v * v;
                }
            }
            Process::Cld { gamma } => {
                let start = cld_marginal(target, s, gamma)?;
                let inc = cld_transition(delta, gamma)?;
                let (m0, m1) = (inc.m0, inc.m1);
                let lxx = m1[(0, 0)].max(0.0).sqrt();
                let (lvx, lvv) = if lxx > 1e-300 {
                    let lvx = m1[(0, 1)] / lxx;
                    (lvx, (m1[(1, 1)] - lvx * lvx).max(0.0).sqrt())
                } else {
                    (0.0, m1[(1, 1)].max(0.0).sqrt())
                };
                let dd = target.dim();
                for _ in 0..n {
                    let theta = start.sample_one(&mut rng);
                    let mut v = 0.0;
                    for j in 0..dd {
                        let x = theta[j];
                        let vel = theta[dd + j];
                        let z1: f64 = rng.sample(StandardNormal);
                        let z2: f64 = rng.sample(StandardNormal);
                        let nx = m0[(0, 0)] * x + m0[(0, 1)] * vel + lxx * z1;
                        let nv = m0[(1, 0)] * x + m0[(1, 1)] * vel + lvx * z1 + lvv * z2;
                        v += (nx - x) * (nx - x) + (nv - vel) * (nv - vel);
                    }
                    sum += v;
                    sq += v * v;
                }
            }
        }
        let nf = n as f64;
        let mean = sum / nf;
        let se = ((sq / nf - mean * mean).max(0.0) / nf).sqrt();
        let envelope = delta * delta * m2sq + delta * d;
        let c_here = mean / envelope;
        fitted_c = fitted_c.max(c_here);
        rows.push(BoundRow {
            label: "movement".into(),
            t,
            value: mean,
            se,
            bound: 10.0 * envelope,
            pass: c_here <= 10.0,
        });
    }
    let pass = rows.iter().all(|r| r.pass);
    Ok(LemmaReport {
        rows,
        fitted_c,
        pass,
    })
}

// ---------------------------------------------------------------------------
// Score perturbation check
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PerturbationRow {
    pub theta_norm: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone)]
pub struct PerturbationReport {
    pub rows: Vec<PerturbationRow>,
    pub max_ratio: f64,
    pub pass: bool,
}

fn op_norm(m: &DMatrix<f64>) -> f64 {
    (m.transpose() * m)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .fold(0.0, f64::max)
}

/// Exact check of the pushforward-convolution score displacement against
/// L sqrt(‖M1‖ d) + L ζ ‖θ‖ + (ζ + L ‖M1‖) ‖∇H(θ)‖ (unit constants) for a
/// Gaussian potential, where the left side is closed form because the
/// pushforward-convolution of a Gaussian is Gaussian.
pub fn score_perturbation_check(
    potential: &Gaussian,
    m0: &DMatrix<f64>,
    m1: &DMatrix<f64>,
    grid: &[DVector<f64>],
) -> Result<PerturbationReport> {
    let d = potential.dim();
    if m0.nrows() != d || m1.nrows() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: m0.nrows(),
        });
    }
    let eye = DMatrix::<f64>::identity(d, d);
    let zeta = op_norm(&(m0 - &eye));
    if zeta >= 1.0 {
        return Err(Error::HypothesisViolated(format!(
            "need ‖M0 - I‖ < 1, got ζ = {zeta}"
        )));
    }
    let lip = potential.max_precision_eigenvalue();
    let m1_op = op_norm(m1);
    if m1_op > 0.0 && lip > 1.0 / (4.0 * m1_op) {
        return Err(Error::HypothesisViolated(format!(
            "need L <= 1/(4‖M1‖): L = {lip}, ‖M1‖ = {m1_op}"
        )));
    }
    // ν = (M0)_# q * N(0, M1) is Gaussian
    let nu = Gaussian::new(m0 * potential.mean(), m0 * potential.cov() * m0.transpose() + m1)?;
    let mut rows = Vec::with_capacity(grid.len());
    let mut max_ratio: f64 = 0.0;
    for theta in grid {
        let lhs = (nu.score(theta) - potential.score(theta)).norm();
        let grad_h = (-potential.score(theta)).norm();
        let rhs = lip * (m1_op * d as f64).sqrt() + lip * zeta * theta.norm()
            + (zeta + lip * m1_op) * grad_h;
        let ratio = if rhs > 0.0 {
            lhs / rhs
        } else if lhs == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        max_ratio = max_ratio.max(ratio);
        rows.push(PerturbationRow {
            theta_norm: theta.norm(),
            lhs,
            rhs,
            ratio,
        });
    }
    Ok(PerturbationReport {
        rows,
        max_ratio,
        pass: max_ratio <= 10.0,
    })
}

/// The canonical perturbation-lemma battery on the standard Gaussian
/// potential: kernels (M0, M1) spanning pushforward-only, smoothing-only,
/// and mixed cases, each checked on a radial grid of evaluation points.
pub fn perturbation_battery(d: usize) -> Result<Vec<(String, PerturbationReport)>> {
    let q = Gaussian::standard(d);
    let eye = DMatrix::<f64>::identity(d, d);
    let mut grid = Vec::new();
    for r in [0.0, 0.5, 1.0, 2.0, 4.0] {
        let mut theta = DVector::zeros(d);
        theta[0] = r;
        grid.push(theta);
        if d > 1 {
            let mut diag = DVector::from_element(d, r / (d as f64).sqrt());
            diag[0] *= -1.0;
            grid.push(diag);
        }
    }
    let mut out = Vec::new();
    for zeta in [0.0, 0.1, 0.3] {
        for m1_scale in [0.0, 0.02, 0.1] {
            let m0 = &eye * (1.0 + zeta);
            let m1 = &eye * m1_scale;
            let report = score_perturbation_check(&q, &m0, &m1, &grid)?;
            out.push((format!("zeta={zeta};m1={m1_scale}"), report));
        }
    }
    Ok(out)
}

/// Exact TV(q_T, γ_d) for Gaussian targets, used in the data-processing
/// sanity chain.
pub fn forward_tv_to_noise(target: &TargetDistribution, horizon: f64) -> Result<f64> {
    let marginal = ou_marginal(target, horizon)?;
    let g = match marginal {
        OuMarginal::Analytic(td) => match td.kind() {
            crate::targets::TargetKind::IsotropicGaussian { mean, variance } => {
                Gaussian::isotropic(mean.clone(), *variance)?
            }
            crate::targets::TargetKind::FullGaussian(g) => g.clone(),
            _ => {
                return Err(Error::Unsupported(
                    "forward TV in closed form needs a Gaussian target".into(),
                ))
            }
        },
        _ => {
            return Err(Error::Unsupported(
                "forward TV in closed form needs a Gaussian target".into(),
            ))
        }
    };
    let std = Gaussian::standard(g.dim());
    Ok(metrics::gaussian_tv::<rand_chacha::ChaCha8Rng>(&g, &std, None)?.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samplers::GuardMode;
    use crate::score_oracle::affine_bias_score;
    use approx::assert_relative_eq;

    fn std_cfg(process: Process, d_seed: u64, steps: u32, h: f64) -> SamplerConfig {
        SamplerConfig {
            process,
            horizon: steps as f64 * h,
            steps,
            early_stop_steps: 0,
            n_samples: 1,
            seed: d_seed,
            record_trajectory: false,
            guard: GuardMode::Off,
        }
    }

    #[test]
    fn girsanov_matches_stationary_closed_form() {
        // q = γ_d, exact score: KL = 2 d N (h - 1 + e^{-h})
        let d = 2;
        let (h, steps) = (0.1, 100u32);
        let target = TargetDistribution::standard_gaussian(d);
        let est = exact_score(&target, Process::Ddpm).unwrap();
        let cfg = std_cfg(Process::Ddpm, 1234, steps, h);
        let g = girsanov_kl(&est, &cfg, 4000, 8).unwrap();
        let exact = 2.0 * d as f64 * steps as f64 * (h - 1.0 + (-h).exp());
        assert_relative_eq!(exact, 1.9349669, epsilon = 1e-6);
        assert!(
            (g.total - exact).abs() <= 3.0 * g.total_se,
            "{} vs {exact} (se {})",
            g.total,
            g.total_se
        );
        // per-step terms are nonnegative and sum to the total
        let sum: f64 = g.per_step.iter().map(|(v, _)| v).sum();
        assert_relative_eq!(sum, g.total, epsilon = 1e-10);
        assert!(g.per_step.iter().all(|(v, _)| *v >= 0.0));
    }

    #[test]
    fn girsanov_bias_dominated_fine_h() {
        // constant-bias score error with tiny h: KL ≈ ε²T plus the exact
        // stationary freezing term
        let d = 1;
        let eps = 0.1;
        let (h, steps) = (0.001, 1000u32);
        let target = TargetDistribution::standard_gaussian(d);
        let est = affine_bias_score(&target, Process::Ddpm, eps, 9).unwrap();
        let cfg = std_cfg(Process::Ddpm, 77, steps, h);
        let g = girsanov_kl(&est, &cfg, 3000, 8).unwrap();
        let freezing = 2.0 * d as f64 * steps as f64 * (h - 1.0 + (-h).exp());
        let exact = eps * eps * 1.0 + freezing;
        assert!(
            (g.total - exact).abs() <= 3.0 * g.total_se,
            "{} vs {exact}",
            g.total
        );
        assert!(eps * eps / exact > 0.9, "bias term must dominate");
    }

    #[test]
    fn girsanov_zero_steps_is_zero() {
        let target = TargetDistribution::standard_gaussian(1);
        let est = exact_score(&target, Process::Ddpm).unwrap();
        let mut cfg = std_cfg(Process::Ddpm, 5, 10, 0.1);
        cfg.early_stop_steps = 10;
        let g = girsanov_kl(&est, &cfg, 10, 8).unwrap();
        assert_eq!(g.total, 0.0);
    }

    #[test]
    fn girsanov_refinement_stable_within_one_se() {
        let target = TargetDistribution::standard_gaussian(2);
        let est = exact_score(&target, Process::Ddpm).unwrap();
        let cfg = std_cfg(Process::Ddpm, 99, 20, 0.1);
        let (coarse, fine) = girsanov_kl_refinement_pair(&est, &cfg, 2000, 8).unwrap();
        assert_eq!(coarse.inner_substeps, 8);
        assert_eq!(fine.inner_substeps, 16);
        assert!(
            (coarse.total - fine.total).abs() <= coarse.total_se,
            "{} vs {} (se {})",
            coarse.total,
            fine.total,
            coarse.total_se
        );
    }

    #[test]
    fn girsanov_cld_stationary_value() {
        // exact-score phase-space chain on γ_d: integrand is the
        // stationary velocity increment, with closed form
        // 2d(1 - e^{-δ}(1-δ)); the KL is 2·Σ∫, computable by quadrature
        let d = 1;
        let (h, steps) = (0.05, 40u32);
        let target = TargetDistribution::standard_gaussian(d);
        let est = exact_score(&target, Process::Cld { gamma: 2.0 }).unwrap();
        let cfg = std_cfg(Process::Cld { gamma: 2.0 }, 31, steps, h);
        let g = girsanov_kl(&est, &cfg, 4000, 16).unwrap();
        let exact = 2.0
            * steps as f64
            * crate::quad::integrate_adaptive(
                |u| stationary_velocity_increment(d, u),
                0.0,
                h,
                1e-12,
            );
        assert!(
            (g.total - exact).abs() <= 3.0 * g.total_se.max(1e-4),
            "{} vs {exact} (se {})",
            g.total,
            g.total_se
        );
        // and the lower bound dhT holds with room to spare
        assert!(g.total >= d as f64 * h * (steps as f64 * h));
    }

    #[test]
    fn stationary_velocity_increment_bracket() {
        for d in [1usize, 2, 4] {
            for &delta in &[0.01, 0.05, 0.1] {
                let v = stationary_velocity_increment(d, delta);
                let df = d as f64;
                assert!(v >= 2.0 * df * delta - 10.0 * df * delta * delta, "low");
                assert!(v <= 4.0 * df * delta, "high");
            }
        }
    }

    #[test]
    fn cld_lower_bound_single_point() {
        let rep = cld_lower_bound_check(2, 0.05, 2.0, 2000, 4242).unwrap();
        assert_relative_eq!(rep.threshold, 0.2, epsilon = 1e-12);
        assert!(rep.pass, "kl {} threshold {}", rep.kl_mc, rep.threshold);
        assert!(cld_lower_bound_check(1, 0.2, 2.0, 10, 1).is_err());
    }

    #[test]
    fn chain_law_stationary_variance() {
        let d = 1;
        let (h, steps) = (0.1, 200u32);
        let target = TargetDistribution::standard_gaussian(d);
        let est = exact_score(&target, Process::Ddpm).unwrap();
        let cfg = std_cfg(Process::Ddpm, 3, steps, h);
        let scores = affine_score_schedule(&est, &cfg).unwrap();
        let law = gaussian_chain_law(&cfg, &Gaussian::standard(d), &scores).unwrap();
        let exact = (h.exp() + 1.0) / (3.0 - h.exp());
        assert_relative_eq!(law.cov()[(0, 0)], exact, epsilon = 1e-10);
        assert!(law.mean().norm() < 1e-12);

        // h -> 0 with N = T/h: output variance -> 1
        let fine_cfg = std_cfg(Process::Ddpm, 3, 4000, 0.0025);
        let scores = affine_score_schedule(&est, &fine_cfg).unwrap();
        let law = gaussian_chain_law(&fine_cfg, &Gaussian::standard(d), &scores).unwrap();
        assert!((law.cov()[(0, 0)] - 1.0).abs() < 0.004);
    }

    #[test]
    fn chain_law_matches_reverse_run_moments() {
        let d = 2;
        let cfg = SamplerConfig {
            n_samples: 100_000,
            ..std_cfg(Process::Ddpm, 8, 50, 0.1)
        };
        let target = TargetDistribution::isotropic_gaussian(DVector::zeros(d), 1.5).unwrap();
        let est = exact_score(&target, Process::Ddpm).unwrap();
        let scores = affine_score_schedule(&est, &cfg).unwrap();
        let law = gaussian_chain_law(&cfg, &Gaussian::standard(d), &scores).unwrap();
        let batch =
            crate::samplers::run_reverse(&cfg, &est, crate::samplers::ReverseInit::StandardGaussian)
                .unwrap();
        let n = batch.points.nrows() as f64;
        for j in 0..d {
            let mean: f64 = (0..batch.points.nrows())
                .map(|i| batch.points[(i, j)])
                .sum::<f64>()
                / n;
            let var: f64 = (0..batch.points.nrows())
                .map(|i| (batch.points[(i, j)] - mean).powi(2))
                .sum::<f64>()
                / n;
            let mean_se = (law.cov()[(j, j)] / n).sqrt();
            let var_se = law.cov()[(j, j)] * (2.0 / n).sqrt();
            assert!((mean - law.mean()[j]).abs() <= 4.0 * mean_se);
            assert!((var - law.cov()[(j, j)]).abs() <= 4.0 * var_se);
        }
    }

    #[test]
    fn cld_chain_law_stationary() {
        // exact score s̄(x, v) = -v on γ_d: affine map A = [0, -I], b = 0
        let d = 1;
        let (h, steps) = (0.05, 100u32);
        let cfg = std_cfg(Process::Cld { gamma: 2.0 }, 4, steps, h);
        let mut a = DMatrix::zeros(d, 2 * d);
        a[(0, 1)] = -1.0;
        let maps: Vec<AffineScore> = (0..steps)
            .map(|_| AffineScore {
                a: a.clone(),
                b: DVector::zeros(d),
            })
            .collect();
        let law = gaussian_chain_law(&cfg, &Gaussian::standard(2 * d), &maps).unwrap();
        // agreement with the 2x2 fixed-point recursion oracle
        let kernel = CldStepKernel::new(h, 2.0).unwrap();
        let g = nalgebra::Matrix2::new(
            kernel.exp_b[(0, 0)],
            kernel.exp_b[(0, 1)] - kernel.input[0],
            kernel.exp_b[(1, 0)],
            kernel.exp_b[(1, 1)] - kernel.input[1],
        );
        let mut c = nalgebra::Matrix2::identity();
        for _ in 0..steps {
            c = g * c * g.transpose() + kernel.cov;
        }
        assert_relative_eq!(law.cov()[(0, 0)], c[(0, 0)], epsilon = 1e-10);
        assert_relative_eq!(law.cov()[(0, 1)], c[(0, 1)], epsilon = 1e-10);
        assert_relative_eq!(law.cov()[(1, 1)], c[(1, 1)], epsilon = 1e-10);
    }

    #[test]
    fn bound_rhs_examples() {
        let rhs = theorem_bound_rhs(&BoundParams::Ddpm {
            kl_to_gaussian: 1.0,
            lipschitz: 1.0,
            dim: 1,
            m2: 1.0,
            horizon: 10.0,
            h: 0.01,
            eps_sc: 0.0,
            constant: 1.0,
        })
        .unwrap();
        assert!((rhs.total - 0.3479).abs() < 1e-4, "{}", rhs.total);

        let n = theorem_bound_rhs(&BoundParams::CompactN {
            dim: 1,
            radius: 1.0,
            eps_tv: 1.0,
            eps_w2: 1.0,
        })
        .unwrap();
        assert_relative_eq!(n.total, 1.0, epsilon = 1e-12);

        let score_only = theorem_bound_rhs(&BoundParams::Ddpm {
            kl_to_gaussian: 0.0,
            lipschitz: 0.0,
            dim: 1,
            m2: 0.0,
            horizon: 4.0,
            h: 0.01,
            eps_sc: 0.05,
            constant: 1.0,
        })
        .unwrap();
        assert_relative_eq!(score_only.total, 0.1, epsilon = 1e-12);

        assert!(theorem_bound_rhs(&BoundParams::Cld {
            kl_to_gaussian: 1.0,
            fisher_info: f64::INFINITY,
            rate_c: 1.0,
            lipschitz: 1.0,
            dim: 1,
            m2: 1.0,
            horizon: 1.0,
            h: 0.1,
            eps_sc: 0.0,
            constant: 1.0,
        })
        .is_err());
    }

    #[test]
    fn moment_bounds_on_gaussian_targets() {
        let factory = StreamFactory::new(11);
        let grid = [0.05, 0.3, 1.0, 3.0];
        for target in [
            TargetDistribution::standard_gaussian(3),
            TargetDistribution::isotropic_gaussian(DVector::from_element(3, 1.0), 1.5).unwrap(),
        ] {
            let rep =
                verify_moment_bounds(&target, Process::Ddpm, &grid, 100_000, &factory).unwrap();
            assert!(rep.pass, "rows {:?}", rep.rows);
            let rep =
                verify_moment_bounds(&target, Process::Cld { gamma: 2.0 }, &grid, 50_000, &factory)
                    .unwrap();
            assert!(rep.pass && rep.fitted_c <= 10.0);
        }
    }

    #[test]
    fn movement_bounds_ddpm_and_cld() {
        let factory = StreamFactory::new(12);
        let pairs = [(0.0, 0.05), (0.2, 0.5), (1.0, 2.0 - 1.0)];
        let pairs: Vec<(f64, f64)> = pairs.iter().map(|&(s, d)| (s, s + d)).collect();
        let target = TargetDistribution::standard_gaussian(2);
        let rep =
            verify_movement_bounds(&target, Process::Ddpm, &pairs, 50_000, &factory).unwrap();
        assert!(rep.pass && rep.fitted_c <= 10.0, "C = {}", rep.fitted_c);
        let rep = verify_movement_bounds(&target, Process::Cld { gamma: 2.0 }, &pairs, 50_000, &factory)
            .unwrap();
        assert!(rep.pass && rep.fitted_c <= 10.0, "C = {}", rep.fitted_c);
    }

    #[test]
    fn movement_bound_stationary_closed_form() {
        // stationary OU increment: E‖Δ‖² = 2d(1 - e^{-δ}) <= 2dδ
        let factory = StreamFactory::new(13);
        let target = TargetDistribution::standard_gaussian(4);
        let rep = verify_movement_bounds(&target, Process::Ddpm, &[(0.3, 0.55)], 200_000, &factory)
            .unwrap();
        let exact = 2.0 * 4.0 * (1.0 - (-0.25f64).exp());
        let row = &rep.rows[0];
        assert!((row.value - exact).abs() <= 3.0 * row.se);
        assert!(exact <= 2.0 * 4.0 * 0.25);
    }

    #[test]
    fn score_perturbation_spec_examples() {
        let d = 2;
        let q = Gaussian::standard(d);
        let eye = DMatrix::<f64>::identity(d, d);
        let theta = DVector::from_vec(vec![1.0, 0.0]);

        // M0 = I, M1 = 0.1 I: LHS = 0.1/1.1, RHS = sqrt(0.2) + 0.1
        let rep = score_perturbation_check(&q, &eye, &(&eye * 0.1), &[theta.clone()]).unwrap();
        let row = &rep.rows[0];
        assert_relative_eq!(row.lhs, 0.1 / 1.1, epsilon = 1e-12);
        assert_relative_eq!(row.rhs, 0.2f64.sqrt() + 0.1, epsilon = 1e-12);
        assert!((row.ratio - 0.166).abs() < 0.001);

        // M0 = I, M1 = 0 → LHS = 0
        let rep = score_perturbation_check(&q, &eye, &DMatrix::zeros(d, d), &[theta.clone()])
            .unwrap();
        assert_eq!(rep.rows[0].lhs, 0.0);
        assert!(rep.pass);

        // M0 = (1+ζ) I, M1 = 0: ratio stays small for ζ <= 0.5
        for zeta in [0.1, 0.3, 0.5] {
            let m0 = &eye * (1.0 + zeta);
            let rep =
                score_perturbation_check(&q, &m0, &DMatrix::zeros(d, d), &[theta.clone()])
                    .unwrap();
            assert!(rep.max_ratio <= 3.0, "ζ={zeta}: {}", rep.max_ratio);
        }
    }

    #[test]
    fn score_perturbation_hypothesis_checks() {
        let q = Gaussian::standard(2);
        let eye = DMatrix::<f64>::identity(2, 2);
        assert!(score_perturbation_check(&q, &(&eye * 2.5), &DMatrix::zeros(2, 2), &[]).is_err());
        // L = 1 > 1/(4·1) violates the smoothness hypothesis
        assert!(score_perturbation_check(&q, &eye, &eye, &[]).is_err());
    }

    #[test]
    fn data_processing_sanity_chain() {
        // exact TV(p_out, q) <= sqrt((KL_path + 3 se)/2) + TV(q_T, γ_d)
        for (d, h, steps) in [(1usize, 0.1, 60u32), (2, 0.05, 120)] {
            let target =
                TargetDistribution::isotropic_gaussian(DVector::zeros(d), 0.8).unwrap();
            let est = exact_score(&target, Process::Ddpm).unwrap();
            let cfg = std_cfg(Process::Ddpm, 21, steps, h);
            let scores = affine_score_schedule(&est, &cfg).unwrap();
            let out_law = gaussian_chain_law(&cfg, &Gaussian::standard(d), &scores).unwrap();
            let q = Gaussian::isotropic(DVector::zeros(d), 0.8).unwrap();
            let tv_exact =
                metrics::gaussian_tv::<rand_chacha::ChaCha8Rng>(&out_law, &q, None)
                    .unwrap()
                    .value;
            let kl = girsanov_kl(&est, &cfg, 2000, 8).unwrap();
            let tv_forward = forward_tv_to_noise(&target, cfg.horizon).unwrap();
            let bound = ((kl.total + 3.0 * kl.total_se) / 2.0).sqrt() + tv_forward;
            assert!(
                tv_exact <= bound + 1e-12,
                "d={d}: {tv_exact} vs {bound}"
            );
        }
    }
}
