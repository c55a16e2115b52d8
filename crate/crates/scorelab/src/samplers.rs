//! Reverse samplers with exact per-step integration.
//!
//! Over each step the score is frozen at the left endpoint, which turns
//! the reverse SDE into a linear SDE with constant input; its transition
//! is Gaussian and is sampled exactly (an exponential integrator rather
//! than Euler–Maruyama), so the only discretization effect left is the
//! freezing of the score.
//!
//! Reverse dynamics. Time reversal of dZ = b(Z) dt + σ dB over [0, T]
//! follows d X = (-b(X) + σσᵀ ∇ ln q_{T-t}(X)) dt + σ dB, where q_t is
//! the forward marginal. For the position-only forward drift b(z) = -z
//! with σ = √2 this gives dX = (X + 2 ∇ ln q_{T-t}(X)) dt + √2 dB; one
//! frozen step from x therefore draws
//! X' ~ N(e^h x + 2(e^h - 1) s, (e^{2h} - 1) I).
//! For the phase-space forward drift A_γ = [[0, 1], [-1, -γ]] with noise
//! √(2γ) on the velocity block only, σσᵀ ∇ ln picks out the velocity
//! gradient and the reverse drift matrix is B = -A_γ = [[0, -1], [1, γ]]
//! with constant input (0, 2γ s); its exact step uses exp(hB) and the
//! Gramian covariance ∫₀ʰ e^{uB} η ηᵀ e^{uBᵀ} du, η = (0, √(2γ)).
//!
//! Paths are independent: path i consumes only stream (seed, i), so
//! results do not depend on worker count or scheduling.

use crate::error::{Error, Result};
use crate::forward::{cld_marginal, ou_marginal};
use crate::score_oracle::{Process, ScoreEstimate};
use crate::streams::{Domain, StreamFactory};
use crate::targets::TargetDistribution;
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// How to treat the h <~ 1/L step-size hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuardMode {
    Enforce,
    Warn,
    Off,
}

/// Initial law of the reverse run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReverseInit {
    /// Pure noise (γ_d, or γ_{2d} on phase space).
    StandardGaussian,
    /// The exact forward marginal at time T.
    ExactNoisedTarget,
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub process: Process,
    /// Horizon T.
    pub horizon: f64,
    /// Step count N; h = T/N.
    pub steps: u32,
    /// Early stop as an integer number of steps: t⁻ = early_stop_steps · h.
    pub early_stop_steps: u32,
    pub n_samples: usize,
    pub seed: u64,
    pub record_trajectory: bool,
    pub guard: GuardMode,
}

impl SamplerConfig {
    pub fn step_size(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn early_stop_time(&self) -> f64 {
        self.early_stop_steps as f64 * self.step_size()
    }

    /// Number of steps actually executed: N - t⁻/h.
    pub fn run_steps(&self) -> u32 {
        self.steps - self.early_stop_steps
    }

    /// Forward times at which the score estimate is queried, ascending.
    /// Step k evaluates at T - k h; times are formed as integer multiples
    /// of h so the grid never drifts.
    pub fn score_time_grid(&self) -> Vec<f64> {
        let h = self.step_size();
        (self.early_stop_steps + 1..=self.steps)
            .map(|k| k as f64 * h)
            .collect()
    }

    /// Structural checks plus the step-size guard. Returns warnings.
    pub fn validate(&self, target: &TargetDistribution) -> Result<Vec<String>> {
        if !(self.horizon > 0.0) || self.steps == 0 {
            return Err(Error::Usage("horizon must be positive and steps >= 1".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::Usage("n_samples must be >= 1".into()));
        }
        if self.early_stop_steps >= self.steps {
            return Err(Error::Usage(
                "early stop must leave at least one step to run".into(),
            ));
        }
        if target.is_singular() && self.early_stop_steps == 0 {
            return Err(Error::Usage(
                "singular targets require an early stop of at least one step (the score blows up at t = 0)".into(),
            ));
        }
        let mut warnings = Vec::new();
        if target.small_radius_flagged() {
            warnings.push("target support radius below 1; early-stop schedule assumes R >= 1".into());
        }
        if self.guard != GuardMode::Off {
            let h = self.step_size();
            let factory = StreamFactory::new(self.seed);
            let t_low = if self.early_stop_steps > 0 {
                self.early_stop_time()
            } else {
                h
            };
            // Gaussian kinds admit the uniform-in-t constant (attained at
            // t = 0); mixtures and singular kinds are probed at the
            // earliest queried time instead.
            let mut times = vec![t_low, self.horizon];
            if matches!(
                target.kind(),
                crate::targets::TargetKind::IsotropicGaussian { .. }
                    | crate::targets::TargetKind::FullGaussian(_)
            ) {
                times.push(0.0);
            }
            let mut lipschitz: f64 = 0.0;
            for t in times {
                if let Ok(l) = crate::forward::noised_lipschitz(target, t, &factory) {
                    lipschitz = lipschitz.max(l);
                }
            }
            if lipschitz > 0.0 && h > 1.0 / lipschitz {
                match self.guard {
                    GuardMode::Enforce => {
                        return Err(Error::StepSizeGuard {
                            h,
                            limit: 1.0 / lipschitz,
                            lipschitz,
                        })
                    }
                    GuardMode::Warn => warnings.push(format!(
                        "step size h = {h:.3e} exceeds 1/L = {:.3e}; the h <~ 1/L hypothesis is violated",
                        1.0 / lipschitz
                    )),
                    GuardMode::Off => {}
                }
            }
        }
        Ok(warnings)
    }
}

/// Per-run bookkeeping.
#[derive(Debug, Clone)]
pub struct Diagnostics {
    pub master_seed: u64,
    pub warnings: Vec<String>,
    /// Mean reverse-drift norm per executed step.
    pub per_step_mean_drift: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SampleBatch {
    /// Final states, one row per path: d columns (2d for phase space).
    pub points: DMatrix<f64>,
    /// (algorithm time, states) snapshots when trajectory recording is on.
    pub snapshots: Option<Vec<(f64, DMatrix<f64>)>>,
    pub diagnostics: Diagnostics,
}

// ---------------------------------------------------------------------------
// Step kernels
// ---------------------------------------------------------------------------

/// Exact one-step kernel of the frozen position-only reverse SDE.
#[derive(Debug, Clone, Copy)]
pub struct DdpmStepKernel {
    pub h: f64,
    /// e^h
    pub coef_x: f64,
    /// 2 (e^h - 1)
    pub coef_s: f64,
    /// sqrt(e^{2h} - 1)
    pub noise_std: f64,
}

impl DdpmStepKernel {
    pub fn new(h: f64) -> Result<Self> {
        if !(h > 0.0) {
            return Err(Error::Usage(format!("step size must be positive, got {h}")));
        }
        Ok(Self {
            h,
            coef_x: h.exp(),
            coef_s: 2.0 * h.exp_m1(),
            noise_std: (2.0 * h).exp_m1().sqrt(),
        })
    }
}

/// One exact step X' ~ N(e^h x + 2(e^h - 1) s, (e^{2h} - 1) I).
pub fn ddpm_step<R: Rng + ?Sized>(
    x: &DVector<f64>,
    s_value: &DVector<f64>,
    h: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if x.iter().chain(s_value.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ddpm step input".into()));
    }
    let k = DdpmStepKernel::new(h)?;
    Ok(DVector::from_fn(x.len(), |i, _| {
        k.coef_x * x[i] + k.coef_s * s_value[i] + k.noise_std * rng.sample::<f64, _>(StandardNormal)
    }))
}

/// Exact one-step kernel of the frozen phase-space reverse SDE
/// d(X,V) = (B (X,V) + (0, 2γ s)) dt + (0, sqrt(2γ)) dB,  B = [[0,-1],[1,γ]].
#[derive(Debug, Clone, Copy)]
pub struct CldStepKernel {
    pub h: f64,
    pub gamma: f64,
    pub exp_b: Matrix2<f64>,
    /// J (0, 2γ)ᵀ with J = B⁻¹ (e^{hB} - I): the mean response to a unit
    /// frozen score value.
    pub input: Vector2<f64>,
    pub cov: Matrix2<f64>,
    chol: Matrix2<f64>,
}

/// exp(tM) for 2x2 M with det 1, by Cayley–Hamilton.
fn exp2_det1(t: f64, m: Matrix2<f64>) -> Matrix2<f64> {
    let half = m.trace() / 2.0;
    let disc = half * half - 1.0;
    let (c, s) = if disc.abs() < 1e-12 {
        (1.0 + 0.5 * disc * t * t, t)
    } else if disc > 0.0 {
        let w = disc.sqrt();
        ((w * t).cosh(), (w * t).sinh() / w)
    } else {
        let w = (-disc).sqrt();
        ((w * t).cos(), (w * t).sin() / w)
    };
    let shifted = m - Matrix2::identity() * half;
    (Matrix2::identity() * c + shifted * s) * (half * t).exp()
}

impl CldStepKernel {
    pub fn new(h: f64, gamma: f64) -> Result<Self> {
        if !(h > 0.0) || !(gamma > 0.0) {
            return Err(Error::Usage(format!(
                "need positive step and friction, got h = {h}, γ = {gamma}"
            )));
        }
        let b = Matrix2::new(0.0, -1.0, 1.0, gamma);
        let exp_b = exp2_det1(h, b);
        // B⁻¹ = [[γ, 1], [-1, 0]] since det B = 1
        let b_inv = Matrix2::new(gamma, 1.0, -1.0, 0.0);
        let j = b_inv * (exp_b - Matrix2::identity());
        let input = j * Vector2::new(0.0, 2.0 * gamma);
        let cov = if (gamma - 2.0).abs() < 1e-12 {
            let e = (2.0 * h).exp();
            Matrix2::new(
                (2.0 * h * h - 2.0 * h) * e + (e - 1.0),
                -2.0 * h * h * e,
                -2.0 * h * h * e,
                (2.0 * h + 2.0 * h * h) * e + (e - 1.0),
            )
        } else {
            // ∫ e^{uB} η ηᵀ e^{uBᵀ} du with η = (0, sqrt(2γ))
            let col = |u: f64| {
                let e = exp2_det1(u, b);
                let k = (2.0 * gamma).sqrt();
                (e[(0, 1)] * k, e[(1, 1)] * k)
            };
            let xx = crate::quad::integrate_adaptive(|u| col(u).0 * col(u).0, 0.0, h, 1e-14);
            let xv = crate::quad::integrate_adaptive(|u| col(u).0 * col(u).1, 0.0, h, 1e-14);
            let vv = crate::quad::integrate_adaptive(|u| col(u).1 * col(u).1, 0.0, h, 1e-14);
            Matrix2::new(xx, xv, xv, vv)
        };
        let lxx = cov[(0, 0)].max(0.0).sqrt();
        let (lvx, lvv) = if lxx > 0.0 {
            let lvx = cov[(0, 1)] / lxx;
            (lvx, (cov[(1, 1)] - lvx * lvx).max(0.0).sqrt())
        } else {
            (0.0, cov[(1, 1)].max(0.0).sqrt())
        };
        Ok(Self {
            h,
            gamma,
            exp_b,
            input,
            cov,
            chol: Matrix2::new(lxx, 0.0, lvx, lvv),
        })
    }

    /// Mean of the next state given the current one and the frozen score.
    pub fn mean(&self, x: f64, v: f64, s: f64) -> (f64, f64) {
        (
            self.exp_b[(0, 0)] * x + self.exp_b[(0, 1)] * v + self.input[0] * s,
            self.exp_b[(1, 0)] * x + self.exp_b[(1, 1)] * v + self.input[1] * s,
        )
    }

    pub fn step_coord<R: Rng + ?Sized>(&self, x: f64, v: f64, s: f64, rng: &mut R) -> (f64, f64) {
        let (mx, mv) = self.mean(x, v, s);
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        (
            mx + self.chol[(0, 0)] * z1,
            mv + self.chol[(1, 0)] * z1 + self.chol[(1, 1)] * z2,
        )
    }
}

/// One exact phase-space step; `state = (x, v)` concatenated, `s_value`
/// is the frozen velocity-score value.
pub fn cld_step<R: Rng + ?Sized>(
    state: &DVector<f64>,
    s_value: &DVector<f64>,
    h: f64,
    gamma: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if state.iter().chain(s_value.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cld step input".into()));
    }
    let d = s_value.len();
    if state.len() != 2 * d {
        return Err(Error::DimensionMismatch {
            expected: 2 * d,
            got: state.len(),
        });
    }
    let k = CldStepKernel::new(h, gamma)?;
    let mut out = DVector::zeros(2 * d);
    for i in 0..d {
        let (x, v) = k.step_coord(state[i], state[d + i], s_value[i], rng);
        out[i] = x;
        out[d + i] = v;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Reverse run
// ---------------------------------------------------------------------------

const PATH_BLOCK: usize = 1024;
const SNAPSHOT_LIMIT: usize = 1 << 22;

/// Run the reverse sampler: k = 0 .. N-1-t⁻/h steps, score evaluated once
/// per step at the step's left endpoint. Returns samples of p_{T - t⁻}.
pub fn run_reverse(
    config: &SamplerConfig,
    estimate: &ScoreEstimate,
    init: ReverseInit,
) -> Result<SampleBatch> {
    let target = estimate.target();
    if !process_matches(config.process, estimate.process()) {
        return Err(Error::Unsupported(
            "estimate process does not match sampler process".into(),
        ));
    }
    let warnings = config.validate(target)?;
    let d = target.dim();
    let sd = config.process.state_dim(d);
    let n = config.n_samples;
    let h = config.step_size();
    let factory = StreamFactory::new(config.seed);

    // per-path generators, used in a fixed order (init draw, then one
    // block of normals per step)
    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|i| factory.stream(Domain::SamplerPath, i as u64))
        .collect();

    let mut states = vec![0.0f64; n * sd];
    match init {
        ReverseInit::StandardGaussian => {
            for (i, rng) in rngs.iter_mut().enumerate() {
                for j in 0..sd {
                    states[i * sd + j] = rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        ReverseInit::ExactNoisedTarget => match config.process {
            Process::Ddpm => {
                let marginal = ou_marginal(target, config.horizon)?;
                for (i, rng) in rngs.iter_mut().enumerate() {
                    let x = marginal.sample_one(rng);
                    for j in 0..sd {
                        states[i * sd + j] = x[j];
                    }
                }
            }
            Process::Cld { gamma } => {
                let marginal = cld_marginal(target, config.horizon, gamma)?;
                for (i, rng) in rngs.iter_mut().enumerate() {
                    let theta = marginal.sample_one(rng);
                    for j in 0..sd {
                        states[i * sd + j] = theta[j];
                    }
                }
            }
        },
    }

    let ddpm_kernel = match config.process {
        Process::Ddpm => Some(DdpmStepKernel::new(h)?),
        Process::Cld { .. } => None,
    };
    let cld_kernel = match config.process {
        Process::Cld { gamma } => Some(CldStepKernel::new(h, gamma)?),
        Process::Ddpm => None,
    };

    let record = config.record_trajectory && n * sd * (config.run_steps() as usize) <= SNAPSHOT_LIMIT;
    let mut snapshots = if record { Some(Vec::new()) } else { None };
    let mut per_step_mean_drift = Vec::with_capacity(config.run_steps() as usize);
    let mut scores_buf = DMatrix::zeros(n, d);

    for k in 0..config.run_steps() {
        let t_fwd = (config.steps - k) as f64 * h;
        // batched score evaluation at the step's left endpoint
        let state_mat = DMatrix::from_fn(n, sd, |i, j| states[i * sd + j]);
        scores_buf = estimate.eval_batch(t_fwd, &state_mat)?;
        if scores_buf.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteScore { step: k as usize });
        }
        let scores = &scores_buf;

        // advance paths block-parallel; block boundaries are fixed so the
        // reduction order does not depend on the worker count
        let drift_partials: Vec<f64> = states
            .par_chunks_mut(PATH_BLOCK * sd)
            .zip(rngs.par_chunks_mut(PATH_BLOCK))
            .enumerate()
            .map(|(block, (chunk, rng_chunk))| {
                let base = block * PATH_BLOCK;
                let mut drift_sum = 0.0;
                for (local, rng) in rng_chunk.iter_mut().enumerate() {
                    let i = base + local;
                    let row = &mut chunk[local * sd..(local + 1) * sd];
                    match (ddpm_kernel.as_ref(), cld_kernel.as_ref()) {
                        (Some(kernel), None) => {
                            let mut dn = 0.0;
                            for j in 0..d {
                                let x = row[j];
                                let s = scores[(i, j)];
                                let b = x + 2.0 * s;
                                dn += b * b;
                                row[j] = kernel.coef_x * x
                                    + kernel.coef_s * s
                                    + kernel.noise_std * rng.sample::<f64, _>(StandardNormal);
                            }
                            drift_sum += dn.sqrt();
                        }
                        (None, Some(kernel)) => {
                            let gamma = kernel.gamma;
                            let mut dn = 0.0;
                            for j in 0..d {
                                let x = row[j];
                                let v = row[d + j];
                                let s = scores[(i, j)];
                                let bv = x + gamma * v + 2.0 * gamma * s;
                                dn += v * v + bv * bv;
                                let (nx, nv) = kernel.step_coord(x, v, s, rng);
                                row[j] = nx;
                                row[d + j] = nv;
                            }
                            drift_sum += dn.sqrt();
                        }
                        _ => unreachable!(),
                    }
                }
                drift_sum
            })
            .collect();
        per_step_mean_drift.push(drift_partials.iter().sum::<f64>() / n as f64);

        if let Some(snaps) = snapshots.as_mut() {
            let time = (k + 1) as f64 * h;
            snaps.push((time, DMatrix::from_fn(n, sd, |i, j| states[i * sd + j])));
        }
    }
    let _ = scores_buf;

    Ok(SampleBatch {
        points: DMatrix::from_fn(n, sd, |i, j| states[i * sd + j]),
        snapshots,
        diagnostics: Diagnostics {
            master_seed: config.seed,
            warnings,
            per_step_mean_drift,
        },
    })
}

fn process_matches(a: Process, b: Process) -> bool {
    match (a, b) {
        (Process::Ddpm, Process::Ddpm) => true,
        (Process::Cld { gamma: g1 }, Process::Cld { gamma: g2 }) => (g1 - g2).abs() < 1e-12,
        _ => false,
    }
}

/// Early-stop schedule t = c · ε²/(√d (R ∨ √d)), floored to a positive
/// multiple of h.
#[derive(Debug, Clone, Copy)]
pub struct EarlyStop {
    pub raw: f64,
    pub time: f64,
    pub steps: u32,
    /// set when ε is not small against √d (the schedule is asymptotic)
    pub eps_large_warning: bool,
}

pub fn early_stop_time(radius: f64, d: usize, eps_w2: f64, c_stop: f64, h: f64) -> Result<EarlyStop> {
    if !(radius > 0.0) || !(eps_w2 > 0.0) || !(h > 0.0) || !(c_stop > 0.0) {
        return Err(Error::Usage(
            "early_stop_time needs positive radius, eps, c_stop, h".into(),
        ));
    }
    let sd = (d as f64).sqrt();
    let raw = c_stop * eps_w2 * eps_w2 / (sd * radius.max(sd));
    let steps = ((raw / h) * (1.0 + 1e-12)).floor() as u32;
    if steps == 0 {
        return Err(Error::EarlyStopTooCoarse { t: raw, h });
    }
    Ok(EarlyStop {
        raw,
        time: steps as f64 * h,
        steps,
        eps_large_warning: eps_w2 > sd / 4.0,
    })
}
