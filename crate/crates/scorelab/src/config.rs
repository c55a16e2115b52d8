//! Experiment configuration: a versioned JSON schema that declares the
//! target, process, sampler, score model, metrics, bound comparison, and
//! optional sweep axes. Configs round-trip through serde byte-identically
//! when stored in canonical (pretty, two-space) form.

use crate::error::{Error, Result};
use crate::gauss::{Gaussian, GaussianMixture};
use crate::samplers::{GuardMode, ReverseInit, SamplerConfig};
use crate::score_oracle::Process;
use crate::targets::TargetDistribution;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    IsotropicGaussian {
        dim: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mean: Option<Vec<f64>>,
        variance: f64,
    },
    FullGaussian {
        mean: Vec<f64>,
        covariance: Vec<Vec<f64>>,
    },
    GaussianMixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covariances: Vec<Vec<Vec<f64>>>,
    },
    Sphere {
        dim: usize,
        radius: f64,
    },
    Ball {
        dim: usize,
        radius: f64,
    },
}

impl TargetSpec {
    pub fn dim(&self) -> usize {
        match self {
            TargetSpec::IsotropicGaussian { dim, .. } => *dim,
            TargetSpec::FullGaussian { mean, .. } => mean.len(),
            TargetSpec::GaussianMixture { means, .. } => means.first().map_or(0, Vec::len),
            TargetSpec::Sphere { dim, .. } | TargetSpec::Ball { dim, .. } => *dim,
        }
    }

    pub fn build(&self) -> Result<TargetDistribution> {
        match self {
            TargetSpec::IsotropicGaussian {
                dim,
                mean,
                variance,
            } => {
                let mean = match mean {
                    Some(m) => {
                        if m.len() != *dim {
                            return Err(Error::Config(format!(
                                "target mean has {} entries for dim {dim}",
                                m.len()
                            )));
                        }
                        DVector::from_vec(m.clone())
                    }
                    None => DVector::zeros(*dim),
                };
                TargetDistribution::isotropic_gaussian(mean, *variance)
            }
            TargetSpec::FullGaussian { mean, covariance } => {
                let d = mean.len();
                let mut cov = DMatrix::zeros(d, d);
                if covariance.len() != d {
                    return Err(Error::Config("covariance rows do not match mean".into()));
                }
                for (i, row) in covariance.iter().enumerate() {
                    if row.len() != d {
                        return Err(Error::Config("covariance is not square".into()));
                    }
                    for (j, v) in row.iter().enumerate() {
                        cov[(i, j)] = *v;
                    }
                }
                Ok(TargetDistribution::full_gaussian(Gaussian::new(
                    DVector::from_vec(mean.clone()),
                    cov,
                )?))
            }
            TargetSpec::GaussianMixture {
                weights,
                means,
                covariances,
            } => {
                if means.len() != weights.len() || covariances.len() != weights.len() {
                    return Err(Error::Config(
                        "mixture weights/means/covariances must align".into(),
                    ));
                }
                let comps = means
                    .iter()
                    .zip(covariances)
                    .map(|(m, c)| {
                        let d = m.len();
                        let mut cov = DMatrix::zeros(d, d);
                        for (i, row) in c.iter().enumerate() {
                            for (j, v) in row.iter().enumerate() {
                                cov[(i, j)] = *v;
                            }
                        }
                        Gaussian::new(DVector::from_vec(m.clone()), cov)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(TargetDistribution::mixture(GaussianMixture::new(
                    weights.clone(),
                    comps,
                )?))
            }
            TargetSpec::Sphere { dim, radius } => TargetDistribution::sphere(*dim, *radius),
            TargetSpec::Ball { dim, radius } => TargetDistribution::ball(*dim, *radius),
        }
    }

    pub fn short_label(&self) -> String {
        match self {
            TargetSpec::IsotropicGaussian { dim, variance, .. } => {
                format!("iso_gauss(d={dim};var={variance})")
            }
            TargetSpec::FullGaussian { mean, .. } => format!("full_gauss(d={})", mean.len()),
            TargetSpec::GaussianMixture { weights, .. } => {
                format!("mixture(k={})", weights.len())
            }
            TargetSpec::Sphere { dim, radius } => format!("sphere(d={dim};R={radius})"),
            TargetSpec::Ball { dim, radius } => format!("ball(d={dim};R={radius})"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProcessSpec {
    Ddpm,
    Cld {
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
}

fn default_gamma() -> f64 {
    2.0
}

impl ProcessSpec {
    pub fn build(&self) -> Process {
        match self {
            ProcessSpec::Ddpm => Process::Ddpm,
            ProcessSpec::Cld { gamma } => Process::Cld { gamma: *gamma },
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ProcessSpec::Ddpm => "ddpm",
            ProcessSpec::Cld { .. } => "cld",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EarlyStopSpec {
    None,
    /// t⁻ = steps · h
    Steps { steps: u32 },
    /// t⁻ = time, which must be an integer multiple of h
    Time { time: f64 },
    /// t⁻ = c_stop ε²/(√d (R ∨ √d)) floored to a multiple of h
    W2Schedule { eps_w2: f64, c_stop: f64 },
}

impl Default for EarlyStopSpec {
    fn default() -> Self {
        EarlyStopSpec::None
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum GuardSpec {
    Enforce,
    Warn,
    Off,
}

impl Default for GuardSpec {
    fn default() -> Self {
        GuardSpec::Enforce
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum InitSpec {
    StandardGaussian,
    ExactNoisedTarget,
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec::StandardGaussian
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    pub horizon: f64,
    pub steps: u32,
    #[serde(default)]
    pub early_stop: EarlyStopSpec,
    pub n_samples: usize,
    #[serde(default)]
    pub record_trajectory: bool,
    #[serde(default)]
    pub lipschitz_guard: GuardSpec,
    #[serde(default)]
    pub init: InitSpec,
}

impl SamplerSpec {
    pub fn resolve_early_stop(&self, target: &TargetSpec) -> Result<u32> {
        let h = self.horizon / self.steps as f64;
        match &self.early_stop {
            EarlyStopSpec::None => Ok(0),
            EarlyStopSpec::Steps { steps } => Ok(*steps),
            EarlyStopSpec::Time { time } => {
                let k = time / h;
                if (k - k.round()).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "early-stop time {time} is not a multiple of h = {h}"
                    )));
                }
                Ok(k.round() as u32)
            }
            EarlyStopSpec::W2Schedule { eps_w2, c_stop } => {
                let radius = match target {
                    TargetSpec::Sphere { radius, .. } | TargetSpec::Ball { radius, .. } => *radius,
                    _ => {
                        return Err(Error::Config(
                            "the W2 early-stop schedule needs a compactly supported target".into(),
                        ))
                    }
                };
                let es =
                    crate::samplers::early_stop_time(radius, target.dim(), *eps_w2, *c_stop, h)?;
                Ok(es.steps)
            }
        }
    }

    pub fn build(&self, target: &TargetSpec, process: Process, seed: u64) -> Result<SamplerConfig> {
        Ok(SamplerConfig {
            process,
            horizon: self.horizon,
            steps: self.steps,
            early_stop_steps: self.resolve_early_stop(target)?,
            n_samples: self.n_samples,
            seed,
            record_trajectory: self.record_trajectory,
            guard: match self.lipschitz_guard {
                GuardSpec::Enforce => GuardMode::Enforce,
                GuardSpec::Warn => GuardMode::Warn,
                GuardSpec::Off => GuardMode::Off,
            },
        })
    }

    pub fn init(&self) -> ReverseInit {
        match self.init {
            InitSpec::StandardGaussian => ReverseInit::StandardGaussian,
            InitSpec::ExactNoisedTarget => ReverseInit::ExactNoisedTarget,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ErrorModelSpec {
    Exact,
    Perturbed,
    AffineBias,
    Trained,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationModeSpec {
    Additive,
    Region,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreSpec {
    pub error_model: ErrorModelSpec,
    #[serde(default)]
    pub eps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<PerturbationModeSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_center: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_path: Option<String>,
}

impl Default for ScoreSpec {
    fn default() -> Self {
        Self {
            error_model: ErrorModelSpec::Exact,
            eps: 0.0,
            mode: None,
            seed: 0,
            region_radius: None,
            region_center: None,
            model_path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// exact chain-law TV (Gaussian target, affine estimate)
    ExactTv,
    ExactKl,
    ExactW2,
    /// histogram/KDE TV between output samples and the reference density
    TvHist,
    SlicedW2,
}

impl MetricKind {
    pub fn label(&self) -> &'static str {
        match self {
            MetricKind::ExactTv => "exact_tv",
            MetricKind::ExactKl => "exact_kl",
            MetricKind::ExactW2 => "exact_w2",
            MetricKind::TvHist => "tv_hist",
            MetricKind::SlicedW2 => "sliced_w2",
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    /// the data law q itself
    Target,
    /// the early-stopped marginal q_{t⁻}
    NoisedTarget,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSpec {
    pub kind: MetricKind,
    #[serde(default = "default_reference")]
    pub reference: ReferenceKind,
    #[serde(default = "default_directions")]
    pub directions: usize,
    /// absolute pass threshold, when given
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    /// pass when value <= eps + 2·R·(measured tv_hist value)
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w2_budget: Option<W2Budget>,
}

fn default_reference() -> ReferenceKind {
    ReferenceKind::Target
}

fn default_directions() -> usize {
    64
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct W2Budget {
    pub eps: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum BoundKindSpec {
    Ddpm,
    Cld,
    CompactN,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSpec {
    pub which: BoundKindSpec,
    /// envelope constant: pass iff measured <= max_c · RHS
    #[serde(default = "default_max_c")]
    pub max_c: f64,
    /// c in e^{-cT} for the phase-space forward convergence term
    #[serde(default = "default_one")]
    pub rate_c: f64,
    /// global multiplier on the RHS
    #[serde(default = "default_one")]
    pub constant: f64,
}

fn default_max_c() -> f64 {
    20.0
}

fn default_one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// sample (or evaluate the exact chain law), measure, bound-compare
    SampleMeasure,
    Girsanov,
    LowerBound,
    VerifyBounds,
    DsmEquivalence,
    ScoreTrain,
}

impl Default for Pipeline {
    fn default() -> Self {
        Pipeline::SampleMeasure
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GirsanovSpec {
    pub n_paths: usize,
    #[serde(default = "default_inner")]
    pub inner_substeps: usize,
    /// compare against the stationary closed form 2dN(h-1+e^{-h})
    #[serde(default)]
    pub closed_form_check: bool,
}

fn default_inner() -> usize {
    8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowerBoundSpec {
    pub n_paths: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LemmaSpec {
    pub moment_times: Vec<f64>,
    pub movement_pairs: Vec<[f64; 2]>,
    pub n: usize,
    #[serde(default)]
    pub perturbation_grid: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DsmSpec {
    /// additional targets beyond the main one
    #[serde(default)]
    pub extra_targets: Vec<TargetSpec>,
    pub model_pairs: usize,
    pub times: Vec<f64>,
    pub n: usize,
    /// minimum joint pass rate over all (pair, target, time) checks
    #[serde(default = "default_pass_rate")]
    pub min_pass_rate: f64,
}

fn default_pass_rate() -> f64 {
    0.95
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub class: TrainClassSpec,
    pub times: Vec<f64>,
    pub n_per_time: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrainClassSpec {
    Affine,
    RandomFeatures {
        count: usize,
        bandwidth: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisSpec {
    pub path: String,
    pub values: Vec<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSpec {
    /// x variable: a sweep axis path, or "derived.h"
    pub x: String,
    /// y variable: a metric label, e.g. "exact_tv"
    pub y: String,
    #[serde(default)]
    pub fix: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect_slope: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axes: Vec<AxisSpec>,
    #[serde(default)]
    pub fits: Vec<FitSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment_id: String,
    pub seed: u64,
    pub target: TargetSpec,
    pub process: ProcessSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<SamplerSpec>,
    #[serde(default)]
    pub score: ScoreSpec,
    #[serde(default)]
    pub metrics: Vec<MetricSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<BoundSpec>,
    #[serde(default)]
    pub pipeline: Pipeline,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub girsanov: Option<GirsanovSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower_bound: Option<LowerBoundSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lemmas: Option<LemmaSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dsm: Option<DsmSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    #[serde(default)]
    pub threads: usize,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.experiment_id.is_empty() || self.experiment_id.contains(',') {
            return Err(Error::Config(
                "experiment_id must be nonempty and comma-free".into(),
            ));
        }
        self.target.build()?;
        if let Some(sweep) = &self.sweep {
            if sweep.axes.is_empty() || sweep.axes.len() > 3 {
                return Err(Error::Config("sweeps take one to three axes".into()));
            }
            for axis in &sweep.axes {
                if axis.values.is_empty() {
                    return Err(Error::Config(format!("axis {} has no values", axis.path)));
                }
                // reject unknown parameter paths up front
                let mut probe = self.clone();
                probe.sweep = None;
                apply_axis(&mut probe, &axis.path, &axis.values[0])?;
            }
        }
        Ok(())
    }

    /// Canonical serialization: pretty JSON with two-space indent and a
    /// trailing newline. Shipped configs are stored in this form so that
    /// parse → serialize is the identity on them.
    pub fn canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

/// Set one swept parameter. The supported paths are the ones that the
/// convergence experiments vary.
pub fn apply_axis(
    cfg: &mut ExperimentConfig,
    path: &str,
    value: &serde_json::Value,
) -> Result<()> {
    let as_f64 = || -> Result<f64> {
        value
            .as_f64()
            .ok_or_else(|| Error::Config(format!("axis {path} needs a numeric value")))
    };
    let as_u64 = || -> Result<u64> {
        value
            .as_u64()
            .ok_or_else(|| Error::Config(format!("axis {path} needs an integer value")))
    };
    match path {
        "sampler.steps" => {
            let sampler = cfg
                .sampler
                .as_mut()
                .ok_or_else(|| Error::Config("no sampler section".into()))?;
            sampler.steps = as_u64()? as u32;
        }
        "sampler.horizon" => {
            let sampler = cfg
                .sampler
                .as_mut()
                .ok_or_else(|| Error::Config("no sampler section".into()))?;
            sampler.horizon = as_f64()?;
        }
        "sampler.step_size" => {
            let sampler = cfg
                .sampler
                .as_mut()
                .ok_or_else(|| Error::Config("no sampler section".into()))?;
            let h = as_f64()?;
            let steps = (sampler.horizon / h).round();
            if !(h > 0.0) || (steps * h - sampler.horizon).abs() > 1e-9 * sampler.horizon {
                return Err(Error::Config(format!(
                    "step size {h} does not divide the horizon {}",
                    sampler.horizon
                )));
            }
            sampler.steps = steps as u32;
        }
        "sampler.n_samples" => {
            let sampler = cfg
                .sampler
                .as_mut()
                .ok_or_else(|| Error::Config("no sampler section".into()))?;
            sampler.n_samples = as_u64()? as usize;
        }
        "score.eps" => cfg.score.eps = as_f64()?,
        "girsanov.n_paths" => {
            let g = cfg
                .girsanov
                .as_mut()
                .ok_or_else(|| Error::Config("no girsanov section".into()))?;
            g.n_paths = as_u64()? as usize;
        }
        "girsanov.inner_substeps" => {
            let g = cfg
                .girsanov
                .as_mut()
                .ok_or_else(|| Error::Config("no girsanov section".into()))?;
            g.inner_substeps = as_u64()? as usize;
        }
        "target.dim" => {
            let dim = as_u64()? as usize;
            match &mut cfg.target {
                TargetSpec::IsotropicGaussian {
                    dim: d, mean: m, ..
                } => {
                    *d = dim;
                    if m.is_some() {
                        return Err(Error::Config(
                            "target.dim sweep requires a centered isotropic Gaussian".into(),
                        ));
                    }
                }
                TargetSpec::Sphere { dim: d, .. } | TargetSpec::Ball { dim: d, .. } => *d = dim,
                _ => {
                    return Err(Error::Config(
                        "target.dim sweep is only supported for isotropic/sphere/ball targets"
                            .into(),
                    ))
                }
            }
        }
        "target.variance" => match &mut cfg.target {
            TargetSpec::IsotropicGaussian { variance, .. } => *variance = as_f64()?,
            _ => {
                return Err(Error::Config(
                    "target.variance sweep needs an isotropic Gaussian target".into(),
                ))
            }
        },
        other => {
            return Err(Error::Config(format!(
                "unknown sweep parameter path: {other}"
            )))
        }
    }
    Ok(())
}
