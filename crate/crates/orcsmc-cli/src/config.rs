//! The JSON experiment-configuration schema and model construction.

use anyhow::{bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use orcsmc::learn::RegConfig;
use orcsmc::model::{BinomialObs, LinearGaussianObs, ModelSpec, ObservationModel, SvObs};
use orcsmc::{CsmcConfig, OrcsmcConfig, ResamplingScheme};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

/// Model families with their study-default parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Linear-Gaussian, A = alpha I.
    LgDiagonal,
    /// Linear-Gaussian, A_ij = alpha^(|i-j|+1).
    LgNondiagonal,
    /// Univariate stochastic volatility.
    Sv,
    /// Binomial counts with a logistic link per coordinate.
    Binomial,
}

fn default_d() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    /// State dimension (sv forces 1).
    #[serde(default = "default_d")]
    pub d: usize,
    /// AR coefficient; defaults to the family's value.
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Transition standard deviation (sv) / variance (binomial, as sigma2).
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub sigma2: Option<f64>,
    /// Observation scale of the sv family.
    #[serde(default)]
    pub beta: Option<f64>,
    /// Binomial trials per coordinate.
    #[serde(default)]
    pub trials: Option<u32>,
}

impl ModelConfig {
    pub fn build(&self) -> Result<ModelSpec> {
        let d = self.d;
        if d == 0 {
            bail!("state dimension must be positive");
        }
        let model = match self.family {
            Family::LgDiagonal | Family::LgNondiagonal => {
                let alpha = self.alpha.unwrap_or(0.415);
                let a = match self.family {
                    Family::LgDiagonal => DMatrix::identity(d, d) * alpha,
                    _ => DMatrix::from_fn(d, d, |i, j| {
                        alpha.powi((i as i32 - j as i32).abs() + 1)
                    }),
                };
                ModelSpec::new(
                    DVector::zeros(d),
                    DMatrix::identity(d, d),
                    a,
                    DMatrix::identity(d, d),
                    ObservationModel::LinearGaussian(LinearGaussianObs::new(
                        DMatrix::identity(d, d),
                        DMatrix::identity(d, d),
                    )?),
                )?
            }
            Family::Sv => {
                if d != 1 {
                    bail!("the sv family is univariate");
                }
                let alpha = self.alpha.unwrap_or(0.986);
                let sigma = self.sigma.unwrap_or(0.13);
                let beta = self.beta.unwrap_or(0.69);
                if alpha.abs() >= 1.0 {
                    bail!("sv requires |alpha| < 1 for a stationary start");
                }
                let var0 = sigma * sigma / (1.0 - alpha * alpha);
                ModelSpec::new(
                    DVector::zeros(1),
                    DMatrix::from_element(1, 1, var0),
                    DMatrix::from_element(1, 1, alpha),
                    DMatrix::from_element(1, 1, sigma * sigma),
                    ObservationModel::StochasticVolatility(SvObs::new(beta)?),
                )?
            }
            Family::Binomial => {
                let alpha = self.alpha.unwrap_or(0.99);
                let sigma2 = self.sigma2.unwrap_or(0.11);
                let trials = self.trials.unwrap_or(50);
                ModelSpec::new(
                    DVector::zeros(d),
                    DMatrix::identity(d, d),
                    DMatrix::identity(d, d) * alpha,
                    DMatrix::identity(d, d) * sigma2,
                    ObservationModel::BinomialLogistic(BinomialObs::new(trials)?),
                )?
            }
        };
        Ok(model)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Bpf,
    Csmc,
    Orcsmc,
}

fn default_lag() -> usize {
    8
}

fn default_iterations() -> usize {
    5
}

fn default_kappa() -> f64 {
    0.5
}

fn default_ridge() -> f64 {
    1e-6
}

fn default_eps_pd_scale() -> f64 {
    1e-4
}

fn default_resampling() -> ResamplingScheme {
    ResamplingScheme::ResidualMultinomial
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub method: Method,
    /// Defaults per method: 1000 (orcsmc),
    /// 14000 (csmc), 320000 (bpf).
    #[serde(default)]
    pub n_particles: Option<usize>,
    #[serde(default = "default_lag")]
    pub lag: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_kappa")]
    pub kappa_ess: f64,
    #[serde(default = "default_resampling")]
    pub resampling: ResamplingScheme,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default = "default_eps_pd_scale")]
    pub eps_pd_scale: f64,
    #[serde(default)]
    pub min_rows: Option<usize>,
    #[serde(default = "default_true")]
    pub learning_enabled: bool,
}

impl AlgorithmConfig {
    pub fn resolved_n(&self) -> usize {
        self.n_particles.unwrap_or(match self.method {
            Method::Bpf => 320_000,
            Method::Csmc => 14_000,
            Method::Orcsmc => 1_000,
        })
    }

    pub fn reg(&self) -> RegConfig {
        RegConfig {
            ridge: self.ridge,
            eps_pd_scale: self.eps_pd_scale,
            min_rows: self.min_rows,
        }
    }

    pub fn csmc_config(&self) -> CsmcConfig {
        CsmcConfig {
            n_particles: self.resolved_n(),
            iterations: self.iterations,
            kappa_ess: self.kappa_ess,
            resampling: self.resampling,
            reg: self.reg(),
            learning_enabled: self.learning_enabled,
        }
    }

    pub fn orcsmc_config(&self, run: &RunConfig) -> OrcsmcConfig {
        let mut cfg = OrcsmcConfig::new(self.resolved_n(), self.lag, self.iterations);
        cfg.kappa_ess = self.kappa_ess;
        cfg.resampling = self.resampling;
        cfg.reg = self.reg();
        cfg.learning_enabled = self.learning_enabled;
        cfg.keep_all = run.keep_all_paths;
        cfg.output_times = run.output_times.to_library();
        cfg
    }
}

/// Either `"all"` or an explicit list of time indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OutputTimesConfig {
    Keyword(String),
    Times(Vec<usize>),
}

impl Default for OutputTimesConfig {
    fn default() -> Self {
        OutputTimesConfig::Keyword("all".into())
    }
}

impl OutputTimesConfig {
    pub fn to_library(&self) -> orcsmc::control::OutputTimes {
        match self {
            OutputTimesConfig::Keyword(_) => orcsmc::control::OutputTimes::All,
            OutputTimesConfig::Times(ts) => {
                orcsmc::control::OutputTimes::Selected(ts.iter().copied().collect::<BTreeSet<_>>())
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if let OutputTimesConfig::Keyword(k) = self {
            if k != "all" {
                bail!("output_times must be \"all\" or a list of times, got {k:?}");
            }
        }
        Ok(())
    }
}

fn default_horizon() -> usize {
    100
}

fn default_replicates() -> usize {
    100
}

fn default_seed() -> u64 {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub output_times: OutputTimesConfig,
    #[serde(default)]
    pub keep_all_paths: bool,
    /// Dump replicate 0's final smoothing marginals to smoothing.csv
    /// (requires keep_all_paths for orcsmc).
    #[serde(default)]
    pub smoothing_dump: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub algorithm: AlgorithmConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("bad config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.horizon == 0 {
            bail!("horizon must be at least 1");
        }
        if self.run.replicates == 0 {
            bail!("need at least one replicate");
        }
        if !(self.algorithm.kappa_ess > 0.0 && self.algorithm.kappa_ess <= 1.0) {
            bail!("kappa_ess must lie in (0, 1]");
        }
        if self.algorithm.ridge < 0.0 {
            bail!("ridge must be nonnegative");
        }
        if self.algorithm.lag == 0 {
            bail!("lag must be at least 1");
        }
        if self.algorithm.iterations == 0 {
            bail!("iterations must be at least 1");
        }
        self.run.output_times.validate()?;
        if self.run.keep_all_paths && self.run.output_times != OutputTimesConfig::default() {
            bail!("keep_all_paths requires output_times = \"all\"");
        }
        self.model.build().map(|_| ())
    }
}
