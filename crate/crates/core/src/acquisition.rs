//! Time-dependent myopic acquisitions.
//!
//! EI and PI measure improvement over a target `xi(t)` which, for the
//! `*mumax` variants, is the maximum of the posterior mean at the time of the
//! next observation. UCB is `mu + sqrt(beta) * sigma`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::gp::PosteriorModel;
use crate::optimizer::{self, AscentOptions, BoxDomain, Maximum};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn normal_pdf(u: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * u * u).exp()
}

#[inline]
pub fn normal_cdf(u: f64) -> f64 {
    0.5 * erfc(-u / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AcquisitionKind {
    #[serde(rename = "ei")]
    EiMuMax,
    #[serde(rename = "pi")]
    PiMuMax,
    Ucb,
    Random,
    /// Random until the final step, then EImumax.
    #[serde(rename = "rei")]
    RandomThenEi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionParams {
    pub kind: AcquisitionKind,
    pub ucb_beta: f64,
}

impl AcquisitionParams {
    pub fn new(kind: AcquisitionKind) -> Self {
        AcquisitionParams { kind, ucb_beta: 2.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == AcquisitionKind::Ucb && !(self.ucb_beta > 0.0) {
            return Err(Error::invalid(format!("UCB beta must be positive, got {}", self.ucb_beta)));
        }
        Ok(())
    }
}

/// Expected improvement `E[(Y - xi)^+]` for `Y ~ N(mu, sigma^2)`.
pub fn ei(mu: f64, sigma: f64, xi: f64) -> f64 {
    ei_with_partials(mu, sigma, xi).0
}

/// EI together with its partial derivatives in `mu` and `sigma`.
pub fn ei_with_partials(mu: f64, sigma: f64, xi: f64) -> (f64, f64, f64) {
    let gap = mu - xi;
    if sigma <= 0.0 {
        return if gap > 0.0 { (gap, 1.0, 0.0) } else { (0.0, 0.0, 0.0) };
    }
    let u = gap / sigma;
    let cdf = normal_cdf(u);
    let pdf = normal_pdf(u);
    let v = (sigma * pdf + gap * cdf).max(gap).max(0.0);
    (v, cdf, pdf)
}

/// Probability of improvement `P(Y >= xi)`.
pub fn pi(mu: f64, sigma: f64, xi: f64) -> f64 {
    pi_with_partials(mu, sigma, xi).0
}

pub fn pi_with_partials(mu: f64, sigma: f64, xi: f64) -> (f64, f64, f64) {
    if sigma <= 0.0 {
        return (if mu >= xi { 1.0 } else { 0.0 }, 0.0, 0.0);
    }
    let u = (mu - xi) / sigma;
    let pdf = normal_pdf(u);
    (normal_cdf(u), pdf / sigma, -pdf * u / sigma)
}

pub fn ucb(mu: f64, sigma: f64, beta: f64) -> f64 {
    mu + beta.sqrt() * sigma
}

/// Settings shared by the posterior-mean and acquisition maximizations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaximizeConfig {
    /// Local ascents; `None` means `4 + d`.
    pub n_starts: Option<usize>,
    pub ascent: AscentOptions,
    /// Points evaluated if every ascent fails.
    pub fallback_samples: usize,
}

impl Default for MaximizeConfig {
    fn default() -> Self {
        MaximizeConfig {
            n_starts: None,
            ascent: AscentOptions {
                raw_samples: 256,
                ..AscentOptions::default()
            },
            fallback_samples: 1024,
        }
    }
}

impl MaximizeConfig {
    pub fn starts(&self, dim: usize) -> usize {
        self.n_starts.unwrap_or(4 + dim)
    }
}

/// Maximum found by [`maximize_with_fallback`], with a flag raised when the
/// gradient-based search failed and a sampled point was used instead.
#[derive(Debug, Clone, PartialEq)]
pub struct Found {
    pub x: Vec<f64>,
    pub value: f64,
    pub fallback: bool,
}

pub fn maximize_with_fallback<F, R>(
    objective: &mut F,
    domain: &BoxDomain,
    cfg: &MaximizeConfig,
    rng: &mut R,
    extra: &[Vec<f64>],
) -> Result<Found>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
    R: Rng + ?Sized,
{
    match optimizer::maximize_box(objective, domain, cfg.starts(domain.dim()), rng, extra, &cfg.ascent) {
        Ok(Maximum { x, value, .. }) => Ok(Found {
            x,
            value,
            fallback: false,
        }),
        Err(e) => {
            log::warn!("{e}; falling back to sampled maximization");
            let pts = optimizer::multistart_seeds(domain, cfg.fallback_samples.max(1), rng, extra);
            optimizer::best_of(objective, &pts)
                .map(|(x, value)| Found {
                    x,
                    value,
                    fallback: true,
                })
                .ok_or_else(|| Error::Optimizer("objective is not finite anywhere in the domain".into()))
        }
    }
}

/// Maximizer of the posterior mean `x -> mu(x, t)` over the domain.
pub fn maximize_mean<R: Rng + ?Sized>(
    model: &PosteriorModel,
    t: f64,
    domain: &BoxDomain,
    cfg: &MaximizeConfig,
    rng: &mut R,
) -> Result<Found> {
    let mut obj = |x: &[f64], g: &mut [f64]| model.mean_and_grad(x, t, g);
    maximize_with_fallback(&mut obj, domain, cfg, rng, &[])
}

/// `xi(t) = max_x mu(x, t)`.
pub fn target_mu_max<R: Rng + ?Sized>(
    model: &PosteriorModel,
    t: f64,
    domain: &BoxDomain,
    cfg: &MaximizeConfig,
    rng: &mut R,
) -> Result<f64> {
    Ok(maximize_mean(model, t, domain, cfg, rng)?.value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub x: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Acquisition score and its action gradient at `(x, t)`.
fn score<F>(model: &PosteriorModel, x: &[f64], t: f64, g: &mut [f64], f: F) -> f64
where
    F: Fn(f64, f64) -> (f64, f64, f64),
{
    let Ok(pg) = model.posterior_grad_at(x, t) else {
        return f64::NAN;
    };
    let (v, dmu, dsd) = f(pg.summary.mean, pg.summary.stddev());
    for j in 0..g.len() {
        g[j] = dmu * pg.mean[j] + dsd * pg.stddev[j];
    }
    v
}

/// Next action under a myopic rule. `final_step` switches R-EI from random
/// sampling to EImumax.
pub fn propose_myopic<R: Rng + ?Sized>(
    params: &AcquisitionParams,
    model: &PosteriorModel,
    t_next: f64,
    domain: &BoxDomain,
    final_step: bool,
    cfg: &MaximizeConfig,
    rng: &mut R,
) -> Result<Proposal> {
    params.validate()?;
    let kind = match params.kind {
        AcquisitionKind::RandomThenEi if final_step => AcquisitionKind::EiMuMax,
        AcquisitionKind::RandomThenEi => AcquisitionKind::Random,
        k => k,
    };
    let mut warnings = Vec::new();
    let found = match kind {
        AcquisitionKind::Random => {
            return Ok(Proposal {
                x: domain.sample_uniform(rng),
                warnings,
            })
        }
        AcquisitionKind::Ucb => {
            let beta = params.ucb_beta;
            let root = beta.sqrt();
            let mut obj = |x: &[f64], g: &mut [f64]| score(model, x, t_next, g, |m, s| (ucb(m, s, beta), 1.0, root));
            maximize_with_fallback(&mut obj, domain, cfg, rng, &[])?
        }
        AcquisitionKind::EiMuMax | AcquisitionKind::PiMuMax => {
            let target = maximize_mean(model, t_next, domain, cfg, rng)?;
            if target.fallback {
                warnings.push("target maximization fell back to sampling".to_string());
            }
            let xi = target.value;
            let warm = [target.x.clone()];
            if kind == AcquisitionKind::EiMuMax {
                let mut obj = |x: &[f64], g: &mut [f64]| score(model, x, t_next, g, |m, s| ei_with_partials(m, s, xi));
                maximize_with_fallback(&mut obj, domain, cfg, rng, &warm)?
            } else {
                let mut obj = |x: &[f64], g: &mut [f64]| score(model, x, t_next, g, |m, s| pi_with_partials(m, s, xi));
                maximize_with_fallback(&mut obj, domain, cfg, rng, &warm)?
            }
        }
        AcquisitionKind::RandomThenEi => unreachable!("resolved above"),
    };
    if found.fallback {
        warnings.push(format!("{kind:?} maximization fell back to sampling"));
    }
    Ok(Proposal {
        x: found.x,
        warnings,
    })
}
