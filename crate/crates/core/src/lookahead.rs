//! r2LEY: recursive two-step lookahead expected payoff.
//!
//! For a candidate next action `p = (x_next, t_next)` and a simulated noisy
//! observation `y = mu(p) + sigma_pred * z`, the augmented posterior mean at
//! the horizon is
//!
//! ```text
//! mu_aug(x, T) = mu(x, T) + z * c(x) / sigma_pred
//! c(x)         = k((x, T), p) - k_(x,T)^T K^-1 k_p
//! sigma_pred^2 = k(p, p) - k_p^T K^-1 k_p + noise
//! ```
//!
//! which is exactly what appending `(p, y)` to the model produces. The payoff
//! is `E_z[max_x mu_aug(x, T)]`, estimated with a fixed vector of standard
//! normal draws (common random numbers) so that the estimate is a smooth
//! function of `x_next`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{maximize_with_fallback, MaximizeConfig};
use crate::error::{Error, Result};
use crate::gp::PosteriorModel;
use crate::optimizer::{self, AscentOptions, BoxDomain};
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    /// Differentiates the kernel terms with the simulated value held fixed.
    PaperFixedY,
    /// Also differentiates the simulated value `mu(p) + sigma_pred * z`.
    FullReparameterized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LookaheadConfig {
    pub horizon: f64,
    pub mc_samples: usize,
    /// Space-filling starts for each inner maximization; `None` means `4 + d`.
    pub inner_starts: Option<usize>,
    /// Local ascents per inner maximization, taken from the best-scoring
    /// starts; `None` ascends from all of them. Defaults to 2.
    pub inner_ascents: Option<usize>,
    /// Multistarts for the proposal search; `None` means `4 + d`.
    pub outer_starts: Option<usize>,
    pub gradient_mode: GradientMode,
    pub crn_seed: u64,
    pub inner: AscentOptions,
    pub outer: AscentOptions,
}

impl Default for LookaheadConfig {
    fn default() -> Self {
        LookaheadConfig {
            horizon: 4.0,
            mc_samples: 500,
            inner_starts: None,
            inner_ascents: Some(2),
            outer_starts: None,
            gradient_mode: GradientMode::FullReparameterized,
            crn_seed: 0,
            inner: AscentOptions {
                tol: 1e-9,
                ..AscentOptions::default()
            },
            outer: AscentOptions {
                raw_samples: 64,
                ..AscentOptions::default()
            },
        }
    }
}

impl LookaheadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_samples == 0 {
            return Err(Error::invalid("mc_samples must be at least 1"));
        }
        if !self.horizon.is_finite() {
            return Err(Error::invalid("horizon must be finite"));
        }
        if self.inner_starts == Some(0) || self.outer_starts == Some(0) || self.inner_ascents == Some(0) {
            return Err(Error::invalid("start counts must be positive"));
        }
        Ok(())
    }

    fn mean_config(&self, dim: usize) -> MaximizeConfig {
        MaximizeConfig {
            n_starts: Some(self.inner_starts.unwrap_or(4 + dim)),
            ascent: AscentOptions {
                raw_samples: self.inner.raw_samples.max(64),
                ..self.inner
            },
            ..MaximizeConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerMaxResult {
    pub x_star: Vec<f64>,
    pub value: f64,
}

/// `max_x mu(x, T)` by multistart ascent; the starts depend only on
/// `cfg.crn_seed`.
pub fn inner_max_posterior_mean(
    model: &PosteriorModel,
    horizon: f64,
    domain: &BoxDomain,
    cfg: &LookaheadConfig,
) -> Result<InnerMaxResult> {
    check_domain(model, domain)?;
    let mut rng = seeded(derive_seed(cfg.crn_seed, 0x1e4));
    let mut obj = |x: &[f64], g: &mut [f64]| model.mean_and_grad(x, horizon, g);
    let found = maximize_with_fallback(&mut obj, domain, &cfg.mean_config(domain.dim()), &mut rng, &[])?;
    if found.fallback {
        log::warn!("posterior-mean maximization at t = {horizon} fell back to sampling");
    }
    Ok(InnerMaxResult {
        x_star: found.x,
        value: found.value,
    })
}

/// Final-step rule: the maximizer of the posterior mean at the horizon.
pub fn final_decision(
    model: &PosteriorModel,
    horizon: f64,
    domain: &BoxDomain,
    cfg: &LookaheadConfig,
) -> Result<Vec<f64>> {
    Ok(inner_max_posterior_mean(model, horizon, domain, cfg)?.x_star)
}

fn check_domain(model: &PosteriorModel, domain: &BoxDomain) -> Result<()> {
    if domain.dim() != model.dim() {
        return Err(Error::Dimension {
            expected: model.dim(),
            got: domain.dim(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Monte-Carlo standard error of `value`.
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub z: f64,
    pub x_star: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Everything about one model snapshot that does not depend on `x_next`:
/// draws, inner starts and the horizon-time kernel factors.
#[derive(Debug, Clone)]
pub struct LookaheadContext<'a> {
    model: &'a PosteriorModel,
    domain: BoxDomain,
    t_next: f64,
    horizon: f64,
    mode: GradientMode,
    inner: AscentOptions,
    inner_ascents: Option<usize>,
    draws: Vec<f64>,
    starts: Vec<Vec<f64>>,
    base: InnerMaxResult,
    inv_l2: Vec<f64>,
    signal: f64,
    /// `k_t(T, t_j)` for each training time.
    kt_horizon: Vec<f64>,
    /// `k_t(T, t_j) * alpha_j`.
    mean_weights: Vec<f64>,
}

/// Per-`x_next` quantities shared by all samples.
struct Probe {
    x_next: Vec<f64>,
    kt_next: f64,
    sigma: f64,
    /// `k_t(T, t_j) * (K^-1 k_p)_j`.
    c_weights: Vec<f64>,
    /// `d s / d x_next` and `d mu(p) / d x_next`.
    ds: Vec<f64>,
    dmu_p: Vec<f64>,
    /// `K^-1 (d k_p / d x_next)`, `n x d`.
    e: DMatrix<f64>,
}

impl<'a> LookaheadContext<'a> {
    /// Draws `cfg.mc_samples` normals from `cfg.crn_seed`.
    pub fn new(model: &'a PosteriorModel, t_next: f64, cfg: &LookaheadConfig, domain: &BoxDomain) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded(derive_seed(cfg.crn_seed, 0xd7a));
        let draws = (0..cfg.mc_samples).map(|_| rng.sample(StandardNormal)).collect();
        Self::with_draws(model, t_next, cfg, domain, draws)
    }

    pub fn with_draws(
        model: &'a PosteriorModel,
        t_next: f64,
        cfg: &LookaheadConfig,
        domain: &BoxDomain,
        draws: Vec<f64>,
    ) -> Result<Self> {
        cfg.validate()?;
        check_domain(model, domain)?;
        if draws.is_empty() || draws.iter().any(|z| !z.is_finite()) {
            return Err(Error::invalid("need at least one finite draw"));
        }
        if t_next > cfg.horizon {
            return Err(Error::invalid(format!(
                "next time {t_next} lies beyond the horizon {}",
                cfg.horizon
            )));
        }
        let d = domain.dim();
        let base = inner_max_posterior_mean(model, cfg.horizon, domain, cfg)?;
        let mut rng = seeded(derive_seed(cfg.crn_seed, 0x57a));
        let starts = optimizer::multistart_seeds(domain, cfg.inner_starts.unwrap_or(4 + d), &mut rng, std::slice::from_ref(&base.x_star));

        let kern = model.kernel();
        let kt_horizon: Vec<f64> = model.dataset().points().iter().map(|p| kern.time.eval(cfg.horizon, p.t)).collect();
        let mean_weights = kt_horizon.iter().zip(model.alpha_weights().iter()).map(|(k, a)| k * a).collect();
        Ok(LookaheadContext {
            model,
            domain: domain.clone(),
            t_next,
            horizon: cfg.horizon,
            mode: cfg.gradient_mode,
            inner: cfg.inner,
            inner_ascents: cfg.inner_ascents,
            draws,
            starts,
            base,
            inv_l2: kern.x_lengthscales.iter().map(|l| 1.0 / (l * l)).collect(),
            signal: kern.x_signal_variance,
            kt_horizon,
            mean_weights,
        })
    }

    pub fn draws(&self) -> &[f64] {
        &self.draws
    }

    /// Maximum of the unaugmented posterior mean at the horizon.
    pub fn base_maximum(&self) -> &InnerMaxResult {
        &self.base
    }

    #[inline]
    fn kx(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for j in 0..a.len() {
            let u = a[j] - b[j];
            s += u * u * self.inv_l2[j];
        }
        self.signal * (-0.5 * s).exp()
    }

    fn probe(&self, x_next: &[f64]) -> Result<Probe> {
        if x_next.len() != self.domain.dim() || x_next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dimension {
                expected: self.domain.dim(),
                got: x_next.len(),
            });
        }
        let model = self.model;
        let kern = model.kernel();
        let pts = model.dataset().points();
        let n = pts.len();
        let d = x_next.len();
        let kp = model.kernel_vector(x_next, self.t_next);
        let v = model.gram_inverse() * &kp;
        let s = kern.k(x_next, self.t_next, x_next, self.t_next) + model.effective_noise() - kp.dot(&v);
        if !(s > 0.0) {
            return Err(Error::Numerical(format!("non-positive predictive variance {s:.3e}")));
        }
        let mut dk = DMatrix::zeros(n, d);
        for (i, p) in pts.iter().enumerate() {
            for j in 0..d {
                dk[(i, j)] = -kp[i] * (x_next[j] - p.x[j]) * self.inv_l2[j];
            }
        }
        let ds = (dk.tr_mul(&v) * -2.0).as_slice().to_vec();
        let dmu_p = dk.tr_mul(model.alpha_weights()).as_slice().to_vec();
        let e = model.gram_inverse() * &dk;
        Ok(Probe {
            x_next: x_next.to_vec(),
            kt_next: kern.time.eval(self.horizon, self.t_next),
            sigma: s.sqrt(),
            c_weights: self.kt_horizon.iter().zip(v.iter()).map(|(k, v)| k * v).collect(),
            ds,
            dmu_p,
            e,
        })
    }

    /// `mu(x, T)` and `c(x)` with their gradients in `x`.
    fn mean_and_cov(&self, probe: &Probe, x: &[f64], gmu: &mut [f64], gc: &mut [f64]) -> (f64, f64) {
        gmu.iter_mut().for_each(|g| *g = 0.0);
        gc.iter_mut().for_each(|g| *g = 0.0);
        let mut mu = 0.0;
        let mut c = 0.0;
        for (i, p) in self.model.dataset().points().iter().enumerate() {
            let k = self.kx(x, &p.x);
            let a = k * self.mean_weights[i];
            let b = k * probe.c_weights[i];
            mu += a;
            c -= b;
            for j in 0..x.len() {
                let u = (x[j] - p.x[j]) * self.inv_l2[j];
                gmu[j] -= a * u;
                gc[j] += b * u;
            }
        }
        let kq = self.kx(x, &probe.x_next) * probe.kt_next;
        c += kq;
        for j in 0..x.len() {
            gc[j] -= kq * (x[j] - probe.x_next[j]) * self.inv_l2[j];
        }
        (mu, c)
    }

    fn sample(&self, probe: &Probe, z: f64) -> SampleOutcome {
        let d = self.domain.dim();
        let w = z / probe.sigma;
        let mut gmu = vec![0.0; d];
        let mut gc = vec![0.0; d];
        let mut obj = |x: &[f64], g: &mut [f64]| {
            let (mu, c) = self.mean_and_cov(probe, x, &mut gmu, &mut gc);
            for j in 0..d {
                g[j] = gmu[j] + w * gc[j];
            }
            mu + w * c
        };

        let seeds = match self.inner_ascents {
            Some(k) if k < self.starts.len() => optimizer::screen_candidates(&mut obj, self.starts.clone(), k),
            _ => self.starts.clone(),
        };
        let x_star = match optimizer::maximize_from(&mut obj, &self.domain, &seeds, &self.inner) {
            Ok(m) => m.x,
            Err(_) => {
                log::warn!("inner ascent failed for z = {z}; using the best start");
                optimizer::best_of(&mut obj, &self.starts).map_or_else(|| self.base.x_star.clone(), |(x, _)| x)
            }
        };

        let (mu, c) = self.mean_and_cov(probe, &x_star, &mut gmu, &mut gc);
        let value = mu + w * c;

        // d c / d x_next at the fixed maximizer
        let model = self.model;
        let kq_next = self.kx(&x_star, &probe.x_next) * probe.kt_next;
        let mut dc: Vec<f64> = (0..d)
            .map(|j| kq_next * (x_star[j] - probe.x_next[j]) * self.inv_l2[j])
            .collect();
        for (i, p) in model.dataset().points().iter().enumerate() {
            let kq = self.kx(&x_star, &p.x) * self.kt_horizon[i];
            for (j, dcj) in dc.iter_mut().enumerate() {
                *dcj -= kq * probe.e[(i, j)];
            }
        }

        let s = probe.sigma * probe.sigma;
        let grad = match self.mode {
            GradientMode::FullReparameterized => (0..d)
                .map(|j| z * (dc[j] / probe.sigma - c * probe.ds[j] / (2.0 * s * probe.sigma)))
                .collect(),
            GradientMode::PaperFixedY => {
                let r = probe.sigma * z;
                (0..d)
                    .map(|j| dc[j] * r / s - c * probe.dmu_p[j] / s - c * r * probe.ds[j] / (s * s))
                    .collect()
            }
        };
        SampleOutcome { z, x_star, value, grad }
    }

    /// Every per-draw outcome at `x_next`, in draw order.
    pub fn samples(&self, x_next: &[f64]) -> Result<Vec<SampleOutcome>> {
        let probe = self.probe(x_next)?;
        Ok(self.draws.par_iter().map(|&z| self.sample(&probe, z)).collect())
    }

    pub fn estimate(&self, x_next: &[f64]) -> Result<Estimate> {
        let samples = self.samples(x_next)?;
        let m = samples.len() as f64;
        let d = x_next.len();
        let mut value = 0.0;
        let mut grad = vec![0.0; d];
        for s in &samples {
            value += s.value;
            for j in 0..d {
                grad[j] += s.grad[j];
            }
        }
        value /= m;
        grad.iter_mut().for_each(|g| *g /= m);
        let stderr = if samples.len() > 1 {
            let ss: f64 = samples.iter().map(|s| (s.value - value).powi(2)).sum();
            (ss / (m - 1.0) / m).sqrt()
        } else {
            0.0
        };
        if !value.is_finite() {
            return Err(Error::Numerical("r2LEY estimate is not finite".into()));
        }
        Ok(Estimate { value, grad, stderr })
    }
}

/// Monte-Carlo r2LEY value and gradient at `x_next`.
pub fn r2ley_estimate(
    x_next: &[f64],
    model: &PosteriorModel,
    t_next: f64,
    cfg: &LookaheadConfig,
    domain: &BoxDomain,
) -> Result<(f64, Vec<f64>)> {
    let e = LookaheadContext::new(model, t_next, cfg, domain)?.estimate(x_next)?;
    Ok((e.value, e.grad))
}

/// Maximizes the r2LEY estimate over the domain with the draws held fixed.
pub fn propose_r2ley<R: Rng + ?Sized>(
    model: &PosteriorModel,
    t_next: f64,
    cfg: &LookaheadConfig,
    domain: &BoxDomain,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let ctx = LookaheadContext::new(model, t_next, cfg, domain)?;
    let mut obj = |x: &[f64], g: &mut [f64]| match ctx.estimate(x) {
        Ok(e) => {
            g.copy_from_slice(&e.grad);
            e.value
        }
        Err(_) => f64::NAN,
    };
    let mcfg = MaximizeConfig {
        n_starts: Some(cfg.outer_starts.unwrap_or(4 + domain.dim())),
        ascent: cfg.outer,
        fallback_samples: 64,
    };
    let warm = [ctx.base.x_star.clone()];
    let found = maximize_with_fallback(&mut obj, domain, &mcfg, rng, &warm)?;
    if found.fallback {
        log::warn!("r2LEY proposal search fell back to sampling");
    }
    Ok(found.x)
}

#[cfg(test)]
mod tests;
