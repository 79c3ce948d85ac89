//! Gaussian-process posterior over the joint action-time space.
//!
//! The prior mean is zero. A fitted [`PosteriorModel`] caches the Cholesky
//! factor `L`, the explicit inverse of `K + (s_n^2 + jitter) I` and the weights
//! `alpha = K^-1 y`; it is immutable, and [`extend_model_rank_one`] produces a
//! new model with one more observation at quadratic cost.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{KernelParams, TimeForm};
use crate::optimizer::{self, AscentOptions, BoxDomain};

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;
/// Relative tolerance below which a negative posterior variance is treated as
/// rounding and clamped to zero.
const VARIANCE_CLAMP: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: Vec<f64>,
    pub t: f64,
}

impl Point {
    pub fn new(x: Vec<f64>, t: f64) -> Self {
        Point { x, t }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    points: Vec<Point>,
    values: Vec<f64>,
}

impl Dataset {
    pub fn new(points: Vec<Point>, values: Vec<f64>) -> Result<Self> {
        if points.len() != values.len() {
            return Err(Error::invalid(format!(
                "{} points but {} observations",
                points.len(),
                values.len()
            )));
        }
        if let Some(d) = points.first().map(|p| p.x.len()) {
            if let Some(bad) = points.iter().find(|p| p.x.len() != d) {
                return Err(Error::Dimension {
                    expected: d,
                    got: bad.x.len(),
                });
            }
        }
        Ok(Dataset { points, values })
    }

    pub fn push(&mut self, point: Point, value: f64) -> Result<()> {
        if let Some(d) = self.dim() {
            if point.x.len() != d {
                return Err(Error::Dimension {
                    expected: d,
                    got: point.x.len(),
                });
            }
        }
        self.points.push(point);
        self.values.push(value);
        Ok(())
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.points.first().map(|p| p.x.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub kernel: KernelParams,
    pub noise_variance: f64,
}

impl Hyperparams {
    pub fn new(kernel: KernelParams, noise_variance: f64) -> Result<Self> {
        kernel.validate()?;
        if !(noise_variance >= 0.0 && noise_variance.is_finite()) {
            return Err(Error::invalid(format!(
                "noise variance must be nonnegative, got {noise_variance}"
            )));
        }
        Ok(Hyperparams {
            kernel,
            noise_variance,
        })
    }

    /// `[ln l_1, .., ln l_d, ln s_f^2, theta_t, ln s_n^2]`.
    pub fn to_log_params(&self) -> Vec<f64> {
        let mut v = self.kernel.to_log_params();
        v.push(self.noise_variance.ln());
        v
    }

    pub fn from_log_params(theta: &[f64], form: TimeForm) -> Result<Self> {
        let n = theta.len();
        if n < 4 {
            return Err(Error::invalid("log-hyperparameter vector too short"));
        }
        Self::new(
            KernelParams::from_log_params(&theta[..n - 1], form)?,
            theta[n - 1].exp(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorSummary {
    pub mean: f64,
    pub variance: f64,
}

impl PosteriorSummary {
    pub fn stddev(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Gradients of the posterior mean and standard deviation with respect to
/// the action coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGradient {
    pub summary: PosteriorSummary,
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
    /// The variance is at the jitter floor; `stddev` is reported as zero.
    pub degenerate: bool,
}

#[derive(Debug, Clone)]
pub struct PosteriorModel {
    dataset: Dataset,
    hyperparams: Hyperparams,
    jitter: f64,
    chol: DMatrix<f64>,
    gram_inverse: DMatrix<f64>,
    alpha: DVector<f64>,
}

fn gram(points: &[Point], kernel: &KernelParams) -> DMatrix<f64> {
    let n = points.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel.k(&points[i].x, points[i].t, &points[j].x, points[j].t);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

struct Factorization {
    jitter: f64,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

/// Cholesky of `K + (noise + jitter) I`, escalating the jitter tenfold until
/// the factorization succeeds.
fn factorize(k: &DMatrix<f64>, noise: f64, signal: f64) -> Result<Factorization> {
    let n = k.nrows();
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = rel * signal;
        let mut m = k.clone();
        for i in 0..n {
            m[(i, i)] += noise + jitter;
        }
        if let Some(chol) = m.cholesky() {
            let l = chol.l_dirty();
            if (0..n).all(|i| l[(i, i)] > 0.0 && l[(i, i)].is_finite()) {
                return Ok(Factorization { jitter, chol });
            }
        }
        rel *= 10.0;
    }
    let diag: Vec<f64> = (0..n).map(|i| k[(i, i)]).collect();
    let dmin = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    let dmax = diag.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let eig = k.clone().symmetric_eigen().eigenvalues;
    Err(Error::Numerical(format!(
        "Gram matrix of size {n} not factorizable up to jitter {:.1e}: diagonal in [{dmin:.3e}, {dmax:.3e}], \
         eigenvalues in [{:.3e}, {:.3e}], noise {noise:.3e}",
        JITTER_MAX * signal,
        eig.min(),
        eig.max()
    )))
}

impl PosteriorModel {
    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hyperparams
    }

    pub fn kernel(&self) -> &KernelParams {
        &self.hyperparams.kernel
    }

    pub fn gram_inverse(&self) -> &DMatrix<f64> {
        &self.gram_inverse
    }

    pub fn alpha_weights(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Diagonal term actually added to the Gram matrix: noise plus jitter.
    pub fn effective_noise(&self) -> f64 {
        self.hyperparams.noise_variance + self.jitter
    }

    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.hyperparams.kernel.dim()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Covariances between `(x, t)` and every training point.
    pub fn kernel_vector(&self, x: &[f64], t: f64) -> DVector<f64> {
        let kern = &self.hyperparams.kernel;
        DVector::from_iterator(
            self.dataset.len(),
            self.dataset.points.iter().map(|p| kern.k(x, t, &p.x, p.t)),
        )
    }

    /// Posterior mean only; `O(n d)`.
    pub fn mean_at(&self, x: &[f64], t: f64) -> f64 {
        let kern = &self.hyperparams.kernel;
        self.dataset
            .points
            .iter()
            .zip(self.alpha.iter())
            .map(|(p, a)| kern.k(x, t, &p.x, p.t) * a)
            .sum()
    }

    /// Posterior mean and its action gradient; `O(n d)`.
    pub fn mean_and_grad(&self, x: &[f64], t: f64, grad: &mut [f64]) -> f64 {
        let kern = &self.hyperparams.kernel;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut mu = 0.0;
        for (p, a) in self.dataset.points.iter().zip(self.alpha.iter()) {
            let k = kern.k(x, t, &p.x, p.t) * a;
            mu += k;
            kern.accumulate_grad(x, &p.x, k, grad);
        }
        mu
    }

    pub fn posterior_at(&self, x: &[f64], t: f64) -> Result<PosteriorSummary> {
        self.check_dim(x)?;
        Ok(self.summary_unchecked(x, t).0)
    }

    fn summary_unchecked(&self, x: &[f64], t: f64) -> (PosteriorSummary, DVector<f64>) {
        let kp = self.kernel_vector(x, t);
        let mean = kp.dot(&self.alpha);
        let prior = self.hyperparams.kernel.k(x, t, x, t);
        let v = self
            .chol
            .solve_lower_triangular(&kp)
            .expect("cached Cholesky factor has a positive diagonal");
        let mut variance = prior - v.norm_squared();
        if variance < 0.0 {
            debug_assert!(variance > -VARIANCE_CLAMP * prior.max(1.0));
            variance = 0.0;
        }
        (PosteriorSummary { mean, variance }, kp)
    }

    /// Gradients of the posterior mean and standard deviation with respect to
    /// the action part of the query.
    pub fn posterior_grad_at(&self, x: &[f64], t: f64) -> Result<PosteriorGradient> {
        self.check_dim(x)?;
        let d = self.dim();
        let kern = &self.hyperparams.kernel;
        let (summary, kp) = self.summary_unchecked(x, t);
        // w = K^-1 k_p
        let w = self.solve(&kp);
        let mut dmean = vec![0.0; d];
        let mut dvar = vec![0.0; d];
        for (i, p) in self.dataset.points.iter().enumerate() {
            let mut gk = vec![0.0; d];
            kern.accumulate_grad(x, &p.x, kp[i], &mut gk);
            for j in 0..d {
                dmean[j] += gk[j] * self.alpha[i];
                dvar[j] -= 2.0 * gk[j] * w[i];
            }
        }
        let floor = 10.0 * self.jitter.max(f64::MIN_POSITIVE);
        let degenerate = summary.variance <= floor || summary.variance.sqrt() < 1e-12;
        let stddev = if degenerate {
            vec![0.0; d]
        } else {
            let s = summary.variance.sqrt();
            dvar.iter().map(|v| v / (2.0 * s)).collect()
        };
        Ok(PosteriorGradient {
            summary,
            mean: dmean,
            stddev,
            degenerate,
        })
    }

    /// `K^-1 b` through the cached Cholesky factor.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let y = self
            .chol
            .solve_lower_triangular(b)
            .expect("cached Cholesky factor has a positive diagonal");
        self.chol
            .tr_solve_lower_triangular(&y)
            .expect("cached Cholesky factor has a positive diagonal")
    }

    /// Predictive variance of a fresh noisy observation at `(x, t)`.
    pub fn predictive_variance(&self, x: &[f64], t: f64) -> Result<f64> {
        Ok(self.posterior_at(x, t)?.variance + self.effective_noise())
    }
}

pub fn build_model(dataset: Dataset, hp: Hyperparams) -> Result<PosteriorModel> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot build a posterior from an empty dataset"));
    }
    hp.kernel.validate()?;
    if dataset.dim() != Some(hp.kernel.dim()) {
        return Err(Error::Dimension {
            expected: hp.kernel.dim(),
            got: dataset.dim().unwrap_or(0),
        });
    }
    let k = gram(&dataset.points, &hp.kernel);
    let fact = factorize(&k, hp.noise_variance, hp.kernel.x_signal_variance)?;
    let y = DVector::from_column_slice(&dataset.values);
    let alpha = fact.chol.solve(&y);
    let gram_inverse = fact.chol.inverse();
    Ok(PosteriorModel {
        chol: fact.chol.unpack(),
        dataset,
        hyperparams: hp,
        jitter: fact.jitter,
        gram_inverse,
        alpha,
    })
}

/// Appends one observation to `model` in `O(n^2)` by block-updating the
/// cached inverse and Cholesky factor.
///
/// When the Schur complement collapses to the jitter floor the extended
/// system is refactorized densely.
pub fn extend_model_rank_one(model: &PosteriorModel, point: Point, y: f64) -> Result<PosteriorModel> {
    model.check_dim(&point.x)?;
    let n = model.len();
    let kern = &model.hyperparams.kernel;
    let noise = model.effective_noise();
    let kp = model.kernel_vector(&point.x, point.t);
    let kappa = kern.k(&point.x, point.t, &point.x, point.t) + noise;
    let v = &model.gram_inverse * &kp;
    let schur = kappa - kp.dot(&v);
    let l_row = model
        .chol
        .solve_lower_triangular(&kp)
        .expect("cached Cholesky factor has a positive diagonal");
    let l_diag2 = kappa - l_row.norm_squared();
    let floor = JITTER_START * kern.x_signal_variance;

    if !(schur > floor && l_diag2 > floor) {
        log::debug!("rank-one extension degenerate (schur {schur:.3e}); refactorizing densely");
        let mut ds = model.dataset.clone();
        ds.push(point, y)?;
        return build_model(ds, model.hyperparams.clone());
    }

    let mut inv = DMatrix::zeros(n + 1, n + 1);
    let inv_s = 1.0 / schur;
    for j in 0..n {
        let vj = v[j] * inv_s;
        for i in 0..n {
            inv[(i, j)] = model.gram_inverse[(i, j)] + v[i] * vj;
        }
        inv[(n, j)] = -vj;
        inv[(j, n)] = -vj;
    }
    inv[(n, n)] = inv_s;

    let mut chol = DMatrix::zeros(n + 1, n + 1);
    chol.view_mut((0, 0), (n, n)).copy_from(&model.chol);
    for j in 0..n {
        chol[(n, j)] = l_row[j];
    }
    chol[(n, n)] = l_diag2.sqrt();

    let residual = y - kp.dot(&model.alpha);
    let r = residual * inv_s;
    let mut alpha = DVector::zeros(n + 1);
    for i in 0..n {
        alpha[i] = model.alpha[i] - v[i] * r;
    }
    alpha[n] = r;

    let mut dataset = model.dataset.clone();
    dataset.push(point, y)?;
    Ok(PosteriorModel {
        dataset,
        hyperparams: model.hyperparams.clone(),
        jitter: model.jitter,
        chol,
        gram_inverse: inv,
        alpha,
    })
}

/// Reparameterized draw of a noisy observation: `mu + s_pred * z`.
pub fn simulate_observation(model: &PosteriorModel, x: &[f64], t: f64, z: f64) -> Result<f64> {
    let s = model.posterior_at(x, t)?;
    Ok(s.mean + (s.variance + model.effective_noise()).sqrt() * z)
}

/// Log marginal likelihood and its gradient with respect to
/// [`Hyperparams::to_log_params`].
pub fn log_marginal_likelihood(dataset: &Dataset, hp: &Hyperparams) -> Result<(f64, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let kern = &hp.kernel;
    let d = kern.dim();
    if dataset.dim() != Some(d) {
        return Err(Error::Dimension {
            expected: d,
            got: dataset.dim().unwrap_or(0),
        });
    }
    let n = dataset.len();
    let pts = &dataset.points;
    let k = gram(pts, kern);
    let fact = factorize(&k, hp.noise_variance, kern.x_signal_variance)?;
    let y = DVector::from_column_slice(&dataset.values);
    let alpha = fact.chol.solve(&y);
    let l = fact.chol.l_dirty();
    let log_det: f64 = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
    let value = -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    let inv = fact.chol.inverse();
    // A = alpha alpha^T - K^-1; dL/dtheta = 0.5 tr(A dK/dtheta)
    let np = d + 3;
    let mut grad = vec![0.0; np];
    for i in 0..n {
        for j in 0..=i {
            let a = alpha[i] * alpha[j] - inv[(i, j)];
            let w = if i == j { 0.5 * a } else { a };
            let kx = kern.kx(&pts[i].x, &pts[j].x);
            let kt = kern.time.eval(pts[i].t, pts[j].t);
            let kij = kx * kt;
            for (m, lm) in kern.x_lengthscales.iter().enumerate() {
                let r = (pts[i].x[m] - pts[j].x[m]) / lm;
                grad[m] += w * kij * r * r;
            }
            grad[d] += w * kij;
            grad[d + 1] += w * kx * kern.time.dlog_param(pts[i].t, pts[j].t);
        }
        let a = alpha[i] * alpha[i] - inv[(i, i)];
        // the jitter scales with the signal variance
        grad[d] += 0.5 * a * fact.jitter;
        grad[d + 2] += 0.5 * a * hp.noise_variance;
    }
    Ok((value, grad))
}

/// Box over log-hyperparameters, in [`Hyperparams::to_log_params`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub time_form: TimeForm,
}

impl FitBounds {
    /// Bounds spanning `[1e-3, 1e3]` times the natural scale of each
    /// quantity: domain widths for action lengthscales, the time span for the
    /// time lengthscale, and the mean square of the observations for the
    /// signal variance. The noise variance ranges over `[1e-6, 1]` times that
    /// mean square.
    pub fn for_data(dataset: &Dataset, domain: &BoxDomain, time_span: f64, time_form: TimeForm) -> Self {
        let y_scale = mean_square(dataset.values()).max(1e-8);
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        for j in 0..domain.dim() {
            let w = domain.width(j);
            lower.push((1e-3 * w).ln());
            upper.push((1e3 * w).ln());
        }
        lower.push((1e-3 * y_scale).ln());
        upper.push((1e3 * y_scale).ln());
        match time_form {
            TimeForm::SquaredExponential => {
                lower.push((1e-3 * time_span).ln());
                upper.push((1e3 * time_span).ln());
            }
            TimeForm::Forgetting => {
                // decay rate -ln(1 - eps) per unit time
                lower.push((1e-3 / time_span).ln());
                upper.push((1e3 / time_span).ln());
            }
        }
        lower.push((1e-6 * y_scale).ln());
        upper.push(y_scale.ln());
        FitBounds {
            lower,
            upper,
            time_form,
        }
    }

    fn domain(&self) -> Result<BoxDomain> {
        BoxDomain::new(self.lower.clone(), self.upper.clone())
    }

    /// Moderate default inside the bounds, used as the first start and as
    /// the fallback when no start improves.
    pub fn default_hyperparams(&self) -> Result<Hyperparams> {
        let p = self.lower.len();
        let d = p - 3;
        let mid = |i: usize, frac: f64| self.lower[i] + frac * (self.upper[i] - self.lower[i]);
        let mut theta = Vec::with_capacity(p);
        // log-midpoint of [1e-3 w, 1e3 w] is w; start at w / 4.
        for i in 0..d {
            theta.push(mid(i, 0.5) - 4f64.ln());
        }
        theta.push(mid(d, 0.5));
        theta.push(match self.time_form {
            TimeForm::SquaredExponential => mid(d + 1, 0.5) - 4f64.ln(),
            TimeForm::Forgetting => mid(d + 1, 0.5),
        });
        theta.push(self.lower[p - 1] + 0.5 * (self.upper[p - 1] - self.lower[p - 1]));
        Hyperparams::from_log_params(&theta, self.time_form)
    }
}

fn mean_square(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().map(|y| y * y).sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub n_starts: usize,
    pub ascent: AscentOptions,
    /// Extra start, typically the previous step's hyperparameters.
    pub warm_start: Option<Hyperparams>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            n_starts: 8,
            ascent: AscentOptions::default(),
            warm_start: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub hyperparams: Hyperparams,
    pub log_likelihood: f64,
    /// No start improved on its initial likelihood; defaults were returned.
    pub warning: bool,
}

/// Type-II maximum likelihood: best of several projected-gradient ascents of
/// the log marginal likelihood in log-hyperparameter space.
pub fn fit_hyperparameters<R: Rng + ?Sized>(
    dataset: &Dataset,
    bounds: &FitBounds,
    opts: &FitOptions,
    rng: &mut R,
) -> Result<FitOutcome> {
    if dataset.len() < 2 {
        return Err(Error::invalid("hyperparameter fitting needs at least two observations"));
    }
    let dom = bounds.domain()?;
    let form = bounds.time_form;
    let default = bounds.default_hyperparams()?;

    let mut starts = vec![default.to_log_params()];
    if let Some(w) = &opts.warm_start {
        starts.push(w.to_log_params());
    }
    // random starts from the central part of the box
    let p = dom.dim();
    while starts.len() < opts.n_starts.max(1) + usize::from(opts.warm_start.is_some()) {
        let s: Vec<f64> = (0..p)
            .map(|i| {
                let c = 0.5 * (bounds.lower[i] + bounds.upper[i]);
                let half = 0.5 * (bounds.upper[i] - bounds.lower[i]);
                c + half * 0.4 * (2.0 * rng.random::<f64>() - 1.0)
            })
            .collect();
        starts.push(s);
    }
    for s in &mut starts {
        dom.project(s);
    }

    let mut objective = |theta: &[f64], g: &mut [f64]| -> f64 {
        let Ok(hp) = Hyperparams::from_log_params(theta, form) else {
            return f64::NAN;
        };
        match log_marginal_likelihood(dataset, &hp) {
            Ok((v, grad)) => {
                g.copy_from_slice(&grad);
                v
            }
            Err(_) => f64::NAN,
        }
    };

    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut improved = false;
    let mut scratch = vec![0.0; p];
    for s in &starts {
        let initial = objective(s, &mut scratch);
        if let Some(local) = optimizer::ascend(&mut objective, &dom, s, &opts.ascent) {
            if local.value > initial {
                improved = true;
            }
            if best.as_ref().is_none_or(|(_, b)| local.value > *b) {
                best = Some((local.x, local.value));
            }
        }
    }
    match best {
        Some((theta, value)) if improved || value.is_finite() => Ok(FitOutcome {
            hyperparams: Hyperparams::from_log_params(&theta, form)?,
            log_likelihood: value,
            warning: !improved,
        }),
        _ => {
            log::warn!("hyperparameter fit failed at every start; using defaults");
            Ok(FitOutcome {
                hyperparams: default,
                log_likelihood: f64::NEG_INFINITY,
                warning: true,
            })
        }
    }
}
