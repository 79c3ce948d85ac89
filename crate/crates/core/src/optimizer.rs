//! Box-constrained multistart maximization.
//!
//! Each start runs projected-gradient ascent with an Armijo backtracking line
//! search. Trial steps use the Barzilai-Borwein spectral length, which keeps
//! the method a plain projected-gradient scheme while avoiding the crawl of a
//! fixed step on badly scaled objectives.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if lower.is_empty() {
            return Err(Error::invalid("domain must have at least one dimension"));
        }
        for (l, u) in lower.iter().zip(&upper) {
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(Error::invalid(format!("invalid domain bounds [{l}, {u}]")));
            }
        }
        Ok(BoxDomain { lower, upper })
    }

    /// `[lo, hi]^dim`.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn width(&self, j: usize) -> f64 {
        self.upper[j] - self.lower[j]
    }

    pub fn max_width(&self) -> f64 {
        (0..self.dim()).map(|j| self.width(j)).fold(0.0, f64::max)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    pub fn project(&self, x: &mut [f64]) {
        for ((v, l), u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*l, *u);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(&self.lower)
                .zip(&self.upper)
                .all(|((v, l), u)| *l <= *v && *v <= *u)
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| l + (u - l) * rng.random::<f64>())
            .collect()
    }

    /// Maps a point of the unit cube onto the box.
    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(&self.lower)
            .zip(&self.upper)
            .map(|((v, l), h)| l + (h - l) * v)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AscentOptions {
    pub max_iter: usize,
    /// Stop once the projected-gradient step `P(x + g) - x` has infinity norm
    /// below `tol * max(1, |f|)`.
    pub tol: f64,
    pub armijo: f64,
    /// When larger than the number of starts, this many quasi-uniform points
    /// are screened first and the best ones become the starts.
    pub raw_samples: usize,
}

impl Default for AscentOptions {
    fn default() -> Self {
        AscentOptions {
            max_iter: 200,
            tol: 1e-6,
            armijo: 1e-4,
            raw_samples: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalMaximum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Maximum {
    pub x: Vec<f64>,
    pub value: f64,
    pub start_index: usize,
    pub failed_starts: usize,
}

/// Latin-hypercube points in the box followed by the (clamped) warm starts.
pub fn multistart_seeds<R: Rng + ?Sized>(
    domain: &BoxDomain,
    n: usize,
    rng: &mut R,
    extra: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let d = domain.dim();
    let mut strata: Vec<Vec<usize>> = (0..d)
        .map(|_| {
            let mut s: Vec<usize> = (0..n).collect();
            s.shuffle(rng);
            s
        })
        .collect();
    let mut seeds = Vec::with_capacity(n + extra.len());
    for i in 0..n {
        let u: Vec<f64> = strata
            .iter_mut()
            .map(|s| (s[i] as f64 + rng.random::<f64>()) / n as f64)
            .collect();
        seeds.push(domain.from_unit(&u));
    }
    for w in extra {
        if w.len() == d {
            let mut w = w.clone();
            domain.project(&mut w);
            seeds.push(w);
        }
    }
    seeds
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projected-gradient ascent from a single start. Returns `None` when the
/// objective is not finite at the start.
pub fn ascend<F>(
    objective: &mut F,
    domain: &BoxDomain,
    start: &[f64],
    opts: &AscentOptions,
) -> Option<LocalMaximum>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let d = domain.dim();
    let mut x = start.to_vec();
    domain.project(&mut x);
    let mut g = vec![0.0; d];
    let mut f = objective(&x, &mut g);
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return None;
    }

    let mut x_new = vec![0.0; d];
    let mut g_new = vec![0.0; d];
    let mut step = vec![0.0; d];
    let gnorm = dot(&g, &g).sqrt();
    let mut alpha = if gnorm > 0.0 {
        0.1 * domain.max_width() / gnorm
    } else {
        1.0
    };

    for iter in 0..opts.max_iter {
        for j in 0..d {
            step[j] = (x[j] + g[j]).clamp(domain.lower[j], domain.upper[j]) - x[j];
        }
        if inf_norm(&step) <= opts.tol * f.abs().max(1.0) {
            return Some(LocalMaximum {
                x,
                value: f,
                iterations: iter,
                converged: true,
            });
        }

        let mut accepted = false;
        let mut f_new = f;
        for _ in 0..60 {
            for j in 0..d {
                x_new[j] = (x[j] + alpha * g[j]).clamp(domain.lower[j], domain.upper[j]);
                step[j] = x_new[j] - x[j];
            }
            let predicted = dot(&g, &step);
            if predicted <= 0.0 {
                break;
            }
            f_new = objective(&x_new, &mut g_new);
            if f_new.is_finite()
                && g_new.iter().all(|v| v.is_finite())
                && f_new >= f + opts.armijo * predicted
            {
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Some(LocalMaximum {
                x,
                value: f,
                iterations: iter,
                converged: false,
            });
        }

        let mut ss = 0.0;
        let mut sy = 0.0;
        for j in 0..d {
            ss += step[j] * step[j];
            sy += step[j] * (g_new[j] - g[j]);
        }
        alpha = if sy < 0.0 { ss / -sy } else { alpha * 4.0 };
        alpha = alpha.clamp(1e-12, 1e12);

        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        f = f_new;
    }
    Some(LocalMaximum {
        x,
        value: f,
        iterations: opts.max_iter,
        converged: false,
    })
}

/// Runs [`ascend`] from each seed and keeps the best terminal point. Exact
/// ties go to the lowest seed index.
pub fn maximize_from<F>(
    objective: &mut F,
    domain: &BoxDomain,
    seeds: &[Vec<f64>],
    opts: &AscentOptions,
) -> Result<Maximum>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let mut best: Option<Maximum> = None;
    let mut failed = 0;
    for (i, s) in seeds.iter().enumerate() {
        match ascend(objective, domain, s, opts) {
            Some(local) => {
                if best.as_ref().is_none_or(|b| local.value > b.value) {
                    best = Some(Maximum {
                        x: local.x,
                        value: local.value,
                        start_index: i,
                        failed_starts: 0,
                    });
                }
            }
            None => failed += 1,
        }
    }
    match best {
        Some(mut b) => {
            b.failed_starts = failed;
            Ok(b)
        }
        None => Err(Error::Optimizer(format!(
            "objective failed at all {} starts",
            seeds.len()
        ))),
    }
}

/// Evaluates every candidate and returns the best `keep` of them in order of
/// decreasing value (stable on ties). Non-finite candidates are dropped.
pub fn screen_candidates<F>(objective: &mut F, candidates: Vec<Vec<f64>>, keep: usize) -> Vec<Vec<f64>>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let d = candidates.first().map_or(0, Vec::len);
    let mut g = vec![0.0; d];
    let mut scored: Vec<(f64, Vec<f64>)> = candidates
        .into_iter()
        .map(|c| (objective(&c, &mut g), c))
        .filter(|(v, _)| v.is_finite())
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    scored.into_iter().take(keep).map(|(_, c)| c).collect()
}

/// Multistart maximization over the box from `n_starts` Latin-hypercube
/// seeds plus `extra` warm starts.
pub fn maximize_box<F, R>(
    objective: &mut F,
    domain: &BoxDomain,
    n_starts: usize,
    rng: &mut R,
    extra: &[Vec<f64>],
    opts: &AscentOptions,
) -> Result<Maximum>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
    R: Rng + ?Sized,
{
    let n_starts = n_starts.max(1);
    let seeds = if opts.raw_samples > n_starts {
        let mut raw = multistart_seeds(domain, opts.raw_samples, rng, &[]);
        let mut kept = screen_candidates(objective, std::mem::take(&mut raw), n_starts);
        let mut warm = multistart_seeds(domain, 0, rng, extra);
        kept.append(&mut warm);
        kept
    } else {
        multistart_seeds(domain, n_starts, rng, extra)
    };
    maximize_from(objective, domain, &seeds, opts)
}

/// Best of `points` under `objective`, used as a fallback when gradient
/// ascent is unusable.
pub fn best_of<F>(objective: &mut F, points: &[Vec<f64>]) -> Option<(Vec<f64>, f64)>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let d = points.first().map_or(0, Vec::len);
    let mut g = vec![0.0; d];
    let mut best: Option<(Vec<f64>, f64)> = None;
    for p in points {
        let v = objective(p, &mut g);
        if v.is_finite() && best.as_ref().is_none_or(|(_, b)| v > *b) {
            best = Some((p.clone(), v));
        }
    }
    best
}
