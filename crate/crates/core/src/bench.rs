//! The optimization loop on a fixed time schedule, replications, the
//! normalized-regret metric and aggregation.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{propose_myopic, AcquisitionKind, AcquisitionParams, MaximizeConfig};
use crate::error::{Error, Result};
use crate::gp::{build_model, fit_hyperparameters, Dataset, FitBounds, FitOptions, Hyperparams, Point, PosteriorModel};
use crate::kernel::TimeForm;
use crate::lookahead::{final_decision, propose_r2ley, LookaheadConfig};
use crate::optimizer::multistart_seeds;
use crate::rng::{derive_seed, seeded};
use crate::testbed::OracleSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ei,
    Pi,
    Ucb,
    Random,
    Rei,
    R2ley,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Ei, Method::Pi, Method::Ucb, Method::Random, Method::Rei, Method::R2ley];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ei => "ei",
            Method::Pi => "pi",
            Method::Ucb => "ucb",
            Method::Random => "random",
            Method::Rei => "rei",
            Method::R2ley => "r2ley",
        }
    }

    pub fn from_name(name: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == name)
    }

    fn acquisition(self) -> Option<AcquisitionKind> {
        match self {
            Method::Ei => Some(AcquisitionKind::EiMuMax),
            Method::Pi => Some(AcquisitionKind::PiMuMax),
            Method::Ucb => Some(AcquisitionKind::Ucb),
            Method::Random => Some(AcquisitionKind::Random),
            Method::Rei => Some(AcquisitionKind::RandomThenEi),
            Method::R2ley => None,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub oracle: OracleSpec,
    pub method: Method,
    pub ucb_beta: f64,
    /// Settings for r2LEY; its horizon is overridden by `horizon`.
    pub lookahead: LookaheadConfig,
    pub maximize: MaximizeConfig,
    pub n_initial: usize,
    pub m_steps: usize,
    pub t_train_end: f64,
    pub horizon: f64,
    pub replications: usize,
    pub seed: u64,
    pub fit: FitOptions,
    pub time_form: TimeForm,
    /// Latin-hypercube instead of independent uniform initial actions.
    pub latin_hypercube: bool,
    pub record_wall_clock: bool,
    /// `(f_max, f_min)` at the horizon; computed on demand when absent.
    pub extrema: Option<(f64, f64)>,
}

impl RunConfig {
    pub fn new(oracle: OracleSpec, method: Method) -> Self {
        let d = oracle.dim();
        let horizon = oracle.horizon();
        let t0 = oracle.time_range.0;
        RunConfig {
            oracle,
            method,
            ucb_beta: 2.0,
            lookahead: LookaheadConfig::default(),
            maximize: MaximizeConfig::default(),
            n_initial: if d <= 6 { (d + 1) * 20 } else { (d + 1) * 10 },
            m_steps: 10,
            t_train_end: t0 + (horizon - t0) / 2.0,
            horizon,
            replications: 20,
            seed: 0,
            fit: FitOptions::default(),
            time_form: TimeForm::SquaredExponential,
            latin_hypercube: false,
            record_wall_clock: false,
            extrema: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_initial < 2 {
            return Err(Error::invalid("n_initial must be at least 2"));
        }
        if self.m_steps == 0 {
            return Err(Error::invalid("m_steps must be at least 1"));
        }
        if self.replications == 0 {
            return Err(Error::invalid("replications must be at least 1"));
        }
        let t0 = self.oracle.time_range.0;
        if !(self.t_train_end > t0 && self.horizon > self.t_train_end) {
            return Err(Error::invalid(format!(
                "need {t0} < t_train_end ({}) < horizon ({})",
                self.t_train_end, self.horizon
            )));
        }
        if self.horizon > self.oracle.time_range.1 + 1e-12 {
            return Err(Error::invalid(format!(
                "horizon {} exceeds the oracle's time range",
                self.horizon
            )));
        }
        self.lookahead.validate()?;
        AcquisitionParams {
            kind: AcquisitionKind::Ucb,
            ucb_beta: self.ucb_beta,
        }
        .validate()
    }

    /// Observation times: `n_initial` equally spaced in `[t0, t_train_end]`,
    /// then `m_steps` equally spaced up to exactly `horizon`.
    pub fn schedule(&self) -> (Vec<f64>, Vec<f64>) {
        let t0 = self.oracle.time_range.0;
        let n = self.n_initial;
        let initial = (0..n)
            .map(|i| t0 + (self.t_train_end - t0) * i as f64 / (n - 1) as f64)
            .collect();
        let m = self.m_steps;
        let steps = (1..=m)
            .map(|k| {
                if k == m {
                    self.horizon
                } else {
                    self.t_train_end + (self.horizon - self.t_train_end) * k as f64 / m as f64
                }
            })
            .collect();
        (initial, steps)
    }

    pub fn extrema(&self) -> (f64, f64) {
        self.extrema.unwrap_or_else(|| self.oracle.extrema_at_horizon(self.horizon))
    }

    /// Fills in the horizon extrema so replications share one computation.
    pub fn with_extrema(mut self) -> Self {
        if self.extrema.is_none() {
            self.extrema = Some(self.oracle.extrema_at_horizon(self.horizon));
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x: Vec<f64>,
    pub t: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub case: String,
    pub d: usize,
    pub method: Method,
    pub replication: usize,
    pub seed: u64,
    pub initial: Vec<Observation>,
    pub steps: Vec<Observation>,
    pub x_final: Vec<f64>,
    pub f_final: f64,
    pub f_max: f64,
    pub f_min: f64,
    pub regret: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_secs: Option<f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// `log10` of the normalized gap `(f_max - f) / (f_max - f_min)`, clamped
/// below at `1e-12`.
pub fn simple_regret(f_max: f64, f_min: f64, f_val: f64) -> Result<f64> {
    if !(f_max > f_min) {
        return Err(Error::invalid(format!("need f_max > f_min, got {f_max} and {f_min}")));
    }
    let gap = ((f_max - f_val) / (f_max - f_min)).max(1e-12);
    Ok(gap.log10())
}

/// The loop state of one run: data, fitted model and rng streams.
pub struct BoSession<'a> {
    cfg: &'a RunConfig,
    seed: u64,
    dataset: Dataset,
    hyperparams: Hyperparams,
    model: PosteriorModel,
    obs_rng: crate::rng::Rng,
    warnings: Vec<String>,
    initial: Vec<Observation>,
    steps: Vec<Observation>,
}

impl<'a> BoSession<'a> {
    /// Observes the initial design and fits the first model.
    pub fn start(cfg: &'a RunConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let domain = &cfg.oracle.domain;
        let (times, _) = cfg.schedule();
        let mut design_rng = seeded(derive_seed(seed, 0));
        let xs: Vec<Vec<f64>> = if cfg.latin_hypercube {
            multistart_seeds(domain, cfg.n_initial, &mut design_rng, &[])
        } else {
            (0..cfg.n_initial).map(|_| domain.sample_uniform(&mut design_rng)).collect()
        };
        let mut obs_rng = seeded(derive_seed(seed, 1));
        let mut initial = Vec::with_capacity(cfg.n_initial);
        for (x, t) in xs.into_iter().zip(times) {
            let y = cfg.oracle.observe(&x, t, &mut obs_rng)?;
            initial.push(Observation { x, t, y });
        }
        let dataset = Dataset::new(
            initial.iter().map(|o| Point::new(o.x.clone(), o.t)).collect(),
            initial.iter().map(|o| o.y).collect(),
        )?;
        let mut warnings = Vec::new();
        let (hyperparams, model) = fit(cfg, &dataset, None, derive_seed(seed, 2), &mut warnings)?;
        Ok(BoSession {
            cfg,
            seed,
            dataset,
            hyperparams,
            model,
            obs_rng,
            warnings,
            initial,
            steps: Vec::new(),
        })
    }

    pub fn model(&self) -> &PosteriorModel {
        &self.model
    }

    /// Proposes, observes and refits for step `k` (1-based) at time `t`.
    fn step(&mut self, k: usize, t: f64) -> Result<()> {
        let cfg = self.cfg;
        let domain = &cfg.oracle.domain;
        let last = k == cfg.m_steps;
        let mut rng = seeded(derive_seed(self.seed, 100 + k as u64));
        let proposal = match cfg.method.acquisition() {
            Some(kind) => {
                let params = AcquisitionParams {
                    kind,
                    ucb_beta: cfg.ucb_beta,
                };
                propose_myopic(&params, &self.model, t, domain, last, &cfg.maximize, &mut rng).map(|p| {
                    self.warnings.extend(p.warnings.into_iter().map(|w| format!("step {k}: {w}")));
                    p.x
                })
            }
            None => {
                let la = LookaheadConfig {
                    horizon: cfg.horizon,
                    crn_seed: derive_seed(self.seed, 200 + k as u64),
                    ..cfg.lookahead.clone()
                };
                if last {
                    final_decision(&self.model, cfg.horizon, domain, &la)
                } else {
                    propose_r2ley(&self.model, t, &la, domain, &mut rng)
                }
            }
        };
        let x = match proposal {
            Ok(x) => x,
            Err(e) => {
                self.warnings.push(format!("step {k}: proposal failed ({e}); sampled at random"));
                domain.sample_uniform(&mut rng)
            }
        };
        let y = cfg.oracle.observe(&x, t, &mut self.obs_rng)?;
        self.dataset.push(Point::new(x.clone(), t), y)?;
        self.steps.push(Observation { x, t, y });
        if !last {
            let (hp, model) = fit(
                cfg,
                &self.dataset,
                Some(self.hyperparams.clone()),
                derive_seed(self.seed, 300 + k as u64),
                &mut self.warnings,
            )?;
            self.hyperparams = hp;
            self.model = model;
        }
        Ok(())
    }
}

fn fit(
    cfg: &RunConfig,
    dataset: &Dataset,
    warm: Option<Hyperparams>,
    seed: u64,
    warnings: &mut Vec<String>,
) -> Result<(Hyperparams, PosteriorModel)> {
    let span = cfg.horizon - cfg.oracle.time_range.0;
    let bounds = FitBounds::for_data(dataset, &cfg.oracle.domain, span, cfg.time_form);
    let opts = FitOptions {
        warm_start: warm,
        ..cfg.fit.clone()
    };
    let out = fit_hyperparameters(dataset, &bounds, &opts, &mut seeded(seed))?;
    if out.warning {
        warnings.push(format!("hyperparameter fit at n = {} did not improve on its starts", dataset.len()));
    }
    let model = build_model(dataset.clone(), out.hyperparams.clone())?;
    Ok((out.hyperparams, model))
}

/// One full run with the given seed.
pub fn run_bo(cfg: &RunConfig, replication: usize, seed: u64) -> Result<RunRecord> {
    let clock = Instant::now();
    let mut session = BoSession::start(cfg, seed)?;
    let (_, times) = cfg.schedule();
    for (k, t) in times.into_iter().enumerate() {
        session.step(k + 1, t)?;
    }
    let x_final = session.steps.last().expect("at least one step").x.clone();
    let f_final = cfg.oracle.eval(&x_final, cfg.horizon)?;
    let (f_max, f_min) = cfg.extrema();
    let regret = simple_regret(f_max, f_min, f_final)?;
    for w in &session.warnings {
        log::warn!("{} {} rep {replication}: {w}", cfg.oracle.name, cfg.method);
    }
    Ok(RunRecord {
        case: cfg.oracle.name.clone(),
        d: cfg.oracle.dim(),
        method: cfg.method,
        replication,
        seed,
        initial: session.initial,
        steps: session.steps,
        x_final,
        f_final,
        f_max,
        f_min,
        regret,
        wall_clock_secs: cfg.record_wall_clock.then(|| clock.elapsed().as_secs_f64()),
        warnings: session.warnings,
    })
}

/// Seed of replication `r` under master seed `master`.
pub fn replication_seed(master: u64, r: usize) -> u64 {
    derive_seed(master, r as u64)
}

/// Runs every replication (in parallel) and returns the records in
/// replication order. Failed runs are logged and dropped; an error is
/// returned only if all of them fail.
pub fn replicate(cfg: &RunConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let cfg = cfg.clone().with_extrema();
    let results: Vec<Result<RunRecord>> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| run_bo(&cfg, r, replication_seed(cfg.seed, r)))
        .collect();
    let mut records = Vec::with_capacity(results.len());
    let mut last_err = None;
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(rec) => records.push(rec),
            Err(e) => {
                log::error!("{} {} rep {r} failed: {e}", cfg.oracle.name, cfg.method);
                last_err = Some(e);
            }
        }
    }
    match (records.is_empty(), last_err) {
        (true, Some(e)) => Err(e),
        _ => Ok(records),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub case: String,
    pub d: usize,
    pub method: Method,
    pub mean: f64,
    pub stderr: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub reps: usize,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize_regrets(case: &str, d: usize, method: Method, regrets: &[f64]) -> SummaryRow {
    let n = regrets.len();
    let mean = regrets.iter().sum::<f64>() / n as f64;
    let stderr = if n > 1 {
        let var = regrets.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    let mut sorted = regrets.to_vec();
    sorted.sort_by(f64::total_cmp);
    SummaryRow {
        case: case.to_string(),
        d,
        method,
        mean,
        stderr,
        median: quantile(&sorted, 0.5),
        q25: quantile(&sorted, 0.25),
        q75: quantile(&sorted, 0.75),
        reps: n,
    }
}

/// One row per `(case, method)` in order of first appearance.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut groups: Vec<((String, Method), usize, Vec<f64>)> = Vec::new();
    for r in records {
        match groups.iter_mut().find(|(k, _, _)| k.0 == r.case && k.1 == r.method) {
            Some((_, _, v)) => v.push(r.regret),
            None => groups.push(((r.case.clone(), r.method), r.d, vec![r.regret])),
        }
    }
    groups
        .into_iter()
        .map(|((case, method), d, regrets)| summarize_regrets(&case, d, method, &regrets))
        .collect()
}

pub fn write_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i as u64 + 1,
            column: e.column().to_string(),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
