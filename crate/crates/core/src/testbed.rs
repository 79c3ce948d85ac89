//! Time-dependent payoff functions `f(x, t) = f_x(x) + f_xt(x, t)` and
//! tabular oracles backed by a reference GP.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{build_model, fit_hyperparameters, Dataset, FitBounds, FitOptions, Point, PosteriorModel};
use crate::kernel::TimeForm;
use crate::optimizer::{self, AscentOptions, BoxDomain};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Function {
    QuadraticA,
    QuadraticB,
    QuadraticC,
    QuadraticD,
    Griewank,
    Hartmann3,
    Hartmann6,
    Levy8,
    StyblinskiTang10,
}

impl Function {
    pub const ALL: [Function; 9] = [
        Function::QuadraticA,
        Function::QuadraticB,
        Function::QuadraticC,
        Function::QuadraticD,
        Function::Griewank,
        Function::Hartmann3,
        Function::Hartmann6,
        Function::Levy8,
        Function::StyblinskiTang10,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Function::QuadraticA => "quad-a",
            Function::QuadraticB => "quad-b",
            Function::QuadraticC => "quad-c",
            Function::QuadraticD => "quad-d",
            Function::Griewank => "griewank",
            Function::Hartmann3 => "hartmann3",
            Function::Hartmann6 => "hartmann6",
            Function::Levy8 => "levy8",
            Function::StyblinskiTang10 => "styblinski-tang10",
        }
    }

    pub fn from_name(name: &str) -> Option<Function> {
        Function::ALL.into_iter().find(|f| f.name() == name)
    }

    pub fn dim(self) -> usize {
        match self {
            Function::QuadraticA | Function::QuadraticB | Function::QuadraticC | Function::QuadraticD => 1,
            Function::Griewank => 2,
            Function::Hartmann3 => 3,
            Function::Hartmann6 => 6,
            Function::Levy8 => 8,
            Function::StyblinskiTang10 => 10,
        }
    }

    pub fn domain(self) -> BoxDomain {
        let d = self.dim();
        let (lo, hi) = match self {
            Function::Griewank | Function::StyblinskiTang10 => (-5.0, 5.0),
            Function::Levy8 => (-10.0, 10.0),
            _ => (0.0, 1.0),
        };
        BoxDomain::cube(d, lo, hi).expect("static domain is valid")
    }

    /// Maximizer of the time-independent part.
    pub fn x_part_maximizer(self) -> Vec<f64> {
        match self {
            Function::Griewank => vec![0.0; 2],
            Function::Hartmann3 => vec![0.114_614, 0.555_649, 0.852_547],
            Function::Hartmann6 => vec![0.201_69, 0.150_011, 0.476_874, 0.275_332, 0.311_652, 0.657_3],
            Function::Levy8 => vec![1.0; 8],
            Function::StyblinskiTang10 => vec![-2.903_534; 10],
            _ => vec![0.5],
        }
    }

    /// Time-independent part `f_x`.
    pub fn x_part(self, x: &[f64]) -> f64 {
        match self {
            Function::QuadraticA | Function::QuadraticB | Function::QuadraticC | Function::QuadraticD => {
                -4.0 * (x[0] - 0.5).powi(2)
            }
            Function::Griewank => -griewank(x),
            Function::Hartmann3 => -hartmann(x, &H3_A, &H3_P),
            Function::Hartmann6 => -hartmann(x, &H6_A, &H6_P),
            Function::Levy8 => -levy(x),
            Function::StyblinskiTang10 => -x.iter().map(|v| v.powi(4) - 16.0 * v * v + 5.0 * v).sum::<f64>() / 2.0,
        }
    }

    /// Time-dependent part `f_xt`. Functions of dimension above one use the
    /// Quadratic-d term on the first coordinate mapped affinely to `[0, 1]`.
    pub fn xt_part(self, x: &[f64], t: f64) -> f64 {
        use std::f64::consts::PI;
        let wave = |a: f64| (PI * a).sin() + (PI * a).cos();
        match self {
            Function::QuadraticA => wave(x[0] + t),
            Function::QuadraticB => wave(x[0] * t),
            Function::QuadraticC => wave(x[0] * (t - 3.0).max(0.0)),
            Function::QuadraticD => quad_d_drift(x[0], t),
            _ => {
                let dom = self.domain();
                let u = (x[0] - dom.lower()[0]) / dom.width(0);
                quad_d_drift(u, t)
            }
        }
    }

    pub fn eval(self, x: &[f64], t: f64) -> f64 {
        self.x_part(x) + self.xt_part(x, t)
    }
}

fn quad_d_drift(u: f64, t: f64) -> f64 {
    let s = t.sin();
    2.0 * u * s - s * s
}

fn griewank(x: &[f64]) -> f64 {
    let sum: f64 = x.iter().map(|v| v * v).sum::<f64>() / 4000.0;
    let prod: f64 = x
        .iter()
        .enumerate()
        .map(|(i, v)| (v / ((i + 1) as f64).sqrt()).cos())
        .product();
    sum - prod + 1.0
}

const H_ALPHA: [f64; 4] = [1.0, 1.2, 3.0, 3.2];
const H3_A: [[f64; 3]; 4] = [[3.0, 10.0, 30.0], [0.1, 10.0, 35.0], [3.0, 10.0, 30.0], [0.1, 10.0, 35.0]];
const H3_P: [[f64; 3]; 4] = [
    [0.3689, 0.1170, 0.2673],
    [0.4699, 0.4387, 0.7470],
    [0.1091, 0.8732, 0.5547],
    [0.0381, 0.5743, 0.8828],
];
const H6_A: [[f64; 6]; 4] = [
    [10.0, 3.0, 17.0, 3.5, 1.7, 8.0],
    [0.05, 10.0, 17.0, 0.1, 8.0, 14.0],
    [3.0, 3.5, 1.7, 10.0, 17.0, 8.0],
    [17.0, 8.0, 0.05, 10.0, 0.1, 14.0],
];
const H6_P: [[f64; 6]; 4] = [
    [0.1312, 0.1696, 0.5569, 0.0124, 0.8283, 0.5886],
    [0.2329, 0.4135, 0.8307, 0.3736, 0.1004, 0.9991],
    [0.2348, 0.1451, 0.3522, 0.2883, 0.3047, 0.6650],
    [0.4047, 0.8828, 0.8732, 0.5743, 0.1091, 0.0381],
];

fn hartmann<const D: usize>(x: &[f64], a: &[[f64; D]; 4], p: &[[f64; D]; 4]) -> f64 {
    -(0..4)
        .map(|i| {
            let inner: f64 = (0..D).map(|j| a[i][j] * (x[j] - p[i][j]).powi(2)).sum();
            H_ALPHA[i] * (-inner).exp()
        })
        .sum::<f64>()
}

fn levy(x: &[f64]) -> f64 {
    use std::f64::consts::PI;
    let w: Vec<f64> = x.iter().map(|v| 1.0 + (v - 1.0) / 4.0).collect();
    let d = w.len();
    let mut s = (PI * w[0]).sin().powi(2);
    for wi in &w[..d - 1] {
        s += (wi - 1.0).powi(2) * (1.0 + 10.0 * (PI * wi + 1.0).sin().powi(2));
    }
    s + (w[d - 1] - 1.0).powi(2) * (1.0 + (2.0 * PI * w[d - 1]).sin().powi(2))
}

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

/// First `n` points of the Halton sequence in `[0, 1)^dim`, skipping the
/// origin. Supports up to 16 dimensions.
pub fn halton(n: usize, dim: usize) -> Vec<Vec<f64>> {
    assert!(dim <= PRIMES.len(), "Halton sequence supports at most {} dimensions", PRIMES.len());
    (1..=n as u64)
        .map(|i| PRIMES[..dim].iter().map(|&b| radical_inverse(i, b)).collect())
        .collect()
}

#[derive(Debug, Clone)]
pub enum OracleKind {
    Synthetic(Function),
    Tabular(Arc<TableOracle>),
}

#[derive(Debug, Clone)]
pub struct OracleSpec {
    pub name: String,
    pub domain: BoxDomain,
    pub time_range: (f64, f64),
    pub noise_stddev: f64,
    pub kind: OracleKind,
}

impl OracleSpec {
    /// A named synthetic function on `[0, 4]` with the default noise level.
    pub fn named(name: &str) -> Result<Self> {
        let f = Function::from_name(name).ok_or_else(|| {
            let known: Vec<&str> = Function::ALL.iter().map(|f| f.name()).collect();
            Error::invalid(format!("unknown test function `{name}` (known: {})", known.join(", ")))
        })?;
        Ok(Self::synthetic(f, 4.0))
    }

    pub fn synthetic(f: Function, horizon: f64) -> Self {
        let mut spec = OracleSpec {
            name: f.name().to_string(),
            domain: f.domain(),
            time_range: (0.0, horizon),
            noise_stddev: 0.0,
            kind: OracleKind::Synthetic(f),
        };
        spec.noise_stddev = 0.01 * spec.probe_range();
        spec
    }

    pub fn with_noise(mut self, noise_stddev: f64) -> Result<Self> {
        if !(noise_stddev >= 0.0 && noise_stddev.is_finite()) {
            return Err(Error::invalid(format!("noise stddev must be non-negative, got {noise_stddev}")));
        }
        self.noise_stddev = noise_stddev;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn horizon(&self) -> f64 {
        self.time_range.1
    }

    /// Range of `f` over a 10^4-point Halton probe of domain x time.
    pub fn probe_range(&self) -> f64 {
        let d = self.dim();
        let (t0, t1) = self.time_range;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for u in halton(10_000, d + 1) {
            let x = self.domain.from_unit(&u[..d]);
            let v = self.eval_unchecked(&x, t0 + u[d] * (t1 - t0));
            lo = lo.min(v);
            hi = hi.max(v);
        }
        hi - lo
    }

    fn eval_unchecked(&self, x: &[f64], t: f64) -> f64 {
        match &self.kind {
            OracleKind::Synthetic(f) => f.eval(x, t),
            OracleKind::Tabular(table) => table.reference.mean_at(x, t),
        }
    }

    fn check(&self, x: &[f64], t: f64) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let slack = 1e-9;
        let inside = x.iter().enumerate().all(|(j, v)| {
            let w = self.domain.width(j);
            *v >= self.domain.lower()[j] - slack * w && *v <= self.domain.upper()[j] + slack * w
        });
        if !inside {
            return Err(Error::invalid(format!("action {x:?} lies outside the domain")));
        }
        let (t0, t1) = self.time_range;
        let span = (t1 - t0).abs().max(1.0);
        if !(t >= t0 - slack * span && t <= t1 + slack * span) {
            return Err(Error::invalid(format!("time {t} lies outside [{t0}, {t1}]")));
        }
        Ok(())
    }

    /// Noise-free payoff.
    pub fn eval(&self, x: &[f64], t: f64) -> Result<f64> {
        self.check(x, t)?;
        Ok(self.eval_unchecked(x, t))
    }

    /// Noisy observation. Tabular oracles return the recorded value when a
    /// table row lies within the snapping tolerance.
    pub fn observe<R: Rng + ?Sized>(&self, x: &[f64], t: f64, rng: &mut R) -> Result<f64> {
        self.check(x, t)?;
        if let OracleKind::Tabular(table) = &self.kind {
            if let Some(y) = table.snap(x, t) {
                return Ok(y);
            }
        }
        let z: f64 = rng.sample(StandardNormal);
        Ok(self.eval_unchecked(x, t) + self.noise_stddev * z)
    }

    /// `(max_x f(x, t), min_x f(x, t))`.
    pub fn extrema_at_horizon(&self, t: f64) -> (f64, f64) {
        let hi = self.extremum(t, 1.0);
        let lo = self.extremum(t, -1.0);
        (hi, lo)
    }

    fn extremum(&self, t: f64, sign: f64) -> f64 {
        let d = self.dim();
        let f = |x: &[f64]| sign * self.eval_unchecked(x, t);
        let candidates: Vec<Vec<f64>> = if d <= 2 {
            let per = if d == 1 { 20_001 } else { 2_001 };
            grid(&self.domain, per)
        } else {
            halton(100_000, d).iter().map(|u| self.domain.from_unit(u)).collect()
        };
        let mut scored: Vec<(f64, usize)> = candidates.iter().enumerate().map(|(i, x)| (f(x), i)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let keep = if d <= 2 { 4 } else { 16 };
        let mut best = scored[0].0;
        let mut obj = |x: &[f64], g: &mut [f64]| {
            let v = f(x);
            let mut y = x.to_vec();
            for j in 0..d {
                let h = 1e-6 * self.domain.width(j);
                let xj = x[j];
                y[j] = (xj + h).min(self.domain.upper()[j]);
                let up = f(&y);
                let hu = y[j] - xj;
                y[j] = (xj - h).max(self.domain.lower()[j]);
                let down = f(&y);
                let hd = xj - y[j];
                y[j] = xj;
                g[j] = (up - down) / (hu + hd);
            }
            v
        };
        let opts = AscentOptions {
            tol: 1e-10,
            max_iter: 500,
            ..AscentOptions::default()
        };
        for (_, i) in scored.iter().take(keep) {
            if let Some(local) = optimizer::ascend(&mut obj, &self.domain, &candidates[*i], &opts) {
                best = best.max(local.value);
            }
        }
        sign * best
    }
}

fn grid(domain: &BoxDomain, per: usize) -> Vec<Vec<f64>> {
    let d = domain.dim();
    let total = per.pow(d as u32);
    (0..total)
        .map(|mut k| {
            let u: Vec<f64> = (0..d)
                .map(|_| {
                    let i = k % per;
                    k /= per;
                    i as f64 / (per - 1) as f64
                })
                .collect();
            domain.from_unit(&u)
        })
        .collect()
}

/// Column names mapping a CSV file onto actions, time and payoff.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSchema {
    pub x_columns: Vec<String>,
    pub t_column: String,
    pub y_column: String,
}

impl TableSchema {
    /// `x1..xd, t, y`, with `d` read from the header.
    pub fn from_header(header: &csv::StringRecord) -> Self {
        let mut x_columns: Vec<String> = header
            .iter()
            .filter(|h| h.len() > 1 && h.starts_with('x') && h[1..].chars().all(|c| c.is_ascii_digit()))
            .map(str::to_string)
            .collect();
        x_columns.sort_by_key(|h| h[1..].parse::<usize>().unwrap_or(usize::MAX));
        TableSchema {
            x_columns,
            t_column: "t".into(),
            y_column: "y".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableOptions {
    /// Rows used to fit the reference GP (evenly strided through the table).
    pub max_fit_rows: usize,
    /// Snapping radius in domain-scaled units.
    pub snap_tolerance: f64,
    pub seed: u64,
}

impl Default for TableOptions {
    fn default() -> Self {
        TableOptions {
            max_fit_rows: 500,
            snap_tolerance: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TableOracle {
    pub path: PathBuf,
    rows: Vec<(Vec<f64>, f64, f64)>,
    reference: PosteriorModel,
    scale: Vec<f64>,
    time_scale: f64,
    snap_tolerance: f64,
}

impl TableOracle {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn reference(&self) -> &PosteriorModel {
        &self.reference
    }

    fn snap(&self, x: &[f64], t: f64) -> Option<f64> {
        let mut best: Option<(f64, f64)> = None;
        for (rx, rt, y) in &self.rows {
            let mut dist = ((t - rt) / self.time_scale).abs();
            for j in 0..x.len() {
                dist = dist.max(((x[j] - rx[j]) / self.scale[j]).abs());
            }
            if best.is_none_or(|(b, _)| dist < b) {
                best = Some((dist, *y));
            }
        }
        best.filter(|(d, _)| *d <= self.snap_tolerance).map(|(_, y)| y)
    }
}

fn parse_cell(path: &Path, line: u64, column: &str, cell: Option<&str>) -> Result<f64> {
    let raw = cell.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line,
        column: column.to_string(),
        message: "missing value".into(),
    })?;
    match raw.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            column: column.to_string(),
            message: format!("`{raw}` is not a finite number"),
        }),
    }
}

/// Reads a `x1..xd,t,y` table and fits a reference GP to it. The domain is
/// the bounding box of the actions and the time range that of `t`.
pub fn load_table_oracle(path: &Path, schema: Option<&TableSchema>, opts: &TableOptions) -> Result<OracleSpec> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::invalid(format!("{}: {other:?}", path.display())),
        })?;
    let header = reader.headers()?.clone();
    let schema = schema.cloned().unwrap_or_else(|| TableSchema::from_header(&header));
    if schema.x_columns.is_empty() {
        return Err(Error::invalid(format!("{}: no action columns (x1, x2, ...) in header", path.display())));
    }
    let index = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            column: name.to_string(),
            message: "column not found in header".into(),
        })
    };
    let xi: Vec<usize> = schema.x_columns.iter().map(|c| index(c)).collect::<Result<_>>()?;
    let ti = index(&schema.t_column)?;
    let yi = index(&schema.y_column)?;

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let x = xi
            .iter()
            .zip(&schema.x_columns)
            .map(|(i, c)| parse_cell(path, line, c, record.get(*i)))
            .collect::<Result<Vec<f64>>>()?;
        let t = parse_cell(path, line, &schema.t_column, record.get(ti))?;
        let y = parse_cell(path, line, &schema.y_column, record.get(yi))?;
        rows.push((x, t, y));
    }
    if rows.len() < 2 {
        return Err(Error::invalid(format!("{}: need at least two data rows", path.display())));
    }
    rows.sort_by(|a, b| a.1.total_cmp(&b.1));

    let d = xi.len();
    let lower: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r.0[j]).fold(f64::INFINITY, f64::min)).collect();
    let mut upper: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r.0[j]).fold(f64::NEG_INFINITY, f64::max)).collect();
    for j in 0..d {
        if upper[j] <= lower[j] {
            upper[j] = lower[j] + 1.0;
        }
    }
    let domain = BoxDomain::new(lower, upper)?;
    let t0 = rows[0].1;
    let t1 = rows[rows.len() - 1].1;
    let span = if t1 > t0 { t1 - t0 } else { 1.0 };

    let stride = rows.len().div_ceil(opts.max_fit_rows.max(2));
    let (pts, ys): (Vec<Point>, Vec<f64>) = rows
        .iter()
        .step_by(stride)
        .map(|(x, t, y)| (Point::new(x.clone(), *t), *y))
        .unzip();
    let dataset = Dataset::new(pts, ys)?;
    let bounds = FitBounds::for_data(&dataset, &domain, span, TimeForm::SquaredExponential);
    let fit = fit_hyperparameters(&dataset, &bounds, &FitOptions::default(), &mut seeded(opts.seed))?;
    let noise_stddev = fit.hyperparams.noise_variance.sqrt();
    let reference = build_model(dataset, fit.hyperparams)?;

    let scale = (0..d).map(|j| domain.width(j)).collect();
    let table = TableOracle {
        path: path.to_path_buf(),
        rows,
        reference,
        scale,
        time_scale: span,
        snap_tolerance: opts.snap_tolerance,
    };
    let name = path.file_stem().map_or_else(|| "table".to_string(), |s| s.to_string_lossy().into_owned());
    Ok(OracleSpec {
        name,
        domain,
        time_range: (t0, t1),
        noise_stddev,
        kind: OracleKind::Tabular(Arc::new(table)),
    })
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn quadratic_reference_values() {
        let q = Function::QuadraticD;
        assert_eq!(q.eval(&[0.5], 0.0), 0.0);
        for t in [0.3, 1.0, 2.5, 4.0] {
            let s: f64 = f64::sin(t);
            let x = 0.5 + s / 4.0;
            assert!((q.eval(&[x], t) - (s - 0.75 * s * s)).abs() < 1e-14);
        }
        for t in [0.0, 1.3, 3.9] {
            assert!(Function::QuadraticB.eval(&[0.0], t).abs() < 1e-15);
        }
        // sin(pi/2) + cos(pi/2) with f_x(0.5) = 0
        assert!((Function::QuadraticA.eval(&[0.5], 0.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quadratic_time_free_part_peaks_at_half() {
        for f in [Function::QuadraticA, Function::QuadraticB, Function::QuadraticC, Function::QuadraticD] {
            let best = (0..=100_000)
                .map(|i| i as f64 / 1e5)
                .max_by(|a, b| f.x_part(&[*a]).total_cmp(&f.x_part(&[*b])))
                .unwrap();
            assert!((best - 0.5).abs() < 1e-4);
        }
    }

    #[test]
    fn quadratic_c_is_frozen_before_three() {
        for i in 0..=30 {
            let t = 3.0 * i as f64 / 30.0;
            for x in [0.0, 0.2, 0.7, 1.0] {
                assert_eq!(Function::QuadraticC.xt_part(&[x], t), Function::QuadraticC.xt_part(&[x], 0.0));
            }
        }
        assert_ne!(Function::QuadraticC.xt_part(&[0.7], 3.5), Function::QuadraticC.xt_part(&[0.7], 0.0));
    }

    #[test]
    fn benchmark_maximizers_and_values() {
        let cases = [
            (Function::Griewank, 0.0),
            (Function::Hartmann3, 3.86278),
            (Function::Hartmann6, 3.32237),
            (Function::Levy8, 0.0),
            (Function::StyblinskiTang10, 39.16617 * 10.0),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (f, value) in cases {
            let xs = f.x_part_maximizer();
            assert_eq!(xs.len(), f.dim());
            assert!((f.x_part(&xs) - value).abs() < 1e-4 * value.abs().max(1.0), "{f:?}: {}", f.x_part(&xs));
            let dom = f.domain();
            for _ in 0..2_000 {
                let x = dom.sample_uniform(&mut rng);
                assert!(f.x_part(&x) <= f.x_part(&xs) + 1e-9);
            }
        }
    }

    #[test]
    fn named_specs_and_errors() {
        let s = OracleSpec::named("quad-d").unwrap();
        assert_eq!(s.dim(), 1);
        assert_eq!(s.time_range, (0.0, 4.0));
        assert!(s.noise_stddev > 0.0);
        assert!(OracleSpec::named("nope").is_err());
        assert!(s.eval(&[1.2], 1.0).is_err());
        assert!(s.eval(&[0.5], 4.5).is_err());
        assert!(s.eval(&[0.5, 0.5], 1.0).is_err());
        assert!(s.clone().with_noise(-1.0).is_err());
        let g = OracleSpec::named("griewank").unwrap();
        assert_eq!(g.domain, BoxDomain::cube(2, -5.0, 5.0).unwrap());
        // drift term uses the first coordinate mapped to [0, 1]
        let v = g.eval(&[5.0, 0.0], 1.0).unwrap();
        assert!((v - (-griewank(&[5.0, 0.0]) + quad_d_drift(1.0, 1.0))).abs() < 1e-14);
    }

    #[test]
    fn observations_are_noisy_and_reproducible() {
        let s = OracleSpec::named("quad-d").unwrap();
        let quiet = s.clone().with_noise(0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(quiet.observe(&[0.3], 2.0, &mut rng).unwrap(), s.eval(&[0.3], 2.0).unwrap());
        let a = s.observe(&[0.3], 2.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = s.observe(&[0.3], 2.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let f = s.eval(&[0.3], 2.0).unwrap();
        let n = 100_000;
        let ss: f64 = (0..n).map(|_| (s.observe(&[0.3], 2.0, &mut rng).unwrap() - f).powi(2)).sum();
        let sd = (ss / n as f64).sqrt();
        assert!((sd / s.noise_stddev - 1.0).abs() < 0.02);
    }

    #[test]
    fn quadratic_d_extrema() {
        let s = OracleSpec::named("quad-d").unwrap();
        let (hi, lo) = s.extrema_at_horizon(4.0);
        let sn = 4f64.sin();
        assert!((hi - (sn - 0.75 * sn * sn)).abs() < 1e-9);
        let boundary = Function::QuadraticD.eval(&[0.0], 4.0).min(Function::QuadraticD.eval(&[1.0], 4.0));
        assert!((lo - boundary).abs() < 1e-9);
    }

    #[test]
    fn extrema_dominate_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for f in Function::ALL {
            let s = OracleSpec::synthetic(f, 4.0);
            let (hi, lo) = s.extrema_at_horizon(4.0);
            assert!(hi > lo, "{f:?}");
            let tol = 1e-4 * (hi - lo);
            let samples = if f.dim() > 6 { 2_000 } else { 10_000 };
            for _ in 0..samples {
                let v = s.eval(&s.domain.sample_uniform(&mut rng), 4.0).unwrap();
                assert!(v <= hi + tol && v >= lo - tol, "{f:?}: {v} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn halton_is_low_discrepancy() {
        let pts = halton(1000, 2);
        assert_eq!(pts[0], vec![0.5, 1.0 / 3.0]);
        let inside = pts.iter().filter(|p| p[0] < 0.5 && p[1] < 0.5).count();
        assert!((inside as i64 - 250).abs() <= 3);
    }

    fn write_fixture(rows: &[(f64, f64, f64)], extra: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "x1,t,y").unwrap();
        writeln!(f, "# generated from Quadratic-d").unwrap();
        for (x, t, y) in rows {
            writeln!(f, "{x},{t},{y}").unwrap();
        }
        write!(f, "{extra}").unwrap();
        f
    }

    fn fixture_rows() -> Vec<(f64, f64, f64)> {
        let mut rows = Vec::new();
        for i in 0..=12 {
            for j in 0..=16 {
                let x = i as f64 / 12.0;
                let t = j as f64 / 4.0;
                rows.push((x, t, Function::QuadraticD.eval(&[x], t)));
            }
        }
        rows
    }

    #[test]
    fn table_oracle_interpolates_generating_function() {
        let file = write_fixture(&fixture_rows(), "");
        let spec = load_table_oracle(file.path(), None, &TableOptions::default()).unwrap();
        assert_eq!(spec.dim(), 1);
        assert_eq!(spec.time_range, (0.0, 4.0));
        let (hi, lo) = Function::QuadraticD.extrema_range();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let x = rng.random::<f64>();
            let t = 4.0 * rng.random::<f64>();
            let v = spec.eval(&[x], t).unwrap();
            assert!((v - Function::QuadraticD.eval(&[x], t)).abs() < 0.05 * (hi - lo));
        }
        // snapping onto a recorded row returns its value
        let y = spec.observe(&[0.5], 2.0, &mut rng).unwrap();
        assert_eq!(y, Function::QuadraticD.eval(&[0.5], 2.0));
        let (fmax, fmin) = spec.extrema_at_horizon(4.0);
        assert!(fmax > fmin);
    }

    #[test]
    fn table_parse_errors_name_row_and_column() {
        let file = write_fixture(&[(0.1, 0.0, 1.0), (0.2, 1.0, 2.0)], "0.3,abc,4.0\n");
        let err = load_table_oracle(file.path(), None, &TableOptions::default()).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Parse { line: 5, .. }), "{msg}");
        assert!(msg.contains("`t`"), "{msg}");

        let empty = write_fixture(&[], "");
        assert!(load_table_oracle(empty.path(), None, &TableOptions::default()).is_err());
        assert!(matches!(
            load_table_oracle(Path::new("/nonexistent/table.csv"), None, &TableOptions::default()),
            Err(Error::Io { .. })
        ));
    }

    impl Function {
        /// Range of `f` over the whole domain and time window, by grid.
        fn extrema_range(self) -> (f64, f64) {
            let mut hi = f64::MIN;
            let mut lo = f64::MAX;
            for i in 0..=200 {
                for j in 0..=200 {
                    let v = self.eval(&[i as f64 / 200.0], 4.0 * j as f64 / 200.0);
                    hi = hi.max(v);
                    lo = lo.min(v);
                }
            }
            (hi, lo)
        }
    }
}
