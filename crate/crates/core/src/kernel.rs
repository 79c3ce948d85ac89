//! Product covariance `k((x, t), (x', t')) = k_x(x, x') * k_t(t, t')`.
//!
//! `k_x` is an ARD squared-exponential carrying the signal variance; `k_t`
//! is either a unit-scale squared-exponential or the forgetting-factor kernel
//! `(1 - eps)^{|t - t'| / 2}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Covariance over the time (context) axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "kebab-case")]
pub enum TimeKernel {
    SquaredExponential { lengthscale: f64 },
    Forgetting { epsilon: f64 },
}

/// Which family of time kernel; used when a parameter vector is rebuilt
/// from log-space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeForm {
    SquaredExponential,
    Forgetting,
}

impl TimeKernel {
    pub fn form(&self) -> TimeForm {
        match self {
            TimeKernel::SquaredExponential { .. } => TimeForm::SquaredExponential,
            TimeKernel::Forgetting { .. } => TimeForm::Forgetting,
        }
    }

    #[inline]
    pub fn eval(&self, t: f64, t2: f64) -> f64 {
        match *self {
            TimeKernel::SquaredExponential { lengthscale } => {
                let r = (t - t2) / lengthscale;
                (-0.5 * r * r).exp()
            }
            TimeKernel::Forgetting { epsilon } => {
                if epsilon == 0.0 {
                    1.0
                } else {
                    (0.5 * (t - t2).abs() * (1.0 - epsilon).ln()).exp()
                }
            }
        }
    }

    /// Log-space coordinate: `ln l_t` for the squared exponential,
    /// `ln(-ln(1 - eps))` for the forgetting factor.
    pub fn log_param(&self) -> f64 {
        match *self {
            TimeKernel::SquaredExponential { lengthscale } => lengthscale.ln(),
            TimeKernel::Forgetting { epsilon } => (-(1.0 - epsilon).ln()).ln(),
        }
    }

    pub fn from_log_param(form: TimeForm, theta: f64) -> Self {
        match form {
            TimeForm::SquaredExponential => TimeKernel::SquaredExponential {
                lengthscale: theta.exp(),
            },
            TimeForm::Forgetting => TimeKernel::Forgetting {
                epsilon: 1.0 - (-theta.exp()).exp(),
            },
        }
    }

    /// `d k_t / d (log-space coordinate)`.
    #[inline]
    pub fn dlog_param(&self, t: f64, t2: f64) -> f64 {
        match *self {
            TimeKernel::SquaredExponential { lengthscale } => {
                let r = (t - t2) / lengthscale;
                (-0.5 * r * r).exp() * r * r
            }
            TimeKernel::Forgetting { epsilon } => {
                let rate = -(1.0 - epsilon).ln();
                let a = 0.5 * (t - t2).abs();
                -(-rate * a).exp() * rate * a
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            TimeKernel::SquaredExponential { lengthscale } => {
                if !(lengthscale > 0.0 && lengthscale.is_finite()) {
                    return Err(Error::invalid(format!(
                        "time lengthscale must be positive, got {lengthscale}"
                    )));
                }
            }
            TimeKernel::Forgetting { epsilon } => {
                if !(0.0..1.0).contains(&epsilon) {
                    return Err(Error::invalid(format!(
                        "forgetting factor must lie in [0, 1), got {epsilon}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub x_lengthscales: Vec<f64>,
    pub x_signal_variance: f64,
    pub time: TimeKernel,
}

impl KernelParams {
    pub fn new(x_lengthscales: Vec<f64>, x_signal_variance: f64, time: TimeKernel) -> Result<Self> {
        let p = KernelParams {
            x_lengthscales,
            x_signal_variance,
            time,
        };
        p.validate()?;
        Ok(p)
    }

    /// Isotropic squared-exponential in both action and time.
    pub fn squared_exponential(dim: usize, lx: f64, signal_variance: f64, lt: f64) -> Result<Self> {
        Self::new(
            vec![lx; dim],
            signal_variance,
            TimeKernel::SquaredExponential { lengthscale: lt },
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.x_lengthscales.is_empty() {
            return Err(Error::invalid("at least one action lengthscale is required"));
        }
        if let Some(l) = self
            .x_lengthscales
            .iter()
            .find(|l| !(**l > 0.0 && l.is_finite()))
        {
            return Err(Error::invalid(format!("action lengthscale must be positive, got {l}")));
        }
        if !(self.x_signal_variance > 0.0 && self.x_signal_variance.is_finite()) {
            return Err(Error::invalid(format!(
                "signal variance must be positive, got {}",
                self.x_signal_variance
            )));
        }
        self.time.validate()
    }

    pub fn dim(&self) -> usize {
        self.x_lengthscales.len()
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

    pub fn eval_kx(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        self.check_dim(x2)?;
        Ok(self.kx(x, x2))
    }

    pub fn eval_kt(&self, t: f64, t2: f64) -> f64 {
        self.time.eval(t, t2)
    }

    pub fn eval_k(&self, x: &[f64], t: f64, x2: &[f64], t2: f64) -> Result<f64> {
        Ok(self.eval_kx(x, x2)? * self.eval_kt(t, t2))
    }

    /// Gradient of `k((x, t), (x2, t2))` with respect to `x`.
    pub fn grad_k_wrt_x(&self, x: &[f64], t: f64, x2: &[f64], t2: f64) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        self.check_dim(x2)?;
        let mut g = vec![0.0; x.len()];
        let k = self.kx(x, x2) * self.time.eval(t, t2);
        self.accumulate_grad(x, x2, k, &mut g);
        Ok(g)
    }

    /// Unchecked `k_x`; callers guarantee matching dimensions.
    #[inline]
    pub(crate) fn kx(&self, x: &[f64], x2: &[f64]) -> f64 {
        let mut r2 = 0.0;
        for ((a, b), l) in x.iter().zip(x2).zip(&self.x_lengthscales) {
            let r = (a - b) / l;
            r2 += r * r;
        }
        self.x_signal_variance * (-0.5 * r2).exp()
    }

    #[inline]
    pub(crate) fn k(&self, x: &[f64], t: f64, x2: &[f64], t2: f64) -> f64 {
        self.kx(x, x2) * self.time.eval(t, t2)
    }

    /// Adds `d k / d x` into `out`, given the already evaluated `k`.
    #[inline]
    pub(crate) fn accumulate_grad(&self, x: &[f64], x2: &[f64], k: f64, out: &mut [f64]) {
        for (((o, a), b), l) in out.iter_mut().zip(x).zip(x2).zip(&self.x_lengthscales) {
            *o -= k * (a - b) / (l * l);
        }
    }

    /// Log-space parameter vector `[ln l_1, .., ln l_d, ln s_f^2, theta_t]`.
    pub fn to_log_params(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.x_lengthscales.iter().map(|l| l.ln()).collect();
        v.push(self.x_signal_variance.ln());
        v.push(self.time.log_param());
        v
    }

    pub fn from_log_params(theta: &[f64], form: TimeForm) -> Result<Self> {
        if theta.len() < 3 {
            return Err(Error::invalid("log-parameter vector too short"));
        }
        let d = theta.len() - 2;
        Self::new(
            theta[..d].iter().map(|v| v.exp()).collect(),
            theta[d].exp(),
            TimeKernel::from_log_param(form, theta[d + 1]),
        )
    }
}

#[cfg(test)]
mod tests {
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn se1() -> KernelParams {
        KernelParams::squared_exponential(1, 1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn kx_identity_and_decay() {
        let p = KernelParams::squared_exponential(2, 0.7, 2.5, 1.0).unwrap();
        assert_eq!(p.eval_kx(&[0.3, 0.1], &[0.3, 0.1]).unwrap(), 2.5);
        let far = p.eval_kx(&[0.0, 0.0], &[20.0 * 0.7, 0.0]).unwrap();
        assert!(far < 1e-12);
        let v = se1().eval_kx(&[0.0], &[1.0]).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert!((v - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = se1();
        assert!(matches!(
            p.eval_kx(&[0.0, 1.0], &[0.0]),
            Err(Error::Dimension { expected: 1, got: 2 })
        ));
        assert!(p.grad_k_wrt_x(&[0.0], 0.0, &[0.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn invalid_params_are_rejected() {
        assert!(KernelParams::squared_exponential(1, 0.0, 1.0, 1.0).is_err());
        assert!(KernelParams::squared_exponential(1, 1.0, -1.0, 1.0).is_err());
        assert!(KernelParams::new(vec![1.0], 1.0, TimeKernel::Forgetting { epsilon: 1.0 }).is_err());
        assert!(KernelParams::new(vec![1.0], 1.0, TimeKernel::Forgetting { epsilon: -0.1 }).is_err());
    }

    #[test]
    fn time_kernels() {
        let f0 = TimeKernel::Forgetting { epsilon: 0.0 };
        assert_eq!(f0.eval(0.0, 17.0), 1.0);
        let f = TimeKernel::Forgetting { epsilon: 0.75 };
        assert!((f.eval(1.0, 3.0) - 0.25).abs() < 1e-15);
        assert_eq!(f.eval(2.0, 2.0), 1.0);
        let se = TimeKernel::SquaredExponential { lengthscale: 0.4 };
        assert_eq!(se.eval(1.3, 1.3), 1.0);
        assert_eq!(se.eval(0.1, 0.9), se.eval(0.9, 0.1));
    }

    #[test]
    fn product_definition() {
        let p = KernelParams::new(
            vec![1.0],
            1.0,
            TimeKernel::Forgetting { epsilon: 0.75 },
        )
        .unwrap();
        // kx = 0.5 at distance sqrt(2 ln 2); kt = 0.25 at |dt| = 2
        let dx = (2.0 * 2f64.ln()).sqrt();
        let k = p.eval_k(&[0.0], 0.0, &[dx], 2.0).unwrap();
        assert!((k - 0.125).abs() < 1e-14);
        let q = KernelParams::squared_exponential(3, 0.5, 1.7, 2.0).unwrap();
        assert_eq!(q.eval_k(&[0.1, 0.2, 0.3], 1.0, &[0.1, 0.2, 0.3], 1.0).unwrap(), 1.7);
    }

    #[test]
    fn gradient_hand_value_and_zero_at_coincidence() {
        let p = se1();
        let g = p.grad_k_wrt_x(&[1.0], 0.0, &[0.0], 0.0).unwrap();
        assert!((g[0] + (-0.5f64).exp()).abs() < 1e-15);
        let z = p.grad_k_wrt_x(&[0.4], 0.0, &[0.4], 1.0).unwrap();
        assert_eq!(z, vec![0.0]);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..100 {
            let d = 1 + trial % 3;
            let ls: Vec<f64> = (0..d).map(|_| rng.random_range(0.2..2.0)).collect();
            let time = if trial % 2 == 0 {
                TimeKernel::SquaredExponential { lengthscale: rng.random_range(0.3..3.0) }
            } else {
                TimeKernel::Forgetting { epsilon: rng.random_range(0.0..0.9) }
            };
            let p = KernelParams::new(ls.clone(), rng.random_range(0.5..3.0), time).unwrap();
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x2: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (t, t2) = (rng.random_range(0.0..4.0), rng.random_range(0.0..4.0));
            let g = p.grad_k_wrt_x(&x, t, &x2, t2).unwrap();
            let g_swap = p.grad_k_wrt_x(&x2, t2, &x, t).unwrap();
            for j in 0..d {
                assert!((g[j] + g_swap[j]).abs() < 1e-14, "antisymmetry");
                let h = 1e-6 * ls[j];
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let fd = (p.eval_k(&xp, t, &x2, t2).unwrap() - p.eval_k(&xm, t, &x2, t2).unwrap())
                    / (2.0 * h);
                let rel = (g[j] - fd).abs() / fd.abs().max(1e-8);
                assert!(rel < 1e-6 || (g[j] - fd).abs() < 1e-10, "rel {rel} g {} fd {fd}", g[j]);
            }
        }
    }

    #[test]
    fn time_log_param_round_trip_and_derivative() {
        for tk in [
            TimeKernel::SquaredExponential { lengthscale: 0.8 },
            TimeKernel::Forgetting { epsilon: 0.3 },
        ] {
            let theta = tk.log_param();
            let back = TimeKernel::from_log_param(tk.form(), theta);
            assert!((back.eval(0.0, 1.3) - tk.eval(0.0, 1.3)).abs() < 1e-14);
            let h = 1e-6;
            let fd = (TimeKernel::from_log_param(tk.form(), theta + h).eval(0.2, 1.7)
                - TimeKernel::from_log_param(tk.form(), theta - h).eval(0.2, 1.7))
                / (2.0 * h);
            assert!((tk.dlog_param(0.2, 1.7) - fd).abs() < 1e-8);
        }
    }

    fn gram(p: &KernelParams, pts: &[(Vec<f64>, f64)]) -> DMatrix<f64> {
        DMatrix::from_fn(pts.len(), pts.len(), |i, j| {
            p.eval_k(&pts[i].0, pts[i].1, &pts[j].0, pts[j].1).unwrap()
        })
    }

    #[test]
    fn gram_is_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = KernelParams::new(
            vec![0.3, 0.6],
            1.3,
            TimeKernel::SquaredExponential { lengthscale: 0.9 },
        )
        .unwrap();
        let pts: Vec<(Vec<f64>, f64)> = (0..10)
            .map(|_| (vec![rng.random(), rng.random()], rng.random_range(0.0..4.0)))
            .collect();
        let k = gram(&p, &pts);
        for i in 0..10 {
            for j in 0..10 {
                assert_eq!(k[(i, j)], k[(j, i)]);
            }
        }
        let eig = k.clone().symmetric_eigen();
        assert!(eig.eigenvalues.min() >= -1e-10);

        let f = KernelParams::new(vec![0.4], 1.0, TimeKernel::Forgetting { epsilon: 0.5 }).unwrap();
        let pts: Vec<(Vec<f64>, f64)> = (0..50)
            .map(|_| (vec![rng.random()], rng.random_range(0.0..4.0)))
            .collect();
        let k = gram(&f, &pts) + DMatrix::identity(50, 50) * 1e-10;
        assert!(k.cholesky().is_some());
    }

    #[test]
    fn log_params_round_trip() {
        let p = KernelParams::new(
            vec![0.3, 1.2],
            0.7,
            TimeKernel::Forgetting { epsilon: 0.2 },
        )
        .unwrap();
        let q = KernelParams::from_log_params(&p.to_log_params(), TimeForm::Forgetting).unwrap();
        for (a, b) in p.x_lengthscales.iter().zip(&q.x_lengthscales) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!((p.x_signal_variance - q.x_signal_variance).abs() < 1e-14);
    }
}
