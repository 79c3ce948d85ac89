use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::gp::{build_model, extend_model_rank_one, simulate_observation, Dataset, Hyperparams, Point};
use crate::kernel::{KernelParams, TimeKernel};

fn quad_d(x: f64, t: f64) -> f64 {
    let s = t.sin();
    -4.0 * (x - 0.5).powi(2) + 2.0 * x * s - s * s
}

/// Noisy Quadratic-d observations on `[0,1] x [0,2]` with fixed hyperparameters.
fn quad_state(seed: u64, n: usize) -> PosteriorModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::new();
    let mut ys = Vec::new();
    for i in 0..n {
        let x = rng.random::<f64>();
        let t = 2.0 * i as f64 / (n - 1) as f64;
        pts.push(Point::new(vec![x], t));
        ys.push(quad_d(x, t) + 0.02 * rng.sample::<f64, _>(StandardNormal));
    }
    let lx = 0.25 + 0.2 * rng.random::<f64>();
    let hp = Hyperparams::new(KernelParams::squared_exponential(1, lx, 1.5, 1.2).unwrap(), 4e-4).unwrap();
    build_model(Dataset::new(pts, ys).unwrap(), hp).unwrap()
}

fn state_2d(seed: u64) -> PosteriorModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::new();
    let mut ys = Vec::new();
    for i in 0..20 {
        let x = vec![rng.random::<f64>(), rng.random::<f64>()];
        let t = i as f64 / 10.0;
        ys.push((3.0 * x[0]).sin() * (2.0 * x[1]).cos() + 0.3 * t);
        pts.push(Point::new(x, t));
    }
    let kern = KernelParams::new(vec![0.3, 0.5], 1.0, TimeKernel::Forgetting { epsilon: 0.2 }).unwrap();
    build_model(Dataset::new(pts, ys).unwrap(), Hyperparams::new(kern, 1e-3).unwrap()).unwrap()
}

fn unit(d: usize) -> BoxDomain {
    BoxDomain::cube(d, 0.0, 1.0).unwrap()
}

fn cfg(m: usize, seed: u64) -> LookaheadConfig {
    LookaheadConfig {
        mc_samples: m,
        crn_seed: seed,
        ..LookaheadConfig::default()
    }
}

#[test]
fn closed_form_matches_explicit_extension() {
    for seed in 0..5 {
        for model in [quad_state(seed, 15), state_2d(seed)] {
            let d = model.dim();
            let dom = unit(d);
            let c = cfg(1, seed);
            let ctx = LookaheadContext::new(&model, 2.2, &c, &dom).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x_next = dom.sample_uniform(&mut rng);
            let probe = ctx.probe(&x_next).unwrap();
            let pred = model.predictive_variance(&x_next, 2.2).unwrap();
            assert!((probe.sigma * probe.sigma - pred).abs() < 1e-12);
            for z in [-1.7, 0.4, 2.5] {
                let y = simulate_observation(&model, &x_next, 2.2, z).unwrap();
                let ext = extend_model_rank_one(&model, Point::new(x_next.clone(), 2.2), y).unwrap();
                let (mut gm, mut gc) = (vec![0.0; d], vec![0.0; d]);
                for _ in 0..50 {
                    let x = dom.sample_uniform(&mut rng);
                    let (mu, cv) = ctx.mean_and_cov(&probe, &x, &mut gm, &mut gc);
                    let aug = mu + z / probe.sigma * cv;
                    assert!((aug - ext.mean_at(&x, c.horizon)).abs() < 1e-8);
                }
                // the per-draw payoff is the maximum of the extended model's mean
                let s = ctx.sample(&probe, z);
                let reference = inner_max_posterior_mean(&ext, c.horizon, &dom, &c).unwrap();
                assert!((s.value - reference.value).abs() < 1e-6, "{} vs {}", s.value, reference.value);
                assert!((s.value - ext.mean_at(&s.x_star, c.horizon)).abs() < 1e-8);
            }
        }
    }
}

/// Derivative of `k_aug^T K_aug^-1 y_aug` at a fixed maximizer, assembled from
/// dense augmented matrices: `dk^T K^-1 y - k^T K^-1 dK K^-1 y + k^T K^-1 dy`.
fn dense_gradient(model: &PosteriorModel, x_next: &[f64], t_next: f64, horizon: f64, x_star: &[f64], z: f64, full: bool) -> Vec<f64> {
    let kern = model.kernel();
    let d = x_next.len();
    let mut pts: Vec<Point> = model.dataset().points().to_vec();
    pts.push(Point::new(x_next.to_vec(), t_next));
    let n = pts.len();
    let noise = model.effective_noise();
    let kmat = DMatrix::from_fn(n, n, |i, j| {
        kern.eval_k(&pts[i].x, pts[i].t, &pts[j].x, pts[j].t).unwrap() + if i == j { noise } else { 0.0 }
    });
    let kinv = kmat.try_inverse().unwrap();
    let kq = DVector::from_fn(n, |i, _| kern.eval_k(x_star, horizon, &pts[i].x, pts[i].t).unwrap());
    let y_next = simulate_observation(model, x_next, t_next, z).unwrap();
    let mut y: Vec<f64> = model.dataset().values().to_vec();
    y.push(y_next);
    let y = DVector::from_vec(y);
    let w = &kinv * &y;
    let kq_kinv = kinv.tr_mul(&kq);

    let h = 1e-6;
    (0..d)
        .map(|j| {
            let mut dk = DMatrix::zeros(n, n);
            for i in 0..n - 1 {
                let g = kern.grad_k_wrt_x(x_next, t_next, &pts[i].x, pts[i].t).unwrap();
                dk[(n - 1, i)] = g[j];
                dk[(i, n - 1)] = g[j];
            }
            let mut dkq = DVector::zeros(n);
            dkq[n - 1] = kern.grad_k_wrt_x(x_next, t_next, x_star, horizon).unwrap()[j];
            let mut v = dkq.dot(&w) - kq_kinv.dot(&(&dk * &w));
            if full {
                // d y_next / d x_next under the reparameterization, by central differences
                let mut xp = x_next.to_vec();
                let mut xm = x_next.to_vec();
                xp[j] += h;
                xm[j] -= h;
                let dy = (simulate_observation(model, &xp, t_next, z).unwrap()
                    - simulate_observation(model, &xm, t_next, z).unwrap())
                    / (2.0 * h);
                v += kq_kinv[n - 1] * dy;
            }
            v
        })
        .collect()
}

#[test]
fn per_draw_gradients_match_dense_derivative() {
    for seed in 0..6 {
        for model in [quad_state(seed, 18), state_2d(seed)] {
            let d = model.dim();
            let dom = unit(d);
            for (mode, full) in [(GradientMode::PaperFixedY, false), (GradientMode::FullReparameterized, true)] {
                let c = LookaheadConfig {
                    gradient_mode: mode,
                    ..cfg(4, seed)
                };
                let ctx = LookaheadContext::new(&model, 2.0, &c, &dom).unwrap();
                let x_next = dom.sample_uniform(&mut ChaCha8Rng::seed_from_u64(seed + 50));
                for s in ctx.samples(&x_next).unwrap() {
                    let dense = dense_gradient(&model, &x_next, 2.0, c.horizon, &s.x_star, s.z, full);
                    for j in 0..d {
                        let tol = 1e-6 * dense[j].abs().max(1e-3);
                        assert!((s.grad[j] - dense[j]).abs() < tol, "{mode:?} {} vs {}", s.grad[j], dense[j]);
                    }
                }
            }
        }
    }
}

#[test]
fn estimate_gradient_matches_central_differences() {
    let mut ok = 0;
    let mut total = 0;
    for seed in 0..12 {
        let model = quad_state(seed, 16);
        let dom = unit(1);
        let c = cfg(32, seed);
        let ctx = LookaheadContext::new(&model, 2.2, &c, &dom).unwrap();
        let x = vec![0.1 + 0.8 * ChaCha8Rng::seed_from_u64(seed).random::<f64>()];
        let e = ctx.estimate(&x).unwrap();
        let h = 1e-5;
        let vp = ctx.estimate(&[x[0] + h]).unwrap().value;
        let vm = ctx.estimate(&[x[0] - h]).unwrap().value;
        let fd = (vp - vm) / (2.0 * h);
        total += 1;
        if (e.grad[0] - fd).abs() <= 1e-3 * fd.abs().max(1e-4) {
            ok += 1;
        }
    }
    assert!(ok as f64 >= 0.9 * total as f64, "{ok}/{total}");
}

#[test]
fn zero_draw_reproduces_unaugmented_maximum() {
    for seed in 0..10 {
        let model = if seed % 2 == 0 { quad_state(seed, 15) } else { state_2d(seed) };
        let dom = unit(model.dim());
        let c = cfg(1, seed);
        let ctx = LookaheadContext::with_draws(&model, 2.0, &c, &dom, vec![0.0]).unwrap();
        let base = inner_max_posterior_mean(&model, c.horizon, &dom, &c).unwrap().value;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..5 {
            let e = ctx.estimate(&dom.sample_uniform(&mut rng)).unwrap();
            assert!((e.value - base).abs() < 1e-6);
            assert!(e.grad.iter().all(|g| g.abs() < 1e-4));
        }
    }
}

#[test]
fn estimates_are_bit_deterministic() {
    let model = state_2d(3);
    let dom = unit(2);
    let c = cfg(64, 11);
    let a = r2ley_estimate(&[0.3, 0.6], &model, 1.5, &c, &dom).unwrap();
    let b = r2ley_estimate(&[0.3, 0.6], &model, 1.5, &c, &dom).unwrap();
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn estimates_are_consistent_across_sample_sizes() {
    let model = quad_state(7, 20);
    let dom = unit(1);
    let small = LookaheadContext::new(&model, 2.4, &cfg(2_000, 1), &dom).unwrap().estimate(&[0.4]).unwrap();
    let large = LookaheadContext::new(&model, 2.4, &cfg(20_000, 2), &dom).unwrap().estimate(&[0.4]).unwrap();
    let se = (small.stderr.powi(2) + large.stderr.powi(2)).sqrt();
    assert!((small.value - large.value).abs() < 3.0 * se, "{} vs {} (se {se})", small.value, large.value);
}

#[test]
fn information_never_hurts_expected_maximum() {
    for seed in 0..4 {
        let model = quad_state(seed, 15);
        let dom = unit(1);
        let ctx = LookaheadContext::new(&model, 2.3, &cfg(200, seed), &dom).unwrap();
        let base = ctx.base_maximum().value;
        for i in 0..=10 {
            let e = ctx.estimate(&[i as f64 / 10.0]).unwrap();
            assert!(e.value >= base - 3.0 * e.stderr - 1e-9);
        }
    }
}

fn dense_quad_model(horizon: f64) -> PosteriorModel {
    let mut pts = Vec::new();
    let mut ys = Vec::new();
    for i in 0..=10 {
        for j in 0..=20 {
            let x = i as f64 / 10.0;
            let t = horizon * j as f64 / 20.0;
            pts.push(Point::new(vec![x], t));
            ys.push(quad_d(x, t));
        }
    }
    let hp = Hyperparams::new(KernelParams::squared_exponential(1, 0.5, 2.0, 1.0).unwrap(), 1e-8).unwrap();
    build_model(Dataset::new(pts, ys).unwrap(), hp).unwrap()
}

#[test]
fn final_decision_on_dense_quadratic() {
    let model = dense_quad_model(4.0);
    let dom = unit(1);
    let c = cfg(1, 0);
    let x = final_decision(&model, 4.0, &dom, &c).unwrap();
    let grid = (0..=20_000)
        .map(|i| i as f64 / 2e4)
        .max_by(|a, b| quad_d(*a, 4.0).total_cmp(&quad_d(*b, 4.0)))
        .unwrap();
    assert!((grid - (0.5 + 4f64.sin() / 4.0)).abs() < 1e-4);
    assert!((x[0] - grid).abs() < 0.02, "{} vs {grid}", x[0]);
    let best = model.mean_at(&x, 4.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        assert!(best >= model.mean_at(&[rng.random::<f64>()], 4.0) - 1e-12);
    }
}

#[test]
fn near_prior_model_has_flat_payoff() {
    let ds = Dataset::new(vec![Point::new(vec![0.5], -200.0)], vec![1.0]).unwrap();
    let hp = Hyperparams::new(KernelParams::squared_exponential(1, 0.3, 1.0, 1.0).unwrap(), 0.01).unwrap();
    let model = build_model(ds, hp).unwrap();
    let dom = unit(1);
    let c = cfg(8, 0);
    let r = inner_max_posterior_mean(&model, 4.0, &dom, &c).unwrap();
    assert!(r.value.abs() < 1e-6);
    assert!(dom.contains(&r.x_star));
    assert!(model.mean_at(&final_decision(&model, 4.0, &dom, &c).unwrap(), 4.0).abs() < 1e-6);
}

#[test]
fn proposal_dominates_random_points() {
    let model = quad_state(4, 20);
    let dom = unit(1);
    let c = cfg(64, 9);
    let x = propose_r2ley(&model, 2.4, &c, &dom, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert!(dom.contains(&x));
    let ctx = LookaheadContext::new(&model, 2.4, &c, &dom).unwrap();
    let best = ctx.estimate(&x).unwrap().value;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        assert!(best >= ctx.estimate(&dom.sample_uniform(&mut rng)).unwrap().value - 1e-9);
    }
}

#[test]
fn proposals_vary_but_values_agree() {
    let model = quad_state(5, 20);
    let dom = unit(1);
    let reference = LookaheadContext::new(&model, 2.4, &cfg(4_000, 1_000), &dom).unwrap();
    let mut values = Vec::new();
    for seed in 0..5 {
        let c = cfg(200, seed);
        let x = propose_r2ley(&model, 2.4, &c, &dom, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        values.push(reference.estimate(&x).unwrap());
    }
    let top = values.iter().map(|e| e.value).fold(f64::MIN, f64::max);
    for e in &values {
        // each proposal's payoff under an independent large sample is near the best
        let se = 3.0 * (2.0f64).sqrt() * e.stderr;
        assert!(top - e.value < se + 1e-3, "{} vs {top}", e.value);
    }
}

#[test]
fn invalid_configurations_are_rejected() {
    let model = quad_state(0, 10);
    let dom = unit(1);
    assert!(LookaheadContext::new(&model, 1.0, &cfg(0, 0), &dom).is_err());
    assert!(LookaheadContext::new(&model, 5.0, &cfg(10, 0), &dom).is_err());
    assert!(LookaheadContext::new(&model, 1.0, &cfg(10, 0), &unit(2)).is_err());
    assert!(LookaheadContext::with_draws(&model, 1.0, &cfg(1, 0), &dom, vec![]).is_err());
    let ctx = LookaheadContext::new(&model, 1.0, &cfg(4, 0), &dom).unwrap();
    assert!(ctx.estimate(&[0.1, 0.2]).is_err());
}
