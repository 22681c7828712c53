//! Oracle checks that return what they measured, so both the focused
//! tests and the acceptance report can use them.

use infossm::diffmath::{finite_difference, linalg, max_rel_error, Mat, ParamSet, Tape, Var};
use infossm::filtering::{log_likelihoods, pf_step, reweight, ParticleSet, Resampler};
use infossm::gp::{self, affine_mean, AffineMean, ModeCache, ModeInit, ModeVars, SparseGPMode};
use infossm::inference::{InferenceNets, NetConfig};
use infossm::objective::*;
use infossm::simulators::{simulate_dubins, DubinsConfig};
use infossm::ssm::{standard_normal, MultiModalSSM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{batch_1d, Linear1d};

pub const SYS: Linear1d = Linear1d { h: -0.4, b: 0.2, q: 2.0, r: 0.3, dt: 0.5 };
pub const T: usize = 10;
pub const FD_STEP: f64 = 1e-5;

pub fn toy_nets(l: usize, seed: u64) -> InferenceNets {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    InferenceNets::new(NetConfig::default(), vec![0], 1, T, l, vec![1.0], vec![1.0], &mut rng).unwrap()
}

pub fn world_prior(m0: f64, p0: f64) -> Priors {
    Priors { x1_mean: vec![m0], x1_var: vec![p0], shifted: false, num_modes: 1 }
}

/// Encoder that outputs exactly `N(m, v)` for a trajectory starting at `y1`.
pub fn pin_encoder(nets: &mut InferenceNets, y1: f64, m: f64, v: f64) {
    let vals = nets.params.values_mut();
    vals[4].fill(0.0);
    vals[5][(0, 0)] = m - y1;
    vals[6].fill(0.0);
    vals[7][(0, 0)] = v.ln();
}

pub fn dubins_setup(
    l: usize,
) -> (infossm::data::TrajectoryBatch, MultiModalSSM, InferenceNets, Priors, TrainingConfig) {
    let dcfg = DubinsConfig { t: 8, ..DubinsConfig::default() };
    let batch = simulate_dubins(&dcfg, 4, 5).unwrap();
    let cfg = TrainingConfig { modes: l, window: 8, num_inducing: 6, mi_samples: 6, k: 3, ..TrainingConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (model, nets, priors) = initialize(&batch, &cfg, &mut rng).unwrap();
    (batch, model, nets, priors, cfg)
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Shared-draw comparisons of the single-sample MCO and the ELBO on the
/// toy model and a three-mode Dubins setup. Returns how many differ in
/// any bit, out of how many.
pub fn elbo_bit_mismatches() -> (usize, usize) {
    let mut cases = Vec::new();
    let batch = batch_1d(&SYS.simulate(5, T, 0.0, 1.0, 1), SYS.dt);
    let (model, nets, pri) = (SYS.model(), toy_nets(1, 2), world_prior(0.0, 1.0));
    for seed in 0..5 {
        let a = mco(&batch, &model, &nets, &pri, 1, 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = elbo(&batch, &model, &nets, &pri, 1, 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        cases.push(a.total.to_bits() == b.total.to_bits());
    }
    let (batch, model, nets, pri, _) = dubins_setup(3);
    for seed in 0..3 {
        let a = mco(&batch, &model, &nets, &pri, 1, 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = elbo(&batch, &model, &nets, &pri, 1, 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        cases.push(a.total.to_bits() == b.total.to_bits());
    }
    (cases.iter().filter(|ok| !**ok).count(), cases.len())
}

/// Paired z statistics (mean difference over its standard error) of the
/// MCO between consecutive K in {1, 2, 4, 8} over `seeds` seeds.
pub fn mco_k_z_scores(seeds: u64) -> Vec<f64> {
    let batch = batch_1d(&SYS.simulate(4, T, 0.0, 1.0, 6), SYS.dt);
    let (model, nets, pri) = (SYS.model(), toy_nets(1, 7), world_prior(0.0, 1.0));
    let ks = [1usize, 2, 4, 8];
    let vals: Vec<Vec<f64>> = (0..seeds)
        .map(|s| {
            ks.iter()
                .map(|k| {
                    let mut rng = ChaCha8Rng::seed_from_u64(s * 31 + *k as u64);
                    mco(&batch, &model, &nets, &pri, *k, 0.5, &mut rng).unwrap().total
                })
                .collect()
        })
        .collect();
    (0..ks.len() - 1)
        .map(|i| {
            let d: Vec<f64> = vals.iter().map(|v| v[i + 1] - v[i]).collect();
            let (m, se) = mean_se(&d);
            m / se
        })
        .collect()
}

pub struct KalmanBound {
    /// Largest `(mean MCO − exact) / se` over sequences and K.
    pub worst_z: f64,
    /// `exact − mean MCO` at K = 1 and K = 64, per sequence.
    pub gaps: Vec<[f64; 2]>,
}

/// MCO on the linear-Gaussian toy, with the encoder pinned to the exact
/// smoothed posterior, against the Kalman log-marginal. The GP KL is
/// added back because the toy's degenerate GP has no counterpart in the
/// exact model.
pub fn mco_vs_kalman() -> KalmanBound {
    let (m0, p0) = (0.5, 2.0);
    let seqs = SYS.simulate(3, T, m0, p0, 4);
    let (model, pri) = (SYS.model(), world_prior(m0, p0));
    let mut worst_z = f64::NEG_INFINITY;
    let mut gaps = Vec::new();
    for ys in &seqs {
        let batch = batch_1d(std::slice::from_ref(ys), SYS.dt);
        let exact = SYS.log_marginal(ys, m0, p0);
        let (ms, ps) = SYS.smoothed_first(ys, m0, p0);
        let mut nets = toy_nets(1, 5);
        pin_encoder(&mut nets, ys[0], ms, ps);
        let mut g = [0.0; 2];
        for (slot, k) in [1usize, 64].into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
            let vals: Vec<f64> = (0..200)
                .map(|_| {
                    let rep = mco(&batch, &model, &nets, &pri, k, 0.5, &mut rng).unwrap();
                    rep.total + rep.kl
                })
                .collect();
            let (mean, se) = mean_se(&vals);
            worst_z = worst_z.max((mean - exact) / se);
            g[slot] = exact - mean;
        }
        gaps.push(g);
    }
    KalmanBound { worst_z, gaps }
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// A mode with every array drawn at random.
pub fn random_mode(rng: &mut ChaCha8Rng, m: usize, p: usize, q: usize) -> SparseGPMode {
    let z = uniform(rng, m, p).map(|v| 2.0 * v);
    let mut mode = SparseGPMode::new(z, q, &ModeInit::default()).unwrap();
    mode.a = uniform(rng, m, q);
    let mut s = uniform(rng, m, m).map(|v| 0.3 * v);
    for i in 0..m {
        s[(i, i)] = 0.2 + s[(i, i)].abs();
    }
    mode.s_chol = linalg::tril(&s, false);
    mode.log_sigma = (0..q).map(|_| rng.random_range(-0.5..0.5)).collect();
    mode.log_process_noise = (0..q).map(|_| rng.random_range(-2.0..0.0)).collect();
    mode.kernel.log_signal_std = rng.random_range(-0.3..0.3);
    mode.kernel.log_length_scales = (0..p).map(|_| rng.random_range(-0.2..0.5)).collect();
    mode.mean = AffineMean::new(uniform(rng, q, p), (0..q).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    mode
}

/// Largest deviation from `(m(x), k(x, x))` of the predictive moments of
/// random modes whose posterior is set to the prior `A = m(Z)`, `S = K`.
pub fn collapse_to_prior_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (m, p, q) = (rng.random_range(1..7), rng.random_range(1..4), rng.random_range(1..4));
        let mut mode = random_mode(&mut rng, m, p, q);
        let zrows: Vec<Vec<f64>> = (0..m).map(|i| mode.z.row(i).iter().copied().collect()).collect();
        mode.a = Mat::from_fn(m, q, |i, j| affine_mean(&zrows[i], &mode.mean).unwrap()[j]);
        mode.s_chol = linalg::cholesky(&mode.kzz().unwrap()).unwrap();
        for _ in 0..5 {
            let x: Vec<f64> = (0..p).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (mean, var) = mode.predict_moments(&x).unwrap();
            let prior_mean = affine_mean(&x, &mode.mean).unwrap();
            let kxx = gp::se_ard_kernel(&x, &x, &mode.kernel).unwrap();
            worst = worst.max((var - kxx).abs());
            for (a, b) in mean.iter().zip(&prior_mean) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

fn kron(a: &Mat, b: &Mat) -> Mat {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    Mat::from_fn(ar * br, ac * bc, |i, j| a[(i / br, j / bc)] * b[(i % br, j % bc)])
}

fn mvn_kl(mu_q: &Mat, cov_q: &Mat, mu_p: &Mat, cov_p: &Mat) -> f64 {
    let n = cov_q.nrows() as f64;
    let lp = cov_p.clone().cholesky().expect("prior covariance is SPD");
    let lq = cov_q.clone().cholesky().expect("posterior covariance is SPD");
    let logdet = |l: &nalgebra::DMatrix<f64>| 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let tr = lp.solve(cov_q).trace();
    let d = mu_p - mu_q;
    let quad = (d.transpose() * lp.solve(&d))[(0, 0)];
    0.5 * (tr + quad - n + logdet(&lp.l()) - logdet(&lq.l()))
}

/// Largest relative gap between the closed-form matrix-normal KL and the
/// KL of the equivalent `vec` Gaussians `N(vec A, Σ ⊗ S)` and
/// `N(vec m(Z), Σ ⊗ K)`, built densely.
pub fn kl_vs_vec_gaussian_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (m, p, q) = (rng.random_range(1..7), rng.random_range(1..4), rng.random_range(1..4));
        let mode = random_mode(&mut rng, m, p, q);
        let closed = mode.kl().unwrap();
        let zrows: Vec<Vec<f64>> = (0..m).map(|i| mode.z.row(i).iter().copied().collect()).collect();
        let mz = Mat::from_fn(m, q, |i, j| affine_mean(&zrows[i], &mode.mean).unwrap()[j]);
        let sigma = Mat::from_diagonal(&nalgebra::DVector::from_iterator(q, mode.log_sigma.iter().map(|v| v.exp())));
        // column-stacked vec: entry (i, j) sits at j·M + i
        let vec = |a: &Mat| Mat::from_column_slice(m * q, 1, a.as_slice());
        let s = &mode.s_chol * mode.s_chol.transpose();
        let oracle = mvn_kl(&vec(&mode.a), &kron(&sigma, &s), &vec(&mz), &kron(&sigma, &mode.kzz().unwrap()));
        worst = worst.max((closed - oracle).abs() / oracle.abs().max(1.0));
    }
    worst
}

/// Largest relative error between recorded and finite-difference
/// gradients of `f` with respect to every input.
pub fn grad_error<F>(inputs: &[Mat], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, *v).unwrap();
        let numeric = finite_difference(&inputs[i], FD_STEP, |x| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, m)| t.param(if j == i { x.clone() } else { m.clone() }))
                .collect();
            let o = f(&mut t, &vs);
            t.scalar_value(o)
        });
        worst = worst.max(max_rel_error(&analytic, &numeric, 1e-6));
    }
    worst
}

/// Non-uniformly weighted sum so every entry contributes differently.
pub fn weighted_sum(t: &mut Tape, v: Var) -> Var {
    let (r, c) = t.shape(v);
    let w = t.constant(Mat::from_fn(r, c, |i, j| 0.3 + 0.7 * ((i * 7 + j * 3) % 5) as f64));
    let p = t.mul(v, w);
    t.sum(p)
}

/// Gradient error of `f` with respect to every array of `mode`.
pub fn mode_grad_error<F>(mode: &SparseGPMode, f: F) -> f64
where
    F: Fn(&mut Tape, &ModeVars, &ModeCache) -> Var,
{
    let mut ps = ParamSet::new();
    mode.push_params("m", &mut ps);
    grad_error(ps.values(), |t, v| {
        let mv = ModeVars::from_param_vars(t, v);
        let cache = ModeCache::prepare(t, &mv).unwrap();
        f(t, &mv, &cache)
    })
}

/// Gradient errors for predictive moments, the KL and sampled function
/// values with respect to all hyperparameters.
pub fn gp_gradient_errors() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mode = random_mode(&mut rng, 4, 2, 2);
    let x = uniform(&mut rng, 3, 2);
    let predict = mode_grad_error(&mode, |t, v, c| {
        let xv = t.constant(x.clone());
        let (mean, var) = gp::predict(t, v, c, xv);
        let a = weighted_sum(t, mean);
        let b = weighted_sum(t, var);
        t.add(a, b)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mode = random_mode(&mut rng, 3, 2, 2);
    let kl = mode_grad_error(&mode, |t, v, c| gp::matrix_normal_kl(t, v, c));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mode = random_mode(&mut rng, 3, 1, 2);
    let x = uniform(&mut rng, 4, 1);
    let eps = uniform(&mut rng, 4, 2);
    let sample = mode_grad_error(&mode, |t, v, c| {
        let xv = t.constant(x.clone());
        let ev = t.constant(eps.clone());
        let f = gp::sample_function(t, v, c, xv, ev);
        weighted_sum(t, f)
    });
    vec![("predict_moments", predict), ("matrix_normal_kl", kl), ("sample_function", sample)]
}

/// Relative error of the full training-loss gradient (MCO plus MI term)
/// with respect to entries of one mode's inducing mean.
pub fn loss_gradient_error() -> f64 {
    let (batch, model, nets, priors, cfg) = dubins_setup(2);
    let ys = batch.time_major(cfg.window);
    let loss_at = |m: &MultiModalSSM| {
        info_loss_step(&ys, 1.0, m, &nets, &priors, &cfg, 5.0, 0.5, &mut ChaCha8Rng::seed_from_u64(21)).unwrap()
    };
    let base = loss_at(&model);
    // mode0.a is the second model array
    let g = &base.grads[1];
    let h = FD_STEP;
    [(0, 0), (2, 1), (5, 0), (3, 1)]
        .into_iter()
        .map(|(i, j)| {
            let mut up = model.clone();
            up.modes[0].a[(i, j)] += h;
            let mut dn = model.clone();
            dn.modes[0].a[(i, j)] -= h;
            let fd = (loss_at(&up).loss - loss_at(&dn).loss) / (2.0 * h);
            let an = g[(i, j)];
            (fd - an).abs() / an.abs().max(fd.abs()).max(1e-8)
        })
        .fold(0.0, f64::max)
}

pub fn simulate_1d(sys: &Linear1d, steps: usize, m0: f64, p0: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = standard_normal(&mut rng, steps, 2);
    let mut x = m0 + p0.sqrt() * e[(0, 0)];
    (0..steps)
        .map(|t| {
            if t > 0 {
                x = sys.transition() * x + sys.offset() + sys.process_var().sqrt() * e[(t, 0)];
            }
            x + sys.r.sqrt() * e[(t, 1)]
        })
        .collect()
}

/// Filtered means of one bootstrap-filter run.
pub fn run_filter(sys: &Linear1d, ys: &[f64], k: usize, m0: f64, p0: f64, seed: u64) -> Vec<f64> {
    let model = sys.model();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = standard_normal(&mut rng, k, 1);
    let init = ParticleSet::uniform(Mat::from_fn(k, 1, |i, _| m0 + p0.sqrt() * e[(i, 0)]), vec![0; k]).unwrap();
    let ll = log_likelihoods(&init, &ys[..1], &model).unwrap();
    let mut p = reweight(init, &ll, Resampler::Multinomial, &mut rng).unwrap().particles;
    let mut means = vec![p.mean_state()[0]];
    for y in &ys[1..] {
        let rep = pf_step(p, std::slice::from_ref(y), &model, Resampler::Multinomial, &mut rng).unwrap();
        rep.particles.validate().unwrap();
        p = rep.particles;
        means.push(p.mean_state()[0]);
    }
    means
}

/// Per-step `|PF mean − Kalman mean| / se` for K = 4096 particles over 50
/// steps. The standard error comes from the spread of `runs` independent
/// filters.
pub fn pf_kalman_z(runs: u64) -> Vec<f64> {
    let sys = Linear1d { h: -0.5, b: 0.3, q: 4.0, r: 0.5, dt: 0.5 };
    let (m0, p0) = (0.0, 1.0);
    let ys = simulate_1d(&sys, 50, m0, p0, 12);
    let (kf, _) = sys.kalman(&ys, m0, p0);
    let paths: Vec<Vec<f64>> = (0..runs).map(|s| run_filter(&sys, &ys, 4096, m0, p0, 100 + s)).collect();
    (0..ys.len())
        .map(|t| {
            let at: Vec<f64> = paths.iter().map(|r| r[t]).collect();
            let (mean, se) = mean_se(&at);
            (mean - kf[t]).abs() / se.max(1e-12)
        })
        .collect()
}

/// Randomized reweight/resample steps; counts steps that break the ESS
/// range, weight normalization or particle-set validity.
pub fn pf_invariant_violations(steps: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = 8;
    let mut p = ParticleSet::new(Mat::from_fn(k, 1, |i, _| i as f64), vec![0; k], vec![1.0 / k as f64; k]).unwrap();
    let mut bad = 0;
    for _ in 0..steps {
        let ll: Vec<f64> = (0..k).map(|_| rng.random::<f64>() * 20.0 - 10.0).collect();
        let scheme = if rng.random::<bool>() { Resampler::Multinomial } else { Resampler::Systematic };
        let rep = reweight(p, &ll, scheme, &mut rng).unwrap();
        let sum: f64 = rep.particles.weights.iter().sum();
        let ess = rep.particles.ess().unwrap();
        let ok = rep.particles.validate().is_ok()
            && (1.0 - 1e-12..=k as f64 + 1e-12).contains(&rep.ess)
            && (1.0 - 1e-12..=k as f64 + 1e-12).contains(&ess)
            && (sum - 1.0).abs() < 1e-12
            && rep.particles.weights.iter().all(|w| *w >= 0.0)
            && (!rep.resampled || rep.particles.weights.iter().all(|w| (w - 1.0 / k as f64).abs() < 1e-15));
        bad += usize::from(!ok);
        p = rep.particles;
    }
    bad
}
