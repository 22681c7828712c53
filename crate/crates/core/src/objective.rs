//! Training losses: the K-sample Monte Carlo objective, the classifier-based
//! mutual-information bound, and the Adam training loop.

use std::io::Write;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TrajectoryBatch;
use crate::diffmath::{AdamConfig, AdamState, Mat, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::gp::{self, ModeInit, SparseGPMode};
use crate::inference::{self, GumbelConfig, InferenceNets, NetConfig};
use crate::ssm::{
    categorical_from_uniform, one_hot_rows, standard_normal, CanonicalLayout, ModeTransitionMatrix,
    MultiModalSSM, ObservationModel, SsmVars,
};

const LN_2PI: f64 = 1.8378770664093453;

/// Where the MI term draws its initial states from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiInitialState {
    /// Encoder posteriors of the current batch, detached.
    Posterior,
    /// `p(x_1)` anchored at the origin.
    Prior,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransitionKind {
    Identity,
    Sticky { stay: f64 },
}

impl TransitionKind {
    pub fn build(&self, l: usize) -> Result<ModeTransitionMatrix> {
        match self {
            TransitionKind::Identity => Ok(ModeTransitionMatrix::identity(l)),
            TransitionKind::Sticky { stay } => ModeTransitionMatrix::sticky(l, *stay),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    /// Monte Carlo samples per trajectory.
    pub k: usize,
    pub modes: usize,
    /// MI weight; `None` means N·T.
    pub lambda: Option<f64>,
    pub window: usize,
    pub epochs: usize,
    /// Trajectories per step; 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
    pub gumbel: GumbelConfig,
    pub adam: AdamConfig,
    pub mi_samples: usize,
    pub mi_initial_state: MiInitialState,
    pub num_inducing: usize,
    pub order: usize,
    pub net: NetConfig,
    pub transition: TransitionKind,
    pub obs_noise_var: f64,
    pub learn_obs_noise: bool,
    pub x1_position_std: f64,
    pub x1_derivative_std: f64,
    /// Std of the random initial mean-function gain per mode, relative to
    /// `σ_f / λ`; distinct experts from the first step.
    pub mean_init_std: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            k: 4,
            modes: 3,
            lambda: None,
            window: 20,
            epochs: 1000,
            batch_size: 0,
            seed: 0,
            gumbel: GumbelConfig::default(),
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            mi_samples: 60,
            mi_initial_state: MiInitialState::Posterior,
            num_inducing: 20,
            order: 2,
            net: NetConfig::default(),
            transition: TransitionKind::Identity,
            obs_noise_var: 0.1,
            learn_obs_noise: false,
            x1_position_std: 1.0,
            x1_derivative_std: 10.0,
            mean_init_std: 0.5,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(m.into()));
        if self.k == 0 {
            return bad("K must be at least 1");
        }
        if self.modes == 0 {
            return bad("need at least one mode");
        }
        if self.lambda.is_some_and(|l| !(l >= 0.0)) {
            return bad("λ must be non-negative");
        }
        if self.window < 2 {
            return bad("T must be at least 2");
        }
        if self.num_inducing == 0 {
            return bad("need at least one inducing point");
        }
        if !(self.obs_noise_var > 0.0 && self.x1_position_std > 0.0 && self.x1_derivative_std > 0.0)
        {
            return bad("noise and prior scales must be positive");
        }
        self.gumbel.validate()?;
        self.adam.validate()?;
        CanonicalLayout::new(self.order, 1)?;
        Ok(())
    }

    pub fn resolved_lambda(&self, n: usize) -> f64 {
        self.lambda.unwrap_or((n * self.window) as f64)
    }
}

/// `p(x_1)` (diagonal Gaussian, optionally relative to the first
/// observation) and the uniform `p(c_1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Priors {
    pub x1_mean: Vec<f64>,
    pub x1_var: Vec<f64>,
    /// Interpret `x1_mean` relative to the lifted first observation.
    pub shifted: bool,
    pub num_modes: usize,
}

impl Priors {
    pub fn new(layout: &CanonicalLayout, position_std: f64, derivative_std: f64, l: usize) -> Self {
        let d = layout.spatial_dim;
        Self {
            x1_mean: vec![0.0; layout.state_dim()],
            x1_var: (0..layout.state_dim())
                .map(|i| if i < d { position_std } else { derivative_std }.powi(2))
                .collect(),
            shifted: true,
            num_modes: l,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.x1_mean.len() != self.x1_var.len() || self.x1_var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Validation("prior variances must be positive".into()));
        }
        Ok(())
    }
}

/// Standard-normal and uniform variates consumed by one objective
/// evaluation over N trajectories and K samples (B = N·K rows, ordered
/// `n·K + k`).
#[derive(Clone, Debug, PartialEq)]
pub struct McoDraws {
    pub k: usize,
    pub x1: Mat,
    pub code: Mat,
    /// Uniforms for ancestral code steps under a non-identity P, B×(T−2).
    pub code_steps: Mat,
    pub transition: Vec<Mat>,
    pub angles: Vec<f64>,
}

impl McoDraws {
    pub fn sample<R: Rng>(rng: &mut R, n: usize, k: usize, model: &MultiModalSSM, t: usize) -> Self {
        let b = n * k;
        let s = model.state_dim();
        let l = model.num_modes();
        let q = model.layout.gp_output_dim();
        Self {
            k,
            x1: standard_normal(rng, b, s),
            code: inference::uniform_matrix(rng, b, l),
            code_steps: inference::uniform_matrix(rng, b, t.saturating_sub(2)),
            transition: (1..t).map(|_| standard_normal(rng, b, q)).collect(),
            angles: (0..n).map(|_| rng.random::<f64>() * std::f64::consts::TAU).collect(),
        }
    }
}

/// Encoder and classifier outputs per trajectory (N rows).
#[derive(Clone, Copy, Debug)]
pub struct Posterior {
    pub mu: Var,
    pub log_var: Var,
    pub log_q_code: Var,
}

/// Record both networks over time-major observations.
pub fn posterior(
    tape: &mut Tape,
    nets: &InferenceNets,
    net_w: &[Var],
    ys: &[Mat],
    angles: &[f64],
) -> Posterior {
    let yv: Vec<Var> = ys.iter().map(|y| tape.constant(y.clone())).collect();
    let (mu, log_var) = nets.encode(tape, net_w, &yv);
    let log_q_code = nets.classify(tape, net_w, &yv, angles);
    Posterior {
        mu,
        log_var,
        log_q_code,
    }
}

fn repeat_rows(m: &Mat, k: usize) -> Mat {
    Mat::from_fn(m.nrows() * k, m.ncols(), |i, j| m[(i / k, j)])
}

/// Per-sample log importance weights, N×K:
/// `Σ_t log p(y_t|x_t) + log p(x_1)/q(x_1) + log p(c_1)/q(c_1)`.
#[allow(clippy::too_many_arguments)]
pub fn log_weights(
    tape: &mut Tape,
    sv: &SsmVars,
    transition: &ModeTransitionMatrix,
    priors: &Priors,
    ys: &[Mat],
    post: &Posterior,
    draws: &McoDraws,
    tau: f64,
    straight_through: bool,
) -> Result<Var> {
    let n = ys[0].nrows();
    let k = draws.k;
    let b = n * k;
    let l = sv.num_modes();
    let s = sv.layout.state_dim();
    if draws.x1.shape() != (b, s) || draws.transition.len() + 1 != ys.len() {
        return Err(Error::ShapeMismatch("draws do not match the batch".into()));
    }
    let idx: Vec<usize> = (0..b).map(|i| i / k).collect();

    let mu = tape.gather_rows(post.mu, &idx);
    let lv = tape.gather_rows(post.log_var, &idx);
    let eps = tape.constant(draws.x1.clone());
    let half = tape.scale(lv, 0.5);
    let sd = tape.exp(half);
    let noise = tape.mul(sd, eps);
    let x1 = tape.add(mu, noise);

    // log q(x_1) at its own reparameterized sample
    let eps2 = tape.constant(draws.x1.map(|e| e * e));
    let t = tape.add(lv, eps2);
    let t = tape.add_const(t, LN_2PI);
    let t = tape.sum_cols(t);
    let log_qx = tape.scale(t, -0.5);

    let mut anchor = Mat::zeros(b, s);
    if priors.shifted {
        for i in 0..b {
            for (j, slot) in sv.obs_indices.iter().enumerate() {
                anchor[(i, *slot)] = ys[0][(i / k, j)];
            }
        }
    }
    for i in 0..b {
        for j in 0..s {
            anchor[(i, j)] += priors.x1_mean[j];
        }
    }
    let anchor = tape.constant(anchor);
    let r = tape.sub(x1, anchor);
    let r2 = tape.square(r);
    let inv = tape.row(&priors.x1_var.iter().map(|v| 1.0 / v).collect::<Vec<_>>());
    let maha = tape.mul_row(r2, inv);
    let maha = tape.sum_cols(maha);
    let logdet: f64 = priors.x1_var.iter().map(|v| LN_2PI + v.ln()).sum();
    let t = tape.add_const(maha, logdet);
    let log_px = tape.scale(t, -0.5);

    let lq = tape.gather_rows(post.log_q_code, &idx);
    let (code, hard) = inference::gumbel_softmax(tape, lq, &draws.code, tau, straight_through);
    let onehot = tape.constant(one_hot_rows(&hard, l));
    let picked = tape.mul(onehot, lq);
    let log_qc = tape.sum_cols(picked);

    let mut codes = vec![code];
    if !transition.is_identity() {
        let mut prev = hard;
        for step in 0..ys.len().saturating_sub(2) {
            let next: Vec<usize> = prev
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let row: Vec<f64> = transition.matrix().row(*c).iter().copied().collect();
                    categorical_from_uniform(&row, draws.code_steps[(i, step)])
                })
                .collect();
            codes.push(tape.constant(one_hot_rows(&next, l)));
            prev = next;
        }
    }

    let y0 = tape.constant(repeat_rows(&ys[0], k));
    let mut ll = sv.obs_log_lik(tape, y0, x1);
    let mut x = x1;
    for (step, e) in draws.transition.iter().enumerate() {
        let c = codes[step.min(codes.len() - 1)];
        let e = tape.constant(e.clone());
        x = sv.step(tape, x, c, e);
        let yt = tape.constant(repeat_rows(&ys[step + 1], k));
        let term = sv.obs_log_lik(tape, yt, x);
        ll = tape.add(ll, term);
    }

    let w = tape.add(ll, log_px);
    let w = tape.sub(w, log_qx);
    let w = tape.sub(w, log_qc);
    let w = tape.add_const(w, -(l as f64).ln());
    Ok(tape.reshape_row_major(w, n, k))
}

/// Per-trajectory `log (1/K) Σ_k w_k` (N×1).
pub fn log_mean_exp(tape: &mut Tape, log_w: Var) -> Var {
    let k = tape.shape(log_w).1;
    let lse = tape.logsumexp_cols(log_w);
    tape.add_const(lse, -(k as f64).ln())
}

/// Per-trajectory `(1/K) Σ_k log w_k` (N×1).
pub fn mean_log(tape: &mut Tape, log_w: Var) -> Var {
    let k = tape.shape(log_w).1;
    let s = tape.sum_cols(log_w);
    tape.scale(s, 1.0 / k as f64)
}

/// `Σ_l KL(q(U_l) ‖ p(U_l))`.
pub fn total_kl(tape: &mut Tape, sv: &SsmVars) -> Var {
    let mut acc: Option<Var> = None;
    for (mv, mc) in &sv.modes {
        let kl = gp::matrix_normal_kl(tape, mv, mc);
        acc = Some(match acc {
            None => kl,
            Some(a) => tape.add(a, kl),
        });
    }
    acc.expect("at least one mode")
}

/// Variates for one MI estimate over `mi_samples` generated trajectories.
#[derive(Clone, Debug, PartialEq)]
pub struct MiDraws {
    pub codes: Vec<usize>,
    /// Uniforms for ancestral code steps under a non-identity P.
    pub code_steps: Mat,
    pub x1_rows: Vec<usize>,
    pub x1: Mat,
    pub transition: Vec<Mat>,
    pub obs: Vec<Mat>,
    pub angles: Vec<f64>,
}

impl MiDraws {
    /// Codes are stratified (`i mod L`) so every mode is represented.
    pub fn sample<R: Rng>(
        rng: &mut R,
        samples: usize,
        n_posteriors: usize,
        model: &MultiModalSSM,
        t: usize,
    ) -> Self {
        let l = model.num_modes();
        Self {
            codes: (0..samples).map(|i| i % l).collect(),
            code_steps: inference::uniform_matrix(rng, samples, t.saturating_sub(2)),
            x1_rows: (0..samples)
                .map(|_| rng.random_range(0..n_posteriors.max(1)))
                .collect(),
            x1: standard_normal(rng, samples, model.state_dim()),
            transition: (1..t)
                .map(|_| standard_normal(rng, samples, model.layout.gp_output_dim()))
                .collect(),
            obs: (0..t)
                .map(|_| standard_normal(rng, samples, model.obs_dim()))
                .collect(),
            angles: (0..samples)
                .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
                .collect(),
        }
    }
}

/// Initial states for the MI rollouts: either detached encoder posteriors
/// (`mu`, `var`, N×S) or the prior anchored at the origin.
pub fn mi_initial_states(draws: &MiDraws, source: Option<(&Mat, &Mat)>, priors: &Priors) -> Mat {
    let s = draws.x1.ncols();
    Mat::from_fn(draws.x1.nrows(), s, |i, j| match source {
        Some((mu, var)) => {
            let r = draws.x1_rows[i];
            mu[(r, j)] + var[(r, j)].sqrt() * draws.x1[(i, j)]
        }
        None => priors.x1_mean[j] + priors.x1_var[j].sqrt() * draws.x1[(i, j)],
    })
}

/// Mean of `log q(c | y)` over trajectories generated by the model from
/// `x1` (constant) under the drawn codes.
pub fn mi_term(
    tape: &mut Tape,
    sv: &SsmVars,
    transition: &ModeTransitionMatrix,
    nets: &InferenceNets,
    net_w: &[Var],
    x1: &Mat,
    draws: &MiDraws,
) -> Var {
    let l = sv.num_modes();
    let b = draws.codes.len();
    let c1 = one_hot_rows(&draws.codes, l);
    let mut codes = vec![tape.constant(c1.clone())];
    if !transition.is_identity() {
        let mut prev = draws.codes.clone();
        for step in 0..draws.transition.len().saturating_sub(1) {
            let next: Vec<usize> = prev
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let row: Vec<f64> = transition.matrix().row(*c).iter().copied().collect();
                    categorical_from_uniform(&row, draws.code_steps[(i, step)])
                })
                .collect();
            codes.push(tape.constant(one_hot_rows(&next, l)));
            prev = next;
        }
    }
    let mut x = tape.constant(x1.clone());
    let e = tape.constant(draws.obs[0].clone());
    let mut ys = vec![sv.observe_noisy(tape, x, e)];
    for (step, eps) in draws.transition.iter().enumerate() {
        let c = codes[step.min(codes.len() - 1)];
        let eps = tape.constant(eps.clone());
        x = sv.step(tape, x, c, eps);
        let e = tape.constant(draws.obs[step + 1].clone());
        ys.push(sv.observe_noisy(tape, x, e));
    }
    let lq = nets.classify(tape, net_w, &ys, &draws.angles);
    mi_from_log_probs(tape, lq, &c1, b)
}

/// `(1/B) Σ_i log q(c_i | y_i)` given classifier log-probabilities.
pub fn mi_from_log_probs(tape: &mut Tape, log_q: Var, onehot: &Mat, b: usize) -> Var {
    let oh = tape.constant(onehot.clone());
    let picked = tape.mul(oh, log_q);
    let s = tape.sum(picked);
    tape.scale(s, 1.0 / b as f64)
}

/// Objective values from one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct McoReport {
    /// `ℒ^K` summed over the batch, KL included.
    pub total: f64,
    /// `total / N`.
    pub per_trajectory: f64,
    /// Per-trajectory log-mean-exp terms before the KL.
    pub terms: Vec<f64>,
    pub kl: f64,
}

fn check_finite(tape: &Tape, per_traj: Var, total: Var) -> Result<()> {
    if let Some(i) = tape.value(per_traj).iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteObjective {
            trajectory: Some(i),
            detail: format!("log-weight term is {}", tape.value(per_traj)[i]),
        });
    }
    let v = tape.scalar_value(total);
    if !v.is_finite() {
        return Err(Error::NonFiniteObjective {
            trajectory: None,
            detail: format!("objective is {v}"),
        });
    }
    Ok(())
}

fn window_batch(batch: &TrajectoryBatch, t: usize) -> Result<Vec<Mat>> {
    if batch.min_len() < t {
        return Err(Error::Validation(format!(
            "trajectories shorter than the window T = {t}"
        )));
    }
    Ok(batch.time_major(t))
}

/// Evaluate `ℒ^K` (or, with `elbo`, the mean of log-weights) with the
/// networks' posteriors.
#[allow(clippy::too_many_arguments)]
fn evaluate<R: Rng>(
    batch: &TrajectoryBatch,
    model: &MultiModalSSM,
    nets: &InferenceNets,
    priors: &Priors,
    k: usize,
    tau: f64,
    rng: &mut R,
    elbo: bool,
) -> Result<McoReport> {
    let t = nets.window;
    let ys = window_batch(batch, t)?;
    let draws = McoDraws::sample(rng, batch.len(), k, model, t);
    let mut tape = Tape::new();
    let sv = model.record_constant(&mut tape)?;
    let w = nets.params.register_constant(&mut tape);
    let post = posterior(&mut tape, nets, &w, &ys, &draws.angles);
    let lw = log_weights(&mut tape, &sv, &model.transition, priors, &ys, &post, &draws, tau, true)?;
    let per = if elbo {
        mean_log(&mut tape, lw)
    } else {
        log_mean_exp(&mut tape, lw)
    };
    let data = tape.sum(per);
    let kl = total_kl(&mut tape, &sv);
    let total = tape.sub(data, kl);
    check_finite(&tape, per, total)?;
    let total_v = tape.scalar_value(total);
    Ok(McoReport {
        total: total_v,
        per_trajectory: total_v / batch.len() as f64,
        terms: tape.value(per).iter().copied().collect(),
        kl: tape.scalar_value(kl),
    })
}

pub fn mco<R: Rng>(
    batch: &TrajectoryBatch,
    model: &MultiModalSSM,
    nets: &InferenceNets,
    priors: &Priors,
    k: usize,
    tau: f64,
    rng: &mut R,
) -> Result<McoReport> {
    evaluate(batch, model, nets, priors, k, tau, rng, false)
}

/// Single-level ELBO estimator: mean over K of the log-weights.
pub fn elbo<R: Rng>(
    batch: &TrajectoryBatch,
    model: &MultiModalSSM,
    nets: &InferenceNets,
    priors: &Priors,
    k: usize,
    tau: f64,
    rng: &mut R,
) -> Result<McoReport> {
    evaluate(batch, model, nets, priors, k, tau, rng, true)
}

/// MI estimate over `samples` generated trajectories. `posterior_source`
/// supplies encoder means and variances (N×S) for initial states; `None`
/// samples from the prior.
pub fn mi_bound<R: Rng>(
    model: &MultiModalSSM,
    nets: &InferenceNets,
    priors: &Priors,
    samples: usize,
    posterior_source: Option<(&Mat, &Mat)>,
    rng: &mut R,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::Validation("mi_samples must be at least 1".into()));
    }
    let n_post = posterior_source.map(|(m, _)| m.nrows()).unwrap_or(1);
    let draws = MiDraws::sample(rng, samples, n_post, model, nets.window);
    let x1 = mi_initial_states(&draws, posterior_source, priors);
    let mut tape = Tape::new();
    let sv = model.record_constant(&mut tape)?;
    let w = nets.params.register_constant(&mut tape);
    let mi = mi_term(&mut tape, &sv, &model.transition, nets, &w, &x1, &draws);
    let v = tape.scalar_value(mi);
    if !v.is_finite() {
        return Err(Error::NonFiniteObjective {
            trajectory: None,
            detail: format!("MI estimate is {v}"),
        });
    }
    Ok(v)
}

/// Encoder means and variances for every trajectory of a batch.
pub fn encoder_posteriors(batch: &TrajectoryBatch, nets: &InferenceNets) -> Result<(Mat, Mat)> {
    let ys = window_batch(batch, nets.window)?;
    let mut tape = Tape::new();
    let w = nets.params.register_constant(&mut tape);
    let yv: Vec<Var> = ys.iter().map(|y| tape.constant(y.clone())).collect();
    let (mu, lv) = nets.encode(&mut tape, &w, &yv);
    Ok((tape.value(mu).clone(), tape.value(lv).map(f64::exp)))
}

/// Values and gradients of one training step.
pub struct StepResult {
    pub loss: f64,
    pub mco: f64,
    pub mi: f64,
    pub grads: Vec<Mat>,
}

/// Loss `−(ℒ^K·scale + λ·MI)` and its gradient w.r.t. model then network
/// parameters.
#[allow(clippy::too_many_arguments)]
pub fn info_loss_step<R: Rng>(
    ys: &[Mat],
    data_scale: f64,
    model: &MultiModalSSM,
    nets: &InferenceNets,
    priors: &Priors,
    cfg: &TrainingConfig,
    lambda: f64,
    tau: f64,
    rng: &mut R,
) -> Result<StepResult> {
    let t = ys.len();
    let n = ys[0].nrows();
    let draws = McoDraws::sample(rng, n, cfg.k, model, t);
    let mut tape = Tape::new();
    let mut mp = ParamSet::new();
    model.push_params(&mut mp);
    let mv = mp.register(&mut tape);
    let sv = model.record_params(&mut tape, &mv)?;
    let nw = nets.params.register(&mut tape);
    let post = posterior(&mut tape, nets, &nw, ys, &draws.angles);
    let lw = log_weights(
        &mut tape,
        &sv,
        &model.transition,
        priors,
        ys,
        &post,
        &draws,
        tau,
        cfg.gumbel.straight_through,
    )?;
    let per = log_mean_exp(&mut tape, lw);
    let data = tape.sum(per);
    let data = tape.scale(data, data_scale);
    let kl = total_kl(&mut tape, &sv);
    let mco_v = tape.sub(data, kl);
    check_finite(&tape, per, mco_v)?;

    let mut objective = mco_v;
    let mut mi_value = f64::NAN;
    if lambda > 0.0 && cfg.mi_samples > 0 {
        let mi_draws = MiDraws::sample(rng, cfg.mi_samples, n, model, t);
        let source = match cfg.mi_initial_state {
            MiInitialState::Posterior => {
                let mu = tape.value(post.mu).clone();
                let var = tape.value(post.log_var).map(f64::exp);
                Some((mu, var))
            }
            MiInitialState::Prior => None,
        };
        let x1 = mi_initial_states(
            &mi_draws,
            source.as_ref().map(|(m, v)| (m, v)),
            priors,
        );
        let mi = mi_term(&mut tape, &sv, &model.transition, nets, &nw, &x1, &mi_draws);
        mi_value = tape.scalar_value(mi);
        if !mi_value.is_finite() {
            return Err(Error::NonFiniteObjective {
                trajectory: None,
                detail: format!("MI term is {mi_value}"),
            });
        }
        let weighted = tape.scale(mi, lambda);
        objective = tape.add(objective, weighted);
    }
    let loss = tape.neg(objective);
    let g = tape.backward(loss)?;
    let mut grads = Vec::with_capacity(mv.len() + nw.len());
    for v in mv.iter().chain(&nw) {
        let gv = g.wrt(&tape, *v)?;
        if gv.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteObjective {
                trajectory: None,
                detail: "non-finite gradient".into(),
            });
        }
        grads.push(gv);
    }
    Ok(StepResult {
        loss: tape.scalar_value(loss),
        mco: tape.scalar_value(mco_v),
        mi: mi_value,
        grads,
    })
}

/// Least-squares polynomial fit of each observation dimension over the
/// window, giving per-row estimates of the full canonical state (T×S).
pub fn latent_estimates(y: &Mat, order: usize, dt: f64) -> Result<Mat> {
    let (t, d) = (y.nrows(), y.ncols());
    let degree = order.max(1).min(t - 1);
    let center = (t - 1) as f64 / 2.0;
    let tau: Vec<f64> = (0..t).map(|i| (i as f64 - center) * dt).collect();
    let v = Mat::from_fn(t, degree + 1, |i, j| tau[i].powi(j as i32));
    let coef = v
        .svd(true, true)
        .solve(y, 1e-12)
        .map_err(|e| Error::Validation(format!("latent estimate fit failed: {e}")))?;
    let mut out = Mat::zeros(t, order * d);
    for i in 0..t {
        for j in 0..d {
            out[(i, j)] = y[(i, j)];
        }
        for k in 1..order {
            for j in 0..d {
                // k-th derivative of Σ_p c_p τ^p
                let mut acc = 0.0;
                for p in k..=degree {
                    let falling: f64 = (0..k).map(|m| (p - m) as f64).product();
                    acc += coef[(p, j)] * falling * tau[i].powi((p - k) as i32);
                }
                out[(i, k * d + j)] = acc;
            }
        }
    }
    Ok(out)
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v * v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

fn positive_or(v: f64, fallback: f64) -> f64 {
    if v > 1e-9 && v.is_finite() {
        v
    } else {
        fallback
    }
}

/// Data-driven initial model, networks and priors.
pub fn initialize<R: Rng>(
    data: &TrajectoryBatch,
    cfg: &TrainingConfig,
    rng: &mut R,
) -> Result<(MultiModalSSM, InferenceNets, Priors)> {
    cfg.validate()?;
    data.validate()?;
    let t = cfg.window;
    if data.min_len() < t {
        return Err(Error::Validation(format!(
            "trajectories of length {} are shorter than T = {t}",
            data.min_len()
        )));
    }
    let d = data.obs_dim();
    let layout = CanonicalLayout::new(cfg.order, d)?;
    let s = layout.state_dim();
    let est: Vec<Mat> = data
        .trajectories
        .iter()
        .map(|y| latent_estimates(&y.rows(0, t).into_owned(), cfg.order, data.dt))
        .collect::<Result<_>>()?;

    let input_scale: Vec<f64> = (0..d)
        .map(|j| {
            let r = rms(data
                .trajectories
                .iter()
                .flat_map(|y| (0..t).map(move |i| y[(i, j)] - y[(0, j)])));
            positive_or(r, 1.0)
        })
        .collect();
    let state_scale: Vec<f64> = (0..s)
        .map(|c| {
            if c < d {
                input_scale[c]
            } else {
                positive_or(rms(est.iter().flat_map(|e| e.column(c).iter().copied().collect::<Vec<_>>())), 1.0)
            }
        })
        .collect();

    let pool: Vec<Vec<f64>> = est
        .iter()
        .flat_map(|e| {
            (0..e.nrows())
                .map(|i| {
                    layout
                        .gp_input_indices
                        .iter()
                        .map(|c| {
                            // positions enter relative to the trajectory start
                            if *c < d {
                                e[(i, *c)] - e[(0, *c)]
                            } else {
                                e[(i, *c)]
                            }
                        })
                        .collect::<Vec<f64>>()
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let p = layout.gp_input_dim();
    let input_rms: Vec<f64> = (0..p)
        .map(|j| positive_or(rms(pool.iter().map(|r| r[j])), 1.0))
        .collect();
    let top = &layout.gp_input_indices[p - d..];
    let top_rms = rms(top.iter().map(|c| state_scale[*c]));
    let signal_std = positive_or(top_rms / ((t - 1) as f64 * data.dt), 1.0);

    let m = cfg.num_inducing;
    let mut modes = Vec::with_capacity(cfg.modes);
    for _ in 0..cfg.modes {
        let rows: Vec<usize> = if pool.len() >= m {
            sample_indices(rng, pool.len(), m).into_vec()
        } else {
            (0..m).map(|_| rng.random_range(0..pool.len())).collect()
        };
        let z = Mat::from_fn(m, p, |i, j| {
            let noise = Normal::new(0.0, 0.1 * input_rms[j]).unwrap();
            pool[rows[i]][j] + noise.sample(rng)
        });
        let init = ModeInit {
            signal_std,
            length_scale: 1.0,
            sigma: 1.0,
            process_noise: (0.1 * signal_std).powi(2),
            s_scale: 0.1 * signal_std,
        };
        let mut mode = SparseGPMode::new(z, d, &init)?;
        mode.kernel.log_length_scales = input_rms.iter().map(|v| v.ln()).collect();
        if cfg.mean_init_std > 0.0 {
            let gain = Normal::new(0.0, cfg.mean_init_std).unwrap();
            mode.mean.h = Mat::from_fn(d, p, |_, j| signal_std / input_rms[j] * gain.sample(rng));
            mode.a = Mat::from_fn(m, d, |i, q| {
                (0..p).map(|j| mode.mean.h[(q, j)] * mode.z[(i, j)]).sum::<f64>()
            });
        }
        modes.push(mode);
    }
    let obs = ObservationModel::new(
        (0..d).collect(),
        &vec![cfg.obs_noise_var; d],
        cfg.learn_obs_noise,
    )?;
    let model = MultiModalSSM {
        modes,
        transition: cfg.transition.build(cfg.modes)?,
        obs,
        layout: layout.clone(),
        dt: data.dt,
    };
    model.validate()?;
    let nets = InferenceNets::new(
        cfg.net,
        (0..d).collect(),
        s,
        t,
        cfg.modes,
        input_scale,
        state_scale,
        rng,
    )?;
    let priors = Priors::new(&layout, cfg.x1_position_std, cfg.x1_derivative_std, cfg.modes);
    Ok((model, nets, priors))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Training-batch `ℒ^K` scaled to the full dataset.
    pub mco: f64,
    pub mi: f64,
    pub wallclock_s: f64,
}

pub struct TrainOutcome {
    pub model: MultiModalSSM,
    pub nets: InferenceNets,
    pub priors: Priors,
    pub metrics: Vec<EpochMetrics>,
    /// Set when training stopped early; `model` and `nets` then hold the
    /// last parameters with a finite objective.
    pub failure: Option<Error>,
}

/// Header of the metrics log.
pub const METRICS_HEADER: &str = "epoch,mco,mi,wallclock_s";

/// Train from the data-driven initialization.
pub fn train(
    data: &TrajectoryBatch,
    cfg: &TrainingConfig,
    metrics_log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (model, nets, priors) = initialize(data, cfg, &mut rng)?;
    train_from(data, cfg, model, nets, priors, &mut rng, metrics_log)
}

/// Train starting from given parameters.
pub fn train_from<R: Rng>(
    data: &TrajectoryBatch,
    cfg: &TrainingConfig,
    mut model: MultiModalSSM,
    mut nets: InferenceNets,
    priors: Priors,
    rng: &mut R,
    mut metrics_log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    priors.validate()?;
    let n = data.len();
    let t = cfg.window;
    if data.min_len() < t {
        return Err(Error::Validation("trajectories shorter than the window".into()));
    }
    let lambda = cfg.resolved_lambda(n);
    let batch = if cfg.batch_size == 0 { n } else { cfg.batch_size.min(n) };
    let data_scale = n as f64 / batch as f64;
    let n_model = model.param_count();

    let mut mp = ParamSet::new();
    model.push_params(&mut mp);
    let mut params: Vec<Mat> = mp.values().to_vec();
    params.extend(nets.params.values().iter().cloned());
    let mut adam = AdamState::new(cfg.adam, &params)?;

    if let Some(w) = metrics_log.as_deref_mut() {
        writeln!(w, "{METRICS_HEADER}")?;
    }
    let start = Instant::now();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut failure = None;
    'epochs: for epoch in 0..cfg.epochs {
        let tau = cfg.gumbel.temperature(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        if batch < n {
            for i in (1..n).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
        }
        let (mut mco_sum, mut mi_sum, mut steps) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(batch) {
            let ys: Vec<Mat> = (0..t)
                .map(|ti| {
                    Mat::from_fn(chunk.len(), data.obs_dim(), |r, j| {
                        data.trajectories[chunk[r]][(ti, j)]
                    })
                })
                .collect();
            let step = match info_loss_step(
                &ys, data_scale, &model, &nets, &priors, cfg, lambda, tau, rng,
            ) {
                Ok(s) => s,
                Err(e @ Error::NonFiniteObjective { .. }) | Err(e @ Error::NotPositiveDefinite { .. }) => {
                    log::warn!("epoch {epoch}: {e}; keeping the last good parameters");
                    failure = Some(e);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            adam.step(&mut params, &step.grads)?;
            let (mvals, nvals) = params.split_at(n_model);
            let mut candidate = model.clone();
            candidate.load_params(mvals)?;
            if candidate.validate().is_err() || !nvals.iter().all(|m| m.iter().all(|v| v.is_finite())) {
                failure = Some(Error::NonFiniteObjective {
                    trajectory: None,
                    detail: format!("parameters left the valid region at epoch {epoch}"),
                });
                break 'epochs;
            }
            model = candidate;
            nets.params.values_mut().clone_from_slice(nvals);
            mco_sum += step.mco;
            mi_sum += step.mi;
            steps += 1;
        }
        let row = EpochMetrics {
            epoch,
            mco: mco_sum / steps as f64,
            mi: mi_sum / steps as f64,
            wallclock_s: start.elapsed().as_secs_f64(),
        };
        if let Some(w) = metrics_log.as_deref_mut() {
            writeln!(w, "{},{},{},{:.3}", row.epoch, row.mco, row.mi, row.wallclock_s)?;
        }
        log::debug!("epoch {epoch}: mco {:.3} mi {:.4}", row.mco, row.mi);
        metrics.push(row);
    }
    Ok(TrainOutcome {
        model,
        nets,
        priors,
        metrics,
        failure,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn log_mean_exp_matches_naive_evaluation() {
        let vals = [-3.2, -2.9, -4.1, -3.05];
        let mut tape = Tape::new();
        let v = tape.constant(Mat::from_row_slice(1, 4, &vals));
        let lme = log_mean_exp(&mut tape, v);
        let naive = (vals.iter().map(|x: &f64| x.exp()).sum::<f64>() / 4.0).ln();
        let got = tape.scalar_value(lme);
        assert!(((got - naive) / naive).abs() < 1e-10);
        // large magnitudes still finite
        let v = tape.constant(Mat::from_row_slice(1, 2, &[-2000.0, -2001.0]));
        let lme = log_mean_exp(&mut tape, v);
        let expected = -2000.0 + ((1.0 + (-1.0f64).exp()) / 2.0).ln();
        assert_abs_diff_eq!(tape.scalar_value(lme), expected, epsilon = 1e-10);
    }

    #[test]
    fn single_sample_log_mean_exp_is_identity() {
        let mut tape = Tape::new();
        let v = tape.constant(Mat::from_column_slice(3, 1, &[-1.234567, 5e-300, -7e10]));
        let a = log_mean_exp(&mut tape, v);
        let b = mean_log(&mut tape, v);
        assert_eq!(tape.value(a), tape.value(b));
        assert_eq!(tape.value(a), tape.value(v));
    }

    #[test]
    fn latent_estimates_recover_quadratic_motion() {
        // p(t) = 1 + 2 t + 0.5·3 t², velocity 2 + 3 t, acceleration 3
        let dt = 0.1;
        let y = Mat::from_fn(10, 2, |i, j| {
            let t = i as f64 * dt;
            if j == 0 {
                1.0 + 2.0 * t + 1.5 * t * t
            } else {
                -t
            }
        });
        let e = latent_estimates(&y, 3, dt).unwrap();
        for i in 0..10 {
            let t = i as f64 * dt;
            assert_abs_diff_eq!(e[(i, 2)], 2.0 + 3.0 * t, epsilon = 1e-8);
            assert_abs_diff_eq!(e[(i, 3)], -1.0, epsilon = 1e-8);
            assert_abs_diff_eq!(e[(i, 4)], 3.0, epsilon = 1e-6);
            assert_abs_diff_eq!(e[(i, 5)], 0.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn mi_from_uniform_and_oracle_classifiers() {
        let mut tape = Tape::new();
        let l = 3;
        let uniform = tape.constant(Mat::from_element(4, l, -(3.0f64).ln()));
        let onehot = one_hot_rows(&[0, 1, 2, 0], l);
        let mi = mi_from_log_probs(&mut tape, uniform, &onehot, 4);
        assert_abs_diff_eq!(tape.scalar_value(mi), -1.098612, epsilon = 1e-6);
        let oracle = tape.constant(onehot.map(|v| if v == 1.0 { 0.0 } else { -1e9 }));
        let mi = mi_from_log_probs(&mut tape, oracle, &onehot, 4);
        assert_eq!(tape.scalar_value(mi), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainingConfig::default().validate().is_ok());
        for bad in [
            TrainingConfig { k: 0, ..TrainingConfig::default() },
            TrainingConfig { window: 1, ..TrainingConfig::default() },
            TrainingConfig { lambda: Some(-1.0), ..TrainingConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Validation(_))));
        }
        assert_eq!(TrainingConfig::default().resolved_lambda(50), 1000.0);
    }
}
