//! Held-out metrics: open-loop reconstruction, RMSE, predictive
//! log-likelihood, long-term prediction, and code purity.

use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::data::TrajectoryBatch;
use crate::diffmath::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::inference::{self, InferenceNets};
use crate::objective::{self, MiDraws, Priors};
use crate::simulators::dubins_path;
use crate::ssm::{categorical_from_uniform, one_hot_rows, standard_normal, MultiModalSSM};

const LN_2PI: f64 = 1.8378770664093453;

/// `S` sampled noise-free observation paths for one trajectory plus their
/// pointwise mean and standard deviation (each T×D).
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub samples: Vec<Mat>,
    pub mean: Mat,
    pub std: Mat,
}

impl Reconstruction {
    fn from_samples(samples: Vec<Mat>) -> Self {
        let s = samples.len() as f64;
        let (t, d) = samples[0].shape();
        let mut mean = Mat::zeros(t, d);
        for m in &samples {
            mean += m;
        }
        mean /= s;
        let mut var = Mat::zeros(t, d);
        for m in &samples {
            var += (m - &mean).map(|v| v * v);
        }
        let denom = if samples.len() > 1 { s - 1.0 } else { 1.0 };
        let std = var.map(|v| (v / denom).sqrt());
        Self {
            samples,
            mean,
            std,
        }
    }
}

/// Open-loop reconstruction of every trajectory in `batch` over its first
/// `nets.window` steps: `(x_1, c)` drawn from the networks, transitions
/// sampled, observations noise-free.
pub fn reconstruct<R: Rng>(
    batch: &TrajectoryBatch,
    model: &MultiModalSSM,
    nets: &InferenceNets,
    samples: usize,
    rng: &mut R,
) -> Result<Vec<Reconstruction>> {
    reconstruct_len(batch, model, nets, samples, nets.window, rng)
}

/// As [`reconstruct`] but rolling out `horizon` steps from the inferred
/// `(x_1, c)`.
pub fn reconstruct_len<R: Rng>(
    batch: &TrajectoryBatch,
    model: &MultiModalSSM,
    nets: &InferenceNets,
    samples: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<Vec<Reconstruction>> {
    if samples == 0 || horizon < 1 {
        return Err(Error::Validation("need at least one sample and one step".into()));
    }
    let n = batch.len();
    let t = nets.window;
    if batch.min_len() < t {
        return Err(Error::LengthMismatch(format!(
            "trajectories shorter than the inference window {t}"
        )));
    }
    let ys = batch.time_major(t);
    let l = model.num_modes();
    let b = n * samples;
    let angles: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * std::f64::consts::TAU).collect();
    let x1_eps = standard_normal(rng, b, model.state_dim());
    let code_u: Vec<f64> = (0..b).map(|_| rng.random()).collect();

    let mut tape = Tape::new();
    let sv = model.record_constant(&mut tape)?;
    let w = nets.params.register_constant(&mut tape);
    let post = objective::posterior(&mut tape, nets, &w, &ys, &angles);
    let mu = tape.value(post.mu).clone();
    let var = tape.value(post.log_var).map(f64::exp);
    let lq = tape.value(post.log_q_code).clone();
    let x1 = Mat::from_fn(b, model.state_dim(), |i, j| {
        let r = i / samples;
        mu[(r, j)] + var[(r, j)].sqrt() * x1_eps[(i, j)]
    });
    let mut codes: Vec<usize> = (0..b)
        .map(|i| {
            let probs: Vec<f64> = lq.row(i / samples).iter().map(|v| v.exp()).collect();
            categorical_from_uniform(&probs, code_u[i])
        })
        .collect();
    let mut states = vec![x1.clone()];
    let mut x = tape.constant(x1);
    for _ in 1..horizon {
        let c = tape.constant(one_hot_rows(&codes, l));
        let e = tape.constant(standard_normal(rng, b, model.layout.gp_output_dim()));
        x = sv.step(&mut tape, x, c, e);
        states.push(tape.value(x).clone());
        if !model.transition.is_identity() {
            codes = codes
                .iter()
                .map(|c| {
                    let row: Vec<f64> = model.transition.matrix().row(*c).iter().copied().collect();
                    categorical_from_uniform(&row, rng.random())
                })
                .collect();
        }
    }
    let d = model.obs_dim();
    let mut out = Vec::with_capacity(n);
    for traj in 0..n {
        let paths: Vec<Mat> = (0..samples)
            .map(|s| {
                let row = traj * samples + s;
                Mat::from_fn(horizon, d, |ti, j| states[ti][(row, model.obs.indices[j])])
            })
            .collect();
        out.push(Reconstruction::from_samples(paths));
    }
    if out.iter().any(|r| r.mean.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteObjective {
            trajectory: out.iter().position(|r| r.mean.iter().any(|v| !v.is_finite())),
            detail: "reconstruction diverged".into(),
        });
    }
    Ok(out)
}

/// Root-mean-square error between mean reconstructions and truth over all
/// times, dimensions and trajectories.
pub fn rmse(means: &[Mat], truth: &[Mat]) -> Result<f64> {
    if means.len() != truth.len() || means.is_empty() {
        return Err(Error::LengthMismatch(format!(
            "{} reconstructions for {} trajectories",
            means.len(),
            truth.len()
        )));
    }
    let (mut s, mut count) = (0.0, 0usize);
    for (m, y) in means.iter().zip(truth) {
        if m.ncols() != y.ncols() || m.nrows() > y.nrows() {
            return Err(Error::LengthMismatch(format!(
                "reconstruction {:?} vs truth {:?}",
                m.shape(),
                y.shape()
            )));
        }
        for t in 0..m.nrows() {
            for j in 0..m.ncols() {
                s += (m[(t, j)] - y[(t, j)]).powi(2);
                count += 1;
            }
        }
    }
    Ok((s / count as f64).sqrt())
}

/// Mean Euclidean distance between matching rows of `path` and `truth`.
pub fn mean_position_error(path: &Mat, truth: &Mat) -> Result<f64> {
    if path.shape() != truth.shape() || path.nrows() == 0 {
        return Err(Error::LengthMismatch(format!("path {:?} vs truth {:?}", path.shape(), truth.shape())));
    }
    let total: f64 = (0..path.nrows()).map(|t| (path.row(t) - truth.row(t)).norm()).sum();
    Ok(total / path.nrows() as f64)
}

/// Mean over trajectories of `log (1/S) Σ_s Π_t N(y_t; path_s(t), noise)`.
pub fn log_likelihood(recons: &[Reconstruction], truth: &[Mat], noise_var: &[f64]) -> Result<f64> {
    Ok(per_trajectory_log_likelihood(recons, truth, noise_var)?
        .iter()
        .sum::<f64>()
        / recons.len() as f64)
}

pub fn per_trajectory_log_likelihood(
    recons: &[Reconstruction],
    truth: &[Mat],
    noise_var: &[f64],
) -> Result<Vec<f64>> {
    if recons.len() != truth.len() || recons.is_empty() {
        return Err(Error::LengthMismatch(format!(
            "{} reconstructions for {} trajectories",
            recons.len(),
            truth.len()
        )));
    }
    let mut out = Vec::with_capacity(recons.len());
    for (r, y) in recons.iter().zip(truth) {
        let t = r.mean.nrows();
        if y.nrows() < t || y.ncols() != noise_var.len() {
            return Err(Error::LengthMismatch("truth shorter than reconstruction".into()));
        }
        let lw: Vec<f64> = r
            .samples
            .iter()
            .map(|p| {
                let mut acc = 0.0;
                for ti in 0..t {
                    for (j, v) in noise_var.iter().enumerate() {
                        acc += -0.5 * (LN_2PI + v.ln() + (y[(ti, j)] - p[(ti, j)]).powi(2) / v);
                    }
                }
                acc
            })
            .collect();
        let m = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = lw.iter().map(|v| (v - m).exp()).sum();
        out.push(m + (s / lw.len() as f64).ln());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub traj: usize,
    pub rmse: f64,
    pub log_likelihood: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub rmse: f64,
    pub mean_log_likelihood: f64,
    pub mi: f64,
    pub rows: Vec<TrajectoryRow>,
}

impl EvalReport {
    pub fn write_csv(&self, w: &mut dyn Write) -> Result<()> {
        writeln!(w, "traj,rmse,log_likelihood")?;
        for r in &self.rows {
            writeln!(w, "{},{},{}", r.traj, r.rmse, r.log_likelihood)?;
        }
        writeln!(w, "all,{},{}", self.rmse, self.mean_log_likelihood)?;
        writeln!(w, "# mi,{}", self.mi)?;
        Ok(())
    }
}

/// Reconstruction RMSE, log-likelihood and an MI estimate on `batch`.
pub fn evaluate<R: Rng>(
    batch: &TrajectoryBatch,
    model: &MultiModalSSM,
    nets: &InferenceNets,
    priors: &Priors,
    samples: usize,
    mi_samples: usize,
    rng: &mut R,
) -> Result<EvalReport> {
    let recons = reconstruct(batch, model, nets, samples, rng)?;
    let means: Vec<Mat> = recons.iter().map(|r| r.mean.clone()).collect();
    let noise = model.obs.noise_var();
    let lls = per_trajectory_log_likelihood(&recons, &batch.trajectories, &noise)?;
    let rows = (0..batch.len())
        .map(|i| {
            Ok(TrajectoryRow {
                traj: i,
                rmse: rmse(&means[i..=i], &batch.trajectories[i..=i])?,
                log_likelihood: lls[i],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (mu, var) = objective::encoder_posteriors(batch, nets)?;
    let mi = objective::mi_bound(model, nets, priors, mi_samples, Some((&mu, &var)), rng)?;
    Ok(EvalReport {
        rmse: rmse(&means, &batch.trajectories)?,
        mean_log_likelihood: lls.iter().sum::<f64>() / lls.len() as f64,
        mi,
        rows,
    })
}

/// Plot data: `t, truth…, mean…, lo…, hi…` with ±2 std bands.
pub fn write_plot_dump(w: &mut dyn Write, truth: &Mat, r: &Reconstruction, dt: f64) -> Result<()> {
    let d = truth.ncols();
    let mut header = vec!["t".to_string()];
    for prefix in ["truth", "mean", "lo", "hi"] {
        header.extend((1..=d).map(|j| format!("{prefix}_{j}")));
    }
    writeln!(w, "{}", header.join(","))?;
    for t in 0..r.mean.nrows().min(truth.nrows()) {
        let mut row = vec![format!("{}", t as f64 * dt)];
        row.extend((0..d).map(|j| truth[(t, j)].to_string()));
        row.extend((0..d).map(|j| r.mean[(t, j)].to_string()));
        row.extend((0..d).map(|j| (r.mean[(t, j)] - 2.0 * r.std[(t, j)]).to_string()));
        row.extend((0..d).map(|j| (r.mean[(t, j)] + 2.0 * r.std[(t, j)]).to_string()));
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Heading change below this magnitude (rad) counts as straight.
pub const HEADING_DEADBAND: f64 = 1.0;

/// Cumulative heading change along a planar path, from successive
/// displacement angles.
pub fn net_heading_change(path: &Mat) -> f64 {
    let mut total = 0.0;
    let mut prev: Option<f64> = None;
    for t in 1..path.nrows() {
        let (dx, dy) = (path[(t, 0)] - path[(t - 1, 0)], path[(t, 1)] - path[(t - 1, 1)]);
        if dx == 0.0 && dy == 0.0 {
            continue;
        }
        let a = dy.atan2(dx);
        if let Some(p) = prev {
            let mut d = a - p;
            while d > std::f64::consts::PI {
                d -= std::f64::consts::TAU;
            }
            while d < -std::f64::consts::PI {
                d += std::f64::consts::TAU;
            }
            total += d;
        }
        prev = Some(a);
    }
    total
}

pub fn heading_sign(change: f64) -> i32 {
    if change.abs() <= HEADING_DEADBAND {
        0
    } else if change > 0.0 {
        1
    } else {
        -1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub control: f64,
    pub code: usize,
    pub code_probs: Vec<f64>,
    /// `steps + 1` rows of `[p_x, p_y]`.
    pub truth: Mat,
    pub predicted: Mat,
    pub terminal_error: f64,
    pub true_heading_change: f64,
    pub predicted_heading_change: f64,
    pub sign_match: bool,
}

/// Noise-free observations (`steps + 1` rows) of mode `code`'s mean
/// dynamics started from state `x1`.
pub fn mode_rollout(model: &MultiModalSSM, x1: &[f64], code: usize, steps: usize) -> Result<Mat> {
    if code >= model.num_modes() {
        return Err(Error::IndexOutOfRange { index: code, len: model.num_modes() });
    }
    if x1.len() != model.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "state of length {} for a layout of {}",
            x1.len(),
            model.state_dim()
        )));
    }
    let mut tape = Tape::new();
    let sv = model.record_constant(&mut tape)?;
    let c = tape.constant(one_hot_rows(&[code], model.num_modes()));
    let mut x: Var = tape.constant(Mat::from_row_slice(1, x1.len(), x1));
    let d = model.obs_dim();
    let mut out = Mat::zeros(steps + 1, d);
    for t in 0..=steps {
        if t > 0 {
            x = sv.mean_step(&mut tape, x, c);
        }
        let v = tape.value(x);
        for j in 0..d {
            out[(t, j)] = v[(0, model.obs.indices[j])];
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteObjective {
            trajectory: None,
            detail: format!("rollout of mode {code} diverged"),
        });
    }
    Ok(out)
}

/// For each Dubins control, infer `(x_1, c)` from the first `warmup`
/// noise-free observations of the path from `x_1 = [0, 0, V, 0]`, then roll
/// the inferred mode's mean dynamics `steps` steps forward.
pub fn long_term_prediction(
    model: &MultiModalSSM,
    nets: &InferenceNets,
    controls: &[f64],
    speed: f64,
    steps: usize,
    warmup: usize,
) -> Result<Vec<Prediction>> {
    if warmup != nets.window {
        return Err(Error::Validation(format!(
            "warmup {warmup} must equal the inference window {}",
            nets.window
        )));
    }
    if model.obs_dim() != 2 {
        return Err(Error::DimensionMismatch("long-term prediction needs planar data".into()));
    }
    let mut out = Vec::with_capacity(controls.len());
    for &u in controls {
        let truth_full = dubins_path([0.0, 0.0, 0.0], u, speed, model.dt, steps + 1);
        let truth = truth_full.columns(0, 2).into_owned();
        let warm = truth.rows(0, warmup).into_owned();
        let (mu, _) = nets.encode_initial(&warm)?;
        let probs = nets.classify_code(&warm, 0.0)?;
        let code = inference::argmax(&probs);
        let predicted = mode_rollout(model, &mu, code, steps)?;
        let th = net_heading_change(&truth);
        let ph = net_heading_change(&predicted);
        let terminal_error = (predicted.row(steps) - truth.row(steps)).norm();
        out.push(Prediction {
            control: u,
            code,
            code_probs: probs,
            truth,
            predicted,
            terminal_error,
            true_heading_change: th,
            predicted_heading_change: ph,
            sign_match: heading_sign(th) == heading_sign(ph),
        });
    }
    Ok(out)
}

/// Fraction of generated trajectories classified back to their generating
/// code, plus the L×L confusion counts (row = generating code).
pub fn code_purity<R: Rng>(
    model: &MultiModalSSM,
    nets: &InferenceNets,
    priors: &Priors,
    per_code: usize,
    posterior_source: Option<(&Mat, &Mat)>,
    rng: &mut R,
) -> Result<(f64, Vec<Vec<usize>>)> {
    let l = model.num_modes();
    let samples = per_code * l;
    let n_post = posterior_source.map(|(m, _)| m.nrows()).unwrap_or(1);
    let draws = MiDraws::sample(rng, samples, n_post, model, nets.window);
    let x1 = objective::mi_initial_states(&draws, posterior_source, priors);
    let mut tape = Tape::new();
    let sv = model.record_constant(&mut tape)?;
    let w = nets.params.register_constant(&mut tape);
    let c = tape.constant(one_hot_rows(&draws.codes, l));
    let mut x = tape.constant(x1);
    let e = tape.constant(draws.obs[0].clone());
    let mut ys = vec![sv.observe_noisy(&mut tape, x, e)];
    for (step, eps) in draws.transition.iter().enumerate() {
        let eps = tape.constant(eps.clone());
        x = sv.step(&mut tape, x, c, eps);
        let e = tape.constant(draws.obs[step + 1].clone());
        ys.push(sv.observe_noisy(&mut tape, x, e));
    }
    let lq = nets.classify(&mut tape, &w, &ys, &draws.angles);
    let lq = tape.value(lq);
    let mut confusion = vec![vec![0usize; l]; l];
    let mut correct = 0;
    for (i, c) in draws.codes.iter().enumerate() {
        let row: Vec<f64> = lq.row(i).iter().copied().collect();
        let pred = inference::argmax(&row);
        confusion[*c][pred] += 1;
        correct += usize::from(pred == *c);
    }
    Ok((correct as f64 / samples as f64, confusion))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rmse_examples() {
        let y = Mat::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(rmse(&[y.clone()], &[y.clone()]).unwrap(), 0.0);
        let off = y.map(|v| v) + Mat::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        assert_abs_diff_eq!(rmse(&[off], &[y.clone()]).unwrap(), 0.5f64.sqrt(), epsilon = 1e-15);
        assert!(matches!(rmse(&[], &[y]), Err(Error::LengthMismatch(_))));
    }

    #[test]
    fn rmse_rigid_invariance() {
        let y = Mat::from_fn(5, 2, |i, j| (i * 3 + j) as f64 * 0.7);
        let m = Mat::from_fn(5, 2, |i, j| (i * 3 + j) as f64 * 0.7 + (i as f64).sin());
        let (s, c) = 0.8f64.sin_cos();
        let tf = |a: &Mat| Mat::from_fn(5, 2, |i, j| {
            let (x, yv) = (a[(i, 0)], a[(i, 1)]);
            if j == 0 { c * x - s * yv + 3.0 } else { s * x + c * yv - 1.0 }
        });
        assert_abs_diff_eq!(
            rmse(&[m.clone()], &[y.clone()]).unwrap(),
            rmse(&[tf(&m)], &[tf(&y)]).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn exact_path_log_likelihood_beats_inflated_noise() {
        let y = Mat::from_fn(4, 2, |i, j| (i + j) as f64);
        let r = Reconstruction::from_samples(vec![y.clone()]);
        let tight = log_likelihood(&[r.clone()], &[y.clone()], &[0.1, 0.1]).unwrap();
        let wide = log_likelihood(&[r], &[y], &[1.0, 1.0]).unwrap();
        assert!(tight > wide);
        assert_abs_diff_eq!(tight, -0.5 * 8.0 * (LN_2PI + 0.1f64.ln()), epsilon = 1e-12);
    }

    #[test]
    fn heading_change_of_paths() {
        let straight = dubins_path([0.0, 0.0, 0.3], 0.0, 1.0, 0.1, 101);
        assert_abs_diff_eq!(net_heading_change(&straight), 0.0, epsilon = 1e-9);
        let left = dubins_path([0.0, 0.0, 0.0], 1.0, 1.0, 0.1, 101);
        // 99 heading increments of 0.1 rad between the 100 displacements
        assert_abs_diff_eq!(net_heading_change(&left), 9.9, epsilon = 1e-9);
        let right = dubins_path([0.0, 0.0, 0.0], -1.0, 1.0, 0.1, 101);
        assert_eq!(heading_sign(net_heading_change(&right)), -1);
        assert_eq!(heading_sign(0.5), 0);
    }
}
