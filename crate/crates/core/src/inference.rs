//! Amortized posteriors: a backward GRU encoder for the initial state and an
//! MLP classifier for the dynamics code, with shift/rotation canonicalization
//! and reparameterized samplers.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::diffmath::{Mat, ParamSet, Tape, Var};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;
/// Floor on classifier log-probabilities fed to the Gumbel perturbation.
pub const LOGIT_FLOOR: f64 = -30.0;

/// Translate so the first row is the origin, then rotate the first two
/// columns by `angle`.
pub fn canonicalize(y: &Mat, angle: f64) -> Result<Mat> {
    if y.nrows() < 2 || y.ncols() < 2 {
        return Err(Error::DimensionMismatch(format!(
            "need T ≥ 2 and a planar observation, got {}×{}",
            y.nrows(),
            y.ncols()
        )));
    }
    let (s, c) = angle.sin_cos();
    let mut out = y.clone();
    for t in 0..y.nrows() {
        for j in 0..y.ncols() {
            out[(t, j)] = y[(t, j)] - y[(0, j)];
        }
        let (a, b) = (out[(t, 0)], out[(t, 1)]);
        out[(t, 0)] = c * a - s * b;
        out[(t, 1)] = s * a + c * b;
    }
    Ok(out)
}

/// Temperature schedule for relaxed code samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GumbelConfig {
    pub start: f64,
    pub end: f64,
    /// Multiplicative decay per epoch.
    pub decay: f64,
    pub straight_through: bool,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 0.3,
            decay: 0.99,
            straight_through: true,
        }
    }
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.start > 0.0
            && self.start <= 10.0
            && self.end > 0.0
            && self.end <= self.start
            && self.decay > 0.0
            && self.decay <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid Gumbel schedule {self:?}")))
        }
    }

    pub fn temperature(&self, epoch: usize) -> f64 {
        (self.start * self.decay.powi(epoch as i32)).max(self.end)
    }
}

/// `μ + √V ⊙ draw`.
pub fn sample_gaussian(mu: &[f64], var: &[f64], draw: &[f64]) -> Vec<f64> {
    mu.iter()
        .zip(var)
        .zip(draw)
        .map(|((m, v), e)| m + v.sqrt() * e)
        .collect()
}

/// Log-density of a diagonal Gaussian.
pub fn gaussian_log_density(x: &[f64], mu: &[f64], var: &[f64]) -> f64 {
    x.iter()
        .zip(mu)
        .zip(var)
        .map(|((x, m), v)| -0.5 * (LN_2PI + v.ln() + (x - m).powi(2) / v))
        .sum()
}

/// A relaxed categorical sample.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeSample {
    pub relaxed: Vec<f64>,
    pub hard: usize,
}

fn check_probs(probs: &[f64]) -> Result<()> {
    let total: f64 = probs.iter().sum();
    if probs.is_empty()
        || probs.iter().any(|p| !(p.is_finite() && *p >= 0.0))
        || (total - 1.0).abs() > 1e-9
    {
        return Err(Error::DegenerateDistribution(format!(
            "not a probability vector: {probs:?}"
        )));
    }
    Ok(())
}

/// Gumbel-softmax draw from uniform variates `draws`.
pub fn sample_code(probs: &[f64], tau: f64, draws: &[f64]) -> Result<CodeSample> {
    check_probs(probs)?;
    if !(tau > 0.0) || draws.len() != probs.len() {
        return Err(Error::Validation("need τ > 0 and one draw per category".into()));
    }
    let perturbed: Vec<f64> = probs
        .iter()
        .zip(draws)
        .map(|(p, u)| p.ln().max(LOGIT_FLOOR) + gumbel(*u))
        .collect();
    let hard = argmax(&perturbed);
    let m = perturbed[hard];
    let e: Vec<f64> = perturbed.iter().map(|v| ((v - m) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    let relaxed = e.iter().map(|v| v / z).collect();
    if !(z.is_finite()) {
        return Err(Error::DegenerateDistribution("relaxed sample overflow".into()));
    }
    Ok(CodeSample { relaxed, hard })
}

pub fn gumbel(u: f64) -> f64 {
    let u = u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
    -(-u.ln()).ln()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn uniform_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    let d = Uniform::new(0.0, 1.0).unwrap();
    let v: Vec<f64> = (0..rows * cols).map(|_| d.sample(rng)).collect();
    Mat::from_row_slice(rows, cols, &v)
}

/// Relaxed codes on the tape from per-row log-probabilities (B×L). Returns
/// the straight-through hard one-hot (or the relaxed sample) and the hard
/// indices.
pub fn gumbel_softmax(
    tape: &mut Tape,
    log_probs: Var,
    uniforms: &Mat,
    tau: f64,
    straight_through: bool,
) -> (Var, Vec<usize>) {
    let floored = tape.clamp_min(log_probs, LOGIT_FLOOR);
    let g = uniforms.map(gumbel);
    let gv = tape.constant(g);
    let pert = tape.add(floored, gv);
    let scaled = tape.scale(pert, 1.0 / tau);
    let soft = tape.softmax_rows(scaled);
    let pv = tape.value(pert);
    let hard: Vec<usize> = (0..pv.nrows())
        .map(|i| argmax(&pv.row(i).iter().copied().collect::<Vec<_>>()))
        .collect();
    if straight_through {
        let onehot = crate::ssm::one_hot_rows(&hard, pv.ncols());
        (tape.straight_through(soft, onehot), hard)
    } else {
        (soft, hard)
    }
}

/// Network sizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub hidden: usize,
    pub classifier_hidden: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            classifier_hidden: 64,
        }
    }
}

mod slot {
    pub const W_IH: usize = 0;
    pub const W_HH: usize = 1;
    pub const B_IH: usize = 2;
    pub const B_HH: usize = 3;
    pub const W_MU: usize = 4;
    pub const B_MU: usize = 5;
    pub const W_LV: usize = 6;
    pub const B_LV: usize = 7;
    pub const CLS: usize = 8;
    pub const COUNT: usize = 14;
}

/// Encoder and classifier weights plus fixed input/output scalings.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceNets {
    pub config: NetConfig,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub window: usize,
    pub num_modes: usize,
    /// State slot observed by each observation column.
    pub observed_slots: Vec<usize>,
    /// Divides canonicalized observations before they enter either network.
    pub input_scale: Vec<f64>,
    /// Multiplies the encoder mean head, per state slot.
    pub state_scale: Vec<f64>,
    pub params: ParamSet,
}

fn glorot<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let d = Uniform::new(-a, a).unwrap();
    Mat::from_fn(rows, cols, |_, _| d.sample(rng))
}

impl InferenceNets {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        config: NetConfig,
        observed_slots: Vec<usize>,
        state_dim: usize,
        window: usize,
        num_modes: usize,
        input_scale: Vec<f64>,
        state_scale: Vec<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        let dy = observed_slots.len();
        if dy == 0 || window < 2 || num_modes == 0 || config.hidden == 0 {
            return Err(Error::Validation("invalid network dimensions".into()));
        }
        if input_scale.len() != dy || state_scale.len() != state_dim {
            return Err(Error::Validation("scale vectors have the wrong length".into()));
        }
        if input_scale.iter().chain(&state_scale).any(|s| !(*s > 0.0)) {
            return Err(Error::Validation("scales must be positive".into()));
        }
        let h = config.hidden;
        let ch = config.classifier_hidden;
        let mut p = ParamSet::new();
        p.push("gru.w_ih", glorot(rng, dy, 3 * h));
        p.push("gru.w_hh", glorot(rng, h, 3 * h));
        p.push("gru.b_ih", Mat::zeros(1, 3 * h));
        p.push("gru.b_hh", Mat::zeros(1, 3 * h));
        p.push("head.w_mu", glorot(rng, h, state_dim).scale(0.1));
        p.push("head.b_mu", Mat::zeros(1, state_dim));
        p.push("head.w_lv", glorot(rng, h, state_dim).scale(0.1));
        p.push("head.b_lv", Mat::from_element(1, state_dim, -2.0));
        p.push("cls.w1", glorot(rng, window * dy, ch));
        p.push("cls.b1", Mat::zeros(1, ch));
        p.push("cls.w2", glorot(rng, ch, ch));
        p.push("cls.b2", Mat::zeros(1, ch));
        p.push("cls.w3", glorot(rng, ch, num_modes));
        p.push("cls.b3", Mat::zeros(1, num_modes));
        debug_assert_eq!(p.len(), slot::COUNT);
        Ok(Self {
            config,
            obs_dim: dy,
            state_dim,
            window,
            num_modes,
            observed_slots,
            input_scale,
            state_scale,
            params: p,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.params.len() != slot::COUNT || !self.params.all_finite() {
            return Err(Error::Validation("malformed inference network weights".into()));
        }
        let h = self.config.hidden;
        let ch = self.config.classifier_hidden;
        let expected = [
            (self.obs_dim, 3 * h),
            (h, 3 * h),
            (1, 3 * h),
            (1, 3 * h),
            (h, self.state_dim),
            (1, self.state_dim),
            (h, self.state_dim),
            (1, self.state_dim),
            (self.window * self.obs_dim, ch),
            (1, ch),
            (ch, ch),
            (1, ch),
            (ch, self.num_modes),
            (1, self.num_modes),
        ];
        for (i, (m, e)) in self.params.values().iter().zip(expected).enumerate() {
            if m.shape() != e {
                return Err(Error::ShapeMismatch(format!(
                    "{}: {:?}, expected {e:?}",
                    self.params.names()[i],
                    m.shape()
                )));
            }
        }
        Ok(())
    }

    fn lift_matrix(&self) -> Mat {
        let mut c = Mat::zeros(self.obs_dim, self.state_dim);
        for (j, s) in self.observed_slots.iter().enumerate() {
            c[(j, *s)] = 1.0;
        }
        c
    }

    /// Encoder posterior over `x_1` for every row of the time-major
    /// observations `ys` (entry `t` is B×Dy). Returns mean and log-variance,
    /// both B×S, in world coordinates.
    pub fn encode(&self, tape: &mut Tape, w: &[Var], ys: &[Var]) -> (Var, Var) {
        let b = tape.shape(ys[0]).0;
        let h = self.config.hidden;
        let inv_scale = tape.row(&self.input_scale.iter().map(|s| 1.0 / s).collect::<Vec<_>>());
        let y1 = ys[0];
        let mut state = tape.constant(Mat::zeros(b, h));
        for &yt in ys.iter().rev() {
            let shifted = tape.sub(yt, y1);
            let x = tape.mul_row(shifted, inv_scale);
            state = gru_cell(tape, w, x, state, h);
        }
        let mu = tape.matmul(state, w[slot::W_MU]);
        let mu = tape.add_row(mu, w[slot::B_MU]);
        let sc = tape.row(&self.state_scale);
        let mu = tape.mul_row(mu, sc);
        let lift = tape.constant(self.lift_matrix());
        let anchor = tape.matmul(y1, lift);
        let mu = tape.add(mu, anchor);
        let lv = tape.matmul(state, w[slot::W_LV]);
        let lv = tape.add_row(lv, w[slot::B_LV]);
        let log_sc2 = tape.row(&self.state_scale.iter().map(|s| 2.0 * s.ln()).collect::<Vec<_>>());
        let lv = tape.add_row(lv, log_sc2);
        (mu, lv)
    }

    /// Classifier log-probabilities (B×L) for time-major observations, each
    /// row rotated by its own angle after shifting. One-dimensional
    /// observations are shifted only.
    pub fn classify(&self, tape: &mut Tape, w: &[Var], ys: &[Var], angles: &[f64]) -> Var {
        let b = tape.shape(ys[0]).0;
        assert_eq!(angles.len(), b);
        assert_eq!(ys.len(), self.window, "classifier window mismatch");
        let cos = tape.constant(Mat::from_fn(b, 1, |i, _| angles[i].cos()));
        let sin = tape.constant(Mat::from_fn(b, 1, |i, _| angles[i].sin()));
        let inv_scale = tape.row(&self.input_scale.iter().map(|s| 1.0 / s).collect::<Vec<_>>());
        let y1 = ys[0];
        let mut cols = Vec::with_capacity(ys.len());
        for &yt in ys {
            let s = tape.sub(yt, y1);
            let rotated = if self.obs_dim >= 2 {
                let a = tape.select_cols(s, &[0]);
                let bb = tape.select_cols(s, &[1]);
                let ac = tape.mul_col(a, cos);
                let bs = tape.mul_col(bb, sin);
                let as_ = tape.mul_col(a, sin);
                let bc = tape.mul_col(bb, cos);
                let r0 = tape.sub(ac, bs);
                let r1 = tape.add(as_, bc);
                if self.obs_dim > 2 {
                    let rest = tape.slice_cols(s, 2, self.obs_dim - 2);
                    tape.concat_cols(&[r0, r1, rest])
                } else {
                    tape.concat_cols(&[r0, r1])
                }
            } else {
                s
            };
            cols.push(tape.mul_row(rotated, inv_scale));
        }
        let flat = tape.concat_cols(&cols);
        let c = &w[slot::CLS..];
        let h1 = tape.matmul(flat, c[0]);
        let h1 = tape.add_row(h1, c[1]);
        let h1 = tape.tanh(h1);
        let h2 = tape.matmul(h1, c[2]);
        let h2 = tape.add_row(h2, c[3]);
        let h2 = tape.tanh(h2);
        let lo = tape.matmul(h2, c[4]);
        let lo = tape.add_row(lo, c[5]);
        tape.log_softmax_rows(lo)
    }

    fn check_traj(&self, y: &Mat) -> Result<()> {
        if y.ncols() != self.obs_dim || y.nrows() < 2 {
            return Err(Error::DimensionMismatch(format!(
                "trajectory {}×{} for networks expecting D={}",
                y.nrows(),
                y.ncols(),
                self.obs_dim
            )));
        }
        Ok(())
    }

    /// Posterior mean and variance of `x_1` for one trajectory.
    pub fn encode_initial(&self, y: &Mat) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_traj(y)?;
        let mut tape = Tape::new();
        let w = self.params.register_constant(&mut tape);
        let ys: Vec<Var> = (0..y.nrows())
            .map(|t| tape.constant(y.rows(t, 1).into_owned()))
            .collect();
        let (mu, lv) = self.encode(&mut tape, &w, &ys);
        let mu = tape.value(mu).iter().copied().collect();
        let var = tape.value(lv).iter().map(|v| v.exp()).collect();
        Ok((mu, var))
    }

    /// Code probabilities for one trajectory of exactly `window` rows.
    pub fn classify_code(&self, y: &Mat, angle: f64) -> Result<Vec<f64>> {
        self.check_traj(y)?;
        if y.nrows() != self.window {
            return Err(Error::DimensionMismatch(format!(
                "classifier expects {} steps, got {}",
                self.window,
                y.nrows()
            )));
        }
        let mut tape = Tape::new();
        let w = self.params.register_constant(&mut tape);
        let ys: Vec<Var> = (0..y.nrows())
            .map(|t| tape.constant(y.rows(t, 1).into_owned()))
            .collect();
        let lp = self.classify(&mut tape, &w, &ys, &[angle]);
        Ok(tape.value(lp).iter().map(|v| v.exp()).collect())
    }
}

/// One GRU step with fused gate weights (reset, update, candidate).
fn gru_cell(tape: &mut Tape, w: &[Var], x: Var, h_prev: Var, h: usize) -> Var {
    let gi = tape.matmul(x, w[slot::W_IH]);
    let gi = tape.add_row(gi, w[slot::B_IH]);
    let gh = tape.matmul(h_prev, w[slot::W_HH]);
    let gh = tape.add_row(gh, w[slot::B_HH]);
    let i_rz = tape.slice_cols(gi, 0, 2 * h);
    let h_rz = tape.slice_cols(gh, 0, 2 * h);
    let rz = tape.add(i_rz, h_rz);
    let rz = tape.sigmoid(rz);
    let r = tape.slice_cols(rz, 0, h);
    let z = tape.slice_cols(rz, h, h);
    let i_n = tape.slice_cols(gi, 2 * h, h);
    let h_n = tape.slice_cols(gh, 2 * h, h);
    let gated = tape.mul(r, h_n);
    let n = tape.add(i_n, gated);
    let n = tape.tanh(n);
    // h' = n + z ⊙ (h − n)
    let diff = tape.sub(h_prev, n);
    let zd = tape.mul(z, diff);
    tape.add(n, zd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn nets(window: usize) -> InferenceNets {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        InferenceNets::new(
            NetConfig {
                hidden: 6,
                classifier_hidden: 5,
            },
            vec![0, 1],
            4,
            window,
            3,
            vec![1.0, 1.0],
            vec![1.0; 4],
            &mut rng,
        )
        .unwrap()
    }

    fn traj(t: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(t, 2, |_, _| rng.random::<f64>() * 4.0 - 2.0)
    }

    #[test]
    fn canonicalize_examples() {
        let y = Mat::from_row_slice(2, 2, &[3.0, 4.0, 4.0, 4.0]);
        let c = canonicalize(&y, 0.0).unwrap();
        assert_eq!(c, Mat::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]));
        let r = canonicalize(&y, PI / 2.0).unwrap();
        assert_abs_diff_eq!(r[(1, 0)], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r[(1, 1)], 1.0, epsilon = 1e-15);
        assert!(canonicalize(&Mat::zeros(1, 2), 0.0).is_err());
        assert!(canonicalize(&Mat::zeros(3, 1), 0.0).is_err());
    }

    #[test]
    fn canonicalize_preserves_distances_and_shifts_vertical_only() {
        let y = Mat::from_fn(6, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 - 1.3);
        let c = canonicalize(&y, 1.234).unwrap();
        for a in 0..6 {
            for b in 0..6 {
                let d0 = (y.row(a) - y.row(b)).norm();
                let d1 = (c.row(a) - c.row(b)).norm();
                assert_abs_diff_eq!(d0, d1, epsilon = 1e-12);
            }
            assert_eq!(c[(a, 2)], y[(a, 2)] - y[(0, 2)]);
        }
    }

    #[test]
    fn encoder_is_deterministic_and_variance_positive() {
        let n = nets(5);
        let y = traj(5, 2);
        let a = n.encode_initial(&y).unwrap();
        let b = n.encode_initial(&y).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let y = Mat::from_fn(5, 2, |_, _| (rng.random::<f64>() - 0.5) * 200.0);
            let (_, v) = n.encode_initial(&y).unwrap();
            assert!(v.iter().all(|x| *x > 0.0));
        }
    }

    #[test]
    fn encoder_mean_follows_shift() {
        let n = nets(5);
        let y = traj(5, 4);
        let mut moved = y.clone();
        for t in 0..5 {
            moved[(t, 0)] += 10.0;
            moved[(t, 1)] -= 3.0;
        }
        let (a, va) = n.encode_initial(&y).unwrap();
        let (b, vb) = n.encode_initial(&moved).unwrap();
        assert_abs_diff_eq!(b[0] - a[0], 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b[1] - a[1], -3.0, epsilon = 1e-12);
        for s in 2..4 {
            assert_abs_diff_eq!(a[s], b[s], epsilon = 1e-12);
        }
        for s in 0..4 {
            assert_abs_diff_eq!(va[s], vb[s], epsilon = 1e-12);
        }
    }

    #[test]
    fn classifier_normalized_and_shift_invariant() {
        let n = nets(6);
        let y = traj(6, 5);
        let p = n.classify_code(&y, 0.7).unwrap();
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let mut moved = y.clone();
        for t in 0..6 {
            moved[(t, 0)] += 0.5;
            moved[(t, 1)] += 0.25;
        }
        assert_eq!(n.classify_code(&y, 0.0).unwrap(), n.classify_code(&moved, 0.0).unwrap());
        assert!(n.classify_code(&traj(5, 1), 0.0).is_err());
    }

    #[test]
    fn rotated_copy_has_matching_output_distribution() {
        // Under a uniformly random angle, a trajectory and its rotated copy
        // induce the same output distribution.
        let n = nets(6);
        let y = traj(6, 8);
        let rot = canonicalize(&y, 0.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws = 1000;
        let mut a = vec![Vec::new(); 3];
        let mut b = vec![Vec::new(); 3];
        for _ in 0..draws {
            let pa = n.classify_code(&y, rng.random::<f64>() * 2.0 * PI).unwrap();
            let pb = n.classify_code(&rot, rng.random::<f64>() * 2.0 * PI).unwrap();
            for l in 0..3 {
                a[l].push(pa[l]);
                b[l].push(pb[l]);
            }
        }
        for l in 0..3 {
            let (ma, sa) = mean_sd(&a[l]);
            let (mb, sb) = mean_sd(&b[l]);
            let se = ((sa * sa + sb * sb) / draws as f64).sqrt();
            assert!((ma - mb).abs() < 3.0 * se + 1e-12, "mode {l}: {ma} vs {mb} (se {se})");
        }
    }

    fn mean_sd(x: &[f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v.sqrt())
    }

    #[test]
    fn gaussian_sampler_examples() {
        assert_eq!(sample_gaussian(&[1.0, -2.0], &[4.0, 9.0], &[0.0, 0.0]), vec![1.0, -2.0]);
        let d = 3.0;
        assert_abs_diff_eq!(
            gaussian_log_density(&[0.0; 3], &[0.0; 3], &[1.0; 3]),
            -(d / 2.0) * (2.0 * PI).ln(),
            epsilon = 1e-12
        );
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| sample_gaussian(&[0.5], &[2.0], &[rng.sample(rand_distr::StandardNormal)])[0])
            .collect();
        let (_, sd) = mean_sd(&xs);
        let var = sd * sd;
        // se of the sample variance ≈ V·sqrt(2/(n−1))
        let se = 2.0 * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((var - 2.0).abs() < 3.0 * se, "{var}");
    }

    #[test]
    fn gumbel_uniform_and_gumbel_max_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 100_000;
        for probs in [vec![1.0 / 3.0; 3], vec![0.6, 0.3, 0.1]] {
            let mut counts = [0usize; 3];
            for _ in 0..n {
                let u: Vec<f64> = (0..3).map(|_| rng.random()).collect();
                counts[sample_code(&probs, 1.0, &u).unwrap().hard] += 1;
            }
            for l in 0..3 {
                let f = counts[l] as f64 / n as f64;
                let se = (probs[l] * (1.0 - probs[l]) / n as f64).sqrt();
                assert!((f - probs[l]).abs() < 3.0 * se, "{l}: {f} vs {}", probs[l]);
            }
        }
    }

    #[test]
    fn low_temperature_concentrates() {
        // Max entry > 0.99 needs a perturbed-logit gap above τ·ln 99; the gap
        // between two Gumbel-perturbed logits is logistic, so the rate of
        // near-ties depends on both τ and the probabilities.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 10_000;
        for (probs, tau) in [([0.9, 0.05, 0.05], 0.01), ([1.0 / 3.0; 3], 0.001)] {
            let mut sharp = 0;
            for _ in 0..n {
                let u: Vec<f64> = (0..3).map(|_| rng.random()).collect();
                let s = sample_code(&probs, tau, &u).unwrap();
                assert_abs_diff_eq!(s.relaxed.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
                if s.relaxed.iter().cloned().fold(0.0, f64::max) > 0.99 {
                    sharp += 1;
                }
            }
            assert!(sharp as f64 >= 0.99 * n as f64, "{probs:?} τ={tau}: {sharp}");
        }
    }

    #[test]
    fn zero_probability_is_floored_and_invalid_rejected() {
        let s = sample_code(&[0.0, 1.0], 0.5, &[0.999999, 0.001]).unwrap();
        assert_eq!(s.hard, 1);
        assert!(matches!(
            sample_code(&[0.5, 0.6], 1.0, &[0.5, 0.5]),
            Err(Error::DegenerateDistribution(_))
        ));
        assert!(matches!(
            sample_code(&[f64::NAN, 1.0], 1.0, &[0.5, 0.5]),
            Err(Error::DegenerateDistribution(_))
        ));
    }

    #[test]
    fn tape_gumbel_matches_scalar_sampler() {
        let probs = [0.2, 0.5, 0.3];
        let u = Mat::from_row_slice(1, 3, &[0.3, 0.8, 0.55]);
        let mut tape = Tape::new();
        let lp = tape.row(&probs.iter().map(|p: &f64| p.ln()).collect::<Vec<_>>());
        let (soft, hard) = gumbel_softmax(&mut tape, lp, &u, 0.5, false);
        let s = sample_code(&probs, 0.5, &[0.3, 0.8, 0.55]).unwrap();
        assert_eq!(hard[0], s.hard);
        for l in 0..3 {
            assert_abs_diff_eq!(tape.value(soft)[(0, l)], s.relaxed[l], epsilon = 1e-12);
        }
    }

    #[test]
    fn schedule_anneals_to_floor() {
        let g = GumbelConfig::default();
        assert_eq!(g.temperature(0), 1.0);
        assert_eq!(g.temperature(10_000), 0.3);
        assert!(GumbelConfig { end: 2.0, ..g }.validate().is_err());
    }
}
