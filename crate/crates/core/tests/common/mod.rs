//! Shared fixtures for integration tests: a scalar linear-Gaussian model
//! expressed as a single degenerate GP mode, and its Kalman filter.
#![allow(dead_code)]

use infossm::diffmath::Mat;
use infossm::gp::{AffineMean, ModeInit, SparseGPMode};
use infossm::ssm::{CanonicalLayout, ModeTransitionMatrix, MultiModalSSM, ObservationModel};

/// Scalar model `x' = x + dt (h x + b) + N(0, dt² q)`, `y = x + N(0, r)`.
pub struct Linear1d {
    pub h: f64,
    pub b: f64,
    pub q: f64,
    pub r: f64,
    pub dt: f64,
}

impl Linear1d {
    pub fn transition(&self) -> f64 {
        1.0 + self.dt * self.h
    }

    pub fn offset(&self) -> f64 {
        self.dt * self.b
    }

    pub fn process_var(&self) -> f64 {
        self.dt * self.dt * self.q
    }

    /// The GP residual is switched off by a vanishing signal std and an
    /// inducing mean equal to the linear mean, so only `h x + b` remains.
    pub fn model(&self) -> MultiModalSSM {
        let sf = 1e-8;
        let z = Mat::from_row_slice(3, 1, &[-1.0, 0.0, 1.0]);
        let init = ModeInit {
            signal_std: sf,
            length_scale: 1.0,
            sigma: 1.0,
            process_noise: self.q,
            s_scale: sf,
        };
        let mut mode = SparseGPMode::new(z.clone(), 1, &init).unwrap();
        mode.mean = AffineMean::new(Mat::from_element(1, 1, self.h), vec![self.b]).unwrap();
        mode.a = Mat::from_fn(3, 1, |i, _| self.h * z[(i, 0)] + self.b);
        MultiModalSSM {
            modes: vec![mode],
            transition: ModeTransitionMatrix::identity(1),
            obs: ObservationModel::new(vec![0], &[self.r], false).unwrap(),
            layout: CanonicalLayout::new(1, 1).unwrap(),
            dt: self.dt,
        }
    }

    /// Filtered means and variances given `x_1 ~ N(m0, p0)`.
    pub fn kalman(&self, ys: &[f64], m0: f64, p0: f64) -> (Vec<f64>, Vec<f64>) {
        let (mut m, mut p) = (m0, p0);
        let (mut means, mut vars) = (Vec::new(), Vec::new());
        for (t, y) in ys.iter().enumerate() {
            if t > 0 {
                m = self.transition() * m + self.offset();
                p = self.transition().powi(2) * p + self.process_var();
            }
            let gain = p / (p + self.r);
            m += gain * (y - m);
            p *= 1.0 - gain;
            means.push(m);
            vars.push(p);
        }
        (means, vars)
    }

    /// Log marginal likelihood `log p(y_{1:T})` given `x_1 ~ N(m0, p0)`.
    pub fn log_marginal(&self, ys: &[f64], m0: f64, p0: f64) -> f64 {
        let (mut m, mut p) = (m0, p0);
        let mut total = 0.0;
        for (t, y) in ys.iter().enumerate() {
            if t > 0 {
                m = self.transition() * m + self.offset();
                p = self.transition().powi(2) * p + self.process_var();
            }
            let s = p + self.r;
            total += -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + (y - m).powi(2) / s);
            let gain = p / s;
            m += gain * (y - m);
            p *= 1.0 - gain;
        }
        total
    }
}

impl Linear1d {
    /// Smoothed mean and variance of `x_1` given all of `ys`.
    pub fn smoothed_first(&self, ys: &[f64], m0: f64, p0: f64) -> (f64, f64) {
        let (fm, fp) = self.kalman(ys, m0, p0);
        let f = self.transition();
        let (mut ms, mut ps) = (*fm.last().unwrap(), *fp.last().unwrap());
        for t in (0..ys.len() - 1).rev() {
            let pred_m = f * fm[t] + self.offset();
            let pred_p = f * f * fp[t] + self.process_var();
            let g = fp[t] * f / pred_p;
            ms = fm[t] + g * (ms - pred_m);
            ps = fp[t] + g * g * (ps - pred_p);
        }
        (ms, ps)
    }

    /// Simulated observation sequences, one per seed offset.
    pub fn simulate(&self, n: usize, steps: usize, m0: f64, p0: f64, seed: u64) -> Vec<Vec<f64>> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let e = infossm::ssm::standard_normal(&mut rng, steps, 2);
                let mut x = m0 + p0.sqrt() * e[(0, 0)];
                (0..steps)
                    .map(|t| {
                        if t > 0 {
                            x = self.transition() * x + self.offset() + self.process_var().sqrt() * e[(t, 0)];
                        }
                        x + self.r.sqrt() * e[(t, 1)]
                    })
                    .collect()
            })
            .collect()
    }
}

/// Batch of scalar trajectories.
pub fn batch_1d(seqs: &[Vec<f64>], dt: f64) -> infossm::data::TrajectoryBatch {
    let trajs = seqs.iter().map(|s| Mat::from_column_slice(s.len(), 1, s)).collect();
    infossm::data::TrajectoryBatch::new(trajs, dt).unwrap()
}
pub mod oracles;
