//! Ground-truth trajectory generators: the Dubins vehicle and a planar
//! constant-maneuver surrogate with per-trajectory modes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::TrajectoryBatch;
use crate::diffmath::Mat;
use crate::error::{Error, Result};

/// Dubins controls in label order: right, straight, left.
pub const DUBINS_CONTROLS: [f64; 3] = [-1.0, 0.0, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DubinsConfig {
    pub speed: f64,
    pub process_noise_std: f64,
    pub obs_noise_std: f64,
    pub dt: f64,
    pub t: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for DubinsConfig {
    fn default() -> Self {
        Self {
            speed: 1.0,
            process_noise_std: 0.1f64.sqrt(),
            obs_noise_std: 0.1f64.sqrt(),
            dt: 0.1,
            t: 20,
            n_train: 50,
            n_test: 50,
            seed: 0,
        }
    }
}

impl DubinsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.speed > 0.0) {
            return Err(Error::Validation("dt and speed must be positive".into()));
        }
        if !(self.process_noise_std >= 0.0 && self.obs_noise_std >= 0.0) {
            return Err(Error::Validation("noise std must be non-negative".into()));
        }
        if self.t < 2 {
            return Err(Error::Validation(format!("T = {} but T ≥ 2 is required", self.t)));
        }
        if self.n_train == 0 {
            return Err(Error::Validation("n_train must be positive".into()));
        }
        Ok(())
    }
}

/// Noise-free Euler path of `[p_x, p_y, θ]` under constant control `u`,
/// `steps` rows including the start.
pub fn dubins_path(start: [f64; 3], u: f64, speed: f64, dt: f64, steps: usize) -> Mat {
    let mut out = Mat::zeros(steps, 3);
    let mut s = start;
    for t in 0..steps {
        out.row_mut(t).copy_from_slice(&s);
        s = [
            s[0] + dt * speed * s[2].cos(),
            s[1] + dt * speed * s[2].sin(),
            s[2] + dt * u,
        ];
    }
    out
}

/// `n` trajectories with one control per trajectory. States are T×3
/// `[p_x, p_y, θ]`; labels index `DUBINS_CONTROLS`.
pub fn simulate_dubins(cfg: &DubinsConfig, n: usize, seed: u64) -> Result<TrajectoryBatch> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectories = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.random_range(0..3);
        let u = DUBINS_CONTROLS[label];
        let mut s = [0.0, 0.0, rng.random::<f64>() * std::f64::consts::TAU];
        let mut x = Mat::zeros(cfg.t, 3);
        let mut y = Mat::zeros(cfg.t, 2);
        for t in 0..cfg.t {
            x.row_mut(t).copy_from_slice(&s);
            for j in 0..2 {
                let e: f64 = rng.sample(StandardNormal);
                y[(t, j)] = s[j] + cfg.obs_noise_std * e;
            }
            let w: f64 = rng.sample(StandardNormal);
            let theta_dot = u + cfg.process_noise_std * w;
            s = [
                s[0] + cfg.dt * cfg.speed * s[2].cos(),
                s[1] + cfg.dt * cfg.speed * s[2].sin(),
                s[2] + cfg.dt * theta_dot,
            ];
        }
        trajectories.push(y);
        states.push(x);
        labels.push(label);
    }
    let mut batch = TrajectoryBatch::new(trajectories, cfg.dt)?;
    batch.labels = Some(labels);
    batch.states = Some(states);
    Ok(batch)
}

/// Train and test sets from independent seed streams.
pub fn dubins_split(cfg: &DubinsConfig) -> Result<(TrajectoryBatch, TrajectoryBatch)> {
    Ok((
        simulate_dubins(cfg, cfg.n_train, cfg.seed)?,
        simulate_dubins(cfg, cfg.n_test.max(1), split_seed(cfg.seed))?,
    ))
}

pub fn split_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Maneuver {
    /// Constant turn rate ω (rad/s), positive counter-clockwise.
    Turn { rate: f64 },
    Straight,
    /// Constant along-track acceleration.
    Accelerate { accel: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateConfig {
    pub maneuvers: Vec<Maneuver>,
    /// Mixture weights over maneuvers; normalized internally.
    pub weights: Vec<f64>,
    pub speed: f64,
    pub obs_noise_std: f64,
    pub dt: f64,
    pub t: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            maneuvers: vec![
                Maneuver::Turn { rate: -0.03 },
                Maneuver::Straight,
                Maneuver::Turn { rate: 0.03 },
            ],
            weights: vec![1.0; 3],
            speed: 60.0,
            obs_noise_std: 30.0,
            dt: 2.0,
            t: 20,
            n_train: 50,
            n_test: 50,
            seed: 0,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.maneuvers.len() < 2 {
            return Err(Error::InvalidManeuverSpec("need at least two maneuvers".into()));
        }
        if self.weights.len() != self.maneuvers.len()
            || self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || self.weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::InvalidManeuverSpec("one non-negative weight per maneuver".into()));
        }
        for m in &self.maneuvers {
            let ok = match m {
                Maneuver::Turn { rate } => rate.is_finite() && *rate != 0.0,
                Maneuver::Straight => true,
                Maneuver::Accelerate { accel } => accel.is_finite(),
            };
            if !ok {
                return Err(Error::InvalidManeuverSpec(format!("{m:?}")));
            }
        }
        if !(self.dt > 0.0 && self.speed > 0.0 && self.obs_noise_std >= 0.0) || self.t < 2 {
            return Err(Error::Validation("invalid surrogate timing or noise".into()));
        }
        Ok(())
    }
}

/// Exact one-step update of `[p, v, a]` under a maneuver.
fn maneuver_step(m: Maneuver, s: &mut [f64; 6], dt: f64) {
    let (vx, vy) = (s[2], s[3]);
    match m {
        Maneuver::Turn { rate: w } => {
            let (sn, cs) = (w * dt).sin_cos();
            s[0] += (sn * vx - (1.0 - cs) * vy) / w;
            s[1] += ((1.0 - cs) * vx + sn * vy) / w;
            s[2] = cs * vx - sn * vy;
            s[3] = sn * vx + cs * vy;
            s[4] = -w * s[3];
            s[5] = w * s[2];
        }
        Maneuver::Straight => {
            s[0] += vx * dt;
            s[1] += vy * dt;
            s[4] = 0.0;
            s[5] = 0.0;
        }
        Maneuver::Accelerate { accel } => {
            let sp = vx.hypot(vy);
            let (ux, uy) = (vx / sp, vy / sp);
            s[0] += vx * dt + 0.5 * accel * ux * dt * dt;
            s[1] += vy * dt + 0.5 * accel * uy * dt * dt;
            s[2] += accel * ux * dt;
            s[3] += accel * uy * dt;
            s[4] = accel * ux;
            s[5] = accel * uy;
        }
    }
}

/// `n` trajectories; states T×6 `[p, v, a]`, labels index `maneuvers`.
pub fn simulate_surrogate_modes(
    cfg: &SurrogateConfig,
    n: usize,
    seed: u64,
) -> Result<TrajectoryBatch> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: f64 = cfg.weights.iter().sum();
    let probs: Vec<f64> = cfg.weights.iter().map(|w| w / total).collect();
    let noise = Normal::new(0.0, cfg.obs_noise_std).map_err(|e| Error::Validation(e.to_string()))?;
    let mut trajectories = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = crate::ssm::categorical_from_uniform(&probs, rng.random());
        let m = cfg.maneuvers[label];
        let heading = rng.random::<f64>() * std::f64::consts::TAU;
        let mut s = [0.0, 0.0, cfg.speed * heading.cos(), cfg.speed * heading.sin(), 0.0, 0.0];
        // settle the acceleration slots for the chosen maneuver
        let mut probe = s;
        maneuver_step(m, &mut probe, 0.0);
        s[4] = probe[4];
        s[5] = probe[5];
        let mut x = Mat::zeros(cfg.t, 6);
        let mut y = Mat::zeros(cfg.t, 2);
        for t in 0..cfg.t {
            x.row_mut(t).copy_from_slice(&s);
            for j in 0..2 {
                y[(t, j)] = s[j] + noise.sample(&mut rng);
            }
            maneuver_step(m, &mut s, cfg.dt);
        }
        trajectories.push(y);
        states.push(x);
        labels.push(label);
    }
    let mut batch = TrajectoryBatch::new(trajectories, cfg.dt)?;
    batch.labels = Some(labels);
    batch.states = Some(states);
    Ok(batch)
}

pub fn surrogate_split(cfg: &SurrogateConfig) -> Result<(TrajectoryBatch, TrajectoryBatch)> {
    Ok((
        simulate_surrogate_modes(cfg, cfg.n_train, cfg.seed)?,
        simulate_surrogate_modes(cfg, cfg.n_test.max(1), split_seed(cfg.seed))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn straight_line_positions() {
        let p = dubins_path([0.0, 0.0, 0.0], 0.0, 1.0, 0.1, 11);
        for n in 0..11 {
            assert_abs_diff_eq!(p[(n, 0)], n as f64 * 0.1, epsilon = 1e-12);
            assert_eq!(p[(n, 1)], 0.0);
        }
        let p = dubins_path([0.0, 0.0, 0.0], 0.0, 1.0, 0.1, 101);
        assert_abs_diff_eq!(p[(100, 0)], 10.0, epsilon = 1e-9);
    }

    #[test]
    fn euler_circle_radius_close_to_one() {
        // One revolution at u = 1 takes 2π / 0.1 ≈ 63 steps. The Euler path
        // is a polygon whose centre sits half a step ahead of (0, 1), so
        // measure the radius about the vertex centroid.
        let steps = 63;
        let p = dubins_path([0.0, 0.0, 0.0], 1.0, 1.0, 0.1, steps);
        let cx = p.column(0).sum() / steps as f64;
        let cy = p.column(1).sum() / steps as f64;
        assert!((cy - 1.0).abs() < 0.05);
        for n in 0..steps {
            let r = ((p[(n, 0)] - cx).powi(2) + (p[(n, 1)] - cy).powi(2)).sqrt();
            assert!((r - 1.0).abs() < 0.05, "step {n}: r = {r}");
        }
    }

    #[test]
    fn noise_free_dubins_matches_path() {
        let cfg = DubinsConfig {
            process_noise_std: 0.0,
            obs_noise_std: 0.0,
            ..DubinsConfig::default()
        };
        let b = simulate_dubins(&cfg, 5, 3).unwrap();
        let states = b.states.as_ref().unwrap();
        for (n, y) in b.trajectories.iter().enumerate() {
            let u = DUBINS_CONTROLS[b.labels.as_ref().unwrap()[n]];
            let p = dubins_path([0.0, 0.0, states[n][(0, 2)]], u, 1.0, 0.1, 20);
            for t in 0..20 {
                assert_eq!(y[(t, 0)], p[(t, 0)]);
                assert_eq!(y[(t, 1)], p[(t, 1)]);
            }
        }
    }

    #[test]
    fn observation_noise_variance() {
        let b = simulate_dubins(&DubinsConfig::default(), 500, 1).unwrap();
        let states = b.states.unwrap();
        let mut r = Vec::new();
        for (y, x) in b.trajectories.iter().zip(&states) {
            for t in 0..y.nrows() {
                for j in 0..2 {
                    r.push(y[(t, j)] - x[(t, j)]);
                }
            }
        }
        let n = r.len() as f64;
        let var = r.iter().map(|v| v * v).sum::<f64>() / n;
        let se = 0.1 * (2.0 / n).sqrt();
        assert!((var - 0.1).abs() < 3.0 * se, "{var}");
    }

    #[test]
    fn seeds_are_deterministic() {
        let cfg = DubinsConfig::default();
        assert_eq!(simulate_dubins(&cfg, 4, 9).unwrap(), simulate_dubins(&cfg, 4, 9).unwrap());
        assert_ne!(simulate_dubins(&cfg, 4, 9).unwrap(), simulate_dubins(&cfg, 4, 10).unwrap());
        let s = SurrogateConfig::default();
        assert_eq!(
            simulate_surrogate_modes(&s, 4, 9).unwrap(),
            simulate_surrogate_modes(&s, 4, 9).unwrap()
        );
    }

    #[test]
    fn rejects_short_windows() {
        let cfg = DubinsConfig {
            t: 1,
            ..DubinsConfig::default()
        };
        assert!(matches!(simulate_dubins(&cfg, 1, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn surrogate_straight_has_constant_velocity() {
        let cfg = SurrogateConfig {
            maneuvers: vec![Maneuver::Straight, Maneuver::Turn { rate: 0.1 }],
            weights: vec![1.0, 0.0],
            obs_noise_std: 0.0,
            ..SurrogateConfig::default()
        };
        let b = simulate_surrogate_modes(&cfg, 3, 2).unwrap();
        for x in b.states.unwrap() {
            for t in 1..x.nrows() {
                assert_eq!(x[(t, 2)], x[(0, 2)]);
                assert_eq!(x[(t, 3)], x[(0, 3)]);
            }
        }
    }

    #[test]
    fn surrogate_turn_keeps_speed() {
        let cfg = SurrogateConfig {
            maneuvers: vec![Maneuver::Turn { rate: 0.07 }, Maneuver::Straight],
            weights: vec![1.0, 0.0],
            t: 200,
            ..SurrogateConfig::default()
        };
        let b = simulate_surrogate_modes(&cfg, 2, 4).unwrap();
        for x in b.states.unwrap() {
            for t in 0..x.nrows() {
                let sp = x[(t, 2)].hypot(x[(t, 3)]);
                assert!((sp - 60.0).abs() < 1e-9, "{sp}");
            }
        }
    }

    #[test]
    fn surrogate_label_balance() {
        let cfg = SurrogateConfig {
            weights: vec![0.5, 0.3, 0.2],
            ..SurrogateConfig::default()
        };
        let n = 3000;
        let b = simulate_surrogate_modes(&cfg, n, 5).unwrap();
        let labels = b.labels.unwrap();
        for (l, p) in [0.5, 0.3, 0.2].iter().enumerate() {
            let f = labels.iter().filter(|x| **x == l).count() as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((f - p).abs() < 3.0 * se, "{l}: {f}");
        }
    }

    #[test]
    fn invalid_maneuvers_rejected() {
        let one = SurrogateConfig {
            maneuvers: vec![Maneuver::Straight],
            weights: vec![1.0],
            ..SurrogateConfig::default()
        };
        assert!(matches!(
            simulate_surrogate_modes(&one, 1, 0),
            Err(Error::InvalidManeuverSpec(_))
        ));
        let bad = SurrogateConfig {
            maneuvers: vec![Maneuver::Straight, Maneuver::Turn { rate: f64::NAN }],
            weights: vec![1.0, 1.0],
            ..SurrogateConfig::default()
        };
        assert!(simulate_surrogate_modes(&bad, 1, 0).is_err());
    }
}
