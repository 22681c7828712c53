//! Particle filtering with a trained model: the bootstrap step with
//! ESS-triggered resampling and the encoder-initialized tracking loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Mat, Tape};
use crate::inference::InferenceNets;
use crate::ssm::{categorical_from_uniform, one_hot_rows, standard_normal, ModeTransitionMatrix, MultiModalSSM};
use crate::{Error, Result};

/// Weighted particle approximation of `p(x_t, c_t | y_{1:t})`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSet {
    /// K×S, one particle per row.
    pub states: Mat,
    pub codes: Vec<usize>,
    pub weights: Vec<f64>,
}

impl ParticleSet {
    pub fn new(states: Mat, codes: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        let set = Self { states, codes, weights };
        set.validate()?;
        Ok(set)
    }

    /// Equal weights `1/K`.
    pub fn uniform(states: Mat, codes: Vec<usize>) -> Result<Self> {
        let k = states.nrows();
        Self::new(states, codes, vec![1.0 / k.max(1) as f64; k])
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.states.nrows();
        if k == 0 {
            return Err(Error::Validation("a particle set needs K ≥ 1".into()));
        }
        if self.codes.len() != k || self.weights.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "{k} states, {} codes, {} weights",
                self.codes.len(),
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Validation("particle weights must be finite and non-negative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::Validation(format!("particle weights sum to {total}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }

    /// Weighted mean state.
    pub fn mean_state(&self) -> Vec<f64> {
        (0..self.states.ncols())
            .map(|j| {
                self.weights
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * self.states[(k, j)])
                    .sum()
            })
            .collect()
    }

    /// Weighted marginal distribution of the code over `l` modes.
    pub fn code_marginal(&self, l: usize) -> Vec<f64> {
        let mut out = vec![0.0; l];
        for (c, w) in self.codes.iter().zip(&self.weights) {
            if *c < l {
                out[*c] += w;
            }
        }
        out
    }

    pub fn ess(&self) -> Result<f64> {
        ess(&self.weights)
    }
}

/// Effective sample size `1 / Σ w²` of normalized weights.
pub fn ess(weights: &[f64]) -> Result<f64> {
    let sq: f64 = weights.iter().map(|w| w * w).sum();
    if !(sq > 0.0) {
        return Err(Error::ZeroWeights);
    }
    Ok(1.0 / sq)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Resampler {
    #[default]
    Multinomial,
    Systematic,
}

/// Ancestor indices for `k` offspring drawn according to `weights`.
pub fn resample_indices<R: Rng>(weights: &[f64], k: usize, scheme: Resampler, rng: &mut R) -> Vec<usize> {
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        acc += w;
        cdf.push(acc);
    }
    let total = acc;
    let find = |u: f64| cdf.partition_point(|c| *c <= u * total).min(weights.len() - 1);
    match scheme {
        Resampler::Multinomial => (0..k).map(|_| find(rng.random::<f64>())).collect(),
        Resampler::Systematic => {
            let u0: f64 = rng.random();
            (0..k).map(|i| find((i as f64 + u0) / k as f64)).collect()
        }
    }
}

/// Outcome of one filter step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub particles: ParticleSet,
    /// ESS after reweighting, before any resampling.
    pub ess: f64,
    pub resampled: bool,
    /// Every particle had zero likelihood and weights were reset.
    pub degenerate: bool,
}

/// Multiply weights by `exp(log_lik)`, renormalize, and resample when
/// `ESS ≤ K/2`.
pub fn reweight<R: Rng>(
    mut particles: ParticleSet,
    log_lik: &[f64],
    scheme: Resampler,
    rng: &mut R,
) -> Result<StepReport> {
    let k = particles.len();
    if log_lik.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "{} log-likelihoods for {k} particles",
            log_lik.len()
        )));
    }
    let logw: Vec<f64> = particles
        .weights
        .iter()
        .zip(log_lik)
        .map(|(w, l)| if *w > 0.0 { w.ln() + l } else { f64::NEG_INFINITY })
        .collect();
    let top = logw.iter().copied().filter(|v| !v.is_nan()).fold(f64::NEG_INFINITY, f64::max);
    let mut degenerate = false;
    if top.is_finite() {
        let un: Vec<f64> = logw
            .iter()
            .map(|v| if v.is_nan() { 0.0 } else { (v - top).exp() })
            .collect();
        let total: f64 = un.iter().sum();
        particles.weights = un.iter().map(|v| v / total).collect();
    } else {
        log::warn!("all particle weights vanished; resetting to uniform");
        particles.weights = vec![1.0 / k as f64; k];
        degenerate = true;
    }
    let e = ess(&particles.weights)?;
    let resampled = e <= k as f64 / 2.0;
    if resampled {
        let idx = resample_indices(&particles.weights, k, scheme, rng);
        particles.states = Mat::from_fn(k, particles.states.ncols(), |i, j| particles.states[(idx[i], j)]);
        particles.codes = idx.iter().map(|i| particles.codes[*i]).collect();
        particles.weights = vec![1.0 / k as f64; k];
    }
    Ok(StepReport {
        particles,
        ess: e,
        resampled,
        degenerate,
    })
}

/// Propagate every particle one step: draw the next code from the model's
/// transition matrix, then the next state from the mode's transition.
pub fn propagate<R: Rng>(particles: &ParticleSet, model: &MultiModalSSM, rng: &mut R) -> Result<ParticleSet> {
    let k = particles.len();
    let l = model.num_modes();
    if particles.states.ncols() != model.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "particles of width {} for a state of {}",
            particles.states.ncols(),
            model.state_dim()
        )));
    }
    if let Some(c) = particles.codes.iter().find(|c| **c >= l) {
        return Err(Error::IndexOutOfRange { index: *c, len: l });
    }
    let codes: Vec<usize> = if model.transition.is_identity() {
        particles.codes.clone()
    } else {
        particles
            .codes
            .iter()
            .map(|c| {
                let row: Vec<f64> = model.transition.matrix().row(*c).iter().copied().collect();
                categorical_from_uniform(&row, rng.random())
            })
            .collect()
    };
    let mut tape = Tape::new();
    let sv = model.record_constant(&mut tape)?;
    let x = tape.constant(particles.states.clone());
    let c = tape.constant(one_hot_rows(&codes, l));
    let eps = tape.constant(standard_normal(rng, k, model.layout.gp_output_dim()));
    let next = sv.step(&mut tape, x, c, eps);
    Ok(ParticleSet {
        states: tape.value(next).clone(),
        codes,
        weights: particles.weights.clone(),
    })
}

/// Per-particle `log p(y | x)`.
pub fn log_likelihoods(particles: &ParticleSet, y: &[f64], model: &MultiModalSSM) -> Result<Vec<f64>> {
    if y.len() != model.obs_dim() {
        return Err(Error::DimensionMismatch(format!(
            "observation of length {} for {} observed dims",
            y.len(),
            model.obs_dim()
        )));
    }
    let var = model.obs.noise_var();
    let norm: f64 = var.iter().map(|v| -0.5 * (2.0 * std::f64::consts::PI * v).ln()).sum();
    Ok((0..particles.len())
        .map(|k| {
            norm - model
                .obs
                .indices
                .iter()
                .zip(y)
                .zip(&var)
                .map(|((i, yv), v)| (yv - particles.states[(k, *i)]).powi(2) / (2.0 * v))
                .sum::<f64>()
        })
        .collect())
}

/// One bootstrap filter step.
pub fn pf_step<R: Rng>(
    particles: ParticleSet,
    y: &[f64],
    model: &MultiModalSSM,
    scheme: Resampler,
    rng: &mut R,
) -> Result<StepReport> {
    let moved = propagate(&particles, model, rng)?;
    let ll = log_likelihoods(&moved, y, model)?;
    reweight(moved, &ll, scheme, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackConfig {
    pub particles: usize,
    /// Probability of staying in the current mode; the remainder is split
    /// evenly. `None` keeps the model's own matrix.
    pub stay: Option<f64>,
    pub resampler: Resampler,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            particles: 512,
            stay: Some(0.9),
            resampler: Resampler::Multinomial,
        }
    }
}

/// Filter summary at one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackRow {
    pub t: usize,
    pub mean: Vec<f64>,
    pub code_probs: Vec<f64>,
    pub ess: f64,
}

#[derive(Clone, Debug)]
pub struct TrackResult {
    pub rows: Vec<TrackRow>,
    pub particles: ParticleSet,
}

impl TrackResult {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let (s, l) = match self.rows.first() {
            Some(r) => (r.mean.len(), r.code_probs.len()),
            None => (0, 0),
        };
        let mut header = vec!["t".to_string()];
        header.extend((1..=s).map(|i| format!("x_{i}")));
        header.extend((1..=l).map(|i| format!("p_code_{i}")));
        header.push("ess".into());
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.t.to_string()];
            rec.extend(r.mean.iter().map(|v| v.to_string()));
            rec.extend(r.code_probs.iter().map(|v| v.to_string()));
            rec.push(r.ess.to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Validation(format!("csv: {e}"))
}

/// Track through an observation window. Particles start from the encoder
/// posterior of the first state and hard code draws from the classifier,
/// then the filter runs over the remaining observations.
pub fn track<R: Rng>(
    y: &Mat,
    model: &MultiModalSSM,
    nets: &InferenceNets,
    cfg: &TrackConfig,
    rng: &mut R,
) -> Result<TrackResult> {
    if y.nrows() < 2 {
        return Err(Error::Validation("tracking needs a window of at least 2 steps".into()));
    }
    if cfg.particles == 0 {
        return Err(Error::Validation("need at least one particle".into()));
    }
    if nets.state_dim != model.state_dim() || nets.num_modes != model.num_modes() {
        return Err(Error::DimensionMismatch("networks and model disagree on layout".into()));
    }
    let mut model = model.clone();
    if let Some(stay) = cfg.stay {
        let l = model.num_modes();
        model.transition = if l == 1 {
            ModeTransitionMatrix::identity(1)
        } else {
            ModeTransitionMatrix::sticky(l, stay)?
        };
    }
    let k = cfg.particles;
    let head = y.rows(0, nets.window.min(y.nrows())).into_owned();
    // the encoder shifts to the window start internally and reports world coordinates
    let (mu, var) = nets.encode_initial(&head)?;
    let probs = if head.nrows() == nets.window {
        let angle = rng.random::<f64>() * std::f64::consts::TAU;
        nets.classify_code(&head, angle)?
    } else {
        vec![1.0 / model.num_modes() as f64; model.num_modes()]
    };
    let eps = standard_normal(rng, k, model.state_dim());
    let states = Mat::from_fn(k, model.state_dim(), |i, j| mu[j] + var[j].sqrt() * eps[(i, j)]);
    let codes: Vec<usize> = (0..k).map(|_| categorical_from_uniform(&probs, rng.random())).collect();
    let mut particles = ParticleSet::uniform(states, codes)?;
    let ll = log_likelihoods(&particles, &row(y, 0), &model)?;
    let first = reweight(particles, &ll, cfg.resampler, rng)?;
    particles = first.particles;
    let l = model.num_modes();
    let mut rows = vec![TrackRow {
        t: 0,
        mean: particles.mean_state(),
        code_probs: particles.code_marginal(l),
        ess: first.ess,
    }];
    for t in 1..y.nrows() {
        let rep = pf_step(particles, &row(y, t), &model, cfg.resampler, rng)?;
        particles = rep.particles;
        rows.push(TrackRow {
            t,
            mean: particles.mean_state(),
            code_probs: particles.code_marginal(l),
            ess: rep.ess,
        });
    }
    Ok(TrackResult { rows, particles })
}

/// Track every trajectory of a batch on the current rayon pool.
/// Trajectory `i` uses stream `i` of a generator seeded with `seed`, so the
/// result does not depend on the thread count.
pub fn track_batch(
    trajectories: &[Mat],
    model: &MultiModalSSM,
    nets: &InferenceNets,
    cfg: &TrackConfig,
    seed: u64,
) -> Result<Vec<TrackResult>> {
    trajectories
        .par_iter()
        .enumerate()
        .map(|(i, y)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            track(y, model, nets, cfg, &mut rng)
        })
        .collect()
}

/// Filtered means mapped to the observed slots, one row per step.
pub fn tracked_observations(result: &TrackResult, model: &MultiModalSSM) -> Mat {
    let idx = &model.obs.indices;
    Mat::from_fn(result.rows.len(), idx.len(), |t, j| result.rows[t].mean[idx[j]])
}

fn row(y: &Mat, t: usize) -> Vec<f64> {
    y.row(t).iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(weights: Vec<f64>) -> ParticleSet {
        let k = weights.len();
        ParticleSet::new(Mat::from_fn(k, 1, |i, _| i as f64), vec![0; k], weights).unwrap()
    }

    #[test]
    fn ess_examples() {
        assert!((ess(&[0.125; 8]).unwrap() - 8.0).abs() < 1e-12);
        assert_eq!(ess(&[0.0, 1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(ess(&[0.5, 0.5, 0.0, 0.0]).unwrap(), 2.0);
        assert!(matches!(ess(&[0.0, 0.0]), Err(Error::ZeroWeights)));
    }

    #[test]
    fn constant_likelihood_keeps_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = vec![0.4, 0.3, 0.2, 0.1];
        let rep = reweight(set(w.clone()), &[-3.0; 4], Resampler::Multinomial, &mut rng).unwrap();
        assert!(!rep.resampled);
        for (a, b) in rep.particles.weights.iter().zip(&w) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn ess_at_half_triggers_resampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rep = reweight(set(vec![0.5, 0.5, 0.0, 0.0]), &[0.0; 4], Resampler::Multinomial, &mut rng).unwrap();
        assert_eq!(rep.ess, 2.0);
        assert!(rep.resampled);
        assert_eq!(rep.particles.weights, vec![0.25; 4]);
        assert!(rep.particles.states.iter().all(|v| *v < 2.0));
    }

    #[test]
    fn vanished_weights_fall_back_to_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rep = reweight(set(vec![0.25; 4]), &[f64::NEG_INFINITY; 4], Resampler::Multinomial, &mut rng).unwrap();
        assert!(rep.degenerate);
        assert_eq!(rep.particles.weights, vec![0.25; 4]);
    }

    #[test]
    fn resampling_is_unbiased() {
        let w = [0.05, 0.4, 0.15, 0.3, 0.1];
        let k = w.len();
        for scheme in [Resampler::Multinomial, Resampler::Systematic] {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let trials = 10_000;
            let mut counts = vec![0.0; k];
            let mut sq = vec![0.0; k];
            for _ in 0..trials {
                let mut c = vec![0.0; k];
                for i in resample_indices(&w, k, scheme, &mut rng) {
                    c[i] += 1.0;
                }
                for i in 0..k {
                    counts[i] += c[i];
                    sq[i] += c[i] * c[i];
                }
            }
            for i in 0..k {
                let mean = counts[i] / trials as f64;
                let var = sq[i] / trials as f64 - mean * mean;
                let se = (var / trials as f64).sqrt().max(1e-3);
                assert!((mean - k as f64 * w[i]).abs() < 3.0 * se, "{scheme:?} {i}: {mean}");
            }
        }
    }

    #[test]
    fn randomized_invariants_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = set(vec![0.125; 8]);
        for _ in 0..10_000 {
            let ll: Vec<f64> = (0..8).map(|_| rng.random::<f64>() * 20.0 - 10.0).collect();
            let scheme = if rng.random::<bool>() { Resampler::Multinomial } else { Resampler::Systematic };
            let rep = reweight(p, &ll, scheme, &mut rng).unwrap();
            assert!(rep.ess >= 1.0 - 1e-12 && rep.ess <= 8.0 + 1e-12);
            rep.particles.validate().unwrap();
            let e = rep.particles.ess().unwrap();
            assert!((1.0 - 1e-12..=8.0 + 1e-12).contains(&e));
            p = rep.particles;
        }
    }

    #[test]
    fn summaries_ignore_particle_order() {
        let p = ParticleSet::new(
            Mat::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            vec![0, 1, 1],
            vec![0.2, 0.3, 0.5],
        )
        .unwrap();
        let q = ParticleSet::new(
            Mat::from_row_slice(3, 2, &[5.0, 6.0, 1.0, 2.0, 3.0, 4.0]),
            vec![1, 0, 1],
            vec![0.5, 0.2, 0.3],
        )
        .unwrap();
        for (a, b) in p.mean_state().iter().zip(q.mean_state()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(p.code_marginal(2), q.code_marginal(2));
    }
}
