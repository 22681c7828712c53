//! Experiment configuration: a flat TOML document whose keys override a
//! named profile.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::data::TrajectoryBatch;
use crate::filtering::{Resampler, TrackConfig};
use crate::objective::{MiInitialState, TrainingConfig, TransitionKind};
use crate::simulators::{dubins_split, surrogate_split, DubinsConfig, Maneuver, SurrogateConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Dubins,
    SurrogateFlight,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Simulator {
    Dubins(DubinsConfig),
    Surrogate(SurrogateConfig),
}

impl Simulator {
    pub fn generate(&self) -> Result<(TrajectoryBatch, TrajectoryBatch)> {
        match self {
            Simulator::Dubins(c) => dubins_split(c),
            Simulator::Surrogate(c) => surrogate_split(c),
        }
    }

    pub fn speed(&self) -> f64 {
        match self {
            Simulator::Dubins(c) => c.speed,
            Simulator::Surrogate(c) => c.speed,
        }
    }

    fn set_seed(&mut self, seed: u64) {
        match self {
            Simulator::Dubins(c) => c.seed = seed,
            Simulator::Surrogate(c) => c.seed = seed,
        }
    }
}

/// How the MI weight is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Lambda {
    Fixed(f64),
    /// Multiple of `N·T` for the training set at hand.
    PerNt(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    pub recon_samples: usize,
    pub mi_samples: usize,
    pub predict_steps: usize,
    pub predict_warmup: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            recon_samples: 30,
            mi_samples: 300,
            predict_steps: 100,
            predict_warmup: 20,
        }
    }
}

/// Fully resolved experiment settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub simulator: Simulator,
    pub training: TrainingConfig,
    pub lambda: Lambda,
    pub track: TrackConfig,
    pub eval: EvalSettings,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
}

/// Keys accepted in a config file. Every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    profile: Option<Profile>,
    seed: Option<u64>,
    // simulation
    n_train: Option<usize>,
    n_test: Option<usize>,
    t: Option<usize>,
    dt: Option<f64>,
    speed: Option<f64>,
    process_noise_std: Option<f64>,
    obs_noise_std: Option<f64>,
    maneuvers: Option<Vec<Maneuver>>,
    maneuver_weights: Option<Vec<f64>>,
    // model and training
    k: Option<usize>,
    modes: Option<usize>,
    lambda: Option<f64>,
    lambda_nt: Option<f64>,
    window: Option<usize>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    gumbel_start: Option<f64>,
    gumbel_end: Option<f64>,
    gumbel_decay: Option<f64>,
    straight_through: Option<bool>,
    mi_samples: Option<usize>,
    mi_initial_state: Option<MiInitialState>,
    num_inducing: Option<usize>,
    order: Option<usize>,
    hidden: Option<usize>,
    classifier_hidden: Option<usize>,
    transition_stay: Option<f64>,
    obs_noise_var: Option<f64>,
    learn_obs_noise: Option<bool>,
    x1_position_std: Option<f64>,
    x1_derivative_std: Option<f64>,
    mean_init_std: Option<f64>,
    // tracking
    particles: Option<usize>,
    track_stay: Option<f64>,
    resampler: Option<Resampler>,
    // evaluation
    recon_samples: Option<usize>,
    eval_mi_samples: Option<usize>,
    predict_steps: Option<usize>,
    predict_warmup: Option<usize>,
    // files, relative to the config file
    train_data: Option<PathBuf>,
    test_data: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Dubins => Self {
                profile: p,
                simulator: Simulator::Dubins(DubinsConfig::default()),
                training: TrainingConfig::default(),
                lambda: Lambda::PerNt(1.0),
                track: TrackConfig::default(),
                eval: EvalSettings::default(),
                train_data: None,
                test_data: None,
            },
            Profile::SurrogateFlight => {
                let sim = SurrogateConfig::default();
                let training = TrainingConfig {
                    k: 8,
                    num_inducing: 50,
                    order: 3,
                    window: sim.t,
                    obs_noise_var: sim.obs_noise_std.powi(2),
                    x1_position_std: 100.0,
                    x1_derivative_std: 100.0,
                    ..TrainingConfig::default()
                };
                Self {
                    profile: p,
                    simulator: Simulator::Surrogate(sim),
                    training,
                    lambda: Lambda::PerNt(10.0),
                    track: TrackConfig::default(),
                    eval: EvalSettings::default(),
                    train_data: None,
                    test_data: None,
                }
            }
        }
    }

    /// Parse TOML text. Relative file keys resolve against `base`.
    pub fn from_toml(text: &str, base: Option<&Path>) -> Result<Self> {
        Self::parse(text, "<config>", base)
    }

    fn parse(text: &str, name: &str, base: Option<&Path>) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::Parse { path: name.to_string(), line, message: e.message().to_string() }
        })?;
        let mut cfg = Self::profile(raw.profile.unwrap_or(Profile::Dubins));
        cfg.apply(raw, base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string(), path.parent())
    }

    fn apply(&mut self, r: RawConfig, base: Option<&Path>) -> Result<()> {
        macro_rules! set {
            ($src:expr => $dst:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        match &mut self.simulator {
            Simulator::Dubins(c) => {
                set!(r.n_train => c.n_train);
                set!(r.n_test => c.n_test);
                set!(r.t => c.t);
                set!(r.dt => c.dt);
                set!(r.speed => c.speed);
                set!(r.process_noise_std => c.process_noise_std);
                set!(r.obs_noise_std => c.obs_noise_std);
                if r.maneuvers.is_some() || r.maneuver_weights.is_some() {
                    return Err(Error::Validation("maneuvers apply to the surrogate-flight profile only".into()));
                }
            }
            Simulator::Surrogate(c) => {
                set!(r.n_train => c.n_train);
                set!(r.n_test => c.n_test);
                set!(r.t => c.t);
                set!(r.dt => c.dt);
                set!(r.speed => c.speed);
                set!(r.obs_noise_std => c.obs_noise_std);
                if let Some(m) = r.maneuvers {
                    c.weights = vec![1.0; m.len()];
                    c.maneuvers = m;
                }
                set!(r.maneuver_weights => c.weights);
                if r.process_noise_std.is_some() {
                    return Err(Error::Validation("the surrogate simulator has no process noise".into()));
                }
            }
        }
        if let Some(s) = r.seed {
            self.set_seed(s);
        }
        let sim_t = self.simulator_t();
        let tc = &mut self.training;
        set!(r.k => tc.k);
        set!(r.modes => tc.modes);
        set!(r.window => tc.window);
        set!(r.epochs => tc.epochs);
        set!(r.batch_size => tc.batch_size);
        set!(r.lr => tc.adam.lr);
        set!(r.gumbel_start => tc.gumbel.start);
        set!(r.gumbel_end => tc.gumbel.end);
        set!(r.gumbel_decay => tc.gumbel.decay);
        set!(r.straight_through => tc.gumbel.straight_through);
        set!(r.mi_samples => tc.mi_samples);
        set!(r.mi_initial_state => tc.mi_initial_state);
        set!(r.num_inducing => tc.num_inducing);
        set!(r.order => tc.order);
        set!(r.hidden => tc.net.hidden);
        set!(r.classifier_hidden => tc.net.classifier_hidden);
        set!(r.obs_noise_var => tc.obs_noise_var);
        set!(r.learn_obs_noise => tc.learn_obs_noise);
        set!(r.x1_position_std => tc.x1_position_std);
        set!(r.x1_derivative_std => tc.x1_derivative_std);
        set!(r.mean_init_std => tc.mean_init_std);
        if let Some(stay) = r.transition_stay {
            tc.transition = TransitionKind::Sticky { stay };
        }
        if r.t.is_some() && r.window.is_none() {
            tc.window = sim_t;
        }
        match (r.lambda, r.lambda_nt) {
            (Some(_), Some(_)) => return Err(Error::Validation("set lambda or lambda_nt, not both".into())),
            (Some(l), None) => self.lambda = Lambda::Fixed(l),
            (None, Some(f)) => self.lambda = Lambda::PerNt(f),
            (None, None) => {}
        }
        set!(r.particles => self.track.particles);
        if let Some(s) = r.track_stay {
            self.track.stay = Some(s);
        }
        set!(r.resampler => self.track.resampler);
        set!(r.recon_samples => self.eval.recon_samples);
        set!(r.eval_mi_samples => self.eval.mi_samples);
        set!(r.predict_steps => self.eval.predict_steps);
        set!(r.predict_warmup => self.eval.predict_warmup);
        let resolve = |p: PathBuf| -> Result<PathBuf> {
            let full = match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            };
            if !full.exists() {
                return Err(Error::Validation(format!("referenced file {} does not exist", full.display())));
            }
            Ok(full)
        };
        self.train_data = r.train_data.map(resolve).transpose()?;
        self.test_data = r.test_data.map(resolve).transpose()?;
        Ok(())
    }

    fn simulator_t(&self) -> usize {
        match &self.simulator {
            Simulator::Dubins(c) => c.t,
            Simulator::Surrogate(c) => c.t,
        }
    }

    /// Seed shared by simulation and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.simulator.set_seed(seed);
        self.training.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        match &self.simulator {
            Simulator::Dubins(c) => c.validate()?,
            Simulator::Surrogate(c) => c.validate()?,
        }
        self.training.validate()?;
        if self.training.window > self.simulator_t() {
            return Err(Error::Validation(format!(
                "window {} exceeds the simulated length {}",
                self.training.window,
                self.simulator_t()
            )));
        }
        match self.lambda {
            Lambda::Fixed(l) | Lambda::PerNt(l) if !(l >= 0.0) => {
                return Err(Error::Validation("lambda must be non-negative".into()))
            }
            _ => {}
        }
        if self.track.particles == 0 {
            return Err(Error::Validation("particles must be positive".into()));
        }
        if let Some(s) = self.track.stay {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Validation("track_stay must lie in [0, 1]".into()));
            }
        }
        if self.eval.recon_samples == 0 || self.eval.predict_warmup < 2 {
            return Err(Error::Validation("recon_samples ≥ 1 and predict_warmup ≥ 2 are required".into()));
        }
        Ok(())
    }

    /// Training config with λ resolved for `n` trajectories.
    pub fn training_for(&self, n: usize) -> TrainingConfig {
        let mut tc = self.training.clone();
        tc.lambda = Some(match self.lambda {
            Lambda::Fixed(l) => l,
            Lambda::PerNt(f) => f * (n * tc.window) as f64,
        });
        tc
    }
}
