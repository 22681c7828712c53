//! Multi-modal state-space model: canonical integrator-chain layout, mode
//! Markov chain, mixture transition with explicit Euler propagation, and the
//! Gaussian position observation model.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Mat, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::gp::{self, ModeCache, ModeVars, SparseGPMode};

const LN_2PI: f64 = 1.8378770664093453;

/// Latent state as stacked position / velocity / acceleration blocks of
/// `spatial_dim` entries each; the GP drives the highest derivative.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CanonicalLayout {
    pub order: usize,
    pub spatial_dim: usize,
    pub gp_input_indices: Vec<usize>,
    pub gp_output_indices: Vec<usize>,
}

impl CanonicalLayout {
    /// Standard wiring: order 1 feeds positions to the GP; higher orders feed
    /// every derivative block and drive the last one.
    pub fn new(order: usize, spatial_dim: usize) -> Result<Self> {
        if !(1..=3).contains(&order) || spatial_dim == 0 {
            return Err(Error::Validation(format!(
                "unsupported layout order {order} / spatial dim {spatial_dim}"
            )));
        }
        let d = spatial_dim;
        let s = order * d;
        let gp_input_indices = if order == 1 {
            (0..d).collect()
        } else {
            (d..s).collect()
        };
        Ok(Self {
            order,
            spatial_dim,
            gp_input_indices,
            gp_output_indices: (s - d..s).collect(),
        })
    }

    pub fn state_dim(&self) -> usize {
        self.order * self.spatial_dim
    }

    pub fn gp_input_dim(&self) -> usize {
        self.gp_input_indices.len()
    }

    pub fn gp_output_dim(&self) -> usize {
        self.gp_output_indices.len()
    }

    pub fn position_indices(&self) -> Vec<usize> {
        (0..self.spatial_dim).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.state_dim();
        let d = self.spatial_dim;
        let expected: Vec<usize> = (s - d..s).collect();
        if self.gp_output_indices != expected {
            return Err(Error::Validation(
                "GP must drive the highest-derivative block".into(),
            ));
        }
        if self.gp_input_indices.is_empty() || self.gp_input_indices.iter().any(|i| *i >= s) {
            return Err(Error::Validation("GP input indices out of range".into()));
        }
        Ok(())
    }
}

/// Row-stochastic mode transition matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeTransitionMatrix {
    p: Mat,
}

impl ModeTransitionMatrix {
    pub fn new(p: Mat) -> Result<Self> {
        if !p.is_square() || p.nrows() == 0 {
            return Err(Error::Validation("transition matrix must be square".into()));
        }
        for i in 0..p.nrows() {
            let row = p.row(i);
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Validation(format!("row {i} has entries outside [0,1]")));
            }
            if (row.sum() - 1.0).abs() > 1e-12 {
                return Err(Error::Validation(format!("row {i} does not sum to 1")));
            }
        }
        Ok(Self { p })
    }

    pub fn identity(l: usize) -> Self {
        Self {
            p: Mat::identity(l, l),
        }
    }

    /// `stay` on the diagonal, the rest spread evenly.
    pub fn sticky(l: usize, stay: f64) -> Result<Self> {
        if l == 1 {
            return Ok(Self::identity(1));
        }
        let off = (1.0 - stay) / (l - 1) as f64;
        Self::new(Mat::from_fn(l, l, |i, j| if i == j { stay } else { off }))
    }

    pub fn uniform(l: usize) -> Self {
        Self {
            p: Mat::from_element(l, l, 1.0 / l as f64),
        }
    }

    /// Row-wise softmax of unconstrained logits.
    pub fn from_logits(logits: &Mat) -> Result<Self> {
        let mut tape = Tape::new();
        let v = tape.constant(logits.clone());
        let s = tape.softmax_rows(v);
        Self::new(tape.value(s).clone())
    }

    pub fn num_modes(&self) -> usize {
        self.p.nrows()
    }

    pub fn matrix(&self) -> &Mat {
        &self.p
    }

    pub fn is_identity(&self) -> bool {
        self.p == Mat::identity(self.p.nrows(), self.p.ncols())
    }
}

/// Distribution of `c_{t+1}` given `c_t`: row `c_t` of P.
pub fn code_step_distribution(c: usize, p: &ModeTransitionMatrix) -> Result<Vec<f64>> {
    if c >= p.num_modes() {
        return Err(Error::IndexOutOfRange {
            index: c,
            len: p.num_modes(),
        });
    }
    Ok(p.p.row(c).iter().copied().collect())
}

/// Inverse-CDF draw from a categorical given a uniform variate.
pub fn categorical_from_uniform(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

/// Ancestral code sequence of `len` entries starting at `c1`.
pub fn sample_code_sequence<R: Rng>(
    c1: usize,
    p: &ModeTransitionMatrix,
    len: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let mut codes = Vec::with_capacity(len);
    if len == 0 {
        return Ok(codes);
    }
    code_step_distribution(c1, p)?;
    codes.push(c1);
    while codes.len() < len {
        let row = code_step_distribution(*codes.last().unwrap(), p)?;
        let next = if p.is_identity() {
            *codes.last().unwrap()
        } else {
            categorical_from_uniform(&row, rng.random::<f64>())
        };
        codes.push(next);
    }
    Ok(codes)
}

/// `y = C x + ε_g` with C selecting state slots.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationModel {
    pub indices: Vec<usize>,
    pub log_noise_var: Vec<f64>,
    pub trainable: bool,
}

impl ObservationModel {
    pub fn new(indices: Vec<usize>, noise_var: &[f64], trainable: bool) -> Result<Self> {
        if indices.len() != noise_var.len() || indices.is_empty() {
            return Err(Error::Validation("one noise variance per observed slot".into()));
        }
        if noise_var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Validation("observation noise must be positive".into()));
        }
        Ok(Self {
            indices,
            log_noise_var: noise_var.iter().map(|v| v.ln()).collect(),
            trainable,
        })
    }

    pub fn dim(&self) -> usize {
        self.indices.len()
    }

    pub fn noise_var(&self) -> Vec<f64> {
        self.log_noise_var.iter().map(|v| v.exp()).collect()
    }

    /// Selection matrix, one 1 per row.
    pub fn c_matrix(&self, state_dim: usize) -> Mat {
        let mut c = Mat::zeros(self.dim(), state_dim);
        for (r, i) in self.indices.iter().enumerate() {
            c[(r, *i)] = 1.0;
        }
        c
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.indices.iter().map(|i| x[*i]).collect()
    }
}

/// Gaussian log-density of `y` under `N(C x, diag noise_var)`.
pub fn observation_log_likelihood(y: &[f64], x: &[f64], obs: &ObservationModel) -> Result<f64> {
    if y.len() != obs.dim() || obs.indices.iter().any(|i| *i >= x.len()) {
        return Err(Error::DimensionMismatch(format!(
            "observation of length {} / state of length {} for {} observed slots",
            y.len(),
            x.len(),
            obs.dim()
        )));
    }
    Ok(y.iter()
        .zip(obs.project(x))
        .zip(&obs.log_noise_var)
        .map(|((yi, mi), lv)| -0.5 * (LN_2PI + lv + (yi - mi).powi(2) / lv.exp()))
        .sum())
}

/// The full generative model.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalSSM {
    pub modes: Vec<SparseGPMode>,
    pub transition: ModeTransitionMatrix,
    pub obs: ObservationModel,
    pub layout: CanonicalLayout,
    pub dt: f64,
}

/// Gaussian over the next state.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianState {
    pub mean: Vec<f64>,
    pub cov: Mat,
}

impl MultiModalSSM {
    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn state_dim(&self) -> usize {
        self.layout.state_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs.dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if self.modes.is_empty() || self.modes.len() != self.transition.num_modes() {
            return Err(Error::Validation(format!(
                "{} modes but a {}x{} transition matrix",
                self.modes.len(),
                self.transition.num_modes(),
                self.transition.num_modes()
            )));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Validation("dt must be positive".into()));
        }
        for m in &self.modes {
            m.validate()?;
            if m.input_dim() != self.layout.gp_input_dim()
                || m.output_dim() != self.layout.gp_output_dim()
            {
                return Err(Error::Validation("mode dimensions disagree with layout".into()));
            }
        }
        if self.obs.indices.iter().any(|i| *i >= self.state_dim()) {
            return Err(Error::Validation("observed slot outside the state".into()));
        }
        Ok(())
    }

    /// Trainable arrays: every mode, then the observation log-variances when
    /// trainable.
    pub fn push_params(&self, params: &mut ParamSet) {
        for (l, m) in self.modes.iter().enumerate() {
            m.push_params(&format!("mode{l}"), params);
        }
        if self.obs.trainable {
            params.push(
                "obs.log_var",
                Mat::from_row_slice(1, self.obs.dim(), &self.obs.log_noise_var),
            );
        }
    }

    /// Number of arrays `push_params` appends.
    pub fn param_count(&self) -> usize {
        self.modes.len() * SparseGPMode::PARAM_COUNT + usize::from(self.obs.trainable)
    }

    /// Copy values back from the `push_params` layout.
    pub fn load_params(&mut self, values: &[Mat]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} model arrays, got {}",
                self.param_count(),
                values.len()
            )));
        }
        for (l, chunk) in values
            .chunks(SparseGPMode::PARAM_COUNT)
            .take(self.modes.len())
            .enumerate()
        {
            self.modes[l] = SparseGPMode::from_param_slice(chunk)?;
        }
        if self.obs.trainable {
            let last = values.last().unwrap();
            self.obs.log_noise_var = last.iter().copied().collect();
        }
        Ok(())
    }

    /// Record the model as constants.
    pub fn record_constant(&self, tape: &mut Tape) -> Result<SsmVars> {
        let modes = self.modes.iter().map(|m| m.record_constant(tape)).collect();
        let obs_log_var = tape.row(&self.obs.log_noise_var);
        SsmVars::assemble(tape, self, modes, obs_log_var)
    }

    /// Record with gradients, from vars in the `push_params` layout.
    pub fn record_params(&self, tape: &mut Tape, vars: &[Var]) -> Result<SsmVars> {
        assert_eq!(vars.len(), self.param_count());
        let modes = vars
            .chunks(SparseGPMode::PARAM_COUNT)
            .take(self.modes.len())
            .map(|c| ModeVars::from_param_vars(tape, c))
            .collect();
        let obs_log_var = if self.obs.trainable {
            *vars.last().unwrap()
        } else {
            tape.row(&self.obs.log_noise_var)
        };
        SsmVars::assemble(tape, self, modes, obs_log_var)
    }

    /// Moments of `x_{t+1}` given `x_t` and mode `c`.
    pub fn transition_moments(&self, x: &[f64], c: usize) -> Result<GaussianState> {
        if c >= self.num_modes() {
            return Err(Error::IndexOutOfRange {
                index: c,
                len: self.num_modes(),
            });
        }
        if x.len() != self.state_dim() {
            return Err(Error::DimensionMismatch(format!(
                "state of length {} for layout of {}",
                x.len(),
                self.state_dim()
            )));
        }
        let gin: Vec<f64> = self.layout.gp_input_indices.iter().map(|i| x[*i]).collect();
        let mode = &self.modes[c];
        let (r, v) = mode.predict_moments(&gin)?;
        let deriv = self.derivative(x, &r);
        let mean: Vec<f64> = x.iter().zip(&deriv).map(|(a, d)| a + self.dt * d).collect();
        let s = self.state_dim();
        let mut cov = Mat::zeros(s, s);
        let dt2 = self.dt * self.dt;
        for (k, idx) in self.layout.gp_output_indices.iter().enumerate() {
            cov[(*idx, *idx)] = dt2 * (v * mode.sigma()[k] + mode.process_noise()[k]);
        }
        Ok(GaussianState { mean, cov })
    }

    fn derivative(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        let d = self.layout.spatial_dim;
        let s = self.state_dim();
        (0..s)
            .map(|i| if i + d < s { x[i + d] } else { g[i + d - s] })
            .collect()
    }

    /// Noise-free observation of a state.
    pub fn observe_mean(&self, x: &[f64]) -> Vec<f64> {
        self.obs.project(x)
    }

    /// Ancestral sample of `y_{1:T}` with `T = codes.len() + 1`.
    pub fn generate_trajectory<R: Rng>(
        &self,
        x1: &[f64],
        codes: &[usize],
        rng: &mut R,
    ) -> Result<Rollout> {
        if codes.is_empty() {
            return Err(Error::Validation("need T ≥ 2 (at least one code)".into()));
        }
        let x0 = Mat::from_row_slice(1, x1.len(), x1);
        let y0 = self.observe_batch(&x0, rng);
        let mut rest = self.propagate_observe(x1, codes, rng)?;
        rest.states.insert(0, x1.to_vec());
        rest.observations
            .insert(0, y0.row(0).iter().copied().collect());
        Ok(rest)
    }

    /// Continue from `x` through `codes`, drawing transition noise then
    /// observation noise at each step. Returns the `codes.len()` new states
    /// and observations.
    pub fn propagate_observe<R: Rng>(
        &self,
        x: &[f64],
        codes: &[usize],
        rng: &mut R,
    ) -> Result<Rollout> {
        if x.len() != self.state_dim() {
            return Err(Error::DimensionMismatch(format!(
                "state of length {} for layout of {}",
                x.len(),
                self.state_dim()
            )));
        }
        let mut tape = Tape::new();
        let sv = self.record_constant(&mut tape)?;
        let mut cur = tape.constant(Mat::from_row_slice(1, x.len(), x));
        let mut out = Rollout::default();
        for &c in codes {
            if c >= self.num_modes() {
                return Err(Error::IndexOutOfRange {
                    index: c,
                    len: self.num_modes(),
                });
            }
            let onehot = tape.constant(one_hot_rows(&[c], self.num_modes()));
            let eps = tape.constant(standard_normal(rng, 1, self.layout.gp_output_dim()));
            cur = sv.step(&mut tape, cur, onehot, eps);
            let state = tape.value(cur).clone();
            let y = self.observe_batch(&state, rng);
            out.states.push(state.row(0).iter().copied().collect());
            out.observations.push(y.row(0).iter().copied().collect());
        }
        Ok(out)
    }

    /// `C x + noise` for every row of `x`.
    pub fn observe_batch<R: Rng>(&self, x: &Mat, rng: &mut R) -> Mat {
        let sd: Vec<f64> = self.obs.noise_var().iter().map(|v| v.sqrt()).collect();
        let eps = standard_normal(rng, x.nrows(), self.obs.dim());
        Mat::from_fn(x.nrows(), self.obs.dim(), |i, j| {
            x[(i, self.obs.indices[j])] + sd[j] * eps[(i, j)]
        })
    }
}

/// States and observations from a rollout, one `Vec` per time step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Rollout {
    pub states: Vec<Vec<f64>>,
    pub observations: Vec<Vec<f64>>,
}

pub fn one_hot_rows(codes: &[usize], l: usize) -> Mat {
    let mut m = Mat::zeros(codes.len(), l);
    for (i, c) in codes.iter().enumerate() {
        m[(i, *c)] = 1.0;
    }
    m
}

pub fn standard_normal<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    // row-major draw order so batch rows consume the stream contiguously
    let v: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Mat::from_row_slice(rows, cols, &v)
}

/// The model recorded on a tape, with per-mode caches prepared.
pub struct SsmVars {
    pub modes: Vec<(ModeVars, ModeCache)>,
    pub obs_log_var: Var,
    pub obs_indices: Vec<usize>,
    pub layout: CanonicalLayout,
    pub dt: f64,
}

impl SsmVars {
    fn assemble(
        tape: &mut Tape,
        model: &MultiModalSSM,
        modes: Vec<ModeVars>,
        obs_log_var: Var,
    ) -> Result<Self> {
        let modes = modes
            .into_iter()
            .map(|mv| ModeCache::prepare(tape, &mv).map(|c| (mv, c)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            modes,
            obs_log_var,
            obs_indices: model.obs.indices.clone(),
            layout: model.layout.clone(),
            dt: model.dt,
        })
    }

    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    /// Mixture moments of the GP-driven derivative for every row of `x`:
    /// mean B×Q and variance B×Q (`ṽ·Σ + R`), weighted by `code` (B×L).
    pub fn derivative_moments(&self, tape: &mut Tape, x: Var, code: Var) -> (Var, Var) {
        let gin = tape.select_cols(x, &self.layout.gp_input_indices);
        let rows = tape.shape(x).0;
        let q = self.layout.gp_output_dim();
        let single = self.modes.len() == 1;
        let mut mean_mix = None;
        let mut var_mix = None;
        for (l, (mv, mc)) in self.modes.iter().enumerate() {
            let (m, v) = gp::predict(tape, mv, mc, gin);
            let ones = tape.constant(Mat::from_element(rows, q, 1.0));
            let vq = tape.mul_col(ones, v);
            let vq = tape.mul_row(vq, mc.sigma);
            let nv = tape.add_row(vq, mc.process_noise);
            let (wm, wv) = if single {
                (m, nv)
            } else {
                let c = tape.select_cols(code, &[l]);
                (tape.mul_col(m, c), tape.mul_col(nv, c))
            };
            mean_mix = Some(match mean_mix {
                None => wm,
                Some(acc) => tape.add(acc, wm),
            });
            var_mix = Some(match var_mix {
                None => wv,
                Some(acc) => tape.add(acc, wv),
            });
        }
        (mean_mix.unwrap(), var_mix.unwrap())
    }

    /// Euler step `x + δt·[chain; g]` with `g` drawn from the mixture using
    /// the standard-normal `eps` (B×Q).
    pub fn step(&self, tape: &mut Tape, x: Var, code: Var, eps: Var) -> Var {
        let (mean, var) = self.derivative_moments(tape, x, code);
        let sd = tape.sqrt(var);
        let noise = tape.mul(sd, eps);
        let g = tape.add(mean, noise);
        self.euler(tape, x, g)
    }

    /// Euler step with the mixture mean only.
    pub fn mean_step(&self, tape: &mut Tape, x: Var, code: Var) -> Var {
        let (mean, _) = self.derivative_moments(tape, x, code);
        self.euler(tape, x, mean)
    }

    fn euler(&self, tape: &mut Tape, x: Var, g: Var) -> Var {
        let d = self.layout.spatial_dim;
        let s = self.layout.state_dim();
        let deriv = if s > d {
            let chain = tape.slice_cols(x, d, s - d);
            tape.concat_cols(&[chain, g])
        } else {
            g
        };
        let inc = tape.scale(deriv, self.dt);
        tape.add(x, inc)
    }

    /// `C x` for every row.
    pub fn observe(&self, tape: &mut Tape, x: Var) -> Var {
        tape.select_cols(x, &self.obs_indices)
    }

    /// Per-row Gaussian log-density of `y` (B×Dy) under `N(C x, diag ε_g)`.
    pub fn obs_log_lik(&self, tape: &mut Tape, y: Var, x: Var) -> Var {
        let cx = self.observe(tape, x);
        let r = tape.sub(y, cx);
        let r2 = tape.square(r);
        let neg = tape.neg(self.obs_log_var);
        let inv = tape.exp(neg);
        let maha = tape.mul_row(r2, inv);
        let with_logdet = tape.add_row(maha, self.obs_log_var);
        let per_dim = tape.add_const(with_logdet, LN_2PI);
        let s = tape.sum_cols(per_dim);
        tape.scale(s, -0.5)
    }

    /// Reparameterized observation `C x + sqrt(ε_g) ⊙ eps`.
    pub fn observe_noisy(&self, tape: &mut Tape, x: Var, eps: Var) -> Var {
        let cx = self.observe(tape, x);
        let half = tape.scale(self.obs_log_var, 0.5);
        let sd = tape.exp(half);
        let n = tape.mul_row(eps, sd);
        tape.add(cx, n)
    }
}
