//! Sparse matrix-variate Gaussian-process experts.
//!
//! A [`SparseGPMode`] holds M inducing inputs `Z`, the matrix-normal
//! variational posterior `q(U) = MN(A, S, Σ)` over the inducing outputs, an
//! SE-ARD kernel and an affine mean. Prediction marginalizes `U`:
//!
//! ```text
//! r̃(x) = m(x) + k_xZ K⁻¹ (A − m(Z))
//! ṽ(x) = k_xx − k_xZ K⁻¹ (K − S) K⁻¹ k_Zx
//! ```
//!
//! with predictive covariance `ṽ(x)·Σ`.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::diffmath::{linalg, Mat, ParamSet, Tape, Var};
use crate::error::{Error, Result};

static VARIANCE_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// Number of predictive variances clamped at zero so far in this process.
pub fn variance_clamp_count() -> u64 {
    VARIANCE_CLAMPS.load(Ordering::Relaxed)
}

/// SE-ARD kernel hyperparameters, stored as logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelHyper {
    pub log_signal_std: f64,
    pub log_length_scales: Vec<f64>,
}

impl KernelHyper {
    pub fn new(signal_std: f64, length_scales: &[f64]) -> Result<Self> {
        if !(signal_std > 0.0) || length_scales.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Validation(
                "kernel hyperparameters must be strictly positive".into(),
            ));
        }
        Ok(Self {
            log_signal_std: signal_std.ln(),
            log_length_scales: length_scales.iter().map(|l| l.ln()).collect(),
        })
    }

    pub fn signal_std(&self) -> f64 {
        self.log_signal_std.exp()
    }

    pub fn length_scales(&self) -> Vec<f64> {
        self.log_length_scales.iter().map(|l| l.exp()).collect()
    }

    pub fn dim(&self) -> usize {
        self.log_length_scales.len()
    }
}

/// `σ_f² exp(−½ Σ_p ((x_p − x'_p)/λ_p)²)`
pub fn se_ard_kernel(x: &[f64], x2: &[f64], hyper: &KernelHyper) -> Result<f64> {
    if x.len() != hyper.dim() || x2.len() != hyper.dim() {
        return Err(Error::DimensionMismatch(format!(
            "kernel inputs of length {} and {} for {} length-scales",
            x.len(),
            x2.len(),
            hyper.dim()
        )));
    }
    let d2: f64 = x
        .iter()
        .zip(x2)
        .zip(hyper.length_scales())
        .map(|((a, b), l)| ((a - b) / l).powi(2))
        .sum();
    Ok(hyper.signal_std().powi(2) * (-0.5 * d2).exp())
}

/// Affine mean `m(x) = H x + b`, with `H` of shape Q×P.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMean {
    pub h: Mat,
    pub b: Vec<f64>,
}

impl AffineMean {
    pub fn zeros(q: usize, p: usize) -> Self {
        Self {
            h: Mat::zeros(q, p),
            b: vec![0.0; q],
        }
    }

    pub fn new(h: Mat, b: Vec<f64>) -> Result<Self> {
        if h.nrows() != b.len() {
            return Err(Error::DimensionMismatch(format!(
                "H has {} rows but b has {} entries",
                h.nrows(),
                b.len()
            )));
        }
        Ok(Self { h, b })
    }

    pub fn input_dim(&self) -> usize {
        self.h.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.h.nrows()
    }
}

pub fn affine_mean(x: &[f64], mean: &AffineMean) -> Result<Vec<f64>> {
    if x.len() != mean.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "input of length {} for H with {} columns",
            x.len(),
            mean.input_dim()
        )));
    }
    Ok((0..mean.output_dim())
        .map(|q| mean.b[q] + (0..x.len()).map(|p| mean.h[(q, p)] * x[p]).sum::<f64>())
        .collect())
}

/// One expert of the mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGPMode {
    /// Inducing inputs, M×P.
    pub z: Mat,
    /// Variational mean of the inducing outputs, M×Q.
    pub a: Mat,
    /// Lower Cholesky factor of the variational row covariance S, M×M.
    pub s_chol: Mat,
    /// Log of the diagonal multi-output covariance Σ, length Q.
    pub log_sigma: Vec<f64>,
    pub kernel: KernelHyper,
    pub mean: AffineMean,
    /// Log process-noise variances, length Q.
    pub log_process_noise: Vec<f64>,
}

/// Initial values for a freshly constructed mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeInit {
    pub signal_std: f64,
    pub length_scale: f64,
    pub sigma: f64,
    pub process_noise: f64,
    /// Diagonal of the initial S Cholesky factor.
    pub s_scale: f64,
}

impl Default for ModeInit {
    fn default() -> Self {
        Self {
            signal_std: 1.0,
            length_scale: 1.0,
            sigma: 1.0,
            process_noise: 0.1,
            s_scale: 0.1,
        }
    }
}

impl SparseGPMode {
    /// Mode with zero mean function and `A = 0` at the given inducing inputs.
    pub fn new(z: Mat, q: usize, init: &ModeInit) -> Result<Self> {
        let (m, p) = (z.nrows(), z.ncols());
        if m == 0 {
            return Err(Error::Validation("a mode needs at least one inducing point".into()));
        }
        Ok(Self {
            a: Mat::zeros(m, q),
            s_chol: Mat::identity(m, m) * init.s_scale,
            log_sigma: vec![init.sigma.ln(); q],
            kernel: KernelHyper::new(init.signal_std, &vec![init.length_scale; p])?,
            mean: AffineMean::zeros(q, p),
            log_process_noise: vec![init.process_noise.ln(); q],
            z,
        })
    }

    pub fn num_inducing(&self) -> usize {
        self.z.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.z.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|v| v.exp()).collect()
    }

    pub fn process_noise(&self) -> Vec<f64> {
        self.log_process_noise.iter().map(|v| v.exp()).collect()
    }

    pub fn s(&self) -> Mat {
        &self.s_chol * self.s_chol.transpose()
    }

    /// Plain Gram matrix `K_ZZ` (no jitter).
    pub fn kzz_raw(&self) -> Mat {
        let m = self.num_inducing();
        let rows: Vec<Vec<f64>> = (0..m).map(|i| self.z.row(i).iter().copied().collect()).collect();
        Mat::from_fn(m, m, |i, j| {
            se_ard_kernel(&rows[i], &rows[j], &self.kernel).expect("shapes checked")
        })
    }

    /// `K_ZZ` with the jitter the model actually factorizes.
    pub fn kzz(&self) -> Result<Mat> {
        let k = self.kzz_raw();
        let (_, eps) = linalg::cholesky_jittered(&k)?;
        Ok(k + Mat::identity(self.num_inducing(), self.num_inducing()) * eps)
    }

    pub fn validate(&self) -> Result<()> {
        let (m, p, q) = (self.num_inducing(), self.input_dim(), self.output_dim());
        let bad = |what: &str| Err(Error::Validation(format!("malformed mode: {what}")));
        if m == 0 {
            return bad("no inducing points");
        }
        if self.a.nrows() != m || self.s_chol.shape() != (m, m) {
            return bad("A/S shapes disagree with Z");
        }
        if self.log_sigma.len() != q || self.log_process_noise.len() != q {
            return bad("Σ or process noise length differs from Q");
        }
        if self.kernel.dim() != p || self.mean.input_dim() != p || self.mean.output_dim() != q {
            return bad("kernel/mean dimensions");
        }
        for i in 0..m {
            for j in 0..i {
                let d: f64 = (0..p).map(|k| (self.z[(i, k)] - self.z[(j, k)]).powi(2)).sum();
                if d == 0.0 {
                    return bad("duplicate inducing inputs");
                }
            }
        }
        Ok(())
    }

    /// Append trainable arrays under `prefix`. The S factor is split into a
    /// free strictly-lower part and a log-diagonal.
    pub fn push_params(&self, prefix: &str, params: &mut ParamSet) {
        let m = self.num_inducing();
        let mut off = linalg::tril(&self.s_chol, true);
        let mut logdiag = Mat::zeros(m, 1);
        for j in 0..m {
            let d = self.s_chol[(j, j)];
            if d < 0.0 {
                // S = L Lᵀ is unchanged by flipping a column's sign
                for i in j..m {
                    off[(i, j)] = -off[(i, j)];
                }
            }
            logdiag[(j, 0)] = d.abs().max(1e-150).ln();
        }
        params.push(format!("{prefix}.z"), self.z.clone());
        params.push(format!("{prefix}.a"), self.a.clone());
        params.push(format!("{prefix}.s_offdiag"), off);
        params.push(format!("{prefix}.s_logdiag"), logdiag);
        params.push(format!("{prefix}.log_sigma"), row(&self.log_sigma));
        params.push(format!("{prefix}.log_ls"), row(&self.kernel.log_length_scales));
        params.push(
            format!("{prefix}.log_sf"),
            Mat::from_element(1, 1, self.kernel.log_signal_std),
        );
        params.push(format!("{prefix}.h"), self.mean.h.clone());
        params.push(format!("{prefix}.b"), row(&self.mean.b));
        params.push(format!("{prefix}.log_r"), row(&self.log_process_noise));
    }

    pub const PARAM_COUNT: usize = 10;

    /// Inverse of [`push_params`](Self::push_params) over a slice of
    /// [`PARAM_COUNT`](Self::PARAM_COUNT) arrays.
    pub fn from_param_slice(v: &[Mat]) -> Result<Self> {
        if v.len() != Self::PARAM_COUNT {
            return Err(Error::ShapeMismatch(format!(
                "expected {} mode arrays, got {}",
                Self::PARAM_COUNT,
                v.len()
            )));
        }
        let m = v[0].nrows();
        let mut s_chol = linalg::tril(&v[2], true);
        for j in 0..m {
            s_chol[(j, j)] = v[3][(j, 0)].exp();
        }
        let mode = Self {
            z: v[0].clone(),
            a: v[1].clone(),
            s_chol,
            log_sigma: v[4].iter().copied().collect(),
            kernel: KernelHyper {
                log_signal_std: v[6][(0, 0)],
                log_length_scales: v[5].iter().copied().collect(),
            },
            mean: AffineMean::new(v[7].clone(), v[8].iter().copied().collect())?,
            log_process_noise: v[9].iter().copied().collect(),
        };
        mode.validate()?;
        Ok(mode)
    }

    /// Record this mode's values as constants.
    pub fn record_constant(&self, tape: &mut Tape) -> ModeVars {
        ModeVars {
            z: tape.constant(self.z.clone()),
            a: tape.constant(self.a.clone()),
            s_chol: tape.constant(self.s_chol.clone()),
            log_sigma: tape.constant(row(&self.log_sigma)),
            log_ls: tape.constant(row(&self.kernel.log_length_scales)),
            log_sf: tape.scalar(self.kernel.log_signal_std),
            h: tape.constant(self.mean.h.clone()),
            b: tape.constant(row(&self.mean.b)),
            log_r: tape.constant(row(&self.log_process_noise)),
        }
    }

    /// Mean and scalar variance factor at one input.
    pub fn predict_moments(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let vars = self.record_constant(&mut tape);
        let cache = ModeCache::prepare(&mut tape, &vars)?;
        let xv = tape.row(x);
        let (mean, var) = predict(&mut tape, &vars, &cache, xv);
        Ok((
            tape.value(mean).iter().copied().collect(),
            tape.value(var)[(0, 0)],
        ))
    }

    /// `r̃(x) + sqrt(ṽ(x))·chol(Σ)·draw`.
    pub fn sample_function_value(&self, x: &[f64], draw: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if draw.len() != self.output_dim() {
            return Err(Error::DimensionMismatch(format!(
                "draw of length {} for Q = {}",
                draw.len(),
                self.output_dim()
            )));
        }
        let mut tape = Tape::new();
        let vars = self.record_constant(&mut tape);
        let cache = ModeCache::prepare(&mut tape, &vars)?;
        let xv = tape.row(x);
        let eps = tape.row(draw);
        let f = sample_function(&mut tape, &vars, &cache, xv, eps);
        Ok(tape.value(f).iter().copied().collect())
    }

    /// `KL(q(U) ‖ p(U))` in closed form.
    pub fn kl(&self) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.record_constant(&mut tape);
        let cache = ModeCache::prepare(&mut tape, &vars)?;
        let kl = matrix_normal_kl(&mut tape, &vars, &cache);
        Ok(tape.scalar_value(kl))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "input of length {} for P = {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }
}

fn row(v: &[f64]) -> Mat {
    Mat::from_row_slice(1, v.len(), v)
}

/// A mode's arrays as recorded variables.
#[derive(Clone, Copy, Debug)]
pub struct ModeVars {
    pub z: Var,
    pub a: Var,
    pub s_chol: Var,
    pub log_sigma: Var,
    pub log_ls: Var,
    pub log_sf: Var,
    pub h: Var,
    pub b: Var,
    pub log_r: Var,
}

impl ModeVars {
    /// Build from the [`SparseGPMode::push_params`] layout.
    pub fn from_param_vars(tape: &mut Tape, v: &[Var]) -> Self {
        assert_eq!(v.len(), SparseGPMode::PARAM_COUNT);
        let off = tape.tril(v[2], true);
        let d = tape.exp(v[3]);
        let diag = tape.diag_embed(d);
        let s_chol = tape.add(off, diag);
        Self {
            z: v[0],
            a: v[1],
            s_chol,
            log_sigma: v[4],
            log_ls: v[5],
            log_sf: v[6],
            h: v[7],
            b: v[8],
            log_r: v[9],
        }
    }
}

/// Per-evaluation quantities shared by every prediction from one mode.
#[derive(Clone, Copy, Debug)]
pub struct ModeCache {
    pub kzz_chol: Var,
    pub kinv: Var,
    /// `K⁻¹ (A − m(Z))`
    pub alpha: Var,
    /// `A − m(Z)`
    pub centered: Var,
    pub sf2: Var,
    pub sigma: Var,
    pub process_noise: Var,
}

impl ModeCache {
    pub fn prepare(tape: &mut Tape, v: &ModeVars) -> Result<Self> {
        let kzz = tape.se_kernel(v.z, v.z, v.log_ls, v.log_sf);
        let kzz_chol = tape.cholesky_jittered(kzz)?;
        let m = tape.shape(v.z).0;
        let eye = tape.constant(Mat::identity(m, m));
        let linv = tape.solve_lower(kzz_chol, eye);
        let kinv = tape.solve_lower_t(kzz_chol, linv);
        let mz = mean_fn(tape, v, v.z);
        let centered = tape.sub(v.a, mz);
        let alpha = tape.matmul(kinv, centered);
        let two_log_sf = tape.scale(v.log_sf, 2.0);
        let sf2 = tape.exp(two_log_sf);
        let sigma = tape.exp(v.log_sigma);
        let process_noise = tape.exp(v.log_r);
        Ok(Self {
            kzz_chol,
            kinv,
            alpha,
            centered,
            sf2,
            sigma,
            process_noise,
        })
    }
}

/// `X Hᵀ + b` for the rows of `x`.
pub fn mean_fn(tape: &mut Tape, v: &ModeVars, x: Var) -> Var {
    let ht = tape.transpose(v.h);
    let xh = tape.matmul(x, ht);
    tape.add_row(xh, v.b)
}

/// Batched predictive moments for the rows of `x` (B×P): mean B×Q and
/// variance factor B×1, clamped at zero.
pub fn predict(tape: &mut Tape, v: &ModeVars, c: &ModeCache, x: Var) -> (Var, Var) {
    let kxz = tape.se_kernel(x, v.z, v.log_ls, v.log_sf);
    let mx = mean_fn(tape, v, x);
    let corr = tape.matmul(kxz, c.alpha);
    let mean = tape.add(mx, corr);

    let kk = tape.matmul(kxz, c.kinv);
    let prod = tape.mul(kk, kxz);
    let reduce = tape.sum_cols(prod);
    let u = tape.matmul(kk, v.s_chol);
    let u2 = tape.square(u);
    let gain = tape.sum_cols(u2);
    let rows = tape.shape(x).0;
    let ones = tape.constant(Mat::from_element(rows, 1, 1.0));
    let prior = tape.mul_scalar(ones, c.sf2);
    let t = tape.sub(prior, reduce);
    let var = tape.add(t, gain);
    let negatives = tape.value(var).iter().filter(|x| **x < 0.0).count();
    if negatives > 0 {
        VARIANCE_CLAMPS.fetch_add(negatives as u64, Ordering::Relaxed);
        log::debug!("clamped {negatives} negative predictive variances");
    }
    let var = tape.clamp_min(var, 0.0);
    (mean, var)
}

/// Reparameterized draw `r̃ + sqrt(ṽ)·sqrt(Σ)⊙ε` for the rows of `x`, with
/// `eps` a B×Q standard-normal matrix.
pub fn sample_function(tape: &mut Tape, v: &ModeVars, c: &ModeCache, x: Var, eps: Var) -> Var {
    let (mean, var) = predict(tape, v, c, x);
    // tiny floor keeps the square-root derivative finite at ṽ = 0
    let var = tape.add_const(var, 1e-300);
    let sd = tape.sqrt(var);
    let sig_sd = tape.sqrt(c.sigma);
    let scaled = tape.mul_row(eps, sig_sd);
    let noise = tape.mul_col(scaled, sd);
    tape.add(mean, noise)
}

/// Closed-form `KL(MN(A, S, Σ) ‖ MN(m(Z), K, Σ))`:
/// `½[Q tr(K⁻¹S) + tr(Σ⁻¹ (A−m)ᵀ K⁻¹ (A−m)) − MQ + Q ln(det K / det S)]`.
pub fn matrix_normal_kl(tape: &mut Tape, v: &ModeVars, c: &ModeCache) -> Var {
    let (m, q) = tape.shape(v.a);
    let st = tape.transpose(v.s_chol);
    let s = tape.matmul(v.s_chol, st);
    let ks = tape.mul(c.kinv, s);
    let tr = tape.sum(ks);
    let tr = tape.scale(tr, q as f64);

    let quad_cols = tape.mul(c.centered, c.alpha);
    let quad_cols = tape.sum_rows(quad_cols);
    let neg_log_sigma = tape.neg(v.log_sigma);
    let inv_sigma = tape.exp(neg_log_sigma);
    let weighted = tape.mul(quad_cols, inv_sigma);
    let quad = tape.sum(weighted);

    let kd = tape.diag_part(c.kzz_chol);
    let kd = tape.log(kd);
    let logdet_k = tape.sum(kd);
    let logdet_k = tape.scale(logdet_k, 2.0);
    let sd = tape.diag_part(v.s_chol);
    let sd = tape.square(sd);
    let sd = tape.log(sd);
    let logdet_s = tape.sum(sd);
    let logdet = tape.sub(logdet_k, logdet_s);
    let logdet = tape.scale(logdet, q as f64);

    let total = tape.add(tr, quad);
    let total = tape.add(total, logdet);
    let total = tape.add_const(total, -((m * q) as f64));
    tape.scale(total, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn kernel_zero_distance() {
        let h = KernelHyper::new(1.0, &[0.7, 2.0]).unwrap();
        assert_eq!(se_ard_kernel(&[0.3, -1.0], &[0.3, -1.0], &h).unwrap(), 1.0);
    }

    #[test]
    fn kernel_hand_values() {
        let h = KernelHyper::new(1.0, &[1.0]).unwrap();
        assert_abs_diff_eq!(
            se_ard_kernel(&[0.0], &[1.0], &h).unwrap(),
            (-0.5f64).exp(),
            epsilon = 1e-15
        );
        let h = KernelHyper::new(2.0, &[1.0, 2.0]).unwrap();
        let k = se_ard_kernel(&[0.0, 0.0], &[1.0, 2.0], &h).unwrap();
        assert_abs_diff_eq!(k, 4.0 * (-1.0f64).exp(), epsilon = 1e-14);
        assert_abs_diff_eq!(k, 1.471518, epsilon = 1e-6);
    }

    #[test]
    fn kernel_dimension_mismatch() {
        let h = KernelHyper::new(1.0, &[1.0]).unwrap();
        assert!(matches!(
            se_ard_kernel(&[0.0, 1.0], &[1.0], &h),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn affine_mean_cases() {
        let id = AffineMean::new(Mat::identity(2, 2), vec![0.0, 0.0]).unwrap();
        assert_eq!(affine_mean(&[3.0, 4.0], &id).unwrap(), vec![3.0, 4.0]);
        let zero = AffineMean::new(Mat::zeros(2, 2), vec![1.0, -1.0]).unwrap();
        assert_eq!(affine_mean(&[3.0, 4.0], &zero).unwrap(), vec![1.0, -1.0]);
        let m = AffineMean::new(
            Mat::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]),
            vec![1.0, -1.0],
        )
        .unwrap();
        assert_eq!(affine_mean(&[3.0, 4.0], &m).unwrap(), vec![7.0, 3.0]);
        assert!(affine_mean(&[3.0], &m).is_err());
    }

    fn single_point_mode(s: f64) -> SparseGPMode {
        let mut mode = SparseGPMode::new(Mat::zeros(1, 1), 1, &ModeInit::default()).unwrap();
        mode.a = Mat::from_element(1, 1, 1.0);
        mode.s_chol = Mat::from_element(1, 1, s);
        mode
    }

    #[test]
    fn single_inducing_point_predictions() {
        // jitter of 1e-6 on K=1 perturbs the hand values at the 1e-6 level
        let mode = single_point_mode(0.0);
        let (m, v) = mode.predict_moments(&[0.0]).unwrap();
        assert_abs_diff_eq!(m[0], 1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-5);
        let (m, v) = mode.predict_moments(&[1.0]).unwrap();
        assert_abs_diff_eq!(m[0], (-0.5f64).exp(), epsilon = 1e-5);
        assert_abs_diff_eq!(v, 1.0 - (-1.0f64).exp(), epsilon = 1e-5);
        assert_abs_diff_eq!(m[0], 0.60653, epsilon = 1e-5);
        assert_abs_diff_eq!(v, 0.63212, epsilon = 1e-5);
    }

    #[test]
    fn zero_draw_recovers_mean() {
        let mode = single_point_mode(0.3);
        let (m, _) = mode.predict_moments(&[0.4]).unwrap();
        assert_eq!(mode.sample_function_value(&[0.4], &[0.0]).unwrap(), m);
    }

    #[test]
    fn zero_variance_draw_is_the_inducing_output() {
        // at the sole inducing point with S = 0 only jitter-level variance
        // remains, so any draw lands on the A row
        let f = single_point_mode(0.0).sample_function_value(&[0.0], &[1.7]).unwrap();
        assert_abs_diff_eq!(f[0], 1.0, epsilon = 2e-3);
    }

    #[test]
    fn scalar_kl_matches_univariate() {
        let mut mode = single_point_mode(0.5);
        mode.a = Mat::from_element(1, 1, 0.8);
        mode.mean.b = vec![0.2];
        let k = mode.kzz().unwrap()[(0, 0)];
        let s = 0.25;
        let expected = 0.5 * (s / k + (0.8 - 0.2f64).powi(2) / k - 1.0 + (k / s).ln());
        assert_abs_diff_eq!(mode.kl().unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn kl_zero_when_posterior_is_prior() {
        let z = Mat::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.5, -0.7, 1.2]);
        let mut mode = SparseGPMode::new(z, 2, &ModeInit::default()).unwrap();
        mode.mean = AffineMean::new(Mat::from_row_slice(2, 2, &[0.3, -0.1, 0.2, 0.5]), vec![0.1, -0.4]).unwrap();
        let mz = Mat::from_fn(3, 2, |i, q| {
            affine_mean(&[mode.z[(i, 0)], mode.z[(i, 1)]], &mode.mean).unwrap()[q]
        });
        mode.a = mz;
        mode.s_chol = linalg::cholesky(&mode.kzz().unwrap()).unwrap();
        assert!(mode.kl().unwrap().abs() < 1e-10);
    }

    #[test]
    fn param_round_trip() {
        let z = Mat::from_row_slice(2, 1, &[0.0, 1.0]);
        let mut mode = SparseGPMode::new(z, 1, &ModeInit::default()).unwrap();
        mode.s_chol = Mat::from_row_slice(2, 2, &[0.5, 0.0, 0.2, 0.3]);
        let mut ps = ParamSet::new();
        mode.push_params("m0", &mut ps);
        let back = SparseGPMode::from_param_slice(ps.values()).unwrap();
        assert!((back.s() - mode.s()).abs().max() < 1e-15);
        assert_eq!(back.z, mode.z);
    }

    #[test]
    fn duplicate_inducing_inputs_rejected() {
        let z = Mat::from_row_slice(2, 1, &[0.5, 0.5]);
        let mode = SparseGPMode::new(z, 1, &ModeInit::default()).unwrap();
        assert!(mode.validate().is_err());
    }
}
