//! Single-file model archive.
//!
//! Layout: the line `INFOSSM 1`, a little-endian u64 manifest length, a
//! JSON manifest, then every array as little-endian f64 in manifest order.
//! Numbers travel only through the blobs, so a round trip is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffmath::{Mat, ParamSet};
use crate::gp::{AffineMean, KernelHyper, SparseGPMode};
use crate::inference::{InferenceNets, NetConfig};
use crate::objective::{Priors, TrainingConfig};
use crate::ssm::{CanonicalLayout, ModeTransitionMatrix, MultiModalSSM, ObservationModel};
use crate::{Error, Result};

const MAGIC: &[u8] = b"INFOSSM 1\n";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to reuse a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelArchive {
    pub model: MultiModalSSM,
    pub nets: InferenceNets,
    pub priors: Priors,
    pub training: TrainingConfig,
    /// Seed the training run started from.
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    order: usize,
    spatial_dim: usize,
    num_modes: usize,
    obs_indices: Vec<usize>,
    obs_trainable: bool,
    priors_shifted: bool,
    net: NetConfig,
    net_window: usize,
    net_observed_slots: Vec<usize>,
    training: TrainingConfig,
    seed: u64,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

fn row(v: &[f64]) -> Mat {
    Mat::from_row_slice(1, v.len(), v)
}

fn arrays(a: &ModelArchive) -> Vec<(String, Mat)> {
    let m = &a.model;
    let mut out = Vec::new();
    for (l, mode) in m.modes.iter().enumerate() {
        let p = |s: &str| format!("mode{l}.{s}");
        out.push((p("z"), mode.z.clone()));
        out.push((p("a"), mode.a.clone()));
        out.push((p("s_chol"), mode.s_chol.clone()));
        out.push((p("log_sigma"), row(&mode.log_sigma)));
        out.push((p("log_process_noise"), row(&mode.log_process_noise)));
        out.push((p("log_signal_std"), row(&[mode.kernel.log_signal_std])));
        out.push((p("log_length_scales"), row(&mode.kernel.log_length_scales)));
        out.push((p("h"), mode.mean.h.clone()));
        out.push((p("b"), row(&mode.mean.b)));
    }
    out.push(("transition".into(), m.transition.matrix().clone()));
    out.push(("obs.log_noise_var".into(), row(&m.obs.log_noise_var)));
    out.push(("dt".into(), row(&[m.dt])));
    out.push(("priors.x1_mean".into(), row(&a.priors.x1_mean)));
    out.push(("priors.x1_var".into(), row(&a.priors.x1_var)));
    out.push(("net.input_scale".into(), row(&a.nets.input_scale)));
    out.push(("net.state_scale".into(), row(&a.nets.state_scale)));
    for (name, v) in a.nets.params.names().iter().zip(a.nets.params.values()) {
        out.push((format!("net.{name}"), v.clone()));
    }
    out
}

/// Serialize to any writer.
pub fn write<W: Write>(a: &ModelArchive, mut w: W) -> Result<()> {
    let arrs = arrays(a);
    let manifest = Manifest {
        version: FORMAT_VERSION,
        order: a.model.layout.order,
        spatial_dim: a.model.layout.spatial_dim,
        num_modes: a.model.num_modes(),
        obs_indices: a.model.obs.indices.clone(),
        obs_trainable: a.model.obs.trainable,
        priors_shifted: a.priors.shifted,
        net: a.nets.config,
        net_window: a.nets.window,
        net_observed_slots: a.nets.observed_slots.clone(),
        training: a.training.clone(),
        seed: a.seed,
        arrays: arrs
            .iter()
            .map(|(n, m)| ArrayEntry { name: n.clone(), rows: m.nrows(), cols: m.ncols() })
            .collect(),
    };
    let text = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Archive(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(text.len() as u64).to_le_bytes())?;
    w.write_all(&text)?;
    for (_, m) in &arrs {
        // row-major so the blob reads naturally
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                w.write_all(&m[(i, j)].to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save(a: &ModelArchive, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write(a, std::io::BufWriter::new(f))
}

pub fn load(path: &Path) -> Result<ModelArchive> {
    let f = std::fs::File::open(path)?;
    read(std::io::BufReader::new(f))
}

/// Parse an archive from any reader.
pub fn read<R: Read>(mut r: R) -> Result<ModelArchive> {
    let mut magic = vec![0u8; MAGIC.len()];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Archive("file too short for an archive header".into()))?;
    if magic != MAGIC {
        return Err(Error::Archive("not an infossm model archive (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 30 {
        return Err(Error::Archive(format!("manifest length {len} is implausible")));
    }
    let mut text = vec![0u8; len];
    r.read_exact(&mut text)
        .map_err(|_| Error::Archive("truncated manifest".into()))?;
    let man: Manifest = serde_json::from_slice(&text).map_err(|e| Error::Archive(format!("manifest: {e}")))?;
    if man.version != FORMAT_VERSION {
        return Err(Error::Archive(format!("unsupported archive version {}", man.version)));
    }
    let mut params = ParamSet::new();
    let mut buf = [0u8; 8];
    for e in &man.arrays {
        let mut m = Mat::zeros(e.rows, e.cols);
        for i in 0..e.rows {
            for j in 0..e.cols {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::Archive(format!("truncated data in '{}'", e.name)))?;
                m[(i, j)] = f64::from_le_bytes(buf);
            }
        }
        params.push(e.name.clone(), m);
    }
    let get = |n: &str| params.require(n);
    let vec_of = |n: &str| -> Result<Vec<f64>> { Ok(get(n)?.iter().copied().collect()) };

    let layout = CanonicalLayout::new(man.order, man.spatial_dim)?;
    let mut modes = Vec::with_capacity(man.num_modes);
    for l in 0..man.num_modes {
        let p = |s: &str| format!("mode{l}.{s}");
        let kernel = KernelHyper {
            log_signal_std: vec_of(&p("log_signal_std"))?.first().copied().unwrap_or(0.0),
            log_length_scales: vec_of(&p("log_length_scales"))?,
        };
        modes.push(SparseGPMode {
            z: get(&p("z"))?.clone(),
            a: get(&p("a"))?.clone(),
            s_chol: get(&p("s_chol"))?.clone(),
            log_sigma: vec_of(&p("log_sigma"))?,
            kernel,
            mean: AffineMean::new(get(&p("h"))?.clone(), vec_of(&p("b"))?)?,
            log_process_noise: vec_of(&p("log_process_noise"))?,
        });
    }
    let log_var = vec_of("obs.log_noise_var")?;
    let mut obs = ObservationModel::new(
        man.obs_indices.clone(),
        &vec![1.0; man.obs_indices.len()],
        man.obs_trainable,
    )?;
    if log_var.len() != obs.log_noise_var.len() {
        return Err(Error::Archive("observation noise length mismatch".into()));
    }
    obs.log_noise_var = log_var;
    let model = MultiModalSSM {
        modes,
        transition: ModeTransitionMatrix::new(get("transition")?.clone())?,
        obs,
        layout: layout.clone(),
        dt: vec_of("dt")?.first().copied().unwrap_or(f64::NAN),
    };
    model.validate()?;

    let mut net_params = ParamSet::new();
    for (name, v) in params.names().iter().zip(params.values()) {
        if let Some(rest) = name.strip_prefix("net.") {
            if rest != "input_scale" && rest != "state_scale" {
                net_params.push(rest, v.clone());
            }
        }
    }
    let nets = InferenceNets {
        config: man.net,
        obs_dim: man.net_observed_slots.len(),
        state_dim: layout.state_dim(),
        window: man.net_window,
        num_modes: man.num_modes,
        observed_slots: man.net_observed_slots,
        input_scale: vec_of("net.input_scale")?,
        state_scale: vec_of("net.state_scale")?,
        params: net_params,
    };
    nets.validate()?;
    let priors = Priors {
        x1_mean: vec_of("priors.x1_mean")?,
        x1_var: vec_of("priors.x1_var")?,
        shifted: man.priors_shifted,
        num_modes: man.num_modes,
    };
    priors.validate()?;
    Ok(ModelArchive {
        model,
        nets,
        priors,
        training: man.training,
        seed: man.seed,
    })
}
