//! Command-line front end. `main` parses arguments and calls [`run`].

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::{self, ModelArchive};
use crate::config::{ExperimentConfig, Lambda};
use crate::data::TrajectoryBatch;
use crate::diffmath::Mat;
use crate::eval::{self, mean_position_error};
use crate::filtering::{track_batch, tracked_observations, TrackConfig};
use crate::objective;
use crate::simulators::DUBINS_CONTROLS;
use crate::{Error, Result};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "INFOSSM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "infossm", version, about = "Multi-modal GP state-space models and particle-filter tracking")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a train/test split and write it as CSV.
    GenData(GenDataArgs),
    /// Fit a model and write a model archive plus a metrics log.
    Train(TrainArgs),
    /// Reconstruction RMSE, log-likelihood and MI on a dataset.
    Eval(EvalArgs),
    /// Long-term per-mode rollouts.
    Predict(PredictArgs),
    /// Particle-filter tracking of every trajectory in a dataset.
    Track(TrackArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config; the dubins profile is used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory for train.csv and test.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Add the generating maneuver index as a label column.
    #[arg(long)]
    pub with_labels: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Training CSV. Falls back to the config, then to fresh simulation.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Absolute MI weight, overriding the config.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Number of dynamics modes.
    #[arg(long)]
    pub modes: Option<usize>,
    /// Model archive path. The metrics log goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
    /// Evaluation CSV. Falls back to the config test data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Per-trajectory report CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Must equal the model's inference window.
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Particle count (512 unless the config says otherwise).
    #[arg(long)]
    pub particles: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => evaluate(&a),
        Command::Predict(a) => predict(&a),
        Command::Track(a) => track(&a),
    }
}

/// Config from `--config` (or the default profile) with `--seed` applied.
pub fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::from_toml("", None)?,
    };
    if let Some(s) = c.seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

/// Rayon pool sized by [`THREADS_ENV`], or rayon's default when unset.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::Validation(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Validation(format!("thread pool: {e}")))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let (train, test) = cfg.simulator.generate()?;
    std::fs::create_dir_all(&a.out)?;
    train.write_csv(&a.out.join("train.csv"), a.with_labels)?;
    test.write_csv(&a.out.join("test.csv"), a.with_labels)?;
    for (name, b) in [("train", &train), ("test", &test)] {
        println!("{name}: N={} T={} D={} dt={}", b.len(), b.min_len(), b.obs_dim(), b.dt);
    }
    Ok(())
}

fn dataset(explicit: Option<&Path>, configured: Option<&Path>) -> Result<Option<TrajectoryBatch>> {
    match explicit.or(configured) {
        Some(p) => Ok(Some(TrajectoryBatch::read_csv(p)?)),
        None => Ok(None),
    }
}

/// Train on `data` and bundle the result. When training stops on a
/// numerical failure the archive holds the last finite parameters and the
/// error is returned alongside it.
pub fn train_archive(
    cfg: &ExperimentConfig,
    data: &TrajectoryBatch,
    metrics_log: Option<&mut dyn Write>,
) -> Result<(ModelArchive, Option<Error>)> {
    let tc = cfg.training_for(data.len());
    let out = objective::train(data, &tc, metrics_log)?;
    let seed = tc.seed;
    let arch = ModelArchive {
        model: out.model,
        nets: out.nets,
        priors: out.priors,
        training: tc,
        seed,
    };
    Ok((arch, out.failure))
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(l) = a.lambda {
        cfg.lambda = Lambda::Fixed(l);
    }
    if let Some(m) = a.modes {
        cfg.training.modes = m;
    }
    cfg.validate()?;
    let data = match dataset(a.data.as_deref(), cfg.train_data.as_deref())? {
        Some(d) => d,
        None => cfg.simulator.generate()?.0,
    };
    let log_path = a.out.with_extension("metrics.csv");
    let mut log = create(&log_path)?;
    let (arch, failure) = train_archive(&cfg, &data, Some(&mut log))?;
    log.flush()?;
    archive::save(&arch, &a.out)?;
    let last = arch.training.epochs;
    println!(
        "trained L={} lambda={} on N={} -> {} (metrics: {})",
        arch.model.num_modes(),
        arch.training.lambda.unwrap_or(0.0),
        data.len(),
        a.out.display(),
        log_path.display()
    );
    match failure {
        Some(e) => {
            log::error!("training stopped before epoch {last}; saved the last finite parameters");
            Err(e)
        }
        None => Ok(()),
    }
}

fn evaluate(a: &EvalArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let arch = archive::load(&a.model)?;
    let data = match dataset(a.data.as_deref(), cfg.test_data.as_deref())? {
        Some(d) => d,
        None => cfg.simulator.generate()?.1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed);
    let rep = eval::evaluate(
        &data,
        &arch.model,
        &arch.nets,
        &arch.priors,
        cfg.eval.recon_samples,
        cfg.eval.mi_samples,
        &mut rng,
    )?;
    if let Some(p) = &a.out {
        let mut w = create(p)?;
        rep.write_csv(&mut w)?;
        w.flush()?;
    }
    println!("rmse={} log_likelihood={} mi={}", rep.rmse, rep.mean_log_likelihood, rep.mi);
    Ok(())
}

fn write_path(path: &Path, header: &[&str], m: &Mat, dt: f64) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "t,{}", header.join(","))?;
    for t in 0..m.nrows() {
        let vals: Vec<String> = m.row(t).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{},{}", t as f64 * dt, vals.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn predict(a: &PredictArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let arch = archive::load(&a.model)?;
    let (model, nets) = (&arch.model, &arch.nets);
    let steps = a.steps.unwrap_or(cfg.eval.predict_steps);
    let warmup = a.warmup.unwrap_or(nets.window);
    if warmup != nets.window {
        return Err(Error::Validation(format!(
            "warmup {warmup} must equal the inference window {}",
            nets.window
        )));
    }
    std::fs::create_dir_all(&a.out)?;
    let d = model.obs_dim();
    let speed = cfg.simulator.speed();
    // constant-velocity warmup along the first observed axis
    let warm = Mat::from_fn(warmup, d, |t, j| if j == 0 { t as f64 * model.dt * speed } else { 0.0 });
    let (x1, _) = nets.encode_initial(&warm)?;
    let header: Vec<String> = (1..=d).map(|i| format!("y_{i}")).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    for l in 0..model.num_modes() {
        let path = eval::mode_rollout(model, &x1, l, steps)?;
        write_path(&a.out.join(format!("mode_{l}.csv")), &header, &path, model.dt)?;
    }
    println!("wrote {} mode rollouts of {steps} steps to {}", model.num_modes(), a.out.display());
    if d != 2 {
        log::warn!("control protocol needs planar observations; skipped");
        return Ok(());
    }
    let preds = eval::long_term_prediction(model, nets, &DUBINS_CONTROLS, speed, steps, warmup)?;
    let mut w = create(&a.out.join("summary.csv"))?;
    writeln!(w, "control,code,terminal_error,true_heading_change,predicted_heading_change,sign_match")?;
    for p in &preds {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            p.control, p.code, p.terminal_error, p.true_heading_change, p.predicted_heading_change, p.sign_match
        )?;
        let both = Mat::from_fn(p.truth.nrows(), 4, |t, j| {
            if j < 2 {
                p.truth[(t, j)]
            } else {
                p.predicted[(t, j - 2)]
            }
        });
        let name = format!("control_{}.csv", p.control);
        write_path(&a.out.join(name), &["true_x", "true_y", "pred_x", "pred_y"], &both, model.dt)?;
        println!(
            "u={:+} code={} terminal_error={:.3} heading_change true={:.3} predicted={:.3}",
            p.control, p.code, p.terminal_error, p.true_heading_change, p.predicted_heading_change
        );
    }
    w.flush()?;
    Ok(())
}

/// Per-trajectory mean position errors of the filter and of open-loop
/// reconstruction over each trajectory's first `nets.window` steps.
pub struct TrackingComparison {
    pub tracked: Vec<f64>,
    pub open_loop: Vec<f64>,
}

/// Run the filter over every trajectory and compare with reconstruction.
pub fn compare_tracking(
    arch: &ModelArchive,
    data: &TrajectoryBatch,
    tc: &TrackConfig,
    recon_samples: usize,
    seed: u64,
) -> Result<(TrackingComparison, Vec<crate::filtering::TrackResult>)> {
    let window = arch.nets.window;
    let windows = data.truncated(window)?;
    let results = track_batch(&windows.trajectories, &arch.model, &arch.nets, tc, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let recons = eval::reconstruct(&windows, &arch.model, &arch.nets, recon_samples, &mut rng)?;
    let mut cmp = TrackingComparison { tracked: Vec::new(), open_loop: Vec::new() };
    for ((r, rec), y) in results.iter().zip(&recons).zip(&windows.trajectories) {
        cmp.tracked.push(mean_position_error(&tracked_observations(r, &arch.model), y)?);
        cmp.open_loop.push(mean_position_error(&rec.mean, y)?);
    }
    Ok((cmp, results))
}

fn track(a: &TrackArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let arch = archive::load(&a.model)?;
    let mut tc = cfg.track.clone();
    if let Some(k) = a.particles {
        if k == 0 {
            return Err(Error::Validation("--particles must be positive".into()));
        }
        tc.particles = k;
    }
    let data = match dataset(a.data.as_deref(), cfg.test_data.as_deref())? {
        Some(d) => d,
        None => cfg.simulator.generate()?.1,
    };
    let pool = thread_pool()?;
    let seed = cfg.training.seed;
    let (cmp, results) = pool.install(|| compare_tracking(&arch, &data, &tc, cfg.eval.recon_samples, seed))?;
    std::fs::create_dir_all(&a.out)?;
    for (i, r) in results.iter().enumerate() {
        r.write_csv(create(&a.out.join(format!("track_{i}.csv")))?)?;
    }
    let mut w = create(&a.out.join("summary.csv"))?;
    writeln!(w, "traj,tracked_error,open_loop_error")?;
    for (i, (t, o)) in cmp.tracked.iter().zip(&cmp.open_loop).enumerate() {
        writeln!(w, "{i},{t},{o}")?;
    }
    w.flush()?;
    let n = cmp.tracked.len() as f64;
    println!(
        "tracked {} trajectories with {} particles: mean error {:.4} (open loop {:.4})",
        results.len(),
        tc.particles,
        cmp.tracked.iter().sum::<f64>() / n,
        cmp.open_loop.iter().sum::<f64>() / n
    );
    Ok(())
}
