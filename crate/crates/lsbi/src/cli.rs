//! Command-line orchestration of the four-stage pipeline: simulate the
//! training set, train the surrogate, sample the posterior, and score it.
//!
//! Every command resolves one [`RunConfig`](crate::config::RunConfig)
//! (file < `LSBI_SEED`/`LSBI_WORKERS` environment < flags), writes the
//! resolved snapshot into the output directory before heavy work, and then
//! overwrites its outputs deterministically: at a fixed seed in
//! single-threaded mode every output file is bitwise reproducible, except
//! the measured wall-clock columns (`elapsed_s` in sampler diagnostics and
//! `wall_s_mean` in the benchmark table), which report real time.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use crate::building::FrequencyGrid;
use crate::config::RunConfig;
use crate::dataset::{generate_triples, sample_prior, TrainingDataset};
use crate::error::{Error, Result};
use crate::eval;
use crate::latent::{log_lhat_batch, ObservationEncoding};
use crate::mvae::{load_model, save_model, train, MVAEModel};
use crate::smc;

#[derive(Debug, Parser)]
#[command(
    name = "lsbi",
    version,
    about = "Latent-space Bayesian inference for structural model updating"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand; each overrides the config file.
#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration TOML; omitted → built-in benchmark defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides the config's `out_dir`).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Global RNG seed (overrides `LSBI_SEED` and the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker-pool size; 0 = all cores, 1 = determinism reference.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the training triples (θ, x, x̃) and save the dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Override the configured number of triples.
        #[arg(long)]
        n_train: Option<usize>,
    },
    /// Train the surrogate on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset file produced by `generate`.
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Sample the posterior for one observed FRF.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint produced by `train`.
        #[arg(long)]
        model: PathBuf,
        /// Observation CSV with columns frequency_hz, log_abs_H on the
        /// configured grid.
        #[arg(long)]
        observation: PathBuf,
    },
    /// Score a posterior sample file: mode coverage, predictive
    /// envelopes, optional kernel discrepancy and latent projection.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Posterior CSV produced by `infer`.
        #[arg(long)]
        posterior: PathBuf,
        /// Reference sample CSV; when given, the kernel two-sample
        /// discrepancy against it is included in the metrics.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Model checkpoint; with --observation, enables the
        /// latent-projection export.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Observation CSV (see `infer`).
        #[arg(long)]
        observation: Option<PathBuf>,
    },
    /// Sweep sampler population sizes and tabulate cost/accuracy rows.
    Benchmark {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        observation: PathBuf,
        /// Reference posterior CSV (large-population run) to score against.
        #[arg(long)]
        reference: PathBuf,
    },
}

/// Entry point used by the binary: run one parsed command.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, n_train } => cmd_generate(&common, n_train),
        Command::Train { common, dataset } => cmd_train(&common, &dataset),
        Command::Infer {
            common,
            model,
            observation,
        } => cmd_infer(&common, &model, &observation),
        Command::Evaluate {
            common,
            posterior,
            reference,
            model,
            observation,
        } => cmd_evaluate(
            &common,
            &posterior,
            reference.as_deref(),
            model.as_deref(),
            observation.as_deref(),
        ),
        Command::Benchmark {
            common,
            model,
            observation,
            reference,
        } => cmd_benchmark(&common, &model, &observation, &reference),
    }
}

/// Resolve the configuration for one command: load (or default), apply
/// flag/environment overrides, validate, set the worker pool, and write
/// the resolved snapshot.
fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            require_file(path, "config file")?;
            RunConfig::load(path)?
        }
        None => RunConfig::benchmark(),
    };
    cfg.apply_overrides(common.seed, common.workers, common.out_dir.clone())?;
    cfg.validate()?;
    init_workers(cfg.workers)?;
    cfg.write_resolved(&cfg.out_dir)?;
    Ok(cfg)
}

static POOL: OnceLock<std::result::Result<(), String>> = OnceLock::new();

/// Build the global worker pool once; later calls with a different size
/// are ignored (the first resolved config wins for the process).
fn init_workers(workers: usize) -> Result<()> {
    let r = POOL.get_or_init(|| {
        if workers == 0 {
            return Ok(()); // rayon default: all cores
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| e.to_string())
    });
    r.clone().map_err(Error::Config)
}

/// Missing command-line input files are usage errors, not runtime IO
/// failures: the path itself was wrong.
fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{what} not found: {}",
            path.display()
        )))
    }
}

fn cmd_generate(common: &Common, n_train: Option<usize>) -> Result<()> {
    let mut cfg = resolve(common)?;
    if let Some(n) = n_train {
        cfg.dataset.n_train = n;
        cfg.validate()?;
        cfg.write_resolved(&cfg.out_dir)?; // snapshot reflects the override
    }
    let spec = cfg.building_spec();
    let grid = cfg.frequency_grid();
    let noise = cfg.noise_model();
    let bounds = cfg.prior_bounds();

    let thetas = sample_prior(cfg.dataset.n_train, &bounds, cfg.rng_seed)?;
    let mut dataset = generate_triples(&thetas, &spec, &grid, &noise, cfg.rng_seed)?;
    dataset.split_and_standardize(cfg.dataset.val_fraction, cfg.rng_seed)?;

    let path = cfg.out_dir.join("dataset.lsbi");
    dataset.save(&path)?;
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    println!(
        "dataset: {} triples={} digest={:08x}",
        path.display(),
        dataset.n(),
        crc32fast::hash(&bytes)
    );
    Ok(())
}

fn cmd_train(common: &Common, dataset_path: &Path) -> Result<()> {
    let cfg = resolve(common)?;
    require_file(dataset_path, "dataset")?;
    let dataset = TrainingDataset::load(dataset_path)?;

    let mut model = MVAEModel::<f32>::new(cfg.architecture(), cfg.rng_seed)?;
    let history = train(&mut model, &dataset, &cfg.training_config())?;

    let model_path = cfg.out_dir.join("model.lsbi");
    save_model(&model, &model_path)?;
    let history_path = cfg.out_dir.join("history.csv");
    history.write_csv(&history_path)?;
    let best = &history.epochs[history.best_epoch];
    println!(
        "model: {} epochs={} best_epoch={} val_loss={}",
        model_path.display(),
        history.epochs.len(),
        history.best_epoch,
        best.val.total
    );
    Ok(())
}

fn cmd_infer(common: &Common, model_path: &Path, obs_path: &Path) -> Result<()> {
    let cfg = resolve(common)?;
    require_file(model_path, "model checkpoint")?;
    require_file(obs_path, "observation")?;
    let model = load_model::<f32>(model_path)?;
    let grid = cfg.frequency_grid();
    let raw = read_observation(obs_path, &grid)?;
    let obs = ObservationEncoding::from_raw(&model, &raw)?;

    let smc_cfg = cfg.smc_config(cfg.smc.n_particles, cfg.rng_seed);
    let evaluator =
        |positions: &ndarray::ArrayView2<f64>| log_lhat_batch(&model, &obs, &positions.to_owned());
    let (samples, diagnostics) = smc::run(evaluator, &smc_cfg)?;

    let posterior_path = cfg.out_dir.join("posterior.csv");
    write_theta_csv(&posterior_path, &samples)?;
    let diag_path = cfg.out_dir.join("diagnostics.csv");
    diagnostics.write_csv(&diag_path)?;
    println!(
        "posterior: {} samples={} rounds={} beta={} log_evidence={} evals_gross={} evals_net={}",
        posterior_path.display(),
        samples.nrows(),
        diagnostics.beta_schedule.len(),
        diagnostics.beta_schedule.last().copied().unwrap_or(0.0),
        diagnostics.log_evidence(),
        diagnostics.n_eval_gross,
        diagnostics.n_eval_net
    );
    Ok(())
}

fn cmd_evaluate(
    common: &Common,
    posterior_path: &Path,
    reference_path: Option<&Path>,
    model_path: Option<&Path>,
    obs_path: Option<&Path>,
) -> Result<()> {
    let cfg = resolve(common)?;
    require_file(posterior_path, "posterior")?;
    let samples = read_theta_csv(posterior_path, cfg.building.n_stories)?;
    let catalog = cfg.mode_catalog();
    let coverage = eval::mode_coverage(&samples, &catalog)?;

    let mut metrics = serde_json::Map::new();
    metrics.insert("n_samples".into(), serde_json::json!(samples.nrows()));
    metrics.insert(
        "mode_fractions".into(),
        serde_json::json!(coverage.per_mode_fractions()),
    );
    metrics.insert(
        "unassigned_fraction".into(),
        serde_json::json!(coverage.unassigned_fraction()),
    );
    metrics.insert(
        "mode_counts".into(),
        serde_json::json!(coverage.per_mode_counts),
    );

    if let Some(ref_path) = reference_path {
        require_file(ref_path, "reference samples")?;
        let reference = read_theta_csv(ref_path, cfg.building.n_stories)?;
        let mmd_cfg = cfg.mmd_config();
        let mmd2 = eval::mmd_squared(&samples, &reference, &mmd_cfg)?;
        metrics.insert("mmd_squared".into(), serde_json::json!(mmd2));
        metrics.insert("mmd".into(), serde_json::json!(mmd2.max(0.0).sqrt()));
    }

    let spec = cfg.building_spec();
    let grid = cfg.frequency_grid();
    let n_draws = cfg.eval.envelope_draws.min(samples.nrows());
    let envelopes = eval::posterior_predictive_frf(&samples, &spec, &grid, n_draws)?;
    let env_path = cfg.out_dir.join("envelopes.csv");
    eval::write_envelopes_csv(&envelopes, &grid, &env_path)?;

    if let (Some(mp), Some(op)) = (model_path, obs_path) {
        require_file(mp, "model checkpoint")?;
        require_file(op, "observation")?;
        let model = load_model::<f32>(mp)?;
        let raw = read_observation(op, &grid)?;
        let obs = ObservationEncoding::from_raw(&model, &raw)?;
        let proj = eval::latent_projection(&model, &spec, &samples, &obs, &catalog)?;
        let proj_path = cfg.out_dir.join("latent_projection.csv");
        eval::write_latent_projection_csv(&proj, &proj_path)?;
        metrics.insert(
            "latent_projection_degenerate".into(),
            serde_json::json!(proj.degenerate),
        );
    }

    let metrics_path = cfg.out_dir.join("metrics.json");
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(metrics))
        .map_err(|e| Error::Format(format!("metrics serialization failed: {e}")))?;
    std::fs::write(&metrics_path, text + "\n").map_err(|e| Error::io(&metrics_path, e))?;
    println!("metrics: {}", metrics_path.display());
    Ok(())
}

fn cmd_benchmark(
    common: &Common,
    model_path: &Path,
    obs_path: &Path,
    reference_path: &Path,
) -> Result<()> {
    let cfg = resolve(common)?;
    require_file(model_path, "model checkpoint")?;
    require_file(obs_path, "observation")?;
    require_file(reference_path, "reference samples")?;
    let model = load_model::<f32>(model_path)?;
    let grid = cfg.frequency_grid();
    let raw = read_observation(obs_path, &grid)?;
    let obs = ObservationEncoding::from_raw(&model, &raw)?;
    let reference = read_theta_csv(reference_path, cfg.building.n_stories)?;
    let mmd_cfg = cfg.mmd_config();

    let table_path = cfg.out_dir.join("benchmark.csv");
    let mut w = csv::Writer::from_path(&table_path)
        .map_err(|e| Error::io(&table_path, std::io::Error::other(e)))?;
    w.write_record([
        "algorithm",
        "n_particles",
        "n_runs",
        "n_eval_gross_mean",
        "n_eval_net_mean",
        "mmd_mean",
        "mmd_std",
        "wall_s_mean",
    ])
    .map_err(|e| Error::io(&table_path, std::io::Error::other(e)))?;

    for (pi, &n_particles) in cfg.eval.benchmark_populations.iter().enumerate() {
        let mut mmds = Vec::new();
        let mut gross = Vec::new();
        let mut net = Vec::new();
        let mut wall = Vec::new();
        for run_idx in 0..cfg.eval.benchmark_repeats {
            // Distinct deterministic seed per (population, repetition).
            let run_seed = cfg.rng_seed ^ (((pi as u64 + 1) << 32) | run_idx as u64);
            let smc_cfg = cfg.smc_config(n_particles, run_seed);
            let evaluator = |positions: &ndarray::ArrayView2<f64>| {
                log_lhat_batch(&model, &obs, &positions.to_owned())
            };
            let t0 = std::time::Instant::now();
            let (samples, diagnostics) = smc::run(evaluator, &smc_cfg)?;
            wall.push(t0.elapsed().as_secs_f64());
            gross.push(diagnostics.n_eval_gross as f64);
            net.push(diagnostics.n_eval_net as f64);
            mmds.push(eval::mmd(&samples, &reference, &mmd_cfg)?);
            eprintln!(
                "benchmark: n_particles={n_particles} run={run_idx} mmd={} wall_s={:.1}",
                mmds.last().unwrap(),
                wall.last().unwrap()
            );
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let mmd_mean = mean(&mmds);
        let mmd_std = if mmds.len() > 1 {
            (mmds.iter().map(|m| (m - mmd_mean).powi(2)).sum::<f64>() / (mmds.len() - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        w.write_record([
            "SMC".to_string(),
            n_particles.to_string(),
            cfg.eval.benchmark_repeats.to_string(),
            mean(&gross).to_string(),
            mean(&net).to_string(),
            mmd_mean.to_string(),
            mmd_std.to_string(),
            mean(&wall).to_string(),
        ])
        .map_err(|e| Error::io(&table_path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(&table_path, e))?;
    println!("benchmark table: {}", table_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// File formats shared by the commands
// ---------------------------------------------------------------------------

/// Write one FRF as CSV with columns frequency_hz, log_abs_H.
pub fn write_observation(path: &Path, grid: &FrequencyGrid, values: &[f64]) -> Result<()> {
    if values.len() != grid.n_points {
        return Err(Error::Parameter(format!(
            "observation has {} points, grid expects {}",
            values.len(),
            grid.n_points
        )));
    }
    let mut w =
        csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    w.write_record(["frequency_hz", "log_abs_H"])
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for (j, v) in values.iter().enumerate() {
        w.write_record([grid.frequency(j).to_string(), v.to_string()])
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read an observation CSV and verify it sits on the configured grid;
/// a mismatch is a usage error naming the expected grid.
pub fn read_observation(path: &Path, grid: &FrequencyGrid) -> Result<Vec<f64>> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut freqs = Vec::new();
    let mut values = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if record.len() != 2 {
            return Err(Error::Format(format!(
                "{}: expected 2 columns (frequency_hz, log_abs_H), got {}",
                path.display(),
                record.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("{}: bad number {s:?}", path.display())))
        };
        freqs.push(parse(&record[0])?);
        values.push(parse(&record[1])?);
    }
    let mismatch = freqs.len() != grid.n_points
        || freqs
            .iter()
            .enumerate()
            .any(|(j, f)| (f - grid.frequency(j)).abs() > 1e-9 * grid.frequency(j).abs().max(1.0));
    if mismatch {
        return Err(Error::Config(format!(
            "observation grid mismatch: expected f_start={}, f_step={}, n_points={} (got {} rows)",
            grid.f_start,
            grid.f_step,
            grid.n_points,
            freqs.len()
        )));
    }
    Ok(values)
}

/// Write parameter samples as CSV with one thetaK column per story.
pub fn write_theta_csv(path: &Path, samples: &Array2<f64>) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let header: Vec<String> = (1..=samples.ncols()).map(|k| format!("theta{k}")).collect();
    w.write_record(&header)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for row in samples.outer_iter() {
        let rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        w.write_record(&rec)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read parameter samples written by [`write_theta_csv`].
pub fn read_theta_csv(path: &Path, expected_dim: usize) -> Result<Array2<f64>> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if record.len() != expected_dim {
            return Err(Error::Config(format!(
                "{}: expected {expected_dim} parameter columns, got {}",
                path.display(),
                record.len()
            )));
        }
        for s in record.iter() {
            rows.push(s.trim().parse::<f64>().map_err(|_| {
                Error::Format(format!("{}: bad number {s:?}", path.display()))
            })?);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config(format!(
            "{}: no sample rows",
            path.display()
        )));
    }
    Array2::from_shape_vec((n, expected_dim), rows)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn observation_round_trip_and_grid_check() {
        let grid = FrequencyGrid {
            f_start: 0.0,
            f_step: 0.5,
            n_points: 16,
        };
        let values: Vec<f64> = (0..16).map(|j| (j as f64).sin()).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.csv");
        write_observation(&path, &grid, &values).unwrap();
        let back = read_observation(&path, &grid).unwrap();
        assert_eq!(back, values);

        let wrong = FrequencyGrid {
            f_start: 0.0,
            f_step: 0.25,
            n_points: 16,
        };
        let err = read_observation(&path, &wrong).unwrap_err();
        assert_eq!(err.exit_status(), 2);
        assert!(err.to_string().contains("f_step=0.25"));
    }

    #[test]
    fn theta_csv_round_trip() {
        let samples =
            Array2::from_shape_vec((3, 4), (0..12).map(|v| v as f64 * 0.25).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("theta.csv");
        write_theta_csv(&path, &samples).unwrap();
        let back = read_theta_csv(&path, 4).unwrap();
        assert_eq!(back, samples);
        assert!(read_theta_csv(&path, 3).is_err());
    }
}
