//! Run configuration: one TOML file describing every stage of the
//! pipeline, with environment/flag overrides for the seed and worker
//! count so reruns never need a rebuild.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::building::{FrequencyGrid, ShearBuildingSpec};
use crate::dataset::NoiseModel;
use crate::error::{Error, Result};
use crate::eval::{MMDConfig, ModeCatalog};
use crate::mvae::{ArchitectureConfig, TrainingConfig};
use crate::smc::SmcConfig;

/// Name of the resolved-config snapshot written beside every command's
/// outputs before any heavy work starts.
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildingBlock {
    pub n_stories: usize,
    pub story_mass: f64,
    pub stiffness_scale: f64,
    pub damping_ratio: f64,
    pub damping_anchors_hz: (f64, f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub f_start: f64,
    pub f_step: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseBlock {
    pub sigma_eps: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetBlock {
    /// Total number of (θ, x, x̃) triples to simulate.
    pub n_train: usize,
    pub val_fraction: f64,
    /// Uniform prior box, identical per story.
    pub bounds_low: f64,
    pub bounds_high: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub n_z: usize,
    pub conv_channels: [usize; 3],
    pub fc_width: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingBlock {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience_epochs: usize,
    pub max_epochs: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmcBlock {
    pub n_particles: usize,
    pub gamma: f64,
    pub proposal_scale: f64,
    pub n_mcmc_steps: usize,
    pub max_rounds: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalBlock {
    /// Larger sample sets are subsampled before kernel sums.
    pub mmd_max_samples: usize,
    /// Mode-assignment radius around each catalog entry.
    pub mode_radius: f64,
    /// Posterior draws simulated for the predictive envelopes.
    pub envelope_draws: usize,
    /// Population sizes exercised by the benchmark command.
    pub benchmark_populations: Vec<usize>,
    /// Independent repetitions per population size.
    pub benchmark_repeats: usize,
}

/// Everything a run needs, in file order: global seed and output
/// directory, then one block per pipeline stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub rng_seed: u64,
    pub out_dir: PathBuf,
    /// Worker-pool size; 0 means all available cores. 1 is the
    /// determinism reference.
    pub workers: usize,
    pub building: BuildingBlock,
    pub grid: GridBlock,
    pub noise: NoiseBlock,
    pub dataset: DatasetBlock,
    pub model: ModelBlock,
    pub training: TrainingBlock,
    pub smc: SmcBlock,
    pub eval: EvalBlock,
}

impl RunConfig {
    /// The full-size benchmark setup from the study: 10⁵ triples, the
    /// 1024-point grid to ~20.5 Hz, σ_ε = 0.2, n_z = 8, and the
    /// adaptive-tempering sampler defaults.
    pub fn benchmark() -> Self {
        let spec = ShearBuildingSpec::benchmark();
        let grid = FrequencyGrid::benchmark();
        let arch = ArchitectureConfig::benchmark();
        let training = TrainingConfig::benchmark();
        RunConfig {
            rng_seed: 0,
            out_dir: PathBuf::from("runs/benchmark"),
            workers: 0,
            building: BuildingBlock {
                n_stories: spec.n_stories,
                story_mass: spec.story_mass,
                stiffness_scale: spec.stiffness_scale,
                damping_ratio: spec.damping_ratio,
                damping_anchors_hz: spec.damping_anchors_hz,
            },
            grid: GridBlock {
                f_start: grid.f_start,
                f_step: grid.f_step,
                n_points: grid.n_points,
            },
            noise: NoiseBlock {
                sigma_eps: NoiseModel::benchmark().sigma_eps,
            },
            dataset: DatasetBlock {
                n_train: 100_000,
                val_fraction: 0.1,
                bounds_low: 0.33,
                bounds_high: 3.0,
            },
            model: ModelBlock {
                n_z: arch.n_z,
                conv_channels: arch.conv_channels,
                fc_width: arch.fc_width,
                kernel: arch.kernel,
            },
            training: TrainingBlock {
                learning_rate: training.learning_rate,
                batch_size: training.batch_size,
                patience_epochs: training.patience_epochs,
                max_epochs: training.max_epochs,
                alpha: training.alpha,
            },
            smc: SmcBlock {
                n_particles: 2000,
                gamma: 0.8,
                proposal_scale: 0.2,
                n_mcmc_steps: 10,
                max_rounds: 200,
            },
            eval: EvalBlock {
                mmd_max_samples: 5000,
                mode_radius: 0.15,
                envelope_draws: 200,
                benchmark_populations: vec![500, 1000, 2000],
                benchmark_repeats: 10,
            },
        }
    }

    pub fn building_spec(&self) -> ShearBuildingSpec {
        ShearBuildingSpec {
            n_stories: self.building.n_stories,
            story_mass: self.building.story_mass,
            stiffness_scale: self.building.stiffness_scale,
            damping_ratio: self.building.damping_ratio,
            damping_anchors_hz: self.building.damping_anchors_hz,
        }
    }

    pub fn frequency_grid(&self) -> FrequencyGrid {
        FrequencyGrid {
            f_start: self.grid.f_start,
            f_step: self.grid.f_step,
            n_points: self.grid.n_points,
        }
    }

    pub fn noise_model(&self) -> NoiseModel {
        NoiseModel {
            sigma_eps: self.noise.sigma_eps,
        }
    }

    pub fn prior_bounds(&self) -> Vec<(f64, f64)> {
        vec![(self.dataset.bounds_low, self.dataset.bounds_high); self.building.n_stories]
    }

    pub fn architecture(&self) -> ArchitectureConfig {
        ArchitectureConfig {
            n_z: self.model.n_z,
            theta_dim: self.building.n_stories,
            x_len: self.grid.n_points,
            conv_channels: self.model.conv_channels,
            fc_width: self.model.fc_width,
            kernel: self.model.kernel,
        }
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            learning_rate: self.training.learning_rate,
            batch_size: self.training.batch_size,
            patience_epochs: self.training.patience_epochs,
            alpha: self.training.alpha,
            max_epochs: self.training.max_epochs,
            rng_seed: self.rng_seed,
        }
    }

    /// Sampler settings for a given population size (the benchmark command
    /// sweeps several), seeded from the global seed plus a caller tag.
    pub fn smc_config(&self, n_particles: usize, rng_seed: u64) -> SmcConfig {
        SmcConfig {
            n_particles,
            gamma: self.smc.gamma,
            proposal_scale: self.smc.proposal_scale,
            n_mcmc_steps: self.smc.n_mcmc_steps,
            max_rounds: self.smc.max_rounds,
            rng_seed,
            bounds: self.prior_bounds(),
        }
    }

    pub fn mmd_config(&self) -> MMDConfig {
        MMDConfig {
            bandwidth: None,
            max_samples: self.eval.mmd_max_samples,
            subsample_seed: self.rng_seed,
        }
    }

    pub fn mode_catalog(&self) -> ModeCatalog {
        ModeCatalog {
            radius: self.eval.mode_radius,
            ..ModeCatalog::benchmark()
        }
    }

    /// Cross-stage schema validation; every block must produce a valid
    /// module config.
    pub fn validate(&self) -> Result<()> {
        self.building_spec().validate()?;
        self.frequency_grid().validate()?;
        self.noise_model().validate()?;
        if self.dataset.n_train == 0 {
            return Err(Error::Config("dataset.n_train must be positive".into()));
        }
        if !(self.dataset.val_fraction > 0.0 && self.dataset.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "dataset.val_fraction must lie in (0, 1), got {}",
                self.dataset.val_fraction
            )));
        }
        if !(self.dataset.bounds_low < self.dataset.bounds_high) {
            return Err(Error::Config(format!(
                "dataset bounds [{}, {}] are not an interval",
                self.dataset.bounds_low, self.dataset.bounds_high
            )));
        }
        self.architecture().validate()?;
        self.training_config().validate()?;
        self.smc_config(self.smc.n_particles, self.rng_seed).validate()?;
        self.mode_catalog().validate()?;
        if self.eval.mmd_max_samples < 2 {
            return Err(Error::Config("eval.mmd_max_samples must be ≥ 2".into()));
        }
        if self.eval.envelope_draws == 0 {
            return Err(Error::Config("eval.envelope_draws must be positive".into()));
        }
        if self.eval.benchmark_populations.is_empty() || self.eval.benchmark_repeats == 0 {
            return Err(Error::Config(
                "eval.benchmark_populations and eval.benchmark_repeats must be nonempty/positive"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Parse a TOML file; unknown keys anywhere are rejected.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Apply overrides in precedence order: command-line flag, then
    /// environment variable, then the file value already present.
    /// Recognized variables: `LSBI_SEED` (u64), `LSBI_WORKERS` (usize).
    pub fn apply_overrides(
        &mut self,
        seed_flag: Option<u64>,
        workers_flag: Option<usize>,
        out_dir_flag: Option<PathBuf>,
    ) -> Result<()> {
        match seed_flag {
            Some(s) => self.rng_seed = s,
            None => {
                if let Some(v) = read_env("LSBI_SEED")? {
                    self.rng_seed = v.parse().map_err(|_| {
                        Error::Config(format!("LSBI_SEED must be an unsigned integer, got {v:?}"))
                    })?;
                }
            }
        }
        match workers_flag {
            Some(w) => self.workers = w,
            None => {
                if let Some(v) = read_env("LSBI_WORKERS")? {
                    self.workers = v.parse().map_err(|_| {
                        Error::Config(format!(
                            "LSBI_WORKERS must be an unsigned integer, got {v:?}"
                        ))
                    })?;
                }
            }
        }
        if let Some(dir) = out_dir_flag {
            self.out_dir = dir;
        }
        Ok(())
    }

    /// Serialize the fully-resolved configuration into `dir` (created if
    /// missing). Called by every command before heavy work.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("config serialization failed: {e}")))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn read_env(name: &str) -> Result<Option<String>> {
    match std::env::var(name) {
        Ok(v) if v.is_empty() => Ok(None),
        Ok(v) => Ok(Some(v)),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("{name}: {e}"))),
    }
}
