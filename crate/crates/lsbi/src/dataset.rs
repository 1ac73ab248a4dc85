//! Training-data generation, splitting, standardization, and persistence.
//!
//! A dataset is a set of triples (θ, x, x̃): parameters drawn from the box
//! prior, the clean simulated log-FRF x = h(θ), and a noisy copy
//! x̃ = x + ε with isotropic Gaussian ε on the log scale. The surrogate is
//! trained on standardized responses and on θ affinely rescaled to [0, 1];
//! both transformations are fitted on the training partition only and are
//! stored with the dataset so the same maps can later be applied to a
//! measured observation.
//!
//! Standardization uses a floored scale per feature,
//! `scale_j = max(std_j, σ_ε, 1e-8)`. The floor matters: the FRF is exactly
//! 1 at 0 Hz for every θ, so the first grid feature has zero variance, and
//! several low-frequency neighbors vary far less than the measurement noise.
//! Dividing by the raw standard deviation there would blow pure noise up to
//! thousands of standard units (and 0/0 at 0 Hz); the floor keeps any
//! noise-dominated feature at its natural sub-unit scale instead. Features
//! with real signal variance are untouched by the floor and come out with
//! mean 0, variance 1 on the training partition.
//!
//! Generation is deterministic for a given seed at any worker count: each
//! row draws its noise from an independent row-keyed stream and rows are
//! assembled in index order.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;

use crate::building::{frf_log_magnitude, FrequencyGrid, ShearBuildingSpec};
use crate::container;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"LSBIDSET";
pub const DATASET_VERSION: u8 = 1;

/// Measurement-noise model: isotropic Gaussian per frequency point on the
/// log-magnitude scale.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseModel {
    pub sigma_eps: f64,
}

impl NoiseModel {
    /// Benchmark default σ_ε = 0.2.
    pub fn benchmark() -> Self {
        NoiseModel { sigma_eps: 0.2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_eps < 0.0 || !self.sigma_eps.is_finite() {
            return Err(Error::Parameter(format!(
                "sigma_eps must be finite and nonnegative, got {}",
                self.sigma_eps
            )));
        }
        Ok(())
    }
}

/// Per-feature affine map fitted on the training partition:
/// standardized = (x − mean) / scale, with scale = max(std, σ_ε, 1e-8).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// The floor that was in effect when the scales were fitted.
    pub scale_floor: f64,
}

impl Standardization {
    /// Standardize one raw response (used for measured observations).
    pub fn apply(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.mean.len() {
            return Err(Error::Parameter(format!(
                "observation has {} points but the model was fitted on {}",
                raw.len(),
                self.mean.len()
            )));
        }
        Ok(raw
            .iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(x, (m, s))| (x - m) / s)
            .collect())
    }
}

/// Seeds that produced the dataset, kept for provenance and bitwise
/// regeneration.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetSeeds {
    pub prior: Option<u64>,
    pub noise: Option<u64>,
    pub split: Option<u64>,
}

/// Train/validation split plus the transformations fitted on the training
/// partition.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SplitInfo {
    /// Shuffled row order; the first `n_train` entries are the training
    /// partition, the rest validation.
    pub permutation: Vec<u32>,
    pub n_train: usize,
    pub standardization: Standardization,
}

/// The (θ, x, x̃) triples with everything needed to reuse them: prior box,
/// grid, noise model, seeds, and (once split) the fitted transformations.
/// Arrays are kept raw; standardized views are produced on demand.
#[derive(Debug, Clone)]
pub struct TrainingDataset {
    pub thetas: Array2<f32>,
    pub responses_clean: Array2<f32>,
    pub responses_noisy: Array2<f32>,
    pub bounds: Vec<(f64, f64)>,
    pub grid: FrequencyGrid,
    pub noise: NoiseModel,
    pub seeds: DatasetSeeds,
    pub split: Option<SplitInfo>,
}

/// The benchmark prior box [0.33, 3.00] per story.
pub fn benchmark_bounds(dim: usize) -> Vec<(f64, f64)> {
    vec![(0.33, 3.00); dim]
}

/// i.i.d. uniform draws over the box; deterministic for a given seed.
/// A zero-width dimension (low == high) is allowed for testing and yields
/// the constant value; low > high is an error.
pub fn sample_prior(n: usize, bounds: &[(f64, f64)], rng_seed: u64) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(Error::Parameter("cannot draw zero prior samples".into()));
    }
    if bounds.is_empty() {
        return Err(Error::Parameter("prior box must have at least one dimension".into()));
    }
    for (lo, hi) in bounds {
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(Error::Parameter(format!(
                "invalid prior bounds ({lo}, {hi}): need finite low <= high"
            )));
        }
    }
    let mut rng = crate::rng::stream(rng_seed, "prior");
    let d = bounds.len();
    let mut out = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        for (j, (lo, hi)) in bounds.iter().enumerate() {
            out[(i, j)] = if lo == hi {
                *lo
            } else {
                rng.random_range(*lo..*hi)
            };
        }
    }
    Ok(out)
}

/// Simulate the triples for the given parameter draws: x = h(θ) at the roof,
/// x̃ = x + ε. Simulation runs in 64-bit and is stored in 32-bit; the noise
/// is added in 64-bit to the stored 32-bit clean value, so σ_ε = 0 gives
/// x̃ bitwise equal to x.
pub fn generate_triples(
    thetas: &Array2<f64>,
    spec: &ShearBuildingSpec,
    grid: &FrequencyGrid,
    noise: &NoiseModel,
    rng_seed: u64,
) -> Result<TrainingDataset> {
    noise.validate()?;
    grid.validate()?;
    spec.validate()?;
    let n = thetas.nrows();
    if n == 0 {
        return Err(Error::Parameter("no parameter samples supplied".into()));
    }
    let roof = spec.n_stories;
    let normal = rand_distr::StandardNormal;

    let rows: Vec<(Vec<f32>, Vec<f32>)> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<(Vec<f32>, Vec<f32>)> {
            let theta: Vec<f64> = thetas.row(i).to_vec();
            let x = frf_log_magnitude(spec, &theta, grid, roof).map_err(|e| {
                Error::Numerical(format!("simulator failed on sample {i}: {e}"))
            })?;
            let clean: Vec<f32> = x.iter().map(|v| *v as f32).collect();
            let mut rng = crate::rng::stream_indexed(rng_seed, "noise", i as u64);
            let noisy: Vec<f32> = clean
                .iter()
                .map(|v| {
                    let eps: f64 = rng.sample(normal);
                    (f64::from(*v) + noise.sigma_eps * eps) as f32
                })
                .collect();
            Ok((clean, noisy))
        })
        .collect::<Result<_>>()?;

    let n_x = grid.n_points;
    let mut responses_clean = Array2::<f32>::zeros((n, n_x));
    let mut responses_noisy = Array2::<f32>::zeros((n, n_x));
    for (i, (clean, noisy)) in rows.into_iter().enumerate() {
        responses_clean
            .row_mut(i)
            .assign(&ndarray::ArrayView1::from(&clean));
        responses_noisy
            .row_mut(i)
            .assign(&ndarray::ArrayView1::from(&noisy));
    }

    Ok(TrainingDataset {
        thetas: thetas.mapv(|v| v as f32),
        responses_clean,
        responses_noisy,
        bounds: benchmark_bounds(thetas.ncols()),
        grid: grid.clone(),
        noise: noise.clone(),
        seeds: DatasetSeeds {
            prior: None,
            noise: Some(rng_seed),
            split: None,
        },
        split: None,
    })
}

impl TrainingDataset {
    pub fn n(&self) -> usize {
        self.thetas.nrows()
    }

    pub fn dim_theta(&self) -> usize {
        self.thetas.ncols()
    }

    pub fn dim_x(&self) -> usize {
        self.responses_clean.ncols()
    }

    fn split_ref(&self) -> Result<&SplitInfo> {
        self.split
            .as_ref()
            .ok_or_else(|| Error::Parameter("dataset has not been split yet".into()))
    }

    pub fn train_rows(&self) -> Result<&[u32]> {
        let s = self.split_ref()?;
        Ok(&s.permutation[..s.n_train])
    }

    pub fn val_rows(&self) -> Result<&[u32]> {
        let s = self.split_ref()?;
        Ok(&s.permutation[s.n_train..])
    }

    pub fn standardization(&self) -> Result<&Standardization> {
        Ok(&self.split_ref()?.standardization)
    }

    /// Shuffle rows, fit the standardization on the training partition of
    /// the clean responses, and record both. Errors if already split: the
    /// fitted statistics must never be refitted on different rows.
    pub fn split_and_standardize(&mut self, val_frac: f64, rng_seed: u64) -> Result<()> {
        if self.split.is_some() {
            return Err(Error::Parameter(
                "dataset is already split; refusing to refit standardization".into(),
            ));
        }
        if !(val_frac > 0.0 && val_frac < 1.0) {
            return Err(Error::Parameter(format!(
                "validation fraction must lie in (0, 1), got {val_frac}"
            )));
        }
        let n = self.n();
        let n_val = (n as f64 * val_frac).floor() as usize;
        let n_train = n - n_val;
        if n_train == 0 || n_val == 0 {
            return Err(Error::Parameter(format!(
                "split of {n} rows at fraction {val_frac} leaves an empty partition"
            )));
        }

        let mut permutation: Vec<u32> = (0..n as u32).collect();
        let mut rng = crate::rng::stream(rng_seed, "split");
        // Fisher–Yates.
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            permutation.swap(i, j);
        }

        // Per-feature mean/std over the training rows of the clean
        // responses, accumulated in 64-bit.
        let n_x = self.dim_x();
        let mut mean = vec![0.0f64; n_x];
        for &row in &permutation[..n_train] {
            for (m, v) in mean.iter_mut().zip(self.responses_clean.row(row as usize)) {
                *m += f64::from(*v);
            }
        }
        for m in &mut mean {
            *m /= n_train as f64;
        }
        let mut var = vec![0.0f64; n_x];
        for &row in &permutation[..n_train] {
            for (s, (v, m)) in var
                .iter_mut()
                .zip(self.responses_clean.row(row as usize).iter().zip(&mean))
            {
                let d = f64::from(*v) - m;
                *s += d * d;
            }
        }
        let scale_floor = self.noise.sigma_eps.max(1e-8);
        let scale: Vec<f64> = var
            .iter()
            .map(|s| (s / n_train as f64).sqrt().max(scale_floor))
            .collect();

        self.seeds.split = Some(rng_seed);
        self.split = Some(SplitInfo {
            permutation,
            n_train,
            standardization: Standardization {
                mean,
                scale,
                scale_floor,
            },
        });
        Ok(())
    }

    /// Standardized responses (clean, noisy) for the given rows, as 32-bit
    /// network inputs. The affine map is evaluated in 64-bit and rounded
    /// once.
    pub fn standardized_responses(&self, rows: &[u32]) -> Result<(Array2<f32>, Array2<f32>)> {
        let st = self.standardization()?;
        let n_x = self.dim_x();
        let build = |src: &Array2<f32>| {
            let mut out = Array2::<f32>::zeros((rows.len(), n_x));
            for (oi, &row) in rows.iter().enumerate() {
                for (j, v) in src.row(row as usize).iter().enumerate() {
                    out[(oi, j)] = ((f64::from(*v) - st.mean[j]) / st.scale[j]) as f32;
                }
            }
            out
        };
        Ok((build(&self.responses_clean), build(&self.responses_noisy)))
    }

    /// θ rows affinely mapped to [0, 1] by the prior box, as network inputs.
    pub fn scaled_thetas(&self, rows: &[u32]) -> Array2<f32> {
        let d = self.dim_theta();
        let mut out = Array2::<f32>::zeros((rows.len(), d));
        for (oi, &row) in rows.iter().enumerate() {
            for j in 0..d {
                out[(oi, j)] = scale_theta_component(
                    f64::from(self.thetas[(row as usize, j)]),
                    self.bounds[j],
                ) as f32;
            }
        }
        out
    }

    /// Persist to the checksummed container format.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let metadata = serde_json::json!({
            "grid": self.grid,
            "bounds": self.bounds,
            "noise": self.noise,
            "seeds": self.seeds,
            "split": self.split,
        });
        container::write_container(
            path,
            DATASET_MAGIC,
            DATASET_VERSION,
            &metadata,
            &[
                ("thetas", &self.thetas),
                ("responses_clean", &self.responses_clean),
                ("responses_noisy", &self.responses_noisy),
            ],
        )
    }

    /// Load a dataset saved by [`TrainingDataset::save`].
    pub fn load(path: &std::path::Path) -> Result<TrainingDataset> {
        let mut c = container::read_container(path, DATASET_MAGIC)?;
        if c.version != DATASET_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset version {} (expected {DATASET_VERSION})",
                c.version
            )));
        }
        let meta = c.metadata.clone();
        let field = |name: &str| -> Result<serde_json::Value> {
            meta.get(name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("dataset metadata missing {name:?}")))
        };
        let grid: FrequencyGrid = serde_json::from_value(field("grid")?)
            .map_err(|e| Error::Format(format!("bad grid metadata: {e}")))?;
        let bounds: Vec<(f64, f64)> = serde_json::from_value(field("bounds")?)
            .map_err(|e| Error::Format(format!("bad bounds metadata: {e}")))?;
        let noise: NoiseModel = serde_json::from_value(field("noise")?)
            .map_err(|e| Error::Format(format!("bad noise metadata: {e}")))?;
        let seeds: DatasetSeeds = serde_json::from_value(field("seeds")?)
            .map_err(|e| Error::Format(format!("bad seeds metadata: {e}")))?;
        let split: Option<SplitInfo> = serde_json::from_value(field("split")?)
            .map_err(|e| Error::Format(format!("bad split metadata: {e}")))?;

        let thetas = c.take_array("thetas")?;
        let responses_clean = c.take_array("responses_clean")?;
        let responses_noisy = c.take_array("responses_noisy")?;
        let ds = TrainingDataset {
            thetas,
            responses_clean,
            responses_noisy,
            bounds,
            grid,
            noise,
            seeds,
            split,
        };
        if ds.responses_clean.dim() != ds.responses_noisy.dim()
            || ds.thetas.nrows() != ds.responses_clean.nrows()
            || ds.responses_clean.ncols() != ds.grid.n_points
        {
            return Err(Error::Format("dataset arrays have inconsistent shapes".into()));
        }
        if let Some(s) = &ds.split {
            if s.permutation.len() != ds.n() || s.n_train > ds.n() {
                return Err(Error::Format("dataset split metadata is inconsistent".into()));
            }
        }
        Ok(ds)
    }
}

/// Affine θ → [0, 1] map for one component.
pub fn scale_theta_component(theta: f64, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        (theta - lo) / (hi - lo)
    } else {
        0.0
    }
}
