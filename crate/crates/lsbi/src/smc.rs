//! Adaptive-tempering sequential Monte Carlo sampler.
//!
//! Draws from p(θ | x_obs) ∝ L̂(θ)·p(θ) for a box-uniform prior p and any
//! log-likelihood supplied as a batched evaluator. The sampler walks a
//! tempering ladder p_t ∝ L̂^{β_t}·p with 0 = β_0 < β_1 < … < β_T = 1,
//! choosing each increment adaptively so the effective sample size (ESS) of
//! the incremental importance weights stays at a target fraction γ of the
//! population. Each round is the classic resample–move scheme: systematic
//! resampling to equal weights, then a few random-walk Metropolis–Hastings
//! sweeps whose Gaussian proposal covariance is a scaled weighted covariance
//! of the current population, so the proposal automatically adapts to the
//! (possibly multimodal) shape of the intermediate target.
//!
//! Likelihood calls are whole-population batches: per MH sweep the sampler
//! generates all candidates first, drops the ones outside the prior box
//! (prior density zero — no point evaluating them), and submits the
//! survivors
//! as one batch. The evaluator contract requires bitwise-deterministic
//! results regardless of its internal parallelism; all sampler-side
//! randomness comes from a single seeded stream, so a run is reproducible
//! bit for bit.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Sampler configuration.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SmcConfig {
    /// Population size N_s.
    pub n_particles: usize,
    /// ESS target fraction γ of N_s used by the tempering rule.
    pub gamma: f64,
    /// Proposal scale b; the RWMH proposal covariance is b²·(population
    /// covariance).
    pub proposal_scale: f64,
    /// RWMH sweeps per tempering round.
    pub n_mcmc_steps: usize,
    /// Hard cap on tempering rounds (termination guard).
    pub max_rounds: usize,
    /// Seed for the sampler's internal stream.
    pub rng_seed: u64,
    /// Prior box, one (low, high) pair per dimension.
    pub bounds: Vec<(f64, f64)>,
}

impl SmcConfig {
    /// Benchmark defaults: γ = 0.8, b = 0.2, 10 MH sweeps per round, the
    /// four-dimensional stiffness prior box [0.33, 3.00]⁴.
    pub fn benchmark(n_particles: usize, rng_seed: u64) -> Self {
        SmcConfig {
            n_particles,
            gamma: 0.8,
            proposal_scale: 0.2,
            n_mcmc_steps: 10,
            max_rounds: 200,
            rng_seed,
            bounds: vec![(0.33, 3.00); 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(Error::Parameter("n_particles must be >= 2".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Parameter(format!(
                "gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        if !(self.proposal_scale > 0.0) {
            return Err(Error::Parameter("proposal scale b must be positive".into()));
        }
        if self.n_mcmc_steps < 1 {
            return Err(Error::Parameter("n_mcmc_steps must be >= 1".into()));
        }
        if self.bounds.is_empty() || self.bounds.iter().any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::Parameter(
                "prior box must be non-empty with low < high per dimension".into(),
            ));
        }
        Ok(())
    }
}

/// Sampler state between rounds: particle positions with their cached
/// log-likelihoods (refreshed after every accepted move) and the current
/// tempering exponent. The RNG lives with the run loop, not the state.
#[derive(Debug, Clone)]
pub struct ParticlePopulation {
    /// N_s × D positions.
    pub positions: Array2<f64>,
    /// Cached log-likelihood of each position.
    pub log_lhat: Vec<f64>,
    /// Current tempering exponent β ∈ [0, 1].
    pub beta: f64,
    /// Completed tempering rounds.
    pub round_index: usize,
}

/// Per-round diagnostics collected by [`run`].
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct SmcDiagnostics {
    /// Chosen β per round; strictly increasing, final entry 1.
    pub beta_schedule: Vec<f64>,
    /// ESS of the incremental weights at the chosen β, per round.
    pub ess: Vec<f64>,
    /// Mean MH acceptance rate per round (accepted / proposed).
    pub acceptance_rate: Vec<f64>,
    /// ln of the mean incremental weight, per round; the sum estimates the
    /// log-evidence ln ∫ L̂ p(θ) dθ.
    pub log_evidence_increments: Vec<f64>,
    /// Wall-clock seconds per round.
    pub elapsed_s: Vec<f64>,
    /// Candidate rows submitted to the evaluator, including the
    /// initialization pass, before the out-of-box short-circuit.
    pub n_eval_gross: u64,
    /// Rows actually evaluated (gross minus out-of-box rejections).
    pub n_eval_net: u64,
    /// Rounds in which the population covariance was degenerate and the
    /// isotropic fallback proposal was used.
    pub degenerate_proposal_rounds: Vec<usize>,
}

impl SmcDiagnostics {
    /// Accumulated log-evidence estimate.
    pub fn log_evidence(&self) -> f64 {
        self.log_evidence_increments.iter().sum()
    }

    /// Write the per-round table as CSV
    /// (round, beta, ess, acceptance_rate, log_evidence_increment, elapsed_s).
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| {
            Error::Format(format!("cannot write diagnostics CSV {}: {e}", path.display()))
        })?;
        w.write_record([
            "round",
            "beta",
            "ess",
            "acceptance_rate",
            "log_evidence_increment",
            "elapsed_s",
        ])
        .map_err(|e| Error::Format(e.to_string()))?;
        for i in 0..self.beta_schedule.len() {
            w.write_record([
                i.to_string(),
                self.beta_schedule[i].to_string(),
                self.ess[i].to_string(),
                self.acceptance_rate[i].to_string(),
                self.log_evidence_increments[i].to_string(),
                self.elapsed_s[i].to_string(),
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// log(Σ exp(x_i)) with max-subtraction; never exponentiates raw inputs.
fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m; // all -inf (or a NaN propagates)
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

/// Effective sample size of the incremental weights w_i ∝ exp(dbeta·ℓ_i):
/// ESS = (Σw)² / Σw², computed after max-subtraction in the log domain.
/// Bounds 1 ≤ ESS ≤ N hold for any finite input (Cauchy–Schwarz).
pub fn ess(log_lhat: &[f64], dbeta: f64) -> f64 {
    debug_assert!(dbeta >= 0.0);
    let m = log_lhat
        .iter()
        .map(|l| dbeta * l)
        .fold(f64::NEG_INFINITY, f64::max);
    // dbeta = 0 makes every shifted weight exactly 1; this also covers the
    // max-subtraction guarantee that at least one weight is exp(0) = 1, so
    // underflow of the whole weight vector cannot happen.
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for l in log_lhat {
        let w = (dbeta * l - m).exp();
        sum += w;
        sum_sq += w * w;
    }
    debug_assert!(sum > 0.0, "weights vanished despite max-subtraction");
    sum * sum / sum_sq
}

/// Next tempering exponent: β = 1 if the full remaining increment keeps
/// ESS ≥ γ·N_s, otherwise the unique β ∈ (beta_prev, 1) with
/// ESS(β − beta_prev) = γ·N_s, found by bisection (ESS is continuous and
/// non-increasing in the increment for non-constant log-likelihoods).
pub fn find_next_beta(log_lhat: &[f64], beta_prev: f64, gamma: f64) -> f64 {
    assert!((0.0..1.0).contains(&beta_prev), "beta_prev must lie in [0, 1)");
    let n = log_lhat.len() as f64;
    let target = gamma * n;
    let full = 1.0 - beta_prev;
    if ess(log_lhat, full) >= target {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0, full); // ESS(lo) = N ≥ target > ESS(hi)
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ess(log_lhat, mid) >= target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    beta_prev + 0.5 * (lo + hi)
}

/// Systematic resampling: one uniform offset u ∈ (0, 1] shared by all N
/// strata. Returns the selected ancestor index per output slot. Expected
/// copy counts are N·w_i; with equal weights and aligned strata the output
/// is exactly the identity (every particle kept once).
pub fn systematic_resample(weights: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let n = weights.len();
    if n == 0 {
        return Err(Error::Parameter("cannot resample an empty population".into()));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Numerical("non-finite or negative resampling weight".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Numerical("resampling weights sum to zero".into()));
    }
    // u ∈ (0, 1]: keeps the equal-weight case exactly aligned with strata.
    let u = 1.0 - rng.random::<f64>();
    let mut out = Vec::with_capacity(n);
    let mut i = 0usize;
    let mut csum = weights[0];
    for j in 0..n {
        let t = total * ((j as f64 + u) / n as f64);
        while csum < t && i + 1 < n {
            i += 1;
            csum += weights[i];
        }
        out.push(i);
    }
    Ok(out)
}

/// Scaled weighted population covariance used as the RWMH proposal:
///
/// Σ = b² · Σ_i (w_i / (S·N)) (θ_i − θ̄)(θ_i − θ̄)ᵀ,  S = Σ_i w_i / N,
///
/// with θ̄ the weight-normalized mean — i.e. b² times the weighted sample
/// covariance, regardless of the weights' normalization. A diagonal jitter
/// of 1e-10·trace/D guards the later Cholesky against rank deficiency; a
/// fully degenerate population (all particles identical) falls back to an
/// isotropic b²·1e-6·I proposal.
pub fn proposal_covariance(positions: &ArrayView2<f64>, weights: &[f64], b: f64) -> Array2<f64> {
    let (n, d) = positions.dim();
    assert_eq!(n, weights.len(), "one weight per particle");
    assert!(n >= 2, "need at least two particles for a covariance");
    let wsum: f64 = weights.iter().sum();

    let mut mean = vec![0.0; d];
    for (row, w) in positions.outer_iter().zip(weights) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += w * x;
        }
    }
    for m in &mut mean {
        *m /= wsum;
    }

    let mut cov = Array2::<f64>::zeros((d, d));
    for (row, w) in positions.outer_iter().zip(weights) {
        for a in 0..d {
            let da = row[a] - mean[a];
            for bcol in a..d {
                cov[(a, bcol)] += w * da * (row[bcol] - mean[bcol]);
            }
        }
    }
    for a in 0..d {
        for bcol in 0..a {
            cov[(a, bcol)] = cov[(bcol, a)];
        }
    }
    cov.mapv_inplace(|v| v * b * b / wsum);

    let trace: f64 = (0..d).map(|a| cov[(a, a)]).sum();
    if trace > 0.0 && trace.is_finite() {
        let jitter = 1e-10 * trace / d as f64;
        for a in 0..d {
            cov[(a, a)] += jitter;
        }
    } else {
        // Collapsed population: any direction is as good as any other.
        cov = Array2::eye(d) * (b * b * 1e-6);
    }
    cov
}

/// Lower Cholesky factor of a small SPD matrix.
fn cholesky(cov: &Array2<f64>) -> Result<Array2<f64>> {
    let d = cov.nrows();
    let m = nalgebra::DMatrix::from_fn(d, d, |r, c| cov[(r, c)]);
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::Numerical("proposal covariance is not positive definite".into()))?;
    let l = chol.l();
    Ok(Array2::from_shape_fn((d, d), |(r, c)| l[(r, c)]))
}

fn in_box(theta: &[f64], bounds: &[(f64, f64)]) -> bool {
    theta
        .iter()
        .zip(bounds)
        .all(|(t, (lo, hi))| *t >= *lo && *t <= *hi)
}

/// One round of RWMH moves at inverse temperature `beta`, using proposal
/// covariance `cov`. Per sweep all candidates are drawn first; those outside
/// the prior box are rejected without evaluation, the rest are scored by ONE
/// batched evaluator call, and each particle accepts with probability
/// min{1, exp(β·(ℓ* − ℓ))}. Returns the acceptance rate over all proposals.
pub fn mcmc_move<F>(
    pop: &mut ParticlePopulation,
    cov: &Array2<f64>,
    beta: f64,
    n_steps: usize,
    bounds: &[(f64, f64)],
    evaluator: &F,
    rng: &mut ChaCha8Rng,
    diagnostics: &mut SmcDiagnostics,
) -> Result<f64>
where
    F: Fn(&ArrayView2<f64>) -> Result<Vec<f64>>,
{
    let (n, d) = pop.positions.dim();
    let l = cholesky(cov)?;
    let normal = rand_distr::StandardNormal;

    let mut accepted = 0u64;
    for _ in 0..n_steps {
        // Candidates for the whole population, in particle order.
        let mut candidates = Array2::<f64>::zeros((n, d));
        for i in 0..n {
            let xi: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(normal)).collect();
            for a in 0..d {
                let mut step = 0.0;
                for c in 0..=a {
                    step += l[(a, c)] * xi[c];
                }
                candidates[(i, a)] = pop.positions[(i, a)] + step;
            }
        }

        // Box filter: flat prior is zero outside, so those candidates are
        // dead on arrival and skip the likelihood batch entirely.
        let alive: Vec<usize> = (0..n)
            .filter(|&i| in_box(candidates.row(i).as_slice().unwrap(), bounds))
            .collect();
        diagnostics.n_eval_gross += n as u64;
        diagnostics.n_eval_net += alive.len() as u64;

        let mut batch = Array2::<f64>::zeros((alive.len(), d));
        for (bi, &i) in alive.iter().enumerate() {
            batch.row_mut(bi).assign(&candidates.row(i));
        }
        let cand_ll = evaluator(&batch.view())?;

        for (bi, &i) in alive.iter().enumerate() {
            let log_ratio = beta * (cand_ll[bi] - pop.log_lhat[i]);
            if !log_ratio.is_finite() && log_ratio.is_nan() {
                continue; // treat a non-finite candidate density as rejection
            }
            let u: f64 = rng.random();
            if u.ln() < log_ratio {
                pop.positions.row_mut(i).assign(&candidates.row(i));
                pop.log_lhat[i] = cand_ll[bi];
                accepted += 1;
            }
        }
    }
    Ok(accepted as f64 / (n * n_steps) as f64)
}

/// Run the sampler: initialize from the box prior, temper adaptively to
/// β = 1, and return the final positions with per-round diagnostics.
///
/// The loop per round: choose β (ESS rule) → incremental importance weights
/// → log-evidence increment → systematic resample → adapt proposal
/// covariance → RWMH move sweeps. Terminates after the move phase of the
/// β = 1 round; exceeding `max_rounds` is an error that carries the partial
/// diagnostics.
pub fn run<F>(evaluator: F, config: &SmcConfig) -> Result<(Array2<f64>, SmcDiagnostics)>
where
    F: Fn(&ArrayView2<f64>) -> Result<Vec<f64>>,
{
    config.validate()?;
    let n = config.n_particles;
    let d = config.bounds.len();
    let mut rng = crate::rng::stream(config.rng_seed, "smc");
    let mut diagnostics = SmcDiagnostics::default();

    // Initial population: uniform over the prior box.
    let mut positions = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        for (a, (lo, hi)) in config.bounds.iter().enumerate() {
            positions[(i, a)] = rng.random_range(*lo..*hi);
        }
    }
    diagnostics.n_eval_gross += n as u64;
    diagnostics.n_eval_net += n as u64;
    let log_lhat = evaluator(&positions.view())?;
    if log_lhat.len() != n {
        return Err(Error::Numerical(format!(
            "evaluator returned {} values for {} positions",
            log_lhat.len(),
            n
        )));
    }

    let mut pop = ParticlePopulation {
        positions,
        log_lhat,
        beta: 0.0,
        round_index: 0,
    };

    loop {
        if pop.round_index >= config.max_rounds {
            let last_beta = pop.beta;
            return Err(Error::MaxRoundsExceeded {
                max_rounds: config.max_rounds,
                last_beta,
                diagnostics: Box::new(diagnostics),
            });
        }
        let round_start = std::time::Instant::now();

        let beta_next = find_next_beta(&pop.log_lhat, pop.beta, config.gamma);
        let dbeta = beta_next - pop.beta;

        // Incremental importance weights at the chosen increment.
        let logw: Vec<f64> = pop.log_lhat.iter().map(|l| dbeta * l).collect();
        let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logw.iter().map(|lw| (lw - m).exp()).collect();
        diagnostics.ess.push(ess(&pop.log_lhat, dbeta));
        diagnostics
            .log_evidence_increments
            .push(logsumexp(&logw) - (n as f64).ln());
        diagnostics.beta_schedule.push(beta_next);

        // Resample to equal weights, carrying the cached log-likelihoods.
        let ancestors = systematic_resample(&weights, &mut rng)?;
        let mut new_positions = Array2::<f64>::zeros((n, d));
        let mut new_ll = Vec::with_capacity(n);
        for (slot, &src) in ancestors.iter().enumerate() {
            new_positions.row_mut(slot).assign(&pop.positions.row(src));
            new_ll.push(pop.log_lhat[src]);
        }
        pop.positions = new_positions;
        pop.log_lhat = new_ll;
        pop.beta = beta_next;

        // Post-resampling weights are uniform; the proposal covariance is
        // then b² times the plain sample covariance of the population.
        let uniform = vec![1.0; n];
        let spread = pop
            .positions
            .outer_iter()
            .skip(1)
            .any(|row| row != pop.positions.row(0));
        if !spread {
            diagnostics.degenerate_proposal_rounds.push(pop.round_index);
        }
        let cov = proposal_covariance(&pop.positions.view(), &uniform, config.proposal_scale);

        let acc = mcmc_move(
            &mut pop,
            &cov,
            beta_next,
            config.n_mcmc_steps,
            &config.bounds,
            &evaluator,
            &mut rng,
            &mut diagnostics,
        )?;
        diagnostics.acceptance_rate.push(acc);
        diagnostics.elapsed_s.push(round_start.elapsed().as_secs_f64());
        pop.round_index += 1;

        if pop.beta >= 1.0 {
            return Ok((pop.positions, diagnostics));
        }
    }
}
