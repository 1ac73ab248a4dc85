//! The acceptance gate: eight numbered criteria, one test and one printed
//! verdict line each. Criteria 6 and 7 share one trained pipeline, built
//! once on first use.
//!
//! Run with `--nocapture` to see the verdict lines of passing criteria;
//! failing criteria always show theirs.

use std::sync::OnceLock;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};

use lsbi::building::{frf_log_magnitude, FrequencyGrid, ShearBuildingSpec};
use lsbi::dataset::{generate_triples, sample_prior, NoiseModel};
use lsbi::eval::{mmd, mode_coverage, posterior_predictive_frf, MMDConfig, ModeCatalog};
use lsbi::latent::{log_lhat, log_lhat_batch, ObservationEncoding};
use lsbi::mvae::{
    train, ArchitectureConfig, Batch, GaussianLatent, LatentDraws, MVAEModel, TrainingConfig,
};
use lsbi::smc::{SmcConfig, SmcDiagnostics};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {n} ({name}): {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

// ===========================================================================
// Criterion 1: the four equivalent parameter sets reproduce the truth roof
// FRF to < 0.05 as tabulated, and to < 1e-4 after local refinement.
// ===========================================================================

/// Derivative-free Nelder–Mead minimization of `f`, seeded at `x0`.
fn nelder_mead(
    f: &dyn Fn(&[f64]) -> f64,
    x0: &[f64],
    scale: f64,
    max_iter: usize,
    target: f64,
) -> (Vec<f64>, f64) {
    let d = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(d + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..d {
        let mut v = x0.to_vec();
        v[i] += scale;
        let fv = f(&v);
        simplex.push((v, fv));
    }
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        if simplex[0].1 < target {
            break;
        }
        let centroid: Vec<f64> = (0..d)
            .map(|j| simplex[..d].iter().map(|(v, _)| v[j]).sum::<f64>() / d as f64)
            .collect();
        let worst = simplex[d].clone();
        let reflect: Vec<f64> = (0..d)
            .map(|j| centroid[j] + (centroid[j] - worst.0[j]))
            .collect();
        let fr = f(&reflect);
        if fr < simplex[0].1 {
            // Try expanding further along the same direction.
            let expand: Vec<f64> = (0..d)
                .map(|j| centroid[j] + 2.0 * (centroid[j] - worst.0[j]))
                .collect();
            let fe = f(&expand);
            simplex[d] = if fe < fr { (expand, fe) } else { (reflect, fr) };
        } else if fr < simplex[d - 1].1 {
            simplex[d] = (reflect, fr);
        } else {
            let contract: Vec<f64> = (0..d)
                .map(|j| centroid[j] + 0.5 * (worst.0[j] - centroid[j]))
                .collect();
            let fc = f(&contract);
            if fc < worst.1 {
                simplex[d] = (contract, fc);
            } else {
                // Shrink toward the best vertex.
                let best = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    for j in 0..d {
                        entry.0[j] = best[j] + 0.5 * (entry.0[j] - best[j]);
                    }
                    entry.1 = f(&entry.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    simplex[0].clone().into()
}

#[test]
fn criterion_1_equivalent_mode_frf_reproduction() {
    let t0 = Instant::now();
    let spec = ShearBuildingSpec::benchmark();
    let grid = FrequencyGrid::benchmark();
    let roof = spec.n_stories;
    let truth = frf_log_magnitude(&spec, &[1.0, 1.0, 1.0, 1.0], &grid, roof).unwrap();
    let catalog = ModeCatalog::benchmark();

    let objective = |theta: &[f64]| -> f64 {
        if theta.iter().any(|t| *t <= 0.0) {
            return f64::INFINITY;
        }
        match frf_log_magnitude(&spec, theta, &grid, roof) {
            Ok(frf) => frf
                .iter()
                .zip(&truth)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
            Err(_) => f64::INFINITY,
        }
    };

    let mut tabulated_worst = 0.0f64;
    let mut refined_worst = 0.0f64;
    for mode in &catalog.modes {
        let raw = objective(mode);
        tabulated_worst = tabulated_worst.max(raw);
        // Two rounds of refinement: coarse, then a restart with a small
        // fresh simplex to polish.
        let (stage1, _) = nelder_mead(&objective, mode, 2e-3, 600, 1e-9);
        let (_, polished) = nelder_mead(&objective, &stage1, 1e-5, 600, 1e-9);
        refined_worst = refined_worst.max(polished);
    }

    let pass = tabulated_worst < 0.05 && refined_worst < 1e-4;
    verdict(
        1,
        "equivalent-mode FRF reproduction",
        pass,
        &format!(
            "tabulated max |Δ log-FRF| = {tabulated_worst:.2e} (< 0.05), refined = {refined_worst:.2e} (< 1e-4), {:.1}s",
            t0.elapsed().as_secs_f64()
        ),
    );
}

// ===========================================================================
// Criterion 2: closed-form latent likelihood against an independent
// quadrature oracle.
// ===========================================================================

/// ln ∫ N(z|a,s)·N(z|b,t) / N(z|0,1) dz by composite Simpson quadrature,
/// integrating the log-integrand with max-subtraction.
fn quadrature_log_integral_1d(a: f64, s: f64, b: f64, t: f64) -> f64 {
    // The integrand is proportional to a Gaussian with precision
    // 1/s + 1/t − 1; center the integration window there.
    let prec = 1.0 / s + 1.0 / t - 1.0;
    assert!(prec > 0.0, "oracle called on a divergent case");
    let v = 1.0 / prec;
    let c = (a / s + b / t) * v;
    let half_width = 15.0 * v.sqrt();
    let (lo, hi) = (c - half_width, c + half_width);
    let n = 32_768usize; // even
    let h = (hi - lo) / n as f64;
    let ln_gauss = |z: f64, m: f64, var: f64| -> f64 {
        -0.5 * ((z - m) * (z - m) / var + var.ln() + (2.0 * std::f64::consts::PI).ln())
    };
    let ln_f = |z: f64| ln_gauss(z, a, s) + ln_gauss(z, b, t) - ln_gauss(z, 0.0, 1.0);
    let mut ln_terms = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let w: f64 = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        ln_terms.push(ln_f(lo + i as f64 * h) + w.ln());
    }
    let m = ln_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = ln_terms.iter().map(|lt| (lt - m).exp()).sum();
    m + sum.ln() + (h / 3.0).ln()
}

#[test]
fn criterion_2_latent_likelihood_vs_quadrature() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n_z = rng.random_range(1..=8);
        let mut a = GaussianLatent::standard(n_z);
        let mut b = GaussianLatent::standard(n_z);
        let mut ln_quad = 0.0;
        for k in 0..n_z {
            // Rejection-sample variances until the per-dimension overlap
            // coefficient u = st/(s+t) is below 0.95.
            let (s, t) = loop {
                let s: f64 = rng.random_range(0.1..3.0);
                let t: f64 = rng.random_range(0.1..3.0);
                if s * t / (s + t) < 0.95 {
                    break (s, t);
                }
            };
            a.mean[k] = rng.random_range(-2.0..2.0);
            b.mean[k] = rng.random_range(-2.0..2.0);
            a.log_var[k] = s.ln();
            b.log_var[k] = t.ln();
            ln_quad += quadrature_log_integral_1d(a.mean[k], s, b.mean[k], t);
        }
        let ln_closed = log_lhat(
            &ObservationEncoding {
                latent: a.clone(),
                digest: 0,
            },
            &b,
        )
        .unwrap();
        let rel = (ln_closed - ln_quad).abs() / ln_quad.abs().max(1.0);
        worst = worst.max(rel);
    }
    let pass = worst < 1e-8;
    verdict(
        2,
        "latent likelihood vs quadrature",
        pass,
        &format!(
            "worst relative error over 200 randomized pairs = {worst:.2e} (< 1e-8), {:.1}s",
            t0.elapsed().as_secs_f64()
        ),
    );
}

// ===========================================================================
// Criterion 3: hand-derived gradients against central finite differences,
// at least 50 parameters per network, in 64-bit.
// ===========================================================================

#[test]
fn criterion_3_mvae_gradient_check() {
    let t0 = Instant::now();
    let arch = ArchitectureConfig {
        n_z: 3,
        theta_dim: 4,
        x_len: 32,
        conv_channels: [2, 3, 4],
        fc_width: 8,
        kernel: 3,
    };
    let mut model = MVAEModel::<f64>::new(arch, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let bsz = 3;
    let mk = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
        Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    };
    let theta = mk(&mut rng, bsz, 4);
    let x = mk(&mut rng, bsz, 32);
    let x_tilde = &x + &mk(&mut rng, bsz, 32) * 0.1;
    let batch = Batch {
        theta: &theta,
        x: &x,
        x_tilde: &x_tilde,
    };
    let draws = LatentDraws::sample(bsz, 3, &mut ChaCha8Rng::seed_from_u64(7));
    let alpha = 5.0;

    // Group the flat parameter index space by network.
    let mut groups: Vec<(&str, Vec<usize>)> =
        vec![("x-encoder", vec![]), ("theta-encoder", vec![]), ("decoder", vec![])];
    let mut offset = 0usize;
    for tensor in model.tensors() {
        let len = tensor.value.len();
        let g = if tensor.name.starts_with("xenc.") {
            0
        } else if tensor.name.starts_with("tenc.") {
            1
        } else {
            2
        };
        groups[g].1.extend(offset..offset + len);
        offset += len;
    }

    model.zero_grad();
    model
        .backward_weighted(&batch, alpha, &draws, (1.0, 1.0, 1.0))
        .unwrap();

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for (name, indices) in &groups {
        assert!(
            indices.len() >= 50,
            "{name} has only {} parameters",
            indices.len()
        );
        for _ in 0..50 {
            let idx = indices[rng.random_range(0..indices.len())];
            let orig = model.get_param(idx);
            model.set_param(idx, orig + h);
            let up = model.loss_with_draws(&batch, alpha, &draws).unwrap().total;
            model.set_param(idx, orig - h);
            let down = model.loss_with_draws(&batch, alpha, &draws).unwrap().total;
            model.set_param(idx, orig);
            let fd = (up - down) / (2.0 * h);
            let an = model.get_grad(idx);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    let pass = worst < 1e-4;
    verdict(
        3,
        "MVAE gradient correctness",
        pass,
        &format!(
            "worst relative error over {checked} sampled parameters (50 per network) = {worst:.2e} (< 1e-4), {:.1}s",
            t0.elapsed().as_secs_f64()
        ),
    );
}

// ===========================================================================
// Criterion 4: conjugate sanity — flat box prior and a unit Gaussian
// likelihood must reproduce the analytic posterior in ≥ 95 / 100 runs.
// ===========================================================================

#[test]
fn criterion_4_smc_conjugate_sanity() {
    let t0 = Instant::now();
    let evaluator = |positions: &ArrayView2<f64>| -> lsbi::Result<Vec<f64>> {
        Ok(positions
            .outer_iter()
            .map(|row| -0.5 * (row[0] - 1.0) * (row[0] - 1.0))
            .collect())
    };
    let mut ok_runs = 0usize;
    let mut worst_mean = 0.0f64;
    let mut worst_var = 0.0f64;
    for seed in 0..100u64 {
        let config = SmcConfig {
            n_particles: 5000,
            gamma: 0.8,
            proposal_scale: 0.2,
            n_mcmc_steps: 10,
            max_rounds: 200,
            rng_seed: seed,
            bounds: vec![(-10.0, 10.0)],
        };
        let (samples, _) = lsbi::smc::run(evaluator, &config).unwrap();
        let n = samples.nrows() as f64;
        let mean = samples.column(0).sum() / n;
        let var = samples
            .column(0)
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / (n - 1.0);
        if (mean - 1.0).abs() < 0.05 && (var - 1.0).abs() < 0.1 {
            ok_runs += 1;
        }
        worst_mean = worst_mean.max((mean - 1.0).abs());
        worst_var = worst_var.max((var - 1.0).abs());
    }
    let pass = ok_runs >= 95;
    verdict(
        4,
        "SMC conjugate sanity",
        pass,
        &format!(
            "{ok_runs}/100 runs inside mean 1±0.05 and variance 1±0.1 (worst |Δmean| {worst_mean:.3}, |Δvar| {worst_var:.3}), {:.0}s",
            t0.elapsed().as_secs_f64()
        ),
    );
}

// ===========================================================================
// Criterion 5: symmetric bimodal target — both modes carry half the mass.
// ===========================================================================

#[test]
fn criterion_5_smc_bimodal_sanity() {
    let t0 = Instant::now();
    let evaluator = |positions: &ArrayView2<f64>| -> lsbi::Result<Vec<f64>> {
        Ok(positions
            .outer_iter()
            .map(|row| {
                let q = row[0] * row[0] - 1.0;
                -q * q / 0.02
            })
            .collect())
    };
    let config = SmcConfig {
        n_particles: 10_000,
        gamma: 0.8,
        proposal_scale: 0.2,
        n_mcmc_steps: 10,
        max_rounds: 200,
        rng_seed: 5,
        bounds: vec![(-3.0, 3.0)],
    };
    let (samples, _) = lsbi::smc::run(evaluator, &config).unwrap();
    let positive = samples.column(0).iter().filter(|v| **v > 0.0).count() as f64
        / samples.nrows() as f64;
    let pass = (positive - 0.5).abs() < 0.05;
    verdict(
        5,
        "SMC multimodal sanity",
        pass,
        &format!(
            "mode masses {:.3} / {:.3} (each within 0.5±0.05), {:.0}s",
            positive,
            1.0 - positive,
            t0.elapsed().as_secs_f64()
        ),
    );
}

// ===========================================================================
// Shared pipeline for criteria 6 and 7: one desk-scale training run, one
// fixed synthetic observation, one large reference posterior, and ten
// seeded sampler runs per population size.
// ===========================================================================

/// Training-epoch cap for the desk-scale run, sized so that training stays
/// inside the one-hour budget on a single core (measured ~15–30 s/epoch
/// for the (8,16,32)-channel network at N = 2×10⁴).
const PIPELINE_MAX_EPOCHS: usize = 110;

struct Pipeline {
    /// Ten posterior sample sets at N_s = 2000 (seeds 0..9).
    runs_2000: Vec<Array2<f64>>,
    train_seconds: f64,
    /// Longest single sampler run at N_s ≤ 2000, seconds.
    smc_max_seconds: f64,
    /// Mean discrepancy against the reference per population size
    /// (500, 1000, 2000), each over ten seeded runs.
    mmd_means: [f64; 3],
}

fn pipeline() -> &'static Pipeline {
    static P: OnceLock<Pipeline> = OnceLock::new();
    P.get_or_init(build_pipeline)
}

fn build_pipeline() -> Pipeline {
    let spec = ShearBuildingSpec::benchmark();
    let grid = FrequencyGrid::benchmark();
    let noise = NoiseModel::benchmark();
    let bounds = lsbi::dataset::benchmark_bounds(4);

    // --- dataset: N_train = 2×10⁴ triples -------------------------------
    eprintln!("[pipeline] simulating 20000 training triples…");
    let thetas = sample_prior(20_000, &bounds, 0).unwrap();
    let mut dataset = generate_triples(&thetas, &spec, &grid, &noise, 0).unwrap();
    dataset.split_and_standardize(0.1, 0).unwrap();

    // --- training: compact architecture chosen for the 1 h CPU budget ---
    let arch = ArchitectureConfig {
        n_z: 8,
        theta_dim: 4,
        x_len: grid.n_points,
        conv_channels: [8, 16, 32],
        fc_width: 128,
        kernel: 5,
    };
    let training = TrainingConfig {
        learning_rate: 1e-3,
        batch_size: 256,
        patience_epochs: 20,
        alpha: 5.0,
        max_epochs: PIPELINE_MAX_EPOCHS,
        rng_seed: 0,
    };
    let mut model = MVAEModel::<f32>::new(arch, 0).unwrap();
    eprintln!("[pipeline] training (≤{PIPELINE_MAX_EPOCHS} epochs)…");
    let t_train = Instant::now();
    let history = train(&mut model, &dataset, &training).unwrap();
    let train_seconds = t_train.elapsed().as_secs_f64();
    eprintln!(
        "[pipeline] trained: {} epochs, best {} (val {:.1}), {train_seconds:.0}s",
        history.epochs.len(),
        history.best_epoch,
        history.epochs[history.best_epoch].val.total
    );
    drop(dataset);

    // --- the observation: truth response plus seeded noise --------------
    // The noise seed is fixed a priori; the same observation is shared by
    // every sampler run, as in the study's single-observation setup.
    let clean = frf_log_magnitude(&spec, &[1.0, 1.0, 1.0, 1.0], &grid, 4).unwrap();
    let mut obs_rng = ChaCha8Rng::seed_from_u64(20_260_816);
    let noisy: Vec<f64> = clean
        .iter()
        .map(|v| v + noise.sigma_eps * obs_rng.sample::<f64, _>(StandardNormal))
        .collect();
    let observation = ObservationEncoding::from_raw(&model, &noisy).unwrap();

    let smc_run = |n_particles: usize, seed: u64| -> (Array2<f64>, SmcDiagnostics, f64) {
        let config = SmcConfig {
            n_particles,
            gamma: 0.8,
            proposal_scale: 0.2,
            n_mcmc_steps: 10,
            max_rounds: 200,
            rng_seed: seed,
            bounds: bounds.clone(),
        };
        let evaluator = |positions: &ArrayView2<f64>| {
            log_lhat_batch(&model, &observation, &positions.to_owned())
        };
        let t0 = Instant::now();
        let (samples, diagnostics) = lsbi::smc::run(evaluator, &config).unwrap();
        let secs = t0.elapsed().as_secs_f64();
        (samples, diagnostics, secs)
    };

    // --- reference posterior: one large-population run ------------------
    eprintln!("[pipeline] reference run (N_s = 50000)…");
    let (reference, _, ref_secs) = smc_run(50_000, 900);
    eprintln!("[pipeline] reference done in {ref_secs:.0}s");

    // --- ten seeded runs per population size -----------------------------
    let mmd_cfg = MMDConfig::default();
    let mut smc_max_seconds = 0.0f64;
    let mut mmd_means = [0.0f64; 3];
    let mut runs_2000 = Vec::with_capacity(10);
    for (bucket, &n_particles) in [500usize, 1000, 2000].iter().enumerate() {
        let mut total = 0.0;
        for r in 0..10u64 {
            let seed = match bucket {
                0 => 10 + r,
                1 => 20 + r,
                _ => r, // the N_s = 2000 runs double as the coverage runs
            };
            let (samples, _, secs) = smc_run(n_particles, seed);
            smc_max_seconds = smc_max_seconds.max(secs);
            total += mmd(&samples, &reference, &mmd_cfg).unwrap();
            if n_particles == 2000 {
                runs_2000.push(samples);
            }
        }
        mmd_means[bucket] = total / 10.0;
        eprintln!(
            "[pipeline] N_s={n_particles}: mean discrepancy {:.4}",
            mmd_means[bucket]
        );
    }

    Pipeline {
        runs_2000,
        train_seconds,
        smc_max_seconds,
        mmd_means,
    }
}

#[test]
fn criterion_6_end_to_end_mode_recovery() {
    let p = pipeline();
    let catalog = ModeCatalog::benchmark();

    // All four equivalent solutions must each attract ≥ 2% of the samples
    // (within radius 0.15) in at least 8 of the 10 seeded runs.
    let mut runs_with_all_modes = 0usize;
    let mut fractions_log = String::new();
    for (r, samples) in p.runs_2000.iter().enumerate() {
        let cov = mode_coverage(samples, &catalog).unwrap();
        let fr = cov.per_mode_fractions();
        let all = fr.iter().all(|f| *f >= 0.02);
        if all {
            runs_with_all_modes += 1;
        }
        fractions_log.push_str(&format!(
            "\n  run {r}: [{:.3} {:.3} {:.3} {:.3}] unassigned {:.3}{}",
            fr[0],
            fr[1],
            fr[2],
            fr[3],
            cov.unassigned_fraction(),
            if all { "" } else { "  ← missing a mode" }
        ));
    }

    // Substituted accuracy property: the mean discrepancy against the
    // large reference run must not increase with population size.
    let trend_ok = p.mmd_means[0] >= p.mmd_means[1] && p.mmd_means[1] >= p.mmd_means[2];

    let budget_ok = p.train_seconds <= 3600.0 && p.smc_max_seconds <= 300.0;
    let pass = runs_with_all_modes >= 8 && trend_ok && budget_ok;
    verdict(
        6,
        "end-to-end mode recovery",
        pass,
        &format!(
            "{runs_with_all_modes}/10 runs recover all four modes (need ≥8); mean discrepancy across N_s 500/1000/2000 = {:.4}/{:.4}/{:.4} (non-increasing: {trend_ok}); training {:.0}s (≤3600), slowest sampler run {:.0}s (≤300){fractions_log}",
            p.mmd_means[0], p.mmd_means[1], p.mmd_means[2], p.train_seconds, p.smc_max_seconds
        ),
    );
}

#[test]
fn criterion_7_posterior_predictive_envelopes() {
    let p = pipeline();
    let spec = ShearBuildingSpec::benchmark();
    let grid = FrequencyGrid::benchmark();
    let samples = &p.runs_2000[0];
    let envelopes = posterior_predictive_frf(samples, &spec, &grid, 200).unwrap();

    let truth = frf_log_magnitude(&spec, &[1.0, 1.0, 1.0, 1.0], &grid, 4).unwrap();
    let roof = &envelopes[3];
    let inside = truth
        .iter()
        .enumerate()
        .filter(|(j, v)| roof.q025[*j] <= **v && **v <= roof.q975[*j])
        .count() as f64
        / truth.len() as f64;

    let roof_width = roof.max_width();
    let best_below = envelopes[..3]
        .iter()
        .map(|e| e.max_width())
        .fold(0.0, f64::max);

    let pass = inside >= 0.90 && best_below >= 2.0 * roof_width;
    verdict(
        7,
        "posterior predictive envelopes",
        pass,
        &format!(
            "truth roof FRF inside the 95% band at {:.1}% of points (≥90%); max width {:.3} at the roof vs {:.3} below (≥2×)",
            100.0 * inside,
            roof_width,
            best_below
        ),
    );
}

// ===========================================================================
// Criterion 8: sampler invariant suite.
// ===========================================================================

#[test]
fn criterion_8_sampler_invariants() {
    let t0 = Instant::now();
    let evaluator = |positions: &ArrayView2<f64>| -> lsbi::Result<Vec<f64>> {
        Ok(positions
            .outer_iter()
            .map(|row| -0.5 * (row[0] - 1.0) * (row[0] - 1.0) - 0.5 * row[1] * row[1])
            .collect())
    };
    let config = SmcConfig {
        n_particles: 800,
        gamma: 0.8,
        proposal_scale: 0.2,
        n_mcmc_steps: 10,
        max_rounds: 200,
        rng_seed: 8,
        bounds: vec![(-10.0, 10.0), (-6.0, 6.0)],
    };
    let (samples_a, diag_a) = lsbi::smc::run(evaluator, &config).unwrap();
    let (samples_b, diag_b) = lsbi::smc::run(evaluator, &config).unwrap();

    // β schedule strictly increasing, ending exactly at 1.
    let mut beta_ok = diag_a.beta_schedule.last() == Some(&1.0);
    for w in diag_a.beta_schedule.windows(2) {
        beta_ok &= w[0] < w[1];
    }
    beta_ok &= diag_a.beta_schedule.first().map(|b| *b > 0.0).unwrap_or(false);

    // ESS within [1, N_s] each round.
    let ess_ok = diag_a
        .ess
        .iter()
        .all(|e| *e >= 1.0 - 1e-9 && *e <= config.n_particles as f64 + 1e-9);

    // Every sample inside the prior box.
    let box_ok = samples_a.outer_iter().all(|row| {
        row.iter()
            .zip(&config.bounds)
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    });

    // Bitwise determinism at a fixed seed.
    let det_ok = samples_a == samples_b
        && diag_a.beta_schedule == diag_b.beta_schedule
        && diag_a.ess == diag_b.ess
        && diag_a.acceptance_rate == diag_b.acceptance_rate;

    // Batched surrogate likelihood equals the sequential path bitwise.
    let arch = ArchitectureConfig {
        n_z: 3,
        theta_dim: 4,
        x_len: 32,
        conv_channels: [2, 3, 4],
        fc_width: 8,
        kernel: 3,
    };
    let mut model = MVAEModel::<f32>::new(arch, 88).unwrap();
    model.theta_bounds = vec![(0.33, 3.0); 4];
    let x: Vec<f64> = (0..32).map(|j| (j as f64 * 0.21).cos()).collect();
    let obs = ObservationEncoding::from_standardized(&model, &x).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let thetas = Array2::from_shape_simple_fn((9, 4), || rng.random_range(0.4..2.9));
    let batched = log_lhat_batch(&model, &obs, &thetas).unwrap();
    let mut batch_ok = true;
    for (i, row) in thetas.outer_iter().enumerate() {
        let scaled: Vec<f64> = row
            .iter()
            .zip(&model.theta_bounds)
            .map(|(v, b)| lsbi::dataset::scale_theta_component(*v, *b))
            .collect();
        let enc = model.encode_theta(&scaled).unwrap();
        let single = log_lhat(&obs, &enc).unwrap();
        batch_ok &= single == batched[i];
    }

    let pass = beta_ok && ess_ok && box_ok && det_ok && batch_ok;
    verdict(
        8,
        "sampler invariant suite",
        pass,
        &format!(
            "β strictly increasing to 1: {beta_ok}; ESS in [1, N_s]: {ess_ok}; samples in box: {box_ok}; fixed-seed bitwise determinism: {det_ok}; batched = sequential likelihood: {batch_ok}; {:.1}s",
            t0.elapsed().as_secs_f64()
        ),
    );
}
