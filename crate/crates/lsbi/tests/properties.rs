//! Randomized checks of the documented invariants, exercised through the
//! public API across all modules.

use lsbi::building::{
    assemble_matrices, frf_log_magnitude, natural_frequencies, FrequencyGrid, ShearBuildingSpec,
};
use lsbi::config::RunConfig;
use lsbi::dataset::{generate_triples, sample_prior, scale_theta_component, NoiseModel};
use lsbi::eval::{mmd_squared, mode_coverage, posterior_predictive_frf, MMDConfig, ModeCatalog};
use lsbi::latent::{log_lhat, ObservationEncoding};
use lsbi::mvae::{kl_diag_gauss, GaussianLatent};
use lsbi::smc::{ess, find_next_beta, proposal_covariance, systematic_resample};

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn theta_in_box() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.33..3.0f64, 4)
}

fn grid_small() -> FrequencyGrid {
    FrequencyGrid {
        f_start: 0.0,
        f_step: 0.8,
        n_points: 12,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// At f = 0 the transmissibility is identically 1 → log-magnitude 0.
    #[test]
    fn frf_at_zero_frequency_is_exactly_zero(theta in theta_in_box()) {
        let spec = ShearBuildingSpec::benchmark();
        let frf = frf_log_magnitude(&spec, &theta, &grid_small(), 4).unwrap();
        prop_assert_eq!(frf[0], 0.0);
    }

    /// Natural frequencies are positive and ascending for any box θ.
    #[test]
    fn natural_frequencies_ascend(theta in theta_in_box()) {
        let spec = ShearBuildingSpec::benchmark();
        let freqs = natural_frequencies(&spec, &theta).unwrap();
        prop_assert_eq!(freqs.len(), 4);
        prop_assert!(freqs[0] > 0.0);
        for w in freqs.windows(2) {
            prop_assert!(w[0] < w[1]);
        }
    }

    /// The story mass cancels out of the transmissibility: scaling m (with
    /// k̄ = 1000·m) leaves the FRF unchanged up to roundoff.
    #[test]
    fn frf_is_mass_invariant(theta in theta_in_box(), mass in 0.1..50.0f64) {
        let unit = ShearBuildingSpec::benchmark();
        let scaled = ShearBuildingSpec {
            story_mass: mass,
            stiffness_scale: 1000.0 * mass,
            ..unit
        };
        let a = frf_log_magnitude(&unit, &theta, &grid_small(), 4).unwrap();
        let b = frf_log_magnitude(&scaled, &theta, &grid_small(), 4).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0), "{x} vs {y}");
        }
    }

    /// The stiffness matrix is symmetric positive definite over the box.
    #[test]
    fn stiffness_matrix_is_spd(theta in theta_in_box()) {
        let spec = ShearBuildingSpec::benchmark();
        let (_m, k, _c) = assemble_matrices(&spec, &theta).unwrap();
        let n = k.nrows();
        let mut km = nalgebra::DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(k[(i, j)], k[(j, i)]);
                km[(i, j)] = k[(i, j)];
            }
        }
        prop_assert!(km.cholesky().is_some(), "K must be positive definite");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Zero observation noise makes the noisy responses bitwise equal to
    /// the clean ones.
    #[test]
    fn zero_noise_copies_the_clean_responses(seed in 0u64..1000, n in 5usize..20) {
        let spec = ShearBuildingSpec::benchmark();
        let bounds = vec![(0.33, 3.0); 4];
        let thetas = sample_prior(n, &bounds, seed).unwrap();
        let silent = NoiseModel { sigma_eps: 0.0 };
        let ds = generate_triples(&thetas, &spec, &grid_small(), &silent, seed).unwrap();
        prop_assert_eq!(&ds.responses_clean, &ds.responses_noisy);
    }

    /// The train/validation split is a permutation with the rounded-down
    /// validation size.
    #[test]
    fn split_is_a_permutation(seed in 0u64..1000, n in 10usize..40, frac in 0.1..0.5f64) {
        let spec = ShearBuildingSpec::benchmark();
        let bounds = vec![(0.33, 3.0); 4];
        let thetas = sample_prior(n, &bounds, seed).unwrap();
        let mut ds =
            generate_triples(&thetas, &spec, &grid_small(), &NoiseModel::benchmark(), seed)
                .unwrap();
        ds.split_and_standardize(frac, seed).unwrap();
        let n_val = (n as f64 * frac).floor() as usize;
        prop_assert_eq!(ds.train_rows().unwrap().len(), n - n_val);
        prop_assert_eq!(ds.val_rows().unwrap().len(), n_val);
        let mut seen: Vec<u32> = ds
            .train_rows()
            .unwrap()
            .iter()
            .chain(ds.val_rows().unwrap())
            .copied()
            .collect();
        seen.sort_unstable();
        let expect: Vec<u32> = (0..n as u32).collect();
        prop_assert_eq!(seen, expect);
    }
}

fn latent_pair(max_var: f64) -> impl Strategy<Value = (GaussianLatent, GaussianLatent)> {
    (1usize..6).prop_flat_map(move |d| {
        let one = move || {
            prop::collection::vec((-3.0..3.0f64, (0.05f64).ln()..max_var.ln()), d).prop_map(|v| {
                GaussianLatent {
                    mean: v.iter().map(|(m, _)| *m).collect(),
                    log_var: v.iter().map(|(_, l)| *l).collect(),
                }
            })
        };
        (one(), one())
    })
}

proptest! {
    /// The latent likelihood is symmetric in the two encodings: both carry
    /// the same algebraic role.
    #[test]
    fn latent_likelihood_is_symmetric((a, b) in latent_pair(1.9)) {
        // Per-dimension variances ≤ 1.9 keep 1/s + 1/t > 1, i.e. u < 1.
        let fwd = log_lhat(&ObservationEncoding { latent: a.clone(), digest: 0 }, &b).unwrap();
        let rev = log_lhat(&ObservationEncoding { latent: b, digest: 0 }, &a).unwrap();
        prop_assert_eq!(fwd, rev);
    }

    /// Independence across dimensions: the joint log-likelihood is the sum
    /// of the per-dimension ones, with identical summation order.
    #[test]
    fn latent_likelihood_is_additive((a, b) in latent_pair(1.9)) {
        let joint = log_lhat(
            &ObservationEncoding { latent: a.clone(), digest: 0 },
            &b,
        ).unwrap();
        let mut acc = 0.0;
        for k in 0..a.n_z() {
            let ak = GaussianLatent { mean: vec![a.mean[k]], log_var: vec![a.log_var[k]] };
            let bk = GaussianLatent { mean: vec![b.mean[k]], log_var: vec![b.log_var[k]] };
            acc += log_lhat(&ObservationEncoding { latent: ak, digest: 0 }, &bk).unwrap();
        }
        prop_assert_eq!(joint, acc);
    }

    /// Encoder variances with 1/s + 1/t ≤ 1 make the defining integral
    /// diverge; that is an error, never a clamped number.
    #[test]
    fn latent_likelihood_divergence_is_an_error((a, b) in latent_pair(1.9), big in (2.0f64).ln()..(9.0f64).ln()) {
        let mut a = a;
        let mut b = b;
        a.log_var[0] = big;
        b.log_var[0] = big;
        let err = log_lhat(&ObservationEncoding { latent: a, digest: 0 }, &b).unwrap_err();
        let divergent = matches!(err, lsbi::Error::DivergentIntegral { .. });
        prop_assert!(divergent, "expected a divergent-integral error, got {err}");
    }

    /// KL divergence between diagonal Gaussians is nonnegative and zero
    /// for identical distributions.
    #[test]
    fn kl_is_nonnegative((a, b) in latent_pair(4.0)) {
        prop_assert!(kl_diag_gauss(&a, &b) >= -1e-12);
        prop_assert_eq!(kl_diag_gauss(&a, &a.clone()), 0.0);
    }

    /// Affine parameter scaling maps the box onto [0,1] monotonically.
    #[test]
    fn theta_scaling_hits_unit_interval(lo in -5.0..5.0f64, width in 0.01..10.0f64, t in 0.0..1.0f64, s in 0.0..1.0f64) {
        let hi = lo + width;
        let (t1, t2) = (lo + width * t.min(s), lo + width * t.max(s));
        let (u1, u2) = (
            scale_theta_component(t1, (lo, hi)),
            scale_theta_component(t2, (lo, hi)),
        );
        prop_assert!((0.0..=1.0).contains(&u1));
        prop_assert!(u1 <= u2);
        prop_assert_eq!(scale_theta_component(lo, (lo, hi)), 0.0);
        prop_assert_eq!(scale_theta_component(hi, (lo, hi)), 1.0);
    }
}

proptest! {
    /// ESS of any finite weight vector lies in [1, N].
    #[test]
    fn ess_stays_in_bounds(ll in prop::collection::vec(-50.0..50.0f64, 2..200), dbeta in 1e-6..1.0f64) {
        let v = ess(&ll, dbeta);
        let n = ll.len() as f64;
        prop_assert!(v >= 1.0 - 1e-9 && v <= n + 1e-9, "ess {v} outside [1, {n}]");
    }

    /// The adaptive tempering rule always advances and never overshoots 1.
    #[test]
    fn next_beta_advances(ll in prop::collection::vec(-50.0..50.0f64, 2..200), beta in 0.0..1.0f64) {
        let next = find_next_beta(&ll, beta, 0.8);
        prop_assert!(next > beta);
        prop_assert!(next <= 1.0);
    }

    /// Systematic resampling reproduces each index with count within one
    /// of its expectation N·w̄ — the low-variance guarantee.
    #[test]
    fn systematic_resampling_counts_match_expectation(
        raw in prop::collection::vec(0.0..10.0f64, 3..100),
        seed in 0u64..10_000,
    ) {
        let total: f64 = raw.iter().sum();
        prop_assume!(total > 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = systematic_resample(&raw, &mut rng).unwrap();
        let n = raw.len();
        prop_assert_eq!(idx.len(), n);
        let mut counts = vec![0usize; n];
        for &i in &idx {
            prop_assert!(i < n);
            counts[i] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let expect = n as f64 * raw[i] / total;
            prop_assert!(
                (c as f64 - expect).abs() < 1.0 + 1e-9,
                "index {i}: count {c}, expectation {expect}"
            );
        }
    }

    /// The adapted proposal covariance is symmetric positive semidefinite.
    #[test]
    fn proposal_covariance_is_symmetric_psd(
        seed in 0u64..10_000,
        n in 5usize..40,
        d in 1usize..5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let positions = Array2::from_shape_simple_fn((n, d), || rng.random_range(-2.0..2.0));
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let cov = proposal_covariance(&positions.view(), &weights, 0.2);
        let mut m = nalgebra::DMatrix::<f64>::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                prop_assert_eq!(cov[(i, j)], cov[(j, i)]);
                m[(i, j)] = cov[(i, j)];
            }
        }
        let eig = nalgebra::SymmetricEigen::new(m);
        let top = eig.eigenvalues.iter().fold(0.0f64, |a, b| a.max(*b));
        for ev in eig.eigenvalues.iter() {
            prop_assert!(*ev >= -1e-12 * top.max(1.0), "negative eigenvalue {ev}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// The discrepancy of a sample set with itself is exactly zero, for
    /// any shape.
    #[test]
    fn mmd_self_is_zero(seed in 0u64..10_000, n in 2usize..30, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let x = Array2::from_shape_simple_fn((n, d), || rng.random_range(-3.0..3.0));
        prop_assume!(x.nrows() >= 2);
        match mmd_squared(&x, &x, &MMDConfig::default()) {
            Ok(v) => prop_assert_eq!(v, 0.0),
            // All-equal rows have no bandwidth; that error is allowed.
            Err(lsbi::Error::Numerical(_)) => {}
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }

    /// Mode-coverage counts always add up to the number of samples.
    #[test]
    fn coverage_counts_sum(seed in 0u64..10_000, n in 1usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let samples = Array2::from_shape_simple_fn((n, 4), || rng.random_range(0.0..3.5));
        let cov = mode_coverage(&samples, &ModeCatalog::benchmark()).unwrap();
        let total: usize = cov.per_mode_counts.iter().sum::<usize>() + cov.unassigned_count;
        prop_assert_eq!(total, n);
    }

    /// Predictive envelopes are pointwise ordered at every story.
    #[test]
    fn envelopes_are_ordered(seed in 0u64..1000, n in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let samples = Array2::from_shape_simple_fn((n, 4), || rng.random_range(0.4..2.8));
        let spec = ShearBuildingSpec::benchmark();
        let envs = posterior_predictive_frf(&samples, &spec, &grid_small(), n).unwrap();
        for env in &envs {
            for j in 0..env.q025.len() {
                prop_assert!(env.q025[j] <= env.q500[j] && env.q500[j] <= env.q975[j]);
            }
        }
    }

    /// Any valid configuration survives a serialize → parse → serialize
    /// round trip unchanged.
    #[test]
    fn config_round_trips(
        seed in 0u64..u64::MAX,
        n_train in 1usize..1_000_000,
        gamma in 0.5..0.95f64,
        particles in 10usize..100_000,
    ) {
        let mut cfg = RunConfig::benchmark();
        cfg.rng_seed = seed;
        cfg.dataset.n_train = n_train;
        cfg.smc.gamma = gamma;
        cfg.smc.n_particles = particles;
        cfg.validate().unwrap();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        let again = toml::to_string_pretty(&back).unwrap();
        prop_assert_eq!(text, again);
    }
}
