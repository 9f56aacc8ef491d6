use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};
use vfemud::coding::{ConvCode, Termination};
use vfemud::harness::{run_scenario, run_scenario_with, single_user_bound, ChannelSpec, ScenarioConfig};
use vfemud::oracle::exact_posterior;
use vfemud::siso_ddf::{ddf_pass, detection_order, DdfPrecompute, OrderPolicy};
use vfemud::siso_gaussian::{ext_flooding, ext_hybrid, GaussianPrior};
use vfemud::{make_equicorrelated, make_random_spreading, Execution, SymbolBlock};

fn q_function(x: f64) -> f64 {
    1.0 - Normal::standard().cdf(x)
}

fn random_block(k: usize, t: usize, rng: &mut impl Rng) -> SymbolBlock {
    let b = DMatrix::from_fn(t, k, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
    SymbolBlock::new(b).unwrap()
}

#[test]
fn whitened_noise_is_white() {
    let sigma2 = 0.4;
    let ch = make_equicorrelated(3, 0.7)
        .unwrap()
        .with_amplitudes(DVector::from_vec(vec![1.0, 0.5, 2.0]))
        .unwrap()
        .with_sigma2(sigma2)
        .unwrap();
    let t = 40_000;
    let blk = random_block(3, t, &mut ChaCha8Rng::seed_from_u64(3));
    let obs = ch.transmit(&blk, 11).unwrap();
    let fa = ch.whitening_factor().as_matrix() * DMatrix::from_diagonal(ch.amplitudes());
    let mut cov = DMatrix::<f64>::zeros(3, 3);
    for i in 0..t {
        let b = blk.symbols().row(i).transpose();
        let z = obs.ybar_at(i) - &fa * b;
        cov += &z * z.transpose();
    }
    cov /= t as f64;
    let want = DMatrix::identity(3, 3) * sigma2;
    assert!((cov - want).amax() < 0.02);
}

#[test]
fn uncoded_single_user_matches_gaussian_tail() {
    let cfg = ScenarioConfig::parse(
        "channel = equicorrelated\nusers = 1\nrho = 0\ncode = none\ninfo_bits = 2000\nsnr_db = 6\ntrials = 200\nseed = 9\n",
    )
    .unwrap();
    let rep = run_scenario(&cfg).unwrap();
    let cell = rep.final_cell(6.0).unwrap();
    assert_eq!(cell.bits, 400_000);
    // SNR = A²/σ², so the uncoded error rate is Q(sqrt(SNR)).
    let want = q_function(10f64.powf(0.6).sqrt());
    assert!((want - 0.0230).abs() < 1e-4);
    assert!((cell.ber() - want).abs() < 3.0 * cell.std_err(), "{} vs {want}", cell.ber());
}

#[test]
fn single_user_bound_is_zero_at_high_snr() {
    let mut cfg = ScenarioConfig::preset("scenario-i").unwrap();
    cfg.snr_db = vec![10.0];
    cfg.trials = 20;
    cfg.max_trials = 20;
    let rep = single_user_bound(&cfg).unwrap();
    let cell = rep.final_cell(10.0).unwrap();
    assert_eq!(cell.errors, 0);
    assert_eq!(cell.bits, 256 * 20);
}

#[test]
fn noiseless_channel_has_no_errors() {
    for detector in ["gaussian", "ddf-aided"] {
        let mut cfg = ScenarioConfig::preset("scenario-i").unwrap();
        cfg.turbo.detector = detector.parse().unwrap();
        cfg.snr_db = vec![f64::INFINITY];
        cfg.trials = 3;
        cfg.max_trials = 3;
        let rep = run_scenario(&cfg).unwrap();
        assert!(rep.cells.iter().all(|c| c.errors == 0), "{detector}");
    }
}

#[test]
fn noiseless_discrete_detector() {
    // Without noise the mean-field sweeps make hard decisions. They are exact
    // for mild correlation and for two users.
    for (users, rho) in [(4, 0.0), (4, 0.3), (2, 0.7)] {
        let mut cfg = ScenarioConfig::preset("scenario-i").unwrap();
        cfg.channel = ChannelSpec::Equicorrelated { users, rho };
        cfg.turbo.detector = "discrete".parse().unwrap();
        cfg.snr_db = vec![f64::INFINITY];
        cfg.trials = 3;
        cfg.max_trials = 3;
        let rep = run_scenario(&cfg).unwrap();
        assert!(rep.cells.iter().all(|c| c.errors == 0), "K {users}, rho {rho}");
    }
    // At rho = 0.7 with four users they get trapped in local minima, which a
    // DDF first pass avoids (checked above).
    let mut cfg = ScenarioConfig::preset("scenario-i").unwrap();
    cfg.turbo.detector = "discrete".parse().unwrap();
    cfg.snr_db = vec![f64::INFINITY];
    cfg.trials = 3;
    cfg.max_trials = 3;
    assert!(run_scenario(&cfg).unwrap().final_cell(f64::INFINITY).unwrap().errors > 0);
}

#[test]
fn presets_load_the_reference_scenarios() {
    let one = ScenarioConfig::preset("scenario-i").unwrap();
    assert_eq!(one.channel, ChannelSpec::Equicorrelated { users: 4, rho: 0.7 });
    assert_eq!(one.code, Some(ConvCode::parse("10011,11101", Termination::Terminated).unwrap()));
    assert_eq!(one.turbo.outer, 5);

    let two = ScenarioConfig::preset("scenario-ii").unwrap();
    assert!(matches!(two.channel, ChannelSpec::Random { chips: 32, users: 32, .. }));
    assert_eq!(two.code.as_ref().unwrap().generators(), ("111", "101"));
    assert!(two.varsigma > 0.0 && two.estimate_sigma2);

    let ddf = ScenarioConfig::preset("ddf-two-user").unwrap();
    assert_eq!(ddf.user_snr_db, vec![None, Some(11.0)]);
    assert!(ddf.code.is_none() && ddf.per_user);
}

#[test]
fn reports_do_not_depend_on_execution() {
    let mut cfg = ScenarioConfig::preset("scenario-ii").unwrap();
    cfg.snr_db = vec![4.0];
    cfg.trials = 3;
    cfg.max_trials = 3;
    let seq = run_scenario_with(&cfg, Execution::Sequential).unwrap();
    let par = run_scenario_with(&cfg, Execution::Parallel).unwrap();
    assert_eq!(seq.to_csv(), par.to_csv());
    assert_eq!(seq.em_csv(), par.em_csv());
    assert_eq!(seq.em.len(), cfg.turbo.outer + 1);
}

#[test]
fn bits_are_counted_exactly() {
    let mut cfg = ScenarioConfig::preset("scenario-i").unwrap();
    cfg.snr_db = vec![2.0, 3.0];
    cfg.trials = 4;
    cfg.max_trials = 4;
    let rep = run_scenario(&cfg).unwrap();
    for c in &rep.cells {
        let users = if c.user.is_some() { 1 } else { 4 };
        assert_eq!(c.bits, (256 * 4 * users) as u64);
        assert!(c.errors <= c.bits);
    }
}

#[test]
fn flooding_and_hybrid_gaussian_extrinsics_coincide() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..50 {
        let ch = make_random_spreading(8, 5, trial)
            .unwrap()
            .with_sigma2(rng.random_range(0.1..2.0))
            .unwrap();
        let y = DVector::from_fn(5, |_, _| rng.random_range(-2.0..2.0));
        let prior = GaussianPrior::from_llr(&DVector::from_fn(5, |_, _| rng.random_range(-6.0..6.0)));
        let f = ext_flooding(&ch, &y, &prior).unwrap().llr_mud;
        let h = ext_hybrid(&ch, &y, &prior).unwrap().llr_mud;
        assert!((&f - &h).amax() < 1e-9 * (1.0 + h.amax()));
    }
}

#[test]
fn ddf_pass_recovers_noiseless_symbols() {
    let ch = make_equicorrelated(4, 0.7)
        .unwrap()
        .with_amplitudes(DVector::from_vec(vec![1.0, 3.0, 0.5, 2.0]))
        .unwrap()
        .with_sigma2(1e-4)
        .unwrap();
    let order = detection_order(&ch, &OrderPolicy::AmplitudeDescending).unwrap();
    assert_eq!(order, vec![1, 3, 0, 2]);
    let pre = DdfPrecompute::new(&ch, &order).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let blk = random_block(4, 64, &mut rng);
    let obs = ch.transmit(&blk, 5).unwrap();
    for t in 0..64 {
        let (q, _) = ddf_pass(&pre, &pre.whiten(&obs.y_at(t)), &DVector::zeros(4)).unwrap();
        let b = blk.symbols().row(t).transpose();
        for k in 0..4 {
            assert_eq!(q.m()[k].signum(), b[k], "t {t} user {k}");
        }
    }
}

#[test]
fn first_ddf_statistic_matches_decorrelator() {
    // The first user in the order sees no feedback; its statistic is the
    // decorrelator output scaled by the whitening diagonal.
    let ch = make_equicorrelated(3, 0.5).unwrap().with_sigma2(0.3).unwrap();
    let order = vec![2, 0, 1];
    let pre = DdfPrecompute::new(&ch, &order).unwrap();
    let y = DVector::from_vec(vec![0.4, -1.3, 0.8]);
    let (_, ext) = ddf_pass(&pre, &pre.whiten(&y), &DVector::zeros(3)).unwrap();
    let dec = ch.correlation_inverse().as_matrix() * &y;
    let rinv = ch.correlation_inverse()[(2, 2)];
    // Decorrelator LLR for user 2: 2 A (R⁻¹y)_k / (σ² (R⁻¹)_kk).
    let want = 2.0 * dec[2] / (0.3 * rinv);
    assert!((ext[2] - want).abs() < 1e-9, "{} vs {want}", ext[2]);
}

#[test]
fn exact_posterior_is_normalised() {
    let ch = make_random_spreading(6, 4, 2).unwrap().with_sigma2(0.5).unwrap();
    let r = DVector::from_fn(6, |i, _| (i as f64 * 0.7).sin());
    let post = exact_posterior(&ch, &r, &DVector::from_vec(vec![0.3, -1.0, 0.0, 2.0])).unwrap();
    assert!((post.joint.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for (p, m) in post.marginals.iter() {
        assert!((p + m - 1.0).abs() < 1e-12);
    }
}
