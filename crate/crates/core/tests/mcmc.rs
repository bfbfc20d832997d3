use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stcausal_core::graph::Graph;
use stcausal_core::gwishart::NonDecomposable;
use stcausal_core::linalg;
use stcausal_core::mcmc::{
    anchor_covariance_step, inefficiency_factor, phi_mh_step, run_chain, slope_mean_conditional, ChainInit,
    ChainModel, McmcConfig, McmcPriors, VarStats,
};
use stcausal_core::stationary::{self, StationaryVarParams};
use stcausal_core::structural::{ComponentParams, SlopeMode, StructuralSpec, UnivariatePriors};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn var_path(phi: &DMatrix<f64>, cov: &DMatrix<f64>, d: &DVector<f64>, len: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = phi.nrows();
    let l = linalg::cholesky_lower(cov, "cov").unwrap();
    let mut out = DMatrix::zeros(n, len);
    let mut x = d.clone();
    for t in 0..len {
        out.set_column(t, &x);
        let z = DVector::from_fn(n, |_, _| normal(&mut rng));
        x = d + phi * (&x - d) + &l * z;
    }
    out
}

/// Local level plus weekly pattern plus noise, `n x T`.
fn toy_panel(n: usize, len: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = DMatrix::zeros(n, len);
    for i in 0..n {
        let mut level = 1.0;
        for t in 0..len {
            level += 0.05 * normal(&mut rng);
            let season = 0.3 * (2.0 * std::f64::consts::PI * t as f64 / 7.0).sin();
            y[(i, t)] = level + season + 0.3 * normal(&mut rng);
        }
    }
    y
}

fn short_config(iters: usize, seed: u64) -> McmcConfig {
    McmcConfig {
        n_iters: iters,
        n_burnin: iters / 4,
        seed,
        ..Default::default()
    }
}

#[test]
fn slope_mean_matches_scalar_example() {
    let mut tau = DMatrix::from_element(1, 10, 1.0);
    tau[(0, 0)] = 0.0;
    let (m, v) = slope_mean_conditional(&tau, &DMatrix::zeros(1, 1), &DMatrix::identity(1, 1), 1.0).unwrap();
    assert!((m[0] - 0.9).abs() < 1e-12);
    assert!((v[(0, 0)] - 0.1).abs() < 1e-12);
}

#[test]
fn slope_mean_matches_stacked_regression() {
    // y_t = tau_{t+1} - Phi tau_t = (I - Phi) D + v_t, posterior by stacking all t.
    let phi = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, -0.1, 0.4]);
    let sv = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8]);
    let d_true = DVector::from_vec(vec![0.7, -0.4]);
    let tau = var_path(&phi, &sv, &d_true, 12, 3);
    let d_var = 2.0;
    let (m, v) = slope_mean_conditional(&tau, &phi, &sv, d_var).unwrap();

    let k = tau.ncols() - 1;
    let a = DMatrix::identity(2, 2) - &phi;
    let mut x = DMatrix::zeros(2 * k, 2);
    let mut y = DVector::zeros(2 * k);
    for t in 0..k {
        x.view_mut((2 * t, 0), (2, 2)).copy_from(&a);
        y.rows_mut(2 * t, 2).copy_from(&(tau.column(t + 1) - &phi * tau.column(t)));
    }
    let big_inv = linalg::kron(&DMatrix::identity(k, k), &linalg::spd_inverse(&sv, "sv").unwrap());
    let prec = DMatrix::identity(2, 2) / d_var + x.transpose() * &big_inv * &x;
    let cov = prec.clone().try_inverse().unwrap();
    let mean = &cov * x.transpose() * big_inv * y;
    assert!((m - mean).amax() < 1e-10);
    assert!((v - cov).amax() < 1e-10);
}

#[test]
fn phi_step_with_zero_scale_always_accepts() {
    let phi_true = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.3]);
    let sv = DMatrix::identity(2, 2);
    let tau = var_path(&phi_true, &sv, &DVector::zeros(2), 50, 5);
    let stats = VarStats::from_path(&tau, &DVector::zeros(2));
    let priors = McmcPriors::default_for(2);
    let mut params = StationaryVarParams::from_vector(2, &[0.1, -0.5, 0.2, 0.3], false).unwrap();
    let mut phi = stationary::to_phi(&params, &sv).unwrap().0;
    let before = phi.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        assert!(phi_mh_step(&mut rng, &stats, &mut params, &mut phi, &sv, &priors, &DMatrix::zeros(4, 4), 0.0).unwrap());
    }
    assert!((phi - before).amax() < 1e-15);
}

#[test]
fn phi_posterior_concentrates_on_truth() {
    let phi_true = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, -0.1, 0.4]);
    let sv = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]);
    let tau = var_path(&phi_true, &sv, &DVector::zeros(2), 10_000, 7);
    let stats = VarStats::from_path(&tau, &DVector::zeros(2));
    let priors = McmcPriors::default_for(2);
    let mut params = StationaryVarParams::from_vector(2, &[0.0; 4], false).unwrap();
    let mut phi = stationary::to_phi(&params, &sv).unwrap().0;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for step in [0.2, 0.05, 0.02] {
        for _ in 0..2000 {
            phi_mh_step(&mut rng, &stats, &mut params, &mut phi, &sv, &priors, &(DMatrix::identity(4, 4) * step), 0.5).unwrap();
        }
    }
    let mut mean = DMatrix::zeros(2, 2);
    let keep = 3000;
    for _ in 0..keep {
        phi_mh_step(&mut rng, &stats, &mut params, &mut phi, &sv, &priors, &(DMatrix::identity(4, 4) * 0.01), 0.5).unwrap();
        mean += &phi;
    }
    mean /= keep as f64;
    assert!((&mean - &phi_true).amax() < 0.1, "{mean}");
    assert!(stationary::is_schur_stable(&mean));
}

#[test]
fn anchor_step_matches_quadrature() {
    // n = 1, fixed map parameters: Phi(sv) = 1 / sqrt(1 + sv).
    let sv_true = DMatrix::from_element(1, 1, 0.5);
    let phi_true = DMatrix::from_element(1, 1, (1.0f64 / 1.5).sqrt());
    let tau = var_path(&phi_true, &sv_true, &DVector::zeros(1), 50, 11);
    let stats = VarStats::from_path(&tau, &DVector::zeros(1));
    let params = StationaryVarParams::from_vector(1, &[0.0], false).unwrap();
    let nu = 1.0;
    let prior_rate = DMatrix::from_element(1, 1, 0.02);
    let df = nu + stats.count as f64;
    let g = Graph::complete(1);

    let log_target = |k: f64| {
        let (phi, _) = stationary::to_phi(&params, &DMatrix::from_element(1, 1, 1.0 / k)).unwrap();
        (df - 2.0) / 2.0 * k.ln() - 0.5 * k * (prior_rate[(0, 0)] + stats.scatter(&phi)[(0, 0)])
    };
    let grid: Vec<f64> = (1..40_000).map(|i| i as f64 * 2.5e-4).collect();
    let peak = grid.iter().map(|&k| log_target(k)).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = grid.iter().map(|&k| (log_target(k) - peak).exp()).collect();
    let z: f64 = w.iter().sum();
    let exact = grid.iter().zip(&w).map(|(k, w)| w / k).sum::<f64>() / z;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut sv = DMatrix::from_element(1, 1, 1.0);
    let mut phi = stationary::to_phi(&params, &sv).unwrap().0;
    let draws = 20_000;
    let mut acc = 0;
    let mut sum = 0.0;
    for i in 0..draws + 500 {
        let a = anchor_covariance_step(
            &mut rng,
            &stats,
            &params,
            &mut sv,
            &mut phi,
            df,
            &prior_rate,
            &g,
            NonDecomposable::Reject,
        )
        .unwrap();
        if i >= 500 {
            acc += a as usize;
            sum += sv[(0, 0)];
        }
        let expect = stationary::to_phi(&params, &sv).unwrap().0;
        assert!((&phi - expect).amax() < 1e-12);
    }
    let mean = sum / draws as f64;
    assert!((mean - exact).abs() / exact < 0.01, "mcmc {mean} quadrature {exact}");
    assert!(acc > draws / 2);
}

#[test]
fn inefficiency_of_ar1_and_iid_chains() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut x = 0.0;
    let ar: Vec<f64> = (0..100_000)
        .map(|_| {
            x = 0.9 * x + normal(&mut rng);
            x
        })
        .collect();
    let f = inefficiency_factor(&ar).unwrap();
    assert!((f.value - 19.0).abs() / 19.0 < 0.25, "{f:?}");
    assert!(!f.degenerate);
    let iid: Vec<f64> = (0..20_000).map(|_| normal(&mut rng)).collect();
    let f = inefficiency_factor(&iid).unwrap();
    assert!((0.9..=1.2).contains(&f.value), "{f:?}");
    assert!(inefficiency_factor(&vec![3.0; 1000]).unwrap().degenerate);
}

fn spec(n: usize, mode: SlopeMode) -> StructuralSpec {
    StructuralSpec::new(n, 7, mode, Graph::path(n), vec![0; n]).unwrap()
}

#[test]
fn near_noiseless_states_reproduce_the_data() {
    let y = toy_panel(2, 40, 1);
    let sp = spec(2, SlopeMode::RandomWalk);
    let mut params = ComponentParams::default_for(2);
    params.sigma *= 1e-10;
    let init = ChainInit::with_params(&sp, params);
    let cfg = McmcConfig {
        n_iters: 1,
        n_burnin: 0,
        ..Default::default()
    };
    let model = ChainModel::Multivariate(McmcPriors::default_for(2));
    let out = run_chain(&y, &sp, &model, &init, &cfg, Some(0)).unwrap();
    let d = &out.draws[0];
    let fitted = d.last_state[0] + d.last_state[4];
    assert!((fitted - y[(0, 39)]).abs() < 1e-3);
    assert_eq!(d.trend_window.as_ref().unwrap().shape(), (2, 40));
}

#[test]
fn chains_are_seeded() {
    let y = toy_panel(3, 60, 2);
    let sp = spec(3, SlopeMode::Stationary);
    let init = ChainInit::default_for(&sp);
    let model = ChainModel::Multivariate(McmcPriors::default_for(3));
    let a = run_chain(&y, &sp, &model, &init, &short_config(40, 5), None).unwrap();
    let b = run_chain(&y, &sp, &model, &init, &short_config(40, 5), None).unwrap();
    let c = run_chain(&y, &sp, &model, &init, &short_config(40, 6), None).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.draws, c.draws);
    assert_eq!(a.len(), 30);
}

#[test]
fn draws_respect_the_graph_and_stationarity() {
    let mut y = toy_panel(4, 80, 3);
    y[(1, 10)] = f64::NAN;
    for i in 0..4 {
        y[(i, 20)] = f64::NAN;
    }
    let sp = spec(4, SlopeMode::Stationary);
    let init = ChainInit::default_for(&sp);
    let model = ChainModel::Multivariate(McmcPriors::default_for(4));
    let cfg = McmcConfig {
        n_iters: 600,
        n_burnin: 300,
        seed: 8,
        ..Default::default()
    };
    let out = run_chain(&y, &sp, &model, &init, &cfg, Some(70)).unwrap();
    assert_eq!(out.len(), 300);
    for d in &out.draws {
        for cov in [&d.params.sigma, &d.params.sigma_u, &d.params.sigma_v, &d.params.sigma_w] {
            let k = linalg::spd_inverse(cov, "cov").unwrap();
            assert!(sp.graph.max_off_graph(&k) < 1e-8 * k.amax());
        }
        assert!(stationary::is_schur_stable(&d.params.phi));
        assert_eq!(d.trend_window.as_ref().unwrap().ncols(), 10);
    }
    let acc = out.phi_acceptance().unwrap();
    assert!(acc > 0.05 && acc < 0.8, "{acc}");
    assert!(out.sigma_v_acceptance().unwrap() > 0.0);
    assert_eq!(out.scalar_traces().len(), 4 * 4 + 16 + 4);
}

#[test]
fn random_walk_chain_has_unit_phi() {
    let y = toy_panel(2, 60, 4);
    let sp = spec(2, SlopeMode::RandomWalk);
    let init = ChainInit::default_for(&sp);
    let model = ChainModel::Multivariate(McmcPriors::default_for(2));
    let out = run_chain(&y, &sp, &model, &init, &short_config(40, 1), None).unwrap();
    assert!(out.phi_acceptance().is_none());
    for d in &out.draws {
        assert_eq!(d.params.phi, DMatrix::identity(2, 2));
        assert!(d.params.d.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn univariate_chain_recovers_noise_variance() {
    let y = toy_panel(1, 400, 6);
    let priors = UnivariatePriors::from_series(y.row(0).transpose().as_slice()).unwrap();
    for mode in [SlopeMode::RandomWalk, SlopeMode::Stationary] {
        let sp = spec(1, mode);
        let init = ChainInit::default_for(&sp);
        let out = run_chain(&y, &sp, &ChainModel::Univariate(priors), &init, &short_config(1500, 3), None).unwrap();
        let mean = out.draws.iter().map(|d| d.params.sigma[(0, 0)]).sum::<f64>() / out.len() as f64;
        assert!((mean - 0.09).abs() / 0.09 < 0.3, "{mode:?}: {mean}");
        for d in &out.draws {
            assert!(d.params.phi[(0, 0)].abs() < 1.0 || mode == SlopeMode::RandomWalk);
        }
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    let y = toy_panel(2, 30, 1);
    let sp = spec(3, SlopeMode::RandomWalk);
    let init = ChainInit::default_for(&sp);
    let model = ChainModel::Multivariate(McmcPriors::default_for(3));
    assert!(run_chain(&y, &sp, &model, &init, &short_config(10, 1), None).is_err());
    let sp2 = spec(2, SlopeMode::RandomWalk);
    let init2 = ChainInit::default_for(&sp2);
    let model2 = ChainModel::Multivariate(McmcPriors::default_for(2));
    assert!(run_chain(&y, &sp2, &model2, &init2, &short_config(10, 1), Some(31)).is_err());
    let bad = McmcConfig {
        thinning: 0,
        ..short_config(10, 1)
    };
    assert!(run_chain(&y, &sp2, &model2, &init2, &bad, None).is_err());
}
