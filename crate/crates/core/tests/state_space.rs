mod common;

use common::oracle::Joint;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stcausal_core::state_space::{
    backward_smoother, kalman_filter, kalman_filter_with, log_likelihood, simulate,
    simulation_smoother, FilterOptions, StateSpaceSystem,
};

fn gauss(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn spd(rng: &mut ChaCha8Rng, k: usize, ridge: f64) -> DMatrix<f64> {
    let a = gauss(rng, k, k, 0.5);
    &a * a.transpose() + DMatrix::identity(k, k) * ridge
}

fn random_system(rng: &mut ChaCha8Rng, n: usize, m: usize, q: usize) -> StateSpaceSystem {
    let mut t = gauss(rng, m, m, 0.4);
    let rho = stcausal_core::linalg::spectral_radius(&t);
    if rho > 0.95 {
        t *= 0.95 / rho;
    }
    StateSpaceSystem::new(
        gauss(rng, n, m, 1.0),
        gauss(rng, m, 1, 0.3).column(0).into_owned(),
        t,
        gauss(rng, m, q, 1.0),
        spd(rng, n, 0.3),
        spd(rng, q, 0.2),
        gauss(rng, m, 1, 1.0).column(0).into_owned(),
        spd(rng, m, 0.5),
    )
    .unwrap()
}

fn data_with_gaps(rng: &mut ChaCha8Rng, sys: &StateSpaceSystem, n_time: usize) -> DMatrix<f64> {
    let (_, mut y) = simulate(sys, n_time, rng);
    // one fully missing column and a few scattered holes
    for i in 0..y.nrows() {
        y[(i, 2)] = f64::NAN;
    }
    y[(0, 4)] = f64::NAN;
    if y.nrows() > 1 {
        y[(1, 1)] = f64::NAN;
    }
    y
}

#[test]
fn filter_matches_joint_gaussian_conditioning() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let sys = random_system(&mut rng, 2, 3, 2);
    let n_time = 7;
    let y = data_with_gaps(&mut rng, &sys, n_time);
    let joint = Joint::new(&sys, n_time);
    let filt = kalman_filter(&sys, &y).unwrap();
    for t in 0..n_time {
        let (mean, cov) = joint.condition(&sys, &y, t);
        let step = &filt.steps[t];
        assert!((&step.predicted_mean - joint.block_vec(&mean, t)).amax() < 1e-9, "a_{t}");
        assert!((&step.predicted_cov - joint.block(&cov, t, t)).amax() < 1e-9, "P_{t}");
    }
    assert!(filt.steps[2].innovation.is_none());
    assert_eq!(filt.steps[4].observed, vec![1]);
    let ll = joint.log_likelihood(&sys, &y);
    assert!((filt.log_likelihood - ll).abs() < 1e-9 * ll.abs().max(1.0));
}

#[test]
fn smoother_matches_joint_gaussian_conditioning() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let sys = random_system(&mut rng, 2, 3, 2);
    let n_time = 8;
    let y = data_with_gaps(&mut rng, &sys, n_time);
    let joint = Joint::new(&sys, n_time);
    let (mean, cov) = joint.condition(&sys, &y, n_time);
    let filt = kalman_filter(&sys, &y).unwrap();
    let sm = backward_smoother(&sys, &filt).unwrap();
    for t in 0..n_time {
        assert!((&sm.means[t] - joint.block_vec(&mean, t)).amax() < 1e-9, "mean {t}");
        assert!((&sm.covs[t] - joint.block(&cov, t, t)).amax() < 1e-9, "cov {t}");
        if t >= 1 {
            let lag = joint.block(&cov, t - 1, t);
            assert!((&sm.lag_one[t - 1] - lag).amax() < 1e-9, "lag {t}");
            let cross = joint.block(&cov, t, t - 1)
                + joint.block_vec(&mean, t) * joint.block_vec(&mean, t - 1).transpose();
            assert!((sm.cross_moment(t) - cross).amax() < 1e-9);
        }
    }
}

#[test]
fn unused_noise_component_changes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let sys = random_system(&mut rng, 2, 3, 2);
    let y = data_with_gaps(&mut rng, &sys, 6);
    let mut wide = sys.clone();
    let mut r = DMatrix::zeros(3, 3);
    r.view_mut((0, 0), (3, 2)).copy_from(&sys.noise_selector);
    let mut q = DMatrix::identity(3, 3) * 2.5;
    q.view_mut((0, 0), (2, 2)).copy_from(&sys.state_cov);
    wide.noise_selector = r;
    wide.state_cov = q;
    wide.validate().unwrap();
    let a = backward_smoother(&sys, &kalman_filter(&sys, &y).unwrap()).unwrap();
    let b = backward_smoother(&wide, &kalman_filter(&wide, &y).unwrap()).unwrap();
    for t in 0..6 {
        assert!((&a.means[t] - &b.means[t]).amax() < 1e-12);
        assert!((&a.covs[t] - &b.covs[t]).amax() < 1e-12);
    }
    assert!((log_likelihood(&sys, &y).unwrap() - log_likelihood(&wide, &y).unwrap()).abs() < 1e-10);
}

#[test]
fn steady_state_shortcut_agrees_with_full_recursion() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let sys = random_system(&mut rng, 2, 3, 2);
    let (_, mut y) = simulate(&sys, 200, &mut rng);
    y[(0, 150)] = f64::NAN;
    let full = kalman_filter(&sys, &y).unwrap();
    let fast = kalman_filter_with(&sys, &y, FilterOptions { steady_state_tol: Some(1e-12) }).unwrap();
    assert!((full.log_likelihood - fast.log_likelihood).abs() < 1e-8);
    let a = backward_smoother(&sys, &full).unwrap();
    let b = backward_smoother(&sys, &fast).unwrap();
    for t in 0..200 {
        assert!((&a.means[t] - &b.means[t]).amax() < 1e-8);
    }
}

#[test]
fn simulation_smoother_draws_have_smoothed_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let sys = random_system(&mut rng, 2, 3, 2);
    let n_time = 6;
    let y = data_with_gaps(&mut rng, &sys, n_time);
    let sm = backward_smoother(&sys, &kalman_filter(&sys, &y).unwrap()).unwrap();
    let draws = 20_000;
    let m = sys.n_state();
    let mut sum = DMatrix::zeros(m, n_time);
    let mut sq = vec![DMatrix::<f64>::zeros(m, m); n_time];
    for _ in 0..draws {
        let d = simulation_smoother(&sys, &y, &mut rng).unwrap();
        sum += &d;
        for t in 0..n_time {
            let c: DVector<f64> = d.column(t).into_owned();
            sq[t] += &c * c.transpose();
        }
    }
    let nd = draws as f64;
    for t in 0..n_time {
        let mean: DVector<f64> = sum.column(t) / nd;
        let cov = &sq[t] / nd - &mean * mean.transpose();
        let sd = sm.covs[t].diagonal().map(f64::sqrt);
        for j in 0..m {
            // 5 standard errors of the Monte Carlo mean
            assert!((mean[j] - sm.means[t][j]).abs() < 5.0 * sd[j] / nd.sqrt());
        }
        assert!((cov - &sm.covs[t]).amax() < 0.05 * sm.covs[t].amax().max(0.1));
    }
}

#[test]
fn singular_innovation_is_reported() {
    let sys = StateSpaceSystem::new(
        DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
        DVector::zeros(1),
        DMatrix::identity(1, 1),
        DMatrix::identity(1, 1),
        DMatrix::identity(2, 2) * 1e-12,
        DMatrix::identity(1, 1),
        DVector::zeros(1),
        DMatrix::identity(1, 1) * 1e6,
    )
    .unwrap();
    let y = DMatrix::from_element(2, 3, 1.0);
    let err = kalman_filter(&sys, &y).unwrap_err();
    assert!(matches!(err, stcausal_core::Error::SingularInnovation { t: 0, .. }));
    assert!(err.is_numerical());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn log_likelihood_and_smoother_match_oracle(seed in 0u64..10_000, n in 1usize..3, m in 1usize..4, n_time in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sys = random_system(&mut rng, n, m, m);
        let (_, mut y) = simulate(&sys, n_time, &mut rng);
        if rng.random::<f64>() < 0.5 {
            y[(0, n_time - 1)] = f64::NAN;
        }
        let joint = Joint::new(&sys, n_time);
        let filt = kalman_filter(&sys, &y).unwrap();
        let ll = joint.log_likelihood(&sys, &y);
        prop_assert!((filt.log_likelihood - ll).abs() < 1e-8 * ll.abs().max(1.0));
        let sm = backward_smoother(&sys, &filt).unwrap();
        let (mean, cov) = joint.condition(&sys, &y, n_time);
        for t in 0..n_time {
            prop_assert!((&sm.means[t] - joint.block_vec(&mean, t)).amax() < 1e-7);
            let c = &sm.covs[t];
            prop_assert!((c - joint.block(&cov, t, t)).amax() < 1e-7);
            prop_assert!((c - c.transpose()).amax() < 1e-12);
            prop_assert!(stcausal_core::linalg::min_eigenvalue(c) > -1e-9);
        }
    }
}

fn pinned_system() -> StateSpaceSystem {
    StateSpaceSystem::new(
        DMatrix::identity(1, 1),
        DVector::zeros(1),
        DMatrix::zeros(1, 1),
        DMatrix::identity(1, 1),
        DMatrix::identity(1, 1),
        DMatrix::zeros(1, 1),
        DVector::zeros(1),
        DMatrix::zeros(1, 1),
    )
    .unwrap()
}

#[test]
fn pinned_state_passes_data_through_innovations() {
    let sys = pinned_system();
    let y = DMatrix::from_row_slice(1, 3, &[2.0, -1.0, 3.0]);
    let filt = kalman_filter(&sys, &y).unwrap();
    for (t, step) in filt.steps.iter().enumerate() {
        assert_eq!(step.predicted_mean[0], 0.0);
        let inn = step.innovation.as_ref().unwrap();
        assert_eq!(inn.value[0], y[(0, t)]);
        assert_eq!(inn.cov[(0, 0)], 1.0);
    }
    let sm = backward_smoother(&sys, &filt).unwrap();
    assert!(sm.means.iter().all(|a| a[0] == 0.0));
    assert!(sm.covs.iter().all(|p| p[(0, 0)] == 0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let draw = simulation_smoother(&sys, &y, &mut rng).unwrap();
    assert!(draw.iter().all(|&v| v == 0.0));

    let zero = DMatrix::from_element(1, 1, 0.0);
    let ll = log_likelihood(&sys, &zero).unwrap();
    assert!((ll + 0.918_938_533_204_672_7).abs() < 1e-12);
}

#[test]
fn all_missing_data_uses_prediction_only() {
    let sys = StateSpaceSystem::new(
        DMatrix::identity(2, 2),
        DVector::zeros(2),
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2),
        DVector::from_vec(vec![1.0, 2.0]),
        DMatrix::identity(2, 2),
    )
    .unwrap();
    let y = DMatrix::from_element(2, 4, f64::NAN);
    let filt = kalman_filter(&sys, &y).unwrap();
    for step in &filt.steps {
        assert_eq!(step.predicted_mean.as_slice(), &[1.0, 2.0]);
        assert!(step.innovation.is_none());
    }
    assert_eq!(filt.log_likelihood, 0.0);
    assert_eq!(filt.steps[3].predicted_cov, DMatrix::identity(2, 2) * 4.0);
}

#[test]
fn single_time_point_smooths_to_filtered_posterior() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let sys = random_system(&mut rng, 2, 3, 2);
    let y = DMatrix::from_column_slice(2, 1, &[0.3, -1.2]);
    let filt = kalman_filter(&sys, &y).unwrap();
    let sm = backward_smoother(&sys, &filt).unwrap();
    let z = &sys.obs_matrix;
    let p = &sys.init_cov;
    let f = z * p * z.transpose() + &sys.obs_cov;
    let gain = p * z.transpose() * f.try_inverse().unwrap();
    let mean = &sys.init_mean + &gain * (y.column(0) - z * &sys.init_mean);
    let cov = p - &gain * z * p;
    assert!((&sm.means[0] - mean).amax() < 1e-12);
    assert!((&sm.covs[0] - cov).amax() < 1e-12);
}

#[test]
fn smoothing_never_increases_uncertainty() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let sys = random_system(&mut rng, 3, 4, 3);
    let y = data_with_gaps(&mut rng, &sys, 10);
    let filt = kalman_filter(&sys, &y).unwrap();
    let sm = backward_smoother(&sys, &filt).unwrap();
    for t in 0..10 {
        let diff = &filt.steps[t].predicted_cov - &sm.covs[t];
        assert!(stcausal_core::linalg::min_eigenvalue(&diff) >= -1e-10);
    }
}

#[test]
fn simulation_smoother_is_deterministic_under_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let sys = random_system(&mut rng, 2, 3, 2);
    let y = data_with_gaps(&mut rng, &sys, 5);
    let a = simulation_smoother(&sys, &y, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = simulation_smoother(&sys, &y, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
}
