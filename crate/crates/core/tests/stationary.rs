use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stcausal_core::linalg;
use stcausal_core::stationary::{cayley_orthogonal, is_schur_stable, solve_yule_walker, to_phi};
use stcausal_core::StationaryVarParams;

fn random_params(rng: &mut ChaCha8Rng, n: usize) -> StationaryVarParams {
    let k = n * (n - 1) / 2;
    let mut normal = |s: f64| -> f64 { s * rng.sample::<f64, _>(StandardNormal) };
    StationaryVarParams {
        chol_lower: (0..k).map(|_| normal(1.0)).collect(),
        log_diag: (0..n).map(|_| normal(2.0)).collect(),
        skew_lower: (0..k).map(|_| normal(1.5)).collect(),
        reflect: normal(1.0) > 0.0,
    }
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    &a * a.transpose() + DMatrix::identity(n, n) * 0.1
}

#[test]
fn every_parameter_draw_gives_a_stable_phi() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..1000 {
        let p = random_params(&mut rng, 5);
        let m = random_spd(&mut rng, 5);
        let (phi, u) = to_phi(&p, &m).unwrap();
        assert!(linalg::spectral_radius(&phi) < 1.0);
        let resid = &u - &phi * &u * phi.transpose() - &m;
        assert!(resid.norm() < 1e-8 * u.norm().max(1.0));
        assert!(linalg::min_eigenvalue(&(&u - &m)) > -1e-10 * u.amax());
        let u2 = solve_yule_walker(&phi, &m).unwrap();
        assert!((&u2 - &u).amax() < 1e-9 * u.amax().max(1.0));
    }
}

#[test]
fn yule_walker_residual_on_random_stable_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..100 {
        let n = 1 + (rng.random::<u32>() % 5) as usize;
        let mut phi = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let rho = linalg::spectral_radius(&phi);
        phi *= rng.random::<f64>() * 0.95 / rho;
        assert!(is_schur_stable(&phi));
        let m = random_spd(&mut rng, n);
        let u = solve_yule_walker(&phi, &m).unwrap();
        assert!((&u - &phi * &u * phi.transpose() - &m).norm() < 1e-10 * u.norm().max(1.0));
    }
}

#[test]
fn map_is_smooth_in_the_real_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..50 {
        let p = random_params(&mut rng, 3);
        let m = random_spd(&mut rng, 3);
        let (phi, _) = to_phi(&p, &m).unwrap();
        let mut v = p.to_vector();
        for x in &mut v {
            *x += 1e-6 * rng.sample::<f64, _>(StandardNormal);
        }
        let q = StationaryVarParams::from_vector(3, &v, p.reflect).unwrap();
        let (phi2, _) = to_phi(&q, &m).unwrap();
        assert!((phi2 - phi).amax() < 1e-4);
    }
}

#[test]
fn scaling_anchor_and_lambda_leaves_phi_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..50 {
        let p = random_params(&mut rng, 4);
        let m = random_spd(&mut rng, 4);
        let c: f64 = 0.5 + 3.0 * rng.random::<f64>();
        let mut q = p.clone();
        for x in &mut q.log_diag {
            *x += c.ln();
        }
        let (phi, u) = to_phi(&p, &m).unwrap();
        let (phi2, u2) = to_phi(&q, &(&m * c)).unwrap();
        assert!((phi2 - phi).amax() < 1e-10);
        assert!((u2 - u * c).amax() < 1e-10 * c.max(1.0) * m.amax().max(1.0) * 10.0);
    }
}

proptest! {
    #[test]
    fn cayley_transform_is_orthogonal(g in proptest::collection::vec(-5.0f64..5.0, 10), reflect: bool) {
        let o = cayley_orthogonal(&g, 5, reflect).unwrap();
        prop_assert!((o.transpose() * &o - DMatrix::identity(5, 5)).norm() < 1e-11);
    }
}

#[test]
fn inverse_map_round_trips() {
    use stcausal_core::stationary::from_phi;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for n in 1..=5 {
        for _ in 0..50 {
            let p = random_params(&mut rng, n);
            let m = random_spd(&mut rng, n);
            let (phi, _) = to_phi(&p, &m).unwrap();
            let back = from_phi(&phi, &m).unwrap();
            let (phi2, _) = to_phi(&back, &m).unwrap();
            assert!((&phi2 - &phi).amax() < 1e-8, "n = {n}");
        }
    }
    let phi = DMatrix::from_row_slice(2, 2, &[-0.3, 0.1, 0.2, -0.5]);
    let back = from_phi(&phi, &DMatrix::identity(2, 2)).unwrap();
    assert!((to_phi(&back, &DMatrix::identity(2, 2)).unwrap().0 - phi).amax() < 1e-10);
}
