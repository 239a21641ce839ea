mod common;

use common::*;
use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcl_market::agent::*;
use tcl_market::estimation::*;
use tcl_market::thermal::*;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

// ---------------------------------------------------------------------------
// E-step against joint-Gaussian conditioning

#[test]
fn filter_matches_joint_conditioning() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..50 {
        let model = random_model(&mut rng);
        let m = rng.random_range(3..=5);
        let (log, _) = random_log(&model, m, &mut rng);
        let f = kalman_filter(&model, &log).unwrap();
        for k in 0..m {
            let joint = joint_posterior(&model, &log, k + 1);
            assert!((f.means[k] - joint.means[k]).amax() < 1e-9);
            assert!((f.covs[k] - joint.covs[k]).amax() < 1e-9);
        }
        assert!(close(f.loglik, joint_posterior(&model, &log, m).loglik, 1e-9));
    }
}

#[test]
fn smoother_matches_joint_conditioning() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..50 {
        let model = random_model(&mut rng);
        let m = rng.random_range(3..=5);
        let (log, _) = random_log(&model, m, &mut rng);
        let post = e_step(&model, &log).unwrap();
        let joint = joint_posterior(&model, &log, m);
        for k in 0..m {
            assert!((post.means[k] - joint.means[k]).amax() < 1e-9);
            assert!((post.covs[k] - joint.covs[k]).amax() < 1e-9);
            if k > 0 {
                assert!((post.pairwise[k - 1] - joint.pairwise(k)).amax() < 1e-9);
            }
        }
    }
}

#[test]
fn noise_free_filter_tracks_the_trajectory() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for _ in 0..20 {
        let mut model = random_model(&mut rng);
        model.q_cov = Matrix2::zeros();
        model.r_var = 0.0;
        model.p0 = Matrix2::identity();
        let (log, _) = random_log(&noise_free(model), 8, &mut rng);
        let mut states = vec![model.m0];
        for k in 1..log.len() {
            let p = states[k - 1];
            states.push(model.a_bar * p + model.b_bar * log.exog[k - 1] + model.c_for(log.modes[k - 1]));
        }
        let f = kalman_filter(&model, &log).unwrap();
        for (mu, x) in f.means.iter().zip(&states) {
            assert!((mu - x).amax() < 1e-9, "{mu:?} vs {x:?}");
        }
    }
}

/// Noise-free copy of a model for data generation: the trajectory starts exactly at `m0`.
fn noise_free(mut m: UncertainModel) -> UncertainModel {
    m.q_cov = Matrix2::identity() * 1e-300;
    m.p0 = Matrix2::identity() * 1e-300;
    m.r_var = 0.0;
    m
}

#[test]
fn huge_process_noise_leaves_filter_unchanged_by_smoothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut model = random_model(&mut rng);
    let (log, _) = random_log(&model, 20, &mut rng);
    model.q_cov = Matrix2::identity() * 1e9;
    let f = kalman_filter(&model, &log).unwrap();
    let s = kalman_smoother(&f, &model, &log).unwrap();
    // Only the measured component: the mass state is itself uninformed in this limit.
    for (a, b) in s.means.iter().zip(&f.means) {
        assert!((a[0] - b[0]).abs() < 1e-3 * b[0].abs().max(1.0));
    }
}

// ---------------------------------------------------------------------------
// M-step

#[test]
fn noiseless_posterior_recovers_parameters_in_one_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    for _ in 0..20 {
        let truth = random_model(&mut rng);
        let (log, _) = random_log(&noise_free(truth), 40, &mut rng);
        let mut states = vec![truth.m0];
        for k in 1..log.len() {
            states.push(truth.a_bar * states[k - 1] + truth.b_bar * log.exog[k - 1] + truth.c_for(log.modes[k - 1]));
        }
        let post = SmoothedPosterior {
            means: states.clone(),
            covs: vec![Matrix2::zeros(); states.len()],
            pairwise: (1..states.len()).map(|k| states[k] * states[k - 1].transpose()).collect(),
            loglik: 0.0,
        };
        let wrong = random_model(&mut rng);
        let joint = m_step(&post, &log, &wrong, &MStepOptions { joint: true, ..Default::default() }).unwrap();
        let seq = m_step(&post, &log, &truth, &MStepOptions::default()).unwrap();
        for est in [joint, seq] {
            assert!((est.a_bar - truth.a_bar).amax() < 1e-9);
            assert!((est.b_bar - truth.b_bar).amax() < 1e-9);
            assert!((est.c_on - truth.c_on).amax() < 1e-9);
            assert!((est.c_off - truth.c_off).amax() < 1e-9);
            assert!(est.q_cov.amax() < 1e-9);
        }
    }
}

#[test]
fn all_on_log_keeps_previous_off_drive() {
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let model = random_model(&mut rng);
    let (mut log, _) = random_log(&model, 30, &mut rng);
    log.modes = vec![true; 30];
    let post = e_step(&model, &log).unwrap();
    for joint in [false, true] {
        let next = m_step(&post, &log, &model, &MStepOptions { joint, ..Default::default() }).unwrap();
        assert_eq!(next.c_off, model.c_off);
        assert_ne!(next.c_on, model.c_on);
    }
}

/// Expected complete-data log-likelihood under the moments of `post`.
fn q_value(th: &UncertainModel, post: &JointPosterior, log: &MeasurementLog) -> f64 {
    let bad = |m: &Matrix2<f64>| !(m[(0, 0)] > 0.0 && m.determinant() > 0.0);
    if bad(&th.q_cov) || bad(&th.p0) || th.r_var.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return f64::NEG_INFINITY;
    }
    let m = log.len();
    let (mu0, m0) = (post.means[0], th.m0);
    let e0 = post.second_moment(0) - mu0 * m0.transpose() - m0 * mu0.transpose() + m0 * m0.transpose();
    let mut q = -0.5 * (th.p0.determinant().ln() + (th.p0.try_inverse().unwrap() * e0).trace());
    let q_inv = th.q_cov.try_inverse().unwrap();
    for k in 1..m {
        let a = th.a_bar;
        let d = th.b_bar * log.exog[k - 1] + th.c_for(log.modes[k - 1]);
        let (mk, mp) = (post.means[k], post.means[k - 1]);
        let p = post.pairwise(k);
        let r = post.second_moment(k) - p * a.transpose() - a * p.transpose() + a * post.second_moment(k - 1) * a.transpose() - d * mk.transpose() - mk * d.transpose()
            + a * mp * d.transpose()
            + d * mp.transpose() * a.transpose()
            + d * d.transpose();
        q -= 0.5 * (th.q_cov.determinant().ln() + (q_inv * r).trace());
    }
    for k in 0..m {
        let y = log.temps[k];
        q -= 0.5 * (th.r_var.ln() + (y * y - 2.0 * y * post.means[k][0] + post.second_moment(k)[(0, 0)]) / th.r_var);
    }
    q
}

/// One scalar coordinate of the parameter vector.
#[derive(Clone, Copy)]
struct Coord {
    get: fn(&UncertainModel) -> f64,
    set: fn(&mut UncertainModel, f64),
}

macro_rules! coord {
    ($name:ident, $($field:tt)+) => {
        const $name: Coord = Coord { get: |t| t.$($field)+, set: |t, x| t.$($field)+ = x };
    };
}

coord!(A00, a_bar[(0, 0)]);
coord!(A01, a_bar[(0, 1)]);
coord!(A10, a_bar[(1, 0)]);
coord!(A11, a_bar[(1, 1)]);
coord!(B00, b_bar[(0, 0)]);
coord!(B01, b_bar[(0, 1)]);
coord!(B10, b_bar[(1, 0)]);
coord!(B11, b_bar[(1, 1)]);
coord!(CON0, c_on[0]);
coord!(CON1, c_on[1]);
coord!(COFF0, c_off[0]);
coord!(COFF1, c_off[1]);
coord!(Q00, q_cov[(0, 0)]);
coord!(Q11, q_cov[(1, 1)]);
coord!(R, r_var);
coord!(M00, m0[0]);
coord!(M01, m0[1]);
coord!(P00, p0[(0, 0)]);
coord!(P11, p0[(1, 1)]);
const Q01: Coord = Coord {
    get: |t| t.q_cov[(0, 1)],
    set: |t, x| {
        t.q_cov[(0, 1)] = x;
        t.q_cov[(1, 0)] = x;
    },
};
const P01: Coord = Coord {
    get: |t| t.p0[(0, 1)],
    set: |t, x| {
        t.p0[(0, 1)] = x;
        t.p0[(1, 0)] = x;
    },
};

/// Coordinate-wise ascent with finite-difference Newton steps and backtracking.
fn coordinate_ascent(th: &mut UncertainModel, coords: &[Coord], f: &dyn Fn(&UncertainModel) -> f64) {
    let eval = |th: &UncertainModel, c: Coord, x: f64| {
        let mut t = *th;
        (c.set)(&mut t, x);
        f(&t)
    };
    for _sweep in 0..20_000 {
        let mut biggest = 0.0f64;
        for &c in coords {
            let x = (c.get)(th);
            let scale = x.abs().max(1e-3);
            let h = 1e-4 * scale;
            let (f0, fp, fm) = (eval(th, c, x), eval(th, c, x + h), eval(th, c, x - h));
            let d1 = (fp - fm) / (2.0 * h);
            let d2 = (fp - 2.0 * f0 + fm) / (h * h);
            let mut step = if d2 < 0.0 { -d1 / d2 } else { d1.signum() * 10.0 * h };
            let mut accepted = false;
            for _ in 0..60 {
                if eval(th, c, x + step) >= f0 {
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                continue;
            }
            (c.set)(th, x + step);
            biggest = biggest.max(step.abs() / scale);
        }
        if biggest < 1e-11 {
            return;
        }
    }
}

fn assert_block(name: &str, got: &[f64], want: &[f64]) {
    let scale = want.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-3);
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() <= 1e-4 * scale, "{name}: m_step {got:?} vs numerical {want:?}");
    }
}

#[test]
fn sequential_m_step_maximizes_expected_log_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    for _ in 0..5 {
        let old = random_model(&mut rng);
        let (log, _) = random_log(&old, 12, &mut rng);
        let joint = joint_posterior(&old, &log, log.len());
        let q = |t: &UncertainModel| q_value(t, &joint, &log);
        let next = m_step(&e_step(&old, &log).unwrap(), &log, &old, &MStepOptions::default()).unwrap();

        let mut th = old;
        coordinate_ascent(&mut th, &[A00, A01, A10, A11], &q);
        assert_block("A", th.a_bar.as_slice(), next.a_bar.as_slice());
        coordinate_ascent(&mut th, &[B00, B01, B10, B11], &q);
        assert_block("B", th.b_bar.as_slice(), next.b_bar.as_slice());
        coordinate_ascent(&mut th, &[CON0, CON1, COFF0, COFF1], &q);
        assert_block("C_on", th.c_on.as_slice(), next.c_on.as_slice());
        assert_block("C_off", th.c_off.as_slice(), next.c_off.as_slice());
        coordinate_ascent(&mut th, &[Q00, Q01, Q11], &q);
        assert_block("Omega", th.q_cov.as_slice(), next.q_cov.as_slice());
        coordinate_ascent(&mut th, &[R], &q);
        assert_block("Sigma", &[th.r_var], &[next.r_var]);
        coordinate_ascent(&mut th, &[M00, M01], &q);
        assert_block("m0", th.m0.as_slice(), next.m0.as_slice());
        coordinate_ascent(&mut th, &[P00, P01, P11], &q);
        assert_block("Phi0", th.p0.as_slice(), next.p0.as_slice());
    }
}

#[test]
fn joint_m_step_maximizes_expected_log_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(48);
    for _ in 0..3 {
        let old = random_model(&mut rng);
        let (log, _) = random_log(&old, 12, &mut rng);
        let joint = joint_posterior(&old, &log, log.len());
        let q = |t: &UncertainModel| q_value(t, &joint, &log);
        let next = m_step(&e_step(&old, &log).unwrap(), &log, &old, &MStepOptions { joint: true, ..Default::default() }).unwrap();
        let mut th = old;
        coordinate_ascent(&mut th, &[A00, A01, A10, A11, B00, B01, B10, B11, CON0, CON1, COFF0, COFF1], &q);
        assert_block("A", th.a_bar.as_slice(), next.a_bar.as_slice());
        assert_block("B", th.b_bar.as_slice(), next.b_bar.as_slice());
        assert_block("C_on", th.c_on.as_slice(), next.c_on.as_slice());
        assert_block("C_off", th.c_off.as_slice(), next.c_off.as_slice());
    }
}

// ---------------------------------------------------------------------------
// EM

#[test]
fn em_log_likelihood_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(49);
    for _ in 0..30 {
        let truth = random_model(&mut rng);
        let (log, _) = random_log(&truth, 80, &mut rng);
        let mut init = random_model(&mut rng);
        init.m0 = Vector2::new(log.temps[0], 0.0);
        for joint in [false, true] {
            let opts = EmOptions { max_iters: 40, m_step: MStepOptions { joint, ..Default::default() }, ..Default::default() };
            let fit = em_fit(&log, &init, &opts).unwrap();
            for w in fit.loglik_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "{} -> {}", w[0], w[1]);
            }
            assert!(!fit.non_monotone);
        }
    }
}

#[test]
fn true_parameters_on_noiseless_data_are_a_fixed_point() {
    // Noiseless truth with every noise parameter at the covariance floor.
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for _ in 0..10 {
        let mut truth = random_model(&mut rng);
        truth.q_cov = Matrix2::identity() * COV_FLOOR;
        truth.p0 = Matrix2::identity() * COV_FLOOR;
        truth.r_var = COV_FLOOR;
        let (log, _) = random_log(&noise_free(truth), 100, &mut rng);
        for joint in [false, true] {
            let opts = EmOptions { m_step: MStepOptions { joint, ..Default::default() }, ..Default::default() };
            let fit = em_fit(&log, &truth, &opts).unwrap();
            assert!(fit.converged && fit.iterations <= 2, "{} iterations: {:?}", fit.iterations, fit.loglik_trace);
            assert!((fit.model.a_bar - truth.a_bar).amax() < 1e-6);
        }
    }
}

#[test]
fn covariances_stay_symmetric_psd() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let truth = random_model(&mut rng);
    let (log, _) = random_log(&truth, 60, &mut rng);
    let mut model = random_model(&mut rng);
    for _ in 0..30 {
        let post = e_step(&model, &log).unwrap();
        for c in &post.covs {
            assert_eq!(c[(0, 1)], c[(1, 0)]);
            assert!(c.symmetric_eigenvalues().min() > -1e-12);
        }
        model = m_step(&post, &log, &model, &MStepOptions::default()).unwrap();
        for c in [model.q_cov, model.p0] {
            assert_eq!(c[(0, 1)], c[(1, 0)]);
            assert!(c.symmetric_eigenvalues().min() >= COV_FLOOR * 0.999);
        }
        assert!(model.r_var >= COV_FLOOR);
    }
}

// ---------------------------------------------------------------------------
// Bids from an estimate

fn house() -> PhysicalHouse {
    PhysicalHouse {
        ua: 450.0,
        hm: 3000.0,
        ca: 800.0,
        cm: 6000.0,
        hvac_btu_per_h: 30_000.0,
        cop: 3.5,
        solar_scale: 1.0,
        solar_air_fraction: 0.5,
        internal_gain: 2000.0,
    }
}

#[test]
fn exact_model_bid_matches_known_parameter_bid() {
    let bm = house().to_model(1.0);
    let prefs = UserPrefs::new(68.0, 72.0, 76.0, 2.0).unwrap();
    let stats = PriceStats::new(0.1, 0.03, DEFAULT_WINDOW).unwrap();
    let zeta = Vector2::new(95.0, 1500.0);
    let mut checked = [0usize; 2];
    for len in 100..160 {
        let model = UncertainModel::discretize(&bm, SAMPLE_H, Matrix2::identity() * 1e-10, 1e-10, Vector2::new(72.3, 72.0), Matrix2::identity() * 1e-10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(len as u64);
        let syn = synthesize_log(&model, &vec![zeta; len], 72.0, 1.0, true, NoiseKind::Gaussian, &mut rng).unwrap();
        let last = syn.states[len - 1];
        let on = syn.log.modes[len - 1];
        let state = HybridState::new(last[0], last[1], on);
        let params = bm.etp_params(&zeta, DEFAULT_PERIOD_H).unwrap();
        let known = realistic_bid(LoadId(3), &state, &params, &prefs, &stats, params.rated_power()).unwrap();
        let (est, _) = bid_from_estimate(LoadId(3), &model, &syn.log, 1.0, &prefs, &stats, params.rated_power()).unwrap();
        assert!((est.price - known.price).abs() < 1e-6, "len {len}: {} vs {}", est.price, known.price);
        checked[on as usize] += 1;
    }
    assert!(checked[0] > 0 && checked[1] > 0);
}

#[test]
fn measurement_log_csv_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let model = random_model(&mut rng);
    let (log, _) = random_log(&model, 10, &mut rng);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("log.csv");
    log.write_csv(&p).unwrap();
    let back = MeasurementLog::read_csv(&p).unwrap();
    assert_eq!(back.modes, log.modes);
    for k in 0..10 {
        assert!((back.temps[k] - log.temps[k]).abs() < 1e-12);
        assert!((back.exog[k] - log.exog[k]).amax() < 1e-12);
    }
}
