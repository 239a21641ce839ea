//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use tcl_market::agent::QuadraticValuation;
use tcl_market::estimation::{MeasurementLog, UncertainModel};
use tcl_market::market::CostModel;
use tcl_market::thermal::{EtpParams, HybridState, PhysicalHouse, DEFAULT_PERIOD_H};

pub const FINE_STEP_H: f64 = 1e-4;

// ---------------------------------------------------------------------------
// Thermal

pub fn random_house<R: Rng>(rng: &mut R) -> PhysicalHouse {
    PhysicalHouse {
        ua: rng.random_range(250.0..700.0),
        hm: rng.random_range(1500.0..5000.0),
        ca: rng.random_range(400.0..1500.0),
        cm: rng.random_range(3000.0..12000.0),
        hvac_btu_per_h: rng.random_range(20_000.0..60_000.0),
        cop: rng.random_range(3.0..4.0),
        solar_scale: rng.random_range(0.5..1.5),
        solar_air_fraction: rng.random_range(0.2..0.8),
        internal_gain: rng.random_range(500.0..3000.0),
    }
}

/// A house in a random weather condition with a state and setpoint near its deadband.
pub fn random_instance<R: Rng>(rng: &mut R) -> (HybridState, f64, EtpParams) {
    let house = random_house(rng);
    let deadband = rng.random_range(0.5..2.0);
    let model = house.to_model(deadband);
    let zeta = Vector2::new(rng.random_range(70.0..105.0), rng.random_range(0.0..3500.0));
    let params = model.etp_params(&zeta, DEFAULT_PERIOD_H).unwrap();
    let setpoint = rng.random_range(68.0..78.0);
    let air = setpoint + rng.random_range(-1.5..1.5) * deadband;
    let mass = air + rng.random_range(-2.0..1.0);
    (HybridState::new(air, mass, rng.random_bool(0.5)), setpoint, params)
}

fn rk4(a: &Matrix2<f64>, b: &Vector2<f64>, x: Vector2<f64>, h: f64) -> Vector2<f64> {
    let f = |x: Vector2<f64>| a * x + b;
    let k1 = f(x);
    let k2 = f(x + k1 * (h / 2.0));
    let k3 = f(x + k2 * (h / 2.0));
    let k4 = f(x + k3 * h);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Fixed-step RK4 integration of `eta' = A eta + B` over `dt`.
pub fn rk4_propagate(a: &Matrix2<f64>, b: &Vector2<f64>, x0: Vector2<f64>, dt: f64, h: f64) -> Vector2<f64> {
    let n = (dt / h).ceil().max(1.0) as usize;
    let step = dt / n as f64;
    (0..n).fold(x0, |x, _| rk4(a, b, x, step))
}

pub struct FineOutcome {
    pub energy: f64,
    pub eta: Vector2<f64>,
    pub on: bool,
}

/// Hybrid simulation with fixed RK4 steps; a step that crosses the deadband
/// is split at the linearly interpolated crossing.
pub fn fine_step_hybrid(state: &HybridState, setpoint: f64, params: &EtpParams, h: f64) -> FineOutcome {
    let half = params.deadband() / 2.0;
    let a = params.a_matrix();
    let mut x = state.eta_vec();
    let mut on = state.on;
    let relay = |air: f64, on: bool| {
        if air >= setpoint + half {
            true
        } else if air <= setpoint - half {
            false
        } else {
            on
        }
    };
    on = relay(x[0], on);
    let n = (params.period() / h).round() as usize;
    let h = params.period() / n as f64;
    let mut on_time = 0.0;
    for _ in 0..n {
        let next = rk4(a, params.drive(on), x, h);
        if relay(next[0], on) == on {
            if on {
                on_time += h;
            }
            x = next;
            continue;
        }
        let boundary = if on { setpoint - half } else { setpoint + half };
        let theta = ((boundary - x[0]) / (next[0] - x[0])).clamp(0.0, 1.0);
        let mid = rk4(a, params.drive(on), x, theta * h);
        if on {
            on_time += theta * h;
        }
        on = !on;
        x = rk4(a, params.drive(on), mid, (1.0 - theta) * h);
        if on {
            on_time += (1.0 - theta) * h;
        }
    }
    FineOutcome {
        energy: params.rated_power() * on_time,
        eta: x,
        on,
    }
}

// ---------------------------------------------------------------------------
// Estimation

pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn random_spd<R: Rng>(rng: &mut R, scale: f64) -> Matrix2<f64> {
    let l = Matrix2::new(rng.random_range(0.3..1.0), 0.0, rng.random_range(-0.5..0.5), rng.random_range(0.3..1.0));
    l * l.transpose() * scale
}

/// A generic stable model with inputs of unit scale.
pub fn random_model<R: Rng>(rng: &mut R) -> UncertainModel {
    UncertainModel {
        a_bar: Matrix2::new(
            rng.random_range(0.5..0.9),
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
            rng.random_range(0.5..0.9),
        ),
        b_bar: Matrix2::from_fn(|_, _| rng.random_range(-0.5..0.5)),
        c_on: Vector2::new(rng.random_range(-2.0..-0.5), rng.random_range(-0.5..0.5)),
        c_off: Vector2::new(rng.random_range(0.5..2.0), rng.random_range(-0.5..0.5)),
        q_cov: random_spd(rng, 0.05),
        r_var: rng.random_range(0.01..0.2),
        m0: Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        p0: random_spd(rng, 0.5),
    }
}

/// Simulates the model with random modes and standard normal inputs.
pub fn random_log<R: Rng>(model: &UncertainModel, m: usize, rng: &mut R) -> (MeasurementLog, Vec<Vector2<f64>>) {
    let exog: Vec<Vector2<f64>> = (0..m).map(|_| Vector2::new(normal(rng), normal(rng))).collect();
    let mut modes: Vec<bool> = (0..m).map(|_| rng.random_bool(0.5)).collect();
    modes[0] = true;
    modes[1] = false;
    let wf = model.q_cov.cholesky().unwrap().l();
    let p0f = model.p0.cholesky().unwrap().l();
    let mut x = model.m0 + p0f * Vector2::new(normal(rng), normal(rng));
    let mut states = vec![];
    let mut temps = vec![];
    for k in 0..m {
        if k > 0 {
            x = model.a_bar * x + model.b_bar * exog[k - 1] + model.c_for(modes[k - 1]) + wf * Vector2::new(normal(rng), normal(rng));
        }
        states.push(x);
        temps.push(x[0] + model.r_var.sqrt() * normal(rng));
    }
    (MeasurementLog::new(temps, modes, exog).unwrap(), states)
}

pub struct JointPosterior {
    pub means: Vec<Vector2<f64>>,
    pub covs: Vec<Matrix2<f64>>,
    /// `cross[k-1] = Cov(eta_k, eta_{k-1} | y)`.
    pub cross: Vec<Matrix2<f64>>,
    pub loglik: f64,
}

impl JointPosterior {
    pub fn second_moment(&self, k: usize) -> Matrix2<f64> {
        self.covs[k] + self.means[k] * self.means[k].transpose()
    }

    /// `E[eta_k eta_{k-1}^T | y]`.
    pub fn pairwise(&self, k: usize) -> Matrix2<f64> {
        self.cross[k - 1] + self.means[k] * self.means[k - 1].transpose()
    }
}

fn block(m: &DMatrix<f64>, i: usize, j: usize) -> Matrix2<f64> {
    Matrix2::new(m[(2 * i, 2 * j)], m[(2 * i, 2 * j + 1)], m[(2 * i + 1, 2 * j)], m[(2 * i + 1, 2 * j + 1)])
}

/// Conditions the stacked state path `eta_0..eta_{M-1}` on the first `n_obs`
/// observations by writing the path as an affine map of the independent
/// Gaussians `(eta_0, w_1, .., w_{M-1})`.
pub fn joint_posterior(model: &UncertainModel, log: &MeasurementLog, n_obs: usize) -> JointPosterior {
    let m = log.len();
    let dim = 2 * m;
    // eta = G z + h with z ~ N(z_mean, z_cov).
    let mut g = DMatrix::<f64>::zeros(dim, dim);
    let mut h = DVector::<f64>::zeros(dim);
    let mut z_mean = DVector::<f64>::zeros(dim);
    let mut z_cov = DMatrix::<f64>::zeros(dim, dim);
    let a = DMatrix::from_fn(2, 2, |i, j| model.a_bar[(i, j)]);
    for i in 0..2 {
        g[(i, i)] = 1.0;
        z_mean[i] = model.m0[i];
        for j in 0..2 {
            z_cov[(i, j)] = model.p0[(i, j)];
        }
    }
    for k in 1..m {
        let prev_rows = g.rows(2 * (k - 1), 2).into_owned();
        let rows = &a * prev_rows;
        g.rows_mut(2 * k, 2).copy_from(&rows);
        g[(2 * k, 2 * k)] += 1.0;
        g[(2 * k + 1, 2 * k + 1)] += 1.0;
        let d = model.b_bar * log.exog[k - 1] + model.c_for(log.modes[k - 1]);
        let hp = Vector2::new(h[2 * (k - 1)], h[2 * (k - 1) + 1]);
        let hk = model.a_bar * hp + d;
        h[2 * k] = hk[0];
        h[2 * k + 1] = hk[1];
        for i in 0..2 {
            for j in 0..2 {
                z_cov[(2 * k + i, 2 * k + j)] = model.q_cov[(i, j)];
            }
        }
    }
    let mu = &g * &z_mean + &h;
    let cov = &g * &z_cov * g.transpose();
    let l = DMatrix::from_fn(n_obs, dim, |r, c| if c == 2 * r { 1.0 } else { 0.0 });
    let y = DVector::from_fn(n_obs, |r, _| log.temps[r]);
    let s = &l * &cov * l.transpose() + DMatrix::identity(n_obs, n_obs) * model.r_var;
    let s_inv = s.clone().try_inverse().expect("observation covariance is singular");
    let resid = &y - &l * &mu;
    let gain = &cov * l.transpose() * &s_inv;
    let post_mu = &mu + &gain * &resid;
    let post_cov = &cov - &gain * &l * &cov;
    let loglik = -0.5 * (n_obs as f64 * (2.0 * std::f64::consts::PI).ln() + s.determinant().ln() + (resid.transpose() * &s_inv * &resid)[0]);
    JointPosterior {
        means: (0..m).map(|k| Vector2::new(post_mu[2 * k], post_mu[2 * k + 1])).collect(),
        covs: (0..m).map(|k| block(&post_cov, k, k)).collect(),
        cross: (1..m).map(|k| block(&post_cov, k, k - 1)).collect(),
        loglik,
    }
}

// ---------------------------------------------------------------------------
// Market

/// Euclidean projection onto `{0 <= x <= u, sum x <= d}`.
fn project(x: &[f64], u: &[f64], d: f64) -> Vec<f64> {
    let clamp = |tau: f64| -> Vec<f64> { x.iter().zip(u).map(|(xi, ui)| (xi - tau).clamp(0.0, *ui)).collect() };
    let p = clamp(0.0);
    if p.iter().sum::<f64>() <= d {
        return p;
    }
    // sum clamp(x - tau) is piecewise linear and non-increasing in tau.
    let mut knots: Vec<f64> = x.iter().zip(u).flat_map(|(xi, ui)| [xi - ui, *xi]).filter(|t| *t > 0.0).collect();
    knots.push(0.0);
    knots.sort_by(f64::total_cmp);
    let total = |tau: f64| clamp(tau).iter().sum::<f64>();
    let mut lo = 0.0;
    for &t in &knots {
        if total(t) <= d {
            let (f_lo, f_hi) = (total(lo), total(t));
            let tau = if f_lo == f_hi { t } else { lo + (f_lo - d) * (t - lo) / (f_lo - f_hi) };
            return clamp(tau);
        }
        lo = t;
    }
    clamp(lo)
}

/// Reconstructs the exact optimum from the active set of an approximate one
/// and accepts it if it satisfies the optimality conditions.
fn polish(x: &[f64], vals: &[QuadraticValuation], cost: &CostModel, d: f64) -> Option<Vec<f64>> {
    let (cs, cc) = match *cost {
        CostModel::Linear { slope } => (slope, 0.0),
        CostModel::Quadratic { slope, curvature } => (slope, curvature),
    };
    let tol = 1e-7;
    let n = x.len();
    let at_lo: Vec<bool> = (0..n).map(|i| x[i] <= tol * vals[i].a_max).collect();
    let at_hi: Vec<bool> = (0..n).map(|i| x[i] >= (1.0 - tol) * vals[i].a_max).collect();
    let free: Vec<usize> = (0..n).filter(|&i| !at_lo[i] && !at_hi[i]).collect();
    let fixed_sum: f64 = (0..n).filter(|&i| at_hi[i]).map(|i| vals[i].a_max).sum();
    let binding = x.iter().sum::<f64>() >= d - tol * d.max(1.0);
    let w: Vec<f64> = free.iter().map(|&i| 1.0 / -vals[i].curvature).collect();
    let sw: f64 = w.iter().sum();
    let ssw: f64 = free.iter().zip(&w).map(|(&i, wi)| vals[i].slope * wi).sum();
    let lambda = if !free.is_empty() {
        if binding {
            (ssw - (d - fixed_sum)) / sw
        } else {
            (cs + 2.0 * cc * (fixed_sum + ssw)) / (1.0 + 2.0 * cc * sw)
        }
    } else if binding {
        (0..n).filter(|&i| at_lo[i]).map(|i| vals[i].slope).fold(cs + 2.0 * cc * fixed_sum, f64::max)
    } else {
        cs + 2.0 * cc * fixed_sum
    };
    let a: Vec<f64> = (0..n)
        .map(|i| {
            if at_lo[i] {
                0.0
            } else if at_hi[i] {
                vals[i].a_max
            } else {
                (vals[i].slope - lambda) / -vals[i].curvature
            }
        })
        .collect();
    let total: f64 = a.iter().sum();
    let eps = 1e-9 * (1.0 + lambda.abs());
    let ok = (0..n).all(|i| {
        let v = &vals[i];
        if at_lo[i] {
            v.slope <= lambda + eps
        } else if at_hi[i] {
            v.marginal(v.a_max) >= lambda - eps
        } else {
            a[i] >= 0.0 && a[i] <= v.a_max
        }
    }) && total <= d * (1.0 + 1e-12) + 1e-12
        && lambda >= cs + 2.0 * cc * total - eps
        && (binding || (lambda - (cs + 2.0 * cc * total)).abs() <= eps);
    ok.then_some(a)
}

/// Team optimum by accelerated projected gradient ascent followed by an
/// active-set reconstruction.
pub fn team_oracle(vals: &[QuadraticValuation], cost: &CostModel, d: f64) -> Vec<f64> {
    let n = vals.len();
    let u: Vec<f64> = vals.iter().map(|v| v.a_max).collect();
    let cc = match *cost {
        CostModel::Linear { .. } => 0.0,
        CostModel::Quadratic { curvature, .. } => curvature,
    };
    let lip = vals.iter().map(|v| -v.curvature).fold(0.0, f64::max) + 2.0 * cc * n as f64;
    let step = 1.0 / lip;
    let grad = |a: &[f64]| -> Vec<f64> {
        let m = cost.marginal(a.iter().sum());
        a.iter().zip(vals).map(|(ai, v)| v.marginal(*ai) - m).collect()
    };
    let mut x = project(&vec![0.0; n], &u, d);
    let mut y = x.clone();
    let mut t = 1.0f64;
    for _chunk in 0..200 {
        for _ in 0..500 {
            let g = grad(&y);
            let trial: Vec<f64> = y.iter().zip(&g).map(|(yi, gi)| yi + step * gi).collect();
            let next = project(&trial, &u, d);
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = next.iter().zip(&x).map(|(a, b)| a + (t - 1.0) / t_next * (a - b)).collect();
            x = next;
            t = t_next;
        }
        if let Some(a) = polish(&x, vals, cost, d) {
            return a;
        }
        // restart momentum
        y = x.clone();
        t = 1.0;
    }
    panic!("team oracle did not reach an optimal active set");
}

pub fn welfare_naive(a: &[f64], vals: &[QuadraticValuation], cost: &CostModel) -> f64 {
    let mut w = 0.0;
    let mut total = 0.0;
    for (ai, v) in a.iter().zip(vals) {
        w += 0.5 * v.curvature * ai * ai + v.slope * ai;
        total += ai;
    }
    w - cost.value(total)
}

/// Random strictly concave population with a convex cost and a capacity.
pub fn random_population<R: Rng>(rng: &mut R) -> (Vec<QuadraticValuation>, CostModel, f64) {
    let n = rng.random_range(5..=50);
    let vals: Vec<QuadraticValuation> = (0..n)
        .map(|_| QuadraticValuation::new(-rng.random_range(0.2..3.0), rng.random_range(0.5..4.0), rng.random_range(0.5..2.0)).unwrap())
        .collect();
    let slope = rng.random_range(0.0..2.0);
    let cost = if rng.random_bool(0.3) {
        CostModel::linear(slope)
    } else {
        CostModel::quadratic(slope, rng.random_range(0.0..0.1)).unwrap()
    };
    let total: f64 = vals.iter().map(|v| v.a_max).sum();
    let d = total * rng.random_range(0.05..1.1);
    (vals, cost, d)
}
