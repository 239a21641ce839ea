//! Output-based bidding: joint state and parameter estimation for the
//! uncertain discrete ETP model
//!
//! ```text
//! eta_k = A eta_{k-1} + B zeta_{k-1} + C(q_{k-1}) + w_{k-1},   w ~ N(0, Omega)
//! y_k   = L eta_k + v_k,                                       v ~ N(0, Sigma)
//! ```
//!
//! with `L = [1, 0]` (only the air temperature is measured) and
//! `eta_0 ~ N(m0, Phi0)`. Parameters are fitted by EM: a Kalman filter and
//! RTS smoother give the posterior over the state path, and a closed-form
//! M-step maximizes the expected complete-data log-likelihood.
//!
//! Indexing is zero based. Transition `k-1 -> k` uses `modes[k-1]` and
//! `exog[k-1]`.

use std::path::Path;

use nalgebra::{DMatrix, Matrix2, RowVector2, SymmetricEigen, Vector2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::agent::{step_bid, Bid, LoadId, PriceStats, SetpointThresholds, UserPrefs};
use crate::error::{Error, Result};
use crate::thermal::{expm2, BuildingModel};

/// Eigenvalue floor applied to every covariance estimate.
pub const COV_FLOOR: f64 = 1e-12;
/// Sampling interval of measurement logs, hours.
pub const SAMPLE_H: f64 = 1.0 / 60.0;
/// Six hours of one-minute samples.
pub const DEFAULT_LOG_LEN: usize = 360;
/// One-minute steps per market period.
pub const STEPS_PER_PERIOD: usize = 5;

const RANK_TOL: f64 = 1e-12;
const LOGLIK_JITTER: f64 = 1e-9;

fn l_row() -> RowVector2<f64> {
    RowVector2::new(1.0, 0.0)
}

mod rows {
    //! Serde helpers writing matrices row by row.
    use nalgebra::{Matrix2, Vector2};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub mod mat {
        use super::*;
        pub fn serialize<S: Serializer>(m: &Matrix2<f64>, s: S) -> Result<S::Ok, S::Error> {
            [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]].serialize(s)
        }
        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix2<f64>, D::Error> {
            let r = <[[f64; 2]; 2]>::deserialize(d)?;
            Ok(Matrix2::new(r[0][0], r[0][1], r[1][0], r[1][1]))
        }
    }

    pub mod vec {
        use super::*;
        pub fn serialize<S: Serializer>(v: &Vector2<f64>, s: S) -> Result<S::Ok, S::Error> {
            [v[0], v[1]].serialize(s)
        }
        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector2<f64>, D::Error> {
            let r = <[f64; 2]>::deserialize(d)?;
            Ok(Vector2::new(r[0], r[1]))
        }
    }
}

/// Parameters `[A, B, C_on, C_off, Omega, Sigma, m0, Phi0]` of the discrete model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertainModel {
    #[serde(with = "rows::mat")]
    pub a_bar: Matrix2<f64>,
    #[serde(with = "rows::mat")]
    pub b_bar: Matrix2<f64>,
    #[serde(with = "rows::vec")]
    pub c_on: Vector2<f64>,
    #[serde(with = "rows::vec")]
    pub c_off: Vector2<f64>,
    #[serde(with = "rows::mat")]
    pub q_cov: Matrix2<f64>,
    pub r_var: f64,
    #[serde(with = "rows::vec")]
    pub m0: Vector2<f64>,
    #[serde(with = "rows::mat")]
    pub p0: Matrix2<f64>,
}

impl UncertainModel {
    /// Exact zero-order-hold discretization of a building model over `dt` hours.
    pub fn discretize(
        model: &BuildingModel,
        dt: f64,
        q_cov: Matrix2<f64>,
        r_var: f64,
        m0: Vector2<f64>,
        p0: Matrix2<f64>,
    ) -> Result<Self> {
        let a_bar = expm2(&(model.a * dt));
        let a_inv = model
            .a
            .try_inverse()
            .ok_or_else(|| Error::InvalidParams("A is singular".into()))?;
        let gamma = a_inv * (a_bar - Matrix2::identity());
        let m = Self {
            a_bar,
            b_bar: gamma * model.exog_gain,
            c_on: gamma * model.drive_on,
            c_off: gamma * model.drive_off,
            q_cov,
            r_var,
            m0,
            p0,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("q_cov", &self.q_cov), ("p0", &self.p0)] {
            if (m[(0, 1)] - m[(1, 0)]).abs() > 1e-9 * m.abs().max().max(1.0) {
                return Err(Error::InvalidParams(format!("{name} is not symmetric")));
            }
            let ev = SymmetricEigen::new(*m).eigenvalues;
            if ev.min() < -1e-12 * ev.amax().max(1.0) {
                return Err(Error::InvalidParams(format!("{name} is not PSD (eigenvalues {ev:?})")));
            }
        }
        if !(self.r_var >= 0.0) {
            return Err(Error::InvalidParams(format!("r_var must be >= 0, got {}", self.r_var)));
        }
        let finite = self.a_bar.iter().chain(self.b_bar.iter()).chain(self.c_on.iter()).chain(self.c_off.iter()).all(|x| x.is_finite());
        if !finite {
            return Err(Error::InvalidParams("non-finite model coefficient".into()));
        }
        Ok(())
    }

    pub fn c_for(&self, on: bool) -> &Vector2<f64> {
        if on {
            &self.c_on
        } else {
            &self.c_off
        }
    }

    /// Deterministic part of the transition out of step `k`.
    fn drift(&self, log: &MeasurementLog, k: usize) -> Vector2<f64> {
        self.b_bar * log.exog[k] + self.c_for(log.modes[k])
    }
}

/// Air-temperature measurements with the relay state and exogenous input at each sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementLog {
    pub temps: Vec<f64>,
    pub modes: Vec<bool>,
    /// `[outdoor F, solar gain Btu/h]`.
    pub exog: Vec<Vector2<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LogRow {
    minute_index: usize,
    #[serde(rename = "temp_F")]
    temp_f: f64,
    mode_on: u8,
    #[serde(rename = "outdoor_F")]
    outdoor_f: f64,
    solar_gain: f64,
}

impl MeasurementLog {
    pub fn new(temps: Vec<f64>, modes: Vec<bool>, exog: Vec<Vector2<f64>>) -> Result<Self> {
        if temps.len() != modes.len() || temps.len() != exog.len() {
            return Err(Error::InvalidParams(format!(
                "log lengths differ: temps {}, modes {}, exog {}",
                temps.len(),
                modes.len(),
                exog.len()
            )));
        }
        if temps.len() < 3 {
            return Err(Error::InvalidParams(format!("log needs at least 3 samples, got {}", temps.len())));
        }
        Ok(Self { temps, modes, exog })
    }

    pub fn len(&self) -> usize {
        self.temps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.temps.is_empty()
    }

    /// Last `n` samples (all of them if shorter).
    pub fn tail(&self, n: usize) -> Result<Self> {
        let s = self.len().saturating_sub(n);
        Self::new(self.temps[s..].to_vec(), self.modes[s..].to_vec(), self.exog[s..].to_vec())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let shown = path.display().to_string();
        let mut rdr = csv::Reader::from_path(path)?;
        let expected = ["minute_index", "temp_F", "mode_on", "outdoor_F", "solar_gain"];
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::schema(&shown, format!("expected header {}, got {}", expected.join(","), headers.iter().collect::<Vec<_>>().join(","))));
        }
        let (mut temps, mut modes, mut exog) = (vec![], vec![], vec![]);
        for (i, row) in rdr.deserialize::<LogRow>().enumerate() {
            let row = row.map_err(|e| Error::schema(&shown, format!("row {}: {e}", i + 1)))?;
            if row.minute_index != i {
                return Err(Error::DataGap {
                    path: shown,
                    timestamp: format!("minute {i}"),
                });
            }
            if row.mode_on > 1 {
                return Err(Error::schema(&shown, format!("row {}: mode_on must be 0 or 1", i + 1)));
            }
            temps.push(row.temp_f);
            modes.push(row.mode_on == 1);
            exog.push(Vector2::new(row.outdoor_f, row.solar_gain));
        }
        if temps.len() < 3 {
            return Err(Error::schema(&shown, format!("log needs at least 3 samples, got {}", temps.len())));
        }
        Self::new(temps, modes, exog)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for k in 0..self.len() {
            w.serialize(LogRow {
                minute_index: k,
                temp_f: self.temps[k],
                mode_on: self.modes[k] as u8,
                outdoor_f: self.exog[k][0],
                solar_gain: self.exog[k][1],
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Forward pass output.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    /// `mu_k`, filtered means.
    pub means: Vec<Vector2<f64>>,
    /// `Phi_k`, filtered covariances.
    pub covs: Vec<Matrix2<f64>>,
    /// `P_k = A Phi_k A^T + Omega` for `k = 0..M-1` (prediction out of step `k`).
    pub predicted: Vec<Matrix2<f64>>,
    /// `K_k` for every step, including the initial update.
    pub gains: Vec<Vector2<f64>>,
    /// `ln p(y_0..y_{M-1})` from the innovations.
    pub loglik: f64,
}

/// Kalman filter started from `eta_0 ~ N(m0, Phi0)`.
pub fn kalman_filter(model: &UncertainModel, log: &MeasurementLog) -> Result<FilterOutput> {
    let m = log.len();
    let l = l_row();
    let mut out = FilterOutput {
        means: Vec::with_capacity(m),
        covs: Vec::with_capacity(m),
        predicted: Vec::with_capacity(m.saturating_sub(1)),
        gains: Vec::with_capacity(m),
        loglik: 0.0,
    };
    let mut prior_mean = model.m0;
    let mut prior_cov = model.p0;
    for k in 0..m {
        if k > 0 {
            let prev_mean = out.means[k - 1];
            let p = model.a_bar * out.covs[k - 1] * model.a_bar.transpose() + model.q_cov;
            prior_mean = model.a_bar * prev_mean + model.drift(log, k - 1);
            prior_cov = p;
            out.predicted.push(p);
        }
        let s = (l * prior_cov * l.transpose())[0] + model.r_var;
        if model.r_var == 0.0 && s.abs() <= COV_FLOOR {
            // Noise-free model whose prediction is already certain: nothing to update.
            out.means.push(prior_mean);
            out.covs.push(symmetrize(prior_cov));
            out.gains.push(Vector2::zeros());
            continue;
        }
        if !(s > 0.0) {
            return Err(Error::NumericalBreakdown { step: k });
        }
        let gain = prior_cov * l.transpose() / s;
        let innov = log.temps[k] - (l * prior_mean)[0];
        out.loglik += -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + innov * innov / s);
        out.means.push(prior_mean + gain * innov);
        out.covs.push(symmetrize((Matrix2::identity() - gain * l) * prior_cov));
        out.gains.push(gain);
    }
    Ok(out)
}

/// Posterior over the state path given the whole log.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedPosterior {
    /// `E[eta_k | Y]`.
    pub means: Vec<Vector2<f64>>,
    /// `Cov[eta_k | Y]`.
    pub covs: Vec<Matrix2<f64>>,
    /// `pairwise[k-1] = E[eta_k eta_{k-1}^T | Y]` for `k = 1..M`.
    pub pairwise: Vec<Matrix2<f64>>,
    pub loglik: f64,
}

impl SmoothedPosterior {
    /// `E[eta_k eta_k^T | Y]`.
    pub fn second_moment(&self, k: usize) -> Matrix2<f64> {
        self.covs[k] + self.means[k] * self.means[k].transpose()
    }
}

/// Rauch-Tung-Striebel backward pass with smoother gains `J_k = Phi_k A^T P_k^{-1}`.
pub fn kalman_smoother(filter: &FilterOutput, model: &UncertainModel, log: &MeasurementLog) -> Result<SmoothedPosterior> {
    let m = filter.means.len();
    if m != log.len() || filter.covs.len() != m || filter.predicted.len() + 1 != m {
        return Err(Error::InvalidParams("filter output does not match the log".into()));
    }
    let mut means = filter.means.clone();
    let mut covs = filter.covs.clone();
    let mut gains = vec![Matrix2::zeros(); m.saturating_sub(1)];
    for k in (0..m - 1).rev() {
        let p = filter.predicted[k];
        let p_inv = invert_spd(&p).ok_or(Error::SingularPrediction { step: k })?;
        let j = filter.covs[k] * model.a_bar.transpose() * p_inv;
        let pred_mean = model.a_bar * filter.means[k] + model.drift(log, k);
        means[k] = filter.means[k] + j * (means[k + 1] - pred_mean);
        covs[k] = symmetrize(filter.covs[k] + j * (covs[k + 1] - p) * j.transpose());
        gains[k] = j;
    }
    let pairwise = (1..m)
        .map(|k| covs[k] * gains[k - 1].transpose() + means[k] * means[k - 1].transpose())
        .collect();
    Ok(SmoothedPosterior {
        means,
        covs,
        pairwise,
        loglik: filter.loglik,
    })
}

/// Filter then smoother.
pub fn e_step(model: &UncertainModel, log: &MeasurementLog) -> Result<SmoothedPosterior> {
    let f = kalman_filter(model, log)?;
    kalman_smoother(&f, model, log)
}

fn invert_spd(p: &Matrix2<f64>) -> Option<Matrix2<f64>> {
    let det = p.determinant();
    let scale = p.abs().max();
    if !(det > RANK_TOL * scale * scale) {
        return None;
    }
    p.try_inverse()
}

fn symmetrize(m: Matrix2<f64>) -> Matrix2<f64> {
    0.5 * (m + m.transpose())
}

/// Symmetrizes and raises eigenvalues to at least [`COV_FLOOR`].
pub fn floor_cov(m: Matrix2<f64>) -> Matrix2<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let d = eig.eigenvalues.map(|x| x.max(COV_FLOOR));
    symmetrize(eig.eigenvectors * Matrix2::from_diagonal(&d) * eig.eigenvectors.transpose())
}

/// Handling of singular normal equations in the M-step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankPolicy {
    /// Report [`Error::RankDeficient`].
    #[default]
    Error,
    /// Update only the identifiable directions and keep the previous values elsewhere.
    HoldPrevious,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MStepOptions {
    /// Solve `A, B, C_on, C_off` as one least-squares problem instead of the
    /// sequential `A -> B -> C` order.
    pub joint: bool,
    pub rank: RankPolicy,
}

/// Solves `X S = R` for symmetric PSD `S`.
///
/// The rank test runs on the unit-diagonal rescaling of `S`, so regressors on
/// very different scales (degrees vs. Btu/h vs. indicators) are not mistaken
/// for collinear ones.
fn solve_normal(r: &DMatrix<f64>, s: &DMatrix<f64>, prev: &DMatrix<f64>, policy: RankPolicy, what: &'static str) -> Result<DMatrix<f64>> {
    let n = s.nrows();
    let d = DMatrix::from_diagonal(&s.diagonal().map(|x| if x > 0.0 { 1.0 / x.sqrt() } else { 0.0 }));
    let s_scaled = &d * s * &d;
    let eig = SymmetricEigen::new(s_scaled.clone());
    let top = eig.eigenvalues.amax();
    let tol = RANK_TOL * top.max(f64::MIN_POSITIVE) * n as f64;
    let deficient = top == 0.0 || eig.eigenvalues.iter().any(|&x| x <= tol);
    if !deficient {
        let chol = s_scaled.cholesky().ok_or(Error::RankDeficient(what))?;
        // X = (R D) S_scaled^{-1} D
        return Ok(chol.solve(&(&d * r.transpose())).transpose() * &d);
    }
    match policy {
        RankPolicy::Error => Err(Error::RankDeficient(what)),
        RankPolicy::HoldPrevious => {
            // X = X_prev + (R - X_prev S) S^+ keeps X_prev on the null space of S.
            let inv = eig.eigenvalues.map(|x| if x > tol { 1.0 / x } else { 0.0 });
            let pinv_scaled = &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose();
            Ok(prev + (r - prev * s) * (&d * pinv_scaled * &d))
        }
    }
}

fn to_dm(m: &Matrix2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(2, 2, |i, j| m[(i, j)])
}

fn from_dm(m: &DMatrix<f64>) -> Matrix2<f64> {
    Matrix2::new(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)])
}

/// Closed-form parameter update from the smoothed posterior computed under `prev`.
pub fn m_step(post: &SmoothedPosterior, log: &MeasurementLog, prev: &UncertainModel, opts: &MStepOptions) -> Result<UncertainModel> {
    let m = log.len();
    if post.means.len() != m {
        return Err(Error::InvalidParams("posterior does not match the log".into()));
    }
    let mut next = *prev;
    next.m0 = post.means[0];
    next.p0 = floor_cov(post.covs[0]);

    if opts.joint {
        joint_linear_update(post, log, prev, opts.rank, &mut next)?;
    } else {
        sequential_linear_update(post, log, prev, opts.rank, &mut next)?;
    }

    // Expected outer product of the transition residuals under the new linear parameters.
    let mut omega = Matrix2::zeros();
    for k in 1..m {
        let a = next.a_bar;
        let d = next.drift(log, k - 1);
        let (mk, mp) = (post.means[k], post.means[k - 1]);
        let e_kp = post.pairwise[k - 1];
        omega += post.second_moment(k) - e_kp * a.transpose() - a * e_kp.transpose() + a * post.second_moment(k - 1) * a.transpose()
            - d * mk.transpose()
            - mk * d.transpose()
            + a * mp * d.transpose()
            + d * mp.transpose() * a.transpose()
            + d * d.transpose();
    }
    next.q_cov = floor_cov(omega / (m - 1) as f64);

    let mut sigma = 0.0;
    for k in 0..m {
        let y = log.temps[k];
        sigma += y * y - 2.0 * y * post.means[k][0] + post.second_moment(k)[(0, 0)];
    }
    next.r_var = (sigma / m as f64).max(COV_FLOOR);
    Ok(next)
}

fn sequential_linear_update(post: &SmoothedPosterior, log: &MeasurementLog, prev: &UncertainModel, rank: RankPolicy, next: &mut UncertainModel) -> Result<()> {
    let m = log.len();
    // A' with the previous B and C.
    let mut num = Matrix2::zeros();
    let mut den = Matrix2::zeros();
    for k in 1..m {
        let d_old = prev.drift(log, k - 1);
        num += post.pairwise[k - 1] - d_old * post.means[k - 1].transpose();
        den += post.second_moment(k - 1);
    }
    next.a_bar = from_dm(&solve_normal(&to_dm(&num), &to_dm(&den), &to_dm(&prev.a_bar), rank, "sum of E[eta eta^T]")?);

    // B' with A' and the previous C.
    let mut num = Matrix2::zeros();
    let mut den = Matrix2::zeros();
    for k in 1..m {
        let z = log.exog[k - 1];
        let resid = post.means[k] - next.a_bar * post.means[k - 1] - prev.c_for(log.modes[k - 1]);
        num += resid * z.transpose();
        den += z * z.transpose();
    }
    next.b_bar = from_dm(&solve_normal(&to_dm(&num), &to_dm(&den), &to_dm(&prev.b_bar), rank, "sum of zeta zeta^T")?);

    // C' per mode with A', B'; an empty partition keeps its previous value.
    let (mut sum_on, mut n_on, mut sum_off, mut n_off) = (Vector2::zeros(), 0usize, Vector2::zeros(), 0usize);
    for k in 1..m {
        let resid = post.means[k] - next.a_bar * post.means[k - 1] - next.b_bar * log.exog[k - 1];
        if log.modes[k - 1] {
            sum_on += resid;
            n_on += 1;
        } else {
            sum_off += resid;
            n_off += 1;
        }
    }
    if n_on > 0 {
        next.c_on = sum_on / n_on as f64;
    }
    if n_off > 0 {
        next.c_off = sum_off / n_off as f64;
    }
    Ok(())
}

/// Regresses `eta_k` on `[eta_{k-1}, zeta_{k-1}, 1{on}, 1{off}]` in one solve.
fn joint_linear_update(post: &SmoothedPosterior, log: &MeasurementLog, prev: &UncertainModel, rank: RankPolicy, next: &mut UncertainModel) -> Result<()> {
    let m = log.len();
    let has_on = log.modes[..m - 1].iter().any(|&q| q);
    let has_off = log.modes[..m - 1].iter().any(|&q| !q);
    let mut cols: Vec<usize> = (0..4).collect();
    if has_on {
        cols.push(4);
    }
    if has_off {
        cols.push(5);
    }
    let n = cols.len();
    let mut s = DMatrix::zeros(6, 6);
    let mut r = DMatrix::zeros(2, 6);
    for k in 1..m {
        let mp = post.means[k - 1];
        let z = log.exog[k - 1];
        let ind = if log.modes[k - 1] { (1.0, 0.0) } else { (0.0, 1.0) };
        let x = [mp[0], mp[1], z[0], z[1], ind.0, ind.1];
        let mut sxx = DMatrix::from_fn(6, 6, |i, j| x[i] * x[j]);
        let e = post.second_moment(k - 1);
        for i in 0..2 {
            for j in 0..2 {
                sxx[(i, j)] = e[(i, j)];
            }
        }
        s += sxx;
        let mut rx = DMatrix::from_fn(2, 6, |i, j| post.means[k][i] * x[j]);
        let pw = post.pairwise[k - 1];
        for i in 0..2 {
            for j in 0..2 {
                rx[(i, j)] = pw[(i, j)];
            }
        }
        r += rx;
    }
    let s_sub = DMatrix::from_fn(n, n, |i, j| s[(cols[i], cols[j])]);
    let r_sub = DMatrix::from_fn(2, n, |i, j| r[(i, cols[j])]);
    let theta_prev = [
        prev.a_bar.column(0).into_owned(),
        prev.a_bar.column(1).into_owned(),
        prev.b_bar.column(0).into_owned(),
        prev.b_bar.column(1).into_owned(),
        prev.c_on,
        prev.c_off,
    ];
    let prev_sub = DMatrix::from_fn(2, n, |i, j| theta_prev[cols[j]][i]);
    let theta = solve_normal(&r_sub, &s_sub, &prev_sub, rank, "joint regressor second moment")?;
    let mut full = theta_prev;
    for (j, &c) in cols.iter().enumerate() {
        full[c] = Vector2::new(theta[(0, j)], theta[(1, j)]);
    }
    next.a_bar = Matrix2::from_columns(&[full[0], full[1]]);
    next.b_bar = Matrix2::from_columns(&[full[2], full[3]]);
    next.c_on = full[4];
    next.c_off = full[5];
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub max_iters: usize,
    /// Relative log-likelihood improvement below which the fit stops.
    pub tol: f64,
    pub m_step: MStepOptions,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-8,
            m_step: MStepOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub model: UncertainModel,
    /// Log-likelihood of the initial model followed by one entry per M-step.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// The trace decreased by more than the jitter allowance at least once.
    pub non_monotone: bool,
    /// Smoothed posterior under the returned model.
    pub posterior: SmoothedPosterior,
}

/// Alternates E- and M-steps until the relative log-likelihood change drops below `tol`.
pub fn em_fit(log: &MeasurementLog, init: &UncertainModel, opts: &EmOptions) -> Result<EmFit> {
    init.validate()?;
    let mut model = *init;
    let mut post = e_step(&model, log)?;
    let mut trace = vec![post.loglik];
    let mut converged = false;
    let mut non_monotone = false;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        let next = m_step(&post, log, &model, &opts.m_step)?;
        let next_post = e_step(&next, log)?;
        iterations += 1;
        let (old, new) = (post.loglik, next_post.loglik);
        if new < old - LOGLIK_JITTER * old.abs().max(1.0) {
            non_monotone = true;
            log::warn!("EM log-likelihood decreased at iteration {iterations}: {old} -> {new}");
        }
        trace.push(new);
        model = next;
        post = next_post;
        if (new - old).abs() <= opts.tol * old.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    Ok(EmFit {
        model,
        loglik_trace: trace,
        iterations,
        converged,
        non_monotone,
        posterior: post,
    })
}

/// Bid thresholds from the discrete model, starting at the estimated current
/// state: the on-mode recursion is rolled `steps` samples forward with the
/// exogenous input held at its last value.
pub fn estimated_thresholds(model: &UncertainModel, eta: &Vector2<f64>, on: bool, zeta: &Vector2<f64>, deadband: f64, steps: usize) -> SetpointThresholds {
    let half = 0.5 * deadband;
    let roll = |c: &Vector2<f64>| {
        let drive = model.b_bar * zeta + c;
        let mut x = *eta;
        let mut airs = Vec::with_capacity(steps + 1);
        airs.push(x[0]);
        for _ in 0..steps {
            x = model.a_bar * x + drive;
            airs.push(x[0]);
        }
        airs
    };
    let on_path = roll(&model.c_on);
    let t_f_half = on_path[steps] + half;
    let t_c = eta[0];
    if on {
        SetpointThresholds {
            u1: t_c + half,
            u2: t_f_half,
        }
    } else {
        let max_off = roll(&model.c_off).into_iter().fold(f64::MIN, f64::max);
        SetpointThresholds {
            u1: max_off - half,
            u2: (t_c - half).min(t_f_half),
        }
    }
}

/// Step bid from a fitted model, using the smoothed state at the last sample.
#[allow(clippy::too_many_arguments)]
pub fn bid_from_estimate(
    load_id: LoadId,
    model: &UncertainModel,
    log: &MeasurementLog,
    deadband: f64,
    prefs: &UserPrefs,
    stats: &PriceStats,
    q_measured: f64,
) -> Result<(Bid, SetpointThresholds)> {
    let post = e_step(model, log)?;
    let last = log.len() - 1;
    let th = estimated_thresholds(model, &post.means[last], log.modes[last], &log.exog[last], deadband, STEPS_PER_PERIOD);
    Ok((step_bid(load_id, &th, prefs, stats, q_measured)?, th))
}

/// Noise family for synthetic logs; both have the covariances of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    Gaussian,
    /// Independent uniform components scaled to the same covariance.
    Uniform,
}

fn unit_noise<R: Rng + ?Sized>(rng: &mut R, kind: NoiseKind) -> f64 {
    match kind {
        NoiseKind::Gaussian => StandardNormal.sample(rng),
        NoiseKind::Uniform => rng.random_range(-3f64.sqrt()..=3f64.sqrt()),
    }
}

fn cov_factor(m: &Matrix2<f64>) -> Matrix2<f64> {
    let eig = SymmetricEigen::new(symmetrize(*m));
    let d = eig.eigenvalues.map(|x| x.max(0.0).sqrt());
    eig.eigenvectors * Matrix2::from_diagonal(&d)
}

/// A simulated log together with the true state path.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLog {
    pub log: MeasurementLog,
    pub states: Vec<Vector2<f64>>,
}

/// Simulates the discrete model under thermostat control at `setpoint`.
///
/// The relay follows the hysteresis rule on the true air temperature; the
/// state starts at `m0` (the initial-state noise is not drawn).
pub fn synthesize_log<R: Rng + ?Sized>(
    model: &UncertainModel,
    exog: &[Vector2<f64>],
    setpoint: f64,
    deadband: f64,
    init_on: bool,
    noise: NoiseKind,
    rng: &mut R,
) -> Result<SyntheticLog> {
    let half = 0.5 * deadband;
    let wf = cov_factor(&model.q_cov);
    let vf = model.r_var.max(0.0).sqrt();
    let mut x = model.m0;
    let mut on = init_on;
    let (mut temps, mut modes, mut states) = (vec![], vec![], vec![]);
    for k in 0..exog.len() {
        if k > 0 {
            let w = wf * Vector2::new(unit_noise(rng, noise), unit_noise(rng, noise));
            x = model.a_bar * x + model.b_bar * exog[k - 1] + model.c_for(on) + w;
        }
        if x[0] >= setpoint + half {
            on = true;
        } else if x[0] <= setpoint - half {
            on = false;
        }
        states.push(x);
        modes.push(on);
        temps.push(x[0] + vf * unit_noise(rng, noise));
    }
    Ok(SyntheticLog {
        log: MeasurementLog::new(temps, modes, exog.to_vec())?,
        states,
    })
}
