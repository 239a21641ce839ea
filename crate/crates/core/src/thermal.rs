//! Second-order equivalent-thermal-parameter (ETP) dynamics with hysteretic
//! on/off control, simulated exactly through one market period.
//!
//! Within a fixed power mode the state obeys `eta' = A eta + B_mode`, whose
//! solution is `eta(t) = e^{At} eta0 + A^{-1} (e^{At} - I) B_mode`. Deadband
//! crossings are located on that closed form, so the only numerical error is
//! the bisection tolerance on switching instants.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default thermostat deadband (full width), degrees F.
pub const DEFAULT_DEADBAND_F: f64 = 1.0;
/// Default market period: five minutes, in hours.
pub const DEFAULT_PERIOD_H: f64 = 5.0 / 60.0;

/// Resolution of the coarse crossing scan, as a fraction of the simulated interval.
const SCAN_STEPS: usize = 256;
/// Bisection tolerance on switching instants, hours.
const ROOT_TOL_H: f64 = 1e-9;
/// Upper bound on switches within one interval before declaring chattering.
const MAX_SWITCHES: usize = 10_000;
/// Below this eigenvalue-gap measure the series form of the exponential is used.
const SERIES_DISC: f64 = 1e-8;

const BTU_PER_KWH: f64 = 3412.14;

/// Exact exponential of a real 2x2 matrix.
///
/// Writes `M = s I + N` with `s = tr(M)/2`, so `N` is traceless and
/// `N^2 = disc I` where `disc = s^2 - det(M)` is the squared half-gap between
/// the eigenvalues. Then `e^N = c(disc) I + g(disc) N` with `c = cosh sqrt(disc)`,
/// `g = sinh sqrt(disc) / sqrt(disc)` (trigonometric for `disc < 0`), and the
/// repeated-eigenvalue case is covered by the Taylor form of `c` and `g`.
pub fn expm2(m: &Matrix2<f64>) -> Matrix2<f64> {
    let s = 0.5 * m.trace();
    let n = m - Matrix2::identity() * s;
    let disc = s * s - m.determinant();
    let (c, g) = if disc.abs() < SERIES_DISC {
        (
            1.0 + disc / 2.0 + disc * disc / 24.0,
            1.0 + disc / 6.0 + disc * disc / 120.0,
        )
    } else if disc > 0.0 {
        let r = disc.sqrt();
        (r.cosh(), r.sinh() / r)
    } else {
        let r = (-disc).sqrt();
        (r.cos(), r.sin() / r)
    };
    (Matrix2::identity() * c + n * g) * s.exp()
}

/// Per-period ETP parameters of one load (`phi_i = [A, B_on, B_off]` plus
/// deadband, rated power and the market period).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EtpParams {
    a: Matrix2<f64>,
    a_inv: Matrix2<f64>,
    b_on: Vector2<f64>,
    b_off: Vector2<f64>,
    deadband: f64,
    rated_power: f64,
    period: f64,
}

impl EtpParams {
    /// Validates invertibility and stability of `a`, and positivity of the scalars.
    pub fn new(
        a: Matrix2<f64>,
        b_on: Vector2<f64>,
        b_off: Vector2<f64>,
        deadband: f64,
        rated_power: f64,
        period: f64,
    ) -> Result<Self> {
        if !(deadband > 0.0 && rated_power > 0.0 && period > 0.0) {
            return Err(Error::InvalidParams(format!(
                "deadband, rated power and period must be positive (got {deadband}, {rated_power}, {period})"
            )));
        }
        if a.iter().chain(b_on.iter()).chain(b_off.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("non-finite ETP entry".into()));
        }
        if !is_hurwitz(&a) {
            return Err(Error::InvalidParams(format!("A is not Hurwitz: {a:?}")));
        }
        let a_inv = a
            .try_inverse()
            .ok_or_else(|| Error::InvalidParams("A is singular".into()))?;
        Ok(Self {
            a,
            a_inv,
            b_on,
            b_off,
            deadband,
            rated_power,
            period,
        })
    }

    pub fn a_matrix(&self) -> &Matrix2<f64> {
        &self.a
    }

    pub fn a_inverse(&self) -> &Matrix2<f64> {
        &self.a_inv
    }

    pub fn b_on(&self) -> &Vector2<f64> {
        &self.b_on
    }

    pub fn b_off(&self) -> &Vector2<f64> {
        &self.b_off
    }

    pub fn deadband(&self) -> f64 {
        self.deadband
    }

    pub fn rated_power(&self) -> f64 {
        self.rated_power
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    /// Same dynamics over a different horizon.
    pub fn with_period(mut self, period: f64) -> Result<Self> {
        if !(period >= 0.0) {
            return Err(Error::InvalidParams(format!("period must be >= 0, got {period}")));
        }
        self.period = period;
        Ok(self)
    }

    /// Energy drawn if the load stays on for the whole period (`E_m`), kWh.
    pub fn max_energy(&self) -> f64 {
        self.rated_power * self.period
    }

    pub fn drive(&self, on: bool) -> &Vector2<f64> {
        if on {
            &self.b_on
        } else {
            &self.b_off
        }
    }
}

/// Both eigenvalues of a real 2x2 matrix have negative real part.
pub fn is_hurwitz(a: &Matrix2<f64>) -> bool {
    a.trace() < 0.0 && a.determinant() > 0.0
}

/// Continuous temperatures (air, mass) and relay state of one load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridState {
    pub eta: [f64; 2],
    pub on: bool,
}

impl HybridState {
    pub fn new(air: f64, mass: f64, on: bool) -> Self {
        Self {
            eta: [air, mass],
            on,
        }
    }

    /// Observable air temperature `T_c`.
    pub fn air(&self) -> f64 {
        self.eta[0]
    }

    pub fn eta_vec(&self) -> Vector2<f64> {
        Vector2::new(self.eta[0], self.eta[1])
    }
}

/// Closed-form state after `dt` hours in a fixed power mode.
fn propagate_mode(eta: &Vector2<f64>, params: &EtpParams, on: bool, dt: f64) -> Vector2<f64> {
    let phi = expm2(&(params.a * dt));
    phi * eta + params.a_inv * ((phi - Matrix2::identity()) * params.drive(on))
}

/// `eta(t0 + dt)` under the mode selected by `state.on`.
pub fn propagate(state: &HybridState, params: &EtpParams, dt: f64) -> Vector2<f64> {
    debug_assert!(dt >= 0.0);
    propagate_mode(&state.eta_vec(), params, state.on, dt)
}

/// Applies the cooling-mode hysteresis rule at one instant.
pub fn hysteresis_step(state: &HybridState, setpoint: f64, params: &EtpParams) -> HybridState {
    let half = 0.5 * params.deadband;
    let t_c = state.air();
    let on = if t_c >= setpoint + half {
        true
    } else if t_c <= setpoint - half {
        false
    } else {
        state.on
    };
    HybridState { on, ..*state }
}

/// Air temperature at the end of the period if the load runs the whole time (`T_f`).
pub fn final_temp_if_on(state: &HybridState, params: &EtpParams) -> f64 {
    propagate_mode(&state.eta_vec(), params, true, params.period)[0]
}

/// Result of simulating the hybrid system over an interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeriodOutcome {
    pub state: HybridState,
    /// kWh.
    pub energy: f64,
    pub on_fraction: f64,
    pub switches: usize,
}

/// Simulates one full market period at a fixed setpoint.
pub fn simulate_period(state: &HybridState, setpoint: f64, params: &EtpParams) -> Result<PeriodOutcome> {
    simulate_interval(state, setpoint, params, params.period)
}

/// Simulates the hybrid trajectory for `duration` hours.
///
/// Hysteresis is applied at the start; each subsequent deadband crossing is
/// bracketed by a scan at `duration / 256` and refined by bisection on the
/// closed-form air temperature. Any number of switches is allowed.
pub fn simulate_interval(
    state: &HybridState,
    setpoint: f64,
    params: &EtpParams,
    duration: f64,
) -> Result<PeriodOutcome> {
    if !(duration >= 0.0) {
        return Err(Error::InvalidParams(format!("duration must be >= 0, got {duration}")));
    }
    let half = 0.5 * params.deadband;
    let mut on = hysteresis_step(state, setpoint, params).on;
    let mut eta = state.eta_vec();
    let mut t = 0.0;
    let mut on_time = 0.0;
    let mut switches = 0;
    let h = duration / SCAN_STEPS as f64;

    while t < duration {
        // Switching condition of the current mode.
        let crossed = |air: f64| {
            if on {
                air <= setpoint - half
            } else {
                air >= setpoint + half
            }
        };
        let step_phi = expm2(&(params.a * h));
        let step_affine = params.a_inv * ((step_phi - Matrix2::identity()) * params.drive(on));

        let mut seg_t = t;
        let mut seg_eta = eta;
        let mut bracket = None;
        loop {
            let remaining = duration - seg_t;
            let (next_t, next_eta) = if remaining >= h {
                (seg_t + h, step_phi * seg_eta + step_affine)
            } else {
                (duration, propagate_mode(&seg_eta, params, on, remaining))
            };
            if crossed(next_eta[0]) {
                bracket = Some((seg_t, seg_eta, next_t - seg_t));
                break;
            }
            if next_t >= duration {
                eta = next_eta;
                break;
            }
            seg_t = next_t;
            seg_eta = next_eta;
        }

        match bracket {
            None => {
                if on {
                    on_time += duration - t;
                }
                t = duration;
            }
            Some((t_a, eta_a, width)) => {
                if crossed(eta_a[0]) {
                    return Err(Error::NonConvergence(format!(
                        "crossing at t={t_a} h is not bracketed (air {})",
                        eta_a[0]
                    )));
                }
                let (mut lo, mut hi) = (0.0, width);
                while hi - lo > ROOT_TOL_H {
                    let mid = 0.5 * (lo + hi);
                    if crossed(propagate_mode(&eta_a, params, on, mid)[0]) {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                let t_switch = t_a + hi;
                eta = propagate_mode(&eta_a, params, on, hi);
                if on {
                    on_time += t_switch - t;
                }
                t = t_switch;
                on = !on;
                switches += 1;
                if switches > MAX_SWITCHES {
                    return Err(Error::NonConvergence(format!(
                        "more than {MAX_SWITCHES} switches in {duration} h"
                    )));
                }
            }
        }
    }

    let on_fraction = if duration > 0.0 {
        (on_time / duration).clamp(0.0, 1.0)
    } else {
        if on {
            1.0
        } else {
            0.0
        }
    };
    Ok(PeriodOutcome {
        state: HybridState {
            eta: [eta[0], eta[1]],
            on,
        },
        energy: params.rated_power * duration * on_fraction,
        on_fraction,
        switches,
    })
}

/// Minimum and maximum air temperature over `[0, period]` in a fixed mode.
pub fn air_extremes(state: &HybridState, params: &EtpParams, on: bool) -> (f64, f64) {
    let eta0 = state.eta_vec();
    let period = params.period;
    let h = period / SCAN_STEPS as f64;
    let phi = expm2(&(params.a * h));
    let affine = params.a_inv * ((phi - Matrix2::identity()) * params.drive(on));
    let air_at = |t: f64| propagate_mode(&eta0, params, on, t)[0];

    let mut samples = Vec::with_capacity(SCAN_STEPS + 1);
    let mut eta = eta0;
    samples.push(eta[0]);
    for _ in 0..SCAN_STEPS {
        eta = phi * eta + affine;
        samples.push(eta[0]);
    }
    let refine = |idx: usize, sign: f64| -> f64 {
        let lo_t = idx.saturating_sub(1) as f64 * h;
        let hi_t = ((idx + 1).min(SCAN_STEPS)) as f64 * h;
        golden_max(|t| sign * air_at(t), lo_t, hi_t) * sign
    };
    let (mut imin, mut imax) = (0, 0);
    for (i, v) in samples.iter().enumerate() {
        if *v < samples[imin] {
            imin = i;
        }
        if *v > samples[imax] {
            imax = i;
        }
    }
    let min = refine(imin, -1.0).min(samples[imin]);
    let max = refine(imax, 1.0).max(samples[imax]);
    (min, max)
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..60 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    fc.max(fd)
}

/// Period energy as a function of setpoint for one load in a given state.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyFn {
    /// `E_m`, kWh.
    pub e_max: f64,
    /// End-of-period air temperature if on throughout, F.
    pub t_f: f64,
    /// (setpoint F, energy kWh), ascending in setpoint.
    pub samples: Vec<(f64, f64)>,
}

impl EnergyFn {
    /// Linear interpolation between samples; clamps outside the grid.
    pub fn energy_at(&self, setpoint: f64) -> f64 {
        let s = &self.samples;
        match s.len() {
            0 => f64::NAN,
            1 => s[0].1,
            _ => {
                if setpoint <= s[0].0 {
                    return s[0].1;
                }
                if setpoint >= s[s.len() - 1].0 {
                    return s[s.len() - 1].1;
                }
                let j = s.partition_point(|(u, _)| *u <= setpoint);
                let (u0, e0) = s[j - 1];
                let (u1, e1) = s[j];
                e0 + (e1 - e0) * (setpoint - u0) / (u1 - u0)
            }
        }
    }
}

/// Evaluates the period energy on a setpoint grid.
///
/// When the load is on, the grid splits into three regions: always on below
/// `T_f + delta/2` (`E_m`), immediately off at or above `T_c + delta/2` (zero
/// if the off drift never re-crosses), and a partial-duty region in between.
pub fn energy_function(state: &HybridState, params: &EtpParams, setpoint_grid: &[f64]) -> Result<EnergyFn> {
    if setpoint_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidParams("setpoint grid must be ascending".into()));
    }
    let samples = setpoint_grid
        .iter()
        .map(|&u| simulate_period(state, u, params).map(|o| (u, o.energy)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EnergyFn {
        e_max: params.max_energy(),
        t_f: final_temp_if_on(state, params),
        samples,
    })
}

/// Weather-driven ETP model of one house: the drive term depends on the
/// exogenous input `zeta = [outdoor F, solar gain Btu/h]` as
/// `B_mode = G zeta + h_mode`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildingModel {
    pub a: Matrix2<f64>,
    pub exog_gain: Matrix2<f64>,
    pub drive_on: Vector2<f64>,
    pub drive_off: Vector2<f64>,
    pub deadband: f64,
    /// kW.
    pub rated_power: f64,
}

impl BuildingModel {
    pub fn etp_params(&self, zeta: &Vector2<f64>, period: f64) -> Result<EtpParams> {
        let g = self.exog_gain * zeta;
        EtpParams::new(
            self.a,
            g + self.drive_on,
            g + self.drive_off,
            self.deadband,
            self.rated_power,
            period,
        )
    }
}

/// Lumped physical description of a house in GridLAB-D style units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalHouse {
    /// Envelope conductance, Btu/(h F).
    pub ua: f64,
    /// Air-mass conductance, Btu/(h F).
    pub hm: f64,
    /// Air heat capacity, Btu/F.
    pub ca: f64,
    /// Mass heat capacity, Btu/F.
    pub cm: f64,
    /// Cooling capacity, Btu/h.
    pub hvac_btu_per_h: f64,
    pub cop: f64,
    /// Multiplier on the weather file's solar gain.
    pub solar_scale: f64,
    /// Fraction of solar gain deposited in the air node.
    pub solar_air_fraction: f64,
    /// Btu/h.
    pub internal_gain: f64,
}

impl PhysicalHouse {
    pub fn rated_power_kw(&self) -> f64 {
        self.hvac_btu_per_h / (self.cop * BTU_PER_KWH)
    }

    pub fn to_model(&self, deadband: f64) -> BuildingModel {
        let a = Matrix2::new(
            -(self.ua + self.hm) / self.ca,
            self.hm / self.ca,
            self.hm / self.cm,
            -self.hm / self.cm,
        );
        let fa = self.solar_air_fraction;
        let exog_gain = Matrix2::new(
            self.ua / self.ca,
            fa * self.solar_scale / self.ca,
            0.0,
            (1.0 - fa) * self.solar_scale / self.cm,
        );
        BuildingModel {
            a,
            exog_gain,
            drive_on: Vector2::new((self.internal_gain - self.hvac_btu_per_h) / self.ca, 0.0),
            drive_off: Vector2::new(self.internal_gain / self.ca, 0.0),
            deadband,
            rated_power: self.rated_power_kw(),
        }
    }
}
