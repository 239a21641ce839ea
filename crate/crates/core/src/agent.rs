//! Household side of the market: preferences, the bidding curve and its
//! inverse (the price response), the two-scalar step bid, and the quadratic
//! comfort valuation used for welfare accounting.

use std::collections::VecDeque;
use std::fmt;

use nalgebra::RowVector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::thermal::{self, expm2, EtpParams, HybridState};

/// Largest admissible slider value.
pub const K_MAX: f64 = 3.0;
/// Default slider value.
pub const DEFAULT_K: f64 = 1.0;
/// Price history window: one day of five-minute periods.
pub const DEFAULT_WINDOW: usize = 288;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LoadId(pub u32);

impl fmt::Display for LoadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Thermostat settings entered by the user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserPrefs {
    pub t_min: f64,
    pub t_desired: f64,
    pub t_max: f64,
    pub k_slider: f64,
}

impl UserPrefs {
    pub fn new(t_min: f64, t_desired: f64, t_max: f64, k_slider: f64) -> Result<Self> {
        if !(t_min <= t_desired && t_desired <= t_max) {
            return Err(Error::InvalidParams(format!(
                "need t_min <= t_desired <= t_max, got {t_min}, {t_desired}, {t_max}"
            )));
        }
        if !(0.0..=K_MAX).contains(&k_slider) {
            return Err(Error::InvalidParams(format!("k_slider {k_slider} outside [0, {K_MAX}]")));
        }
        Ok(Self {
            t_min,
            t_desired,
            t_max,
            k_slider,
        })
    }
}

/// Rolling statistics of recent clearing prices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceStats {
    pub p_avg: f64,
    pub p_sigma: f64,
    pub window: usize,
}

impl PriceStats {
    pub fn new(p_avg: f64, p_sigma: f64, window: usize) -> Result<Self> {
        if !(p_sigma >= 0.0) || window == 0 || !p_avg.is_finite() {
            return Err(Error::InvalidParams(format!(
                "bad price stats: avg {p_avg}, sigma {p_sigma}, window {window}"
            )));
        }
        Ok(Self {
            p_avg,
            p_sigma,
            window,
        })
    }

    /// Population mean and standard deviation of a price sample.
    pub fn from_prices(prices: &[f64], window: usize) -> Result<Self> {
        if prices.is_empty() {
            return Err(Error::InvalidParams("empty price sample".into()));
        }
        let n = prices.len() as f64;
        let mean = prices.iter().sum::<f64>() / n;
        let var = prices.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n;
        Self::new(mean, var.sqrt(), window)
    }
}

/// Clearing-price history; reports the seed statistics until a full window
/// of clearing prices has accumulated.
#[derive(Debug, Clone)]
pub struct PriceHistory {
    seed: PriceStats,
    prices: VecDeque<f64>,
}

impl PriceHistory {
    pub fn new(seed: PriceStats) -> Self {
        Self {
            seed,
            prices: VecDeque::with_capacity(seed.window),
        }
    }

    pub fn push(&mut self, price: f64) {
        if self.prices.len() == self.seed.window {
            self.prices.pop_front();
        }
        self.prices.push_back(price);
    }

    pub fn stats(&self) -> PriceStats {
        if self.prices.len() < self.seed.window {
            return self.seed;
        }
        let v: Vec<f64> = self.prices.iter().copied().collect();
        PriceStats::from_prices(&v, self.seed.window).unwrap_or(self.seed)
    }
}

/// The realistic bid: one price and one quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bid {
    /// $/kWh.
    pub price: f64,
    /// kW.
    pub quantity: f64,
    pub load_id: LoadId,
}

impl Bid {
    pub fn new(load_id: LoadId, price: f64, quantity: f64) -> Result<Self> {
        if !price.is_finite() || !(quantity >= 0.0) {
            return Err(Error::InvalidParams(format!(
                "bid from {load_id}: price {price}, quantity {quantity}"
            )));
        }
        Ok(Self {
            price,
            quantity,
            load_id,
        })
    }
}

/// Bidding curve: temperature to price.
///
/// Linear from `P_avg - k sigma` at `t_min` through `P_avg` at `t_desired` to
/// `P_avg + k sigma` at `t_max`, flat outside the band.
pub fn bid_price_from_curve(t_c: f64, prefs: &UserPrefs, stats: &PriceStats) -> Result<f64> {
    if prefs.t_min == prefs.t_max {
        return Err(Error::DegeneratePrefs(prefs.t_min));
    }
    let span = prefs.k_slider * stats.p_sigma;
    let frac = if t_c >= prefs.t_desired {
        if prefs.t_max > prefs.t_desired {
            ((t_c - prefs.t_desired) / (prefs.t_max - prefs.t_desired)).min(1.0)
        } else if t_c > prefs.t_desired {
            1.0
        } else {
            0.0
        }
    } else if prefs.t_desired > prefs.t_min {
        -((prefs.t_desired - t_c) / (prefs.t_desired - prefs.t_min)).min(1.0)
    } else {
        -1.0
    };
    Ok(stats.p_avg + frac * span)
}

/// Price response: clearing price to setpoint (inverse of the bidding curve,
/// saturating at `t_min` / `t_max`).
pub fn setpoint_from_price(p_c: f64, prefs: &UserPrefs, stats: &PriceStats) -> f64 {
    let span = prefs.k_slider * stats.p_sigma;
    if span <= 0.0 {
        return if p_c > stats.p_avg {
            prefs.t_max
        } else if p_c < stats.p_avg {
            prefs.t_min
        } else {
            prefs.t_desired
        };
    }
    let frac = ((p_c - stats.p_avg) / span).clamp(-1.0, 1.0);
    if frac >= 0.0 {
        prefs.t_desired + frac * (prefs.t_max - prefs.t_desired)
    } else {
        prefs.t_desired + frac * (prefs.t_desired - prefs.t_min)
    }
}

/// Setpoints bounding the transition region of the energy function:
/// energy is zero for setpoints at or above `u1` and `E_m` at or below `u2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetpointThresholds {
    pub u1: f64,
    pub u2: f64,
}

/// `u1`, `u2` from the current state.
///
/// On at `t_k^-`: `u1 = T_c + delta/2` and
/// `u2 = L A^{-1} e^{AT} (A eta + B_on) - L A^{-1} B_on + delta/2`.
/// Off at `t_k^-`: energy is zero once the setpoint clears the warmest point of
/// the off drift (`u1 = max T_off - delta/2`), and `E_m` when the load turns on
/// immediately and never reaches the lower threshold
/// (`u2 = min(T_c - delta/2, T_f + delta/2)`).
pub fn compute_u1_u2(state: &HybridState, params: &EtpParams) -> SetpointThresholds {
    let half = 0.5 * params.deadband();
    let t_f_half = on_mode_end_temp(state, params) + half;
    if state.on {
        SetpointThresholds {
            u1: state.air() + half,
            u2: t_f_half,
        }
    } else {
        let (_, max_off) = thermal::air_extremes(state, params, false);
        SetpointThresholds {
            u1: max_off - half,
            u2: (state.air() - half).min(t_f_half),
        }
    }
}

fn on_mode_end_temp(state: &HybridState, params: &EtpParams) -> f64 {
    let l = RowVector2::new(1.0, 0.0);
    let a = params.a_matrix();
    let a_inv = params.a_inverse();
    let b_on = params.b_on();
    let e_at = expm2(&(a * params.period()));
    let eta = state.eta_vec();
    (l * a_inv * e_at * (a * eta + b_on))[0] - (l * a_inv * b_on)[0]
}

/// Setpoints that make the simulated energy exactly `E_m` (`full`) or exactly
/// zero (`zero`) over the period, using the extremes of each mode's trajectory.
pub fn dispatch_bounds(state: &HybridState, params: &EtpParams) -> SetpointThresholds {
    let half = 0.5 * params.deadband();
    let (min_on, _) = thermal::air_extremes(state, params, true);
    let (_, max_off) = thermal::air_extremes(state, params, false);
    if state.on {
        SetpointThresholds {
            u1: (state.air() + half).max(max_off - half),
            u2: min_on + half,
        }
    } else {
        SetpointThresholds {
            u1: max_off - half,
            u2: (state.air() - half).min(min_on + half),
        }
    }
}

/// Setpoint a device adopts after clearing so that its period energy follows
/// its step response: the price-response setpoint, pushed below the
/// full-energy bound when the price is under the step price, or above the
/// zero-energy bound otherwise.
pub fn dispatch_setpoint(
    p_c: f64,
    step_price: f64,
    bounds: &SetpointThresholds,
    prefs: &UserPrefs,
    stats: &PriceStats,
) -> f64 {
    const MARGIN_F: f64 = 1e-6;
    let response = setpoint_from_price(p_c, prefs, stats);
    if p_c < step_price {
        response.min(bounds.u2 - MARGIN_F)
    } else {
        response.max(bounds.u1 + MARGIN_F)
    }
}

/// Two-scalar step approximation of the energy response.
///
/// The price sits midway between the curve prices at `u1` and `u2`; the
/// quantity is the measured power of the latest on cycle.
pub fn realistic_bid(
    load_id: LoadId,
    state: &HybridState,
    params: &EtpParams,
    prefs: &UserPrefs,
    stats: &PriceStats,
    q_measured: f64,
) -> Result<Bid> {
    let th = compute_u1_u2(state, params);
    step_bid(load_id, &th, prefs, stats, q_measured)
}

/// Step bid from already computed thresholds.
pub fn step_bid(
    load_id: LoadId,
    th: &SetpointThresholds,
    prefs: &UserPrefs,
    stats: &PriceStats,
    q_measured: f64,
) -> Result<Bid> {
    let p1 = bid_price_from_curve(th.u1, prefs, stats)?;
    let p2 = bid_price_from_curve(th.u2, prefs, stats)?;
    Bid::new(load_id, 0.5 * (p1 + p2), q_measured)
}

/// Concave comfort valuation `V(a) = curvature a^2 / 2 + slope a` on `[0, a_max]`.
///
/// `curvature == 0` (only via [`QuadraticValuation::linear`]) gives a linear valuation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticValuation {
    pub curvature: f64,
    pub slope: f64,
    pub a_max: f64,
}

impl QuadraticValuation {
    pub fn new(curvature: f64, slope: f64, a_max: f64) -> Result<Self> {
        if !(curvature < 0.0) {
            return Err(Error::InvalidParams(format!("curvature must be < 0, got {curvature}")));
        }
        Self::checked(curvature, slope, a_max)
    }

    pub fn linear(slope: f64, a_max: f64) -> Result<Self> {
        Self::checked(0.0, slope, a_max)
    }

    fn checked(curvature: f64, slope: f64, a_max: f64) -> Result<Self> {
        if !(slope > 0.0) || !(a_max > 0.0) || !curvature.is_finite() {
            return Err(Error::InvalidParams(format!(
                "valuation needs slope > 0 and a_max > 0 (got {slope}, {a_max})"
            )));
        }
        Ok(Self {
            curvature,
            slope,
            a_max,
        })
    }

    pub fn is_linear(&self) -> bool {
        self.curvature == 0.0
    }

    pub fn value(&self, a: f64) -> f64 {
        0.5 * self.curvature * a * a + self.slope * a
    }

    pub fn marginal(&self, a: f64) -> f64 {
        self.curvature * a + self.slope
    }

    /// Prices where the response changes shape: `[full-allocation price, zero-allocation price]`.
    pub fn breakpoints(&self) -> [f64; 2] {
        [self.slope + self.curvature * self.a_max, self.slope]
    }
}

/// Utility-maximizing allocation at price `p_c`: `argmax V(a) - p_c a` over `[0, a_max]`.
///
/// A linear valuation is indifferent at `p_c == slope`; it then takes zero.
pub fn optimal_allocation(v: &QuadraticValuation, p_c: f64) -> f64 {
    if v.is_linear() {
        return if p_c < v.slope { v.a_max } else { 0.0 };
    }
    ((v.slope - p_c) / -v.curvature).clamp(0.0, v.a_max)
}
