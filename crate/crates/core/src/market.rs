//! Coordinator side: demand-curve construction, capacity-constrained clearing
//! for step bids and for truthful response-function bids, and the team
//! problem used to certify that a clearing price realizes the welfare optimum.
//!
//! Clearing rule: the price is `max(P_bar, P_star)`, where `P_star` is the
//! marginal procurement cost of the served energy and `P_bar` is the lowest
//! price at which demand fits under the feeder limit. Every bid is then served
//! according to its own response at that price.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::agent::{optimal_allocation, Bid, LoadId, QuadraticValuation};
use crate::error::{Error, Result};
use crate::thermal::DEFAULT_PERIOD_H;

const BISECTION_ITERS: usize = 200;

/// Wholesale procurement cost `C(x) = slope x + curvature x^2`, `x` in kWh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostModel {
    Linear { slope: f64 },
    Quadratic { slope: f64, curvature: f64 },
}

impl CostModel {
    pub fn linear(slope: f64) -> Self {
        CostModel::Linear { slope }
    }

    pub fn quadratic(slope: f64, curvature: f64) -> Result<Self> {
        if !(curvature >= 0.0) {
            return Err(Error::InvalidParams(format!(
                "cost curvature must be >= 0 for convexity, got {curvature}"
            )));
        }
        Ok(CostModel::Quadratic { slope, curvature })
    }

    pub fn value(&self, x: f64) -> f64 {
        match *self {
            CostModel::Linear { slope } => slope * x,
            CostModel::Quadratic { slope, curvature } => slope * x + curvature * x * x,
        }
    }

    pub fn marginal(&self, x: f64) -> f64 {
        match *self {
            CostModel::Linear { slope } => slope,
            CostModel::Quadratic { slope, curvature } => slope + 2.0 * curvature * x,
        }
    }

    /// Smallest `x >= 0` with `C'(x) >= p`, `None` for a flat marginal cost.
    fn inverse_marginal(&self, p: f64) -> Option<f64> {
        match *self {
            CostModel::Quadratic { slope, curvature } if curvature > 0.0 => {
                Some(((p - slope) / (2.0 * curvature)).max(0.0))
            }
            _ => None,
        }
    }
}

/// One step of the aggregate demand curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemandStep {
    pub price: f64,
    /// kW, including unresponsive load.
    pub cumulative_power: f64,
    pub load_id: LoadId,
    pub quantity: f64,
}

/// Price-to-power step function, steps in descending bid price.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandCurve {
    pub steps: Vec<DemandStep>,
    /// `Q_uc`, kW.
    pub unresponsive: f64,
}

impl DemandCurve {
    /// Aggregate power at price `p`: unresponsive load plus every bid priced strictly above `p`.
    pub fn demand_at(&self, p: f64) -> f64 {
        let n = self.steps.partition_point(|s| s.price > p);
        if n == 0 {
            self.unresponsive
        } else {
            self.steps[n - 1].cumulative_power
        }
    }

    pub fn max_demand(&self) -> f64 {
        self.steps.last().map_or(self.unresponsive, |s| s.cumulative_power)
    }
}

/// Orders bids by descending price (ties by load id) and accumulates power.
pub fn build_demand_curve(bids: &[Bid], q_uc: f64) -> DemandCurve {
    let mut sorted: Vec<Bid> = bids.to_vec();
    sorted.sort_by(|a, b| b.price.total_cmp(&a.price).then(a.load_id.cmp(&b.load_id)));
    let mut cumulative = q_uc;
    let steps = sorted
        .into_iter()
        .map(|b| {
            cumulative += b.quantity;
            DemandStep {
                price: b.price,
                cumulative_power: cumulative,
                load_id: b.load_id,
                quantity: b.quantity,
            }
        })
        .collect();
    DemandCurve {
        steps,
        unresponsive: q_uc,
    }
}

/// Treatment of bids priced exactly at the clearing price.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginalRule {
    /// Bids at the clearing price are not served.
    #[default]
    Unserved,
    /// Bids at the clearing price are served in curve order while capacity
    /// remains; the first one that does not fit gets the remainder.
    PartialFill,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClearingOptions {
    /// Market period, hours.
    pub period_h: f64,
    pub marginal: MarginalRule,
}

impl Default for ClearingOptions {
    fn default() -> Self {
        Self {
            period_h: DEFAULT_PERIOD_H,
            marginal: MarginalRule::Unserved,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClearingResult {
    /// `P_c*`, $/kWh.
    pub price: f64,
    /// Served energy per load, kWh.
    pub allocations: BTreeMap<LoadId, f64>,
    pub congested: bool,
    pub p_bar: Option<f64>,
    pub p_star: f64,
    /// Unresponsive plus served responsive power, kW (step clearing only;
    /// equals total served energy for response-function clearing).
    pub cleared_power: f64,
}

impl ClearingResult {
    pub fn total_allocation(&self) -> f64 {
        self.allocations.values().sum()
    }
}

/// Clears step bids against the feeder capacity (kW).
///
/// `P_bar` is the price of the first bid (in curve order) whose power no
/// longer fits under capacity; with [`MarginalRule::Unserved`] it and any bid
/// at its price stay unserved, so served demand is the largest cumulative
/// value not above capacity. `P_star` solves `p = C'(E(p))` with `E(p)` the
/// responsive energy of bids priced above `p`.
pub fn clear(curve: &DemandCurve, cost: &CostModel, capacity_kw: f64, opts: &ClearingOptions) -> Result<ClearingResult> {
    if curve.unresponsive > capacity_kw {
        return Err(Error::Infeasible {
            unresponsive_kw: curve.unresponsive,
            capacity_kw,
        });
    }
    let p_bar = curve
        .steps
        .iter()
        .find(|s| s.cumulative_power > capacity_kw)
        .map(|s| s.price);
    let p_star = step_fixed_point(curve, cost, opts.period_h);
    let (price, congested) = match p_bar {
        Some(pb) if pb > p_star => (pb, true),
        _ => (p_star, false),
    };
    Ok(allocate_steps(curve, price, capacity_kw, opts, congested, p_bar, p_star))
}

/// Clears at an externally fixed price (real-time pricing and fixed-ratio
/// baselines). Capacity is not enforced.
pub fn clear_at_price(curve: &DemandCurve, price: f64, opts: &ClearingOptions) -> ClearingResult {
    let mut out = allocate_steps(curve, price, f64::INFINITY, opts, false, None, price);
    out.congested = false;
    out
}

fn allocate_steps(
    curve: &DemandCurve,
    price: f64,
    capacity_kw: f64,
    opts: &ClearingOptions,
    congested: bool,
    p_bar: Option<f64>,
    p_star: f64,
) -> ClearingResult {
    let mut allocations = BTreeMap::new();
    let mut served = curve.unresponsive;
    for s in &curve.steps {
        let power = if s.price > price {
            s.quantity
        } else if s.price == price && opts.marginal == MarginalRule::PartialFill {
            s.quantity.min((capacity_kw - served).max(0.0))
        } else {
            0.0
        };
        served += power;
        allocations.insert(s.load_id, power * opts.period_h);
    }
    ClearingResult {
        price,
        allocations,
        congested,
        p_bar,
        p_star,
        cleared_power: served,
    }
}

fn step_fixed_point(curve: &DemandCurve, cost: &CostModel, period_h: f64) -> f64 {
    if let CostModel::Linear { slope } = *cost {
        return slope;
    }
    let energy = |p: f64| (curve.demand_at(p) - curve.unresponsive) * period_h;
    let mut lo = cost.marginal(0.0);
    let mut hi = cost.marginal(energy(f64::NEG_INFINITY));
    if hi <= lo {
        return lo;
    }
    // g(p) = p - C'(E(p)) is increasing; find inf{p : g(p) >= 0}.
    if lo - cost.marginal(energy(lo)) >= 0.0 {
        return lo;
    }
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid - cost.marginal(energy(mid)) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Aggregate response of truthful bidders, piecewise linear in price.
struct AggregateResponse<'a> {
    valuations: &'a [QuadraticValuation],
    knots: Vec<f64>,
}

impl<'a> AggregateResponse<'a> {
    fn new(valuations: &'a [QuadraticValuation]) -> Self {
        let mut knots: Vec<f64> = valuations
            .iter()
            .flat_map(|v| v.breakpoints())
            .filter(|x| x.is_finite())
            .collect();
        knots.sort_by(f64::total_cmp);
        knots.dedup();
        Self { valuations, knots }
    }

    fn demand(&self, p: f64) -> f64 {
        self.valuations.iter().map(|v| optimal_allocation(v, p)).sum()
    }

    /// Segments `[start, end)` on which demand is affine, covering the real line.
    fn segments(&self) -> Vec<(f64, f64)> {
        let mut edges = Vec::with_capacity(self.knots.len() + 2);
        edges.push(f64::NEG_INFINITY);
        edges.extend(self.knots.iter().copied());
        edges.push(f64::INFINITY);
        edges.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Smallest `p` with `f(p) >= 0` for `f(p) = p_weight * p - target(demand(p))`,
    /// an increasing function, resolved exactly on each affine segment.
    fn first_root(&self, f: impl Fn(f64, f64) -> f64) -> f64 {
        for (start, end) in self.segments() {
            // Representative points inside the segment; the segment is affine there.
            let (x0, x1) = match (start.is_finite(), end.is_finite()) {
                (true, true) => (start, end),
                (false, true) => (end - 1.0, end),
                (true, false) => (start, start + 1.0),
                (false, false) => (-1.0, 1.0),
            };
            let d0 = self.demand(x0);
            let mid = 0.5 * (x0 + x1);
            let slope = (self.demand(mid) - d0) / (mid - x0);
            let at = |p: f64| f(p, d0 + slope * (p - x0));
            if start.is_finite() && at(start) >= 0.0 {
                return start;
            }
            // Left limit at the end of the segment.
            let end_val = if end.is_finite() { at(end) } else { f64::INFINITY };
            if end_val >= 0.0 {
                // Affine in p on this segment: solve at(p) = 0.
                let (pa, pb) = if start.is_finite() { (start, x1) } else { (x0, x1) };
                let (fa, fb) = (at(pa), at(pb));
                if fb == fa {
                    return pa;
                }
                let root = pa - fa * (pb - pa) / (fb - fa);
                return root.clamp(if start.is_finite() { start } else { f64::MIN }, if end.is_finite() { end } else { f64::MAX });
            }
        }
        f64::INFINITY
    }
}

/// Clears truthful response-function bids (`b_i = h_i`) against an energy limit.
///
/// Loads are identified by their index in `valuations`.
pub fn clear_truthful(valuations: &[QuadraticValuation], cost: &CostModel, capacity_energy: f64) -> Result<ClearingResult> {
    if !(capacity_energy >= 0.0) {
        return Err(Error::InfeasibleCapacity(capacity_energy));
    }
    let agg = AggregateResponse::new(valuations);
    let max_demand: f64 = valuations.iter().map(|v| v.a_max).sum();
    let p_bar = if max_demand > capacity_energy {
        Some(agg.first_root(|_, d| capacity_energy - d))
    } else {
        None
    };
    // p - C'(b(p)) >= 0
    let p_fixed = agg.first_root(|p, d| p - cost.marginal(d));
    let (price, congested) = match p_bar {
        Some(pb) if pb > p_fixed => (pb, true),
        _ => (p_fixed, false),
    };
    let allocations: BTreeMap<LoadId, f64> = valuations
        .iter()
        .enumerate()
        .map(|(i, v)| (LoadId(i as u32), optimal_allocation(v, price)))
        .collect();
    let total: f64 = allocations.values().sum();
    Ok(ClearingResult {
        price,
        allocations,
        congested,
        p_bar,
        p_star: cost.marginal(total),
        cleared_power: total,
    })
}

/// Social welfare `sum V_i(a_i) - C(sum a_i)`.
pub fn welfare(allocations: &[f64], valuations: &[QuadraticValuation], cost: &CostModel) -> f64 {
    let value: f64 = allocations.iter().zip(valuations).map(|(a, v)| v.value(*a)).sum();
    value - cost.value(allocations.iter().sum())
}

/// Team-optimal allocation with its KKT multipliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeamSolution {
    /// Indexed like the input valuations, kWh.
    pub allocations: Vec<f64>,
    pub welfare: f64,
    /// Capacity multiplier `u`.
    pub multiplier: f64,
    /// Shadow price `lambda = C'(sum a) + u`.
    pub lambda: f64,
    /// `(u1, u2)` per load: multipliers of `a <= a_max` and `a >= 0`.
    pub per_load_duals: Vec<(f64, f64)>,
}

/// Allocation range of one load at shadow price `lambda`; only linear
/// valuations have a non-degenerate range (at `lambda == slope`).
fn allocation_range(v: &QuadraticValuation, lambda: f64, tol: f64) -> (f64, f64) {
    if v.is_linear() && (lambda - v.slope).abs() <= tol {
        (0.0, v.a_max)
    } else {
        let a = optimal_allocation(v, lambda);
        (a, a)
    }
}

/// Solves `max sum V_i(a_i) - C(sum a_i)` s.t. `sum a_i <= D`, `0 <= a_i <= a_max`
/// by bisection on the shadow price.
pub fn solve_team_problem(valuations: &[QuadraticValuation], cost: &CostModel, capacity_energy: f64) -> Result<TeamSolution> {
    if !(capacity_energy >= 0.0) {
        return Err(Error::InfeasibleCapacity(capacity_energy));
    }
    if valuations.is_empty() {
        return Ok(TeamSolution {
            allocations: vec![],
            welfare: 0.0,
            multiplier: 0.0,
            lambda: cost.marginal(0.0),
            per_load_duals: vec![],
        });
    }
    let total = |lambda: f64| -> f64 { valuations.iter().map(|v| optimal_allocation(v, lambda)).sum() };
    let slopes_hi = valuations.iter().map(|v| v.slope).fold(f64::MIN, f64::max);
    let lows = valuations
        .iter()
        .map(|v| v.breakpoints()[0])
        .fold(f64::MAX, f64::min);
    let max_total: f64 = valuations.iter().map(|v| v.a_max).sum();

    // inf{lambda : pred(lambda)} for an upward-closed predicate.
    let bisect = |pred: &dyn Fn(f64) -> bool, mut lo: f64, mut hi: f64| -> f64 {
        if pred(lo) {
            return lo;
        }
        for _ in 0..BISECTION_ITERS {
            let mid = 0.5 * (lo + hi);
            if pred(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    };
    let span = (slopes_hi - lows).abs().max(1.0) + cost.marginal(0.0).abs() + cost.marginal(max_total).abs();
    let lo0 = lows.min(cost.marginal(0.0)) - span;
    let hi0 = slopes_hi.max(cost.marginal(max_total)) + span;
    let scale = span.max(1.0);
    let snap = |lambda: f64| -> f64 {
        valuations
            .iter()
            .filter(|v| v.is_linear() && (v.slope - lambda).abs() <= 1e-12 * scale)
            .map(|v| v.slope)
            .next()
            .unwrap_or(lambda)
    };

    // Unconstrained optimum: lambda = C'(S) with S inside the allocation range.
    let lambda_u = snap(bisect(&|l| l - cost.marginal(total(l)) >= 0.0, lo0, hi0));
    let tol = 1e-12 * scale;
    let (lo_sum, hi_sum) = valuations.iter().fold((0.0, 0.0), |(a, b), v| {
        let (l, h) = allocation_range(v, lambda_u, tol);
        (a + l, b + h)
    });
    let s_unc = match cost.inverse_marginal(lambda_u) {
        Some(s) => s.clamp(lo_sum, hi_sum),
        None => lo_sum,
    };

    let (lambda, target, multiplier) = if s_unc <= capacity_energy {
        (lambda_u, s_unc, 0.0)
    } else {
        let lambda_d = snap(bisect(&|l| total(l) <= capacity_energy, lo0, hi0));
        let target = capacity_energy.min(max_total);
        (lambda_d, target, (lambda_d - cost.marginal(target)).max(0.0))
    };

    // Fixed loads first, then indifferent (linear, at their slope) loads fill the gap in order.
    let mut allocations = vec![0.0; valuations.len()];
    let mut fixed_sum = 0.0;
    let mut flexible = Vec::new();
    for (i, v) in valuations.iter().enumerate() {
        let (l, h) = allocation_range(v, lambda, tol);
        if h > l {
            flexible.push(i);
        } else {
            allocations[i] = l;
            fixed_sum += l;
        }
    }
    let mut remaining = (target - fixed_sum).max(0.0);
    for i in flexible {
        let take = remaining.min(valuations[i].a_max);
        allocations[i] = take;
        remaining -= take;
    }

    let per_load_duals = valuations
        .iter()
        .zip(&allocations)
        .map(|(v, &a)| {
            let m = v.marginal(a);
            let u1 = if a >= v.a_max { (m - lambda).max(0.0) } else { 0.0 };
            let u2 = if a <= 0.0 { (lambda - m).max(0.0) } else { 0.0 };
            (u1, u2)
        })
        .collect();
    Ok(TeamSolution {
        welfare: welfare(&allocations, valuations, cost),
        allocations,
        multiplier,
        lambda,
        per_load_duals,
    })
}

/// Outcome of comparing a clearing result to the team optimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizationReport {
    pub max_allocation_deviation: f64,
    pub team_welfare: f64,
    pub clearing_welfare: f64,
    pub welfare_gap: f64,
    /// The clearing result reproduces the team allocation.
    pub realized: bool,
    /// Some price whose best responses reproduce the team allocation, if any exists.
    pub realizing_price: Option<f64>,
}

impl RealizationReport {
    pub fn price_realizable(&self) -> bool {
        self.realizing_price.is_some()
    }
}

/// Checks whether the clearing price realizes the team solution
/// (`a_i* = h_i(P_c*)` for every load) and searches for any realizing price.
pub fn verify_realization(
    team: &TeamSolution,
    clearing: &ClearingResult,
    valuations: &[QuadraticValuation],
    cost: &CostModel,
) -> RealizationReport {
    const REL_TOL: f64 = 1e-6;
    let cleared: Vec<f64> = (0..valuations.len())
        .map(|i| clearing.allocations.get(&LoadId(i as u32)).copied().unwrap_or(0.0))
        .collect();
    let max_dev = cleared
        .iter()
        .zip(&team.allocations)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let clearing_welfare = welfare(&cleared, valuations, cost);
    let gap = team.welfare - clearing_welfare;
    let scale_a = valuations.iter().map(|v| v.a_max).fold(0.0, f64::max).max(1e-300);
    let scale_w = team.welfare.abs().max(1.0);
    let matches_at = |p: f64| {
        valuations
            .iter()
            .zip(&team.allocations)
            .all(|(v, a)| (optimal_allocation(v, p) - a).abs() <= REL_TOL * v.a_max)
    };

    let mut candidates: Vec<f64> = vec![team.lambda, clearing.price];
    for (v, a) in valuations.iter().zip(&team.allocations) {
        candidates.extend(v.breakpoints());
        if *a > 0.0 && *a < v.a_max && !v.is_linear() {
            candidates.push(v.marginal(*a));
        }
    }
    candidates.retain(|p| p.is_finite());
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut probes = candidates.clone();
    for w in candidates.windows(2) {
        probes.push(0.5 * (w[0] + w[1]));
    }
    if let (Some(first), Some(last)) = (candidates.first(), candidates.last()) {
        probes.push(first - 1.0);
        probes.push(last + 1.0);
    }
    let realizing_price = probes.into_iter().find(|&p| matches_at(p));

    RealizationReport {
        max_allocation_deviation: max_dev,
        team_welfare: team.welfare,
        clearing_welfare,
        welfare_gap: gap,
        realized: max_dev <= REL_TOL * scale_a && gap.abs() <= REL_TOL * scale_w,
        realizing_price,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bid(id: u32, price: f64, q: f64) -> Bid {
        Bid::new(LoadId(id), price, q).unwrap()
    }

    #[test]
    fn empty_curve_is_flat() {
        let c = build_demand_curve(&[], 12.0);
        assert!(c.steps.is_empty());
        assert_eq!(c.demand_at(-100.0), 12.0);
        assert_eq!(c.demand_at(100.0), 12.0);
    }

    #[test]
    fn cumulative_steps() {
        let c = build_demand_curve(&[bid(2, 5.0, 4.0), bid(1, 10.0, 3.0)], 0.0);
        let steps: Vec<(f64, f64)> = c.steps.iter().map(|s| (s.price, s.cumulative_power)).collect();
        assert_eq!(steps, vec![(10.0, 3.0), (5.0, 7.0)]);
    }

    #[test]
    fn ties_break_by_load_id() {
        let c = build_demand_curve(&[bid(7, 1.0, 1.0), bid(3, 1.0, 2.0), bid(5, 1.0, 3.0)], 0.0);
        let ids: Vec<u32> = c.steps.iter().map(|s| s.load_id.0).collect();
        assert_eq!(ids, vec![3, 5, 7]);
    }

    #[test]
    fn hundred_agent_step_curve() {
        let bids: Vec<Bid> = (1..=100).map(|i| bid(i, i as f64 - 0.5, 1.0)).collect();
        let c = build_demand_curve(&bids, 0.0);
        assert_eq!(c.demand_at(50.0), 50.0);
    }

    #[test]
    fn uncongested_clears_at_base_price() {
        let c = build_demand_curve(&[bid(1, 0.2, 3.0), bid(2, 0.05, 4.0)], 10.0);
        let opts = ClearingOptions::default();
        let r = clear(&c, &CostModel::linear(0.1), 100.0, &opts).unwrap();
        assert_eq!(r.price, 0.1);
        assert!(!r.congested);
        assert!(r.p_bar.is_none());
        assert_eq!(r.allocations[&LoadId(1)], 3.0 * opts.period_h);
        assert_eq!(r.allocations[&LoadId(2)], 0.0);
    }

    #[test]
    fn congested_price_is_marginal_bid() {
        let bids = [bid(1, 0.30, 3.0), bid(2, 0.25, 3.0), bid(3, 0.20, 3.0)];
        let c = build_demand_curve(&bids, 10.0);
        let r = clear(&c, &CostModel::linear(0.1), 17.0, &ClearingOptions::default()).unwrap();
        assert!(r.congested);
        assert_eq!(r.p_bar, Some(0.20));
        assert_eq!(r.price, 0.20);
        assert_eq!(r.cleared_power, 16.0);
        assert_eq!(r.allocations[&LoadId(3)], 0.0);
        let partial = ClearingOptions {
            marginal: MarginalRule::PartialFill,
            ..Default::default()
        };
        let r = clear(&c, &CostModel::linear(0.1), 17.0, &partial).unwrap();
        assert!((r.cleared_power - 17.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_when_unresponsive_exceeds_capacity() {
        let c = build_demand_curve(&[], 20.0);
        assert!(matches!(
            clear(&c, &CostModel::linear(0.1), 15.0, &ClearingOptions::default()),
            Err(Error::Infeasible { .. })
        ));
    }

    #[test]
    fn quadratic_cost_fixed_point() {
        // One bid of 12 kW at 0.5 $/kWh; C'(E) = 0.1 + 2 * 0.5 * E.
        let c = build_demand_curve(&[bid(1, 0.5, 12.0)], 0.0);
        let cost = CostModel::quadratic(0.1, 0.5).unwrap();
        let r = clear(&c, &cost, 100.0, &ClearingOptions::default()).unwrap();
        // Serving costs C'(1 kWh) = 1.1 > 0.5, not serving costs 0.1 < 0.5: price sits at the jump.
        assert!((r.p_star - 0.5).abs() < 1e-12);
        assert_eq!(r.allocations[&LoadId(1)], 0.0);
    }

    #[test]
    fn team_two_linear_agents() {
        let vals = [
            QuadraticValuation::linear(1.0, 2.0).unwrap(),
            QuadraticValuation::linear(3.0, 2.0).unwrap(),
        ];
        let team = solve_team_problem(&vals, &CostModel::linear(2.0), 1.0).unwrap();
        assert_eq!(team.allocations, vec![0.0, 1.0]);
        assert!((team.welfare - 1.0).abs() < 1e-12);
        assert!((team.multiplier - 1.0).abs() < 1e-9);
    }

    #[test]
    fn slack_capacity_has_zero_multiplier() {
        let vals = [QuadraticValuation::new(-1.0, 2.0, 5.0).unwrap()];
        let team = solve_team_problem(&vals, &CostModel::linear(1.0), 10.0).unwrap();
        assert_eq!(team.multiplier, 0.0);
        assert!((team.allocations[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_population_is_trivially_realized() {
        let cost = CostModel::linear(1.0);
        let team = solve_team_problem(&[], &cost, 1.0).unwrap();
        let clearing = clear_truthful(&[], &cost, 1.0).unwrap();
        let rep = verify_realization(&team, &clearing, &[], &cost);
        assert!(rep.realized);
        assert_eq!(rep.welfare_gap, 0.0);
    }

    #[test]
    fn welfare_of_zero_allocation_is_zero() {
        let vals = [QuadraticValuation::new(-1.0, 2.0, 5.0).unwrap()];
        assert_eq!(welfare(&[0.0], &vals, &CostModel::linear(3.0)), 0.0);
    }
}
