use std::path::PathBuf;

use anyhow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcl_market::agent::QuadraticValuation;
use tcl_market::market::{clear_truthful, solve_team_problem, verify_realization, welfare, CostModel, RealizationReport};
use tcl_market::scenario::{run_scenario, ScenarioConfig, ScenarioInputs};

use crate::EXIT_FAILED_CHECK;

#[derive(clap::Args)]
pub struct Args {
    /// Scenario TOML; its first congested period is checked against the team optimum.
    #[arg(long)]
    pub config: PathBuf,
    /// Seed of the random concave fixture.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

fn check(vals: &[QuadraticValuation], cost: &CostModel, d: f64) -> Result<RealizationReport> {
    let team = solve_team_problem(vals, cost, d)?;
    let clearing = clear_truthful(vals, cost, d)?;
    Ok(verify_realization(&team, &clearing, vals, cost))
}

fn line(pass: bool, name: &str, detail: String) -> bool {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn hundred_agents() -> Result<bool> {
    let vals = (1..=100).map(|i| QuadraticValuation::new(-1.0, i as f64, 1.0)).collect::<Result<Vec<_>, _>>()?;
    let r = clear_truthful(&vals, &CostModel::linear(20.0), 50.0)?;
    let p_bar = r.p_bar.unwrap_or(f64::NAN);
    Ok(line(r.p_bar == Some(50.0) && r.price == 50.0, "hundred-agent fixture", format!("P_bar = {p_bar}, P_c* = {}", r.price)))
}

fn two_linear_agents() -> Result<bool> {
    let vals = [QuadraticValuation::linear(1.0, 2.0)?, QuadraticValuation::linear(3.0, 2.0)?];
    let cost = CostModel::linear(2.0);
    let team = solve_team_problem(&vals, &cost, 1.0)?;
    let report = check(&vals, &cost, 1.0)?;
    let status = if report.price_realizable() { "price-realizable" } else { "not price-realizable" };
    Ok(line(
        !report.price_realizable() && team.welfare == 1.0,
        "two-agent fixture",
        format!("team allocation {:?}, team welfare {}, {status}", team.allocations, team.welfare),
    ))
}

fn random_fixture(seed: u64) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vals = (0..40)
        .map(|_| QuadraticValuation::new(-rng.random_range(0.2..3.0), rng.random_range(0.5..4.0), rng.random_range(0.5..2.0)))
        .collect::<Result<Vec<_>, _>>()?;
    let cost = CostModel::quadratic(rng.random_range(0.0..1.0), rng.random_range(0.0..0.1))?;
    let d = 0.5 * vals.iter().map(|v| v.a_max).sum::<f64>();
    let r = check(&vals, &cost, d)?;
    let rel = r.welfare_gap.abs() / r.team_welfare.abs().max(1.0);
    Ok(line(r.realized && rel < 1e-6, "random concave fixture", format!("welfare gap {rel:.2e}, realized {}", r.realized)))
}

fn scenario_period(args: &Args) -> Result<bool> {
    let cfg = ScenarioConfig::from_toml_file(&args.config)?;
    let inputs = ScenarioInputs::load(&cfg)?;
    let run = run_scenario(&cfg, &inputs)?;
    let Some(rec) = run.records.iter().find(|r| r.clearing.congested) else {
        return Ok(line(false, "scenario period", "no congested period in the scenario".into()));
    };
    let period_h = cfg.period_h();
    let vals = inputs.population.iter().map(|h| h.valuation(period_h)).collect::<Result<Vec<_>, _>>()?;
    let cost = CostModel::linear(rec.base_price);
    let d = (run.capacity_kw - run.unresponsive_kw) * period_h;
    let r = check(&vals, &cost, d)?;
    let team = solve_team_problem(&vals, &cost, d)?;
    let rel = r.welfare_gap.abs() / r.team_welfare.abs().max(1.0);
    let total: f64 = team.allocations.iter().sum();
    debug_assert!((welfare(&team.allocations, &vals, &cost) - r.team_welfare).abs() < 1e-9);
    Ok(line(
        r.realized && rel < 1e-6,
        "scenario period",
        format!("period {} ({}), {:.2} of {:.2} kWh allocated, welfare gap {rel:.2e}", rec.index, rec.timestamp, total, d),
    ))
}

pub fn run(args: &Args) -> Result<u8> {
    let results = [hundred_agents()?, two_linear_agents()?, random_fixture(args.seed)?, scenario_period(args)?];
    let passed = results.iter().filter(|&&p| p).count();
    println!("verify: {passed}/{} checks passed", results.len());
    Ok(if passed == results.len() { 0 } else { EXIT_FAILED_CHECK })
}
