use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use serde::Serialize;
use tcl_market::scenario::{run_scenario, BiddingMode, PricingMode, ScenarioConfig, ScenarioInputs, ScenarioRun};

use crate::{ensure_dir, file_digest, write_json};

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Mode {
    KnownParams,
    OutputBased,
    Perturbed,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Pricing {
    Mechanism,
    Rtp,
    FixedRatio,
}

#[derive(clap::Args)]
pub struct Args {
    /// Scenario TOML file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Bidding mode; defaults to the config's.
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Bid-price perturbation in percent; implies `--mode perturbed`.
    #[arg(long)]
    pub perturb_pct: Option<f64>,
    /// Pricing rule; defaults to the config's.
    #[arg(long, value_enum)]
    pub pricing: Option<Pricing>,
    /// Congestion price ratio; implies `--pricing fixed-ratio`.
    #[arg(long)]
    pub gamma: Option<f64>,
}

#[derive(Serialize)]
struct Manifest {
    version: &'static str,
    seed: u64,
    config: ScenarioConfig,
    /// SHA-256 of each input, taken before the run.
    input_digests: BTreeMap<String, String>,
    outputs: Vec<String>,
}

#[derive(Serialize)]
struct Summary {
    periods: usize,
    n_households: usize,
    capacity_kw: f64,
    unresponsive_kw: f64,
    congested_periods: usize,
    violation_periods: usize,
    capped_fraction: f64,
    max_overshoot_fraction: f64,
    total_welfare: f64,
    responsive_energy_kwh: f64,
    mean_price: f64,
    max_price: f64,
}

fn apply_overrides(cfg: &mut ScenarioConfig, args: &Args) -> Result<()> {
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let mode = args.mode.or(args.perturb_pct.map(|_| Mode::Perturbed));
    match mode {
        Some(Mode::KnownParams) => cfg.bidding_mode = BiddingMode::KnownParams,
        Some(Mode::OutputBased) => cfg.bidding_mode = BiddingMode::OutputBased,
        Some(Mode::Perturbed) => {
            let pct = args.perturb_pct.context("--mode perturbed needs --perturb-pct")?;
            cfg.bidding_mode = BiddingMode::Perturbed { pct };
        }
        None => {}
    }
    let pricing = args.pricing.or(args.gamma.map(|_| Pricing::FixedRatio));
    match pricing {
        Some(Pricing::Mechanism) => cfg.pricing_mode = PricingMode::Mechanism,
        Some(Pricing::Rtp) => cfg.pricing_mode = PricingMode::Rtp,
        Some(Pricing::FixedRatio) => {
            let Some(gamma) = args.gamma else { bail!("--pricing fixed-ratio needs --gamma") };
            cfg.pricing_mode = PricingMode::FixedRatio { gamma };
        }
        None => {}
    }
    cfg.validate()?;
    Ok(())
}

fn summarize(cfg: &ScenarioConfig, run: &ScenarioRun) -> Summary {
    let n = run.records.len();
    let prices = run.records.iter().map(|r| r.clearing.price);
    Summary {
        periods: n,
        n_households: cfg.n_households,
        capacity_kw: run.capacity_kw,
        unresponsive_kw: run.unresponsive_kw,
        congested_periods: run.records.iter().filter(|r| r.clearing.congested).count(),
        violation_periods: run.records.iter().filter(|r| r.realized_power > run.capacity_kw + 1e-9).count(),
        capped_fraction: run.capped_fraction(),
        max_overshoot_fraction: run.max_overshoot(),
        total_welfare: run.records.iter().map(|r| r.welfare).sum(),
        responsive_energy_kwh: run.records.iter().flat_map(|r| &r.households).map(|h| h.energy).sum(),
        mean_price: prices.clone().sum::<f64>() / n.max(1) as f64,
        max_price: prices.fold(f64::NEG_INFINITY, f64::max),
    }
}

fn write_trajectories(run: &ScenarioRun, dir: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("trajectories_long.csv"))?;
    w.write_record(["period", "timestamp", "series", "value"])?;
    for r in &run.records {
        let series = [
            ("base_price", r.base_price),
            ("price", r.clearing.price),
            ("cleared_kw", r.cleared_power),
            ("realized_kw", r.realized_power),
            ("capacity_kw", run.capacity_kw),
            ("welfare", r.welfare),
        ];
        for (name, v) in series {
            w.write_record([r.index.to_string(), r.timestamp.clone(), name.to_string(), v.to_string()])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("households_long.csv"))?;
    w.write_record(["period", "timestamp", "load_id", "bid_price", "setpoint_F", "energy_kwh", "air_F", "on"])?;
    for r in &run.records {
        for h in &r.households {
            w.write_record([
                r.index.to_string(),
                r.timestamp.clone(),
                h.load_id.0.to_string(),
                h.bid_price.to_string(),
                h.setpoint.to_string(),
                h.energy.to_string(),
                h.air_f.to_string(),
                u8::from(h.on).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn run(args: &Args) -> Result<u8> {
    let mut cfg = ScenarioConfig::from_toml_file(&args.config)?;
    apply_overrides(&mut cfg, args)?;

    let mut inputs = vec![&args.config, &cfg.weather_path, &cfg.price_path];
    inputs.extend(cfg.population_path.as_ref());
    let input_digests = inputs
        .into_iter()
        .map(|p| Ok((p.display().to_string(), file_digest(p)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;

    let scenario_inputs = ScenarioInputs::load(&cfg)?;
    log::info!("running {} households over {} periods", cfg.n_households, cfg.periods());
    let run = run_scenario(&cfg, &scenario_inputs)?;

    ensure_dir(&args.out)?;
    let outputs = ["manifest.json", "periods.csv", "summary.json", "trajectories_long.csv", "households_long.csv"];
    run.write_period_csv(&args.out.join("periods.csv"))?;
    let summary = summarize(&cfg, &run);
    write_json(&args.out.join("summary.json"), &summary)?;
    write_trajectories(&run, &args.out)?;
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config: cfg,
        input_digests,
        outputs: outputs.iter().map(|o| args.out.join(o).display().to_string()).collect(),
    };
    write_json(&args.out.join("manifest.json"), &manifest)?;

    println!(
        "{} periods, {} congested, capped {:.1}%, max overshoot {:.2}%, welfare {:.2} $",
        summary.periods,
        summary.congested_periods,
        100.0 * summary.capped_fraction,
        100.0 * summary.max_overshoot_fraction,
        summary.total_welfare
    );
    Ok(0)
}
