use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use nalgebra::{Matrix2, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use tcl_market::agent::{LoadId, PriceStats, UserPrefs};
use tcl_market::error::Error;
use tcl_market::estimation::{bid_from_estimate, em_fit, synthesize_log, EmOptions, MStepOptions, MeasurementLog, NoiseKind, UncertainModel, SAMPLE_H};
use tcl_market::ingest::{ingest_prices, ingest_weather};
use tcl_market::scenario::{perturbed_initial_model, synthesize_population, ScenarioConfig};

use crate::{ensure_dir, write_json, EXIT_NON_MONOTONE};

/// Household settings needed to turn a fitted model into a bid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BidContext {
    pub deadband: f64,
    pub prefs: UserPrefs,
    pub stats: PriceStats,
    pub rated_kw: f64,
}

impl Default for BidContext {
    fn default() -> Self {
        Self {
            deadband: 1.0,
            prefs: UserPrefs::new(68.0, 72.0, 76.0, 2.0).unwrap(),
            stats: PriceStats::new(0.1, 0.03, 288).unwrap(),
            rated_kw: 3.0,
        }
    }
}

#[derive(clap::Args)]
pub struct Args {
    /// Measurement log CSV (`minute_index,temp_F,mode_on,outdoor_F,solar_gain`).
    #[arg(long)]
    pub log: PathBuf,
    /// Initial model JSON.
    #[arg(long)]
    pub init: PathBuf,
    /// True model JSON; adds a bid comparison to the report.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Bid context JSON (deadband, preferences, price statistics, rated power).
    #[arg(long)]
    pub context: Option<PathBuf>,
    /// Report JSON path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub max_iters: usize,
    /// Update all linear parameters jointly instead of block by block.
    #[arg(long)]
    pub joint: bool,
}

#[derive(Serialize)]
struct BidReport {
    price: f64,
    quantity_kw: f64,
    u1: f64,
    u2: f64,
}

#[derive(Serialize)]
struct Report {
    samples: usize,
    iterations: usize,
    converged: bool,
    non_monotone: bool,
    loglik_trace: Vec<f64>,
    model: UncertainModel,
    estimated_bid: BidReport,
    true_bid: Option<BidReport>,
    bid_error_pct: Option<f64>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()).into());
    }
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn bid(model: &UncertainModel, log: &MeasurementLog, ctx: &BidContext) -> Result<BidReport> {
    let (b, th) = bid_from_estimate(LoadId(0), model, log, ctx.deadband, &ctx.prefs, &ctx.stats, ctx.rated_kw)?;
    Ok(BidReport {
        price: b.price,
        quantity_kw: b.quantity,
        u1: th.u1,
        u2: th.u2,
    })
}

pub fn run(args: &Args) -> Result<u8> {
    let log = MeasurementLog::read_csv(&args.log)?;
    let init: UncertainModel = read_json(&args.init)?;
    let truth: Option<UncertainModel> = args.truth.as_deref().map(read_json).transpose()?;
    let ctx: BidContext = match &args.context {
        Some(p) => read_json(p)?,
        None => BidContext::default(),
    };

    let opts = EmOptions {
        max_iters: args.max_iters,
        m_step: MStepOptions { joint: args.joint, ..Default::default() },
        ..Default::default()
    };
    let fit = em_fit(&log, &init, &opts)?;
    let estimated_bid = bid(&fit.model, &log, &ctx)?;
    let true_bid = truth.as_ref().map(|t| bid(t, &log, &ctx)).transpose()?;
    let bid_error_pct = true_bid.as_ref().map(|t| 100.0 * (estimated_bid.price - t.price).abs() / t.price.abs());

    let report = Report {
        samples: log.len(),
        iterations: fit.iterations,
        converged: fit.converged,
        non_monotone: fit.non_monotone,
        loglik_trace: fit.loglik_trace,
        model: fit.model,
        estimated_bid,
        true_bid,
        bid_error_pct,
    };
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(&dir.to_path_buf())?;
    }
    write_json(&args.out, &report)?;

    print!("{} iterations, converged {}, bid {:.5} $/kWh", report.iterations, report.converged, report.estimated_bid.price);
    match report.bid_error_pct {
        Some(e) => println!(", error vs truth {e:.3}%"),
        None => println!(),
    }
    if report.non_monotone && !report.converged {
        eprintln!("error: log-likelihood decreased and EM did not converge");
        return Ok(EXIT_NON_MONOTONE);
    }
    Ok(0)
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Noise {
    Gaussian,
    Uniform,
}

#[derive(clap::Args)]
pub struct SynthArgs {
    /// Scenario TOML supplying weather, prices, population size and seed.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for `log.csv`, `truth.json`, `init.json` and `context.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed of the synthetic noise; defaults to the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Household index within the synthesized population.
    #[arg(long, default_value_t = 0)]
    pub household: usize,
    /// First weather minute of the log.
    #[arg(long, default_value_t = 600)]
    pub start_minute: usize,
    #[arg(long, default_value_t = 360)]
    pub minutes: usize,
    /// Relative error of the physical parameters behind the initial model.
    #[arg(long, default_value_t = 0.1)]
    pub init_error: f64,
    #[arg(long, value_enum, default_value_t = Noise::Gaussian)]
    pub noise: Noise,
}

pub fn synth(args: &SynthArgs) -> Result<u8> {
    let cfg = ScenarioConfig::from_toml_file(&args.config)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let weather = ingest_weather(&cfg.weather_path)?;
    let prices = ingest_prices(&cfg.price_path)?;
    let pop = synthesize_population(cfg.n_households, cfg.seed)?;
    let Some(h) = pop.get(args.household) else {
        bail!("household {} out of range (population {})", args.household, pop.len())
    };
    let house = h.house.as_ref().context("synthesized household has no physical parameters")?;
    let exog = (args.start_minute..args.start_minute + args.minutes)
        .map(|m| weather.at(m).with_context(|| format!("weather has no minute {m}")))
        .collect::<Result<Vec<_>>>()?;

    let t0 = h.prefs.t_desired;
    let truth = UncertainModel::discretize(
        &h.model,
        SAMPLE_H,
        Matrix2::new(1e-4, 0.0, 0.0, 1e-5),
        0.0025,
        Vector2::new(t0, t0),
        Matrix2::identity() * 0.01,
    )?;
    let noise = match args.noise {
        Noise::Gaussian => NoiseKind::Gaussian,
        Noise::Uniform => NoiseKind::Uniform,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let syn = synthesize_log(&truth, &exog, t0, h.model.deadband, true, noise, &mut rng)?;
    let init = perturbed_initial_model(house, h.model.deadband, args.init_error, syn.log.temps[0], &mut rng)?;
    let (mean, std) = prices.mean_std();
    let ctx = BidContext {
        deadband: h.model.deadband,
        prefs: h.prefs,
        stats: PriceStats::new(mean, std, prices.prices.len())?,
        rated_kw: h.model.rated_power,
    };

    ensure_dir(&args.out)?;
    syn.log.write_csv(&args.out.join("log.csv"))?;
    write_json(&args.out.join("truth.json"), &truth)?;
    write_json(&args.out.join("init.json"), &init)?;
    write_json(&args.out.join("context.json"), &ctx)?;
    println!("wrote {} samples to {}", syn.log.len(), args.out.display());
    Ok(0)
}
