//! Population synthesis and the five-minute market loop.
//!
//! Each period every household bids from its current state, the coordinator
//! clears, and each household maps the clearing price to a setpoint and
//! simulates its thermal dynamics over the period. Weather is held at its
//! period-start value within a period.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use chrono::Duration;
use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{
    compute_u1_u2, dispatch_bounds, dispatch_setpoint, Bid, LoadId, PriceHistory, PriceStats, QuadraticValuation,
    SetpointThresholds, UserPrefs, DEFAULT_WINDOW,
};
use crate::error::{Error, Result};
use crate::estimation::{
    bid_from_estimate, em_fit, EmOptions, MStepOptions, MeasurementLog, RankPolicy, UncertainModel, DEFAULT_LOG_LEN,
    SAMPLE_H,
};
use crate::ingest::{format_timestamp, ingest_prices, ingest_weather, PriceSeries, WeatherSeries};
use crate::market::{build_demand_curve, clear, clear_at_price, ClearingOptions, ClearingResult, CostModel, MarginalRule};
use crate::thermal::{simulate_interval, BuildingModel, EtpParams, HybridState, PhysicalHouse, DEFAULT_DEADBAND_F};

/// Unresponsive feeder load per household when not configured, kW.
pub const UNRESPONSIVE_KW_PER_HOUSEHOLD: f64 = 12.0;
const MAX_DRAW_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BiddingMode {
    KnownParams,
    OutputBased,
    /// Bid price multiplied by `1 + (pct / 100) * U[-1, 1]` before submission.
    Perturbed { pct: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PricingMode {
    Mechanism,
    /// Everyone pays the base price; capacity is not enforced.
    Rtp,
    /// Base price, or `gamma` times the base price when demand at the base price exceeds capacity.
    FixedRatio { gamma: f64 },
}

/// Settings of output-based bidding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimationSettings {
    /// Relative error of the initial physical-parameter guess.
    pub init_error: f64,
    /// Standard deviation of the thermometer noise, F.
    pub measurement_std_f: f64,
    pub initial_iters: usize,
    pub iters_per_period: usize,
    pub log_len: usize,
}

impl Default for EstimationSettings {
    fn default() -> Self {
        Self {
            init_error: 0.1,
            measurement_std_f: 0.05,
            initial_iters: 100,
            iters_per_period: 3,
            log_len: DEFAULT_LOG_LEN,
        }
    }
}

fn default_fraction() -> f64 {
    0.6
}
fn default_period() -> u32 {
    5
}
fn default_horizon() -> f64 {
    24.0
}
fn default_warmup() -> f64 {
    6.0
}
fn default_bidding() -> BiddingMode {
    BiddingMode::KnownParams
}
fn default_pricing() -> PricingMode {
    PricingMode::Mechanism
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_households: usize,
    /// Feeder limit, kW. Defaults to the unresponsive load plus
    /// `capacity_fraction` of the aggregate rated power.
    #[serde(default)]
    pub feeder_capacity_kw: Option<f64>,
    /// Defaults to [`UNRESPONSIVE_KW_PER_HOUSEHOLD`] per household.
    #[serde(default)]
    pub unresponsive_kw: Option<f64>,
    #[serde(default = "default_fraction")]
    pub capacity_fraction: f64,
    #[serde(default = "default_period")]
    pub period_minutes: u32,
    #[serde(default = "default_horizon")]
    pub horizon_hours: f64,
    /// Thermostat-only lead-in before the first market period, driven by the
    /// last hours of the weather file.
    #[serde(default = "default_warmup")]
    pub warmup_hours: f64,
    pub weather_path: PathBuf,
    pub price_path: PathBuf,
    /// Household file; synthesized from `seed` when absent.
    #[serde(default)]
    pub population_path: Option<PathBuf>,
    pub seed: u64,
    #[serde(default = "default_bidding")]
    pub bidding_mode: BiddingMode,
    #[serde(default = "default_pricing")]
    pub pricing_mode: PricingMode,
    #[serde(default)]
    pub marginal_rule: MarginalRule,
    #[serde(default)]
    pub estimation: EstimationSettings,
}

impl ScenarioConfig {
    /// Reads a TOML config; relative paths resolve against the config's directory.
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::schema(path.display().to_string(), e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.weather_path);
        resolve(&mut cfg.price_path);
        if let Some(p) = cfg.population_path.as_mut() {
            resolve(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_households == 0 {
            return Err(Error::InvalidParams("n_households must be >= 1".into()));
        }
        if self.period_minutes != 5 {
            return Err(Error::InvalidParams(format!("only 5-minute periods are supported, got {}", self.period_minutes)));
        }
        if !(self.horizon_hours > 0.0) || !(self.warmup_hours >= 0.0) {
            return Err(Error::InvalidParams("horizon must be > 0 and warm-up >= 0".into()));
        }
        if !(self.capacity_fraction > 0.0) {
            return Err(Error::InvalidParams("capacity_fraction must be > 0".into()));
        }
        match self.bidding_mode {
            BiddingMode::Perturbed { pct } if !(pct >= 0.0) => {
                return Err(Error::InvalidParams(format!("perturbation must be >= 0, got {pct}")));
            }
            _ => {}
        }
        if let PricingMode::FixedRatio { gamma } = self.pricing_mode {
            if !(gamma >= 1.0) {
                return Err(Error::InvalidParams(format!("gamma must be >= 1, got {gamma}")));
            }
        }
        if let (Some(cap), Some(uc)) = (self.feeder_capacity_kw, self.unresponsive_kw) {
            if !(cap > uc) {
                return Err(Error::InvalidParams(format!("feeder capacity {cap} kW must exceed unresponsive load {uc} kW")));
            }
        }
        Ok(())
    }

    pub fn period_h(&self) -> f64 {
        self.period_minutes as f64 / 60.0
    }

    pub fn periods(&self) -> usize {
        (self.horizon_hours * 60.0 / self.period_minutes as f64).round() as usize
    }

    pub fn unresponsive(&self) -> f64 {
        self.unresponsive_kw
            .unwrap_or(UNRESPONSIVE_KW_PER_HOUSEHOLD * self.n_households as f64)
    }

    /// Feeder capacity for a population.
    pub fn capacity(&self, population: &[Household]) -> f64 {
        self.feeder_capacity_kw.unwrap_or_else(|| {
            self.unresponsive() + self.capacity_fraction * population.iter().map(|h| h.model.rated_power).sum::<f64>()
        })
    }
}

/// One household: thermal model, comfort preferences, valuation and initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct Household {
    pub id: LoadId,
    pub model: BuildingModel,
    /// Physical parameters when synthesized (needed for output-based initialization).
    pub house: Option<PhysicalHouse>,
    pub prefs: UserPrefs,
    pub v_curvature: f64,
    pub v_slope: f64,
    pub init: HybridState,
}

impl Household {
    pub fn valuation(&self, period_h: f64) -> Result<QuadraticValuation> {
        QuadraticValuation::new(self.v_curvature, self.v_slope, self.model.rated_power * period_h)
    }
}

/// Draws a population from fixed uniform ranges; identical seeds give identical populations.
pub fn synthesize_population(n: usize, seed: u64) -> Result<Vec<Household>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| draw_household(LoadId(i as u32), &mut rng)).collect()
}

fn draw_household(id: LoadId, rng: &mut ChaCha8Rng) -> Result<Household> {
    const DESIGN_OUTDOOR_F: f64 = 100.0;
    const DESIGN_SOLAR: f64 = 3000.0;
    const DESIGN_INDOOR_F: f64 = 72.0;
    for _ in 0..MAX_DRAW_ATTEMPTS {
        let ua = rng.random_range(300.0..600.0);
        let hm = rng.random_range(2000.0..4500.0);
        let ca = rng.random_range(500.0..1200.0);
        let cm = rng.random_range(4000.0..10000.0);
        let internal_gain = rng.random_range(1000.0..2500.0);
        let solar_scale = rng.random_range(0.8..1.2);
        let solar_air_fraction = rng.random_range(0.3..0.7);
        let cop = rng.random_range(3.2..3.8);
        let design_load = ua * (DESIGN_OUTDOOR_F - DESIGN_INDOOR_F) + solar_scale * DESIGN_SOLAR + internal_gain;
        let oversize = rng.random_range(1.1..1.5);
        let house = PhysicalHouse {
            ua,
            hm,
            ca,
            cm,
            hvac_btu_per_h: oversize * design_load,
            cop,
            solar_scale,
            solar_air_fraction,
            internal_gain,
        };
        let t_desired = rng.random_range(70.0..74.0);
        let band = rng.random_range(2.0..4.0);
        let k = rng.random_range(1.5..3.0);
        let v_slope = rng.random_range(0.3..0.4);
        let air = t_desired + rng.random_range(-0.5..0.5) * DEFAULT_DEADBAND_F;
        let mass = air - rng.random_range(0.0..0.5);
        let on = rng.random_bool(0.5);
        let model = house.to_model(DEFAULT_DEADBAND_F);
        let Ok(prefs) = UserPrefs::new(t_desired - band, t_desired, t_desired + band, k) else {
            continue;
        };
        if !crate::thermal::is_hurwitz(&model.a) || model.a.determinant() == 0.0 {
            continue;
        }
        // Marginal value halves over the full-period energy.
        let e_m = model.rated_power * crate::thermal::DEFAULT_PERIOD_H;
        return Ok(Household {
            id,
            model,
            house: Some(house),
            prefs,
            v_curvature: -v_slope / (2.0 * e_m),
            v_slope,
            init: HybridState::new(air, mass, on),
        });
    }
    Err(Error::InvalidParams(format!("no valid household drawn for {id} in {MAX_DRAW_ATTEMPTS} attempts")))
}

const POPULATION_HEADER: [&str; 24] = [
    "load_id", "a11", "a12", "a21", "a22", "g11", "g12", "g21", "g22", "drive_on_air", "drive_on_mass", "drive_off_air",
    "drive_off_mass", "deadband", "rated_kw", "t_min", "t_desired", "t_max", "k_slider", "v_curvature", "v_slope",
    "init_air_F", "init_mass_F", "init_on",
];

pub fn write_population(path: &Path, population: &[Household]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(POPULATION_HEADER)?;
    for h in population {
        let m = &h.model;
        let p = &h.prefs;
        let row = [
            h.id.0 as f64,
            m.a[(0, 0)],
            m.a[(0, 1)],
            m.a[(1, 0)],
            m.a[(1, 1)],
            m.exog_gain[(0, 0)],
            m.exog_gain[(0, 1)],
            m.exog_gain[(1, 0)],
            m.exog_gain[(1, 1)],
            m.drive_on[0],
            m.drive_on[1],
            m.drive_off[0],
            m.drive_off[1],
            m.deadband,
            m.rated_power,
            p.t_min,
            p.t_desired,
            p.t_max,
            p.k_slider,
            h.v_curvature,
            h.v_slope,
            h.init.eta[0],
            h.init.eta[1],
            h.init.on as u8 as f64,
        ];
        w.write_record(row.iter().map(|x| format!("{x:?}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_population(path: &Path) -> Result<Vec<Household>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let shown = path.display().to_string();
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != POPULATION_HEADER {
        return Err(Error::schema(&shown, format!("expected header {}", POPULATION_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let v: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::schema(&shown, format!("row {}: {e}", i + 1)))?;
        let model = BuildingModel {
            a: Matrix2::new(v[1], v[2], v[3], v[4]),
            exog_gain: Matrix2::new(v[5], v[6], v[7], v[8]),
            drive_on: Vector2::new(v[9], v[10]),
            drive_off: Vector2::new(v[11], v[12]),
            deadband: v[13],
            rated_power: v[14],
        };
        let bad = |msg: String| Error::schema(&shown, format!("row {}: {msg}", i + 1));
        // Validates A, deadband and rated power.
        model.etp_params(&Vector2::zeros(), crate::thermal::DEFAULT_PERIOD_H).map_err(|e| bad(e.to_string()))?;
        let prefs = UserPrefs::new(v[15], v[16], v[17], v[18]).map_err(|e| bad(e.to_string()))?;
        if !(v[19] < 0.0) {
            return Err(bad(format!("v_curvature must be < 0, got {}", v[19])));
        }
        out.push(Household {
            id: LoadId(v[0] as u32),
            model,
            house: None,
            prefs,
            v_curvature: v[19],
            v_slope: v[20],
            init: HybridState::new(v[21], v[22], v[23] != 0.0),
        });
    }
    Ok(out)
}

/// Per-household outcome of one period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HouseholdPeriod {
    pub load_id: LoadId,
    pub bid_price: f64,
    pub setpoint: f64,
    /// kWh.
    pub energy: f64,
    pub air_f: f64,
    pub on: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeriodRecord {
    pub index: usize,
    pub timestamp: String,
    pub base_price: f64,
    pub clearing: ClearingResult,
    /// Unresponsive plus realized responsive power, kW.
    pub realized_power: f64,
    /// Unresponsive plus cleared responsive power, kW.
    pub cleared_power: f64,
    /// `sum V_i(e_i) - base * sum e_i` over responsive loads, $.
    pub welfare: f64,
    pub households: Vec<HouseholdPeriod>,
}

impl PeriodRecord {
    /// Row of the period CSV: `period,price,p_bar,p_star,congested,cleared_kw,realized_kw,welfare`.
    pub fn csv_row(&self) -> [String; 8] {
        [
            self.index.to_string(),
            format!("{:?}", self.clearing.price),
            self.clearing.p_bar.map(|p| format!("{p:?}")).unwrap_or_default(),
            format!("{:?}", self.clearing.p_star),
            self.clearing.congested.to_string(),
            format!("{:?}", self.cleared_power),
            format!("{:?}", self.realized_power),
            format!("{:?}", self.welfare),
        ]
    }
}

pub const PERIOD_CSV_HEADER: [&str; 8] = ["period", "price", "p_bar", "p_star", "congested", "cleared_kw", "realized_kw", "welfare"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioRun {
    pub capacity_kw: f64,
    pub unresponsive_kw: f64,
    pub records: Vec<PeriodRecord>,
}

impl ScenarioRun {
    /// Periods where realized power stays within the feeder limit.
    pub fn capped_fraction(&self) -> f64 {
        let capped = self.records.iter().filter(|r| r.realized_power <= self.capacity_kw + 1e-9).count();
        capped as f64 / self.records.len().max(1) as f64
    }

    /// Largest excess over capacity as a fraction of capacity (0 when always capped).
    pub fn max_overshoot(&self) -> f64 {
        self.records
            .iter()
            .map(|r| (r.realized_power - self.capacity_kw) / self.capacity_kw)
            .fold(0.0, f64::max)
    }

    pub fn write_period_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(PERIOD_CSV_HEADER)?;
        for r in &self.records {
            w.write_record(r.csv_row())?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Everything a run reads from disk.
#[derive(Debug, Clone)]
pub struct ScenarioInputs {
    pub weather: WeatherSeries,
    pub prices: PriceSeries,
    pub population: Vec<Household>,
}

impl ScenarioInputs {
    pub fn load(cfg: &ScenarioConfig) -> Result<Self> {
        let weather = ingest_weather(&cfg.weather_path)?;
        let prices = ingest_prices(&cfg.price_path)?;
        let population = match &cfg.population_path {
            Some(p) => read_population(p)?,
            None => synthesize_population(cfg.n_households, cfg.seed)?,
        };
        if population.len() != cfg.n_households {
            return Err(Error::InvalidParams(format!(
                "population has {} households, config expects {}",
                population.len(),
                cfg.n_households
            )));
        }
        Ok(Self {
            weather,
            prices,
            population,
        })
    }
}

/// Stream mixing for per-household random streams.
fn mix(seed: u64, period: u64, id: u64) -> u64 {
    let mut z = seed ^ period.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ id.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Measurement history and current fit of one output-based bidder.
#[derive(Debug, Clone)]
struct Estimator {
    temps: VecDeque<f64>,
    modes: VecDeque<bool>,
    exog: VecDeque<Vector2<f64>>,
    model: UncertainModel,
    fitted: bool,
}

impl Estimator {
    /// Appends one sample. `on_fraction` is the relay duty over the minute
    /// just simulated; the previous sample's mode becomes the majority state
    /// of that minute, so each logged mode describes the transition that follows it.
    fn record(&mut self, cap: usize, temp: f64, on: bool, on_fraction: f64, zeta: Vector2<f64>) {
        if let Some(last) = self.modes.back_mut() {
            *last = on_fraction >= 0.5;
        }
        if self.temps.len() == cap {
            self.temps.pop_front();
            self.modes.pop_front();
            self.exog.pop_front();
        }
        self.temps.push_back(temp);
        self.modes.push_back(on);
        self.exog.push_back(zeta);
    }

    fn log(&self) -> Result<MeasurementLog> {
        MeasurementLog::new(
            self.temps.iter().copied().collect(),
            self.modes.iter().copied().collect(),
            self.exog.iter().copied().collect(),
        )
    }
}

/// Initial EM guess: each physical parameter scaled by `1 + err * U[-1, 1]`, then discretized.
pub fn perturbed_initial_model<R: Rng + ?Sized>(house: &PhysicalHouse, deadband: f64, err: f64, first_temp: f64, rng: &mut R) -> Result<UncertainModel> {
    let mut p = |x: f64| x * (1.0 + err * rng.random_range(-1.0..=1.0));
    let guess = PhysicalHouse {
        ua: p(house.ua),
        hm: p(house.hm),
        ca: p(house.ca),
        cm: p(house.cm),
        hvac_btu_per_h: p(house.hvac_btu_per_h),
        cop: house.cop,
        solar_scale: p(house.solar_scale),
        solar_air_fraction: p(house.solar_air_fraction).clamp(0.0, 1.0),
        internal_gain: p(house.internal_gain),
    };
    UncertainModel::discretize(
        &guess.to_model(deadband),
        SAMPLE_H,
        Matrix2::new(1e-4, 0.0, 0.0, 1e-5),
        0.0025,
        Vector2::new(first_temp, first_temp),
        Matrix2::identity() * 0.01,
    )
}

struct Live {
    state: HybridState,
    estimator: Option<Estimator>,
}

/// Runs the market loop over the configured horizon.
pub fn run_scenario(cfg: &ScenarioConfig, inputs: &ScenarioInputs) -> Result<ScenarioRun> {
    cfg.validate()?;
    let period_h = cfg.period_h();
    let periods = cfg.periods();
    let weather = &inputs.weather;
    let prices = &inputs.prices;
    let pop = &inputs.population;
    let q_uc = cfg.unresponsive();
    let capacity = cfg.capacity(pop);
    if !(capacity > q_uc) {
        return Err(Error::Infeasible {
            unresponsive_kw: q_uc,
            capacity_kw: capacity,
        });
    }
    if prices.prices.len() < periods {
        return Err(Error::DataGap {
            path: cfg.price_path.display().to_string(),
            timestamp: format_timestamp(&(prices.start + Duration::minutes(5 * prices.prices.len() as i64))),
        });
    }
    let offset = (prices.start - weather.start).num_minutes();
    let needed_end = offset + (periods * cfg.period_minutes as usize) as i64;
    if offset < 0 || needed_end > weather.minutes() as i64 {
        let missing = if offset < 0 { prices.start } else { weather.start + Duration::minutes(weather.minutes() as i64) };
        return Err(Error::DataGap {
            path: cfg.weather_path.display().to_string(),
            timestamp: format_timestamp(&missing),
        });
    }
    let offset = offset as usize;
    let (mean, std) = PriceSeries {
        start: prices.start,
        prices: prices.prices[..periods].to_vec(),
    }
    .mean_std();
    let mut history = PriceHistory::new(PriceStats::new(mean, std, DEFAULT_WINDOW)?);
    let output_based = cfg.bidding_mode == BiddingMode::OutputBased;
    let est = cfg.estimation;
    let clearing_opts = ClearingOptions {
        period_h,
        marginal: cfg.marginal_rule,
    };

    let mut live = warm_up(cfg, weather, pop, output_based)?;

    let mut records = Vec::with_capacity(periods);
    for t in 0..periods {
        let minute = offset + t * cfg.period_minutes as usize;
        let zeta = weather.at(minute).expect("coverage checked");
        let base = prices.prices[t];
        let stats = history.stats();

        // Bids.
        struct Plan {
            params: EtpParams,
            true_price: f64,
            bounds: SetpointThresholds,
            submitted: Bid,
        }
        let plans: Vec<Plan> = pop
            .par_iter()
            .zip(live.par_iter_mut())
            .map(|(h, lv)| -> Result<Plan> {
                let params = h.model.etp_params(&zeta, period_h)?;
                let q = h.model.rated_power;
                match cfg.bidding_mode {
                    BiddingMode::KnownParams | BiddingMode::Perturbed { .. } => {
                        let th = compute_u1_u2(&lv.state, &params);
                        let bid = crate::agent::step_bid(h.id, &th, &h.prefs, &stats, q)?;
                        let mut submitted = bid;
                        if let BiddingMode::Perturbed { pct } = cfg.bidding_mode {
                            let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, t as u64, h.id.0 as u64));
                            submitted.price *= 1.0 + 0.01 * pct * rng.random_range(-1.0..=1.0);
                        }
                        Ok(Plan {
                            params,
                            true_price: bid.price,
                            bounds: dispatch_bounds(&lv.state, &params),
                            submitted,
                        })
                    }
                    BiddingMode::OutputBased => {
                        let e = lv.estimator.as_mut().expect("output-based estimator");
                        let log = e.log()?;
                        let iters = if e.fitted { est.iters_per_period } else { est.initial_iters };
                        let opts = EmOptions {
                            max_iters: iters,
                            tol: 1e-8,
                            m_step: MStepOptions {
                                joint: false,
                                rank: RankPolicy::HoldPrevious,
                            },
                        };
                        match em_fit(&log, &e.model, &opts) {
                            Ok(fit) => e.model = fit.model,
                            Err(err) => log::warn!("{}: EM step failed in period {t}: {err}; keeping previous fit", h.id),
                        }
                        e.fitted = true;
                        let (bid, th) = bid_from_estimate(h.id, &e.model, &log, h.model.deadband, &h.prefs, &stats, q)?;
                        Ok(Plan {
                            params,
                            true_price: bid.price,
                            bounds: th,
                            submitted: bid,
                        })
                    }
                }
            })
            .collect::<Result<_>>()?;

        // Clearing.
        let bids: Vec<Bid> = plans.iter().map(|p| p.submitted).collect();
        let curve = build_demand_curve(&bids, q_uc);
        let clearing = match cfg.pricing_mode {
            PricingMode::Mechanism => clear(&curve, &CostModel::linear(base), capacity, &clearing_opts)?,
            PricingMode::Rtp => clear_at_price(&curve, base, &clearing_opts),
            PricingMode::FixedRatio { gamma } => {
                let price = if curve.demand_at(base) > capacity { gamma * base } else { base };
                clear_at_price(&curve, price, &clearing_opts)
            }
        };
        let p_c = clearing.price;

        // Response and physics.
        let outcomes: Vec<HouseholdPeriod> = pop
            .par_iter()
            .zip(live.par_iter_mut())
            .zip(plans.par_iter())
            .map(|((h, lv), plan)| -> Result<HouseholdPeriod> {
                let setpoint = dispatch_setpoint(p_c, plan.true_price, &plan.bounds, &h.prefs, &stats);
                let energy = if let Some(e) = lv.estimator.as_mut() {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed ^ 0x5EED, t as u64, h.id.0 as u64));
                    let noise = Normal::new(0.0, est.measurement_std_f.max(0.0)).map_err(|e| Error::InvalidParams(e.to_string()))?;
                    let mut energy = 0.0;
                    for _ in 0..cfg.period_minutes {
                        let out = simulate_interval(&lv.state, setpoint, &plan.params, SAMPLE_H)?;
                        energy += out.energy;
                        lv.state = out.state;
                        e.record(est.log_len, lv.state.air() + noise.sample(&mut rng), lv.state.on, out.on_fraction, zeta);
                    }
                    energy
                } else {
                    let out = simulate_interval(&lv.state, setpoint, &plan.params, period_h)?;
                    lv.state = out.state;
                    out.energy
                };
                Ok(HouseholdPeriod {
                    load_id: h.id,
                    bid_price: plan.submitted.price,
                    setpoint,
                    energy,
                    air_f: lv.state.air(),
                    on: lv.state.on,
                })
            })
            .collect::<Result<_>>()?;

        let total_energy: f64 = outcomes.iter().map(|o| o.energy).sum();
        let mut welfare = -base * total_energy;
        for (h, o) in pop.iter().zip(&outcomes) {
            welfare += h.valuation(period_h)?.value(o.energy.min(h.model.rated_power * period_h));
        }
        let cleared_power = clearing.cleared_power.max(q_uc);
        records.push(PeriodRecord {
            index: t,
            timestamp: format_timestamp(&(prices.start + Duration::minutes(t as i64 * cfg.period_minutes as i64))),
            base_price: base,
            realized_power: q_uc + total_energy / period_h,
            cleared_power,
            welfare,
            clearing,
            households: outcomes,
        });
        history.push(p_c);
    }
    Ok(ScenarioRun {
        capacity_kw: capacity,
        unresponsive_kw: q_uc,
        records,
    })
}

/// Thermostat-only lead-in at each household's desired temperature, driven
/// by the last `warmup_hours` of the weather series (standing in for the
/// previous evening). Output-based bidders record their measurement log here.
fn warm_up(cfg: &ScenarioConfig, weather: &WeatherSeries, pop: &[Household], output_based: bool) -> Result<Vec<Live>> {
    let minutes = (cfg.warmup_hours * 60.0).round() as usize;
    if minutes > weather.minutes() {
        return Err(Error::InvalidParams(format!("warm-up of {minutes} min exceeds the weather series")));
    }
    let start = weather.minutes() - minutes;
    let est = cfg.estimation;
    pop.par_iter()
        .map(|h| -> Result<Live> {
            let mut state = h.init;
            let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed ^ 0x0A11, u64::MAX, h.id.0 as u64));
            let mut estimator = if output_based {
                let house = h
                    .house
                    .as_ref()
                    .ok_or_else(|| Error::InvalidParams(format!("{}: output-based bidding needs physical parameters", h.id)))?;
                let model = perturbed_initial_model(house, h.model.deadband, est.init_error, state.air(), &mut rng)?;
                Some(Estimator {
                    temps: VecDeque::with_capacity(est.log_len),
                    modes: VecDeque::with_capacity(est.log_len),
                    exog: VecDeque::with_capacity(est.log_len),
                    model,
                    fitted: false,
                })
            } else {
                None
            };
            let noise = Normal::new(0.0, est.measurement_std_f.max(0.0)).map_err(|e| Error::InvalidParams(e.to_string()))?;
            let step = cfg.period_minutes as usize;
            let mut m = 0;
            while m < minutes {
                let zeta = weather.at(start + m).expect("in range");
                let params = h.model.etp_params(&zeta, cfg.period_h())?;
                let chunk = step.min(minutes - m);
                if let Some(e) = estimator.as_mut() {
                    for _ in 0..chunk {
                        let out = simulate_interval(&state, h.prefs.t_desired, &params, SAMPLE_H)?;
                        state = out.state;
                        e.record(est.log_len, state.air() + noise.sample(&mut rng), state.on, out.on_fraction, zeta);
                    }
                } else {
                    state = simulate_interval(&state, h.prefs.t_desired, &params, chunk as f64 * SAMPLE_H)?.state;
                }
                m += chunk;
            }
            if let Some(e) = estimator.as_mut() {
                if e.temps.len() < 3 {
                    return Err(Error::InvalidParams("output-based bidding needs at least 3 warm-up minutes".into()));
                }
                e.model.m0 = Vector2::new(e.temps[0], e.temps[0]);
            }
            Ok(Live { state, estimator })
        })
        .collect()
}

/// Loads the inputs named in the config and runs it.
pub fn run_scenario_from_config(cfg: &ScenarioConfig) -> Result<ScenarioRun> {
    let inputs = ScenarioInputs::load(cfg)?;
    run_scenario(cfg, &inputs)
}

/// Same scenario with the fixed-ratio pricing rule.
pub fn fixed_ratio_baseline(cfg: &ScenarioConfig, inputs: &ScenarioInputs, gamma: f64) -> Result<ScenarioRun> {
    let mut c = cfg.clone();
    c.pricing_mode = PricingMode::FixedRatio { gamma };
    run_scenario(&c, inputs)
}

/// Smallest `gamma` on the grid whose fixed-ratio run keeps every period within capacity.
pub fn minimal_capping_gamma(cfg: &ScenarioConfig, inputs: &ScenarioInputs, grid: &[f64]) -> Result<Option<(f64, ScenarioRun)>> {
    for &gamma in grid {
        let run = fixed_ratio_baseline(cfg, inputs, gamma)?;
        if run.capped_fraction() == 1.0 {
            return Ok(Some((gamma, run)));
        }
    }
    Ok(None)
}

/// Mean influence index of one population size.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InfluencePoint {
    pub n: usize,
    /// Average over seeds, percent.
    pub mean_index_pct: f64,
    pub per_seed_pct: Vec<f64>,
    /// Seeds whose reference period was congested.
    pub congested_seeds: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfluenceSettings {
    /// Minute of the weather series used as the reference period.
    pub minute: usize,
    pub seeds: u64,
    /// Evenly spaced prices tried across the perturbed agent's price range.
    pub grid: usize,
    pub capacity_fraction: f64,
    pub base_seed: u64,
}

impl Default for InfluenceSettings {
    fn default() -> Self {
        Self {
            minute: 16 * 60,
            seeds: 20,
            grid: 201,
            capacity_fraction: 0.6,
            base_seed: 7,
        }
    }
}

/// Largest percentage change of the clearing price one agent can cause by
/// moving its bid price anywhere within its price range.
///
/// Each population bids from its initial states under the weather at
/// `settings.minute`. There is no unresponsive load, capacity is a fraction
/// of aggregate rated power, and energy is priced at the day's lowest base
/// price so the capacity constraint binds.
pub fn influence_index(weather: &WeatherSeries, prices: &PriceSeries, sizes: &[usize], settings: &InfluenceSettings) -> Result<Vec<InfluencePoint>> {
    let zeta = weather
        .at(settings.minute)
        .ok_or_else(|| Error::InvalidParams(format!("minute {} outside the weather series", settings.minute)))?;
    let (mean, std) = prices.mean_std();
    let stats = PriceStats::new(mean, std, DEFAULT_WINDOW)?;
    let floor = prices.prices.iter().copied().fold(f64::INFINITY, f64::min);
    let cost = CostModel::linear(floor);
    let opts = ClearingOptions::default();
    sizes
        .iter()
        .map(|&n| {
            let per_seed: Vec<(f64, bool)> = (0..settings.seeds)
                .into_par_iter()
                .map(|s| -> Result<(f64, bool)> {
                    let seed = mix(settings.base_seed, n as u64, s);
                    let pop = synthesize_population(n, seed)?;
                    let bids: Vec<Bid> = pop
                        .iter()
                        .map(|h| {
                            let params = h.model.etp_params(&zeta, opts.period_h)?;
                            crate::agent::realistic_bid(h.id, &h.init, &params, &h.prefs, &stats, h.model.rated_power)
                        })
                        .collect::<Result<_>>()?;
                    let capacity = settings.capacity_fraction * pop.iter().map(|h| h.model.rated_power).sum::<f64>();
                    let reference = clear(&build_demand_curve(&bids, 0.0), &cost, capacity, &opts)?;
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1D);
                    let j = rng.random_range(0..n);
                    let spread = pop[j].prefs.k_slider * stats.p_sigma;
                    let (lo, hi) = (stats.p_avg - spread, stats.p_avg + spread);
                    let mut candidates: Vec<f64> = (0..settings.grid)
                        .map(|i| lo + (hi - lo) * i as f64 / (settings.grid.max(2) - 1) as f64)
                        .collect();
                    for b in &bids {
                        for p in [b.price - 1e-9, b.price, b.price + 1e-9] {
                            if p >= lo && p <= hi {
                                candidates.push(p);
                            }
                        }
                    }
                    let mut worst: f64 = 0.0;
                    let mut moved = bids.clone();
                    for p in candidates {
                        moved[j].price = p;
                        let r = clear(&build_demand_curve(&moved, 0.0), &cost, capacity, &opts)?;
                        worst = worst.max((r.price - reference.price).abs() / reference.price * 100.0);
                    }
                    Ok((worst, reference.congested))
                })
                .collect::<Result<_>>()?;
            let vals: Vec<f64> = per_seed.iter().map(|x| x.0).collect();
            Ok(InfluencePoint {
                n,
                mean_index_pct: vals.iter().sum::<f64>() / vals.len().max(1) as f64,
                congested_seeds: per_seed.iter().filter(|x| x.1).count(),
                per_seed_pct: vals,
            })
        })
        .collect()
}
