//! Weather and base-price CSV ingestion.

use std::path::Path;

use chrono::{DateTime, Duration, NaiveDateTime};
use nalgebra::Vector2;
use serde::Deserialize;

use crate::error::{Error, Result};

/// Longest weather gap bridged by interpolation, minutes.
pub const MAX_WEATHER_GAP_MIN: i64 = 5;
/// Price sample spacing, minutes.
pub const PRICE_STEP_MIN: i64 = 5;

const TS_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s, TS_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M"))
        .ok()
        .or_else(|| DateTime::parse_from_rfc3339(s).ok().map(|d| d.naive_local()))
}

pub fn format_timestamp(t: &NaiveDateTime) -> String {
    t.format(TS_FORMAT).to_string()
}

fn open(path: &Path, header: &[&str]) -> Result<csv::Reader<std::fs::File>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let got: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if got != header {
        return Err(Error::schema(
            path.display().to_string(),
            format!("expected header {}, got {}", header.join(","), got.join(",")),
        ));
    }
    Ok(rdr)
}

/// Weather at one-minute cadence; `zeta = [outdoor F, solar gain Btu/h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeatherSeries {
    pub start: NaiveDateTime,
    pub samples: Vec<Vector2<f64>>,
}

impl WeatherSeries {
    pub fn constant(start: NaiveDateTime, minutes: usize, zeta: Vector2<f64>) -> Self {
        Self {
            start,
            samples: vec![zeta; minutes],
        }
    }

    /// Sample at `minute` since the start.
    pub fn at(&self, minute: usize) -> Option<Vector2<f64>> {
        self.samples.get(minute).copied()
    }

    pub fn minutes(&self) -> usize {
        self.samples.len()
    }
}

#[derive(Deserialize)]
struct WeatherRow {
    timestamp_iso: String,
    #[serde(rename = "outdoor_F")]
    outdoor_f: f64,
    solar_gain_btu_per_h: f64,
}

/// Reads a weather CSV and interpolates it linearly onto whole minutes.
///
/// Gaps longer than [`MAX_WEATHER_GAP_MIN`] are reported as [`Error::DataGap`]
/// naming the first missing minute.
pub fn ingest_weather(path: &Path) -> Result<WeatherSeries> {
    let shown = path.display().to_string();
    let mut rdr = open(path, &["timestamp_iso", "outdoor_F", "solar_gain_btu_per_h"])?;
    let mut points: Vec<(NaiveDateTime, Vector2<f64>)> = Vec::new();
    for (i, row) in rdr.deserialize::<WeatherRow>().enumerate() {
        let row = row.map_err(|e| Error::schema(&shown, format!("row {}: {e}", i + 1)))?;
        let t = parse_timestamp(&row.timestamp_iso)
            .ok_or_else(|| Error::schema(&shown, format!("row {}: bad timestamp {:?}", i + 1, row.timestamp_iso)))?;
        if !(row.outdoor_f.is_finite() && row.solar_gain_btu_per_h.is_finite() && row.solar_gain_btu_per_h >= 0.0) {
            return Err(Error::schema(&shown, format!("row {}: non-finite or negative value", i + 1)));
        }
        if let Some((prev, _)) = points.last() {
            if t <= *prev {
                return Err(Error::schema(&shown, format!("row {}: timestamps must increase", i + 1)));
            }
            if (t - *prev).num_minutes() > MAX_WEATHER_GAP_MIN {
                return Err(Error::DataGap {
                    path: shown,
                    timestamp: format_timestamp(&(*prev + Duration::minutes(1))),
                });
            }
        }
        points.push((t, Vector2::new(row.outdoor_f, row.solar_gain_btu_per_h)));
    }
    let Some(&(start, _)) = points.first() else {
        return Err(Error::schema(&shown, "no rows"));
    };
    let end = points.last().unwrap().0;
    let minutes = (end - start).num_minutes() as usize + 1;
    let mut samples = Vec::with_capacity(minutes);
    let mut seg = 0;
    for m in 0..minutes {
        let t = start + Duration::minutes(m as i64);
        while seg + 1 < points.len() && points[seg + 1].0 <= t {
            seg += 1;
        }
        let (t0, z0) = points[seg];
        if seg + 1 == points.len() || t0 == t {
            samples.push(z0);
            continue;
        }
        let (t1, z1) = points[seg + 1];
        let w = (t - t0).num_seconds() as f64 / (t1 - t0).num_seconds() as f64;
        samples.push(z0 + (z1 - z0) * w);
    }
    Ok(WeatherSeries { start, samples })
}

/// Base retail price at five-minute cadence, $/kWh.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    pub start: NaiveDateTime,
    pub prices: Vec<f64>,
}

impl PriceSeries {
    pub fn mean_std(&self) -> (f64, f64) {
        let n = self.prices.len() as f64;
        let mean = self.prices.iter().sum::<f64>() / n;
        let var = self.prices.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }
}

#[derive(Deserialize)]
struct PriceRow {
    timestamp_iso: String,
    base_price_usd_per_kwh: f64,
}

/// Reads a price CSV with strict five-minute spacing.
pub fn ingest_prices(path: &Path) -> Result<PriceSeries> {
    let shown = path.display().to_string();
    let mut rdr = open(path, &["timestamp_iso", "base_price_usd_per_kwh"])?;
    let mut start = None;
    let mut prices = Vec::new();
    for (i, row) in rdr.deserialize::<PriceRow>().enumerate() {
        let row = row.map_err(|e| Error::schema(&shown, format!("row {}: {e}", i + 1)))?;
        let t = parse_timestamp(&row.timestamp_iso)
            .ok_or_else(|| Error::schema(&shown, format!("row {}: bad timestamp {:?}", i + 1, row.timestamp_iso)))?;
        if !row.base_price_usd_per_kwh.is_finite() {
            return Err(Error::schema(&shown, format!("row {}: non-finite price", i + 1)));
        }
        let t0 = *start.get_or_insert(t);
        let expected = t0 + Duration::minutes(PRICE_STEP_MIN * prices.len() as i64);
        if t > expected {
            return Err(Error::DataGap {
                path: shown,
                timestamp: format_timestamp(&expected),
            });
        }
        if t < expected {
            return Err(Error::schema(&shown, format!("row {}: expected {}, got {}", i + 1, format_timestamp(&expected), row.timestamp_iso)));
        }
        prices.push(row.base_price_usd_per_kwh);
    }
    let start = start.ok_or_else(|| Error::schema(&shown, "no rows"))?;
    Ok(PriceSeries { start, prices })
}
