//! Hourly price/power time series, engineered regressors, and splits.
//!
//! Canonical units throughout the crate: power in kW, price in €/MWh, energy
//! in kWh. Conversions happen at ingestion, never downstream.
//!
//! Regressors for period `t` are built exclusively from observations strictly
//! before `t` (lags ≥ 1) and standardized with statistics computed on the
//! training slice only. Hour-of-day bits are appended unstandardized.

use chrono::{NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("missing column: {0}")]
    MissingColumn(String),
    #[error("non-monotonic or duplicate timestamp at row {0}")]
    NonMonotonicTimestamps(usize),
    #[error("gap in hourly series at row {0}")]
    GapInSeries(usize),
    #[error("invalid value in column {column} at row {row}")]
    InvalidValue { row: usize, column: String },
    #[error("insufficient history: {0}")]
    InsufficientHistory(String),
    #[error("invalid split: {0}")]
    BadSplit(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Column names expected in an input CSV.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub timestamp: String,
    pub price: String,
    pub power: String,
    pub availability: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            timestamp: "timestamp".into(),
            price: "price_eur_mwh".into(),
            power: "power_kw".into(),
            availability: "available_evs".into(),
        }
    }
}

/// Chronological three-way split, stored as cut points:
/// train = `0..train_end`, validation = `train_end..val_end`,
/// test = `val_end..len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_end: usize,
    pub val_end: usize,
}

/// Which regressors to engineer. All lags are in hours and must be ≥ 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub price_lags: Vec<usize>,
    pub power_lags: Vec<usize>,
    pub availability_lags: Vec<usize>,
    /// Append a 5-bit binary encoding of the hour of day (unstandardized).
    pub hour_encoding: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        // Price and power for the six previous hours: 12 regressors.
        FeatureConfig {
            price_lags: (1..=6).collect(),
            power_lags: (1..=6).collect(),
            availability_lags: Vec::new(),
            hour_encoding: false,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let lagged = self.price_lags.len() + self.power_lags.len() + self.availability_lags.len();
        if lagged == 0 && !self.hour_encoding {
            return Err(DatasetError::InsufficientHistory(
                "feature configuration produces zero regressors".into(),
            ));
        }
        if lagged == 0 {
            // Hour bits alone carry no fleet state; reject as degenerate.
            return Err(DatasetError::InsufficientHistory(
                "at least one lagged regressor is required".into(),
            ));
        }
        for &l in self
            .price_lags
            .iter()
            .chain(&self.power_lags)
            .chain(&self.availability_lags)
        {
            if l == 0 {
                return Err(DatasetError::InsufficientHistory(
                    "lags must be ≥ 1 to avoid contemporaneous leakage".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn max_lag(&self) -> usize {
        self.price_lags
            .iter()
            .chain(&self.power_lags)
            .chain(&self.availability_lags)
            .copied()
            .max()
            .unwrap_or(0)
    }

    /// Total feature dimension.
    pub fn dim(&self) -> usize {
        self.price_lags.len()
            + self.power_lags.len()
            + self.availability_lags.len()
            + if self.hour_encoding { HOUR_BITS } else { 0 }
    }

    /// Number of leading features that get standardized (hour bits do not).
    pub fn standardized_dim(&self) -> usize {
        self.price_lags.len() + self.power_lags.len() + self.availability_lags.len()
    }
}

pub const HOUR_BITS: usize = 5;

/// Per-feature standardization statistics fitted on the training slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Engineered regressors plus everything needed to rebuild them for new data.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureSet {
    pub config: FeatureConfig,
    pub stats: FeatureStats,
    /// First period with full lag history; `vectors[0]` belongs to it.
    pub offset: usize,
    vectors: Vec<Vec<f64>>,
}

impl FeatureSet {
    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    pub fn vector(&self, t: usize) -> Option<&[f64]> {
        t.checked_sub(self.offset)
            .and_then(|i| self.vectors.get(i))
            .map(Vec::as_slice)
    }
}

/// Aligned hourly records of price, observed aggregate power, engineered
/// regressors, and the chronological split. Immutable once built; shared
/// read-only across workers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimeSeriesDataset {
    timestamps: Vec<NaiveDateTime>,
    price: Vec<f64>,
    power: Vec<f64>,
    availability: Option<Vec<f64>>,
    split: Split,
    features: Option<FeatureSet>,
}

impl TimeSeriesDataset {
    /// Assemble a dataset from aligned in-memory series with the default
    /// 2/3–1/6–1/6 chronological split.
    pub fn from_series(
        timestamps: Vec<NaiveDateTime>,
        price: Vec<f64>,
        power: Vec<f64>,
        availability: Option<Vec<f64>>,
    ) -> Result<Self, DatasetError> {
        if price.len() != timestamps.len() || power.len() != timestamps.len() {
            return Err(DatasetError::BadSplit(
                "series lengths do not match timestamps".into(),
            ));
        }
        if let Some(a) = &availability {
            if a.len() != timestamps.len() {
                return Err(DatasetError::BadSplit(
                    "availability length does not match timestamps".into(),
                ));
            }
        }
        for (row, w) in timestamps.windows(2).enumerate() {
            let dt = w[1] - w[0];
            if dt <= chrono::Duration::zero() {
                return Err(DatasetError::NonMonotonicTimestamps(row + 1));
            }
            if dt != chrono::Duration::hours(1) {
                return Err(DatasetError::GapInSeries(row + 1));
            }
        }
        for (row, v) in price.iter().chain(power.iter()).enumerate() {
            if !v.is_finite() {
                return Err(DatasetError::InvalidValue {
                    row,
                    column: "price/power".into(),
                });
            }
        }
        let split = default_split(timestamps.len());
        Ok(TimeSeriesDataset {
            timestamps,
            price,
            power,
            availability,
            split,
            features: None,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn price(&self) -> &[f64] {
        &self.price
    }

    pub fn power(&self) -> &[f64] {
        &self.power
    }

    pub fn availability(&self) -> Option<&[f64]> {
        self.availability.as_deref()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn features(&self) -> Option<&FeatureSet> {
        self.features.as_ref()
    }

    pub fn with_split(mut self, train_end: usize, val_end: usize) -> Result<Self, DatasetError> {
        if !(0 < train_end && train_end < val_end && val_end <= self.len()) {
            return Err(DatasetError::BadSplit(format!(
                "cut points {train_end}/{val_end} out of order for {} periods",
                self.len()
            )));
        }
        self.split = Split { train_end, val_end };
        self.features = None;
        Ok(self)
    }

    /// Training periods with full lag history.
    pub fn train_indices(&self) -> Vec<usize> {
        let offset = self.features.as_ref().map_or(0, |f| f.offset);
        (offset..self.split.train_end).collect()
    }

    pub fn val_indices(&self) -> Vec<usize> {
        let offset = self.features.as_ref().map_or(0, |f| f.offset);
        (self.split.train_end.max(offset)..self.split.val_end).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        let offset = self.features.as_ref().map_or(0, |f| f.offset);
        (self.split.val_end.max(offset)..self.len()).collect()
    }

    pub fn feature(&self, t: usize) -> Option<&[f64]> {
        self.features.as_ref().and_then(|f| f.vector(t))
    }

    /// Feature vectors for a list of periods; errors if any lacks history.
    pub fn feature_rows(&self, periods: &[usize]) -> Result<Vec<Vec<f64>>, DatasetError> {
        periods
            .iter()
            .map(|&t| {
                self.feature(t).map(<[f64]>::to_vec).ok_or_else(|| {
                    DatasetError::InsufficientHistory(format!("period {t} lacks lag history"))
                })
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String, DatasetError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, DatasetError> {
        let ds: TimeSeriesDataset = serde_json::from_str(text)?;
        Ok(ds)
    }

    /// Write the raw series (not the engineered features) in the input CSV
    /// schema, so simulator output can round-trip through `load_csv`.
    pub fn write_csv(&self, path: &Path) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_path(path)?;
        let schema = CsvSchema::default();
        let mut header = vec![
            schema.timestamp.clone(),
            schema.price.clone(),
            schema.power.clone(),
        ];
        if self.availability.is_some() {
            header.push(schema.availability.clone());
        }
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![
                self.timestamps[i].format("%Y-%m-%dT%H:%M:%S").to_string(),
                format_float(self.price[i]),
                format_float(self.power[i]),
            ];
            if let Some(a) = &self.availability {
                rec.push(format_float(a[i]));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest decimal representation that round-trips.
fn format_float(v: f64) -> String {
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}

fn default_split(n: usize) -> Split {
    let train_end = n * 2 / 3;
    let val_end = train_end + (n - train_end) / 2;
    Split { train_end, val_end }
}

fn parse_timestamp(text: &str) -> Option<NaiveDateTime> {
    const FORMATS: [&str; 4] = [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M:%SZ",
        "%Y-%m-%dT%H:%M",
    ];
    for f in FORMATS {
        if let Ok(ts) = NaiveDateTime::parse_from_str(text, f) {
            return Some(ts);
        }
    }
    chrono::DateTime::parse_from_rfc3339(text)
        .ok()
        .map(|dt| dt.naive_utc())
}

/// Load and validate an hourly CSV (`timestamp,price_eur_mwh,power_kw[,available_evs]`).
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<TimeSeriesDataset, DatasetError> {
    let mut file = std::fs::File::open(path)?;
    let mut text = String::new();
    file.read_to_string(&mut text)?;
    load_csv_str(&text, schema)
}

pub fn load_csv_str(text: &str, schema: &CsvSchema) -> Result<TimeSeriesDataset, DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|_| DatasetError::MissingColumn(schema.timestamp.clone()))?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let ts_col = find(&schema.timestamp)
        .ok_or_else(|| DatasetError::MissingColumn(schema.timestamp.clone()))?;
    let price_col =
        find(&schema.price).ok_or_else(|| DatasetError::MissingColumn(schema.price.clone()))?;
    let power_col =
        find(&schema.power).ok_or_else(|| DatasetError::MissingColumn(schema.power.clone()))?;
    let avail_col = find(&schema.availability);

    let mut timestamps = Vec::new();
    let mut price = Vec::new();
    let mut power = Vec::new();
    let mut availability = avail_col.map(|_| Vec::new());

    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let get = |col: usize, name: &str| -> Result<&str, DatasetError> {
            record.get(col).ok_or_else(|| DatasetError::InvalidValue {
                row,
                column: name.into(),
            })
        };
        let ts_text = get(ts_col, &schema.timestamp)?;
        let ts = parse_timestamp(ts_text.trim()).ok_or_else(|| DatasetError::InvalidValue {
            row,
            column: schema.timestamp.clone(),
        })?;
        let parse_num = |col: usize, name: &str| -> Result<f64, DatasetError> {
            let text = get(col, name)?;
            let v: f64 = text.trim().parse().map_err(|_| DatasetError::InvalidValue {
                row,
                column: name.into(),
            })?;
            if !v.is_finite() {
                return Err(DatasetError::InvalidValue {
                    row,
                    column: name.into(),
                });
            }
            Ok(v)
        };
        if let Some(prev) = timestamps.last() {
            let dt = ts - *prev;
            if dt <= chrono::Duration::zero() {
                return Err(DatasetError::NonMonotonicTimestamps(row));
            }
            if dt != chrono::Duration::hours(1) {
                return Err(DatasetError::GapInSeries(row));
            }
        }
        timestamps.push(ts);
        price.push(parse_num(price_col, &schema.price)?);
        power.push(parse_num(power_col, &schema.power)?);
        if let (Some(col), Some(out)) = (avail_col, availability.as_mut()) {
            out.push(parse_num(col, &schema.availability)?);
        }
    }
    if timestamps.is_empty() {
        return Err(DatasetError::MissingColumn(
            "no data rows present".to_string(),
        ));
    }
    let split = default_split(timestamps.len());
    Ok(TimeSeriesDataset {
        timestamps,
        price,
        power,
        availability,
        split,
        features: None,
    })
}

/// Mean and standard deviation with the constant-feature fallback (std = 1).
pub fn fit_stats(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 1.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std > 1e-12 * (1.0 + mean.abs()) {
        (mean, std)
    } else {
        (mean, 1.0)
    }
}

/// z-score with precomputed statistics.
pub fn standardize(values: &[f64], mean: f64, std: f64) -> Vec<f64> {
    values.iter().map(|v| (v - mean) / std).collect()
}

/// Engineer lagged/categorical regressors and standardize them on training
/// statistics. Periods lacking full lag history are excluded from the splits
/// rather than zero-filled.
pub fn build_features(
    ds: &TimeSeriesDataset,
    cfg: &FeatureConfig,
) -> Result<TimeSeriesDataset, DatasetError> {
    cfg.validate()?;
    if !cfg.availability_lags.is_empty() && ds.availability.is_none() {
        return Err(DatasetError::MissingColumn(
            CsvSchema::default().availability,
        ));
    }
    let offset = cfg.max_lag();
    if offset >= ds.split.train_end {
        return Err(DatasetError::InsufficientHistory(format!(
            "max lag {offset} consumes the whole training slice ({} periods)",
            ds.split.train_end
        )));
    }

    let n = ds.len();
    let sdim = cfg.standardized_dim();
    // Raw lagged features for every period with history.
    let mut raw = vec![vec![0.0f64; sdim]; n - offset];
    for t in offset..n {
        let row = &mut raw[t - offset];
        let mut k = 0;
        for &l in &cfg.price_lags {
            row[k] = ds.price[t - l];
            k += 1;
        }
        for &l in &cfg.power_lags {
            row[k] = ds.power[t - l];
            k += 1;
        }
        if let Some(avail) = &ds.availability {
            for &l in &cfg.availability_lags {
                row[k] = avail[t - l];
                k += 1;
            }
        }
    }

    // Statistics from the training slice only.
    let train_rows = ds.split.train_end - offset;
    let mut mean = vec![0.0; sdim];
    let mut std = vec![1.0; sdim];
    for f in 0..sdim {
        let col: Vec<f64> = raw[..train_rows].iter().map(|r| r[f]).collect();
        let (m, s) = fit_stats(&col);
        mean[f] = m;
        std[f] = s;
    }

    let mut vectors = Vec::with_capacity(n - offset);
    for (i, row) in raw.into_iter().enumerate() {
        let t = i + offset;
        let mut v = Vec::with_capacity(cfg.dim());
        for f in 0..sdim {
            v.push((row[f] - mean[f]) / std[f]);
        }
        if cfg.hour_encoding {
            let hour = ds.timestamps[t].hour();
            for bit in 0..HOUR_BITS {
                v.push(((hour >> bit) & 1) as f64);
            }
        }
        vectors.push(v);
    }

    let mut out = ds.clone();
    out.features = Some(FeatureSet {
        config: cfg.clone(),
        stats: FeatureStats { mean, std },
        offset,
        vectors,
    });
    Ok(out)
}

/// Rebuild feature vectors for new data using stats fitted elsewhere (the
/// prediction path: a persisted model's stats applied to fresh observations).
pub fn apply_features(
    ds: &TimeSeriesDataset,
    cfg: &FeatureConfig,
    stats: &FeatureStats,
) -> Result<TimeSeriesDataset, DatasetError> {
    cfg.validate()?;
    if !cfg.availability_lags.is_empty() && ds.availability.is_none() {
        return Err(DatasetError::MissingColumn(
            CsvSchema::default().availability,
        ));
    }
    if stats.mean.len() != cfg.standardized_dim() {
        return Err(DatasetError::InsufficientHistory(
            "standardization stats do not match feature configuration".into(),
        ));
    }
    let offset = cfg.max_lag();
    if offset >= ds.len() {
        return Err(DatasetError::InsufficientHistory(format!(
            "max lag {offset} exceeds series length {}",
            ds.len()
        )));
    }
    let n = ds.len();
    let mut vectors = Vec::with_capacity(n - offset);
    for t in offset..n {
        let mut v = Vec::with_capacity(cfg.dim());
        let mut k = 0usize;
        for &l in &cfg.price_lags {
            v.push((ds.price[t - l] - stats.mean[k]) / stats.std[k]);
            k += 1;
        }
        for &l in &cfg.power_lags {
            v.push((ds.power[t - l] - stats.mean[k]) / stats.std[k]);
            k += 1;
        }
        if let Some(avail) = &ds.availability {
            for &l in &cfg.availability_lags {
                v.push((avail[t - l] - stats.mean[k]) / stats.std[k]);
                k += 1;
            }
        }
        if cfg.hour_encoding {
            let hour = ds.timestamps[t].hour();
            for bit in 0..HOUR_BITS {
                v.push(((hour >> bit) & 1) as f64);
            }
        }
        vectors.push(v);
    }
    let mut out = ds.clone();
    out.features = Some(FeatureSet {
        config: cfg.clone(),
        stats: stats.clone(),
        offset,
        vectors,
    });
    Ok(out)
}
