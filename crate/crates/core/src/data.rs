//! Sensor series ingestion and preprocessing.
//!
//! Raw per-sensor CSV files go through `flag → fill → resample` and land on a
//! common 15-minute grid. A [`Dataset`] is the on-disk result (a manifest plus
//! one CSV per channel); a [`SeriesSet`] is the in-memory, split and
//! standardized view the trainer draws windows from.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, NaiveDateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::train::Standardizer;

/// Resolution of the common grid, in minutes.
pub const GRID_MINUTES: u32 = 15;
/// Constant runs at least this long (in minutes) are treated as sensor dropouts.
pub const FLAT_RUN_MINUTES: u32 = 60;
pub const HISTOGRAM_BINS: usize = 50;
pub const MANIFEST_FILE: &str = "dataset.json";
pub const CHANNEL_DIR: &str = "channels";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    WaterHeight,
    Discharge,
    Precipitation,
}

impl MetricKind {
    /// Guess the kind from a file stem: `precip*`/`rain*` are precipitation,
    /// `discharge*`/`flow*`/`q_*` discharge, everything else water height.
    pub fn from_file_stem(stem: &str) -> MetricKind {
        let s = stem.to_ascii_lowercase();
        if s.starts_with("precip") || s.starts_with("rain") {
            MetricKind::Precipitation
        } else if s.starts_with("discharge") || s.starts_with("flow") || s.starts_with("q_") {
            MetricKind::Discharge
        } else {
            MetricKind::WaterHeight
        }
    }

    pub fn is_precipitation(self) -> bool {
        self == MetricKind::Precipitation
    }
}

/// One sensor's samples at its native resolution; `None` marks a missing value.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub sensor_id: String,
    pub kind: MetricKind,
    pub resolution_minutes: u32,
    pub timestamps: Vec<DateTime<Utc>>,
    pub values: Vec<Option<f64>>,
}

fn check_resolution(minutes: u32) -> Result<()> {
    if matches!(minutes, 1 | 15 | 60) {
        Ok(())
    } else {
        Err(Error::Input(format!(
            "resolution {minutes} min is not one of 1, 15, 60"
        )))
    }
}

impl RawSeries {
    pub fn new(
        sensor_id: impl Into<String>,
        kind: MetricKind,
        resolution_minutes: u32,
        timestamps: Vec<DateTime<Utc>>,
        values: Vec<Option<f64>>,
    ) -> Result<Self> {
        check_resolution(resolution_minutes)?;
        if timestamps.len() != values.len() {
            return Err(Error::Dimension {
                op: "RawSeries::new",
                lhs: vec![timestamps.len()],
                rhs: vec![values.len()],
            });
        }
        if let Some(w) = timestamps.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::Input(format!("timestamps not strictly increasing at {}", w[1])));
        }
        if let Some(v) = values.iter().flatten().find(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite sample {v}")));
        }
        Ok(RawSeries {
            sensor_id: sensor_id.into(),
            kind,
            resolution_minutes,
            timestamps,
            values,
        })
    }

    /// Gap-free series on a regular grid starting at `start`.
    pub fn regular(
        sensor_id: impl Into<String>,
        kind: MetricKind,
        resolution_minutes: u32,
        start: DateTime<Utc>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let step = Duration::minutes(resolution_minutes as i64);
        let timestamps = (0..values.len()).map(|i| start + step * i as i32).collect();
        Self::new(
            sensor_id,
            kind,
            resolution_minutes,
            timestamps,
            values.into_iter().map(Some).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Reads a `timestamp,value` CSV. The resolution is inferred from the
    /// smallest timestamp spacing unless given.
    pub fn read_csv(path: &Path, kind: Option<MetricKind>, resolution_minutes: Option<u32>) -> Result<Self> {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Input(format!("{}: not a file name", path.display())))?
            .to_string();
        let (timestamps, values) = read_samples(path)?;
        let resolution = match resolution_minutes {
            Some(r) => r,
            None => infer_resolution(path, &timestamps)?,
        };
        let kind = kind.unwrap_or_else(|| MetricKind::from_file_stem(&stem));
        Self::new(stem, kind, resolution, timestamps, values).map_err(|e| match e {
            Error::Input(message) => Error::Schema {
                path: path.to_path_buf(),
                line: 0,
                message,
            },
            other => other,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(self.len() * 32 + 16);
        out.push_str("timestamp,value\n");
        for (t, v) in self.timestamps.iter().zip(&self.values) {
            out.push_str(&t.to_rfc3339_opts(SecondsFormat::Secs, true));
            out.push(',');
            if let Some(v) = v {
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Places samples on a contiguous grid from first to last timestamp,
    /// inserting `None` for absent rows.
    pub fn regularize(&self) -> Result<RawSeries> {
        let Some(&start) = self.timestamps.first() else {
            return Ok(self.clone());
        };
        let step = self.resolution_minutes as i64 * 60;
        let last = *self.timestamps.last().expect("non-empty");
        let n = ((last - start).num_seconds() / step) as usize + 1;
        let mut values = vec![None; n];
        for (t, v) in self.timestamps.iter().zip(&self.values) {
            let offset = (*t - start).num_seconds();
            if offset % step != 0 {
                return Err(Error::Input(format!(
                    "{}: timestamp {t} is off the {}-minute grid",
                    self.sensor_id, self.resolution_minutes
                )));
            }
            values[(offset / step) as usize] = *v;
        }
        let timestamps = (0..n).map(|i| start + Duration::seconds(step * i as i64)).collect();
        Ok(RawSeries {
            timestamps,
            values,
            ..self.clone()
        })
    }

    fn is_regular(&self) -> bool {
        let step = Duration::minutes(self.resolution_minutes as i64);
        self.timestamps.windows(2).all(|w| w[1] - w[0] == step)
    }

    fn complete_values(&self, op: &str) -> Result<Vec<f64>> {
        self.values
            .iter()
            .map(|v| v.ok_or_else(|| Error::Contract(format!("{op} on {} with missing samples", self.sensor_id))))
            .collect()
    }
}

fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ]
    .iter()
    .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
    .map(|t| t.and_utc())
}

type Samples = (Vec<DateTime<Utc>>, Vec<Option<f64>>);

fn read_samples(path: &Path) -> Result<Samples> {
    let schema = |line: u64, message: String| Error::Schema {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => schema(0, format!("{other:?}")),
        })?;
    let headers = reader.headers().map_err(|e| schema(1, e.to_string()))?.clone();
    if headers.len() != 2 || &headers[0] != "timestamp" || &headers[1] != "value" {
        return Err(schema(
            1,
            format!(
                "expected header `timestamp,value`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            schema(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let t = parse_timestamp(&record[0])
            .ok_or_else(|| schema(line, format!("column timestamp: cannot parse `{}`", &record[0])))?;
        let v = match &record[1] {
            "" => None,
            s => Some(
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| schema(line, format!("column value: cannot parse `{s}`")))?,
            ),
        };
        if let Some(prev) = timestamps.last() {
            if t <= *prev {
                return Err(schema(line, format!("timestamp {t} not after previous {prev}")));
            }
        }
        timestamps.push(t);
        values.push(v);
    }
    if timestamps.is_empty() {
        return Err(schema(1, "no samples".into()));
    }
    Ok((timestamps, values))
}

fn infer_resolution(path: &Path, timestamps: &[DateTime<Utc>]) -> Result<u32> {
    let min_gap = timestamps
        .windows(2)
        .map(|w| (w[1] - w[0]).num_seconds())
        .min()
        .ok_or_else(|| Error::Schema {
            path: path.to_path_buf(),
            line: 0,
            message: "cannot infer resolution from a single sample".into(),
        })?;
    if min_gap % 60 == 0 && check_resolution((min_gap / 60) as u32).is_ok() {
        Ok((min_gap / 60) as u32)
    } else {
        Err(Error::Schema {
            path: path.to_path_buf(),
            line: 0,
            message: format!("sample spacing of {min_gap} s is not 1, 15 or 60 minutes"),
        })
    }
}

/// Marks missing samples plus every maximal run of equal values lasting an
/// hour or more (four samples at 15 minutes).
pub fn flag_missing_runs(s: &RawSeries) -> Vec<bool> {
    let threshold = (FLAT_RUN_MINUTES / s.resolution_minutes).max(2) as usize;
    let mut mask: Vec<bool> = s.values.iter().map(Option::is_none).collect();
    let mut i = 0;
    while i < s.values.len() {
        let Some(v) = s.values[i] else {
            i += 1;
            continue;
        };
        let mut j = i + 1;
        while j < s.values.len() && s.values[j] == Some(v) {
            j += 1;
        }
        if j - i >= threshold {
            mask[i..j].iter_mut().for_each(|m| *m = true);
        }
        i = j;
    }
    mask
}

/// Natural cubic spline through strictly increasing knots, extended linearly
/// beyond the end knots.
#[derive(Clone, Debug)]
pub struct NaturalSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    /// second derivatives at the knots
    m: Vec<f64>,
}

impl NaturalSpline {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Dimension {
                op: "NaturalSpline::new",
                lhs: vec![x.len()],
                rhs: vec![y.len()],
            });
        }
        if x.len() < 4 {
            return Err(Error::Interpolation(format!("need at least 4 knots, have {}", x.len())));
        }
        if x.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Interpolation("knots must be strictly increasing".into()));
        }
        let n = x.len();
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        // tridiagonal system for interior second derivatives (Thomas algorithm)
        let k = n - 2;
        let mut diag = vec![0.0; k];
        let mut upper = vec![0.0; k];
        let mut rhs = vec![0.0; k];
        for r in 0..k {
            let i = r + 1;
            diag[r] = 2.0 * (h[i - 1] + h[i]);
            upper[r] = h[i];
            rhs[r] = 6.0 * ((y[i + 1] - y[i]) / h[i] - (y[i] - y[i - 1]) / h[i - 1]);
        }
        for r in 1..k {
            let w = h[r] / diag[r - 1];
            diag[r] -= w * upper[r - 1];
            rhs[r] -= w * rhs[r - 1];
        }
        let mut m = vec![0.0; n];
        for r in (0..k).rev() {
            let next = if r + 1 < k { m[r + 2] } else { 0.0 };
            m[r + 1] = (rhs[r] - upper[r] * next) / diag[r];
        }
        Ok(NaturalSpline { x, y, m })
    }

    pub fn second_derivatives(&self) -> &[f64] {
        &self.m
    }

    pub fn eval(&self, t: f64) -> f64 {
        let (x, y, m) = (&self.x, &self.y, &self.m);
        let n = x.len();
        if t <= x[0] {
            let h = x[1] - x[0];
            let slope = (y[1] - y[0]) / h - h * (2.0 * m[0] + m[1]) / 6.0;
            return y[0] + slope * (t - x[0]);
        }
        if t >= x[n - 1] {
            let h = x[n - 1] - x[n - 2];
            let slope = (y[n - 1] - y[n - 2]) / h + h * (m[n - 2] + 2.0 * m[n - 1]) / 6.0;
            return y[n - 1] + slope * (t - x[n - 1]);
        }
        let i = x.partition_point(|&k| k <= t) - 1;
        let h = x[i + 1] - x[i];
        let a = x[i + 1] - t;
        let b = t - x[i];
        m[i] * a * a * a / (6.0 * h)
            + m[i + 1] * b * b * b / (6.0 * h)
            + (y[i] / h - m[i] * h / 6.0) * a
            + (y[i + 1] / h - m[i + 1] * h / 6.0) * b
    }
}

/// Replaces masked samples by a natural cubic spline through the rest.
pub fn spline_fill(s: &RawSeries, mask: &[bool]) -> Result<RawSeries> {
    if mask.len() != s.len() {
        return Err(Error::Dimension {
            op: "spline_fill",
            lhs: vec![s.len()],
            rhs: vec![mask.len()],
        });
    }
    if !mask.iter().any(|&m| m) {
        return Ok(s.clone());
    }
    let origin = s.timestamps[0];
    let minutes = |t: &DateTime<Utc>| (*t - origin).num_seconds() as f64 / 60.0;
    let (kx, ky): (Vec<f64>, Vec<f64>) = s
        .timestamps
        .iter()
        .zip(&s.values)
        .zip(mask)
        .filter_map(|((t, v), &m)| match (v, m) {
            (Some(v), false) => Some((minutes(t), *v)),
            _ => None,
        })
        .unzip();
    let spline = NaturalSpline::new(kx, ky).map_err(|e| match e {
        Error::Interpolation(m) => Error::Interpolation(format!("{}: {m}", s.sensor_id)),
        other => other,
    })?;
    let values = s
        .timestamps
        .iter()
        .zip(&s.values)
        .zip(mask)
        .map(|((t, v), &m)| if m { Some(spline.eval(minutes(t))) } else { *v })
        .collect();
    Ok(RawSeries { values, ..s.clone() })
}

/// Averages complete 15-sample blocks of a 1-minute series aligned to quarter
/// hours; leading samples before the first boundary and a partial trailing
/// block are dropped.
pub fn downsample_to_15min(s: &RawSeries) -> Result<RawSeries> {
    if s.resolution_minutes != 1 {
        return Err(Error::Contract(format!(
            "downsampling expects 1-minute input, {} has {} min",
            s.sensor_id, s.resolution_minutes
        )));
    }
    if !s.is_regular() {
        return Err(Error::Contract(format!("{} is not on a regular grid", s.sensor_id)));
    }
    let values = s.complete_values("downsampling")?;
    let block = GRID_MINUTES as usize;
    let lead = s
        .timestamps
        .iter()
        .position(|t| t.timestamp() % (block as i64 * 60) == 0)
        .unwrap_or(s.len());
    if lead > 0 {
        log::info!("{}: dropped {lead} samples before the first quarter hour", s.sensor_id);
    }
    let body = &values[lead..];
    let tail = body.len() % block;
    if tail > 0 {
        log::info!("{}: dropped partial trailing block of {tail} samples", s.sensor_id);
    }
    let out: Vec<f64> = body
        .chunks_exact(block)
        .map(|c| c.iter().sum::<f64>() / block as f64)
        .collect();
    let timestamps = (0..out.len()).map(|i| s.timestamps[lead + i * block]).collect();
    RawSeries::new(
        s.sensor_id.clone(),
        s.kind,
        GRID_MINUTES,
        timestamps,
        out.into_iter().map(Some).collect(),
    )
}

/// Moves an hourly precipitation series onto the 15-minute grid by following
/// each value with three zeros, which keeps every hourly total.
pub fn upsample_precip(p: &RawSeries) -> Result<RawSeries> {
    if p.resolution_minutes != 60 {
        return Err(Error::Contract(format!(
            "zero insertion expects 60-minute input, {} has {} min",
            p.sensor_id, p.resolution_minutes
        )));
    }
    let per_hour = (60 / GRID_MINUTES) as usize;
    let mut timestamps = Vec::with_capacity(p.len() * per_hour);
    let mut values = Vec::with_capacity(p.len() * per_hour);
    for (t, v) in p.timestamps.iter().zip(&p.values) {
        for k in 0..per_hour {
            timestamps.push(*t + Duration::minutes((k as u32 * GRID_MINUTES) as i64));
            values.push(if k == 0 { *v } else { v.map(|_| 0.0) });
        }
    }
    RawSeries::new(p.sensor_id.clone(), p.kind, GRID_MINUTES, timestamps, values)
}

/// A channel after preprocessing: gap-free on the 15-minute grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessedChannel {
    pub id: String,
    pub kind: MetricKind,
    pub native_resolution_minutes: u32,
    pub start: DateTime<Utc>,
    pub values: Vec<f64>,
    pub log: Vec<String>,
}

/// Runs the full per-channel pipeline: regularize, flag flat runs and gaps,
/// spline-fill, then resample to 15 minutes. Precipitation is never flagged
/// (dry spells are legitimately constant) and its gaps count as dry.
pub fn preprocess_series(raw: &RawSeries) -> Result<ProcessedChannel> {
    let mut log = Vec::new();
    let mut s = raw.regularize()?;
    let gaps = s.values.iter().filter(|v| v.is_none()).count();
    if gaps > 0 {
        log.push(format!("regularize: {gaps} absent samples"));
    }
    if s.kind.is_precipitation() {
        if gaps > 0 {
            s.values.iter_mut().filter(|v| v.is_none()).for_each(|v| *v = Some(0.0));
            log.push(format!("fill: {gaps} missing precipitation samples set to 0"));
        }
    } else {
        let mask = flag_missing_runs(&s);
        let flagged = mask.iter().filter(|&&m| m).count();
        log.push(format!("flag: {flagged} samples missing or in flat runs"));
        if flagged > 0 {
            s = spline_fill(&s, &mask)?;
            log.push(format!("fill: natural cubic spline over {flagged} samples"));
        }
    }
    let s = match (s.resolution_minutes, s.kind.is_precipitation()) {
        (15, _) => s,
        (1, _) => {
            log.push("resample: 15-minute block mean".into());
            downsample_to_15min(&s)?
        }
        (60, true) => {
            log.push("resample: zero insertion to 15 minutes".into());
            upsample_precip(&s)?
        }
        (r, _) => {
            return Err(Error::Input(format!(
                "{}: no resampling rule for {:?} at {r} min",
                s.sensor_id, s.kind
            )))
        }
    };
    if s.is_empty() {
        return Err(Error::Input(format!(
            "{}: no samples left after resampling",
            s.sensor_id
        )));
    }
    let values = s.complete_values("export")?;
    if s.timestamps[0].timestamp() % (GRID_MINUTES as i64 * 60) != 0 {
        return Err(Error::Input(format!(
            "{}: series does not start on a quarter hour",
            s.sensor_id
        )));
    }
    Ok(ProcessedChannel {
        id: s.sensor_id.clone(),
        kind: s.kind,
        native_resolution_minutes: raw.resolution_minutes,
        start: s.timestamps[0],
        values,
        log,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub density: Vec<f64>,
}

impl Histogram {
    pub fn area(&self) -> f64 {
        self.density
            .iter()
            .zip(self.edges.windows(2))
            .map(|(d, e)| d * (e[1] - e[0]))
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSummary {
    pub mean: f64,
    pub std: f64,
    pub histogram: Histogram,
}

/// Mean, population standard deviation and a 50-bin density histogram.
pub fn summarize(values: &[f64]) -> Result<ChannelSummary> {
    if values.is_empty() {
        return Err(Error::Contract("summary of an empty channel".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let edges: Vec<f64> = (0..=HISTOGRAM_BINS).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0usize; HISTOGRAM_BINS];
    for v in values {
        let bin = (((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
        counts[bin] += 1;
    }
    let density = counts
        .iter()
        .zip(edges.windows(2))
        .map(|(&c, e)| c as f64 / (n * (e[1] - e[0])))
        .collect();
    Ok(ChannelSummary {
        mean,
        std,
        histogram: Histogram { edges, density },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RainConfig {
    NoRain,
    RainHist,
    RainFull,
}

impl RainConfig {
    pub const ALL: [RainConfig; 3] = [RainConfig::NoRain, RainConfig::RainHist, RainConfig::RainFull];

    pub fn name(self) -> &'static str {
        match self {
            RainConfig::NoRain => "NoRain",
            RainConfig::RainHist => "RainHist",
            RainConfig::RainFull => "RainFull",
        }
    }

    /// Short flag spelling: `none`, `hist`, `full`.
    pub fn flag(self) -> &'static str {
        match self {
            RainConfig::NoRain => "none",
            RainConfig::RainHist => "hist",
            RainConfig::RainFull => "full",
        }
    }

    pub fn parse(s: &str) -> Result<RainConfig> {
        RainConfig::ALL
            .into_iter()
            .find(|c| c.flag().eq_ignore_ascii_case(s) || c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown rain configuration `{s}` (none, hist, full)")))
    }
}

impl std::fmt::Display for RainConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    EndogenousTarget,
    ExogenousHistory,
    ExogenousForecast,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

/// Contiguous train/val/test index ranges over the time axis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    /// The 70/10/20 partition: cuts at `round(0.7 n)` and `round(0.8 n)`.
    pub fn ratio(n: usize) -> Result<Splits> {
        let a = (0.7 * n as f64).round() as usize;
        let b = (0.8 * n as f64).round() as usize;
        Self::from_bounds(n, a, b)
    }

    pub fn from_bounds(n: usize, train_end: usize, val_end: usize) -> Result<Splits> {
        if !(0 < train_end && train_end < val_end && val_end < n) {
            return Err(Error::Config(format!(
                "split bounds {train_end}, {val_end} do not leave three non-empty parts of {n} steps"
            )));
        }
        Ok(Splits {
            train: 0..train_end,
            val: train_end..val_end,
            test: val_end..n,
        })
    }

    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesChannel {
    pub id: String,
    pub kind: MetricKind,
    pub role: Role,
    pub values: Vec<f64>,
}

/// One training example, standardized: `history` is `[V, L_h]`, `forecast`
/// `[F, L_out]` covering the target interval, `target` `[n_targets, L_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub start: usize,
    pub history: Tensor,
    pub forecast: Option<Tensor>,
    pub target: Tensor,
}

/// Aligned, split and standardized channels in one rain configuration.
///
/// Channel order is: endogenous channels, then precipitation history, then
/// the precipitation forecast. Every endogenous channel is a model input;
/// `targets` picks the ones being forecast.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesSet {
    pub config: RainConfig,
    pub start: DateTime<Utc>,
    pub channels: Vec<SeriesChannel>,
    pub targets: Vec<usize>,
    pub splits: Splits,
    pub standardizer: Standardizer,
    standardized: Vec<Vec<f64>>,
}

impl SeriesSet {
    /// `endogenous` and `precipitation` must already share the 15-minute grid
    /// starting at `start`. Statistics come from the training split only; the
    /// forecast channel reuses the precipitation-history statistics.
    pub fn assemble(
        config: RainConfig,
        start: DateTime<Utc>,
        endogenous: Vec<(String, MetricKind, Vec<f64>)>,
        precipitation: Option<(String, Vec<f64>)>,
        targets: Option<&[String]>,
        splits: Option<Splits>,
    ) -> Result<SeriesSet> {
        if endogenous.is_empty() {
            return Err(Error::Config("no endogenous channel".into()));
        }
        let n = endogenous[0].2.len();
        let mut channels: Vec<SeriesChannel> = endogenous
            .into_iter()
            .map(|(id, kind, values)| SeriesChannel {
                id,
                kind,
                role: Role::EndogenousTarget,
                values,
            })
            .collect();
        if config != RainConfig::NoRain {
            let (id, values) =
                precipitation.ok_or_else(|| Error::Config(format!("{config} needs a precipitation channel")))?;
            channels.push(SeriesChannel {
                id: id.clone(),
                kind: MetricKind::Precipitation,
                role: Role::ExogenousHistory,
                values: values.clone(),
            });
            if config == RainConfig::RainFull {
                channels.push(SeriesChannel {
                    id: format!("{id}.forecast"),
                    kind: MetricKind::Precipitation,
                    role: Role::ExogenousForecast,
                    values,
                });
            }
        }
        if let Some(c) = channels.iter().find(|c| c.values.len() != n) {
            return Err(Error::Dimension {
                op: "SeriesSet::assemble",
                lhs: vec![n],
                rhs: vec![c.values.len()],
            });
        }
        let n_endo = channels.iter().filter(|c| c.role == Role::EndogenousTarget).count();
        let targets = match targets {
            None => (0..n_endo).collect(),
            Some(ids) => ids
                .iter()
                .map(|id| {
                    channels[..n_endo]
                        .iter()
                        .position(|c| &c.id == id)
                        .ok_or_else(|| Error::Config(format!("target `{id}` is not an endogenous channel")))
                })
                .collect::<Result<Vec<_>>>()?,
        };
        if targets.is_empty() {
            return Err(Error::Config("no target channel".into()));
        }
        let splits = match splits {
            Some(s) => s,
            None => Splits::ratio(n)?,
        };
        if splits.test.end != n {
            return Err(Error::Config(format!(
                "splits cover {} steps, series has {n}",
                splits.test.end
            )));
        }
        // fit on the history channels only; the forecast copy shares the rain statistics
        let fitted: Vec<&SeriesChannel> = channels.iter().filter(|c| c.role != Role::ExogenousForecast).collect();
        let ids: Vec<&str> = fitted.iter().map(|c| c.id.as_str()).collect();
        let train_slices: Vec<&[f64]> = fitted.iter().map(|c| &c.values[splits.train.clone()]).collect();
        let mut standardizer = Standardizer::fit(&ids, &train_slices)?;
        if config == RainConfig::RainFull {
            standardizer.duplicate_last(&channels.last().expect("forecast channel").id);
        }
        let standardized = channels
            .iter()
            .enumerate()
            .map(|(i, c)| standardizer.standardize(i, &c.values))
            .collect();
        Ok(SeriesSet {
            config,
            start,
            channels,
            targets,
            splits,
            standardizer,
            standardized,
        })
    }

    pub fn len(&self) -> usize {
        self.channels[0].values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn indices(&self, role: Role) -> impl Iterator<Item = usize> + '_ {
        self.channels
            .iter()
            .enumerate()
            .filter(move |(_, c)| c.role == role)
            .map(|(i, _)| i)
    }

    /// Channels feeding the history tokens (endogenous plus rain history).
    pub fn history_channels(&self) -> Vec<usize> {
        self.indices(Role::EndogenousTarget)
            .chain(self.indices(Role::ExogenousHistory))
            .collect()
    }

    pub fn forecast_channels(&self) -> Vec<usize> {
        self.indices(Role::ExogenousForecast).collect()
    }

    pub fn n_history_vars(&self) -> usize {
        self.history_channels().len()
    }

    pub fn n_forecast_vars(&self) -> usize {
        self.forecast_channels().len()
    }

    pub fn target_ids(&self) -> Vec<String> {
        self.targets.iter().map(|&i| self.channels[i].id.clone()).collect()
    }

    pub fn standardized(&self, channel: usize) -> &[f64] {
        &self.standardized[channel]
    }

    /// Absolute start indices of every window lying fully inside `split`.
    pub fn window_starts(&self, split: Split, hist_len: usize, horizon: usize) -> Range<usize> {
        let r = self.splits.range(split);
        let span = hist_len + horizon;
        if r.len() < span {
            r.start..r.start
        } else {
            r.start..r.end - span + 1
        }
    }

    pub fn window_count(&self, split: Split, hist_len: usize, horizon: usize) -> usize {
        self.window_starts(split, hist_len, horizon).len()
    }

    /// The `index`-th window of `split` (stride one).
    pub fn window(&self, split: Split, index: usize, hist_len: usize, horizon: usize) -> Result<WindowSample> {
        let starts = self.window_starts(split, hist_len, horizon);
        if index >= starts.len() {
            return Err(Error::Contract(format!(
                "window {index} out of range: {split:?} has {} windows",
                starts.len()
            )));
        }
        Ok(self.window_at(starts.start + index, hist_len, horizon))
    }

    fn window_at(&self, start: usize, hist_len: usize, horizon: usize) -> WindowSample {
        let future = start + hist_len..start + hist_len + horizon;
        let block = |chans: &[usize], r: Range<usize>| {
            let width = r.len();
            let mut data = Vec::with_capacity(chans.len() * width);
            for &c in chans {
                data.extend_from_slice(&self.standardized[c][r.clone()]);
            }
            Tensor::new(vec![chans.len(), width], data).expect("window shape")
        };
        let forecast = self.forecast_channels();
        WindowSample {
            start,
            history: block(&self.history_channels(), start..start + hist_len),
            forecast: (!forecast.is_empty()).then(|| block(&forecast, future.clone())),
            target: block(&self.targets, future),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelEntry {
    pub id: String,
    pub kind: MetricKind,
    /// Path relative to the dataset root.
    pub file: String,
    pub native_resolution_minutes: u32,
    pub mean: f64,
    pub std: f64,
    pub log: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub step_minutes: u32,
    pub start: DateTime<Utc>,
    pub len: usize,
    pub stages: Vec<String>,
    pub channels: Vec<ChannelEntry>,
    pub splits: Splits,
    pub standardizer: Standardizer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<serde_json::Value>,
}

/// Preprocessed channels on a shared 15-minute grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub values: Vec<Vec<f64>>,
}

pub const PIPELINE_STAGES: [&str; 4] = ["flag", "fill", "resample", "assemble"];

impl Dataset {
    /// Trims the channels to their common time span and records statistics.
    pub fn from_channels(channels: Vec<ProcessedChannel>, source: Option<serde_json::Value>) -> Result<Dataset> {
        if channels.is_empty() {
            return Err(Error::Input("no input series".into()));
        }
        let step = Duration::minutes(GRID_MINUTES as i64);
        let start = channels.iter().map(|c| c.start).max().expect("non-empty");
        let end = channels
            .iter()
            .map(|c| c.start + step * c.values.len() as i32)
            .min()
            .expect("non-empty");
        if end <= start {
            return Err(Error::Input("channels do not overlap in time".into()));
        }
        let len = ((end - start).num_minutes() / GRID_MINUTES as i64) as usize;
        let mut entries = Vec::with_capacity(channels.len());
        let mut values = Vec::with_capacity(channels.len());
        for c in channels {
            let offset = ((start - c.start).num_minutes() / GRID_MINUTES as i64) as usize;
            let v = c.values[offset..offset + len].to_vec();
            let mut log = c.log;
            if offset > 0 || c.values.len() > len {
                log.push(format!("align: trimmed to {len} common steps"));
            }
            let summary = summarize(&v)?;
            entries.push(ChannelEntry {
                file: format!("{CHANNEL_DIR}/{}.csv", c.id),
                id: c.id,
                kind: c.kind,
                native_resolution_minutes: c.native_resolution_minutes,
                mean: summary.mean,
                std: summary.std,
                log,
            });
            values.push(v);
        }
        let mut ids: Vec<&str> = entries.iter().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Input(format!("duplicate channel id `{}`", w[0])));
        }
        let splits = Splits::ratio(len)?;
        let id_refs: Vec<&str> = entries.iter().map(|e| e.id.as_str()).collect();
        let train: Vec<&[f64]> = values.iter().map(|v| &v[splits.train.clone()]).collect();
        let standardizer = Standardizer::fit(&id_refs, &train)?;
        Ok(Dataset {
            manifest: DatasetManifest {
                format: "aquacast-dataset".into(),
                version: 1,
                step_minutes: GRID_MINUTES,
                start,
                len,
                stages: PIPELINE_STAGES.iter().map(|s| s.to_string()).collect(),
                channels: entries,
                splits,
                standardizer,
                source,
            },
            values,
        })
    }

    /// Reads every `*.csv` in `dir` (sorted by name) and preprocesses it.
    pub fn preprocess_dir(dir: &Path) -> Result<Dataset> {
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Input(format!("no input series in {}", dir.display())));
        }
        let channels = files
            .iter()
            .map(|f| RawSeries::read_csv(f, None, None).and_then(|raw| preprocess_series(&raw)))
            .collect::<Result<Vec<_>>>()?;
        Dataset::from_channels(channels, None)
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let step = Duration::minutes(GRID_MINUTES as i64);
        for (entry, values) in self.manifest.channels.iter().zip(&self.values) {
            let series = RawSeries {
                sensor_id: entry.id.clone(),
                kind: entry.kind,
                resolution_minutes: GRID_MINUTES,
                timestamps: (0..values.len())
                    .map(|i| self.manifest.start + step * i as i32)
                    .collect(),
                values: values.iter().copied().map(Some).collect(),
            };
            series.write_csv(&root.join(&entry.file))?;
        }
        let path = root.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(root: &Path) -> Result<Dataset> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let mut values = Vec::with_capacity(manifest.channels.len());
        for entry in &manifest.channels {
            let file = root.join(&entry.file);
            let s = RawSeries::read_csv(&file, Some(entry.kind), Some(GRID_MINUTES))?;
            if s.len() != manifest.len || s.timestamps[0] != manifest.start {
                return Err(Error::Schema {
                    path: file,
                    line: 0,
                    message: format!("expected {} steps from {}", manifest.len, manifest.start),
                });
            }
            values.push(s.complete_values("load")?);
        }
        Ok(Dataset { manifest, values })
    }

    pub fn channel(&self, id: &str) -> Option<&[f64]> {
        self.manifest
            .channels
            .iter()
            .position(|c| c.id == id)
            .map(|i| self.values[i].as_slice())
    }

    /// Builds the split, standardized view for one rain configuration. The
    /// first precipitation channel (if any) is the rain input; all other
    /// channels are endogenous.
    pub fn series_set(&self, config: RainConfig, targets: Option<&[String]>) -> Result<SeriesSet> {
        let mut endogenous = Vec::new();
        let mut precipitation = None;
        for (entry, values) in self.manifest.channels.iter().zip(&self.values) {
            if entry.kind.is_precipitation() {
                if precipitation.is_none() {
                    precipitation = Some((entry.id.clone(), values.clone()));
                } else {
                    log::warn!("ignoring additional precipitation channel {}", entry.id);
                }
            } else {
                endogenous.push((entry.id.clone(), entry.kind, values.clone()));
            }
        }
        SeriesSet::assemble(
            config,
            self.manifest.start,
            endogenous,
            precipitation,
            targets,
            Some(self.manifest.splits.clone()),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2021, 3, 1, 0, 0, 0).unwrap()
    }

    fn series(kind: MetricKind, res: u32, values: &[f64]) -> RawSeries {
        RawSeries::regular("s", kind, res, t0(), values.to_vec()).unwrap()
    }

    /// Dense Gaussian elimination on the full natural-spline system, knots
    /// unknown-by-unknown, independent of the tridiagonal sweep.
    fn dense_spline_moments(x: &[f64], y: &[f64]) -> Vec<f64> {
        let n = x.len();
        let mut a = vec![vec![0.0; n + 1]; n];
        a[0][0] = 1.0;
        a[n - 1][n - 1] = 1.0;
        for i in 1..n - 1 {
            let h0 = x[i] - x[i - 1];
            let h1 = x[i + 1] - x[i];
            a[i][i - 1] = h0 / 6.0;
            a[i][i] = (h0 + h1) / 3.0;
            a[i][i + 1] = h1 / 6.0;
            a[i][n] = (y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0;
        }
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))
                .unwrap();
            a.swap(col, pivot);
            for r in 0..n {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..=n {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        (0..n).map(|i| a[i][n] / a[i][i]).collect()
    }

    fn piecewise_eval(x: &[f64], y: &[f64], m: &[f64], t: f64) -> f64 {
        let i = (0..x.len() - 1).find(|&i| t >= x[i] && t <= x[i + 1]).unwrap();
        let h = x[i + 1] - x[i];
        let (a, b) = ((x[i + 1] - t) / h, (t - x[i]) / h);
        a * y[i] + b * y[i + 1] + ((a * a * a - a) * m[i] + (b * b * b - b) * m[i + 1]) * h * h / 6.0
    }

    #[test]
    fn flag_examples() {
        let s = series(MetricKind::WaterHeight, 15, &[5.0, 5.0, 5.0, 5.0, 2.0]);
        assert_eq!(flag_missing_runs(&s), vec![true, true, true, true, false]);
        let s = series(MetricKind::WaterHeight, 15, &[5.0, 5.0, 5.0, 2.0]);
        assert!(flag_missing_runs(&s).iter().all(|m| !m));
        let alt: Vec<f64> = (0..20).map(|i| (i % 2) as f64).collect();
        assert!(flag_missing_runs(&series(MetricKind::WaterHeight, 15, &alt))
            .iter()
            .all(|m| !m));
        // an hour at one-minute resolution is sixty samples
        let mut v = vec![1.0; 59];
        v.push(2.0);
        assert!(flag_missing_runs(&series(MetricKind::WaterHeight, 1, &v))
            .iter()
            .all(|m| !m));
    }

    #[test]
    fn spline_reproduces_linear_data() {
        let v: Vec<f64> = (0..12).map(|i| 3.0 - 0.5 * i as f64).collect();
        let s = series(MetricKind::WaterHeight, 15, &v);
        let mut mask = vec![false; 12];
        mask[0] = true;
        mask[5] = true;
        mask[6] = true;
        mask[11] = true;
        let filled = spline_fill(&s, &mask).unwrap();
        for (a, b) in filled.values.iter().zip(&v) {
            assert!((a.unwrap() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn spline_matches_dense_solver_on_cubic() {
        let v: Vec<f64> = (0..10).map(|t| (t as f64).powi(3)).collect();
        let s = series(MetricKind::WaterHeight, 15, &v);
        let mut mask = vec![false; 10];
        mask[4] = true;
        mask[5] = true;
        let filled = spline_fill(&s, &mask).unwrap();
        let kx: Vec<f64> = [0, 1, 2, 3, 6, 7, 8, 9].iter().map(|&t| t as f64 * 15.0).collect();
        let ky: Vec<f64> = [0, 1, 2, 3, 6, 7, 8, 9].iter().map(|&t| (t as f64).powi(3)).collect();
        let m = dense_spline_moments(&kx, &ky);
        for t in [4usize, 5] {
            let expect = piecewise_eval(&kx, &ky, &m, t as f64 * 15.0);
            assert!((filled.values[t].unwrap() - expect).abs() < 1e-9);
        }
        for t in [0usize, 1, 2, 3, 6, 7, 8, 9] {
            assert_eq!(filled.values[t], s.values[t]);
        }
    }

    #[test]
    fn spline_needs_four_knots_and_no_mask_is_identity() {
        let s = series(MetricKind::WaterHeight, 15, &[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(spline_fill(&s, &[false; 5]).unwrap(), s);
        assert!(matches!(
            spline_fill(&s, &[true, true, false, false, false]),
            Err(Error::Interpolation(_))
        ));
    }

    #[test]
    fn downsample_examples() {
        let s = series(MetricKind::WaterHeight, 1, &(1..=15).map(f64::from).collect::<Vec<_>>());
        assert_eq!(downsample_to_15min(&s).unwrap().values, vec![Some(8.0)]);
        let s = series(MetricKind::WaterHeight, 1, &[2.5; 30]);
        let d = downsample_to_15min(&s).unwrap();
        assert_eq!(d.values, vec![Some(2.5), Some(2.5)]);
        assert_eq!(d.timestamps[1] - d.timestamps[0], Duration::minutes(15));
        let s = series(MetricKind::WaterHeight, 1, &[1.0; 40]);
        assert_eq!(downsample_to_15min(&s).unwrap().len(), 2);
    }

    #[test]
    fn upsample_examples() {
        let p = series(MetricKind::Precipitation, 60, &[4.0]);
        assert_eq!(
            upsample_precip(&p).unwrap().values,
            vec![Some(4.0), Some(0.0), Some(0.0), Some(0.0)]
        );
        let p = series(MetricKind::Precipitation, 60, &[0.0]);
        assert_eq!(upsample_precip(&p).unwrap().values, vec![Some(0.0); 4]);
    }

    #[test]
    fn summary_examples() {
        let s = summarize(&[3.0; 10]).unwrap();
        assert_eq!(s.histogram.density.iter().filter(|&&d| d > 0.0).count(), 1);
        assert!((s.histogram.area() - 1.0).abs() < 1e-9);

        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let normal = Normal::new(0.1236, 0.0384).unwrap();
        let v: Vec<f64> = (0..20_000).map(|_| normal.sample(&mut rng)).collect();
        let s = summarize(&v).unwrap();
        assert!((s.mean - 0.1236).abs() < 4.0 * 0.0384 / (20_000f64).sqrt());
        assert!((s.std - 0.0384).abs() < 0.001);
    }

    #[test]
    fn ratio_split_matches_day_counts() {
        let s = Splits::ratio(49_673).unwrap();
        let days = |r: &Range<usize>| r.len() as f64 / 96.0;
        assert!((days(&s.train) - 362.0).abs() <= 1.0);
        assert!((days(&s.val) - 52.0).abs() <= 1.0);
        assert!((days(&s.test) - 103.0).abs() <= 1.0);
    }

    fn toy_set(config: RainConfig) -> Result<SeriesSet> {
        let n = 400;
        let endo = (0..4)
            .map(|k| {
                let v = (0..n).map(|i| ((i + 7 * k) as f64 * 0.1).sin() + k as f64).collect();
                (format!("s{k}"), MetricKind::WaterHeight, v)
            })
            .collect();
        let rain = ("rain".to_string(), (0..n).map(|i| ((i * 13) % 17) as f64).collect());
        SeriesSet::assemble(config, t0(), endo, Some(rain), None, None)
    }

    #[test]
    fn rain_configurations_set_channel_counts() {
        let s = toy_set(RainConfig::NoRain).unwrap();
        assert_eq!((s.n_history_vars(), s.n_forecast_vars()), (4, 0));
        let s = toy_set(RainConfig::RainHist).unwrap();
        assert_eq!((s.n_history_vars(), s.n_forecast_vars()), (5, 0));
        let s = toy_set(RainConfig::RainFull).unwrap();
        assert_eq!((s.n_history_vars(), s.n_forecast_vars()), (5, 1));
        assert_eq!(s.standardizer.means[5], s.standardizer.means[4]);
        assert_eq!(s.standardizer.stds[5], s.standardizer.stds[4]);

        let endo = vec![("a".to_string(), MetricKind::WaterHeight, vec![1.0, 2.0, 3.0, 4.0, 5.0])];
        assert!(matches!(
            SeriesSet::assemble(RainConfig::RainHist, t0(), endo, None, None, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn forecast_block_is_future_rain() {
        let s = toy_set(RainConfig::RainFull).unwrap();
        let w = s.window(Split::Train, 3, 96, 8).unwrap();
        let f = w.forecast.unwrap();
        assert_eq!(f.shape(), &[1, 8]);
        let rain = s.standardized(4);
        assert_eq!(f.data(), &rain[w.start + 96..w.start + 104]);
        assert_eq!(w.history.shape(), &[5, 96]);
        assert_eq!(w.target.shape(), &[4, 8]);
    }

    #[test]
    fn standardizer_uses_training_statistics_only() {
        let mut s = toy_set(RainConfig::NoRain).unwrap();
        let before = s.standardizer.clone();
        let test = s.splits.test.clone();
        s.channels[0].values[test].iter_mut().for_each(|v| *v += 100.0);
        let endo = s
            .channels
            .iter()
            .map(|c| (c.id.clone(), c.kind, c.values.clone()))
            .collect();
        let again = SeriesSet::assemble(RainConfig::NoRain, t0(), endo, None, None, None).unwrap();
        assert_eq!(before, again.standardizer);
    }

    #[test]
    fn csv_round_trip_and_schema_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h1.csv");
        let mut s = series(MetricKind::WaterHeight, 15, &[0.1, 0.2, 0.30000000000000004, 1e-7]);
        s.values[1] = None;
        s.write_csv(&path).unwrap();
        let back = RawSeries::read_csv(&path, None, None).unwrap();
        assert_eq!(back.values, s.values);
        assert_eq!(back.resolution_minutes, 15);
        assert_eq!(back.sensor_id, "h1");

        let bad = dir.path().join("bad.csv");
        fs::write(
            &bad,
            "timestamp,value\n2021-03-01T00:00:00Z,1.0\n2021-03-01T00:15:00Z,abc\n",
        )
        .unwrap();
        match RawSeries::read_csv(&bad, None, None) {
            Err(Error::Schema { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("value"));
            }
            other => panic!("{other:?}"),
        }
        fs::write(&bad, "time,v\n").unwrap();
        assert!(matches!(
            RawSeries::read_csv(&bad, None, None),
            Err(Error::Schema { line: 1, .. })
        ));
    }

    #[test]
    fn dataset_write_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("raw");
        fs::create_dir_all(&raw).unwrap();
        let minute: Vec<f64> = (0..15 * 200).map(|i| (i as f64 * 0.01).sin() + 2.0).collect();
        series(MetricKind::WaterHeight, 1, &minute)
            .write_csv(&raw.join("height_a.csv"))
            .unwrap();
        let hourly: Vec<f64> = (0..50).map(|i| ((i * 7) % 5) as f64 * 0.5).collect();
        series(MetricKind::Precipitation, 60, &hourly)
            .write_csv(&raw.join("precip.csv"))
            .unwrap();

        let ds = Dataset::preprocess_dir(&raw).unwrap();
        assert_eq!(ds.manifest.len, 200);
        assert_eq!(ds.manifest.channels.len(), 2);
        let out = dir.path().join("out");
        ds.write(&out).unwrap();
        let back = Dataset::load(&out).unwrap();
        assert_eq!(back, ds);
        let set = back.series_set(RainConfig::RainFull, None).unwrap();
        assert_eq!(set.target_ids(), vec!["height_a".to_string()]);

        let empty = dir.path().join("empty");
        fs::create_dir_all(&empty).unwrap();
        assert!(matches!(Dataset::preprocess_dir(&empty), Err(Error::Input(m)) if m.contains("no input series")));
    }

    proptest! {
        #[test]
        fn zero_insertion_conserves_totals(v in prop::collection::vec(0.0f64..50.0, 1..100)) {
            let p = series(MetricKind::Precipitation, 60, &v);
            let up = upsample_precip(&p).unwrap();
            let before: f64 = v.iter().sum();
            let after: f64 = up.values.iter().map(|x| x.unwrap()).sum();
            prop_assert_eq!(before, after);
            prop_assert_eq!(up.len(), 4 * v.len());
        }

        #[test]
        fn preprocessing_is_idempotent(v in prop::collection::vec(-5.0f64..5.0, 30..120), holes in prop::collection::vec(any::<bool>(), 120)) {
            let mut s = series(MetricKind::WaterHeight, 15, &v);
            for (i, h) in holes.iter().enumerate().take(v.len()).skip(1) {
                if *h && i % 3 == 0 && i + 1 < v.len() {
                    s.values[i] = None;
                }
            }
            let once = preprocess_series(&s).unwrap();
            let again = preprocess_series(&RawSeries::regular("s", MetricKind::WaterHeight, 15, once.start, once.values.clone()).unwrap()).unwrap();
            prop_assert_eq!(once.values, again.values);
        }

        #[test]
        fn windows_stay_inside_their_split(n in 200usize..2000, a in 0.05f64..0.9, b in 0.01f64..0.5, h in 1usize..40, l in 1usize..40) {
            let train_end = ((n as f64 * a) as usize).max(1);
            let val_end = (train_end + ((n - train_end) as f64 * b) as usize).clamp(train_end + 1, n - 1);
            prop_assume!(train_end < val_end && val_end < n);
            let splits = Splits::from_bounds(n, train_end, val_end).unwrap();
            let endo = vec![("x".to_string(), MetricKind::WaterHeight, (0..n).map(|i| (i % 11) as f64).collect())];
            let set = SeriesSet::assemble(RainConfig::NoRain, t0(), endo, None, None, Some(splits.clone())).unwrap();
            for split in Split::ALL {
                let r = splits.range(split);
                for start in set.window_starts(split, h, l) {
                    prop_assert!(start >= r.start && start + h + l <= r.end);
                }
            }
        }
    }
}
