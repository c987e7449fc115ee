//! Experiment cells (one rain configuration × one horizon), evaluation
//! reports, the combined metric table, SVG forecast plots and the
//! deterministic ablation grid.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, RainConfig, SeriesSet, Split};
use crate::error::{Error, Result};
use crate::metrics::{
    complexity, dtw_accuracy, point_metrics, PointMetrics, DEFAULT_EMBEDDING_DIMENSION, DEFAULT_SWEEP_RESOLUTION,
};
use crate::model::{AquaCast, ModelConfig};
use crate::train::{evaluate, fit, RunManifest, SplitWindows, TrainConfig, Units, Windows};

/// Horizons of the ablation grid, in 15-minute steps.
pub const HORIZONS: [usize; 4] = [96, 192, 480, 720];
const SAMPLE_WINDOWS: usize = 3;
const PLOTTED_SENSORS: usize = 4;

/// Partial overrides applied on top of the default model and training
/// configurations, plus evaluation settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    pub model: Map<String, Value>,
    pub train: Map<String, Value>,
    /// Evaluate every `eval_stride`-th test window (0 is treated as 1).
    pub eval_stride: usize,
    /// Endogenous channels to forecast; all of them when absent.
    pub targets: Option<Vec<String>>,
    pub units: Units,
}

impl Overrides {
    pub fn from_json(text: &str) -> Result<Overrides> {
        let o: Overrides = serde_json::from_str(text).map_err(|e| Error::Config(format!("config overrides: {e}")))?;
        // surface unknown keys now rather than after synthesis
        o.train_config(0)?;
        merge(&ModelConfig::default(), &o.model, "model")?;
        Ok(o)
    }

    pub fn eval_stride(&self) -> usize {
        self.eval_stride.max(1)
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let mut c: TrainConfig = merge(&TrainConfig::default(), &self.train, "train")?;
        c.seed = seed;
        c.validate()?;
        Ok(c)
    }

    pub fn model_config(&self, set: &SeriesSet, horizon: usize, seed: u64) -> Result<ModelConfig> {
        let base = ModelConfig::for_layout(set.n_history_vars(), set.n_forecast_vars(), set.targets.len(), horizon);
        let mut c: ModelConfig = merge(&base, &self.model, "model")?;
        // layout is dictated by the data, not by overrides
        c.n_hist_vars = base.n_hist_vars;
        c.n_forecast_vars = base.n_forecast_vars;
        c.n_targets = base.n_targets;
        c.horizon = horizon;
        c.forecast_len = horizon;
        c.seed = seed;
        c.validate()?;
        Ok(c)
    }
}

fn merge<T: Serialize + for<'de> Deserialize<'de>>(base: &T, overrides: &Map<String, Value>, what: &str) -> Result<T> {
    let mut v = serde_json::to_value(base)?;
    let obj = v.as_object_mut().expect("config serializes to an object");
    for (k, val) in overrides {
        if !obj.contains_key(k) {
            return Err(Error::Config(format!("unknown {what} setting `{k}`")));
        }
        obj.insert(k.clone(), val.clone());
    }
    serde_json::from_value(v).map_err(|e| Error::Config(format!("{what} settings: {e}")))
}

/// One cell of the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub dataset: String,
    pub rain: RainConfig,
    pub horizon: usize,
    pub seed: u64,
    #[serde(default)]
    pub overrides: Overrides,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if !HORIZONS.contains(&self.horizon) {
            return Err(Error::Config(format!(
                "horizon {} not one of {HORIZONS:?}",
                self.horizon
            )));
        }
        Ok(())
    }

    /// Directory-safe name, e.g. `full_h96`.
    pub fn cell_name(&self) -> String {
        format!("{}_h{}", self.rain.flag(), self.horizon)
    }

    /// Content hash of the data and every setting that influences the result.
    pub fn fingerprint(&self, dataset: &Dataset) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&dataset.manifest)?);
        h.update(serde_json::to_vec(self)?);
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorReport {
    pub sensor: String,
    pub metrics: PointMetrics,
    pub auc: f64,
    pub median_dtw_error: f64,
    /// Ordinal-pattern statistics of the sensor's test-split series.
    pub entropy: Option<f64>,
    pub complexity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
    /// Mean over sensors with a defined R².
    pub r2: Option<f64>,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastSample {
    pub sensor: String,
    pub start: usize,
    pub history: Vec<f64>,
    pub truth: Vec<f64>,
    pub prediction: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub config: RainConfig,
    pub horizon: usize,
    pub seed: u64,
    pub split: Split,
    pub units: Units,
    pub windows: usize,
    pub sensors: Vec<SensorReport>,
    pub mean: MeanMetrics,
    pub samples: Vec<ForecastSample>,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn load(path: &Path) -> Result<EvalReport> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Scores a trained model on `split`: point metrics over all forecast
/// values, DTW accuracy AUC over windows, and complexity of the truth series.
pub fn eval_report(
    model: &AquaCast,
    set: &SeriesSet,
    split: Split,
    spec: &ExperimentSpec,
    fingerprint: String,
) -> Result<EvalReport> {
    let units = spec.overrides.units;
    let ev = evaluate(model, set, split, spec.overrides.eval_stride())?;
    let range = set.splits.range(split);
    let mut sensors = Vec::with_capacity(ev.channels.len());
    let mut samples = Vec::new();
    for (k, ch) in ev.channels.iter().enumerate() {
        let preds = ch.predictions_in(units);
        let truths = ch.truths_in(units);
        let metrics = point_metrics(&truths.concat(), &preds.concat())?;
        let curve = dtw_accuracy(&preds, &truths, DEFAULT_SWEEP_RESOLUTION)?;
        let channel = set.targets[k];
        let series = &set.standardized(channel)[range.clone()];
        let ord = complexity(series, DEFAULT_EMBEDDING_DIMENSION).ok();
        sensors.push(SensorReport {
            sensor: ch.id.clone(),
            metrics,
            auc: curve.auc,
            median_dtw_error: crate::metrics::median(&curve.errors).unwrap_or(f64::NAN),
            entropy: ord.as_ref().map(|o| o.entropy),
            complexity: ord.as_ref().map(|o| o.complexity),
        });
        if k < PLOTTED_SENSORS {
            let n = preds.len();
            let picks: Vec<usize> = (0..SAMPLE_WINDOWS.min(n))
                .map(|i| i * (n - 1) / (SAMPLE_WINDOWS - 1).max(1))
                .collect();
            for i in picks {
                let start = ev.starts[i];
                let hist = &set.standardized(channel)[start..start + model.config().hist_len];
                let history = match units {
                    Units::Standardized => hist.to_vec(),
                    Units::Original => set.standardizer.destandardize(channel, hist),
                };
                samples.push(ForecastSample {
                    sensor: ch.id.clone(),
                    start,
                    history,
                    truth: truths[i].clone(),
                    prediction: preds[i].clone(),
                });
            }
        }
    }
    let n = sensors.len() as f64;
    let defined: Vec<f64> = sensors.iter().filter_map(|s| s.metrics.r2.value()).collect();
    let mean = MeanMetrics {
        mse: sensors.iter().map(|s| s.metrics.mse).sum::<f64>() / n,
        mae: sensors.iter().map(|s| s.metrics.mae).sum::<f64>() / n,
        rmse: sensors.iter().map(|s| s.metrics.rmse).sum::<f64>() / n,
        r2: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        auc: sensors.iter().map(|s| s.auc).sum::<f64>() / n,
    };
    Ok(EvalReport {
        dataset: spec.dataset.clone(),
        config: spec.rain,
        horizon: spec.horizon,
        seed: spec.seed,
        split,
        units,
        windows: ev.starts.len(),
        sensors,
        mean,
        samples,
        fingerprint,
    })
}

/// Trained model, run manifest and test report of one cell.
#[derive(Clone, Debug)]
pub struct CellOutput {
    pub model: AquaCast,
    pub manifest: RunManifest,
    pub report: EvalReport,
}

pub fn series_set(dataset: &Dataset, spec: &ExperimentSpec) -> Result<SeriesSet> {
    dataset.series_set(spec.rain, spec.overrides.targets.as_deref())
}

/// Trains one cell on the train/val splits and scores it on test.
pub fn run_cell(dataset: &Dataset, spec: &ExperimentSpec) -> Result<CellOutput> {
    spec.validate()?;
    let set = series_set(dataset, spec)?;
    let model_cfg = spec.overrides.model_config(&set, spec.horizon, spec.seed)?;
    let train_cfg = spec.overrides.train_config(spec.seed)?;
    let initial = AquaCast::new(model_cfg.clone())?;
    let train = SplitWindows::new(&set, Split::Train, model_cfg.hist_len, spec.horizon);
    let val = SplitWindows::new(&set, Split::Val, model_cfg.hist_len, spec.horizon).with_stride(train_cfg.val_stride);
    log::info!(
        "training {} on {} ({} windows)",
        spec.cell_name(),
        spec.dataset,
        train.len()
    );
    let outcome = fit(&initial, &train, &val, &train_cfg)?;
    let manifest = RunManifest::new(&outcome, &train_cfg, &set.splits);
    let report = eval_report(&outcome.model, &set, Split::Test, spec, spec.fingerprint(dataset)?)?;
    Ok(CellOutput {
        model: outcome.model,
        manifest,
        report,
    })
}

fn fmt_f(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "NaN".into()
    }
}

/// Long-format metric table: one row per dataset × sensor × horizon ×
/// configuration, with a `mean` row per cell averaging its sensors.
pub fn report_table(reports: &[EvalReport]) -> String {
    let mut rows: Vec<(&EvalReport, usize, String, String)> = Vec::new();
    for r in reports {
        for s in &r.sensors {
            let r2 = s.metrics.r2.value().map(fmt_f).unwrap_or_else(|| "NaN".into());
            let line = format!(
                "{},{},{},{},{},{},{},{},{}",
                r.dataset,
                s.sensor,
                r.horizon,
                r.config.name(),
                fmt_f(s.metrics.mse),
                fmt_f(s.metrics.mae),
                fmt_f(s.metrics.rmse),
                r2,
                fmt_f(s.auc)
            );
            rows.push((r, 0, s.sensor.clone(), line));
        }
        let m = &r.mean;
        let line = format!(
            "{},mean,{},{},{},{},{},{},{}",
            r.dataset,
            r.horizon,
            r.config.name(),
            fmt_f(m.mse),
            fmt_f(m.mae),
            fmt_f(m.rmse),
            m.r2.map(fmt_f).unwrap_or_else(|| "NaN".into()),
            fmt_f(m.auc)
        );
        rows.push((r, 1, "mean".into(), line));
    }
    let config_rank = |c: RainConfig| RainConfig::ALL.iter().position(|&x| x == c).unwrap_or(usize::MAX);
    rows.sort_by(|a, b| {
        (&a.0.dataset, a.1, &a.2, a.0.horizon, config_rank(a.0.config)).cmp(&(
            &b.0.dataset,
            b.1,
            &b.2,
            b.0.horizon,
            config_rank(b.0.config),
        ))
    });
    let mut out = String::from("dataset,sensor,horizon,config,mse,mae,rmse,r2,auc\n");
    for (_, _, _, line) in rows {
        out.push_str(&line);
        out.push('\n');
    }
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Line plot of one forecast: history and ground truth in grey/black,
/// prediction in colour, with the forecast origin marked.
pub fn forecast_svg(sample: &ForecastSample, title: &str) -> String {
    const W: f64 = 720.0;
    const H: f64 = 260.0;
    const PAD: f64 = 40.0;
    let n_hist = sample.history.len();
    let total = n_hist + sample.truth.len();
    let all = sample
        .history
        .iter()
        .chain(&sample.truth)
        .chain(&sample.prediction)
        .filter(|v| v.is_finite());
    let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let sx = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / (total.max(2) - 1) as f64;
    let sy = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - lo) / (hi - lo);
    let line = |vals: &[f64], offset: usize| {
        let mut s = String::new();
        for (i, &v) in vals.iter().enumerate() {
            if v.is_finite() {
                let _ = write!(s, "{:.2},{:.2} ", sx(offset + i), sy(v));
            }
        }
        s.trim_end().to_string()
    };
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r##"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="#999" stroke-width="1"/>"##,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(
        svg,
        r#"<text x="{PAD}" y="24" font-family="sans-serif" font-size="14">{}</text>"#,
        xml_escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<text x="4" y="{:.2}" font-family="sans-serif" font-size="10">{}</text>"#,
        sy(hi) + 4.0,
        fmt_f(hi)
    );
    let _ = writeln!(
        svg,
        r#"<text x="4" y="{:.2}" font-family="sans-serif" font-size="10">{}</text>"#,
        sy(lo),
        fmt_f(lo)
    );
    let origin = sx(n_hist.saturating_sub(1));
    let _ = writeln!(
        svg,
        r##"<line x1="{origin:.2}" y1="{PAD}" x2="{origin:.2}" y2="{}" stroke="#bbb" stroke-dasharray="4 3"/>"##,
        H - PAD
    );
    let _ = writeln!(
        svg,
        r##"<polyline fill="none" stroke="#888" stroke-width="1.2" points="{}"/>"##,
        line(&sample.history, 0)
    );
    let _ = writeln!(
        svg,
        r##"<polyline fill="none" stroke="#000" stroke-width="1.2" points="{}"/>"##,
        line(&sample.truth, n_hist)
    );
    let _ = writeln!(
        svg,
        r##"<polyline fill="none" stroke="#d62728" stroke-width="1.5" points="{}"/>"##,
        line(&sample.prediction, n_hist)
    );
    let ly = H - 12.0;
    let _ = writeln!(
        svg,
        r##"<text x="{PAD}" y="{ly}" font-family="sans-serif" font-size="11"><tspan fill="#888">history</tspan>  <tspan fill="#000">truth</tspan>  <tspan fill="#d62728">forecast</tspan></text>"##
    );
    svg.push_str("</svg>\n");
    svg
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `table.csv`, `report.json` and one SVG per forecast sample into
/// `dir`; returns the written paths. Output depends only on `reports`.
pub fn write_report(reports: &[EvalReport], dir: &Path) -> Result<Vec<PathBuf>> {
    let mut sorted: Vec<&EvalReport> = reports.iter().collect();
    let rank = |c: RainConfig| RainConfig::ALL.iter().position(|&x| x == c).unwrap_or(usize::MAX);
    sorted.sort_by(|a, b| (&a.dataset, a.horizon, rank(a.config)).cmp(&(&b.dataset, b.horizon, rank(b.config))));
    let mut written = Vec::new();
    let table = dir.join("table.csv");
    write_file(&table, report_table(reports))?;
    written.push(table);
    let json = dir.join("report.json");
    write_file(&json, serde_json::to_string_pretty(&sorted)? + "\n")?;
    written.push(json);
    for r in sorted {
        for (i, s) in r.samples.iter().enumerate() {
            let title = format!(
                "{} · {} · {} · h={} · window {}",
                r.dataset,
                s.sensor,
                r.config.name(),
                r.horizon,
                s.start
            );
            let name = format!("{}_{}_{}_h{}_{i}.svg", r.dataset, s.sensor, r.config.flag(), r.horizon);
            let path = dir.join("plots").join(sanitize(&name));
            write_file(&path, forecast_svg(s, &title))?;
            written.push(path);
        }
    }
    Ok(written)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dataset: String,
    pub configs: Vec<RainConfig>,
    pub horizons: Vec<usize>,
    pub seed: u64,
    #[serde(default)]
    pub overrides: Overrides,
}

impl GridSpec {
    pub fn full(dataset: impl Into<String>, seed: u64, overrides: Overrides) -> GridSpec {
        GridSpec {
            dataset: dataset.into(),
            configs: RainConfig::ALL.to_vec(),
            horizons: HORIZONS.to_vec(),
            seed,
            overrides,
        }
    }

    /// Cells in a fixed order: horizons outer, configurations inner.
    pub fn cells(&self) -> Vec<ExperimentSpec> {
        let mut out = Vec::new();
        for &horizon in &self.horizons {
            for &rain in &self.configs {
                out.push(ExperimentSpec {
                    dataset: self.dataset.clone(),
                    rain,
                    horizon,
                    seed: self.seed,
                    overrides: self.overrides.clone(),
                });
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell: String,
    pub dir: PathBuf,
    pub fingerprint: String,
    /// Whether the cell was reused from an earlier run with the same fingerprint.
    pub cached: bool,
}

#[derive(Clone, Debug)]
pub struct GridOutput {
    pub cells: Vec<CellRecord>,
    pub reports: Vec<EvalReport>,
    pub report_files: Vec<PathBuf>,
}

/// Runs every cell (reusing cells whose stored report carries the same
/// fingerprint), then writes the combined report under `out/report`.
/// Cells are independent, so `jobs` workers process them concurrently; the
/// output does not depend on `jobs`.
pub fn run_grid(dataset: &Dataset, spec: &GridSpec, out: &Path, jobs: usize) -> Result<GridOutput> {
    let cells = spec.cells();
    for c in &cells {
        c.validate()?;
        if c.rain == RainConfig::RainFull && !dataset.manifest.channels.iter().any(|ch| ch.kind.is_precipitation()) {
            return Err(Error::Config("rain-full needs a precipitation channel".into()));
        }
    }
    let results: Mutex<Vec<Option<Result<(CellRecord, EvalReport)>>>> =
        Mutex::new((0..cells.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = jobs.clamp(1, cells.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let r = grid_cell(dataset, &cells[i], &out.join("cells").join(cells[i].cell_name()));
                results.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    let mut records = Vec::with_capacity(cells.len());
    let mut reports = Vec::with_capacity(cells.len());
    for r in results.into_inner().expect("no poisoned workers") {
        let (rec, rep) = r.expect("every cell ran")?;
        records.push(rec);
        reports.push(rep);
    }
    let report_files = write_report(&reports, &out.join("report"))?;
    Ok(GridOutput {
        cells: records,
        reports,
        report_files,
    })
}

fn grid_cell(dataset: &Dataset, spec: &ExperimentSpec, dir: &Path) -> Result<(CellRecord, EvalReport)> {
    let fingerprint = spec.fingerprint(dataset)?;
    let eval_path = dir.join("eval.json");
    if eval_path.exists() && dir.join("model.json").exists() {
        if let Ok(old) = EvalReport::load(&eval_path) {
            if old.fingerprint == fingerprint {
                log::info!("reusing {}", dir.display());
                let rec = CellRecord {
                    cell: spec.cell_name(),
                    dir: dir.to_path_buf(),
                    fingerprint,
                    cached: true,
                };
                return Ok((rec, old));
            }
        }
    }
    let out = run_cell(dataset, spec)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    out.model.save(&dir.join("model.json"))?;
    write_file(
        &dir.join("train.json"),
        serde_json::to_string_pretty(&out.manifest)? + "\n",
    )?;
    write_file(&dir.join("spec.json"), serde_json::to_string_pretty(spec)? + "\n")?;
    out.report.write(&eval_path)?;
    let rec = CellRecord {
        cell: spec.cell_name(),
        dir: dir.to_path_buf(),
        fingerprint,
        cached: false,
    };
    Ok((rec, out.report))
}
