//! Synthetic drainage generator: clouds rain onto a terrain split into
//! watersheds, each watershed feeds the pipe-network nodes inside it, and the
//! network routes the water to its terminals.

pub mod clouds;
pub mod network;
pub mod terrain;

use std::path::PathBuf;

use chrono::{TimeZone, Utc};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, MetricKind, ProcessedChannel, RawSeries};
use crate::error::{Error, Result};
use crate::metrics::{complexity, median, DEFAULT_EMBEDDING_DIMENSION};
use clouds::{
    synthetic_hourly_records, BlobParams, CloudSourceKind, CloudStream, LorenzClouds, LorenzParams, RandomFieldClouds,
    RandomFieldParams, RecordsClouds, StormParams,
};
use network::{NetworkSpec, PipeNetwork};
use terrain::{segment_watersheds, watershed_time_constants, RunoffParams, Terrain, WatershedAccumulator, Watersheds};

/// `y[t] = a·y[t−1] + (1−a)·g·u[t]` with `a = exp(−1/τ)` (τ in steps);
/// `τ = 0` passes the input straight through.
#[derive(Clone, Debug, PartialEq)]
pub struct FirstOrderLag {
    a: f64,
    gain: f64,
    y: f64,
}

impl FirstOrderLag {
    pub fn new(tau: f64, gain: f64) -> Result<Self> {
        if !(tau >= 0.0 && tau.is_finite()) || !gain.is_finite() {
            return Err(Error::Config(format!(
                "lag needs finite tau ≥ 0 and gain, got {tau}, {gain}"
            )));
        }
        let a = if tau == 0.0 { 0.0 } else { (-1.0 / tau).exp() };
        Ok(Self { a, gain, y: 0.0 })
    }

    pub fn coefficient(&self) -> f64 {
        self.a
    }

    pub fn step(&mut self, u: f64) -> f64 {
        self.y = self.a * self.y + (1.0 - self.a) * self.gain * u;
        self.y
    }

    /// Water held by the filter: what it will still release with no further input.
    pub fn storage(&self) -> f64 {
        if self.a == 0.0 {
            0.0
        } else {
            self.a * self.y / (1.0 - self.a)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CloudConfig {
    Records {
        #[serde(default)]
        storms: StormParams,
        #[serde(default)]
        blob: BlobParams,
        /// Hourly `timestamp,value` precipitation CSV used instead of synthetic storms.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        records_path: Option<PathBuf>,
    },
    Lorenz {
        #[serde(default)]
        params: LorenzParams,
    },
    RandomField {
        #[serde(default)]
        params: RandomFieldParams,
    },
}

impl CloudConfig {
    pub fn kind(&self) -> CloudSourceKind {
        match self {
            CloudConfig::Records { .. } => CloudSourceKind::Records,
            CloudConfig::Lorenz { .. } => CloudSourceKind::Lorenz,
            CloudConfig::RandomField { .. } => CloudSourceKind::RandomField,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TerrainSource {
    Fractal { roughness: f64, relief: f64 },
    AsciiGrid { path: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthPreset {
    SynthLow,
    SynthMid,
    SynthHigh,
}

impl SynthPreset {
    pub const ALL: [SynthPreset; 3] = [SynthPreset::SynthLow, SynthPreset::SynthMid, SynthPreset::SynthHigh];

    pub fn name(self) -> &'static str {
        match self {
            SynthPreset::SynthLow => "SynthLow",
            SynthPreset::SynthMid => "SynthMid",
            SynthPreset::SynthHigh => "SynthHigh",
        }
    }

    pub fn parse(s: &str) -> Result<SynthPreset> {
        SynthPreset::ALL
            .into_iter()
            .find(|p| {
                let short = &p.name()[5..];
                p.name().eq_ignore_ascii_case(s) || short.eq_ignore_ascii_case(s)
            })
            .ok_or_else(|| Error::Config(format!("unknown scenario preset `{s}` (SynthLow, SynthMid, SynthHigh)")))
    }
}

/// Everything that determines a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub clouds: CloudConfig,
    /// Square grid edge in cells, used by the fractal terrain.
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_terrain")]
    pub terrain: TerrainSource,
    /// Watershed detail in `[0, 1]`; higher keeps more watersheds.
    #[serde(default = "default_detail")]
    pub detail: f64,
    #[serde(default)]
    pub runoff: RunoffParams,
    #[serde(default)]
    pub network: NetworkSpec,
    /// Number of node series exported.
    #[serde(default = "default_export")]
    pub n_nodes: usize,
    /// Exported series length.
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Simulated steps discarded before export so pipes start filled.
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_grid() -> usize {
    64
}
fn default_terrain() -> TerrainSource {
    TerrainSource::Fractal {
        roughness: 0.55,
        relief: 120.0,
    }
}
fn default_detail() -> f64 {
    0.9
}
fn default_export() -> usize {
    100
}
fn default_steps() -> usize {
    10_000
}
fn default_warmup() -> usize {
    500
}

impl Scenario {
    pub fn preset(preset: SynthPreset, seed: u64) -> Scenario {
        let clouds = match preset {
            SynthPreset::SynthLow => CloudConfig::Records {
                storms: StormParams::default(),
                blob: BlobParams::default(),
                records_path: None,
            },
            SynthPreset::SynthMid => CloudConfig::Lorenz {
                params: LorenzParams::default(),
            },
            SynthPreset::SynthHigh => CloudConfig::RandomField {
                params: RandomFieldParams::default(),
            },
        };
        Scenario {
            name: preset.name().into(),
            clouds,
            grid: default_grid(),
            terrain: default_terrain(),
            detail: default_detail(),
            runoff: match preset {
                // storm-driven records drain from slow, largely flat catchments
                SynthPreset::SynthLow => RunoffParams {
                    tau_flat: 96.0,
                    tau_min: 12.0,
                    ..RunoffParams::default()
                },
                _ => RunoffParams::default(),
            },
            network: NetworkSpec::default(),
            n_nodes: default_export(),
            steps: default_steps(),
            warmup: default_warmup(),
            seed,
        }
    }

    pub fn from_json(text: &str) -> Result<Scenario> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| Error::Config(format!("scenario: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if self.n_nodes == 0 || self.n_nodes > self.network.nodes {
            return bad(format!(
                "cannot export {} of {} network nodes",
                self.n_nodes, self.network.nodes
            ));
        }
        if self.grid < 2 {
            return bad("grid must have at least 2 cells per side".into());
        }
        if !(0.0..=1.0).contains(&self.detail) {
            return bad(format!("detail {} outside [0, 1]", self.detail));
        }
        Ok(())
    }

    /// Stream seed mixing the user seed with the whole configuration, so the
    /// same seed under a different configuration gives different data.
    pub fn stream_seed(&self) -> u64 {
        let json = serde_json::to_string(self).expect("scenario serializes");
        let digest = Sha256::digest(json.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

fn sub_seed(base: u64, stream: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(stream.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Terrain, watersheds and pipes of one scenario.
#[derive(Clone, Debug)]
pub struct CdmWorld {
    pub terrain: Terrain,
    pub watersheds: Watersheds,
    pub watershed_tau: Vec<f64>,
    pub network: PipeNetwork,
    /// For every watershed, the nodes sharing its runoff.
    pub watershed_nodes: Vec<Vec<usize>>,
}

impl CdmWorld {
    pub fn build(scenario: &Scenario) -> Result<CdmWorld> {
        let seed = scenario.stream_seed();
        let terrain = match &scenario.terrain {
            TerrainSource::Fractal { roughness, relief } => {
                Terrain::fractal(scenario.grid, scenario.grid, *roughness, *relief, sub_seed(seed, 1))?
            }
            TerrainSource::AsciiGrid { path } => Terrain::read_ascii_grid(path)?,
        };
        let watersheds = segment_watersheds(&terrain, scenario.detail);
        let watershed_tau = watershed_time_constants(&terrain, &watersheds, &scenario.runoff);
        let network = PipeNetwork::random(&terrain, &scenario.network, sub_seed(seed, 2))?;
        let mut watershed_nodes = vec![Vec::new(); watersheds.count];
        for (i, n) in network.nodes.iter().enumerate() {
            watershed_nodes[watersheds.labels[terrain.cell_at(n.x, n.y)]].push(i);
        }
        // watersheds without a node drain to the node nearest their centroid
        for (w, nodes) in watershed_nodes.iter_mut().enumerate() {
            if nodes.is_empty() {
                let cells = watersheds.cells(w);
                let cx = cells.iter().map(|c| (c % terrain.nx) as f64 + 0.5).sum::<f64>() / cells.len() as f64;
                let cy = cells.iter().map(|c| (c / terrain.nx) as f64 + 0.5).sum::<f64>() / cells.len() as f64;
                let nearest = (0..network.len())
                    .min_by(|&a, &b| {
                        let d = |i: usize| (network.nodes[i].x - cx).powi(2) + (network.nodes[i].y - cy).powi(2);
                        d(a).total_cmp(&d(b))
                    })
                    .expect("network has nodes");
                nodes.push(nearest);
            }
        }
        Ok(CdmWorld {
            terrain,
            watersheds,
            watershed_tau,
            network,
            watershed_nodes,
        })
    }
}

fn cloud_stream(scenario: &Scenario, terrain: &Terrain, total: usize, seed: u64) -> Result<Box<dyn CloudStream>> {
    let (nx, ny) = (terrain.nx, terrain.ny);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match &scenario.clouds {
        CloudConfig::Records {
            storms,
            blob,
            records_path,
        } => {
            let hourly = match records_path {
                Some(path) => {
                    let raw = RawSeries::read_csv(path, Some(MetricKind::Precipitation), Some(60))?.regularize()?;
                    raw.values.iter().map(|v| v.unwrap_or(0.0)).collect()
                }
                None => synthetic_hourly_records(total.div_ceil(4), storms, &mut rng)?,
            };
            let records = RawSeries::regular(
                "records",
                MetricKind::Precipitation,
                60,
                Utc.timestamp_opt(0, 0).unwrap(),
                hourly,
            )?;
            let quarter: Vec<f64> = crate::data::upsample_precip(&records)?
                .values
                .into_iter()
                .map(|v| v.unwrap_or(0.0))
                .collect();
            if quarter.len() < total {
                return Err(Error::Config(format!(
                    "precipitation records cover {} steps, scenario needs {total}",
                    quarter.len()
                )));
            }
            use rand::Rng;
            let start = [rng.random_range(0.0..nx as f64), rng.random_range(0.0..ny as f64)];
            Box::new(RecordsClouds::new(quarter, nx, ny, blob.clone(), start)?)
        }
        CloudConfig::Lorenz { params } => Box::new(LorenzClouds::new(params.clone(), nx, ny)?),
        CloudConfig::RandomField { params } => Box::new(RandomFieldClouds::new(params.clone(), nx, ny, seed)?),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexitySummary {
    pub dimension: usize,
    pub entropy: Vec<f64>,
    pub complexity: Vec<f64>,
    pub median_entropy: f64,
    pub median_complexity: f64,
}

impl ComplexitySummary {
    pub fn of(series: &[Vec<f64>], d: usize) -> Result<ComplexitySummary> {
        let stats = series.iter().map(|s| complexity(s, d)).collect::<Result<Vec<_>>>()?;
        let entropy: Vec<f64> = stats.iter().map(|o| o.entropy).collect();
        let complexity: Vec<f64> = stats.iter().map(|o| o.complexity).collect();
        Ok(ComplexitySummary {
            dimension: d,
            median_entropy: median(&entropy).unwrap_or(f64::NAN),
            median_complexity: median(&complexity).unwrap_or(f64::NAN),
            entropy,
            complexity,
        })
    }
}

/// Exported node flows plus the grid-mean precipitation channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub scenario: Scenario,
    pub source: CloudSourceKind,
    pub node_ids: Vec<usize>,
    pub flows: Vec<Vec<f64>>,
    pub rain: Vec<f64>,
    pub complexity: ComplexitySummary,
}

/// Per-step watershed inflow distributed over nodes, plus the grid-mean rain.
pub fn simulate_inflows(scenario: &Scenario, world: &CdmWorld, total: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let seed = scenario.stream_seed();
    let mut clouds = cloud_stream(scenario, &world.terrain, total, sub_seed(seed, 3))?;
    let cell_area = world.terrain.cell_size * world.terrain.cell_size;
    let mut acc = WatershedAccumulator::new(&world.watersheds, cell_area, &world.watershed_tau)?;
    let mut inflows = vec![vec![0.0; total]; world.network.len()];
    let mut rain = Vec::with_capacity(total);
    let cells = world.terrain.len() as f64;
    for t in 0..total {
        let field = clouds.advance()?;
        rain.push(field.total_intensity() / cells);
        let q = acc.step(field)?;
        for (w, nodes) in world.watershed_nodes.iter().enumerate() {
            let share = q[w] / nodes.len() as f64;
            for &n in nodes {
                inflows[n][t] += share;
            }
        }
    }
    Ok((inflows, rain))
}

/// Runs the full generator and samples `n_nodes` node series.
pub fn build_synth(scenario: &Scenario) -> Result<SynthDataset> {
    scenario.validate()?;
    let world = CdmWorld::build(scenario)?;
    let total = scenario.warmup + scenario.steps;
    let (inflows, rain) = simulate_inflows(scenario, &world, total)?;
    let flows = world.network.propagate(&inflows)?.node_flows;
    let skip = scenario.warmup;
    let usable: Vec<usize> = (0..flows.len())
        .filter(|&i| {
            let s = &flows[i][skip..];
            s.iter().any(|&v| v != s[0])
        })
        .collect();
    if usable.len() < scenario.n_nodes {
        return Err(Error::Config(format!(
            "only {} of {} nodes carry varying flow; cannot export {}",
            usable.len(),
            flows.len(),
            scenario.n_nodes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(scenario.stream_seed(), 4));
    let mut node_ids: Vec<usize> = sample(&mut rng, usable.len(), scenario.n_nodes)
        .into_iter()
        .map(|k| usable[k])
        .collect();
    node_ids.sort_unstable();
    let exported: Vec<Vec<f64>> = node_ids.iter().map(|&i| flows[i][skip..].to_vec()).collect();
    let complexity = ComplexitySummary::of(&exported, DEFAULT_EMBEDDING_DIMENSION)?;
    Ok(SynthDataset {
        scenario: scenario.clone(),
        source: scenario.clouds.kind(),
        node_ids,
        flows: exported,
        rain: rain[skip..].to_vec(),
        complexity,
    })
}

impl SynthDataset {
    pub fn node_name(id: usize) -> String {
        format!("node_{id:04}")
    }

    /// Converts to the on-disk dataset layout (15-minute grid from 2020-01-01).
    pub fn to_dataset(&self) -> Result<Dataset> {
        let start = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();
        let mut channels: Vec<ProcessedChannel> = self
            .node_ids
            .iter()
            .zip(&self.flows)
            .map(|(&id, f)| ProcessedChannel {
                id: Self::node_name(id),
                kind: MetricKind::Discharge,
                native_resolution_minutes: 15,
                start,
                values: f.clone(),
                log: vec!["synthesized".into()],
            })
            .collect();
        channels.push(ProcessedChannel {
            id: "rain".into(),
            kind: MetricKind::Precipitation,
            native_resolution_minutes: 15,
            start,
            values: self.rain.clone(),
            log: vec!["synthesized: grid-mean intensity".into()],
        });
        let source = serde_json::json!({
            "scenario": self.scenario,
            "cloud_source": self.source,
            "complexity": self.complexity,
        });
        Dataset::from_channels(channels, Some(source))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lag_step_response_matches_closed_form() {
        for tau in [0.5, 3.0, 25.0] {
            let mut f = FirstOrderLag::new(tau, 1.0).unwrap();
            for t in 0..200 {
                let y = f.step(1.0);
                let exact = 1.0 - (-((t + 1) as f64) / tau).exp();
                assert!((y - exact).abs() < 1e-6, "tau {tau} t {t}");
            }
        }
        let mut passthrough = FirstOrderLag::new(0.0, 2.0).unwrap();
        assert_eq!(passthrough.step(3.0), 6.0);
    }

    fn small(preset: SynthPreset, seed: u64) -> Scenario {
        let mut s = Scenario::preset(preset, seed);
        s.grid = 32;
        s.network.nodes = 60;
        s.network.terminals = 2;
        s.n_nodes = 8;
        s.steps = 600;
        s.warmup = 100;
        s
    }

    #[test]
    fn synthesis_is_deterministic_and_config_sensitive() {
        let a = build_synth(&small(SynthPreset::SynthMid, 7)).unwrap();
        let b = build_synth(&small(SynthPreset::SynthMid, 7)).unwrap();
        assert_eq!(a, b);
        let mut other = small(SynthPreset::SynthMid, 7);
        other.detail = 0.8;
        let c = build_synth(&other).unwrap();
        assert_ne!(a.flows, c.flows);
    }

    #[test]
    fn exported_flows_are_non_negative() {
        for p in SynthPreset::ALL {
            let d = build_synth(&small(p, 1)).unwrap();
            assert_eq!(d.flows.len(), 8);
            assert!(d.flows.iter().flatten().all(|&v| v >= 0.0), "{p:?}");
            assert!(d.rain.iter().all(|&v| v >= 0.0));
            assert_eq!(d.rain.len(), 600);
        }
    }

    #[test]
    fn scenario_json_round_trip_and_validation() {
        let s = Scenario::preset(SynthPreset::SynthHigh, 3);
        let back = Scenario::from_json(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
        let minimal = r#"{"name": "x", "clouds": {"kind": "lorenz"}, "n_nodes": 10}"#;
        let m = Scenario::from_json(minimal).unwrap();
        assert_eq!(m.steps, 10_000);
        assert!(Scenario::from_json(r#"{"name": "x", "clouds": {"kind": "lorenz"}, "n_nodes": 100000}"#).is_err());
        assert!(Scenario::from_json(r#"{"name": "x"}"#).is_err());
    }

    #[test]
    fn dataset_export_matches_schema() {
        // long enough for several storms in the training split
        let mut s = small(SynthPreset::SynthLow, 2);
        s.steps = 4000;
        let ds = build_synth(&s).unwrap().to_dataset().unwrap();
        assert_eq!(ds.manifest.channels.len(), 9);
        assert_eq!(ds.manifest.len, 4000);
        assert!(ds.channel("rain").is_some());
    }
}
