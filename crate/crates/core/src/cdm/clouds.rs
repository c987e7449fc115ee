//! Cloud generators: each step yields a non-negative density grid whose local
//! precipitation intensity is `kappa * density`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloudSourceKind {
    Records,
    Lorenz,
    RandomField,
}

/// Density snapshot on an `nx × ny` grid (row-major, `y` outer).
#[derive(Clone, Debug, PartialEq)]
pub struct CloudField {
    pub nx: usize,
    pub ny: usize,
    pub density: Vec<f64>,
    pub kappa: f64,
    pub source: CloudSourceKind,
    pub step: usize,
}

impl CloudField {
    pub fn new(nx: usize, ny: usize, kappa: f64, source: CloudSourceKind) -> Self {
        Self {
            nx,
            ny,
            density: vec![0.0; nx * ny],
            kappa,
            source,
            step: 0,
        }
    }

    pub fn intensity(&self, cell: usize) -> f64 {
        self.kappa * self.density[cell]
    }

    /// Precipitation integrated over the grid.
    pub fn total_intensity(&self) -> f64 {
        self.kappa * self.density.iter().sum::<f64>()
    }
}

/// A source of successive cloud fields.
pub trait CloudStream {
    fn advance(&mut self) -> Result<&CloudField>;
}

/// Normalized 1-D Gaussian weights on a periodic axis, so `sum == 1`.
fn periodic_gaussian(n: usize, center: f64, sigma: f64, out: &mut [f64]) {
    let len = n as f64;
    for (i, w) in out.iter_mut().enumerate() {
        let mut d = (i as f64 + 0.5 - center).rem_euclid(len);
        if d > len / 2.0 {
            d = len - d;
        }
        *w = (-0.5 * (d / sigma).powi(2)).exp();
    }
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|w| *w /= s);
}

/// Writes a blob of total density `mass` centred at `(cx, cy)` into `field`.
fn deposit_blob(field: &mut CloudField, cx: f64, cy: f64, sigma: f64, mass: f64, gx: &mut [f64], gy: &mut [f64]) {
    if mass == 0.0 {
        field.density.fill(0.0);
        return;
    }
    periodic_gaussian(field.nx, cx, sigma, gx);
    periodic_gaussian(field.ny, cy, sigma, gy);
    for (y, row) in field.density.chunks_exact_mut(field.nx).enumerate() {
        let wy = mass * gy[y];
        for (d, &wx) in row.iter_mut().zip(gx.iter()) {
            *d = wy * wx;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StormParams {
    /// Mean hours between storm onsets.
    pub mean_interarrival_hours: f64,
    pub mean_duration_hours: f64,
    /// Mean hourly depth during a storm.
    pub mean_intensity: f64,
}

impl Default for StormParams {
    fn default() -> Self {
        Self {
            mean_interarrival_hours: 40.0,
            mean_duration_hours: 5.0,
            mean_intensity: 1.5,
        }
    }
}

/// Hourly precipitation from a Poisson storm process with exponential
/// durations and per-hour exponential depths.
pub fn synthetic_hourly_records(hours: usize, params: &StormParams, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let bad = |m: &str| Err(Error::Config(format!("storm parameters: {m}")));
    if !(params.mean_interarrival_hours > 0.0 && params.mean_duration_hours > 0.0) {
        return bad("mean interarrival and duration must be positive");
    }
    if !(params.mean_intensity >= 0.0) {
        return bad("mean intensity must be non-negative");
    }
    let gap = Exp::new(1.0 / params.mean_interarrival_hours).expect("positive rate");
    let duration = Exp::new(1.0 / params.mean_duration_hours).expect("positive rate");
    let depth = Exp::new(1.0).expect("unit rate");
    let mut out = vec![0.0; hours];
    let mut t = gap.sample(rng);
    while (t as usize) < hours {
        let start = t as usize;
        let len = (duration.sample(rng).ceil() as usize).max(1);
        let peak = params.mean_intensity * depth.sample(rng);
        for h in start..(start + len).min(hours) {
            out[h] += peak * (0.5 + depth.sample(rng)) / 1.5;
        }
        t += len as f64 + gap.sample(rng);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobParams {
    /// Blob standard deviation in cells.
    pub sigma: f64,
    /// Drift of the blob centre in cells per step.
    pub drift: [f64; 2],
    pub kappa: f64,
}

impl Default for BlobParams {
    fn default() -> Self {
        Self {
            sigma: 12.0,
            drift: [0.35, 0.15],
            kappa: 1.0,
        }
    }
}

/// Precipitation records driving a drifting blob: step `t` deposits a
/// Gaussian blob whose total intensity equals `records[t]`.
pub struct RecordsClouds {
    records: Vec<f64>,
    blob: BlobParams,
    center: [f64; 2],
    field: CloudField,
    gx: Vec<f64>,
    gy: Vec<f64>,
}

impl RecordsClouds {
    pub fn new(records: Vec<f64>, nx: usize, ny: usize, blob: BlobParams, start: [f64; 2]) -> Result<Self> {
        if let Some(r) = records.iter().find(|r| !(**r >= 0.0 && r.is_finite())) {
            return Err(Error::Input(format!(
                "precipitation record {r} is not a non-negative number"
            )));
        }
        if !(blob.sigma > 0.0 && blob.kappa > 0.0) {
            return Err(Error::Config("blob sigma and kappa must be positive".into()));
        }
        Ok(Self {
            records,
            center: start,
            field: CloudField::new(nx, ny, blob.kappa, CloudSourceKind::Records),
            blob,
            gx: vec![0.0; nx],
            gy: vec![0.0; ny],
        })
    }
}

impl CloudStream for RecordsClouds {
    fn advance(&mut self) -> Result<&CloudField> {
        let t = self.field.step;
        let record = *self.records.get(t).ok_or_else(|| {
            Error::Config(format!(
                "precipitation records exhausted after {} steps",
                self.records.len()
            ))
        })?;
        let [cx, cy] = self.center;
        // total intensity = kappa * mass = record
        deposit_blob(
            &mut self.field,
            cx,
            cy,
            self.blob.sigma,
            record / self.blob.kappa,
            &mut self.gx,
            &mut self.gy,
        );
        self.center = [
            (cx + self.blob.drift[0]).rem_euclid(self.field.nx as f64),
            (cy + self.blob.drift[1]).rem_euclid(self.field.ny as f64),
        ];
        self.field.step += 1;
        Ok(&self.field)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LorenzParams {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub dt: f64,
    /// RK4 steps per emitted field.
    pub substeps: usize,
    pub initial: [f64; 3],
    /// Blob mass is `mass_scale * max(|z| - z_threshold, 0)`.
    pub mass_scale: f64,
    pub z_threshold: f64,
    /// State ranges mapped onto the grid axes.
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub blob_sigma: f64,
    pub kappa: f64,
}

impl Default for LorenzParams {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            dt: 0.005,
            substeps: 2,
            initial: [1.0, 1.0, 20.0],
            mass_scale: 1.0,
            z_threshold: 0.0,
            x_range: [-20.0, 20.0],
            y_range: [-27.0, 27.0],
            blob_sigma: 10.0,
            kappa: 1.0,
        }
    }
}

pub fn lorenz_rhs(p: &LorenzParams, s: [f64; 3]) -> [f64; 3] {
    [
        p.sigma * (s[1] - s[0]),
        s[0] * (p.rho - s[2]) - s[1],
        s[0] * s[1] - p.beta * s[2],
    ]
}

/// One classical Runge–Kutta step.
pub fn rk4_step(p: &LorenzParams, s: [f64; 3], dt: f64) -> [f64; 3] {
    let add = |a: [f64; 3], b: [f64; 3], h: f64| [a[0] + h * b[0], a[1] + h * b[1], a[2] + h * b[2]];
    let k1 = lorenz_rhs(p, s);
    let k2 = lorenz_rhs(p, add(s, k1, dt / 2.0));
    let k3 = lorenz_rhs(p, add(s, k2, dt / 2.0));
    let k4 = lorenz_rhs(p, add(s, k3, dt));
    let mut out = s;
    for i in 0..3 {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Blob steered by the Lorenz system: `(x, y)` picks the centre, `|z|` the mass.
pub struct LorenzClouds {
    params: LorenzParams,
    state: [f64; 3],
    field: CloudField,
    gx: Vec<f64>,
    gy: Vec<f64>,
}

impl LorenzClouds {
    pub fn new(params: LorenzParams, nx: usize, ny: usize) -> Result<Self> {
        if !(params.dt > 0.0 && params.dt <= 0.01) {
            return Err(Error::Config(format!("Lorenz dt {} outside (0, 0.01]", params.dt)));
        }
        if params.substeps == 0 || !(params.blob_sigma > 0.0 && params.kappa > 0.0 && params.mass_scale >= 0.0) {
            return Err(Error::Config(
                "Lorenz substeps, blob sigma, kappa and mass scale must be positive".into(),
            ));
        }
        Ok(Self {
            state: params.initial,
            field: CloudField::new(nx, ny, params.kappa, CloudSourceKind::Lorenz),
            gx: vec![0.0; nx],
            gy: vec![0.0; ny],
            params,
        })
    }

    pub fn state(&self) -> [f64; 3] {
        self.state
    }
}

impl CloudStream for LorenzClouds {
    fn advance(&mut self) -> Result<&CloudField> {
        let p = &self.params;
        for _ in 0..p.substeps {
            self.state = rk4_step(p, self.state, p.dt);
        }
        if self.state.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "Lorenz state at step {} (dt {} too large?)",
                self.field.step, p.dt
            )));
        }
        let [x, y, z] = self.state;
        let map = |v: f64, r: [f64; 2], n: usize| ((v - r[0]) / (r[1] - r[0])).clamp(0.0, 1.0) * n as f64;
        let cx = map(x, p.x_range, self.field.nx);
        let cy = map(y, p.y_range, self.field.ny);
        let mass = p.mass_scale * (z.abs() - p.z_threshold).max(0.0);
        deposit_blob(&mut self.field, cx, cy, p.blob_sigma, mass, &mut self.gx, &mut self.gy);
        self.field.step += 1;
        Ok(&self.field)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomFieldParams {
    /// Correlation length in cells.
    pub length_scale: f64,
    pub variance: f64,
    /// Added to the zero-mean field before clamping at zero.
    pub offset: f64,
    /// Translation of the pattern in cells per step.
    pub drift: [f64; 2],
    /// Standard deviation of the per-mode phase rate (radians per step).
    pub phase_rate: f64,
    pub kappa: f64,
}

impl Default for RandomFieldParams {
    fn default() -> Self {
        Self {
            length_scale: 6.0,
            variance: 1.0,
            offset: 0.0,
            drift: [0.3, 0.1],
            phase_rate: 0.15,
            kappa: 1.0,
        }
    }
}

/// In-place 2-D FFT of a row-major `n × n` array: rows, then columns.
fn fft2(data: &mut [Complex<f64>], n: usize, fft: &Arc<dyn Fft<f64>>) {
    fft.process(data);
    transpose_square(data, n);
    fft.process(data);
    transpose_square(data, n);
}

fn transpose_square<T>(data: &mut [T], n: usize) {
    for i in 0..n {
        for j in i + 1..n {
            data.swap(i * n + j, j * n + i);
        }
    }
}

/// Stationary Gaussian field with covariance `variance * exp(-(r/l)^2)` on an
/// `n × n` torus, synthesized through the circulant spectrum and evolved by
/// rotating Fourier phases. Non-square grids are cropped from the torus.
pub struct RandomFieldClouds {
    n: usize,
    params: RandomFieldParams,
    coeffs: Vec<Complex<f64>>,
    rates: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    work: Vec<Complex<f64>>,
    field: CloudField,
}

impl RandomFieldClouds {
    pub fn new(params: RandomFieldParams, nx: usize, ny: usize, seed: u64) -> Result<Self> {
        let n = nx.max(ny);
        if !(params.length_scale > 0.0) {
            return Err(Error::Config(format!(
                "correlation length {} must be positive",
                params.length_scale
            )));
        }
        if !(params.variance >= 0.0 && params.kappa > 0.0) {
            return Err(Error::Config("variance must be non-negative and kappa positive".into()));
        }
        if params.length_scale > n as f64 {
            log::warn!(
                "correlation length {} exceeds the {n}-cell grid; the field will be nearly constant",
                params.length_scale
            );
        }
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        // circulant covariance, minimum-image distances
        let mut spectrum: Vec<Complex<f64>> = (0..n * n)
            .map(|k| {
                let wrap = |d: usize| d.min(n - d) as f64;
                let (dy, dx) = (wrap(k / n), wrap(k % n));
                let r2 = dx * dx + dy * dy;
                Complex::new(
                    params.variance * (-r2 / (params.length_scale * params.length_scale)).exp(),
                    0.0,
                )
            })
            .collect();
        fft2(&mut spectrum, n, &fft);
        let total = (n * n) as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut coeffs = Vec::with_capacity(n * n);
        let mut rates = Vec::with_capacity(n * n);
        for (k, lambda) in spectrum.iter().enumerate() {
            let amp = (lambda.re.max(0.0) / total).sqrt();
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            coeffs.push(Complex::new(amp * z1, amp * z2));
            let signed = |i: usize| if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
            let (ky, kx) = (signed(k / n), signed(k % n));
            let advect = -2.0 * std::f64::consts::PI * (kx * params.drift[0] + ky * params.drift[1]) / n as f64;
            let jitter: f64 = rng.sample::<f64, _>(StandardNormal) * params.phase_rate;
            rates.push(advect + jitter);
        }
        Ok(Self {
            n,
            field: CloudField::new(nx, ny, params.kappa, CloudSourceKind::RandomField),
            params,
            coeffs,
            rates,
            fft,
            work: vec![Complex::new(0.0, 0.0); n * n],
        })
    }

    /// The zero-mean Gaussian field on the full `n × n` torus at `step`,
    /// before offset and clamping.
    pub fn gaussian_field(&mut self, step: usize) -> Vec<f64> {
        let t = step as f64;
        for ((w, c), r) in self.work.iter_mut().zip(&self.coeffs).zip(&self.rates) {
            *w = c * Complex::from_polar(1.0, r * t);
        }
        fft2(&mut self.work, self.n, &self.fft);
        self.work.iter().map(|c| c.re).collect()
    }
}

impl CloudStream for RandomFieldClouds {
    fn advance(&mut self) -> Result<&CloudField> {
        let g = self.gaussian_field(self.field.step);
        let (nx, n, offset) = (self.field.nx, self.n, self.params.offset);
        for (y, row) in self.field.density.chunks_exact_mut(nx).enumerate() {
            for (d, v) in row.iter_mut().zip(&g[y * n..y * n + nx]) {
                *d = (v + offset).max(0.0);
            }
        }
        self.field.step += 1;
        Ok(&self.field)
    }
}
