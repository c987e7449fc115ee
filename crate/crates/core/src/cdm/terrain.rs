//! Elevation grids, watershed segmentation and per-watershed runoff filters.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::clouds::CloudField;
use super::FirstOrderLag;
use crate::error::{Error, Result};

/// Row-major elevation grid (`y` outer), in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct Terrain {
    pub nx: usize,
    pub ny: usize,
    pub cell_size: f64,
    pub elevation: Vec<f64>,
}

/// Total-order key for elevations (all finite).
#[derive(Clone, Copy, Debug, PartialEq)]
struct Level(f64);

impl Eq for Level {}

impl Ord for Level {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl PartialOrd for Level {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Terrain {
    pub fn new(nx: usize, ny: usize, cell_size: f64, elevation: Vec<f64>) -> Result<Self> {
        if nx == 0 || ny == 0 || elevation.len() != nx * ny {
            return Err(Error::Dimension {
                op: "Terrain::new",
                lhs: vec![ny, nx],
                rhs: vec![elevation.len()],
            });
        }
        if !(cell_size > 0.0) {
            return Err(Error::Input(format!("cell size {cell_size} must be positive")));
        }
        if let Some(i) = elevation.iter().position(|e| !e.is_finite()) {
            return Err(Error::Input(format!("elevation at cell {i} is not finite")));
        }
        Ok(Self {
            nx,
            ny,
            cell_size,
            elevation,
        })
    }

    /// Midpoint-displacement (diamond–square) surface with the given relief;
    /// `roughness` in (0, 1) scales the displacement per octave.
    pub fn fractal(nx: usize, ny: usize, roughness: f64, relief: f64, seed: u64) -> Result<Self> {
        if !(roughness > 0.0 && roughness < 1.0) {
            return Err(Error::Config(format!("roughness {roughness} must lie in (0, 1)")));
        }
        let mut size = 2;
        while size + 1 < nx.max(ny) {
            size *= 2;
        }
        let n = size + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut h = vec![0.0f64; n * n];
        for &(x, y) in &[(0, 0), (size, 0), (0, size), (size, size)] {
            h[y * n + x] = rng.random_range(-1.0..1.0);
        }
        let mut step = size;
        let mut scale = 1.0;
        while step > 1 {
            let half = step / 2;
            for y in (half..n).step_by(step) {
                for x in (half..n).step_by(step) {
                    let avg = (h[(y - half) * n + x - half]
                        + h[(y - half) * n + x + half]
                        + h[(y + half) * n + x - half]
                        + h[(y + half) * n + x + half])
                        / 4.0;
                    h[y * n + x] = avg + scale * rng.random_range(-1.0..1.0);
                }
            }
            for y in (0..n).step_by(half) {
                let start = if (y / half) % 2 == 0 { half } else { 0 };
                for x in (start..n).step_by(step) {
                    let mut sum = 0.0;
                    let mut count = 0.0;
                    for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                        let (xx, yy) = (x as i64 + dx * half as i64, y as i64 + dy * half as i64);
                        if (0..n as i64).contains(&xx) && (0..n as i64).contains(&yy) {
                            sum += h[yy as usize * n + xx as usize];
                            count += 1.0;
                        }
                    }
                    h[y * n + x] = sum / count + scale * rng.random_range(-1.0..1.0);
                }
            }
            step = half;
            scale *= roughness;
        }
        let mut elevation: Vec<f64> = (0..ny)
            .flat_map(|y| (0..nx).map(move |x| (x, y)))
            .map(|(x, y)| h[y * n + x])
            .collect();
        let lo = elevation.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = elevation.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        elevation.iter_mut().for_each(|e| *e = (*e - lo) / span * relief);
        Terrain::new(nx, ny, 1.0, elevation)
    }

    /// Parses an ASCII grid: `ncols`, `nrows` and `cellsize` header lines
    /// (other `key value` header lines are ignored), then `nrows` rows.
    pub fn parse_ascii_grid(text: &str) -> Result<Self> {
        let mut header = BTreeMap::new();
        let mut values = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let first = line.split_whitespace().next().expect("non-empty");
            if values.is_empty() && first.chars().next().is_some_and(|c| c.is_ascii_alphabetic()) {
                let mut parts = line.split_whitespace();
                let key = parts.next().expect("non-empty").to_ascii_lowercase();
                let value: f64 = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Input(format!("line {}: header `{key}` needs a number", lineno + 1)))?;
                header.insert(key, value);
                continue;
            }
            for tok in line.split_whitespace() {
                values.push(
                    tok.parse::<f64>()
                        .map_err(|_| Error::Input(format!("line {}: bad elevation `{tok}`", lineno + 1)))?,
                );
            }
        }
        let get = |k: &str| {
            header
                .get(k)
                .copied()
                .ok_or_else(|| Error::Input(format!("missing `{k}` header")))
        };
        let nx = get("ncols")? as usize;
        let ny = get("nrows")? as usize;
        let cell = get("cellsize")?;
        if values.len() != nx * ny {
            return Err(Error::Input(format!(
                "grid declares {nx}×{ny} cells but holds {} values",
                values.len()
            )));
        }
        Terrain::new(nx, ny, cell, values)
    }

    pub fn read_ascii_grid(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_ascii_grid(&text)
    }

    pub fn len(&self) -> usize {
        self.elevation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elevation.is_empty()
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.elevation[y * self.nx + x]
    }

    /// Cell under a continuous position in cell units (clamped to the grid).
    pub fn cell_at(&self, x: f64, y: f64) -> usize {
        let cx = (x.max(0.0) as usize).min(self.nx - 1);
        let cy = (y.max(0.0) as usize).min(self.ny - 1);
        cy * self.nx + cx
    }

    /// Von Neumann neighbours in a fixed order: left, right, up, down.
    pub fn neighbors(&self, cell: usize) -> impl Iterator<Item = usize> + '_ {
        let (x, y) = (cell % self.nx, cell / self.nx);
        let nx = self.nx;
        [
            (x > 0).then(|| cell - 1),
            (x + 1 < nx).then(|| cell + 1),
            (y > 0).then(|| cell - nx),
            (y + 1 < self.ny).then(|| cell + nx),
        ]
        .into_iter()
        .flatten()
    }

    /// Lowest strictly lower neighbour (first in neighbour order on ties).
    pub fn steepest_descent(&self, cell: usize) -> Option<usize> {
        let mut best: Option<usize> = None;
        for n in self.neighbors(cell) {
            if self.elevation[n] < self.elevation[cell] && best.is_none_or(|b| self.elevation[n] < self.elevation[b]) {
                best = Some(n);
            }
        }
        best
    }

    /// Gradient magnitude from one-sided or central differences.
    pub fn slope(&self, cell: usize) -> f64 {
        let (x, y) = (cell % self.nx, cell / self.nx);
        let diff = |a: usize, b: usize, span: usize| {
            if span == 0 {
                0.0
            } else {
                (self.elevation[b] - self.elevation[a]) / (span as f64 * self.cell_size)
            }
        };
        let (x0, x1) = (x.saturating_sub(1), (x + 1).min(self.nx - 1));
        let (y0, y1) = (y.saturating_sub(1), (y + 1).min(self.ny - 1));
        let gx = diff(y * self.nx + x0, y * self.nx + x1, x1 - x0);
        let gy = diff(y0 * self.nx + x, y1 * self.nx + x, y1 - y0);
        (gx * gx + gy * gy).sqrt()
    }
}

/// Watershed label per cell (labels `0..count`, numbered by first cell).
#[derive(Clone, Debug, PartialEq)]
pub struct Watersheds {
    pub nx: usize,
    pub ny: usize,
    pub labels: Vec<usize>,
    pub count: usize,
}

impl Watersheds {
    pub fn cells(&self, label: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.count];
        self.labels.iter().for_each(|&l| s[l] += 1);
        s
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut a: usize) -> usize {
        while self.parent[a] != a {
            self.parent[a] = self.parent[self.parent[a]];
            a = self.parent[a];
        }
        a
    }
}

/// Regional minima: connected equal-elevation plateaus without a lower
/// neighbour. Returns one seed label per cell (`usize::MAX` elsewhere).
fn regional_minima(t: &Terrain) -> (Vec<usize>, usize) {
    let mut label = vec![usize::MAX; t.len()];
    let mut visited = vec![false; t.len()];
    let mut count = 0;
    for start in 0..t.len() {
        if visited[start] {
            continue;
        }
        let level = t.elevation[start];
        let mut plateau = vec![start];
        visited[start] = true;
        let mut is_min = true;
        let mut k = 0;
        while k < plateau.len() {
            let c = plateau[k];
            k += 1;
            for n in t.neighbors(c) {
                let e = t.elevation[n];
                if e < level {
                    is_min = false;
                } else if e == level && !visited[n] {
                    visited[n] = true;
                    plateau.push(n);
                }
            }
        }
        if is_min {
            for c in plateau {
                label[c] = count;
            }
            count += 1;
        }
    }
    (label, count)
}

/// Priority-flood watershed segmentation from regional minima.
///
/// Cells leave the queue in non-decreasing elevation; each one joins the
/// basin of its steepest-descent neighbour (or, on a plateau, the basin that
/// reached it). Basins whose spill depth below the lowest pass to a
/// neighbour is at most `(1 - detail) * relief` are merged, so `detail = 1`
/// keeps every minimum and `detail = 0` yields a single watershed.
pub fn segment_watersheds(t: &Terrain, detail: f64) -> Watersheds {
    let detail = detail.clamp(0.0, 1.0);
    let (mut label, n_minima) = regional_minima(t);
    let mut heap = BinaryHeap::new();
    let mut queued = vec![false; t.len()];
    let mut counter = 0u64;
    for c in 0..t.len() {
        if label[c] != usize::MAX {
            heap.push(Reverse((Level(t.elevation[c]), counter, c, usize::MAX)));
            counter += 1;
            queued[c] = true;
        }
    }
    // lowest pass elevation between each pair of basins
    let mut passes: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut basin_min = vec![f64::INFINITY; n_minima];
    while let Some(Reverse((_, _, c, from))) = heap.pop() {
        if label[c] == usize::MAX {
            label[c] = match t.steepest_descent(c) {
                Some(d) => label[d],
                None => label[from],
            };
        }
        let l = label[c];
        basin_min[l] = basin_min[l].min(t.elevation[c]);
        for n in t.neighbors(c) {
            if !queued[n] {
                queued[n] = true;
                heap.push(Reverse((Level(t.elevation[n].max(t.elevation[c])), counter, n, c)));
                counter += 1;
            } else if label[n] != usize::MAX && label[n] != l {
                let key = (l.min(label[n]), l.max(label[n]));
                let pass = t.elevation[c].max(t.elevation[n]);
                let e = passes.entry(key).or_insert(pass);
                *e = e.min(pass);
            }
        }
    }

    let lo = t.elevation.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.elevation.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = (1.0 - detail) * (hi - lo);
    let mut ordered: Vec<((usize, usize), f64)> = passes.into_iter().collect();
    ordered.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut uf = UnionFind::new(n_minima);
    let mut comp_min = basin_min;
    for ((a, b), pass) in ordered {
        let (ra, rb) = (uf.find(a), uf.find(b));
        if ra == rb {
            continue;
        }
        let depth = pass - comp_min[ra].max(comp_min[rb]);
        if depth <= threshold {
            let (keep, drop) = (ra.min(rb), ra.max(rb));
            uf.parent[drop] = keep;
            comp_min[keep] = comp_min[ra].min(comp_min[rb]);
        }
    }
    let mut compact = vec![usize::MAX; n_minima];
    let mut count = 0;
    let labels = label
        .iter()
        .map(|&l| {
            let root = uf.find(l);
            if compact[root] == usize::MAX {
                compact[root] = count;
                count += 1;
            }
            compact[root]
        })
        .collect();
    Watersheds {
        nx: t.nx,
        ny: t.ny,
        labels,
        count,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunoffParams {
    /// Time constant (steps) of a flat watershed.
    pub tau_flat: f64,
    /// Time constant approached by very steep watersheds.
    pub tau_min: f64,
    /// Slope at which the time constant is halfway between the two.
    pub slope_ref: f64,
}

impl Default for RunoffParams {
    fn default() -> Self {
        Self {
            tau_flat: 12.0,
            tau_min: 1.0,
            slope_ref: 0.5,
        }
    }
}

/// Per-watershed runoff time constant from the mean slope: steeper is faster.
pub fn watershed_time_constants(t: &Terrain, w: &Watersheds, p: &RunoffParams) -> Vec<f64> {
    let mut sum = vec![0.0; w.count];
    let mut n = vec![0usize; w.count];
    for (c, &l) in w.labels.iter().enumerate() {
        sum[l] += t.slope(c);
        n[l] += 1;
    }
    sum.iter()
        .zip(&n)
        .map(|(s, &k)| {
            let slope = s / k as f64;
            p.tau_min + (p.tau_flat - p.tau_min) / (1.0 + slope / p.slope_ref)
        })
        .collect()
}

/// Integrates rainfall per watershed and smooths it with one first-order lag
/// per watershed.
pub struct WatershedAccumulator {
    labels: Vec<usize>,
    cell_area: f64,
    filters: Vec<FirstOrderLag>,
    raw: Vec<f64>,
}

impl WatershedAccumulator {
    pub fn new(w: &Watersheds, cell_area: f64, taus: &[f64]) -> Result<Self> {
        if taus.len() != w.count {
            return Err(Error::Dimension {
                op: "WatershedAccumulator::new",
                lhs: vec![w.count],
                rhs: vec![taus.len()],
            });
        }
        Ok(Self {
            labels: w.labels.clone(),
            cell_area,
            filters: taus
                .iter()
                .map(|&tau| FirstOrderLag::new(tau, 1.0))
                .collect::<Result<_>>()?,
            raw: vec![0.0; w.count],
        })
    }

    /// Inflow of every watershed for this step.
    pub fn step(&mut self, field: &CloudField) -> Result<Vec<f64>> {
        if field.density.len() != self.labels.len() {
            return Err(Error::Dimension {
                op: "WatershedAccumulator::step",
                lhs: vec![self.labels.len()],
                rhs: vec![field.density.len()],
            });
        }
        self.raw.fill(0.0);
        for (&l, &d) in self.labels.iter().zip(&field.density) {
            self.raw[l] += d;
        }
        let scale = field.kappa * self.cell_area;
        Ok(self
            .raw
            .iter()
            .zip(self.filters.iter_mut())
            .map(|(&r, f)| f.step(r * scale))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(nx: usize, ny: usize) -> Terrain {
        Terrain::new(nx, ny, 1.0, (0..nx * ny).map(|i| (i % nx + i / nx) as f64).collect()).unwrap()
    }

    #[test]
    fn ramp_is_one_watershed() {
        let w = segment_watersheds(&ramp(12, 9), 1.0);
        assert_eq!(w.count, 1);
    }

    #[test]
    fn plateau_minimum_is_one_watershed() {
        let mut t = ramp(10, 10);
        for c in [0, 1, 10, 11] {
            t.elevation[c] = -1.0;
        }
        assert_eq!(segment_watersheds(&t, 1.0).count, 1);
    }

    #[test]
    fn two_bowls_split_at_the_ridge() {
        let (nx, ny) = (21, 11);
        let elev = (0..nx * ny)
            .map(|i| {
                let (x, y) = ((i % nx) as f64, (i / nx) as f64);
                let d1 = (x - 5.0).powi(2) + (y - 5.0).powi(2);
                let d2 = (x - 15.0).powi(2) + (y - 5.0).powi(2);
                d1.min(d2)
            })
            .collect();
        let t = Terrain::new(nx, ny, 1.0, elev).unwrap();
        let w = segment_watersheds(&t, 1.0);
        assert_eq!(w.count, 2);
        for y in 0..ny {
            for x in 0..nx {
                let l = w.labels[y * nx + x];
                if x < 10 {
                    assert_eq!(l, w.labels[5 * nx + 5]);
                } else if x > 10 {
                    assert_eq!(l, w.labels[5 * nx + 15]);
                }
            }
        }
        // merging everything gives one basin
        assert_eq!(segment_watersheds(&t, 0.0).count, 1);
    }

    #[test]
    fn steepest_descent_paths_end_in_their_own_basin() {
        let t = Terrain::fractal(64, 64, 0.6, 100.0, 17).unwrap();
        let w = segment_watersheds(&t, 1.0);
        assert!(w.count > 1);
        for c in 0..t.len() {
            let mut cur = c;
            loop {
                // independent descent: scan all four neighbours for the lowest
                let (x, y) = (cur % 64, cur / 64);
                let mut best = cur;
                for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                    if (0..64).contains(&xx) && (0..64).contains(&yy) {
                        let n = yy as usize * 64 + xx as usize;
                        if t.elevation[n] < t.elevation[best] {
                            best = n;
                        }
                    }
                }
                if best == cur {
                    break;
                }
                cur = best;
            }
            assert_eq!(w.labels[c], w.labels[cur], "cell {c} drains to {cur}");
        }
    }

    #[test]
    fn detail_level_controls_label_count() {
        let t = Terrain::fractal(64, 64, 0.6, 100.0, 3).unwrap();
        let counts: Vec<usize> = [0.0, 0.5, 0.9, 0.97, 1.0]
            .iter()
            .map(|&d| segment_watersheds(&t, d).count)
            .collect();
        assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
        assert_eq!(counts[0], 1);
        assert!(counts[4] > counts[2]);
    }

    #[test]
    fn ascii_grid_import() {
        let text = "ncols 3\nnrows 2\nxllcorner 0\ncellsize 2.5\n1 2 3\n4 5 6\n";
        let t = Terrain::parse_ascii_grid(text).unwrap();
        assert_eq!((t.nx, t.ny, t.cell_size), (3, 2, 2.5));
        assert_eq!(t.at(2, 1), 6.0);
        assert!(Terrain::parse_ascii_grid("ncols 3\nnrows 2\ncellsize 1\n1 2 3\n").is_err());
    }

    #[test]
    fn steeper_watersheds_respond_faster() {
        let flat = Terrain::new(4, 4, 1.0, (0..16).map(|i| i as f64 * 0.01).collect()).unwrap();
        let steep = Terrain::new(4, 4, 1.0, (0..16).map(|i| i as f64 * 3.0).collect()).unwrap();
        let p = RunoffParams::default();
        let tf = watershed_time_constants(&flat, &segment_watersheds(&flat, 1.0), &p)[0];
        let ts = watershed_time_constants(&steep, &segment_watersheds(&steep, 1.0), &p)[0];
        assert!(ts < tf);
    }

    #[test]
    fn rain_stays_in_its_watershed() {
        let w = Watersheds {
            nx: 4,
            ny: 1,
            labels: vec![0, 0, 1, 1],
            count: 2,
        };
        let mut acc = WatershedAccumulator::new(&w, 1.0, &[2.0, 3.0]).unwrap();
        let mut field = CloudField::new(4, 1, 1.0, super::super::clouds::CloudSourceKind::Records);
        field.density = vec![1.0, 2.0, 0.0, 0.0];
        for _ in 0..10 {
            let q = acc.step(&field).unwrap();
            assert_eq!(q[1], 0.0);
            assert!(q[0] > 0.0);
        }
        field.density.fill(0.0);
        let mut quiet = WatershedAccumulator::new(&w, 1.0, &[2.0, 3.0]).unwrap();
        assert_eq!(quiet.step(&field).unwrap(), vec![0.0, 0.0]);
    }
}
