//! City grids, accident rasterization, feature assembly, normalization,
//! sliding windows, chronological splits and a synthetic city generator.
//!
//! On-disk layout of a data directory:
//!
//! * `events.csv`: header `slot,row,col,severity`, severity 1 (minor),
//!   2 (injury) or 3 (fatal).
//! * `features.csv` (optional): header `slot,row,col,channel,value` for the
//!   activity channels `1..d`; channel 0 is always rebuilt from the events.
//! * `meta.json`: grid dimensions, slot count, channel count, seed and slot
//!   duration.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Neighborhood, WindowConfig};
use crate::error::{Error, Result};
use crate::graph::normalize_adjacency;
use crate::numerics::{SplitMix64, Tensor};

/// `rows × cols` cells; region `n = i·cols + j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CityGrid {
    pub rows: usize,
    pub cols: usize,
    pub cell_size_km: f64,
}

impl CityGrid {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid must have at least one row and column, got {rows}×{cols}"
            )));
        }
        Ok(Self {
            rows,
            cols,
            cell_size_km: 2.0,
        })
    }

    pub fn regions(&self) -> usize {
        self.rows * self.cols
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn coords(&self, region: usize) -> (usize, usize) {
        (region / self.cols, region % self.cols)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Severity {
    Minor = 1,
    Injury = 2,
    Fatal = 3,
}

impl Severity {
    pub fn risk(self) -> u32 {
        self as u32
    }
}

impl TryFrom<u32> for Severity {
    type Error = Error;
    fn try_from(v: u32) -> Result<Self> {
        match v {
            1 => Ok(Severity::Minor),
            2 => Ok(Severity::Injury),
            3 => Ok(Severity::Fatal),
            other => Err(Error::InvalidArgument(format!("severity {other} not in {{1,2,3}}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventRecord {
    pub slot: usize,
    pub row: usize,
    pub col: usize,
    pub severity: Severity,
}

/// Sums event severities per slot and cell. Returns a `num_slots × N` tensor;
/// row `t` is the risk map of slot `t` flattened row-major.
pub fn rasterize_events(events: &[EventRecord], grid: &CityGrid, num_slots: usize) -> Result<Tensor> {
    let n = grid.regions();
    let mut risk = Tensor::zeros([num_slots, n]);
    for (i, e) in events.iter().enumerate() {
        if e.row >= grid.rows || e.col >= grid.cols || e.slot >= num_slots {
            return Err(Error::Record {
                index: i,
                reason: format!(
                    "slot {} row {} col {} outside {} slots × {}×{} grid",
                    e.slot, e.row, e.col, num_slots, grid.rows, grid.cols
                ),
            });
        }
        let cell = grid.index(e.row, e.col);
        let v = risk.at(e.slot, cell) + e.severity.risk() as f64;
        risk.set(e.slot, cell, v);
    }
    Ok(risk)
}

/// Per-slot grid features `X_t ∈ R^{N×d}`; channel 0 is risk.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeries {
    slots: usize,
    regions: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureSeries {
    pub fn zeros(slots: usize, regions: usize, channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument("need at least the risk channel".into()));
        }
        Ok(Self {
            slots,
            regions,
            channels,
            data: vec![0.0; slots * regions * channels],
        })
    }

    /// Builds the series from a risk tensor (`slots × N`); activity channels start at zero.
    pub fn from_risk(risk: &Tensor, channels: usize) -> Result<Self> {
        let mut f = Self::zeros(risk.rows(), risk.cols(), channels)?;
        for t in 0..risk.rows() {
            for n in 0..risk.cols() {
                f.set(t, n, 0, risk.at(t, n));
            }
        }
        Ok(f)
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn get(&self, slot: usize, region: usize, channel: usize) -> f64 {
        self.data[(slot * self.regions + region) * self.channels + channel]
    }

    #[inline]
    pub fn set(&mut self, slot: usize, region: usize, channel: usize, v: f64) {
        self.data[(slot * self.regions + region) * self.channels + channel] = v;
    }

    /// Risk channel as a `slots × N` tensor.
    pub fn risk(&self) -> Tensor {
        let mut out = Tensor::zeros([self.slots, self.regions]);
        for t in 0..self.slots {
            for n in 0..self.regions {
                out.set(t, n, self.get(t, n, 0));
            }
        }
        out
    }
}

/// Min-max statistics per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// channels whose fitted max equals min; they normalize to 0
    pub degenerate: Vec<bool>,
}

impl NormStats {
    /// Fits per-channel min and max over the given slots.
    pub fn fit(series: &FeatureSeries, slots: Range<usize>) -> Result<Self> {
        if slots.is_empty() || slots.end > series.slots() {
            return Err(Error::InvalidArgument(format!(
                "normalization range {slots:?} invalid for {} slots",
                series.slots()
            )));
        }
        let d = series.channels();
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for t in slots {
            for n in 0..series.regions() {
                for c in 0..d {
                    let v = series.get(t, n, c);
                    min[c] = min[c].min(v);
                    max[c] = max[c].max(v);
                }
            }
        }
        let degenerate: Vec<bool> = min.iter().zip(&max).map(|(a, b)| a == b).collect();
        for (c, &flag) in degenerate.iter().enumerate() {
            if flag {
                log::warn!("channel {c} is constant ({}) on the fitting range; mapped to 0", min[c]);
            }
        }
        Ok(Self { min, max, degenerate })
    }

    pub fn normalize_value(&self, channel: usize, v: f64) -> f64 {
        if self.degenerate[channel] {
            0.0
        } else {
            (v - self.min[channel]) / (self.max[channel] - self.min[channel])
        }
    }

    pub fn denormalize_value(&self, channel: usize, v: f64) -> f64 {
        if self.degenerate[channel] {
            self.min[channel]
        } else {
            v * (self.max[channel] - self.min[channel]) + self.min[channel]
        }
    }

    pub fn apply(&self, series: &FeatureSeries) -> FeatureSeries {
        let mut out = series.clone();
        for t in 0..series.slots() {
            for n in 0..series.regions() {
                for c in 0..series.channels() {
                    out.set(t, n, c, self.normalize_value(c, series.get(t, n, c)));
                }
            }
        }
        out
    }
}

/// Normalized values, min, max and the degenerate flag for a single channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub values: Vec<f64>,
    pub min: f64,
    pub max: f64,
    pub degenerate: bool,
}

/// `(x − min)/(max − min)` for one channel; a constant channel maps to 0.
pub fn minmax_normalize(series: &[f64]) -> Result<Normalized> {
    if series.is_empty() {
        return Err(Error::Empty("minmax_normalize"));
    }
    let min = series.iter().copied().fold(f64::INFINITY, f64::min);
    let max = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = min == max;
    if degenerate {
        log::warn!("constant channel ({min}) mapped to 0");
    }
    let values = series
        .iter()
        .map(|&v| if degenerate { 0.0 } else { (v - min) / (max - min) })
        .collect();
    Ok(Normalized {
        values,
        min,
        max,
        degenerate,
    })
}

pub fn denormalize(values: &[f64], min: f64, max: f64) -> Vec<f64> {
    values.iter().map(|&v| v * (max - min) + min).collect()
}

/// Input slots (oldest first) and target slot of one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleWindow {
    pub inputs: Vec<usize>,
    pub target: usize,
}

/// One window per eligible target `t`:
/// `{t − k·week : k = κ..1} ∪ {t − ρ, …, t − 1}`, oldest to newest.
pub fn build_windows(num_slots: usize, cfg: &WindowConfig) -> Result<Vec<SampleWindow>> {
    if cfg.is_empty() {
        return Err(Error::Config("window needs at least one input slot".into()));
    }
    let first = (cfg.weekly * cfg.slots_per_week).max(cfg.recent);
    if num_slots <= first {
        return Err(Error::TooShort(format!(
            "{num_slots} slots, but the first eligible target needs {} slots of history \
             ({} weekly lookbacks × {} slots/week, {} recent)",
            first, cfg.weekly, cfg.slots_per_week, cfg.recent
        )));
    }
    Ok((first..num_slots)
        .map(|t| {
            let mut inputs: Vec<usize> = (1..=cfg.weekly)
                .rev()
                .map(|k| t - k * cfg.slots_per_week)
                .collect();
            inputs.extend((1..=cfg.recent).rev().map(|k| t - k));
            SampleWindow { inputs, target: t }
        })
        .collect())
}

/// Index ranges of a chronological 6:2:2 split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Contiguous blocks of ⌊0.6n⌋, ⌊0.2n⌋ and the remainder.
pub fn split_ranges(n: usize) -> Result<SplitRanges> {
    if n < 5 {
        return Err(Error::TooShort(format!("{n} samples cannot be split 6:2:2")));
    }
    let train = n * 6 / 10;
    let val = n * 2 / 10;
    Ok(SplitRanges {
        train: 0..train,
        val: train..train + val,
        test: train + val..n,
    })
}

/// Splits chronologically ordered samples into train, validation and test.
pub fn split_dataset<T>(samples: &[T]) -> Result<(&[T], &[T], &[T])> {
    let r = split_ranges(samples.len())?;
    Ok((&samples[r.train], &samples[r.val], &samples[r.test]))
}

/// Symmetric 0/1 adjacency with zero diagonal.
pub fn grid_adjacency(grid: &CityGrid, neighborhood: Neighborhood) -> Tensor {
    let n = grid.regions();
    let mut a = Tensor::zeros([n, n]);
    let offsets: &[(isize, isize)] = match neighborhood {
        Neighborhood::Four => &[(0, 1), (1, 0)],
        Neighborhood::Eight => &[(0, 1), (1, 0), (1, 1), (1, -1)],
    };
    for i in 0..grid.rows {
        for j in 0..grid.cols {
            for &(di, dj) in offsets {
                let (ni, nj) = (i as isize + di, j as isize + dj);
                if ni < 0 || nj < 0 || ni as usize >= grid.rows || nj as usize >= grid.cols {
                    continue;
                }
                let (p, q) = (grid.index(i, j), grid.index(ni as usize, nj as usize));
                a.set(p, q, 1.0);
                a.set(q, p, 1.0);
            }
        }
    }
    a
}

// ----- synthetic city ------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    Hub,
    Commuter,
    Residential,
}

#[derive(Debug, Clone)]
pub struct SynthCity {
    pub grid: CityGrid,
    pub features: FeatureSeries,
    pub events: Vec<EventRecord>,
    pub archetypes: Vec<Archetype>,
}

fn bump(hour: f64, center: f64, width: f64) -> f64 {
    let mut d = (hour - center).abs();
    d = d.min(24.0 - d);
    (-(d * d) / (2.0 * width * width)).exp()
}

/// Expected events per hourly slot for an archetype.
fn event_rate(kind: Archetype, hour: f64, weekend: bool) -> f64 {
    match kind {
        Archetype::Hub => {
            let r = 6.0 * (0.6 + 0.8 * bump(hour, 8.5, 2.0) + bump(hour, 17.5, 2.5) + 0.3 * bump(hour, 13.0, 3.0));
            if weekend { 0.8 * r } else { r }
        }
        Archetype::Commuter => {
            let r = 3.0 * (0.3 + 1.4 * bump(hour, 8.0, 1.5) + 1.4 * bump(hour, 18.0, 1.5));
            if weekend { 0.5 * r } else { r }
        }
        Archetype::Residential => {
            let r = 1.2 * (0.4 + bump(hour, 20.0, 3.0));
            if weekend { 1.3 * r } else { r }
        }
    }
}

/// Deterministic synthetic city with hourly slots. Regions near the centre
/// tend to be hubs, the ring commuters, the outskirts residential; each
/// archetype has its own daily event-rate profile. Channels beyond risk are
/// inflow/outflow-style activity counts.
pub fn synth_city(seed: u64, rows: usize, cols: usize, num_slots: usize, channels: usize) -> Result<SynthCity> {
    let grid = CityGrid::new(rows, cols)?;
    let n = grid.regions();
    let mut rng = SplitMix64::substream(seed, &[0x5917]);

    let (ci, cj) = ((rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0);
    let max_d = (ci * ci + cj * cj).sqrt().max(1.0);
    let mut order: Vec<(f64, usize)> = (0..n)
        .map(|r| {
            let (i, j) = grid.coords(r);
            let d = ((i as f64 - ci).powi(2) + (j as f64 - cj).powi(2)).sqrt() / max_d;
            (d + 0.25 * rng.uniform(-1.0, 1.0), r)
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let hubs = n.div_ceil(4);
    let commuters = (3 * n).div_ceil(8);
    let mut archetypes = vec![Archetype::Residential; n];
    for (rank, &(_, r)) in order.iter().enumerate() {
        archetypes[r] = if rank < hubs {
            Archetype::Hub
        } else if rank < hubs + commuters {
            Archetype::Commuter
        } else {
            Archetype::Residential
        };
    }
    let amplitude: Vec<f64> = (0..n).map(|_| rng.uniform(0.8, 1.2)).collect();

    let mut events = Vec::new();
    let mut activity = vec![0.0; num_slots * n * channels.saturating_sub(1)];
    for t in 0..num_slots {
        let hour = (t % 24) as f64;
        let weekend = (t / 24) % 7 >= 5;
        for r in 0..n {
            let rate = amplitude[r] * event_rate(archetypes[r], hour, weekend);
            let count = rng.poisson(rate);
            let (row, col) = grid.coords(r);
            for _ in 0..count {
                let u = rng.next_f64();
                let severity = if u < 0.65 {
                    Severity::Minor
                } else if u < 0.92 {
                    Severity::Injury
                } else {
                    Severity::Fatal
                };
                events.push(EventRecord { slot: t, row, col, severity });
            }
            for c in 1..channels {
                // inflow leads, outflow lags the accident profile by a couple of hours
                let shift = if c % 2 == 1 { 1.0 } else { -2.0 };
                let level = 8.0 * amplitude[r] * event_rate(archetypes[r], (hour + shift).rem_euclid(24.0), weekend);
                let v = (level * (1.0 + 0.15 * rng.normal())).max(0.0).round();
                activity[(t * n + r) * (channels - 1) + (c - 1)] = v;
            }
        }
    }

    let risk = rasterize_events(&events, &grid, num_slots)?;
    let mut features = FeatureSeries::from_risk(&risk, channels)?;
    for t in 0..num_slots {
        for r in 0..n {
            for c in 1..channels {
                features.set(t, r, c, activity[(t * n + r) * (channels - 1) + (c - 1)]);
            }
        }
    }
    Ok(SynthCity {
        grid,
        features,
        events,
        archetypes,
    })
}

// ----- files ---------------------------------------------------------------

/// Key-value description of a data directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub rows: usize,
    pub cols: usize,
    pub slots: usize,
    pub channels: usize,
    pub slot_minutes: u32,
    pub cell_size_km: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub archetypes: Option<Vec<Archetype>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EventRow {
    slot: usize,
    row: usize,
    col: usize,
    severity: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct OverlayRow {
    slot: usize,
    row: usize,
    col: usize,
    channel: usize,
    value: f64,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file))
}

fn csv_reader(path: &Path, header: &[&str]) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let got: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if got != header {
        return Err(Error::InvalidArgument(format!(
            "{}: expected header {}, found {}",
            path.display(),
            header.join(","),
            got.join(",")
        )));
    }
    Ok(rdr)
}

pub fn write_events(path: &Path, events: &[EventRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for e in events {
        w.serialize(EventRow {
            slot: e.slot,
            row: e.row,
            col: e.col,
            severity: e.severity.risk(),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_events(path: &Path) -> Result<Vec<EventRecord>> {
    let mut rdr = csv_reader(path, &["slot", "row", "col", "severity"])?;
    rdr.deserialize::<EventRow>()
        .enumerate()
        .map(|(i, row)| {
            let row = row?;
            let severity = Severity::try_from(row.severity).map_err(|e| Error::Record {
                index: i,
                reason: e.to_string(),
            })?;
            Ok(EventRecord {
                slot: row.slot,
                row: row.row,
                col: row.col,
                severity,
            })
        })
        .collect()
}

/// Writes every activity-channel value (channels `1..d`).
pub fn write_overlay(path: &Path, grid: &CityGrid, features: &FeatureSeries) -> Result<()> {
    let mut w = csv_writer(path)?;
    for t in 0..features.slots() {
        for r in 0..features.regions() {
            let (row, col) = grid.coords(r);
            for c in 1..features.channels() {
                w.serialize(OverlayRow {
                    slot: t,
                    row,
                    col,
                    channel: c,
                    value: features.get(t, r, c),
                })?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_overlay(path: &Path, grid: &CityGrid, features: &mut FeatureSeries) -> Result<()> {
    let mut rdr = csv_reader(path, &["slot", "row", "col", "channel", "value"])?;
    for (i, row) in rdr.deserialize::<OverlayRow>().enumerate() {
        let row = row?;
        if row.slot >= features.slots()
            || row.row >= grid.rows
            || row.col >= grid.cols
            || row.channel == 0
            || row.channel >= features.channels()
        {
            return Err(Error::Record {
                index: i,
                reason: format!(
                    "overlay entry slot {} row {} col {} channel {} out of range",
                    row.slot, row.row, row.col, row.channel
                ),
            });
        }
        features.set(row.slot, grid.index(row.row, row.col), row.channel, row.value);
    }
    Ok(())
}

pub fn write_meta(path: &Path, meta: &Meta) -> Result<()> {
    let text = serde_json::to_string_pretty(meta)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_meta(path: &Path) -> Result<Meta> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes `events.csv`, `features.csv` and `meta.json` for a synthetic city.
pub fn write_synth(dir: &Path, city: &SynthCity, seed: u64, slot_minutes: u32) -> Result<()> {
    write_events(&dir.join("events.csv"), &city.events)?;
    if city.features.channels() > 1 {
        write_overlay(&dir.join("features.csv"), &city.grid, &city.features)?;
    }
    write_meta(
        &dir.join("meta.json"),
        &Meta {
            rows: city.grid.rows,
            cols: city.grid.cols,
            slots: city.features.slots(),
            channels: city.features.channels(),
            slot_minutes,
            cell_size_km: city.grid.cell_size_km,
            seed: Some(seed),
            archetypes: Some(city.archetypes.clone()),
        },
    )
}

/// Reads a data directory into a grid and raw feature series.
pub fn load_dir(dir: &Path) -> Result<(Meta, CityGrid, FeatureSeries)> {
    let meta = read_meta(&dir.join("meta.json"))?;
    let mut grid = CityGrid::new(meta.rows, meta.cols)?;
    grid.cell_size_km = meta.cell_size_km;
    let events = read_events(&dir.join("events.csv"))?;
    let risk = rasterize_events(&events, &grid, meta.slots)?;
    let mut features = FeatureSeries::from_risk(&risk, meta.channels)?;
    let overlay = dir.join("features.csv");
    if meta.channels > 1 && overlay.exists() {
        read_overlay(&overlay, &grid, &mut features)?;
    }
    Ok((meta, grid, features))
}

// ----- assembled dataset ---------------------------------------------------

/// One model input: region-major window features and the next-slot target.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `N·T × d`, row `n·T + τ`, normalized
    pub input: Tensor,
    /// normalized target risk per region
    pub target: Vec<f64>,
    /// raw target risk per region
    pub target_raw: Vec<f64>,
    pub target_slot: usize,
}

/// Windows, split, normalization and graph for one city.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub grid: CityGrid,
    pub window: WindowConfig,
    pub raw: FeatureSeries,
    pub normalized: FeatureSeries,
    pub norm: NormStats,
    pub windows: Vec<SampleWindow>,
    pub split: SplitRanges,
    pub adjacency: Tensor,
    pub a_hat: Tensor,
    /// std of the normalized risk channel over the training slots
    pub risk_std: f64,
}

impl Dataset {
    /// Builds windows, splits them 6:2:2 and fits min-max statistics on the
    /// slots covered by the training split (inputs and targets).
    pub fn new(
        grid: CityGrid,
        raw: FeatureSeries,
        window: &WindowConfig,
        neighborhood: Neighborhood,
    ) -> Result<Self> {
        Self::with_norm(grid, raw, window, neighborhood, None)
    }

    /// Like [`Dataset::new`] but reuses stored normalization statistics.
    pub fn with_norm(
        grid: CityGrid,
        raw: FeatureSeries,
        window: &WindowConfig,
        neighborhood: Neighborhood,
        norm: Option<NormStats>,
    ) -> Result<Self> {
        if raw.regions() != grid.regions() {
            return Err(Error::shape(
                "Dataset",
                format!("{} regions in features, grid has {}", raw.regions(), grid.regions()),
            ));
        }
        let windows = build_windows(raw.slots(), window)?;
        let split = split_ranges(windows.len())?;
        let last_train = windows[split.train.end - 1].target;
        let norm = match norm {
            Some(n) if n.min.len() == raw.channels() => n,
            Some(_) => return Err(Error::InvalidArgument("stored normalization has wrong channel count".into())),
            None => NormStats::fit(&raw, 0..last_train + 1)?,
        };
        let normalized = norm.apply(&raw);
        let adjacency = grid_adjacency(&grid, neighborhood);
        let a_hat = normalize_adjacency(&adjacency)?;

        let count = (last_train + 1) * grid.regions();
        let mean = (0..=last_train)
            .flat_map(|t| (0..grid.regions()).map(move |n| (t, n)))
            .fold(0.0, |acc, (t, n)| acc + normalized.get(t, n, 0))
            / count as f64;
        let var = (0..=last_train)
            .flat_map(|t| (0..grid.regions()).map(move |n| (t, n)))
            .fold(0.0, |acc, (t, n)| acc + (normalized.get(t, n, 0) - mean).powi(2))
            / count as f64;

        Ok(Self {
            grid,
            window: window.clone(),
            raw,
            normalized,
            norm,
            windows,
            split,
            adjacency,
            a_hat,
            risk_std: var.sqrt(),
        })
    }

    pub fn regions(&self) -> usize {
        self.grid.regions()
    }

    pub fn channels(&self) -> usize {
        self.raw.channels()
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn sample(&self, idx: usize) -> Sample {
        let w = &self.windows[idx];
        let (n, t, d) = (self.regions(), w.inputs.len(), self.channels());
        let mut input = Tensor::zeros([n * t, d]);
        for r in 0..n {
            for (step, &slot) in w.inputs.iter().enumerate() {
                let row = input.row_mut(r * t + step);
                for (c, v) in row.iter_mut().enumerate() {
                    *v = self.normalized.get(slot, r, c);
                }
            }
        }
        Sample {
            input,
            target: (0..n).map(|r| self.normalized.get(w.target, r, 0)).collect(),
            target_raw: (0..n).map(|r| self.raw.get(w.target, r, 0)).collect(),
            target_slot: w.target,
        }
    }
}
