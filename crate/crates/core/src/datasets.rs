//! Series ingestion, fixed splits, train-fitted standardization and sliding windows.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Rng, Tensor};

/// Which of the three chronological splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Exclusive end indices of the train, validation and test splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBounds {
    pub train_end: usize,
    pub val_end: usize,
    pub test_end: usize,
}

impl SplitBounds {
    pub fn range(&self, split: Split) -> (usize, usize) {
        match split {
            Split::Train => (0, self.train_end),
            Split::Val => (self.train_end, self.val_end),
            Split::Test => (self.val_end, self.test_end),
        }
    }

    /// `(train, val, test)` lengths.
    pub fn lengths(&self) -> (usize, usize, usize) {
        (
            self.train_end,
            self.val_end - self.train_end,
            self.test_end - self.val_end,
        )
    }
}

/// A multivariate series `T × N` stored row-major (time major).
#[derive(Clone, Debug)]
pub struct SeriesDataset {
    pub name: String,
    values: Vec<f64>,
    variates: usize,
    pub frequency: String,
    split: Option<SplitBounds>,
}

/// Reference statistics of the public benchmarks: variates, split lengths, frequency.
struct KnownDataset {
    name: &'static str,
    variates: usize,
    splits: (usize, usize, usize),
    frequency: &'static str,
}

const KNOWN: &[KnownDataset] = &[
    KnownDataset { name: "etth1", variates: 7, splits: (8545, 2881, 2881), frequency: "hourly" },
    KnownDataset { name: "etth2", variates: 7, splits: (8545, 2881, 2881), frequency: "hourly" },
    KnownDataset { name: "ettm1", variates: 7, splits: (34465, 11521, 11521), frequency: "15min" },
    KnownDataset { name: "ettm2", variates: 7, splits: (34465, 11521, 11521), frequency: "15min" },
    KnownDataset { name: "weather", variates: 21, splits: (36792, 5271, 10540), frequency: "10min" },
    KnownDataset { name: "electricity", variates: 321, splits: (18317, 2633, 5261), frequency: "hourly" },
];

fn known(name: &str) -> Option<&'static KnownDataset> {
    let lower = name.to_ascii_lowercase();
    KNOWN.iter().find(|k| k.name == lower)
}

/// Split lengths the benchmark tables fix for a named dataset.
pub fn known_split_lengths(name: &str) -> Option<(usize, usize, usize)> {
    known(name).map(|k| k.splits)
}

/// Variate count of a named benchmark dataset.
pub fn known_variates(name: &str) -> Option<usize> {
    known(name).map(|k| k.variates)
}

/// Sampling frequency label of a named benchmark dataset.
pub fn known_frequency(name: &str) -> Option<&'static str> {
    known(name).map(|k| k.frequency)
}

/// Default cycle length (one day) for a frequency label.
pub fn default_cycle_len(frequency: &str) -> Option<usize> {
    match frequency.to_ascii_lowercase().replace([' ', '-'], "").as_str() {
        "hourly" | "1h" | "h" | "60min" => Some(24),
        "15min" | "15m" => Some(96),
        "10min" | "10m" => Some(144),
        _ => None,
    }
}

impl SeriesDataset {
    pub fn new(name: impl Into<String>, values: Vec<f64>, variates: usize) -> Result<Self> {
        if variates == 0 || !values.len().is_multiple_of(variates) {
            return Err(Error::Format(format!(
                "{} values cannot form rows of {variates} variates",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("series contains non-finite values".into()));
        }
        let name = name.into();
        let frequency = known(&name).map_or("unknown", |k| k.frequency).to_string();
        Ok(Self {
            name,
            values,
            variates,
            frequency,
            split: None,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.variates
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn variates(&self) -> usize {
        self.variates
    }

    pub fn value(&self, t: usize, n: usize) -> f64 {
        self.values[t * self.variates + n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn split_bounds(&self) -> Option<SplitBounds> {
        self.split
    }

    pub fn with_frequency(mut self, frequency: impl Into<String>) -> Self {
        self.frequency = frequency.into();
        self
    }

    fn bounds(&self) -> Result<SplitBounds> {
        self.split
            .ok_or_else(|| Error::Config(format!("dataset {} has no split applied", self.name)))
    }
}

/// Reads a headered CSV; the first column is skipped when `date_column` is set.
pub fn load_csv(path: &Path, date_column: bool) -> Result<SeriesDataset> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let width = reader.headers()?.len();
    let skip = usize::from(date_column);
    if width <= skip {
        return Err(Error::Format(format!("{} has no value columns", path.display())));
    }
    let variates = width - skip;
    let mut values = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        // header is row 1
        let row = r + 2;
        if record.len() != width {
            return Err(Error::Format(format!(
                "row {row} has {} fields, header has {width}",
                record.len()
            )));
        }
        for (c, field) in record.iter().enumerate().skip(skip) {
            let parsed: f64 = field.trim().parse().map_err(|_| Error::Parse {
                row,
                column: c + 1,
                message: format!("not a number: {field:?}"),
            })?;
            if !parsed.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: c + 1,
                    message: format!("non-finite value {field:?}"),
                });
            }
            values.push(parsed);
        }
    }
    if values.is_empty() {
        return Err(Error::Format(format!("{} has no data rows", path.display())));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "series".into());
    SeriesDataset::new(name, values, variates)
}

/// How split lengths are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPolicy {
    /// Benchmark counts for known names, 0.7/0.1/0.2 ratios otherwise.
    Auto,
    /// Benchmark counts; unknown names are an error.
    Named,
    /// Fractions of the series length, rounded down; test takes the rest.
    Ratio { train: f64, val: f64 },
}

/// Assigns split bounds. Fixed counts shorter than the series keep the
/// leading `train + val + test` points and drop the tail.
pub fn apply_split(mut ds: SeriesDataset, policy: SplitPolicy) -> Result<SeriesDataset> {
    let len = ds.len();
    let (train, val, test) = match policy {
        SplitPolicy::Auto => match known(&ds.name) {
            Some(k) => k.splits,
            None => ratio_split(len, 0.7, 0.1),
        },
        SplitPolicy::Named => known(&ds.name)
            .map(|k| k.splits)
            .ok_or_else(|| Error::Config(format!("no fixed split for dataset {}", ds.name)))?,
        SplitPolicy::Ratio { train, val } => {
            if !(train > 0.0 && val > 0.0 && train + val < 1.0) {
                return Err(Error::Range(format!("invalid split ratios {train}/{val}")));
            }
            ratio_split(len, train, val)
        }
    };
    let total = train + val + test;
    if train == 0 || val == 0 || test == 0 {
        return Err(Error::Range(format!(
            "split ({train}, {val}, {test}) of {} has an empty part",
            ds.name
        )));
    }
    if total > len {
        return Err(Error::Range(format!(
            "split ({train}, {val}, {test}) needs {total} points, {} has {len}",
            ds.name
        )));
    }
    ds.values.truncate(total * ds.variates);
    ds.split = Some(SplitBounds {
        train_end: train,
        val_end: train + val,
        test_end: total,
    });
    Ok(ds)
}

fn ratio_split(len: usize, train: f64, val: f64) -> (usize, usize, usize) {
    let tr = (len as f64 * train).floor() as usize;
    let va = (len as f64 * val).floor() as usize;
    (tr, va, len.saturating_sub(tr + va))
}

/// Per-variate statistics fitted on the train split.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Variates whose train std was zero and was replaced by 1.
    pub clamped: Vec<bool>,
}

impl Standardizer {
    pub fn any_clamped(&self) -> bool {
        self.clamped.iter().any(|&c| c)
    }

    pub fn destandardize(&self, ds: &SeriesDataset) -> SeriesDataset {
        let mut out = ds.clone();
        let n = ds.variates;
        for (i, v) in out.values.iter_mut().enumerate() {
            *v = *v * self.std[i % n] + self.mean[i % n];
        }
        out
    }
}

/// Z-scores every split with train-split mean and (population) std.
pub fn standardize(ds: &SeriesDataset) -> Result<(SeriesDataset, Standardizer)> {
    let bounds = ds.bounds()?;
    let n = ds.variates;
    let rows = bounds.train_end as f64;
    let mut mean = vec![0.0; n];
    for t in 0..bounds.train_end {
        for (j, m) in mean.iter_mut().enumerate() {
            *m += ds.value(t, j);
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows);
    let mut var = vec![0.0; n];
    for t in 0..bounds.train_end {
        for (j, v) in var.iter_mut().enumerate() {
            let d = ds.value(t, j) - mean[j];
            *v += d * d;
        }
    }
    let mut clamped = vec![false; n];
    let std: Vec<f64> = var
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let s = (v / rows).sqrt();
            if s > 1e-12 {
                s
            } else {
                clamped[j] = true;
                1.0
            }
        })
        .collect();
    let mut out = ds.clone();
    for (i, v) in out.values.iter_mut().enumerate() {
        *v = (*v - mean[i % n]) / std[i % n];
    }
    Ok((out, Standardizer { mean, std, clamped }))
}

/// A batch of `(lookback, horizon)` windows in the `(B, N, ·, 1)` layout.
#[derive(Clone, Debug)]
pub struct WindowBatch {
    pub inputs: Tensor,
    pub targets: Tensor,
    /// Absolute dataset index of each window's first lookback step.
    pub starts: Vec<usize>,
}

impl WindowBatch {
    pub fn size(&self) -> usize {
        self.starts.len()
    }
}

/// Number of windows a split of length `len` yields.
pub fn window_count(len: usize, lookback: usize, horizon: usize) -> usize {
    (len + 1).saturating_sub(lookback + horizon)
}

/// Lazily materialized window batches over one split.
pub struct WindowIter<'a> {
    ds: &'a SeriesDataset,
    starts: Vec<usize>,
    pos: usize,
    lookback: usize,
    horizon: usize,
    batch: usize,
}

impl WindowIter<'_> {
    pub fn window_starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn num_windows(&self) -> usize {
        self.starts.len()
    }
}

impl Iterator for WindowIter<'_> {
    type Item = WindowBatch;

    fn next(&mut self) -> Option<WindowBatch> {
        if self.pos >= self.starts.len() {
            return None;
        }
        let end = (self.pos + self.batch).min(self.starts.len());
        let starts = self.starts[self.pos..end].to_vec();
        self.pos = end;
        Some(make_batch(self.ds, &starts, self.lookback, self.horizon))
    }
}

/// Builds one batch from explicit window starts.
pub fn make_batch(ds: &SeriesDataset, starts: &[usize], lookback: usize, horizon: usize) -> WindowBatch {
    let (b, n) = (starts.len(), ds.variates);
    let mut inputs = Vec::with_capacity(b * n * lookback);
    let mut targets = Vec::with_capacity(b * n * horizon);
    for &s in starts {
        for j in 0..n {
            inputs.extend((s..s + lookback).map(|t| ds.value(t, j)));
            targets.extend((s + lookback..s + lookback + horizon).map(|t| ds.value(t, j)));
        }
    }
    WindowBatch {
        inputs: Tensor::new(&[b, n, lookback, 1], inputs).expect("window input shape"),
        targets: Tensor::new(&[b, n, horizon, 1], targets).expect("window target shape"),
        starts: starts.to_vec(),
    }
}

/// Windows fully inside `split`. The train split is shuffled when `rng` is
/// given; other splits are enumerated in order.
pub fn iter_windows<'a>(
    ds: &'a SeriesDataset,
    split: Split,
    lookback: usize,
    horizon: usize,
    batch: usize,
    rng: Option<&mut Rng>,
) -> Result<WindowIter<'a>> {
    let (lo, hi) = ds.bounds()?.range(split);
    let len = hi - lo;
    if lookback == 0 || horizon == 0 || batch == 0 {
        return Err(Error::Parameter(format!(
            "lookback {lookback}, horizon {horizon} and batch {batch} must be positive"
        )));
    }
    if len < lookback + horizon {
        return Err(Error::InsufficientData(format!(
            "{split:?} split of {} has {len} points, lookback T={lookback} plus horizon P={horizon} needs {}",
            ds.name,
            lookback + horizon
        )));
    }
    let mut starts: Vec<usize> = (lo..=hi - lookback - horizon).collect();
    if split == Split::Train {
        if let Some(rng) = rng {
            rng.shuffle(&mut starts);
        }
    }
    Ok(WindowIter {
        ds,
        starts,
        pos: 0,
        lookback,
        horizon,
        batch,
    })
}
