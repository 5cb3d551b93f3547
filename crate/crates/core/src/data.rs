//! Ingestion, min-max scaling, chronological splits and windowing.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Header names that mark an optional leading time-label column.
const TIME_COLUMN_NAMES: [&str; 4] = ["date", "time", "week", "t"];

/// `N` regions by `L` time steps of case counts.
#[derive(Debug, Clone, PartialEq)]
pub struct EpidemicSeries {
    regions: Vec<String>,
    times: Vec<String>,
    /// Row-major `N×L`.
    values: Vec<f64>,
}

impl EpidemicSeries {
    /// Builds a series from per-region rows. Counts must be finite and
    /// non-negative.
    pub fn new(regions: Vec<String>, times: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if regions.len() != rows.len() || regions.is_empty() {
            return Err(Error::Data(format!(
                "{} region labels for {} rows",
                regions.len(),
                rows.len()
            )));
        }
        let len = times.len();
        for (label, row) in regions.iter().zip(&rows) {
            if row.len() != len {
                return Err(Error::Data(format!(
                    "region {label} has {} steps, expected {len}",
                    row.len()
                )));
            }
            if let Some(v) = row.iter().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(Error::Data(format!("region {label} holds invalid count {v}")));
            }
        }
        Ok(Self {
            regions,
            times,
            values: rows.concat(),
        })
    }

    /// Series with labels `r0..`, `0..` from per-region rows.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let len = rows.first().map_or(0, Vec::len);
        Self::new(
            (0..n).map(|i| format!("r{i}")).collect(),
            (0..len).map(|t| t.to_string()).collect(),
            rows,
        )
    }

    fn from_parts_unchecked(regions: Vec<String>, times: Vec<String>, values: Vec<f64>) -> Self {
        debug_assert_eq!(regions.len() * times.len(), values.len());
        Self { regions, times, values }
    }

    pub fn num_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn regions(&self) -> &[String] {
        &self.regions
    }

    pub fn times(&self) -> &[String] {
        &self.times
    }

    pub fn get(&self, region: usize, t: usize) -> f64 {
        self.values[region * self.len() + t]
    }

    pub fn region(&self, region: usize) -> &[f64] {
        let l = self.len();
        &self.values[region * l..(region + 1) * l]
    }

    /// Values of all regions at time `t`.
    pub fn column(&self, t: usize) -> Vec<f64> {
        (0..self.num_regions()).map(|i| self.get(i, t)).collect()
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Trailing `len` steps.
    pub fn tail(&self, len: usize) -> Self {
        let start = self.len().saturating_sub(len);
        self.range(start, self.len())
    }

    pub fn range(&self, start: usize, end: usize) -> Self {
        let values = (0..self.num_regions())
            .flat_map(|i| self.region(i)[start..end].to_vec())
            .collect();
        Self::from_parts_unchecked(self.regions.clone(), self.times[start..end].to_vec(), values)
    }

    /// Writes the series in the ingestion layout (header of region labels,
    /// one row per step).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.regions).map_err(csv_io)?;
        for t in 0..self.len() {
            w.write_record(self.column(t).iter().map(|v| v.to_string()))
                .map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Reads a case-count CSV: header row of region labels, then one row per
/// time step. A leading column headed `date`, `time`, `week` or `t` is taken
/// as time labels.
pub fn load_csv(path: impl AsRef<Path>) -> Result<EpidemicSeries> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file)
}

pub fn read_csv<R: Read>(reader: R) -> Result<EpidemicSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| Error::Ingest {
            row: 1,
            message: e.to_string(),
        })?,
        None => {
            return Err(Error::Ingest {
                row: 1,
                message: "empty file".into(),
            })
        }
    };
    let has_time = header
        .get(0)
        .is_some_and(|h| TIME_COLUMN_NAMES.contains(&h.to_ascii_lowercase().as_str()));
    let skip = usize::from(has_time);
    let regions: Vec<String> = header.iter().skip(skip).map(str::to_string).collect();
    if regions.is_empty() {
        return Err(Error::Ingest {
            row: 1,
            message: "header names no regions".into(),
        });
    }
    let width = regions.len() + skip;
    let mut times = Vec::new();
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); regions.len()];
    for (i, record) in records.enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| Error::Ingest {
            row,
            message: e.to_string(),
        })?;
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        if record.len() != width {
            return Err(Error::Ingest {
                row,
                message: format!("expected {width} cells, found {}", record.len()),
            });
        }
        times.push(if has_time {
            record[0].to_string()
        } else {
            (row - 2).to_string()
        });
        for (j, cell) in record.iter().skip(skip).enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Ingest {
                row,
                message: format!("non-numeric cell {cell:?} in column {}", regions[j]),
            })?;
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Ingest {
                    row,
                    message: format!("invalid count {v} in column {}", regions[j]),
                });
            }
            rows[j].push(v);
        }
    }
    if times.is_empty() {
        return Err(Error::Ingest {
            row: 2,
            message: "no data rows".into(),
        });
    }
    EpidemicSeries::new(regions, times, rows)
}

/// Which part of the timeline an index belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Chronological train/val/test ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.5,
            val: 0.2,
            test: 0.3,
        }
    }
}

/// Boundaries `0 ≤ train_end ≤ val_end ≤ len` partitioning `[0, len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBounds {
    pub train_end: usize,
    pub val_end: usize,
    pub len: usize,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !r.is_finite() || *r < 0.0) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split ratios must be non-negative and sum to 1, got {parts:?}"
            )));
        }
        if self.train == 0.0 {
            return Err(Error::config("training span is empty"));
        }
        Ok(())
    }

    /// Train takes `floor(train·L)`, validation the next `floor(val·L)`,
    /// test the remainder.
    pub fn bounds(&self, len: usize) -> Result<SplitBounds> {
        self.validate()?;
        let floor = |r: f64| ((r * len as f64) + 1e-9).floor() as usize;
        let train_end = floor(self.train).min(len);
        let val_end = (train_end + floor(self.val)).min(len);
        if train_end == 0 {
            return Err(Error::config(format!("training span is empty for length {len}")));
        }
        Ok(SplitBounds {
            train_end,
            val_end,
            len,
        })
    }
}

impl SplitBounds {
    pub fn split_of(&self, index: usize) -> Split {
        if index < self.train_end {
            Split::Train
        } else if index < self.val_end {
            Split::Val
        } else {
            Split::Test
        }
    }

    pub fn span(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.train_end,
            Split::Val => self.train_end..self.val_end,
            Split::Test => self.val_end..self.len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    /// Separate min/max per region.
    #[default]
    PerRegion,
    /// One min/max over all regions.
    Global,
}

impl std::str::FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-region" | "region" => Ok(Self::PerRegion),
            "global" => Ok(Self::Global),
            other => Err(Error::config(format!("unknown normalization mode {other:?}"))),
        }
    }
}

/// Min-max statistics taken from the training span only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mode: NormMode,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormStats {
    pub fn fit(series: &EpidemicSeries, bounds: &SplitBounds, mode: NormMode) -> Result<Self> {
        let train = bounds.span(Split::Train);
        if train.is_empty() {
            return Err(Error::config("training span is empty"));
        }
        let n = series.num_regions();
        let per_region: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let span = &series.region(i)[train.clone()];
                let lo = span.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = span.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            })
            .collect();
        let (min, max) = match mode {
            NormMode::PerRegion => per_region.into_iter().unzip(),
            NormMode::Global => {
                let lo = per_region.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
                let hi = per_region.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
                (vec![lo; n], vec![hi; n])
            }
        };
        Ok(Self { mode, min, max })
    }

    pub fn num_regions(&self) -> usize {
        self.min.len()
    }

    fn range(&self, region: usize) -> f64 {
        self.max[region] - self.min[region]
    }

    /// `(x − min)/(max − min)`; a region with `max = min` maps to 0.
    pub fn normalize_value(&self, region: usize, x: f64) -> f64 {
        let range = self.range(region);
        if range > 0.0 {
            (x - self.min[region]) / range
        } else {
            0.0
        }
    }

    pub fn denormalize_value(&self, region: usize, v: f64) -> f64 {
        v * self.range(region) + self.min[region]
    }

    /// Maps one value per region back to the original scale.
    pub fn denormalize(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| self.denormalize_value(i, v))
            .collect()
    }

    pub fn apply(&self, series: &EpidemicSeries) -> Result<EpidemicSeries> {
        if series.num_regions() != self.num_regions() {
            return Err(Error::dim("normalize", &[self.num_regions()], &[series.num_regions()]));
        }
        let l = series.len();
        let values = (0..series.num_regions())
            .flat_map(|i| (0..l).map(move |t| (i, t)))
            .map(|(i, t)| self.normalize_value(i, series.get(i, t)))
            .collect();
        Ok(EpidemicSeries::from_parts_unchecked(
            series.regions.clone(),
            series.times.clone(),
            values,
        ))
    }
}

/// Min-max normalizes `series` with statistics from its training span.
pub fn normalize(series: &EpidemicSeries, bounds: &SplitBounds, mode: NormMode) -> Result<(EpidemicSeries, NormStats)> {
    let stats = NormStats::fit(series, bounds, mode)?;
    let scaled = stats.apply(series)?;
    Ok((scaled, stats))
}

pub fn denormalize(values: &[f64], stats: &NormStats) -> Vec<f64> {
    stats.denormalize(values)
}

/// One instance: the `N×T` block ending at `t` and the values at `t + h`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// Row-major `N×T`.
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    /// Index of the last input step.
    pub t: usize,
}

impl WindowSample {
    pub fn target_index(&self, horizon: usize) -> usize {
        self.t + horizon
    }
}

#[derive(Debug, Clone, Default)]
pub struct Windows {
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

impl Windows {
    pub fn get(&self, split: Split) -> &[WindowSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

/// Input block of length `window` ending at `t` (inclusive).
pub fn window_at(series: &EpidemicSeries, window: usize, t: usize) -> Vec<f64> {
    let start = t + 1 - window;
    (0..series.num_regions())
        .flat_map(|i| series.region(i)[start..=t].to_vec())
        .collect()
}

/// Slides a window of length `window` over the series. Each sample goes to
/// the split holding its target index; inputs may reach back across a
/// boundary.
pub fn make_windows(series: &EpidemicSeries, window: usize, horizon: usize, bounds: &SplitBounds) -> Result<Windows> {
    let len = series.len();
    if window == 0 || horizon == 0 {
        return Err(Error::config("window and horizon must be positive"));
    }
    if len < window + horizon {
        return Err(Error::config(format!(
            "series of length {len} is too short: window {window} with horizon {horizon} \
             requires at least {} steps",
            window + horizon
        )));
    }
    let mut out = Windows::default();
    for t in window - 1..len - horizon {
        let target_index = t + horizon;
        let sample = WindowSample {
            input: window_at(series, window, t),
            target: series.column(target_index),
            t,
        };
        match bounds.split_of(target_index) {
            Split::Train => out.train.push(sample),
            Split::Val => out.val.push(sample),
            Split::Test => out.test.push(sample),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize, len: usize) -> EpidemicSeries {
        EpidemicSeries::from_rows(
            (0..n)
                .map(|i| (0..len).map(|t| (t * (i + 1)) as f64).collect())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_cell_file() {
        let s = read_csv("r1\n5\n".as_bytes()).unwrap();
        assert_eq!((s.num_regions(), s.len()), (1, 1));
        assert_eq!(s.get(0, 0), 5.0);
    }

    #[test]
    fn time_column_is_detected() {
        let s = read_csv("date,a,b\n2020-01-01,1,2\n2020-01-08,3,4\n".as_bytes()).unwrap();
        assert_eq!(s.regions(), ["a", "b"]);
        assert_eq!(s.times(), ["2020-01-01", "2020-01-08"]);
        assert_eq!(s.region(1), [2.0, 4.0]);
    }

    #[test]
    fn ingestion_errors_carry_row_numbers() {
        let ragged = read_csv("a,b\n1,2\n3\n".as_bytes()).unwrap_err();
        assert!(matches!(ragged, Error::Ingest { row: 3, .. }), "{ragged}");
        let text = read_csv("a,b\n1,2\n3,x\n".as_bytes()).unwrap_err();
        assert!(matches!(text, Error::Ingest { row: 3, .. }), "{text}");
        let neg = read_csv("a\n1\n2\n-4\n".as_bytes()).unwrap_err();
        assert!(matches!(neg, Error::Ingest { row: 4, .. }), "{neg}");
    }

    #[test]
    fn split_bounds_floor() {
        let b = SplitSpec::default().bounds(348).unwrap();
        assert_eq!((b.train_end, b.val_end), (174, 243));
        let b = SplitSpec::default().bounds(785).unwrap();
        assert_eq!((b.train_end, b.val_end), (392, 549));
        assert!(SplitSpec {
            train: 0.5,
            val: 0.5,
            test: 0.5
        }
        .validate()
        .is_err());
    }

    #[test]
    fn min_max_examples() {
        let s = EpidemicSeries::from_rows(vec![vec![0.0, 200.0, 50.0, 400.0], vec![7.0; 4]]).unwrap();
        let bounds = SplitSpec {
            train: 0.5,
            val: 0.25,
            test: 0.25,
        }
        .bounds(4)
        .unwrap();
        let (n, stats) = normalize(&s, &bounds, NormMode::PerRegion).unwrap();
        assert_eq!(n.get(0, 2), 0.25);
        assert_eq!(n.get(0, 3), 2.0);
        assert!(n.region(1).iter().all(|&v| v == 0.0));
        assert_eq!(stats.denormalize_value(0, 0.0), 0.0);
        assert_eq!(stats.denormalize_value(0, 1.0), 200.0);
        let other = NormStats {
            mode: NormMode::PerRegion,
            min: vec![10.0],
            max: vec![30.0],
        };
        assert_eq!(other.denormalize_value(0, 0.5), 20.0);
        assert_eq!(other.denormalize_value(0, 0.0), 10.0);
        assert_eq!(other.denormalize_value(0, 1.0), 30.0);
    }

    #[test]
    fn global_mode_shares_range() {
        let s = ramp(2, 10);
        let bounds = SplitSpec::default().bounds(10).unwrap();
        let (_, stats) = normalize(&s, &bounds, NormMode::Global).unwrap();
        assert_eq!(stats.min, vec![0.0, 0.0]);
        assert_eq!(stats.max, vec![8.0, 8.0]);
    }

    #[test]
    fn stats_ignore_test_span() {
        // leakage canary: the test span holds the global extremes
        let mut row: Vec<f64> = (0..20).map(|t| 10.0 + (t % 3) as f64).collect();
        row[18] = 1000.0;
        row[19] = 0.0;
        let s = EpidemicSeries::from_rows(vec![row]).unwrap();
        let bounds = SplitSpec::default().bounds(20).unwrap();
        let train_stats = NormStats::fit(&s, &bounds, NormMode::PerRegion).unwrap();
        let all = SplitBounds {
            train_end: 20,
            val_end: 20,
            len: 20,
        };
        let leaky = NormStats::fit(&s, &all, NormMode::PerRegion).unwrap();
        assert_eq!((train_stats.min[0], train_stats.max[0]), (10.0, 12.0));
        assert_ne!(train_stats, leaky);
    }

    #[test]
    fn window_counts_and_membership() {
        let s = ramp(2, 348);
        let bounds = SplitSpec::default().bounds(348).unwrap();
        let w = make_windows(&s, 20, 3, &bounds).unwrap();
        assert_eq!(w.total(), 326);
        assert_eq!(w.train[0].target_index(3), 22);
        for split in [Split::Train, Split::Val, Split::Test] {
            for sample in w.get(split) {
                assert!(bounds.span(split).contains(&sample.target_index(3)));
                assert!(sample.t + 1 >= 20);
            }
        }
        let last_train = w.train.last().unwrap().target_index(3);
        assert!(w.test.iter().all(|x| x.target_index(3) > last_train));
        // input of the first sample is the first 20 steps of each region
        assert_eq!(&w.train[0].input[..20], &s.region(0)[..20]);
        assert_eq!(&w.train[0].input[20..], &s.region(1)[..20]);
        assert_eq!(w.train[0].target, s.column(22));
    }

    #[test]
    fn exact_length_gives_one_sample() {
        let s = ramp(1, 23);
        let bounds = SplitBounds {
            train_end: 23,
            val_end: 23,
            len: 23,
        };
        assert_eq!(make_windows(&s, 20, 3, &bounds).unwrap().total(), 1);
        let short = ramp(1, 22);
        let err = make_windows(&short, 20, 3, &bounds).unwrap_err();
        assert!(err.to_string().contains("at least 23"), "{err}");
    }

    #[test]
    fn csv_roundtrip() {
        let s = ramp(3, 5);
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let back = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.regions(), s.regions());
        assert_eq!(back.values, s.values);
    }
}
