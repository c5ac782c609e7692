//! Longitudinal panel of binary exposures.
//!
//! Storage is unit-major: everything belonging to unit `i` is contiguous, so
//! bootstrap resampling and subsetting are plain row gathers. Time points are
//! indexed from 0 in the API; CSV headers number them from 1.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What the outcome column holds. Fixed at ingestion; the MSM link must agree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeKind {
    Continuous,
    Count,
}

impl OutcomeKind {
    pub fn name(self) -> &'static str {
        match self {
            OutcomeKind::Continuous => "continuous",
            OutcomeKind::Count => "count",
        }
    }
}

/// Declared panel dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelDims {
    pub n_baseline: usize,
    pub n_timevarying: usize,
    pub n_times: usize,
}

/// Unvalidated panel arrays, laid out unit-major.
#[derive(Debug, Clone, Default)]
pub struct RawPanel {
    pub ids: Vec<String>,
    pub n_times: usize,
    pub n_baseline: usize,
    pub n_timevarying: usize,
    /// n × pW
    pub baseline: Vec<f64>,
    /// n × D × pX
    pub timevarying: Vec<f64>,
    /// n × D, must be 0 or 1
    pub exposure: Vec<f64>,
    pub outcome: Vec<f64>,
    pub offset: Option<Vec<f64>>,
    pub kind: Option<OutcomeKind>,
}

/// A validated, immutable panel.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    ids: Vec<String>,
    n: usize,
    n_times: usize,
    n_baseline: usize,
    n_timevarying: usize,
    baseline: Vec<f64>,
    timevarying: Vec<f64>,
    exposure: Vec<u8>,
    outcome: Vec<f64>,
    offset: Option<Vec<f64>>,
    kind: OutcomeKind,
}

/// One unit's complete exposure history.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExposurePattern {
    pub bits: Vec<u8>,
    pub sum: u32,
}

impl ExposurePattern {
    pub fn new(bits: Vec<u8>) -> Self {
        let sum = bits.iter().map(|&b| u32::from(b)).sum();
        ExposurePattern { bits, sum }
    }
}

impl std::fmt::Display for ExposurePattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for b in &self.bits {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

/// Checks every panel invariant and returns the first violation found.
pub fn validate(raw: RawPanel) -> Result<PanelDataset> {
    let n = raw.outcome.len();
    let d = raw.n_times;
    if n == 0 {
        return Err(Error::DimensionMismatch("panel has no units".into()));
    }
    if d == 0 {
        return Err(Error::DimensionMismatch("panel has no time points".into()));
    }
    let ids = if raw.ids.is_empty() {
        (1..=n).map(|i| i.to_string()).collect()
    } else {
        raw.ids
    };
    let check_len = |what: &str, got: usize, want: usize| {
        if got == want {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "{what}: expected {want} values, got {got}"
            )))
        }
    };
    check_len("ids", ids.len(), n)?;
    check_len("baseline", raw.baseline.len(), n * raw.n_baseline)?;
    check_len(
        "timevarying",
        raw.timevarying.len(),
        n * d * raw.n_timevarying,
    )?;
    check_len("exposure", raw.exposure.len(), n * d)?;
    if let Some(off) = &raw.offset {
        check_len("offset", off.len(), n)?;
    }

    let finite = |field: &'static str, values: &[f64], per_unit: usize| -> Result<()> {
        match values.iter().position(|v| !v.is_finite()) {
            Some(pos) => Err(Error::MissingValue {
                field,
                unit: pos / per_unit.max(1),
            }),
            None => Ok(()),
        }
    };
    finite("baseline", &raw.baseline, raw.n_baseline)?;
    finite("timevarying", &raw.timevarying, d * raw.n_timevarying)?;
    finite("exposure", &raw.exposure, d)?;
    finite("outcome", &raw.outcome, 1)?;

    let mut exposure = Vec::with_capacity(n * d);
    for (pos, &v) in raw.exposure.iter().enumerate() {
        let bit = if v == 0.0 {
            0
        } else if v == 1.0 {
            1
        } else {
            return Err(Error::NonBinaryExposure {
                unit: pos / d,
                time: pos % d,
                value: v,
            });
        };
        exposure.push(bit);
    }

    if let Some(off) = &raw.offset {
        finite("offset", off, 1)?;
        if let Some(unit) = off.iter().position(|&v| v <= 0.0) {
            return Err(Error::NonPositiveOffset { unit });
        }
    }

    let kind = raw.kind.unwrap_or(if raw.offset.is_some() {
        OutcomeKind::Count
    } else {
        OutcomeKind::Continuous
    });
    match kind {
        OutcomeKind::Count => {
            if let Some(unit) = raw.outcome.iter().position(|&y| y < 0.0) {
                return Err(Error::NegativeCount { unit });
            }
        }
        OutcomeKind::Continuous => {
            if raw.offset.is_some() {
                return Err(Error::Config("an offset requires a count outcome".into()));
            }
        }
    }

    Ok(PanelDataset {
        ids,
        n,
        n_times: d,
        n_baseline: raw.n_baseline,
        n_timevarying: raw.n_timevarying,
        baseline: raw.baseline,
        timevarying: raw.timevarying,
        exposure,
        outcome: raw.outcome,
        offset: raw.offset,
        kind,
    })
}

impl PanelDataset {
    pub fn n_units(&self) -> usize {
        self.n
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn n_baseline(&self) -> usize {
        self.n_baseline
    }

    pub fn n_timevarying(&self) -> usize {
        self.n_timevarying
    }

    pub fn dims(&self) -> PanelDims {
        PanelDims {
            n_baseline: self.n_baseline,
            n_timevarying: self.n_timevarying,
            n_times: self.n_times,
        }
    }

    pub fn kind(&self) -> OutcomeKind {
        self.kind
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn baseline(&self, unit: usize) -> &[f64] {
        let p = self.n_baseline;
        &self.baseline[unit * p..(unit + 1) * p]
    }

    /// Time-varying covariates of `unit` at `time`.
    pub fn covariates(&self, unit: usize, time: usize) -> &[f64] {
        let p = self.n_timevarying;
        let start = (unit * self.n_times + time) * p;
        &self.timevarying[start..start + p]
    }

    pub fn exposure(&self, unit: usize, time: usize) -> u8 {
        self.exposure[unit * self.n_times + time]
    }

    /// Exposure history of `unit`, one entry per time point.
    pub fn exposures(&self, unit: usize) -> &[u8] {
        &self.exposure[unit * self.n_times..(unit + 1) * self.n_times]
    }

    /// Unit-major n × D exposure matrix.
    pub fn exposure_matrix(&self) -> &[u8] {
        &self.exposure
    }

    pub fn cumulative_exposure(&self, unit: usize) -> u32 {
        self.exposures(unit).iter().map(|&b| u32::from(b)).sum()
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn offset(&self) -> Option<&[f64]> {
        self.offset.as_deref()
    }

    pub fn pattern(&self, unit: usize) -> ExposurePattern {
        ExposurePattern::new(self.exposures(unit).to_vec())
    }

    /// New panel made of the given units, in order; indices may repeat.
    pub fn gather(&self, units: &[usize]) -> PanelDataset {
        fn rows<T: Copy>(src: &[T], width: usize, units: &[usize]) -> Vec<T> {
            let mut out = Vec::with_capacity(units.len() * width);
            for &u in units {
                out.extend_from_slice(&src[u * width..(u + 1) * width]);
            }
            out
        }
        PanelDataset {
            ids: units.iter().map(|&u| self.ids[u].clone()).collect(),
            n: units.len(),
            n_times: self.n_times,
            n_baseline: self.n_baseline,
            n_timevarying: self.n_timevarying,
            baseline: rows(&self.baseline, self.n_baseline, units),
            timevarying: rows(&self.timevarying, self.n_times * self.n_timevarying, units),
            exposure: rows(&self.exposure, self.n_times, units),
            outcome: rows(&self.outcome, 1, units),
            offset: self.offset.as_ref().map(|o| rows(o, 1, units)),
            kind: self.kind,
        }
    }

    /// Inverse of [`validate`]: the raw arrays backing this panel.
    pub fn to_raw(&self) -> RawPanel {
        RawPanel {
            ids: self.ids.clone(),
            n_times: self.n_times,
            n_baseline: self.n_baseline,
            n_timevarying: self.n_timevarying,
            baseline: self.baseline.clone(),
            timevarying: self.timevarying.clone(),
            exposure: self.exposure.iter().map(|&b| f64::from(b)).collect(),
            outcome: self.outcome.clone(),
            offset: self.offset.clone(),
            kind: Some(self.kind),
        }
    }

    pub fn csv_header(&self) -> Vec<String> {
        header(self.dims(), self.offset.is_some())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.csv_header())?;
        let mut record: Vec<String> = Vec::new();
        for i in 0..self.n {
            record.clear();
            record.push(self.ids[i].clone());
            record.extend(self.baseline(i).iter().map(|v| v.to_string()));
            for t in 0..self.n_times {
                record.extend(self.covariates(i, t).iter().map(|v| v.to_string()));
                record.push(self.exposure(i, t).to_string());
            }
            record.push(self.outcome[i].to_string());
            if let Some(off) = &self.offset {
                record.push(off[i].to_string());
            }
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Column names of the wide CSV layout.
pub fn header(dims: PanelDims, with_offset: bool) -> Vec<String> {
    let mut cols = vec!["id".to_string()];
    cols.extend((1..=dims.n_baseline).map(|j| format!("w_{j}")));
    for d in 1..=dims.n_times {
        cols.extend((1..=dims.n_timevarying).map(|j| format!("x_{d}_{j}")));
        cols.push(format!("t_{d}"));
    }
    cols.push("y".into());
    if with_offset {
        cols.push("offset".into());
    }
    cols
}

/// Reads a wide panel CSV and validates it against the declared dimensions.
///
/// `kind` defaults to `Count` when an `offset` column is present and to
/// `Continuous` otherwise.
pub fn read_csv<R: Read>(
    reader: R,
    dims: PanelDims,
    kind: Option<OutcomeKind>,
) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let found: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let with_offset = found.last().map(|s| s == "offset").unwrap_or(false);
    let expected = header(dims, with_offset);
    if found != expected {
        let first_bad = found
            .iter()
            .zip(&expected)
            .position(|(a, b)| a != b)
            .unwrap_or(found.len().min(expected.len()));
        return Err(Error::DimensionMismatch(format!(
            "CSV header does not match declared dimensions (pW={}, pX={}, D={}): column {} is {:?}, expected {:?}",
            dims.n_baseline,
            dims.n_timevarying,
            dims.n_times,
            first_bad + 1,
            found.get(first_bad),
            expected.get(first_bad),
        )));
    }

    let mut raw = RawPanel {
        n_times: dims.n_times,
        n_baseline: dims.n_baseline,
        n_timevarying: dims.n_timevarying,
        offset: with_offset.then(Vec::new),
        kind,
        ..RawPanel::default()
    };
    let parse = |field: &'static str, s: &str, unit: usize| -> Result<f64> {
        let s = s.trim();
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or(Error::MissingValue { field, unit })
    };
    for (unit, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != expected.len() {
            return Err(Error::DimensionMismatch(format!(
                "row {} has {} fields, expected {}",
                unit + 1,
                record.len(),
                expected.len()
            )));
        }
        let mut fields = record.iter();
        raw.ids
            .push(fields.next().unwrap_or_default().trim().to_string());
        for _ in 0..dims.n_baseline {
            raw.baseline
                .push(parse("baseline", fields.next().unwrap_or(""), unit)?);
        }
        for _ in 0..dims.n_times {
            for _ in 0..dims.n_timevarying {
                raw.timevarying
                    .push(parse("timevarying", fields.next().unwrap_or(""), unit)?);
            }
            raw.exposure
                .push(parse("exposure", fields.next().unwrap_or(""), unit)?);
        }
        raw.outcome
            .push(parse("outcome", fields.next().unwrap_or(""), unit)?);
        if let Some(off) = raw.offset.as_mut() {
            off.push(parse("offset", fields.next().unwrap_or(""), unit)?);
        }
    }
    validate(raw)
}

pub fn read_csv_path(
    path: impl AsRef<Path>,
    dims: PanelDims,
    kind: Option<OutcomeKind>,
) -> Result<PanelDataset> {
    let file = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(file), dims, kind)
}

/// Distinct exposure patterns with their unit counts, sorted lexicographically.
pub fn pattern_census(ds: &PanelDataset) -> Vec<(ExposurePattern, usize)> {
    let mut counts: BTreeMap<&[u8], usize> = BTreeMap::new();
    for i in 0..ds.n_units() {
        *counts.entry(ds.exposures(i)).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|(bits, c)| (ExposurePattern::new(bits.to_vec()), c))
        .collect()
}
