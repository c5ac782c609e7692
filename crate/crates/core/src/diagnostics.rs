//! Diagnostic exports: IPW against OW per unit, positivity summaries, and the
//! effect and weight-distribution tables of an applied analysis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::msm::EffectEstimate;
use crate::panel::PanelDataset;
use crate::propensity::PropensityMatrix;
use crate::weights::{ipw_from, overlap_from, summarize_values, WeightSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightComparisonRow {
    pub id: String,
    pub log_ipw: f64,
    pub ow: f64,
    pub dgcop_count: Option<u32>,
}

/// Per-unit log IPW and OW from the same propensity matrix, with the number of
/// time points spent in a mixed DGCOP bin when known.
pub fn weight_comparison(
    ds: &PanelDataset,
    e: &PropensityMatrix,
    dgcop_counts: Option<&[u32]>,
) -> Result<Vec<WeightComparisonRow>> {
    if e.n_units() != ds.n_units() || e.n_times() != ds.n_times() {
        return Err(Error::DimensionMismatch(format!(
            "propensity matrix is {}x{}, panel is {}x{}",
            e.n_units(),
            e.n_times(),
            ds.n_units(),
            ds.n_times()
        )));
    }
    if let Some(c) = dgcop_counts {
        if c.len() != ds.n_units() {
            return Err(Error::DimensionMismatch(format!(
                "{} DGCOP counts for {} units",
                c.len(),
                ds.n_units()
            )));
        }
    }
    let ipw = ipw_from(e, ds);
    let ow = overlap_from(e, ds);
    Ok(ds
        .ids()
        .iter()
        .enumerate()
        .map(|(i, id)| WeightComparisonRow {
            id: id.clone(),
            log_ipw: ipw.values[i].ln(),
            ow: ow.values[i],
            dgcop_count: dgcop_counts.map(|c| c[i]),
        })
        .collect())
}

/// `id,log_ipw,ow,dgcop_count`
pub fn export_weight_comparison<W: std::io::Write>(
    ds: &PanelDataset,
    e: &PropensityMatrix,
    dgcop_counts: Option<&[u32]>,
    writer: W,
) -> Result<Vec<WeightComparisonRow>> {
    let rows = weight_comparison(ds, e, dgcop_counts)?;
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "log_ipw", "ow", "dgcop_count"])?;
    for r in &rows {
        w.write_record([
            r.id.clone(),
            r.log_ipw.to_string(),
            r.ow.to_string(),
            r.dgcop_count.map(|c| c.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(rows)
}

/// Average ranks (1-based), ties sharing their mean rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            out[i] = rank;
        }
        start = end;
    }
    out
}

/// Spearman rank correlation; `None` when either input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Fitted propensity range at one time point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositivitySummary {
    pub time: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Units with a score outside `[threshold, 1 - threshold]`.
    pub n_extreme: usize,
}

pub fn positivity_summary(e: &PropensityMatrix, threshold: f64) -> Vec<PositivitySummary> {
    (0..e.n_times())
        .map(|t| {
            let col: Vec<f64> = (0..e.n_units()).map(|i| e.get(i, t)).collect();
            PositivitySummary {
                time: t,
                min: col.iter().copied().fold(f64::INFINITY, f64::min),
                max: col.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mean: col.iter().sum::<f64>() / col.len() as f64,
                n_extreme: col
                    .iter()
                    .filter(|&&v| v < threshold || v > 1.0 - threshold)
                    .count(),
            }
        })
        .collect()
}

/// `time,min,max,mean,n_extreme` with 1-based times.
pub fn write_positivity_csv<W: std::io::Write>(
    rows: &[PositivitySummary],
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["time", "min", "max", "mean", "n_extreme"])?;
    for r in rows {
        w.write_record([
            (r.time + 1).to_string(),
            r.min.to_string(),
            r.max.to_string(),
            r.mean.to_string(),
            r.n_extreme.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `method,estimate` with the estimate rendered as `1.07 [0.98, 1.22]`.
pub fn write_effect_table<W: std::io::Write>(
    estimates: &[EffectEstimate],
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["method", "estimate"])?;
    for e in estimates {
        w.write_record([e.method.name(), &e.formatted(2)])?;
    }
    w.flush()?;
    Ok(())
}

/// One column of a weight-distribution table. For PPTA the values are the
/// posterior inclusion probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightColumn {
    pub label: String,
    pub summary: WeightSummary,
}

impl WeightColumn {
    pub fn new(label: impl Into<String>, values: &[f64]) -> Self {
        WeightColumn {
            label: label.into(),
            summary: summarize_values(values),
        }
    }
}

/// Rows are statistics, columns are methods:
/// `statistic,<label>...` over p75, p95, p99, max and pct_data_used.
pub fn write_weight_table<W: std::io::Write>(columns: &[WeightColumn], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["statistic".to_string()];
    header.extend(columns.iter().map(|c| c.label.clone()));
    w.write_record(&header)?;
    type Stat = fn(&WeightSummary) -> f64;
    let stats: [(&str, Stat); 5] = [
        ("p75", |s| s.p75),
        ("p95", |s| s.p95),
        ("p99", |s| s.p99),
        ("max", |s| s.max),
        ("pct_data_used", |s| s.pct_data_used),
    ];
    for (name, get) in stats {
        let mut row = vec![name.to_string()];
        row.extend(columns.iter().map(|c| format!("{:.4e}", get(&c.summary))));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
