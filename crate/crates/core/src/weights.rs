//! Inverse-probability, stabilized and overlap weights for exposure histories.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::panel::PanelDataset;
use crate::propensity::{fit_mle, predict_ps, PropensityMatrix, PsDesign, PsOptions, SequentialPs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Scheme {
    Ipw,
    Sw,
    Ow,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Ipw => "IPW",
            Scheme::Sw => "SW",
            Scheme::Ow => "OW",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    pub scheme: Scheme,
    pub values: Vec<f64>,
}

impl WeightSet {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Writes `id,weight` rows.
    pub fn write_csv<W: std::io::Write>(&self, ids: &[String], writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["id", "weight"])?;
        for (id, v) in ids.iter().zip(&self.values) {
            w.write_record([id.as_str(), &v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Probability of the arm each unit actually received at each time.
#[inline]
fn observed_arm(e: f64, t: u8) -> f64 {
    if t == 1 {
        e
    } else {
        1.0 - e
    }
}

fn product_over_time(
    e: &PropensityMatrix,
    ds: &PanelDataset,
    factor: impl Fn(f64, u8) -> f64,
) -> Vec<f64> {
    assert_eq!(e.n_units(), ds.n_units());
    assert_eq!(e.n_times(), ds.n_times());
    (0..ds.n_units())
        .map(|i| {
            e.unit(i)
                .iter()
                .zip(ds.exposures(i))
                .map(|(&p, &t)| factor(p, t))
                .product()
        })
        .collect()
}

/// `w_i = prod_t 1 / P(observed arm at t)`.
pub fn ipw_from(e: &PropensityMatrix, ds: &PanelDataset) -> WeightSet {
    WeightSet {
        scheme: Scheme::Ipw,
        values: product_over_time(e, ds, |p, t| 1.0 / observed_arm(p, t)),
    }
}

/// `w_i = prod_t P(opposite arm at t)`.
pub fn overlap_from(e: &PropensityMatrix, ds: &PanelDataset) -> WeightSet {
    WeightSet {
        scheme: Scheme::Ow,
        values: product_over_time(e, ds, |p, t| 1.0 - observed_arm(p, t)),
    }
}

pub fn ipw(ps: &SequentialPs, ds: &PanelDataset) -> WeightSet {
    ipw_from(&ps.mle_matrix(), ds)
}

pub fn overlap(ps: &SequentialPs, ds: &PanelDataset) -> WeightSet {
    overlap_from(&ps.mle_matrix(), ds)
}

/// Numerator design for stabilized weights at time `t`: intercept and the
/// (up to two) previous exposures.
pub fn numerator_design(ds: &PanelDataset, t: usize) -> PsDesign {
    let lags = t.min(2);
    let mut columns = vec!["intercept".to_string()];
    columns.extend((1..=lags).map(|l| format!("t_{}", t + 1 - l)));
    let n = ds.n_units();
    let mut x = Vec::with_capacity(n * (1 + lags));
    let mut response = Vec::with_capacity(n);
    for i in 0..n {
        x.push(1.0);
        for l in 1..=lags {
            x.push(f64::from(ds.exposure(i, t - l)));
        }
        response.push(f64::from(ds.exposure(i, t)));
    }
    PsDesign::new(t, columns, x, response).expect("numerator design is well formed")
}

/// Exposure-history-only probabilities used as stabilized-weight numerators.
pub fn numerator_probabilities(ds: &PanelDataset, opts: &PsOptions) -> Result<PropensityMatrix> {
    let cols = (0..ds.n_times())
        .map(|t| {
            let design = numerator_design(ds, t);
            let fit = fit_mle(&design, opts).map_err(crate::Error::at_time(t))?;
            Ok(predict_ps(&fit.alpha_mle, &design))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PropensityMatrix::from_columns(&cols))
}

/// `sw_i = prod_t P_num(observed arm) / P_den(observed arm)`.
pub fn stabilized_from(
    numerator: &PropensityMatrix,
    denominator: &PropensityMatrix,
    ds: &PanelDataset,
) -> WeightSet {
    let values = (0..ds.n_units())
        .map(|i| {
            let exposures = ds.exposures(i);
            (0..ds.n_times())
                .map(|t| {
                    observed_arm(numerator.get(i, t), exposures[t])
                        / observed_arm(denominator.get(i, t), exposures[t])
                })
                .product()
        })
        .collect();
    WeightSet {
        scheme: Scheme::Sw,
        values,
    }
}

pub fn stabilized(ps: &SequentialPs, ds: &PanelDataset, opts: &PsOptions) -> Result<WeightSet> {
    let numerator = numerator_probabilities(ds, opts)?;
    Ok(stabilized_from(&numerator, &ps.mle_matrix(), ds))
}

/// Distribution summary in the layout of a weight-distribution table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub n: usize,
    pub p75: f64,
    pub p95: f64,
    pub p99: f64,
    pub max: f64,
    pub mean: f64,
    /// Percentage of units with positive weight; always 100 for weighting schemes.
    pub pct_data_used: f64,
    /// Share of the total weight held by the heaviest 1% of units.
    pub top1pct_share: f64,
}

/// Nearest-rank percentile of an ascending slice.
pub fn nearest_rank(sorted: &[f64], pct: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn summarize_values(values: &[f64]) -> WeightSummary {
    assert!(
        !values.is_empty(),
        "cannot summarize an empty weight vector"
    );
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let total: f64 = sorted.iter().sum();
    let top = n.div_ceil(100);
    let top_sum: f64 = sorted[n - top..].iter().sum();
    WeightSummary {
        n,
        p75: nearest_rank(&sorted, 75.0),
        p95: nearest_rank(&sorted, 95.0),
        p99: nearest_rank(&sorted, 99.0),
        max: sorted[n - 1],
        mean: total / n as f64,
        pct_data_used: 100.0 * sorted.iter().filter(|&&w| w > 0.0).count() as f64 / n as f64,
        top1pct_share: if total > 0.0 { top_sum / total } else { 0.0 },
    }
}

pub fn weight_summary(ws: &WeightSet) -> WeightSummary {
    summarize_values(&ws.values)
}
