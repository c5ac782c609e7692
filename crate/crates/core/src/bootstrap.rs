//! Nonparametric bootstrap over units. Each resample refits the propensity
//! models and reruns every estimator, PPTA included.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{estimate_methods, EstimationConfig};
use crate::msm::{EffectEstimate, Link, Method};
use crate::panel::PanelDataset;
use crate::ppta::mean_sd;
use crate::rng::{self, tag};

/// Resamples with replacement above this failure fraction are rejected.
pub const MAX_FAILURE_FRACTION: f64 = 0.2;

/// `n` draws of unit indices in `0..n`, with replacement.
pub fn resample_indices<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

pub fn resample<R: Rng + ?Sized>(ds: &PanelDataset, rng: &mut R) -> PanelDataset {
    let idx = resample_indices(ds.n_units(), rng);
    ds.gather(&idx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub method: Method,
    pub link: Link,
    pub requested: usize,
    /// Coefficient-scale estimates of the successful resamples.
    pub estimates: Vec<f64>,
    pub failures: usize,
    pub se: f64,
}

impl BootstrapResult {
    fn from_estimates(
        method: Method,
        link: Link,
        requested: usize,
        estimates: Vec<f64>,
    ) -> Result<Self> {
        let failures = requested - estimates.len();
        if failures as f64 > MAX_FAILURE_FRACTION * requested as f64 || estimates.len() < 2 {
            return Err(Error::BootstrapUnstable {
                failed: failures,
                total: requested,
            });
        }
        let (_, se) = mean_sd(&estimates);
        Ok(BootstrapResult {
            method,
            link,
            requested,
            estimates,
            failures,
            se,
        })
    }

    /// `point ± 1.96 se` on the coefficient scale, mapped to the effect scale.
    pub fn normal_interval(&self, point: &EffectEstimate) -> (f64, f64) {
        (
            self.link.to_delta(point.beta - 1.96 * self.se),
            self.link.to_delta(point.beta + 1.96 * self.se),
        )
    }

    /// 2.5% and 97.5% quantiles of the resampled estimates, on the effect scale.
    pub fn percentile_interval(&self) -> (f64, f64) {
        let mut sorted = self.estimates.clone();
        sorted.sort_by(f64::total_cmp);
        (
            self.link.to_delta(quantile(&sorted, 0.025)),
            self.link.to_delta(quantile(&sorted, 0.975)),
        )
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Bootstraps several methods on common resamples. Resample `b` uses the
/// stream `(seed, RESAMPLE, b)`; results are independent of thread count.
pub fn bootstrap_effects(
    ds: &PanelDataset,
    methods: &[Method],
    cfg: &EstimationConfig,
    b: usize,
    seed: u64,
) -> Vec<(Method, Result<BootstrapResult>)> {
    if b == 0 {
        return methods
            .iter()
            .map(|&m| (m, Err(Error::Config("bootstrap needs B >= 1".into()))))
            .collect();
    }
    let per_resample: Vec<Vec<Option<f64>>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, &[tag::RESAMPLE, r as u64]);
            let boot = resample(ds, &mut rng);
            let ppta_seed = rng::derive_seed(seed, &[tag::RESAMPLE, r as u64, tag::PPTA]);
            match estimate_methods(&boot, methods, cfg, ppta_seed) {
                Ok(analysis) => methods
                    .iter()
                    .map(|&m| {
                        analysis
                            .estimate(m)
                            .map(|e| e.beta)
                            .filter(|v| v.is_finite())
                    })
                    .collect(),
                Err(e) => {
                    log::debug!("bootstrap resample {r} failed: {e}");
                    vec![None; methods.len()]
                }
            }
        })
        .collect();
    methods
        .iter()
        .enumerate()
        .map(|(j, &m)| {
            let estimates: Vec<f64> = per_resample.iter().filter_map(|row| row[j]).collect();
            (
                m,
                BootstrapResult::from_estimates(m, cfg.spec.link, b, estimates),
            )
        })
        .collect()
}

pub fn bootstrap_effect(
    ds: &PanelDataset,
    method: Method,
    cfg: &EstimationConfig,
    b: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    bootstrap_effects(ds, &[method], cfg, b, seed)
        .pop()
        .map(|(_, r)| r)
        .expect("one method requested")
}
