//! Posterior predictive treatment assignment (PPTA).
//!
//! Each iteration takes one posterior draw of every time point's propensity
//! coefficients, draws a predictive assignment for every unit and time, and
//! keeps the units whose predictive assignment is the opposite of the observed
//! one at every time point (the consistent overlap subset, COS). The MSM is
//! fitted on the COS; the ATO estimate is the mean over feasible iterations.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::msm::{fit_on_subset, EffectEstimate, Link, Method, MsmSpec};
use crate::panel::PanelDataset;
use crate::propensity::{
    fit_sequential, predict_row, with_posterior, FitMode, PosteriorDraws, PropensityMatrix,
    PsOptions, SequentialPs,
};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PptaOptions {
    /// Number of posterior iterations K.
    pub iterations: usize,
    /// Smallest COS on which the MSM is fitted.
    pub min_cos: usize,
    /// Skipped fraction above which the run is flagged as lacking overlap.
    pub max_skipped_fraction: f64,
    pub ps: PsOptions,
}

impl Default for PptaOptions {
    fn default() -> Self {
        PptaOptions {
            iterations: 1500,
            min_cos: 10,
            max_skipped_fraction: 0.5,
            ps: PsOptions::default(),
        }
    }
}

/// Overlap states of one predictive draw.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapDraw {
    pub k: usize,
    /// Predictive assignments, unit-major n × D.
    pub assignment: Vec<u8>,
    /// 1 where the predictive assignment opposes the observed exposure.
    pub states: Vec<u8>,
    /// Units whose states are all 1, ascending.
    pub cos: Vec<usize>,
    pub delta: Option<f64>,
    pub feasible: bool,
}

/// Draws `T~ ~ Bernoulli(e)` for every unit and time and derives overlap states.
pub fn draw_overlap_states<R: Rng + ?Sized>(
    e: &PropensityMatrix,
    exposure: &[u8],
    rng: &mut R,
) -> OverlapDraw {
    let d = e.n_times();
    assert_eq!(exposure.len(), e.n_units() * d);
    let mut assignment = Vec::with_capacity(exposure.len());
    let mut states = Vec::with_capacity(exposure.len());
    let mut cos = Vec::new();
    for i in 0..e.n_units() {
        let mut all = true;
        for (t, &p) in e.unit(i).iter().enumerate() {
            let drawn = u8::from(rng.random::<f64>() < p);
            let s = u8::from(drawn != exposure[i * d + t]);
            assignment.push(drawn);
            states.push(s);
            all &= s == 1;
        }
        if all {
            cos.push(i);
        }
    }
    OverlapDraw {
        k: 0,
        assignment,
        states,
        cos,
        delta: None,
        feasible: false,
    }
}

/// Summary of one PPTA iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub feasible: bool,
    pub cos_size: usize,
    pub beta0: Option<f64>,
    pub beta: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PptaRun {
    pub link: Link,
    pub iterations: Vec<IterationRecord>,
    /// Mean effect over feasible iterations; `None` when no iteration was feasible.
    pub delta_hat: Option<f64>,
    pub beta0_hat: Option<f64>,
    /// Fraction of all K iterations in which each unit was in the COS.
    pub marginal_inclusion: Vec<f64>,
    pub cos_size_mean: f64,
    pub cos_size_sd: f64,
    pub ever_used_fraction: f64,
    pub skipped: usize,
    pub insufficient_overlap: bool,
    pub acceptance_rates: Vec<f64>,
}

impl PptaRun {
    pub fn n_iterations(&self) -> usize {
        self.iterations.len()
    }

    pub fn feasible_deltas(&self) -> impl Iterator<Item = f64> + '_ {
        self.iterations.iter().filter_map(|r| r.delta)
    }

    pub fn n_feasible(&self) -> usize {
        self.iterations.len() - self.skipped
    }

    /// Point estimate with the coefficient on the link scale.
    pub fn estimate(&self) -> Result<EffectEstimate> {
        let delta = self.delta_hat.ok_or(Error::TooFewFeasible(0))?;
        Ok(EffectEstimate {
            method: Method::Ppta,
            estimand: Method::Ppta.estimand(),
            link: self.link,
            beta0: self.beta0_hat.unwrap_or(f64::NAN),
            beta: self.link.from_delta(delta),
            delta,
            se: None,
            ci95: None,
        })
    }

    /// `k,feasible,cos_size,delta`
    pub fn write_deltas_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["k", "feasible", "cos_size", "delta"])?;
        for r in &self.iterations {
            w.write_record([
                r.k.to_string(),
                u8::from(r.feasible).to_string(),
                r.cos_size.to_string(),
                r.delta.map(|d| d.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `id,marginal_inclusion,ever_in_cos`
    pub fn write_inclusion_csv<W: std::io::Write>(&self, ids: &[String], writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["id", "marginal_inclusion", "ever_in_cos"])?;
        for (id, &p) in ids.iter().zip(&self.marginal_inclusion) {
            w.write_record([id.clone(), p.to_string(), u8::from(p > 0.0).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean and sample standard deviation of the feasible per-iteration effects.
/// The spread is descriptive; interval estimates come from the bootstrap.
pub fn point_and_spread(run: &PptaRun) -> Result<(f64, f64)> {
    let deltas: Vec<f64> = run.feasible_deltas().collect();
    if deltas.len() < 2 {
        return Err(Error::TooFewFeasible(deltas.len()));
    }
    Ok(mean_sd(&deltas))
}

pub(crate) fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Full PPTA: posterior sampling of every time point's propensity model,
/// then K pruning iterations. All randomness derives from `seed`.
pub fn run(ds: &PanelDataset, spec: &MsmSpec, seed: u64, opts: &PptaOptions) -> Result<PptaRun> {
    if opts.iterations == 0 {
        return Err(Error::Config("PPTA needs at least one iteration".into()));
    }
    let ps = fit_sequential(ds, FitMode::Mle, &opts.ps)?;
    run_from_mle(ds, ps, spec, seed, opts)
}

/// PPTA starting from already fitted MLE propensity models.
pub fn run_from_mle(
    ds: &PanelDataset,
    mle: SequentialPs,
    spec: &MsmSpec,
    seed: u64,
    opts: &PptaOptions,
) -> Result<PptaRun> {
    if opts.iterations == 0 {
        return Err(Error::Config("PPTA needs at least one iteration".into()));
    }
    let ps = with_posterior(
        mle,
        opts.iterations,
        rng::derive_seed(seed, &[tag::POSTERIOR]),
        &opts.ps,
    )?;
    run_with_posterior(ds, &ps, spec, seed, opts)
}

const CHUNK: usize = 64;

/// The COS of [`draw_overlap_states`] applied to posterior draw `k`, consuming
/// the same random numbers, but skipping propensity evaluations for units
/// already excluded.
fn draw_cos<R: Rng + ?Sized>(
    ps: &SequentialPs,
    k: usize,
    exposure: &[u8],
    rng: &mut R,
) -> Vec<usize> {
    let d = ps.n_times();
    let alphas: Vec<&[f64]> = ps
        .fits
        .iter()
        .map(|f| {
            f.posterior_draws
                .as_ref()
                .expect("posterior draws present")
                .draw(k)
        })
        .collect();
    let n = exposure.len() / d;
    let mut cos = Vec::new();
    for i in 0..n {
        let mut all = true;
        for t in 0..d {
            let u = rng.random::<f64>();
            if all {
                let e = predict_row(alphas[t], ps.designs[t].row(i));
                all = u8::from(u < e) != exposure[i * d + t];
            }
        }
        if all {
            cos.push(i);
        }
    }
    cos
}

/// PPTA iterations over pre-sampled posterior draws held in `ps`.
pub fn run_with_posterior(
    ds: &PanelDataset,
    ps: &SequentialPs,
    spec: &MsmSpec,
    seed: u64,
    opts: &PptaOptions,
) -> Result<PptaRun> {
    if opts.min_cos < 3 {
        return Err(Error::Config("min_cos must be at least 3".into()));
    }
    let k_total = ps.n_draws();
    if k_total == 0 {
        return Err(Error::Config(
            "propensity fits carry no posterior draws".into(),
        ));
    }
    let n = ds.n_units();
    let exposure = ds.exposure_matrix();
    let mut counts = vec![0u32; n];
    let mut records = Vec::with_capacity(k_total);
    for start in (0..k_total).step_by(CHUNK) {
        let end = (start + CHUNK).min(k_total);
        let chunk: Vec<(IterationRecord, Vec<usize>)> = (start..end)
            .into_par_iter()
            .map(|k| {
                let mut rng = rng::stream(seed, &[tag::OVERLAP, k as u64]);
                let cos = draw_cos(ps, k, exposure, &mut rng);
                let fit = if cos.len() >= opts.min_cos {
                    fit_on_subset(ds, &cos, spec).ok()
                } else {
                    None
                };
                let record = IterationRecord {
                    k,
                    feasible: fit.is_some(),
                    cos_size: cos.len(),
                    beta0: fit.map(|f| f.beta0),
                    beta: fit.map(|f| f.beta),
                    delta: fit.map(|f| f.delta()),
                };
                (record, cos)
            })
            .collect();
        for (record, cos) in chunk {
            for i in cos {
                counts[i] += 1;
            }
            records.push(record);
        }
    }
    Ok(aggregate(records, counts, spec.link, ps, opts))
}

fn aggregate(
    iterations: Vec<IterationRecord>,
    counts: Vec<u32>,
    link: Link,
    ps: &SequentialPs,
    opts: &PptaOptions,
) -> PptaRun {
    let k = iterations.len();
    let deltas: Vec<f64> = iterations.iter().filter_map(|r| r.delta).collect();
    let beta0s: Vec<f64> = iterations.iter().filter_map(|r| r.beta0).collect();
    let skipped = k - deltas.len();
    let sizes: Vec<f64> = iterations.iter().map(|r| r.cos_size as f64).collect();
    let (cos_size_mean, cos_size_sd) = mean_sd(&sizes);
    let n = counts.len();
    let ever = counts.iter().filter(|&&c| c > 0).count();
    let insufficient_overlap = skipped as f64 > opts.max_skipped_fraction * k as f64;
    if insufficient_overlap {
        log::warn!(
            "PPTA: {skipped} of {k} iterations had an infeasible COS; overlap is insufficient"
        );
    }
    PptaRun {
        link,
        delta_hat: (!deltas.is_empty()).then(|| mean_sd(&deltas).0),
        beta0_hat: (!beta0s.is_empty()).then(|| mean_sd(&beta0s).0),
        marginal_inclusion: counts.iter().map(|&c| f64::from(c) / k as f64).collect(),
        cos_size_mean,
        cos_size_sd,
        ever_used_fraction: ever as f64 / n as f64,
        skipped,
        insufficient_overlap,
        acceptance_rates: ps.fits.iter().filter_map(|f| f.acceptance_rate).collect(),
        iterations,
    }
}

/// Replaces every fit's posterior with `n_draws` copies of its MLE, so that
/// PPTA runs with the propensity matrix held fixed.
pub fn point_mass_posterior(ps: &SequentialPs, n_draws: usize) -> SequentialPs {
    let mut frozen = ps.clone();
    for fit in &mut frozen.fits {
        let p = fit.n_params();
        fit.posterior_draws = Some(PosteriorDraws::from_rows(p, fit.alpha_mle.repeat(n_draws)));
        fit.acceptance_rate = None;
    }
    frozen
}

/// Monte Carlo COS-inclusion frequency of every unit under a fixed propensity
/// matrix. Converges to the unit's overlap weight.
pub fn inclusion_frequencies(
    e: &PropensityMatrix,
    exposure: &[u8],
    iterations: usize,
    seed: u64,
) -> Vec<f64> {
    let n = e.n_units();
    let counts = (0..iterations)
        .into_par_iter()
        .fold(
            || vec![0u32; n],
            |mut acc, k| {
                let mut rng = rng::stream(seed, &[tag::OVERLAP, k as u64]);
                for i in draw_overlap_states(e, exposure, &mut rng).cos {
                    acc[i] += 1;
                }
                acc
            },
        )
        .reduce(
            || vec![0u32; n],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    counts
        .into_iter()
        .map(|c| f64::from(c) / iterations as f64)
        .collect()
}
