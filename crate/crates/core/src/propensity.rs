//! Sequential logistic propensity-score models.
//!
//! At time `t` (0-based) exposure is regressed on an intercept, the baseline
//! covariates, the current and previous time-varying covariates, and the two
//! previous exposures. Lag terms that would precede the first time point are
//! dropped, so early models have fewer columns.

use std::collections::hash_map::{Entry, HashMap};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::PanelDataset;
use crate::rng::{self, tag};

/// Lower clamp for fitted probabilities; the upper clamp is `1 - PS_CLAMP`.
pub const PS_CLAMP: f64 = 1e-12;

/// Regressors and response for one logistic model, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PsDesign {
    time: usize,
    n: usize,
    p: usize,
    x: Vec<f64>,
    response: Vec<f64>,
    columns: Vec<String>,
}

impl PsDesign {
    /// Assembles a design from row-major regressors. `response` must be 0/1.
    pub fn new(time: usize, columns: Vec<String>, x: Vec<f64>, response: Vec<f64>) -> Result<Self> {
        let p = columns.len();
        let n = response.len();
        if p == 0 || x.len() != n * p {
            return Err(Error::DimensionMismatch(format!(
                "design has {} values for {n} rows and {p} columns",
                x.len()
            )));
        }
        if response.iter().any(|&r| r != 0.0 && r != 1.0) {
            return Err(Error::Config("logistic response must be 0/1".into()));
        }
        Ok(PsDesign {
            time,
            n,
            p,
            x,
            response,
            columns,
        })
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_cols(&self) -> usize {
        self.p
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }

    fn rows(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.x
            .chunks_exact(self.p)
            .zip(self.response.iter().copied())
    }

    /// X'v for a length-n vector.
    pub fn transpose_mul(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.p];
        for (row, &vi) in self.x.chunks_exact(self.p).zip(v) {
            for (o, &xij) in out.iter_mut().zip(row) {
                *o += xij * vi;
            }
        }
        out
    }
}

/// Number of propensity regressors at 0-based time `t`.
pub fn design_width(n_baseline: usize, n_timevarying: usize, t: usize) -> usize {
    1 + n_baseline + n_timevarying * (t + 1).min(2) + t.min(2)
}

/// Builds the propensity design at 0-based time `t`:
/// `[1 | W | X_t | X_{t-1} | T_{t-1} | T_{t-2}]`, lags present only when defined.
pub fn build_design(ds: &PanelDataset, t: usize) -> PsDesign {
    assert!(t < ds.n_times(), "time {t} out of range");
    let (pw, px) = (ds.n_baseline(), ds.n_timevarying());
    let mut columns = vec!["intercept".to_string()];
    columns.extend((1..=pw).map(|j| format!("w_{j}")));
    columns.extend((1..=px).map(|j| format!("x_{}_{j}", t + 1)));
    if t >= 1 {
        columns.extend((1..=px).map(|j| format!("x_{}_{j}", t)));
        columns.push(format!("t_{t}"));
    }
    if t >= 2 {
        columns.push(format!("t_{}", t - 1));
    }
    let p = columns.len();
    debug_assert_eq!(p, design_width(pw, px, t));

    let n = ds.n_units();
    let mut x = Vec::with_capacity(n * p);
    let mut response = Vec::with_capacity(n);
    for i in 0..n {
        x.push(1.0);
        x.extend_from_slice(ds.baseline(i));
        x.extend_from_slice(ds.covariates(i, t));
        if t >= 1 {
            x.extend_from_slice(ds.covariates(i, t - 1));
            x.push(f64::from(ds.exposure(i, t - 1)));
        }
        if t >= 2 {
            x.push(f64::from(ds.exposure(i, t - 2)));
        }
        response.push(f64::from(ds.exposure(i, t)));
    }
    PsDesign {
        time: t,
        n,
        p,
        x,
        response,
        columns,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsOptions {
    /// Convergence threshold on the max-norm of the score.
    pub tol: f64,
    pub max_iter: usize,
    /// Coefficient norm beyond which the fit is declared quasi-separated.
    pub max_coef_norm: f64,
    pub burn_in: usize,
    pub thin: usize,
    /// Proposal scale; `None` means `2.38 / sqrt(p)`.
    pub proposal_scale: Option<f64>,
}

impl Default for PsOptions {
    fn default() -> Self {
        PsOptions {
            tol: 1e-8,
            max_iter: 100,
            max_coef_norm: 1e3,
            burn_in: 1000,
            thin: 1,
            proposal_scale: None,
        }
    }
}

/// K × p matrix of retained posterior draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub n_draws: usize,
    pub n_params: usize,
    values: Vec<f64>,
}

impl PosteriorDraws {
    pub fn from_rows(n_params: usize, values: Vec<f64>) -> Self {
        assert!(n_params > 0 && values.len().is_multiple_of(n_params));
        PosteriorDraws {
            n_draws: values.len() / n_params,
            n_params,
            values,
        }
    }

    pub fn draw(&self, k: usize) -> &[f64] {
        &self.values[k * self.n_params..(k + 1) * self.n_params]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n_params];
        for row in self.values.chunks_exact(self.n_params) {
            for (a, b) in m.iter_mut().zip(row) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.n_draws as f64);
        m
    }

    pub fn write_csv<W: std::io::Write>(&self, columns: &[String], writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(columns)?;
        for row in self.values.chunks_exact(self.n_params) {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A fitted propensity model at one time point.
#[derive(Debug, Clone, PartialEq)]
pub struct PsFit {
    pub alpha_mle: Vec<f64>,
    /// Inverse Fisher information at the MLE, p × p row-major.
    pub fisher_cov: Vec<f64>,
    pub e_mle: Vec<f64>,
    pub iterations: usize,
    pub log_likelihood: f64,
    /// Log-likelihood after each accepted Newton step, starting at zero coefficients.
    pub loglik_trace: Vec<f64>,
    pub posterior_draws: Option<PosteriorDraws>,
    pub acceptance_rate: Option<f64>,
}

impl PsFit {
    pub fn n_params(&self) -> usize {
        self.alpha_mle.len()
    }

    pub fn std_errors(&self) -> Vec<f64> {
        let p = self.n_params();
        (0..p).map(|j| self.fisher_cov[j * p + j].sqrt()).collect()
    }
}

#[inline]
pub fn expit(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z) without overflow.
#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn clamp_probability(e: f64) -> f64 {
    e.clamp(PS_CLAMP, 1.0 - PS_CLAMP)
}

/// Clamped propensity score of a single design row.
#[inline]
pub fn predict_row(alpha: &[f64], row: &[f64]) -> f64 {
    clamp_probability(expit(dot(row, alpha)))
}

/// Inverse-logit of the linear predictor, clamped to `[1e-12, 1 - 1e-12]`.
pub fn predict_ps(alpha: &[f64], design: &PsDesign) -> Vec<f64> {
    assert_eq!(
        alpha.len(),
        design.p,
        "coefficient length must match design"
    );
    let mut clamped = 0usize;
    let out = design
        .x
        .chunks_exact(design.p)
        .map(|row| {
            let e = expit(dot(row, alpha));
            let c = clamp_probability(e);
            if c != e {
                clamped += 1;
            }
            c
        })
        .collect();
    if clamped > 0 {
        log::debug!(
            "time {}: clamped {clamped} propensity scores to [{PS_CLAMP:e}, 1-{PS_CLAMP:e}]",
            design.time
        );
    }
    out
}

/// Bernoulli log-likelihood of a logistic model.
pub fn log_likelihood(alpha: &[f64], design: &PsDesign) -> f64 {
    design
        .rows()
        .map(|(row, y)| {
            let eta = dot(row, alpha);
            y * eta - softplus(eta)
        })
        .sum()
}

/// Likelihood view of a design with duplicate rows merged into frequency
/// weights. Bootstrap resamples repeat about a third of their rows, so this
/// shortens every likelihood evaluation without changing its value.
struct Likelihood {
    p: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    freq: Vec<f64>,
    /// sum_i f_i y_i x_i
    xty: Vec<f64>,
}

impl Likelihood {
    fn new(design: &PsDesign) -> Self {
        let p = design.p;
        let mut index: HashMap<Vec<u64>, usize> = HashMap::with_capacity(design.n);
        let mut x = Vec::with_capacity(design.x.len());
        let mut y = Vec::with_capacity(design.n);
        let mut freq: Vec<f64> = Vec::with_capacity(design.n);
        for (row, yi) in design.rows() {
            let mut key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
            key.push(yi.to_bits());
            match index.entry(key) {
                Entry::Occupied(e) => freq[*e.get()] += 1.0,
                Entry::Vacant(e) => {
                    e.insert(y.len());
                    x.extend_from_slice(row);
                    y.push(yi);
                    freq.push(1.0);
                }
            }
        }
        let mut xty = vec![0.0; p];
        for ((row, &yi), &f) in x.chunks_exact(p).zip(&y).zip(&freq) {
            for (acc, v) in xty.iter_mut().zip(row) {
                *acc += f * yi * v;
            }
        }
        Likelihood { p, x, y, freq, xty }
    }

    fn loglik(&self, alpha: &[f64]) -> f64 {
        let partition: f64 = self
            .x
            .chunks_exact(self.p)
            .zip(&self.freq)
            .map(|(row, &f)| f * softplus(dot(row, alpha)))
            .sum();
        dot(&self.xty, alpha) - partition
    }

    fn curvature(&self, alpha: &[f64]) -> Curvature {
        let p = self.p;
        let mut score = vec![0.0; p];
        let mut info = vec![0.0; p * p];
        let mut loglik = 0.0;
        let mut max_abs_eta: f64 = 0.0;
        for ((row, &y), &f) in self.x.chunks_exact(p).zip(&self.y).zip(&self.freq) {
            let eta = dot(row, alpha);
            max_abs_eta = max_abs_eta.max(eta.abs());
            let mu = expit(eta);
            let w = f * mu * (1.0 - mu);
            loglik += f * (y * eta - softplus(eta));
            let r = f * (y - mu);
            for a in 0..p {
                score[a] += row[a] * r;
                let wa = w * row[a];
                for b in a..p {
                    info[a * p + b] += wa * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                info[a * p + b] = info[b * p + a];
            }
        }
        Curvature {
            score,
            info: DMatrix::from_row_slice(p, p, &info),
            loglik,
            max_abs_eta,
        }
    }
}

struct Curvature {
    score: Vec<f64>,
    info: DMatrix<f64>,
    loglik: f64,
    max_abs_eta: f64,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rejects designs whose correlation-scaled cross-product is numerically singular.
fn check_rank(design: &PsDesign) -> Result<()> {
    let p = design.p;
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    for row in design.x.chunks_exact(p) {
        for a in 0..p {
            for b in a..p {
                xtx[(a, b)] += row[a] * row[b];
            }
        }
    }
    for a in 0..p {
        if xtx[(a, a)] <= 0.0 {
            return Err(Error::RankDeficient(format!(
                "column {} is identically zero",
                design.columns[a]
            )));
        }
    }
    let diag: Vec<f64> = (0..p).map(|a| xtx[(a, a)]).collect();
    for a in 0..p {
        for b in a..p {
            let s = xtx[(a, b)] / (diag[a] * diag[b]).sqrt();
            xtx[(a, b)] = s;
            xtx[(b, a)] = s;
        }
    }
    match xtx.cholesky() {
        Some(ch) if ch.l().diagonal().iter().all(|&d| d * d > 1e-10) => Ok(()),
        _ => Err(Error::RankDeficient(format!(
            "columns [{}] are linearly dependent",
            design.columns.join(", ")
        ))),
    }
}

/// Maximum-likelihood logistic fit by Newton-Raphson (IRLS) with step halving.
pub fn fit_mle(design: &PsDesign, opts: &PsOptions) -> Result<PsFit> {
    let ones = design.response.iter().filter(|&&y| y == 1.0).count();
    if ones == 0 || ones == design.n {
        return Err(Error::NoMle(format!(
            "response has a single class ({ones} of {} exposed)",
            design.n
        )));
    }
    check_rank(design)?;

    let lik = Likelihood::new(design);
    let p = design.p;
    let mut alpha = vec![0.0; p];
    let mut state = lik.curvature(&alpha);
    let mut iterations = 0;
    let mut trace = vec![state.loglik];
    loop {
        if max_abs(&state.score) < opts.tol {
            break;
        }
        if iterations >= opts.max_iter {
            return Err(Error::NonConvergence {
                what: "logistic IRLS",
                iterations,
            });
        }
        iterations += 1;
        let step = state
            .info
            .clone()
            .cholesky()
            .ok_or_else(|| Error::RankDeficient("information matrix is singular".into()))?
            .solve(&DVector::from_column_slice(&state.score));

        let mut scale = 1.0;
        let mut candidate;
        loop {
            candidate = alpha
                .iter()
                .zip(step.iter())
                .map(|(a, s)| a + scale * s)
                .collect::<Vec<_>>();
            let ll = lik.loglik(&candidate);
            if ll >= state.loglik - 1e-12 * state.loglik.abs() || scale < 1e-10 {
                break;
            }
            scale *= 0.5;
        }
        alpha = candidate;
        let coef_norm = norm(&alpha);
        if !coef_norm.is_finite() || coef_norm > opts.max_coef_norm {
            return Err(Error::QuasiSeparation { norm: coef_norm });
        }
        state = lik.curvature(&alpha);
        trace.push(state.loglik);
    }
    // A vanishing score with saturated fitted values means the likelihood is
    // maximised at infinity in some direction.
    if state.max_abs_eta > 30.0 {
        return Err(Error::QuasiSeparation { norm: norm(&alpha) });
    }

    let fisher_cov = state
        .info
        .clone()
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("information matrix is singular".into()))?
        .inverse();
    Ok(PsFit {
        e_mle: predict_ps(&alpha, design),
        alpha_mle: alpha,
        fisher_cov: fisher_cov.transpose().as_slice().to_vec(),
        iterations,
        log_likelihood: state.loglik,
        loglik_trace: trace,
        posterior_draws: None,
        acceptance_rate: None,
    })
}

/// Random-walk Metropolis draws from the flat-prior posterior of the
/// coefficients, started at the MLE with proposal covariance `c² · fisher_cov`.
pub fn sample_posterior(
    design: &PsDesign,
    mut fit: PsFit,
    n_draws: usize,
    seed: u64,
    opts: &PsOptions,
) -> Result<PsFit> {
    if n_draws == 0 {
        return Err(Error::Config(
            "posterior sample size must be positive".into(),
        ));
    }
    let p = design.p;
    let thin = opts.thin.max(1);
    let chol = DMatrix::from_row_slice(p, p, &fit.fisher_cov)
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("Fisher covariance is not positive definite".into()))?;
    let lower = chol.l();
    let scale = opts.proposal_scale.unwrap_or(2.38 / (p as f64).sqrt());

    let mut rng = rng::stream(seed, &[tag::POSTERIOR, design.time as u64]);
    let mut current = fit.alpha_mle.clone();
    let lik = Likelihood::new(design);
    let mut current_ll = lik.loglik(&current);
    let mut proposal = vec![0.0; p];
    let mut z = vec![0.0; p];
    let mut draws = Vec::with_capacity(n_draws * p);
    let mut accepted = 0usize;
    let total = opts.burn_in + n_draws * thin;
    for iter in 0..total {
        for zj in z.iter_mut() {
            *zj = rng.sample(StandardNormal);
        }
        for a in 0..p {
            let shift: f64 = (0..=a).map(|b| lower[(a, b)] * z[b]).sum();
            proposal[a] = current[a] + scale * shift;
        }
        let ll = lik.loglik(&proposal);
        let log_u: f64 = rng.random::<f64>().ln();
        let accept = log_u < ll - current_ll;
        if accept {
            current.copy_from_slice(&proposal);
            current_ll = ll;
        }
        if iter >= opts.burn_in {
            accepted += usize::from(accept);
            if (iter - opts.burn_in + 1).is_multiple_of(thin) {
                draws.extend_from_slice(&current);
            }
        }
    }
    let rate = accepted as f64 / (n_draws * thin) as f64;
    if !(0.1..=0.6).contains(&rate) {
        log::warn!(
            "time {}: Metropolis acceptance rate {rate:.3} outside [0.1, 0.6]",
            design.time
        );
    }
    fit.posterior_draws = Some(PosteriorDraws::from_rows(p, draws));
    fit.acceptance_rate = Some(rate);
    Ok(fit)
}

/// How [`fit_sequential`] treats each time point's model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FitMode {
    Mle,
    Posterior { n_draws: usize, seed: u64 },
}

/// Unit-major n × D matrix of exposure probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityMatrix {
    n: usize,
    d: usize,
    values: Vec<f64>,
}

impl PropensityMatrix {
    pub fn from_unit_major(n: usize, d: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), n * d);
        PropensityMatrix { n, d, values }
    }

    /// Builds the matrix from one probability vector per time point.
    pub fn from_columns(columns: &[Vec<f64>]) -> Self {
        let d = columns.len();
        let n = columns.first().map_or(0, Vec::len);
        let mut values = vec![0.0; n * d];
        for (t, col) in columns.iter().enumerate() {
            assert_eq!(col.len(), n);
            for (i, &e) in col.iter().enumerate() {
                values[i * d + t] = e;
            }
        }
        PropensityMatrix { n, d, values }
    }

    pub fn n_units(&self) -> usize {
        self.n
    }

    pub fn n_times(&self) -> usize {
        self.d
    }

    pub fn get(&self, unit: usize, time: usize) -> f64 {
        self.values[unit * self.d + time]
    }

    pub fn unit(&self, unit: usize) -> &[f64] {
        &self.values[unit * self.d..(unit + 1) * self.d]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// One fitted propensity model per time point, with the designs they used.
#[derive(Debug, Clone)]
pub struct SequentialPs {
    pub designs: Vec<PsDesign>,
    pub fits: Vec<PsFit>,
}

impl SequentialPs {
    pub fn n_times(&self) -> usize {
        self.fits.len()
    }

    /// Fitted MLE probabilities as an n × D matrix.
    pub fn mle_matrix(&self) -> PropensityMatrix {
        let cols: Vec<Vec<f64>> = self.fits.iter().map(|f| f.e_mle.clone()).collect();
        PropensityMatrix::from_columns(&cols)
    }

    /// Probabilities implied by the `k`-th posterior draw at every time point.
    pub fn draw_matrix(&self, k: usize) -> Option<PropensityMatrix> {
        let cols = self
            .fits
            .iter()
            .zip(&self.designs)
            .map(|(fit, design)| {
                fit.posterior_draws
                    .as_ref()
                    .filter(|d| k < d.n_draws)
                    .map(|d| predict_ps(d.draw(k), design))
            })
            .collect::<Option<Vec<_>>>()?;
        Some(PropensityMatrix::from_columns(&cols))
    }

    /// Smallest retained posterior sample size across time points.
    pub fn n_draws(&self) -> usize {
        self.fits
            .iter()
            .map(|f| f.posterior_draws.as_ref().map_or(0, |d| d.n_draws))
            .min()
            .unwrap_or(0)
    }
}

/// Fits each time point's model independently; posterior chains are seeded
/// from `(seed, time)`.
pub fn fit_sequential(ds: &PanelDataset, mode: FitMode, opts: &PsOptions) -> Result<SequentialPs> {
    let results: Vec<Result<(PsDesign, PsFit)>> = (0..ds.n_times())
        .into_par_iter()
        .map(|t| {
            let design = build_design(ds, t);
            let fit = fit_mle(&design, opts).map_err(Error::at_time(t))?;
            Ok((design, fit))
        })
        .collect();
    let (designs, fits) = results
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let ps = SequentialPs { designs, fits };
    match mode {
        FitMode::Mle => Ok(ps),
        FitMode::Posterior { n_draws, seed } => with_posterior(ps, n_draws, seed, opts),
    }
}

/// Adds `n_draws` posterior draws to every fit of an MLE-fitted sequence.
pub fn with_posterior(
    ps: SequentialPs,
    n_draws: usize,
    seed: u64,
    opts: &PsOptions,
) -> Result<SequentialPs> {
    let SequentialPs { designs, fits } = ps;
    let fits = designs
        .par_iter()
        .zip(fits)
        .map(|(design, fit)| {
            sample_posterior(design, fit, n_draws, seed, opts).map_err(Error::at_time(design.time))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(SequentialPs { designs, fits })
}
