//! Simulated longitudinal panels with time-varying confounding, the
//! data-generated overlap population (DGCOP) and true-estimand oracles.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{validate, OutcomeKind, PanelDataset, RawPanel};
use crate::propensity::{expit, PropensityMatrix};
use crate::rng::{self, tag};

pub const DGCOP_BINS: usize = 20;
/// Minimum share of each arm for a bin to count as mixed.
pub const DGCOP_MIN_SHARE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectMode {
    Homogeneous,
    Heterogeneous,
}

impl std::str::FromStr for EffectMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "homogeneous" | "homo" => Ok(EffectMode::Homogeneous),
            "heterogeneous" | "hetero" => Ok(EffectMode::Heterogeneous),
            other => Err(Error::Config(format!("unknown effect mode {other:?}"))),
        }
    }
}

/// Autoregression of the time-varying covariate means on past exposures and
/// past values of the same covariate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tau {
    pub t1: f64,
    pub t2: f64,
    pub x1: f64,
    pub x2: f64,
}

impl Default for Tau {
    fn default() -> Self {
        Tau {
            t1: 0.2,
            t2: 0.1,
            x1: 0.2,
            x2: 0.1,
        }
    }
}

/// True propensity coefficients; vector coefficients are equal across
/// coordinates and stored as one scalar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaTrue {
    pub intercept: f64,
    pub w: f64,
    pub x_current: f64,
    pub x_lag: f64,
    pub t_lag1: f64,
    pub t_lag2: f64,
}

impl Default for AlphaTrue {
    fn default() -> Self {
        AlphaTrue {
            intercept: 0.0,
            w: 0.3,
            x_current: 1.0,
            x_lag: 0.5,
            t_lag1: 0.5,
            t_lag2: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaTrue {
    pub beta0: f64,
    pub delta_star: f64,
    pub w: f64,
    /// Covariates at 1-based time d enter with `x_scale / (D - d + 1)`.
    pub x_scale: f64,
}

impl Default for BetaTrue {
    fn default() -> Self {
        BetaTrue {
            beta0: -1.0,
            delta_star: 0.5,
            w: 0.3,
            x_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub d: usize,
    pub p_w: usize,
    pub p_x: usize,
    pub tau: Tau,
    pub alpha: AlphaTrue,
    pub beta: BetaTrue,
    pub mode: EffectMode,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n: 5000,
            d: 3,
            p_w: 3,
            p_x: 3,
            tau: Tau::default(),
            alpha: AlphaTrue::default(),
            beta: BetaTrue::default(),
            mode: EffectMode::Homogeneous,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return Err(Error::Config("n and D must be positive".into()));
        }
        let coefs = [
            self.tau.t1,
            self.tau.t2,
            self.tau.x1,
            self.tau.x2,
            self.alpha.intercept,
            self.alpha.w,
            self.alpha.x_current,
            self.alpha.x_lag,
            self.alpha.t_lag1,
            self.alpha.t_lag2,
            self.beta.beta0,
            self.beta.delta_star,
            self.beta.w,
            self.beta.x_scale,
        ];
        if coefs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Config(
                "simulation coefficients must be finite".into(),
            ));
        }
        Ok(())
    }

    /// Outcome coefficient of the time-varying covariates at 0-based time `t`.
    pub fn beta_x(&self, t: usize) -> f64 {
        self.beta.x_scale / (self.d - t) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDataset {
    pub panel: PanelDataset,
    pub e_true: PropensityMatrix,
    /// Per-time bin-mixing indicators O, unit-major n × D (heterogeneous mode).
    pub overlap_bins: Option<Vec<u8>>,
    /// O* = prod_d O_d (heterogeneous mode).
    pub dgcop: Option<Vec<u8>>,
}

impl SimulatedDataset {
    pub fn dgcop_share(&self) -> Option<f64> {
        self.dgcop
            .as_ref()
            .map(|o| o.iter().map(|&v| f64::from(v)).sum::<f64>() / o.len() as f64)
    }

    /// Number of time points each unit spends in a mixed bin.
    pub fn dgcop_counts(&self) -> Option<Vec<u32>> {
        let d = self.panel.n_times();
        self.overlap_bins.as_ref().map(|o| {
            o.chunks(d)
                .map(|row| row.iter().map(|&v| u32::from(v)).sum())
                .collect()
        })
    }

    /// Share exposed at each time point.
    pub fn exposure_rates(&self) -> Vec<f64> {
        let n = self.panel.n_units() as f64;
        (0..self.panel.n_times())
            .map(|t| {
                (0..self.panel.n_units())
                    .map(|i| f64::from(self.panel.exposure(i, t)))
                    .sum::<f64>()
                    / n
            })
            .collect()
    }

    /// `id,e_1,...,e_D`
    pub fn write_e_true_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let d = self.panel.n_times();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string()];
        header.extend((1..=d).map(|t| format!("e_{t}")));
        w.write_record(&header)?;
        for (i, id) in self.panel.ids().iter().enumerate() {
            let mut row = vec![id.clone()];
            row.extend(self.e_true.unit(i).iter().map(|e| e.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `id,o_1,...,o_D,dgcop`; `None` outside heterogeneous mode.
    pub fn write_dgcop_csv<W: std::io::Write>(&self, writer: W) -> Result<Option<()>> {
        let (Some(bins), Some(dgcop)) = (&self.overlap_bins, &self.dgcop) else {
            return Ok(None);
        };
        let d = self.panel.n_times();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string()];
        header.extend((1..=d).map(|t| format!("o_{t}")));
        header.push("dgcop".into());
        w.write_record(&header)?;
        for (i, id) in self.panel.ids().iter().enumerate() {
            let mut row = vec![id.clone()];
            row.extend(bins[i * d..(i + 1) * d].iter().map(|o| o.to_string()));
            row.push(dgcop[i].to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(Some(()))
    }
}

struct Generated {
    data: SimulatedDataset,
    /// Outcome noise, so oracles can work with conditional means.
    noise: Vec<f64>,
}

pub fn generate(cfg: &SimConfig) -> Result<SimulatedDataset> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, &[]);
    Ok(generate_with(cfg, &mut rng).data)
}

fn generate_with<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Generated {
    let (n, d, pw, px) = (cfg.n, cfg.d, cfg.p_w, cfg.p_x);
    let (tau, a) = (cfg.tau, cfg.alpha);
    let mut baseline = Vec::with_capacity(n * pw);
    let mut timevarying = vec![0.0; n * d * px];
    let mut exposure = vec![0u8; n * d];
    let mut e_true = vec![0.0; n * d];
    for i in 0..n {
        let w: Vec<f64> = (0..pw).map(|_| rng.sample(StandardNormal)).collect();
        let w_sum: f64 = w.iter().sum();
        baseline.extend_from_slice(&w);
        for t in 0..d {
            let t_lag = |l: usize| {
                if t >= l {
                    f64::from(exposure[i * d + t - l])
                } else {
                    0.0
                }
            };
            let (t1, t2) = (t_lag(1), t_lag(2));
            let mut x_sum = 0.0;
            let mut x_lag_sum = 0.0;
            for r in 0..px {
                let x_lag = |l: usize| {
                    if t >= l {
                        timevarying[(i * d + t - l) * px + r]
                    } else {
                        0.0
                    }
                };
                let (x1, x2) = (x_lag(1), x_lag(2));
                let mu = tau.t1 * t1 + tau.t2 * t2 + tau.x1 * x1 + tau.x2 * x2;
                let x = mu + rng.sample::<f64, _>(StandardNormal);
                timevarying[(i * d + t) * px + r] = x;
                x_sum += x;
                x_lag_sum += x1;
            }
            let eta = a.intercept
                + a.w * w_sum
                + a.x_current * x_sum
                + a.x_lag * x_lag_sum
                + a.t_lag1 * t1
                + a.t_lag2 * t2;
            let e = expit(eta);
            e_true[i * d + t] = e;
            exposure[i * d + t] = u8::from(rng.random::<f64>() < e);
        }
    }
    let e_true = PropensityMatrix::from_unit_major(n, d, e_true);
    let (overlap_bins, dgcop) = match cfg.mode {
        EffectMode::Homogeneous => (None, None),
        EffectMode::Heterogeneous => {
            let bins = overlap_bin_indicators(&e_true, &exposure);
            let star: Vec<u8> = bins
                .chunks(d)
                .map(|row| u8::from(row.iter().all(|&o| o == 1)))
                .collect();
            (Some(bins), Some(star))
        }
    };
    let b = cfg.beta;
    let mut outcome = Vec::with_capacity(n);
    let mut noise = Vec::with_capacity(n);
    for i in 0..n {
        let sum_t: f64 = exposure[i * d..(i + 1) * d]
            .iter()
            .map(|&v| f64::from(v))
            .sum();
        let effect = match &dgcop {
            Some(o) => b.delta_star * sum_t * f64::from(o[i]),
            None => b.delta_star * sum_t,
        };
        let w_part: f64 = baseline[i * pw..(i + 1) * pw].iter().sum::<f64>() * b.w;
        let x_part: f64 = (0..d)
            .map(|t| {
                let start = (i * d + t) * px;
                cfg.beta_x(t) * timevarying[start..start + px].iter().sum::<f64>()
            })
            .sum();
        let eps: f64 = rng.sample(StandardNormal);
        noise.push(eps);
        outcome.push(b.beta0 + effect + w_part + x_part + eps);
    }
    let raw = RawPanel {
        ids: Vec::new(),
        n_times: d,
        n_baseline: pw,
        n_timevarying: px,
        baseline,
        timevarying,
        exposure: exposure.iter().map(|&v| f64::from(v)).collect(),
        outcome,
        offset: None,
        kind: Some(OutcomeKind::Continuous),
    };
    let panel = validate(raw).expect("simulated panel is valid");
    Generated {
        data: SimulatedDataset {
            panel,
            e_true,
            overlap_bins,
            dgcop,
        },
        noise,
    }
}

/// Bin index (0..bins) of every unit under equal-count binning of `values`,
/// ties broken by unit index.
pub fn equal_count_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut bin = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        bin[i] = rank * bins / n;
    }
    bin
}

/// O_{di}: whether unit i's propensity bin at time d holds at least 10% of
/// each arm. Unit-major n × D.
pub fn overlap_bin_indicators(e: &PropensityMatrix, exposure: &[u8]) -> Vec<u8> {
    let (n, d) = (e.n_units(), e.n_times());
    let mut out = vec![0u8; n * d];
    for t in 0..d {
        let col: Vec<f64> = (0..n).map(|i| e.get(i, t)).collect();
        let bin = equal_count_bins(&col, DGCOP_BINS);
        let mut size = [0usize; DGCOP_BINS];
        let mut treated = [0usize; DGCOP_BINS];
        for i in 0..n {
            size[bin[i]] += 1;
            treated[bin[i]] += usize::from(exposure[i * d + t]);
        }
        let mixed: Vec<bool> = (0..DGCOP_BINS)
            .map(|b| {
                let s = size[b] as f64;
                s > 0.0
                    && treated[b] as f64 >= DGCOP_MIN_SHARE * s
                    && (size[b] - treated[b]) as f64 >= DGCOP_MIN_SHARE * s
            })
            .collect();
        for i in 0..n {
            out[i * d + t] = u8::from(mixed[bin[i]]);
        }
    }
    out
}

/// DGCOP membership O*.
pub fn compute_dgcop(e: &PropensityMatrix, exposure: &[u8]) -> Vec<u8> {
    overlap_bin_indicators(e, exposure)
        .chunks(e.n_times())
        .map(|row| u8::from(row.iter().all(|&o| o == 1)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueEstimands {
    pub ate: f64,
    pub ato: f64,
    pub dgcop_share: Option<f64>,
    pub n_oracle: usize,
}

/// Weighted least-squares sums for `y ~ 1 + x`.
#[derive(Debug, Clone, Copy, Default)]
struct WlsSums {
    w: f64,
    wx: f64,
    wxx: f64,
    wy: f64,
    wxy: f64,
}

impl WlsSums {
    fn add(&mut self, w: f64, x: f64, y: f64) {
        self.w += w;
        self.wx += w * x;
        self.wxx += w * x * x;
        self.wy += w * y;
        self.wxy += w * x * y;
    }

    fn merge(mut self, o: WlsSums) -> Self {
        self.w += o.w;
        self.wx += o.wx;
        self.wxx += o.wxx;
        self.wy += o.wy;
        self.wxy += o.wxy;
        self
    }

    fn slope(&self) -> f64 {
        (self.w * self.wxy - self.wx * self.wy) / (self.w * self.wxx - self.wx * self.wx)
    }
}

/// True ATE and ATO. In heterogeneous mode the ATO is the slope of an
/// overlap-weighted fit, with weights from the true propensity scores, over
/// `n_oracle` simulated units. Units are generated in blocks of `cfg.n` so the
/// DGCOP binning matches that of an analysed dataset; the fit uses the
/// noise-free conditional mean of the outcome.
pub fn true_estimands(cfg: &SimConfig, n_oracle: usize, seed: u64) -> Result<TrueEstimands> {
    cfg.validate()?;
    let delta = cfg.beta.delta_star;
    if cfg.mode == EffectMode::Homogeneous {
        return Ok(TrueEstimands {
            ate: delta,
            ato: delta,
            dgcop_share: None,
            n_oracle: 0,
        });
    }
    let blocks = n_oracle.div_ceil(cfg.n).max(1);
    let parts: Vec<(WlsSums, usize)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng::stream(seed, &[tag::ORACLE, b as u64]);
            let g = generate_with(cfg, &mut rng);
            let ds = &g.data.panel;
            let mut sums = WlsSums::default();
            for i in 0..ds.n_units() {
                let ow: f64 = ds
                    .exposures(i)
                    .iter()
                    .zip(g.data.e_true.unit(i))
                    .map(|(&t, &e)| if t == 1 { 1.0 - e } else { e })
                    .product();
                let y = ds.outcome()[i] - g.noise[i];
                sums.add(ow, f64::from(ds.cumulative_exposure(i)), y);
            }
            let in_dgcop = g
                .data
                .dgcop
                .as_ref()
                .map_or(0, |o| o.iter().filter(|&&v| v == 1).count());
            (sums, in_dgcop)
        })
        .collect();
    let (sums, in_dgcop) = parts
        .into_iter()
        .fold((WlsSums::default(), 0), |(s, c), (p, k)| {
            (s.merge(p), c + k)
        });
    let total = blocks * cfg.n;
    let share = in_dgcop as f64 / total as f64;
    Ok(TrueEstimands {
        ate: delta * share,
        ato: sums.slope(),
        dgcop_share: Some(share),
        n_oracle: total,
    })
}
