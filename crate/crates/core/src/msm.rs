//! Observed-data marginal structural model `g(E[Y]) = b0 + b * sum_d T_d`,
//! fitted by weighted least squares (identity link) or weighted Poisson
//! regression with an optional log offset (log link).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{OutcomeKind, PanelDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Log,
}

impl Link {
    pub fn name(self) -> &'static str {
        match self {
            Link::Identity => "identity",
            Link::Log => "log",
        }
    }

    /// Maps a coefficient to the effect scale.
    pub fn to_delta(self, beta: f64) -> f64 {
        match self {
            Link::Identity => beta,
            Link::Log => beta.exp(),
        }
    }

    pub fn from_delta(self, delta: f64) -> f64 {
        match self {
            Link::Identity => delta,
            Link::Log => delta.ln(),
        }
    }

    fn outcome_kind(self) -> OutcomeKind {
        match self {
            Link::Identity => OutcomeKind::Continuous,
            Link::Log => OutcomeKind::Count,
        }
    }
}

impl std::str::FromStr for Link {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" => Ok(Link::Identity),
            "log" => Ok(Link::Log),
            other => Err(Error::Config(format!("unknown link {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MsmSpec {
    pub link: Link,
    /// Use the panel's offset as `log(offset)` in the log-link fit.
    pub use_offset: bool,
}

impl MsmSpec {
    pub fn identity() -> Self {
        MsmSpec {
            link: Link::Identity,
            use_offset: false,
        }
    }

    pub fn log_rate() -> Self {
        MsmSpec {
            link: Link::Log,
            use_offset: true,
        }
    }

    /// Spec matching the panel's outcome kind.
    pub fn for_panel(ds: &PanelDataset) -> Self {
        match ds.kind() {
            OutcomeKind::Continuous => Self::identity(),
            OutcomeKind::Count => MsmSpec {
                link: Link::Log,
                use_offset: ds.offset().is_some(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Estimand {
    Ate,
    Ato,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Ipw,
    Sw,
    Ow,
    Ppta,
    Unweighted,
}

impl Method {
    pub const ESTIMATORS: [Method; 4] = [Method::Ipw, Method::Sw, Method::Ow, Method::Ppta];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ipw => "IPW",
            Method::Sw => "SW",
            Method::Ow => "OW",
            Method::Ppta => "PPTA",
            Method::Unweighted => "UNWEIGHTED",
        }
    }

    pub fn estimand(self) -> Estimand {
        match self {
            Method::Ow | Method::Ppta => Estimand::Ato,
            Method::Ipw | Method::Sw | Method::Unweighted => Estimand::Ate,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "IPW" => Ok(Method::Ipw),
            "SW" => Ok(Method::Sw),
            "OW" => Ok(Method::Ow),
            "PPTA" => Ok(Method::Ppta),
            "UNWEIGHTED" => Ok(Method::Unweighted),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

/// Coefficients of a fitted observed-data MSM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MsmFit {
    pub link: Link,
    pub beta0: f64,
    pub beta: f64,
    pub iterations: usize,
}

impl MsmFit {
    pub fn delta(&self) -> f64 {
        self.link.to_delta(self.beta)
    }

    pub fn into_estimate(self, method: Method) -> EffectEstimate {
        EffectEstimate {
            method,
            estimand: method.estimand(),
            link: self.link,
            beta0: self.beta0,
            beta: self.beta,
            delta: self.delta(),
            se: None,
            ci95: None,
        }
    }
}

/// A causal contrast per additional exposed time point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "EffectRecord", from = "EffectRecord")]
pub struct EffectEstimate {
    pub method: Method,
    pub estimand: Estimand,
    pub link: Link,
    pub beta0: f64,
    pub beta: f64,
    pub delta: f64,
    /// Bootstrap standard error on the coefficient scale.
    pub se: Option<f64>,
    pub ci95: Option<(f64, f64)>,
}

impl EffectEstimate {
    /// Attaches a bootstrap SE and the normal-approximation 95% interval
    /// `beta ± 1.96 se`, mapped to the effect scale.
    pub fn with_se(mut self, se: f64) -> Self {
        let lo = self.beta - 1.96 * se;
        let hi = self.beta + 1.96 * se;
        self.se = Some(se);
        self.ci95 = Some((self.link.to_delta(lo), self.link.to_delta(hi)));
        self
    }

    pub fn covers(&self, truth: f64) -> Option<bool> {
        self.ci95.map(|(lo, hi)| lo <= truth && truth <= hi)
    }

    /// `1.07 [0.98, 1.22]`-style rendering.
    pub fn formatted(&self, decimals: usize) -> String {
        match self.ci95 {
            Some((lo, hi)) => format!(
                "{:.*} [{:.*}, {:.*}]",
                decimals, self.delta, decimals, lo, decimals, hi
            ),
            None => format!("{:.*}", decimals, self.delta),
        }
    }
}

/// Flat serialized form of [`EffectEstimate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectRecord {
    pub method: Method,
    pub estimand: Estimand,
    pub link: Link,
    pub beta0: f64,
    pub beta: f64,
    pub delta: f64,
    pub se: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

impl From<EffectEstimate> for EffectRecord {
    fn from(e: EffectEstimate) -> Self {
        EffectRecord {
            method: e.method,
            estimand: e.estimand,
            link: e.link,
            beta0: e.beta0,
            beta: e.beta,
            delta: e.delta,
            se: e.se,
            ci_low: e.ci95.map(|c| c.0),
            ci_high: e.ci95.map(|c| c.1),
        }
    }
}

impl From<EffectRecord> for EffectEstimate {
    fn from(r: EffectRecord) -> Self {
        EffectEstimate {
            method: r.method,
            estimand: r.estimand,
            link: r.link,
            beta0: r.beta0,
            beta: r.beta,
            delta: r.delta,
            se: r.se,
            ci95: r.ci_low.zip(r.ci_high),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Obs {
    x: f64,
    y: f64,
    w: f64,
    log_offset: f64,
}

fn check_link(ds: &PanelDataset, spec: &MsmSpec) -> Result<()> {
    if spec.link.outcome_kind() != ds.kind() {
        return Err(Error::LinkMismatch {
            link: spec.link.name(),
            kind: ds.kind().name(),
        });
    }
    Ok(())
}

fn observation(ds: &PanelDataset, spec: &MsmSpec, unit: usize, w: f64) -> Obs {
    let log_offset = match (spec.link, spec.use_offset, ds.offset()) {
        (Link::Log, true, Some(off)) => off[unit].ln(),
        _ => 0.0,
    };
    Obs {
        x: f64::from(ds.cumulative_exposure(unit)),
        y: ds.outcome()[unit],
        w,
        log_offset,
    }
}

fn check_contrast(obs: &[Obs]) -> Result<()> {
    let first = obs.first().map_or(0.0, |o| o.x);
    if obs.iter().all(|o| o.x == first) {
        return Err(Error::NoContrast(first as u32));
    }
    Ok(())
}

fn fit_identity(obs: &[Obs]) -> MsmFit {
    let sw: f64 = obs.iter().map(|o| o.w).sum();
    let mx = obs.iter().map(|o| o.w * o.x).sum::<f64>() / sw;
    let my = obs.iter().map(|o| o.w * o.y).sum::<f64>() / sw;
    let (sxx, sxy) = obs.iter().fold((0.0, 0.0), |(sxx, sxy), o| {
        let dx = o.x - mx;
        (sxx + o.w * dx * dx, sxy + o.w * dx * (o.y - my))
    });
    let beta = sxy / sxx;
    MsmFit {
        link: Link::Identity,
        beta0: my - beta * mx,
        beta,
        iterations: 0,
    }
}

fn poisson_loglik(obs: &[Obs], b0: f64, b1: f64) -> f64 {
    obs.iter()
        .map(|o| {
            let eta = b0 + b1 * o.x + o.log_offset;
            o.w * (o.y * eta - eta.exp())
        })
        .sum()
}

const POISSON_MAX_ITER: usize = 100;

fn fit_poisson(obs: &[Obs]) -> Result<MsmFit> {
    let wy: f64 = obs.iter().map(|o| o.w * o.y).sum();
    if wy <= 0.0 {
        return Err(Error::NoMle("every weighted count is zero".into()));
    }
    let exposure: f64 = obs.iter().map(|o| o.w * o.log_offset.exp()).sum();
    let mut b = [(wy / exposure).ln(), 0.0];
    let mut ll = poisson_loglik(obs, b[0], b[1]);
    for iter in 1..=POISSON_MAX_ITER {
        let (mut s0, mut s1, mut i00, mut i01, mut i11) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for o in obs {
            let mu = (b[0] + b[1] * o.x + o.log_offset).exp();
            let r = o.w * (o.y - mu);
            let wm = o.w * mu;
            s0 += r;
            s1 += r * o.x;
            i00 += wm;
            i01 += wm * o.x;
            i11 += wm * o.x * o.x;
        }
        let det = i00 * i11 - i01 * i01;
        if det.is_nan() || det <= 0.0 {
            return Err(Error::RankDeficient(
                "Poisson information is singular".into(),
            ));
        }
        let step = [(i11 * s0 - i01 * s1) / det, (i00 * s1 - i01 * s0) / det];
        let mut scale = 1.0;
        let next = loop {
            let cand = [b[0] + scale * step[0], b[1] + scale * step[1]];
            let cand_ll = poisson_loglik(obs, cand[0], cand[1]);
            if cand_ll >= ll - 1e-12 * ll.abs() || scale < 1e-10 {
                ll = cand_ll;
                break cand;
            }
            scale *= 0.5;
        };
        let moved = (next[0] - b[0]).abs().max((next[1] - b[1]).abs());
        b = next;
        if !b[0].is_finite() || !b[1].is_finite() {
            break;
        }
        if moved < 1e-12 * (1.0 + b[0].abs().max(b[1].abs())) {
            return Ok(MsmFit {
                link: Link::Log,
                beta0: b[0],
                beta: b[1],
                iterations: iter,
            });
        }
    }
    Err(Error::NonConvergence {
        what: "weighted Poisson IRLS",
        iterations: POISSON_MAX_ITER,
    })
}

fn fit_observations(obs: &[Obs], link: Link) -> Result<MsmFit> {
    check_contrast(obs)?;
    match link {
        Link::Identity => Ok(fit_identity(obs)),
        Link::Log => fit_poisson(obs),
    }
}

/// Weighted fit of the MSM over all units with positive weight.
pub fn fit_weighted(ds: &PanelDataset, weights: &[f64], spec: &MsmSpec) -> Result<MsmFit> {
    check_link(ds, spec)?;
    if weights.len() != ds.n_units() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} units",
            weights.len(),
            ds.n_units()
        )));
    }
    if let Some(bad) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidWeights(format!(
            "weight {} at unit {bad} is negative or non-finite",
            weights[bad]
        )));
    }
    let obs: Vec<Obs> = weights
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(i, &w)| observation(ds, spec, i, w))
        .collect();
    if obs.is_empty() {
        return Err(Error::InvalidWeights("all weights are zero".into()));
    }
    fit_observations(&obs, spec.link)
}

/// Unweighted fit restricted to `members`, which must be ascending and distinct
/// for the result to match [`fit_weighted`] with indicator weights bit for bit.
pub fn fit_on_subset(ds: &PanelDataset, members: &[usize], spec: &MsmSpec) -> Result<MsmFit> {
    check_link(ds, spec)?;
    if members.len() < 3 {
        return Err(Error::InfeasibleSubset(format!(
            "{} members, need at least 3",
            members.len()
        )));
    }
    let obs: Vec<Obs> = members
        .iter()
        .map(|&i| observation(ds, spec, i, 1.0))
        .collect();
    fit_observations(&obs, spec.link).map_err(|e| match e {
        Error::NoContrast(x) => {
            Error::InfeasibleSubset(format!("every member has cumulative exposure {x}"))
        }
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{validate, RawPanel};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn linear_panel(n: usize, d: usize, seed: u64) -> PanelDataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let exposure: Vec<f64> = (0..n * d)
            .map(|_| f64::from(rng.random::<bool>()))
            .collect();
        let outcome = exposure
            .chunks(d)
            .map(|t| 2.0 + 3.0 * t.iter().sum::<f64>())
            .collect();
        validate(RawPanel {
            n_times: d,
            exposure,
            outcome,
            ..RawPanel::default()
        })
        .unwrap()
    }

    fn noisy_panel(n: usize, seed: u64) -> PanelDataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let exposure: Vec<f64> = (0..n * 3)
            .map(|_| f64::from(rng.random::<bool>()))
            .collect();
        let outcome = exposure
            .chunks(3)
            .map(|t| 1.0 - 0.5 * t.iter().sum::<f64>() + rng.random::<f64>())
            .collect();
        validate(RawPanel {
            n_times: 3,
            exposure,
            outcome,
            ..RawPanel::default()
        })
        .unwrap()
    }

    fn count_panel(n: usize, seed: u64) -> PanelDataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let exposure: Vec<f64> = (0..n * 2)
            .map(|_| f64::from(rng.random::<bool>()))
            .collect();
        let offset: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..5.0)).collect();
        let outcome = exposure
            .chunks(2)
            .zip(&offset)
            .map(|(t, o)| {
                (o * (0.2 * t.iter().sum::<f64>()).exp() * 3.0 + rng.random_range(-1.0..1.0))
                    .round()
                    .max(0.0)
            })
            .collect();
        validate(RawPanel {
            n_times: 2,
            exposure,
            outcome,
            offset: Some(offset),
            ..RawPanel::default()
        })
        .unwrap()
    }

    #[test]
    fn exact_linear_fit() {
        let ds = linear_panel(50, 3, 1);
        let fit = fit_weighted(&ds, &vec![1.0; 50], &MsmSpec::identity()).unwrap();
        assert_abs_diff_eq!(fit.beta0, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.beta, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.delta(), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn no_contrast_among_weighted_units() {
        let ds = validate(RawPanel {
            n_times: 2,
            exposure: vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0],
            outcome: vec![1.0, 2.0, 3.0],
            ..RawPanel::default()
        })
        .unwrap();
        let err = fit_weighted(&ds, &[1.0, 0.0, 2.0], &MsmSpec::identity()).unwrap_err();
        assert!(matches!(err, Error::NoContrast(2)));
    }

    #[test]
    fn weight_validation() {
        let ds = linear_panel(5, 1, 2);
        let spec = MsmSpec::identity();
        assert!(matches!(
            fit_weighted(&ds, &[0.0; 5], &spec),
            Err(Error::InvalidWeights(_))
        ));
        assert!(matches!(
            fit_weighted(&ds, &[1.0, -1.0, 1.0, 1.0, 1.0], &spec),
            Err(Error::InvalidWeights(_))
        ));
        assert!(matches!(
            fit_weighted(&ds, &[1.0; 4], &spec),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn link_must_match_outcome() {
        let ds = linear_panel(10, 2, 3);
        assert!(matches!(
            fit_weighted(&ds, &[1.0; 10], &MsmSpec::log_rate()),
            Err(Error::LinkMismatch { .. })
        ));
        let counts = count_panel(10, 3);
        assert!(matches!(
            fit_weighted(&counts, &[1.0; 10], &MsmSpec::identity()),
            Err(Error::LinkMismatch { .. })
        ));
    }

    #[test]
    fn subset_cases() {
        let ds = linear_panel(60, 3, 4);
        let spec = MsmSpec::identity();
        let all: Vec<usize> = (0..60).collect();
        assert_eq!(
            fit_on_subset(&ds, &all, &spec).unwrap(),
            fit_weighted(&ds, &vec![1.0; 60], &spec).unwrap()
        );
        assert!(matches!(
            fit_on_subset(&ds, &[], &spec),
            Err(Error::InfeasibleSubset(_))
        ));
        let half: Vec<usize> = (0..60).step_by(2).collect();
        assert_abs_diff_eq!(
            fit_on_subset(&ds, &half, &spec).unwrap().beta,
            3.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn identity_normal_equations() {
        let ds = noisy_panel(200, 5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let w: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..3.0)).collect();
        let fit = fit_weighted(&ds, &w, &MsmSpec::identity()).unwrap();
        let (mut r0, mut r1, mut s0, mut s1) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for (i, &wi) in w.iter().enumerate() {
            let x = f64::from(ds.cumulative_exposure(i));
            let y = ds.outcome()[i];
            let res = y - fit.beta0 - fit.beta * x;
            r0 += wi * res;
            r1 += wi * res * x;
            s0 += wi * y;
            s1 += wi * y * x;
        }
        assert!(r0.abs().max(r1.abs()) < 1e-8 * s0.abs().max(s1.abs()));
    }

    #[test]
    fn poisson_score_matches_finite_differences() {
        let ds = count_panel(300, 7);
        let spec = MsmSpec::log_rate();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let w: Vec<f64> = (0..300).map(|_| rng.random_range(0.1..2.0)).collect();
        let fit = fit_weighted(&ds, &w, &spec).unwrap();
        let obs: Vec<Obs> = (0..300).map(|i| observation(&ds, &spec, i, w[i])).collect();
        let h = 1e-6;
        let scale: f64 = obs.iter().map(|o| o.w * o.y).sum();
        let g0 = (poisson_loglik(&obs, fit.beta0 + h, fit.beta)
            - poisson_loglik(&obs, fit.beta0 - h, fit.beta))
            / (2.0 * h);
        let g1 = (poisson_loglik(&obs, fit.beta0, fit.beta + h)
            - poisson_loglik(&obs, fit.beta0, fit.beta - h))
            / (2.0 * h);
        assert!(g0.abs() / scale < 1e-5, "{g0}");
        assert!(g1.abs() / scale < 1e-5, "{g1}");
    }

    #[test]
    fn poisson_without_counts_fails() {
        let mut raw = count_panel(20, 9).to_raw();
        raw.outcome = vec![0.0; 20];
        let ds = validate(raw).unwrap();
        assert!(matches!(
            fit_weighted(&ds, &[1.0; 20], &MsmSpec::log_rate()),
            Err(Error::NoMle(_))
        ));
    }

    #[test]
    fn estimate_interval_and_json() {
        let est = MsmFit {
            link: Link::Log,
            beta0: 0.0,
            beta: 0.1,
            iterations: 3,
        }
        .into_estimate(Method::Ow)
        .with_se(0.05);
        let (lo, hi) = est.ci95.unwrap();
        assert_abs_diff_eq!(lo, (0.1f64 - 0.098).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(hi, (0.1f64 + 0.098).exp(), epsilon = 1e-12);
        assert_eq!(est.estimand, Estimand::Ato);
        assert_eq!(est.formatted(2), "1.11 [1.00, 1.22]");
        let json = serde_json::to_value(est).unwrap();
        assert_eq!(json["method"], "OW");
        assert_eq!(json["estimand"], "ATO");
        assert_eq!(json["link"], "log");
        assert!(json["ci_low"].is_f64() && json["ci_high"].is_f64());
        let back: EffectEstimate = serde_json::from_value(json).unwrap();
        assert_eq!(back, est);
    }

    proptest! {
        #[test]
        fn weight_scale_invariance(seed in any::<u64>(), c in 1e-3f64..1e3) {
            let ds = noisy_panel(80, seed);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 1);
            let w: Vec<f64> = (0..80).map(|_| rng.random_range(0.0..2.0)).collect();
            let scaled: Vec<f64> = w.iter().map(|v| v * c).collect();
            let a = fit_weighted(&ds, &w, &MsmSpec::identity()).unwrap();
            let b = fit_weighted(&ds, &scaled, &MsmSpec::identity()).unwrap();
            prop_assert!((a.beta0 - b.beta0).abs() < 1e-10);
            prop_assert!((a.beta - b.beta).abs() < 1e-10);
        }

        #[test]
        fn subset_equals_indicator_weights(seed in any::<u64>()) {
            let ds = noisy_panel(60, seed);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 2);
            let members: Vec<usize> = (0..60).filter(|_| rng.random_bool(0.4)).collect();
            let w: Vec<f64> = (0..60).map(|i| f64::from(u8::from(members.contains(&i)))).collect();
            let spec = MsmSpec::identity();
            match (fit_on_subset(&ds, &members, &spec), fit_weighted(&ds, &w, &spec)) {
                (Ok(a), Ok(b)) => {
                    prop_assert!((a.beta0 - b.beta0).abs() < 1e-10);
                    prop_assert!((a.beta - b.beta).abs() < 1e-10);
                }
                (Err(_), _) => {}
                (Ok(_), Err(e)) => prop_assert!(false, "{e}"),
            }
        }
    }
}
