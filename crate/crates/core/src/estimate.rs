//! One-shot estimation of several methods on a dataset, sharing the
//! propensity fits between them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::msm::{fit_weighted, EffectEstimate, Method, MsmSpec};
use crate::panel::PanelDataset;
use crate::ppta::{self, PptaOptions, PptaRun};
use crate::propensity::{fit_sequential, FitMode, SequentialPs};
use crate::rng::{self, tag};
use crate::weights::{self, WeightSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimationConfig {
    pub spec: MsmSpec,
    /// PPTA settings; `ppta.ps` is used for every propensity fit.
    pub ppta: PptaOptions,
}

impl EstimationConfig {
    pub fn for_panel(ds: &PanelDataset) -> Self {
        EstimationConfig {
            spec: MsmSpec::for_panel(ds),
            ppta: PptaOptions::default(),
        }
    }
}

/// Per-method outcome of [`estimate_methods`].
#[derive(Debug)]
pub struct MethodResult {
    pub method: Method,
    pub result: Result<EffectEstimate>,
}

#[derive(Debug)]
pub struct Analysis {
    pub ps: SequentialPs,
    pub results: Vec<MethodResult>,
    pub weights: Vec<WeightSet>,
    pub ppta: Option<PptaRun>,
}

impl Analysis {
    pub fn get(&self, method: Method) -> Option<&Result<EffectEstimate>> {
        self.results
            .iter()
            .find(|r| r.method == method)
            .map(|r| &r.result)
    }

    pub fn estimate(&self, method: Method) -> Option<&EffectEstimate> {
        self.get(method).and_then(|r| r.as_ref().ok())
    }
}

/// Fits the propensity models once and estimates every requested method.
/// Fails as a whole only when the shared propensity fit fails; individual
/// methods fail independently otherwise. PPTA randomness derives from `seed`.
pub fn estimate_methods(
    ds: &PanelDataset,
    methods: &[Method],
    cfg: &EstimationConfig,
    seed: u64,
) -> Result<Analysis> {
    if methods.is_empty() {
        return Err(Error::Config("no methods requested".into()));
    }
    let ps = fit_sequential(ds, FitMode::Mle, &cfg.ppta.ps)?;
    let mut results = Vec::with_capacity(methods.len());
    let mut weight_sets = Vec::new();
    let mut ppta_run = None;
    for &method in methods {
        let result = match method {
            Method::Ipw | Method::Ow | Method::Sw => {
                let ws = match method {
                    Method::Ipw => Ok(weights::ipw(&ps, ds)),
                    Method::Ow => Ok(weights::overlap(&ps, ds)),
                    _ => weights::stabilized(&ps, ds, &cfg.ppta.ps),
                };
                ws.and_then(|ws| {
                    let fit = fit_weighted(ds, &ws.values, &cfg.spec)?;
                    weight_sets.push(ws);
                    Ok(fit.into_estimate(method))
                })
            }
            Method::Unweighted => fit_weighted(ds, &vec![1.0; ds.n_units()], &cfg.spec)
                .map(|f| f.into_estimate(method)),
            Method::Ppta => ppta::run_from_mle(
                ds,
                ps.clone(),
                &cfg.spec,
                rng::derive_seed(seed, &[tag::PPTA]),
                &cfg.ppta,
            )
            .and_then(|run| {
                let est = run.estimate();
                ppta_run = Some(run);
                est
            }),
        };
        if let Err(e) = &result {
            log::debug!("{method} failed: {e}");
        }
        results.push(MethodResult { method, result });
    }
    Ok(Analysis {
        ps,
        results,
        weights: weight_sets,
        ppta: ppta_run,
    })
}
