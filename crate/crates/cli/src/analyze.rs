use std::fs::File;

use anyhow::Context;
use serde::Serialize;

use ppta_core::bootstrap::bootstrap_effects;
use ppta_core::diagnostics::{write_effect_table, write_weight_table, WeightColumn};
use ppta_core::msm::EffectRecord;
use ppta_core::panel::{read_csv_path, PanelDims};
use ppta_core::{
    estimate_methods, EffectEstimate, EstimationConfig, Link, Method, MsmSpec, PptaOptions,
};

use crate::config::{AnalysisConfig, AnalysisFile, AnalyzeArgs};

#[derive(Serialize)]
struct EstimatesFile {
    n_units: usize,
    n_times: usize,
    k: usize,
    b: usize,
    seed: u64,
    interval: &'static str,
    estimates: Vec<EffectRecord>,
    /// Methods whose point estimate failed, with the reason.
    failures: Vec<(Method, String)>,
    bootstrap_failures: Vec<(Method, usize)>,
}

pub fn run(args: AnalyzeArgs) -> anyhow::Result<()> {
    let file = match &args.config {
        Some(path) => AnalysisFile::read(path)?,
        None => AnalysisFile::default(),
    };
    let cfg = AnalysisConfig::resolve(&args, file)?;
    let dims = PanelDims {
        n_baseline: cfg.pw,
        n_timevarying: cfg.px,
        n_times: cfg.d,
    };
    let ds = read_csv_path(&cfg.input, dims, None)
        .with_context(|| format!("panel: reading {}", cfg.input.display()))?;
    let spec = match cfg.link {
        Some(link) => MsmSpec {
            link,
            ..MsmSpec::for_panel(&ds)
        },
        None => MsmSpec::for_panel(&ds),
    };
    let est_cfg = EstimationConfig {
        spec,
        ppta: PptaOptions {
            iterations: cfg.k,
            min_cos: cfg.min_cos,
            ..PptaOptions::default()
        },
    };
    log::info!(
        "{} units, {} time points, link {}",
        ds.n_units(),
        ds.n_times(),
        spec.link.name()
    );
    let analysis = estimate_methods(&ds, &cfg.methods, &est_cfg, cfg.seed).context("propensity")?;

    let mut estimates: Vec<EffectEstimate> = Vec::new();
    let mut failures = Vec::new();
    for r in &analysis.results {
        match &r.result {
            Ok(e) => estimates.push(*e),
            Err(e) => failures.push((r.method, e.to_string())),
        }
    }

    let mut bootstrap_failures = Vec::new();
    if cfg.b >= 2 && !estimates.is_empty() {
        let ok: Vec<Method> = estimates.iter().map(|e| e.method).collect();
        log::info!("bootstrap with B = {}", cfg.b);
        for (method, res) in bootstrap_effects(&ds, &ok, &est_cfg, cfg.b, cfg.seed) {
            let est = estimates
                .iter_mut()
                .find(|e| e.method == method)
                .expect("estimated method");
            match res {
                Ok(boot) => {
                    bootstrap_failures.push((method, boot.failures));
                    *est = est.with_se(boot.se);
                    if cfg.percentile {
                        est.ci95 = Some(boot.percentile_interval());
                    }
                }
                Err(e) => failures.push((method, format!("bootstrap: {e}"))),
            }
        }
    }

    std::fs::create_dir_all(&cfg.out)?;
    let out = &cfg.out;
    let record = EstimatesFile {
        n_units: ds.n_units(),
        n_times: ds.n_times(),
        k: cfg.k,
        b: cfg.b,
        seed: cfg.seed,
        interval: if cfg.percentile {
            "percentile"
        } else {
            "normal"
        },
        estimates: estimates.iter().map(|&e| e.into()).collect(),
        failures: failures.clone(),
        bootstrap_failures,
    };
    std::fs::write(
        out.join("estimates.json"),
        serde_json::to_string_pretty(&record)?,
    )?;
    write_effect_table(&estimates, File::create(out.join("effects.csv"))?)?;

    let ids = ds.ids();
    let mut columns = Vec::new();
    for ws in &analysis.weights {
        let label = ws.scheme.name();
        ws.write_csv(
            ids,
            File::create(out.join(format!("weights_{}.csv", label.to_lowercase())))?,
        )?;
        columns.push(WeightColumn::new(label, &ws.values));
    }
    if let Some(run) = &analysis.ppta {
        columns.push(WeightColumn::new("PPTA", &run.marginal_inclusion));
        run.write_inclusion_csv(ids, File::create(out.join("inclusion.csv"))?)?;
        run.write_deltas_csv(File::create(out.join("ppta_deltas.csv"))?)?;
        if run.insufficient_overlap {
            log::warn!(
                "PPTA skipped {} of {} iterations: insufficient overlap",
                run.skipped,
                run.n_iterations()
            );
        }
    }
    if !columns.is_empty() {
        write_weight_table(&columns, File::create(out.join("weight_summary.csv"))?)?;
    }

    for e in &estimates {
        println!(
            "{:<5} {}",
            e.method.name(),
            e.formatted(if spec.link == Link::Log { 2 } else { 3 })
        );
    }
    if !failures.is_empty() {
        for (m, msg) in &failures {
            eprintln!("{m} failed: {msg}");
        }
        anyhow::bail!("{} of {} methods failed", failures.len(), cfg.methods.len());
    }
    Ok(())
}
