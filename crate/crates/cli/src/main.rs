use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod analyze;
mod config;

use ppta_core::diagnostics::{
    export_weight_comparison, positivity_summary, spearman, write_positivity_csv,
};
use ppta_core::harness::{replicate, write_outputs, StudyConfig};
use ppta_core::panel::{read_csv_path, PanelDims};
use ppta_core::propensity::{fit_sequential, FitMode};
use ppta_core::simgen::{generate, EffectMode, SimConfig};
use ppta_core::PsOptions;

#[derive(Parser, Debug)]
#[command(
    name = "ppta",
    version,
    about = "Marginal structural models with overlap weighting and PPTA"
)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a simulated panel with side files.
    Simulate(SimulateArgs),
    /// Estimate effects on a panel CSV.
    Analyze(config::AnalyzeArgs),
    /// Run a replication study and compare with published tables.
    Replicate(ReplicateArgs),
    /// Export weight diagnostics for a panel CSV.
    Diagnose(DiagnoseArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 5000)]
    n: usize,
    #[arg(long = "d", default_value_t = 3)]
    d: usize,
    #[arg(long, default_value_t = 3)]
    pw: usize,
    #[arg(long, default_value_t = 3)]
    px: usize,
    #[arg(long, default_value = "homogeneous")]
    mode: EffectMode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReplicateArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value = "homogeneous")]
    mode: EffectMode,
    /// Time points; repeat or comma-separate for several studies.
    #[arg(long = "d", value_delimiter = ',', default_value = "3")]
    d: Vec<usize>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    b: Option<usize>,
    /// Published scale: R = 250, K = 1500.
    #[arg(long)]
    full: bool,
    #[arg(long)]
    min_cos: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    n_oracle: Option<usize>,
    /// Skip PPTA inside the bootstrap.
    #[arg(long)]
    no_ppta_bootstrap: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    pw: usize,
    #[arg(long)]
    px: usize,
    #[arg(long = "d")]
    d: usize,
    /// `dgcop.csv` from `simulate`, for per-unit DGCOP counts.
    #[arg(long)]
    dgcop: Option<PathBuf>,
    /// Scores outside [threshold, 1 - threshold] count as extreme.
    #[arg(long, default_value_t = 0.01)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Analyze(a) => analyze::run(a),
        Command::Replicate(a) => run_replicate(a),
        Command::Diagnose(a) => diagnose(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<config::UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn simulate(a: SimulateArgs) -> anyhow::Result<()> {
    let cfg = SimConfig {
        n: a.n,
        d: a.d,
        p_w: a.pw,
        p_x: a.px,
        mode: a.mode,
        seed: a.seed,
        ..SimConfig::default()
    };
    let sim = generate(&cfg)?;
    std::fs::create_dir_all(&a.out)?;
    sim.panel.write_csv_path(a.out.join("panel.csv"))?;
    sim.write_e_true_csv(std::fs::File::create(a.out.join("e_true.csv"))?)?;
    if sim.dgcop.is_some() {
        sim.write_dgcop_csv(std::fs::File::create(a.out.join("dgcop.csv"))?)?;
    }
    std::fs::write(
        a.out.join("sim_config.json"),
        serde_json::to_string_pretty(&cfg)?,
    )?;
    let rates: Vec<String> = sim
        .exposure_rates()
        .iter()
        .map(|r| format!("{r:.3}"))
        .collect();
    println!("units: {}", sim.panel.n_units());
    println!("mean exposure by time: {}", rates.join(" "));
    if let Some(share) = sim.dgcop_share() {
        println!("DGCOP share: {share:.3}");
    }
    Ok(())
}

fn run_replicate(a: ReplicateArgs) -> anyhow::Result<()> {
    let mut base = StudyConfig {
        mode: a.mode,
        seed: a.seed,
        ..StudyConfig::default()
    };
    if a.full {
        base = base.full_scale();
    }
    base.r = a.r.unwrap_or(base.r);
    base.n = a.n.unwrap_or(base.n);
    base.k = a.k.unwrap_or(base.k);
    base.b = a.b.unwrap_or(base.b);
    base.min_cos = a.min_cos.unwrap_or(base.min_cos);
    base.burn_in = a.burn_in.unwrap_or(base.burn_in);
    base.n_oracle = a.n_oracle.unwrap_or(base.n_oracle);
    base.bootstrap_ppta = !a.no_ppta_bootstrap;
    let mut reports = Vec::new();
    for &d in &a.d {
        let study = StudyConfig { d, ..base };
        eprintln!(
            "replicating {:?} D={d}: R={} n={} K={} B={}",
            study.mode, study.r, study.n, study.k, study.b
        );
        reports.push(replicate(&study)?);
    }
    let cmp = write_outputs(&reports, &a.out)?;
    for rep in &reports {
        println!(
            "D={} completed {}/{} (ATE {:.3}, ATO {:.3})",
            rep.study.d, rep.completed, rep.study.r, rep.truth.ate, rep.truth.ato
        );
        for c in &rep.cells {
            let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
            println!(
                "  {:<5} bias {:+.3}  emp_se {:.3}  boot_se {}  coverage {}",
                c.method.name(),
                c.bias,
                c.emp_sd,
                opt(c.boot_se),
                opt(c.coverage)
            );
        }
        println!(
            "  COS size {:.1} ({:.1}), ever used {:.1}%",
            rep.cos.size_mean,
            rep.cos.size_sd,
            100.0 * rep.cos.ever_used_mean
        );
    }
    let scored: Vec<_> = cmp.iter().filter(|c| !c.missing).collect();
    let passed = scored.iter().filter(|c| c.pass == Some(true)).count();
    println!(
        "published cells compared: {}, within tolerance: {passed}",
        scored.len()
    );
    Ok(())
}

/// Per-unit count of mixed-bin time points from a `dgcop.csv` side file.
fn read_dgcop_counts(path: &std::path::Path, d: usize, n: usize) -> anyhow::Result<Vec<u32>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
    let mut counts = Vec::with_capacity(n);
    for (line_no, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        anyhow::ensure!(
            fields.len() == d + 2,
            "{}: line {} has {} fields, expected {}",
            path.display(),
            line_no + 1,
            fields.len(),
            d + 2
        );
        let mut c = 0;
        for f in &fields[1..=d] {
            c += f.trim().parse::<u32>()?;
        }
        counts.push(c);
    }
    anyhow::ensure!(
        counts.len() == n,
        "{} has {} units, panel has {n}",
        path.display(),
        counts.len()
    );
    Ok(counts)
}

fn diagnose(a: DiagnoseArgs) -> anyhow::Result<()> {
    let dims = PanelDims {
        n_baseline: a.pw,
        n_timevarying: a.px,
        n_times: a.d,
    };
    let ds = read_csv_path(&a.input, dims, None)?;
    let ps = fit_sequential(&ds, FitMode::Mle, &PsOptions::default())?;
    let e = ps.mle_matrix();
    let counts = a
        .dgcop
        .as_deref()
        .map(|p| read_dgcop_counts(p, a.d, ds.n_units()))
        .transpose()?;
    std::fs::create_dir_all(&a.out)?;
    let rows = export_weight_comparison(
        &ds,
        &e,
        counts.as_deref(),
        std::fs::File::create(a.out.join("weight_comparison.csv"))?,
    )?;
    let positivity = positivity_summary(&e, a.threshold);
    write_positivity_csv(
        &positivity,
        std::fs::File::create(a.out.join("positivity.csv"))?,
    )?;
    let ow: Vec<f64> = rows.iter().map(|r| r.ow).collect();
    let inv_ipw: Vec<f64> = rows.iter().map(|r| (-r.log_ipw).exp()).collect();
    match spearman(&ow, &inv_ipw) {
        Some(rho) => println!("Spearman(OW, 1/IPW): {rho:.3}"),
        None => println!("Spearman(OW, 1/IPW): undefined (constant weights)"),
    }
    for p in &positivity {
        println!(
            "time {}: PS range [{:.4}, {:.4}], {} extreme",
            p.time + 1,
            p.min,
            p.max,
            p.n_extreme
        );
    }
    Ok(())
}
