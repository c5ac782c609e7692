//! `analyze` settings: command-line flags layered over an optional JSON file.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use ppta_core::{Link, Method};

/// Invalid or incomplete configuration; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Args, Debug, Default)]
pub struct AnalyzeArgs {
    /// JSON file with any of the settings below; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub pw: Option<usize>,
    #[arg(long)]
    pub px: Option<usize>,
    #[arg(long = "d")]
    pub d: Option<usize>,
    /// Comma-separated subset of IPW,SW,OW,PPTA.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    /// identity or log; defaults from the outcome type.
    #[arg(long)]
    pub link: Option<Link>,
    /// PPTA iterations.
    #[arg(long)]
    pub k: Option<usize>,
    /// Bootstrap resamples; 0 reports point estimates only.
    #[arg(long)]
    pub b: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub min_cos: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report percentile instead of normal bootstrap intervals.
    #[arg(long)]
    pub percentile: bool,
}

/// Settings as they may appear in the JSON file.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisFile {
    pub input: Option<PathBuf>,
    pub pw: Option<usize>,
    pub px: Option<usize>,
    pub d: Option<usize>,
    pub methods: Option<Vec<Method>>,
    pub link: Option<Link>,
    pub k: Option<usize>,
    pub b: Option<usize>,
    pub seed: Option<u64>,
    pub min_cos: Option<usize>,
    pub out: Option<PathBuf>,
    pub percentile: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    pub input: PathBuf,
    pub pw: usize,
    pub px: usize,
    pub d: usize,
    pub methods: Vec<Method>,
    pub link: Option<Link>,
    pub k: usize,
    pub b: usize,
    pub seed: u64,
    pub min_cos: usize,
    pub out: PathBuf,
    pub percentile: bool,
}

impl AnalysisFile {
    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
    }
}

impl AnalysisConfig {
    pub fn resolve(args: &AnalyzeArgs, file: AnalysisFile) -> anyhow::Result<Self> {
        fn need<T>(v: Option<T>, name: &str) -> anyhow::Result<T> {
            v.ok_or_else(|| usage(format!("missing required setting --{name}")))
        }
        let methods = args
            .methods
            .clone()
            .or(file.methods)
            .unwrap_or_else(|| Method::ESTIMATORS.to_vec());
        if methods.is_empty() {
            return Err(usage("method list is empty"));
        }
        let cfg = AnalysisConfig {
            input: need(args.input.clone().or(file.input), "input")?,
            pw: need(args.pw.or(file.pw), "pw")?,
            px: need(args.px.or(file.px), "px")?,
            d: need(args.d.or(file.d), "d")?,
            methods,
            link: args.link.or(file.link),
            k: args.k.or(file.k).unwrap_or(1500),
            b: args.b.or(file.b).unwrap_or(100),
            seed: need(args.seed.or(file.seed), "seed")?,
            min_cos: args.min_cos.or(file.min_cos).unwrap_or(10),
            out: need(args.out.clone().or(file.out), "out")?,
            percentile: args.percentile || file.percentile.unwrap_or(false),
        };
        if cfg.d == 0 {
            return Err(usage("--d must be at least 1"));
        }
        if cfg.b == 1 {
            return Err(usage("--b must be 0 or at least 2"));
        }
        Ok(cfg)
    }
}
