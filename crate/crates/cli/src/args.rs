use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "chaindid", version, about = "Chained difference-in-differences for rotating and unbalanced panels")]
pub struct Cli {
    /// Worker threads for bootstrap and Monte Carlo; results do not depend on it
    #[arg(long, global = true, env = "CHAINDID_THREADS")]
    pub threads: Option<usize>,
    /// On failure print {"schema_version", "error": {code, message}} to stdout
    #[arg(long, global = true)]
    pub error_json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Check a panel and print the validation report; exit 1 if it is unusable
    Validate(ValidateArgs),
    /// ATT(g,t) with simultaneous bands, an event study and a pre-trend test
    Estimate(EstimateArgs),
    /// Summary parameters by cohort, event time and calendar period, with bands
    Aggregate(AggregateArgs),
    /// Draw one panel from a simulation design
    Simulate(SimulateArgs),
    /// Replicate a simulation design; mean and sd per estimator and event time
    Montecarlo(MonteCarloArgs),
}

#[derive(Args, Debug)]
pub struct InputArgs {
    /// Long-format CSV: unit,period,y,cohort[,x1..][,z1..][,sampled]; cohort 0 = never treated
    pub input: PathBuf,
    /// JSON mapping of nonstandard column names (unit, period, outcome, cohort, covariates, sampling_covariates, sampled)
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Treatment-model covariates, comma-separated; overrides the schema ("" for none)
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Write the report here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodArg {
    Chained,
    ChainedGmm,
    CrossSection,
    Long,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlArg {
    /// Never-treated units
    Never,
    /// Units not yet treated at the evaluation period
    Notyet,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkArg {
    Logit,
    Probit,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttritionArg {
    None,
    /// Pair sampling depends on covariates and group
    MarX,
    /// Later-period sampling may depend on the earlier outcome
    Smar,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinksArg {
    /// One-period differences only
    Minimal,
    /// Every observed k-period difference
    All,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightingArg {
    Optimal,
    Identity,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShareBasisArg {
    /// Units with at least two observations
    Panel,
    /// Every unit with an observation
    ObservedUnits,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t = MethodArg::Chained)]
    pub method: MethodArg,
    #[arg(long, value_enum, default_value_t = ControlArg::Never)]
    pub control: ControlArg,
    /// Link of the treatment and sampling models
    #[arg(long, value_enum, default_value_t = LinkArg::Logit)]
    pub link: LinkArg,
    #[arg(long, value_enum, default_value_t = AttritionArg::None)]
    pub attrition: AttritionArg,
    /// Sampling-model features as column[:log1p|:lag], comma-separated;
    /// defaults to every covariate and sampling covariate
    #[arg(long, value_delimiter = ',')]
    pub features: Option<Vec<String>>,
    /// Differences stacked by chained-gmm [default: all]
    #[arg(long, value_enum)]
    pub links: Option<LinksArg>,
    /// Weight matrix for chained-gmm [default: optimal]
    #[arg(long, value_enum)]
    pub weighting: Option<WeightingArg>,
    /// Report a table with non-identified cells instead of failing with exit 1
    #[arg(long)]
    pub allow_partial: bool,
}

#[derive(Args, Debug)]
pub struct InferenceArgs {
    /// Multiplier-bootstrap draws; 0 skips bands, otherwise at least 200
    #[arg(long, default_value_t = 1000)]
    pub bootstrap: usize,
    /// One minus the simultaneous coverage of the bands
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ShareArgs {
    /// CSV with columns cohort,probability (calendar labels) fixing the cohort shares
    #[arg(long)]
    pub shares: Option<PathBuf>,
    /// Units counted when estimating cohort shares
    #[arg(long, value_enum, default_value_t = ShareBasisArg::Panel)]
    pub population_shares: ShareBasisArg,
    /// First exposure length in the overall dynamic average
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u8).range(0..=1))]
    pub dynamic_start: u8,
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub inference: InferenceArgs,
    #[command(flatten)]
    pub shares: ShareArgs,
    /// JSON report (default: stdout)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// ATT(g,t) table as CSV
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Event study as CSV with event_time,estimate,lower,upper
    #[arg(long)]
    pub event_study: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AggregateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub inference: InferenceArgs,
    #[command(flatten)]
    pub shares: ShareArgs,
    /// JSON report (default: stdout)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Summary table as CSV
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DesignArgs {
    /// Built-in design: 1 baseline, 2 selection on heterogeneity, 3 and 4 stratified
    #[arg(long, required_unless_present = "config", conflicts_with = "config", value_parser = clap::value_parser!(u8).range(1..=4))]
    pub dgp: Option<u8>,
    /// Simulation config as JSON; missing fields take the baseline values
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub design: DesignArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Panel CSV (default: stdout)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON with the config, seed, fingerprint and true effects by event time
    #[arg(long)]
    pub meta: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum FormatArg {
    Csv,
    Json,
}

#[derive(Args, Debug)]
pub struct MonteCarloArgs {
    #[command(flatten)]
    pub design: DesignArgs,
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated subset of chained, chained-gmm-identity, chained-gmm-optimal,
    /// cross-section, long, chained-mar-x [default: the design's usual columns]
    #[arg(long, value_delimiter = ',')]
    pub estimators: Option<Vec<String>>,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    pub format: FormatArg,
    /// Report file (default: stdout)
    #[arg(long)]
    pub out: Option<PathBuf>,
}
