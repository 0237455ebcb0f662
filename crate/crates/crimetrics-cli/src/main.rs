//! Command-line front end: panel ingestion, street-level concentration
//! simulation, the estimation families, and manifest replay.
//!
//! Exit codes: 2 for schema/spec errors (including unknown flags and
//! families, via clap), 3 when unresolved geography exceeds the threshold,
//! 4 when a spec and panel cannot be combined, 1 for everything else.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "crimetrics", version, about = "Crime panel pipeline: ingest, simulate, estimate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the district-period analysis panel from raw inputs.
    Ingest(IngestArgs),
    /// Simulate street-level crime concentration per district-year cell.
    Mcc(MccArgs),
    /// Run one estimation family against a panel and a JSON spec.
    Estimate(EstimateArgs),
    /// Re-run a recorded manifest and verify byte-identical outputs.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Directory of incident CSVs; every *.csv inside is read.
    #[arg(long)]
    crime: PathBuf,
    /// LSOA-to-district lookup CSV.
    #[arg(long)]
    lookup: PathBuf,
    /// District-month covariates CSV.
    #[arg(long)]
    covariates: PathBuf,
    /// District austerity exposure CSV.
    #[arg(long)]
    austerity: PathBuf,
    /// Output panel CSV path; the run manifest lands beside it.
    #[arg(long)]
    out: PathBuf,
    /// Keep monthly cells instead of aggregating to fiscal years.
    #[arg(long)]
    monthly: bool,
    /// Restrict the panel to districts flagged urban in the lookup.
    #[arg(long)]
    urban_only: bool,
    /// Weight rows by base-year population instead of period population.
    #[arg(long)]
    base_year_weights: bool,
}

#[derive(Args)]
struct MccArgs {
    /// Analysis panel CSV; its districts define the sample.
    #[arg(long)]
    panel: PathBuf,
    /// Street-level counts CSV:
    /// district_id,fiscal_year,street_id,total,property,violent,other.
    #[arg(long)]
    streets: PathBuf,
    /// Optional explicit street-universe CSV (district_id,streets);
    /// default is the number of distinct streets observed per district.
    #[arg(long)]
    universe: Option<PathBuf>,
    /// Concentration share threshold.
    #[arg(long, default_value_t = 0.25)]
    k: f64,
    /// Simulation runs per cell.
    #[arg(long, default_value_t = 10_000)]
    runs: u64,
    /// Master seed; omitted, one is drawn and recorded in the manifest.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    /// Analysis panel CSV (not needed by the becker family).
    #[arg(long)]
    panel: Option<PathBuf>,
    /// JSON estimation spec.
    #[arg(long)]
    spec: PathBuf,
    /// Estimation family.
    #[arg(long, value_enum)]
    family: Family,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    /// Manifest JSON from a previous run.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for the replayed outputs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum)]
enum Family {
    /// Pooled continuous-treatment DD on log crime rates.
    Dd,
    /// Above-median binary treatment variant.
    Binary,
    /// Per-post-year dynamic DD.
    Dynamic,
    /// Pre-policy placebo DD.
    Placebo,
    /// Quintile DDD cut on concentration change.
    DddMcc,
    /// Quintile DDD cut on policing.
    DddPolice,
    /// Fractional-post cohort DD on reoffending outcomes.
    Recidivism,
    /// Pooled DD over supplied labor-market outcomes.
    Labor,
    /// Crime change per deprivation percentile.
    Neighborhood,
    /// Residualized local-linear dose response.
    Nonparam,
    /// Crime-supply equilibrium calibration.
    Becker,
}

impl Family {
    fn name(self) -> &'static str {
        match self {
            Family::Dd => "dd",
            Family::Binary => "binary",
            Family::Dynamic => "dynamic",
            Family::Placebo => "placebo",
            Family::DddMcc => "ddd-mcc",
            Family::DddPolice => "ddd-police",
            Family::Recidivism => "recidivism",
            Family::Labor => "labor",
            Family::Neighborhood => "neighborhood",
            Family::Nonparam => "nonparam",
            Family::Becker => "becker",
        }
    }

    fn from_name(name: &str) -> Option<Family> {
        [
            Family::Dd,
            Family::Binary,
            Family::Dynamic,
            Family::Placebo,
            Family::DddMcc,
            Family::DddPolice,
            Family::Recidivism,
            Family::Labor,
            Family::Neighborhood,
            Family::Nonparam,
            Family::Becker,
        ]
        .into_iter()
        .find(|f| f.name() == name)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = commands::init_threads().and_then(|()| match cli.command {
        Command::Ingest(args) => commands::ingest(args),
        Command::Mcc(args) => commands::mcc(args),
        Command::Estimate(args) => commands::estimate(args),
        Command::Replay(args) => commands::replay(args),
    });
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
