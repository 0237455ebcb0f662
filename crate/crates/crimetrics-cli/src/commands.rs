//! Subcommand implementations. Each run_*_with function takes a fully
//! resolved config plus an output directory, so replay can re-execute a
//! recorded manifest through the exact same code path.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crimetrics::becker::BeckerParams;
use crimetrics::concentration::{
    marginal_concentration, CellCategory, ConcentrationRecord, StreetCountVector,
};
use crimetrics::estimators::{
    adjusted_imd, binary_effect_percent, build_mcc_change_quintiles, build_police_quintiles,
    concentration_frame, crime_rate_frame, district_context_from_panel, effect_summary,
    neighborhood_change_profile, recidivism_frame, run_battery, run_binary_dd, run_dd,
    run_ddd_quintiles, run_dynamic_dd, run_placebo_dd, run_recidivism_dd, standard_controls,
    value_frame, CountSelector, DdFit, DddFit, NeighborhoodOutcome, OutcomeScale, PostKind,
    QuintileAssignment, QuintileBasis, RecidivismOutcome, SpecConfig, TreatmentKind,
};
use crimetrics::ingest::{
    aggregate_district_period, assemble_panel, parse_austerity_csv, parse_covariates_csv,
    parse_crime_csv, parse_imd_csv, parse_recidivism_csv, CrimeCsvSchema, DistrictPanel,
    GeoLookup, ImdScores, NeighborhoodYear, PanelConfig, PeriodKind, WeightSource,
};
use crimetrics::manifest::{read_manifest, verify_digests, ManifestWriter};
use crimetrics::nonparam::{fwl_residualize, local_linear_fit, LocalLinearConfig};
use crimetrics::seeds;
use crimetrics::tables::{
    becker_report_csv, coefficient_table_csv, concentration_csv, concentration_from_csv,
    dd_table_rows, ddd_table_rows, dynamic_plot_csv, local_linear_plot_csv, metrics_csv,
    neighborhood_profile_csv, panel_from_csv, panel_to_csv, TableRow,
};
use crimetrics::Error;

use crate::{EstimateArgs, Family, IngestArgs, MccArgs, ReplayArgs};

pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }
}

/// Malformed input or spec content.
fn schema(e: impl Display) -> CliError {
    CliError::new(2, e.to_string())
}

/// The spec and the data cannot be combined.
fn mismatch(e: impl Display) -> CliError {
    CliError::new(4, e.to_string())
}

fn generic(e: impl Display) -> CliError {
    CliError::new(1, e.to_string())
}

/// Configures the global worker pool. CRIMETRICS_THREADS is the only
/// environment variable the tool reads; results never depend on it.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("CRIMETRICS_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| {
            CliError::new(
                2,
                format!("CRIMETRICS_THREADS must be a positive integer, got {raw:?}"),
            )
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(generic)
}

// ---------------------------------------------------------------------------
// ingest

#[derive(Clone, Serialize, Deserialize)]
pub struct IngestConfig {
    pub crime_dir: PathBuf,
    pub lookup: PathBuf,
    pub covariates: PathBuf,
    pub austerity: PathBuf,
    pub panel_name: String,
    pub monthly: bool,
    pub urban_only: bool,
    pub base_year_weights: bool,
    /// Unresolved-geography share above which the run aborts.
    pub unresolved_threshold: f64,
}

pub fn ingest(args: IngestArgs) -> Result<(), CliError> {
    let Some(name) = args.out.file_name().and_then(|n| n.to_str()) else {
        return Err(CliError::new(
            2,
            format!("--out {} has no file name", args.out.display()),
        ));
    };
    let out_dir = match args.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let config = IngestConfig {
        crime_dir: args.crime,
        lookup: args.lookup,
        covariates: args.covariates,
        austerity: args.austerity,
        panel_name: name.to_owned(),
        monthly: args.monthly,
        urban_only: args.urban_only,
        base_year_weights: args.base_year_weights,
        unresolved_threshold: 0.01,
    };
    run_ingest_with(&config, &out_dir)
}

pub fn run_ingest_with(config: &IngestConfig, out_dir: &Path) -> Result<(), CliError> {
    let snapshot = serde_json::to_value(config).map_err(generic)?;
    let mut writer = ManifestWriter::new("ingest", snapshot, 0, out_dir).map_err(generic)?;

    let entries = std::fs::read_dir(&config.crime_dir)
        .map_err(|e| generic(format!("{}: {e}", config.crime_dir.display())))?;
    let mut crime_files: Vec<PathBuf> = entries
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "csv"))
        .collect();
    crime_files.sort();
    if crime_files.is_empty() {
        return Err(CliError::new(
            2,
            format!("no *.csv files in {}", config.crime_dir.display()),
        ));
    }

    let csv_schema = CrimeCsvSchema::default();
    let mut records = Vec::new();
    let mut rows_read = 0usize;
    let mut rejected = 0usize;
    for file in &crime_files {
        writer.record_input(file).map_err(generic)?;
        let (mut parsed, report) = parse_crime_csv(file, &csv_schema).map_err(schema)?;
        rows_read += report.rows_read;
        rejected += report.rejected();
        records.append(&mut parsed);
    }
    writer.record_input(&config.lookup).map_err(generic)?;
    writer.record_input(&config.covariates).map_err(generic)?;
    writer.record_input(&config.austerity).map_err(generic)?;

    let lookup = GeoLookup::from_csv(&config.lookup).map_err(schema)?;
    let kind = if config.monthly {
        PeriodKind::Month
    } else {
        PeriodKind::FiscalYear
    };
    let (counts, resolution) = aggregate_district_period(&records, &lookup, kind);
    let share = resolution.unresolved_share();
    if share > config.unresolved_threshold {
        let mut worst: Vec<(&String, &usize)> = resolution.unresolved_lsoas.iter().collect();
        worst.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        let preview: Vec<String> = worst
            .iter()
            .take(5)
            .map(|(lsoa, n)| format!("{lsoa} ({n} records)"))
            .collect();
        return Err(CliError::new(
            3,
            format!(
                "{:.2}% of records resolve to no district (threshold {:.2}%); worst LSOAs: {}",
                100.0 * share,
                100.0 * config.unresolved_threshold,
                preview.join(", ")
            ),
        ));
    }

    let covariates = parse_covariates_csv(&config.covariates).map_err(schema)?;
    let austerity = parse_austerity_csv(&config.austerity).map_err(schema)?;
    let panel_config = PanelConfig {
        weight: if config.base_year_weights {
            WeightSource::BaseYearPopulation
        } else {
            WeightSource::PeriodPopulation
        },
        urban_only: config.urban_only,
    };
    let (panel, diagnostics) =
        assemble_panel(&counts, &covariates, &austerity, &lookup, &panel_config).map_err(schema)?;

    let bytes = panel_to_csv(&panel).map_err(generic)?;
    let panel_path = writer.write_output(&config.panel_name, &bytes).map_err(generic)?;
    let stem = Path::new(&config.panel_name)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(config.panel_name.as_str());
    let manifest_path = writer
        .finish(&format!("{stem}_manifest.json"))
        .map_err(generic)?;

    println!(
        "panel: {} rows, {} districts -> {}",
        panel.rows.len(),
        panel.district_ids().len(),
        panel_path.display()
    );
    println!(
        "records: {rows_read} read, {rejected} rejected, {:.4}% unresolved; dropped {} non-urban cells, {} districts missing austerity; {} zero-crime rows kept",
        100.0 * share,
        diagnostics.non_urban_cells,
        diagnostics.missing_austerity_districts.len(),
        diagnostics.zero_total_rows
    );
    println!("manifest: {}", manifest_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// mcc

#[derive(Clone, Serialize, Deserialize)]
pub struct MccConfig {
    pub panel: PathBuf,
    pub streets: PathBuf,
    pub universe: Option<PathBuf>,
    pub k: f64,
    pub runs: u64,
    pub seed: u64,
}

pub fn mcc(args: MccArgs) -> Result<(), CliError> {
    let config = MccConfig {
        panel: args.panel,
        streets: args.streets,
        universe: args.universe,
        k: args.k,
        runs: args.runs,
        seed: args.seed.unwrap_or_else(rand::random),
    };
    run_mcc_with(&config, &args.out)
}

struct StreetFile {
    /// (district, fiscal year) -> per-street [total, property, violent, other].
    cells: BTreeMap<(String, i32), Vec<[u64; 4]>>,
    /// Distinct streets observed per district across all years.
    observed: BTreeMap<String, BTreeSet<String>>,
}

fn read_street_cells(path: &Path) -> Result<StreetFile, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(schema)?;
    let headers = reader.headers().map_err(schema)?.clone();
    let col = |name: &str| -> Result<usize, CliError> {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            CliError::new(
                2,
                format!("{}: missing required column {name:?}", path.display()),
            )
        })
    };
    let c_district = col("district_id")?;
    let c_year = col("fiscal_year")?;
    let c_street = col("street_id")?;
    let c_counts = [col("total")?, col("property")?, col("violent")?, col("other")?];

    let mut cells: BTreeMap<(String, i32), Vec<[u64; 4]>> = BTreeMap::new();
    let mut observed: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut seen: HashSet<(String, i32, String)> = HashSet::new();
    for (idx, row) in reader.records().enumerate() {
        let line = idx + 2;
        let row = row.map_err(|e| CliError::new(2, format!("{}:{line}: {e}", path.display())))?;
        let field = |i: usize| row.get(i).unwrap_or("").trim();
        let bad =
            |msg: String| CliError::new(2, format!("{}:{line}: {msg}", path.display()));
        let district = field(c_district).to_owned();
        let year: i32 = field(c_year)
            .parse()
            .map_err(|_| bad(format!("bad fiscal_year {:?}", field(c_year))))?;
        let street = field(c_street).to_owned();
        let mut counts = [0u64; 4];
        for (slot, &i) in c_counts.iter().enumerate() {
            counts[slot] = field(i)
                .parse()
                .map_err(|_| bad(format!("bad count {:?}", field(i))))?;
        }
        if counts[1] + counts[2] + counts[3] != counts[0] {
            return Err(bad(format!(
                "category counts {}+{}+{} do not sum to total {}",
                counts[1], counts[2], counts[3], counts[0]
            )));
        }
        if !seen.insert((district.clone(), year, street.clone())) {
            return Err(bad(format!(
                "duplicate street {street:?} in district {district:?} fiscal year {year}"
            )));
        }
        observed.entry(district.clone()).or_default().insert(street);
        cells.entry((district, year)).or_default().push(counts);
    }
    if cells.is_empty() {
        return Err(CliError::new(2, format!("{}: no street rows", path.display())));
    }
    Ok(StreetFile { cells, observed })
}

fn read_universe_csv(path: &Path) -> Result<BTreeMap<String, u64>, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(schema)?;
    let headers = reader.headers().map_err(schema)?.clone();
    let col = |name: &str| -> Result<usize, CliError> {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            CliError::new(
                2,
                format!("{}: missing required column {name:?}", path.display()),
            )
        })
    };
    let c_district = col("district_id")?;
    let c_streets = col("streets")?;
    let mut map = BTreeMap::new();
    for (idx, row) in reader.records().enumerate() {
        let line = idx + 2;
        let row = row.map_err(|e| CliError::new(2, format!("{}:{line}: {e}", path.display())))?;
        let district = row.get(c_district).unwrap_or("").trim().to_owned();
        let raw = row.get(c_streets).unwrap_or("").trim();
        let streets: u64 = raw.parse().ok().filter(|&s| s > 0).ok_or_else(|| {
            CliError::new(
                2,
                format!("{}:{line}: street universe must be a positive integer, got {raw:?}", path.display()),
            )
        })?;
        if map.insert(district.clone(), streets).is_some() {
            return Err(CliError::new(
                2,
                format!("{}:{line}: duplicate district {district:?}", path.display()),
            ));
        }
    }
    Ok(map)
}

pub fn run_mcc_with(config: &MccConfig, out_dir: &Path) -> Result<(), CliError> {
    if !(config.k > 0.0 && config.k <= 1.0) {
        return Err(CliError::new(2, format!("--k must be in (0, 1], got {}", config.k)));
    }
    if config.runs == 0 {
        return Err(CliError::new(2, "--runs must be at least 1"));
    }
    let snapshot = serde_json::to_value(config).map_err(generic)?;
    let mut writer = ManifestWriter::new("mcc", snapshot, config.seed, out_dir).map_err(generic)?;
    writer.record_input(&config.panel).map_err(generic)?;
    writer.record_input(&config.streets).map_err(generic)?;
    if let Some(universe) = &config.universe {
        writer.record_input(universe).map_err(generic)?;
    }

    let panel = panel_from_csv(&config.panel).map_err(schema)?;
    let sample = panel.district_ids();
    let street_file = read_street_cells(&config.streets)?;
    let explicit = config.universe.as_deref().map(read_universe_csv).transpose()?;

    let mut universe: BTreeMap<&str, u64> = BTreeMap::new();
    for (district, streets) in &street_file.observed {
        let observed = streets.len() as u64;
        let size = match &explicit {
            Some(map) => {
                let Some(&size) = map.get(district) else {
                    return Err(CliError::new(
                        2,
                        format!("universe file has no entry for district {district:?}"),
                    ));
                };
                if size < observed {
                    return Err(CliError::new(
                        2,
                        format!(
                            "district {district:?} universe {size} is smaller than its {observed} observed streets"
                        ),
                    ));
                }
                size
            }
            None => observed,
        };
        universe.insert(district, size);
    }

    let mut skipped_districts: BTreeSet<&str> = BTreeSet::new();
    let mut empty_cells = 0usize;
    let mut jobs: Vec<(String, i32, CellCategory, Vec<u64>, u64)> = Vec::new();
    for ((district, year), streets) in &street_file.cells {
        if !sample.contains(district) {
            skipped_districts.insert(district);
            continue;
        }
        let size = universe[district.as_str()];
        for (slot, category) in CellCategory::ALL.into_iter().enumerate() {
            let counts: Vec<u64> = streets.iter().map(|c| c[slot]).filter(|&c| c > 0).collect();
            if counts.is_empty() {
                empty_cells += 1;
                continue;
            }
            jobs.push((district.clone(), *year, category, counts, size));
        }
    }
    if jobs.is_empty() {
        return Err(CliError::new(4, "no street cell overlaps the panel's districts"));
    }

    let n_cells = jobs.len();
    let records = jobs
        .into_par_iter()
        .map(|(district, year, category, counts, size)| {
            let vector = StreetCountVector::new(counts, size)?;
            let cell_seed = seeds::cell_seed(config.seed, &district, year, category.as_str());
            let stats = marginal_concentration(&vector, config.k, config.runs, cell_seed)?;
            Ok(ConcentrationRecord {
                district_id: district,
                year,
                category,
                stats,
            })
        })
        .collect::<Result<Vec<_>, Error>>()
        .map_err(schema)?;

    let bytes = concentration_csv(&records).map_err(generic)?;
    let out_path = writer.write_output("concentration.csv", &bytes).map_err(generic)?;
    let manifest_path = writer.finish("mcc_manifest.json").map_err(generic)?;
    println!("concentration: {n_cells} cells -> {}", out_path.display());
    println!(
        "skipped: {empty_cells} empty cells, {} districts outside the panel; master seed {}",
        skipped_districts.len(),
        config.seed
    );
    println!("manifest: {}", manifest_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// estimate

/// Which concentration-change ranking cuts the quintiles.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MccBasis {
    Raw,
    Residualized,
}

#[derive(Clone, Serialize, Deserialize)]
pub struct LaborOutcomeSpec {
    pub label: String,
    pub file: PathBuf,
}

/// JSON estimation spec. Every field is optional; omitted fields take the
/// documented defaults when the spec is resolved, and the resolved spec is
/// what the manifest records.
#[derive(Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateSpec {
    pub plan: Option<SpecConfig>,
    pub outcome: Option<CountSelector>,
    pub controls: Option<Vec<String>>,
    pub mcc_records: Option<PathBuf>,
    pub category: Option<String>,
    pub base_fiscal_year: Option<i32>,
    pub end_fiscal_year: Option<i32>,
    pub mcc_basis: Option<MccBasis>,
    pub police_basis: Option<QuintileBasis>,
    pub cohorts: Option<PathBuf>,
    pub recidivism_outcome: Option<RecidivismOutcome>,
    pub labor_outcomes: Option<Vec<LaborOutcomeSpec>>,
    pub neighborhoods: Option<PathBuf>,
    pub imd: Option<PathBuf>,
    pub pre_years: Option<Vec<i32>>,
    pub post_years: Option<Vec<i32>>,
    pub neighborhood_outcome: Option<NeighborhoodOutcome>,
    pub local_linear: Option<LocalLinearConfig>,
    pub becker: Option<BeckerParams>,
    pub seed: Option<u64>,
}

#[derive(Clone, Serialize, Deserialize)]
pub struct EstimateConfig {
    pub panel: Option<PathBuf>,
    pub spec_file: PathBuf,
    pub family: String,
    pub resolved: EstimateSpec,
}

fn default_plan(family: Family) -> SpecConfig {
    let mut plan = SpecConfig::baseline();
    match family {
        Family::Binary => plan.treatment = TreatmentKind::BinaryAboveMedian,
        Family::Dynamic => {
            plan.post = PostKind::Dynamic {
                post_fiscal_years: vec![2013, 2014, 2015],
            }
        }
        Family::Placebo => {
            plan.post = PostKind::Placebo {
                pre_fiscal_year: 2011,
                post_fiscal_year: 2012,
            }
        }
        Family::Recidivism => {
            plan.post = PostKind::FractionalCohort;
            plan.window = None;
        }
        _ => {}
    }
    plan
}

fn resolve_spec(spec: &mut EstimateSpec, family: Family) {
    let seed = *spec.seed.get_or_insert_with(rand::random);
    spec.plan.get_or_insert_with(|| default_plan(family));
    spec.outcome.get_or_insert(CountSelector::Total);
    spec.controls.get_or_insert_with(standard_controls);
    spec.category.get_or_insert_with(|| "total".to_owned());
    spec.base_fiscal_year.get_or_insert(2012);
    spec.end_fiscal_year.get_or_insert(2015);
    spec.mcc_basis.get_or_insert(MccBasis::Residualized);
    spec.pre_years.get_or_insert_with(|| vec![2011, 2012]);
    spec.post_years.get_or_insert_with(|| vec![2013, 2014, 2015]);
    if family == Family::Nonparam {
        spec.local_linear.get_or_insert_with(|| LocalLinearConfig {
            seed,
            ..LocalLinearConfig::default()
        });
    }
}

pub fn estimate(args: EstimateArgs) -> Result<(), CliError> {
    let raw = std::fs::read(&args.spec)
        .map_err(|e| CliError::new(2, format!("{}: {e}", args.spec.display())))?;
    let mut spec: EstimateSpec = serde_json::from_slice(&raw)
        .map_err(|e| CliError::new(2, format!("{}: {e}", args.spec.display())))?;
    resolve_spec(&mut spec, args.family);
    let config = EstimateConfig {
        panel: args.panel,
        spec_file: args.spec,
        family: args.family.name().to_owned(),
        resolved: spec,
    };
    run_estimate_with(&config, &args.out)
}

fn required<'a, T>(value: &'a Option<T>, what: &str) -> Result<&'a T, CliError> {
    value
        .as_ref()
        .ok_or_else(|| CliError::new(2, format!("the spec must set {what:?} for this family")))
}

fn load_panel(config: &EstimateConfig) -> Result<DistrictPanel, CliError> {
    let Some(path) = &config.panel else {
        return Err(CliError::new(2, "--panel is required for this family"));
    };
    panel_from_csv(path).map_err(schema)
}

fn selector_label(selector: &CountSelector) -> String {
    match selector {
        CountSelector::Total => "total".into(),
        CountSelector::Property => "property".into(),
        CountSelector::Violent => "violent".into(),
        CountSelector::Other => "other".into(),
        CountSelector::Type(t) => t.clone(),
        CountSelector::Types(ts) => ts.join("+"),
    }
}

fn recidivism_label(outcome: RecidivismOutcome) -> &'static str {
    match outcome {
        RecidivismOutcome::Rate => "rate",
        RecidivismOutcome::ReoffencesPerOffender => "reoffences_per_offender",
        RecidivismOutcome::ReoffencesPerReoffender => "reoffences_per_reoffender",
        RecidivismOutcome::IntensityRatio => "intensity_ratio",
    }
}

fn neighborhood_label(outcome: NeighborhoodOutcome) -> &'static str {
    match outcome {
        NeighborhoodOutcome::Total => "total",
        NeighborhoodOutcome::Property => "property",
        NeighborhoodOutcome::Violent => "violent",
    }
}

fn write_estimates(writer: &mut ManifestWriter, rows: &[TableRow]) -> Result<(), CliError> {
    let bytes = coefficient_table_csv(rows).map_err(generic)?;
    let path = writer.write_output("estimates.csv", &bytes).map_err(generic)?;
    println!("estimates: {}", path.display());
    Ok(())
}

fn write_summary(writer: &mut ManifestWriter, metrics: &[(String, f64)]) -> Result<(), CliError> {
    let bytes = metrics_csv(metrics).map_err(generic)?;
    let path = writer.write_output("summary.csv", &bytes).map_err(generic)?;
    println!("summary: {}", path.display());
    Ok(())
}

fn dd_metrics(dd: &DdFit, zero_rows: usize) -> Vec<(String, f64)> {
    vec![
        ("n_obs".into(), dd.fit.n as f64),
        ("n_districts".into(), dd.n_districts as f64),
        ("treatment_sd".into(), dd.treatment_sd),
        ("pre_period_mean".into(), dd.pre_period_mean),
        ("zero_rows_excluded".into(), zero_rows as f64),
    ]
}

fn lead_coefficient(dd: &DdFit) -> Option<f64> {
    let name = dd.treatment_names.first()?;
    dd.treatment_coefficient(name)
}

pub fn run_estimate_with(config: &EstimateConfig, out_dir: &Path) -> Result<(), CliError> {
    let Some(family) = Family::from_name(&config.family) else {
        return Err(CliError::new(2, format!("unknown family {:?}", config.family)));
    };
    let spec = &config.resolved;
    let snapshot = serde_json::to_value(config).map_err(generic)?;
    let master_seed = spec.seed.unwrap_or(0);
    let mut writer =
        ManifestWriter::new("estimate", snapshot, master_seed, out_dir).map_err(generic)?;
    writer.record_input(&config.spec_file).map_err(generic)?;
    if let Some(panel) = &config.panel {
        writer.record_input(panel).map_err(generic)?;
    }

    match family {
        Family::Dd => family_dd(config, spec, &mut writer)?,
        Family::Binary => family_binary(config, spec, &mut writer)?,
        Family::Dynamic => family_dynamic(config, spec, &mut writer)?,
        Family::Placebo => family_placebo(config, spec, &mut writer)?,
        Family::DddMcc => family_ddd_mcc(config, spec, &mut writer)?,
        Family::DddPolice => family_ddd_police(config, spec, &mut writer)?,
        Family::Recidivism => family_recidivism(config, spec, &mut writer)?,
        Family::Labor => family_labor(config, spec, &mut writer)?,
        Family::Neighborhood => family_neighborhood(config, spec, &mut writer)?,
        Family::Nonparam => family_nonparam(config, spec, &mut writer)?,
        Family::Becker => family_becker(spec, &mut writer)?,
    }

    let manifest_path = writer.finish("estimate_manifest.json").map_err(generic)?;
    println!("manifest: {}", manifest_path.display());
    Ok(())
}

/// Panel, crime-rate frame, and zero-row count for the crime outcome
/// families.
fn crime_frame_of(
    config: &EstimateConfig,
    spec: &EstimateSpec,
) -> Result<(DistrictPanel, crimetrics::estimators::PanelFrame, usize, String), CliError> {
    let panel = load_panel(config)?;
    let outcome = required(&spec.outcome, "outcome")?;
    let controls = required(&spec.controls, "controls")?;
    let (frame, zero_rows) = crime_rate_frame(&panel, outcome, controls).map_err(mismatch)?;
    Ok((panel, frame, zero_rows, selector_label(outcome)))
}

fn family_dd(
    config: &EstimateConfig,
    spec: &EstimateSpec,
    writer: &mut ManifestWriter,
) -> Result<(), CliError> {
    let (_, frame, zero_rows, label) = crime_frame_of(config, spec)?;
    let plan = required(&spec.plan, "plan")?;
    let dd = run_dd(&frame, plan).map_err(mismatch)?;
    write_estimates(writer, &dd_table_rows("dd", &label, &dd))?;
    let mut metrics = dd_metrics(&dd, zero_rows);
    if let Some(coef) = lead_coefficient(&dd) {
        let summary =
            effect_summary(coef, dd.treatment_sd, OutcomeScale::LogRate, None).map_err(generic)?;
        metrics.push(("percent_per_sd".into(), summary.percent_per_sd));
    }
    write_summary(writer, &metrics)
}

fn family_binary(
    config: &EstimateConfig,
    spec: &EstimateSpec,
    writer: &mut ManifestWriter,
) -> Result<(), CliError> {
    let (_, frame, zero_rows, label) = crime_frame_of(config, spec)?;
    let plan = required(&spec.plan, "plan")?;
    let dd = run_binary_dd(&frame, plan).map_err(mismatch)?;
    write_estimates(writer, &dd_table_rows("binary", &label, &dd))?;
    let mut metrics = dd_metrics(&dd, zero_rows);
    if let Some(coef) = lead_coefficient(&dd) {
        let percent =
            binary_effect_percent(coef, OutcomeScale::LogRate, None).map_err(generic)?;
        metrics.push(("percent_effect".into(), percent));
    }
    write_summary(writer, &metrics)
}

fn family_dynamic(
    config: &EstimateConfig,
    spec: &EstimateSpec,
    writer: &mut ManifestWriter,
) -> Result<(), CliError> {
    let (_, frame, zero_rows, label) = crime_frame_of(config, spec)?;
    let plan = required(&spec.plan, "plan")?;
    let PostKind::Dynamic { post_fiscal_years } = &plan.post else {
        return Err(CliError::new(2, "the dynamic family needs a dynamic post plan"));
    };
    let dd = run_dynamic_dd(&frame, plan).map_err(mismatch)?;
    let mut years = post_fiscal_years.clone();
    years.sort_unstable();
    years.dedup();
    write_estimates(writer, &dd_table_rows("dynamic", &label, &dd))?;
    let bytes = dynamic_plot_csv(&years, &dd).map_err(generic)?;
    let path = writer.write_output("event_study.csv", &bytes).map_err(generic)?;
    println!("event study: {}", path.display());
    let mut metrics = dd_metrics(&dd, zero_rows);
    if let Some(equality) = &dd.equality {
        metrics.push(("equality_stat".into(), equality.stat));
        metrics.push(("equality_df".into(), equality.df as f64));
        metrics.push(("equality_df_denom".into(), equality.df_denom as f64));
        metrics.push(("equality_p".into(), equality.p_value));
    }
    write_summary(writer, &metrics)
}

fn family_placebo(
    config: &EstimateConfig,
    spec: &EstimateSpec,
    writer: &mut ManifestWriter,
) -> Result<(), CliError> {
    let (_, frame, zero_rows, label) = crime_frame_of(config, spec)?;
    let plan = required(&spec.plan, "plan")?;
    let (dd, audit) = run_placebo_dd(&frame, plan).map_err(mismatch)?;
    write_estimates(writer, &dd_table_rows("placebo", &label, &dd))?;
    let mut metrics = dd_metrics(&dd, zero_rows);
    metrics.push(("max_fiscal_year_used".into(), f64::from(audit.max_fiscal_year_used)));
    metrics.push((
        "first_policy_fiscal_year".into(),
        f64::from(audit.first_policy_fiscal_year),
    ));
    metrics.push(("rows_used".into(), audit.rows_used as f64));
    write_summary(writer, &metrics)
}

fn ddd_metrics(ddd: &DddFit, assignment: &QuintileAssignment, zero_rows: usize) -> Vec<(String, f64)> {
    let mut metrics = vec![
        ("n_obs".into(), ddd.fit.n as f64),
        ("n_districts".into(), ddd.n_districts as f64),
        ("top_bottom_ratio".into(), ddd.top_bottom_ratio),
        ("equality_stat".into(), ddd.equality.stat),
        ("equality_df".into(), ddd.equality.df as f64),
        ("equality_df_denom".into(), ddd.equality.df_denom as f64),
        ("equality_p".into(), ddd.equality.p_value),
        ("zero_rows_excluded".into(), zero_rows as f64),
    ];
    for (q, share) in assignment.weight_shares.iter().enumerate() {
        metrics.push((format!("weight_share_q{}", q + 1), *share));
    }
    metrics
}

fn family_ddd_mcc(
    config: &EstimateConfig,
    spec: &EstimateSpec,
    writer: &mut ManifestWriter,
) -> Result<(), CliError> {
    let records_path = required(&spec.mcc_records, "mcc_records")?;
    writer.record_input(records_path).map_err(generic)?;
    let records = concentration_from_csv(records_path).map_err(schema)?;
    let category: CellCategory = required(&spec.category, "category")?.parse().map_err(schema)?;
    let (panel, frame, zero_rows, label) = crime_frame_of(config, spec)?;
    let controls = required(&spec.controls, "controls")?;
    let plan = required(&spec.plan, "plan")?;
    let conc_frame =
        concentration_frame(&records, &panel, category, controls).map_err(mismatch)?;
    let base = *required(&spec.base_fiscal_year, "base_fiscal_year")?;
    let end = *required(&spec.end_fiscal_year, "end_fiscal_year")?;
    let (raw, residualized) =
        build_mcc_change_quintiles(&conc_frame, base, end).map_err(mismatch)?;
    let assignment = match required(&spec.mcc_basis, "mcc_basis")? {
        MccBasis::Raw => raw,
        MccBasis::Residualized => residualized,
    };
    let ddd = run_ddd_quintiles(&frame, &assignment, plan).map_err(mismatch)?;
    write_estimates(writer, &ddd_table_rows("ddd_mcc", &label, &ddd))?;
    write_summary(writer, &ddd_metrics(&ddd, &assignment, zero_rows))
}

fn family_ddd_police(
    config: &EstimateConfig,
    spec: &EstimateSpec,
    writer: &mut ManifestWriter,
) -> Result<(), CliError> {
    let basis = required(&spec.police_basis, "police_basis")?;
    if !matches!(
        basis,
        QuintileBasis::PoliceLevel { .. } | QuintileBasis::PoliceChange { .. }
    ) {
        return Err(CliError::new(
            2,
            "police_basis must be a police level or change basis",
        ));
    }
    let (panel, frame, zero_rows, label) = crime_frame_of(config, spec)?;
    let plan = required(&spec.plan, "plan")?;
    let assignment = build_police_quintiles(&panel, basis.clone()).map_err(mismatch)?;
    let ddd = run_ddd_quintiles(&frame, &assignment, plan).map_err(mismatch)?;
    write_estimates(writer, &ddd_table_rows("ddd_police", &label, &ddd))?;
    write_summary(writer, &ddd_metrics(&ddd, &assignment, zero_rows))
}

fn family_recidivism(
    config: &EstimateConfig,
    spec: &EstimateSpec,
    writer: &mut ManifestWriter,
) -> Result<(), CliError> {
    let cohorts_path = required(&spec.cohorts, "cohorts")?;
    writer.record_input(cohorts_path).map_err(generic)?;
    let cohorts = parse_recidivism_csv(cohorts_path).map_err(schema)?;
    let panel = load_panel(config)?;
    let controls = required(&spec.controls, "controls")?;
    let plan = required(&spec.plan, "plan")?;
    let (austerity, context) =
        district_context_from_panel(&panel, controls).map_err(mismatch)?;
    let groups: BTreeSet<&str> = cohorts.iter().map(|c| c.group.as_str()).collect();
    let outcomes: Vec<RecidivismOutcome> = match spec.recidivism_outcome {
        Some(outcome) => vec![outcome],
        None => vec![
            RecidivismOutcome::Rate,
            RecidivismOutcome::ReoffencesPerOffender,
            RecidivismOutcome::ReoffencesPerReoffender,
            RecidivismOutcome::IntensityRatio,
        ],
    };
    let mut rows = Vec::new();
    let mut metrics = Vec::new();
    for group in &groups {
        let subset: Vec<_> = cohorts.iter().filter(|c| c.group == *group).cloned().collect();
        for outcome in &outcomes {
            let (frame, skipped) =
                recidivism_frame(&subset, &austerity, &context, controls, *outcome)
                    .map_err(mismatch)?;
            let dd = run_recidivism_dd(&frame, plan).map_err(mismatch)?;
            let label = format!("{group}/{}", recidivism_label(*outcome));
            rows.extend(dd_table_rows("recidivism", &label, &dd));
            metrics.push((format!("n_obs.{label}"), dd.fit.n as f64));
            metrics.push((format!("skipped_undefined.{label}"), skipped as f64));
        }
    }
    write_estimates(writer, &rows)?;
    write_summary(writer, &metrics)
}

fn read_value_csv(path: &Path) -> Result<BTreeMap<(String, String), f64>, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(schema)?;
    let headers = reader.headers().map_err(schema)?.clone();
    let col = |name: &str| -> Result<usize, CliError> {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            CliError::new(
                2,
                format!("{}: missing required column {name:?}", path.display()),
            )
        })
    };
    let c_district = col("district_id")?;
    let c_period = col("period")?;
    let c_value = col("value")?;
    let mut values = BTreeMap::new();
    for (idx, row) in reader.records().enumerate() {
        let line = idx + 2;
        let row = row.map_err(|e| CliError::new(2, format!("{}:{line}: {e}", path.display())))?;
        let district = row.get(c_district).unwrap_or("").trim().to_owned();
        let period = row.get(c_period).unwrap_or("").trim().to_owned();
        let raw = row.get(c_value).unwrap_or("").trim();
        let value: f64 = raw.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| {
            CliError::new(
                2,
                format!("{}:{line}: value must be a finite number, got {raw:?}", path.display()),
            )
        })?;
        if values.insert((district.clone(), period.clone()), value).is_some() {
            return Err(CliError::new(
                2,
                format!("{}:{line}: duplicate cell {district:?} {period:?}", path.display()),
            ));
        }
    }
    if values.is_empty() {
        return Err(CliError::new(2, format!("{}: no value rows", path.display())));
    }
    Ok(values)
}

fn family_labor(
    config: &EstimateConfig,
    spec: &EstimateSpec,
    writer: &mut ManifestWriter,
) -> Result<(), CliError> {
    let entries = required(&spec.labor_outcomes, "labor_outcomes")?;
    if entries.is_empty() {
        return Err(CliError::new(2, "labor_outcomes must name at least one outcome file"));
    }
    let panel = load_panel(config)?;
    let controls = required(&spec.controls, "controls")?;
    let plan = required(&spec.plan, "plan")?;
    let mut frames = Vec::new();
    let mut metrics = Vec::new();
    for entry in entries {
        writer.record_input(&entry.file).map_err(generic)?;
        let values = read_value_csv(&entry.file)?;
        let (frame, skipped) = value_frame(&panel, &values, controls).map_err(mismatch)?;
        metrics.push((format!("rows_missing_value.{}", entry.label), skipped as f64));
        frames.push((entry.label.clone(), frame));
    }
    let fits = run_battery(&frames, plan).map_err(mismatch)?;
    let mut rows = Vec::new();
    for (label, dd) in &fits {
        rows.extend(dd_table_rows("labor", label, dd));
        if let Some(coef) = lead_coefficient(dd) {
            if let Ok(summary) = effect_summary(
                coef,
                dd.treatment_sd,
                OutcomeScale::Level,
                Some(dd.pre_period_mean),
            ) {
                metrics.push((format!("percent_per_sd.{label}"), summary.percent_per_sd));
            }
        }
    }
    write_estimates(writer, &rows)?;
    write_summary(writer, &metrics)
}

struct NeighborhoodCounts {
    lsoa_code: String,
    district_id: String,
    year: i32,
    total: u64,
    property: u64,
    violent: u64,
}

fn read_neighborhood_csv(path: &Path) -> Result<Vec<NeighborhoodCounts>, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(schema)?;
    let headers = reader.headers().map_err(schema)?.clone();
    let col = |name: &str| -> Result<usize, CliError> {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            CliError::new(
                2,
                format!("{}: missing required column {name:?}", path.display()),
            )
        })
    };
    let c_lsoa = col("lsoa_code")?;
    let c_district = col("district_id")?;
    let c_year = col("fiscal_year")?;
    let c_total = col("total")?;
    let c_property = col("property")?;
    let c_violent = col("violent")?;
    let mut rows = Vec::new();
    for (idx, row) in reader.records().enumerate() {
        let line = idx + 2;
        let row = row.map_err(|e| CliError::new(2, format!("{}:{line}: {e}", path.display())))?;
        let field = |i: usize| row.get(i).unwrap_or("").trim();
        let int = |i: usize, name: &str| -> Result<u64, CliError> {
            field(i).parse().map_err(|_| {
                CliError::new(
                    2,
                    format!("{}:{line}: bad {name} {:?}", path.display(), field(i)),
                )
            })
        };
        rows.push(NeighborhoodCounts {
            lsoa_code: field(c_lsoa).to_owned(),
            district_id: field(c_district).to_owned(),
            year: field(c_year).parse().map_err(|_| {
                CliError::new(
                    2,
                    format!("{}:{line}: bad fiscal_year {:?}", path.display(), field(c_year)),
                )
            })?,
            total: int(c_total, "total")?,
            property: int(c_property, "property")?,
            violent: int(c_violent, "violent")?,
        });
    }
    if rows.is_empty() {
        return Err(CliError::new(2, format!("{}: no neighborhood rows", path.display())));
    }
    Ok(rows)
}

fn family_neighborhood(
    config: &EstimateConfig,
    spec: &EstimateSpec,
    writer: &mut ManifestWriter,
) -> Result<(), CliError> {
    let _ = config;
    let counts_path = required(&spec.neighborhoods, "neighborhoods")?;
    let imd_path = required(&spec.imd, "imd")?;
    writer.record_input(counts_path).map_err(generic)?;
    writer.record_input(imd_path).map_err(generic)?;
    let counts = read_neighborhood_csv(counts_path)?;
    let imd_rows = parse_imd_csv(imd_path).map_err(schema)?;

    let mut scores: BTreeMap<String, ImdScores> = BTreeMap::new();
    for row in imd_rows {
        if scores.insert(row.lsoa_code.clone(), row.scores).is_some() {
            return Err(CliError::new(
                2,
                format!("duplicate deprivation record for {:?}", row.lsoa_code),
            ));
        }
    }
    // Percentiles of the adjusted index over the loaded sample, deprived end
    // high; ties break on the code so ranks are reproducible.
    let mut ranked: Vec<(f64, &String)> =
        scores.iter().map(|(lsoa, s)| (adjusted_imd(s), lsoa)).collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let n = ranked.len();
    let mut percentile_of: BTreeMap<String, u8> = BTreeMap::new();
    for (i, (_, lsoa)) in ranked.iter().enumerate() {
        let p = ((100 * (i + 1)).div_ceil(n)).clamp(1, 100) as u8;
        percentile_of.insert((*lsoa).clone(), p);
    }

    let mut rows = Vec::with_capacity(counts.len());
    for c in counts {
        let Some(s) = scores.get(&c.lsoa_code) else {
            return Err(CliError::new(
                2,
                format!("neighborhood {:?} has no deprivation record", c.lsoa_code),
            ));
        };
        rows.push(NeighborhoodYear {
            adjusted_imd_percentile: percentile_of[&c.lsoa_code],
            lsoa_code: c.lsoa_code,
            district_id: c.district_id,
            year: c.year,
            total: c.total,
            property: c.property,
            violent: c.violent,
            imd: *s,
        });
    }

    let pre_years = required(&spec.pre_years, "pre_years")?;
    let post_years = required(&spec.post_years, "post_years")?;
    let outcomes: Vec<NeighborhoodOutcome> = match spec.neighborhood_outcome {
        Some(outcome) => vec![outcome],
        None => vec![
            NeighborhoodOutcome::Total,
            NeighborhoodOutcome::Property,
            NeighborhoodOutcome::Violent,
        ],
    };
    let mut profiles = Vec::new();
    for outcome in &outcomes {
        for residualized in [false, true] {
            let profile =
                neighborhood_change_profile(&rows, pre_years, post_years, *outcome, residualized)
                    .map_err(mismatch)?;
            let variant = if residualized { "residualized" } else { "raw" };
            profiles.push((format!("{}_{variant}", neighborhood_label(*outcome)), profile));
        }
    }
    let bytes = neighborhood_profile_csv(&profiles).map_err(generic)?;
    let path = writer
        .write_output("deprivation_profile.csv", &bytes)
        .map_err(generic)?;
    println!("deprivation profile: {}", path.display());
    let first = &profiles[0].1;
    let metrics = vec![
        ("neighborhoods_used".to_owned(), first.neighborhoods_used as f64),
        (
            "excluded_missing_years".to_owned(),
            first.excluded_missing_years as f64,
        ),
        ("series".to_owned(), profiles.len() as f64),
    ];
    write_summary(writer, &metrics)
}

fn family_nonparam(
    config: &EstimateConfig,
    spec: &EstimateSpec,
    writer: &mut ManifestWriter,
) -> Result<(), CliError> {
    let (_, frame, zero_rows, _) = crime_frame_of(config, spec)?;
    let plan = required(&spec.plan, "plan")?;
    let ll_config = required(&spec.local_linear, "local_linear")?;
    let pair = fwl_residualize(&frame, plan).map_err(mismatch)?;
    let fit = local_linear_fit(&pair, ll_config).map_err(mismatch)?;
    let bytes = local_linear_plot_csv(&fit).map_err(generic)?;
    let path = writer.write_output("dose_response.csv", &bytes).map_err(generic)?;
    println!("dose response: {}", path.display());
    let num: f64 = pair
        .d_res
        .iter()
        .zip(&pair.y_res)
        .zip(&pair.weights)
        .map(|((d, y), w)| w * d * y)
        .sum();
    let den: f64 = pair.d_res.iter().zip(&pair.weights).map(|(d, w)| w * d * d).sum();
    let metrics = vec![
        ("bandwidth".to_owned(), fit.bandwidth),
        ("grid_points".to_owned(), fit.points.len() as f64),
        ("masked_points".to_owned(), fit.masked_points as f64),
        ("bootstrap_resamples".to_owned(), fit.bootstrap_resamples as f64),
        ("fwl_slope".to_owned(), num / den),
        ("zero_rows_excluded".to_owned(), zero_rows as f64),
    ];
    write_summary(writer, &metrics)
}

fn family_becker(spec: &EstimateSpec, writer: &mut ManifestWriter) -> Result<(), CliError> {
    let params = required(&spec.becker, "becker")?;
    let result = crimetrics::becker::equilibrium_crime(params).map_err(|e| match e {
        Error::Config(_) => schema(e),
        other => mismatch(other),
    })?;
    let bytes = becker_report_csv(params, &result).map_err(generic)?;
    let path = writer.write_output("calibration.csv", &bytes).map_err(generic)?;
    println!("calibration: {}", path.display());
    println!(
        "equilibrium crime {} (benefit elasticity {}, implied probability {})",
        result.crime, result.elasticity, result.implied_probability
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// replay

pub fn replay(args: ReplayArgs) -> Result<(), CliError> {
    let manifest = read_manifest(&args.manifest).map_err(generic)?;
    let changed = verify_digests(&manifest.inputs, None);
    if !changed.is_empty() {
        let list: Vec<&str> = changed.iter().map(|m| m.path.as_str()).collect();
        return Err(CliError::new(
            1,
            format!("inputs changed since the run was recorded: {}", list.join(", ")),
        ));
    }
    match manifest.command.as_str() {
        "ingest" => {
            let config: IngestConfig =
                serde_json::from_value(manifest.config.clone()).map_err(generic)?;
            run_ingest_with(&config, &args.out)?;
        }
        "mcc" => {
            let config: MccConfig =
                serde_json::from_value(manifest.config.clone()).map_err(generic)?;
            run_mcc_with(&config, &args.out)?;
        }
        "estimate" => {
            let config: EstimateConfig =
                serde_json::from_value(manifest.config.clone()).map_err(generic)?;
            run_estimate_with(&config, &args.out)?;
        }
        other => {
            return Err(CliError::new(1, format!("manifest has unknown command {other:?}")))
        }
    }
    let mismatches = verify_digests(&manifest.outputs, Some(&args.out));
    let bad: BTreeSet<&str> = mismatches.iter().map(|m| m.path.as_str()).collect();
    for output in &manifest.outputs {
        if bad.contains(output.path.as_str()) {
            println!("MISMATCH {}", output.path);
        } else {
            println!("identical {}", output.path);
        }
    }
    if bad.is_empty() {
        println!("replay verified: {} outputs identical", manifest.outputs.len());
        Ok(())
    } else {
        Err(CliError::new(
            1,
            format!(
                "{} of {} outputs differ from the recorded run",
                bad.len(),
                manifest.outputs.len()
            ),
        ))
    }
}
