//! Output shaping: documented CSV layouts for the panel, coefficient
//! tables, plot data, and reports, plus significance stars.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! written file parses back to bit-identical values and reruns with the same
//! seed produce byte-identical output.

use std::collections::BTreeMap;
use std::path::Path;

use crate::becker::{BeckerParams, EquilibriumResult};
use crate::concentration::ConcentrationRecord;
use crate::estimators::{ChangeProfile, DdFit, DddFit};
use crate::ingest::{CountSet, DistrictPanel, PanelRow, PeriodKind, MALE_SHARE_NAMES};
use crate::nonparam::LocalLinearFit;
use crate::synthlab::{DynamicRecovery, RecoverySummary, SuiteReport};
use crate::{Error, Result};

/// Two-sided normal critical values at 10%, 5%, and 1%.
pub const Z_10: f64 = 1.644_853_626_951_472_2;
pub const Z_05: f64 = 1.959_963_984_540_054;
pub const Z_01: f64 = 2.575_829_303_548_901;

/// Significance stars from a coefficient and SE: two-sided 10/5/1%.
pub fn stars_for(coefficient: f64, se: f64) -> &'static str {
    if !(se > 0.0) {
        return "";
    }
    let z = (coefficient / se).abs();
    if z >= Z_01 {
        "***"
    } else if z >= Z_05 {
        "**"
    } else if z >= Z_10 {
        "*"
    } else {
        ""
    }
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt).unwrap_or_default()
}

fn finish(writer: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    writer
        .into_inner()
        .map_err(|e| Error::Data(format!("csv buffer flush failed: {e}")))
}

// ---------------------------------------------------------------------------
// Coefficient tables

/// One reported coefficient.
#[derive(Clone, Debug)]
pub struct TableRow {
    /// Table family label, e.g. "dd".
    pub table: String,
    /// Outcome label, e.g. "total".
    pub outcome: String,
    pub term: String,
    pub coefficient: f64,
    pub se: f64,
    pub stars: String,
    pub n_obs: usize,
    pub n_districts: usize,
    pub pre_period_mean: f64,
}

pub fn dd_table_rows(table: &str, outcome: &str, dd: &DdFit) -> Vec<TableRow> {
    dd.treatment_names
        .iter()
        .map(|term| {
            let coefficient = dd.fit.coefficient(term).unwrap_or(f64::NAN);
            let se = dd.fit.se_of(term).unwrap_or(f64::NAN);
            TableRow {
                table: table.to_owned(),
                outcome: outcome.to_owned(),
                term: term.clone(),
                coefficient,
                se,
                stars: stars_for(coefficient, se).to_owned(),
                n_obs: dd.fit.n,
                n_districts: dd.n_districts,
                pre_period_mean: dd.pre_period_mean,
            }
        })
        .collect()
}

pub fn ddd_table_rows(table: &str, outcome: &str, ddd: &DddFit) -> Vec<TableRow> {
    ddd.treatment_names
        .iter()
        .map(|term| {
            let coefficient = ddd.fit.coefficient(term).unwrap_or(f64::NAN);
            let se = ddd.fit.se_of(term).unwrap_or(f64::NAN);
            TableRow {
                table: table.to_owned(),
                outcome: outcome.to_owned(),
                term: term.clone(),
                coefficient,
                se,
                stars: stars_for(coefficient, se).to_owned(),
                n_obs: ddd.fit.n,
                n_districts: ddd.n_districts,
                pre_period_mean: f64::NAN,
            }
        })
        .collect()
}

pub fn coefficient_table_csv(rows: &[TableRow]) -> Result<Vec<u8>> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record([
        "table",
        "outcome",
        "term",
        "coefficient",
        "se",
        "stars",
        "n_obs",
        "n_districts",
        "pre_period_mean",
    ])?;
    for row in rows {
        writer.write_record([
            row.table.as_str(),
            row.outcome.as_str(),
            row.term.as_str(),
            &fmt(row.coefficient),
            &fmt(row.se),
            row.stars.as_str(),
            &row.n_obs.to_string(),
            &row.n_districts.to_string(),
            &fmt(row.pre_period_mean),
        ])?;
    }
    finish(writer)
}

/// Long-format `metric,value` CSV for scalar summaries (equality tests,
/// ratios, calibration outputs).
pub fn metrics_csv(rows: &[(String, f64)]) -> Result<Vec<u8>> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["metric", "value"])?;
    for (metric, value) in rows {
        writer.write_record([metric.as_str(), &fmt(*value)])?;
    }
    finish(writer)
}

// ---------------------------------------------------------------------------
// Plot data

/// Dose-response plot data: one row per grid point, empty cells where the
/// point is masked for thin support.
pub fn local_linear_plot_csv(fit: &LocalLinearFit) -> Result<Vec<u8>> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["grid", "fit", "lo95", "hi95", "density", "effective_n"])?;
    for p in &fit.points {
        writer.write_record([
            fmt(p.grid),
            fmt_opt(p.fit),
            fmt_opt(p.lo95),
            fmt_opt(p.hi95),
            fmt(p.density),
            p.effective_n.to_string(),
        ])?;
    }
    finish(writer)
}

/// Event-study plot data from a dynamic fit: coefficient and normal 95%
/// band per post year.
pub fn dynamic_plot_csv(years: &[i32], dd: &DdFit) -> Result<Vec<u8>> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["fiscal_year", "coefficient", "se", "lo95", "hi95"])?;
    for (year, term) in years.iter().zip(&dd.treatment_names) {
        let coefficient = dd.fit.coefficient(term).unwrap_or(f64::NAN);
        let se = dd.fit.se_of(term).unwrap_or(f64::NAN);
        writer.write_record([
            year.to_string(),
            fmt(coefficient),
            fmt(se),
            fmt(coefficient - Z_05 * se),
            fmt(coefficient + Z_05 * se),
        ])?;
    }
    finish(writer)
}

/// Deprivation-percentile profile plot data; one labeled series per profile.
pub fn neighborhood_profile_csv(profiles: &[(String, ChangeProfile)]) -> Result<Vec<u8>> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["series", "percentile", "mean_change"])?;
    for (label, profile) in profiles {
        for (percentile, mean) in &profile.percentile_means {
            writer.write_record([label.as_str(), &percentile.to_string(), &fmt(*mean)])?;
        }
    }
    finish(writer)
}

// ---------------------------------------------------------------------------
// Concentration records

pub fn concentration_csv(records: &[ConcentrationRecord]) -> Result<Vec<u8>> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record([
        "district_id",
        "fiscal_year",
        "category",
        "k",
        "n_crimes",
        "n_streets",
        "cc_raw",
        "cc_sim_mean",
        "cc_sim_sd",
        "mcc",
        "runs",
        "seed",
    ])?;
    for r in records {
        writer.write_record([
            r.district_id.as_str(),
            &r.year.to_string(),
            r.category.as_str(),
            &fmt(r.stats.k),
            &r.stats.n_crimes.to_string(),
            &r.stats.n_streets.to_string(),
            &fmt(r.stats.cc_raw),
            &fmt(r.stats.cc_sim_mean),
            &fmt(r.stats.cc_sim_sd),
            &fmt(r.stats.mcc),
            &r.stats.runs.to_string(),
            &r.stats.seed.to_string(),
        ])?;
    }
    finish(writer)
}

/// Reads a concentration CSV produced by [`concentration_csv`].
pub fn concentration_from_csv(path: &Path) -> Result<Vec<ConcentrationRecord>> {
    use crate::concentration::ConcentrationStats;

    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::Config(format!("{}: missing required column {name:?}", path.display()))
        })
    };
    let columns = [
        col("district_id")?,
        col("fiscal_year")?,
        col("category")?,
        col("k")?,
        col("n_crimes")?,
        col("n_streets")?,
        col("cc_raw")?,
        col("cc_sim_mean")?,
        col("cc_sim_sd")?,
        col("mcc")?,
        col("runs")?,
        col("seed")?,
    ];
    let mut records = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let get = |i: usize| record.get(columns[i]).unwrap_or("").trim();
        let bad = |what: &str, value: &str| {
            Error::Data(format!("{} line {line}: bad {what} {value:?}", path.display()))
        };
        let num =
            |i: usize, what: &str| -> Result<f64> { get(i).parse().map_err(|_| bad(what, get(i))) };
        let int =
            |i: usize, what: &str| -> Result<u64> { get(i).parse().map_err(|_| bad(what, get(i))) };
        records.push(ConcentrationRecord {
            district_id: get(0).to_owned(),
            year: get(1).parse().map_err(|_| bad("fiscal year", get(1)))?,
            category: get(2).parse()?,
            stats: ConcentrationStats {
                k: num(3, "k")?,
                n_crimes: int(4, "crime count")?,
                n_streets: int(5, "street count")?,
                cc_raw: num(6, "cc_raw")?,
                cc_sim_mean: num(7, "cc_sim_mean")?,
                cc_sim_sd: num(8, "cc_sim_sd")?,
                mcc: num(9, "mcc")?,
                runs: int(10, "runs")?,
                seed: int(11, "seed")?,
            },
        });
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Reports

fn summary_metrics(rows: &mut Vec<(String, f64)>, summary: &RecoverySummary) {
    let e = &summary.estimator;
    rows.push((format!("{e}.replications"), summary.replications as f64));
    rows.push((format!("{e}.true_value"), summary.true_value));
    rows.push((format!("{e}.mean_estimate"), summary.mean_estimate));
    rows.push((format!("{e}.bias"), summary.bias));
    rows.push((format!("{e}.rmse"), summary.rmse));
    rows.push((format!("{e}.coverage95"), summary.coverage95));
    rows.push((format!("{e}.rejection_rate"), summary.rejection_rate));
    rows.push((format!("{e}.mean_se"), summary.mean_se));
}

fn dynamic_metrics(rows: &mut Vec<(String, f64)>, dynamic: &DynamicRecovery) {
    for summary in &dynamic.per_year {
        summary_metrics(rows, summary);
    }
    rows.push(("dynamic_dd.ordering_share".to_owned(), dynamic.ordering_share));
}

/// Recovery-suite report in long `metric,value` format.
pub fn suite_report_csv(report: &SuiteReport) -> Result<Vec<u8>> {
    let mut rows: Vec<(String, f64)> = Vec::new();
    summary_metrics(&mut rows, &report.pooled);
    let mut binary = report.binary.clone();
    binary.estimator = "binary_dd".into();
    summary_metrics(&mut rows, &binary);
    summary_metrics(&mut rows, &report.placebo);
    dynamic_metrics(&mut rows, &report.dynamic);
    rows.push(("ddd.mean_ratio".into(), report.ddd.mean_ratio));
    rows.push(("ddd.monotone_share".into(), report.ddd.monotone_share));
    rows.push(("ddd.joint_rejection_rate".into(), report.ddd.joint_rejection_rate));
    for (i, c) in report.ddd.mean_coefficients.iter().enumerate() {
        rows.push((format!("ddd.mean_coefficient_q{}", i + 1), *c));
    }
    rows.push(("band.share_containing_zero".into(), report.band.share_containing_zero));
    rows.push(("band.mean_masked_points".into(), report.band.mean_masked_points));
    metrics_csv(&rows)
}

/// Calibration report: parameters, equilibrium crime, and elasticity.
pub fn becker_report_csv(params: &BeckerParams, result: &EquilibriumResult) -> Result<Vec<u8>> {
    let rows = vec![
        ("gain".to_owned(), params.gain),
        ("sanction".to_owned(), params.sanction),
        ("wage".to_owned(), params.wage),
        ("benefits".to_owned(), params.benefits),
        ("unemployment".to_owned(), params.unemployment),
        ("kappa1".to_owned(), params.kappa1),
        ("kappa2".to_owned(), params.kappa2),
        ("kappa3".to_owned(), params.kappa3),
        ("police".to_owned(), params.police),
        ("equilibrium_crime".to_owned(), result.crime),
        ("benefit_elasticity".to_owned(), result.elasticity),
        ("implied_probability".to_owned(), result.implied_probability),
        ("probability_out_of_range".to_owned(), f64::from(result.probability_out_of_range)),
        ("residual".to_owned(), result.residual),
    ];
    metrics_csv(&rows)
}

// ---------------------------------------------------------------------------
// Panel round trip

const PANEL_FIXED_COLUMNS: [&str; 13] = [
    "district_id",
    "region_id",
    "period",
    "total",
    "property",
    "violent",
    "other",
    "type_counts",
    "population",
    "working_age_population",
    "austerity_sai",
    "police_per_1000",
    "median_weekly_wage",
];

/// Serializes the panel to its columnar CSV. `type_counts` holds the
/// per-type map as JSON so arbitrary type names survive the round trip.
pub fn panel_to_csv(panel: &DistrictPanel) -> Result<Vec<u8>> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = PANEL_FIXED_COLUMNS.to_vec();
    header.extend(MALE_SHARE_NAMES);
    header.push("weight");
    writer.write_record(&header)?;
    for row in &panel.rows {
        let mut record = vec![
            row.district_id.clone(),
            row.region_id.clone(),
            row.period.to_string(),
            row.counts.total.to_string(),
            row.counts.property.to_string(),
            row.counts.violent.to_string(),
            row.counts.other.to_string(),
            serde_json::to_string(&row.counts.by_type)?,
            fmt(row.population),
            fmt(row.working_age_population),
            fmt(row.austerity_sai),
            fmt(row.police_per_1000),
            fmt(row.median_weekly_wage),
        ];
        record.extend(row.male_shares.iter().map(|s| fmt(*s)));
        record.push(fmt(row.weight));
        writer.write_record(&record)?;
    }
    finish(writer)
}

/// Reads a panel CSV produced by [`panel_to_csv`]. All rows must share one
/// period granularity.
pub fn panel_from_csv(path: &Path) -> Result<DistrictPanel> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::Config(format!("{}: missing required column {name:?}", path.display()))
        })
    };
    let mut fixed = [0usize; 13];
    for (i, name) in PANEL_FIXED_COLUMNS.iter().enumerate() {
        fixed[i] = col(name)?;
    }
    let mut shares = [0usize; 5];
    for (i, name) in MALE_SHARE_NAMES.iter().enumerate() {
        shares[i] = col(name)?;
    }
    let c_weight = col("weight")?;

    let mut rows = Vec::new();
    let mut kind: Option<PeriodKind> = None;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let get = |i: usize| record.get(i).unwrap_or("").trim();
        let num = |i: usize| -> Result<f64> {
            get(i).parse().map_err(|_| {
                Error::Data(format!(
                    "{} line {line}: bad number {:?} in column {:?}",
                    path.display(),
                    get(i),
                    headers.get(i).unwrap_or("?")
                ))
            })
        };
        let int = |i: usize| -> Result<u64> {
            get(i).parse().map_err(|_| {
                Error::Data(format!(
                    "{} line {line}: bad count {:?} in column {:?}",
                    path.display(),
                    get(i),
                    headers.get(i).unwrap_or("?")
                ))
            })
        };
        let period: crate::ingest::PeriodKey = get(fixed[2]).parse()?;
        let row_kind = match period {
            crate::ingest::PeriodKey::Month(_) => PeriodKind::Month,
            crate::ingest::PeriodKey::FiscalYear(_) => PeriodKind::FiscalYear,
        };
        match kind {
            None => kind = Some(row_kind),
            Some(k) if k == row_kind => {}
            Some(_) => {
                return Err(Error::Data(format!(
                    "{} line {line}: mixed period granularities",
                    path.display()
                )))
            }
        }
        let by_type: BTreeMap<String, u64> = serde_json::from_str(get(fixed[7]))?;
        let mut male_shares = [0.0; 5];
        for (slot, idx) in shares.iter().enumerate() {
            male_shares[slot] = num(*idx)?;
        }
        rows.push(PanelRow {
            district_id: get(fixed[0]).to_owned(),
            region_id: get(fixed[1]).to_owned(),
            period,
            counts: CountSet {
                total: int(fixed[3])?,
                property: int(fixed[4])?,
                violent: int(fixed[5])?,
                other: int(fixed[6])?,
                by_type,
            },
            population: num(fixed[8])?,
            working_age_population: num(fixed[9])?,
            austerity_sai: num(fixed[10])?,
            police_per_1000: num(fixed[11])?,
            median_weekly_wage: num(fixed[12])?,
            male_shares,
            weight: num(c_weight)?,
        });
    }
    let Some(kind) = kind else {
        return Err(Error::Data(format!("{}: panel has no rows", path.display())));
    };
    Ok(DistrictPanel { kind, rows })
}
