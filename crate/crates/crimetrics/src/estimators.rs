//! Panel specifications built on the regression core: pooled, binary,
//! dynamic, and placebo difference-in-differences, quintile triple
//! differences, recidivism and labor-market batteries, effect summaries, and
//! the neighborhood deprivation change profile.
//!
//! All estimators consume a [`PanelFrame`]: one row per district-period with
//! an outcome, the austerity exposure in £100s per working-age adult, a
//! population weight, and named control columns. Frames are thin and
//! explicit so synthetic and ingested data take the same path.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::concentration::{CellCategory, ConcentrationRecord};
use crate::ingest::{
    DistrictPanel, ImdScores, NeighborhoodYear, PanelRow, Quarter, RecidivismCohort, YearMonth,
    MALE_SHARE_NAMES,
};
use crate::regress::{
    absorb_fixed_effects, fit, CrKind, DesignMatrix, FitOptions, FitResult, WaldTest,
};
use crate::{Error, Result};

/// First month of the post-policy era used by the fractional cohort rule.
pub const POLICY_START: YearMonth = YearMonth { year: 2013, month: 1 };

/// First post-policy fiscal year in the annual specifications.
pub const FIRST_POST_FISCAL_YEAR: i32 = 2013;

// ---------------------------------------------------------------------------
// Frames

/// One estimation row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrameRow {
    pub district_id: String,
    pub region_id: String,
    pub fiscal_year: i32,
    /// Period label at the outcome's native frequency ("2013-04", "2013",
    /// "2012-Q2"); region-by-period fixed effects interact with this.
    pub period_label: String,
    /// Outcome on the estimation scale (log rate, mcc level, labor level).
    pub outcome: f64,
    /// Outcome on the reporting scale (rate per 1,000, mcc, level); used for
    /// pre-period means in tables.
    pub display_level: f64,
    /// Austerity exposure in £100s per working-age adult.
    pub austerity: f64,
    /// Share of this row's window falling in the post era, for cohort rows
    /// whose windows straddle the policy start. None for ordinary rows.
    pub post_fraction: Option<f64>,
    pub weight: f64,
    pub controls: Vec<f64>,
}

/// Estimation-ready panel at one outcome frequency.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PanelFrame {
    pub control_names: Vec<String>,
    pub rows: Vec<FrameRow>,
}

impl PanelFrame {
    pub fn district_ids(&self) -> BTreeSet<&str> {
        self.rows.iter().map(|r| r.district_id.as_str()).collect()
    }

    /// Mean row weight per district; the district-level weight used for
    /// medians and quintile cuts.
    pub fn district_weights(&self) -> BTreeMap<String, f64> {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for row in &self.rows {
            let entry = sums.entry(row.district_id.clone()).or_insert((0.0, 0));
            entry.0 += row.weight;
            entry.1 += 1;
        }
        sums.into_iter()
            .map(|(d, (sum, n))| (d, sum / n as f64))
            .collect()
    }

    /// Austerity level per district (constant within district by
    /// construction; the first row's value is taken).
    pub fn district_austerity(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for row in &self.rows {
            out.entry(row.district_id.clone()).or_insert(row.austerity);
        }
        out
    }
}

/// Which count a crime-rate frame is built from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountSelector {
    Total,
    Property,
    Violent,
    Other,
    /// A single normalized crime type, e.g. "burglary".
    Type(String),
    /// A named aggregate of normalized crime types, e.g. theft.
    Types(Vec<String>),
}

impl CountSelector {
    fn value(&self, row: &PanelRow) -> u64 {
        match self {
            CountSelector::Total => row.counts.total,
            CountSelector::Property => row.counts.property,
            CountSelector::Violent => row.counts.violent,
            CountSelector::Other => row.counts.other,
            CountSelector::Type(t) => row.counts.by_type.get(t).copied().unwrap_or(0),
            CountSelector::Types(ts) => ts
                .iter()
                .map(|t| row.counts.by_type.get(t).copied().unwrap_or(0))
                .sum(),
        }
    }
}

/// The control set used by the crime-rate specifications.
pub fn standard_controls() -> Vec<String> {
    let mut names = vec!["police_per_1000".to_owned(), "median_weekly_wage".to_owned()];
    names.extend(MALE_SHARE_NAMES.iter().map(|s| (*s).to_owned()));
    names
}

fn control_value(row: &PanelRow, name: &str) -> Result<f64> {
    match name {
        "police_per_1000" => Ok(row.police_per_1000),
        "median_weekly_wage" => Ok(row.median_weekly_wage),
        _ => MALE_SHARE_NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| row.male_shares[i])
            .ok_or_else(|| Error::Config(format!("unknown control column '{name}'"))),
    }
}

/// Log crime-rate frame from an assembled district panel. Zero-count rows
/// have no log rate and are excluded; the count of exclusions is returned.
pub fn crime_rate_frame(
    panel: &DistrictPanel,
    selector: &CountSelector,
    controls: &[String],
) -> Result<(PanelFrame, usize)> {
    let mut rows = Vec::with_capacity(panel.rows.len());
    let mut excluded_zero = 0usize;
    for row in &panel.rows {
        let count = selector.value(row);
        let Some(log_rate) = row.log_rate(count) else {
            excluded_zero += 1;
            continue;
        };
        let controls = controls
            .iter()
            .map(|name| control_value(row, name))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(FrameRow {
            district_id: row.district_id.clone(),
            region_id: row.region_id.clone(),
            fiscal_year: row.period.fiscal_year(),
            period_label: row.period.to_string(),
            outcome: log_rate,
            display_level: row.rate(count),
            austerity: row.austerity_hundreds(),
            post_fraction: None,
            weight: row.weight,
            controls,
        });
    }
    Ok((
        PanelFrame {
            control_names: controls.to_vec(),
            rows,
        },
        excluded_zero,
    ))
}

/// Concentration frame: mcc level per district-year joined with annual
/// covariates. The covariate panel must be at fiscal-year frequency.
pub fn concentration_frame(
    records: &[ConcentrationRecord],
    panel: &DistrictPanel,
    category: CellCategory,
    controls: &[String],
) -> Result<PanelFrame> {
    if panel.kind != crate::ingest::PeriodKind::FiscalYear {
        return Err(Error::Config(
            "concentration outcomes are annual; pass a fiscal-year panel".into(),
        ));
    }
    let mut by_cell: HashMap<(&str, i32), &PanelRow> = HashMap::new();
    for row in &panel.rows {
        by_cell.insert((row.district_id.as_str(), row.period.fiscal_year()), row);
    }
    let mut rows = Vec::new();
    for rec in records {
        if rec.category != category {
            continue;
        }
        let Some(panel_row) = by_cell.get(&(rec.district_id.as_str(), rec.year)) else {
            return Err(Error::Data(format!(
                "no covariate row for district {} fiscal year {}",
                rec.district_id, rec.year
            )));
        };
        let controls = controls
            .iter()
            .map(|name| control_value(panel_row, name))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(FrameRow {
            district_id: rec.district_id.clone(),
            region_id: panel_row.region_id.clone(),
            fiscal_year: rec.year,
            period_label: rec.year.to_string(),
            outcome: rec.stats.mcc,
            display_level: rec.stats.mcc,
            austerity: panel_row.austerity_hundreds(),
            post_fraction: None,
            weight: panel_row.weight,
            controls,
        });
    }
    Ok(PanelFrame {
        control_names: controls.to_vec(),
        rows,
    })
}

// ---------------------------------------------------------------------------
// Specification configuration

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentKind {
    Continuous,
    /// 1 when the district's austerity is at or above the population-weighted
    /// median across in-sample districts.
    BinaryAboveMedian,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostKind {
    /// Post = 1 from `first_post_fiscal_year` onward.
    Pooled { first_post_fiscal_year: i32 },
    /// One interaction per listed post fiscal year.
    Dynamic { post_fiscal_years: Vec<i32> },
    /// Sample restricted to two pre-policy fiscal years; Post = 1 on the
    /// later one.
    Placebo {
        pre_fiscal_year: i32,
        post_fiscal_year: i32,
    },
    /// Post is the per-row window overlap fraction carried by the frame.
    FractionalCohort,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecConfig {
    pub treatment: TreatmentKind,
    pub post: PostKind,
    /// Inclusive fiscal-year window; None keeps every row.
    pub window: Option<(i32, i32)>,
    pub cr: CrKind,
}

impl SpecConfig {
    /// The headline pooled continuous-treatment configuration.
    pub fn baseline() -> Self {
        SpecConfig {
            treatment: TreatmentKind::Continuous,
            post: PostKind::Pooled {
                first_post_fiscal_year: FIRST_POST_FISCAL_YEAR,
            },
            window: Some((2011, 2015)),
            cr: CrKind::Cr1,
        }
    }

    fn fit_options(&self) -> FitOptions {
        FitOptions {
            cr: self.cr,
            ..FitOptions::default()
        }
    }
}

/// A fitted difference-in-differences specification.
#[derive(Clone, Debug)]
pub struct DdFit {
    pub fit: FitResult,
    /// Names of the treatment interaction columns, in estimation order.
    pub treatment_names: Vec<String>,
    /// Weighted SD of the treatment variable over the estimation sample (the
    /// per-SD unit in effect summaries).
    pub treatment_sd: f64,
    /// Weighted mean of the reporting-scale outcome over pre-period rows.
    pub pre_period_mean: f64,
    pub n_districts: usize,
    /// Joint equality test across adjacent dynamic coefficients.
    pub equality: Option<WaldTest>,
}

impl DdFit {
    /// Coefficient on the (single or named) treatment interaction.
    pub fn treatment_coefficient(&self, name: &str) -> Option<f64> {
        self.fit.coefficient(name)
    }
}

/// Audit trail of a placebo run: proof that no policy-era row was touched.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlaceboAudit {
    pub max_fiscal_year_used: i32,
    pub first_policy_fiscal_year: i32,
    pub rows_used: usize,
}

// ---------------------------------------------------------------------------
// Core runners

pub(crate) fn windowed<'a>(frame: &'a PanelFrame, config: &SpecConfig) -> Result<Vec<&'a FrameRow>> {
    let keep_year = |fy: i32| -> bool {
        let in_window = config.window.is_none_or(|(lo, hi)| fy >= lo && fy <= hi);
        let in_post_plan = match &config.post {
            PostKind::Placebo {
                pre_fiscal_year,
                post_fiscal_year,
            } => fy == *pre_fiscal_year || fy == *post_fiscal_year,
            _ => true,
        };
        in_window && in_post_plan
    };
    let rows: Vec<&FrameRow> = frame.rows.iter().filter(|r| keep_year(r.fiscal_year)).collect();
    if rows.is_empty() {
        return Err(Error::Data("empty estimation sample after windowing".into()));
    }
    Ok(rows)
}

/// Post factor for a row under non-dynamic post plans.
pub(crate) fn post_factor(row: &FrameRow, post: &PostKind) -> Result<f64> {
    match post {
        PostKind::Pooled {
            first_post_fiscal_year,
        } => Ok(f64::from(row.fiscal_year >= *first_post_fiscal_year)),
        PostKind::Placebo {
            post_fiscal_year, ..
        } => Ok(f64::from(row.fiscal_year == *post_fiscal_year)),
        PostKind::FractionalCohort => row.post_fraction.ok_or_else(|| {
            Error::Config(format!(
                "row {} {} has no window overlap fraction; fractional post needs cohort rows",
                row.district_id, row.period_label
            ))
        }),
        PostKind::Dynamic { .. } => Err(Error::Config(
            "dynamic post plans build one indicator per year".into(),
        )),
    }
}

/// Treatment base value per district under the configured kind.
pub(crate) fn treatment_values(
    rows: &[&FrameRow],
    kind: &TreatmentKind,
) -> Result<HashMap<String, f64>> {
    let mut per_district: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for row in rows {
        let entry = per_district
            .entry(row.district_id.as_str())
            .or_insert((row.austerity, 0.0, 0));
        entry.1 += row.weight;
        entry.2 += 1;
    }
    match kind {
        TreatmentKind::Continuous => Ok(per_district
            .into_iter()
            .map(|(d, (a, _, _))| (d.to_owned(), a))
            .collect()),
        TreatmentKind::BinaryAboveMedian => {
            let values: Vec<f64> = per_district.values().map(|(a, _, _)| *a).collect();
            let weights: Vec<f64> = per_district
                .values()
                .map(|(_, wsum, n)| wsum / *n as f64)
                .collect();
            let median = weighted_median(&values, &weights)?;
            Ok(per_district
                .into_iter()
                .map(|(d, (a, _, _))| (d.to_owned(), f64::from(a >= median)))
                .collect())
        }
    }
}

fn weighted_mean(values: impl Iterator<Item = (f64, f64)>) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (v, w) in values {
        num += v * w;
        den += w;
    }
    num / den
}

fn weighted_sd(values: impl Iterator<Item = (f64, f64)> + Clone) -> f64 {
    let mean = weighted_mean(values.clone());
    let mut num = 0.0;
    let mut den = 0.0;
    for (v, w) in values {
        num += w * (v - mean) * (v - mean);
        den += w;
    }
    (num / den).sqrt()
}

struct BuiltDesign {
    design: DesignMatrix,
    treatment_names: Vec<String>,
    pre_rows: Vec<usize>,
}

/// Assembles outcome, treatment interactions, controls, district and
/// region-by-period fixed effects, district clusters.
fn build_design(
    rows: &[&FrameRow],
    frame: &PanelFrame,
    config: &SpecConfig,
    quintile_of: Option<&BTreeMap<String, u8>>,
) -> Result<BuiltDesign> {
    let treat = treatment_values(rows, &config.treatment)?;
    let y: Vec<f64> = rows.iter().map(|r| r.outcome).collect();
    let w: Vec<f64> = rows.iter().map(|r| r.weight).collect();
    let mut design = DesignMatrix::new(y, w)?;

    let mut treatment_names = Vec::new();
    let mut pre_rows = Vec::new();
    match (&config.post, quintile_of) {
        (PostKind::Dynamic { post_fiscal_years }, None) => {
            if post_fiscal_years.is_empty() {
                return Err(Error::Config("dynamic post plan lists no years".into()));
            }
            let mut years = post_fiscal_years.clone();
            years.sort_unstable();
            years.dedup();
            let first_post = years[0];
            for year in &years {
                let col: Vec<f64> = rows
                    .iter()
                    .map(|r| treat[r.district_id.as_str()] * f64::from(r.fiscal_year == *year))
                    .collect();
                let name = format!("post{year}_x_austerity");
                design.push_x(&name, col)?;
                treatment_names.push(name);
            }
            pre_rows = rows
                .iter()
                .enumerate()
                .filter(|(_, r)| r.fiscal_year < first_post)
                .map(|(i, _)| i)
                .collect();
        }
        (post, None) => {
            let name = match post {
                PostKind::Placebo { .. } => "placebo_post_x_austerity",
                _ => "post_x_austerity",
            };
            let mut col = Vec::with_capacity(rows.len());
            for (i, row) in rows.iter().enumerate() {
                let p = post_factor(row, post)?;
                if p == 0.0 {
                    pre_rows.push(i);
                }
                col.push(treat[row.district_id.as_str()] * p);
            }
            design.push_x(name, col)?;
            treatment_names.push(name.to_owned());
        }
        (post, Some(quintiles)) => {
            if matches!(post, PostKind::Dynamic { .. }) {
                return Err(Error::Config(
                    "quintile interactions use a pooled or placebo post plan, not dynamic".into(),
                ));
            }
            for row in rows {
                if !quintiles.contains_key(row.district_id.as_str()) {
                    return Err(Error::Data(format!(
                        "district {} has no quintile assignment",
                        row.district_id
                    )));
                }
            }
            let mut posts = Vec::with_capacity(rows.len());
            for (i, row) in rows.iter().enumerate() {
                let p = post_factor(row, post)?;
                if p == 0.0 {
                    pre_rows.push(i);
                }
                posts.push(p);
            }
            for q in 1..=5u8 {
                let col: Vec<f64> = rows
                    .iter()
                    .zip(&posts)
                    .map(|(r, p)| {
                        let in_q = f64::from(quintiles[r.district_id.as_str()] == q);
                        treat[r.district_id.as_str()] * p * in_q
                    })
                    .collect();
                let name = format!("post_x_austerity_q{q}");
                design.push_x(&name, col)?;
                treatment_names.push(name);
            }
        }
    }

    for (j, name) in frame.control_names.iter().enumerate() {
        let col: Vec<f64> = rows.iter().map(|r| r.controls[j]).collect();
        design.push_x(name, col)?;
    }

    let districts: Vec<&str> = rows.iter().map(|r| r.district_id.as_str()).collect();
    let region_period: Vec<String> = rows
        .iter()
        .map(|r| format!("{}|{}", r.region_id, r.period_label))
        .collect();
    design.push_fe("district", &districts)?;
    design.push_fe("region_period", &region_period)?;
    design.set_clusters(&districts)?;

    Ok(BuiltDesign {
        design,
        treatment_names,
        pre_rows,
    })
}

fn finish_fit(
    rows: &[&FrameRow],
    built: &BuiltDesign,
    config: &SpecConfig,
    result: FitResult,
) -> Result<DdFit> {
    for dropped in &result.dropped {
        if built.treatment_names.contains(&dropped.name) {
            return Err(Error::Data(format!(
                "treatment interaction '{}' has no variation after absorption ({:?})",
                dropped.name, dropped.reason
            )));
        }
    }
    let treat = treatment_values(rows, &config.treatment)?;
    let treatment_sd = weighted_sd(
        rows.iter()
            .map(|r| (treat[r.district_id.as_str()], r.weight)),
    );
    let pre_period_mean = if built.pre_rows.is_empty() {
        f64::NAN
    } else {
        weighted_mean(
            built
                .pre_rows
                .iter()
                .map(|&i| (rows[i].display_level, rows[i].weight)),
        )
    };
    let n_districts = rows
        .iter()
        .map(|r| r.district_id.as_str())
        .collect::<BTreeSet<_>>()
        .len();
    let equality = if built.treatment_names.len() >= 2 {
        let names: Vec<&str> = built.treatment_names.iter().map(String::as_str).collect();
        Some(result.wald_equal(&names)?)
    } else {
        None
    };
    Ok(DdFit {
        fit: result,
        treatment_names: built.treatment_names.clone(),
        treatment_sd,
        pre_period_mean,
        n_districts,
        equality,
    })
}

/// Pooled difference-in-differences under the configured treatment kind.
pub fn run_dd(frame: &PanelFrame, config: &SpecConfig) -> Result<DdFit> {
    let rows = windowed(frame, config)?;
    let built = build_design(&rows, frame, config, None)?;
    let result = fit(&built.design, &config.fit_options())?;
    finish_fit(&rows, &built, config, result)
}

/// Pooled DD with the binarized treatment, regardless of `config.treatment`.
pub fn run_binary_dd(frame: &PanelFrame, config: &SpecConfig) -> Result<DdFit> {
    let config = SpecConfig {
        treatment: TreatmentKind::BinaryAboveMedian,
        ..config.clone()
    };
    run_dd(frame, &config)
}

/// Dynamic DD: one interaction per post year plus an adjacent-equality test.
pub fn run_dynamic_dd(frame: &PanelFrame, config: &SpecConfig) -> Result<DdFit> {
    if !matches!(config.post, PostKind::Dynamic { .. }) {
        return Err(Error::Config(
            "run_dynamic_dd requires a dynamic post plan".into(),
        ));
    }
    run_dd(frame, config)
}

/// Placebo DD on two pre-policy years, with a construction audit proving the
/// sample never reaches the policy era.
pub fn run_placebo_dd(frame: &PanelFrame, config: &SpecConfig) -> Result<(DdFit, PlaceboAudit)> {
    let PostKind::Placebo {
        pre_fiscal_year,
        post_fiscal_year,
    } = config.post
    else {
        return Err(Error::Config(
            "run_placebo_dd requires a placebo post plan".into(),
        ));
    };
    if pre_fiscal_year >= post_fiscal_year {
        return Err(Error::Config(format!(
            "placebo years must be ordered, got {pre_fiscal_year} then {post_fiscal_year}"
        )));
    }
    if post_fiscal_year >= FIRST_POST_FISCAL_YEAR {
        return Err(Error::Config(format!(
            "placebo year {post_fiscal_year} is not pre-policy (policy starts fiscal {FIRST_POST_FISCAL_YEAR})"
        )));
    }
    let rows = windowed(frame, config)?;
    let audit = PlaceboAudit {
        max_fiscal_year_used: rows.iter().map(|r| r.fiscal_year).max().unwrap(),
        first_policy_fiscal_year: FIRST_POST_FISCAL_YEAR,
        rows_used: rows.len(),
    };
    let built = build_design(&rows, frame, config, None)?;
    let result = fit(&built.design, &config.fit_options())?;
    Ok((finish_fit(&rows, &built, config, result)?, audit))
}

// ---------------------------------------------------------------------------
// Weighted median and quintiles

/// Smallest value whose cumulative weight reaches half the total; at an
/// exact half the lower value wins.
pub fn weighted_median(values: &[f64], weights: &[f64]) -> Result<f64> {
    if values.is_empty() || values.len() != weights.len() {
        return Err(Error::Config(format!(
            "weighted median needs matching nonempty inputs, got {} values and {} weights",
            values.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
        return Err(Error::Config("weights must be positive and finite".into()));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let half = 0.5 * weights.iter().sum::<f64>();
    let mut cum = 0.0;
    for &i in &order {
        cum += weights[i];
        if cum >= half {
            return Ok(values[i]);
        }
    }
    Ok(values[order[order.len() - 1]])
}

/// What a quintile assignment was cut on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuintileBasis {
    MccChangeRaw,
    MccChangeResidualized,
    PoliceLevel { fiscal_year: i32 },
    PoliceChange { from: i32, to: i32 },
}

/// District-to-quintile map over population-weighted fifths of a basis.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuintileAssignment {
    pub basis: QuintileBasis,
    pub quintile_of: BTreeMap<String, u8>,
    /// Share of total weight landing in each quintile.
    pub weight_shares: [f64; 5],
}

/// Cuts districts into weighted fifths of `values`, ascending. A district
/// sitting exactly on a cut goes to the lower quintile; ties in the basis
/// value are ordered by district id so assignment is deterministic.
pub fn assign_weighted_quintiles(
    basis: QuintileBasis,
    values: &BTreeMap<String, f64>,
    weights: &BTreeMap<String, f64>,
) -> Result<QuintileAssignment> {
    if values.is_empty() {
        return Err(Error::Config("no districts to cut into quintiles".into()));
    }
    let mut order: Vec<(&String, f64, f64)> = Vec::with_capacity(values.len());
    for (district, value) in values {
        let Some(weight) = weights.get(district) else {
            return Err(Error::Data(format!("district {district} has no weight")));
        };
        if !weight.is_finite() || *weight <= 0.0 {
            return Err(Error::Data(format!(
                "district {district} has non-positive weight {weight}"
            )));
        }
        order.push((district, *value, *weight));
    }
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    let total: f64 = order.iter().map(|(_, _, w)| w).sum();
    let mut cum = 0.0;
    let mut quintile_of = BTreeMap::new();
    let mut weight_shares = [0.0f64; 5];
    for (district, _, weight) in &order {
        cum += weight;
        let q = ((5.0 * cum / total).ceil() as usize).clamp(1, 5);
        quintile_of.insert((*district).clone(), q as u8);
        weight_shares[q - 1] += weight / total;
    }
    Ok(QuintileAssignment {
        basis,
        quintile_of,
        weight_shares,
    })
}

/// Residuals of the frame outcome after removing controls and the district
/// and region-by-period fixed effects (no treatment term). The flags exist
/// for reduced variants used in diagnostics.
pub fn frame_residuals(
    frame: &PanelFrame,
    use_controls: bool,
    use_region_period: bool,
) -> Result<Vec<f64>> {
    let y: Vec<f64> = frame.rows.iter().map(|r| r.outcome).collect();
    let w: Vec<f64> = frame.rows.iter().map(|r| r.weight).collect();
    let mut design = DesignMatrix::new(y, w)?;
    if use_controls {
        for (j, name) in frame.control_names.iter().enumerate() {
            let col: Vec<f64> = frame.rows.iter().map(|r| r.controls[j]).collect();
            design.push_x(name, col)?;
        }
    }
    let districts: Vec<&str> = frame.rows.iter().map(|r| r.district_id.as_str()).collect();
    design.push_fe("district", &districts)?;
    if use_region_period {
        let region_period: Vec<String> = frame
            .rows
            .iter()
            .map(|r| format!("{}|{}", r.region_id, r.period_label))
            .collect();
        design.push_fe("region_period", &region_period)?;
    }
    design.set_clusters(&districts)?;
    if design.x.is_empty() {
        let absorbed = absorb_fixed_effects(
            &design,
            crate::regress::DEFAULT_ABSORB_TOL,
            crate::regress::DEFAULT_ABSORB_MAX_ITER,
        )?;
        Ok(absorbed.y)
    } else {
        let result = fit(&design, &FitOptions::default())?;
        Ok(result.residuals)
    }
}

/// Raw and residualized concentration-change quintiles between two years.
/// Raw basis: mcc(end) − mcc(base). Residualized basis: the same difference
/// taken on residuals from the no-treatment model over the full frame.
pub fn build_mcc_change_quintiles(
    frame: &PanelFrame,
    base_year: i32,
    end_year: i32,
) -> Result<(QuintileAssignment, QuintileAssignment)> {
    let residuals = frame_residuals(frame, true, true)?;
    let mut raw: BTreeMap<String, [Option<f64>; 2]> = BTreeMap::new();
    let mut res: BTreeMap<String, [Option<f64>; 2]> = BTreeMap::new();
    for (row, residual) in frame.rows.iter().zip(&residuals) {
        let slot = if row.fiscal_year == base_year {
            0
        } else if row.fiscal_year == end_year {
            1
        } else {
            continue;
        };
        raw.entry(row.district_id.clone()).or_default()[slot] = Some(row.outcome);
        res.entry(row.district_id.clone()).or_default()[slot] = Some(*residual);
    }
    let diff = |m: &BTreeMap<String, [Option<f64>; 2]>| -> Result<BTreeMap<String, f64>> {
        m.iter()
            .map(|(d, pair)| match (pair[0], pair[1]) {
                (Some(a), Some(b)) => Ok((d.clone(), b - a)),
                _ => Err(Error::Data(format!(
                    "district {d} is missing year {base_year} or {end_year} for the quintile basis"
                ))),
            })
            .collect()
    };
    let weights = frame.district_weights();
    Ok((
        assign_weighted_quintiles(QuintileBasis::MccChangeRaw, &diff(&raw)?, &weights)?,
        assign_weighted_quintiles(QuintileBasis::MccChangeResidualized, &diff(&res)?, &weights)?,
    ))
}

/// Policing quintiles from an annual covariate panel: either the level of
/// officers per 1,000 in one fiscal year, or the change between two.
pub fn build_police_quintiles(
    panel: &DistrictPanel,
    basis: QuintileBasis,
) -> Result<QuintileAssignment> {
    let mut police: BTreeMap<(String, i32), f64> = BTreeMap::new();
    let mut weights_acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for row in &panel.rows {
        police.insert(
            (row.district_id.clone(), row.period.fiscal_year()),
            row.police_per_1000,
        );
        let e = weights_acc.entry(row.district_id.clone()).or_insert((0.0, 0));
        e.0 += row.weight;
        e.1 += 1;
    }
    let weights: BTreeMap<String, f64> = weights_acc
        .into_iter()
        .map(|(d, (s, n))| (d, s / n as f64))
        .collect();
    let lookup = |district: &str, year: i32| -> Result<f64> {
        police
            .get(&(district.to_owned(), year))
            .copied()
            .ok_or_else(|| {
                Error::Data(format!(
                    "district {district} has no police level for fiscal year {year}"
                ))
            })
    };
    let mut values = BTreeMap::new();
    for district in weights.keys() {
        let value = match basis {
            QuintileBasis::PoliceLevel { fiscal_year } => lookup(district, fiscal_year)?,
            QuintileBasis::PoliceChange { from, to } => {
                lookup(district, to)? - lookup(district, from)?
            }
            _ => {
                return Err(Error::Config(
                    "police quintiles need a police level or change basis".into(),
                ))
            }
        };
        values.insert(district.clone(), value);
    }
    assign_weighted_quintiles(basis, &values, &weights)
}

/// A fitted quintile triple difference.
#[derive(Clone, Debug)]
pub struct DddFit {
    pub fit: FitResult,
    /// "post_x_austerity_q1" .. "post_x_austerity_q5".
    pub treatment_names: Vec<String>,
    /// β̂ for quintiles 1..5 in order.
    pub quintile_coefficients: [f64; 5],
    /// β̂_5 / β̂_1.
    pub top_bottom_ratio: f64,
    /// Joint equality of the five quintile coefficients.
    pub equality: WaldTest,
    pub n_districts: usize,
}

/// Triple difference: the pooled interaction split across quintiles.
pub fn run_ddd_quintiles(
    frame: &PanelFrame,
    assignment: &QuintileAssignment,
    config: &SpecConfig,
) -> Result<DddFit> {
    let rows = windowed(frame, config)?;
    let built = build_design(&rows, frame, config, Some(&assignment.quintile_of))?;
    let result = fit(&built.design, &config.fit_options())?;
    for dropped in &result.dropped {
        if built.treatment_names.contains(&dropped.name) {
            return Err(Error::Data(format!(
                "quintile interaction '{}' has no variation after absorption ({:?})",
                dropped.name, dropped.reason
            )));
        }
    }
    let mut quintile_coefficients = [0.0f64; 5];
    for (q, name) in built.treatment_names.iter().enumerate() {
        quintile_coefficients[q] = result.coefficient(name).unwrap();
    }
    let names: Vec<&str> = built.treatment_names.iter().map(String::as_str).collect();
    let equality = result.wald_equal(&names)?;
    let n_districts = rows
        .iter()
        .map(|r| r.district_id.as_str())
        .collect::<BTreeSet<_>>()
        .len();
    Ok(DddFit {
        top_bottom_ratio: quintile_coefficients[4] / quintile_coefficients[0],
        fit: result,
        treatment_names: built.treatment_names,
        quintile_coefficients,
        equality,
        n_districts,
    })
}

/// Runs the pooled DD over a battery of named outcome frames.
pub fn run_battery(
    frames: &[(String, PanelFrame)],
    config: &SpecConfig,
) -> Result<Vec<(String, DdFit)>> {
    frames
        .iter()
        .map(|(name, frame)| Ok((name.clone(), run_dd(frame, config)?)))
        .collect()
}

/// Frame over an externally supplied district-period outcome (labor-market
/// rates and the like), keyed by (district id, period label). Panel rows
/// without a value are skipped and counted.
pub fn value_frame(
    panel: &DistrictPanel,
    values: &BTreeMap<(String, String), f64>,
    controls: &[String],
) -> Result<(PanelFrame, usize)> {
    let mut rows = Vec::new();
    let mut skipped_missing = 0usize;
    for row in &panel.rows {
        let key = (row.district_id.clone(), row.period.to_string());
        let Some(value) = values.get(&key) else {
            skipped_missing += 1;
            continue;
        };
        let controls = controls
            .iter()
            .map(|name| control_value(row, name))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(FrameRow {
            district_id: row.district_id.clone(),
            region_id: row.region_id.clone(),
            fiscal_year: row.period.fiscal_year(),
            period_label: row.period.to_string(),
            outcome: *value,
            display_level: *value,
            austerity: row.austerity_hundreds(),
            post_fraction: None,
            weight: row.weight,
            controls,
        });
    }
    Ok((
        PanelFrame {
            control_names: controls.to_vec(),
            rows,
        },
        skipped_missing,
    ))
}

/// Per-district cohort context from the panel: austerity in £100s, mean row
/// weight, region, and row-averaged control values.
pub fn district_context_from_panel(
    panel: &DistrictPanel,
    controls: &[String],
) -> Result<(BTreeMap<String, f64>, BTreeMap<String, DistrictContext>)> {
    let mut austerity = BTreeMap::new();
    let mut acc: BTreeMap<String, (String, f64, Vec<f64>, usize)> = BTreeMap::new();
    for row in &panel.rows {
        austerity.entry(row.district_id.clone()).or_insert(row.austerity_hundreds());
        let values = controls
            .iter()
            .map(|name| control_value(row, name))
            .collect::<Result<Vec<f64>>>()?;
        let entry = acc.entry(row.district_id.clone()).or_insert_with(|| {
            (row.region_id.clone(), 0.0, vec![0.0; controls.len()], 0)
        });
        entry.1 += row.weight;
        for (slot, v) in values.iter().enumerate() {
            entry.2[slot] += v;
        }
        entry.3 += 1;
    }
    let context = acc
        .into_iter()
        .map(|(district, (region_id, weight_sum, control_sums, n))| {
            let n = n as f64;
            (
                district,
                DistrictContext {
                    region_id,
                    weight: weight_sum / n,
                    controls: control_sums.into_iter().map(|s| s / n).collect(),
                },
            )
        })
        .collect();
    Ok((austerity, context))
}

// ---------------------------------------------------------------------------
// Recidivism

/// Derived outcomes for one cohort; None marks an undefined ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecidivismOutcomes {
    /// reoffenders / offenders.
    pub rate: Option<f64>,
    /// reoffences / offenders.
    pub reoffences_per_offender: Option<f64>,
    /// reoffences / reoffenders.
    pub reoffences_per_reoffender: Option<f64>,
    /// (reoffences / reoffenders) / (prior_offences / offenders).
    pub intensity_ratio: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecidivismOutcome {
    Rate,
    ReoffencesPerOffender,
    ReoffencesPerReoffender,
    IntensityRatio,
}

impl RecidivismOutcomes {
    pub fn get(&self, which: RecidivismOutcome) -> Option<f64> {
        match which {
            RecidivismOutcome::Rate => self.rate,
            RecidivismOutcome::ReoffencesPerOffender => self.reoffences_per_offender,
            RecidivismOutcome::ReoffencesPerReoffender => self.reoffences_per_reoffender,
            RecidivismOutcome::IntensityRatio => self.intensity_ratio,
        }
    }
}

/// Cohort outcome arithmetic with explicit undefined domains.
pub fn compute_recidivism_outcomes(cohort: &RecidivismCohort) -> RecidivismOutcomes {
    if cohort.offenders == 0 {
        return RecidivismOutcomes {
            rate: None,
            reoffences_per_offender: None,
            reoffences_per_reoffender: None,
            intensity_ratio: None,
        };
    }
    let offenders = cohort.offenders as f64;
    let rate = Some(cohort.reoffenders as f64 / offenders);
    let reoffences_per_offender = Some(cohort.reoffences as f64 / offenders);
    let reoffences_per_reoffender = if cohort.reoffenders == 0 {
        None
    } else {
        Some(cohort.reoffences as f64 / cohort.reoffenders as f64)
    };
    let intensity_ratio = match (reoffences_per_reoffender, cohort.prior_offences) {
        (Some(rpr), prior) if prior > 0 => Some(rpr / (prior as f64 / offenders)),
        _ => None,
    };
    RecidivismOutcomes {
        rate,
        reoffences_per_offender,
        reoffences_per_reoffender,
        intensity_ratio,
    }
}

/// Share of a four-quarter cohort window falling in the post era: the
/// fraction of member quarters starting at or after `policy_start`.
pub fn fractional_post(cohort_start: Quarter, policy_start: YearMonth) -> f64 {
    let mut post_quarters = 0u32;
    for offset in 0..4 {
        let start = cohort_start.offset(offset).start_month();
        if start.index() >= policy_start.index() {
            post_quarters += 1;
        }
    }
    f64::from(post_quarters) / 4.0
}

/// District-level context for cohort rows: region, weight, and control
/// values aligned with a frame's control names.
#[derive(Clone, Debug)]
pub struct DistrictContext {
    pub region_id: String,
    pub weight: f64,
    pub controls: Vec<f64>,
}

/// Builds the cohort estimation frame for one outcome. Cohorts whose outcome
/// is undefined are skipped and counted.
pub fn recidivism_frame(
    cohorts: &[RecidivismCohort],
    austerity_hundreds: &BTreeMap<String, f64>,
    context: &BTreeMap<String, DistrictContext>,
    control_names: &[String],
    outcome: RecidivismOutcome,
) -> Result<(PanelFrame, usize)> {
    let mut rows = Vec::new();
    let mut skipped_undefined = 0usize;
    for cohort in cohorts {
        let Some(value) = compute_recidivism_outcomes(cohort).get(outcome) else {
            skipped_undefined += 1;
            continue;
        };
        let Some(ctx) = context.get(&cohort.district_id) else {
            return Err(Error::Data(format!(
                "district {} has no covariate context",
                cohort.district_id
            )));
        };
        let Some(austerity) = austerity_hundreds.get(&cohort.district_id) else {
            return Err(Error::Data(format!(
                "district {} has no austerity value",
                cohort.district_id
            )));
        };
        if ctx.controls.len() != control_names.len() {
            return Err(Error::Config(format!(
                "district {} context has {} control values for {} names",
                cohort.district_id,
                ctx.controls.len(),
                control_names.len()
            )));
        }
        rows.push(FrameRow {
            district_id: cohort.district_id.clone(),
            region_id: ctx.region_id.clone(),
            fiscal_year: cohort.cohort_start.start_month().fiscal_year(),
            period_label: cohort.cohort_start.to_string(),
            outcome: value,
            display_level: value,
            austerity: *austerity,
            post_fraction: Some(fractional_post(cohort.cohort_start, POLICY_START)),
            weight: ctx.weight,
            controls: ctx.controls.clone(),
        });
    }
    Ok((
        PanelFrame {
            control_names: control_names.to_vec(),
            rows,
        },
        skipped_undefined,
    ))
}

/// Fractional-post DD on a cohort frame.
pub fn run_recidivism_dd(frame: &PanelFrame, config: &SpecConfig) -> Result<DdFit> {
    if !matches!(config.post, PostKind::FractionalCohort) {
        return Err(Error::Config(
            "run_recidivism_dd requires the fractional cohort post plan".into(),
        ));
    }
    run_dd(frame, config)
}

// ---------------------------------------------------------------------------
// Deprivation index and neighborhood profile

/// Four-domain deprivation index: weighted domains rescaled to the original
/// index's level. Weights 0.135, 0.135, 0.093, 0.093 over health, education,
/// housing barriers, and living environment, divided by their sum 0.456.
pub fn adjusted_imd(scores: &ImdScores) -> f64 {
    (0.135 * scores.health
        + 0.135 * scores.education
        + 0.093 * scores.housing_barriers
        + 0.093 * scores.living_env)
        / 0.456
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborhoodOutcome {
    Total,
    Property,
    Violent,
}

impl NeighborhoodOutcome {
    fn value(self, row: &NeighborhoodYear) -> f64 {
        match self {
            NeighborhoodOutcome::Total => row.total as f64,
            NeighborhoodOutcome::Property => row.property as f64,
            NeighborhoodOutcome::Violent => row.violent as f64,
        }
    }
}

/// Mean crime change per deprivation percentile.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChangeProfile {
    /// percentile (1-100) → mean post-minus-pre change across neighborhoods.
    pub percentile_means: BTreeMap<u8, f64>,
    pub neighborhoods_used: usize,
    /// Neighborhoods dropped for missing one of the requested years.
    pub excluded_missing_years: usize,
    pub residualized: bool,
}

/// Per-neighborhood crime change between two year windows, averaged per
/// adjusted-deprivation percentile. When `residualized`, counts are first
/// demeaned within district-year (removing shared district shocks);
/// otherwise raw counts are differenced.
pub fn neighborhood_change_profile(
    rows: &[NeighborhoodYear],
    pre_years: &[i32],
    post_years: &[i32],
    outcome: NeighborhoodOutcome,
    residualized: bool,
) -> Result<ChangeProfile> {
    if pre_years.is_empty() || post_years.is_empty() {
        return Err(Error::Config("both year windows must be nonempty".into()));
    }
    let wanted: BTreeSet<i32> = pre_years.iter().chain(post_years).copied().collect();

    // District-year means for the residualized variant.
    let mut cell_sums: HashMap<(&str, i32), (f64, usize)> = HashMap::new();
    for row in rows {
        if wanted.contains(&row.year) {
            let e = cell_sums
                .entry((row.district_id.as_str(), row.year))
                .or_insert((0.0, 0));
            e.0 += outcome.value(row);
            e.1 += 1;
        }
    }
    let value_of = |row: &NeighborhoodYear| -> f64 {
        let raw = outcome.value(row);
        if residualized {
            let (sum, n) = cell_sums[&(row.district_id.as_str(), row.year)];
            raw - sum / n as f64
        } else {
            raw
        }
    };

    let mut per_neighborhood: BTreeMap<&str, (BTreeMap<i32, f64>, u8)> = BTreeMap::new();
    for row in rows {
        if !wanted.contains(&row.year) {
            continue;
        }
        let entry = per_neighborhood
            .entry(row.lsoa_code.as_str())
            .or_insert_with(|| (BTreeMap::new(), row.adjusted_imd_percentile));
        entry.0.insert(row.year, value_of(row));
    }

    let mut excluded_missing_years = 0usize;
    let mut percentile_acc: BTreeMap<u8, (f64, usize)> = BTreeMap::new();
    let mut used = 0usize;
    for (_lsoa, (by_year, percentile)) in &per_neighborhood {
        if !wanted.iter().all(|y| by_year.contains_key(y)) {
            excluded_missing_years += 1;
            continue;
        }
        let mean = |years: &[i32]| -> f64 {
            years.iter().map(|y| by_year[y]).sum::<f64>() / years.len() as f64
        };
        let diff = mean(post_years) - mean(pre_years);
        let e = percentile_acc.entry(*percentile).or_insert((0.0, 0));
        e.0 += diff;
        e.1 += 1;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Data(
            "no neighborhood spans both year windows".into(),
        ));
    }
    Ok(ChangeProfile {
        percentile_means: percentile_acc
            .into_iter()
            .map(|(p, (sum, n))| (p, sum / n as f64))
            .collect(),
        neighborhoods_used: used,
        excluded_missing_years,
        residualized,
    })
}

// ---------------------------------------------------------------------------
// Effect summaries

/// Scale the outcome was estimated on, which fixes the percent arithmetic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeScale {
    /// Log outcome: percent per SD = coefficient × SD × 100.
    LogRate,
    /// Level outcome: percent per SD = coefficient × SD / baseline × 100.
    Level,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectSummary {
    pub coefficient: f64,
    pub treatment_sd: f64,
    pub baseline: Option<f64>,
    /// Percent change in the outcome for a one-SD treatment increase.
    pub percent_per_sd: f64,
}

/// Percent effect of a one-SD increase in the continuous treatment.
pub fn effect_summary(
    coefficient: f64,
    treatment_sd: f64,
    scale: OutcomeScale,
    baseline: Option<f64>,
) -> Result<EffectSummary> {
    let percent_per_sd = match scale {
        OutcomeScale::LogRate => coefficient * treatment_sd * 100.0,
        OutcomeScale::Level => {
            let Some(base) = baseline else {
                return Err(Error::Config(
                    "level-scale summaries need a baseline outcome level".into(),
                ));
            };
            if base == 0.0 {
                return Err(Error::Config("baseline outcome level is zero".into()));
            }
            coefficient * treatment_sd / base * 100.0
        }
    };
    Ok(EffectSummary {
        coefficient,
        treatment_sd,
        baseline,
        percent_per_sd,
    })
}

/// Percent effect of the binary treatment switching on.
pub fn binary_effect_percent(
    coefficient: f64,
    scale: OutcomeScale,
    baseline: Option<f64>,
) -> Result<f64> {
    match scale {
        OutcomeScale::LogRate => Ok(coefficient * 100.0),
        OutcomeScale::Level => {
            let Some(base) = baseline else {
                return Err(Error::Config(
                    "level-scale summaries need a baseline outcome level".into(),
                ));
            };
            if base == 0.0 {
                return Err(Error::Config("baseline outcome level is zero".into()));
            }
            Ok(coefficient / base * 100.0)
        }
    }
}
