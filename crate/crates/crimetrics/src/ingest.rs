//! Ingestion of street-level crime CSVs and auxiliary district tables.
//!
//! Raw incident files are police.uk-shaped: one row per recorded crime with a
//! year-month, snap-point coordinates, a location label, an LSOA code, and a
//! crime-type string. This module parses them, classifies types into the
//! property/violent/other scheme, aggregates to district-period count tables,
//! and joins covariates and treatment intensity into the analysis panel.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::{Error, Result};

/// Great Britain bounding box; records outside are rejected.
pub const GB_LON_RANGE: (f64, f64) = (-8.65, 1.77);
pub const GB_LAT_RANGE: (f64, f64) = (49.8, 60.9);

// ---------------------------------------------------------------------------
// Calendar types
// ---------------------------------------------------------------------------

/// A calendar year-month, parsed from `YYYY-MM`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct YearMonth {
    pub year: i32,
    pub month: u8,
}

impl YearMonth {
    pub fn new(year: i32, month: u8) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::Data(format!("month out of range: {year}-{month}")));
        }
        Ok(YearMonth { year, month })
    }

    /// Fiscal year containing this month: fiscal year Y runs April Y to March Y+1.
    pub fn fiscal_year(self) -> i32 {
        if self.month >= 4 {
            self.year
        } else {
            self.year - 1
        }
    }

    /// Months since year 0, for ordering and arithmetic.
    pub fn index(self) -> i32 {
        self.year * 12 + i32::from(self.month) - 1
    }
}

impl FromStr for YearMonth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Data(format!("expected YYYY-MM, got {s:?}"));
        let (y, m) = s.trim().split_once('-').ok_or_else(bad)?;
        let year: i32 = y.parse().map_err(|_| bad())?;
        let month: u8 = m.parse().map_err(|_| bad())?;
        YearMonth::new(year, month)
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

/// A calendar quarter, parsed from `YYYY-QN`. Quarters start in January,
/// April, July, and October.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct Quarter {
    pub year: i32,
    pub quarter: u8,
}

impl Quarter {
    pub fn new(year: i32, quarter: u8) -> Result<Self> {
        if !(1..=4).contains(&quarter) {
            return Err(Error::Data(format!("quarter out of range: {year}-Q{quarter}")));
        }
        Ok(Quarter { year, quarter })
    }

    pub fn start_month(self) -> YearMonth {
        YearMonth {
            year: self.year,
            month: (self.quarter - 1) * 3 + 1,
        }
    }

    /// Quarters since year 0, for ordering and window arithmetic.
    pub fn index(self) -> i32 {
        self.year * 4 + i32::from(self.quarter) - 1
    }

    pub fn offset(self, quarters: i32) -> Quarter {
        let idx = self.index() + quarters;
        Quarter {
            year: idx.div_euclid(4),
            quarter: (idx.rem_euclid(4) + 1) as u8,
        }
    }
}

impl FromStr for Quarter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Data(format!("expected YYYY-QN, got {s:?}"));
        let (y, q) = s.trim().split_once("-Q").ok_or_else(bad)?;
        let year: i32 = y.parse().map_err(|_| bad())?;
        let quarter: u8 = q.parse().map_err(|_| bad())?;
        Quarter::new(year, quarter)
    }
}

impl fmt::Display for Quarter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-Q{}", self.year, self.quarter)
    }
}

// ---------------------------------------------------------------------------
// Crime classification
// ---------------------------------------------------------------------------

/// Crime category under the fixed three-way scheme.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub enum Category {
    Property,
    Violent,
    Other,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Property => "property",
            Category::Violent => "violent",
            Category::Other => "other",
        }
    }
}

/// Canonical form of a raw crime-type string: lowercased, whitespace
/// collapsed, and the "offenses" spelling unified to "offences" so that both
/// variants of the published category names match.
pub fn normalize_crime_type(raw: &str) -> String {
    let lower = raw.to_lowercase();
    let collapsed: Vec<&str> = lower.split_whitespace().collect();
    collapsed.join(" ").replace("offenses", "offences")
}

const PROPERTY_TYPES: [&str; 8] = [
    "bicycle theft",
    "burglary",
    "criminal damage and arson",
    "other theft",
    "robbery",
    "shoplifting",
    "theft from the person",
    "vehicle crime",
];

// Stored without the optional trailing "offences" so that e.g. both
// "Public order" and "Public order offences" match.
const VIOLENT_TYPES: [&str; 4] = [
    "possession of weapons",
    "public order",
    "violence and sexual",
    "public disorder and weapons",
];

/// Maps a raw crime-type string to its category. Total mapping: anything not
/// on the property or violent lists is `Other` (still counted in total crime).
pub fn classify_crime(raw_type: &str) -> Category {
    let norm = normalize_crime_type(raw_type);
    let stem = norm.strip_suffix(" offences").unwrap_or(&norm);
    if PROPERTY_TYPES.contains(&norm.as_str()) {
        Category::Property
    } else if VIOLENT_TYPES.contains(&stem) {
        Category::Violent
    } else {
        Category::Other
    }
}

// ---------------------------------------------------------------------------
// Crime records
// ---------------------------------------------------------------------------

/// One recorded crime at a snap-point street location.
#[derive(Clone, Debug)]
pub struct CrimeRecord {
    pub month: YearMonth,
    pub longitude: f64,
    pub latitude: f64,
    pub location_label: String,
    pub lsoa_code: String,
    /// Normalized crime-type string (see [`normalize_crime_type`]).
    pub raw_type: String,
    pub category: Category,
    /// Filled in once the LSOA code has been resolved against a [`GeoLookup`].
    pub district_id: Option<String>,
}

/// Street identity: snap-point coordinates at 10^-6 degree plus the location
/// label. No geometric snapping; the source data repeats exact coordinates.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct StreetKey {
    pub longitude_fixed: i64,
    pub latitude_fixed: i64,
    pub location_label: String,
}

impl StreetKey {
    pub fn new(longitude: f64, latitude: f64, location_label: &str) -> Self {
        // f64::round ties half away from zero, which keeps the key stable
        // for coordinates printed with exactly six decimals.
        StreetKey {
            longitude_fixed: (longitude * 1e6).round() as i64,
            latitude_fixed: (latitude * 1e6).round() as i64,
            location_label: location_label.to_owned(),
        }
    }

    pub fn from_record(record: &CrimeRecord) -> Self {
        StreetKey::new(record.longitude, record.latitude, &record.location_label)
    }
}

/// Column-name configuration for crime CSVs, with police.uk defaults.
#[derive(Clone, Debug)]
pub struct CrimeCsvSchema {
    pub month: String,
    pub longitude: String,
    pub latitude: String,
    pub location: String,
    pub lsoa: String,
    pub crime_type: String,
    /// Inclusive sample window; rows outside are rejected and counted.
    pub window: Option<(YearMonth, YearMonth)>,
}

impl Default for CrimeCsvSchema {
    fn default() -> Self {
        CrimeCsvSchema {
            month: "Month".into(),
            longitude: "Longitude".into(),
            latitude: "Latitude".into(),
            location: "Location".into(),
            lsoa: "LSOA code".into(),
            crime_type: "Crime type".into(),
            window: None,
        }
    }
}

/// Per-row rejection with the source line number.
#[derive(Clone, Debug)]
pub struct RowRejection {
    pub line: u64,
    pub reason: String,
}

/// Accounting for every input row: accepted or rejected with a reason.
#[derive(Clone, Debug, Default)]
pub struct RejectionReport {
    pub rows_read: usize,
    pub accepted: usize,
    pub rejections: Vec<RowRejection>,
}

impl RejectionReport {
    pub fn rejected(&self) -> usize {
        self.rejections.len()
    }
}

/// Parses one crime CSV. Malformed rows are rejected (with line numbers and
/// reasons), never silently dropped; a missing required column is fatal.
pub fn parse_crime_csv(
    path: &Path,
    schema: &CrimeCsvSchema,
) -> Result<(Vec<CrimeRecord>, RejectionReport)> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("{}: missing required column {name:?}", path.display())))
    };
    let c_month = col(&schema.month)?;
    let c_lon = col(&schema.longitude)?;
    let c_lat = col(&schema.latitude)?;
    let c_loc = col(&schema.location)?;
    let c_lsoa = col(&schema.lsoa)?;
    let c_type = col(&schema.crime_type)?;

    let mut records = Vec::new();
    let mut report = RejectionReport::default();
    for row in reader.records() {
        let row = row?;
        report.rows_read += 1;
        let line = row.position().map_or(0, |p| p.line());
        let reject = |reason: String, report: &mut RejectionReport| {
            report.rejections.push(RowRejection { line, reason });
        };

        let field = |idx: usize| row.get(idx).unwrap_or("").trim();
        let month = match field(c_month).parse::<YearMonth>() {
            Ok(m) => m,
            Err(_) => {
                reject(format!("unparseable month {:?}", field(c_month)), &mut report);
                continue;
            }
        };
        if let Some((lo, hi)) = schema.window {
            if month < lo || month > hi {
                reject(format!("month {month} outside sample window"), &mut report);
                continue;
            }
        }
        let longitude = match field(c_lon).parse::<f64>() {
            Ok(v) => v,
            Err(_) => {
                reject(format!("unparseable longitude {:?}", field(c_lon)), &mut report);
                continue;
            }
        };
        let latitude = match field(c_lat).parse::<f64>() {
            Ok(v) => v,
            Err(_) => {
                reject(format!("unparseable latitude {:?}", field(c_lat)), &mut report);
                continue;
            }
        };
        if !(GB_LON_RANGE.0..=GB_LON_RANGE.1).contains(&longitude)
            || !(GB_LAT_RANGE.0..=GB_LAT_RANGE.1).contains(&latitude)
        {
            reject(format!("coordinates ({longitude}, {latitude}) outside Great Britain bounding box"), &mut report);
            continue;
        }
        let lsoa = field(c_lsoa);
        if lsoa.is_empty() {
            reject("missing LSOA code".into(), &mut report);
            continue;
        }
        let raw = field(c_type);
        if raw.is_empty() {
            reject("empty crime type".into(), &mut report);
            continue;
        }

        records.push(CrimeRecord {
            month,
            longitude,
            latitude,
            location_label: field(c_loc).to_owned(),
            lsoa_code: lsoa.to_owned(),
            raw_type: normalize_crime_type(raw),
            category: classify_crime(raw),
            district_id: None,
        });
        report.accepted += 1;
    }
    Ok((records, report))
}

// ---------------------------------------------------------------------------
// Geography
// ---------------------------------------------------------------------------

/// LSOA-to-district and district-to-region lookup with urban flags.
#[derive(Clone, Debug, Default)]
pub struct GeoLookup {
    lsoa_to_district: HashMap<String, String>,
    district_to_region: HashMap<String, String>,
    district_urban: HashMap<String, bool>,
}

impl GeoLookup {
    /// Builds a lookup from `(lsoa, district, region, urban)` rows, enforcing
    /// that each district maps to exactly one region.
    pub fn from_rows<I>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String, String, bool)>,
    {
        let mut lookup = GeoLookup::default();
        for (lsoa, district, region, urban) in rows {
            if let Some(existing) = lookup.district_to_region.get(&district) {
                if *existing != region {
                    return Err(Error::Data(format!(
                        "district {district} mapped to regions {existing} and {region}"
                    )));
                }
            }
            lookup.district_to_region.insert(district.clone(), region);
            lookup.district_urban.insert(district.clone(), urban);
            lookup.lsoa_to_district.insert(lsoa, district);
        }
        Ok(lookup)
    }

    /// Reads `lsoa_code,district_id,region_id,urban_flag` CSV.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        let col = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Config(format!("{}: missing required column {name:?}", path.display())))
        };
        let (cl, cd, cr, cu) = (col("lsoa_code")?, col("district_id")?, col("region_id")?, col("urban_flag")?);
        let mut rows = Vec::new();
        for row in reader.records() {
            let row = row?;
            let get = |i: usize| row.get(i).unwrap_or("").trim().to_owned();
            let urban = parse_bool(&get(cu))
                .ok_or_else(|| Error::Data(format!("bad urban_flag {:?} for lsoa {:?}", get(cu), get(cl))))?;
            rows.push((get(cl), get(cd), get(cr), urban));
        }
        GeoLookup::from_rows(rows)
    }

    pub fn district_of(&self, lsoa: &str) -> Option<&str> {
        self.lsoa_to_district.get(lsoa).map(String::as_str)
    }

    pub fn region_of(&self, district: &str) -> Option<&str> {
        self.district_to_region.get(district).map(String::as_str)
    }

    pub fn is_urban(&self, district: &str) -> bool {
        self.district_urban.get(district).copied().unwrap_or(false)
    }

    pub fn districts(&self) -> impl Iterator<Item = &str> {
        self.district_to_region.keys().map(String::as_str)
    }

    /// Fills `district_id` on each record; returns how many stayed unresolved.
    pub fn resolve(&self, records: &mut [CrimeRecord]) -> usize {
        let mut unresolved = 0;
        for r in records {
            match self.district_of(&r.lsoa_code) {
                Some(d) => r.district_id = Some(d.to_owned()),
                None => unresolved += 1,
            }
        }
        unresolved
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

/// Period granularity of a count table or panel.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PeriodKind {
    Month,
    FiscalYear,
}

/// A month or fiscal-year period key. Tables mix at most one kind.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub enum PeriodKey {
    Month(YearMonth),
    FiscalYear(i32),
}

impl PeriodKey {
    pub fn fiscal_year(self) -> i32 {
        match self {
            PeriodKey::Month(m) => m.fiscal_year(),
            PeriodKey::FiscalYear(y) => y,
        }
    }
}

impl fmt::Display for PeriodKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PeriodKey::Month(m) => write!(f, "{m}"),
            PeriodKey::FiscalYear(y) => write!(f, "{y}"),
        }
    }
}

impl FromStr for PeriodKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.contains('-') {
            Ok(PeriodKey::Month(s.parse()?))
        } else {
            Ok(PeriodKey::FiscalYear(s.parse().map_err(|_| {
                Error::Data(format!("expected YYYY or YYYY-MM period, got {s:?}"))
            })?))
        }
    }
}

/// Crime counts for one cell, by category and by normalized raw type.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CountSet {
    pub total: u64,
    pub property: u64,
    pub violent: u64,
    pub other: u64,
    pub by_type: BTreeMap<String, u64>,
}

impl CountSet {
    pub fn add(&mut self, category: Category, raw_type: &str) {
        self.total += 1;
        match category {
            Category::Property => self.property += 1,
            Category::Violent => self.violent += 1,
            Category::Other => self.other += 1,
        }
        *self.by_type.entry(raw_type.to_owned()).or_insert(0) += 1;
    }

    pub fn of_category(&self, category: Category) -> u64 {
        match category {
            Category::Property => self.property,
            Category::Violent => self.violent,
            Category::Other => self.other,
        }
    }

    /// Count for a set of normalized raw types (type aggregate).
    pub fn of_types(&self, types: &[String]) -> u64 {
        types.iter().map(|t| self.by_type.get(t).copied().unwrap_or(0)).sum()
    }
}

/// District-by-period crime counts.
#[derive(Clone, Debug)]
pub struct CountTable {
    pub kind: PeriodKind,
    pub cells: BTreeMap<(String, PeriodKey), CountSet>,
}

/// Outcome of resolving record geography during aggregation.
#[derive(Clone, Debug, Default)]
pub struct GeoResolution {
    pub resolved: usize,
    pub unresolved: usize,
    /// Unresolved record counts keyed by LSOA code.
    pub unresolved_lsoas: BTreeMap<String, usize>,
}

impl GeoResolution {
    pub fn unresolved_share(&self) -> f64 {
        let total = self.resolved + self.unresolved;
        if total == 0 {
            0.0
        } else {
            self.unresolved as f64 / total as f64
        }
    }
}

/// Aggregates records to exact district-period counts. Records whose LSOA
/// cannot be resolved (and that carry no pre-resolved district) are excluded
/// and reported.
pub fn aggregate_district_period(
    records: &[CrimeRecord],
    lookup: &GeoLookup,
    period_kind: PeriodKind,
) -> (CountTable, GeoResolution) {
    let mut cells: BTreeMap<(String, PeriodKey), CountSet> = BTreeMap::new();
    let mut resolution = GeoResolution::default();
    for r in records {
        let district = r
            .district_id
            .as_deref()
            .or_else(|| lookup.district_of(&r.lsoa_code));
        let Some(district) = district else {
            resolution.unresolved += 1;
            *resolution.unresolved_lsoas.entry(r.lsoa_code.clone()).or_insert(0) += 1;
            continue;
        };
        resolution.resolved += 1;
        let period = match period_kind {
            PeriodKind::Month => PeriodKey::Month(r.month),
            PeriodKind::FiscalYear => PeriodKey::FiscalYear(r.month.fiscal_year()),
        };
        cells
            .entry((district.to_owned(), period))
            .or_default()
            .add(r.category, &r.raw_type);
    }
    (CountTable { kind: period_kind, cells }, resolution)
}

// ---------------------------------------------------------------------------
// Covariates, treatment, panel
// ---------------------------------------------------------------------------

/// District covariates for one month.
#[derive(Clone, Debug)]
pub struct CovariateRow {
    pub district_id: String,
    pub month: YearMonth,
    pub population: f64,
    pub working_age_population: f64,
    pub police_per_1000: f64,
    pub median_weekly_wage: f64,
    /// Male population shares for ages 10-17, 18-24, 25-30, 31-40, 41-50.
    pub male_shares: [f64; 5],
}

pub const MALE_SHARE_NAMES: [&str; 5] = [
    "share_m_10_17",
    "share_m_18_24",
    "share_m_25_30",
    "share_m_31_40",
    "share_m_41_50",
];

/// Reads `district_id,period,population,working_age_population,police_per_1000,median_weekly_wage,share_m_*` CSV.
pub fn parse_covariates_csv(path: &Path) -> Result<Vec<CovariateRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("{}: missing required column {name:?}", path.display())))
    };
    let cd = col("district_id")?;
    let cp = col("period")?;
    let cpop = col("population")?;
    let cwap = col("working_age_population")?;
    let cpol = col("police_per_1000")?;
    let cwage = col("median_weekly_wage")?;
    let mut cshares = [0usize; 5];
    for (i, name) in MALE_SHARE_NAMES.iter().enumerate() {
        cshares[i] = col(name)?;
    }
    let mut rows = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let get = |i: usize| row.get(i).unwrap_or("").trim().to_owned();
        let num = |i: usize| -> Result<f64> {
            get(i)
                .parse()
                .map_err(|_| Error::Data(format!("{}: line {line}: bad numeric field {:?}", path.display(), get(i))))
        };
        let mut male_shares = [0.0; 5];
        for (i, c) in cshares.iter().enumerate() {
            male_shares[i] = num(*c)?;
        }
        rows.push(CovariateRow {
            district_id: get(cd),
            month: get(cp).parse()?,
            population: num(cpop)?,
            working_age_population: num(cwap)?,
            police_per_1000: num(cpol)?,
            median_weekly_wage: num(cwage)?,
            male_shares,
        });
    }
    Ok(rows)
}

/// Per-district treatment intensity in £ per working-age adult per year.
#[derive(Clone, Debug)]
pub struct AusterityRow {
    pub district_id: String,
    pub sai_pounds: f64,
}

/// Reads `district_id,sai_pounds` CSV; duplicate districts with conflicting
/// values are a data error.
pub fn parse_austerity_csv(path: &Path) -> Result<Vec<AusterityRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("{}: missing required column {name:?}", path.display())))
    };
    let cd = col("district_id")?;
    let cs = col("sai_pounds")?;
    let mut seen: HashMap<String, f64> = HashMap::new();
    let mut rows = Vec::new();
    for row in reader.records() {
        let row = row?;
        let district = row.get(cd).unwrap_or("").trim().to_owned();
        let sai: f64 = row
            .get(cs)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("bad sai_pounds for district {district:?}")))?;
        if let Some(prev) = seen.get(&district) {
            if *prev != sai {
                return Err(Error::Data(format!(
                    "district {district} has conflicting austerity values {prev} and {sai}"
                )));
            }
            continue;
        }
        seen.insert(district.clone(), sai);
        rows.push(AusterityRow { district_id: district, sai_pounds: sai });
    }
    Ok(rows)
}

/// Panel weight source: period-specific population (default) or the
/// district's mean population over the earliest fiscal year in the sample.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub enum WeightSource {
    #[default]
    PeriodPopulation,
    BaseYearPopulation,
}

/// Options for panel assembly.
#[derive(Clone, Debug, Default)]
pub struct PanelConfig {
    pub weight: WeightSource,
    /// Keep only urban districts (the analysis sample). Non-urban cells are
    /// dropped and counted, not errors.
    pub urban_only: bool,
}

/// One district-period observation of the analysis panel.
#[derive(Clone, Debug)]
pub struct PanelRow {
    pub district_id: String,
    pub region_id: String,
    pub period: PeriodKey,
    pub counts: CountSet,
    pub population: f64,
    pub working_age_population: f64,
    /// £ per working-age adult per year; constant within district.
    pub austerity_sai: f64,
    pub police_per_1000: f64,
    pub median_weekly_wage: f64,
    pub male_shares: [f64; 5],
    pub weight: f64,
}

impl PanelRow {
    /// Treatment value as exposed to estimators: £100s per working-age adult.
    pub fn austerity_hundreds(&self) -> f64 {
        self.austerity_sai / 100.0
    }

    /// Crimes per 1000 population.
    pub fn rate(&self, count: u64) -> f64 {
        1000.0 * count as f64 / self.population
    }

    /// Log crime rate; undefined for zero counts.
    pub fn log_rate(&self, count: u64) -> Option<f64> {
        if count == 0 {
            None
        } else {
            Some(self.rate(count).ln())
        }
    }
}

/// The assembled district-period analysis panel, sorted by (district, period).
#[derive(Clone, Debug)]
pub struct DistrictPanel {
    pub kind: PeriodKind,
    pub rows: Vec<PanelRow>,
}

impl DistrictPanel {
    pub fn district_ids(&self) -> BTreeSet<String> {
        self.rows.iter().map(|r| r.district_id.clone()).collect()
    }
}

/// Diagnostics from panel assembly.
#[derive(Clone, Debug, Default)]
pub struct PanelDiagnostics {
    /// Count cells dropped because their district is not flagged urban.
    pub non_urban_cells: usize,
    /// Count cells dropped because their district has no austerity value.
    pub missing_austerity_districts: BTreeSet<String>,
    /// Rows with zero total crime (retained; excluded later from log fits).
    pub zero_total_rows: usize,
}

/// Joins counts, covariates, and treatment into the analysis panel.
///
/// Covariates must cover every in-sample district-period; a gap is fatal and
/// names the missing cell. For fiscal-year tables, monthly covariates are
/// averaged within the fiscal year.
pub fn assemble_panel(
    counts: &CountTable,
    covariates: &[CovariateRow],
    austerity: &[AusterityRow],
    lookup: &GeoLookup,
    config: &PanelConfig,
) -> Result<(DistrictPanel, PanelDiagnostics)> {
    let mut cov_by_cell: HashMap<(String, PeriodKey), Vec<&CovariateRow>> = HashMap::new();
    for c in covariates {
        let period = match counts.kind {
            PeriodKind::Month => PeriodKey::Month(c.month),
            PeriodKind::FiscalYear => PeriodKey::FiscalYear(c.month.fiscal_year()),
        };
        cov_by_cell.entry((c.district_id.clone(), period)).or_default().push(c);
    }
    let sai_by_district: HashMap<&str, f64> =
        austerity.iter().map(|a| (a.district_id.as_str(), a.sai_pounds)).collect();

    // Base-year weights: mean population over the earliest fiscal year.
    let base_fy = counts.cells.keys().map(|(_, p)| p.fiscal_year()).min();
    let mut base_weight: HashMap<String, (f64, usize)> = HashMap::new();
    if config.weight == WeightSource::BaseYearPopulation {
        let Some(base_fy) = base_fy else {
            return Err(Error::Data("cannot derive base-year weights from an empty count table".into()));
        };
        for c in covariates {
            if c.month.fiscal_year() == base_fy {
                let e = base_weight.entry(c.district_id.clone()).or_insert((0.0, 0));
                e.0 += c.population;
                e.1 += 1;
            }
        }
    }

    let mut rows = Vec::new();
    let mut diagnostics = PanelDiagnostics::default();
    for ((district, period), cell) in &counts.cells {
        if config.urban_only && !lookup.is_urban(district) {
            diagnostics.non_urban_cells += 1;
            continue;
        }
        let region = lookup
            .region_of(district)
            .ok_or_else(|| Error::Data(format!("district {district} has no region in the lookup")))?
            .to_owned();
        let Some(&sai) = sai_by_district.get(district.as_str()) else {
            diagnostics.missing_austerity_districts.insert(district.clone());
            continue;
        };
        let cov = cov_by_cell
            .get(&(district.clone(), *period))
            .ok_or_else(|| Error::Data(format!("no covariates for district {district}, period {period}")))?;
        let n = cov.len() as f64;
        let mean = |f: &dyn Fn(&CovariateRow) -> f64| cov.iter().map(|c| f(c)).sum::<f64>() / n;
        let population = mean(&|c| c.population);
        let working_age_population = mean(&|c| c.working_age_population);
        let police_per_1000 = mean(&|c| c.police_per_1000);
        let median_weekly_wage = mean(&|c| c.median_weekly_wage);
        let mut male_shares = [0.0; 5];
        for (i, share) in male_shares.iter_mut().enumerate() {
            *share = mean(&|c| c.male_shares[i]);
        }
        for (i, share) in male_shares.iter().enumerate() {
            if !(*share > 0.0 && *share < 1.0) {
                return Err(Error::Data(format!(
                    "district {district}, period {period}: {} = {share} outside (0,1)",
                    MALE_SHARE_NAMES[i]
                )));
            }
        }
        if male_shares.iter().sum::<f64>() >= 1.0 {
            return Err(Error::Data(format!(
                "district {district}, period {period}: male shares sum to ≥ 1"
            )));
        }
        if !(population > 0.0) {
            return Err(Error::Data(format!(
                "district {district}, period {period}: population {population} must be positive"
            )));
        }
        let weight = match config.weight {
            WeightSource::PeriodPopulation => population,
            WeightSource::BaseYearPopulation => {
                let (sum, count) = base_weight.get(district).copied().unwrap_or((0.0, 0));
                if count == 0 {
                    return Err(Error::Data(format!(
                        "district {district}: no base-year covariates for base-year weighting"
                    )));
                }
                sum / count as f64
            }
        };
        if cell.total == 0 {
            diagnostics.zero_total_rows += 1;
        }
        rows.push(PanelRow {
            district_id: district.clone(),
            region_id: region,
            period: *period,
            counts: cell.clone(),
            population,
            working_age_population,
            austerity_sai: sai,
            police_per_1000,
            median_weekly_wage,
            male_shares,
            weight,
        });
    }
    Ok((DistrictPanel { kind: counts.kind, rows }, diagnostics))
}

// ---------------------------------------------------------------------------
// Neighborhood and recidivism inputs
// ---------------------------------------------------------------------------

/// Four-domain deprivation scores for one LSOA.
#[derive(Clone, Copy, Debug)]
pub struct ImdScores {
    pub health: f64,
    pub education: f64,
    pub housing_barriers: f64,
    pub living_env: f64,
}

/// One LSOA's deprivation record.
#[derive(Clone, Debug)]
pub struct ImdRow {
    pub lsoa_code: String,
    pub scores: ImdScores,
}

/// Reads `lsoa_code,health,education,housing_barriers,living_env` CSV.
pub fn parse_imd_csv(path: &Path) -> Result<Vec<ImdRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("{}: missing required column {name:?}", path.display())))
    };
    let (cl, ch, ce, cho, cli) =
        (col("lsoa_code")?, col("health")?, col("education")?, col("housing_barriers")?, col("living_env")?);
    let mut rows = Vec::new();
    for row in reader.records() {
        let row = row?;
        let get = |i: usize| row.get(i).unwrap_or("").trim().to_owned();
        let num = |i: usize| -> Result<f64> {
            get(i)
                .parse()
                .map_err(|_| Error::Data(format!("bad IMD score {:?} for lsoa {:?}", get(i), get(cl))))
        };
        rows.push(ImdRow {
            lsoa_code: get(cl),
            scores: ImdScores {
                health: num(ch)?,
                education: num(ce)?,
                housing_barriers: num(cho)?,
                living_env: num(cli)?,
            },
        });
    }
    Ok(rows)
}

/// Neighborhood-by-year crime counts with deprivation scores.
#[derive(Clone, Debug)]
pub struct NeighborhoodYear {
    pub lsoa_code: String,
    pub district_id: String,
    /// Fiscal year.
    pub year: i32,
    pub total: u64,
    pub property: u64,
    pub violent: u64,
    pub imd: ImdScores,
    /// 1-100, computed over all neighborhoods in the loaded sample.
    pub adjusted_imd_percentile: u8,
}

/// One recidivism cohort observation: a district, a four-quarter cohort
/// window identified by its start quarter, and an offender group.
#[derive(Clone, Debug)]
pub struct RecidivismCohort {
    pub district_id: String,
    pub cohort_start: Quarter,
    pub group: String,
    pub offenders: u64,
    pub reoffenders: u64,
    pub reoffences: u64,
    pub prior_offences: u64,
}

impl RecidivismCohort {
    /// Inclusive final quarter of the four-quarter cohort window.
    pub fn cohort_end(&self) -> Quarter {
        self.cohort_start.offset(3)
    }
}

/// Reads `district_id,cohort_start_quarter,group,offenders,reoffenders,reoffences,prior_offences` CSV.
pub fn parse_recidivism_csv(path: &Path) -> Result<Vec<RecidivismCohort>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("{}: missing required column {name:?}", path.display())))
    };
    let cd = col("district_id")?;
    let cq = col("cohort_start_quarter")?;
    let cg = col("group")?;
    let co = col("offenders")?;
    let cr = col("reoffenders")?;
    let cro = col("reoffences")?;
    let cp = col("prior_offences")?;
    let mut rows = Vec::new();
    for row in reader.records() {
        let row = row?;
        let get = |i: usize| row.get(i).unwrap_or("").trim().to_owned();
        let count = |i: usize| -> Result<u64> {
            get(i)
                .parse()
                .map_err(|_| Error::Data(format!("bad count {:?} for district {:?}", get(i), get(cd))))
        };
        let cohort = RecidivismCohort {
            district_id: get(cd),
            cohort_start: get(cq).parse()?,
            group: get(cg),
            offenders: count(co)?,
            reoffenders: count(cr)?,
            reoffences: count(cro)?,
            prior_offences: count(cp)?,
        };
        if cohort.reoffenders > cohort.offenders {
            return Err(Error::Data(format!(
                "district {}, cohort {}: reoffenders {} exceed offenders {}",
                cohort.district_id, cohort.cohort_start, cohort.reoffenders, cohort.offenders
            )));
        }
        rows.push(cohort);
    }
    Ok(rows)
}
