//! Street-level crime concentration and its Monte Carlo benchmark.
//!
//! Raw concentration cc is the minimal fraction of a district's streets,
//! taken in descending count order, that accounts for share `k` of its crime.
//! Because cc mechanically depends on the crimes-to-streets ratio, each cell
//! is benchmarked against the mean cc obtained when the same number of crimes
//! is allocated uniformly at random over the same street universe. The
//! marginal crime concentration is the simulated mean minus the raw value.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::ingest::{Category, CrimeRecord, GeoLookup, StreetKey};
use crate::seeds;
use crate::{Error, Result};

/// Default share of crime whose street coverage is measured.
pub const DEFAULT_K: f64 = 0.25;
/// Default number of uniform-allocation simulation runs per cell.
pub const DEFAULT_RUNS: u64 = 10_000;

/// Per-street crime counts for one district-year-category cell.
#[derive(Clone, Debug)]
pub struct StreetCountVector {
    counts: Vec<u64>,
    streets: u64,
    total: u64,
}

impl StreetCountVector {
    /// `streets` is the size of the street universe and must cover every
    /// street with a nonzero count; zero-count streets need not be listed.
    pub fn new(counts: Vec<u64>, streets: u64) -> Result<Self> {
        let nonzero = counts.iter().filter(|&&c| c > 0).count() as u64;
        if streets < nonzero {
            return Err(Error::Data(format!(
                "street universe of {streets} cannot hold {nonzero} streets with crimes"
            )));
        }
        if streets == 0 {
            return Err(Error::Data("empty street universe".into()));
        }
        let total = counts.iter().sum();
        Ok(StreetCountVector { counts, streets, total })
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn streets(&self) -> u64 {
        self.streets
    }

    pub fn nonzero_streets(&self) -> u64 {
        self.counts.iter().filter(|&&c| c > 0).count() as u64
    }
}

/// Crime-share threshold in crimes. The tiny relative fuzz absorbs binary
/// representation error in k×total (e.g. k=0.3, total=10) without ever
/// shifting an exact integer boundary by a whole street.
fn threshold_parts(k: f64, total: u64) -> (f64, f64) {
    let threshold = k * total as f64;
    (threshold, threshold * 1e-12)
}

fn validate_k(k: f64) -> Result<()> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::Config(format!("k must lie in (0,1], got {k}")));
    }
    Ok(())
}

/// Minimal number of streets covering the threshold, from a count-of-counts
/// table (`freq[c]` = number of streets with exactly `c` crimes, c ≥ 1).
fn min_streets_from_freq(freq: &[u64], k: f64, total: u64) -> u64 {
    let (threshold, fuzz) = threshold_parts(k, total);
    let mut cum = 0u64;
    let mut m = 0u64;
    for c in (1..freq.len()).rev() {
        for _ in 0..freq[c] {
            cum += c as u64;
            m += 1;
            if cum as f64 + fuzz >= threshold {
                return m;
            }
        }
    }
    m
}

/// Raw crime concentration: m/streets with m the minimal number of streets,
/// in descending count order, whose cumulative count reaches k×total.
/// Undefined for zero-crime cells; the caller must skip those.
pub fn crime_concentration(counts: &StreetCountVector, k: f64) -> Result<f64> {
    validate_k(k)?;
    if counts.total == 0 {
        return Err(Error::Data("crime concentration undefined for a zero-crime cell".into()));
    }
    let mut sorted: Vec<u64> = counts.counts.iter().copied().filter(|&c| c > 0).collect();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let (threshold, fuzz) = threshold_parts(k, counts.total);
    let mut cum = 0u64;
    let mut m = 0u64;
    for c in sorted {
        cum += c;
        m += 1;
        if cum as f64 + fuzz >= threshold {
            break;
        }
    }
    Ok(m as f64 / counts.streets as f64)
}

/// Mean and dispersion of simulated uniform-allocation concentration.
#[derive(Clone, Copy, Debug)]
pub struct SimulatedCc {
    /// Mean cc over runs. Exact ratio of integer street totals, so identical
    /// inputs and seed reproduce it bit-for-bit.
    pub mean: f64,
    /// Standard deviation of cc across runs.
    pub sd: f64,
    pub runs: u64,
}

impl SimulatedCc {
    /// Monte Carlo standard error of `mean`.
    pub fn se(&self) -> f64 {
        self.sd / (self.runs as f64).sqrt()
    }
}

/// Simulates uniform allocation: each run scatters `n_crimes` over
/// `n_streets` with replacement and measures concentration on the result,
/// zero-crime streets included in the denominator. Runs are sequential within
/// a call; parallelism happens across cells, so thread count cannot affect
/// output.
pub fn simulate_uniform_cc(
    n_crimes: u64,
    n_streets: u64,
    k: f64,
    runs: u64,
    seed: u64,
) -> Result<SimulatedCc> {
    validate_k(k)?;
    if n_crimes == 0 || n_streets == 0 || runs == 0 {
        return Err(Error::Config(format!(
            "simulate_uniform_cc requires positive n_crimes, n_streets, runs (got {n_crimes}, {n_streets}, {runs})"
        )));
    }
    let streets = usize::try_from(n_streets)
        .map_err(|_| Error::Config(format!("street universe too large: {n_streets}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0u32; streets];
    let mut touched: Vec<u32> = Vec::with_capacity((n_crimes.min(n_streets)) as usize);
    let mut freq: Vec<u64> = Vec::new();
    let mut sum_m = 0u64;
    let mut sum_m2 = 0u128;
    for _ in 0..runs {
        touched.clear();
        let mut max_count = 0u32;
        for _ in 0..n_crimes {
            let ix = rng.gen_range(0..streets);
            let c = &mut counts[ix];
            if *c == 0 {
                touched.push(ix as u32);
            }
            *c += 1;
            if *c > max_count {
                max_count = *c;
            }
        }
        freq.clear();
        freq.resize(max_count as usize + 1, 0);
        for &ix in &touched {
            freq[counts[ix as usize] as usize] += 1;
        }
        let m = min_streets_from_freq(&freq, k, n_crimes);
        sum_m += m;
        sum_m2 += u128::from(m) * u128::from(m);
        for &ix in &touched {
            counts[ix as usize] = 0;
        }
    }
    // Integer street totals keep the mean exact: sum_m/(runs×streets) is one
    // correctly rounded division, so a forced single-street cell yields
    // exactly 1/streets.
    let mean = sum_m as f64 / (runs as f64 * n_streets as f64);
    let mean_m = sum_m as f64 / runs as f64;
    let var_m = (sum_m2 as f64 / runs as f64 - mean_m * mean_m).max(0.0);
    let sd = var_m.sqrt() / n_streets as f64;
    Ok(SimulatedCc { mean, sd, runs })
}

/// Concentration measures for one cell.
#[derive(Clone, Copy, Debug)]
pub struct ConcentrationStats {
    pub k: f64,
    pub n_crimes: u64,
    pub n_streets: u64,
    pub cc_raw: f64,
    pub cc_sim_mean: f64,
    /// Standard deviation of simulated cc across runs.
    pub cc_sim_sd: f64,
    /// cc_sim_mean − cc_raw.
    pub mcc: f64,
    pub runs: u64,
    pub seed: u64,
}

/// Computes raw, simulated, and marginal concentration for one cell.
pub fn marginal_concentration(
    counts: &StreetCountVector,
    k: f64,
    runs: u64,
    seed: u64,
) -> Result<ConcentrationStats> {
    let cc_raw = crime_concentration(counts, k)?;
    let sim = simulate_uniform_cc(counts.total, counts.streets, k, runs, seed)?;
    Ok(ConcentrationStats {
        k,
        n_crimes: counts.total,
        n_streets: counts.streets,
        cc_raw,
        cc_sim_mean: sim.mean,
        cc_sim_sd: sim.sd,
        mcc: sim.mean - cc_raw,
        runs,
        seed,
    })
}

/// Cell category: the three crime categories plus their union.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum CellCategory {
    Total,
    Property,
    Violent,
    Other,
}

impl CellCategory {
    pub const ALL: [CellCategory; 4] =
        [CellCategory::Total, CellCategory::Property, CellCategory::Violent, CellCategory::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            CellCategory::Total => "total",
            CellCategory::Property => "property",
            CellCategory::Violent => "violent",
            CellCategory::Other => "other",
        }
    }
}

impl std::str::FromStr for CellCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CellCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown crime category {s:?}")))
    }
}

/// Street universe per district: every street observed for the district over
/// the full sample, or an explicit per-district universe size.
#[derive(Clone, Debug, Default)]
pub enum StreetUniverse {
    #[default]
    Observed,
    Explicit(HashMap<String, u64>),
}

/// One district-year-category concentration record.
#[derive(Clone, Debug)]
pub struct ConcentrationRecord {
    pub district_id: String,
    /// Fiscal year.
    pub year: i32,
    pub category: CellCategory,
    pub stats: ConcentrationStats,
}

/// Cells skipped or records dropped while building the panel.
#[derive(Clone, Debug, Default)]
pub struct ConcentrationDiagnostics {
    /// Records without a resolvable district.
    pub unresolved_records: usize,
    /// District-year-category cells with zero crimes (skipped, not imputed).
    pub empty_cells: usize,
}

/// Concentration panel: one record per district-fiscal-year-category with at
/// least one crime. Per-cell seeds derive from the master seed and the cell
/// key, so the table is identical for any execution order or thread count.
pub fn annual_concentration_panel(
    records: &[CrimeRecord],
    lookup: &GeoLookup,
    universe: &StreetUniverse,
    k: f64,
    runs: u64,
    master_seed: u64,
) -> Result<(Vec<ConcentrationRecord>, ConcentrationDiagnostics)> {
    validate_k(k)?;
    let mut diagnostics = ConcentrationDiagnostics::default();

    // counts[district][(year, street)] = per-category counts
    type CellCounts = HashMap<(i32, StreetKey), [u64; 4]>;
    let mut by_district: HashMap<&str, CellCounts> = HashMap::new();
    let mut observed_streets: HashMap<&str, std::collections::HashSet<StreetKey>> = HashMap::new();
    for record in records {
        let district = record
            .district_id
            .as_deref()
            .or_else(|| lookup.district_of(&record.lsoa_code));
        let Some(district) = district else {
            diagnostics.unresolved_records += 1;
            continue;
        };
        let key = StreetKey::from_record(record);
        observed_streets.entry(district).or_default().insert(key.clone());
        let cell = by_district
            .entry(district)
            .or_default()
            .entry((record.month.fiscal_year(), key))
            .or_insert([0; 4]);
        cell[0] += 1;
        match record.category {
            Category::Property => cell[1] += 1,
            Category::Violent => cell[2] += 1,
            Category::Other => cell[3] += 1,
        }
    }

    let mut cells: Vec<(String, i32, CellCategory, Vec<u64>, u64)> = Vec::new();
    let mut districts: Vec<&&str> = by_district.keys().collect();
    districts.sort();
    for &district in districts {
        let streets = match universe {
            StreetUniverse::Observed => observed_streets[district].len() as u64,
            StreetUniverse::Explicit(sizes) => *sizes.get(district).ok_or_else(|| {
                Error::Data(format!("street universe has no entry for district {district}"))
            })?,
        };
        let per_cell = &by_district[district];
        let mut years: Vec<i32> = per_cell.keys().map(|(y, _)| *y).collect();
        years.sort_unstable();
        years.dedup();
        for year in years {
            for category in CellCategory::ALL {
                let idx = match category {
                    CellCategory::Total => 0,
                    CellCategory::Property => 1,
                    CellCategory::Violent => 2,
                    CellCategory::Other => 3,
                };
                let counts: Vec<u64> = per_cell
                    .iter()
                    .filter(|((y, _), _)| *y == year)
                    .map(|(_, cats)| cats[idx])
                    .filter(|&c| c > 0)
                    .collect();
                if counts.is_empty() {
                    diagnostics.empty_cells += 1;
                    continue;
                }
                if streets < counts.len() as u64 {
                    return Err(Error::Data(format!(
                        "district {district}, year {year}, category {}: universe of {streets} streets \
                         smaller than {} streets with crimes",
                        category.as_str(),
                        counts.len()
                    )));
                }
                cells.push((district.to_owned(), year, category, counts, streets));
            }
        }
    }

    let records: Result<Vec<ConcentrationRecord>> = cells
        .into_par_iter()
        .map(|(district_id, year, category, counts, streets)| {
            let vector = StreetCountVector::new(counts, streets)?;
            let seed = seeds::cell_seed(master_seed, &district_id, year, category.as_str());
            let stats = marginal_concentration(&vector, k, runs, seed)?;
            Ok(ConcentrationRecord { district_id, year, category, stats })
        })
        .collect();
    let mut records = records?;
    records.sort_by(|a, b| {
        (&a.district_id, a.year, a.category).cmp(&(&b.district_id, b.year, b.category))
    });
    Ok((records, diagnostics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::normalize_crime_type;

    fn vector(counts: Vec<u64>, streets: u64) -> StreetCountVector {
        StreetCountVector::new(counts, streets).unwrap()
    }

    #[test]
    fn concentration_minimal_street_rule() {
        // 100 singleton streets in a universe of 10,000.
        let singletons = vector(vec![1; 100], 10_000);
        assert_eq!(crime_concentration(&singletons, 1.0).unwrap(), 0.01);
        assert_eq!(crime_concentration(&singletons, 0.25).unwrap(), 0.0025);
        let small = vector(vec![3, 1, 0, 0], 4);
        assert_eq!(crime_concentration(&small, 0.25).unwrap(), 0.25);
    }

    #[test]
    fn concentration_rejects_empty_cells_and_bad_k() {
        let empty = vector(vec![0, 0], 2);
        assert!(crime_concentration(&empty, 0.25).is_err());
        let some = vector(vec![1], 2);
        assert!(crime_concentration(&some, 0.0).is_err());
        assert!(crime_concentration(&some, 1.5).is_err());
    }

    #[test]
    fn inexact_k_does_not_take_an_extra_street() {
        // 0.3 × 10 rounds up in binary; the threshold fuzz keeps m at 3.
        let singletons = vector(vec![1; 10], 10);
        assert_eq!(crime_concentration(&singletons, 0.3).unwrap(), 0.3);
    }

    #[test]
    fn single_crime_simulation_is_exactly_one_street() {
        for s in [3u64, 7, 10_000] {
            let sim = simulate_uniform_cc(1, s, 0.25, 50, 9).unwrap();
            assert_eq!(sim.mean, 1.0 / s as f64);
            assert_eq!(sim.sd, 0.0);
        }
    }

    #[test]
    fn simulation_is_deterministic_for_a_seed() {
        let a = simulate_uniform_cc(100, 1_000, 0.25, 500, 42).unwrap();
        let b = simulate_uniform_cc(100, 1_000, 0.25, 500, 42).unwrap();
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.sd.to_bits(), b.sd.to_bits());
        let c = simulate_uniform_cc(100, 1_000, 0.25, 500, 43).unwrap();
        assert_ne!(a.mean.to_bits(), c.mean.to_bits());
    }

    #[test]
    fn fully_concentrated_cell_has_positive_mcc() {
        // All crimes on one street: cc_raw is the smallest possible value, so
        // any simulated spread can only raise the benchmark.
        let concentrated = vector(vec![2], 2);
        let stats = marginal_concentration(&concentrated, 1.0, 2_000, 7).unwrap();
        assert_eq!(stats.cc_raw, 0.5);
        assert!(stats.mcc > 0.0, "mcc = {}", stats.mcc);
        assert_eq!(stats.mcc, stats.cc_sim_mean - stats.cc_raw);

        let heavier = vector(vec![100], 50);
        let stats = marginal_concentration(&heavier, 0.25, 2_000, 7).unwrap();
        assert_eq!(stats.cc_raw, 1.0 / 50.0);
        assert!(stats.mcc > 0.0);
    }

    #[test]
    fn uniform_counts_have_mcc_near_zero() {
        // Raw counts drawn from the simulator's own null.
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let streets = 400usize;
        let mut counts = vec![0u64; streets];
        for _ in 0..1_000 {
            counts[rng.gen_range(0..streets)] += 1;
        }
        let vector = StreetCountVector::new(counts, streets as u64).unwrap();
        let stats = marginal_concentration(&vector, 0.25, 10_000, 5).unwrap();
        let sim_se = stats.cc_sim_sd * (1.0 + 1.0 / stats.runs as f64).sqrt();
        assert!(
            stats.mcc.abs() <= 3.0 * sim_se,
            "null mcc = {}, 3se = {}",
            stats.mcc,
            3.0 * sim_se
        );
    }

    fn crime(district: &str, month: &str, street: u32, raw: &str) -> CrimeRecord {
        CrimeRecord {
            month: month.parse().unwrap(),
            longitude: -2.5 + f64::from(street) * 1e-4,
            latitude: 51.4,
            location_label: format!("street {street}"),
            lsoa_code: format!("{district}-lsoa"),
            raw_type: normalize_crime_type(raw),
            category: crate::ingest::classify_crime(raw),
            district_id: Some(district.to_owned()),
        }
    }

    fn empty_lookup() -> GeoLookup {
        GeoLookup::from_rows([]).unwrap()
    }

    #[test]
    fn panel_matches_single_district_calls() {
        let mut records = Vec::new();
        for street in 0..20 {
            records.push(crime("D1", "2013-06", street, "Burglary"));
        }
        for street in 0..5 {
            records.push(crime("D2", "2013-06", street, "Drugs"));
            records.push(crime("D2", "2014-06", street, "Drugs"));
        }
        let (panel, diagnostics) = annual_concentration_panel(
            &records,
            &empty_lookup(),
            &StreetUniverse::Observed,
            0.25,
            400,
            99,
        )
        .unwrap();
        assert_eq!(diagnostics.unresolved_records, 0);

        let d1_total = panel
            .iter()
            .find(|r| r.district_id == "D1" && r.year == 2013 && r.category == CellCategory::Total)
            .unwrap();
        let direct = marginal_concentration(
            &vector(vec![1; 20], 20),
            0.25,
            400,
            seeds::cell_seed(99, "D1", 2013, "total"),
        )
        .unwrap();
        assert_eq!(d1_total.stats.cc_sim_mean.to_bits(), direct.cc_sim_mean.to_bits());
        assert_eq!(d1_total.stats.mcc.to_bits(), direct.mcc.to_bits());

        // D1 has no violent crimes: that cell is skipped.
        assert!(!panel
            .iter()
            .any(|r| r.district_id == "D1" && r.category == CellCategory::Violent));
        assert!(diagnostics.empty_cells > 0);
    }

    #[test]
    fn panel_is_invariant_to_thread_count() {
        let mut records = Vec::new();
        for district in ["D1", "D2", "D3", "D4"] {
            for street in 0..30 {
                records.push(crime(district, "2013-06", street % 7, "Burglary"));
                records.push(crime(district, "2014-06", street % 5, "Drugs"));
            }
        }
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                annual_concentration_panel(
                    &records,
                    &empty_lookup(),
                    &StreetUniverse::Observed,
                    0.25,
                    200,
                    123,
                )
                .unwrap()
                .0
            })
        };
        let one = run(1);
        let four = run(4);
        assert_eq!(one.len(), four.len());
        for (a, b) in one.iter().zip(four.iter()) {
            assert_eq!(a.district_id, b.district_id);
            assert_eq!(a.year, b.year);
            assert_eq!(a.category, b.category);
            assert_eq!(a.stats.cc_sim_mean.to_bits(), b.stats.cc_sim_mean.to_bits());
        }
    }

    #[test]
    fn explicit_universe_overrides_and_validates() {
        let records = vec![crime("D1", "2013-06", 1, "Burglary"), crime("D1", "2013-06", 2, "Burglary")];
        let universe = StreetUniverse::Explicit(HashMap::from([("D1".to_owned(), 10u64)]));
        let (panel, _) =
            annual_concentration_panel(&records, &empty_lookup(), &universe, 0.25, 100, 1).unwrap();
        assert_eq!(panel[0].stats.n_streets, 10);

        let too_small = StreetUniverse::Explicit(HashMap::from([("D1".to_owned(), 1u64)]));
        assert!(
            annual_concentration_panel(&records, &empty_lookup(), &too_small, 0.25, 100, 1).is_err()
        );
    }
}
