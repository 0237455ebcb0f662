//! Synthetic data-generating processes with known ground truth: the oracle
//! for every estimator. Panels follow the same structural equation the
//! estimators target, so bias, RMSE, coverage, and test size are measurable.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concentration::marginal_concentration;
use crate::concentration::StreetCountVector;
use crate::estimators::{
    assign_weighted_quintiles, crime_rate_frame, run_dd, run_ddd_quintiles, run_dynamic_dd,
    run_placebo_dd, weighted_median, CountSelector, PanelFrame, PostKind, QuintileAssignment,
    QuintileBasis, SpecConfig, TreatmentKind,
};
use crate::ingest::{CountSet, DistrictPanel, PanelRow, PeriodKey, PeriodKind, YearMonth};
use crate::nonparam::{fwl_residualize, local_linear_fit, LocalLinearConfig};
use crate::regress::CrKind;
use crate::seeds;
use crate::{Error, Result};

/// Two-sided 5% normal critical value used for coverage and rejection.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Effect of the police control on the log rate in every DGP.
pub const POLICE_EFFECT: f64 = 0.05;
/// Effect of the wage control on the log rate in every DGP.
pub const WAGE_EFFECT: f64 = -0.2;

/// Ground-truth treatment effect structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrueEffect {
    None,
    Pooled { beta: f64 },
    /// One beta per post year, in year order.
    PerYear { betas: Vec<f64> },
    /// One beta per quintile of the auxiliary district characteristic.
    Quintile { betas: [f64; 5] },
}

/// Street-level generation: scatter each cell's crimes over a street
/// universe, optionally steering post-period crimes toward the top decile.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreetConfig {
    pub streets_per_district: usize,
    /// Probability a post-period crime is redirected onto the top decile.
    pub post_reallocation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub districts: usize,
    pub regions: usize,
    /// Consecutive fiscal years starting at `first_fiscal_year`.
    pub periods: usize,
    /// Rows per fiscal year: 1 emits fiscal-year rows, 2..=12 emits that
    /// many month rows per year starting each April. Month rows match the
    /// native frequency of the rate panels, so region-by-period cells
    /// stay small relative to the sample.
    #[serde(default = "default_months_per_year")]
    pub months_per_year: usize,
    pub first_fiscal_year: i32,
    pub first_post_fiscal_year: i32,
    /// Mean of the district baseline log rate (per 1,000).
    pub baseline_log_rate: f64,
    pub district_sd: f64,
    pub region_period_sd: f64,
    /// Idiosyncratic error SD.
    pub noise_sd: f64,
    /// Within-district AR(1) coefficient of the idiosyncratic error.
    pub serial_correlation: f64,
    pub sai_mean_pounds: f64,
    pub sai_sd_pounds: f64,
    /// Inject the effect through the above-median indicator instead of the
    /// exposure level.
    pub binary_treatment: bool,
    pub effect: TrueEffect,
    pub streets: Option<StreetConfig>,
    pub seed: u64,
}

fn default_months_per_year() -> usize {
    1
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            districts: 50,
            regions: 5,
            periods: 5,
            months_per_year: 1,
            first_fiscal_year: 2011,
            first_post_fiscal_year: 2013,
            baseline_log_rate: 1.7,
            district_sd: 0.4,
            region_period_sd: 0.03,
            noise_sd: 0.04,
            serial_correlation: 0.3,
            sai_mean_pounds: 479.58,
            sai_sd_pounds: 118.62,
            binary_treatment: false,
            effect: TrueEffect::None,
            streets: None,
            seed: 0,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.districts < 10 {
            return Err(Error::Config(format!(
                "need at least 10 districts, got {}",
                self.districts
            )));
        }
        if self.regions < 2 {
            return Err(Error::Config(format!("need at least 2 regions, got {}", self.regions)));
        }
        if self.periods < 2 {
            return Err(Error::Config(format!("need at least 2 periods, got {}", self.periods)));
        }
        if !(1..=12).contains(&self.months_per_year) {
            return Err(Error::Config(format!(
                "months per year must lie in 1..=12, got {}",
                self.months_per_year
            )));
        }
        if self.months_per_year > 1 && self.streets.is_some() {
            return Err(Error::Config(
                "street scatter is keyed by fiscal year; use one row per year with streets".into(),
            ));
        }
        for (name, sd) in [
            ("district_sd", self.district_sd),
            ("region_period_sd", self.region_period_sd),
            ("noise_sd", self.noise_sd),
            ("sai_sd_pounds", self.sai_sd_pounds),
        ] {
            if !(sd >= 0.0) || !sd.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite SD >= 0, got {sd}")));
            }
        }
        if !(0.0..1.0).contains(&self.serial_correlation) {
            return Err(Error::Config(format!(
                "serial correlation must lie in [0, 1), got {}",
                self.serial_correlation
            )));
        }
        if !(self.sai_mean_pounds > 0.0) {
            return Err(Error::Config("exposure mean must be positive".into()));
        }
        let last = self.first_fiscal_year + self.periods as i32 - 1;
        if self.first_post_fiscal_year <= self.first_fiscal_year
            || self.first_post_fiscal_year > last
        {
            return Err(Error::Config(format!(
                "first post year {} must fall inside ({}, {}]",
                self.first_post_fiscal_year, self.first_fiscal_year, last
            )));
        }
        if let TrueEffect::PerYear { betas } = &self.effect {
            if betas.len() != self.post_years().len() {
                return Err(Error::Config(format!(
                    "{} per-year betas for {} post years",
                    betas.len(),
                    self.post_years().len()
                )));
            }
        }
        if let Some(streets) = &self.streets {
            if streets.streets_per_district == 0 {
                return Err(Error::Config("street universe must be nonempty".into()));
            }
            if !(0.0..1.0).contains(&streets.post_reallocation) {
                return Err(Error::Config(format!(
                    "post reallocation must lie in [0, 1), got {}",
                    streets.post_reallocation
                )));
            }
        }
        Ok(())
    }

    pub fn years(&self) -> std::ops::RangeInclusive<i32> {
        self.first_fiscal_year..=(self.first_fiscal_year + self.periods as i32 - 1)
    }

    pub fn post_years(&self) -> Vec<i32> {
        self.years().filter(|y| *y >= self.first_post_fiscal_year).collect()
    }

    /// Estimation window covering the whole generated panel.
    pub fn window(&self) -> (i32, i32) {
        (self.first_fiscal_year, self.first_fiscal_year + self.periods as i32 - 1)
    }

    fn treatment_kind(&self) -> TreatmentKind {
        if self.binary_treatment {
            TreatmentKind::BinaryAboveMedian
        } else {
            TreatmentKind::Continuous
        }
    }

    /// Pooled estimation config aligned with this DGP.
    pub fn pooled_spec(&self) -> SpecConfig {
        SpecConfig {
            treatment: self.treatment_kind(),
            post: PostKind::Pooled { first_post_fiscal_year: self.first_post_fiscal_year },
            window: Some(self.window()),
            cr: CrKind::Cr1,
        }
    }

    pub fn dynamic_spec(&self) -> SpecConfig {
        SpecConfig {
            post: PostKind::Dynamic { post_fiscal_years: self.post_years() },
            ..self.pooled_spec()
        }
    }

    /// Placebo over the first two pre-policy years.
    pub fn placebo_spec(&self) -> Result<SpecConfig> {
        if self.first_post_fiscal_year - self.first_fiscal_year < 2 {
            return Err(Error::Config(
                "placebo needs at least two pre-policy years in the DGP".into(),
            ));
        }
        Ok(SpecConfig {
            post: PostKind::Placebo {
                pre_fiscal_year: self.first_fiscal_year,
                post_fiscal_year: self.first_fiscal_year + 1,
            },
            ..self.pooled_spec()
        })
    }
}

/// Street counts for one generated district-year cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreetCell {
    pub district_id: String,
    pub fiscal_year: i32,
    pub counts: Vec<u64>,
}

/// A generated panel plus the ground truth needed to score estimators.
#[derive(Clone, Debug)]
pub struct SyntheticPanel {
    pub panel: DistrictPanel,
    /// Auxiliary district characteristic the quintile effects are cut on.
    pub quintile_basis: BTreeMap<String, f64>,
    /// Ground-truth quintile assignment (population-weighted fifths of the
    /// basis).
    pub quintiles: QuintileAssignment,
    /// Per-cell street scatters; empty unless the config asks for them.
    pub streets: Vec<StreetCell>,
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generates one panel from the DD structural equation with known effects.
/// Fully determined by the config (including its seed).
pub fn generate_panel(config: &DgpConfig) -> Result<SyntheticPanel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    struct DistrictDraw {
        id: String,
        region: String,
        population: f64,
        sai_pounds: f64,
        base: f64,
        basis: f64,
        male_shares: [f64; 5],
    }
    let mut districts = Vec::with_capacity(config.districts);
    for d in 0..config.districts {
        let population = (80_000.0 + 170_000.0 * rng.gen_range(0.0f64..1.0)).round();
        let sai_pounds = (config.sai_mean_pounds + config.sai_sd_pounds * normal(&mut rng)).max(1.0);
        let base = config.baseline_log_rate + config.district_sd * normal(&mut rng);
        let basis = normal(&mut rng);
        let mut male_shares = [0.052, 0.061, 0.048, 0.083, 0.071];
        for share in &mut male_shares {
            *share = (*share + 0.002 * normal(&mut rng)).max(0.001);
        }
        districts.push(DistrictDraw {
            id: format!("s{d:03}"),
            region: format!("r{}", d % config.regions),
            population,
            sai_pounds,
            base,
            basis,
            male_shares,
        });
    }

    // Treatment variable the injected effect multiplies.
    let exposure: Vec<f64> = if config.binary_treatment {
        let values: Vec<f64> = districts.iter().map(|d| d.sai_pounds).collect();
        let weights: Vec<f64> = districts.iter().map(|d| d.population).collect();
        let median = weighted_median(&values, &weights)?;
        districts.iter().map(|d| f64::from(d.sai_pounds >= median)).collect()
    } else {
        districts.iter().map(|d| d.sai_pounds / 100.0).collect()
    };

    let basis_map: BTreeMap<String, f64> =
        districts.iter().map(|d| (d.id.clone(), d.basis)).collect();
    let weight_map: BTreeMap<String, f64> =
        districts.iter().map(|d| (d.id.clone(), d.population)).collect();
    let quintiles =
        assign_weighted_quintiles(QuintileBasis::MccChangeRaw, &basis_map, &weight_map)?;

    let slots = config.months_per_year;
    let mut shocks = BTreeMap::new();
    for r in 0..config.regions {
        for year in config.years() {
            for slot in 0..slots {
                shocks.insert((r, year, slot), config.region_period_sd * normal(&mut rng));
            }
        }
    }

    let post_years = config.post_years();
    let mut rows = Vec::with_capacity(config.districts * config.periods * slots);
    let mut streets = Vec::new();
    for (d, district) in districts.iter().enumerate() {
        let mut ar = config.noise_sd * normal(&mut rng);
        let innovation_scale =
            config.noise_sd * (1.0 - config.serial_correlation * config.serial_correlation).sqrt();
        let mut first_period = true;
        for year in config.years() {
            let post = year >= config.first_post_fiscal_year;
            let effect_term = if post {
                let scale = match &config.effect {
                    TrueEffect::None => 0.0,
                    TrueEffect::Pooled { beta } => *beta,
                    TrueEffect::PerYear { betas } => {
                        let slot = post_years.iter().position(|y| *y == year).unwrap();
                        betas[slot]
                    }
                    TrueEffect::Quintile { betas } => {
                        betas[(quintiles.quintile_of[&district.id] - 1) as usize]
                    }
                };
                scale * exposure[d]
            } else {
                0.0
            };
            let mut year_total = 0u64;
            for slot in 0..slots {
                if first_period {
                    first_period = false;
                } else {
                    ar = config.serial_correlation * ar + innovation_scale * normal(&mut rng);
                }
                let police = 2.0 + 0.3 * normal(&mut rng);
                let wage = 5.2 + 0.1 * normal(&mut rng);
                let log_rate = district.base
                    + shocks[&(d % config.regions, year, slot)]
                    + POLICE_EFFECT * police
                    + WAGE_EFFECT * wage
                    + effect_term
                    + ar;
                // The log rate is annualized; month rows split the year's
                // level so period totals stay comparable across settings.
                let total = (log_rate.exp() * district.population / 1000.0 / slots as f64)
                    .round()
                    .max(1.0) as u64;
                year_total += total;
                let property = (total as f64 * 0.6).round() as u64;
                let violent = ((total - property) as f64 * 0.75).round() as u64;
                let counts = CountSet {
                    total,
                    property,
                    violent,
                    other: total - property - violent,
                    by_type: BTreeMap::new(),
                };
                let period = if slots == 1 {
                    PeriodKey::FiscalYear(year)
                } else {
                    // Slot 0 is April of the fiscal year; later slots walk
                    // forward one calendar month at a time.
                    let months = 3 + slot as i32;
                    PeriodKey::Month(YearMonth {
                        year: year + months / 12,
                        month: (months % 12) as u8 + 1,
                    })
                };
                rows.push(PanelRow {
                    district_id: district.id.clone(),
                    region_id: district.region.clone(),
                    period,
                    counts,
                    population: district.population,
                    working_age_population: (district.population * 0.62).round(),
                    austerity_sai: district.sai_pounds,
                    police_per_1000: police,
                    median_weekly_wage: wage,
                    male_shares: district.male_shares,
                    weight: district.population,
                });
            }
            if let Some(street_config) = &config.streets {
                streets.push(scatter_streets(
                    config.seed,
                    &district.id,
                    year,
                    year_total,
                    street_config,
                    post,
                ));
            }
        }
    }

    Ok(SyntheticPanel {
        panel: DistrictPanel {
            kind: if slots == 1 { PeriodKind::FiscalYear } else { PeriodKind::Month },
            rows,
        },
        quintile_basis: basis_map,
        quintiles,
        streets,
    })
}

/// Scatters one cell's crimes over the street universe. Pre-policy crimes
/// land uniformly; post-policy crimes are redirected to the top decile with
/// the configured probability. Seeded per cell, so output is independent of
/// generation order.
fn scatter_streets(
    master_seed: u64,
    district_id: &str,
    year: i32,
    total: u64,
    config: &StreetConfig,
    post: bool,
) -> StreetCell {
    let streets = config.streets_per_district;
    let top = (streets / 10).max(1);
    let seed = seeds::cell_seed(master_seed, district_id, year, "street_scatter");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0u64; streets];
    for _ in 0..total {
        let redirect = post && rng.gen_range(0.0..1.0) < config.post_reallocation;
        let street = if redirect { rng.gen_range(0..top) } else { rng.gen_range(0..streets) };
        counts[street] += 1;
    }
    StreetCell { district_id: district_id.to_owned(), fiscal_year: year, counts }
}

/// Crime-rate frame with the two varying controls, as the estimators see it.
pub fn synthetic_frame(panel: &DistrictPanel) -> Result<PanelFrame> {
    let controls = vec!["police_per_1000".to_owned(), "median_weekly_wage".to_owned()];
    let (frame, _zero) = crime_rate_frame(panel, &CountSelector::Total, &controls)?;
    Ok(frame)
}

// ---------------------------------------------------------------------------
// Recovery experiments

/// Scorecard of one estimator across replications.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecoverySummary {
    pub estimator: String,
    pub replications: usize,
    pub true_value: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    pub rmse: f64,
    /// Share of replications whose 95% CI covers the true value.
    pub coverage95: f64,
    /// Share rejecting H0: beta = 0 at 5%.
    pub rejection_rate: f64,
    pub mean_se: f64,
}

fn summarize(estimator: &str, truth: f64, draws: &[(f64, f64)]) -> RecoverySummary {
    let n = draws.len() as f64;
    let mean_estimate = draws.iter().map(|(b, _)| b).sum::<f64>() / n;
    let rmse = (draws.iter().map(|(b, _)| (b - truth) * (b - truth)).sum::<f64>() / n).sqrt();
    let coverage95 =
        draws.iter().filter(|(b, se)| (b - truth).abs() <= Z95 * se).count() as f64 / n;
    let rejection_rate = draws.iter().filter(|(b, se)| b.abs() > Z95 * se).count() as f64 / n;
    let mean_se = draws.iter().map(|(_, se)| se).sum::<f64>() / n;
    RecoverySummary {
        estimator: estimator.to_owned(),
        replications: draws.len(),
        true_value: truth,
        mean_estimate,
        bias: mean_estimate - truth,
        rmse,
        coverage95,
        rejection_rate,
        mean_se,
    }
}

fn replicate(config: &DgpConfig, experiment: &str, rep: u64) -> DgpConfig {
    DgpConfig { seed: seeds::replicate_seed(config.seed, experiment, rep), ..config.clone() }
}

fn pooled_truth(config: &DgpConfig) -> Result<f64> {
    match &config.effect {
        TrueEffect::None => Ok(0.0),
        TrueEffect::Pooled { beta } => Ok(*beta),
        _ => Err(Error::Config(
            "pooled recovery needs a pooled or null true effect".into(),
        )),
    }
}

/// Pooled DD bias, RMSE, coverage, and rejection across replications.
pub fn pooled_dd_recovery(config: &DgpConfig, replications: usize) -> Result<RecoverySummary> {
    let truth = pooled_truth(config)?;
    let spec = config.pooled_spec();
    let draws: Result<Vec<(f64, f64)>> = (0..replications as u64)
        .into_par_iter()
        .map(|rep| {
            let synth = generate_panel(&replicate(config, "pooled_dd", rep))?;
            let frame = synthetic_frame(&synth.panel)?;
            let fit = run_dd(&frame, &spec)?;
            let name = &fit.treatment_names[0];
            Ok((fit.fit.coefficient(name).unwrap(), fit.fit.se_of(name).unwrap()))
        })
        .collect();
    Ok(summarize("pooled_dd", truth, &draws?))
}

/// Placebo DD on two pre-policy years; its rejection rate is the test size.
pub fn placebo_size(config: &DgpConfig, replications: usize) -> Result<RecoverySummary> {
    let spec = config.placebo_spec()?;
    let draws: Result<Vec<(f64, f64)>> = (0..replications as u64)
        .into_par_iter()
        .map(|rep| {
            let synth = generate_panel(&replicate(config, "placebo_dd", rep))?;
            let frame = synthetic_frame(&synth.panel)?;
            let (fit, audit) = run_placebo_dd(&frame, &spec)?;
            debug_assert!(audit.max_fiscal_year_used < config.first_post_fiscal_year);
            let name = &fit.treatment_names[0];
            Ok((fit.fit.coefficient(name).unwrap(), fit.fit.se_of(name).unwrap()))
        })
        .collect();
    Ok(summarize("placebo_dd", 0.0, &draws?))
}

/// Dynamic DD scorecard: per-year summaries plus the share of replications
/// reproducing the true profile's rise-and-fall pattern.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DynamicRecovery {
    pub per_year: Vec<RecoverySummary>,
    /// Share of replications where every adjacent estimated gap has the
    /// same sign as the true gap.
    pub ordering_share: f64,
    pub replications: usize,
}

pub fn dynamic_profile_recovery(
    config: &DgpConfig,
    replications: usize,
) -> Result<DynamicRecovery> {
    let TrueEffect::PerYear { betas } = &config.effect else {
        return Err(Error::Config("dynamic recovery needs a per-year true effect".into()));
    };
    let betas = betas.clone();
    let spec = config.dynamic_spec();
    let post_years = config.post_years();
    let results: Result<Vec<Vec<(f64, f64)>>> = (0..replications as u64)
        .into_par_iter()
        .map(|rep| {
            let synth = generate_panel(&replicate(config, "dynamic_dd", rep))?;
            let frame = synthetic_frame(&synth.panel)?;
            let fit = run_dynamic_dd(&frame, &spec)?;
            Ok(post_years
                .iter()
                .map(|year| {
                    let name = format!("post{year}_x_austerity");
                    (fit.fit.coefficient(&name).unwrap(), fit.fit.se_of(&name).unwrap())
                })
                .collect())
        })
        .collect();
    let results = results?;
    let mut ordered = 0usize;
    for rep in &results {
        let ok = betas.windows(2).zip(rep.windows(2)).all(|(truth, est)| {
            let true_gap = truth[1] - truth[0];
            let est_gap = est[1].0 - est[0].0;
            true_gap == 0.0 || (true_gap > 0.0) == (est_gap > 0.0)
        });
        if ok {
            ordered += 1;
        }
    }
    let per_year = post_years
        .iter()
        .enumerate()
        .map(|(slot, year)| {
            let draws: Vec<(f64, f64)> = results.iter().map(|rep| rep[slot]).collect();
            summarize(&format!("dynamic_dd_{year}"), betas[slot], &draws)
        })
        .collect();
    Ok(DynamicRecovery {
        per_year,
        ordering_share: ordered as f64 / replications as f64,
        replications,
    })
}

/// Quintile triple-difference scorecard.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DddRecovery {
    pub replications: usize,
    pub mean_coefficients: [f64; 5],
    pub mean_ratio: f64,
    /// Share of replications with a strictly increasing estimated profile.
    pub monotone_share: f64,
    /// Share of replications rejecting equal quintile effects at 5%.
    pub joint_rejection_rate: f64,
}

pub fn ddd_quintile_recovery(config: &DgpConfig, replications: usize) -> Result<DddRecovery> {
    if !matches!(config.effect, TrueEffect::Quintile { .. } | TrueEffect::None) {
        return Err(Error::Config(
            "quintile recovery needs a quintile or null true effect".into(),
        ));
    }
    let spec = config.pooled_spec();
    let results: Result<Vec<([f64; 5], f64, f64)>> = (0..replications as u64)
        .into_par_iter()
        .map(|rep| {
            let synth = generate_panel(&replicate(config, "ddd_quintile", rep))?;
            let frame = synthetic_frame(&synth.panel)?;
            let ddd = run_ddd_quintiles(&frame, &synth.quintiles, &spec)?;
            Ok((ddd.quintile_coefficients, ddd.top_bottom_ratio, ddd.equality.p_value))
        })
        .collect();
    let results = results?;
    let n = results.len() as f64;
    let mut mean_coefficients = [0.0f64; 5];
    for (coefficients, _, _) in &results {
        for (slot, c) in coefficients.iter().enumerate() {
            mean_coefficients[slot] += c / n;
        }
    }
    let mean_ratio = results.iter().map(|(_, r, _)| r).sum::<f64>() / n;
    let monotone_share = results
        .iter()
        .filter(|(c, _, _)| c.windows(2).all(|pair| pair[1] > pair[0]))
        .count() as f64
        / n;
    let joint_rejection_rate =
        results.iter().filter(|(_, _, p)| *p < 0.05).count() as f64 / n;
    Ok(DddRecovery {
        replications,
        mean_coefficients,
        mean_ratio,
        monotone_share,
        joint_rejection_rate,
    })
}

/// Null-DGP check of the nonparametric band: share of replications whose
/// bootstrap band contains zero at every unmasked grid point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BandRecovery {
    pub replications: usize,
    pub share_containing_zero: f64,
    pub mean_masked_points: f64,
}

pub fn nonparam_null_band(
    config: &DgpConfig,
    band: &LocalLinearConfig,
    replications: usize,
) -> Result<BandRecovery> {
    if config.effect != TrueEffect::None {
        return Err(Error::Config("the band experiment needs a null true effect".into()));
    }
    let spec = config.pooled_spec();
    let results: Result<Vec<(bool, usize)>> = (0..replications as u64)
        .into_par_iter()
        .map(|rep| {
            let synth = generate_panel(&replicate(config, "nonparam_band", rep))?;
            let frame = synthetic_frame(&synth.panel)?;
            let pair = fwl_residualize(&frame, &spec)?;
            let band_config = LocalLinearConfig {
                seed: seeds::replicate_seed(band.seed, "band_rep", rep),
                ..band.clone()
            };
            let fit = local_linear_fit(&pair, &band_config)?;
            let contains_zero = fit
                .points
                .iter()
                .filter_map(|p| Some((p.lo95?, p.hi95?)))
                .all(|(lo, hi)| lo <= 0.0 && 0.0 <= hi);
            Ok((contains_zero, fit.masked_points))
        })
        .collect();
    let results = results?;
    Ok(BandRecovery {
        replications,
        share_containing_zero: results.iter().filter(|(ok, _)| *ok).count() as f64
            / replications as f64,
        mean_masked_points: results.iter().map(|(_, m)| *m as f64).sum::<f64>()
            / replications as f64,
    })
}

/// Mean concentration change (post minus pre) per reallocation fraction.
/// Moving crimes onto the top decile raises the marginal concentration, and
/// more strongly the larger the moved fraction.
pub fn mcc_reallocation_curve(
    config: &DgpConfig,
    fractions: &[f64],
    k: f64,
    runs: u64,
    replications: usize,
) -> Result<Vec<f64>> {
    let Some(base_streets) = config.streets else {
        return Err(Error::Config("the reallocation curve needs a street config".into()));
    };
    let mut curve = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let cfg = DgpConfig {
            streets: Some(StreetConfig { post_reallocation: fraction, ..base_streets }),
            ..config.clone()
        };
        let changes: Result<Vec<f64>> = (0..replications as u64)
            .into_par_iter()
            .map(|rep| {
                let synth = generate_panel(&replicate(&cfg, "mcc_curve", rep))?;
                let mut pre = Vec::new();
                let mut post = Vec::new();
                for cell in &synth.streets {
                    let vector = StreetCountVector::new(
                        cell.counts.clone(),
                        cell.counts.len() as u64,
                    )?;
                    let seed = seeds::cell_seed(
                        cfg.seed,
                        &cell.district_id,
                        cell.fiscal_year,
                        "mcc_curve_sim",
                    );
                    let stats = marginal_concentration(&vector, k, runs, seed)?;
                    if cell.fiscal_year >= cfg.first_post_fiscal_year {
                        post.push(stats.mcc);
                    } else {
                        pre.push(stats.mcc);
                    }
                }
                Ok(post.iter().sum::<f64>() / post.len() as f64
                    - pre.iter().sum::<f64>() / pre.len() as f64)
            })
            .collect();
        let changes = changes?;
        curve.push(changes.iter().sum::<f64>() / changes.len() as f64);
    }
    Ok(curve)
}

/// One-call battery over the default DGP: pooled, binary, placebo, dynamic,
/// quintile DDD, and the null nonparametric band.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteReport {
    pub pooled: RecoverySummary,
    pub binary: RecoverySummary,
    pub placebo: RecoverySummary,
    pub dynamic: DynamicRecovery,
    pub ddd: DddRecovery,
    pub band: BandRecovery,
}

pub fn run_recovery_suite(base: &DgpConfig, replications: usize) -> Result<SuiteReport> {
    let pooled = pooled_dd_recovery(
        &DgpConfig { effect: TrueEffect::Pooled { beta: 0.02 }, ..base.clone() },
        replications,
    )?;
    let binary = pooled_dd_recovery(
        &DgpConfig {
            effect: TrueEffect::Pooled { beta: 0.037 },
            binary_treatment: true,
            ..base.clone()
        },
        replications,
    )?;
    let placebo = placebo_size(
        &DgpConfig { effect: TrueEffect::None, ..base.clone() },
        replications,
    )?;
    let dynamic = dynamic_profile_recovery(
        &DgpConfig {
            effect: TrueEffect::PerYear { betas: vec![0.013, 0.021, 0.012] },
            ..base.clone()
        },
        replications,
    )?;
    let ddd = ddd_quintile_recovery(
        &DgpConfig {
            effect: TrueEffect::Quintile { betas: [0.01, 0.01575, 0.0215, 0.02725, 0.033] },
            ..base.clone()
        },
        replications,
    )?;
    let band = nonparam_null_band(
        &DgpConfig { effect: TrueEffect::None, ..base.clone() },
        &LocalLinearConfig { bootstrap: 200, ..LocalLinearConfig::default() },
        (replications / 2).max(10),
    )?;
    Ok(SuiteReport { pooled, binary, placebo, dynamic, ddd, band })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation_rejects_bad_inputs() {
        let ok = DgpConfig::default();
        assert!(ok.validate().is_ok());
        assert!(DgpConfig { districts: 9, ..ok.clone() }.validate().is_err());
        assert!(DgpConfig { regions: 1, ..ok.clone() }.validate().is_err());
        assert!(DgpConfig { periods: 1, ..ok.clone() }.validate().is_err());
        assert!(DgpConfig { serial_correlation: 1.0, ..ok.clone() }.validate().is_err());
        assert!(DgpConfig { noise_sd: -0.1, ..ok.clone() }.validate().is_err());
        assert!(DgpConfig { first_post_fiscal_year: 2011, ..ok.clone() }.validate().is_err());
        assert!(DgpConfig { first_post_fiscal_year: 2016, ..ok.clone() }.validate().is_err());
        assert!(DgpConfig { months_per_year: 0, ..ok.clone() }.validate().is_err());
        assert!(DgpConfig { months_per_year: 13, ..ok.clone() }.validate().is_err());
        assert!(DgpConfig {
            months_per_year: 12,
            streets: Some(StreetConfig { streets_per_district: 100, post_reallocation: 0.1 }),
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(DgpConfig {
            effect: TrueEffect::PerYear { betas: vec![0.01] },
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(DgpConfig {
            streets: Some(StreetConfig { streets_per_district: 100, post_reallocation: 1.0 }),
            ..ok
        }
        .validate()
        .is_err());
    }

    #[test]
    fn monthly_rows_walk_april_through_march() {
        let config = DgpConfig {
            districts: 12,
            periods: 3,
            months_per_year: 12,
            first_post_fiscal_year: 2013,
            seed: 11,
            ..DgpConfig::default()
        };
        let synth = generate_panel(&config).unwrap();
        assert_eq!(synth.panel.kind, PeriodKind::Month);
        assert_eq!(synth.panel.rows.len(), 12 * 3 * 12);

        let mut months_of: BTreeMap<(String, i32), Vec<(i32, u8)>> = BTreeMap::new();
        for row in &synth.panel.rows {
            let PeriodKey::Month(m) = row.period else {
                panic!("monthly panel emitted a fiscal-year key");
            };
            months_of
                .entry((row.district_id.clone(), row.period.fiscal_year()))
                .or_default()
                .push((m.year, m.month));
        }
        assert_eq!(months_of.len(), 12 * 3);
        for ((_, fiscal_year), months) in &months_of {
            assert!(config.years().contains(fiscal_year));
            let expected: Vec<(i32, u8)> = (0..12)
                .map(|slot| {
                    let months = 3 + slot;
                    (fiscal_year + months / 12, (months % 12) as u8 + 1)
                })
                .collect();
            assert_eq!(months, &expected);
        }

        // Month frames flow through the placebo fit end to end.
        let frame = synthetic_frame(&synth.panel).unwrap();
        let spec = config.placebo_spec().unwrap();
        let (dd, audit) = crate::estimators::run_placebo_dd(&frame, &spec).unwrap();
        assert_eq!(audit.rows_used, 12 * 2 * 12);
        assert!(dd.fit.se_of(&dd.treatment_names[0]).unwrap() > 0.0);
    }

    #[test]
    fn same_seed_reproduces_the_panel_bit_for_bit() {
        let config = DgpConfig {
            districts: 12,
            effect: TrueEffect::Pooled { beta: 0.02 },
            streets: Some(StreetConfig { streets_per_district: 50, post_reallocation: 0.2 }),
            seed: 77,
            ..DgpConfig::default()
        };
        let a = generate_panel(&config).unwrap();
        let b = generate_panel(&config).unwrap();
        assert_eq!(a.panel.rows.len(), b.panel.rows.len());
        for (x, y) in a.panel.rows.iter().zip(&b.panel.rows) {
            assert_eq!(x.district_id, y.district_id);
            assert_eq!(x.counts.total, y.counts.total);
            assert_eq!(x.austerity_sai.to_bits(), y.austerity_sai.to_bits());
            assert_eq!(x.police_per_1000.to_bits(), y.police_per_1000.to_bits());
            assert_eq!(x.median_weekly_wage.to_bits(), y.median_weekly_wage.to_bits());
        }
        assert_eq!(a.streets, b.streets);
        let c = generate_panel(&DgpConfig { seed: 78, ..config }).unwrap();
        assert!(a
            .panel
            .rows
            .iter()
            .zip(&c.panel.rows)
            .any(|(x, y)| x.counts.total != y.counts.total));
    }

    #[test]
    fn street_totals_match_the_cell_counts() {
        let config = DgpConfig {
            districts: 10,
            periods: 3,
            first_post_fiscal_year: 2012,
            streets: Some(StreetConfig { streets_per_district: 40, post_reallocation: 0.3 }),
            seed: 5,
            ..DgpConfig::default()
        };
        let synth = generate_panel(&config).unwrap();
        assert_eq!(synth.streets.len(), synth.panel.rows.len());
        for (cell, row) in synth.streets.iter().zip(&synth.panel.rows) {
            assert_eq!(cell.district_id, row.district_id);
            assert_eq!(cell.counts.iter().sum::<u64>(), row.counts.total);
            assert_eq!(cell.counts.len(), 40);
        }
    }

    #[test]
    fn injected_pooled_effect_is_recovered_within_monte_carlo_error() {
        let config = DgpConfig {
            effect: TrueEffect::Pooled { beta: 0.02 },
            seed: 3,
            ..DgpConfig::default()
        };
        let synth = generate_panel(&config).unwrap();
        let frame = synthetic_frame(&synth.panel).unwrap();
        let fit = run_dd(&frame, &config.pooled_spec()).unwrap();
        let beta = fit.fit.coefficient("post_x_austerity").unwrap();
        let se = fit.fit.se_of("post_x_austerity").unwrap();
        assert!((beta - 0.02).abs() < 3.0 * se, "beta {beta} se {se}");
    }

    #[test]
    fn null_effect_estimate_is_near_zero() {
        let config = DgpConfig { seed: 9, ..DgpConfig::default() };
        let synth = generate_panel(&config).unwrap();
        let frame = synthetic_frame(&synth.panel).unwrap();
        let fit = run_dd(&frame, &config.pooled_spec()).unwrap();
        let beta = fit.fit.coefficient("post_x_austerity").unwrap();
        let se = fit.fit.se_of("post_x_austerity").unwrap();
        assert!(beta.abs() < 3.0 * se, "beta {beta} se {se}");
    }

    #[test]
    fn reallocation_raises_estimated_concentration_change() {
        let config = DgpConfig {
            districts: 10,
            periods: 4,
            first_post_fiscal_year: 2013,
            baseline_log_rate: 1.2,
            streets: Some(StreetConfig { streets_per_district: 60, post_reallocation: 0.0 }),
            seed: 21,
            ..DgpConfig::default()
        };
        let curve =
            mcc_reallocation_curve(&config, &[0.0, 0.25, 0.5], 0.25, 300, 2).unwrap();
        assert!(curve[1] > 0.0, "curve {curve:?}");
        assert!(curve[2] > curve[1], "curve {curve:?}");
        assert!(curve[0].abs() < curve[1], "curve {curve:?}");
    }

    #[test]
    fn small_recovery_run_is_unbiased_and_ordered() {
        let base = DgpConfig { districts: 30, seed: 17, ..DgpConfig::default() };
        let pooled = pooled_dd_recovery(
            &DgpConfig { effect: TrueEffect::Pooled { beta: 0.02 }, ..base.clone() },
            20,
        )
        .unwrap();
        assert!(pooled.bias.abs() < 0.004, "bias {}", pooled.bias);
        assert!(pooled.coverage95 > 0.7, "coverage {}", pooled.coverage95);

        let dynamic = dynamic_profile_recovery(
            &DgpConfig {
                effect: TrueEffect::PerYear { betas: vec![0.013, 0.021, 0.012] },
                ..base
            },
            10,
        )
        .unwrap();
        assert_eq!(dynamic.per_year.len(), 3);
        assert!(dynamic.ordering_share > 0.5, "ordering {}", dynamic.ordering_share);
    }
}
