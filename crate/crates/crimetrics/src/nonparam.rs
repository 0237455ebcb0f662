//! Nonparametric view of the dose-response: residualize the outcome and the
//! treatment interaction on controls and both fixed-effect dimensions, then
//! local-linear regress one residual on the other with a cluster bootstrap
//! band.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::estimators::{post_factor, treatment_values, windowed, PanelFrame, SpecConfig};
use crate::regress::{absorb_fixed_effects, fit, DesignMatrix, FitOptions};
use crate::seeds;
use crate::{Error, Result};

/// Outcome and treatment residuals with aligned weights and cluster labels.
#[derive(Clone, Debug)]
pub struct ResidualizedPair {
    pub y_res: Vec<f64>,
    pub d_res: Vec<f64>,
    pub weights: Vec<f64>,
    /// District of each observation, the bootstrap resampling unit.
    pub clusters: Vec<String>,
}

fn residuals_of(
    outcome: Vec<f64>,
    frame: &PanelFrame,
    rows: &[&crate::estimators::FrameRow],
) -> Result<Vec<f64>> {
    let weights: Vec<f64> = rows.iter().map(|r| r.weight).collect();
    let mut design = DesignMatrix::new(outcome, weights)?;
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
    if design.x.is_empty() {
        let absorbed = absorb_fixed_effects(
            &design,
            crate::regress::DEFAULT_ABSORB_TOL,
            crate::regress::DEFAULT_ABSORB_MAX_ITER,
        )?;
        Ok(absorbed.y)
    } else {
        Ok(fit(&design, &FitOptions::default())?.residuals)
    }
}

/// Partials controls and fixed effects out of both the outcome and the
/// treatment interaction, leaving the two residual series whose weighted
/// regression reproduces the panel coefficient.
pub fn fwl_residualize(frame: &PanelFrame, config: &SpecConfig) -> Result<ResidualizedPair> {
    let rows = windowed(frame, config)?;
    let treat = treatment_values(&rows, &config.treatment)?;
    let mut d = Vec::with_capacity(rows.len());
    for row in &rows {
        d.push(treat[row.district_id.as_str()] * post_factor(row, &config.post)?);
    }
    let y: Vec<f64> = rows.iter().map(|r| r.outcome).collect();
    let y_res = residuals_of(y, frame, &rows)?;
    let d_res = residuals_of(d, frame, &rows)?;
    Ok(ResidualizedPair {
        y_res,
        d_res,
        weights: rows.iter().map(|r| r.weight).collect(),
        clusters: rows.iter().map(|r| r.district_id.clone()).collect(),
    })
}

/// Epanechnikov kernel, zero outside |u| < 1.
fn epanechnikov(u: f64) -> f64 {
    let u2 = u * u;
    if u2 < 1.0 {
        0.75 * (1.0 - u2)
    } else {
        0.0
    }
}

/// Rule-of-thumb bandwidth: 1.06 × weighted SD × N^(−1/5).
pub fn rule_of_thumb_bandwidth(values: &[f64], weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    let mean: f64 = values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total;
    let var: f64 = values
        .iter()
        .zip(weights)
        .map(|(v, w)| w * (v - mean) * (v - mean))
        .sum::<f64>()
        / total;
    1.06 * var.sqrt() * (values.len() as f64).powf(-0.2)
}

/// Smallest value whose cumulative weight share reaches `q`.
fn weighted_quantile(values: &[f64], weights: &[f64], q: f64) -> f64 {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let target = q * weights.iter().sum::<f64>();
    let mut cum = 0.0;
    for &i in &order {
        cum += weights[i];
        if cum >= target {
            return values[i];
        }
    }
    values[order[order.len() - 1]]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalLinearConfig {
    /// Evaluation grid size over the central 98% of the running variable.
    pub grid_points: usize,
    /// None selects the rule-of-thumb bandwidth.
    pub bandwidth: Option<f64>,
    /// Grid points with fewer kernel-positive observations are masked.
    pub min_effective: usize,
    /// Cluster bootstrap resamples for the 95% band; 0 skips the band.
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for LocalLinearConfig {
    fn default() -> Self {
        LocalLinearConfig {
            grid_points: 100,
            bandwidth: None,
            min_effective: 10,
            bootstrap: 500,
            seed: 0,
        }
    }
}

/// One evaluated grid point. `fit` is None where the point is masked for
/// thin support.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LocalLinearPoint {
    pub grid: f64,
    pub fit: Option<f64>,
    pub lo95: Option<f64>,
    pub hi95: Option<f64>,
    /// Weighted kernel density of the running variable at the grid point.
    pub density: f64,
    /// Kernel-positive observations at this point.
    pub effective_n: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocalLinearFit {
    pub bandwidth: f64,
    pub points: Vec<LocalLinearPoint>,
    pub masked_points: usize,
    pub bootstrap_resamples: usize,
}

/// Weighted local-linear value at one grid point; None when the kernel
/// window holds fewer than `min_effective` observations.
fn point_fit(
    d: &[f64],
    y: &[f64],
    w: &[f64],
    grid: f64,
    bandwidth: f64,
    min_effective: usize,
) -> (Option<f64>, usize) {
    let mut s0 = 0.0;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    let mut t0 = 0.0;
    let mut t1 = 0.0;
    let mut effective = 0usize;
    for ((&di, &yi), &wi) in d.iter().zip(y).zip(w) {
        let k = epanechnikov((di - grid) / bandwidth);
        if k == 0.0 {
            continue;
        }
        effective += 1;
        let omega = k * wi;
        let centered = di - grid;
        s0 += omega;
        s1 += omega * centered;
        s2 += omega * centered * centered;
        t0 += omega * yi;
        t1 += omega * centered * yi;
    }
    if effective < min_effective {
        return (None, effective);
    }
    let denom = s0 * s2 - s1 * s1;
    // Degenerate spread inside the window: fall back to the local mean.
    if denom <= 1e-12 * s0 * s2 {
        return (Some(t0 / s0), effective);
    }
    (Some((s2 * t0 - s1 * t1) / denom), effective)
}

/// Local-linear fit of the outcome residual on the treatment residual with
/// an Epanechnikov kernel, population weighting, and a pairs cluster
/// bootstrap band. The band is simultaneous across the grid (sup-t over
/// the bootstrap draws), so "covers zero" can be read jointly over the
/// whole support, and it always contains the point fit.
pub fn local_linear_fit(
    pair: &ResidualizedPair,
    config: &LocalLinearConfig,
) -> Result<LocalLinearFit> {
    let n = pair.d_res.len();
    if n == 0 || pair.y_res.len() != n || pair.weights.len() != n || pair.clusters.len() != n {
        return Err(Error::Data("residual series lengths differ or are empty".into()));
    }
    if config.grid_points < 2 {
        return Err(Error::Config("need at least two grid points".into()));
    }
    let bandwidth = match config.bandwidth {
        Some(bw) if bw > 0.0 && bw.is_finite() => bw,
        Some(bw) => {
            return Err(Error::Config(format!(
                "bandwidth must be positive and finite, got {bw}"
            )))
        }
        None => rule_of_thumb_bandwidth(&pair.d_res, &pair.weights),
    };
    if !(bandwidth > 0.0) {
        return Err(Error::Numeric(
            "rule-of-thumb bandwidth is zero; the running variable has no spread".into(),
        ));
    }

    let lo = weighted_quantile(&pair.d_res, &pair.weights, 0.01);
    let hi = weighted_quantile(&pair.d_res, &pair.weights, 0.99);
    if !(hi > lo) {
        return Err(Error::Data(
            "central support of the running variable is a single point".into(),
        ));
    }
    let step = (hi - lo) / (config.grid_points - 1) as f64;
    let grid: Vec<f64> = (0..config.grid_points).map(|i| lo + step * i as f64).collect();

    let total_weight: f64 = pair.weights.iter().sum();
    let mut points = Vec::with_capacity(grid.len());
    for &g in &grid {
        let (fit, effective_n) = point_fit(
            &pair.d_res,
            &pair.y_res,
            &pair.weights,
            g,
            bandwidth,
            config.min_effective,
        );
        let density = pair
            .d_res
            .iter()
            .zip(&pair.weights)
            .map(|(&di, &wi)| wi * epanechnikov((di - g) / bandwidth))
            .sum::<f64>()
            / (bandwidth * total_weight);
        points.push(LocalLinearPoint {
            grid: g,
            fit,
            lo95: None,
            hi95: None,
            density,
            effective_n,
        });
    }

    if config.bootstrap > 0 {
        let districts: Vec<&str> = pair
            .clusters
            .iter()
            .map(String::as_str)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut rows_of: std::collections::HashMap<&str, Vec<usize>> =
            std::collections::HashMap::new();
        for (i, c) in pair.clusters.iter().enumerate() {
            rows_of.entry(c.as_str()).or_default().push(i);
        }
        let mut draws: Vec<Vec<Option<f64>>> = Vec::with_capacity(config.bootstrap);
        for rep in 0..config.bootstrap {
            let seed = seeds::replicate_seed(config.seed, "local_linear_band", rep as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut d = Vec::new();
            let mut y = Vec::new();
            let mut w = Vec::new();
            for _ in 0..districts.len() {
                let pick = districts.choose(&mut rng).unwrap();
                for &i in &rows_of[pick] {
                    d.push(pair.d_res[i]);
                    y.push(pair.y_res[i]);
                    w.push(pair.weights[i]);
                }
            }
            let rep_values: Vec<Option<f64>> = grid
                .iter()
                .map(|&g| point_fit(&d, &y, &w, g, bandwidth, config.min_effective).0)
                .collect();
            draws.push(rep_values);
        }
        // Per-point bootstrap scale, then one critical value from the sup of
        // standardized deviations so the band holds jointly over the grid.
        let scales: Vec<Option<f64>> = (0..grid.len())
            .map(|slot| {
                points[slot].fit?;
                let values: Vec<f64> =
                    draws.iter().filter_map(|rep| rep[slot]).collect();
                if values.len() < 2 {
                    return None;
                }
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                let var = values
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>()
                    / (values.len() - 1) as f64;
                Some(var.sqrt())
            })
            .collect();
        let mut sups: Vec<f64> = Vec::with_capacity(draws.len());
        for rep in &draws {
            let mut sup = f64::NEG_INFINITY;
            for (slot, value) in rep.iter().enumerate() {
                let (Some(v), Some(fit), Some(scale)) =
                    (*value, points[slot].fit, scales[slot])
                else {
                    continue;
                };
                if scale > 0.0 {
                    sup = sup.max((v - fit).abs() / scale);
                }
            }
            if sup.is_finite() {
                sups.push(sup);
            }
        }
        if !sups.is_empty() {
            sups.sort_by(f64::total_cmp);
            let idx = (0.95 * (sups.len() - 1) as f64).round() as usize;
            let critical = sups[idx];
            for (point, scale) in points.iter_mut().zip(&scales) {
                let (Some(fit), Some(scale)) = (point.fit, *scale) else { continue };
                point.lo95 = Some(fit - critical * scale);
                point.hi95 = Some(fit + critical * scale);
            }
        }
    }

    let masked_points = points.iter().filter(|p| p.fit.is_none()).count();
    Ok(LocalLinearFit {
        bandwidth,
        points,
        masked_points,
        bootstrap_resamples: config.bootstrap,
    })
}
