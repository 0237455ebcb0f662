//! Shared test oracles and instance generators.
//!
//! The dummy-variable oracle re-solves the same estimation problem by a
//! deliberately different route: explicit intercept + dummy columns, an SVD
//! solve, and the clustered sandwich assembled directly from the full design.
//! Production code never calls any of this.

// Each integration test binary compiles this module separately and uses a
// different subset of it.
#![allow(dead_code)]

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Coefficients and clustered SEs for the leading (non-dummy) columns.
pub struct OracleFit {
    pub coefficients: Vec<f64>,
    pub se: Vec<f64>,
    /// Residuals of the full dummy regression.
    pub residuals: Vec<f64>,
    /// Total column count of the expanded design (K + intercept + dummies).
    pub k_total: usize,
}

/// Explicit-dummy weighted least squares with CR0/CR1 clustered covariance.
/// `fe` holds label vectors; each dimension contributes G−1 dummies plus the
/// shared intercept.
pub fn dummy_wls_oracle(
    y: &[f64],
    x: &[Vec<f64>],
    weights: &[f64],
    fe: &[Vec<String>],
    clusters: &[String],
    cr1: bool,
) -> OracleFit {
    let n = y.len();
    let k = x.len();
    let mut columns: Vec<Vec<f64>> = x.to_vec();
    columns.push(vec![1.0; n]);
    for dim in fe {
        let mut first_seen: Vec<&str> = Vec::new();
        let mut level_of: HashMap<&str, usize> = HashMap::new();
        for label in dim {
            if !level_of.contains_key(label.as_str()) {
                level_of.insert(label.as_str(), first_seen.len());
                first_seen.push(label.as_str());
            }
        }
        for level in 1..first_seen.len() {
            let dummy: Vec<f64> = dim
                .iter()
                .map(|l| if level_of[l.as_str()] == level { 1.0 } else { 0.0 })
                .collect();
            columns.push(dummy);
        }
    }
    let p = columns.len();
    assert!(n > p, "oracle instance too small: n = {n}, p = {p}");

    let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let mut a = DMatrix::<f64>::zeros(n, p);
    for (j, col) in columns.iter().enumerate() {
        for i in 0..n {
            a[(i, j)] = col[i] * sqrt_w[i];
        }
    }
    let b = DVector::from_iterator(n, y.iter().zip(&sqrt_w).map(|(v, s)| v * s));
    let svd = a.clone().svd(true, true);
    let beta = svd.solve(&b, 1e-12).expect("oracle SVD solve");

    let mut residuals = vec![0.0; n];
    for i in 0..n {
        let mut fitted = 0.0;
        for (j, col) in columns.iter().enumerate() {
            fitted += col[i] * beta[j];
        }
        residuals[i] = y[i] - fitted;
    }

    let bread = (a.transpose() * &a)
        .try_inverse()
        .expect("oracle bread inverse");

    let mut cluster_codes: HashMap<&str, usize> = HashMap::new();
    for label in clusters {
        let next = cluster_codes.len();
        cluster_codes.entry(label.as_str()).or_insert(next);
    }
    let g = cluster_codes.len();
    let mut scores = DMatrix::<f64>::zeros(g, p);
    for i in 0..n {
        let we = weights[i] * residuals[i];
        let row = cluster_codes[clusters[i].as_str()];
        for (j, col) in columns.iter().enumerate() {
            scores[(row, j)] += we * col[i];
        }
    }
    let meat = scores.transpose() * &scores;
    let factor = if cr1 {
        (g as f64 / (g as f64 - 1.0)) * ((n as f64 - 1.0) / (n as f64 - p as f64))
    } else {
        1.0
    };
    let vcov = &bread * meat * &bread * factor;

    OracleFit {
        coefficients: (0..k).map(|j| beta[j]).collect(),
        se: (0..k).map(|j| vcov[(j, j)].sqrt()).collect(),
        residuals,
        k_total: p,
    }
}

/// A random crossed-panel instance with D districts observed over T periods.
pub struct PanelInstance {
    pub y: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub x_names: Vec<String>,
    pub weights: Vec<f64>,
    pub districts: Vec<String>,
    pub periods: Vec<String>,
    pub clusters: Vec<String>,
}

pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; one value per call keeps the stream layout obvious.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generates a balanced crossed panel with district and period effects, a
/// continuous treatment interacted with a post indicator, and extra controls.
pub fn random_panel_instance(seed: u64, districts: usize, periods: usize, controls: usize) -> PanelInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = districts * periods;
    let district_effect: Vec<f64> = (0..districts).map(|_| standard_normal(&mut rng)).collect();
    let period_effect: Vec<f64> = (0..periods).map(|_| standard_normal(&mut rng)).collect();
    let intensity: Vec<f64> = (0..districts).map(|_| 4.8 + 1.2 * standard_normal(&mut rng)).collect();

    let mut y = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut district_labels = Vec::with_capacity(n);
    let mut period_labels = Vec::with_capacity(n);
    let mut treatment = Vec::with_capacity(n);
    let mut control_cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); controls];
    let gamma: Vec<f64> = (0..controls).map(|c| 0.1 * (c as f64 + 1.0)).collect();

    for d in 0..districts {
        for t in 0..periods {
            let post = if t >= periods / 2 { 1.0 } else { 0.0 };
            let treat = post * intensity[d];
            let mut mean = 1.5 + district_effect[d] + period_effect[t] + 0.02 * treat;
            for (c, col) in control_cols.iter_mut().enumerate() {
                let v = standard_normal(&mut rng);
                col.push(v);
                mean += gamma[c] * v;
            }
            y.push(mean + 0.3 * standard_normal(&mut rng));
            weights.push(rng.gen_range(0.5..3.0));
            district_labels.push(format!("d{d}"));
            period_labels.push(format!("t{t}"));
            treatment.push(treat);
        }
    }

    let mut x = vec![treatment];
    let mut x_names = vec!["treatment".to_owned()];
    for (c, col) in control_cols.into_iter().enumerate() {
        x.push(col);
        x_names.push(format!("control{c}"));
    }
    PanelInstance {
        y,
        x,
        x_names,
        weights,
        clusters: district_labels.clone(),
        districts: district_labels,
        periods: period_labels,
    }
}

/// Largest relative gap between paired values.
pub fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
    got.iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs() / b.abs().max(1e-12))
        .fold(0.0, f64::max)
}
