//! Weighted least squares with multi-way fixed-effect absorption and
//! cluster-robust covariance. This is the numeric core under every
//! specification: fixed effects are swept out by weighted alternating
//! projections, the reduced system is solved by an orthogonal decomposition
//! on √w-scaled data, and inference uses the clustered sandwich with a
//! CR0/CR1 small-sample switch.

use std::collections::HashMap;

use nalgebra::DMatrix;
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::{Error, Result};

/// Default convergence tolerance on the max absolute cell change per sweep.
pub const DEFAULT_ABSORB_TOL: f64 = 1e-10;
/// Default cap on absorption sweeps.
pub const DEFAULT_ABSORB_MAX_ITER: usize = 10_000;

/// Threshold under which an absorbed column counts as constant within groups.
const ZERO_COLUMN_TOL: f64 = 1e-10;
/// Relative threshold under which a column is collinear with earlier ones.
const COLLINEAR_TOL: f64 = 1e-8;

/// A named regressor column.
#[derive(Clone, Debug)]
pub struct Column {
    pub name: String,
    pub values: Vec<f64>,
}

/// One fixed-effect dimension with dense group codes.
#[derive(Clone, Debug)]
pub struct FeDimension {
    pub name: String,
    pub codes: Vec<usize>,
    pub groups: usize,
}

fn dense_codes<S: AsRef<str>>(labels: &[S]) -> (Vec<usize>, usize) {
    let mut map: HashMap<&str, usize> = HashMap::new();
    let mut codes = Vec::with_capacity(labels.len());
    for label in labels {
        let next = map.len();
        let code = *map.entry(label.as_ref()).or_insert(next);
        codes.push(code);
    }
    (codes, map.len())
}

/// Outcome, regressors (treatment terms then controls), weights,
/// fixed-effect dimensions, and cluster labels.
#[derive(Clone, Debug)]
pub struct DesignMatrix {
    pub y: Vec<f64>,
    pub x: Vec<Column>,
    pub weights: Vec<f64>,
    pub fe: Vec<FeDimension>,
    pub clusters: Vec<usize>,
    pub n_clusters: usize,
}

impl DesignMatrix {
    pub fn new(y: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::Data("empty design".into()));
        }
        if weights.len() != y.len() {
            return Err(Error::Data("weights and outcome lengths differ".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(Error::Data(format!("weights must be positive and finite, got {w}")));
        }
        Ok(DesignMatrix {
            y,
            x: Vec::new(),
            weights,
            fe: Vec::new(),
            clusters: Vec::new(),
            n_clusters: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn push_x(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.n() {
            return Err(Error::Data(format!("column {name} has wrong length")));
        }
        self.x.push(Column { name: name.to_owned(), values });
        Ok(())
    }

    pub fn push_fe<S: AsRef<str>>(&mut self, name: &str, labels: &[S]) -> Result<()> {
        if labels.len() != self.n() {
            return Err(Error::Data(format!("fixed-effect dimension {name} has wrong length")));
        }
        let (codes, groups) = dense_codes(labels);
        self.fe.push(FeDimension { name: name.to_owned(), codes, groups });
        Ok(())
    }

    pub fn set_clusters<S: AsRef<str>>(&mut self, labels: &[S]) -> Result<()> {
        if labels.len() != self.n() {
            return Err(Error::Data("cluster labels have wrong length".into()));
        }
        let (codes, groups) = dense_codes(labels);
        self.clusters = codes;
        self.n_clusters = groups;
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.x.is_empty() {
            return Err(Error::Data("design has no regressors".into()));
        }
        Ok(())
    }
}

/// A design after fixed-effect absorption.
#[derive(Clone, Debug)]
pub struct AbsorbedDesign {
    pub y: Vec<f64>,
    pub x: Vec<Column>,
    pub weights: Vec<f64>,
    pub clusters: Vec<usize>,
    pub n_clusters: usize,
    /// Weighted 2-norms of the columns before absorption, for the
    /// constant-within-groups drop test.
    pub pre_norms: Vec<f64>,
    pub fe_group_counts: Vec<usize>,
    /// Model degrees of freedom consumed by the absorbed effects.
    pub absorbed_dof: usize,
    /// Full demeaning sweeps performed.
    pub iterations: usize,
    /// Max absolute cell change in the final sweep.
    pub final_change: f64,
}

fn weighted_norm(values: &[f64], weights: &[f64]) -> f64 {
    values
        .iter()
        .zip(weights)
        .map(|(v, w)| w * v * v)
        .sum::<f64>()
        .sqrt()
}

/// Union-find count of connected components in the bipartite graph of the
/// first two FE dimensions. This is the exact redundancy count absorbed by
/// two crossed dimensions; further dimensions use the standard one-redundancy
/// heuristic.
fn two_dim_components(a: &FeDimension, b: &FeDimension) -> usize {
    let mut parent: Vec<usize> = (0..a.groups + b.groups).collect();
    fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for (&ca, &cb) in a.codes.iter().zip(&b.codes) {
        let ra = find(&mut parent, ca);
        let rb = find(&mut parent, a.groups + cb);
        if ra != rb {
            parent[ra] = rb;
        }
    }
    let mut roots: Vec<usize> = (0..parent.len()).map(|i| find(&mut parent, i)).collect();
    roots.sort_unstable();
    roots.dedup();
    roots.len()
}

fn absorbed_dof(fe: &[FeDimension]) -> usize {
    match fe {
        [] => 0,
        [only] => only.groups,
        [first, second, rest @ ..] => {
            let components = two_dim_components(first, second);
            first.groups + second.groups - components
                + rest.iter().map(|d| d.groups - 1).sum::<usize>()
        }
    }
}

/// Weighted-demeans the outcome and every regressor within each FE dimension
/// by alternating projections until the largest cell change in a full sweep
/// falls below `tol`. With one dimension a single pass is exact.
pub fn absorb_fixed_effects(
    design: &DesignMatrix,
    tol: f64,
    max_iter: usize,
) -> Result<AbsorbedDesign> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("absorption tol must be positive, got {tol}")));
    }
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(design.x.len() + 1);
    columns.push(design.y.clone());
    for c in &design.x {
        columns.push(c.values.clone());
    }
    let pre_norms: Vec<f64> =
        design.x.iter().map(|c| weighted_norm(&c.values, &design.weights)).collect();

    let group_weight_sums: Vec<Vec<f64>> = design
        .fe
        .iter()
        .map(|dim| {
            let mut sums = vec![0.0; dim.groups];
            for (i, &g) in dim.codes.iter().enumerate() {
                sums[g] += design.weights[i];
            }
            sums
        })
        .collect();

    let mut iterations = 0;
    let mut final_change = 0.0;
    if !design.fe.is_empty() {
        let mut converged = false;
        let mut acc: Vec<f64> = Vec::new();
        for _ in 0..max_iter {
            iterations += 1;
            let mut max_change = 0.0f64;
            for (dim, wsums) in design.fe.iter().zip(&group_weight_sums) {
                for col in &mut columns {
                    acc.clear();
                    acc.resize(dim.groups, 0.0);
                    for (i, &g) in dim.codes.iter().enumerate() {
                        acc[g] += design.weights[i] * col[i];
                    }
                    for (mean, wsum) in acc.iter_mut().zip(wsums) {
                        *mean /= *wsum;
                    }
                    for (i, &g) in dim.codes.iter().enumerate() {
                        col[i] -= acc[g];
                    }
                    for &mean in &acc {
                        max_change = max_change.max(mean.abs());
                    }
                }
            }
            final_change = max_change;
            if max_change < tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Numeric(format!(
                "fixed-effect absorption did not converge in {max_iter} sweeps \
                 (final max cell change {final_change:e})"
            )));
        }
    }

    let mut columns = columns.into_iter();
    let y = columns.next().expect("outcome column present");
    let x: Vec<Column> = design
        .x
        .iter()
        .zip(columns)
        .map(|(c, values)| Column { name: c.name.clone(), values })
        .collect();
    debug_assert_eq!(x.len(), design.x.len());
    Ok(AbsorbedDesign {
        y,
        x,
        weights: design.weights.clone(),
        clusters: design.clusters.clone(),
        n_clusters: design.n_clusters,
        pre_norms,
        fe_group_counts: design.fe.iter().map(|d| d.groups).collect(),
        absorbed_dof: absorbed_dof(&design.fe),
        iterations,
        final_change,
    })
}

/// Why a column was dropped from the solve.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DropReason {
    /// Constant within FE groups: absorption reduced the column to zero.
    ConstantWithinGroups,
    /// Linearly dependent on columns to its left.
    Collinear,
}

#[derive(Clone, Debug)]
pub struct DroppedColumn {
    pub name: String,
    pub reason: DropReason,
}

/// Solution of the weighted least-squares problem on an absorbed design.
#[derive(Clone, Debug)]
pub struct WlsSolution {
    /// Indices into the design's regressor list, in original order.
    pub kept: Vec<usize>,
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub dropped: Vec<DroppedColumn>,
    /// Residuals y − x'b on the absorbed (unscaled) data.
    pub residuals: Vec<f64>,
    /// Upper-triangular factor with R'R = X'WX over kept columns.
    pub r: DMatrix<f64>,
}

/// Minimizes Σ w_i (y_i − x_i'b)² via modified Gram-Schmidt (with
/// reorthogonalization) on √w-scaled columns. Rank-deficient columns are
/// dropped deterministically left-to-right and reported.
pub fn wls_solve(design: &AbsorbedDesign) -> Result<WlsSolution> {
    let n = design.y.len();
    let sqrt_w: Vec<f64> = design.weights.iter().map(|w| w.sqrt()).collect();
    let y_scaled: Vec<f64> = design.y.iter().zip(&sqrt_w).map(|(v, s)| v * s).collect();

    let mut q: Vec<Vec<f64>> = Vec::new();
    let mut r_cols: Vec<Vec<f64>> = Vec::new();
    let mut kept: Vec<usize> = Vec::new();
    let mut dropped: Vec<DroppedColumn> = Vec::new();

    for (j, col) in design.x.iter().enumerate() {
        let mut v: Vec<f64> = col.values.iter().zip(&sqrt_w).map(|(x, s)| x * s).collect();
        let entry_norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let pre_norm = design.pre_norms.get(j).copied().unwrap_or(entry_norm);
        if entry_norm <= ZERO_COLUMN_TOL * (1.0 + pre_norm) {
            dropped.push(DroppedColumn {
                name: col.name.clone(),
                reason: DropReason::ConstantWithinGroups,
            });
            continue;
        }
        let mut r_entries = vec![0.0; q.len()];
        for _ in 0..2 {
            for (i, qi) in q.iter().enumerate() {
                let dot: f64 = qi.iter().zip(&v).map(|(a, b)| a * b).sum();
                r_entries[i] += dot;
                for (vk, qk) in v.iter_mut().zip(qi) {
                    *vk -= dot * qk;
                }
            }
        }
        let res_norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if res_norm <= COLLINEAR_TOL * entry_norm {
            dropped.push(DroppedColumn { name: col.name.clone(), reason: DropReason::Collinear });
            continue;
        }
        for vk in &mut v {
            *vk /= res_norm;
        }
        r_entries.push(res_norm);
        q.push(v);
        r_cols.push(r_entries);
        kept.push(j);
    }

    let k = kept.len();
    if k == 0 {
        let names: Vec<&str> = dropped.iter().map(|d| d.name.as_str()).collect();
        return Err(Error::Numeric(format!(
            "all regressor columns were dropped: {names:?}"
        )));
    }
    if n <= k {
        return Err(Error::Data(format!("N = {n} must exceed K = {k}")));
    }

    let mut r = DMatrix::<f64>::zeros(k, k);
    for (jc, entries) in r_cols.iter().enumerate() {
        for (ic, &value) in entries.iter().enumerate() {
            r[(ic, jc)] = value;
        }
    }
    let qty: Vec<f64> = q
        .iter()
        .map(|qi| qi.iter().zip(&y_scaled).map(|(a, b)| a * b).sum())
        .collect();
    let mut coefficients = vec![0.0; k];
    for i in (0..k).rev() {
        let mut value = qty[i];
        for j in i + 1..k {
            value -= r[(i, j)] * coefficients[j];
        }
        coefficients[i] = value / r[(i, i)];
    }

    let mut residuals = design.y.clone();
    for (slot, b) in kept.iter().zip(&coefficients) {
        let col = &design.x[*slot].values;
        for (res, x) in residuals.iter_mut().zip(col) {
            *res -= b * x;
        }
    }

    Ok(WlsSolution {
        names: kept.iter().map(|&j| design.x[j].name.clone()).collect(),
        kept,
        coefficients,
        dropped,
        residuals,
        r,
    })
}

/// Small-sample correction for the clustered sandwich.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrKind {
    Cr0,
    #[default]
    Cr1,
}

/// Cluster-robust covariance: sandwich (X'WX)⁻¹ (Σ_g s_g s_g') (X'WX)⁻¹ with
/// s_g = Σ_{i∈g} w_i x_i e_i, scaled under CR1 by
/// (G/(G−1))·((N−1)/(N−K_total)) where K_total counts absorbed degrees of
/// freedom plus the kept regressors.
pub fn cluster_robust_vcov(
    design: &AbsorbedDesign,
    solution: &WlsSolution,
    cr: CrKind,
) -> Result<DMatrix<f64>> {
    let n = design.y.len();
    let g = design.n_clusters;
    let k = solution.kept.len();
    if g < 2 {
        return Err(Error::Data(format!("clustered inference requires G ≥ 2, got {g}")));
    }
    if design.clusters.len() != n {
        return Err(Error::Data("cluster labels have wrong length".into()));
    }

    // bread = (R'R)^{-1} = R^{-1} R^{-T}
    let identity = DMatrix::<f64>::identity(k, k);
    let r_inv = solution
        .r
        .clone()
        .solve_upper_triangular(&identity)
        .ok_or_else(|| Error::Numeric("singular bread matrix".into()))?;
    let bread = &r_inv * r_inv.transpose();

    let mut scores = DMatrix::<f64>::zeros(g, k);
    for i in 0..n {
        let we = design.weights[i] * solution.residuals[i];
        let row = design.clusters[i];
        for (col, &j) in solution.kept.iter().enumerate() {
            scores[(row, col)] += we * design.x[j].values[i];
        }
    }
    let meat = scores.transpose() * &scores;

    let k_total = design.absorbed_dof + k;
    let factor = match cr {
        CrKind::Cr0 => 1.0,
        CrKind::Cr1 => {
            if n <= k_total {
                return Err(Error::Data(format!(
                    "CR1 needs N > K_total, got N = {n}, K_total = {k_total}"
                )));
            }
            (g as f64 / (g as f64 - 1.0)) * ((n as f64 - 1.0) / (n as f64 - k_total as f64))
        }
    };

    let vcov = &bread * meat * &bread * factor;
    // Exact symmetry for downstream quadratic forms.
    let vcov = (&vcov + vcov.transpose()) * 0.5;
    Ok(vcov)
}

/// Fit options: absorption control and the covariance correction.
#[derive(Clone, Copy, Debug)]
pub struct FitOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub cr: CrKind,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: DEFAULT_ABSORB_TOL,
            max_iter: DEFAULT_ABSORB_MAX_ITER,
            cr: CrKind::Cr1,
        }
    }
}

/// A fitted model: estimates, clustered covariance, and fit metadata.
#[derive(Clone, Debug)]
pub struct FitResult {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub vcov: DMatrix<f64>,
    pub n: usize,
    pub k: usize,
    pub g: usize,
    pub fe_group_counts: Vec<usize>,
    pub absorbed_dof: usize,
    pub iterations: usize,
    pub dropped: Vec<DroppedColumn>,
    pub residuals: Vec<f64>,
}

impl FitResult {
    pub fn se(&self) -> Vec<f64> {
        (0..self.k).map(|i| self.vcov[(i, i)].sqrt()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.index_of(name).map(|i| self.coefficients[i])
    }

    pub fn se_of(&self, name: &str) -> Option<f64> {
        self.index_of(name).map(|i| self.vcov[(i, i)].sqrt())
    }

    /// Wald test of H0: Rβ = 0 against the clustered covariance. With G
    /// clusters the p-value comes from stat/q ~ F(q, G-1), the usual
    /// finite-cluster reference; a chi-squared read would over-reject
    /// joint restrictions at moderate G.
    pub fn wald(&self, restrictions: &DMatrix<f64>) -> Result<WaldTest> {
        let q = restrictions.nrows();
        if restrictions.ncols() != self.k || q == 0 {
            return Err(Error::Config("restriction matrix shape mismatch".into()));
        }
        let beta = nalgebra::DVector::from_column_slice(&self.coefficients);
        let rb = restrictions * beta;
        let rvr = restrictions * &self.vcov * restrictions.transpose();
        let rvr_inv = rvr
            .try_inverse()
            .ok_or_else(|| Error::Numeric("singular restriction covariance in Wald test".into()))?;
        let stat = (rb.transpose() * rvr_inv * rb)[(0, 0)];
        let df_denom = self.g.saturating_sub(1).max(1);
        let dist = FisherSnedecor::new(q as f64, df_denom as f64)
            .map_err(|e| Error::Numeric(format!("F distribution: {e}")))?;
        Ok(WaldTest { stat, df: q, df_denom, p_value: 1.0 - dist.cdf(stat / q as f64) })
    }

    /// Wald test that the named coefficients are all equal.
    pub fn wald_equal(&self, names: &[&str]) -> Result<WaldTest> {
        if names.len() < 2 {
            return Err(Error::Config("equality test needs at least two coefficients".into()));
        }
        let idx: Option<Vec<usize>> = names.iter().map(|n| self.index_of(n)).collect();
        let idx = idx.ok_or_else(|| {
            Error::Config(format!("equality test references unknown coefficients: {names:?}"))
        })?;
        let mut restrictions = DMatrix::<f64>::zeros(idx.len() - 1, self.k);
        for (row, pair) in idx.windows(2).enumerate() {
            restrictions[(row, pair[0])] = 1.0;
            restrictions[(row, pair[1])] = -1.0;
        }
        self.wald(&restrictions)
    }
}

/// Test statistic for a set of linear restrictions.
#[derive(Clone, Copy, Debug)]
pub struct WaldTest {
    pub stat: f64,
    pub df: usize,
    /// Denominator degrees of freedom: clusters minus one.
    pub df_denom: usize,
    pub p_value: f64,
}

/// Absorb, solve, and attach clustered covariance.
pub fn fit(design: &DesignMatrix, options: &FitOptions) -> Result<FitResult> {
    design.validate()?;
    let absorbed = absorb_fixed_effects(design, options.tol, options.max_iter)?;
    let solution = wls_solve(&absorbed)?;
    let vcov = cluster_robust_vcov(&absorbed, &solution, options.cr)?;
    Ok(FitResult {
        k: solution.kept.len(),
        names: solution.names,
        coefficients: solution.coefficients,
        vcov,
        n: design.n(),
        g: design.n_clusters,
        fe_group_counts: absorbed.fe_group_counts,
        absorbed_dof: absorbed.absorbed_dof,
        iterations: absorbed.iterations,
        dropped: solution.dropped,
        residuals: solution.residuals,
    })
}
