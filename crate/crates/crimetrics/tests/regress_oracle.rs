//! Equivalence of the absorption + MGS pipeline with an explicit-dummy SVD
//! oracle, plus classical-SE sanity checks.

mod common;

use common::{dummy_wls_oracle, max_rel_err, random_panel_instance, standard_normal};
use crimetrics::regress::{
    absorb_fixed_effects, cluster_robust_vcov, fit, wls_solve, CrKind, DesignMatrix, FitOptions,
    DEFAULT_ABSORB_MAX_ITER, DEFAULT_ABSORB_TOL,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn design_from_instance(inst: &common::PanelInstance) -> DesignMatrix {
    let mut design = DesignMatrix::new(inst.y.clone(), inst.weights.clone()).unwrap();
    for (name, col) in inst.x_names.iter().zip(&inst.x) {
        design.push_x(name, col.clone()).unwrap();
    }
    design.push_fe("district", &inst.districts).unwrap();
    design.push_fe("period", &inst.periods).unwrap();
    design.set_clusters(&inst.clusters).unwrap();
    design
}

#[test]
fn no_fe_solution_matches_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let n = 50;
    let x1: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
    let x2: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..2.0)).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| 0.7 + 2.0 * x1[i] - 0.5 * x2[i] + 0.1 * standard_normal(&mut rng))
        .collect();

    let mut design = DesignMatrix::new(y.clone(), w.clone()).unwrap();
    design.push_x("intercept", vec![1.0; n]).unwrap();
    design.push_x("x1", x1.clone()).unwrap();
    design.push_x("x2", x2.clone()).unwrap();
    let absorbed =
        absorb_fixed_effects(&design, DEFAULT_ABSORB_TOL, DEFAULT_ABSORB_MAX_ITER).unwrap();
    let solution = wls_solve(&absorbed).unwrap();

    // Independent route: solve X'WX b = X'Wy densely.
    let cols = [vec![1.0; n], x1, x2];
    let mut xtwx = DMatrix::<f64>::zeros(3, 3);
    let mut xtwy = DVector::<f64>::zeros(3);
    for i in 0..n {
        for a in 0..3 {
            xtwy[a] += w[i] * cols[a][i] * y[i];
            for b in 0..3 {
                xtwx[(a, b)] += w[i] * cols[a][i] * cols[b][i];
            }
        }
    }
    let beta = xtwx.lu().solve(&xtwy).unwrap();
    let want: Vec<f64> = beta.iter().copied().collect();
    assert!(
        max_rel_err(&solution.coefficients, &want) < 1e-9,
        "MGS vs normal equations: {:?} vs {:?}",
        solution.coefficients,
        want
    );
}

#[test]
fn two_way_fit_matches_dummy_oracle() {
    let inst = random_panel_instance(96, 25, 8, 2);
    let design = design_from_instance(&inst);
    let result = fit(&design, &FitOptions::default()).unwrap();
    let oracle = dummy_wls_oracle(
        &inst.y,
        &inst.x,
        &inst.weights,
        &[inst.districts.clone(), inst.periods.clone()],
        &inst.clusters,
        true,
    );

    assert!(
        max_rel_err(&result.coefficients, &oracle.coefficients) < 1e-8,
        "coefficients diverge: {:?} vs {:?}",
        result.coefficients,
        oracle.coefficients
    );
    let se = result.se();
    assert!(
        max_rel_err(&se, &oracle.se) < 1e-6,
        "clustered SEs diverge: {se:?} vs {:?}",
        oracle.se
    );
    // The absorbed-dof accounting must agree with the oracle's column count.
    assert_eq!(result.k + result.absorbed_dof, oracle.k_total);
}

#[test]
fn absorption_residuals_match_dummy_regression() {
    let inst = random_panel_instance(7, 6, 4, 0);
    let mut design = DesignMatrix::new(inst.y.clone(), inst.weights.clone()).unwrap();
    design.push_x("treatment", inst.x[0].clone()).unwrap();
    design.push_fe("district", &inst.districts).unwrap();
    design.push_fe("period", &inst.periods).unwrap();
    let absorbed = absorb_fixed_effects(&design, 1e-12, DEFAULT_ABSORB_MAX_ITER).unwrap();

    // Regressing y on dummies alone gives the same residual vector that
    // absorption produces as the demeaned outcome.
    let oracle = dummy_wls_oracle(
        &inst.y,
        &[],
        &inst.weights,
        &[inst.districts.clone(), inst.periods.clone()],
        &inst.districts,
        false,
    );
    assert!(
        absorbed
            .y
            .iter()
            .zip(&oracle.residuals)
            .all(|(a, b)| (a - b).abs() < 1e-8),
        "absorbed outcome differs from dummy-regression residuals"
    );
}

#[test]
fn singleton_clusters_reproduce_hc1() {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let n = 120;
    let x1: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| 1.0 + 0.5 * x1[i] + (1.0 + x1[i].abs()) * standard_normal(&mut rng))
        .collect();

    let mut design = DesignMatrix::new(y.clone(), vec![1.0; n]).unwrap();
    design.push_x("intercept", vec![1.0; n]).unwrap();
    design.push_x("x1", x1.clone()).unwrap();
    let singleton: Vec<String> = (0..n).map(|i| format!("obs{i}")).collect();
    design.set_clusters(&singleton).unwrap();
    let absorbed =
        absorb_fixed_effects(&design, DEFAULT_ABSORB_TOL, DEFAULT_ABSORB_MAX_ITER).unwrap();
    let solution = wls_solve(&absorbed).unwrap();
    let vcov = cluster_robust_vcov(&absorbed, &solution, CrKind::Cr1).unwrap();

    // HC1 assembled directly: (N/(N-K)) (X'X)^-1 [sum e^2 x x'] (X'X)^-1.
    let cols = [vec![1.0; n], x1];
    let mut xtx = DMatrix::<f64>::zeros(2, 2);
    let mut meat = DMatrix::<f64>::zeros(2, 2);
    for i in 0..n {
        let e2 = solution.residuals[i] * solution.residuals[i];
        for a in 0..2 {
            for b in 0..2 {
                xtx[(a, b)] += cols[a][i] * cols[b][i];
                meat[(a, b)] += e2 * cols[a][i] * cols[b][i];
            }
        }
    }
    let bread = xtx.try_inverse().unwrap();
    let hc1 = &bread * meat * &bread * (n as f64 / (n as f64 - 2.0));
    for a in 0..2 {
        for b in 0..2 {
            assert!(
                (vcov[(a, b)] - hc1[(a, b)]).abs() <= 1e-10 * hc1[(a, b)].abs().max(1e-12),
                "vcov[{a},{b}] = {} vs HC1 {}",
                vcov[(a, b)],
                hc1[(a, b)]
            );
        }
    }
}

#[test]
fn duplicating_rows_within_clusters_rescales_only_the_small_sample_factor() {
    let inst = random_panel_instance(552, 12, 5, 1);
    let design = design_from_instance(&inst);
    let base_options = FitOptions {
        cr: CrKind::Cr0,
        ..FitOptions::default()
    };
    let base = fit(&design, &base_options).unwrap();

    let dup = |v: &Vec<f64>| -> Vec<f64> { v.iter().flat_map(|&x| [x, x]).collect() };
    let dup_s = |v: &Vec<String>| -> Vec<String> {
        v.iter().flat_map(|s| [s.clone(), s.clone()]).collect()
    };
    let mut doubled = DesignMatrix::new(dup(&inst.y), dup(&inst.weights)).unwrap();
    for (name, col) in inst.x_names.iter().zip(&inst.x) {
        doubled.push_x(name, dup(col)).unwrap();
    }
    doubled.push_fe("district", &dup_s(&inst.districts)).unwrap();
    doubled.push_fe("period", &dup_s(&inst.periods)).unwrap();
    doubled.set_clusters(&dup_s(&inst.clusters)).unwrap();
    let doubled_fit = fit(&doubled, &base_options).unwrap();

    // Duplication doubles every cluster score and halves the bread, so CR0
    // point estimates and SEs are unchanged; only the CR1 factor moves.
    assert!(
        max_rel_err(&doubled_fit.coefficients, &base.coefficients) < 1e-10,
        "duplication moved point estimates"
    );
    assert!(
        max_rel_err(&doubled_fit.se(), &base.se()) < 1e-10,
        "duplication moved CR0 SEs: {:?} vs {:?}",
        doubled_fit.se(),
        base.se()
    );

    let cr1 = fit(&design, &FitOptions::default()).unwrap();
    let cr1_doubled = fit(&doubled, &FitOptions::default()).unwrap();
    let n = base.n as f64;
    let g = base.g as f64;
    let k_total = (base.k + base.absorbed_dof) as f64;
    let factor = |nn: f64| (g / (g - 1.0)) * ((nn - 1.0) / (nn - k_total));
    let expected_ratio = (factor(2.0 * n) / factor(n)).sqrt();
    for j in 0..cr1.k {
        let got_ratio = cr1_doubled.se()[j] / cr1.se()[j];
        assert!(
            (got_ratio - expected_ratio).abs() < 1e-8,
            "CR1 ratio {got_ratio} vs analytic {expected_ratio}"
        );
    }
}

#[test]
fn clustered_se_tracks_classical_se_under_homoskedasticity() {
    // With iid errors and independent clusters the clustered SE estimates the
    // same quantity as the classical one; averaged over draws they agree.
    let clusters = 40;
    let per_cluster = 10;
    let n = clusters * per_cluster;
    let mut ratio_sum = 0.0;
    let draws = 100;
    for rep in 0..draws {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + rep);
        let x1: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| 0.3 + 1.0 * x1[i] + standard_normal(&mut rng))
            .collect();
        let mut design = DesignMatrix::new(y.clone(), vec![1.0; n]).unwrap();
        design.push_x("intercept", vec![1.0; n]).unwrap();
        design.push_x("x1", x1.clone()).unwrap();
        let labels: Vec<String> = (0..n).map(|i| format!("g{}", i / per_cluster)).collect();
        design.set_clusters(&labels).unwrap();
        let absorbed =
            absorb_fixed_effects(&design, DEFAULT_ABSORB_TOL, DEFAULT_ABSORB_MAX_ITER).unwrap();
        let solution = wls_solve(&absorbed).unwrap();
        let vcov = cluster_robust_vcov(&absorbed, &solution, CrKind::Cr1).unwrap();
        let clustered_se = vcov[(1, 1)].sqrt();

        let mut xtx = DMatrix::<f64>::zeros(2, 2);
        let mut sse = 0.0;
        for i in 0..n {
            sse += solution.residuals[i] * solution.residuals[i];
            let cols = [1.0, x1[i]];
            for a in 0..2 {
                for b in 0..2 {
                    xtx[(a, b)] += cols[a] * cols[b];
                }
            }
        }
        let classical = (xtx.try_inverse().unwrap() * (sse / (n as f64 - 2.0)))[(1, 1)].sqrt();
        ratio_sum += clustered_se / classical;
    }
    let mean_ratio = ratio_sum / draws as f64;
    assert!(
        (mean_ratio - 1.0).abs() < 0.15,
        "mean clustered/classical SE ratio {mean_ratio}"
    );
}

#[test]
fn partialling_out_controls_leaves_treatment_coefficient_unchanged() {
    let inst = random_panel_instance(314, 30, 6, 3);
    let design = design_from_instance(&inst);
    let full = fit(&design, &FitOptions::default()).unwrap();
    let beta_full = full.coefficient("treatment").unwrap();

    // Residualize outcome and treatment on controls + fixed effects, then
    // regress residual on residual.
    let controls: Vec<usize> = (1..inst.x.len()).collect();
    let residualize = |target: &[f64]| -> Vec<f64> {
        let mut d = DesignMatrix::new(target.to_vec(), inst.weights.clone()).unwrap();
        for &c in &controls {
            d.push_x(&inst.x_names[c], inst.x[c].clone()).unwrap();
        }
        d.push_fe("district", &inst.districts).unwrap();
        d.push_fe("period", &inst.periods).unwrap();
        d.set_clusters(&inst.clusters).unwrap();
        let reduced = fit(&d, &FitOptions::default()).unwrap();
        reduced.residuals
    };
    let ey = residualize(&inst.y);
    let ed = residualize(&inst.x[0]);

    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..ey.len() {
        num += inst.weights[i] * ed[i] * ey[i];
        den += inst.weights[i] * ed[i] * ed[i];
    }
    let beta_fwl = num / den;
    assert!(
        (beta_full - beta_fwl).abs() < 1e-8,
        "FWL slope {beta_fwl} vs full fit {beta_full}"
    );
}
