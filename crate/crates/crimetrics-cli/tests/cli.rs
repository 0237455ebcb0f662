//! End-to-end runs of the compiled binary against synthetic fixtures:
//! exit codes, output files, manifest contents, replay verification, and
//! independence from the worker thread count.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_crimetrics");

fn run_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args);
    for (key, value) in env {
        cmd.env(key, value);
    }
    cmd.output().expect("failed to spawn the crimetrics binary")
}

fn run(args: &[&str]) -> Output {
    run_env(args, &[])
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("process had no exit code")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn assert_ok(output: &Output) {
    assert_eq!(
        code(output),
        0,
        "expected success\nstdout:\n{}\nstderr:\n{}",
        stdout(output),
        stderr(output)
    );
}

// ---------------------------------------------------------------------------
// Fixture world: 12 districts in 2 regions, 2 LSOAs each, fiscal 2011-2015.

const DISTRICTS: usize = 12;
const LSOAS: usize = 2;

fn district(d: usize) -> String {
    format!("d{d:02}")
}

fn lsoa(d: usize, l: usize) -> String {
    format!("d{d:02}L{l}")
}

fn region(d: usize) -> String {
    format!("r{}", d / 6)
}

/// Months of one fiscal year, April through March.
fn fiscal_months(fy: i32) -> Vec<String> {
    let mut out = Vec::new();
    for m in 4..=12 {
        out.push(format!("{fy}-{m:02}"));
    }
    for m in 1..=3 {
        out.push(format!("{}-{m:02}", fy + 1));
    }
    out
}

struct Fixture {
    #[allow(dead_code)]
    dir: TempDir,
    root: PathBuf,
    crime_dir: PathBuf,
    lookup: PathBuf,
    covariates: PathBuf,
    austerity: PathBuf,
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn arg(&self, path: &Path) -> String {
        path.to_str().expect("fixture path is valid unicode").to_owned()
    }
}

/// Writes the full input world. `bad_lsoa_every` injects an unknown LSOA
/// code into every Nth incident row (0 disables).
fn fixture(bad_lsoa_every: usize) -> Fixture {
    let dir = TempDir::new().expect("create fixture dir");
    let root = dir.path().to_path_buf();
    let crime_dir = root.join("crime");
    fs::create_dir(&crime_dir).expect("create crime dir");

    let mut row_counter = 0usize;
    for fy in 2011..=2015 {
        let mut body = String::from("Month,Longitude,Latitude,Location,LSOA code,Crime type\n");
        for (mi, month) in fiscal_months(fy).iter().enumerate() {
            for d in 0..DISTRICTS {
                for l in 0..LSOAS {
                    let mut emit = |street: usize, crime_type: &str| {
                        row_counter += 1;
                        let code = if bad_lsoa_every > 0 && row_counter % bad_lsoa_every == 0 {
                            "XXBAD".to_owned()
                        } else {
                            lsoa(d, l)
                        };
                        let lon = -1.5 + d as f64 * 0.01 + l as f64 * 0.002 + street as f64 * 1e-4;
                        let lat = 52.0 + d as f64 * 0.01 + street as f64 * 1e-4;
                        body.push_str(&format!(
                            "{month},{lon},{lat},On or near Street {street},{code},{crime_type}\n"
                        ));
                    };
                    for s in 0..(2 + (d + mi) % 3) {
                        emit(s, "Burglary");
                    }
                    for s in 0..(1 + (d * 2 + mi) % 2) {
                        emit(s + 3, "Violence and sexual offences");
                    }
                    for s in 0..(1 + (d + l + mi) % 2) {
                        emit(s + 5, "Drugs");
                    }
                }
            }
        }
        fs::write(crime_dir.join(format!("fy{fy}.csv")), body).expect("write crime csv");
    }

    let mut lookup_body = String::from("lsoa_code,district_id,region_id,urban_flag\n");
    for d in 0..DISTRICTS {
        for l in 0..LSOAS {
            lookup_body.push_str(&format!("{},{},{},1\n", lsoa(d, l), district(d), region(d)));
        }
    }
    let lookup = root.join("lookup.csv");
    fs::write(&lookup, lookup_body).expect("write lookup");

    let mut cov_body = String::from(
        "district_id,period,population,working_age_population,police_per_1000,median_weekly_wage,share_m_10_17,share_m_18_24,share_m_25_30,share_m_31_40,share_m_41_50\n",
    );
    for d in 0..DISTRICTS {
        let mut mi = 0usize;
        for fy in 2011..=2015 {
            for month in fiscal_months(fy) {
                // Control values need genuine district-by-period variation
                // or they are absorbed by the fixed effects.
                let population = 80_000.0 + 2_000.0 * d as f64 + 10.0 * mi as f64;
                let working_age = (0.62 * population).round();
                let police = 2.0 + 0.08 * d as f64 + 0.01 * ((mi * (d + 3)) % 7) as f64;
                let wage = 430.0 + 6.0 * d as f64 + 0.5 * ((mi * (2 * d + 5)) % 9) as f64;
                let share =
                    |k: usize, base: f64| base + 0.0002 * ((mi * (d + k + 2)) % 5) as f64;
                cov_body.push_str(&format!(
                    "{},{month},{population},{working_age},{police},{wage},{},{},{},{},{}\n",
                    district(d),
                    share(0, 0.055),
                    share(1, 0.061),
                    share(2, 0.049),
                    share(3, 0.082),
                    share(4, 0.071),
                ));
                mi += 1;
            }
        }
    }
    let covariates = root.join("covariates.csv");
    fs::write(&covariates, cov_body).expect("write covariates");

    // 5 is coprime to 12, so this permutes 0..11 and mixes high and low
    // austerity within each region; a monotone assignment would make the
    // above-median indicator collinear with the region fixed effects.
    let mut sai_body = String::from("district_id,sai_pounds\n");
    for d in 0..DISTRICTS {
        sai_body.push_str(&format!("{},{}\n", district(d), 280.0 + 35.0 * ((d * 5) % 12) as f64));
    }
    let austerity = root.join("austerity.csv");
    fs::write(&austerity, sai_body).expect("write austerity");

    Fixture {
        dir,
        root,
        crime_dir,
        lookup,
        covariates,
        austerity,
    }
}

/// Runs ingest into `<root>/panel/panel.csv` and returns that path.
fn ingest_panel(fx: &Fixture) -> PathBuf {
    let panel = fx.path("panel/panel.csv");
    let output = run(&[
        "ingest",
        "--crime",
        &fx.arg(&fx.crime_dir),
        "--lookup",
        &fx.arg(&fx.lookup),
        "--covariates",
        &fx.arg(&fx.covariates),
        "--austerity",
        &fx.arg(&fx.austerity),
        "--out",
        &fx.arg(&panel),
    ]);
    assert_ok(&output);
    panel
}

fn write_streets(fx: &Fixture) -> PathBuf {
    let mut body = String::from("district_id,fiscal_year,street_id,total,property,violent,other\n");
    for d in 0..DISTRICTS {
        for fy in 2011..=2015 {
            for s in 0..20usize {
                let mut property = (s + d + fy as usize) % 4;
                let violent = (s * 2 + d) % 3;
                let other = (s + 1) % 2;
                if s == 0 {
                    property += 5 + d % 3;
                }
                let total = property + violent + other;
                body.push_str(&format!(
                    "{},{fy},s{s:02},{total},{property},{violent},{other}\n",
                    district(d)
                ));
            }
        }
    }
    let path = fx.path("streets.csv");
    fs::write(&path, body).expect("write streets");
    path
}

fn write_spec(fx: &Fixture, name: &str, body: &str) -> PathBuf {
    let path = fx.path(name);
    fs::write(&path, body).expect("write spec");
    path
}

// ---------------------------------------------------------------------------
// ingest

#[test]
fn ingest_builds_a_panel_and_records_a_manifest() {
    let fx = fixture(0);
    let panel = ingest_panel(&fx);
    assert!(panel.is_file());

    let manifest_path = fx.path("panel/panel_manifest.json");
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(&manifest_path).expect("manifest exists"))
            .expect("manifest is JSON");
    assert_eq!(manifest["command"], "ingest");
    // Five crime files plus lookup, covariates, austerity.
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 8);
    let outputs = manifest["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 1);
    assert_eq!(outputs[0]["path"], "panel.csv");

    let parsed = crimetrics::tables::panel_from_csv(&panel).expect("panel parses");
    assert_eq!(parsed.rows.len(), DISTRICTS * 5);
    assert_eq!(parsed.district_ids().len(), DISTRICTS);
}

#[test]
fn ingest_rejects_a_crime_file_missing_a_required_column() {
    let fx = fixture(0);
    fs::write(
        fx.crime_dir.join("broken.csv"),
        "Month,Longitude,Latitude,Location,LSOA code\n2011-04,-1.5,52.0,On or near Street 1,d00L0\n",
    )
    .expect("write broken file");
    let output = run(&[
        "ingest",
        "--crime",
        &fx.arg(&fx.crime_dir),
        "--lookup",
        &fx.arg(&fx.lookup),
        "--covariates",
        &fx.arg(&fx.covariates),
        "--austerity",
        &fx.arg(&fx.austerity),
        "--out",
        &fx.arg(&fx.path("panel/panel.csv")),
    ]);
    assert_eq!(code(&output), 2, "stderr:\n{}", stderr(&output));
    assert!(stderr(&output).contains("Crime type"));
}

#[test]
fn ingest_aborts_when_unresolved_geography_exceeds_the_threshold() {
    // Every 40th record gets an unknown LSOA: 2.5% unresolved, over the 1%
    // default threshold.
    let fx = fixture(40);
    let output = run(&[
        "ingest",
        "--crime",
        &fx.arg(&fx.crime_dir),
        "--lookup",
        &fx.arg(&fx.lookup),
        "--covariates",
        &fx.arg(&fx.covariates),
        "--austerity",
        &fx.arg(&fx.austerity),
        "--out",
        &fx.arg(&fx.path("panel/panel.csv")),
    ]);
    assert_eq!(code(&output), 3, "stderr:\n{}", stderr(&output));
    assert!(stderr(&output).contains("XXBAD"));
}

// ---------------------------------------------------------------------------
// estimate: argument and spec validation

#[test]
fn unknown_family_is_a_usage_error() {
    let fx = fixture(0);
    let spec = write_spec(&fx, "spec.json", "{}");
    let output = run(&[
        "estimate",
        "--spec",
        &fx.arg(&spec),
        "--family",
        "nonsense",
        "--out",
        &fx.arg(&fx.path("out")),
    ]);
    assert_eq!(code(&output), 2);
}

#[test]
fn unknown_spec_fields_are_rejected() {
    let fx = fixture(0);
    let panel = ingest_panel(&fx);
    let spec = write_spec(&fx, "spec.json", r#"{"no_such_field": 1}"#);
    let output = run(&[
        "estimate",
        "--panel",
        &fx.arg(&panel),
        "--spec",
        &fx.arg(&spec),
        "--family",
        "dd",
        "--out",
        &fx.arg(&fx.path("out")),
    ]);
    assert_eq!(code(&output), 2, "stderr:\n{}", stderr(&output));
    assert!(stderr(&output).contains("no_such_field"));
}

#[test]
fn a_spec_that_does_not_fit_the_panel_exits_4() {
    let fx = fixture(0);
    let panel = ingest_panel(&fx);
    // The panel holds fiscal 2011-2015 only, so this window matches nothing.
    let spec = write_spec(
        &fx,
        "spec.json",
        r#"{"plan": {"treatment": "continuous", "post": {"pooled": {"first_post_fiscal_year": 1993}}, "window": [1990, 1995], "cr": "cr1"}}"#,
    );
    let output = run(&[
        "estimate",
        "--panel",
        &fx.arg(&panel),
        "--spec",
        &fx.arg(&spec),
        "--family",
        "dd",
        "--out",
        &fx.arg(&fx.path("out")),
    ]);
    assert_eq!(code(&output), 4, "stderr:\n{}", stderr(&output));
    assert!(!stderr(&output).trim().is_empty(), "mismatch exits carry a diagnostic");
}

#[test]
fn becker_family_needs_no_panel_but_a_becker_block() {
    let fx = fixture(0);
    let missing = write_spec(&fx, "missing.json", "{}");
    let output = run(&[
        "estimate",
        "--spec",
        &fx.arg(&missing),
        "--family",
        "becker",
        "--out",
        &fx.arg(&fx.path("out_missing")),
    ]);
    assert_eq!(code(&output), 2);

    let spec = write_spec(
        &fx,
        "becker.json",
        r#"{"becker": {"gain": 800.0, "sanction": 2000.0, "wage": 450.0, "benefits": 120.0,
            "unemployment": 0.08, "kappa1": 0.002, "kappa2": 0.01, "kappa3": 0.05, "police": 2.5}}"#,
    );
    let out = fx.path("out_becker");
    let output = run(&[
        "estimate",
        "--spec",
        &fx.arg(&spec),
        "--family",
        "becker",
        "--out",
        &fx.arg(&out),
    ]);
    assert_ok(&output);
    let calibration = fs::read_to_string(out.join("calibration.csv")).expect("calibration exists");
    assert!(calibration.starts_with("metric,value\n"));
    assert!(calibration.contains("equilibrium_crime,"));
}

// ---------------------------------------------------------------------------
// estimate: families against the ingested panel

fn run_family(fx: &Fixture, panel: &Path, family: &str, spec_body: &str, out_name: &str) -> PathBuf {
    let spec = write_spec(fx, &format!("{out_name}.json"), spec_body);
    let out = fx.path(out_name);
    let output = run(&[
        "estimate",
        "--panel",
        &fx.arg(panel),
        "--spec",
        &fx.arg(&spec),
        "--family",
        family,
        "--out",
        &fx.arg(&out),
    ]);
    assert_ok(&output);
    assert!(out.join("estimate_manifest.json").is_file());
    out
}

fn csv_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .map(str::to_owned)
        .collect()
}

#[test]
fn pooled_dd_writes_one_estimate_row_and_summary_metrics() {
    let fx = fixture(0);
    let panel = ingest_panel(&fx);
    let out = run_family(&fx, &panel, "dd", "{}", "out_dd");

    let estimates = csv_lines(&out.join("estimates.csv"));
    assert_eq!(
        estimates[0],
        "table,outcome,term,coefficient,se,stars,n_obs,n_districts,pre_period_mean"
    );
    assert_eq!(estimates.len(), 2);
    assert!(estimates[1].starts_with("dd,total,post_x_austerity,"));

    let summary = fs::read_to_string(out.join("summary.csv")).expect("summary exists");
    for metric in [
        "n_obs",
        "n_districts",
        "treatment_sd",
        "pre_period_mean",
        "percent_per_sd",
    ] {
        assert!(summary.contains(metric), "summary is missing {metric}:\n{summary}");
    }
}

#[test]
fn binary_dynamic_and_placebo_families_run_on_default_plans() {
    let fx = fixture(0);
    let panel = ingest_panel(&fx);

    let out = run_family(&fx, &panel, "binary", "{}", "out_binary");
    let estimates = csv_lines(&out.join("estimates.csv"));
    assert!(estimates[1].starts_with("binary,total,post_x_austerity,"));

    let out = run_family(&fx, &panel, "dynamic", "{}", "out_dynamic");
    let event = csv_lines(&out.join("event_study.csv"));
    assert_eq!(event[0], "fiscal_year,coefficient,se,lo95,hi95");
    assert_eq!(event.len(), 4, "one row per post year 2013-2015");
    let estimates = csv_lines(&out.join("estimates.csv"));
    assert_eq!(estimates.len(), 4);
    assert!(estimates[1].contains("post2013_x_austerity"));

    let out = run_family(&fx, &panel, "placebo", "{}", "out_placebo");
    let estimates = csv_lines(&out.join("estimates.csv"));
    assert!(estimates[1].starts_with("placebo,total,placebo_post_x_austerity,"));
    let summary = fs::read_to_string(out.join("summary.csv")).expect("summary exists");
    assert!(summary.contains("max_fiscal_year_used,2012"));
}

#[test]
fn outcome_selection_flows_into_the_table_label() {
    let fx = fixture(0);
    let panel = ingest_panel(&fx);
    let out = run_family(&fx, &panel, "dd", r#"{"outcome": "property"}"#, "out_property");
    let estimates = csv_lines(&out.join("estimates.csv"));
    assert!(estimates[1].starts_with("dd,property,post_x_austerity,"));
}

#[test]
fn labor_family_runs_a_battery_over_value_files() {
    let fx = fixture(0);
    let panel = ingest_panel(&fx);

    let mut body = String::from("district_id,period,value\n");
    for d in 0..DISTRICTS {
        for (yi, fy) in (2011..=2015).enumerate() {
            let value = 0.60 + 0.01 * d as f64 + 0.002 * yi as f64
                - 0.004 * ((d % 4) as f64) * if fy >= 2013 { 1.0 } else { 0.0 };
            body.push_str(&format!("{},{fy},{value}\n", district(d)));
        }
    }
    let values = fx.path("employment.csv");
    fs::write(&values, body).expect("write values");

    let spec_body = format!(
        r#"{{"labor_outcomes": [{{"label": "employment_rate", "file": {}}}]}}"#,
        serde_json::to_string(&values).unwrap()
    );
    let out = run_family(&fx, &panel, "labor", &spec_body, "out_labor");
    let estimates = csv_lines(&out.join("estimates.csv"));
    assert_eq!(estimates.len(), 2);
    assert!(estimates[1].starts_with("labor,employment_rate,post_x_austerity,"));
    let summary = fs::read_to_string(out.join("summary.csv")).expect("summary exists");
    assert!(summary.contains("percent_per_sd.employment_rate,"));
}

#[test]
fn recidivism_family_fits_each_group_and_outcome() {
    let fx = fixture(0);
    let panel = ingest_panel(&fx);

    let mut body =
        String::from("district_id,cohort_start_quarter,group,offenders,reoffenders,reoffences,prior_offences\n");
    for d in 0..DISTRICTS {
        for (qi, quarter) in ["2012-Q1", "2012-Q3", "2013-Q1", "2013-Q3"].iter().enumerate() {
            for group in ["benefit", "comparison"] {
                let offenders = 200 + 10 * d;
                let reoffenders = 60 + (d + qi * 3) % 20;
                body.push_str(&format!(
                    "{},{quarter},{group},{offenders},{reoffenders},{},{}\n",
                    district(d),
                    reoffenders * 2 + d,
                    150 + 5 * d
                ));
            }
        }
    }
    let cohorts = fx.path("cohorts.csv");
    fs::write(&cohorts, body).expect("write cohorts");

    let spec_body = format!(
        r#"{{"cohorts": {}}}"#,
        serde_json::to_string(&cohorts).unwrap()
    );
    let out = run_family(&fx, &panel, "recidivism", &spec_body, "out_recidivism");
    let estimates = csv_lines(&out.join("estimates.csv"));
    // 2 groups x 4 outcomes, one coefficient row each.
    assert_eq!(estimates.len(), 9);
    assert!(estimates.iter().any(|l| l.contains("benefit/rate")));
    assert!(estimates.iter().any(|l| l.contains("comparison/intensity_ratio")));
}

#[test]
fn neighborhood_family_profiles_crime_change_by_deprivation() {
    let fx = fixture(0);
    let panel = ingest_panel(&fx);

    let mut counts = String::from("lsoa_code,district_id,fiscal_year,total,property,violent\n");
    for d in 0..DISTRICTS {
        for l in 0..LSOAS {
            for fy in 2011..=2015 {
                let total = 40 + d + l + (fy as usize % 3);
                counts.push_str(&format!(
                    "{},{},{fy},{total},{},{}\n",
                    lsoa(d, l),
                    district(d),
                    total / 2,
                    total / 4
                ));
            }
        }
    }
    let counts_path = fx.path("neighborhood_counts.csv");
    fs::write(&counts_path, counts).expect("write neighborhood counts");

    let mut imd = String::from("lsoa_code,health,education,housing_barriers,living_env\n");
    for d in 0..DISTRICTS {
        for l in 0..LSOAS {
            imd.push_str(&format!(
                "{},{},{},{},{}\n",
                lsoa(d, l),
                1.3 * d as f64 + 0.7 * l as f64,
                0.9 * d as f64 + 0.3 * l as f64,
                0.5 * d as f64,
                0.4 * d as f64 + 0.2 * l as f64,
            ));
        }
    }
    let imd_path = fx.path("imd.csv");
    fs::write(&imd_path, imd).expect("write imd");

    let spec_body = format!(
        r#"{{"neighborhoods": {}, "imd": {}}}"#,
        serde_json::to_string(&counts_path).unwrap(),
        serde_json::to_string(&imd_path).unwrap()
    );
    let out = run_family(&fx, &panel, "neighborhood", &spec_body, "out_neighborhood");
    let profile = csv_lines(&out.join("deprivation_profile.csv"));
    assert_eq!(profile[0], "series,percentile,mean_change");
    // 3 outcomes x raw/residualized, 24 neighborhoods each.
    assert_eq!(profile.len(), 1 + 6 * DISTRICTS * LSOAS);
    assert!(profile.iter().any(|l| l.starts_with("total_raw,")));
    assert!(profile.iter().any(|l| l.starts_with("violent_residualized,")));
    let summary = fs::read_to_string(out.join("summary.csv")).expect("summary exists");
    assert!(summary.contains(&format!("neighborhoods_used,{}", DISTRICTS * LSOAS)));
}

#[test]
fn ddd_families_split_the_effect_into_quintiles() {
    let fx = fixture(0);
    let panel = ingest_panel(&fx);
    let streets = write_streets(&fx);

    let mcc_out = fx.path("out_mcc");
    let output = run(&[
        "mcc",
        "--panel",
        &fx.arg(&panel),
        "--streets",
        &fx.arg(&streets),
        "--runs",
        "200",
        "--seed",
        "11",
        "--out",
        &fx.arg(&mcc_out),
    ]);
    assert_ok(&output);
    let records = mcc_out.join("concentration.csv");

    let spec_body = format!(
        r#"{{"mcc_records": {}}}"#,
        serde_json::to_string(&records).unwrap()
    );
    let out = run_family(&fx, &panel, "ddd-mcc", &spec_body, "out_ddd_mcc");
    let estimates = csv_lines(&out.join("estimates.csv"));
    assert_eq!(estimates.len(), 6, "five quintile rows:\n{}", estimates.join("\n"));
    assert!(estimates[1].contains("post_x_austerity_q1"));
    assert!(estimates[5].contains("post_x_austerity_q5"));
    let summary = fs::read_to_string(out.join("summary.csv")).expect("summary exists");
    assert!(summary.contains("top_bottom_ratio,"));
    assert!(summary.contains("weight_share_q5,"));

    let spec_body = r#"{"police_basis": {"police_level": {"fiscal_year": 2012}}}"#;
    let out = run_family(&fx, &panel, "ddd-police", spec_body, "out_ddd_police");
    let estimates = csv_lines(&out.join("estimates.csv"));
    assert_eq!(estimates.len(), 6);
    assert!(estimates[1].starts_with("ddd_police,total,post_x_austerity_q1,"));
}

#[test]
fn nonparam_family_writes_a_dose_response_grid() {
    let fx = fixture(0);
    let panel = ingest_panel(&fx);
    let spec_body = r#"{"local_linear": {"grid_points": 40, "bootstrap": 50, "min_effective": 5, "seed": 3}}"#;
    let out = run_family(&fx, &panel, "nonparam", spec_body, "out_nonparam");
    let grid = csv_lines(&out.join("dose_response.csv"));
    assert_eq!(grid[0], "grid,fit,lo95,hi95,density,effective_n");
    assert_eq!(grid.len(), 41);
    let summary = fs::read_to_string(out.join("summary.csv")).expect("summary exists");
    assert!(summary.contains("bandwidth,"));
    assert!(summary.contains("fwl_slope,"));
}

// ---------------------------------------------------------------------------
// mcc and replay

#[test]
fn mcc_panel_mismatch_exits_4() {
    let fx = fixture(0);
    let panel = ingest_panel(&fx);
    let mut body = String::from("district_id,fiscal_year,street_id,total,property,violent,other\n");
    body.push_str("zz99,2013,s00,3,2,1,0\n");
    let streets = fx.path("streets_outside.csv");
    fs::write(&streets, body).expect("write streets");
    let output = run(&[
        "mcc",
        "--panel",
        &fx.arg(&panel),
        "--streets",
        &fx.arg(&streets),
        "--runs",
        "50",
        "--seed",
        "5",
        "--out",
        &fx.arg(&fx.path("out_mcc_mismatch")),
    ]);
    assert_eq!(code(&output), 4, "stderr:\n{}", stderr(&output));
}

#[test]
fn mcc_rejects_inconsistent_street_counts() {
    let fx = fixture(0);
    let panel = ingest_panel(&fx);
    let mut body = String::from("district_id,fiscal_year,street_id,total,property,violent,other\n");
    body.push_str("d00,2013,s00,5,2,1,0\n");
    let streets = fx.path("streets_bad.csv");
    fs::write(&streets, body).expect("write streets");
    let output = run(&[
        "mcc",
        "--panel",
        &fx.arg(&panel),
        "--streets",
        &fx.arg(&streets),
        "--out",
        &fx.arg(&fx.path("out_mcc_bad")),
    ]);
    assert_eq!(code(&output), 2, "stderr:\n{}", stderr(&output));
    assert!(stderr(&output).contains("sum to total"));
}

#[test]
fn mcc_output_replays_byte_identically_and_detects_changed_inputs() {
    let fx = fixture(0);
    let panel = ingest_panel(&fx);
    let streets = write_streets(&fx);
    let out = fx.path("out_mcc");
    let output = run(&[
        "mcc",
        "--panel",
        &fx.arg(&panel),
        "--streets",
        &fx.arg(&streets),
        "--runs",
        "200",
        "--seed",
        "11",
        "--out",
        &fx.arg(&out),
    ]);
    assert_ok(&output);
    let first = fs::read(out.join("concentration.csv")).expect("concentration exists");
    let manifest = out.join("mcc_manifest.json");

    let replay_out = fx.path("out_mcc_replay");
    let output = run(&[
        "replay",
        "--manifest",
        &fx.arg(&manifest),
        "--out",
        &fx.arg(&replay_out),
    ]);
    assert_ok(&output);
    assert!(stdout(&output).contains("identical concentration.csv"));
    let second = fs::read(replay_out.join("concentration.csv")).expect("replayed output exists");
    assert_eq!(first, second, "replayed bytes differ");

    // Changing a recorded input must fail verification before any rerun.
    let mut tampered = fs::read_to_string(&streets).expect("read streets");
    tampered.push_str("d00,2013,zz,1,1,0,0\n");
    fs::write(&streets, tampered).expect("tamper with streets");
    let output = run(&[
        "replay",
        "--manifest",
        &fx.arg(&manifest),
        "--out",
        &fx.arg(&fx.path("out_mcc_replay2")),
    ]);
    assert_eq!(code(&output), 1, "stderr:\n{}", stderr(&output));
    assert!(stderr(&output).contains("inputs changed"));
}

#[test]
fn estimate_replay_reuses_the_drawn_seed() {
    let fx = fixture(0);
    let panel = ingest_panel(&fx);
    // No seed in the spec: one is drawn, resolved into the manifest, and
    // must drive the replayed bootstrap identically.
    let spec_body = r#"{"local_linear": {"grid_points": 30, "bootstrap": 40, "min_effective": 5}}"#;
    let out = run_family(&fx, &panel, "nonparam", spec_body, "out_np_seed");
    let first = fs::read(out.join("dose_response.csv")).expect("dose response exists");

    let replay_out = fx.path("out_np_replay");
    let output = run(&[
        "replay",
        "--manifest",
        &fx.arg(&out.join("estimate_manifest.json")),
        "--out",
        &fx.arg(&replay_out),
    ]);
    assert_ok(&output);
    let second = fs::read(replay_out.join("dose_response.csv")).expect("replayed output exists");
    assert_eq!(first, second);
}

#[test]
fn worker_thread_count_never_changes_results() {
    let fx = fixture(0);
    let panel = ingest_panel(&fx);
    let streets = write_streets(&fx);
    let mut outputs = Vec::new();
    for (threads, name) in [("1", "out_t1"), ("4", "out_t4")] {
        let out = fx.path(name);
        let output = run_env(
            &[
                "mcc",
                "--panel",
                &fx.arg(&panel),
                "--streets",
                &fx.arg(&streets),
                "--runs",
                "150",
                "--seed",
                "99",
                "--out",
                &fx.arg(&out),
            ],
            &[("CRIMETRICS_THREADS", threads)],
        );
        assert_ok(&output);
        outputs.push(fs::read(out.join("concentration.csv")).expect("concentration exists"));
    }
    assert_eq!(outputs[0], outputs[1], "thread count changed the table");
}

#[test]
fn invalid_thread_count_is_a_usage_error() {
    let fx = fixture(0);
    let output = run_env(
        &["replay", "--manifest", &fx.arg(&fx.path("none.json")), "--out", &fx.arg(&fx.path("o"))],
        &[("CRIMETRICS_THREADS", "zero")],
    );
    assert_eq!(code(&output), 2, "stderr:\n{}", stderr(&output));
    assert!(stderr(&output).contains("CRIMETRICS_THREADS"));
}
