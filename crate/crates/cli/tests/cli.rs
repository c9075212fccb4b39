use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const HEADER: &str = "candidate_id,class,n_q1,n_q2,n_q3,n_q4,n_q1_ave_auth,n_q2_ave_auth,n_q3_ave_auth,n_q4_ave_auth,n_q1_fa,n_conf,n_conf_ave_auth,n_book,n_book_ave_auth,n_book_chp,n_book_chp_ave_auth,n_cit,h_ind,i10_ind,n_pat,n_pat_ave_auth,n_prj,n_award_recog_work,n_ms_stud,n_phd_stud,t_res,t_res_prime,r_nat_bs,r_nat_phd,r_inat_bs,r_inat_phd,gpa_u,gpa_g,n_course_u,n_course_g";

const ROWS: [&str; 6] = [
    "p1,positive,12,4,1,0,3,3,3,1,6,6,3,1,2,2,2,1500,14,18,1,2,4,2,6,3,8,6,1,1,40,30,3.9,3.9,40,12",
    "p2,positive,10,6,2,1,3,3,3,3,5,4,3,0,1,1,2,1100,12,15,0,1,3,1,5,2,7,5,2,1,60,25,3.8,3.8,40,12",
    "p3,positive,9,5,2,0,2,3,3,1,4,5,2,1,1,1,1,900,11,14,1,1,3,1,4,3,6,5,1,2,35,45,3.7,3.9,40,12",
    "n1,negative,2,3,3,2,4,4,4,4,1,2,4,0,1,0,1,90,4,3,0,1,1,0,2,0,6,4,20,15,300,260,3.2,3.4,40,12",
    "n2,negative,1,2,4,3,4,4,4,4,0,3,4,0,1,0,1,60,3,2,0,1,0,0,1,0,5,3,25,30,,,3.1,3.3,40,12",
    "n3,negative,3,2,2,2,3,4,4,4,1,1,3,0,1,1,3,120,5,4,0,1,1,0,2,1,7,5,12,18,200,,3.3,3.5,40,12",
];

fn aqi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aqi")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = aqi(args);
    assert!(
        out.status.success(),
        "aqi {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_csv(dir: &Path) -> String {
    let path = dir.join("cohort.csv");
    fs::write(&path, format!("{HEADER}\n{}\n", ROWS.join("\n"))).unwrap();
    path.display().to_string()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn import_train_score_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_csv(dir.path());
    let cohort = s(&dir.path().join("cohort.json"));
    ok(&["import-cohort", "--input", &csv, "--out", &cohort, "--level", "prof", "--field", "physics"]);
    let doc: Value = serde_json::from_str(&fs::read_to_string(&cohort).unwrap()).unwrap();
    assert_eq!(doc["level"], "prof");
    assert_eq!(doc["members"].as_array().unwrap().len(), 6);

    let model = s(&dir.path().join("m1.json"));
    let run = s(&dir.path().join("run.json"));
    ok(&["train-opt", "--cohort", &cohort, "--model", "m1", "--out", &model, "--run-log", &run]);
    let run: Value = serde_json::from_str(&fs::read_to_string(&run).unwrap()).unwrap();
    assert!(run["residuals"]["simplex"].as_f64().unwrap() <= 1e-8);

    let report = ok(&["score", "--model", &model, "--candidates", &csv, "--level", "assist_prof"]);
    let report: Value = serde_json::from_str(&report).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    let ids: Vec<&str> = rows.iter().map(|r| r["candidate_id"].as_str().unwrap()).collect();
    // Every positive outranks every negative on this well-separated cohort.
    assert!(ids[..3].iter().all(|id| id.starts_with('p')), "{ids:?}");
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| r["passed_filter"] == false)
        .map(|r| r["candidate_id"].as_str().unwrap())
        .collect();
    assert!(failed.contains(&"n2"));

    let csv_report = ok(&["score", "--model", &model, "--candidates", &csv, "--format", "csv"]);
    assert!(csv_report.starts_with("rank,candidate_id,aqi,passed_filter,reasons\n1,"));
    assert_eq!(csv_report.lines().count(), 7);
}

#[test]
fn ranking_file_and_bounds_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = s(&dir.path().join("c.json"));
    ok(&["generate-data", "--out", &cohort, "--n-pos", "5", "--n-neg", "5", "--seed", "3"]);
    let ranking = dir.path().join("ranking.txt");
    let ranks: Vec<String> = (1..=21).rev().map(|r| r.to_string()).collect();
    fs::write(&ranking, ranks.join(" ")).unwrap();
    let model = s(&dir.path().join("m.json"));
    ok(&[
        "train-opt", "--cohort", &cohort, "--model", "m1", "--ranking-file", &s(&ranking), "--bounds", "0,0.2",
        "--gamma", "0.05", "--out", &model,
    ]);
    let m: Value = serde_json::from_str(&fs::read_to_string(&model).unwrap()).unwrap();
    let w: Vec<f64> = m["weights"]["weights"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!(w.iter().all(|&v| v <= 0.2 + 1e-8));
    // Reversed ranking: the last feature ranks first.
    assert!(w.windows(2).all(|p| p[0] <= p[1] + 1e-8), "{w:?}");
}

#[test]
fn siamese_training_writes_model() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = s(&dir.path().join("c.json"));
    ok(&["generate-data", "--out", &cohort, "--n-pos", "4", "--n-neg", "4"]);
    let model = s(&dir.path().join("s.json"));
    let run = s(&dir.path().join("run.json"));
    ok(&[
        "train-siamese", "--cohort", &cohort, "--loss", "contrastive", "--epochs", "7", "--margin", "0.4", "--out", &model,
        "--run-log", &run,
    ]);
    let m: Value = serde_json::from_str(&fs::read_to_string(&model).unwrap()).unwrap();
    assert_eq!(m["family"], "siamese");
    assert_eq!(m["train_config"]["margin"], 0.4);
    let run: Value = serde_json::from_str(&fs::read_to_string(&run).unwrap()).unwrap();
    assert_eq!(run["trace"].as_array().unwrap().len(), 7);
}

#[test]
fn filter_and_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_csv(dir.path());
    let out = ok(&["filter", "--candidates", &csv, "--level", "assoc_prof"]);
    let outcomes: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(outcomes.as_array().unwrap().len(), 6);
    assert_eq!(outcomes[0]["passed"], true);
    assert_eq!(outcomes[1]["passed"], false);
    assert_eq!(outcomes[1]["reasons"][0], "needs ≥ 6 Q1 first-author papers (has 5)");
    assert_eq!(outcomes[4]["reasons"].as_array().unwrap().len(), 4);

    let a = dir.path().join("a.json");
    let b = dir.path().join("b.txt");
    fs::write(&a, "[1, 2, 3]").unwrap();
    fs::write(&b, "2,1,3\n").unwrap();
    let agg: Vec<u32> = serde_json::from_str(&ok(&["aggregate-ranks", &s(&a), &s(&b)])).unwrap();
    assert_eq!(agg, vec![1, 2, 3]);

    fs::write(&b, "1 1 3").unwrap();
    let out = aqi(&["aggregate-ranks", &s(&a), &s(&b)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not a permutation"));
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = aqi(&["train-opt", "--cohort", &s(&dir.path().join("missing.json")), "--model", "m1", "--out", "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = aqi(&["filter", "--candidates", "whatever.csv"]);
    assert!(!out.status.success());

    let out = aqi(&["train-opt", "--model", "m3"]);
    assert!(!out.status.success());
}
