use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use aqi_service::{router, AppState, Store};

struct Harness {
    _dir: tempfile::TempDir,
    state: AppState,
}

impl Harness {
    fn new() -> Harness {
        Harness::with_sync_limit(aqi_service::api::DEFAULT_SYNC_LIMIT)
    }

    fn with_sync_limit(limit: usize) -> Harness {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        Harness {
            _dir: dir,
            state: AppState::with_sync_limit(store, limit),
        }
    }

    async fn call(&self, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .header("content-type", "application/json")
            .body(match body {
                Some(b) => Body::from(b.to_string()),
                None => Body::empty(),
            })
            .unwrap();
        let resp = router(self.state.clone()).oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let value = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into()))
        };
        (status, value)
    }

    async fn synthetic_cohort(&self, n: usize) -> String {
        let (status, body) = self
            .call(
                "POST",
                "/cohorts",
                Some(json!({"source": "synthetic", "spec": {"n_pos": n, "n_neg": n, "seed": 7}})),
            )
            .await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
        body["cohort_id"].as_str().unwrap().to_string()
    }
}

fn record(id: &str, scale: f64) -> Value {
    json!({
        "candidate_id": id,
        "n_q1": (6.0 * scale) as u32, "n_q2": (4.0 * scale) as u32, "n_q3": 2, "n_q4": 1,
        "n_q1_ave_auth": 2.0, "n_q2_ave_auth": 3.0, "n_q3_ave_auth": 3.0, "n_q4_ave_auth": 4.0,
        "n_q1_fa": (3.0 * scale) as u32,
        "n_conf": 5, "n_conf_ave_auth": 2.5,
        "n_book": 0, "n_book_ave_auth": 1.0,
        "n_book_chp": 1, "n_book_chp_ave_auth": 2.0,
        "n_cit": (300.0 * scale) as u32, "h_ind": 8, "i10_ind": 7,
        "n_pat": 0, "n_pat_ave_auth": 1.0,
        "n_prj": 2, "n_award_recog_work": 1,
        "n_ms_stud": 4, "n_phd_stud": 1,
        "t_res": 6.0, "t_res_prime": 4.0,
        "r_nat_bs": 3, "r_nat_phd": 2, "r_inat_bs": 80, "r_inat_phd": 60,
        "gpa_u": 3.6, "gpa_g": 3.8,
        "n_course_u": 40, "n_course_g": 12
    })
}

fn zero_record(id: &str) -> Value {
    let mut r = record(id, 0.0);
    for key in [
        "n_q1", "n_q2", "n_q3", "n_q4", "n_q1_fa", "n_conf", "n_book", "n_book_chp", "n_cit", "h_ind", "i10_ind", "n_pat",
        "n_prj", "n_award_recog_work", "n_ms_stud", "n_phd_stud",
    ] {
        r[key] = json!(0);
    }
    for key in ["r_nat_bs", "r_nat_phd", "r_inat_bs", "r_inat_phd"] {
        r.as_object_mut().unwrap().remove(key);
    }
    r["gpa_u"] = json!(0.0);
    r["gpa_g"] = json!(0.0);
    r
}

#[tokio::test]
async fn cohort_create_and_fetch() {
    let h = Harness::new();
    let id = h.synthetic_cohort(4).await;
    let (status, doc) = h.call("GET", &format!("/cohorts/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(doc["members"].as_array().unwrap().len(), 8);

    // Re-posting the returned document yields the same id.
    let (status, again) = h
        .call("POST", "/cohorts", Some(json!({"source": "document", "document": doc})))
        .await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(again["cohort_id"], json!(id));

    let (status, err) = h.call("GET", "/cohorts/c-0000000000000000", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["code"], "unknown_cohort");
}

#[tokio::test]
async fn csv_cohort_reports_bad_rows() {
    let h = Harness::new();
    let header = "candidate_id,class,n_q1,n_q2,n_q3,n_q4,n_q1_ave_auth,n_q2_ave_auth,n_q3_ave_auth,n_q4_ave_auth,n_q1_fa,n_conf,n_conf_ave_auth,n_book,n_book_ave_auth,n_book_chp,n_book_chp_ave_auth,n_cit,h_ind,i10_ind,n_pat,n_pat_ave_auth,n_prj,n_award_recog_work,n_ms_stud,n_phd_stud,t_res,t_res_prime,r_nat_bs,r_nat_phd,r_inat_bs,r_inat_phd,gpa_u,gpa_g,n_course_u,n_course_g";
    let good = "a,positive,4,2,1,0,2,3,3,1,2,3,2,0,1,0,1,200,6,5,0,1,1,0,2,1,5,4,2,2,50,40,3.6,3.8,40,10";
    let bad = "b,negative,4,2,1,0,2,3,3,1,2,3,2,0,1,0,1,200,6,5,0,1,1,0,2,1,0,0,2,2,50,40,3.6,3.8,40,10";
    let csv = format!("{header}\n{good}\n{bad}\n");
    let (status, err) = h
        .call("POST", "/cohorts", Some(json!({"source": "csv", "csv": csv})))
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{err}");
    assert_eq!(err["code"], "invalid_record");
    assert_eq!(err["field"], "csv.row[3]");
}

#[tokio::test]
async fn train_m2_score_and_reproduce() {
    let h = Harness::new();
    let cohort_id = h.synthetic_cohort(6).await;
    let req = json!({"cohort_id": cohort_id, "kind": "m2", "seed": 3});
    let (status, first) = h.call("POST", "/train", Some(req.clone())).await;
    assert_eq!(status, StatusCode::CREATED, "{first}");
    assert_eq!(first["status"], "completed");
    let model_id = first["model_id"].as_str().unwrap().to_string();

    let (status, entry) = h.call("GET", &format!("/models/{model_id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(entry["model"]["weights"]["weights"].as_array().unwrap().len(), 252);
    assert_eq!(entry["kind"], "m2");
    assert!(entry["caps"].is_object());

    let (_, second) = h.call("POST", "/train", Some(req)).await;
    assert_eq!(second["checksum"], first["checksum"]);
    assert_eq!(second["model_id"], first["model_id"]);

    let (status, run) = h.call("GET", &format!("/runs/{}", first["run_id"].as_str().unwrap()), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(run["status"], "completed");
    let trace = run["trace"].as_array().unwrap();
    assert!(!trace.is_empty());
    for (k, t) in trace.iter().enumerate() {
        assert_eq!(t["index"], json!(k));
    }
    assert!(run["residuals"].is_object());

    let (status, report) = h
        .call(
            "POST",
            &format!("/models/{model_id}/score"),
            Some(json!({"candidates": [record("strong", 2.0), zero_record("zero"), record("mid", 1.0)]})),
        )
        .await;
    assert_eq!(status, StatusCode::OK, "{report}");
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2]["candidate_id"], "zero");
    assert_eq!(rows[2]["aqi"].as_f64().unwrap(), 0.0);
    assert_eq!(rows[2]["passed_filter"], false);
    let aqis: Vec<f64> = rows.iter().map(|r| r["aqi"].as_f64().unwrap()).collect();
    assert!(aqis.windows(2).all(|w| w[0] >= w[1]));
}

#[tokio::test]
async fn single_zero_candidate_scores_zero() {
    let h = Harness::new();
    let cohort_id = h.synthetic_cohort(4).await;
    let (_, trained) = h
        .call("POST", "/train", Some(json!({"cohort_id": cohort_id, "kind": "m1"})))
        .await;
    let model_id = trained["model_id"].as_str().unwrap();
    let (status, report) = h
        .call(
            "POST",
            &format!("/models/{model_id}/score"),
            Some(json!({"candidates": [zero_record("z")], "skip_filter": true})),
        )
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(report["rows"][0]["aqi"].as_f64().unwrap(), 0.0);
    assert_eq!(report["rows"][0]["passed_filter"], true);
}

#[tokio::test]
async fn siamese_kinds_train() {
    let h = Harness::new();
    let cohort_id = h.synthetic_cohort(4).await;
    for kind in ["siamese_contrastive", "siamese_triplet"] {
        let (status, body) = h
            .call(
                "POST",
                "/train",
                Some(json!({"cohort_id": cohort_id, "kind": kind, "seed": 1, "siamese": {"epochs": 5}})),
            )
            .await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
        let (_, entry) = h.call("GET", &format!("/models/{}", body["model_id"].as_str().unwrap()), None).await;
        assert_eq!(entry["kind"], kind);
        assert_eq!(entry["model"]["family"], "siamese");
        let (_, run) = h.call("GET", &format!("/runs/{}", body["run_id"].as_str().unwrap()), None).await;
        assert_eq!(run["trace"].as_array().unwrap().len(), 5);
    }
}

#[tokio::test]
async fn training_errors() {
    let h = Harness::new();
    let (status, err) = h
        .call("POST", "/train", Some(json!({"cohort_id": "c-0123456789abcdef", "kind": "m1"})))
        .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["code"], "unknown_cohort");
    assert!(err["message"].as_str().unwrap().contains("c-0123456789abcdef"));

    let cohort_id = h.synthetic_cohort(3).await;
    let (status, err) = h
        .call("POST", "/train", Some(json!({"cohort_id": cohort_id, "kind": "m9"})))
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["code"], "invalid_request");
    assert_eq!(err["field"], "kind");

    let (_, err) = h
        .call(
            "POST",
            "/train",
            Some(json!({"cohort_id": cohort_id, "kind": "m1", "siamese": {"margin": "wide"}})),
        )
        .await;
    assert_eq!(err["field"], "siamese.margin");

    // Lower bounds summing above one cannot meet the simplex.
    let (status, err) = h
        .call(
            "POST",
            "/train",
            Some(json!({"cohort_id": cohort_id, "kind": "m1", "bounds": [0.1, 1.0]})),
        )
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["code"], "infeasible_constraints");

    let (status, err) = h
        .call(
            "POST",
            "/train",
            Some(json!({"cohort_id": cohort_id, "kind": "m1", "ranking": [1, 1, 2]})),
        )
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["field"], "ranking");
}

#[tokio::test]
async fn large_cohorts_train_in_background() {
    let h = Harness::with_sync_limit(0);
    let cohort_id = h.synthetic_cohort(4).await;
    let (status, body) = h
        .call("POST", "/train", Some(json!({"cohort_id": cohort_id, "kind": "m1", "seed": 9})))
        .await;
    assert_eq!(status, StatusCode::ACCEPTED, "{body}");
    assert_eq!(body["status"], "running");
    let run_uri = format!("/runs/{}", body["run_id"].as_str().unwrap());
    let mut status = String::new();
    for _ in 0..200 {
        let (_, run) = h.call("GET", &run_uri, None).await;
        status = run["status"].as_str().unwrap().to_string();
        if status != "running" {
            break;
        }
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
    assert_eq!(status, "completed");
    let (code, _) = h.call("GET", &format!("/models/{}", body["model_id"].as_str().unwrap()), None).await;
    assert_eq!(code, StatusCode::OK);
}

#[tokio::test]
async fn unknown_model_and_run() {
    let h = Harness::new();
    let (status, err) = h
        .call("POST", "/models/m-0000000000000000/score", Some(json!({"candidates": []})))
        .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["code"], "unknown_model");
    let (status, err) = h.call("GET", "/runs/r-1", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["code"], "unknown_run");
}

#[tokio::test]
async fn invalid_candidate_rows_are_reported() {
    let h = Harness::new();
    let cohort_id = h.synthetic_cohort(3).await;
    let (_, trained) = h
        .call("POST", "/train", Some(json!({"cohort_id": cohort_id, "kind": "m1"})))
        .await;
    let mut bad = record("bad", 1.0);
    bad["gpa_g"] = json!(4.5);
    let (status, err) = h
        .call(
            "POST",
            &format!("/models/{}/score", trained["model_id"].as_str().unwrap()),
            Some(json!({"candidates": [record("ok", 1.0), bad]})),
        )
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["code"], "invalid_record");
    assert_eq!(err["field"], "candidates[1]");
    assert!(err["details"][0]["message"].as_str().unwrap().contains("gpa_g"));
}

#[tokio::test]
async fn filter_endpoint() {
    let h = Harness::new();
    let mut weak = record("weak", 1.0);
    weak["n_q1_fa"] = json!(1);
    let (status, body) = h
        .call(
            "POST",
            "/filter",
            Some(json!({"records": [record("ok", 1.0), weak], "level": "assist_prof"})),
        )
        .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["outcomes"][0]["passed"], true);
    assert_eq!(body["outcomes"][1]["passed"], false);
    assert!(body["outcomes"][1]["reasons"][0]
        .as_str()
        .unwrap()
        .contains("needs ≥ 2 Q1 first-author papers"));

    let (status, err) = h.call("POST", "/filter", Some(json!({"records": []}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["field"], "level");
}

#[tokio::test]
async fn aggregate_endpoint() {
    let h = Harness::new();
    let (status, body) = h
        .call("POST", "/rankings/aggregate", Some(json!({"rankings": [[1, 2, 3], [2, 1, 3]]})))
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["ranking"], json!([1, 2, 3]));

    let (_, err) = h.call("POST", "/rankings/aggregate", Some(json!({"rankings": []}))).await;
    assert_eq!(err["code"], "empty_input");
    let (_, err) = h
        .call("POST", "/rankings/aggregate", Some(json!({"rankings": [[1, 2], [2, 2]]})))
        .await;
    assert_eq!(err["code"], "invalid_permutation");
    assert_eq!(err["field"], "rankings[1]");
}

#[tokio::test]
async fn malformed_json_is_a_validation_error() {
    let h = Harness::new();
    let req = Request::builder()
        .method("POST")
        .uri("/train")
        .body(Body::from("{not json"))
        .unwrap();
    let resp = router(h.state.clone()).oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::UNPROCESSABLE_ENTITY);
}
