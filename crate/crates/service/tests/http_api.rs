use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use idsqs_core::domain::{Codec, Composition, GenerateOptions, StudyConfig};
use idsqs_service::http::router;
use idsqs_service::{ManualClock, StudyService};
use serde_json::{json, Value};
use tower::ServiceExt;

fn service(dir: &std::path::Path, clock: &ManualClock) -> Arc<StudyService> {
    let assets = dir.join("assets");
    let mut config = StudyConfig::generate(&GenerateOptions {
        study_id: "web".into(),
        sources: vec!["a".into()],
        codecs: vec![Codec::Jpeg],
        batches: 2,
        composition: Composition {
            study_per_batch: 4,
            trap_i_per_batch: 1,
            trap_ii_per_batch: 1,
        },
        ..GenerateOptions::default()
    });
    std::fs::create_dir_all(assets.join("acuity")).unwrap();
    for s in config.stimuli() {
        std::fs::write(assets.join(s.file_name()), s.file_name()).unwrap();
    }
    for p in &config.acuity {
        std::fs::write(assets.join(&p.image), b"plate").unwrap();
    }
    config.asset_dir = Some(assets);
    Arc::new(StudyService::open(config, dir.join("events.jsonl"), Arc::new(clock.clone())).unwrap())
}

async fn call(
    app: &axum::Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Vec<u8>) {
    let request = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(match body {
            Some(v) => Body::from(v.to_string()),
            None => Body::empty(),
        })
        .unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = response
        .into_body()
        .collect()
        .await
        .unwrap()
        .to_bytes()
        .to_vec();
    (status, bytes)
}

async fn call_json(
    app: &axum::Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let (status, bytes) = call(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap())
}

#[tokio::test]
async fn session_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let clock = ManualClock::new(1_800_000_000_000);
    let svc = service(dir.path(), &clock);
    let n_questions = svc.config().questions.len();
    let app = router(svc);

    let client = json!({"display_diagonal": 27.0, "resolution": {"width": 1920, "height": 1080}});
    let (status, body) = call_json(
        &app,
        "POST",
        "/sessions",
        Some(json!({"subject_id": "u1", "client_metadata": client})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(body["phase"], "CONSENT");
    let id = body["session_id"].as_str().unwrap().to_string();

    let (status, body) = call_json(
        &app,
        "POST",
        "/sessions",
        Some(json!({"subject_id": "u1", "client_metadata": client})),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"]["code"], "DUPLICATE_SUBJECT");

    let (status, body) = call_json(
        &app,
        "POST",
        "/sessions",
        Some(json!({"subject_id": "u2", "client_metadata": {"resolution": {"width": 1280, "height": 720}}})),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"]["code"], "INSUFFICIENT_DISPLAY");

    let (_, body) = call_json(&app, "GET", &format!("/sessions/{id}/next"), None).await;
    assert_eq!(body["directive"], "consent");
    let (status, body) = call_json(
        &app,
        "POST",
        &format!("/sessions/{id}/gates/consent"),
        Some(json!({"agree": true})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["phase"], "ACUITY");

    let (_, body) = call_json(&app, "GET", &format!("/sessions/{id}/next"), None).await;
    let plate = body["plates"][0].as_str().unwrap().to_string();
    let (status, bytes) = call(&app, "GET", &plate, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(bytes, b"plate");

    call_json(
        &app,
        "POST",
        &format!("/sessions/{id}/gates/acuity"),
        Some(json!({"answers": ["6", "29"]})),
    )
    .await;
    let (_, body) = call_json(
        &app,
        "POST",
        &format!("/sessions/{id}/gates/training"),
        Some(json!({"responses": [
            {"item_id": "train-severe", "score": 80},
            {"item_id": "train-identical", "score": 0},
            {"item_id": "train-subtle", "score": 20}
        ]})),
    )
    .await;
    assert_eq!(body["phase"], "BATCH_1");

    let (_, q) = call_json(&app, "GET", &format!("/sessions/{id}/next"), None).await;
    assert_eq!(q["directive"], "question");
    let (status, image) = call(&app, "GET", q["test_url"].as_str().unwrap(), None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(image.ends_with(b".png"));

    let (status, body) = call_json(
        &app,
        "POST",
        &format!("/sessions/{id}/responses"),
        Some(json!({"question_id": "bogus", "score": 20})),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"]["code"], "OUT_OF_ORDER");
    assert_eq!(body["error"]["expected_question"], q["question_id"]);

    let (status, body) = call_json(
        &app,
        "POST",
        &format!("/sessions/{id}/responses"),
        Some(json!({"question_id": q["question_id"], "score": -1})),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"]["code"], "SCORE_OUT_OF_RANGE");

    let mut question = q;
    loop {
        let (status, ack) = call_json(
            &app,
            "POST",
            &format!("/sessions/{id}/responses"),
            Some(json!({"question_id": question["question_id"], "score": 42.5, "toggle_count": 3, "elapsed_ms": 2100})),
        )
        .await;
        assert_eq!(status, StatusCode::OK);
        if ack["phase"] != "BATCH_1" {
            assert_eq!(ack["phase"], "BREAK");
            break;
        }
        question = call_json(&app, "GET", &format!("/sessions/{id}/next"), None)
            .await
            .1;
    }
    let (_, body) = call_json(&app, "GET", &format!("/sessions/{id}/next"), None).await;
    assert_eq!(
        body,
        json!({"directive": "break", "wait_remaining_ms": 180000})
    );

    let (status, export) = call(&app, "GET", "/studies/web/export", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        export.iter().filter(|&&b| b == b'\n').count(),
        n_questions + 6
    );
    let (_, again) = call(&app, "GET", "/studies/web/export", None).await;
    assert_eq!(export, again);

    let (status, body) = call_json(&app, "GET", "/studies/nope/export", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["code"], "STUDY_NOT_FOUND");
    let (status, body) = call_json(&app, "GET", "/sessions/nope/next", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["code"], "SESSION_NOT_FOUND");
    let (status, body) = call_json(&app, "GET", "/assets/deadbeef", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["code"], "ASSET_NOT_FOUND");
    let (status, body) =
        call_json(&app, "POST", &format!("/sessions/{id}/gates/bogus"), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["code"], "BAD_REQUEST");
}
