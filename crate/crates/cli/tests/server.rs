mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use vade_cli::config::ServeConfig;
use vade_cli::server::{router, AppState};
use vade_core::codec::Codec;
use vade_core::diffusion::Model;
use vade_core::image::{decode_png, encode_png, BitDepth};
use vade_core::phantom::{generate_samples, PhantomClass, Split};
use vade_core::text::Vocab;

fn state(dir: &std::path::Path) -> Arc<AppState> {
    let cfg = common::tiny_config();
    let model = Model::new(
        cfg.model.clone(),
        Vocab::default(),
        Codec::identity(common::SIZE),
    )
    .unwrap();
    let mix: BTreeMap<_, _> = PhantomClass::ALL.iter().map(|&c| (c, 1)).collect();
    let scans = generate_samples(&cfg.data.spec, &mix, 7, Split::Test)
        .unwrap()
        .iter()
        .map(|s| s.labeled())
        .collect();
    AppState::new(
        model,
        "ck-test".into(),
        scans,
        &dir.join("runs.jsonl"),
        &ServeConfig::default(),
        cfg.generation,
        cfg.induce,
    )
    .unwrap()
}

async fn call(s: &Arc<AppState>, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = router(s.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    (
        status,
        resp.into_body()
            .collect()
            .await
            .unwrap()
            .to_bytes()
            .to_vec(),
    )
}

async fn get(s: &Arc<AppState>, uri: &str) -> (StatusCode, Value) {
    let (st, body) = call(s, Request::get(uri).body(Body::empty()).unwrap()).await;
    (st, serde_json::from_slice(&body).unwrap_or(Value::Null))
}

async fn post(s: &Arc<AppState>, uri: &str, body: &str) -> (StatusCode, Value) {
    let req = Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let (st, body) = call(s, req).await;
    (st, serde_json::from_slice(&body).unwrap_or(Value::Null))
}

fn first_diseased(s: &AppState) -> String {
    s.scans
        .iter()
        .find(|l| l.class == PhantomClass::Opacity)
        .unwrap()
        .id
        .clone()
}

#[tokio::test]
async fn health_and_scans() {
    let dir = tempfile::tempdir().unwrap();
    let s = state(dir.path());
    let (st, v) = get(&s, "/api/health").await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v, json!({"status": "ok", "checkpoint_id": "ck-test"}));

    let (st, v) = get(&s, "/api/scans").await;
    assert_eq!(st, StatusCode::OK);
    let scans = v["scans"].as_array().unwrap();
    assert_eq!(scans.len(), 5);
    let thumb = decode_png(
        &B64.decode(scans[0]["thumbnail_png_b64"].as_str().unwrap())
            .unwrap(),
    )
    .unwrap();
    assert_eq!(
        (thumb.width(), thumb.height()),
        (common::SIZE / 2, common::SIZE / 2)
    );

    let id = scans[1]["id"].as_str().unwrap();
    let (st, png) = call(
        &s,
        Request::get(format!("/api/scans/{id}"))
            .body(Body::empty())
            .unwrap(),
    )
    .await;
    assert_eq!(st, StatusCode::OK);
    let scan = s.scans.iter().find(|l| l.id == id).unwrap();
    assert_eq!(png, encode_png(&scan.image, BitDepth::Sixteen).unwrap());

    let (st, _) = get(&s, "/api/scans/nope").await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn counterfactual_then_replay() {
    let dir = tempfile::tempdir().unwrap();
    let s = state(dir.path());
    let id = first_diseased(&s);
    let body = json!({"scan_id": id, "strength": 0.5, "guidance": 2.0, "steps": 8, "seed": 11})
        .to_string();
    let (st, v) = post(&s, "/api/counterfactual", &body).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    assert_eq!(v["run_id"], 1);
    assert_eq!(v["seed"], 11);
    assert!(v["ssim"].as_f64().unwrap() <= 1.0);
    assert!(v["localization"].as_f64().is_some());
    for key in ["counterfactual_png_b64", "vamap_png_b64", "overlay_png_b64"] {
        let png = B64.decode(v[key].as_str().unwrap()).unwrap();
        assert_eq!(&png[1..4], b"PNG");
    }

    let (_, again) = post(&s, "/api/counterfactual", &body).await;
    assert_eq!(again["run_id"], 2);
    assert_eq!(again["vamap_png_b64"], v["vamap_png_b64"]);

    let (st, runs) = get(&s, "/api/runs").await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(runs["runs"].as_array().unwrap().len(), 2);

    let (st, r) = get(&s, "/api/runs/1").await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(r["record"]["kind"], "counterfactual");
    assert_eq!(r["record"]["config"]["seed"], 11);
    assert!(r.get("replay").is_none());

    let (st, r) = get(&s, "/api/runs/1?replay=true").await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(r["replay_matches"], true);
    assert_eq!(
        r["replay"]["counterfactual_png_b64"],
        v["counterfactual_png_b64"]
    );

    let (st, _) = get(&s, "/api/runs/99").await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn inline_image_induce_and_server_seed() {
    let dir = tempfile::tempdir().unwrap();
    let s = state(dir.path());
    let healthy = s
        .scans
        .iter()
        .find(|l| l.class == PhantomClass::Healthy)
        .unwrap();
    let b64 = B64.encode(encode_png(&healthy.image, BitDepth::Sixteen).unwrap());
    let (st, v) = post(
        &s,
        "/api/induce",
        &json!({"image_b64": b64, "prompt": "cardiomegaly chest scan", "steps": 6}).to_string(),
    )
    .await;
    assert_eq!(st, StatusCode::OK, "{v}");
    assert!(v["seed"].as_u64().is_some());
    assert!(v["localization"].is_null());

    let (_, r) = get(&s, "/api/runs/1").await;
    assert_eq!(r["record"]["kind"], "induce");
    assert_eq!(r["record"]["config"]["prompt"], "cardiomegaly chest scan");
    assert_eq!(r["record"]["config"]["seed"], v["seed"]);
    assert!(r["record"]["input"]["source"]
        .as_str()
        .unwrap()
        .starts_with("inline:"));

    let (st, r) = get(&s, "/api/runs/1?replay=true").await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(r["replay_matches"], true);
}

#[tokio::test]
async fn bad_requests_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let s = state(dir.path());
    let id = first_diseased(&s);
    let cases = [
        (json!({"scan_id": id, "strength": 1.5}), Some("strength")),
        (json!({"scan_id": id, "guidance": -1.0}), Some("guidance")),
        (json!({"scan_id": id, "steps": 0}), Some("steps")),
        (json!({}), Some("scan_id")),
        (json!({"scan_id": id, "image_b64": "AAAA"}), Some("scan_id")),
        (json!({"image_b64": "not base64!"}), Some("image_b64")),
        (
            json!({"image_b64": B64.encode(b"plain text")}),
            Some("image_b64"),
        ),
        (json!({"scan_id": id, "temperature": 2}), None),
        (json!({"scan_id": 5}), None),
    ];
    for (body, field) in cases {
        let (st, v) = post(&s, "/api/counterfactual", &body.to_string()).await;
        assert_eq!(st, StatusCode::BAD_REQUEST, "{body} -> {v}");
        assert!(v["error"].is_string());
        if let Some(f) = field {
            assert_eq!(v["field"], f, "{body}");
        }
    }
    let (st, _) = post(&s, "/api/counterfactual", "{not json").await;
    assert_eq!(st, StatusCode::BAD_REQUEST);

    let (st, _) = post(
        &s,
        "/api/counterfactual",
        &json!({"scan_id": "missing"}).to_string(),
    )
    .await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert!(get(&s, "/api/runs").await.1["runs"]
        .as_array()
        .unwrap()
        .is_empty());
}
