use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use wspace_cli::service::wire::{gray_to_png, image_to_png};
use wspace_cli::service::{router, AppState};
use wspace_core::config::Config;
use wspace_core::encoders::{EncoderConfig, ImageEncoder, Modality};
use wspace_core::features::{AttributeClassifier, ClassifierConfig};
use wspace_core::generator::{GeneratorConfig, GeneratorModel};
use wspace_core::guided::OracleSimilarity;
use wspace_core::latent::{LayerAttributeTable, SlotFlip};
use wspace_core::pipeline::Models;
use wspace_core::text_align::{TextEncoder, TextEncoderConfig, Vocabulary};
use wspace_core::toyfaces::{Lexicon, Slot};
use wspace_tensor::Tensor;

const R: usize = 32;

/// Untrained models with a table giving layer `i` to slot `i`.
fn models() -> Models {
    let g = GeneratorModel::init(&GeneratorConfig::default(), 1).unwrap();
    let f = Arc::new(AttributeClassifier::init(&ClassifierConfig::default(), 2).unwrap());
    let enc = |m, seed| Arc::new(ImageEncoder::init(&EncoderConfig::for_generator(&g, m), seed).unwrap());
    let lex = Lexicon::default();
    let vocab = Vocabulary::from_texts(&lex, std::iter::empty());
    let tcfg = TextEncoderConfig { layers: g.layers(), channels: g.channels(), ..Default::default() };
    let table = LayerAttributeTable(
        (0..g.layers())
            .map(|l| (l, Slot::ALL.iter().map(|&slot| SlotFlip { slot, flip_rate: if slot.index() == l { 1.0 } else { 0.0 } }).collect()))
            .collect::<BTreeMap<_, _>>(),
    );
    Models {
        inversion: Some(enc(Modality::Photo, 3)),
        masked: Some(enc(Modality::Masked, 4)),
        sketch: Some(enc(Modality::Sketch, 5)),
        label: Some(enc(Modality::Label, 6)),
        text: Some(Arc::new(TextEncoder::init(&tcfg, vocab, lex, 7))),
        similarity: Some(Arc::new(OracleSimilarity::new(f.clone()))),
        features: Some(f),
        layers: Some(table),
        generator: Some(Arc::new(g)),
    }
}

fn config(dir: &std::path::Path) -> Config {
    Config { workdir: dir.to_path_buf(), ..Config::default() }
}

fn ready(dir: &std::path::Path) -> (Arc<AppState>, Router) {
    let st = AppState::new(config(dir));
    st.set_models(models(), Vec::new());
    let app = router(st.clone());
    (st, app)
}

fn photo() -> String {
    let img = Tensor::new(vec![R, R, 3], (0..R * R * 3).map(|i| ((i * 7) % 255) as f64 / 255.0).collect());
    image_to_png(&img).unwrap()
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::test]
async fn health_reports_loading_until_models_arrive() {
    let dir = tempfile::tempdir().unwrap();
    let st = AppState::new(config(dir.path()));
    let app = router(st.clone());
    let (s, v) = call(&app, "GET", "/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "loading");
    assert_eq!(call(&app, "GET", "/models", None).await.0, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(call(&app, "POST", "/generate", Some(json!({"text": "a person"}))).await.0, StatusCode::SERVICE_UNAVAILABLE);
    st.set_models(models(), Vec::new());
    assert_eq!(call(&app, "GET", "/health", None).await.1["status"], "ok");
}

#[tokio::test]
async fn models_and_layers_describe_the_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = ready(dir.path());
    let (s, v) = call(&app, "GET", "/models", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["resolution"], 32);
    assert_eq!(v["layers"], 8);
    assert_eq!(v["similarity"], "oracle");
    let strategies: Vec<&str> = v["strategies"].as_array().unwrap().iter().map(|x| x.as_str().unwrap()).collect();
    assert!(strategies.contains(&"encoder_mixing") && strategies.contains(&"guided_optimization"));

    let (s, v) = call(&app, "GET", "/layers", None).await;
    assert_eq!(s, StatusCode::OK);
    let rows = v["layers"].as_array().unwrap();
    assert_eq!(rows.len(), 8);
    for (l, row) in rows.iter().enumerate() {
        assert_eq!(row["owns"], json!([Slot::ALL[l].name()]));
    }
}

#[tokio::test]
async fn invert_returns_a_full_code_and_image() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = ready(dir.path());
    let (s, v) = call(&app, "POST", "/invert", Some(json!({"image": photo()}))).await;
    assert_eq!(s, StatusCode::OK);
    let code = v["code"].as_array().unwrap();
    assert_eq!(code.len(), 8);
    assert_eq!(code[0].as_array().unwrap().len(), 32);
    assert!(!v["image"].as_str().unwrap().is_empty());

    let small = image_to_png(&Tensor::zeros(vec![16, 16, 3])).unwrap();
    assert_eq!(call(&app, "POST", "/invert", Some(json!({"image": small}))).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, "POST", "/invert", Some(json!({"image": "***"}))).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn generate_honours_limits_and_conditioning() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = ready(dir.path());
    let (s, v) = call(&app, "POST", "/generate", Some(json!({"text": "a person wearing glasses", "n": 3, "seed": 4}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["strategy"], "encoder_mixing");
    assert_eq!(v["images"].as_array().unwrap().len(), 3);

    let again = call(&app, "POST", "/generate", Some(json!({"text": "a person wearing glasses", "n": 3, "seed": 4}))).await.1;
    assert_eq!(again, v);

    let (s, v) = call(&app, "POST", "/generate", Some(json!({"text": "is smiling", "n": 2, "strategy": "B", "iterations": 2}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["strategy"], "guided_optimization");

    let sketch = gray_to_png(&vec![0u8; R * R], R).unwrap();
    let (s, v) = call(&app, "POST", "/generate", Some(json!({"text": "a man", "n": 2, "sketch": sketch}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["strategy"], "sketch");
    let labels = gray_to_png(&vec![9u8; R * R], R).unwrap();
    assert_eq!(call(&app, "POST", "/generate", Some(json!({"text": "a man", "label": labels}))).await.0, StatusCode::BAD_REQUEST);

    for bad in [json!({"text": "x", "n": 0}), json!({"text": "x", "n": 33}), json!({"text": "x", "strategy": "Z"}), json!({"text": "x", "iterations": 201}), json!({"n": 2})] {
        assert_eq!(call(&app, "POST", "/generate", Some(bad)).await.0, StatusCode::BAD_REQUEST);
    }
}

#[tokio::test]
async fn mix_with_no_layers_returns_the_content_code() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = ready(dir.path());
    let content: Vec<Vec<f64>> = (0..8).map(|l| (0..32).map(|c| (l * 32 + c) as f64 * 1e-3).collect()).collect();
    let style: Vec<Vec<f64>> = (0..8).map(|_| vec![0.5; 32]).collect();
    let (s, v) = call(&app, "POST", "/mix", Some(json!({"content": {"code": content}, "style": {"code": style}, "layers": []}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(serde_json::from_value::<Vec<Vec<f64>>>(v["code"].clone()).unwrap(), content);

    let (_, v) = call(&app, "POST", "/mix", Some(json!({"content": {"code": content}, "style": {"code": style}, "layers": [2, 5]}))).await;
    let mixed: Vec<Vec<f64>> = serde_json::from_value(v["code"].clone()).unwrap();
    for l in 0..8 {
        assert_eq!(mixed[l], if l == 2 || l == 5 { style[l].clone() } else { content[l].clone() });
    }

    let (s, _) = call(&app, "POST", "/mix", Some(json!({"content": {"image": photo()}, "style": {"code": style}, "layers": [1]}))).await;
    assert_eq!(s, StatusCode::OK);
    let (s, _) = call(&app, "POST", "/mix", Some(json!({"content": {"code": content}, "style": {"code": style}, "layers": [8]}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "POST", "/mix", Some(json!({"content": {"code": [[1.0]]}, "style": {"code": style}, "layers": []}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn edits_accumulate_into_a_replayable_persisted_history() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = ready(dir.path());
    let (s, v) = call(&app, "POST", "/manipulate", Some(json!({"session": "s1", "image": photo(), "text": "wearing glasses", "iterations": 2}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["id"], "s1");
    assert_eq!(v["history"][0]["strategy"], "encoder_mixing");

    let mut roi = vec![0u8; R * R];
    for y in 4..12 {
        for x in 6..20 {
            roi[y * R + x] = 255;
        }
    }
    let mask = gray_to_png(&roi, R).unwrap();
    let (s, v) = call(&app, "POST", "/roi-edit", Some(json!({"session": "s1", "mask": mask, "text": "red hair", "iterations": 2}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let hist = v["history"].as_array().unwrap();
    assert_eq!(hist.len(), 2);
    assert_eq!(hist[1]["kind"], "roi");
    assert_eq!(hist[1]["result_hash"], v["current_hash"]);

    let (s, h) = call(&app, "GET", "/sessions/s1/history", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(h.as_array().unwrap().len(), 2);

    let (s, r) = call(&app, "POST", "/sessions/s1/replay", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(r["matches"], true);
    assert_eq!(r["replayed"].as_array().unwrap().len(), 2);

    let saved: Value = serde_json::from_slice(&std::fs::read(dir.path().join("sessions/s1/session.json")).unwrap()).unwrap();
    let stored: Vec<u8> = serde_json::from_value(saved["history"][1]["roi"]["data"].clone()).unwrap();
    assert_eq!(stored, roi.iter().map(|&v| u8::from(v > 0)).collect::<Vec<_>>());

    let (_, restarted) = ready(dir.path());
    let (s, v2) = call(&restarted, "GET", "/sessions/s1", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v2["current_hash"], v["current_hash"]);
    let (_, list) = call(&restarted, "GET", "/sessions", None).await;
    assert_eq!(list[0]["edits"], 2);

    let (s, _) = call(&app, "POST", "/manipulate", Some(json!({"session": "s1", "image": photo(), "text": "x"}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn request_errors_map_to_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = ready(dir.path());
    assert_eq!(call(&app, "GET", "/sessions/nope", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", "/sessions/nope/trace", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "POST", "/sessions/nope/cancel", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "POST", "/sessions/nope/replay", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "POST", "/manipulate", Some(json!({"session": "nope", "text": "x"}))).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "POST", "/manipulate", Some(json!({"text": "x"}))).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, "POST", "/manipulate", Some(json!({"image": photo(), "text": "x", "session": "../x"}))).await.0, StatusCode::BAD_REQUEST);
    let empty = gray_to_png(&vec![0u8; R * R], R).unwrap();
    assert_eq!(call(&app, "POST", "/roi-edit", Some(json!({"image": photo(), "mask": empty, "text": "x"}))).await.0, StatusCode::BAD_REQUEST);
    let (s, v) = call(&app, "POST", "/manipulate", Some(json!({"image": 5}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["error"].is_string());
}

#[tokio::test]
async fn cancelled_edit_leaves_the_session_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = ready(dir.path());
    let req = json!({"session": "c", "image": photo(), "text": "wearing glasses", "iterations": 200, "background": true});
    let (s, v) = call(&app, "POST", "/manipulate", Some(req)).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    assert_eq!(v["session"], "c");
    let source_hash = call(&app, "GET", "/sessions/c", None).await.1["current_hash"].clone();

    let (s, _) = call(&app, "POST", "/manipulate", Some(json!({"session": "c", "text": "a hat"}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, v) = call(&app, "POST", "/sessions/c/cancel", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["cancelled"], true);

    let mut trace = Value::Null;
    for _ in 0..600 {
        trace = call(&app, "GET", "/sessions/c/trace", None).await.1;
        if trace["status"] != "running" {
            break;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    assert_eq!(trace["status"], "cancelled");
    assert!(trace["trace"]["steps"].as_array().unwrap().len() < 201);

    let (_, v) = call(&app, "GET", "/sessions/c", None).await;
    assert_eq!(v["history"].as_array().unwrap().len(), 0);
    assert_eq!(v["current_hash"], source_hash);
    assert_eq!(v["status"], "cancelled");
    assert_eq!(call(&app, "POST", "/sessions/c/cancel", None).await.0, StatusCode::CONFLICT);

    let (s, v) = call(&app, "POST", "/manipulate", Some(json!({"session": "c", "text": "wearing glasses", "iterations": 1}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["history"].as_array().unwrap().len(), 1);
    let (_, t) = call(&app, "GET", "/sessions/c/trace", None).await;
    assert_eq!(t["status"], "idle");
    assert_eq!(t["trace"]["steps"].as_array().unwrap().len(), 2);
}
