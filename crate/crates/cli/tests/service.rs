//! `POST /inpaint` and `GET /health` driven through the router in-process.

mod common;

use std::io::Cursor;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use common::*;
use http_body_util::BodyExt;
use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use inpaint_core::networks::compute_receptive_field;
use inpaint_lab::service::{router, ErrorBody, Health, InpaintResponse, ServiceState};
use serde_json::json;
use tower::ServiceExt;

fn png_b64(img: impl Into<DynamicImage>) -> String {
    let mut buf = Vec::new();
    img.into().write_to(&mut Cursor::new(&mut buf), ImageFormat::Png).unwrap();
    STANDARD.encode(buf)
}

fn decode(b64: &str) -> RgbImage {
    image::load_from_memory(&STANDARD.decode(b64).unwrap()).unwrap().to_rgb8()
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn post(app: &Router, body: impl Into<Body>) -> (StatusCode, Vec<u8>) {
    let req = Request::post("/inpaint").header("content-type", "application/json").body(body.into()).unwrap();
    call(app, req).await
}

async fn post_json(app: &Router, body: serde_json::Value) -> (StatusCode, Vec<u8>) {
    post(app, body.to_string()).await
}

fn error(bytes: &[u8]) -> ErrorBody {
    serde_json::from_slice(bytes).unwrap_or_else(|e| panic!("error body is not JSON ({e}): {}", String::from_utf8_lossy(bytes)))
}

struct App {
    _f: Fixture,
    app: Router,
    model_id: String,
}

fn app() -> App {
    let f = trained();
    let state = ServiceState::load(&f.checkpoint).unwrap();
    let model_id = state.model_id.clone();
    App { app: router(Arc::new(state)), _f: f, model_id }
}

#[tokio::test]
async fn health_describes_the_default_model() {
    let dir = tempfile::tempdir().unwrap();
    let state = ServiceState::load(&default_model_checkpoint(dir.path())).unwrap();
    let expected_rf = compute_receptive_field(state.generator.spec()).size;
    let app = router(Arc::new(state));
    let (status, body) = call(&app, Request::get("/health").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let h: Health = serde_json::from_slice(&body).unwrap();
    assert_eq!(h.status, "ok");
    assert_eq!(h.levels, 3);
    assert_eq!(h.receptive_field, expected_rf);
    assert!(h.receptive_field >= 80, "{}", h.receptive_field);
    assert_eq!(h.model_id.len(), 16);
}

#[tokio::test]
async fn zero_mask_round_trips_bit_identically() {
    let a = app();
    let img = random_rgb(32, 32, 1);
    let (status, body) = post_json(&a.app, json!({"image": png_b64(img.clone()), "mask": png_b64(GrayImage::new(32, 32))})).await;
    assert_eq!(status, StatusCode::OK);
    let out: InpaintResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(decode(&out.image).into_raw(), img.into_raw());
}

#[tokio::test]
async fn unmasked_pixels_survive_and_requests_are_stateless() {
    let a = app();
    for seed in 0..4 {
        let img = random_rgb(32, 32, 10 + seed);
        let mask = random_mask(32, 32, seed);
        let body = json!({"image": png_b64(img.clone()), "mask": png_b64(mask.clone()), "options": {"checkpoint": a.model_id}});
        let (s1, b1) = post_json(&a.app, body.clone()).await;
        let (s2, b2) = post_json(&a.app, body).await;
        assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
        assert_eq!(b1, b2);
        let out = decode(&serde_json::from_slice::<InpaintResponse>(&b1).unwrap().image);
        for (x, y, p) in out.enumerate_pixels() {
            if mask.get_pixel(x, y).0[0] < 128 {
                assert_eq!(p, img.get_pixel(x, y));
            }
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_agree() {
    let a = app();
    let body = json!({"image": png_b64(random_rgb(32, 32, 7)), "mask": png_b64(random_mask(32, 32, 7))});
    let handles: Vec<_> = (0..6)
        .map(|_| {
            let (app, body) = (a.app.clone(), body.clone());
            tokio::spawn(async move { post_json(&app, body).await })
        })
        .collect();
    let mut results = Vec::new();
    for h in handles {
        results.push(h.await.unwrap());
    }
    assert!(results.iter().all(|r| r.0 == StatusCode::OK && r.1 == results[0].1));
}

#[tokio::test]
async fn mismatched_mask_is_a_400_naming_the_mask() {
    let a = app();
    let (status, body) = post_json(&a.app, json!({"image": png_b64(random_rgb(32, 32, 1)), "mask": png_b64(GrayImage::new(16, 32))})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let e = error(&body);
    assert_eq!(e.field.as_deref(), Some("mask"));
    assert!(e.error.contains("16x32"), "{}", e.error);
}

#[tokio::test]
async fn indivisible_resolution_suggests_padding() {
    let a = app();
    let (status, body) = post_json(&a.app, json!({"image": png_b64(random_rgb(30, 30, 1)), "mask": png_b64(random_mask(30, 30, 1))})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let e = error(&body);
    assert_eq!(e.field.as_deref(), Some("image"));
    assert!(e.error.contains("pad"), "{}", e.error);
}

#[tokio::test]
async fn malformed_requests_get_json_errors() {
    let a = app();
    let good = png_b64(random_rgb(32, 32, 1));
    let cases = [
        (post(&a.app, "{not json").await, "body"),
        (post_json(&a.app, json!({"image": good})).await, "body"),
        (post_json(&a.app, json!({"image": "%%%", "mask": good})).await, "image"),
        (post_json(&a.app, json!({"image": good, "mask": STANDARD.encode(b"plain text")})).await, "mask"),
        (post_json(&a.app, json!({"image": good, "mask": good, "options": {"checkpoint": "0000000000000000"}})).await, "options.checkpoint"),
    ];
    for ((status, body), field) in cases {
        assert_eq!(status, StatusCode::BAD_REQUEST, "{field}");
        assert_eq!(error(&body).field.as_deref(), Some(field));
    }
}

#[tokio::test]
async fn oversized_images_are_refused_with_413() {
    let a = app();
    let (status, body) = post_json(&a.app, json!({"image": png_b64(RgbImage::new(4100, 4)), "mask": png_b64(GrayImage::new(4100, 4))})).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    let e = error(&body);
    assert!(e.error.contains("4100x4"), "{}", e.error);
}
