use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use http_body_util::BodyExt;
use ipfn_core::checkpoint;
use ipfn_core::data::{Exemplar, IPFVOL_MAGIC};
use ipfn_core::training::{TrainConfig, TrainState};
use ipfn_service::{router, AppState, CheckpointEntry, JobStatus, ServiceConfig, SynthJob};
use tower::ServiceExt;

fn save_image_ckpt(dir: &Path, name: &str, conditioning: &str) {
    let values: Vec<f32> = (0..16 * 16 * 3).map(|i| (i % 13) as f32 / 13.0).collect();
    let ex = Exemplar::image([16, 16], 3, values).unwrap();
    let cfg = TrainConfig::from_json(&format!(
        r#"{{"patch_size": [8, 8], "generator": {{"hidden": 8, "layers": 3}}, "critic": {{"base_width": 4}},
            "conditioning": {conditioning}}}"#
    ))
    .unwrap();
    let state = TrainState::new(&ex, cfg).unwrap();
    checkpoint::save(&dir.join(format!("{name}.ipfn")), &state).unwrap();
}

fn save_volume_ckpt(dir: &Path, name: &str) {
    let values: Vec<f32> = (0..8 * 8 * 8).map(|i| ((i % 5) as f32 - 2.0) * 0.25).collect();
    let ex = Exemplar::sdf([8, 8, 8], values).unwrap();
    let cfg = TrainConfig::from_json(
        r#"{"patch_size": [8, 8, 8], "generator": {"hidden": 8, "layers": 3}, "critic": {"base_width": 4}}"#,
    )
    .unwrap();
    let state = TrainState::new(&ex, cfg).unwrap();
    checkpoint::save(&dir.join(format!("{name}.ipfn")), &state).unwrap();
}

fn state(dir: &Path, workers: usize) -> Arc<AppState> {
    AppState::new(ServiceConfig {
        ckpt_dir: dir.to_path_buf(),
        max_dims: 64,
        workers,
    })
}

async fn send(state: &Arc<AppState>, req: Request<Body>) -> (StatusCode, Option<String>, Vec<u8>) {
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let ct = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_string());
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, ct, body)
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post(body: &str) -> Request<Body> {
    Request::post("/v1/synthesize")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn error_text(body: &[u8]) -> String {
    let v: serde_json::Value = serde_json::from_slice(body).unwrap();
    v["error"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn empty_directory_lists_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let s = state(dir.path(), 1);
    let (status, _, body) = send(&s, get("/v1/checkpoints")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"[]");
}

#[tokio::test]
async fn listing_reports_kinds_skips_corrupt_and_sees_new_files() {
    let dir = tempfile::tempdir().unwrap();
    save_image_ckpt(dir.path(), "tex", r#"{"kind": "none"}"#);
    save_volume_ckpt(dir.path(), "foam");
    std::fs::write(dir.path().join("broken.ipfn"), b"IPFNCKP1 not really").unwrap();
    let s = state(dir.path(), 1);
    let (_, _, body) = send(&s, get("/v1/checkpoints")).await;
    let list: Vec<CheckpointEntry> = serde_json::from_slice(&body).unwrap();
    let ids: Vec<&str> = list.iter().map(|e| e.id.as_str()).collect();
    assert_eq!(ids, ["foam", "tex"]);
    assert_eq!(serde_json::to_value(list[0].kind).unwrap(), "sdf3d");
    assert_eq!(serde_json::to_value(list[1].kind).unwrap(), "image2d");
    assert_eq!(list[1].conditioning, "none");
    assert_eq!(list[1].iterations, 0);

    save_image_ckpt(dir.path(), "later", r#"{"kind": "directional", "a": 0, "b": 1, "c": 0}"#);
    let (_, _, body) = send(&s, get("/v1/checkpoints")).await;
    let list: Vec<CheckpointEntry> = serde_json::from_slice(&body).unwrap();
    assert_eq!(list.len(), 3);
    assert_eq!(list.iter().find(|e| e.id == "later").unwrap().conditioning, "directional");
}

#[tokio::test]
async fn image_synthesis_is_deterministic_png() {
    let dir = tempfile::tempdir().unwrap();
    save_image_ckpt(dir.path(), "tex", r#"{"kind": "none"}"#);
    let s = state(dir.path(), 2);
    let body = r#"{"checkpoint_id": "tex", "dims": [20, 24], "seed": 7, "latent_extent": 2.0}"#;
    let (status, ct, a) = send(&s, post(body)).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&a));
    assert_eq!(ct.as_deref(), Some("image/png"));
    assert_eq!(&a[1..4], b"PNG");
    let (_, _, b) = send(&s, post(body)).await;
    assert_eq!(a, b);
    let (_, _, c) = send(&s, post(r#"{"checkpoint_id": "tex", "dims": [20, 24], "seed": 8}"#)).await;
    assert_ne!(a, c);
}

#[tokio::test]
async fn request_errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    save_image_ckpt(dir.path(), "tex", r#"{"kind": "none"}"#);
    let s = state(dir.path(), 1);

    let (status, _, body) = send(&s, post(r#"{"checkpoint_id": "nope", "dims": [8, 8]}"#)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(error_text(&body).contains("nope"));

    let (status, _, body) = send(&s, post(r#"{"checkpoint_id": "tex", "dims": [65, 8]}"#)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(error_text(&body).contains("64"), "{}", error_text(&body));

    let (status, _, _) = send(&s, post(r#"{"checkpoint_id": "tex", "dims": [8, 8], "guidance": 0.5}"#)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let (status, _, _) = send(&s, post(r#"{"checkpoint_id": "tex", "dims": [8, 8, 8]}"#)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let (status, _, _) = send(&s, post(r#"{"checkpoint_id": "tex", "dims": [0, 8]}"#)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let (status, _, _) = send(&s, post(r#"{"checkpoint_id": "tex", "dims": [8, 8], "colour": 1}"#)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let (status, _, _) = send(&s, post(r#"{"checkpoint_id": "tex", "dims": [8, 8]"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn conditional_checkpoint_accepts_guidance() {
    let dir = tempfile::tempdir().unwrap();
    save_image_ckpt(dir.path(), "dir", r#"{"kind": "directional", "a": 1, "b": 0, "c": 0}"#);
    let s = state(dir.path(), 1);
    for g in ["0.25", r#"{"kind": "ramp", "axis": 1, "from": -1, "to": 1}"#, r#"{"kind": "line", "a": 0, "b": 1, "c": 0}"#] {
        let body = format!(r#"{{"checkpoint_id": "dir", "dims": [8, 8], "guidance": {g}}}"#);
        let (status, ct, _) = send(&s, post(&body)).await;
        assert_eq!(status, StatusCode::OK, "guidance {g}");
        assert_eq!(ct.as_deref(), Some("image/png"));
    }
    let bad = r#"{"checkpoint_id": "dir", "dims": [8, 8], "guidance": {"kind": "map", "values": [1, 2]}}"#;
    assert_eq!(send(&s, post(bad)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn busy_workers_give_503() {
    let dir = tempfile::tempdir().unwrap();
    save_image_ckpt(dir.path(), "tex", r#"{"kind": "none"}"#);
    let s = state(dir.path(), 1);
    let held = s.reserve_worker().unwrap();
    let (status, _, _) = send(&s, post(r#"{"checkpoint_id": "tex", "dims": [8, 8]}"#)).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    drop(held);
    let (status, _, _) = send(&s, post(r#"{"checkpoint_id": "tex", "dims": [8, 8]}"#)).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn volume_requests_become_jobs() {
    let dir = tempfile::tempdir().unwrap();
    save_volume_ckpt(dir.path(), "foam");
    let s = state(dir.path(), 1);
    let body = r#"{"checkpoint_id": "foam", "dims": [12, 10, 9], "seed": 3}"#;
    let (status, _, created) = send(&s, post(body)).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let job: SynthJob = serde_json::from_slice(&created).unwrap();
    assert!(matches!(job.status, JobStatus::Queued | JobStatus::Running | JobStatus::Done));

    let mut seen = vec![job.status];
    let done = loop {
        let (status, _, body) = send(&s, get(&format!("/v1/jobs/{}", job.id))).await;
        assert_eq!(status, StatusCode::OK);
        let j: SynthJob = serde_json::from_slice(&body).unwrap();
        seen.push(j.status);
        if matches!(j.status, JobStatus::Done | JobStatus::Failed) {
            break j;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    };
    let ranks: Vec<u8> = seen
        .iter()
        .map(|s| match s {
            JobStatus::Queued => 0,
            JobStatus::Running => 1,
            _ => 2,
        })
        .collect();
    assert!(ranks.windows(2).all(|w| w[0] <= w[1]), "{seen:?}");
    assert_eq!(done.status, JobStatus::Done, "{:?}", done.error);
    let url = done.result_url.clone().unwrap();
    let (status, ct, bytes) = send(&s, get(&url)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ct.as_deref(), Some("application/x-ipfvol"));
    assert_eq!(&bytes[..8], IPFVOL_MAGIC);
    assert_eq!(bytes.len(), 24 + 12 * 10 * 9 * 4);

    // the same request again yields the same volume
    let (_, _, again) = send(&s, post(body)).await;
    let job2: SynthJob = serde_json::from_slice(&again).unwrap();
    assert_ne!(job2.id, job.id);
    let bytes2 = loop {
        let (status, _, b) = send(&s, get(&format!("/v1/jobs/{}/result", job2.id))).await;
        if status == StatusCode::OK {
            break b;
        }
        assert_eq!(status, StatusCode::CONFLICT);
        tokio::time::sleep(Duration::from_millis(10)).await;
    };
    assert_eq!(bytes, bytes2);
}

#[tokio::test]
async fn unknown_job_is_404() {
    let dir = tempfile::tempdir().unwrap();
    let s = state(dir.path(), 1);
    assert_eq!(send(&s, get("/v1/jobs/999")).await.0, StatusCode::NOT_FOUND);
    assert_eq!(send(&s, get("/v1/jobs/999/result")).await.0, StatusCode::NOT_FOUND);
}
