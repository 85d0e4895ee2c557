use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use futures::StreamExt;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use dragsplat::api::{router, App, ServiceConfig};
use dragsplat::pipeline::demo_case;
use dragsplat::session::{Event, JobState, Session};
use dragsplat_core::config::PipelineConfig;
use dragsplat_core::gsplat::{encode_ply, parse_ply, Gaussian, GaussianCloud};

const TINY: &str = "
[rig]
width = 16
height = 16
[pretrain]
scenes = 2
steps = 2
[lora]
steps = 3
[drag]
ddim_steps = 10
max_iters = 2
[refit]
iterations = 20
report_every = 5
";

fn app(dir: &std::path::Path) -> Arc<App> {
    App::open(ServiceConfig {
        data_dir: dir.join("data"),
        cache_dir: dir.join("cache"),
        pipeline: PipelineConfig::from_toml(TINY).unwrap(),
    })
    .unwrap()
}

async fn call(r: &Router, method: &str, uri: &str, body: impl Into<Body>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).body(body.into()).unwrap();
    let resp = r.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(r: &Router, method: &str, uri: &str, body: impl Into<Body>) -> (StatusCode, Value) {
    let (s, b) = call(r, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn new_session(r: &Router) -> String {
    let (s, v) = call_json(r, "POST", "/v1/sessions", Body::empty()).await;
    assert_eq!(s, StatusCode::OK);
    v["id"].as_str().unwrap().to_string()
}

fn grid_cloud(n: usize) -> GaussianCloud {
    GaussianCloud::new(
        (0..n)
            .map(|i| {
                let (x, y) = ((i % 10) as f64 / 10.0 - 0.45, (i / 10) as f64 / 10.0 - 0.45);
                Gaussian::isotropic([x, y, 0.1 * (i % 3) as f64], 0.05, [0.2 + 0.006 * i as f64, 0.5, 0.8], 0.8)
            })
            .collect(),
    )
}

fn png_size(png: &[u8]) -> (u32, u32) {
    assert_eq!(&png[1..4], b"PNG");
    let w = u32::from_be_bytes(png[16..20].try_into().unwrap());
    let h = u32::from_be_bytes(png[20..24].try_into().unwrap());
    (w, h)
}

async fn wait_for(r: &Router, id: &str, kind: &str) -> Value {
    for _ in 0..2400 {
        let (_, v) = call_json(r, "GET", &format!("/v1/sessions/{id}"), Body::empty()).await;
        let state = v["jobs"][kind]["state"].as_str().unwrap().to_string();
        if state == "done" || state == "failed" {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("{kind} job never finished");
}

#[tokio::test]
async fn upload_render_and_payload_errors() {
    let dir = tempfile::tempdir().unwrap();
    let r = router(app(dir.path()));
    let id = new_session(&r).await;

    let (s, v) = call_json(&r, "GET", "/v1/sessions/nope", Body::empty()).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::NOT_FOUND, Some("not_found")));
    let (s, _) = call(&r, "PUT", "/v1/sessions/nope/ply", encode_ply(&grid_cloud(3))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, v) = call_json(&r, "PUT", &format!("/v1/sessions/{id}/ply"), encode_ply(&grid_cloud(100))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["count"], 100);

    let (_, status) = call_json(&r, "GET", &format!("/v1/sessions/{id}"), Body::empty()).await;
    let cams = status["cameras"].as_array().unwrap();
    assert_eq!(cams.len(), 4);
    for view in 0..4 {
        let (s, png) = call(&r, "GET", &format!("/v1/sessions/{id}/views/{view}"), Body::empty()).await;
        assert_eq!(s, StatusCode::OK);
        let want = (cams[view]["width"].as_u64().unwrap() as u32, cams[view]["height"].as_u64().unwrap() as u32);
        assert_eq!(png_size(&png), want);
    }
    let (s, _) = call(&r, "GET", &format!("/v1/sessions/{id}/views/4"), Body::empty()).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&r, "GET", &format!("/v1/sessions/{id}/views/0?splat_scale=-1"), Body::empty()).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let (s, v) = call_json(&r, "PUT", &format!("/v1/sessions/{id}/ply"), &b"ply\nnot really"[..]).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("PLY_PARSE")));
    for (path, body) in [
        ("picks", "{\"starts\": [[0,0,0]]}"),
        ("picks", "{\"starts\": [[0,0,0]], \"ends\": []}"),
        ("picks", "{\"starts\": [[9,9,9]], \"ends\": [[0,0,0]]}"),
        ("picks", "[1, 2]"),
        ("mask", "{\"indices\": [100]}"),
        ("mask", "{\"indices\": [1, 1]}"),
        ("mask", "not json"),
        ("cameras", "[]"),
    ] {
        let (s, _) = call(&r, "PUT", &format!("/v1/sessions/{id}/{path}"), body).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{path} {body}");
    }
    let mut cams16: Vec<Value> = cams.clone();
    cams16[0]["width"] = json!(20);
    let (s, _) = call(&r, "PUT", &format!("/v1/sessions/{id}/cameras"), serde_json::to_vec(&cams16).unwrap()).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call(&r, "PUT", &format!("/v1/sessions/{id}/cameras"), serde_json::to_vec(cams).unwrap()).await;
    assert_eq!(s, StatusCode::OK);

    let (s, v) = call_json(&r, "PUT", &format!("/v1/sessions/{id}/mask"), "{\"indices\": [3, 1]}").await;
    assert_eq!((s, v["count"].as_u64()), (StatusCode::OK, Some(2)));
    let (s, _) = call(&r, "GET", &format!("/v1/sessions/{id}/artifacts/../session.json"), Body::empty()).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, bytes) = call(&r, "GET", &format!("/v1/sessions/{id}/export"), Body::empty()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(parse_ply(&bytes).unwrap().len(), 100);
}

#[tokio::test]
async fn ordering_rules_are_conflicts() {
    let dir = tempfile::tempdir().unwrap();
    let r = router(app(dir.path()));
    let id = new_session(&r).await;
    let (s, v) = call_json(&r, "POST", &format!("/v1/sessions/{id}/jobs/lora"), Body::empty()).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::CONFLICT, Some("cloud_required")));
    let (s, _) = call(&r, "GET", &format!("/v1/sessions/{id}/views/0"), Body::empty()).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let (cloud, picks) = demo_case(3).unwrap();
    call(&r, "PUT", &format!("/v1/sessions/{id}/ply"), encode_ply(&cloud)).await;
    let (s, _) = call(&r, "PUT", &format!("/v1/sessions/{id}/picks"), serde_json::to_vec(&picks).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    let (s, v) = call_json(&r, "POST", &format!("/v1/sessions/{id}/jobs/drag"), Body::empty()).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::CONFLICT, Some("lora_required")));
    let (s, v) = call_json(&r, "POST", &format!("/v1/sessions/{id}/jobs/refit"), Body::empty()).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::CONFLICT, Some("drag_required")));
    let (s, _) = call(&r, "POST", &format!("/v1/sessions/{id}/jobs/paint"), Body::empty()).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    for body in ["{\"steps\": \"many\"}", "{\"bogus\": 1}", "[1]", "{\"learning_rate\": -1}"] {
        let (s, _) = call(&r, "POST", &format!("/v1/sessions/{id}/jobs/lora"), body).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
    }
    let (_, v) = call_json(&r, "GET", &format!("/v1/sessions/{id}"), Body::empty()).await;
    for kind in ["lora", "drag", "refit"] {
        assert_eq!(v["jobs"][kind]["state"], "pending");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_starts_give_one_winner() {
    let dir = tempfile::tempdir().unwrap();
    let r = router(app(dir.path()));
    let id = new_session(&r).await;
    let (cloud, _) = demo_case(4).unwrap();
    call(&r, "PUT", &format!("/v1/sessions/{id}/ply"), encode_ply(&cloud)).await;
    let uri = format!("/v1/sessions/{id}/jobs/lora");
    let (a, b) = tokio::join!(call_json(&r, "POST", &uri, Body::empty()), call_json(&r, "POST", &uri, Body::empty()));
    let mut codes = [a.0, b.0];
    codes.sort();
    assert_eq!(codes, [StatusCode::OK, StatusCode::CONFLICT]);
    let loser = if a.0 == StatusCode::CONFLICT { a.1 } else { b.1 };
    assert_eq!(loser["error"], "job_running");

    // inputs cannot change under a running job
    let (s, v) = call_json(&r, "PUT", &format!("/v1/sessions/{id}/mask"), "{\"indices\": [0]}").await;
    if s == StatusCode::CONFLICT {
        assert_eq!(v["error"], "job_running");
    }
    let v = wait_for(&r, &id, "lora").await;
    assert_eq!(v["jobs"]["lora"]["state"], "done", "{v}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn full_edit_flow_with_streamed_telemetry() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let r = router(app.clone());
    let id = new_session(&r).await;
    let (cloud, picks) = demo_case(11).unwrap();
    let mut plain = cloud.clone();
    plain.clear_mask();
    // the file format is single precision
    let plain = parse_ply(&encode_ply(&plain)).unwrap();
    call(&r, "PUT", &format!("/v1/sessions/{id}/ply"), encode_ply(&plain)).await;
    let (s, v) = call_json(&r, "PUT", &format!("/v1/sessions/{id}/picks"), serde_json::to_vec(&picks).unwrap()).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let (_, status) = call_json(&r, "GET", &format!("/v1/sessions/{id}"), Body::empty()).await;
    assert_eq!(status["picks"]["starts"], json!(picks.starts));
    assert_eq!(status["mask"], json!(picks.mask.clone().unwrap()));
    assert_eq!(status["projections"].as_array().unwrap().len(), 4);

    let (s, v) = call_json(&r, "POST", &format!("/v1/sessions/{id}/jobs/lora"), Body::empty()).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let lora_job = v["job_id"].as_str().unwrap().to_string();
    let v = wait_for(&r, &id, "lora").await;
    assert_eq!(v["jobs"]["lora"]["state"], "done", "{v}");
    assert_eq!(v["jobs"]["lora"]["id"], lora_job.as_str());

    let (s, _) = call(&r, "POST", &format!("/v1/sessions/{id}/jobs/drag"), "{\"max_iters\": 3}").await;
    assert_eq!(s, StatusCode::OK);
    let v = wait_for(&r, &id, "drag").await;
    let drag = &v["jobs"]["drag"];
    assert_eq!(drag["state"], "done", "{v}");
    let iterations = drag["summary"]["iterations"].as_u64().unwrap() as usize;
    assert!((1..=3).contains(&iterations));
    let telemetry = drag["artifacts"]["telemetry"].as_str().unwrap();
    let (s, lines) = call(&r, "GET", &format!("/v1/sessions/{id}/artifacts/{telemetry}"), Body::empty()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(String::from_utf8(lines).unwrap().lines().count(), iterations);
    let edited0 = drag["artifacts"]["view_0"].as_str().unwrap();
    let (_, png) = call(&r, "GET", &format!("/v1/sessions/{id}/artifacts/{edited0}"), Body::empty()).await;
    assert_eq!(png_size(&png), (16, 16));

    let (s, _) = call(&r, "POST", &format!("/v1/sessions/{id}/jobs/refit"), Body::empty()).await;
    assert_eq!(s, StatusCode::OK);
    let v = wait_for(&r, &id, "refit").await;
    assert_eq!(v["jobs"]["refit"]["state"], "done", "{v}");
    assert_eq!(v["jobs"]["refit"]["progress"], 1.0);
    let (s, bytes) = call(&r, "GET", &format!("/v1/sessions/{id}/export"), Body::empty()).await;
    assert_eq!(s, StatusCode::OK);
    let out = parse_ply(&bytes).unwrap();
    let mask = picks.mask.unwrap();
    for (i, (a, b)) in out.gaussians.iter().zip(&plain.gaussians).enumerate() {
        if !mask.contains(&i) {
            assert_eq!(a, b);
        }
    }
    assert!(mask.iter().any(|&i| out.gaussians[i] != plain.gaussians[i]));
    let (s, _) = call(&r, "GET", &format!("/v1/sessions/{id}/views/1?source=refit"), Body::empty()).await;
    assert_eq!(s, StatusCode::OK);

    // replay over a real socket, then resume from a sequence number
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let served = router(app);
    tokio::spawn(async move { axum::serve(listener, served).await.unwrap() });
    let last = v["last_seq"].as_u64().unwrap();
    let read = |since: u64| {
        let url = format!("ws://{addr}/v1/sessions/{id}/events?since={since}");
        async move {
            let (mut ws, _) = tokio_tungstenite::connect_async(url).await.unwrap();
            let mut got = Vec::new();
            while got.len() < (last - since) as usize {
                let msg = tokio::time::timeout(Duration::from_secs(10), ws.next()).await.unwrap().unwrap().unwrap();
                got.push(serde_json::from_str::<Event>(msg.to_text().unwrap()).unwrap());
            }
            got
        }
    };
    let all = read(0).await;
    assert!(all.iter().enumerate().all(|(i, e)| e.seq == i as u64 + 1));
    assert_eq!(all.iter().filter(|e| e.kind == "drag").count(), iterations);
    assert_eq!(all.iter().filter(|e| e.kind == "lora").count(), 3);
    assert_eq!(all.iter().filter(|e| e.kind == "refit").count(), 5);
    let states: Vec<&str> = all.iter().filter(|e| e.kind == "state").map(|e| e.data["state"].as_str().unwrap()).collect();
    assert_eq!(states, ["pending", "running", "done"].repeat(3));
    let tail = read(last - 4).await;
    assert_eq!(tail, all[all.len() - 4..].to_vec());
}

#[tokio::test]
async fn sessions_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let id = {
        let r = router(app(dir.path()));
        let id = new_session(&r).await;
        call(&r, "PUT", &format!("/v1/sessions/{id}/ply"), encode_ply(&grid_cloud(12))).await;
        call(&r, "PUT", &format!("/v1/sessions/{id}/mask"), "{\"indices\": [2, 5]}").await;
        id
    };
    // simulate a crash in the middle of a job
    let sdir = dir.path().join("data/sessions").join(&id);
    let mut s = Session::load(&sdir).unwrap();
    let job = s.job_mut(dragsplat::session::JobKind::Lora);
    job.id = Some("j".into());
    job.advance(JobState::Running).unwrap();
    s.save(&sdir).unwrap();

    let r = router(app(dir.path()));
    let (_, list) = call_json(&r, "GET", "/v1/sessions", Body::empty()).await;
    assert_eq!(list["sessions"], json!([id]));
    let (_, v) = call_json(&r, "GET", &format!("/v1/sessions/{id}"), Body::empty()).await;
    assert_eq!((v["count"].as_u64(), v["mask"].clone()), (Some(12), json!([2, 5])));
    assert_eq!(v["jobs"]["lora"]["state"], "failed");
    assert_eq!(v["jobs"]["lora"]["error"]["code"], "interrupted");
    let (s, _) = call(&r, "GET", &format!("/v1/sessions/{id}/views/0"), Body::empty()).await;
    assert_eq!(s, StatusCode::OK);
}
