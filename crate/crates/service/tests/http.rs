use std::future::IntoFuture;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use reqwest::multipart::{Form, Part};
use reqwest::StatusCode;
use serde_json::{json, Value};
use tokio::sync::oneshot;
use wastewise_core::export::{sidecar_path, ArtifactMetadata};
use wastewise_core::fixtures::{png_bytes, quick_artifact};
use wastewise_core::rewards::{rank, UserSummary};
use wastewise_core::{CarbonFactorTable, ClassLabel};
use wastewise_service::{AppState, ErrorBody, Server, ServiceConfig, ServiceError};

fn artifact() -> &'static Path {
    static ARTIFACT: OnceLock<PathBuf> = OnceLock::new();
    ARTIFACT.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let path = dir.join("model.onnx");
        quick_artifact(&path, "mobilenet_v2", 5).unwrap();
        path
    })
}

struct Instance {
    base: String,
    state: Arc<AppState>,
    client: reqwest::Client,
    _stop: oneshot::Sender<()>,
    _data: tempfile::TempDir,
    config: ServiceConfig,
}

impl Instance {
    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    async fn classify(&self, bytes: Vec<u8>, user: Option<&str>) -> reqwest::Response {
        let form = Form::new().part("image", Part::bytes(bytes).file_name("x.png"));
        let mut req = self.client.post(self.url("/api/v1/classify")).multipart(form);
        if let Some(u) = user {
            req = req.header("X-User-Id", u);
        }
        req.send().await.unwrap()
    }

    async fn feedback(&self, bytes: Vec<u8>, predicted: &str, corrected: &str, user: Option<&str>) -> reqwest::Response {
        let form = Form::new()
            .part("image", Part::bytes(bytes).file_name("x.png"))
            .text("predicted", predicted.to_string())
            .text("corrected", corrected.to_string());
        let mut req = self.client.post(self.url("/api/v1/feedback")).multipart(form);
        if let Some(u) = user {
            req = req.header("X-User-Id", u);
        }
        req.send().await.unwrap()
    }

    async fn sync(&self, batch: &Value) -> reqwest::Response {
        self.client.post(self.url("/api/v1/sync")).json(batch).send().await.unwrap()
    }

    async fn get(&self, path: &str) -> reqwest::Response {
        self.client.get(self.url(path)).send().await.unwrap()
    }
}

async fn start_with(edit: impl FnOnce(&mut ServiceConfig)) -> Instance {
    let data = tempfile::tempdir().unwrap();
    let mut config = ServiceConfig {
        artifact: artifact().to_path_buf(),
        data_dir: data.path().join("svc"),
        port: 0,
        ..ServiceConfig::default()
    };
    edit(&mut config);
    let server = Server::bind(&config).await.unwrap();
    let base = format!("http://{}", server.local_addr().unwrap());
    let state = server.state();
    let (stop, rx) = oneshot::channel::<()>();
    tokio::spawn(server.run(async {
        let _ = rx.await;
    }));
    let inst = Instance { base, state, client: reqwest::Client::new(), _stop: stop, _data: data, config };
    for _ in 0..600 {
        if inst.get("/healthz").await.status() == StatusCode::OK {
            return inst;
        }
        tokio::time::sleep(std::time::Duration::from_millis(50)).await;
    }
    panic!("service never became ready");
}

async fn start() -> Instance {
    start_with(|_| {}).await
}

async fn error_code(resp: reqwest::Response) -> (StatusCode, String) {
    let status = resp.status();
    let body: ErrorBody = resp.json().await.unwrap();
    (status, body.error)
}

fn event(id: &str, kind: &str, label: &str) -> Value {
    json!({"client_event_id": id, "type": kind, "label": label, "timestamp": "2024-05-01T10:00:00Z"})
}

#[tokio::test(flavor = "multi_thread")]
async fn health_is_503_until_model_loads_then_reports_sidecar() {
    let data = tempfile::tempdir().unwrap();
    let config = ServiceConfig { artifact: artifact().to_path_buf(), data_dir: data.path().into(), ..ServiceConfig::default() };
    let state = Arc::new(AppState::from_config(&config).unwrap());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    tokio::spawn(axum::serve(listener, wastewise_service::router(state.clone())).into_future());

    let resp = reqwest::get(format!("{base}/healthz")).await.unwrap();
    assert_eq!(resp.status(), StatusCode::SERVICE_UNAVAILABLE);
    let form = Form::new().part("image", Part::bytes(png_bytes(ClassLabel::Glass, 0, 64, 64)));
    let resp = reqwest::Client::new().post(format!("{base}/api/v1/classify")).multipart(form).send().await.unwrap();
    assert_eq!(error_code(resp).await, (StatusCode::SERVICE_UNAVAILABLE, "ModelNotLoaded".into()));

    state.set_model(wastewise_core::load_portable(artifact()).unwrap());
    let health: Value = reqwest::get(format!("{base}/healthz")).await.unwrap().json().await.unwrap();
    assert_eq!(health["status"], "ok");
    assert_eq!(health["model_loaded"], true);
    let labels: Vec<String> = serde_json::from_value(health["artifact_metadata"]["labels"].clone()).unwrap();
    assert_eq!(labels, ClassLabel::names());
    let sidecar: ArtifactMetadata = serde_json::from_slice(&std::fs::read(sidecar_path(artifact())).unwrap()).unwrap();
    assert_eq!(health["artifact_metadata"]["backbone_id"], sidecar.backbone_id);
}

#[tokio::test(flavor = "multi_thread")]
async fn anonymous_classify_is_deterministic_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let table_path = dir.path().join("factors.json");
    let table = CarbonFactorTable { version: "test-7".into(), placeholder: false, ..CarbonFactorTable::default() };
    let mut table = table;
    for (i, l) in ClassLabel::ALL.iter().enumerate() {
        table.factors_g.insert(*l, 11.0 * (i + 1) as f64);
    }
    std::fs::write(&table_path, serde_json::to_string(&table).unwrap()).unwrap();
    let inst = start_with(|c| c.factor_table = Some(table_path.clone())).await;

    let img = png_bytes(ClassLabel::Glass, 3, 120, 90);
    let a: Value = inst.classify(img.clone(), None).await.json().await.unwrap();
    let b: Value = inst.classify(img, None).await.json().await.unwrap();
    for key in ["event_id", "label", "confidence", "probabilities", "suggestion", "carbon_saved_g", "points_awarded", "factor_table_version"] {
        assert!(a.get(key).is_some(), "missing {key}");
    }
    let label: ClassLabel = serde_json::from_value(a["label"].clone()).unwrap();
    let probs: std::collections::BTreeMap<ClassLabel, f64> = serde_json::from_value(a["probabilities"].clone()).unwrap();
    assert_eq!(probs.len(), 6);
    assert!((probs.values().sum::<f64>() - 1.0).abs() < 1e-6);
    assert_eq!(a["confidence"].as_f64().unwrap(), probs[&label]);
    let best = ClassLabel::ALL.iter().copied().fold(ClassLabel::Cardboard, |m, l| if probs[&l] > probs[&m] { l } else { m });
    assert_eq!(label, best);
    assert_eq!(a["carbon_saved_g"].as_f64().unwrap(), table.factors_g[&label]);
    assert_eq!(a["factor_table_version"], "test-7");
    assert_eq!(a["points_awarded"], 0);

    assert_eq!(a["label"], b["label"]);
    assert_ne!(a["event_id"], b["event_id"]);
    for l in ClassLabel::ALL {
        let (x, y) = (a["probabilities"][l.name()].as_f64().unwrap(), b["probabilities"][l.name()].as_f64().unwrap());
        assert!((x - y).abs() <= 1e-6);
    }
    assert!(inst.state.ledger.is_empty());
}

#[tokio::test(flavor = "multi_thread")]
async fn classify_with_user_awards_points() {
    let inst = start().await;
    let r: Value = inst.classify(png_bytes(ClassLabel::Paper, 1, 64, 64), Some("ana")).await.json().await.unwrap();
    assert_eq!(r["points_awarded"], 10);
    let s: UserSummary = inst.get("/api/v1/users/ana/summary").await.json().await.unwrap();
    assert_eq!((s.total_points, s.event_count), (10, 1));
    assert_eq!(s.total_carbon_g, r["carbon_saved_g"].as_f64().unwrap());
    assert_eq!(inst.state.ledger.events()[0].client_event_id, r["event_id"].as_str().unwrap());
}

#[tokio::test(flavor = "multi_thread")]
async fn classify_rejects_bad_uploads() {
    let inst = start_with(|c| c.max_upload_bytes = 4000).await;
    assert_eq!(
        error_code(inst.classify(b"definitely not an image".to_vec(), None).await).await,
        (StatusCode::BAD_REQUEST, "UndecodableImage".into())
    );
    assert_eq!(
        error_code(inst.classify(vec![7u8; 4001], None).await).await,
        (StatusCode::PAYLOAD_TOO_LARGE, "ImageTooLarge".into())
    );
    assert_eq!(
        error_code(inst.classify(vec![7u8; 200_000], None).await).await,
        (StatusCode::PAYLOAD_TOO_LARGE, "ImageTooLarge".into())
    );
    let form = Form::new().text("note", "no image");
    let resp = inst.client.post(inst.url("/api/v1/classify")).multipart(form).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    let small = png_bytes(ClassLabel::Metal, 0, 16, 16);
    assert!(small.len() < 4000);
    assert_eq!(inst.classify(small, None).await.status(), StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread")]
async fn feedback_persists_and_validates() {
    let inst = start().await;
    let img = png_bytes(ClassLabel::Plastic, 2, 48, 48);
    let resp = inst.feedback(img.clone(), "plastic", "glass", Some("bo")).await;
    assert_eq!(resp.status(), StatusCode::OK);
    let body: Value = resp.json().await.unwrap();
    assert_eq!(body["points_awarded"], 5);
    let id = body["feedback_id"].as_str().unwrap();
    let rec: Value = inst.get(&format!("/api/v1/feedback/{id}")).await.json().await.unwrap();
    assert_eq!((rec["predicted"].as_str(), rec["corrected"].as_str()), (Some("plastic"), Some("glass")));
    assert_eq!(rec["user_id"], "bo");
    let image = inst.get(&format!("/api/v1/feedback/{id}/image")).await;
    assert_eq!(image.headers()["content-type"], "image/png");
    assert_eq!(image.bytes().await.unwrap().as_ref(), img.as_slice());
    let s: UserSummary = inst.get("/api/v1/users/bo/summary").await.json().await.unwrap();
    assert_eq!((s.total_points, s.total_carbon_g), (5, 0.0));

    assert_eq!(error_code(inst.feedback(img.clone(), "glass", "glass", None).await).await, (StatusCode::BAD_REQUEST, "SameLabel".into()));
    assert_eq!(error_code(inst.feedback(img.clone(), "glass", "compost", None).await).await, (StatusCode::BAD_REQUEST, "UnknownLabel".into()));
    assert_eq!(inst.get("/api/v1/feedback/nope").await.status(), StatusCode::NOT_FOUND);

    let before = inst.state.feedback.len();
    for i in 0..7 {
        let r = inst.feedback(png_bytes(ClassLabel::Trash, i, 24, 24), "trash", "paper", None).await;
        assert_eq!(r.status(), StatusCode::OK);
    }
    assert_eq!(inst.state.feedback.len(), before + 7);
    let lines = std::fs::read_to_string(inst.config.data_dir.join("feedback/feedback.ndjson")).unwrap().lines().count();
    assert_eq!(lines, before + 7);
}

#[tokio::test(flavor = "multi_thread")]
async fn feedback_quota_returns_507() {
    let inst = start_with(|c| c.feedback_quota_bytes = 3000).await;
    assert_eq!(inst.feedback(png_bytes(ClassLabel::Glass, 0, 8, 8), "glass", "metal", None).await.status(), StatusCode::OK);
    let big = png_bytes(ClassLabel::Glass, 1, 64, 64);
    assert!(big.len() > 3000);
    assert_eq!(
        error_code(inst.feedback(big, "glass", "metal", None).await).await,
        (StatusCode::INSUFFICIENT_STORAGE, "StorageFull".into())
    );
}

#[tokio::test(flavor = "multi_thread")]
async fn sync_is_idempotent_and_validated() {
    let inst = start().await;
    let batch = json!({"user_id": "cy", "events": [
        event("e1", "classify_confirmed", "glass"),
        event("e2", "classify_confirmed", "metal"),
        event("e3", "feedback_submitted", "trash"),
    ]});
    let first: Value = inst.sync(&batch).await.json().await.unwrap();
    assert_eq!((first["applied"].as_u64(), first["duplicates"].as_u64()), (Some(3), Some(0)));
    let table = CarbonFactorTable::default();
    assert_eq!(first["total_points"], 25);
    assert_eq!(first["total_carbon_g"].as_f64().unwrap(), table.factors_g[&ClassLabel::Glass] + table.factors_g[&ClassLabel::Metal]);
    let again: Value = inst.sync(&batch).await.json().await.unwrap();
    assert_eq!((again["applied"].as_u64(), again["duplicates"].as_u64()), (Some(0), Some(3)));
    assert_eq!((&again["total_points"], &again["total_carbon_g"]), (&first["total_points"], &first["total_carbon_g"]));

    let dup = json!({"user_id": "cy", "events": [event("z", "classify_confirmed", "glass"), event("z", "classify_confirmed", "paper")]});
    assert_eq!(error_code(inst.sync(&dup).await).await, (StatusCode::CONFLICT, "DuplicateIdsWithinBatch".into()));
    for bad in [
        json!({"events": []}),
        json!({"user_id": "", "events": []}),
        json!({"user_id": "cy", "events": [event("q", "classify_confirmed", "compost")]}),
        json!({"user_id": "cy", "events": [event("", "classify_confirmed", "glass")]}),
        json!({"user_id": "cy", "events": [{"client_event_id": "q", "type": "shout", "label": "glass", "timestamp": "2024-05-01T10:00:00Z"}]}),
    ] {
        assert_eq!(error_code(inst.sync(&bad).await).await, (StatusCode::BAD_REQUEST, "MalformedBatch".into()), "{bad}");
    }
    let resp = inst.client.post(inst.url("/api/v1/sync")).header("content-type", "application/json").body("{").send().await.unwrap();
    assert_eq!(error_code(resp).await, (StatusCode::BAD_REQUEST, "MalformedBatch".into()));
    assert_eq!(inst.state.ledger.len(), 3);
}

#[tokio::test(flavor = "multi_thread")]
async fn interleaved_replays_match_dedup_fold() {
    let inst = start().await;
    let labels = ClassLabel::names();
    let kinds = ["classify_confirmed", "feedback_submitted"];
    let a: Vec<Value> = (0..12).map(|i| event(&format!("a{i}"), kinds[i % 2], labels[i % 6])).collect();
    let b: Vec<Value> = (6..18).map(|i| event(&format!("a{i}"), kinds[i % 2], labels[i % 6])).collect();
    let mut rng = rand::rngs::StdRng::seed_from_u64(9);
    let mut order = vec![(0, a.clone()), (1, b.clone()), (0, a.clone()), (1, b.clone())];
    order.shuffle(&mut rng);
    let mut last = Value::Null;
    for (_, events) in order {
        last = inst.sync(&json!({"user_id": "dee", "events": events})).await.json().await.unwrap();
    }
    let table = CarbonFactorTable::default();
    let (mut pts, mut carbon) = (0u64, 0.0f64);
    for i in 0..18 {
        if i % 2 == 0 {
            pts += 10;
            carbon += table.factors_g[&labels[i % 6].parse::<ClassLabel>().unwrap()];
        } else {
            pts += 5;
        }
    }
    assert_eq!(last["total_points"].as_u64().unwrap(), pts);
    assert!((last["total_carbon_g"].as_f64().unwrap() - carbon).abs() < 1e-9);
}


#[tokio::test(flavor = "multi_thread")]
async fn leaderboard_orders_and_limits() {
    let inst = start().await;
    let empty: Vec<UserSummary> = inst.get("/api/v1/leaderboard?limit=5").await.json().await.unwrap();
    assert!(empty.is_empty());
    for (user, n) in [("u30", 3), ("u20", 2), ("u10", 1)] {
        let events: Vec<Value> = (0..n).map(|i| event(&format!("{user}-{i}"), "classify_confirmed", "trash")).collect();
        inst.sync(&json!({"user_id": user, "events": events})).await;
    }
    let top: Vec<UserSummary> = inst.get("/api/v1/leaderboard?limit=2").await.json().await.unwrap();
    assert_eq!(top.iter().map(|s| (s.user_id.as_str(), s.total_points)).collect::<Vec<_>>(), [("u30", 30), ("u20", 20)]);

    for i in 0..25 {
        let events: Vec<Value> = (0..(i * 7 % 5)).map(|j| event(&format!("r{i}-{j}"), kinds(j), "glass")).collect();
        inst.sync(&json!({"user_id": format!("r{i:02}"), "events": events})).await;
    }
    let all: Vec<UserSummary> = inst.get("/api/v1/leaderboard?limit=1000").await.json().await.unwrap();
    let mut brute: Vec<UserSummary> = all.clone();
    brute.sort_by(|a, b| (std::cmp::Reverse(a.total_points), &a.user_id).cmp(&(std::cmp::Reverse(b.total_points), &b.user_id)));
    assert_eq!(all, brute);
    let mut ranked = all.clone();
    ranked.sort_by(rank);
    assert_eq!(all, ranked);
    let default: Vec<UserSummary> = inst.get("/api/v1/leaderboard").await.json().await.unwrap();
    assert_eq!(default, all[..10]);

    for q in ["0", "-3"] {
        assert_eq!(error_code(inst.get(&format!("/api/v1/leaderboard?limit={q}")).await).await, (StatusCode::BAD_REQUEST, "InvalidLimit".into()));
    }
    assert_eq!(inst.get("/api/v1/leaderboard?limit=abc").await.status(), StatusCode::BAD_REQUEST);
}

fn kinds(j: usize) -> &'static str {
    if j.is_multiple_of(3) { "feedback_submitted" } else { "classify_confirmed" }
}

#[tokio::test(flavor = "multi_thread")]
async fn ledger_survives_restart() {
    let data = tempfile::tempdir().unwrap();
    let dir = data.path().to_path_buf();
    let batch = json!({"user_id": "eve", "events": [event("k1", "classify_confirmed", "paper")]});
    {
        let inst = start_with(|c| c.data_dir = dir.clone()).await;
        inst.sync(&batch).await;
    }
    let inst = start_with(|c| c.data_dir = dir.clone()).await;
    let replay: Value = inst.sync(&batch).await.json().await.unwrap();
    assert_eq!((replay["applied"].as_u64(), replay["duplicates"].as_u64()), (Some(0), Some(1)));
    assert_eq!(replay["total_points"], 10);
}

#[tokio::test(flavor = "multi_thread")]
async fn startup_failures() {
    let data = tempfile::tempdir().unwrap();
    let missing = ServiceConfig { artifact: data.path().join("absent.onnx"), data_dir: data.path().into(), port: 0, ..ServiceConfig::default() };
    assert!(matches!(Server::bind(&missing).await, Err(ServiceError::Artifact(_))));

    let held = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let busy = ServiceConfig {
        artifact: artifact().to_path_buf(),
        data_dir: data.path().into(),
        port: held.local_addr().unwrap().port(),
        ..ServiceConfig::default()
    };
    assert!(matches!(Server::bind(&busy).await, Err(ServiceError::PortInUse(_))));

    let broken = data.path().join("broken.onnx");
    std::fs::write(&broken, b"garbage").unwrap();
    std::fs::copy(sidecar_path(artifact()), sidecar_path(&broken)).unwrap();
    let corrupt = ServiceConfig { artifact: broken, data_dir: data.path().into(), port: 0, ..ServiceConfig::default() };
    let server = Server::bind(&corrupt).await.unwrap();
    let result = server.run(std::future::pending()).await;
    assert!(matches!(result, Err(ServiceError::Artifact(_))), "{result:?}");
}

#[tokio::test(flavor = "multi_thread")]
async fn factors_endpoint_serves_table() {
    let inst = start().await;
    let t: CarbonFactorTable = inst.get("/api/v1/factors").await.json().await.unwrap();
    assert_eq!(t, CarbonFactorTable::default());
}
