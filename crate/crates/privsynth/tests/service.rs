mod common;

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{corpus, husky_request, runtime, serve_in};
use privsynth::backend::{connect, SharedBackend};
use privsynth::config::Config;
use privsynth::store::{ArtifactKind, Job, JobState, Store};
use privsynth::{service, wire};
use privsynth_core::mock::MockBackend;
use privsynth_core::sanitizer::{build_bundle, SanitizerOptions};
use serde_json::Value;

fn config(dir: &Path) -> Config {
    Config {
        data_dir: dir.to_path_buf(),
        count_per_class: 2,
        width: 32,
        height: 32,
        synthetic_per_feature: 2,
        max_body_bytes: 2 << 20,
        ..Config::default()
    }
}

fn mock() -> SharedBackend {
    Arc::new(MockBackend::default())
}

struct Server {
    base: String,
    agent: ureq::Agent,
    _rt: tokio::runtime::Runtime,
}

impl Server {
    fn start(cfg: &Config, backend: SharedBackend) -> Self {
        let rt = runtime();
        let app = rt.block_on(async { service::start(cfg, backend) }).unwrap();
        let addr = serve_in(&rt, app);
        let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Self {
            base: format!("http://{addr}"),
            agent,
            _rt: rt,
        }
    }

    fn submit(&self, body: &[u8], key: Option<&str>) -> (u16, Value) {
        let mut req = self.agent.post(format!("{}/v1/jobs", self.base)).header("content-type", "application/json");
        if let Some(k) = key {
            req = req.header("idempotency-key", k);
        }
        let mut resp = req.send(body).unwrap();
        let status = resp.status().as_u16();
        let bytes = resp.body_mut().read_to_vec().unwrap();
        (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
    }

    fn get(&self, path: &str) -> (u16, Vec<u8>) {
        let mut resp = self.agent.get(format!("{}{path}", self.base)).call().unwrap();
        let status = resp.status().as_u16();
        (status, resp.body_mut().with_config().limit(1 << 30).read_to_vec().unwrap())
    }

    fn job(&self, id: &str) -> Job {
        let (status, body) = self.get(&format!("/v1/jobs/{id}"));
        assert_eq!(status, 200);
        serde_json::from_slice(&body).unwrap()
    }

    fn wait(&self, id: &str) -> Job {
        let start = Instant::now();
        loop {
            let job = self.job(id);
            if job.state.is_terminal() {
                return job;
            }
            assert!(start.elapsed() < Duration::from_secs(120), "job {id} stuck in {:?}", job.state);
            std::thread::sleep(Duration::from_millis(20));
        }
    }
}

fn bundle_json(pref: &str, n: u32) -> Vec<u8> {
    let (images, entries) = corpus(n, 32);
    let b = build_bundle(
        &husky_request(),
        &images,
        &entries,
        &pref.parse().unwrap(),
        &SanitizerOptions::default(),
        None,
    )
    .unwrap();
    wire::to_json(&b)
}

#[test]
fn l0_job_runs_to_done() {
    let dir = tempfile::tempdir().unwrap();
    let srv = Server::start(&config(dir.path()), mock());
    let (status, body) = srv.submit(&bundle_json("t=L0,b=L0", 3), None);
    assert_eq!(status, 201, "{body}");
    assert_eq!(body["state"], "queued");
    let id = body["id"].as_str().unwrap();

    let job = srv.wait(id);
    assert_eq!(job.state, JobState::Done, "{:?}", job.error);
    let states: Vec<_> = job.history.iter().map(|t| t.state.as_str()).collect();
    assert_eq!(
        states,
        ["queued", "sanitizing-received", "fine_tuning", "generating", "training", "evaluating", "done"]
    );
    let kinds: Vec<_> = job.artifacts.iter().map(|a| a.kind).collect();
    assert_eq!(kinds, [ArtifactKind::Dataset, ArtifactKind::UtilityReport, ArtifactKind::ModelWeights]);

    let ds = &job.artifacts[0];
    let (status, bytes) = srv.get(&format!("/v1/artifacts/{}", ds.addr));
    assert_eq!(status, 200);
    let doc: Value = serde_json::from_slice(&bytes).unwrap();
    let samples = doc["samples"].as_array().unwrap();
    assert_eq!(samples.len(), 8);
    let (status, png) = srv.get(&format!("/v1/artifacts/{}", samples[0]["image"].as_str().unwrap()));
    assert_eq!(status, 200);
    assert!(png.starts_with(b"\x89PNG"));

    let (_, report) = srv.get(&format!("/v1/artifacts/{}", job.artifacts[1].addr));
    let report: Value = serde_json::from_slice(&report).unwrap();
    assert_eq!(report["metric"], "accuracy");
}

#[test]
fn corrupt_payload_names_the_segment() {
    let dir = tempfile::tempdir().unwrap();
    let srv = Server::start(&config(dir.path()), mock());
    let mut doc: Value = serde_json::from_slice(&bundle_json("t=L2,b=L0", 2)).unwrap();
    let segments = doc["entries"][1]["segments"].as_array_mut().unwrap();
    let k = segments.iter().position(|s| !s["payload"].is_null()).unwrap();
    segments[k]["payload"]["png"] = "@@not base64@@".into();
    let (status, body) = srv.submit(&serde_json::to_vec(&doc).unwrap(), None);
    assert_eq!(status, 400);
    assert_eq!(body["code"], "schema_error");
    assert_eq!(body["field"], format!("entries[1].segments[{k}].payload"));
    assert_eq!(body["retryable"], false);
    assert!(Store::open(dir.path()).unwrap().list_jobs().unwrap().is_empty());
}

#[test]
fn idempotency_key_returns_the_same_job() {
    let dir = tempfile::tempdir().unwrap();
    let srv = Server::start(&config(dir.path()), mock());
    let body = bundle_json("t=L0,b=L0", 2);
    let (s1, j1) = srv.submit(&body, Some("abc"));
    let (s2, j2) = srv.submit(&body, Some("abc"));
    assert_eq!((s1, s2), (201, 200));
    assert_eq!(j1["id"], j2["id"]);

    let (s3, j3) = srv.submit(&body, None);
    assert_eq!(s3, 201);
    assert_ne!(j1["id"], j3["id"]);

    let other = bundle_json("t=L0,b=L0", 3);
    let (s4, e4) = srv.submit(&other, Some("abc"));
    assert_eq!(s4, 409);
    assert_eq!(e4["code"], "conflict");
}

#[test]
fn oversized_and_malformed_bodies_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.max_body_bytes = 1000;
    let srv = Server::start(&cfg, mock());
    let (status, body) = srv.submit(&bundle_json("t=L2,b=L2", 2), None);
    assert_eq!(status, 413);
    assert_eq!(body["code"], "payload_too_large");

    let (status, body) = srv.submit(br#"{"version":1,"request":7}"#, None);
    assert_eq!(status, 400);
    assert_eq!(body["field"], "request");
}

#[test]
fn unknown_ids_are_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let srv = Server::start(&config(dir.path()), mock());
    let (status, body) = srv.get("/v1/jobs/nope");
    assert_eq!(status, 404);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["code"], "not_found");
    let (status, _) = srv.get(&format!("/v1/artifacts/{}", "0".repeat(64)));
    assert_eq!(status, 404);
}

#[test]
fn backend_failure_is_recorded_with_step() {
    let dir = tempfile::tempdir().unwrap();
    let dead = connect("http://127.0.0.1:9", Duration::from_secs(2)).unwrap();
    let srv = Server::start(&config(dir.path()), dead);
    let (_, body) = srv.submit(&bundle_json("t=L2,b=L0", 2), None);
    let job = srv.wait(body["id"].as_str().unwrap());
    assert_eq!(job.state, JobState::Failed);
    let err = job.error.unwrap();
    assert_eq!(err.code, "generation_failed");
    assert_eq!(err.step, "fine_tuning");
    assert!(err.message.contains("unavailable"), "{}", err.message);
    assert!(job.artifacts.is_empty());
}

#[test]
fn restart_resumes_queued_and_fails_interrupted() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let addr = store.put_object(&bundle_json("t=L0,b=L0", 2)).unwrap();
    let queued = Job::new("queued-1".into(), addr.clone());
    store.save_job(&queued).unwrap();
    let mut running = Job::new("running-1".into(), addr);
    running.advance(JobState::SanitizingReceived).unwrap();
    running.advance(JobState::FineTuning).unwrap();
    store.save_job(&running).unwrap();

    let srv = Server::start(&config(dir.path()), mock());
    assert_eq!(srv.wait("queued-1").state, JobState::Done);
    let r = srv.job("running-1");
    assert_eq!(r.state, JobState::Failed);
    let err = r.error.unwrap();
    assert_eq!((err.code.as_str(), err.step.as_str()), ("interrupted", "fine_tuning"));
}

#[test]
fn backend_protocol_is_mounted() {
    let dir = tempfile::tempdir().unwrap();
    let srv = Server::start(&config(dir.path()), mock());
    let (status, body) = srv.get("/v1/backend/capabilities");
    assert_eq!(status, 200);
    let caps: Value = serde_json::from_slice(&body).unwrap();
    assert!(caps.is_object());
}
