//! The job server: `POST /v1/jobs`, `GET /v1/jobs/{id}`,
//! `GET /v1/artifacts/{addr}`, with the backend protocol mounted under
//! `/v1/backend/*`.

use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use privsynth_core::orchestrator::{Label, Provenance, SyntheticDataset};
use privsynth_core::sanitizer::TaskKind;
use privsynth_core::utility::evaluate_dataset;
use serde::Serialize;
use tokio::sync::{mpsc, Mutex, Semaphore};

use crate::backend::{Limiter, SharedBackend, Throttled};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::pipeline::{assemble_parallel, prepare_stage, ExperimentOptions};
use crate::store::{sha256_hex, ArtifactKind, ArtifactRef, Claim, Job, JobState, Store};
use crate::{backend_http, pngio, wire};

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

pub struct AppState {
    pub store: Store,
    pub backend: SharedBackend,
    pub options: ExperimentOptions,
    pub max_body_bytes: usize,
    queue: mpsc::UnboundedSender<String>,
    submit: Mutex<()>,
}

/// Builds the router and spawns the job workers on the current runtime.
/// Queued jobs found in the store are resumed; jobs that were mid-pipeline
/// when the previous process stopped are marked failed.
pub fn start(config: &Config, backend: SharedBackend) -> Result<Router> {
    let store = Store::open(&config.data_dir)?;
    let limiter = Arc::new(Limiter::new(config.max_inflight));
    let throttled: SharedBackend = Arc::new(Throttled::new(backend, limiter));
    let (tx, rx) = mpsc::unbounded_channel();
    let state = Arc::new(AppState {
        store,
        backend: throttled.clone(),
        options: ExperimentOptions::from_config(config),
        max_body_bytes: config.max_body_bytes,
        queue: tx,
        submit: Mutex::new(()),
    });
    recover(&state)?;
    tokio::spawn(worker(state.clone(), rx, config.max_jobs));
    Ok(Router::new()
        .route("/v1/jobs", post(submit))
        .route("/v1/jobs/{id}", get(job_status))
        .route("/v1/artifacts/{addr}", get(artifact))
        .with_state(state)
        .merge(backend_http::mounted(throttled, config.max_backend_body_bytes)))
}

fn recover(state: &AppState) -> Result<()> {
    for mut job in state.store.list_jobs()? {
        match job.state {
            JobState::Queued => {
                let _ = state.queue.send(job.id.clone());
            }
            s if !s.is_terminal() => {
                job.fail("interrupted", "the server stopped while this job was running")?;
                state.store.save_job(&job)?;
                state.store.log_event(&job.id, job.state, Some("interrupted"))?;
            }
            _ => {}
        }
    }
    Ok(())
}

async fn worker(state: Arc<AppState>, mut rx: mpsc::UnboundedReceiver<String>, max_jobs: usize) {
    let slots = Arc::new(Semaphore::new(max_jobs.max(1)));
    while let Some(id) = rx.recv().await {
        let permit = slots.clone().acquire_owned().await.expect("semaphore never closes");
        let state = state.clone();
        tokio::spawn(async move {
            let id2 = id.clone();
            let r = tokio::task::spawn_blocking(move || process(&state, &id2)).await;
            if let Ok(Err(e)) | Err(e) = r.map_err(|e| Error::Http(e.to_string())) {
                tracing::error!(job = %id, code = e.code(), "job bookkeeping failed");
            }
            drop(permit);
        });
    }
}

fn transition(store: &Store, job: &mut Job, next: JobState) -> Result<()> {
    job.advance(next)?;
    store.save_job(job)?;
    store.log_event(&job.id, next, None)?;
    tracing::info!(job = %job.id, state = next.as_str(), "job state");
    Ok(())
}

/// Runs one queued job to a terminal state.
pub fn process(state: &AppState, id: &str) -> Result<()> {
    let mut job = state.store.load_job(id)?;
    if job.state != JobState::Queued {
        return Ok(());
    }
    match run_pipeline(state, &mut job) {
        Ok(artifacts) => {
            job.artifacts = artifacts;
            transition(&state.store, &mut job, JobState::Done)
        }
        Err(e) => {
            job.fail(e.code(), &e.to_string())?;
            state.store.save_job(&job)?;
            state.store.log_event(&job.id, JobState::Failed, Some(e.code()))?;
            tracing::warn!(job = %job.id, code = e.code(), step = job.error.as_ref().map(|x| x.step.as_str()), "job failed");
            Ok(())
        }
    }
}

fn run_pipeline(state: &AppState, job: &mut Job) -> Result<Vec<ArtifactRef>> {
    let store = &state.store;
    let backend = state.backend.as_ref();
    let opts = &state.options;
    transition(store, job, JobState::SanitizingReceived)?;
    let bundle = wire::from_json(&store.get_object(&job.bundle)?)?;

    transition(store, job, JobState::FineTuning)?;
    let models = prepare_stage(&bundle, backend, opts)?;

    transition(store, job, JobState::Generating)?;
    let ds = assemble_parallel(&bundle.request, &models, backend, &opts.assembly, opts.workers)?;

    transition(store, job, JobState::Training)?;
    let report = evaluate_dataset(&ds, None, backend, &opts.utility_config(bundle.request.task_kind))?;

    transition(store, job, JobState::Evaluating)?;
    let json = "application/json".to_string();
    Ok(vec![
        ArtifactRef {
            kind: ArtifactKind::Dataset,
            addr: store.put_object(&dataset_document(store, &ds)?)?,
            media_type: json.clone(),
        },
        ArtifactRef {
            kind: ArtifactKind::UtilityReport,
            addr: store.put_object(&serde_json::to_vec_pretty(&report)?)?,
            media_type: json,
        },
        ArtifactRef {
            kind: ArtifactKind::ModelWeights,
            addr: store.put_object(report.model.as_str().as_bytes())?,
            media_type: "application/octet-stream".into(),
        },
    ])
}

#[derive(Serialize)]
struct DatasetDoc<'a> {
    task: TaskKind,
    classes: &'a [String],
    samples: Vec<SampleDoc<'a>>,
}

#[derive(Serialize)]
struct SampleDoc<'a> {
    name: &'a str,
    image: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    mask: Option<String>,
    label: &'a Label,
    #[serde(skip_serializing_if = "Option::is_none")]
    provenance: Option<&'a Provenance>,
}

/// Dataset manifest whose images and masks are content addresses of PNG objects.
fn dataset_document(store: &Store, ds: &SyntheticDataset) -> Result<Vec<u8>> {
    let samples = ds
        .samples
        .iter()
        .map(|s| {
            Ok(SampleDoc {
                name: &s.name,
                image: store.put_object(&pngio::encode(&s.image))?,
                mask: s.target_mask.as_ref().map(|m| store.put_object(&pngio::encode_mask(m))).transpose()?,
                label: &s.label,
                provenance: s.provenance.as_ref(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(serde_json::to_vec_pretty(&DatasetDoc {
        task: ds.task,
        classes: &ds.classes,
        samples,
    })?)
}

async fn submit(State(state): State<Arc<AppState>>, headers: HeaderMap, req: Request) -> Response {
    let body = match axum::body::to_bytes(req.into_body(), state.max_body_bytes).await {
        Ok(b) => b,
        Err(_) => {
            return Error::TooLarge(format!("bundle exceeds {} bytes", state.max_body_bytes)).into_response()
        }
    };
    let key = headers
        .get(IDEMPOTENCY_HEADER)
        .map(|v| v.to_str().map(str::to_string))
        .transpose();
    let key = match key {
        Ok(k) => k,
        Err(_) => return Error::schema("Idempotency-Key", "not visible ASCII").into_response(),
    };
    let st = state.clone();
    let result = tokio::task::spawn_blocking(move || -> Result<(StatusCode, Job)> {
        wire::from_json(&body)?;
        let digest = sha256_hex(&body);
        let guard = st.submit.blocking_lock();
        if let Some(k) = &key {
            match st.store.check_key(k, &digest)? {
                Claim::Existing(id) => return Ok((StatusCode::OK, st.store.load_job(&id)?)),
                Claim::Mismatch => {
                    return Err(Error::Conflict("idempotency key reused with a different body".into()))
                }
                Claim::New => {}
            }
        }
        let addr = st.store.put_object(&body)?;
        let job = Job::new(uuid::Uuid::new_v4().to_string(), addr);
        st.store.save_job(&job)?;
        if let Some(k) = &key {
            st.store.record_key(k, &digest, &job.id)?;
        }
        drop(guard);
        st.store.log_event(&job.id, JobState::Queued, None)?;
        let _ = st.queue.send(job.id.clone());
        Ok((StatusCode::CREATED, job))
    })
    .await
    .unwrap_or_else(|e| Err(Error::Http(e.to_string())));
    match result {
        Ok((code, job)) => (code, Json(job)).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn job_status(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    match state.store.load_job(&id) {
        Ok(job) => Json(job).into_response(),
        Err(e) => e.into_response(),
    }
}

fn sniff(bytes: &[u8]) -> &'static str {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        "image/png"
    } else if bytes.first().is_some_and(|b| *b == b'{' || *b == b'[') {
        "application/json"
    } else {
        "application/octet-stream"
    }
}

async fn artifact(State(state): State<Arc<AppState>>, Path(addr): Path<String>) -> Response {
    match state.store.get_object(&addr) {
        Ok(bytes) => ([(header::CONTENT_TYPE, sniff(&bytes))], Body::from(bytes)).into_response(),
        Err(e) => e.into_response(),
    }
}

/// Binds `config.listen` and serves until interrupted.
pub async fn serve(config: Config, backend: SharedBackend) -> Result<()> {
    let app = start(&config, backend)?;
    let listener = tokio::net::TcpListener::bind(&config.listen)
        .await
        .map_err(|e| Error::Config(format!("cannot bind {}: {e}", config.listen)))?;
    tracing::info!(addr = %config.listen, "listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::Http(e.to_string()))
}
