//! Server-side persistence: content-addressed objects, one JSON document per
//! job (replaced atomically), idempotency keys, and an event log that records
//! state changes only, never bodies.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum JobState {
    #[serde(rename = "queued")]
    Queued,
    #[serde(rename = "sanitizing-received")]
    SanitizingReceived,
    #[serde(rename = "fine_tuning")]
    FineTuning,
    #[serde(rename = "generating")]
    Generating,
    #[serde(rename = "training")]
    Training,
    #[serde(rename = "evaluating")]
    Evaluating,
    #[serde(rename = "done")]
    Done,
    #[serde(rename = "failed")]
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Queued => "queued",
            JobState::SanitizingReceived => "sanitizing-received",
            JobState::FineTuning => "fine_tuning",
            JobState::Generating => "generating",
            JobState::Training => "training",
            JobState::Evaluating => "evaluating",
            JobState::Done => "done",
            JobState::Failed => "failed",
        }
    }

    /// Forward along the pipeline order; `failed` from any non-terminal state.
    pub fn can_become(self, next: JobState) -> bool {
        match next {
            JobState::Failed => !self.is_terminal(),
            _ => !self.is_terminal() && next > self,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Dataset,
    PrivacyReport,
    UtilityReport,
    ModelWeights,
    TradeoffTable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub kind: ArtifactKind,
    pub addr: String,
    pub media_type: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobError {
    pub code: String,
    pub message: String,
    /// State the job was in when it failed.
    pub step: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub state: JobState,
    pub at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub state: JobState,
    pub created_ms: u64,
    pub updated_ms: u64,
    /// Content address of the submitted bundle document.
    pub bundle: String,
    pub history: Vec<Transition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<JobError>,
    pub artifacts: Vec<ArtifactRef>,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl Job {
    pub fn new(id: String, bundle: String) -> Self {
        let t = now_ms();
        Self {
            id,
            state: JobState::Queued,
            created_ms: t,
            updated_ms: t,
            bundle,
            history: vec![Transition {
                state: JobState::Queued,
                at_ms: t,
            }],
            error: None,
            artifacts: Vec::new(),
        }
    }

    pub fn advance(&mut self, next: JobState) -> Result<()> {
        if !self.state.can_become(next) {
            return Err(Error::Conflict(format!(
                "job {} cannot go from {} to {}",
                self.id,
                self.state.as_str(),
                next.as_str()
            )));
        }
        self.state = next;
        self.updated_ms = now_ms();
        self.history.push(Transition {
            state: next,
            at_ms: self.updated_ms,
        });
        Ok(())
    }

    pub fn fail(&mut self, code: &str, message: &str) -> Result<()> {
        let step = self.state.as_str().to_string();
        self.advance(JobState::Failed)?;
        self.error = Some(JobError {
            code: code.into(),
            message: message.into(),
            step,
        });
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct IdempotencyRecord {
    body_sha256: String,
    job_id: String,
}

pub enum Claim {
    New,
    Existing(String),
    Mismatch,
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

fn valid_addr(addr: &str) -> bool {
    addr.len() == 64 && addr.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-')
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["objects", "jobs", "idempotency"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(Error::io(&d))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        let tmp = path.with_extension(format!("tmp-{}", uuid::Uuid::new_v4().simple()));
        fs::write(&tmp, bytes).map_err(Error::io(&tmp))?;
        fs::rename(&tmp, path).map_err(Error::io(path))
    }

    fn object_path(&self, addr: &str) -> PathBuf {
        self.root.join("objects").join(&addr[..2]).join(&addr[2..])
    }

    /// Stores `bytes` under their SHA-256; returns the address. Objects are immutable.
    pub fn put_object(&self, bytes: &[u8]) -> Result<String> {
        let addr = sha256_hex(bytes);
        let path = self.object_path(&addr);
        if !path.exists() {
            let dir = path.parent().expect("object paths have a parent");
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
            self.write_atomic(&path, bytes)?;
        }
        Ok(addr)
    }

    pub fn get_object(&self, addr: &str) -> Result<Vec<u8>> {
        if !valid_addr(addr) {
            return Err(Error::NotFound(format!("artifact {addr}")));
        }
        let path = self.object_path(addr);
        match fs::read(&path) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::NotFound(format!("artifact {addr}"))),
            Err(e) => Err(Error::io(&path)(e)),
        }
    }

    fn job_path(&self, id: &str) -> PathBuf {
        self.root.join("jobs").join(format!("{id}.json"))
    }

    pub fn save_job(&self, job: &Job) -> Result<()> {
        self.write_atomic(&self.job_path(&job.id), &serde_json::to_vec_pretty(job)?)
    }

    pub fn load_job(&self, id: &str) -> Result<Job> {
        if !valid_id(id) {
            return Err(Error::NotFound(format!("job {id}")));
        }
        let path = self.job_path(id);
        match fs::read(&path) {
            Ok(b) => Ok(serde_json::from_slice(&b)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::NotFound(format!("job {id}"))),
            Err(e) => Err(Error::io(&path)(e)),
        }
    }

    /// All jobs, oldest first.
    pub fn list_jobs(&self) -> Result<Vec<Job>> {
        let dir = self.root.join("jobs");
        let mut jobs = Vec::new();
        for entry in fs::read_dir(&dir).map_err(Error::io(&dir))? {
            let path = entry.map_err(Error::io(&dir))?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let bytes = fs::read(&path).map_err(Error::io(&path))?;
                jobs.push(serde_json::from_slice::<Job>(&bytes)?);
            }
        }
        jobs.sort_by(|a, b| (a.created_ms, &a.id).cmp(&(b.created_ms, &b.id)));
        Ok(jobs)
    }

    fn idem_path(&self, key: &str) -> PathBuf {
        self.root.join("idempotency").join(format!("{}.json", sha256_hex(key.as_bytes())))
    }

    /// Looks up an idempotency key. Callers serialize claim-then-record.
    pub fn check_key(&self, key: &str, body_sha256: &str) -> Result<Claim> {
        let path = self.idem_path(key);
        match fs::read(&path) {
            Ok(b) => {
                let rec: IdempotencyRecord = serde_json::from_slice(&b)?;
                Ok(if rec.body_sha256 == body_sha256 {
                    Claim::Existing(rec.job_id)
                } else {
                    Claim::Mismatch
                })
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Claim::New),
            Err(e) => Err(Error::io(&path)(e)),
        }
    }

    pub fn record_key(&self, key: &str, body_sha256: &str, job_id: &str) -> Result<()> {
        let rec = IdempotencyRecord {
            body_sha256: body_sha256.into(),
            job_id: job_id.into(),
        };
        self.write_atomic(&self.idem_path(key), &serde_json::to_vec(&rec)?)
    }

    /// Appends one JSON line. Only ids, states and error codes are logged.
    pub fn log_event(&self, job_id: &str, state: JobState, code: Option<&str>) -> Result<()> {
        let path = self.root.join("events.log");
        let mut line = serde_json::to_vec(&serde_json::json!({
            "at_ms": now_ms(),
            "job": job_id,
            "state": state,
            "code": code,
        }))?;
        line.push(b'\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(Error::io(&path))?;
        f.write_all(&line).map_err(Error::io(&path))
    }
}
