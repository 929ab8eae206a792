//! Settings shared by the CLI and the server: one TOML file plus
//! `PRIVSYNTH_*` environment overrides (environment wins).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub listen: String,
    pub data_dir: PathBuf,
    /// `mock` or the base URL of a backend server.
    pub backend: String,
    pub backend_timeout_secs: u64,
    /// Largest accepted bundle body.
    pub max_body_bytes: usize,
    /// Largest body accepted by the mounted backend endpoints (training sets travel inline).
    pub max_backend_body_bytes: usize,
    /// Global cap on concurrent backend calls.
    pub max_inflight: usize,
    /// Jobs processed at once by the server.
    pub max_jobs: usize,
    pub seed: u64,
    pub count_per_class: usize,
    pub width: u32,
    pub height: u32,
    pub train_fraction: f64,
    pub synthetic_per_feature: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("privsynth-data"),
            backend: "mock".into(),
            backend_timeout_secs: 600,
            max_body_bytes: 64 << 20,
            max_backend_body_bytes: 1 << 30,
            max_inflight: 8,
            max_jobs: 2,
            seed: 0,
            count_per_class: 400,
            width: 128,
            height: 128,
            train_fraction: 0.8,
            synthetic_per_feature: 8,
        }
    }
}

fn parse_env<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl Config {
    /// Defaults, then `path` if given, then the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut c = match path {
            Some(p) => Self::from_toml(&std::fs::read_to_string(p).map_err(Error::io(p))?)?,
            None => Self::default(),
        };
        c.apply_env(std::env::vars())?;
        c.check()?;
        Ok(c)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        for (k, v) in vars {
            let Some(name) = k.strip_prefix("PRIVSYNTH_") else {
                continue;
            };
            match name {
                "LISTEN" => self.listen = v,
                "DATA_DIR" => self.data_dir = PathBuf::from(v),
                "BACKEND" => self.backend = v,
                "BACKEND_TIMEOUT_SECS" => self.backend_timeout_secs = parse_env(&k, &v)?,
                "MAX_BODY_BYTES" => self.max_body_bytes = parse_env(&k, &v)?,
                "MAX_BACKEND_BODY_BYTES" => self.max_backend_body_bytes = parse_env(&k, &v)?,
                "MAX_INFLIGHT" => self.max_inflight = parse_env(&k, &v)?,
                "MAX_JOBS" => self.max_jobs = parse_env(&k, &v)?,
                "SEED" => self.seed = parse_env(&k, &v)?,
                "COUNT_PER_CLASS" => self.count_per_class = parse_env(&k, &v)?,
                "WIDTH" => self.width = parse_env(&k, &v)?,
                "HEIGHT" => self.height = parse_env(&k, &v)?,
                "TRAIN_FRACTION" => self.train_fraction = parse_env(&k, &v)?,
                "SYNTHETIC_PER_FEATURE" => self.synthetic_per_feature = parse_env(&k, &v)?,
                "LOG" => {}
                _ => return Err(Error::Config(format!("unknown setting {k}"))),
            }
        }
        Ok(())
    }

    pub fn check(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must be in (0, 1)".into()));
        }
        if self.width == 0 || self.height == 0 || self.count_per_class == 0 {
            return Err(Error::Config("width, height and count_per_class must be positive".into()));
        }
        if self.max_inflight == 0 || self.max_jobs == 0 {
            return Err(Error::Config("max_inflight and max_jobs must be positive".into()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> std::time::Duration {
        std::time::Duration::from_secs(self.backend_timeout_secs)
    }
}
