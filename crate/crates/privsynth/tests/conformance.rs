mod common;

use std::sync::Arc;
use std::time::Duration;

use privsynth::backend::ModelBackend;
use privsynth::{backend_http, conformance};
use privsynth_core::mock::MockBackend;

#[test]
fn mock_passes_every_check() {
    let backend: Arc<dyn ModelBackend> = Arc::new(MockBackend::default());
    let (addr, _rt) = common::serve(backend_http::mounted(backend, 1 << 26));
    let checks = conformance::run(&format!("http://{addr}"), Duration::from_secs(30));
    assert!(checks.len() >= 12);
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn unreachable_server_fails_loudly() {
    let checks = conformance::run("http://127.0.0.1:9", Duration::from_secs(2));
    assert!(checks.iter().all(|c| !c.passed));
}
