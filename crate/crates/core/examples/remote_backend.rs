//! Drive the Azure Face adapter through the prediction service with an
//! offline transport, showing request construction, response parsing,
//! retries, rate limiting and the content-addressed cache.
//!
//! With real credentials, swap `Canned` for `ReqwestTransport` and build the
//! adapter with `AzureFace::from_env()`.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use frs_audit::backends::{
    AzureFace, BackendDescriptor, Cache, HttpRequest, HttpResponse, PredictionService, RemoteBackend, Task, Transport,
};

/// Answers every request with one detected male face, failing the first call.
struct Canned {
    calls: AtomicUsize,
}

impl Transport for Canned {
    fn send(&self, request: &HttpRequest) -> frs_audit::Result<HttpResponse> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        println!("  -> {} {} ({} bytes)", request.method, request.url, request.body.len());
        if n == 0 {
            return Ok(HttpResponse::json(503, r#"{"error":"busy"}"#));
        }
        Ok(HttpResponse::json(200, r#"[{"faceAttributes":{"gender":"male"}}]"#))
    }
}

fn main() -> frs_audit::Result<()> {
    let tiny = Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/tiny");
    let image = tiny.join("aus_m.png").display().to_string();

    let adapter = AzureFace { endpoint: "https://example.invalid".into(), key: "demo-key".into() };
    let transport = Arc::new(Canned { calls: AtomicUsize::new(0) });
    let descriptor = BackendDescriptor::remote("azure-demo", Task::Gender, 5.0, "face-v1.0")?;
    let backend = Arc::new(RemoteBackend::new(descriptor, Box::new(adapter), transport.clone())?);

    let cache_dir = tempfile_dir();
    let service = PredictionService::new(backend, Some(Cache::new(&cache_dir)));
    for round in 0..2 {
        let p = service.predict(&image)?;
        println!("round {round}: {} (cache hit: {}, {:.1} ms)", p.label, p.cache_hit, p.latency_ms);
    }
    println!("transport calls: {}", transport.calls.load(Ordering::SeqCst));
    for call in service.calls() {
        println!("log: {} attempts={} outcome={}", &call.content_hash[..12], call.attempts, call.outcome);
    }
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("frs-example-cache-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}
