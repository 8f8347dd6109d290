use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::Serialize;

use super::{content_hash, Backend, BackendKind, Cache, CachedResult, Clock, Label, Prediction, RateLimiter, SystemClock};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct ServiceOptions {
    /// Extra attempts after a transport error.
    pub retries: u32,
    /// Wait before retry `i` is `backoff * 2^i`.
    pub backoff: Duration,
    /// Concurrent requests in [`PredictionService::predict_batch`].
    pub workers: usize,
    /// JSON-lines call log.
    pub log_path: Option<PathBuf>,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self { retries: 3, backoff: Duration::from_millis(250), workers: 4, log_path: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CallLog {
    pub image_ref: String,
    pub content_hash: String,
    pub backend: String,
    pub version: String,
    pub cache_hit: bool,
    /// Backend invocations made (0 on a cache hit).
    pub attempts: u32,
    /// `ok` or the error kind.
    pub outcome: String,
    pub label: Option<String>,
}

/// Cache lookup, rate limiting and retries around one [`Backend`].
///
/// Safe to share between threads: the rate limiter is shared, and concurrent
/// requests for the same image content are serialized so byte-identical
/// files cost one backend call.
pub struct PredictionService {
    backend: Arc<dyn Backend>,
    cache: Option<Cache>,
    limiter: Option<RateLimiter>,
    clock: Arc<dyn Clock>,
    options: ServiceOptions,
    log: Mutex<Vec<CallLog>>,
    inflight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl PredictionService {
    pub fn new(backend: Arc<dyn Backend>, cache: Option<Cache>) -> Self {
        Self::with_clock(backend, cache, Arc::new(SystemClock::default()), ServiceOptions::default())
    }

    pub fn with_clock(backend: Arc<dyn Backend>, cache: Option<Cache>, clock: Arc<dyn Clock>, options: ServiceOptions) -> Self {
        let d = backend.descriptor();
        let limiter = match (d.kind, d.rate_limit) {
            (BackendKind::Remote, Some(r)) => Some(RateLimiter::new(r)),
            _ => None,
        };
        Self { backend, cache, limiter, clock, options, log: Mutex::default(), inflight: Mutex::default() }
    }

    pub fn backend(&self) -> &dyn Backend {
        self.backend.as_ref()
    }

    pub fn calls(&self) -> Vec<CallLog> {
        self.log.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    fn record(&self, entry: CallLog) -> Result<()> {
        if let Some(path) = &self.options.log_path {
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(f, "{}", serde_json::to_string(&entry)?)?;
        }
        self.log.lock().unwrap_or_else(|p| p.into_inner()).push(entry);
        Ok(())
    }

    fn prediction(&self, label: Label, latency: Duration, cache_hit: bool) -> Prediction {
        Prediction {
            label: label.label,
            confidence: label.confidence,
            latency_ms: latency.as_secs_f64() * 1e3,
            source: self.backend.descriptor().clone(),
            cache_hit,
        }
    }

    /// Reads `image_ref` and predicts. An unreadable file is a transport
    /// failure and leaves the cache untouched.
    pub fn predict(&self, image_ref: &str) -> Result<Prediction> {
        let bytes =
            std::fs::read(image_ref).map_err(|e| Error::Transport(format!("cannot read image `{image_ref}`: {e}")))?;
        self.predict_bytes(image_ref, &bytes)
    }

    pub fn predict_bytes(&self, image_ref: &str, bytes: &[u8]) -> Result<Prediction> {
        let hash = content_hash(bytes);
        let slot = {
            let mut map = self.inflight.lock().unwrap_or_else(|p| p.into_inner());
            map.entry(hash.clone()).or_default().clone()
        };
        let _guard = slot.lock().unwrap_or_else(|p| p.into_inner());
        let d = self.backend.descriptor();
        let mut entry = CallLog {
            image_ref: image_ref.to_owned(),
            content_hash: hash.clone(),
            backend: d.name.clone(),
            version: d.version.clone(),
            cache_hit: false,
            attempts: 0,
            outcome: "ok".into(),
            label: None,
        };

        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.lookup(&hash, d, d.task)? {
                entry.cache_hit = true;
                let result = match hit {
                    CachedResult::Label { label, confidence } => {
                        entry.label = Some(label.clone());
                        Ok(self.prediction(Label { label, confidence }, Duration::ZERO, true))
                    }
                    CachedResult::FaceNotDetected => {
                        entry.outcome = "FaceNotDetected".into();
                        Err(Error::FaceNotDetected(d.name.clone()))
                    }
                };
                self.record(entry)?;
                return result;
            }
        }

        let mut attempt = 0;
        let (result, latency) = loop {
            if let Some(limiter) = &self.limiter {
                limiter.acquire(self.clock.as_ref());
            }
            let t0 = self.clock.now();
            let r = self.backend.classify(bytes);
            let latency = self.clock.now().saturating_sub(t0);
            attempt += 1;
            match r {
                Err(Error::Transport(_)) if attempt <= self.options.retries => {
                    self.clock.sleep(self.options.backoff * 2u32.pow(attempt - 1));
                }
                other => break (other, latency),
            }
        };
        entry.attempts = attempt;

        let cached = match &result {
            Ok(label) => Some(CachedResult::from(label)),
            Err(Error::FaceNotDetected(_)) => Some(CachedResult::FaceNotDetected),
            Err(_) => None,
        };
        if let (Some(cache), Some(c)) = (&self.cache, cached) {
            cache.store(&hash, d, d.task, &c)?;
        }
        match &result {
            Ok(l) => entry.label = Some(l.label.clone()),
            Err(e) => entry.outcome = e.kind().into(),
        }
        self.record(entry)?;
        result.map(|l| self.prediction(l, latency, false))
    }

    /// Predicts every reference with up to `workers` concurrent requests.
    /// Output order matches input order; failures are per item.
    pub fn predict_batch(&self, refs: &[String]) -> Vec<Result<Prediction>> {
        if refs.is_empty() {
            return Vec::new();
        }
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<Prediction>>>> = refs.iter().map(|_| Mutex::new(None)).collect();
        let workers = self.options.workers.clamp(1, refs.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= refs.len() {
                        break;
                    }
                    let r = self.predict(&refs[i]);
                    *slots[i].lock().unwrap_or_else(|p| p.into_inner()) = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().unwrap_or_else(|p| p.into_inner()).expect("every slot filled"))
            .collect()
    }
}
