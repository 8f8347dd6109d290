//! Prediction backends: a uniform interface over local checkpoints, stubs and
//! remote face-attribute APIs, plus the response cache and rate limiter.

mod cache;
mod ratelimit;
mod remote;
mod service;

pub use cache::{Cache, CachedResult};
pub use ratelimit::{Clock, FakeClock, RateLimiter, SystemClock};
pub use remote::{
    AzureFace, FacePlusPlus, HttpRequest, HttpResponse, RemoteAdapter, RemoteBackend, Rekognition, ReqwestTransport,
    Transport,
};
pub use service::{CallLog, PredictionService, ServiceOptions};

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{FaceRecord, Manifest};
use crate::error::{Error, Result};
use crate::imagebuf::ImageBuffer;
use crate::model::Checkpoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[serde(alias = "Gender")]
    Gender,
    #[serde(alias = "Country")]
    Country,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gender" => Ok(Task::Gender),
            "country" => Ok(Task::Country),
            other => Err(Error::Config(format!("unknown task `{other}` (expected gender or country)"))),
        }
    }
}

impl Task {
    /// Ground-truth label of a record for this task.
    pub fn truth(self, record: &FaceRecord) -> String {
        match self {
            Task::Gender => record.gender.name().to_owned(),
            Task::Country => record.country.code().to_owned(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Gender => "gender",
            Task::Country => "country",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendKind {
    Remote,
    Local,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub kind: BackendKind,
    pub task: Task,
    /// Requests per second; required (and positive) for remote backends.
    pub rate_limit: Option<f64>,
    pub version: String,
}

impl BackendDescriptor {
    pub fn local(name: impl Into<String>, task: Task, version: impl Into<String>) -> Self {
        Self { name: name.into(), kind: BackendKind::Local, task, rate_limit: None, version: version.into() }
    }

    pub fn remote(name: impl Into<String>, task: Task, rate_limit: f64, version: impl Into<String>) -> Result<Self> {
        if !(rate_limit > 0.0 && rate_limit.is_finite()) {
            return Err(Error::Config(format!("remote rate limit must be positive, got {rate_limit}")));
        }
        Ok(Self { name: name.into(), kind: BackendKind::Remote, task, rate_limit: Some(rate_limit), version: version.into() })
    }
}

/// A backend's top label for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub label: String,
    /// In `[0, 1]` when the backend reports one.
    pub confidence: Option<f64>,
}

impl Label {
    pub fn new(label: impl Into<String>, confidence: Option<f64>) -> Self {
        Self { label: label.into(), confidence: confidence.map(|c| c.clamp(0.0, 1.0)) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    pub confidence: Option<f64>,
    pub latency_ms: f64,
    pub source: BackendDescriptor,
    pub cache_hit: bool,
}

/// Anything that labels encoded image bytes.
///
/// Implementations report a missing face as [`Error::FaceNotDetected`],
/// network trouble as [`Error::Transport`] and bad credentials as
/// [`Error::Auth`].
pub trait Backend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;
    fn classify(&self, image: &[u8]) -> Result<Label>;
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Wraps a [`Checkpoint`]; the label is the arg-max class and the confidence
/// its softmax score.
pub struct LocalBackend {
    descriptor: BackendDescriptor,
    network: crate::model::Network,
}

impl LocalBackend {
    pub fn new(name: impl Into<String>, task: Task, checkpoint: &Checkpoint) -> Result<Self> {
        let version = content_hash(&checkpoint.to_bytes()?)[..16].to_owned();
        Ok(Self { descriptor: BackendDescriptor::local(name, task, version), network: checkpoint.network()? })
    }

    pub fn predict_image(&self, img: &ImageBuffer) -> Result<Label> {
        let scores = self.network.forward(img)?;
        let (best, score) = scores
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc });
        Ok(Label::new(self.network.config().class_names[best].clone(), Some(score)))
    }
}

impl Backend for LocalBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn classify(&self, image: &[u8]) -> Result<Label> {
        let img = ImageBuffer::decode(image).map_err(|e| Error::Transport(format!("undecodable image: {e}")))?;
        self.predict_image(&img)
    }
}

/// Answers with the manifest's ground truth, looked up by image content
/// hash; unknown images are reported as face-not-detected.
pub struct OracleStub {
    descriptor: BackendDescriptor,
    truth: HashMap<String, String>,
}

impl OracleStub {
    pub fn new(manifest: &Manifest, task: Task) -> Result<Self> {
        let mut truth = HashMap::new();
        for r in &manifest.records {
            let bytes = std::fs::read(&r.image_ref)
                .map_err(|e| Error::UnreadableImage { path: r.image_ref.clone(), reason: e.to_string() })?;
            truth.insert(content_hash(&bytes), task.truth(r));
        }
        Ok(Self { descriptor: BackendDescriptor::local("stub", task, "1"), truth })
    }
}

impl Backend for OracleStub {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn classify(&self, image: &[u8]) -> Result<Label> {
        self.truth
            .get(&content_hash(image))
            .map(|l| Label::new(l.clone(), Some(1.0)))
            .ok_or_else(|| Error::FaceNotDetected(self.descriptor.name.clone()))
    }
}

/// Always answers the same label.
pub struct ConstantStub {
    descriptor: BackendDescriptor,
    label: String,
}

impl ConstantStub {
    pub fn new(name: impl Into<String>, task: Task, label: impl Into<String>) -> Self {
        Self { descriptor: BackendDescriptor::local(name, task, "1"), label: label.into() }
    }
}

impl Backend for ConstantStub {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn classify(&self, _image: &[u8]) -> Result<Label> {
        Ok(Label::new(self.label.clone(), None))
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn descriptor(&self) -> &BackendDescriptor {
        (**self).descriptor()
    }

    fn classify(&self, image: &[u8]) -> Result<Label> {
        (**self).classify(image)
    }
}
