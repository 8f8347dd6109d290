//! Thin HTTP adapters for commercial face-attribute APIs.
//!
//! Each adapter turns image bytes into one [`HttpRequest`] and one
//! [`HttpResponse`] back into a gender [`Label`]. The network itself sits
//! behind [`Transport`], so adapters are tested against recorded fixtures.
//!
//! Credentials come from the environment:
//!
//! | adapter        | variables |
//! |----------------|-----------|
//! | [`Rekognition`]  | `AWS_ACCESS_KEY_ID`, `AWS_SECRET_ACCESS_KEY`, `AWS_REGION`, optional `AWS_SESSION_TOKEN` |
//! | [`AzureFace`]    | `AZURE_FACE_ENDPOINT`, `AZURE_FACE_KEY` |
//! | [`FacePlusPlus`] | `FACEPP_API_KEY`, `FACEPP_API_SECRET`, optional `FACEPP_ENDPOINT` |

use std::sync::Arc;

use base64::Engine;
use hmac::{Hmac, Mac};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{Backend, BackendDescriptor, Label, Task};
use crate::corpus::Gender;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct HttpRequest {
    pub method: String,
    pub url: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

impl HttpResponse {
    pub fn json(status: u16, body: &str) -> Self {
        Self { status, body: body.as_bytes().to_vec() }
    }
}

pub trait Transport: Send + Sync {
    fn send(&self, request: &HttpRequest) -> Result<HttpResponse>;
}

/// Blocking `reqwest` client.
pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new(timeout: std::time::Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(Self { client })
    }
}

impl Transport for ReqwestTransport {
    fn send(&self, request: &HttpRequest) -> Result<HttpResponse> {
        let method = reqwest::Method::from_bytes(request.method.as_bytes()).map_err(|e| Error::Config(e.to_string()))?;
        let mut builder = self.client.request(method, &request.url).body(request.body.clone());
        for (k, v) in &request.headers {
            builder = builder.header(k, v);
        }
        let resp = builder.send().map_err(|e| Error::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp.bytes().map_err(|e| Error::Transport(e.to_string()))?.to_vec();
        Ok(HttpResponse { status, body })
    }
}

pub trait RemoteAdapter: Send + Sync {
    fn build_request(&self, image: &[u8]) -> Result<HttpRequest>;
    fn parse_response(&self, response: &HttpResponse) -> Result<Label>;
}

fn env(name: &str) -> Result<String> {
    std::env::var(name).map_err(|_| Error::Auth(format!("environment variable {name} is not set")))
}

/// Maps HTTP status classes onto the backend error contract. 401/403 fail
/// fast; 408, 429 and 5xx are retryable transport errors.
fn check_status(service: &str, resp: &HttpResponse) -> Result<Value> {
    let text = String::from_utf8_lossy(&resp.body);
    match resp.status {
        200..=299 => serde_json::from_slice(&resp.body)
            .map_err(|e| Error::Transport(format!("{service}: malformed response body: {e}"))),
        401 | 403 => Err(Error::Auth(format!("{service}: HTTP {}: {text}", resp.status))),
        s => Err(Error::Transport(format!("{service}: HTTP {s}: {text}"))),
    }
}

fn gender_label(service: &str, value: Option<&str>, confidence: Option<f64>) -> Result<Label> {
    let raw = value.ok_or_else(|| Error::Transport(format!("{service}: response has no gender field")))?;
    let g: Gender = raw.parse().map_err(|_| Error::Transport(format!("{service}: unknown gender value `{raw}`")))?;
    Ok(Label::new(g.name(), confidence))
}

type HmacSha256 = Hmac<Sha256>;

fn hmac(key: &[u8], data: &[u8]) -> Vec<u8> {
    let mut mac = HmacSha256::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(data);
    mac.finalize().into_bytes().to_vec()
}

/// AWS Signature Version 4 key for `(date, region, service)`.
pub(crate) fn sigv4_signing_key(secret: &str, date: &str, region: &str, service: &str) -> Vec<u8> {
    let k_date = hmac(format!("AWS4{secret}").as_bytes(), date.as_bytes());
    let k_region = hmac(&k_date, region.as_bytes());
    let k_service = hmac(&k_region, service.as_bytes());
    hmac(&k_service, b"aws4_request")
}

pub(crate) struct SigV4<'a> {
    pub access_key: &'a str,
    pub secret_key: &'a str,
    pub region: &'a str,
    pub service: &'a str,
    /// `YYYYMMDDTHHMMSSZ`
    pub amz_date: &'a str,
}

impl SigV4<'_> {
    /// `Authorization` header value. `headers` must include `host` and
    /// `x-amz-date`; names are lower-cased and sorted here.
    pub fn authorization(&self, method: &str, path: &str, query: &str, headers: &[(String, String)], payload: &[u8]) -> String {
        let mut hs: Vec<(String, String)> =
            headers.iter().map(|(k, v)| (k.to_ascii_lowercase(), v.trim().to_owned())).collect();
        hs.sort();
        let canonical_headers: String = hs.iter().map(|(k, v)| format!("{k}:{v}\n")).collect();
        let signed: Vec<&str> = hs.iter().map(|(k, _)| k.as_str()).collect();
        let signed = signed.join(";");
        let canonical = format!(
            "{method}\n{path}\n{query}\n{canonical_headers}\n{signed}\n{}",
            hex::encode(Sha256::digest(payload))
        );
        let date = &self.amz_date[..8];
        let scope = format!("{date}/{}/{}/aws4_request", self.region, self.service);
        let to_sign =
            format!("AWS4-HMAC-SHA256\n{}\n{scope}\n{}", self.amz_date, hex::encode(Sha256::digest(canonical.as_bytes())));
        let key = sigv4_signing_key(self.secret_key, date, self.region, self.service);
        let signature = hex::encode(hmac(&key, to_sign.as_bytes()));
        format!("AWS4-HMAC-SHA256 Credential={}/{scope}, SignedHeaders={signed}, Signature={signature}", self.access_key)
    }
}

/// AWS Rekognition `DetectFaces` with `Attributes: ["ALL"]`.
pub struct Rekognition {
    pub access_key: String,
    pub secret_key: String,
    pub session_token: Option<String>,
    pub region: String,
    /// Fixed signing time for reproducible requests; the current time when unset.
    pub fixed_time: Option<chrono::DateTime<chrono::Utc>>,
}

impl Rekognition {
    pub fn from_env() -> Result<Self> {
        Ok(Self {
            access_key: env("AWS_ACCESS_KEY_ID")?,
            secret_key: env("AWS_SECRET_ACCESS_KEY")?,
            session_token: std::env::var("AWS_SESSION_TOKEN").ok(),
            region: env("AWS_REGION")?,
            fixed_time: None,
        })
    }
}

impl RemoteAdapter for Rekognition {
    fn build_request(&self, image: &[u8]) -> Result<HttpRequest> {
        let host = format!("rekognition.{}.amazonaws.com", self.region);
        let body = serde_json::to_vec(&serde_json::json!({
            "Image": { "Bytes": base64::engine::general_purpose::STANDARD.encode(image) },
            "Attributes": ["ALL"],
        }))?;
        let now = self.fixed_time.unwrap_or_else(chrono::Utc::now);
        let amz_date = now.format("%Y%m%dT%H%M%SZ").to_string();
        let mut headers = vec![
            ("content-type".to_owned(), "application/x-amz-json-1.1".to_owned()),
            ("host".to_owned(), host.clone()),
            ("x-amz-date".to_owned(), amz_date.clone()),
            ("x-amz-target".to_owned(), "RekognitionService.DetectFaces".to_owned()),
        ];
        if let Some(token) = &self.session_token {
            headers.push(("x-amz-security-token".to_owned(), token.clone()));
        }
        let signer = SigV4 {
            access_key: &self.access_key,
            secret_key: &self.secret_key,
            region: &self.region,
            service: "rekognition",
            amz_date: &amz_date,
        };
        let auth = signer.authorization("POST", "/", "", &headers, &body);
        headers.push(("authorization".to_owned(), auth));
        Ok(HttpRequest { method: "POST".into(), url: format!("https://{host}/"), headers, body })
    }

    fn parse_response(&self, response: &HttpResponse) -> Result<Label> {
        let v = check_status("rekognition", response)?;
        let face = v.pointer("/FaceDetails/0").ok_or_else(|| Error::FaceNotDetected("rekognition".into()))?;
        let conf = face.pointer("/Gender/Confidence").and_then(Value::as_f64).map(|c| c / 100.0);
        gender_label("rekognition", face.pointer("/Gender/Value").and_then(Value::as_str), conf)
    }
}

/// Azure Face `detect` with `returnFaceAttributes=gender`.
pub struct AzureFace {
    pub endpoint: String,
    pub key: String,
}

impl AzureFace {
    pub fn from_env() -> Result<Self> {
        Ok(Self { endpoint: env("AZURE_FACE_ENDPOINT")?, key: env("AZURE_FACE_KEY")? })
    }
}

impl RemoteAdapter for AzureFace {
    fn build_request(&self, image: &[u8]) -> Result<HttpRequest> {
        Ok(HttpRequest {
            method: "POST".into(),
            url: format!("{}/face/v1.0/detect?returnFaceAttributes=gender", self.endpoint.trim_end_matches('/')),
            headers: vec![
                ("Content-Type".into(), "application/octet-stream".into()),
                ("Ocp-Apim-Subscription-Key".into(), self.key.clone()),
            ],
            body: image.to_vec(),
        })
    }

    fn parse_response(&self, response: &HttpResponse) -> Result<Label> {
        let v = check_status("azure-face", response)?;
        let face = v.pointer("/0").ok_or_else(|| Error::FaceNotDetected("azure-face".into()))?;
        gender_label("azure-face", face.pointer("/faceAttributes/gender").and_then(Value::as_str), None)
    }
}

/// Face++ `detect` with `return_attributes=gender`.
pub struct FacePlusPlus {
    pub endpoint: String,
    pub api_key: String,
    pub api_secret: String,
}

impl FacePlusPlus {
    pub const DEFAULT_ENDPOINT: &'static str = "https://api-us.faceplusplus.com/facepp/v3/detect";

    pub fn from_env() -> Result<Self> {
        Ok(Self {
            endpoint: std::env::var("FACEPP_ENDPOINT").unwrap_or_else(|_| Self::DEFAULT_ENDPOINT.into()),
            api_key: env("FACEPP_API_KEY")?,
            api_secret: env("FACEPP_API_SECRET")?,
        })
    }
}

impl RemoteAdapter for FacePlusPlus {
    fn build_request(&self, image: &[u8]) -> Result<HttpRequest> {
        let body = form_urlencoded::Serializer::new(String::new())
            .append_pair("api_key", &self.api_key)
            .append_pair("api_secret", &self.api_secret)
            .append_pair("image_base64", &base64::engine::general_purpose::STANDARD.encode(image))
            .append_pair("return_attributes", "gender")
            .finish();
        Ok(HttpRequest {
            method: "POST".into(),
            url: self.endpoint.clone(),
            headers: vec![("Content-Type".into(), "application/x-www-form-urlencoded".into())],
            body: body.into_bytes(),
        })
    }

    fn parse_response(&self, response: &HttpResponse) -> Result<Label> {
        // Face++ signals throttling with 403 CONCURRENCY_LIMIT_EXCEEDED.
        if response.status == 403 && String::from_utf8_lossy(&response.body).contains("CONCURRENCY_LIMIT_EXCEEDED") {
            return Err(Error::Transport("face++: concurrency limit exceeded".into()));
        }
        let v = check_status("face++", response)?;
        let face = v.pointer("/faces/0").ok_or_else(|| Error::FaceNotDetected("face++".into()))?;
        gender_label("face++", face.pointer("/attributes/gender/value").and_then(Value::as_str), None)
    }
}

/// A remote adapter bound to a transport.
pub struct RemoteBackend {
    descriptor: BackendDescriptor,
    adapter: Box<dyn RemoteAdapter>,
    transport: Arc<dyn Transport>,
}

impl RemoteBackend {
    pub fn new(descriptor: BackendDescriptor, adapter: Box<dyn RemoteAdapter>, transport: Arc<dyn Transport>) -> Result<Self> {
        if descriptor.task != Task::Gender {
            return Err(Error::Config(format!("remote backend {} supports the gender task only", descriptor.name)));
        }
        if descriptor.rate_limit.is_none() {
            return Err(Error::Config(format!("remote backend {} needs a rate limit", descriptor.name)));
        }
        Ok(Self { descriptor, adapter, transport })
    }
}

impl Backend for RemoteBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn classify(&self, image: &[u8]) -> Result<Label> {
        let request = self.adapter.build_request(image)?;
        let response = self.transport.send(&request)?;
        self.adapter.parse_response(&response)
    }
}
