//! Blocking HTTP clients for the embedding provider and the image generator.

use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use biaslens_core::embedding::{EmbeddingError, ProviderOutput};
use biaslens_core::generation::{GenerationError, ImageGenerator, RemoteStatus};
use biaslens_core::EmbeddingProvider;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use ureq::http::{StatusCode, Uri};

/// Connect timeout for every outbound call.
pub const CONNECT_TIMEOUT: Duration = Duration::from_millis(500);
/// Budget for a job submission, so that submitting never stalls a request.
pub const SUBMIT_TIMEOUT: Duration = Duration::from_millis(900);
/// Budget for embedding and status calls.
pub const REQUEST_TIMEOUT: Duration = Duration::from_secs(60);
const MAX_BODY: u64 = 512 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedTextRequest {
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedImageRequest {
    pub images_b64: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub dim: usize,
    pub embeddings: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub job_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResponse {
    /// One of `pending`, `running`, `done`, `failed`.
    pub status: String,
    #[serde(default)]
    pub completed: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images_b64: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl JobResponse {
    pub fn from_remote(status: &RemoteStatus) -> Self {
        let (name, completed, images, error) = match status {
            RemoteStatus::Pending => ("pending", 0, None, None),
            RemoteStatus::Running { completed } => ("running", *completed, None, None),
            RemoteStatus::Done { images } => (
                "done",
                images.len(),
                Some(images.iter().map(|b| B64.encode(b)).collect()),
                None,
            ),
            RemoteStatus::Failed { reason } => ("failed", 0, None, Some(reason.clone())),
        };
        Self {
            status: name.to_owned(),
            completed,
            images_b64: images,
            error,
        }
    }

    pub fn into_remote(self) -> Result<RemoteStatus, GenerationError> {
        match self.status.as_str() {
            "pending" | "queued" => Ok(RemoteStatus::Pending),
            "running" => Ok(RemoteStatus::Running {
                completed: self.completed,
            }),
            "done" => {
                let encoded = self
                    .images_b64
                    .ok_or_else(|| GenerationError::Protocol("done without images_b64".into()))?;
                let images = encoded
                    .iter()
                    .map(|s| B64.decode(s))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| GenerationError::Protocol(format!("bad base64 image: {e}")))?;
                Ok(RemoteStatus::Done { images })
            }
            "failed" => Ok(RemoteStatus::Failed {
                reason: self.error.unwrap_or_else(|| "generator reported failure".into()),
            }),
            other => Err(GenerationError::Protocol(format!("unknown job status `{other}`"))),
        }
    }
}

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::new_with_config(
        ureq::Agent::config_builder()
            .timeout_connect(Some(CONNECT_TIMEOUT))
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build(),
    )
}

fn join(base: &str, path: &str) -> String {
    format!("{}{path}", base.trim_end_matches('/'))
}

/// A failed call: either no usable response or a non-200 status.
#[derive(Debug)]
enum CallError {
    Transport(String),
    Status(StatusCode),
    Body(String),
}

impl std::fmt::Display for CallError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CallError::Transport(e) => write!(f, "{e}"),
            CallError::Status(s) => write!(f, "HTTP {s}"),
            CallError::Body(e) => write!(f, "malformed response: {e}"),
        }
    }
}

fn read<T: DeserializeOwned>(resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Result<T, CallError> {
    let mut resp = resp.map_err(|e| CallError::Transport(e.to_string()))?;
    if resp.status() != StatusCode::OK {
        return Err(CallError::Status(resp.status()));
    }
    resp.body_mut()
        .with_config()
        .limit(MAX_BODY)
        .read_json()
        .map_err(|e| CallError::Body(e.to_string()))
}

/// Whether a TCP connection to the URL's host can be opened quickly.
pub fn endpoint_reachable(url: &str) -> bool {
    let Ok(uri) = url.parse::<Uri>() else {
        return false;
    };
    let Some(host) = uri.host() else {
        return false;
    };
    let port = uri
        .port_u16()
        .unwrap_or(if uri.scheme_str() == Some("https") { 443 } else { 80 });
    let addrs: Vec<SocketAddr> = match (host.trim_matches(['[', ']']), port).to_socket_addrs() {
        Ok(a) => a.collect(),
        Err(_) => return false,
    };
    addrs
        .iter()
        .any(|a| TcpStream::connect_timeout(a, CONNECT_TIMEOUT).is_ok())
}

/// Embedding provider reached over the provider wire protocol.
#[derive(Debug, Clone)]
pub struct HttpProvider {
    base: String,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base: base_url.into(),
            agent: agent(REQUEST_TIMEOUT),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn call<B: Serialize>(&self, path: &str, body: &B) -> biaslens_core::embedding::Result<ProviderOutput> {
        let url = join(&self.base, path);
        let r: EmbedResponse = read(self.agent.post(&url).send_json(body))
            .map_err(|e| EmbeddingError::ProviderUnavailable(format!("{url}: {e}")))?;
        Ok(ProviderOutput {
            dim: r.dim,
            embeddings: r.embeddings,
        })
    }
}

impl EmbeddingProvider for HttpProvider {
    fn embed_text(&self, texts: &[String]) -> biaslens_core::embedding::Result<ProviderOutput> {
        self.call("/v1/embed_text", &EmbedTextRequest { texts: texts.to_vec() })
    }

    fn embed_image(&self, images: &[Vec<u8>]) -> biaslens_core::embedding::Result<ProviderOutput> {
        self.call(
            "/v1/embed_image",
            &EmbedImageRequest {
                images_b64: images.iter().map(|b| B64.encode(b)).collect(),
            },
        )
    }

    fn describe(&self) -> String {
        format!("HTTP provider at {}", self.base)
    }
}

/// Image generator reached over the generator wire protocol.
#[derive(Debug, Clone)]
pub struct HttpGenerator {
    base: String,
    submit_agent: ureq::Agent,
    status_agent: ureq::Agent,
}

impl HttpGenerator {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base: base_url.into(),
            submit_agent: agent(SUBMIT_TIMEOUT),
            status_agent: agent(REQUEST_TIMEOUT),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }
}

impl ImageGenerator for HttpGenerator {
    fn submit(&self, prompt: &str, count: usize) -> Result<String, GenerationError> {
        let url = join(&self.base, "/v1/generate");
        let body = GenerateRequest {
            prompt: prompt.to_owned(),
            count,
        };
        let r: GenerateResponse = read(self.submit_agent.post(&url).send_json(&body))
            .map_err(|e| GenerationError::GeneratorUnavailable(format!("{url}: {e}")))?;
        Ok(r.job_id)
    }

    fn status(&self, remote_id: &str) -> Result<RemoteStatus, GenerationError> {
        let url = join(&self.base, &format!("/v1/jobs/{remote_id}"));
        match read::<JobResponse>(self.status_agent.get(&url).call()) {
            Ok(r) => r.into_remote(),
            Err(CallError::Status(StatusCode::NOT_FOUND)) => Err(GenerationError::UnknownJob(remote_id.to_owned())),
            Err(CallError::Body(e)) => Err(GenerationError::Protocol(e)),
            Err(e) => Err(GenerationError::GeneratorUnavailable(format!("{url}: {e}"))),
        }
    }
}

/// Stands in when no embedder is configured; every call fails.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoProvider;

impl EmbeddingProvider for NoProvider {
    fn embed_text(&self, _: &[String]) -> biaslens_core::embedding::Result<ProviderOutput> {
        Err(EmbeddingError::ProviderUnavailable("no embedder configured".into()))
    }

    fn embed_image(&self, _: &[Vec<u8>]) -> biaslens_core::embedding::Result<ProviderOutput> {
        Err(EmbeddingError::ProviderUnavailable("no embedder configured".into()))
    }

    fn describe(&self) -> String {
        "no embedder".into()
    }
}
