//! In-process mock services speaking the provider and generator wire
//! protocols, for tests and offline demos.

use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use biaslens_core::embedding::ProviderOutput;
use biaslens_core::generation::{GenerationError, ImageGenerator, MockGenerator};
use biaslens_core::EmbeddingProvider;

use crate::client::{
    EmbedImageRequest, EmbedResponse, EmbedTextRequest, GenerateRequest, GenerateResponse, JobResponse,
};

type Reply<T> = Result<Json<T>, (StatusCode, String)>;

fn reply(out: biaslens_core::embedding::Result<ProviderOutput>) -> Reply<EmbedResponse> {
    match out {
        Ok(o) => Ok(Json(EmbedResponse {
            dim: o.dim,
            embeddings: o.embeddings,
        })),
        Err(e) => Err((StatusCode::SERVICE_UNAVAILABLE, e.to_string())),
    }
}

/// Serves `/v1/embed_text` and `/v1/embed_image` from any provider.
pub fn embedder_router(provider: Arc<dyn EmbeddingProvider>) -> Router {
    async fn text(
        State(p): State<Arc<dyn EmbeddingProvider>>,
        Json(req): Json<EmbedTextRequest>,
    ) -> Reply<EmbedResponse> {
        let out = tokio::task::spawn_blocking(move || p.embed_text(&req.texts))
            .await
            .map_err(|e| (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        reply(out)
    }

    async fn image(
        State(p): State<Arc<dyn EmbeddingProvider>>,
        Json(req): Json<EmbedImageRequest>,
    ) -> Reply<EmbedResponse> {
        let images = req
            .images_b64
            .iter()
            .map(|s| B64.decode(s))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| (StatusCode::BAD_REQUEST, format!("bad base64: {e}")))?;
        let out = tokio::task::spawn_blocking(move || p.embed_image(&images))
            .await
            .map_err(|e| (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        reply(out)
    }

    Router::new()
        .route("/v1/embed_text", post(text))
        .route("/v1/embed_image", post(image))
        .with_state(provider)
}

#[derive(Clone)]
struct GenState {
    generator: Arc<MockGenerator>,
    latency: Duration,
}

/// Serves `/v1/generate` and `/v1/jobs/{id}` from a [`MockGenerator`].
/// `latency` delays every status response, modelling a slow backend.
pub fn generator_router(generator: Arc<MockGenerator>, latency: Duration) -> Router {
    async fn generate(State(s): State<GenState>, Json(req): Json<GenerateRequest>) -> Reply<GenerateResponse> {
        if req.count == 0 {
            return Err((StatusCode::BAD_REQUEST, "count must be positive".into()));
        }
        let job_id = s
            .generator
            .submit(&req.prompt, req.count)
            .map_err(|e| (StatusCode::SERVICE_UNAVAILABLE, e.to_string()))?;
        Ok(Json(GenerateResponse { job_id }))
    }

    async fn job(State(s): State<GenState>, Path(id): Path<String>) -> Reply<JobResponse> {
        tokio::time::sleep(s.latency).await;
        match s.generator.status(&id) {
            Ok(status) => Ok(Json(JobResponse::from_remote(&status))),
            Err(GenerationError::UnknownJob(id)) => Err((StatusCode::NOT_FOUND, format!("unknown job {id}"))),
            Err(e) => Err((StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
        }
    }

    Router::new()
        .route("/v1/generate", post(generate))
        .route("/v1/jobs/{id}", get(job))
        .with_state(GenState { generator, latency })
}

/// A router served on its own thread and runtime, for blocking callers.
/// The server stops when the handle is dropped.
pub struct BackgroundServer {
    addr: std::net::SocketAddr,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl BackgroundServer {
    /// Binds `127.0.0.1` on an ephemeral port.
    pub fn start(router: Router) -> std::io::Result<Self> {
        let listener = std::net::TcpListener::bind("127.0.0.1:0")?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .expect("tokio runtime");
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
                let _ = axum::serve(listener, router)
                    .with_graceful_shutdown(async {
                        let _ = stopped.await;
                    })
                    .await;
            });
        });
        Ok(Self {
            addr,
            stop: Some(stop),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> std::net::SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
