//! HTTP surface of biaslens: the REST API server with its background
//! workers, blocking clients for the embedding provider and the image
//! generator, and mock implementations of both remote services.

pub mod api;
pub mod client;
pub mod feed;
pub mod mock;
pub mod state;

pub use api::router;
pub use axum::Router;
pub use client::{endpoint_reachable, HttpGenerator, HttpProvider, NoProvider};
pub use feed::{Change, ChangeFeed, ChangeFeedEntry};
pub use mock::BackgroundServer;
pub use state::{Server, ServerConfig, Shared};

/// Serves any router on `listener` until `shutdown` resolves.
pub async fn serve_router(
    listener: tokio::net::TcpListener,
    router: Router,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router).with_graceful_shutdown(shutdown).await
}
