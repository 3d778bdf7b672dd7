//! HTTP+JSON session service.
//!
//! A session owns one dataset (growing by registered augmentations), a DAG
//! of checkpoints with one active node, a history log, and cached analytics.
//! Every route lives under `/api/v1`; errors are `{code, message, detail}`
//! with status 404 for unknown ids, 409 for conflicts and 422 for invalid
//! parameters.
//!
//! ```no_run
//! # async fn run() -> Result<(), Box<dyn std::error::Error>> {
//! let state = dash_service::AppState::open("/tmp/dash")?;
//! let listener = tokio::net::TcpListener::bind("127.0.0.1:8080").await?;
//! axum::serve(listener, dash_service::router(state)).await?;
//! # Ok(())
//! # }
//! ```

pub mod error;
pub mod routes;
pub mod session;
pub mod state;

pub use error::{ApiError, ApiResult, ErrorBody};
pub use routes::router;
pub use state::AppState;

/// Serves `root` on `addr` until the process is stopped.
pub async fn serve(root: std::path::PathBuf, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let state = AppState::open(root).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
