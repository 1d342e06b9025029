//! HTTP front end for album sequencing: corpus upload into short-lived
//! sessions, direct and template sequencing against a loaded checkpoint,
//! and static hosting of the browser UI.

pub mod api;
pub mod config;
pub mod error;
pub mod extract;
pub mod session;

use std::net::SocketAddr;
use std::time::{Duration, Instant};

pub use api::{router, AppState};
pub use config::ServiceConfig;
pub use session::SessionStore;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("loading checkpoint: {0}")]
    Model(#[from] albumseq::Error),
    #[error("invalid listen address {0}")]
    Address(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Binds, loads the configured checkpoint and serves until the process ends.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let state = AppState::new(&config);
    if let Some(path) = &config.model_path {
        state.load_model(path)?;
        tracing::info!(path = %path.display(), "loaded checkpoint");
    }
    let addr: SocketAddr = format!("{}:{}", config.host, config.port)
        .parse()
        .map_err(|_| ServiceError::Address(format!("{}:{}", config.host, config.port)))?;

    let purge = state.clone();
    let every = (config.session_ttl / 4).clamp(Duration::from_secs(1), Duration::from_secs(60));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(every);
        loop {
            tick.tick().await;
            let n = purge.sessions().purge_expired(Instant::now());
            if n > 0 {
                tracing::debug!(expired = n, "purged sessions");
            }
        }
    });

    let app = router(state, &config);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, app).await?;
    Ok(())
}
