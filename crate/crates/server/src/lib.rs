//! Live oversight sessions over WebSocket: the simulation halts on every
//! proposed action until the connected overseer allows or blocks it, and
//! each answer becomes a labeled record with its measured latency.

pub mod app;
pub mod protocol;
pub mod session;

use std::sync::Arc;

pub use app::{router, Registry, ServerOptions};
pub use protocol::{
    ClientMessage, ErrorCode, Metrics, ServerMessage, SessionConfig, SessionId, SessionPhase, WireVerdict,
    PROTOCOL_VERSION,
};
pub use session::{DatasetLog, SessionCore, SessionStatus};

/// Serve on an already bound listener until the process ends.
pub async fn serve(listener: tokio::net::TcpListener, registry: Arc<Registry>, options: &ServerOptions) -> std::io::Result<()> {
    let app = router(registry, options.ui_dir.as_deref());
    axum::serve(listener, app).await
}

/// Registry for `options`, opening the shared dataset log if one is set.
pub fn registry_for(options: &ServerOptions) -> std::io::Result<Arc<Registry>> {
    let log = options.dataset_log.as_deref().map(DatasetLog::create).transpose()?;
    Ok(Arc::new(Registry::new(log)))
}
