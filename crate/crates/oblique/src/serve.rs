//! Static file server for bundles: plain HTTP/1.1, byte ranges, permissive
//! CORS so a viewer on another origin can fetch textures.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use axum::Router;
use tokio::net::TcpListener;
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

use crate::error::{Error, Result};

pub fn router(dir: &Path) -> Router {
    Router::new().fallback_service(ServeDir::new(dir)).layer(CorsLayer::permissive())
}

/// Serves `dir` on `listener` until ctrl-c.
pub async fn serve_on(listener: TcpListener, dir: PathBuf) -> Result<()> {
    if !dir.join("manifest.json").is_file() {
        return Err(Error::MissingFile(dir.join("manifest.json")));
    }
    let addr = listener.local_addr().map_err(Error::io(&dir))?;
    log::info!("serving {} on http://{addr}", dir.display());
    axum::serve(listener, router(&dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(Error::io(&dir))
}

pub async fn serve(dir: PathBuf, addr: SocketAddr) -> Result<()> {
    let listener = TcpListener::bind(addr).await.map_err(Error::io(&dir))?;
    serve_on(listener, dir).await
}
