//! HTTP/JSON service: classification, feedback collection, offline event
//! sync and the points leaderboard.

pub mod config;
pub mod error;
pub mod feedback;
pub mod routes;

use std::future::{Future, IntoFuture};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use tokio::net::TcpListener;
use wastewise_core::export::{read_sidecar, ExportError};
use wastewise_core::result::SuggestionMap;
use wastewise_core::rewards::{PointsPolicy, RewardsError};
use wastewise_core::{load_portable, CarbonFactorTable, Ledger, PortableModel};

pub use config::{ConfigError, ServiceConfig};
pub use error::{ApiError, ErrorBody};
pub use feedback::{FeedbackError, FeedbackRecord, FeedbackStore};
pub use routes::{router, ClientEvent, FeedbackResponse, Health, SyncBatch, SyncResponse};

pub const LEDGER_FILE: &str = "ledger.ndjson";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Artifact(#[from] ExportError),
    #[error(transparent)]
    Ledger(#[from] RewardsError),
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
    #[error("suggestion map {0}")]
    Suggestions(String),
    #[error("port already in use: {0}")]
    PortInUse(String),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("server failed: {0}")]
    Io(#[from] std::io::Error),
}

/// Shared request state. The model slot is empty until the artifact loads.
pub struct AppState {
    model: RwLock<Option<Arc<PortableModel>>>,
    pub ledger: Ledger,
    pub feedback: FeedbackStore,
    pub table: CarbonFactorTable,
    pub suggestions: SuggestionMap,
    pub points: PointsPolicy,
    pub max_upload_bytes: usize,
}

impl AppState {
    /// Opens the ledger journal and feedback store and reads the factor
    /// table and suggestions. Does not load the model.
    pub fn from_config(config: &ServiceConfig) -> Result<Self, ServiceError> {
        std::fs::create_dir_all(&config.data_dir)?;
        let table = match &config.factor_table {
            Some(p) => CarbonFactorTable::load(p)?,
            None => CarbonFactorTable::default(),
        };
        let suggestions = match &config.suggestions {
            Some(p) => SuggestionMap::load(p).map_err(ServiceError::Suggestions)?,
            None => SuggestionMap::default(),
        };
        if table.placeholder {
            tracing::warn!("carbon factor table {} is a placeholder", table.version);
        }
        Ok(Self {
            model: RwLock::new(None),
            ledger: Ledger::open(config.data_dir.join(LEDGER_FILE))?,
            feedback: FeedbackStore::open(&config.data_dir, config.feedback_quota_bytes)?,
            table,
            suggestions,
            points: config.points,
            max_upload_bytes: config.max_upload_bytes,
        })
    }

    pub fn model(&self) -> Option<Arc<PortableModel>> {
        self.model.read().expect("model lock").clone()
    }

    pub fn set_model(&self, model: PortableModel) {
        *self.model.write().expect("model lock") = Some(Arc::new(model));
    }
}

/// A bound but not yet serving instance.
pub struct Server {
    listener: TcpListener,
    state: Arc<AppState>,
    artifact: PathBuf,
}

impl Server {
    /// Fails fast on a missing artifact or sidecar, then binds.
    pub async fn bind(config: &ServiceConfig) -> Result<Self, ServiceError> {
        read_sidecar(&config.artifact)?;
        let state = Arc::new(AppState::from_config(config)?);
        let addr = format!("{}:{}", config.bind, config.port);
        let listener = TcpListener::bind(&addr).await.map_err(|source| match source.kind() {
            std::io::ErrorKind::AddrInUse => ServiceError::PortInUse(addr.clone()),
            _ => ServiceError::Bind { addr: addr.clone(), source },
        })?;
        Ok(Self { listener, state, artifact: config.artifact.clone() })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn state(&self) -> Arc<AppState> {
        self.state.clone()
    }

    /// Serves immediately (health reports 503) while the model loads; a
    /// corrupt artifact stops the server with an error.
    pub async fn run(self, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<(), ServiceError> {
        let Self { listener, state, artifact } = self;
        let app = router(state.clone());
        let server = axum::serve(listener, app).with_graceful_shutdown(shutdown).into_future();
        tokio::pin!(server);
        let loading = tokio::task::spawn_blocking(move || load_portable(artifact));
        tokio::select! {
            res = &mut server => return res.map_err(ServiceError::Io),
            loaded = loading => {
                let model = loaded.map_err(|e| std::io::Error::other(e.to_string()))??;
                tracing::info!("model loaded: {}", model.metadata().backbone_id);
                state.set_model(model);
            }
        }
        server.await.map_err(ServiceError::Io)
    }
}

/// Binds, loads and serves until Ctrl-C.
pub async fn serve(config: &ServiceConfig) -> Result<(), ServiceError> {
    let server = Server::bind(config).await?;
    tracing::info!("listening on http://{}", server.local_addr()?);
    server
        .run(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
