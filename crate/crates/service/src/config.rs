use std::path::PathBuf;
use std::time::Duration;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    /// Checkpoint loaded at startup; sequencing answers 409 without one.
    pub model_path: Option<PathBuf>,
    /// Idle time after which a session and its uploads are dropped.
    pub session_ttl: Duration,
    /// Maximum request body size in bytes.
    pub upload_limit: usize,
    /// Built UI bundle served under `/`.
    pub static_dir: Option<PathBuf>,
    /// Allowed browser origin; any origin when unset.
    pub cors_origin: Option<String>,
}

pub const DEFAULT_UPLOAD_LIMIT: usize = 32 * 1024 * 1024;
pub const DEFAULT_SESSION_TTL: Duration = Duration::from_secs(3600);

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            host: "127.0.0.1".to_string(),
            port: 8080,
            model_path: None,
            session_ttl: DEFAULT_SESSION_TTL,
            upload_limit: DEFAULT_UPLOAD_LIMIT,
            static_dir: None,
            cors_origin: None,
        }
    }
}
