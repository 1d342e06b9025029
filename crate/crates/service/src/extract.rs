//! Hook for turning raw audio into feature vectors.
//!
//! The service accepts precomputed feature tables only. An external
//! extraction service would implement [`FeatureExtractor`] and be consulted
//! by the upload handler when a file with an audio extension arrives. No
//! implementation ships; audio uploads are answered with 415.

use std::path::Path;

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ExtractError(pub String);

pub trait FeatureExtractor: Send + Sync {
    /// Feature vector for one audio file.
    fn extract(&self, filename: &str, audio: &[u8]) -> Result<Vec<f64>, ExtractError>;
}

const AUDIO_EXTENSIONS: [&str; 7] = ["mp3", "wav", "flac", "ogg", "m4a", "aac", "aiff"];

pub fn is_audio_filename(name: &str) -> bool {
    Path::new(name)
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| AUDIO_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}
