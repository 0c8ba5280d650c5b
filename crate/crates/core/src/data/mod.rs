//! Feature files, manifests, snippet sampling, batch construction and the synthetic
//! conjoint-action generator.

mod features;
mod manifest;
mod sampling;
mod synth;

use std::io::Write;
use std::path::Path;

use thiserror::Error;

pub use features::{
    decode_features, encode_features, load_features, save_features, FEATURE_MAGIC, FEATURE_VERSION,
    HEADER_LEN,
};
pub use manifest::{resolve, Dataset, Manifest, SegmentEntry, VideoEntry};
pub use sampling::{build_batch, gather_rows, sample_indices, sample_snippets, Batch, SampleMode};
pub use synth::{
    synth_generate, synth_generate_split, Prototypes, SnippetKind, Split, SynthConfig, SynthDataset,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: format error at byte {offset}: {detail}")]
    Format {
        path: String,
        offset: usize,
        detail: String,
    },
    #[error("{path}: non-finite value at byte {offset}")]
    NonFinite { path: String, offset: usize },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("config: {0}")]
    Config(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| DataError::Config(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let res = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = res {
        let _ = std::fs::remove_file(&tmp);
        return Err(DataError::io(path, e));
    }
    Ok(())
}

impl Dataset {
    /// Writes every feature file under `dir` (at each video's `feature_path`) and then
    /// the manifest as `dir/manifest_name`.
    pub fn save(&self, dir: &Path, manifest_name: &str) -> Result<(), DataError> {
        let encoded = self
            .videos
            .iter()
            .map(|v| encode_features(&v.features))
            .collect::<Result<Vec<_>, _>>()?;
        for (entry, bytes) in self.manifest.videos.iter().zip(&encoded) {
            let path = resolve(dir, &entry.feature_path);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| DataError::io(parent, e))?;
            }
            write_atomic(&path, bytes)?;
        }
        write_atomic(&dir.join(manifest_name), self.manifest.to_json().as_bytes())
    }
}
