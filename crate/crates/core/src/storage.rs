//! Blob storage with a local-filesystem backend.
//!
//! Containers map to directories under the store root; each holds the blob
//! files plus a `.manifest` of line-delimited records (the container header
//! followed by one record per blob: path, size, digest). Writes go through a
//! temp file and an atomic rename, so readers never observe partial content
//! and the store survives restarts.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use thiserror::Error;

use crate::clock::SimTime;

pub const MANIFEST_FILE: &str = ".manifest";

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerKind {
    Input,
    Output,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct ContainerRef {
    pub name: String,
    pub kind: ContainerKind,
    pub created_at: SimTime,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct BlobRef {
    pub container: ContainerRef,
    pub path: String,
    pub size_bytes: u64,
    /// Hex SHA-256 of the content.
    pub checksum: String,
}

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("container {0} already exists")]
    Conflict(String),
    #[error("container {0} not found")]
    ContainerNotFound(String),
    #[error("blob {path} not found in container {container}")]
    BlobNotFound { container: String, path: String },
    #[error("invalid container name {0:?}")]
    InvalidName(String),
    #[error("invalid blob path {path:?}: {reason}")]
    InvalidPath { path: String, reason: String },
    #[error("corrupt manifest for container {container}: {reason}")]
    CorruptManifest { container: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ManifestLine {
    Container(ContainerRef),
    Blob {
        path: String,
        size_bytes: u64,
        checksum: String,
    },
}

struct ContainerState {
    meta: ContainerRef,
    blobs: BTreeMap<String, (u64, String)>, // path -> (size, checksum)
}

/// Filesystem-backed blob store. All operations are safe to call from
/// multiple threads; same-path writes serialize with last-writer-wins.
pub struct BlobStore {
    root: PathBuf,
    inner: Mutex<BTreeMap<String, ContainerState>>,
}

impl BlobStore {
    /// Opens (or initializes) a store rooted at `root`, reloading any
    /// containers a previous process left behind.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StorageError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let mut containers = BTreeMap::new();
        for entry in fs::read_dir(&root)? {
            let entry = entry?;
            if !entry.file_type()?.is_dir() {
                continue;
            }
            let manifest_path = entry.path().join(MANIFEST_FILE);
            if !manifest_path.exists() {
                continue;
            }
            let name = entry.file_name().to_string_lossy().into_owned();
            let state = load_manifest(&name, &manifest_path)?;
            containers.insert(name, state);
        }
        Ok(BlobStore {
            root,
            inner: Mutex::new(containers),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn create_container(
        &self,
        name: &str,
        kind: ContainerKind,
        now: SimTime,
    ) -> Result<ContainerRef, StorageError> {
        validate_container_name(name)?;
        let mut inner = self.inner.lock().unwrap();
        if inner.contains_key(name) {
            return Err(StorageError::Conflict(name.to_string()));
        }
        let meta = ContainerRef {
            name: name.to_string(),
            kind,
            created_at: now,
        };
        fs::create_dir_all(self.root.join(name))?;
        let state = ContainerState {
            meta: meta.clone(),
            blobs: BTreeMap::new(),
        };
        write_manifest(&self.root, &state)?;
        inner.insert(name.to_string(), state);
        Ok(meta)
    }

    pub fn container(&self, name: &str) -> Result<ContainerRef, StorageError> {
        let inner = self.inner.lock().unwrap();
        inner
            .get(name)
            .map(|s| s.meta.clone())
            .ok_or_else(|| StorageError::ContainerNotFound(name.to_string()))
    }

    pub fn containers(&self) -> Vec<ContainerRef> {
        let inner = self.inner.lock().unwrap();
        inner.values().map(|s| s.meta.clone()).collect()
    }

    pub fn put_blob(
        &self,
        container: &str,
        path: &str,
        bytes: &[u8],
    ) -> Result<BlobRef, StorageError> {
        validate_blob_path(path)?;
        let mut inner = self.inner.lock().unwrap();
        let state = inner
            .get_mut(container)
            .ok_or_else(|| StorageError::ContainerNotFound(container.to_string()))?;
        let checksum = hex::encode(Sha256::digest(bytes));
        let final_path = self.root.join(container).join(path);
        if let Some(parent) = final_path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp_path = self
            .root
            .join(container)
            .join(format!(".tmp-{}", checksum));
        {
            let mut f = fs::File::create(&tmp_path)?;
            f.write_all(bytes)?;
            f.flush()?;
        }
        fs::rename(&tmp_path, &final_path)?;
        state
            .blobs
            .insert(path.to_string(), (bytes.len() as u64, checksum.clone()));
        write_manifest(&self.root, state)?;
        Ok(BlobRef {
            container: state.meta.clone(),
            path: path.to_string(),
            size_bytes: bytes.len() as u64,
            checksum,
        })
    }

    pub fn get_blob(&self, container: &str, path: &str) -> Result<Vec<u8>, StorageError> {
        validate_blob_path(path)?;
        let inner = self.inner.lock().unwrap();
        let state = inner
            .get(container)
            .ok_or_else(|| StorageError::ContainerNotFound(container.to_string()))?;
        if !state.blobs.contains_key(path) {
            return Err(StorageError::BlobNotFound {
                container: container.to_string(),
                path: path.to_string(),
            });
        }
        Ok(fs::read(self.root.join(container).join(path))?)
    }

    pub fn blob_ref(&self, container: &str, path: &str) -> Result<BlobRef, StorageError> {
        let inner = self.inner.lock().unwrap();
        let state = inner
            .get(container)
            .ok_or_else(|| StorageError::ContainerNotFound(container.to_string()))?;
        let (size, checksum) = state.blobs.get(path).ok_or_else(|| StorageError::BlobNotFound {
            container: container.to_string(),
            path: path.to_string(),
        })?;
        Ok(BlobRef {
            container: state.meta.clone(),
            path: path.to_string(),
            size_bytes: *size,
            checksum: checksum.clone(),
        })
    }

    pub fn list_blobs(&self, container: &str) -> Result<Vec<BlobRef>, StorageError> {
        let inner = self.inner.lock().unwrap();
        let state = inner
            .get(container)
            .ok_or_else(|| StorageError::ContainerNotFound(container.to_string()))?;
        Ok(state
            .blobs
            .iter()
            .map(|(path, (size, checksum))| BlobRef {
                container: state.meta.clone(),
                path: path.clone(),
                size_bytes: *size,
                checksum: checksum.clone(),
            })
            .collect())
    }

    pub fn container_is_empty(&self, container: &str) -> Result<bool, StorageError> {
        let inner = self.inner.lock().unwrap();
        let state = inner
            .get(container)
            .ok_or_else(|| StorageError::ContainerNotFound(container.to_string()))?;
        Ok(state.blobs.is_empty())
    }
}

fn validate_container_name(name: &str) -> Result<(), StorageError> {
    let ok = !name.is_empty()
        && name.len() <= 128
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(StorageError::InvalidName(name.to_string()))
    }
}

fn validate_blob_path(path: &str) -> Result<(), StorageError> {
    let fail = |reason: &str| {
        Err(StorageError::InvalidPath {
            path: path.to_string(),
            reason: reason.to_string(),
        })
    };
    if path.is_empty() {
        return fail("empty path");
    }
    if path.len() > 1024 {
        return fail("path too long");
    }
    if path.starts_with('/') {
        return fail("absolute paths not allowed");
    }
    if path.contains('\\') || path.contains('\0') {
        return fail("illegal character");
    }
    for component in path.split('/') {
        if component.is_empty() {
            return fail("empty path component");
        }
        if component == "." || component == ".." {
            return fail("upward or self traversal not allowed");
        }
        if component == MANIFEST_FILE || component.starts_with(".tmp-") {
            return fail("reserved name");
        }
    }
    Ok(())
}

fn write_manifest(root: &Path, state: &ContainerState) -> Result<(), StorageError> {
    let mut out = String::new();
    out.push_str(&serde_json::to_string(&ManifestLine::Container(state.meta.clone())).unwrap());
    out.push('\n');
    for (path, (size_bytes, checksum)) in &state.blobs {
        out.push_str(
            &serde_json::to_string(&ManifestLine::Blob {
                path: path.clone(),
                size_bytes: *size_bytes,
                checksum: checksum.clone(),
            })
            .unwrap(),
        );
        out.push('\n');
    }
    let dir = root.join(&state.meta.name);
    let tmp = dir.join(".manifest.tmp");
    fs::write(&tmp, out)?;
    fs::rename(&tmp, dir.join(MANIFEST_FILE))?;
    Ok(())
}

fn load_manifest(name: &str, path: &Path) -> Result<ContainerState, StorageError> {
    let corrupt = |reason: String| StorageError::CorruptManifest {
        container: name.to_string(),
        reason,
    };
    let text = fs::read_to_string(path)?;
    let mut meta: Option<ContainerRef> = None;
    let mut blobs = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestLine = serde_json::from_str(line)
            .map_err(|e| corrupt(format!("line {}: {e}", lineno + 1)))?;
        match record {
            ManifestLine::Container(c) => {
                if c.name != name {
                    return Err(corrupt(format!(
                        "header names {:?} but directory is {:?}",
                        c.name, name
                    )));
                }
                meta = Some(c);
            }
            ManifestLine::Blob {
                path,
                size_bytes,
                checksum,
            } => {
                blobs.insert(path, (size_bytes, checksum));
            }
        }
    }
    let meta = meta.ok_or_else(|| corrupt("missing container header".into()))?;
    Ok(ContainerState { meta, blobs })
}
