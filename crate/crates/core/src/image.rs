//! Image references and byte loading.
//!
//! Precedents keep images by reference (locator + content hash), never by
//! bytes. Bytes are loaded on demand for captioning and embedding.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ImageError {
    #[error("image `{locator}` is unreadable: {reason}")]
    Unreadable { locator: String, reason: String },
}

/// Location of an image plus the hex SHA-256 of its bytes when they were readable.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub locator: String,
    pub content_hash: Option<String>,
}

impl ImageRef {
    pub fn new(locator: impl Into<String>) -> Self {
        Self {
            locator: locator.into(),
            content_hash: None,
        }
    }

    /// Equal hashes identify the same image regardless of locator.
    pub fn same_image(&self, other: &ImageRef) -> bool {
        match (&self.content_hash, &other.content_hash) {
            (Some(a), Some(b)) => a == b,
            _ => self.locator == other.locator,
        }
    }

    pub fn is_remote(&self) -> bool {
        is_url(&self.locator)
    }
}

fn is_url(locator: &str) -> bool {
    locator.starts_with("http://") || locator.starts_with("https://")
}

pub fn content_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest.iter() {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// An image reference together with its bytes.
#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub image: ImageRef,
    pub bytes: Arc<[u8]>,
}

impl LoadedImage {
    pub fn from_bytes(locator: impl Into<String>, bytes: impl Into<Vec<u8>>) -> Self {
        let bytes: Vec<u8> = bytes.into();
        let image = ImageRef {
            locator: locator.into(),
            content_hash: Some(content_hash(&bytes)),
        };
        Self {
            image,
            bytes: bytes.into(),
        }
    }

    /// Wraps uploaded bytes that have no natural locator.
    pub fn from_upload(bytes: impl Into<Vec<u8>>) -> Self {
        let bytes: Vec<u8> = bytes.into();
        let hash = content_hash(&bytes);
        Self {
            image: ImageRef {
                locator: format!("upload:sha256:{hash}"),
                content_hash: Some(hash),
            },
            bytes: bytes.into(),
        }
    }

    /// Reads a file path or fetches an `http(s)` URL.
    pub async fn load(locator: &str) -> Result<Self, ImageError> {
        let unreadable = |reason: String| ImageError::Unreadable {
            locator: locator.to_string(),
            reason,
        };
        let bytes = if is_url(locator) {
            let client = reqwest::Client::builder()
                .timeout(Duration::from_secs(30))
                .build()
                .map_err(|e| unreadable(e.to_string()))?;
            let resp = client
                .get(locator)
                .send()
                .await
                .map_err(|e| unreadable(e.to_string()))?;
            if !resp.status().is_success() {
                return Err(unreadable(format!("HTTP {}", resp.status())));
            }
            resp.bytes()
                .await
                .map_err(|e| unreadable(e.to_string()))?
                .to_vec()
        } else {
            tokio::fs::read(locator)
                .await
                .map_err(|e| unreadable(e.to_string()))?
        };
        if bytes.is_empty() {
            return Err(unreadable("empty file".into()));
        }
        Ok(Self::from_bytes(locator, bytes))
    }

    pub async fn resolve(image: &ImageRef) -> Result<Self, ImageError> {
        Self::load(&image.locator).await
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_hex_sha256() {
        assert_eq!(
            content_hash(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn equal_hashes_mean_same_image() {
        let a = LoadedImage::from_bytes("a.png", b"pixels".to_vec()).image;
        let b = LoadedImage::from_bytes("elsewhere/b.png", b"pixels".to_vec()).image;
        let c = LoadedImage::from_bytes("a.png", b"other".to_vec()).image;
        assert!(a.same_image(&b));
        assert!(!a.same_image(&c));
    }

    #[tokio::test]
    async fn missing_file_is_unreadable() {
        let err = LoadedImage::load("/definitely/not/here.png").await.unwrap_err();
        assert!(matches!(err, ImageError::Unreadable { .. }));
    }

    #[tokio::test]
    async fn load_reads_file_and_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        std::fs::write(&path, b"abc").unwrap();
        let img = LoadedImage::load(path.to_str().unwrap()).await.unwrap();
        assert_eq!(&*img.bytes, b"abc");
        assert_eq!(img.image.content_hash.as_deref(), Some(content_hash(b"abc").as_str()));
    }
}
