//! Content-addressed on-disk cache. Entries are published with an atomic
//! rename, so concurrent writers of the same key never expose partial files.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

/// SHA-256 over the parts joined with `0x00` separators, hex-encoded.
pub fn content_key(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for (i, part) in parts.iter().enumerate() {
        if i > 0 {
            hasher.update([0u8]);
        }
        hasher.update(part);
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone)]
pub struct DiskCache {
    root: PathBuf,
}

impl DiskCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn entry_path(&self, namespace: &str, key: &str) -> PathBuf {
        self.root
            .join(namespace)
            .join(&key[..2.min(key.len())])
            .join(key)
    }

    pub fn get(&self, namespace: &str, key: &str) -> io::Result<Option<Vec<u8>>> {
        match fs::read(self.entry_path(namespace, key)) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn put(&self, namespace: &str, key: &str, bytes: &[u8]) -> io::Result<()> {
        let path = self.entry_path(namespace, key);
        let dir = path.parent().expect("entry path has a parent");
        fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(&path).map_err(|e| e.error)?;
        Ok(())
    }
}

pub(crate) fn encode_vector(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn decode_vector(bytes: &[u8]) -> Option<Vec<f64>> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(8) {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn key_separates_parts() {
        assert_ne!(content_key(&[b"ab", b"c"]), content_key(&[b"a", b"bc"]));
        assert_eq!(content_key(&[b"m", b"t"]).len(), 64);
    }

    #[test]
    fn missing_entry_is_none() {
        let dir = tempfile::tempdir().unwrap();
        let cache = DiskCache::new(dir.path());
        assert!(cache.get("emb", &content_key(&[b"x"])).unwrap().is_none());
    }

    #[test]
    fn concurrent_writers_same_key() {
        let dir = tempfile::tempdir().unwrap();
        let cache = DiskCache::new(dir.path());
        let key = content_key(&[b"k"]);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| cache.put("emb", &key, b"same-bytes").unwrap());
            }
        });
        assert_eq!(cache.get("emb", &key).unwrap().unwrap(), b"same-bytes");
    }

    proptest! {
        #[test]
        fn vector_roundtrip_is_bit_exact(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..64)) {
            let dir = tempfile::tempdir().unwrap();
            let cache = DiskCache::new(dir.path());
            let key = content_key(&[b"model", b"text"]);
            cache.put("emb", &key, &encode_vector(&values)).unwrap();
            let back = decode_vector(&cache.get("emb", &key).unwrap().unwrap()).unwrap();
            prop_assert_eq!(
                back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
