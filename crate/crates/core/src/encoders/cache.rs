//! Persistent embedding cache and the providers that read from it.
//!
//! File layout, little endian throughout:
//!
//! ```text
//! "DMRC" | version u16 | dim u32 | count u64 |
//! count × ( key_len u16 | key bytes | dim × f32 )
//! ```
//!
//! Keys are `"<provider tag>:<content digest>"`, so renamed files still hit.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::image::RgbImage;
use super::synthetic::normalize_text;
use super::{EncoderError, ImageEncoder, TextEncoder};

pub const CACHE_MAGIC: &[u8; 4] = b"DMRC";
pub const CACHE_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("vector has {got} entries, cache dim is {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("corrupted cache at byte offset {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
    #[error("key of {0} bytes exceeds the u16 length field")]
    KeyTooLong(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Content key for a text input.
pub fn text_key(tag: &str, text: &str) -> String {
    format!(
        "{tag}:{}",
        hex::encode(Sha256::digest(normalize_text(text).as_bytes()))
    )
}

/// Content key for an image input.
pub fn image_key(tag: &str, image: &RgbImage) -> String {
    format!("{tag}:{}", image.digest())
}

/// Many concurrent readers, one writer at a time; each put is atomic.
#[derive(Debug)]
pub struct EmbeddingCache {
    path: Option<PathBuf>,
    dim: usize,
    entries: RwLock<BTreeMap<String, Arc<[f32]>>>,
}

impl EmbeddingCache {
    pub fn in_memory(dim: usize) -> Self {
        Self {
            path: None,
            dim,
            entries: RwLock::new(BTreeMap::new()),
        }
    }

    /// Loads `path` if it exists, otherwise starts empty and remembers the
    /// path for [`EmbeddingCache::save`].
    pub fn open(path: &Path, dim: usize) -> Result<Self, CacheError> {
        if !path.exists() {
            return Ok(Self {
                path: Some(path.to_path_buf()),
                ..Self::in_memory(dim)
            });
        }
        let cache = Self::load(path)?;
        if cache.dim != dim {
            return Err(CacheError::DimMismatch {
                expected: dim,
                got: cache.dim,
            });
        }
        Ok(cache)
    }

    /// Loads an existing file, taking its dimension from the header.
    pub fn load(path: &Path) -> Result<Self, CacheError> {
        let bytes = std::fs::read(path)?;
        let (dim, entries) = decode(&bytes)?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            dim,
            entries: RwLock::new(entries),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<Arc<[f32]>> {
        self.entries.read().unwrap().get(key).cloned()
    }

    pub fn put(&self, key: &str, vector: &[f32]) -> Result<(), CacheError> {
        if vector.len() != self.dim {
            return Err(CacheError::DimMismatch {
                expected: self.dim,
                got: vector.len(),
            });
        }
        if key.len() > u16::MAX as usize {
            return Err(CacheError::KeyTooLong(key.len()));
        }
        self.entries
            .write()
            .unwrap()
            .insert(key.to_string(), Arc::from(vector));
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let entries = self.entries.read().unwrap();
        let mut out = Vec::with_capacity(18 + entries.len() * (self.dim * 4 + 80));
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
        for (key, vector) in entries.iter() {
            out.extend_from_slice(&(key.len() as u16).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
            for x in vector.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Writes the cache to its path through a temporary file and rename.
    pub fn save(&self) -> Result<(), CacheError> {
        let path = self
            .path
            .as_ref()
            .ok_or_else(|| std::io::Error::other("in-memory cache has no path"))?;
        self.save_to(path)
    }

    pub fn save_to(&self, path: &Path) -> Result<(), CacheError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.encode())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

type Entries = BTreeMap<String, Arc<[f32]>>;

fn decode(bytes: &[u8]) -> Result<(usize, Entries), CacheError> {
    let mut r = Reader { bytes, offset: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CACHE_MAGIC {
        return Err(r.corrupt(0, format!("bad magic {magic:?}")));
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(r.corrupt(4, format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(r.take(4, "dim")?.try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(r.take(8, "count")?.try_into().unwrap());
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let key_start = r.offset;
        let key_len = u16::from_le_bytes(r.take(2, "key length")?.try_into().unwrap()) as usize;
        let key = std::str::from_utf8(r.take(key_len, "key")?)
            .map_err(|_| r.corrupt(key_start + 2, "key is not UTF-8".into()))?
            .to_string();
        let raw = r.take(dim * 4, "vector")?;
        let vector: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.insert(key, Arc::from(vector));
    }
    if r.offset != bytes.len() {
        return Err(r.corrupt(
            r.offset,
            format!("{} trailing bytes", bytes.len() - r.offset),
        ));
    }
    Ok((dim, entries))
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CacheError> {
        let end = self
            .offset
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.offset..end];
                self.offset = end;
                Ok(s)
            }
            None => Err(self.corrupt(self.offset, format!("truncated {what}"))),
        }
    }

    fn corrupt(&self, offset: usize, reason: String) -> CacheError {
        CacheError::Corrupt { offset, reason }
    }
}

fn miss(key: &str) -> EncoderError {
    EncoderError::Unavailable(format!(
        "no precomputed vector for {key}; run `dm2rm embed` to fill the cache and retry"
    ))
}

/// Text provider answering from precomputed vectors.
pub struct CachedTextEncoder {
    cache: Arc<EmbeddingCache>,
    tag: String,
}

impl CachedTextEncoder {
    pub fn new(cache: Arc<EmbeddingCache>, tag: impl Into<String>) -> Self {
        Self {
            cache,
            tag: tag.into(),
        }
    }
}

impl TextEncoder for CachedTextEncoder {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn dim(&self) -> usize {
        self.cache.dim()
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, EncoderError> {
        let key = text_key(&self.tag, text);
        self.cache
            .get(&key)
            .map(|v| v.to_vec())
            .ok_or_else(|| miss(&key))
    }
}

/// Image provider answering from precomputed vectors.
pub struct CachedImageEncoder {
    cache: Arc<EmbeddingCache>,
    tag: String,
}

impl CachedImageEncoder {
    pub fn new(cache: Arc<EmbeddingCache>, tag: impl Into<String>) -> Self {
        Self {
            cache,
            tag: tag.into(),
        }
    }
}

impl ImageEncoder for CachedImageEncoder {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn dim(&self) -> usize {
        self.cache.dim()
    }

    fn embed(&self, image: &RgbImage) -> Result<Vec<f32>, EncoderError> {
        let key = image_key(&self.tag, image);
        self.cache
            .get(&key)
            .map(|v| v.to_vec())
            .ok_or_else(|| miss(&key))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn put_then_get() {
        let c = EmbeddingCache::in_memory(4);
        c.put("t:a", &[1.0, -2.0, 0.5, 3.25]).unwrap();
        assert_eq!(&*c.get("t:a").unwrap(), &[1.0, -2.0, 0.5, 3.25]);
        assert!(c.get("t:b").is_none());
    }

    #[test]
    fn wrong_dim_rejected() {
        let c = EmbeddingCache::in_memory(16);
        assert!(matches!(
            c.put("k", &[0.0; 8]),
            Err(CacheError::DimMismatch {
                expected: 16,
                got: 8
            })
        ));
    }

    #[test]
    fn header_layout_is_exact() {
        let c = EmbeddingCache::in_memory(2);
        c.put("ab", &[1.0, 2.0]).unwrap();
        let bytes = c.encode();
        let mut expected = b"DMRC".to_vec();
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&2u16.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.extend_from_slice(&1f32.to_le_bytes());
        expected.extend_from_slice(&2f32.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.dmrc");
        let c = EmbeddingCache::open(&path, 3).unwrap();
        c.put("x", &[0.1, 0.2, 0.3]).unwrap();
        c.save().unwrap();
        drop(c);
        let again = EmbeddingCache::open(&path, 3).unwrap();
        assert_eq!(&*again.get("x").unwrap(), &[0.1, 0.2, 0.3]);
        assert!(matches!(
            EmbeddingCache::open(&path, 4),
            Err(CacheError::DimMismatch { .. })
        ));
    }

    #[test]
    fn corruption_names_offset() {
        let c = EmbeddingCache::in_memory(2);
        c.put("key", &[1.0, 2.0]).unwrap();
        let mut bytes = c.encode();
        bytes.truncate(bytes.len() - 3);
        match decode(&bytes) {
            Err(CacheError::Corrupt { offset, .. }) => assert_eq!(offset, 18 + 2 + 3),
            other => panic!("unexpected {other:?}"),
        }
        let mut bad = c.encode();
        bad[0] = b'X';
        assert!(matches!(
            decode(&bad),
            Err(CacheError::Corrupt { offset: 0, .. })
        ));
    }

    #[test]
    fn cached_provider_reports_miss_with_hint() {
        let cache = Arc::new(EmbeddingCache::in_memory(2));
        cache
            .put(&text_key("clip", "the cup"), &[1.0, 0.0])
            .unwrap();
        let p = CachedTextEncoder::new(cache, "clip");
        assert_eq!(p.embed("The cup").unwrap(), vec![1.0, 0.0]);
        match p.embed("sofa") {
            Err(EncoderError::Unavailable(msg)) => assert!(msg.contains("retry")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn concurrent_readers_see_whole_vectors() {
        let cache = Arc::new(EmbeddingCache::in_memory(64));
        std::thread::scope(|s| {
            let writer = cache.clone();
            s.spawn(move || {
                for i in 0..200 {
                    writer.put("k", &[i as f32; 64]).unwrap();
                }
            });
            for _ in 0..4 {
                let reader = cache.clone();
                s.spawn(move || {
                    for _ in 0..500 {
                        if let Some(v) = reader.get("k") {
                            assert!(v.iter().all(|x| *x == v[0]));
                        }
                    }
                });
            }
        });
    }

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(
            entries in proptest::collection::btree_map("[a-z:0-9]{1,20}", proptest::collection::vec(any::<f32>(), 5), 0..20)
        ) {
            let c = EmbeddingCache::in_memory(5);
            for (k, v) in &entries {
                c.put(k, v).unwrap();
            }
            let (dim, decoded) = decode(&c.encode()).unwrap();
            prop_assert_eq!(dim, 5);
            prop_assert_eq!(decoded.len(), entries.len());
            for (k, v) in &entries {
                let bits: Vec<u32> = v.iter().map(|x| x.to_bits()).collect();
                let got: Vec<u32> = decoded[k].iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(bits, got);
            }
        }
    }
}
