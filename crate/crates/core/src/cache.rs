//! Content-addressed, write-once cache for embeddings and generated image
//! lists.
//!
//! Layout: `<root>/<backend-id>/<version>/<first 2 hex>/<hash>.bin`, plus a
//! flat `<root>/index.tsv` appended on every new record. Records are written
//! to a temp file and hard-linked into place, so readers never see a partial
//! record and concurrent writers of the same key cannot overwrite each other.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{
    BackendDescriptor, Backends, GenerationRequest, ImageEncoder, ImageGenerator, ImageRef,
    TextEncoder,
};
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::taxonomy::RenderedPrompt;

const MAGIC: &[u8; 4] = b"FPC1";
const KIND_EMBEDDING: u8 = 0;
const KIND_IMAGES: u8 = 1;
const INDEX: &str = "index.tsv";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    pub backend: String,
    pub version: String,
    pub hash: String,
}

impl CacheKey {
    pub fn new(backend: &str, version: &str, hash: &str) -> Result<Self> {
        let token_ok = |s: &str| {
            !s.is_empty()
                && s != "."
                && s != ".."
                && s.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c))
        };
        if !token_ok(backend) || !token_ok(version) {
            return Err(Error::InvalidConfig(format!(
                "cache key components must be [A-Za-z0-9._-]: `{backend}` / `{version}`"
            )));
        }
        if hash.len() < 2 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(Error::InvalidConfig(format!("cache hash `{hash}` is not hex")));
        }
        Ok(Self {
            backend: backend.into(),
            version: version.into(),
            hash: hash.to_ascii_lowercase(),
        })
    }

    /// Key for `descriptor` over a namespaced digest of `parts`.
    pub fn derive(descriptor: &BackendDescriptor, namespace: &str, parts: &[&[u8]]) -> Result<Self> {
        let mut h = Sha256::new();
        h.update(namespace.as_bytes());
        for p in parts {
            h.update([0u8]);
            h.update((p.len() as u64).to_le_bytes());
            h.update(p);
        }
        Self::new(&descriptor.id, &descriptor.version, &hex::encode(h.finalize()))
    }

    fn relative(&self) -> PathBuf {
        PathBuf::from(&self.backend)
            .join(&self.version)
            .join(&self.hash[..2])
            .join(format!("{}.bin", self.hash))
    }
}

impl std::fmt::Display for CacheKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.backend, self.version, self.hash)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CachePayload {
    Embedding(Embedding),
    Images(Vec<ImageRef>),
}

impl CachePayload {
    fn encode(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        match self {
            CachePayload::Embedding(e) => {
                out.push(KIND_EMBEDDING);
                out.extend_from_slice(&(e.dim() as u32).to_le_bytes());
                for v in e.values() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            CachePayload::Images(refs) => {
                out.push(KIND_IMAGES);
                let json = serde_json::to_vec(refs)?;
                out.extend_from_slice(&(json.len() as u32).to_le_bytes());
                out.extend_from_slice(&json);
            }
        }
        Ok(out)
    }

    fn decode(bytes: &[u8], key: &CacheKey) -> Result<Self> {
        let corrupt = || Error::Parse {
            line: 0,
            message: format!("corrupt cache record {key}"),
        };
        if bytes.len() < 9 || &bytes[..4] != MAGIC {
            return Err(corrupt());
        }
        let n = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let body = &bytes[9..];
        match bytes[4] {
            KIND_EMBEDDING if body.len() == n * 8 => {
                let values = body
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Ok(CachePayload::Embedding(Embedding::new(values)?))
            }
            KIND_IMAGES if body.len() == n => Ok(CachePayload::Images(serde_json::from_slice(body)?)),
            _ => Err(corrupt()),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CachePayload::Embedding(_) => "embedding",
            CachePayload::Images(_) => "images",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub key: CacheKey,
    pub kind: String,
    pub created_at: u64,
}

#[derive(Debug)]
pub struct Cache {
    root: PathBuf,
    write_lock: Mutex<()>,
}

impl Cache {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self {
            root,
            write_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn get(&self, key: &CacheKey) -> Result<CachePayload> {
        let path = self.root.join(key.relative());
        match fs::read(&path) {
            Ok(bytes) => CachePayload::decode(&bytes, key),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                Err(Error::CacheMiss(key.to_string()))
            }
            Err(e) => Err(Error::io(path, e)),
        }
    }

    /// Idempotent for identical payloads; a differing payload at an existing
    /// key is a `PayloadConflict`.
    pub fn put(&self, key: &CacheKey, payload: &CachePayload) -> Result<()> {
        let bytes = payload.encode()?;
        let path = self.root.join(key.relative());
        let dir = path.parent().expect("record has a parent");
        let _guard = self.write_lock.lock().expect("cache lock");
        if let Some(existing) = read_existing(&path)? {
            return check_same(&existing, &bytes, key);
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let nanos = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or(0);
        let tmp = dir.join(format!(".{}.{}.{nanos}.tmp", key.hash, std::process::id()));
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        let linked = fs::hard_link(&tmp, &path);
        let _ = fs::remove_file(&tmp);
        match linked {
            Ok(()) => self.append_index(key, payload),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let existing = read_existing(&path)?.unwrap_or_default();
                check_same(&existing, &bytes, key)
            }
            Err(e) => Err(Error::io(path, e)),
        }
    }

    fn append_index(&self, key: &CacheKey, payload: &CachePayload) -> Result<()> {
        let created_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let path = self.root.join(INDEX);
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let line = format!(
            "{}\t{}\t{}\t{}\t{created_at}\n",
            key.backend,
            key.version,
            key.hash,
            payload.kind()
        );
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))
    }

    pub fn entries(&self) -> Result<Vec<IndexEntry>> {
        let path = self.root.join(INDEX);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(path, e)),
        };
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.is_empty())
            .map(|(i, l)| {
                let f: Vec<&str> = l.split('\t').collect();
                let bad = || Error::Parse {
                    line: i + 1,
                    message: "malformed cache index line".into(),
                };
                if f.len() != 5 {
                    return Err(bad());
                }
                Ok(IndexEntry {
                    key: CacheKey::new(f[0], f[1], f[2])?,
                    kind: f[3].into(),
                    created_at: f[4].parse().map_err(|_| bad())?,
                })
            })
            .collect()
    }

    /// Removes everything, or only one backend's records. Returns the number
    /// of index entries dropped.
    pub fn purge(&self, backend: Option<&str>) -> Result<usize> {
        let _guard = self.write_lock.lock().expect("cache lock");
        let entries = self.entries()?;
        let (drop, keep): (Vec<_>, Vec<_>) = entries
            .into_iter()
            .partition(|e| backend.is_none_or(|b| e.key.backend == b));
        match backend {
            Some(b) => {
                let dir = self.root.join(b);
                if dir.exists() {
                    fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                }
            }
            None => {
                for entry in fs::read_dir(&self.root).map_err(|e| Error::io(&self.root, e))? {
                    let p = entry.map_err(|e| Error::io(&self.root, e))?.path();
                    let res = if p.is_dir() {
                        fs::remove_dir_all(&p)
                    } else {
                        fs::remove_file(&p)
                    };
                    res.map_err(|e| Error::io(&p, e))?;
                }
            }
        }
        let index = self.root.join(INDEX);
        if backend.is_some() {
            let text: String = keep
                .iter()
                .map(|e| {
                    format!(
                        "{}\t{}\t{}\t{}\t{}\n",
                        e.key.backend, e.key.version, e.key.hash, e.kind, e.created_at
                    )
                })
                .collect();
            fs::write(&index, text).map_err(|e| Error::io(&index, e))?;
        }
        Ok(drop.len())
    }
}

fn read_existing(path: &Path) -> Result<Option<Vec<u8>>> {
    match fs::read(path) {
        Ok(b) => Ok(Some(b)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn check_same(existing: &[u8], new: &[u8], key: &CacheKey) -> Result<()> {
    if existing == new {
        Ok(())
    } else {
        Err(Error::PayloadConflict(key.to_string()))
    }
}

impl Backends {
    /// Routes every provider through `cache`; hits never reach the provider.
    pub fn cached(self, cache: Arc<Cache>) -> Self {
        Self {
            text: Arc::new(CachedText {
                inner: self.text,
                cache: cache.clone(),
            }),
            image: Arc::new(CachedImage {
                inner: self.image,
                cache: cache.clone(),
            }),
            generator: self.generator.map(|g| {
                Arc::new(CachedGenerator { inner: g, cache }) as Arc<dyn ImageGenerator>
            }),
        }
    }
}

fn cached_embeddings<T>(
    cache: &Cache,
    keys: Vec<CacheKey>,
    items: &[T],
    compute: impl FnOnce(&[T]) -> Result<Vec<Embedding>>,
) -> Result<Vec<Embedding>>
where
    T: Clone,
{
    let mut out: Vec<Option<Embedding>> = Vec::with_capacity(items.len());
    let mut missing = Vec::new();
    for (i, k) in keys.iter().enumerate() {
        match cache.get(k) {
            Ok(CachePayload::Embedding(e)) => out.push(Some(e)),
            Ok(_) => return Err(Error::PayloadConflict(k.to_string())),
            Err(Error::CacheMiss(_)) => {
                out.push(None);
                missing.push(i);
            }
            Err(e) => return Err(e),
        }
    }
    if !missing.is_empty() {
        let todo: Vec<T> = missing.iter().map(|&i| items[i].clone()).collect();
        let fresh = compute(&todo)?;
        for (&i, e) in missing.iter().zip(fresh) {
            cache.put(&keys[i], &CachePayload::Embedding(e.clone()))?;
            out[i] = Some(e);
        }
    }
    Ok(out.into_iter().map(|e| e.expect("filled")).collect())
}

struct CachedText {
    inner: Arc<dyn TextEncoder>,
    cache: Arc<Cache>,
}

impl CachedText {
    fn key(&self, p: &RenderedPrompt) -> Result<CacheKey> {
        CacheKey::derive(self.inner.descriptor(), "text", &[p.text.as_bytes()])
    }
}

impl TextEncoder for CachedText {
    fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }

    fn embed_text(&self, prompt: &RenderedPrompt) -> Result<Embedding> {
        Ok(self.embed_texts(std::slice::from_ref(prompt))?.remove(0))
    }

    fn embed_texts(&self, prompts: &[RenderedPrompt]) -> Result<Vec<Embedding>> {
        let keys = prompts.iter().map(|p| self.key(p)).collect::<Result<_>>()?;
        cached_embeddings(&self.cache, keys, prompts, |todo| self.inner.embed_texts(todo))
    }
}

struct CachedImage {
    inner: Arc<dyn ImageEncoder>,
    cache: Arc<Cache>,
}

impl ImageEncoder for CachedImage {
    fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }

    fn embed_image(&self, image: &ImageRef) -> Result<Embedding> {
        Ok(self.embed_images(std::slice::from_ref(image))?.remove(0))
    }

    fn embed_images(&self, images: &[ImageRef]) -> Result<Vec<Embedding>> {
        let keys = images
            .iter()
            .map(|i| CacheKey::derive(self.inner.descriptor(), "image", &[i.content_id.as_bytes()]))
            .collect::<Result<_>>()?;
        cached_embeddings(&self.cache, keys, images, |todo| self.inner.embed_images(todo))
    }
}

struct CachedGenerator {
    inner: Arc<dyn ImageGenerator>,
    cache: Arc<Cache>,
}

impl ImageGenerator for CachedGenerator {
    fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }

    fn generate_images(&self, req: &GenerationRequest) -> Result<Vec<ImageRef>> {
        let key = CacheKey::derive(
            self.inner.descriptor(),
            "generate",
            &[
                req.prompt.text.as_bytes(),
                &req.count.to_le_bytes(),
                &req.seed.to_le_bytes(),
            ],
        )?;
        match self.cache.get(&key) {
            // Images depend only on the key; provenance follows the caller.
            Ok(CachePayload::Images(refs)) => Ok(refs
                .into_iter()
                .map(|mut r| {
                    if let Some(p) = &mut r.provenance {
                        p.prompt = req.prompt.clone();
                    }
                    r
                })
                .collect()),
            Ok(_) => Err(Error::PayloadConflict(key.to_string())),
            Err(Error::CacheMiss(_)) => {
                let refs = self.inner.generate_images(req)?;
                self.cache.put(&key, &CachePayload::Images(refs.clone()))?;
                Ok(refs)
            }
            Err(e) => Err(e),
        }
    }
}
