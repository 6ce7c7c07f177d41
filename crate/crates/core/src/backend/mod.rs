//! Provider interfaces for text embedding, image embedding and conditional
//! image generation.
//!
//! Three implementations ship with the crate: [`synthetic::SyntheticBackend`]
//! (deterministic geometry for tests and scenarios), [`store::FileStore`]
//! (precomputed vectors on disk) and [`remote::RemoteBackend`] (HTTP service).

pub mod remote;
pub mod store;
pub mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::taxonomy::RenderedPrompt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Synthetic,
    FileStore,
    Remote,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Synthetic => "synthetic",
            BackendKind::FileStore => "file-store",
            BackendKind::Remote => "remote",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub id: String,
    pub kind: BackendKind,
    pub embedding_dim: usize,
    pub version: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    Generated,
    Dataset,
}

/// Where a generated image came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageProvenance {
    pub prompt: RenderedPrompt,
    pub seed: u64,
    pub index: u32,
    /// Opaque generator settings, recorded verbatim.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub settings: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub content_id: String,
    pub source: ImageSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<ImageProvenance>,
}

impl ImageRef {
    pub fn dataset(content_id: impl Into<String>) -> Self {
        Self {
            content_id: content_id.into(),
            source: ImageSource::Dataset,
            provenance: None,
        }
    }

    pub fn generated(content_id: impl Into<String>, provenance: ImageProvenance) -> Self {
        Self {
            content_id: content_id.into(),
            source: ImageSource::Generated,
            provenance: Some(provenance),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: RenderedPrompt,
    pub count: u32,
    pub seed: u64,
}

impl GenerationRequest {
    pub fn new(prompt: RenderedPrompt, count: u32, seed: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidConfig(
                "generation count must be positive".into(),
            ));
        }
        Ok(Self {
            prompt,
            count,
            seed,
        })
    }
}

/// Hex SHA-256 of arbitrary bytes; the content id of an image file.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub trait TextEncoder: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn embed_text(&self, prompt: &RenderedPrompt) -> Result<Embedding>;

    fn embed_texts(&self, prompts: &[RenderedPrompt]) -> Result<Vec<Embedding>> {
        prompts.iter().map(|p| self.embed_text(p)).collect()
    }
}

pub trait ImageEncoder: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn embed_image(&self, image: &ImageRef) -> Result<Embedding>;

    fn embed_images(&self, images: &[ImageRef]) -> Result<Vec<Embedding>> {
        images.iter().map(|i| self.embed_image(i)).collect()
    }
}

pub trait ImageGenerator: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn generate_images(&self, req: &GenerationRequest) -> Result<Vec<ImageRef>>;
}

/// The set of providers a pipeline run draws on.
#[derive(Clone)]
pub struct Backends {
    pub text: Arc<dyn TextEncoder>,
    pub image: Arc<dyn ImageEncoder>,
    pub generator: Option<Arc<dyn ImageGenerator>>,
}

impl Backends {
    /// One object serving all three roles.
    pub fn from_full<B>(backend: Arc<B>) -> Self
    where
        B: TextEncoder + ImageEncoder + ImageGenerator + 'static,
    {
        Self {
            text: backend.clone(),
            image: backend.clone(),
            generator: Some(backend),
        }
    }

    /// Embedding-only provider; generation requests fail.
    pub fn embed_only<B>(backend: Arc<B>) -> Self
    where
        B: TextEncoder + ImageEncoder + 'static,
    {
        Self {
            text: backend.clone(),
            image: backend,
            generator: None,
        }
    }

    pub fn generator(&self) -> Result<&dyn ImageGenerator> {
        self.generator
            .as_deref()
            .ok_or_else(|| Error::GenerationUnsupported(self.text.descriptor().id.clone()))
    }

    pub fn generate_images(&self, req: &GenerationRequest) -> Result<Vec<ImageRef>> {
        self.generator()?.generate_images(req)
    }

    /// Distinct descriptors of the providers, in text/image/generator order.
    pub fn descriptors(&self) -> Vec<BackendDescriptor> {
        let mut out: Vec<BackendDescriptor> = Vec::new();
        let all = [
            Some(self.text.descriptor()),
            Some(self.image.descriptor()),
            self.generator.as_deref().map(|g| g.descriptor()),
        ];
        for d in all.into_iter().flatten() {
            if !out.contains(d) {
                out.push(d.clone());
            }
        }
        out
    }

    /// Wraps every provider so each call that reaches it bumps `counter`.
    /// Batch calls count once per item.
    pub fn counted(self, counter: CallCounter) -> Self {
        Self {
            text: Arc::new(Counted {
                inner: self.text,
                counter: counter.clone(),
            }),
            image: Arc::new(Counted {
                inner: self.image,
                counter: counter.clone(),
            }),
            generator: self.generator.map(|g| {
                Arc::new(Counted {
                    inner: g,
                    counter: counter.clone(),
                }) as Arc<dyn ImageGenerator>
            }),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct CallCounter(Arc<AtomicU64>);

impl CallCounter {
    pub fn get(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }

    fn add(&self, n: usize) {
        self.0.fetch_add(n as u64, Ordering::SeqCst);
    }
}

struct Counted<T: ?Sized> {
    inner: Arc<T>,
    counter: CallCounter,
}

impl TextEncoder for Counted<dyn TextEncoder> {
    fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }

    fn embed_text(&self, prompt: &RenderedPrompt) -> Result<Embedding> {
        self.counter.add(1);
        self.inner.embed_text(prompt)
    }

    fn embed_texts(&self, prompts: &[RenderedPrompt]) -> Result<Vec<Embedding>> {
        self.counter.add(prompts.len());
        self.inner.embed_texts(prompts)
    }
}

impl ImageEncoder for Counted<dyn ImageEncoder> {
    fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }

    fn embed_image(&self, image: &ImageRef) -> Result<Embedding> {
        self.counter.add(1);
        self.inner.embed_image(image)
    }

    fn embed_images(&self, images: &[ImageRef]) -> Result<Vec<Embedding>> {
        self.counter.add(images.len());
        self.inner.embed_images(images)
    }
}

impl ImageGenerator for Counted<dyn ImageGenerator> {
    fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }

    fn generate_images(&self, req: &GenerationRequest) -> Result<Vec<ImageRef>> {
        self.counter.add(1);
        self.inner.generate_images(req)
    }
}

pub(crate) fn check_dim(descriptor: &BackendDescriptor, e: &Embedding) -> Result<()> {
    if e.dim() != descriptor.embedding_dim {
        return Err(Error::DimMismatch {
            expected: descriptor.embedding_dim,
            actual: e.dim(),
        });
    }
    Ok(())
}
