//! HTTP client for a remote embedding/generation service.
//!
//! Wire contract (JSON bodies):
//!
//! ```text
//! POST /v1/embed_text  {"texts": [..]}        -> {"dim": n, "embeddings": [[..], ..]}
//! POST /v1/embed_image {"content_ids": [..]}  -> {"dim": n, "embeddings": [[..], ..]}
//! POST /v1/generate    {"prompt": s, "count": n, "seed": n} -> {"content_ids": [..]}
//! ```
//!
//! Transport failures and 5xx responses are retried; in-flight requests are
//! bounded by `max_in_flight`.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    check_dim, BackendDescriptor, BackendKind, GenerationRequest, ImageEncoder, ImageGenerator,
    ImageProvenance, ImageRef, TextEncoder,
};
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::taxonomy::RenderedPrompt;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub id: String,
    #[serde(default = "default_version")]
    pub version: String,
    pub endpoint: String,
    pub dim: usize,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Generator settings held by the service; recorded into provenance only.
    #[serde(default)]
    pub generation_settings: BTreeMap<String, String>,
}

fn default_version() -> String {
    "1".into()
}
fn default_in_flight() -> usize {
    4
}
fn default_retries() -> u32 {
    2
}
fn default_batch() -> usize {
    64
}
fn default_timeout() -> u64 {
    120
}

impl RemoteConfig {
    pub fn new(id: impl Into<String>, endpoint: impl Into<String>, dim: usize) -> Self {
        Self {
            id: id.into(),
            version: default_version(),
            endpoint: endpoint.into(),
            dim,
            max_in_flight: default_in_flight(),
            retries: default_retries(),
            batch_size: default_batch(),
            timeout_secs: default_timeout(),
            generation_settings: BTreeMap::new(),
        }
    }
}

#[derive(Serialize)]
struct EmbedTextRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Serialize)]
struct EmbedImageRequest<'a> {
    content_ids: &'a [&'a str],
}

#[derive(Serialize)]
struct GenerateRequestBody<'a> {
    prompt: &'a str,
    count: u32,
    seed: u64,
}

#[derive(Deserialize)]
struct EmbedResponse {
    dim: usize,
    embeddings: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct GenerateResponse {
    content_ids: Vec<String>,
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().expect("semaphore");
        while *p == 0 {
            p = self.cv.wait(p).expect("semaphore");
        }
        *p -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore") += 1;
        self.0.cv.notify_one();
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    descriptor: BackendDescriptor,
    client: reqwest::blocking::Client,
    gate: Semaphore,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self> {
        if config.dim == 0 || config.max_in_flight == 0 || config.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "remote dim, max_in_flight and batch_size must be positive".into(),
            ));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::InvalidConfig(format!("http client: {e}")))?;
        let descriptor = BackendDescriptor {
            id: config.id.clone(),
            kind: BackendKind::Remote,
            embedding_dim: config.dim,
            version: config.version.clone(),
        };
        Ok(Self {
            gate: Semaphore::new(config.max_in_flight),
            config,
            descriptor,
            client,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.endpoint.trim_end_matches('/'), path)
    }

    fn post<B: Serialize, R: for<'de> Deserialize<'de>>(&self, path: &str, body: &B) -> Result<R> {
        let url = self.url(path);
        let attempts_allowed = self.config.retries + 1;
        let mut last = String::new();
        for attempt in 1..=attempts_allowed {
            let outcome = {
                let _permit = self.gate.acquire();
                self.client.post(&url).json(body).send()
            };
            match outcome {
                Ok(resp) if resp.status().is_success() => {
                    return resp.json::<R>().map_err(|e| Error::BackendUnavailable {
                        backend: self.config.id.clone(),
                        detail: format!("malformed response from {url}: {e}"),
                        attempts: attempt,
                    });
                }
                Ok(resp) if resp.status().is_server_error() => {
                    last = format!("{url} returned {}", resp.status());
                }
                Ok(resp) => {
                    return Err(Error::BackendUnavailable {
                        backend: self.config.id.clone(),
                        detail: format!("{url} returned {}", resp.status()),
                        attempts: attempt,
                    });
                }
                Err(e) => last = format!("{url}: {e}"),
            }
            if attempt < attempts_allowed {
                log::warn!("retrying {url} after attempt {attempt}: {last}");
                std::thread::sleep(Duration::from_millis(50 * u64::from(attempt)));
            }
        }
        Err(Error::BackendUnavailable {
            backend: self.config.id.clone(),
            detail: last,
            attempts: attempts_allowed,
        })
    }

    fn embed_batch<B: Serialize>(&self, path: &str, body: &B, expected: usize) -> Result<Vec<Embedding>> {
        let resp: EmbedResponse = self.post(path, body)?;
        if resp.dim != self.config.dim {
            return Err(Error::DimMismatch {
                expected: self.config.dim,
                actual: resp.dim,
            });
        }
        if resp.embeddings.len() != expected {
            return Err(Error::BackendUnavailable {
                backend: self.config.id.clone(),
                detail: format!(
                    "expected {expected} embeddings, got {}",
                    resp.embeddings.len()
                ),
                attempts: 1,
            });
        }
        resp.embeddings
            .into_iter()
            .map(|v| {
                let e = Embedding::new(v)?;
                check_dim(&self.descriptor, &e)?;
                Ok(e)
            })
            .collect()
    }
}

impl TextEncoder for RemoteBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn embed_text(&self, prompt: &RenderedPrompt) -> Result<Embedding> {
        Ok(self.embed_texts(std::slice::from_ref(prompt))?.remove(0))
    }

    fn embed_texts(&self, prompts: &[RenderedPrompt]) -> Result<Vec<Embedding>> {
        let mut out = Vec::with_capacity(prompts.len());
        for chunk in prompts.chunks(self.config.batch_size) {
            let texts: Vec<&str> = chunk.iter().map(|p| p.text.as_str()).collect();
            out.extend(self.embed_batch("/v1/embed_text", &EmbedTextRequest { texts: &texts }, chunk.len())?);
        }
        Ok(out)
    }
}

impl ImageEncoder for RemoteBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn embed_image(&self, image: &ImageRef) -> Result<Embedding> {
        Ok(self.embed_images(std::slice::from_ref(image))?.remove(0))
    }

    fn embed_images(&self, images: &[ImageRef]) -> Result<Vec<Embedding>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(self.config.batch_size) {
            let ids: Vec<&str> = chunk.iter().map(|i| i.content_id.as_str()).collect();
            out.extend(self.embed_batch(
                "/v1/embed_image",
                &EmbedImageRequest { content_ids: &ids },
                chunk.len(),
            )?);
        }
        Ok(out)
    }
}

impl ImageGenerator for RemoteBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn generate_images(&self, req: &GenerationRequest) -> Result<Vec<ImageRef>> {
        let resp: GenerateResponse = self.post(
            "/v1/generate",
            &GenerateRequestBody {
                prompt: &req.prompt.text,
                count: req.count,
                seed: req.seed,
            },
        )?;
        if resp.content_ids.len() != req.count as usize {
            return Err(Error::BackendUnavailable {
                backend: self.config.id.clone(),
                detail: format!(
                    "requested {} images, service returned {}",
                    req.count,
                    resp.content_ids.len()
                ),
                attempts: 1,
            });
        }
        Ok(resp
            .content_ids
            .into_iter()
            .zip(0u32..)
            .map(|(id, index)| {
                ImageRef::generated(
                    id,
                    ImageProvenance {
                        prompt: req.prompt.clone(),
                        seed: req.seed,
                        index,
                        settings: self.config.generation_settings.clone(),
                    },
                )
            })
            .collect())
    }
}
