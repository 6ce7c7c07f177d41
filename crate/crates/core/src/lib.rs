//! Zero-shot classification with prototypes that fuse text embeddings and
//! embeddings of generated images, plus the dataset, caching and reporting
//! plumbing around it.

pub mod backend;
pub mod cache;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod taxonomy;

pub use backend::{
    BackendDescriptor, BackendKind, Backends, CallCounter, GenerationRequest, ImageEncoder,
    ImageGenerator, ImageProvenance, ImageRef, ImageSource, TextEncoder,
};
pub use cache::{Cache, CacheKey, CachePayload};
pub use dataset::{DatasetManifest, LabeledImage};
pub use embedding::{cosine, fuse, l2_normalize, mean_embedding, Embedding, FusionWeight};
pub use error::{Error, Result};
pub use pipeline::{
    BuildOptions, ClassPrototype, LabeledQuery, MethodRun, Prediction, PrototypeMode,
    PrototypeParts, TextPolicy, WeightScanResult,
};
pub use report::{EvaluationCell, EvaluationReport, PerClassRow, ReportFormat};
pub use taxonomy::{AxisId, ClassValue, DemographicAxis, PromptTemplate, RenderedPrompt, Taxonomy};
