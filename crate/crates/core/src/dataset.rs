//! Labeled dataset manifests.
//!
//! One record per line, UTF-8:
//!
//! ```text
//! <sha256> <relpath> profession=Doctor race7=East Asian gender=Male age=30-39
//! ```
//!
//! Values may contain spaces; a new pair starts at the next token of the form
//! `<known axis>=`. Paths may not contain whitespace. Blank lines and lines
//! starting with `#` are ignored.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::backend::ImageRef;
use crate::error::{Error, Result};
use crate::taxonomy::{AxisId, ClassValue, Taxonomy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub image: ImageRef,
    pub relpath: String,
    labels: Vec<ClassValue>,
}

impl LabeledImage {
    /// At most one label per axis.
    pub fn new(image: ImageRef, relpath: impl Into<String>, labels: Vec<ClassValue>) -> Result<Self> {
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].iter().any(|o| o.axis == l.axis) {
                return Err(Error::InvalidConfig(format!(
                    "image {} has two labels on axis `{}`",
                    image.content_id, l.axis
                )));
            }
        }
        Ok(Self {
            image,
            relpath: relpath.into(),
            labels,
        })
    }

    pub fn label(&self, axis: &AxisId) -> Option<&ClassValue> {
        self.labels.iter().find(|l| &l.axis == axis)
    }

    pub fn labels(&self) -> &[ClassValue] {
        &self.labels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub images: Vec<LabeledImage>,
    /// Per-value counts in canonical axis/value order; zero counts omitted.
    pub counts: IndexMap<ClassValue, usize>,
}

impl DatasetManifest {
    /// Validates every label against `taxonomy` and computes counts.
    pub fn new(name: impl Into<String>, images: Vec<LabeledImage>, taxonomy: &Taxonomy) -> Result<Self> {
        for img in &images {
            for l in img.labels() {
                taxonomy.rank(l)?;
            }
        }
        let mut counts = IndexMap::new();
        for axis in taxonomy.axes() {
            for cv in axis.class_values() {
                let n = images.iter().filter(|i| i.label(&axis.id) == Some(&cv)).count();
                if n > 0 {
                    counts.insert(cv, n);
                }
            }
        }
        Ok(Self {
            name: name.into(),
            images,
            counts,
        })
    }

    pub fn count(&self, value: &ClassValue) -> usize {
        self.counts.get(value).copied().unwrap_or(0)
    }

    pub fn to_manifest_string(&self, taxonomy: &Taxonomy) -> String {
        let mut out = String::new();
        for img in &self.images {
            out.push_str(&img.image.content_id);
            out.push(' ');
            out.push_str(&img.relpath);
            // Labels in canonical axis order.
            for axis in taxonomy.axes() {
                if let Some(l) = img.label(&axis.id) {
                    out.push_str(&format!(" {}={}", l.axis, l.label));
                }
            }
            out.push('\n');
        }
        out
    }
}

fn is_sha256_hex(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

pub fn ingest_str(text: &str, name: &str, taxonomy: &Taxonomy) -> Result<DatasetManifest> {
    let mut images = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let perr = |m: String| Error::Parse {
            line: lineno,
            message: m,
        };
        let mut tokens = trimmed.split_whitespace();
        let hash = tokens.next().expect("non-empty line");
        if !is_sha256_hex(hash) {
            return Err(perr(format!("`{hash}` is not a lowercase hex sha256")));
        }
        let relpath = tokens
            .next()
            .ok_or_else(|| perr("missing relative path".into()))?;

        let mut pairs: Vec<(String, String)> = Vec::new();
        for tok in tokens {
            let starts_pair = tok
                .split_once('=')
                .filter(|(axis, _)| taxonomy.axis(&AxisId::new(*axis)).is_ok());
            match (starts_pair, pairs.last_mut()) {
                (Some((axis, value)), _) => pairs.push((axis.to_string(), value.to_string())),
                (None, Some((_, value))) => {
                    value.push(' ');
                    value.push_str(tok);
                }
                (None, None) => {
                    return Err(match tok.split_once('=') {
                        Some((axis, _)) => Error::UnknownAxis(axis.to_string()),
                        None => perr(format!("expected `axis=value`, got `{tok}`")),
                    })
                }
            }
        }
        if pairs.is_empty() {
            return Err(perr("record has no labels".into()));
        }
        let labels = pairs
            .into_iter()
            .map(|(axis, value)| taxonomy.class_value(&AxisId::new(axis), &value))
            .collect::<Result<Vec<_>>>()?;
        let img = LabeledImage::new(ImageRef::dataset(hash), relpath, labels)
            .map_err(|e| perr(e.to_string()))?;
        images.push(img);
    }
    if images.is_empty() {
        return Err(Error::Parse {
            line: 0,
            message: "manifest has no records".into(),
        });
    }
    DatasetManifest::new(name, images, taxonomy)
}

pub fn ingest(path: impl AsRef<Path>, taxonomy: &Taxonomy) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    ingest_str(&text, &name, taxonomy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub fractions: IndexMap<String, f64>,
    pub included: usize,
    /// Rows without a label on the axis.
    pub excluded: usize,
}

pub fn demographic_distribution(
    manifest: &DatasetManifest,
    taxonomy: &Taxonomy,
    axis: &AxisId,
) -> Result<Distribution> {
    let ax = taxonomy.axis(axis)?;
    let included = manifest.images.iter().filter(|i| i.label(axis).is_some()).count();
    if included == 0 {
        return Err(Error::NoLabeledRows(axis.to_string()));
    }
    let fractions = ax
        .class_values()
        .map(|cv| {
            let n = manifest.count(&cv);
            (cv.label, n as f64 / included as f64)
        })
        .collect();
    Ok(Distribution {
        fractions,
        included,
        excluded: manifest.images.len() - included,
    })
}
