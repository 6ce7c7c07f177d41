//! Deterministic synthetic geometry.
//!
//! Each class has a unit ground-truth direction and, per demographic subgroup,
//! an appearance offset. Text embeddings sit at the class direction pulled
//! toward the majority subgroup's appearance by `bias`; images (generated or
//! dataset) sit at direction + subgroup offset + Gaussian noise of scale
//! `sigma`. All randomness is ChaCha keyed by the configured seed and the
//! content id, so results do not depend on call order or platform.

use std::collections::HashMap;
use std::sync::RwLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    content_hash, BackendDescriptor, BackendKind, GenerationRequest, ImageEncoder,
    ImageGenerator, ImageProvenance, ImageRef, ImageSource, TextEncoder,
};
use crate::dataset::{DatasetManifest, LabeledImage};
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::taxonomy::{AxisId, RenderedPrompt, Taxonomy};

const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClass {
    pub label: String,
    pub direction: Vec<f64>,
    /// One offset per subgroup, in `SyntheticConfig::subgroups` order.
    pub offsets: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    #[serde(default = "default_id")]
    pub id: String,
    #[serde(default = "default_version")]
    pub version: String,
    pub dim: usize,
    pub seed: u64,
    pub sigma: f64,
    /// Fraction of the majority subgroup's offset added to text embeddings.
    pub bias: f64,
    pub majority: String,
    pub target_axis: AxisId,
    pub subgroup_axis: AxisId,
    pub subgroups: Vec<String>,
    pub classes: Vec<SyntheticClass>,
}

fn default_id() -> String {
    "synthetic".into()
}

fn default_version() -> String {
    "1".into()
}

/// Parameters for drawing a random [`SyntheticConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometrySpec {
    #[serde(default = "default_id")]
    pub id: String,
    pub dim: usize,
    pub seed: u64,
    pub sigma: f64,
    pub bias: f64,
    pub majority: String,
    pub target_axis: AxisId,
    pub subgroup_axis: AxisId,
    pub classes: Vec<String>,
    pub subgroups: Vec<String>,
    /// Cosine between each class direction and a shared direction; higher
    /// values make classes harder to separate.
    #[serde(default)]
    pub class_similarity: f64,
    /// Norm of each class/subgroup appearance offset.
    pub offset_scale: f64,
}

impl GeometrySpec {
    pub fn realize(&self) -> Result<SyntheticConfig> {
        if self.dim == 0 {
            return Err(Error::InvalidConfig("dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.class_similarity) {
            return Err(Error::InvalidConfig(
                "class_similarity must be in [0, 1)".into(),
            ));
        }
        let mut rng = ChaCha8Rng::from_seed(derive_seed(self.seed, &["geometry"]));
        let shared = random_unit(&mut rng, self.dim);
        let s = self.class_similarity;
        let r = (1.0 - s * s).sqrt();
        let classes = self
            .classes
            .iter()
            .map(|label| {
                // Gram-Schmidt against `shared` so the cosine is exactly `s`.
                let raw = random_unit(&mut rng, self.dim);
                let proj: f64 = raw.iter().zip(&shared).map(|(a, b)| a * b).sum();
                let orth = unit(raw.iter().zip(&shared).map(|(a, b)| a - proj * b).collect());
                let direction = unit(
                    shared
                        .iter()
                        .zip(&orth)
                        .map(|(a, b)| s * a + r * b)
                        .collect(),
                );
                let offsets = self
                    .subgroups
                    .iter()
                    .map(|_| {
                        random_unit(&mut rng, self.dim)
                            .into_iter()
                            .map(|x| x * self.offset_scale)
                            .collect()
                    })
                    .collect();
                SyntheticClass {
                    label: label.clone(),
                    direction,
                    offsets,
                }
            })
            .collect();
        let cfg = SyntheticConfig {
            id: self.id.clone(),
            version: default_version(),
            dim: self.dim,
            seed: self.seed,
            sigma: self.sigma,
            bias: self.bias,
            majority: self.majority.clone(),
            target_axis: self.target_axis.clone(),
            subgroup_axis: self.subgroup_axis.clone(),
            subgroups: self.subgroups.clone(),
            classes,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
            return unit(v);
        }
    }
}

fn derive_seed(seed: u64, parts: &[&str]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    h.finalize().into()
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return bad(format!("sigma must be finite and nonnegative, got {}", self.sigma));
        }
        if !self.bias.is_finite() {
            return bad("bias must be finite".into());
        }
        if self.classes.is_empty() || self.subgroups.is_empty() {
            return bad("need at least one class and one subgroup".into());
        }
        if !self.subgroups.contains(&self.majority) {
            return bad(format!("majority `{}` is not a subgroup", self.majority));
        }
        for (i, g) in self.subgroups.iter().enumerate() {
            if self.subgroups[..i].contains(g) {
                return bad(format!("duplicate subgroup `{g}`"));
            }
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.direction.len() != self.dim {
                return bad(format!("class `{}` direction has wrong dimension", c.label));
            }
            if c.direction.iter().any(|x| !x.is_finite()) {
                return bad(format!("class `{}` direction is not finite", c.label));
            }
            let n = c.direction.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_TOL {
                return bad(format!("class `{}` direction is not unit (norm {n})", c.label));
            }
            if c.offsets.len() != self.subgroups.len()
                || c.offsets
                    .iter()
                    .any(|o| o.len() != self.dim || o.iter().any(|x| !x.is_finite()))
            {
                return bad(format!("class `{}` needs one finite offset per subgroup", c.label));
            }
            for prev in &self.classes[..i] {
                if prev.label == c.label {
                    return bad(format!("duplicate class `{}`", c.label));
                }
                let cos: f64 = prev.direction.iter().zip(&c.direction).map(|(a, b)| a * b).sum();
                if cos >= 1.0 - UNIT_TOL {
                    return bad(format!(
                        "classes `{}` and `{}` share a direction",
                        prev.label, c.label
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: SyntheticConfig =
            toml::from_str(s).map_err(|e| Error::InvalidConfig(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy)]
struct Appearance {
    class: usize,
    subgroup: usize,
}

pub struct SyntheticBackend {
    config: SyntheticConfig,
    descriptor: BackendDescriptor,
    dataset: RwLock<HashMap<String, Appearance>>,
}

impl SyntheticBackend {
    pub fn new(config: SyntheticConfig) -> Result<Self> {
        config.validate()?;
        // Distinct geometries must never share cache entries.
        let fingerprint = content_hash(toml::to_string(&config).expect("serializable").as_bytes());
        let descriptor = BackendDescriptor {
            id: config.id.clone(),
            kind: BackendKind::Synthetic,
            embedding_dim: config.dim,
            version: format!("{}-{}", config.version, &fingerprint[..12]),
        };
        Ok(Self {
            config,
            descriptor,
            dataset: RwLock::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    fn unavailable(&self, detail: String) -> Error {
        Error::BackendUnavailable {
            backend: self.descriptor.id.clone(),
            detail,
            attempts: 1,
        }
    }

    fn class_index(&self, prompt: &RenderedPrompt) -> Result<usize> {
        let tv = &prompt.target_value;
        if tv.axis != self.config.target_axis {
            return Err(self.unavailable(format!(
                "prompt targets axis `{}`, geometry covers `{}`",
                tv.axis, self.config.target_axis
            )));
        }
        self.config
            .classes
            .iter()
            .position(|c| c.label == tv.label)
            .ok_or_else(|| self.unavailable(format!("no class `{}` in geometry", tv.label)))
    }

    fn subgroup_index(&self, label: &str) -> Option<usize> {
        self.config.subgroups.iter().position(|g| g == label)
    }

    fn majority_index(&self) -> usize {
        self.subgroup_index(&self.config.majority)
            .expect("validated majority")
    }

    /// Subgroup depicted by a generated image. Like a real generator this
    /// depends only on what it was asked for: a subgroup named in the prompt
    /// text (whole words), otherwise a draw from text, seed and index.
    fn generated_subgroup(&self, prov: &ImageProvenance) -> usize {
        let words: Vec<String> = prov
            .prompt
            .text
            .split_whitespace()
            .map(str::to_lowercase)
            .collect();
        let named = self.config.subgroups.iter().position(|g| {
            let needle: Vec<String> = g.split_whitespace().map(str::to_lowercase).collect();
            words.windows(needle.len()).any(|w| w == needle.as_slice())
        });
        if let Some(g) = named {
            return g;
        }
        let bytes = derive_seed(
            prov.seed,
            &["subgroup", &prov.prompt.text, &prov.index.to_string()],
        );
        let draw = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        (draw % self.config.subgroups.len() as u64) as usize
    }

    fn appearance_embedding(&self, a: Appearance, content_id: &str) -> Result<Embedding> {
        let class = &self.config.classes[a.class];
        let offset = &class.offsets[a.subgroup];
        let mut rng = ChaCha8Rng::from_seed(derive_seed(self.config.seed, &["noise", content_id]));
        let sigma = self.config.sigma;
        Embedding::new(
            class
                .direction
                .iter()
                .zip(offset)
                .map(|(d, o)| {
                    let n: f64 = rng.sample(StandardNormal);
                    d + o + sigma * n
                })
                .collect(),
        )
    }

    /// Makes dataset images from `manifest` embeddable. Rows lacking a known
    /// target or subgroup label are skipped.
    pub fn register_dataset(&self, manifest: &DatasetManifest) -> usize {
        let mut map = self.dataset.write().expect("dataset lock");
        let mut n = 0;
        for row in &manifest.images {
            let class = row.label(&self.config.target_axis).and_then(|cv| {
                self.config.classes.iter().position(|c| c.label == cv.label)
            });
            let subgroup = row
                .label(&self.config.subgroup_axis)
                .and_then(|cv| self.subgroup_index(&cv.label));
            if let (Some(class), Some(subgroup)) = (class, subgroup) {
                map.insert(row.image.content_id.clone(), Appearance { class, subgroup });
                n += 1;
            }
        }
        n
    }

    /// Draws a labeled dataset: `per_class` images per class, split across
    /// subgroups by `weights` (largest-remainder rounding), and registers it.
    pub fn sample_dataset(
        &self,
        taxonomy: &Taxonomy,
        name: &str,
        per_class: usize,
        weights: &[f64],
    ) -> Result<DatasetManifest> {
        if weights.len() != self.config.subgroups.len()
            || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::InvalidConfig(
                "need one nonnegative weight per subgroup".into(),
            ));
        }
        let quotas = apportion(per_class, weights);
        let mut images = Vec::with_capacity(per_class * self.config.classes.len());
        for class in &self.config.classes {
            let cv = taxonomy.class_value(&self.config.target_axis, &class.label)?;
            let mut i = 0usize;
            for (g, &quota) in quotas.iter().enumerate() {
                let gv = taxonomy.class_value(&self.config.subgroup_axis, &self.config.subgroups[g])?;
                for _ in 0..quota {
                    let key = format!("dataset\0{}\0{}\0{}", self.config.seed, class.label, i);
                    images.push(LabeledImage::new(
                        ImageRef::dataset(content_hash(key.as_bytes())),
                        format!("{}/{}/{:05}.png", name, casing_path(&class.label), i),
                        vec![cv.clone(), gv.clone()],
                    )?);
                    i += 1;
                }
            }
        }
        let manifest = DatasetManifest::new(name, images, taxonomy)?;
        self.register_dataset(&manifest);
        Ok(manifest)
    }
}

fn casing_path(label: &str) -> String {
    label.to_lowercase().replace(' ', "_")
}

fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

impl TextEncoder for SyntheticBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn embed_text(&self, prompt: &RenderedPrompt) -> Result<Embedding> {
        let class = &self.config.classes[self.class_index(prompt)?];
        let pull = &class.offsets[self.majority_index()];
        let bias = self.config.bias;
        Embedding::new(
            class
                .direction
                .iter()
                .zip(pull)
                .map(|(d, o)| d + bias * o)
                .collect(),
        )
    }
}

impl ImageEncoder for SyntheticBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn embed_image(&self, image: &ImageRef) -> Result<Embedding> {
        let appearance = match (&image.source, &image.provenance) {
            (ImageSource::Generated, Some(prov)) => Appearance {
                class: self.class_index(&prov.prompt)?,
                subgroup: self.generated_subgroup(prov),
            },
            _ => *self
                .dataset
                .read()
                .expect("dataset lock")
                .get(&image.content_id)
                .ok_or_else(|| {
                    self.unavailable(format!("unknown image `{}`", image.content_id))
                })?,
        };
        self.appearance_embedding(appearance, &image.content_id)
    }
}

impl ImageGenerator for SyntheticBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn generate_images(&self, req: &GenerationRequest) -> Result<Vec<ImageRef>> {
        if req.count == 0 {
            return Err(Error::InvalidConfig("generation count must be positive".into()));
        }
        self.class_index(&req.prompt)?;
        Ok((0..req.count)
            .map(|index| {
                let key = format!("{}\0{}\0{}", req.prompt.text, req.seed, index);
                ImageRef::generated(
                    content_hash(key.as_bytes()),
                    ImageProvenance {
                        prompt: req.prompt.clone(),
                        seed: req.seed,
                        index,
                        settings: Default::default(),
                    },
                )
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::cosine;

    fn basis(dim: usize, i: usize, scale: f64) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = scale;
        v
    }

    /// Two classes along e0/e1, subgroup offsets on e2..e5 (all orthogonal).
    fn orthogonal_config(bias: f64, sigma: f64, m: f64) -> SyntheticConfig {
        SyntheticConfig {
            id: "synthetic".into(),
            version: "1".into(),
            dim: 16,
            seed: 3,
            sigma,
            bias,
            majority: "White".into(),
            target_axis: "profession".into(),
            subgroup_axis: "race4".into(),
            subgroups: vec!["White".into(), "Black".into()],
            classes: vec![
                SyntheticClass {
                    label: "Doctor".into(),
                    direction: basis(16, 0, 1.0),
                    offsets: vec![basis(16, 2, m), basis(16, 3, m)],
                },
                SyntheticClass {
                    label: "Pilot".into(),
                    direction: basis(16, 1, 1.0),
                    offsets: vec![basis(16, 4, m), basis(16, 5, m)],
                },
            ],
        }
    }

    fn prompt(tax: &Taxonomy, label: &str, augment: &str) -> RenderedPrompt {
        let cv = tax.class_value(&"profession".into(), label).unwrap();
        tax.render_prompts(&cv, &augment.into()).unwrap().remove(0)
    }

    #[test]
    fn text_is_deterministic_with_configured_dim() {
        let tax = Taxonomy::default();
        let b = SyntheticBackend::new(orthogonal_config(0.4, 0.1, 1.0)).unwrap();
        let p = prompt(&tax, "Doctor", "profession");
        let a = b.embed_text(&p).unwrap();
        assert_eq!(a, b.embed_text(&p).unwrap());
        assert_eq!(a.dim(), 16);
    }

    #[test]
    fn degenerate_geometry_images_equal_direction() {
        let tax = Taxonomy::default();
        let b = SyntheticBackend::new(orthogonal_config(0.0, 0.0, 0.0)).unwrap();
        let p = prompt(&tax, "Pilot", "race4");
        let req = GenerationRequest::new(p, 5, 11).unwrap();
        for r in b.generate_images(&req).unwrap() {
            assert_eq!(b.embed_image(&r).unwrap().values(), basis(16, 1, 1.0).as_slice());
        }
        let m = b.sample_dataset(&tax, "deg", 4, &[1.0, 1.0]).unwrap();
        for row in &m.images {
            let e = b.embed_image(&row.image).unwrap();
            let dir = if row.label(&"profession".into()).unwrap().label == "Doctor" { 0 } else { 1 };
            assert_eq!(e.values(), basis(16, dir, 1.0).as_slice());
        }
    }

    #[test]
    fn majority_bias_favours_majority_queries() {
        // With orthogonal offsets of norm m and bias b, the analytic cosines are
        // (1 + b m^2) / (sqrt(1 + b^2 m^2) sqrt(1 + m^2)) for the majority and
        // 1 / (sqrt(1 + b^2 m^2) sqrt(1 + m^2)) for the minority.
        let tax = Taxonomy::default();
        let (bias, m) = (0.4, 1.0);
        let b = SyntheticBackend::new(orthogonal_config(bias, 0.0, m)).unwrap();
        let m_data = b.sample_dataset(&tax, "bias", 2, &[1.0, 1.0]).unwrap();
        let text = b.embed_text(&prompt(&tax, "Doctor", "profession")).unwrap();
        let denom = (1.0 + bias * bias * m * m).sqrt() * (1.0 + m * m).sqrt();
        let mut seen = 0;
        for row in &m_data.images {
            if row.label(&"profession".into()).unwrap().label != "Doctor" {
                continue;
            }
            let c = cosine(&text, &b.embed_image(&row.image).unwrap()).unwrap();
            let expected = match row.label(&"race4".into()).unwrap().label.as_str() {
                "White" => (1.0 + bias * m * m) / denom,
                _ => 1.0 / denom,
            };
            assert!((c - expected).abs() < 1e-12);
            seen += 1;
        }
        assert_eq!(seen, 2);
        assert!((1.0 / denom) < (1.0 + bias * m * m) / denom);
    }

    #[test]
    fn generation_ids_deterministic_and_distinct() {
        let tax = Taxonomy::default();
        let b = SyntheticBackend::new(orthogonal_config(0.4, 0.1, 1.0)).unwrap();
        let p = prompt(&tax, "Doctor", "gender");
        let five = b.generate_images(&GenerationRequest::new(p.clone(), 5, 7).unwrap()).unwrap();
        assert_eq!(five.len(), 5);
        let mut ids: Vec<_> = five.iter().map(|r| r.content_id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 5);
        assert!(five.iter().all(|r| r.provenance.is_some()));
        let one = |seed| {
            b.generate_images(&GenerationRequest::new(p.clone(), 1, seed).unwrap())
                .unwrap()
        };
        assert_eq!(one(7), one(7));
        assert_eq!(one(7)[0].content_id, five[0].content_id);
        assert_ne!(one(8)[0].content_id, one(7)[0].content_id);
    }

    #[test]
    fn unknown_dataset_image_is_unavailable() {
        let b = SyntheticBackend::new(orthogonal_config(0.4, 0.1, 1.0)).unwrap();
        assert!(matches!(
            b.embed_image(&ImageRef::dataset("ab".repeat(32))),
            Err(Error::BackendUnavailable { .. })
        ));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = orthogonal_config(0.4, 0.1, 1.0);
        c.classes[1].direction = c.classes[0].direction.clone();
        assert!(matches!(SyntheticBackend::new(c), Err(Error::InvalidConfig(_))));
        let mut c = orthogonal_config(0.4, -0.1, 1.0);
        assert!(SyntheticBackend::new(c.clone()).is_err());
        c.sigma = 0.1;
        c.classes[0].direction[0] = 2.0;
        assert!(SyntheticBackend::new(c).is_err());
        let mut c = orthogonal_config(0.4, 0.1, 1.0);
        c.majority = "Asian".into();
        assert!(SyntheticBackend::new(c).is_err());
    }

    #[test]
    fn realized_geometry_is_valid_and_seeded() {
        let spec = GeometrySpec {
            id: "synthetic".into(),
            dim: 16,
            seed: 5,
            sigma: 0.1,
            bias: 0.4,
            majority: "White".into(),
            target_axis: "profession".into(),
            subgroup_axis: "race4".into(),
            classes: vec!["Chef".into(), "Doctor".into(), "Engineer".into()],
            subgroups: vec!["White".into(), "Black".into(), "Indian".into(), "Asian".into()],
            class_similarity: 0.6,
            offset_scale: 0.8,
        };
        let a = spec.realize().unwrap();
        assert_eq!(a, spec.realize().unwrap());
        let d = &a.classes;
        let cos: f64 = d[0].direction.iter().zip(&d[1].direction).map(|(x, y)| x * y).sum();
        // Both classes share cosine 0.6 with a common direction plus random residuals.
        assert!(cos > 0.0 && cos < 1.0);
        let norm: f64 = d[2].offsets[3].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 0.8).abs() < 1e-12);
    }

    #[test]
    fn apportion_largest_remainder() {
        assert_eq!(apportion(10, &[0.7, 0.1, 0.1, 0.1]), [7, 1, 1, 1]);
        assert_eq!(apportion(10, &[1.0, 1.0, 1.0]), [4, 3, 3]);
        assert_eq!(apportion(0, &[1.0]), [0]);
    }
}
