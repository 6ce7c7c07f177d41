//! Prototype construction, cosine-argmax classification and the fusion-weight
//! scan.
//!
//! A class prototype fuses the mean text embedding of the class's rendered
//! prompts with the mean embedding of images generated from those prompts.
//! The text weight is chosen by an exhaustive scan over the 0.01 grid.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{Backends, GenerationRequest, ImageRef};
use crate::embedding::{fuse, l2_normalize, mean_embedding, Embedding, FusionWeight, ZERO_EPS};
use crate::error::{Error, Result};
use crate::taxonomy::{AxisId, ClassValue, RenderedPrompt, Taxonomy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeMode {
    ClipBaseline,
    StandardD3g,
    AverageImageD3g,
}

impl PrototypeMode {
    pub const ALL: [PrototypeMode; 3] = [
        PrototypeMode::ClipBaseline,
        PrototypeMode::StandardD3g,
        PrototypeMode::AverageImageD3g,
    ];

    pub fn images_per_prompt(self) -> u32 {
        match self {
            PrototypeMode::ClipBaseline => 0,
            PrototypeMode::StandardD3g => 1,
            PrototypeMode::AverageImageD3g => 5,
        }
    }

    pub fn uses_images(self) -> bool {
        self != PrototypeMode::ClipBaseline
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PrototypeMode::ClipBaseline => "clip_baseline",
            PrototypeMode::StandardD3g => "standard_d3g",
            PrototypeMode::AverageImageD3g => "average_image_d3g",
        }
    }

    /// Row label used in rendered tables.
    pub fn display_name(self) -> &'static str {
        match self {
            PrototypeMode::ClipBaseline => "CLIP",
            PrototypeMode::StandardD3g => "Standard D3G",
            PrototypeMode::AverageImageD3g => "Average Image D3G",
        }
    }
}

impl fmt::Display for PrototypeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PrototypeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }
}

/// Which prompts feed a prototype's text part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextPolicy {
    /// Only the plain class prompt.
    PlainPrompt,
    /// Mean over every rendered demographic prompt of the class.
    #[default]
    AveragedPrompts,
}

impl TextPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            TextPolicy::PlainPrompt => "plain-prompt",
            TextPolicy::AveragedPrompts => "averaged-prompts",
        }
    }
}

impl FromStr for TextPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain-prompt" => Ok(TextPolicy::PlainPrompt),
            "averaged-prompts" => Ok(TextPolicy::AveragedPrompts),
            _ => Err(Error::InvalidConfig(format!("unknown text policy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    pub mode: PrototypeMode,
    pub text_policy: TextPolicy,
    pub seed: u64,
    /// Overrides the mode's images-per-prompt when set.
    pub images_per_prompt: Option<u32>,
}

impl BuildOptions {
    pub fn new(mode: PrototypeMode, seed: u64) -> Self {
        Self {
            mode,
            text_policy: TextPolicy::default(),
            seed,
            images_per_prompt: None,
        }
    }

    fn images_per_prompt(&self) -> u32 {
        self.images_per_prompt
            .unwrap_or_else(|| self.mode.images_per_prompt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptProvenance {
    pub prompt: RenderedPrompt,
    pub images: Vec<ImageRef>,
}

/// The unfused halves of a prototype, built once and fused per weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeParts {
    pub class_value: ClassValue,
    pub text_part: Embedding,
    pub image_part: Option<Embedding>,
    pub provenance: Vec<PromptProvenance>,
}

impl PrototypeParts {
    /// Fuses at `w`. Text-only parts ignore `w` and report 1.00.
    pub fn at(&self, w: FusionWeight) -> Result<ClassPrototype> {
        let (fused, w) = match &self.image_part {
            Some(img) => (fuse(&self.text_part, img, w)?, w),
            None => (l2_normalize(&self.text_part)?, FusionWeight::TEXT_ONLY),
        };
        Ok(ClassPrototype {
            class_value: self.class_value.clone(),
            text_part: self.text_part.clone(),
            image_part: self.image_part.clone(),
            fused,
            w,
            provenance: self.provenance.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    pub class_value: ClassValue,
    pub text_part: Embedding,
    pub image_part: Option<Embedding>,
    pub fused: Embedding,
    pub w: FusionWeight,
    pub provenance: Vec<PromptProvenance>,
}

pub fn build_parts(
    taxonomy: &Taxonomy,
    class_value: &ClassValue,
    augment_axis: &AxisId,
    opts: &BuildOptions,
    backends: &Backends,
) -> Result<PrototypeParts> {
    let prompts = taxonomy.render_prompts(class_value, augment_axis)?;
    let text_prompts = match opts.text_policy {
        TextPolicy::AveragedPrompts => prompts.clone(),
        TextPolicy::PlainPrompt => taxonomy.render_prompts(class_value, &class_value.axis)?,
    };
    let text_embeddings = backends.text.embed_texts(&text_prompts)?;
    let text_part = mean_embedding(&text_embeddings)?;

    if !opts.mode.uses_images() {
        return Ok(PrototypeParts {
            class_value: class_value.clone(),
            text_part,
            image_part: None,
            provenance: text_prompts
                .into_iter()
                .map(|prompt| PromptProvenance {
                    prompt,
                    images: Vec::new(),
                })
                .collect(),
        });
    }

    let generator = backends.generator()?;
    let count = opts.images_per_prompt();
    let provenance = prompts
        .into_iter()
        .map(|prompt| {
            let req = GenerationRequest::new(prompt, count, opts.seed)?;
            let images = generator.generate_images(&req)?;
            Ok(PromptProvenance {
                prompt: req.prompt,
                images,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let all_images: Vec<ImageRef> = provenance
        .iter()
        .flat_map(|p| p.images.iter().cloned())
        .collect();
    let image_embeddings = backends.image.embed_images(&all_images)?;
    let image_part = mean_embedding(&image_embeddings)?;
    Ok(PrototypeParts {
        class_value: class_value.clone(),
        text_part,
        image_part: Some(image_part),
        provenance,
    })
}

/// Parts for every value of `target_axis`, in canonical order.
pub fn build_all_parts(
    taxonomy: &Taxonomy,
    target_axis: &AxisId,
    augment_axis: &AxisId,
    opts: &BuildOptions,
    backends: &Backends,
) -> Result<Vec<PrototypeParts>> {
    if opts.mode.uses_images() {
        backends.generator()?;
    }
    taxonomy.template(target_axis, augment_axis)?;
    let classes: Vec<ClassValue> = taxonomy.axis(target_axis)?.class_values().collect();
    classes
        .par_iter()
        .map(|cv| build_parts(taxonomy, cv, augment_axis, opts, backends))
        .collect()
}

pub fn build_prototype(
    taxonomy: &Taxonomy,
    class_value: &ClassValue,
    augment_axis: &AxisId,
    opts: &BuildOptions,
    w: FusionWeight,
    backends: &Backends,
) -> Result<ClassPrototype> {
    build_parts(taxonomy, class_value, augment_axis, opts, backends)?.at(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<ImageRef>,
    /// Cosine per class label, in prototype order.
    pub scores: IndexMap<String, f64>,
    pub predicted: ClassValue,
}

/// Precomputed prototype norms for repeated scoring. Scores are computed the
/// same way as [`crate::embedding::cosine`], so results are bit-identical.
struct Scorer<'a> {
    fused: Vec<&'a Embedding>,
    norms: Vec<f64>,
    dim: usize,
}

impl<'a> Scorer<'a> {
    fn new(fused: Vec<&'a Embedding>) -> Result<Self> {
        let first = fused.first().ok_or(Error::EmptyPrototypeSet)?;
        let dim = first.dim();
        let mut norms = Vec::with_capacity(fused.len());
        for f in &fused {
            if f.dim() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    actual: f.dim(),
                });
            }
            let n = f.norm();
            if n <= ZERO_EPS {
                return Err(Error::ZeroVector);
            }
            norms.push(n);
        }
        Ok(Self { fused, norms, dim })
    }

    /// Scores and argmax index; ties go to the earliest prototype.
    fn score(&self, query: &Embedding) -> Result<(Vec<f64>, usize)> {
        if query.dim() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        let nq = query.norm();
        if nq <= ZERO_EPS {
            return Err(Error::ZeroVector);
        }
        let mut best = 0;
        let scores: Vec<f64> = self
            .fused
            .iter()
            .zip(&self.norms)
            .map(|(f, np)| {
                let d: f64 = query
                    .values()
                    .iter()
                    .zip(f.values())
                    .map(|(a, b)| a * b)
                    .sum();
                (d / (nq * np)).clamp(-1.0, 1.0)
            })
            .collect();
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        Ok((scores, best))
    }
}

fn check_single_axis(prototypes: &[ClassPrototype]) -> Result<()> {
    if let Some(first) = prototypes.first() {
        if let Some(p) = prototypes.iter().find(|p| p.class_value.axis != first.class_value.axis) {
            return Err(Error::InvalidConfig(format!(
                "prototypes mix axes `{}` and `{}`",
                first.class_value.axis, p.class_value.axis
            )));
        }
    }
    Ok(())
}

/// Cosine argmax over `prototypes`, which must be in canonical value order
/// for the tie-break to follow it.
pub fn classify(query: &Embedding, prototypes: &[ClassPrototype]) -> Result<Prediction> {
    check_single_axis(prototypes)?;
    let scorer = Scorer::new(prototypes.iter().map(|p| &p.fused).collect())?;
    predict(&scorer, prototypes, query)
}

fn predict(scorer: &Scorer<'_>, prototypes: &[ClassPrototype], query: &Embedding) -> Result<Prediction> {
    let (scores, best) = scorer.score(query)?;
    Ok(Prediction {
        query: None,
        scores: prototypes
            .iter()
            .zip(scores)
            .map(|(p, s)| (p.class_value.label.clone(), s))
            .collect(),
        predicted: prototypes[best].class_value.clone(),
    })
}

fn classify_all(queries: &[Embedding], prototypes: &[ClassPrototype]) -> Result<Vec<Prediction>> {
    check_single_axis(prototypes)?;
    let scorer = Scorer::new(prototypes.iter().map(|p| &p.fused).collect())?;
    queries.iter().map(|q| predict(&scorer, prototypes, q)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightAccuracy {
    pub w: FusionWeight,
    pub correct: usize,
    /// Top-1 accuracy in percent.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightScanResult {
    pub best_w: FusionWeight,
    pub best_accuracy: f64,
    pub total: usize,
    /// One entry per grid point, w = 0.00 first.
    pub accuracy_by_w: Vec<WeightAccuracy>,
}

impl WeightScanResult {
    pub fn accuracy_at(&self, w: FusionWeight) -> Option<f64> {
        self.accuracy_by_w.iter().find(|a| a.w == w).map(|a| a.accuracy)
    }
}

/// Scans w = 0.00..=1.00 and returns the smallest maximizer of top-1
/// accuracy over `labeled`.
pub fn scan_weights(
    labeled: &[(Embedding, ClassValue)],
    parts: &[PrototypeParts],
) -> Result<WeightScanResult> {
    if labeled.is_empty() {
        return Err(Error::NoQueries);
    }
    if parts.is_empty() {
        return Err(Error::EmptyPrototypeSet);
    }
    for (_, label) in labeled {
        if !parts.iter().any(|p| &p.class_value == label) {
            return Err(Error::MissingPrototype(label.to_string()));
        }
    }
    let total = labeled.len();
    let accuracy_by_w = FusionWeight::grid()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|w| {
            let protos = parts.iter().map(|p| p.at(w)).collect::<Result<Vec<_>>>()?;
            check_single_axis(&protos)?;
            let scorer = Scorer::new(protos.iter().map(|p| &p.fused).collect())?;
            let mut correct = 0;
            for (q, label) in labeled {
                let (_, best) = scorer.score(q)?;
                if &protos[best].class_value == label {
                    correct += 1;
                }
            }
            Ok(WeightAccuracy {
                w,
                correct,
                accuracy: percent(correct, total),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = accuracy_by_w
        .iter()
        .fold(&accuracy_by_w[0], |best, a| if a.correct > best.correct { a } else { best });
    Ok(WeightScanResult {
        best_w: best.w,
        best_accuracy: best.accuracy,
        total,
        accuracy_by_w,
    })
}

pub(crate) fn percent(correct: usize, total: usize) -> f64 {
    100.0 * correct as f64 / total as f64
}

/// A dataset image with its embedding and ground-truth label on the target axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledQuery {
    pub image: ImageRef,
    pub embedding: Embedding,
    pub truth: ClassValue,
}

/// Embeds every manifest row that carries a `target_axis` label; other rows
/// are skipped.
pub fn embed_queries(
    manifest: &crate::dataset::DatasetManifest,
    target_axis: &AxisId,
    backends: &Backends,
) -> Result<Vec<LabeledQuery>> {
    let rows: Vec<_> = manifest
        .images
        .iter()
        .filter_map(|r| r.label(target_axis).map(|l| (r.image.clone(), l.clone())))
        .collect();
    if rows.is_empty() {
        return Err(Error::NoLabeledRows(target_axis.to_string()));
    }
    let images: Vec<ImageRef> = rows.iter().map(|(i, _)| i.clone()).collect();
    let embeddings: Vec<Embedding> = images
        .par_chunks(256)
        .map(|chunk| backends.image.embed_images(chunk))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    Ok(rows
        .into_iter()
        .zip(embeddings)
        .map(|((image, truth), embedding)| LabeledQuery {
            image,
            embedding,
            truth,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRun {
    pub mode: PrototypeMode,
    pub target_axis: AxisId,
    pub augment_axis: AxisId,
    pub w: FusionWeight,
    /// Absent for the text-only baseline.
    pub scan: Option<WeightScanResult>,
    pub prototypes: Vec<ClassPrototype>,
    pub predictions: Vec<Prediction>,
}

/// Builds parts once, scans the weight over `queries`, then predicts every
/// query at the best weight. The baseline skips the scan and uses w = 1.00.
pub fn run_method(
    queries: &[LabeledQuery],
    taxonomy: &Taxonomy,
    target_axis: &AxisId,
    augment_axis: &AxisId,
    opts: &BuildOptions,
    backends: &Backends,
) -> Result<MethodRun> {
    if queries.is_empty() {
        return Err(Error::NoQueries);
    }
    let parts = build_all_parts(taxonomy, target_axis, augment_axis, opts, backends)?;
    run_with_parts(queries, target_axis, augment_axis, opts.mode, &parts)
}

pub fn run_with_parts(
    queries: &[LabeledQuery],
    target_axis: &AxisId,
    augment_axis: &AxisId,
    mode: PrototypeMode,
    parts: &[PrototypeParts],
) -> Result<MethodRun> {
    let (w, scan) = if mode.uses_images() {
        let labeled: Vec<(Embedding, ClassValue)> = queries
            .iter()
            .map(|q| (q.embedding.clone(), q.truth.clone()))
            .collect();
        let scan = scan_weights(&labeled, parts)?;
        (scan.best_w, Some(scan))
    } else {
        (FusionWeight::TEXT_ONLY, None)
    };
    let prototypes = parts.iter().map(|p| p.at(w)).collect::<Result<Vec<_>>>()?;
    let embeddings: Vec<Embedding> = queries.iter().map(|q| q.embedding.clone()).collect();
    let predictions = classify_all(&embeddings, &prototypes)?
        .into_iter()
        .zip(queries)
        .map(|(mut p, q)| {
            p.query = Some(q.image.clone());
            p
        })
        .collect();
    Ok(MethodRun {
        mode,
        target_axis: target_axis.clone(),
        augment_axis: augment_axis.clone(),
        w,
        scan,
        prototypes,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::synthetic::{SyntheticBackend, SyntheticClass, SyntheticConfig};
    use crate::backend::CallCounter;
    use crate::embedding::cosine;
    use std::sync::Arc;

    fn e(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn cv(label: &str) -> ClassValue {
        ClassValue {
            axis: "profession".into(),
            label: label.into(),
        }
    }

    fn text_proto(label: &str, v: &[f64]) -> ClassPrototype {
        PrototypeParts {
            class_value: cv(label),
            text_part: e(v),
            image_part: None,
            provenance: vec![],
        }
        .at(FusionWeight::TEXT_ONLY)
        .unwrap()
    }

    fn config() -> SyntheticConfig {
        let basis = |i: usize, s: f64| {
            let mut v = vec![0.0; 8];
            v[i] = s;
            v
        };
        SyntheticConfig {
            id: "synthetic".into(),
            version: "1".into(),
            dim: 8,
            seed: 1,
            sigma: 0.05,
            bias: 0.4,
            majority: "Male".into(),
            target_axis: "profession".into(),
            subgroup_axis: "gender".into(),
            subgroups: vec!["Male".into(), "Female".into()],
            classes: ["Chef", "Doctor", "Engineer", "Farmer", "Firefighter", "Judge", "Mechanic", "Pilot", "Police", "Waiter"]
                .iter()
                .enumerate()
                .map(|(i, l)| SyntheticClass {
                    label: l.to_string(),
                    direction: {
                        let mut v = vec![0.0; 8];
                        v[i % 8] = 1.0;
                        if i >= 8 {
                            v[(i + 1) % 8] = 1.0;
                            let n = 2f64.sqrt();
                            v.iter_mut().for_each(|x| *x /= n);
                        }
                        v
                    },
                    offsets: vec![basis((i + 2) % 8, 0.3), basis((i + 3) % 8, 0.3)],
                })
                .collect(),
        }
    }

    fn backends() -> (Backends, CallCounter) {
        let b = Arc::new(SyntheticBackend::new(config()).unwrap());
        let counter = CallCounter::default();
        (Backends::from_full(b).counted(counter.clone()), counter)
    }

    #[test]
    fn classify_self_match() {
        let protos = vec![text_proto("Chef", &[1.0, 0.0]), text_proto("Doctor", &[0.3, 0.7])];
        let p = classify(&e(&[0.3, 0.7]), &protos).unwrap();
        assert_eq!(p.predicted.label, "Doctor");
        assert!((p.scores["Doctor"] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn classify_tie_goes_to_first() {
        let protos = vec![text_proto("Chef", &[1.0, 1.0]), text_proto("Doctor", &[2.0, 2.0])];
        assert_eq!(classify(&e(&[0.0, 1.0]), &protos).unwrap().predicted.label, "Chef");
    }

    #[test]
    fn classify_errors() {
        assert!(matches!(classify(&e(&[1.0]), &[]), Err(Error::EmptyPrototypeSet)));
        let protos = vec![text_proto("Chef", &[1.0, 0.0])];
        assert!(matches!(
            classify(&e(&[1.0, 0.0, 0.0]), &protos),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn classify_scores_match_cosine_bitwise() {
        let protos = vec![text_proto("Chef", &[0.2, -0.4, 1.1]), text_proto("Doctor", &[0.9, 0.3, -0.2])];
        let q = e(&[0.33, 0.1, 0.7]);
        let p = classify(&q, &protos).unwrap();
        for proto in &protos {
            assert_eq!(
                p.scores[&proto.class_value.label].to_bits(),
                cosine(&q, &proto.fused).unwrap().to_bits()
            );
        }
    }

    #[test]
    fn baseline_makes_no_generation_calls() {
        let tax = Taxonomy::default();
        let b = Arc::new(SyntheticBackend::new(config()).unwrap());
        let text_only = Backends {
            text: b.clone(),
            image: b,
            generator: None,
        };
        let opts = BuildOptions::new(PrototypeMode::ClipBaseline, 3);
        let p = build_prototype(&tax, &cv("Doctor"), &"profession".into(), &opts, FusionWeight::from_percent(30), &text_only).unwrap();
        assert!(p.image_part.is_none());
        assert_eq!(p.fused, l2_normalize(&p.text_part).unwrap());
        assert_eq!(p.w, FusionWeight::TEXT_ONLY);
        assert!(p.provenance.iter().all(|pp| pp.images.is_empty()));
    }

    #[test]
    fn d3g_without_generator_fails_fast() {
        let tax = Taxonomy::default();
        let b = Arc::new(SyntheticBackend::new(config()).unwrap());
        let text_only = Backends::embed_only(b);
        let opts = BuildOptions::new(PrototypeMode::StandardD3g, 3);
        assert!(matches!(
            build_all_parts(&tax, &"profession".into(), &"gender".into(), &opts, &text_only),
            Err(Error::GenerationUnsupported(_))
        ));
    }

    #[test]
    fn standard_provenance_two_prompts_one_image() {
        let tax = Taxonomy::default();
        let (b, _) = backends();
        let opts = BuildOptions::new(PrototypeMode::StandardD3g, 3);
        let parts = build_parts(&tax, &cv("Doctor"), &"gender".into(), &opts, &b).unwrap();
        assert_eq!(parts.provenance.len(), 2);
        assert!(parts.provenance.iter().all(|p| p.images.len() == 1));
        let avg = BuildOptions::new(PrototypeMode::AverageImageD3g, 3);
        let parts = build_parts(&tax, &cv("Doctor"), &"gender".into(), &avg, &b).unwrap();
        assert!(parts.provenance.iter().all(|p| p.images.len() == 5));
    }

    #[test]
    fn average_with_one_image_equals_standard() {
        let tax = Taxonomy::default();
        let (b, _) = backends();
        let std_opts = BuildOptions::new(PrototypeMode::StandardD3g, 9);
        let mut avg_opts = BuildOptions::new(PrototypeMode::AverageImageD3g, 9);
        avg_opts.images_per_prompt = Some(1);
        let w = FusionWeight::from_percent(40);
        let a = build_prototype(&tax, &cv("Pilot"), &"gender".into(), &std_opts, w, &b).unwrap();
        let c = build_prototype(&tax, &cv("Pilot"), &"gender".into(), &avg_opts, w, &b).unwrap();
        assert_eq!(a.fused, c.fused);
    }

    #[test]
    fn plain_policy_uses_plain_prompt_text() {
        let tax = Taxonomy::default();
        let (b, _) = backends();
        let mut opts = BuildOptions::new(PrototypeMode::StandardD3g, 9);
        opts.text_policy = TextPolicy::PlainPrompt;
        let parts = build_parts(&tax, &cv("Pilot"), &"gender".into(), &opts, &b).unwrap();
        let plain = tax.render_prompts(&cv("Pilot"), &"profession".into()).unwrap();
        assert_eq!(parts.text_part, b.text.embed_text(&plain[0]).unwrap());
        assert_eq!(parts.provenance.len(), 2);
    }

    #[test]
    fn scan_degenerate_parts_pick_zero() {
        let parts: Vec<PrototypeParts> = [("Chef", [1.0, 0.2]), ("Doctor", [0.1, 1.0])]
            .iter()
            .map(|(l, v)| PrototypeParts {
                class_value: cv(l),
                text_part: e(v),
                image_part: Some(e(v)),
                provenance: vec![],
            })
            .collect();
        let labeled = vec![
            (e(&[1.0, 0.0]), cv("Chef")),
            (e(&[0.0, 1.0]), cv("Doctor")),
            (e(&[0.0, 1.0]), cv("Chef")),
        ];
        let r = scan_weights(&labeled, &parts).unwrap();
        assert_eq!(r.accuracy_by_w.len(), 101);
        assert!(r.accuracy_by_w.iter().all(|a| a.correct == 2));
        assert_eq!(r.best_w, FusionWeight::IMAGE_ONLY);
        assert_eq!(r.accuracy_at(r.best_w), Some(r.best_accuracy));
    }

    #[test]
    fn scan_errors() {
        let parts = vec![PrototypeParts {
            class_value: cv("Chef"),
            text_part: e(&[1.0]),
            image_part: Some(e(&[1.0])),
            provenance: vec![],
        }];
        assert!(matches!(scan_weights(&[], &parts), Err(Error::NoQueries)));
        assert!(matches!(
            scan_weights(&[(e(&[1.0]), cv("Judge"))], &parts),
            Err(Error::MissingPrototype(_))
        ));
    }

    #[test]
    fn run_method_baseline_and_determinism() {
        let tax = Taxonomy::default();
        let b = Arc::new(SyntheticBackend::new(config()).unwrap());
        let manifest = b.sample_dataset(&tax, "t", 6, &[0.5, 0.5]).unwrap();
        let backends = Backends::from_full(b);
        let queries = embed_queries(&manifest, &"profession".into(), &backends).unwrap();
        let base = run_method(&queries, &tax, &"profession".into(), &"gender".into(), &BuildOptions::new(PrototypeMode::ClipBaseline, 2), &backends).unwrap();
        assert!(base.scan.is_none());
        assert_eq!(base.w, FusionWeight::TEXT_ONLY);
        assert!(base.prototypes.iter().all(|p| p.provenance.iter().all(|pp| pp.images.is_empty())));

        let opts = BuildOptions::new(PrototypeMode::StandardD3g, 2);
        let r1 = run_method(&queries, &tax, &"profession".into(), &"gender".into(), &opts, &backends).unwrap();
        let r2 = run_method(&queries, &tax, &"profession".into(), &"gender".into(), &opts, &backends).unwrap();
        assert_eq!(
            serde_json::to_vec(&r1.scan).unwrap(),
            serde_json::to_vec(&r2.scan).unwrap()
        );
        let scan = r1.scan.unwrap();
        assert!(scan.best_accuracy >= scan.accuracy_by_w[0].accuracy);
        assert!(scan.best_accuracy >= scan.accuracy_by_w[100].accuracy);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in PrototypeMode::ALL {
            assert_eq!(m.as_str().parse::<PrototypeMode>().unwrap(), m);
        }
        assert!("clip".parse::<PrototypeMode>().is_err());
        assert_eq!("plain-prompt".parse::<TextPolicy>().unwrap(), TextPolicy::PlainPrompt);
    }
}
