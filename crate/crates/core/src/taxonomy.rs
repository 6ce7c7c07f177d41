//! Label axes and the prompt templates rendered from them.
//!
//! A [`Taxonomy`] is loaded from a TOML file listing axes (with their values in
//! canonical order) and `(target, augment) -> pattern` templates. The shipped
//! default lives in `data/taxonomy.toml`.

use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_TAXONOMY: &str = include_str!("../data/taxonomy.toml");
const TARGET: &str = "{target}";
const AUGMENT: &str = "{augment}";
const PROMPT_PREFIX: &str = "A photo of a";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AxisId(String);

impl AxisId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AxisId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AxisId {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

/// One label on one axis, e.g. `profession=Doctor`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassValue {
    pub axis: AxisId,
    pub label: String,
}

impl fmt::Display for ClassValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.axis, self.label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemographicAxis {
    pub id: AxisId,
    /// Display name used for report column headers.
    pub name: String,
    pub values: Vec<String>,
}

impl DemographicAxis {
    pub fn position(&self, label: &str) -> Option<usize> {
        self.values.iter().position(|v| v == label)
    }

    pub fn class_values(&self) -> impl Iterator<Item = ClassValue> + '_ {
        self.values.iter().map(|v| ClassValue {
            axis: self.id.clone(),
            label: v.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    #[serde(rename = "target")]
    pub target_axis: AxisId,
    #[serde(rename = "augment")]
    pub augment_axis: AxisId,
    pub pattern: String,
}

impl PromptTemplate {
    pub fn id(&self) -> String {
        format!("{}/{}", self.target_axis, self.augment_axis)
    }

    fn render(&self, target: &str, augment: Option<&str>) -> String {
        let text = self.pattern.replace(TARGET, &casing_normalize(target));
        match augment {
            Some(a) => text.replace(AUGMENT, &casing_normalize(a)),
            None => text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub target_value: ClassValue,
    pub augment_value: Option<ClassValue>,
    pub template_id: String,
}

/// Labels are interpolated mid-sentence, so they are lowercased.
pub fn casing_normalize(label: &str) -> String {
    label.to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Taxonomy {
    #[serde(rename = "axis")]
    axes: Vec<DemographicAxis>,
    #[serde(rename = "template", default)]
    templates: Vec<PromptTemplate>,
}

impl Default for Taxonomy {
    fn default() -> Self {
        Self::from_toml_str(DEFAULT_TAXONOMY).expect("shipped taxonomy is valid")
    }
}

impl Taxonomy {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let tax: Taxonomy = toml::from_str(s).map_err(|e| {
            let line = e
                .span()
                .map(|span| s[..span.start].lines().count().max(1))
                .unwrap_or(0);
            Error::Parse {
                line,
                message: e.message().to_string(),
            }
        })?;
        tax.validate()?;
        Ok(tax)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("taxonomy serializes")
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTaxonomy(m));
        for (i, axis) in self.axes.iter().enumerate() {
            if self.axes[..i].iter().any(|a| a.id == axis.id) {
                return bad(format!("duplicate axis `{}`", axis.id));
            }
            if axis.values.is_empty() {
                return bad(format!("axis `{}` has no values", axis.id));
            }
            for (j, v) in axis.values.iter().enumerate() {
                if v.is_empty() || v.contains(['{', '}']) {
                    return bad(format!("axis `{}` has invalid value `{v}`", axis.id));
                }
                if axis.values[..j].contains(v) {
                    return bad(format!("axis `{}` repeats value `{v}`", axis.id));
                }
            }
        }
        for (i, t) in self.templates.iter().enumerate() {
            self.axis(&t.target_axis)?;
            self.axis(&t.augment_axis)?;
            if self.templates[..i]
                .iter()
                .any(|o| o.target_axis == t.target_axis && o.augment_axis == t.augment_axis)
            {
                return bad(format!("duplicate template {}", t.id()));
            }
            if !t.pattern.starts_with(PROMPT_PREFIX) {
                return bad(format!("template {} must start with `{PROMPT_PREFIX}`", t.id()));
            }
            let targets = t.pattern.matches(TARGET).count();
            let augments = t.pattern.matches(AUGMENT).count();
            let expected_augments = usize::from(t.target_axis != t.augment_axis);
            if targets != 1 || augments != expected_augments {
                return bad(format!(
                    "template {} needs exactly one {TARGET}{}",
                    t.id(),
                    if expected_augments == 1 {
                        " and one {augment}"
                    } else {
                        " and no {augment}"
                    }
                ));
            }
            let stripped = t.pattern.replace(TARGET, "").replace(AUGMENT, "");
            if stripped.contains(['{', '}']) {
                return bad(format!("template {} has an unknown placeholder", t.id()));
            }
        }
        Ok(())
    }

    pub fn axes(&self) -> &[DemographicAxis] {
        &self.axes
    }

    pub fn templates(&self) -> &[PromptTemplate] {
        &self.templates
    }

    pub fn axis(&self, id: &AxisId) -> Result<&DemographicAxis> {
        self.axes
            .iter()
            .find(|a| &a.id == id)
            .ok_or_else(|| Error::UnknownAxis(id.to_string()))
    }

    pub fn class_value(&self, axis: &AxisId, label: &str) -> Result<ClassValue> {
        let a = self.axis(axis)?;
        a.position(label)
            .map(|_| ClassValue {
                axis: axis.clone(),
                label: label.to_string(),
            })
            .ok_or_else(|| Error::UnknownAxisValue {
                axis: axis.to_string(),
                value: label.to_string(),
            })
    }

    /// Canonical position of a value within its axis.
    pub fn rank(&self, value: &ClassValue) -> Result<usize> {
        self.axis(&value.axis)?
            .position(&value.label)
            .ok_or_else(|| Error::UnknownAxisValue {
                axis: value.axis.to_string(),
                value: value.label.clone(),
            })
    }

    pub fn template(&self, target: &AxisId, augment: &AxisId) -> Result<&PromptTemplate> {
        self.templates
            .iter()
            .find(|t| &t.target_axis == target && &t.augment_axis == augment)
            .ok_or_else(|| Error::UnknownTemplate {
                target: target.to_string(),
                augment: augment.to_string(),
            })
    }

    /// Augment axes that have a template for `target`, in axis order.
    pub fn strategies(&self, target: &AxisId) -> Vec<AxisId> {
        self.axes
            .iter()
            .filter(|a| self.template(target, &a.id).is_ok())
            .map(|a| a.id.clone())
            .collect()
    }

    pub fn render_prompts(
        &self,
        target: &ClassValue,
        augment_axis: &AxisId,
    ) -> Result<Vec<RenderedPrompt>> {
        self.rank(target)?;
        let template = self.template(&target.axis, augment_axis)?;
        let template_id = template.id();
        if *augment_axis == target.axis {
            return Ok(vec![RenderedPrompt {
                text: template.render(&target.label, None),
                target_value: target.clone(),
                augment_value: None,
                template_id,
            }]);
        }
        let augment = self.axis(augment_axis)?;
        Ok(augment
            .class_values()
            .map(|a| RenderedPrompt {
                text: template.render(&target.label, Some(&a.label)),
                target_value: target.clone(),
                augment_value: Some(a),
                template_id: template_id.clone(),
            })
            .collect())
    }

    pub fn render_all(
        &self,
        target_axis: &AxisId,
        augment_axis: &AxisId,
    ) -> Result<IndexMap<ClassValue, Vec<RenderedPrompt>>> {
        let target = self.axis(target_axis)?;
        self.axis(augment_axis)?;
        target
            .class_values()
            .map(|cv| {
                let prompts = self.render_prompts(&cv, augment_axis)?;
                Ok((cv, prompts))
            })
            .collect()
    }
}
