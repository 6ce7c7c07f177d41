//! Vector algebra shared by the rest of the crate.
//!
//! All arithmetic is `f64`. Fusion normalizes both operands first and does not
//! re-normalize the result; cosine scoring downstream is scale-invariant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms at or below this are treated as the zero vector.
pub const ZERO_EPS: f64 = 1e-12;

/// A finite, non-empty real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DimMismatch {
                expected: 1,
                actual: 0,
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn from_f32(values: &[f32]) -> Result<Self> {
        Self::new(values.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    fn check_dim(&self, other: &Embedding) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

/// Text weight `w` of a fused prototype; the image weight is `1 - w`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct FusionWeight(f64);

impl FusionWeight {
    pub const TEXT_ONLY: FusionWeight = FusionWeight(1.0);
    pub const IMAGE_ONLY: FusionWeight = FusionWeight(0.0);
    /// Number of points on the 0.01 scan grid, both endpoints included.
    pub const GRID_POINTS: usize = 101;

    pub fn new(w: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::InvalidWeight(w));
        }
        Ok(Self(w))
    }

    /// Grid point `k / 100`; panics if `k > 100`.
    pub fn from_percent(k: u32) -> Self {
        assert!(k <= 100, "grid index {k} out of range");
        Self(f64::from(k) / 100.0)
    }

    /// The full 0.00..=1.00 grid in ascending order.
    pub fn grid() -> impl ExactSizeIterator<Item = FusionWeight> {
        (0..101u32).map(Self::from_percent)
    }

    pub fn text(self) -> f64 {
        self.0
    }

    pub fn image(self) -> f64 {
        1.0 - self.0
    }
}

impl TryFrom<f64> for FusionWeight {
    type Error = Error;

    fn try_from(w: f64) -> Result<Self> {
        Self::new(w)
    }
}

impl From<FusionWeight> for f64 {
    fn from(w: FusionWeight) -> Self {
        w.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_normalize(v: &Embedding) -> Result<Embedding> {
    let n = v.norm();
    if n <= ZERO_EPS {
        return Err(Error::ZeroVector);
    }
    Ok(Embedding(v.0.iter().map(|x| x / n).collect()))
}

pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64> {
    a.check_dim(b)?;
    let na = a.norm();
    let nb = b.norm();
    if na <= ZERO_EPS || nb <= ZERO_EPS {
        return Err(Error::ZeroVector);
    }
    Ok((dot(&a.0, &b.0) / (na * nb)).clamp(-1.0, 1.0))
}

/// Componentwise arithmetic mean. The result may be the zero vector when
/// inputs cancel; callers that normalize afterwards get `ZeroVector`.
pub fn mean_embedding<'a, I>(vs: I) -> Result<Embedding>
where
    I: IntoIterator<Item = &'a Embedding>,
{
    let mut iter = vs.into_iter();
    let first = iter.next().ok_or(Error::EmptyList)?;
    let mut acc = first.0.clone();
    let mut count = 1usize;
    for v in iter {
        first.check_dim(v)?;
        for (a, x) in acc.iter_mut().zip(&v.0) {
            *a += x;
        }
        count += 1;
    }
    let n = count as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(Embedding(acc))
}

/// `w * normalize(text) + (1 - w) * normalize(image)`.
pub fn fuse(text_part: &Embedding, image_part: &Embedding, w: FusionWeight) -> Result<Embedding> {
    text_part.check_dim(image_part)?;
    let t = l2_normalize(text_part)?;
    let i = l2_normalize(image_part)?;
    let (wt, wi) = (w.text(), w.image());
    Ok(Embedding(
        t.0.iter().zip(&i.0).map(|(a, b)| wt * a + wi * b).collect(),
    ))
}
