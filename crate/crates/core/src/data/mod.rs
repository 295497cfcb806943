//! Dataset construction and ingestion: the closed-form Toy2D conditional
//! dataset, IDX-format digit images with a hermetic procedural-glyph
//! fallback, condition-exclusion filtering, and the teacher generation
//! cache.

mod cache;
mod glyphs;
mod idx;
mod toy2d;

pub use cache::{CacheEntry, GenerationCache, CACHE_MAGIC, CACHE_VERSION};
pub use glyphs::{render_glyphs, GlyphConfig};
pub use idx::load_idx;
pub use toy2d::{gen_toy2d, Toy2DSpec};

use crate::error::{Error, Result};
use crate::models::{CondVocab, Condition};
use crate::numcore::Tensor;

/// Where a paired dataset's images came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Generated,
}

/// The paired dataset D: images with their conditions.
#[derive(Clone, Debug)]
pub struct PairedDataset {
    pub examples: Vec<(Tensor<f32>, Condition)>,
    pub provenance: Provenance,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Smallest vocabulary covering every condition in the set. Mixed
    /// labeled/composite sets (or null conditions) are rejected.
    pub fn infer_vocab(&self) -> Result<CondVocab> {
        let mut max_class = 0u32;
        let mut max_style: Option<u32> = None;
        let mut labeled = false;
        for (_, c) in &self.examples {
            match c {
                Condition::Labeled { class } => {
                    labeled = true;
                    max_class = max_class.max(*class);
                }
                Condition::Composite { class, style } => {
                    max_class = max_class.max(*class);
                    max_style = Some(max_style.unwrap_or(0).max(*style));
                }
                Condition::Null => {
                    return Err(Error::invalid("dataset contains a null condition"));
                }
            }
        }
        if self.examples.is_empty() {
            return Err(Error::EmptyDataset("cannot infer vocabulary".into()));
        }
        match (labeled, max_style) {
            (true, None) => Ok(CondVocab::labeled(max_class + 1)),
            (false, Some(ms)) => Ok(CondVocab::composite(max_class + 1, ms + 1)),
            _ => Err(Error::invalid(
                "dataset mixes labeled and composite conditions",
            )),
        }
    }

    /// Distinct conditions in appearance order.
    pub fn distinct_conditions(&self) -> Vec<Condition> {
        let mut seen = Vec::new();
        for (_, c) in &self.examples {
            if !seen.contains(c) {
                seen.push(*c);
            }
        }
        seen
    }
}

/// Split off every example whose condition matches the predicate. Returns
/// the kept dataset and the distinct removed conditions; removing
/// everything is an error.
pub fn exclude_conditions(
    dataset: &PairedDataset,
    predicate: impl Fn(&Condition) -> bool,
) -> Result<(PairedDataset, Vec<Condition>)> {
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for (x, c) in &dataset.examples {
        if predicate(c) {
            if !removed.contains(c) {
                removed.push(*c);
            }
        } else {
            kept.push((x.clone(), *c));
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyDataset(
            "condition filter removed every example".into(),
        ));
    }
    Ok((
        PairedDataset {
            examples: kept,
            provenance: dataset.provenance,
        },
        removed,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset() -> PairedDataset {
        let mk = |c: u32| (Tensor::full(&[2], c as f32), Condition::labeled(c));
        PairedDataset {
            examples: vec![mk(0), mk(1), mk(3), mk(1), mk(3)],
            provenance: Provenance::Real,
        }
    }

    #[test]
    fn exclude_class_three() {
        let d = toy_dataset();
        let (kept, removed) = exclude_conditions(&d, |c| c.class() == Some(3)).unwrap();
        assert_eq!(kept.len(), 3);
        assert!(kept.examples.iter().all(|(_, c)| c.class() != Some(3)));
        assert_eq!(removed, vec![Condition::labeled(3)]);
    }

    #[test]
    fn exclude_nothing_keeps_everything() {
        let d = toy_dataset();
        let (kept, removed) = exclude_conditions(&d, |_| false).unwrap();
        assert_eq!(kept.len(), d.len());
        assert!(removed.is_empty());
    }

    #[test]
    fn exclude_everything_is_an_error() {
        let d = toy_dataset();
        assert!(matches!(
            exclude_conditions(&d, |_| true),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn exclusion_partitions_the_dataset() {
        let d = toy_dataset();
        let (kept, removed) = exclude_conditions(&d, |c| c.class() == Some(1)).unwrap();
        let removed_count = d
            .examples
            .iter()
            .filter(|(_, c)| removed.contains(c))
            .count();
        assert_eq!(kept.len() + removed_count, d.len());
    }

    #[test]
    fn vocab_inference() {
        let d = toy_dataset();
        assert_eq!(d.infer_vocab().unwrap(), CondVocab::labeled(4));
    }
}
