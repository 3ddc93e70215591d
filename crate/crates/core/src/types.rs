//! Domain types shared by every module.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier of a domain within a dataset.
pub type DomainId = usize;
/// Identifier of a record, dense within its domain.
pub type RecordId = usize;

/// Marker that a prompt template uses for the learnable object token.
pub const OBJECT_SLOT: &str = "{object}";

/// A domain and the prompt template used to disentangle its style.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: DomainId,
    pub name: String,
    /// Natural-language template with exactly one `{object}` slot,
    /// e.g. `"a sketch of a {object}"`.
    pub prompt_template: String,
}

impl DomainSpec {
    pub fn new(domain_id: DomainId, name: impl Into<String>, template: impl Into<String>) -> Result<Self> {
        let spec = DomainSpec {
            domain_id,
            name: name.into(),
            prompt_template: template.into(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let slots = self.prompt_template.matches(OBJECT_SLOT).count();
        if slots != 1 {
            return Err(Error::validation(format!(
                "prompt template {:?} must contain exactly one {OBJECT_SLOT} slot, found {slots}",
                self.prompt_template
            )));
        }
        if self.name.is_empty() {
            return Err(Error::validation("domain name must be non-empty"));
        }
        Ok(())
    }

    /// Template words in order, with the object slot kept as its marker.
    pub fn template_words(&self) -> Vec<&str> {
        self.prompt_template.split_whitespace().collect()
    }
}

/// Counts every read of an [`ImageRecord`] label. Training must never
/// touch labels, so the counter lets tests prove the unsupervised contract.
static LABEL_READS: AtomicU64 = AtomicU64::new(0);

/// One image of a dataset: pixels in `[0,1]`, shape `(H, W, C)`.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub record_id: RecordId,
    pub domain_id: DomainId,
    pub pixels: Array3<f64>,
    label: Option<usize>,
}

impl ImageRecord {
    pub fn new(record_id: RecordId, domain_id: DomainId, pixels: Array3<f64>, label: Option<usize>) -> Self {
        ImageRecord { record_id, domain_id, pixels, label }
    }

    /// Class label, evaluation only. Every call is tallied so the taint
    /// counter can certify that training never consumed a label.
    pub fn label(&self) -> Option<usize> {
        LABEL_READS.fetch_add(1, Ordering::Relaxed);
        self.label
    }

    /// Replace the label, e.g. with a sentinel for taint tests.
    pub fn set_label(&mut self, label: Option<usize>) {
        self.label = label;
    }

    /// Total label reads across the process.
    pub fn label_read_count() -> u64 {
        LABEL_READS.load(Ordering::Relaxed)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let d = self.pixels.dim();
        (d.0, d.1, d.2)
    }
}

/// Unit-norm feature vector in the prompt-token space. Doubles as the
/// retrieval feature and the learnable object token.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Array1<f64>,
    /// `(domain_id, record_id)` of the image that produced this vector.
    pub owner: (DomainId, RecordId),
}

impl Embedding {
    pub fn new(values: Array1<f64>, domain_id: DomainId, record_id: RecordId) -> Self {
        Embedding { values, owner: (domain_id, record_id) }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.dot(&self.values).sqrt()
    }

    /// Unit-norm within the encoder tolerance.
    pub fn check_unit_norm(&self) -> Result<()> {
        if (self.norm() - 1.0).abs() > 1e-5 {
            return Err(Error::validation(format!(
                "embedding for domain {} record {} has norm {}, expected 1",
                self.owner.0,
                self.owner.1,
                self.norm()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn template_requires_single_object_slot() {
        assert!(DomainSpec::new(0, "sketch", "a sketch of a {object}").is_ok());
        assert!(DomainSpec::new(0, "sketch", "a sketch of a thing").is_err());
        assert!(DomainSpec::new(0, "sketch", "{object} and {object}").is_err());
    }

    #[test]
    fn label_reads_are_counted() {
        let rec = ImageRecord::new(0, 0, Array3::zeros((2, 2, 3)), Some(4));
        let before = ImageRecord::label_read_count();
        let _ = rec.label();
        let _ = rec.label();
        assert_eq!(ImageRecord::label_read_count() - before, 2);
    }

    #[test]
    fn unit_norm_check() {
        let ok = Embedding::new(array![0.6, 0.8], 0, 0);
        assert!(ok.check_unit_norm().is_ok());
        let bad = Embedding::new(array![0.6, 0.9], 0, 1);
        assert!(bad.check_unit_norm().is_err());
    }
}
