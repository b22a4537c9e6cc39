//! Class-level attribute vectors, their seen/unseen split, and the disjoint
//! attribute groups used by the decorrelation loss and part localization.

use crate::autodiff::validate_partition;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Classes are identified by their row index in the attribute matrix.
pub type ClassId = usize;

/// Per-class attribute vectors with a seen/unseen partition and a grouping
/// of the attribute indices.
///
/// Invariants, enforced at construction:
/// - `phi` is `[num_classes, k]`,
/// - seen and unseen ids are disjoint and in range,
/// - the groups are pairwise disjoint and cover `0..k`.
#[derive(Debug, Clone)]
pub struct AttributeTable {
    phi: Tensor,
    seen: Vec<ClassId>,
    unseen: Vec<ClassId>,
    groups: Vec<Vec<usize>>,
    names: Vec<String>,
}

impl AttributeTable {
    pub fn new(
        phi: Tensor,
        mut seen: Vec<ClassId>,
        mut unseen: Vec<ClassId>,
        groups: Vec<Vec<usize>>,
        names: Vec<String>,
    ) -> Result<AttributeTable> {
        if phi.rank() != 2 {
            return Err(Error::dim(format!(
                "attribute matrix must be [classes, k], got {:?}",
                phi.shape()
            )));
        }
        let (classes, k) = (phi.shape()[0], phi.shape()[1]);
        if names.len() != k {
            return Err(Error::dim(format!(
                "{} attribute names for {k} attributes",
                names.len()
            )));
        }
        validate_partition(&groups, k)?;
        seen.sort_unstable();
        unseen.sort_unstable();
        for ids in [&seen, &unseen] {
            if ids.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::contract("duplicate class id in split"));
            }
            if let Some(&id) = ids.iter().find(|&&id| id >= classes) {
                return Err(Error::contract(format!(
                    "class id {id} out of range for {classes} classes"
                )));
            }
        }
        let mut i = 0;
        let mut j = 0;
        while i < seen.len() && j < unseen.len() {
            match seen[i].cmp(&unseen[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    return Err(Error::contract(format!(
                        "class {} is both seen and unseen",
                        seen[i]
                    )))
                }
            }
        }
        Ok(AttributeTable {
            phi,
            seen,
            unseen,
            groups,
            names,
        })
    }

    /// Number of attributes K.
    pub fn k(&self) -> usize {
        self.phi.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.phi.shape()[0]
    }

    pub fn phi(&self) -> &Tensor {
        &self.phi
    }

    pub fn phi_row(&self, class: ClassId) -> &[f64] {
        let k = self.k();
        &self.phi.data()[class * k..(class + 1) * k]
    }

    /// Attribute vectors of the given classes stacked into an `[n, k]` tensor.
    pub fn phi_subset(&self, ids: &[ClassId]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::contract("empty class subset"));
        }
        let k = self.k();
        let mut data = Vec::with_capacity(ids.len() * k);
        for &id in ids {
            if id >= self.num_classes() {
                return Err(Error::contract(format!("unknown class id {id}")));
            }
            data.extend_from_slice(self.phi_row(id));
        }
        Tensor::from_vec(&[ids.len(), k], data)
    }

    /// Seen class ids, ascending.
    pub fn seen(&self) -> &[ClassId] {
        &self.seen
    }

    /// Unseen class ids, ascending.
    pub fn unseen(&self) -> &[ClassId] {
        &self.unseen
    }

    pub fn is_seen(&self, class: ClassId) -> bool {
        self.seen.binary_search(&class).is_ok()
    }

    /// Position of a class inside the seen list (the classification label).
    pub fn seen_label(&self, class: ClassId) -> Option<usize> {
        self.seen.binary_search(&class).ok()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Threshold every attribute value: `phi >= threshold` becomes 1, the
    /// rest 0. Groups and splits are unchanged. Idempotent on binary input
    /// for any threshold in (0,1).
    pub fn binarize(&self, threshold: f64) -> Result<AttributeTable> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::contract(format!(
                "binarize threshold must lie in (0,1), got {threshold}"
            )));
        }
        let mut out = self.clone();
        for v in out.phi.data_mut() {
            *v = if *v >= threshold { 1.0 } else { 0.0 };
        }
        Ok(out)
    }

    /// L2-normalize each class vector; zero rows are left untouched.
    pub fn normalized(&self) -> AttributeTable {
        let mut out = self.clone();
        let k = self.k();
        for row in out.phi.data_mut().chunks_mut(k) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in row {
                    *v /= norm;
                }
            }
        }
        out
    }

    /// Part name for a group, by convention the first attribute's name
    /// truncated at its last underscore ("head_c2" -> "head"). Datasets
    /// whose attribute names follow this convention get meaningful part
    /// names in localization reports; others get the raw attribute name.
    pub fn part_name(&self, group: usize) -> &str {
        let name = &self.names[self.groups[group][0]];
        match name.rfind('_') {
            Some(pos) => &name[..pos],
            None => name,
        }
    }
}
