use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// One named parameter block inside a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

/// Ordered manifest of every parameter block. Offsets are assigned
/// contiguously in insertion order, so the blocks tile `[0, len)`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    entries: Vec<ParamEntry>,
    len: usize,
    #[serde(skip)]
    by_name: HashMap<String, usize>,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a block and returns its index.
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>) -> usize {
        let name = name.into();
        let numel: usize = shape.iter().product();
        let index = self.entries.len();
        self.by_name.insert(name.clone(), index);
        self.entries.push(ParamEntry {
            name,
            offset: self.len,
            shape,
        });
        self.len += numel;
        index
    }

    /// Total number of scalars (P).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &ParamEntry {
        &self.entries[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        if self.by_name.len() == self.entries.len() {
            self.by_name.get(name).copied()
        } else {
            self.entries.iter().position(|e| e.name == name)
        }
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.index_of(name).map(|i| &self.entries[i])
    }

    /// Checks that entries are contiguous, non-overlapping and cover `[0, len)`.
    pub fn validate(&self) -> Result<()> {
        let mut cursor = 0;
        for e in &self.entries {
            if e.offset != cursor {
                return Err(Error::Shape(format!(
                    "parameter `{}` starts at {} but previous block ended at {}",
                    e.name, e.offset, cursor
                )));
            }
            cursor += e.numel();
        }
        if cursor != self.len {
            return Err(Error::Shape(format!(
                "layout covers {} scalars but declares {}",
                cursor, self.len
            )));
        }
        Ok(())
    }

    /// Rebuilds the name index after deserialization.
    pub fn reindex(&mut self) {
        self.by_name = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
    }
}

/// Flat f64 view of all model parameters, tagged with its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![0.0; layout.len()];
        Self { layout, values }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Shape(format!(
                "{} values for a layout of {} parameters",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { layout, values })
    }

    /// Packs named tensors into a flat vector following `layout`.
    pub fn flatten(layout: Arc<Layout>, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut out = Self::zeros(layout);
        for (name, t) in tensors {
            let idx = out
                .layout
                .index_of(name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            let entry = out.layout.entry(idx);
            if entry.shape != t.shape() {
                return Err(Error::Shape(format!(
                    "`{}` expects {:?}, got {:?}",
                    name,
                    entry.shape,
                    t.shape()
                )));
            }
            let range = entry.range();
            out.values[range].copy_from_slice(t.data());
        }
        Ok(out)
    }

    /// Splits the flat vector back into named tensors.
    pub fn unflatten(&self) -> Vec<(String, Tensor)> {
        self.layout
            .entries()
            .iter()
            .map(|e| {
                let t = Tensor::from_parts(e.shape.clone(), self.values[e.range()].to_vec());
                (e.name.clone(), t)
            })
            .collect()
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn block(&self, index: usize) -> &[f64] {
        &self.values[self.layout.entry(index).range()]
    }

    pub fn block_mut(&mut self, index: usize) -> &mut [f64] {
        let range = self.layout.entry(index).range();
        &mut self.values[range]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_layout() -> Arc<Layout> {
        let mut l = Layout::new();
        l.push("a", vec![2, 3]);
        l.push("b", vec![4]);
        l.push("c", vec![1, 1, 2]);
        Arc::new(l)
    }

    #[test]
    fn offsets_tile_the_vector() {
        let l = toy_layout();
        l.validate().unwrap();
        assert_eq!(l.len(), 12);
        assert_eq!(l.get("b").unwrap().offset, 6);
        assert_eq!(l.get("c").unwrap().offset, 10);
    }

    #[test]
    fn flatten_unflatten_round_trip() {
        let l = toy_layout();
        let values: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 1.0).collect();
        let pv = ParamVector::from_values(l.clone(), values).unwrap();
        let back = ParamVector::flatten(l, &pv.unflatten()).unwrap();
        assert_eq!(back, pv);
    }

    #[test]
    fn flatten_rejects_bad_shape() {
        let l = toy_layout();
        let t = Tensor::zeros(vec![3, 2]);
        assert!(ParamVector::flatten(l, &[("a".into(), t)]).is_err());
    }

    #[test]
    fn layout_survives_json() {
        let l = toy_layout();
        let s = serde_json::to_string(&*l).unwrap();
        let mut back: Layout = serde_json::from_str(&s).unwrap();
        back.reindex();
        assert_eq!(back.index_of("c"), Some(2));
        assert_eq!(back, *l);
    }
}
