use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    entries: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// All entries concatenated in name order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.total_count(), "flat parameter length");
        let mut off = 0;
        for t in self.entries.values_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let map: BTreeMap<&String, Entry> = self
            .entries
            .iter()
            .map(|(k, t)| {
                (
                    k,
                    Entry {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect();
        serde_json::to_value(map).expect("parameter map serializes")
    }

    pub fn from_json_value(value: serde_json::Value) -> Result<Self> {
        let map: BTreeMap<String, Entry> = serde_json::from_value(value)?;
        let mut store = Self::new();
        for (name, e) in map {
            let t = Tensor::new(e.shape, e.data).ok_or_else(|| Error::Format {
                path: "parameters".into(),
                detail: format!("`{name}` has inconsistent shape and data"),
            })?;
            store.insert(name, t)?;
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(s.insert("w", Tensor::scalar(2.0)).is_err());
    }

    proptest! {
        #[test]
        fn json_round_trip_is_bit_exact(vals in prop::collection::vec(-1e300f64..1e300, 1..20), tiny in -1e-300f64..1e-300) {
            let mut s = ParameterStore::new();
            s.insert("a", Tensor::vector(vals.clone())).unwrap();
            s.insert("b", Tensor::matrix(1, 1, vec![tiny])).unwrap();
            let text = serde_json::to_string(&s.to_json_value()).unwrap();
            let back = ParameterStore::from_json_value(serde_json::from_str(&text).unwrap()).unwrap();
            for (x, y) in s.flatten().iter().zip(back.flatten()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
            prop_assert_eq!(back, s);
        }
    }
}
