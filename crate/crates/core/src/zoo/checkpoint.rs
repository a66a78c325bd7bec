use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const CHECKPOINT_FORMAT: &str = "stab-ckpt-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(invalid(format!(
                "tensor shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Named tensors. The flat index space concatenates tensors in name order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let ckpt = Self { tensors };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(invalid(format!("tensor {name}: shape/data mismatch")));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("tensor {name}: non-finite value")));
            }
        }
        Ok(())
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn total_len(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for t in self.tensors.values() {
            out.extend_from_slice(&t.data);
        }
        out
    }

    /// Same names and shapes, new values from a flat vector.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.total_len() {
            return Err(invalid(format!(
                "flat vector has {} values, checkpoint has {}",
                flat.len(),
                self.total_len()
            )));
        }
        let mut offset = 0;
        let mut tensors = BTreeMap::new();
        for (name, t) in &self.tensors {
            let n = t.len();
            tensors.insert(
                name.clone(),
                Tensor {
                    shape: t.shape.clone(),
                    data: flat[offset..offset + n].to_vec(),
                },
            );
            offset += n;
        }
        Ok(Self { tensors })
    }

    /// `(tensor name, offset within tensor)` of a flat index.
    pub fn locate(&self, index: usize) -> Option<(&str, usize)> {
        let mut offset = 0;
        for (name, t) in &self.tensors {
            if index < offset + t.len() {
                return Some((name.as_str(), index - offset));
            }
            offset += t.len();
        }
        None
    }

    /// Starting flat offset of every tensor, in name order.
    pub fn offsets(&self) -> BTreeMap<&str, usize> {
        let mut offset = 0;
        let mut out = BTreeMap::new();
        for (name, t) in &self.tensors {
            out.insert(name.as_str(), offset);
            offset += t.len();
        }
        out
    }

    pub fn get_flat(&self, index: usize) -> Option<f64> {
        let (name, off) = self.locate(index)?;
        Some(self.tensors[name].data[off])
    }

    pub fn add_flat(&mut self, index: usize, delta: f64) -> Result<()> {
        let (name, off) = self
            .locate(index)
            .map(|(n, o)| (n.to_string(), o))
            .ok_or_else(|| invalid(format!("parameter index {index} out of range")))?;
        self.tensors.get_mut(&name).expect("located").data[off] += delta;
        Ok(())
    }

    pub fn aligned_with(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.shape == b.shape)
    }

    pub fn ensure_aligned(&self, other: &Self) -> Result<()> {
        if self.aligned_with(other) {
            Ok(())
        } else {
            Err(invalid("checkpoints differ in tensor names or shapes"))
        }
    }

    /// Elementwise combination of two aligned checkpoints.
    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_aligned(other)?;
        let tensors = self
            .tensors
            .iter()
            .zip(other.tensors.values())
            .map(|((name, a), b)| {
                let data = a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect();
                (
                    name.clone(),
                    Tensor {
                        shape: a.shape.clone(),
                        data,
                    },
                )
            })
            .collect();
        Ok(Self { tensors })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                (
                    name.clone(),
                    Tensor {
                        shape: t.shape.clone(),
                        data: t.data.iter().map(|v| f(*v)).collect(),
                    },
                )
            })
            .collect();
        Self { tensors }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("b", Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        c.insert("a", Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        c
    }

    #[test]
    fn flat_order_follows_names() {
        let c = sample();
        assert_eq!(c.flat(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(c.locate(2), Some(("b", 0)));
        assert_eq!(c.locate(4), None);
        let d = c.with_flat(&[0.0, 0.0, 0.0, 9.0]).unwrap();
        assert_eq!(d.get_flat(3), Some(9.0));
    }

    #[test]
    fn rejects_non_finite() {
        let mut t = BTreeMap::new();
        t.insert(
            "x".to_string(),
            Tensor::new(vec![1], vec![f64::INFINITY]).unwrap(),
        );
        assert!(Checkpoint::from_tensors(t).is_err());
    }

    #[test]
    fn alignment() {
        let c = sample();
        let mut d = sample();
        assert!(c.aligned_with(&d));
        d.insert("c", Tensor::zeros(vec![1]));
        assert!(!c.aligned_with(&d));
    }
}
