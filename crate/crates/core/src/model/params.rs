//! Named parameter blocks.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<f64>,
}

/// Parameters (or gradients, or optimizer moments) in declaration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    pub blocks: Vec<ParamBlock>,
}

impl Params {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> usize {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.blocks.push(ParamBlock {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        });
        self.blocks.len() - 1
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&ParamBlock> {
        self.index(name).map(|i| &self.blocks[i])
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            blocks: self
                .blocks
                .iter()
                .map(|b| ParamBlock {
                    name: b.name.clone(),
                    shape: b.shape.clone(),
                    data: vec![0.0; b.data.len()],
                })
                .collect(),
        }
    }

    pub fn num_values(&self) -> usize {
        self.blocks.iter().map(|b| b.data.len()).sum()
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.blocks.len() == other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape && a.data.len() == b.data.len())
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Self, s: f64) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += s * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in &mut self.blocks {
            for x in &mut b.data {
                *x *= s;
            }
        }
    }

    /// First block holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.blocks
            .iter()
            .find(|b| b.data.iter().any(|v| !v.is_finite()))
            .map(|b| b.name.as_str())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.data.iter().copied()).collect()
    }
}
