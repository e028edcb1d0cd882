//! Neuron coordinates and selection masks shared by every locator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(layer, index)` coordinate of an FFN intermediate neuron.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub index: usize,
}

impl NeuronId {
    pub fn new(layer: usize, index: usize) -> Self {
        NeuronId { layer, index }
    }
}

/// Boolean `layers × width` selection of neurons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronMask {
    pub layers: usize,
    pub width: usize,
    selected: Vec<bool>,
    /// Threshold multiplier that produced this mask, when it came from scores.
    #[serde(default)]
    pub sigma: Option<f64>,
    /// Fingerprint of the score map this mask was derived from.
    #[serde(default)]
    pub source: Option<String>,
}

impl NeuronMask {
    pub fn empty(layers: usize, width: usize) -> Self {
        NeuronMask {
            layers,
            width,
            selected: vec![false; layers * width],
            sigma: None,
            source: None,
        }
    }

    pub fn full(layers: usize, width: usize) -> Self {
        NeuronMask {
            selected: vec![true; layers * width],
            ..Self::empty(layers, width)
        }
    }

    pub fn from_bits(layers: usize, width: usize, selected: Vec<bool>) -> Result<Self> {
        if selected.len() != layers * width {
            return Err(Error::dim(
                "mask",
                format!("{} bits for {layers}x{width}", selected.len()),
            ));
        }
        Ok(NeuronMask {
            selected,
            ..Self::empty(layers, width)
        })
    }

    pub fn from_ids(layers: usize, width: usize, ids: impl IntoIterator<Item = NeuronId>) -> Result<Self> {
        let mut m = Self::empty(layers, width);
        for id in ids {
            m.set(id, true)?;
        }
        Ok(m)
    }

    /// All neurons of the given layers.
    pub fn from_layers(layers: usize, width: usize, chosen: &[usize]) -> Result<Self> {
        let mut m = Self::empty(layers, width);
        for &l in chosen {
            if l >= layers {
                return Err(Error::Range(format!("layer {l} outside {layers}")));
            }
            m.selected[l * width..(l + 1) * width].fill(true);
        }
        Ok(m)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.layers, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.selected
    }

    pub fn get(&self, id: NeuronId) -> bool {
        id.layer < self.layers && id.index < self.width && self.selected[id.layer * self.width + id.index]
    }

    pub fn set(&mut self, id: NeuronId, on: bool) -> Result<()> {
        if id.layer >= self.layers || id.index >= self.width {
            return Err(Error::Range(format!(
                "neuron ({}, {}) outside {}x{}",
                id.layer, id.index, self.layers, self.width
            )));
        }
        self.selected[id.layer * self.width + id.index] = on;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.selected.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn ids(&self) -> impl Iterator<Item = NeuronId> + '_ {
        let w = self.width;
        self.selected
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(move |(i, _)| NeuronId::new(i / w, i % w))
    }

    pub fn layer_indices(&self, layer: usize) -> Vec<usize> {
        (0..self.width)
            .filter(|&j| self.selected[layer * self.width + j])
            .collect()
    }

    fn check_dims(&self, other: &NeuronMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::dim(
                "mask",
                format!("{:?} vs {:?}", self.dims(), other.dims()),
            ));
        }
        Ok(())
    }

    pub fn intersection_count(&self, other: &NeuronMask) -> Result<usize> {
        self.check_dims(other)?;
        Ok(self.selected.iter().zip(&other.selected).filter(|(a, b)| **a && **b).count())
    }

    pub fn union_count(&self, other: &NeuronMask) -> Result<usize> {
        self.check_dims(other)?;
        Ok(self.selected.iter().zip(&other.selected).filter(|(a, b)| **a || **b).count())
    }

    pub fn intersect(&self, other: &NeuronMask) -> Result<NeuronMask> {
        self.check_dims(other)?;
        let bits = self.selected.iter().zip(&other.selected).map(|(a, b)| *a && *b).collect();
        NeuronMask::from_bits(self.layers, self.width, bits)
    }

    pub fn is_subset_of(&self, other: &NeuronMask) -> Result<bool> {
        self.check_dims(other)?;
        Ok(self.selected.iter().zip(&other.selected).all(|(a, b)| !*a || *b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_roundtrip() {
        let ids = [NeuronId::new(0, 3), NeuronId::new(2, 0), NeuronId::new(1, 7)];
        let mut m = NeuronMask::from_ids(3, 8, ids).unwrap();
        let mut back: Vec<_> = m.ids().collect();
        back.sort();
        let mut want = ids.to_vec();
        want.sort();
        assert_eq!(back, want);
        assert_eq!(m.count(), 3);
        assert!(m.set(NeuronId::new(3, 0), true).is_err());
    }

    #[test]
    fn layer_mask_counts() {
        let m = NeuronMask::from_layers(4, 5, &[1, 3]).unwrap();
        assert_eq!(m.count(), 10);
        assert_eq!(m.layer_indices(1), vec![0, 1, 2, 3, 4]);
        assert!(m.layer_indices(0).is_empty());
    }
}
