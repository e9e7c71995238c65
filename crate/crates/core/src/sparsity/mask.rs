use fixedbitset::FixedBitSet;

use crate::error::{Error, Result};

/// Active positions of one prunable weight tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    bits: FixedBitSet,
    active: usize,
}

impl LayerMask {
    pub fn ones(len: usize) -> Self {
        let mut bits = FixedBitSet::with_capacity(len);
        bits.insert_range(..);
        Self { bits, active: len }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            bits: FixedBitSet::with_capacity(len),
            active: 0,
        }
    }

    pub fn from_bools(values: &[bool]) -> Self {
        let mut m = Self::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            m.set(i, v);
        }
        m
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.len() == 0
    }

    pub fn active(&self) -> usize {
        self.active
    }

    pub fn inactive(&self) -> usize {
        self.len() - self.active
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.bits.contains(i)
    }

    pub fn set(&mut self, i: usize, on: bool) {
        let was = self.bits.put(i);
        if !was && on {
            self.active += 1;
        } else if was && !on {
            self.active -= 1;
        }
        if !on {
            self.bits.set(i, false);
        }
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    pub fn ones_iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.ones()
    }

    pub fn zeros_iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.zeroes()
    }

    pub fn count_differing(&self, other: &LayerMask) -> Result<usize> {
        if self.len() != other.len() {
            return Err(Error::LengthMismatch(self.len(), other.len()));
        }
        Ok(self.bits.symmetric_difference_count(&other.bits))
    }

    /// Packed little-endian bitset: element `8·i + j` is bit `j` of byte `i`.
    pub fn to_packed(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.len().div_ceil(8)];
        for i in self.bits.ones() {
            out[i / 8] |= 1 << (i % 8);
        }
        out
    }

    pub fn from_packed(len: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::LengthMismatch(len.div_ceil(8), bytes.len()));
        }
        let mut m = Self::zeros(len);
        for i in 0..len {
            if bytes[i / 8] >> (i % 8) & 1 == 1 {
                m.set(i, true);
            }
        }
        Ok(m)
    }

    /// Count recomputed from the bits; equals [`LayerMask::active`].
    pub fn popcount(&self) -> usize {
        self.bits.count_ones(..)
    }
}

/// One [`LayerMask`] per prunable parameter, in parameter order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityMask {
    pub names: Vec<String>,
    pub layers: Vec<LayerMask>,
}

impl SparsityMask {
    pub fn new(names: Vec<String>, layers: Vec<LayerMask>) -> Self {
        debug_assert_eq!(names.len(), layers.len());
        Self { names, layers }
    }

    pub fn ones(names: Vec<String>, sizes: &[usize]) -> Self {
        let layers = sizes.iter().map(|&n| LayerMask::ones(n)).collect();
        Self { names, layers }
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(LayerMask::len).sum()
    }

    pub fn active(&self) -> usize {
        self.layers.iter().map(LayerMask::active).sum()
    }

    pub fn densities(&self) -> Vec<f64> {
        self.layers
            .iter()
            .map(|l| {
                if l.is_empty() {
                    1.0
                } else {
                    l.active() as f64 / l.len() as f64
                }
            })
            .collect()
    }

    /// Flattened view in (layer, element) order.
    pub fn to_bools(&self) -> Vec<bool> {
        self.layers.iter().flat_map(|l| l.to_bools()).collect()
    }
}

/// Fraction of prunable positions that are inactive.
pub fn sparsity_of(mask: &SparsityMask) -> f64 {
    let total = mask.total();
    if total == 0 {
        return 0.0;
    }
    1.0 - mask.active() as f64 / total as f64
}

/// Normalised Hamming distance.
pub fn mask_distance(a: &SparsityMask, b: &SparsityMask) -> Result<f64> {
    if a.layers.len() != b.layers.len() {
        return Err(Error::LengthMismatch(a.total(), b.total()));
    }
    let total = a.total();
    if total != b.total() {
        return Err(Error::LengthMismatch(total, b.total()));
    }
    let mut diff = 0;
    for (x, y) in a.layers.iter().zip(&b.layers) {
        diff += x.count_differing(y)?;
    }
    Ok(if total == 0 { 0.0 } else { diff as f64 / total as f64 })
}
