//! Boolean spatial masks over pixel locations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a mask was produced, when it came from an attribution ranking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    pub class: usize,
    /// "top" for the selected set, "complement" for the rest.
    pub rule: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    /// Requested selection fraction, for ranked masks.
    pub fraction: Option<f64>,
    pub provenance: Option<Provenance>,
}

impl FeatureMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape("feature mask", format!("{} bits for {height}x{width}", bits.len())));
        }
        Ok(FeatureMask { height, width, bits, fraction: None, provenance: None })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        FeatureMask { height, width, bits: vec![false; height * width], fraction: None, provenance: None }
    }

    pub fn full(height: usize, width: usize) -> Self {
        FeatureMask { height, width, bits: vec![true; height * width], fraction: None, provenance: None }
    }

    pub fn from_indices(height: usize, width: usize, indices: &[usize]) -> Result<Self> {
        let mut m = Self::empty(height, width);
        for &i in indices {
            if i >= m.bits.len() {
                return Err(Error::OutOfRange { what: "mask pixel", index: i, len: m.bits.len() });
            }
            m.bits[i] = true;
        }
        Ok(m)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.bits[row * self.width + col] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Row-major indices of set pixels.
    pub fn indices(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    fn same_grid(&self, other: &FeatureMask) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::shape(
                "feature mask",
                format!("{}x{} vs {}x{}", self.height, self.width, other.height, other.width),
            ));
        }
        Ok(())
    }

    pub fn complement(&self) -> FeatureMask {
        FeatureMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
            fraction: self.fraction.map(|f| 1.0 - f),
            provenance: self.provenance.as_ref().map(|p| Provenance {
                rule: if p.rule == "top" { "complement".into() } else { "top".into() },
                ..p.clone()
            }),
        }
    }

    pub fn union(&self, other: &FeatureMask) -> Result<FeatureMask> {
        self.same_grid(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect();
        FeatureMask::new(self.height, self.width, bits)
    }

    pub fn intersection(&self, other: &FeatureMask) -> Result<FeatureMask> {
        self.same_grid(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect();
        FeatureMask::new(self.height, self.width, bits)
    }

    pub fn is_disjoint(&self, other: &FeatureMask) -> Result<bool> {
        Ok(self.intersection(other)?.is_empty())
    }

    pub fn is_subset_of(&self, other: &FeatureMask) -> Result<bool> {
        self.same_grid(other)?;
        Ok(self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complement_partitions_the_grid() {
        let m = FeatureMask::from_indices(2, 3, &[0, 4]).unwrap();
        let c = m.complement();
        assert_eq!(c.count(), 4);
        assert!(m.is_disjoint(&c).unwrap());
        assert_eq!(m.union(&c).unwrap().count(), 6);
        assert!(FeatureMask::from_indices(2, 3, &[6]).is_err());
    }
}
