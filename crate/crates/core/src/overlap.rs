//! Binarization and Jaccard overlap of network maps.

use crate::volume::{NetworkMap, VolumeError};

/// How a scalar map becomes a voxel set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdRule {
    /// `|v| > k·σ`, where `σ` is the population standard deviation of the
    /// map's nonzero values. Zeros are never in the set, so a map with a
    /// single nonzero level keeps its whole support.
    NonzeroSigma(f64),
    /// `|v| > t`.
    Absolute(f64),
}

impl Default for ThresholdRule {
    fn default() -> Self {
        ThresholdRule::NonzeroSigma(2.0)
    }
}

pub fn binarize(values: &[f64], rule: ThresholdRule) -> Vec<bool> {
    let threshold = match rule {
        ThresholdRule::Absolute(t) => t,
        ThresholdRule::NonzeroSigma(k) => {
            let nz: Vec<f64> = values.iter().copied().filter(|&v| v != 0.0).collect();
            if nz.is_empty() {
                return vec![false; values.len()];
            }
            let n = nz.len() as f64;
            let mean = nz.iter().sum::<f64>() / n;
            let var = nz.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            k * var.sqrt()
        }
    };
    values.iter().map(|&v| v != 0.0 && v.abs() > threshold).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    /// `|A ∩ B| / |A ∪ B|`, defined as 0 for an empty union.
    pub score: f64,
    pub intersection: usize,
    pub union: usize,
}

impl Overlap {
    pub fn empty_union(&self) -> bool {
        self.union == 0
    }
}

pub fn jaccard_sets(a: &[bool], b: &[bool]) -> Overlap {
    let (mut inter, mut union) = (0, 0);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Overlap {
        score: if union == 0 { 0.0 } else { inter as f64 / union as f64 },
        intersection: inter,
        union,
    }
}

/// Binarizes both maps with `rule`, then takes the Jaccard index.
pub fn jaccard(a: &NetworkMap, b: &NetworkMap, rule: ThresholdRule) -> Result<Overlap, VolumeError> {
    if a.dims() != b.dims() {
        return Err(VolumeError::Dimension(format!(
            "jaccard of {:?} and {:?} maps",
            a.dims(),
            b.dims()
        )));
    }
    Ok(jaccard_sets(
        &binarize(a.values(), rule),
        &binarize(b.values(), rule),
    ))
}
