//! 4D volumes, network maps and time series; the `.vol4` file format and
//! the synthetic generator.

mod io;
pub mod synth;

pub use io::{
    read_map, read_series_csv, read_volume4d, write_map, write_series_csv, write_volume4d,
    write_volume4d_as, HEADER_SUFFIX,
};
pub use synth::{
    brain_mask, synthesize, time_course, Blob, Cohort, MaskShape, NetworkSpec, Synthetic,
    SyntheticSpec, TARGET_LABEL,
};

use thiserror::Error;

use crate::kv::KvError;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("format error: {0}")]
    Format(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A sequence of `T >= 2` volumes of shape `D×H×W`, stored frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume4D {
    frames: usize,
    dims: [usize; 3],
    data: Vec<f64>,
    mask: Option<Vec<bool>>,
    pub repetition_time: f64,
    flagged_constant: Vec<usize>,
}

impl Volume4D {
    pub fn new(frames: usize, dims: [usize; 3], data: Vec<f64>) -> Result<Self, VolumeError> {
        if frames < 2 {
            return Err(VolumeError::Dimension(format!(
                "a 4D volume needs at least 2 frames, got {}",
                frames
            )));
        }
        if dims.contains(&0) {
            return Err(VolumeError::Dimension(format!("degenerate frame dims {:?}", dims)));
        }
        let expected = frames * dims.iter().product::<usize>();
        if data.len() != expected {
            return Err(VolumeError::Dimension(format!(
                "{} frames of {:?} need {} values, got {}",
                frames,
                dims,
                expected,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::Data(format!("non-finite value at index {}", i)));
        }
        Ok(Volume4D {
            frames,
            dims,
            data,
            mask: None,
            repetition_time: 1.0,
            flagged_constant: Vec::new(),
        })
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self, VolumeError> {
        if mask.len() != self.voxels() {
            return Err(VolumeError::Dimension(format!(
                "mask has {} voxels, frame has {}",
                mask.len(),
                self.voxels()
            )));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn in_mask(&self, voxel: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[voxel])
    }

    /// Flat indices of in-mask voxels, ascending.
    pub fn mask_indices(&self) -> Vec<usize> {
        (0..self.voxels()).filter(|&v| self.in_mask(v)).collect()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn voxel_series(&self, voxel: usize) -> Vec<f64> {
        let n = self.voxels();
        (0..self.frames).map(|t| self.data[t * n + voxel]).collect()
    }

    /// Voxels zeroed by [`normalize`] because their series was constant.
    pub fn flagged_constant(&self) -> &[usize] {
        &self.flagged_constant
    }

    /// `[T, D, H, W]` tensor, frame `i` on channel `i`.
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        let [d, h, w] = self.dims;
        Tensor::from_f64(&[self.frames, d, h, w], &self.data).expect("consistent dims")
    }
}

/// Per-voxel temporal z-scoring (population σ) within the mask.
///
/// Constant in-mask voxels become all-zero and are recorded in
/// [`Volume4D::flagged_constant`]; voxels outside the mask are zeroed.
pub fn normalize(vol: &Volume4D) -> Volume4D {
    let n = vol.voxels();
    let t = vol.frames as f64;
    let mut out = vol.clone();
    out.flagged_constant.clear();
    for v in 0..n {
        if !vol.in_mask(v) {
            for f in 0..vol.frames {
                out.data[f * n + v] = 0.0;
            }
            continue;
        }
        let series = vol.voxel_series(v);
        let mean = series.iter().sum::<f64>() / t;
        let var = series.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / t;
        let sd = var.sqrt();
        let scale = series.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if sd <= 1e-12 * scale.max(f64::MIN_POSITIVE) || sd == 0.0 {
            out.flagged_constant.push(v);
            for f in 0..vol.frames {
                out.data[f * n + v] = 0.0;
            }
        } else {
            for (f, x) in series.iter().enumerate() {
                out.data[f * n + v] = (x - mean) / sd;
            }
        }
    }
    out
}

/// A single 3D map over the frame grid of a [`Volume4D`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkMap {
    dims: [usize; 3],
    values: Vec<f64>,
    pub label: String,
}

impl NetworkMap {
    pub fn new(dims: [usize; 3], values: Vec<f64>, label: impl Into<String>) -> Result<Self, VolumeError> {
        if dims.contains(&0) {
            return Err(VolumeError::Dimension(format!("degenerate map dims {:?}", dims)));
        }
        if values.len() != dims.iter().product::<usize>() {
            return Err(VolumeError::Dimension(format!(
                "map {:?} needs {} values, got {}",
                dims,
                dims.iter().product::<usize>(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::Data(format!("non-finite map value at index {}", i)));
        }
        Ok(NetworkMap {
            dims,
            values,
            label: label.into(),
        })
    }

    pub fn zeros(dims: [usize; 3], label: impl Into<String>) -> Self {
        NetworkMap {
            dims,
            values: vec![0.0; dims.iter().product()],
            label: label.into(),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        let [d, h, w] = self.dims;
        Tensor::from_f64(&[1, d, h, w], &self.values).expect("consistent dims")
    }

    pub fn from_tensor<S: Scalar>(t: &Tensor<S>, dims: [usize; 3], label: &str) -> Result<Self, VolumeError> {
        NetworkMap::new(dims, t.to_f64_vec(), label)
    }
}

/// A finite scalar sequence of length `N >= 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries(Vec<f64>);

impl TimeSeries {
    pub fn new(values: Vec<f64>) -> Result<Self, VolumeError> {
        if values.len() < 2 {
            return Err(VolumeError::Dimension(format!(
                "time series needs at least 2 samples, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::Data(format!("non-finite sample at index {}", i)));
        }
        Ok(TimeSeries(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_f64(&[self.0.len()], &self.0).expect("non-empty")
    }

    /// Population variance is zero.
    pub fn is_constant(&self) -> bool {
        let first = self.0[0];
        self.0.iter().all(|&v| v == first)
    }
}

impl From<TimeSeries> for Vec<f64> {
    fn from(ts: TimeSeries) -> Self {
        ts.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_z_scores_with_population_sigma() {
        // one voxel, three frames
        let vol = Volume4D::new(3, [1, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let z = normalize(&vol);
        let expected = 1.5f64.sqrt(); // 1 / sqrt(2/3)
        assert!((z.data()[0] + expected).abs() < 1e-12);
        assert!(z.data()[1].abs() < 1e-12);
        assert!((z.data()[2] - expected).abs() < 1e-12);
        assert!((expected - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn normalize_flags_constant_voxels() {
        let vol = Volume4D::new(3, [1, 1, 2], vec![4.0, 1.0, 4.0, 2.0, 4.0, 0.0]).unwrap();
        let z = normalize(&vol);
        assert_eq!(z.flagged_constant(), &[0]);
        assert_eq!(z.voxel_series(0), vec![0.0; 3]);
    }

    #[test]
    fn normalize_is_idempotent() {
        let data: Vec<f64> = (0..5 * 8).map(|i| ((i * 7919) % 13) as f64 * 0.3 - 1.0).collect();
        let once = normalize(&Volume4D::new(5, [2, 2, 2], data).unwrap());
        let twice = normalize(&once);
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_zeroes_outside_mask() {
        let vol = Volume4D::new(2, [1, 1, 2], vec![1.0, 5.0, 2.0, 7.0])
            .unwrap()
            .with_mask(vec![true, false])
            .unwrap();
        let z = normalize(&vol);
        assert_eq!(z.voxel_series(1), vec![0.0, 0.0]);
        assert_eq!(z.voxel_series(0), vec![-1.0, 1.0]);
    }

    #[test]
    fn invariants_rejected() {
        assert!(Volume4D::new(1, [2, 2, 2], vec![0.0; 8]).is_err());
        assert!(Volume4D::new(2, [2, 0, 2], vec![]).is_err());
        assert!(matches!(
            Volume4D::new(2, [1, 1, 1], vec![0.0, f64::NAN]),
            Err(VolumeError::Data(_))
        ));
        assert!(TimeSeries::new(vec![1.0]).is_err());
    }
}
