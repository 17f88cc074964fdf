//! The two networks: a 3D regression U-Net and a 1D convolutional
//! autoencoder, with their named parameter sets.

pub mod cae;
pub mod unet;

pub use cae::{CaeArchitecture, CaeConfig, CaeModel};
pub use unet::{UNetConfig, UNetModel};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Graph, Padding, Scalar, Tensor, TensorError, Var};
use crate::volume::VolumeError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Ordered, named parameter tensors of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<S: Scalar = f64> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<S>) {
        self.names.push(name.into());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Places every tensor on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect()
    }

    /// Replaces the tensors, requiring identical names and shapes.
    pub fn assign(&mut self, other: ParamSet<S>) -> Result<(), ModelError> {
        if other.names != self.names {
            return Err(ModelError::Config(format!(
                "parameter names differ: {:?} vs {:?}",
                other.names, self.names
            )));
        }
        for (i, (a, b)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            if a.shape() != b.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    self.names[i],
                    b.shape(),
                    a.shape()
                )));
            }
        }
        self.tensors = other.tensors;
        Ok(())
    }
}

/// Fan-in scaled uniform kernel `U(±sqrt(6 / fan_in))`, `fan_in = C_in·Πk`.
fn he_uniform<S: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<S> {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| S::of(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("consistent")
}

/// Appends `<name>.weight` (kernel) and `<name>.bias` (zeros).
fn push_conv<S: Scalar>(
    params: &mut ParamSet<S>,
    name: &str,
    shape: &[usize],
    rng: Option<&mut ChaCha8Rng>,
) {
    let weight = match rng {
        Some(r) => he_uniform(shape, r),
        None => Tensor::zeros(shape),
    };
    params.push(format!("{}.weight", name), weight);
    params.push(format!("{}.bias", name), Tensor::zeros(&[shape[0]]));
}

fn seeded(seed: Option<u64>) -> Option<ChaCha8Rng> {
    seed.map(ChaCha8Rng::seed_from_u64)
}

/// Same-padded convolution plus bias, optionally followed by relu.
/// `vars` holds `[weight, bias]`.
fn conv_layer<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    vars: &[Var],
    three_d: bool,
    relu: bool,
) -> Result<Var, TensorError> {
    let y = if three_d {
        g.conv3d(x, vars[0], Padding::Same)?
    } else {
        g.conv1d(x, vars[0], Padding::Same)?
    };
    let y = g.add_bias(y, vars[1])?;
    Ok(if relu { g.relu(y) } else { y })
}
