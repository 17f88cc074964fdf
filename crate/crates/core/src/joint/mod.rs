//! The combined spatio-temporal network: U-Net map → per-frame inner
//! product with the input → CAE refinement, plus staged training.

mod config;
mod data;
mod trace;
mod train;

pub use config::{Stage, TrainConfig};
pub use data::{label_subject, list_volumes, load_dataset, read_labels, stem, write_labels, Label, Subject};
pub use trace::{moving_average, TraceRecord, TrainTrace};
pub use train::{train_all, train_stage1, train_stage2, train_stage3, Checkpointer};

use std::path::Path;

use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::dictionary::DictError;
use crate::kv::{KvError, KvMap};
use crate::nn::{CaeConfig, CaeModel, ModelError, UNetConfig, UNetModel};
use crate::tensor::{Graph, Scalar, TensorError, Var};
use crate::volume::{NetworkMap, TimeSeries, Volume4D, VolumeError};

#[derive(Debug, Error)]
pub enum JointError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite loss at stage {stage} step {step}")]
    NonFinite {
        stage: u8,
        step: usize,
        trace: Box<TrainTrace>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Dictionary(#[from] DictError),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `t_i = <V_i, map>` for every frame `i`: a valid convolution whose kernel
/// covers the whole frame.
pub fn joint_operator(vol: &Volume4D, map: &NetworkMap) -> Result<TimeSeries, JointError> {
    if vol.dims() != map.dims() {
        return Err(JointError::Dimension(format!(
            "map {:?} does not match frames {:?}",
            map.dims(),
            vol.dims()
        )));
    }
    let mut g = Graph::<f64>::new();
    let v = g.constant(vol.to_tensor());
    let m = g.constant(map.to_tensor());
    let ts = g.frame_dot(v, m)?;
    Ok(TimeSeries::new(g.value(ts).to_f64_vec())?)
}

/// Output of [`StCnn::forward_full`].
#[derive(Debug, Clone, PartialEq)]
pub struct FullOutput {
    pub map: NetworkMap,
    /// Joint-operator series before refinement.
    pub raw: TimeSeries,
    pub refined: TimeSeries,
    /// The raw series is constant, so the CAE saw no signal.
    pub constant: bool,
}

/// Graph nodes of one recorded forward pass.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Recorded {
    pub map: Var,
    pub raw: Var,
    pub refined: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StCnn<S: Scalar = f64> {
    pub unet: UNetModel<S>,
    pub cae: CaeModel<S>,
}

impl<S: Scalar> StCnn<S> {
    /// Fresh networks for `frames`-channel input, both seeded from `seed`.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self, JointError> {
        Ok(StCnn {
            unet: UNetModel::new(config, seed)?,
            cae: CaeModel::new(CaeConfig {
                seed: seed.wrapping_add(1),
            }),
        })
    }

    /// One connected graph: input → map → raw series → refined series.
    pub(crate) fn record(
        &self,
        g: &mut Graph<S>,
        unet_vars: &[Var],
        cae_vars: &[Var],
        volume: Var,
    ) -> Result<Recorded, JointError> {
        let map = self.unet.forward(g, unet_vars, volume)?;
        let raw = g.frame_dot(volume, map)?;
        let refined = self.cae.forward(g, cae_vars, raw)?;
        Ok(Recorded { map, raw, refined })
    }

    /// Spatial map, raw joint series and refined series for a normalised
    /// volume. Parameters are not modified.
    pub fn forward_full(&self, vol: &Volume4D) -> Result<FullOutput, JointError> {
        if vol.frames() != self.unet.config().in_channels {
            return Err(JointError::Dimension(format!(
                "model expects {} frames, volume has {}",
                self.unet.config().in_channels,
                vol.frames()
            )));
        }
        let mut g = Graph::new();
        let uv = self.unet.params().bind(&mut g, false);
        let cv = self.cae.params().bind(&mut g, false);
        let input = g.constant(vol.to_tensor());
        let r = self.record(&mut g, &uv, &cv, input)?;
        let raw = TimeSeries::new(g.value(r.raw).to_f64_vec())?;
        Ok(FullOutput {
            map: NetworkMap::from_tensor(g.value(r.map), vol.dims(), "stcnn")?,
            constant: raw.is_constant(),
            raw,
            refined: TimeSeries::new(g.value(r.refined).to_f64_vec())?,
        })
    }

    /// Final map and refined series for an unseen (normalised) subject.
    pub fn infer(&self, vol: &Volume4D) -> Result<(NetworkMap, TimeSeries), JointError> {
        let out = self.forward_full(vol)?;
        Ok((out.map, out.refined))
    }

    /// Writes `unet.ckpt` and `cae.ckpt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), JointError> {
        std::fs::create_dir_all(dir)?;
        save_unet(&self.unet, &dir.join(UNET_FILE))?;
        save_cae(&self.cae, &dir.join(CAE_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, JointError> {
        Ok(StCnn {
            unet: load_unet(&dir.join(UNET_FILE))?,
            cae: load_cae(&dir.join(CAE_FILE))?,
        })
    }
}

pub const UNET_FILE: &str = "unet.ckpt";
pub const CAE_FILE: &str = "cae.ckpt";

fn unet_config_kv(c: &UNetConfig) -> KvMap {
    let mut kv = KvMap::new();
    kv.insert("in_channels", c.in_channels);
    kv.insert("levels", c.levels);
    kv.insert("base_channels", c.base_channels);
    kv.insert("kernel", c.kernel);
    kv
}

pub fn save_unet<S: Scalar>(unet: &UNetModel<S>, path: &Path) -> Result<(), JointError> {
    Checkpoint {
        model: "unet".into(),
        config: unet_config_kv(unet.config()).render(),
        params: unet.params().clone(),
    }
    .write(path)?;
    Ok(())
}

pub fn save_cae<S: Scalar>(cae: &CaeModel<S>, path: &Path) -> Result<(), JointError> {
    Checkpoint {
        model: "cae".into(),
        config: String::new(),
        params: cae.params().clone(),
    }
    .write(path)?;
    Ok(())
}

fn expect_model(c: &Checkpoint<impl Scalar>, name: &str, path: &Path) -> Result<(), JointError> {
    if c.model != name {
        return Err(JointError::Config(format!(
            "{} holds a `{}` model, expected `{}`",
            path.display(),
            c.model,
            name
        )));
    }
    Ok(())
}

pub fn load_unet<S: Scalar>(path: &Path) -> Result<UNetModel<S>, JointError> {
    let c = Checkpoint::<S>::read(path)?;
    expect_model(&c, "unet", path)?;
    let kv = KvMap::parse(&c.config)?;
    let config = UNetConfig {
        in_channels: kv.parse_value("in_channels")?,
        levels: kv.parse_value("levels")?,
        base_channels: kv.parse_value("base_channels")?,
        kernel: kv.parse_value("kernel")?,
    };
    let mut unet = UNetModel::zeroed(config)?;
    unet.params_mut().assign(c.params)?;
    Ok(unet)
}

pub fn load_cae<S: Scalar>(path: &Path) -> Result<CaeModel<S>, JointError> {
    let c = Checkpoint::<S>::read(path)?;
    expect_model(&c, "cae", path)?;
    let mut cae = CaeModel::zeroed();
    cae.params_mut().assign(c.params)?;
    Ok(cae)
}

#[cfg(test)]
mod tests;
