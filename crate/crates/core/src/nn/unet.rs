//! 3D regression U-Net: `[T, D, H, W]` frame stack in, `[1, D, H, W]` map out.

use super::{conv_layer, push_conv, seeded, ModelError, ParamSet};
use crate::tensor::{Graph, Scalar, Var};
use crate::volume::{NetworkMap, Volume4D};

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    /// Number of frames `T`; frame `i` feeds channel `i`.
    pub in_channels: usize,
    /// Resolution levels, bottom included.
    pub levels: usize,
    pub base_channels: usize,
    pub kernel: usize,
}

impl UNetConfig {
    pub fn new(in_channels: usize) -> Self {
        UNetConfig {
            in_channels,
            levels: 3,
            base_channels: 8,
            kernel: 3,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.levels < 2 {
            return Err(ModelError::Config(format!("U-Net needs levels >= 2, got {}", self.levels)));
        }
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(ModelError::Config("U-Net channel counts must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(ModelError::Config(format!("U-Net kernel must be odd, got {}", self.kernel)));
        }
        Ok(())
    }

    /// Feature channels at `level` (doubling per level).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Every spatial extent is padded up to a multiple of this.
    pub fn multiple(&self) -> usize {
        1 << (self.levels - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNetModel<S: Scalar = f64> {
    config: UNetConfig,
    params: ParamSet<S>,
}

impl<S: Scalar> UNetModel<S> {
    /// Fan-in scaled uniform kernels from `seed`, zero biases.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self, ModelError> {
        Self::build(config, Some(seed))
    }

    /// All parameters zero.
    pub fn zeroed(config: UNetConfig) -> Result<Self, ModelError> {
        Self::build(config, None)
    }

    fn build(config: UNetConfig, seed: Option<u64>) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = seeded(seed);
        let k = config.kernel;
        let mut params = ParamSet::default();
        let mut conv = |name: String, c_out: usize, c_in: usize| {
            push_conv(&mut params, &name, &[c_out, c_in, k, k, k], rng.as_mut());
        };
        let bottom = config.levels - 1;
        let mut c_prev = config.in_channels;
        for l in 0..bottom {
            let c = config.channels(l);
            conv(format!("enc{}.conv1", l), c, c_prev);
            conv(format!("enc{}.conv2", l), c, c);
            c_prev = c;
        }
        let cb = config.channels(bottom);
        conv("mid.conv1".into(), cb, c_prev);
        conv("mid.conv2".into(), cb, cb);
        c_prev = cb;
        for l in (0..bottom).rev() {
            let c = config.channels(l);
            conv(format!("dec{}.conv1", l), c, c_prev + c);
            conv(format!("dec{}.conv2", l), c, c);
            c_prev = c;
        }
        push_conv(&mut params, "out", &[1, c_prev, 1, 1, 1], rng.as_mut());
        Ok(UNetModel { config, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    /// Records the network on `g`. `vars` are this model's parameters as
    /// bound by [`ParamSet::bind`]; `input` is `[T, D, H, W]`.
    pub fn forward(&self, g: &mut Graph<S>, vars: &[Var], input: Var) -> Result<Var, ModelError> {
        let shape = g.value(input).shape().to_vec();
        if shape.len() != 4 || shape[0] != self.config.in_channels {
            return Err(ModelError::Config(format!(
                "U-Net expects [{}, D, H, W] input, got {:?}",
                self.config.in_channels, shape
            )));
        }
        if vars.len() != self.params.len() {
            return Err(ModelError::Config(format!(
                "{} bound variables for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let dims = [shape[1], shape[2], shape[3]];
        let m = self.config.multiple();
        let padded = dims.map(|n| n.div_ceil(m) * m);
        let mut x = if padded != dims { g.pad_replicate(input, &padded)? } else { input };

        let mut layers = vars.chunks(2);
        let mut next = || layers.next().expect("parameter count checked");
        let bottom = self.config.levels - 1;
        let mut skips = Vec::with_capacity(bottom);
        for _ in 0..bottom {
            x = conv_layer(g, x, next(), true, true)?;
            x = conv_layer(g, x, next(), true, true)?;
            skips.push(x);
            x = g.maxpool(x, 2)?;
        }
        x = conv_layer(g, x, next(), true, true)?;
        x = conv_layer(g, x, next(), true, true)?;
        for skip in skips.into_iter().rev() {
            let up = g.upsample(x, 2)?;
            x = g.concat_channels(up, skip)?;
            x = conv_layer(g, x, next(), true, true)?;
            x = conv_layer(g, x, next(), true, true)?;
        }
        x = conv_layer(g, x, next(), true, false)?;
        if padded != dims {
            x = g.crop(x, &dims)?;
        }
        Ok(x)
    }

    /// Inference on a (normalised) volume.
    pub fn predict(&self, vol: &Volume4D) -> Result<NetworkMap, ModelError> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let input = g.constant(vol.to_tensor());
        let out = self.forward(&mut g, &vars, input)?;
        Ok(NetworkMap::from_tensor(g.value(out), vol.dims(), "unet")?)
    }
}

/// Mean squared error between two maps.
pub fn spatial_loss(pred: &NetworkMap, label: &NetworkMap) -> Result<f64, ModelError> {
    let mut g = Graph::<f64>::new();
    let p = g.constant(pred.to_tensor());
    let l = g.constant(label.to_tensor());
    let loss = g.mse_loss(p, l)?;
    Ok(g.value(loss).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(t: usize, dims: [usize; 3], seed: u64) -> Volume4D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = t * dims.iter().product::<usize>();
        Volume4D::new(t, dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn layout_doubles_channels_per_level() {
        let m = UNetModel::<f64>::new(UNetConfig::new(5), 1).unwrap();
        let shape = |n: &str| m.params().get(n).unwrap().shape().to_vec();
        assert_eq!(shape("enc0.conv1.weight"), vec![8, 5, 3, 3, 3]);
        assert_eq!(shape("enc1.conv1.weight"), vec![16, 8, 3, 3, 3]);
        assert_eq!(shape("mid.conv2.weight"), vec![32, 32, 3, 3, 3]);
        assert_eq!(shape("dec1.conv1.weight"), vec![16, 48, 3, 3, 3]);
        assert_eq!(shape("dec0.conv1.weight"), vec![8, 24, 3, 3, 3]);
        assert_eq!(shape("out.weight"), vec![1, 8, 1, 1, 1]);
        assert!(m.params().get("mid.conv1.bias").unwrap().data().iter().all(|&b| b == 0.0));
        let bound = (6.0f64 / (5.0 * 27.0)).sqrt();
        assert!(m.params().get("enc0.conv1.weight").unwrap().data().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn output_matches_input_grid() {
        let m = UNetModel::<f64>::new(UNetConfig::new(3), 2).unwrap();
        let out = m.predict(&random_volume(3, [8, 8, 8], 1)).unwrap();
        assert_eq!(out.dims(), [8, 8, 8]);
        // odd extents are padded then cropped back
        let out = m.predict(&random_volume(3, [5, 6, 7], 2)).unwrap();
        assert_eq!(out.dims(), [5, 6, 7]);
        assert!(out.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_input_and_zero_biases_give_zero_map() {
        let m = UNetModel::<f64>::new(UNetConfig::new(2), 3).unwrap();
        let vol = Volume4D::new(2, [4, 4, 4], vec![0.0; 128]).unwrap();
        assert!(m.predict(&vol).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_and_channel_checked() {
        let m = UNetModel::<f64>::new(UNetConfig::new(3), 4).unwrap();
        let vol = random_volume(3, [4, 4, 4], 5);
        assert_eq!(m.predict(&vol).unwrap(), m.predict(&vol).unwrap());
        assert!(m.predict(&random_volume(2, [4, 4, 4], 5)).is_err());
        let mut bad = UNetConfig::new(3);
        bad.levels = 1;
        assert!(UNetModel::<f64>::new(bad, 0).is_err());
    }

    #[test]
    fn spatial_loss_values() {
        let a = NetworkMap::new([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0], "").unwrap();
        let b = NetworkMap::new([1, 2, 2], vec![2.0, 3.0, 4.0, 5.0], "").unwrap();
        assert_eq!(spatial_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(spatial_loss(&a, &b).unwrap(), 1.0);
        let c = NetworkMap::new([1, 2, 2], vec![0.5, -1.0, 3.0, 0.0], "").unwrap();
        let direct = (0.25 + 9.0 + 0.0 + 16.0) / 4.0;
        assert!((spatial_loss(&a, &c).unwrap() - direct).abs() < 1e-15);
        let d = NetworkMap::new([2, 2, 1], vec![0.0; 4], "").unwrap();
        assert!(spatial_loss(&a, &d).is_err());
    }
}
