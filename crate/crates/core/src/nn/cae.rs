//! 1D convolutional autoencoder over a length-`N` series.
//!
//! Encoder: conv k3 → 8 ch, pool; conv k5 → 16 ch, pool; conv k8 → 32 ch.
//! Decoder mirrors it: upsample, conv k8 → 16; upsample, conv k5 → 8;
//! conv k3 → 1. Every conv is same-padded with relu except the last.

use super::{conv_layer, push_conv, seeded, ModelError, ParamSet};
use crate::tensor::{Graph, Scalar, Var};
use crate::volume::TimeSeries;

const ENCODER: [(usize, usize); 3] = [(3, 8), (5, 16), (8, 32)];
const DECODER: [(usize, usize); 3] = [(8, 16), (5, 8), (3, 1)];
/// Shortest accepted series.
pub const MIN_LENGTH: usize = 8;

/// Kernel sizes and output channels per stage, read off the parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaeArchitecture {
    pub encoder_kernels: Vec<usize>,
    pub encoder_channels: Vec<usize>,
    pub decoder_kernels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    /// Pooling window after encoder stages 1 and 2.
    pub pool: usize,
}

/// The architecture is fixed; the config only seeds the initialisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CaeConfig {
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaeModel<S: Scalar = f64> {
    params: ParamSet<S>,
}

impl<S: Scalar> CaeModel<S> {
    pub fn new(config: CaeConfig) -> Self {
        Self::build(Some(config.seed))
    }

    pub fn zeroed() -> Self {
        Self::build(None)
    }

    fn build(seed: Option<u64>) -> Self {
        let mut rng = seeded(seed);
        let mut params = ParamSet::default();
        let mut c_in = 1;
        for (i, &(k, c)) in ENCODER.iter().enumerate() {
            push_conv(&mut params, &format!("enc{}", i + 1), &[c, c_in, k], rng.as_mut());
            c_in = c;
        }
        for (i, &(k, c)) in DECODER.iter().enumerate() {
            push_conv(&mut params, &format!("dec{}", i + 1), &[c, c_in, k], rng.as_mut());
            c_in = c;
        }
        CaeModel { params }
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    pub fn architecture(&self) -> CaeArchitecture {
        let stage = |prefix: &str| -> (Vec<usize>, Vec<usize>) {
            (1..=3)
                .map(|i| {
                    let s = self.params.get(&format!("{}{}.weight", prefix, i)).expect("stage").shape();
                    (s[2], s[0])
                })
                .unzip()
        };
        let (encoder_kernels, encoder_channels) = stage("enc");
        let (decoder_kernels, decoder_channels) = stage("dec");
        CaeArchitecture {
            encoder_kernels,
            encoder_channels,
            decoder_kernels,
            decoder_channels,
            pool: 2,
        }
    }

    /// Records the autoencoder on `g`. `input` holds the `N` samples in any
    /// shape; it is standardised first, so the output is invariant to the
    /// input's offset and positive scale. Returns a `[N]` node.
    pub fn forward(&self, g: &mut Graph<S>, vars: &[Var], input: Var) -> Result<Var, ModelError> {
        let n = g.value(input).len();
        if n < MIN_LENGTH {
            return Err(ModelError::Config(format!(
                "series of length {} is shorter than {}",
                n, MIN_LENGTH
            )));
        }
        if vars.len() != self.params.len() {
            return Err(ModelError::Config(format!(
                "{} bound variables for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let padded = n.div_ceil(4) * 4;
        let x = g.standardize(input);
        let mut x = g.reshape(x, &[1, n])?;
        if padded != n {
            x = g.pad_replicate(x, &[padded])?;
        }
        let layer = |i: usize| &vars[2 * i..2 * i + 2];
        x = conv_layer(g, x, layer(0), false, true)?;
        x = g.maxpool(x, 2)?;
        x = conv_layer(g, x, layer(1), false, true)?;
        x = g.maxpool(x, 2)?;
        x = conv_layer(g, x, layer(2), false, true)?;
        x = g.upsample(x, 2)?;
        x = conv_layer(g, x, layer(3), false, true)?;
        x = g.upsample(x, 2)?;
        x = conv_layer(g, x, layer(4), false, true)?;
        x = conv_layer(g, x, layer(5), false, false)?;
        if padded != n {
            x = g.crop(x, &[n])?;
        }
        Ok(g.reshape(x, &[n])?)
    }

    pub fn predict(&self, ts: &TimeSeries) -> Result<TimeSeries, ModelError> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let input = g.constant(ts.to_tensor());
        let out = self.forward(&mut g, &vars, input)?;
        Ok(TimeSeries::new(g.value(out).to_f64_vec())?)
    }
}

/// Negative Pearson correlation; `degenerate` flags a constant input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalLoss {
    pub value: f64,
    pub degenerate: bool,
}

pub fn temporal_loss(pred: &TimeSeries, label: &TimeSeries) -> Result<TemporalLoss, ModelError> {
    let mut g = Graph::<f64>::new();
    let p = g.constant(pred.to_tensor());
    let l = g.constant(label.to_tensor());
    let r = g.neg_pearson_loss(p, l)?;
    Ok(TemporalLoss {
        value: g.value(r.loss).data()[0],
        degenerate: r.degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(v: &[f64]) -> TimeSeries {
        TimeSeries::new(v.to_vec()).unwrap()
    }

    #[test]
    fn architecture_is_3_5_8_with_8_16_32_channels() {
        let arch = CaeModel::<f64>::new(CaeConfig::default()).architecture();
        assert_eq!(arch.encoder_kernels, vec![3, 5, 8]);
        assert_eq!(arch.encoder_channels, vec![8, 16, 32]);
        assert_eq!(arch.decoder_kernels, vec![8, 5, 3]);
        assert_eq!(arch.decoder_channels, vec![16, 8, 1]);
    }

    #[test]
    fn preserves_length() {
        let m = CaeModel::<f64>::new(CaeConfig { seed: 3 });
        for n in [8, 12, 64, 10, 13] {
            let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
            assert_eq!(m.predict(&ts(&x)).unwrap().len(), n);
        }
        assert!(matches!(m.predict(&ts(&[1.0, 2.0, 3.0, 4.0])), Err(ModelError::Config(_))));
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let m = CaeModel::<f64>::new(CaeConfig { seed: 4 });
        assert!(m.predict(&ts(&[0.0; 16])).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn temporal_loss_examples() {
        let x = ts(&[1.0, 2.0, 3.0, 4.0]);
        let y = ts(&[1.0, 3.0, 2.0, 4.0]);
        assert!((temporal_loss(&x, &y).unwrap().value + 0.8).abs() < 1e-12);
        assert!((temporal_loss(&x, &x).unwrap().value + 1.0).abs() < 1e-12);
        let neg = ts(&[-1.0, -2.0, -3.0, -4.0]);
        assert!((temporal_loss(&neg, &x).unwrap().value - 1.0).abs() < 1e-12);
        let flat = temporal_loss(&ts(&[2.0; 4]), &x).unwrap();
        assert!(flat.degenerate);
        assert_eq!(flat.value, 0.0);
    }

    #[test]
    fn temporal_loss_ignores_positive_affine_maps_of_pred() {
        let x = ts(&[0.3, -1.2, 2.5, 0.1, 0.9, -0.4]);
        let y = ts(&[1.0, 0.2, 1.5, -0.3, 0.8, 0.0]);
        let moved = ts(&x.values().iter().map(|v| 3.7 * v - 12.0).collect::<Vec<_>>());
        let a = temporal_loss(&x, &y).unwrap().value;
        let b = temporal_loss(&moved, &y).unwrap().value;
        assert!((a - b).abs() < 1e-9);
    }
}
