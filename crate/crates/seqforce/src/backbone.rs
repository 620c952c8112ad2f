//! VGG-like visual feature extractor.
//!
//! Ten 3x3 convs in five pairs, ReLU after each, 2x2 max pooling after the
//! first four pairs. On a 128x128 grayscale frame the channel plan
//! 16,16,32,32,64,64,128,128,256,256 yields an 8x8x256 map; attention (if
//! any) refines that map before global average pooling.

use crate::autodiff::{Padding, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::init;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Structural description of the extractor. `full128()` is the production
/// network; smaller variants exist for tests and desk-scale training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_size: usize,
    /// Output channels of the ten conv layers, in order.
    pub channels: Vec<usize>,
}

impl BackboneConfig {
    /// The full-scale network: 128x128x1 in, 8x8x256 out.
    pub fn full128() -> Self {
        BackboneConfig {
            input_size: 128,
            channels: vec![16, 16, 32, 32, 64, 64, 128, 128, 256, 256],
        }
    }

    /// Desk-scale variant: 32x32x1 in, 2x2 spatial out.
    pub fn small32() -> Self {
        BackboneConfig {
            input_size: 32,
            channels: vec![2, 2, 4, 4, 8, 8, 16, 16, 32, 32],
        }
    }

    /// Gradient-check variant: 16x16x1 in, shallow and narrow.
    pub fn tiny16() -> Self {
        BackboneConfig {
            input_size: 16,
            channels: vec![2, 2, 4, 4, 8, 8, 16, 16, 32, 32],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 10 {
            return Err(Error::Config(format!(
                "backbone needs 10 conv layers, got {}",
                self.channels.len()
            )));
        }
        if self.input_size % 16 != 0 || self.input_size < 16 {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of 16 (four 2x pools)",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Spatial side length of the output feature map.
    pub fn feature_size(&self) -> usize {
        self.input_size / 16
    }

    /// Channel count of the output feature map.
    pub fn feature_channels(&self) -> usize {
        *self.channels.last().unwrap()
    }
}

/// Conv weights and biases for the ten layers.
#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub layers: Vec<(usize, usize)>, // (kernel slot, bias slot)
    pub config: BackboneConfig,
}

impl BackboneParams {
    pub fn init(
        set: &mut ParamSet,
        prefix: &str,
        config: &BackboneConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(10);
        let mut cin = 1;
        for (li, &cout) in config.channels.iter().enumerate() {
            let pair = li / 2 + 1;
            let within = li % 2 + 1;
            let kernel = set.add(
                format!("{prefix}/conv{pair}_{within}/kernel"),
                init::he_uniform(rng, &[3, 3, cin, cout], 3 * 3 * cin),
            )?;
            let bias = set.add(
                format!("{prefix}/conv{pair}_{within}/bias"),
                crate::tensor::Tensor::zeros(&[cout]),
            )?;
            layers.push((kernel, bias));
            cin = cout;
        }
        Ok(BackboneParams {
            layers,
            config: config.clone(),
        })
    }

    pub fn register(&self, tape: &mut Tape, set: &ParamSet) -> BackboneVars {
        BackboneVars {
            layers: self
                .layers
                .iter()
                .map(|(k, b)| (tape.param(set, *k), tape.param(set, *b)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackboneVars {
    pub layers: Vec<(Var, Var)>,
}

/// Run the ten-layer extractor on one frame `[S, S, 1]`, returning the
/// pre-GAP feature map `[S/16, S/16, C]`.
pub fn extract_features(
    tape: &mut Tape,
    config: &BackboneConfig,
    vars: &BackboneVars,
    frame: Var,
) -> Result<Var> {
    let s = config.input_size;
    if tape.value(frame).shape() != [s, s, 1] {
        return Err(Error::Shape(format!(
            "expected frame [{s}, {s}, 1], got {:?}",
            tape.value(frame).shape()
        )));
    }
    let mut x = frame;
    for (li, (kernel, bias)) in vars.layers.iter().enumerate() {
        let y = tape.conv2d(x, *kernel, 1, Padding::Same)?;
        let y = tape.add(y, *bias)?;
        x = tape.relu(y);
        // pool after layer pairs 1-4, none after the fifth pair
        if li % 2 == 1 && li < 8 {
            x = tape.maxpool2(x)?;
        }
    }
    Ok(x)
}

/// GAP of a (possibly attention-refined) feature map into a vector.
pub fn squeeze_features(tape: &mut Tape, refined: Var) -> Result<Var> {
    tape.gap(refined)
}
