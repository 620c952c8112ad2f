//! Full model assembly: backbone + optional attention + BLSTM + head.

use crate::attention::{
    cbam_block, se_block, scam_forward, ssam_forward, ssam_map, CbamParams, FrameStack,
    ScamParams, SeParams, SsamParams,
};
use crate::autodiff::{ParamSet, Tape, Var};
use crate::backbone::{extract_features, BackboneConfig, BackboneParams};
use crate::error::{Error, Result};
use crate::temporal::{blstm_forward, predict_force, BlstmParams, HeadParams};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Ssam,
    Scam,
    Se,
    Cbam,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Variant::Baseline),
            "ssam" => Ok(Variant::Ssam),
            "scam" => Ok(Variant::Scam),
            "se" => Ok(Variant::Se),
            "cbam" => Ok(Variant::Cbam),
            other => Err(Error::Config(format!("unknown model variant '{other}'"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Baseline => "baseline",
            Variant::Ssam => "ssam",
            Variant::Scam => "scam",
            Variant::Se => "se",
            Variant::Cbam => "cbam",
        };
        f.write_str(s)
    }
}

/// Architecture description; serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub backbone: BackboneConfig,
    /// LSTM hidden units per direction.
    pub hidden_size: usize,
    /// Width of the FC layer between fusion and the regressor.
    pub fc_size: usize,
    /// Frames per attention stack (current + k-1 previous).
    pub k: usize,
    /// Reduction ratio of the channel-attention MLP.
    pub r: usize,
}

impl ModelConfig {
    /// Production configuration: full 128-px backbone, 256 hidden units,
    /// 1024-wide FC head, two-frame stacks, reduction 16.
    pub fn full(variant: Variant) -> Self {
        ModelConfig {
            variant,
            backbone: BackboneConfig::full128(),
            hidden_size: 256,
            fc_size: 1024,
            k: 2,
            r: 16,
        }
    }

    /// Smallest configuration; used by smoke tests and quick experiments.
    pub fn tiny(variant: Variant) -> Self {
        ModelConfig {
            variant,
            backbone: BackboneConfig::tiny16(),
            hidden_size: 8,
            fc_size: 8,
            k: 2,
            r: 4,
        }
    }

    /// Desk-scale configuration used by fast training runs and tests.
    pub fn small(variant: Variant) -> Self {
        ModelConfig {
            variant,
            backbone: BackboneConfig::small32(),
            hidden_size: 32,
            fc_size: 64,
            k: 2,
            r: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        let c = self.backbone.feature_channels();
        match self.variant {
            Variant::Scam => {
                if (self.k * c) % self.r != 0 {
                    return Err(Error::Config(format!(
                        "r={} must divide stacked channels {}",
                        self.r,
                        self.k * c
                    )));
                }
            }
            Variant::Se | Variant::Cbam => {
                if c % self.r != 0 {
                    return Err(Error::Config(format!(
                        "r={} must divide channels {c}",
                        self.r
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum AttentionParams {
    None,
    Ssam(SsamParams),
    Scam(ScamParams),
    Se(SeParams),
    Cbam(CbamParams),
}

/// A model variant with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub backbone: BackboneParams,
    pub attention: AttentionParams,
    pub blstm: BlstmParams,
    pub head: HeadParams,
}

impl Model {
    /// Build a freshly initialized model, deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let backbone = BackboneParams::init(&mut set, "backbone", &config.backbone, &mut rng)?;
        let fs = config.backbone.feature_size();
        let c = config.backbone.feature_channels();
        let attention = match config.variant {
            Variant::Baseline => AttentionParams::None,
            Variant::Ssam => AttentionParams::Ssam(SsamParams::init(
                &mut set,
                "attention/ssam",
                config.k * c,
                &mut rng,
            )?),
            Variant::Scam => AttentionParams::Scam(ScamParams::init(
                &mut set,
                "attention/scam",
                fs * fs,
                config.k * c,
                config.r,
                &mut rng,
            )?),
            Variant::Se => {
                AttentionParams::Se(SeParams::init(&mut set, "attention/se", c, config.r, &mut rng)?)
            }
            Variant::Cbam => AttentionParams::Cbam(CbamParams::init(
                &mut set,
                "attention/cbam",
                c,
                config.r,
                &mut rng,
            )?),
        };
        let blstm = BlstmParams::init(&mut set, "temporal/blstm", c, config.hidden_size, &mut rng)?;
        let head = HeadParams::init(
            &mut set,
            "temporal/head",
            2 * config.hidden_size,
            config.fc_size,
            &mut rng,
        )?;
        Ok(Model {
            config: config.clone(),
            params: set,
            backbone,
            attention,
            blstm,
            head,
        })
    }

    /// Forward pass over a window of frames (each `[S, S, 1]`), producing
    /// the scalar force prediction for the window's last frame.
    pub fn forward_window(&self, tape: &mut Tape, frames: &[Var]) -> Result<Var> {
        if frames.is_empty() {
            return Err(Error::Contract("window must contain at least one frame".into()));
        }
        let bb = self.backbone.register(tape, &self.params);
        let feats: Vec<Var> = frames
            .iter()
            .map(|&f| extract_features(tape, &self.config.backbone, &bb, f))
            .collect::<Result<_>>()?;

        let refined: Vec<Var> = match &self.attention {
            AttentionParams::None => feats.clone(),
            AttentionParams::Ssam(p) => {
                let vars = p.register(tape, &self.params);
                let mut out = Vec::with_capacity(feats.len());
                for i in 0..feats.len() {
                    let stack_frames = stack_indices(i, self.config.k)
                        .map(|j| feats[j])
                        .collect::<Vec<_>>();
                    let stack = FrameStack::concat(tape, &stack_frames)?;
                    out.push(ssam_forward(tape, &stack, &vars)?);
                }
                out
            }
            AttentionParams::Scam(p) => {
                let vars = p.register(tape, &self.params);
                let mut out = Vec::with_capacity(feats.len());
                for i in 0..feats.len() {
                    let stack_frames = stack_indices(i, self.config.k)
                        .map(|j| feats[j])
                        .collect::<Vec<_>>();
                    let stack = FrameStack::concat(tape, &stack_frames)?;
                    out.push(scam_forward(tape, &stack, &vars)?);
                }
                out
            }
            AttentionParams::Se(p) => {
                let vars = p.register(tape, &self.params);
                feats
                    .iter()
                    .map(|&f| se_block(tape, f, &vars))
                    .collect::<Result<_>>()?
            }
            AttentionParams::Cbam(p) => {
                let vars = p.register(tape, &self.params);
                feats
                    .iter()
                    .map(|&f| cbam_block(tape, f, &vars))
                    .collect::<Result<_>>()?
            }
        };

        let vecs: Vec<Var> = refined
            .into_iter()
            .map(|r| tape.gap(r))
            .collect::<Result<_>>()?;
        let bv = self.blstm.register(tape, &self.params);
        let fused = blstm_forward(tape, &bv, &vecs)?;
        let hv = self.head.register(tape, &self.params);
        predict_force(tape, &hv, fused)
    }

    /// Inference-only prediction for one window of frame tensors.
    pub fn predict_window(&self, frames: &[Tensor]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = frames.iter().map(|f| tape.leaf(f.clone())).collect();
        let y = self.forward_window(&mut tape, &vars)?;
        tape.value(y).item()
    }

    /// Encode a single frame to a feature vector: backbone, attention over
    /// the frame plus `k-1` previous feature maps, then GAP. `prev` holds
    /// earlier frames of the sequence (any missing history repeats the
    /// current frame per the start-of-sequence padding rule).
    pub fn encode_frame(&self, frame: &Tensor, prev: &[Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bb = self.backbone.register(&mut tape, &self.params);
        let fv = tape.leaf(frame.clone());
        let feat = extract_features(&mut tape, &self.config.backbone, &bb, fv)?;
        let refined = match &self.attention {
            AttentionParams::None => feat,
            AttentionParams::Ssam(p) => {
                let vars = p.register(&mut tape, &self.params);
                let stack = self.history_stack(&mut tape, &bb, feat, prev)?;
                ssam_forward(&mut tape, &stack, &vars)?
            }
            AttentionParams::Scam(p) => {
                let vars = p.register(&mut tape, &self.params);
                let stack = self.history_stack(&mut tape, &bb, feat, prev)?;
                scam_forward(&mut tape, &stack, &vars)?
            }
            AttentionParams::Se(p) => {
                let vars = p.register(&mut tape, &self.params);
                se_block(&mut tape, feat, &vars)?
            }
            AttentionParams::Cbam(p) => {
                let vars = p.register(&mut tape, &self.params);
                cbam_block(&mut tape, feat, &vars)?
            }
        };
        let g = tape.gap(refined)?;
        Ok(tape.value(g).clone())
    }

    fn history_stack(
        &self,
        tape: &mut Tape,
        bb: &crate::backbone::BackboneVars,
        feat: Var,
        prev: &[Tensor],
    ) -> Result<FrameStack> {
        let mut stack_frames = Vec::with_capacity(self.config.k);
        for back in (1..self.config.k).rev() {
            let v = if back <= prev.len() {
                let fv = tape.leaf(prev[prev.len() - back].clone());
                extract_features(tape, &self.config.backbone, bb, fv)?
            } else {
                feat // repeat current frame when history is short
            };
            stack_frames.push(v);
        }
        stack_frames.push(feat);
        FrameStack::concat(tape, &stack_frames)
    }

    /// Spatial attention maps for each frame of a window (SSAM only); each
    /// map is `[S/16, S/16, 1]` with entries in (0, 1).
    pub fn attention_maps(&self, frames: &[Tensor]) -> Result<Vec<Tensor>> {
        let p = match &self.attention {
            AttentionParams::Ssam(p) => p,
            _ => {
                return Err(Error::Contract(
                    "attention maps are only defined for the ssam variant".into(),
                ))
            }
        };
        let mut tape = Tape::new();
        let bb = self.backbone.register(&mut tape, &self.params);
        let vars = p.register(&mut tape, &self.params);
        let feats: Vec<Var> = frames
            .iter()
            .map(|f| {
                let fv = tape.leaf(f.clone());
                extract_features(&mut tape, &self.config.backbone, &bb, fv)
            })
            .collect::<Result<_>>()?;
        let mut maps = Vec::with_capacity(feats.len());
        for i in 0..feats.len() {
            let stack_frames = stack_indices(i, self.config.k)
                .map(|j| feats[j])
                .collect::<Vec<_>>();
            let stack = FrameStack::concat(&mut tape, &stack_frames)?;
            let m = ssam_map(&mut tape, &stack, &vars)?;
            maps.push(tape.value(m).clone());
        }
        Ok(maps)
    }
}

/// Indices of the `k` stack members for frame `i` of a window, oldest
/// first, clamping below zero to the first frame.
fn stack_indices(i: usize, k: usize) -> impl Iterator<Item = usize> {
    (0..k).map(move |d| i.saturating_sub(k - 1 - d))
}
