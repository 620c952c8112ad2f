//! Sequential image-based attention.
//!
//! SSAM builds a spatial gate from the concatenated features of adjacent
//! frames via a learned channel-weighted squeeze (WAP over channels); SCAM
//! builds a channel gate from a learned position-weighted squeeze (WAP over
//! positions) followed by a bottleneck MLP. Both gate the current frame
//! residually: `X' = M (.) X + X`. SE and CBAM are the single-frame
//! comparison blocks, used unmodified (gating without residual).

use crate::autodiff::{ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::init;
use rand_chacha::ChaCha8Rng;

/// Concatenated per-frame feature maps, oldest first; the last
/// `channels_per_frame` channels are the current frame.
#[derive(Debug, Clone, Copy)]
pub struct FrameStack {
    pub var: Var,
    pub k: usize,
    pub channels_per_frame: usize,
}

impl FrameStack {
    /// Concatenate `frames` (each `[H, W, C]`, oldest first) along channels.
    pub fn concat(tape: &mut Tape, frames: &[Var]) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Contract("frame stack needs at least one frame".into()));
        }
        let (h, w, c) = tape.value(frames[0]).dims3()?;
        for &f in frames {
            if tape.value(f).shape() != [h, w, c] {
                return Err(Error::Shape(format!(
                    "stack frames disagree: {:?} vs {:?}",
                    [h, w, c],
                    tape.value(f).shape()
                )));
            }
        }
        let var = if frames.len() == 1 {
            frames[0]
        } else {
            tape.concat_last(frames)?
        };
        Ok(FrameStack {
            var,
            k: frames.len(),
            channels_per_frame: c,
        })
    }

    pub fn total_channels(&self) -> usize {
        self.k * self.channels_per_frame
    }

    /// The current frame's block: last `channels_per_frame` channels.
    pub fn current_frame(&self, tape: &mut Tape) -> Result<Var> {
        let c = self.channels_per_frame;
        tape.slice_last(self.var, (self.k - 1) * c, c)
    }
}

/// Spatial attention parameters: a 1x1 squeeze kernel over all stacked
/// channels plus a scalar bias.
#[derive(Debug, Clone)]
pub struct SsamParams {
    pub w_s: usize,
    pub b: usize,
    pub stack_channels: usize,
}

impl SsamParams {
    pub fn init(
        set: &mut ParamSet,
        prefix: &str,
        stack_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w_s = set.add(
            format!("{prefix}/w_s"),
            init::he_uniform(rng, &[stack_channels], stack_channels),
        )?;
        let b = set.add(format!("{prefix}/b"), crate::tensor::Tensor::scalar(0.0))?;
        Ok(SsamParams {
            w_s,
            b,
            stack_channels,
        })
    }

    pub fn register(&self, tape: &mut Tape, set: &ParamSet) -> SsamVars {
        SsamVars {
            w_s: tape.param(set, self.w_s),
            b: tape.param(set, self.b),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SsamVars {
    pub w_s: Var,
    pub b: Var,
}

/// The spatial attention map `M_s = sigmoid(wap_channels(stack) + b)`,
/// shaped `[H, W, 1]` with every element in (0, 1).
pub fn ssam_map(tape: &mut Tape, stack: &FrameStack, vars: &SsamVars) -> Result<Var> {
    let y = tape.wap_channels(stack.var, vars.w_s)?;
    let y = tape.add(y, vars.b)?;
    Ok(tape.sigmoid(y))
}

/// `X' = M_s (.) X_t + X_t`, shaped like the current frame.
pub fn ssam_forward(tape: &mut Tape, stack: &FrameStack, vars: &SsamVars) -> Result<Var> {
    let m = ssam_map(tape, stack, vars)?;
    let x_t = stack.current_frame(tape)?;
    let gated = tape.mul(x_t, m)?;
    tape.add(gated, x_t)
}

/// Channel attention parameters: a position-weighted squeeze plus a
/// bottleneck MLP with reduction ratio `r`.
#[derive(Debug, Clone)]
pub struct ScamParams {
    pub w_c: usize,
    pub f0_w: usize,
    pub f0_b: usize,
    pub f1_w: usize,
    pub f1_b: usize,
    pub r: usize,
    pub stack_channels: usize,
}

impl ScamParams {
    pub fn init(
        set: &mut ParamSet,
        prefix: &str,
        positions: usize,
        stack_channels: usize,
        r: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if r == 0 || stack_channels % r != 0 {
            return Err(Error::Config(format!(
                "reduction ratio {r} must divide stacked channel count {stack_channels}"
            )));
        }
        let mid = stack_channels / r;
        let w_c = set.add(
            format!("{prefix}/w_c"),
            init::he_uniform(rng, &[positions], positions),
        )?;
        let f0_w = set.add(
            format!("{prefix}/f0_w"),
            init::he_uniform(rng, &[mid, stack_channels], stack_channels),
        )?;
        let f0_b = set.add(
            format!("{prefix}/f0_b"),
            crate::tensor::Tensor::zeros(&[mid]),
        )?;
        let f1_w = set.add(
            format!("{prefix}/f1_w"),
            init::he_uniform(rng, &[stack_channels, mid], mid),
        )?;
        let f1_b = set.add(
            format!("{prefix}/f1_b"),
            crate::tensor::Tensor::zeros(&[stack_channels]),
        )?;
        Ok(ScamParams {
            w_c,
            f0_w,
            f0_b,
            f1_w,
            f1_b,
            r,
            stack_channels,
        })
    }

    pub fn register(&self, tape: &mut Tape, set: &ParamSet) -> ScamVars {
        ScamVars {
            w_c: tape.param(set, self.w_c),
            f0_w: tape.param(set, self.f0_w),
            f0_b: tape.param(set, self.f0_b),
            f1_w: tape.param(set, self.f1_w),
            f1_b: tape.param(set, self.f1_b),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScamVars {
    pub w_c: Var,
    pub f0_w: Var,
    pub f0_b: Var,
    pub f1_w: Var,
    pub f1_b: Var,
}

/// The channel attention map `M_c = sigmoid(F1(relu(F0(wap_positions(stack)))))`,
/// a vector over all stacked channels.
pub fn scam_map(tape: &mut Tape, stack: &FrameStack, vars: &ScamVars) -> Result<Var> {
    let y = tape.wap_positions(stack.var, vars.w_c)?;
    let h = tape.matvec(vars.f0_w, y)?;
    let h = tape.add(h, vars.f0_b)?;
    let h = tape.relu(h);
    let g = tape.matvec(vars.f1_w, h)?;
    let g = tape.add(g, vars.f1_b)?;
    Ok(tape.sigmoid(g))
}

/// `X' = M_c[last C] (.) X_t + X_t`. The full-length gate keeps the stated
/// map dimensions; only the current frame's slice multiplies X_t.
pub fn scam_forward(tape: &mut Tape, stack: &FrameStack, vars: &ScamVars) -> Result<Var> {
    let m = scam_map(tape, stack, vars)?;
    let c = stack.channels_per_frame;
    let gate = tape.slice_last(m, (stack.k - 1) * c, c)?;
    let x_t = stack.current_frame(tape)?;
    let gated = tape.mul(x_t, gate)?;
    tape.add(gated, x_t)
}

/// Squeeze-and-excitation comparison block: GAP squeeze, bottleneck MLP,
/// sigmoid channel gate, no residual.
#[derive(Debug, Clone)]
pub struct SeParams {
    pub f0_w: usize,
    pub f0_b: usize,
    pub f1_w: usize,
    pub f1_b: usize,
    pub r: usize,
}

impl SeParams {
    pub fn init(
        set: &mut ParamSet,
        prefix: &str,
        channels: usize,
        r: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if r == 0 || channels % r != 0 {
            return Err(Error::Config(format!(
                "reduction ratio {r} must divide channel count {channels}"
            )));
        }
        let mid = channels / r;
        let f0_w = set.add(
            format!("{prefix}/f0_w"),
            init::he_uniform(rng, &[mid, channels], channels),
        )?;
        let f0_b = set.add(format!("{prefix}/f0_b"), crate::tensor::Tensor::zeros(&[mid]))?;
        let f1_w = set.add(
            format!("{prefix}/f1_w"),
            init::he_uniform(rng, &[channels, mid], mid),
        )?;
        let f1_b = set.add(
            format!("{prefix}/f1_b"),
            crate::tensor::Tensor::zeros(&[channels]),
        )?;
        Ok(SeParams {
            f0_w,
            f0_b,
            f1_w,
            f1_b,
            r,
        })
    }

    pub fn register(&self, tape: &mut Tape, set: &ParamSet) -> SeVars {
        SeVars {
            f0_w: tape.param(set, self.f0_w),
            f0_b: tape.param(set, self.f0_b),
            f1_w: tape.param(set, self.f1_w),
            f1_b: tape.param(set, self.f1_b),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SeVars {
    pub f0_w: Var,
    pub f0_b: Var,
    pub f1_w: Var,
    pub f1_b: Var,
}

pub fn se_block(tape: &mut Tape, x: Var, vars: &SeVars) -> Result<Var> {
    let z = tape.gap(x)?;
    let h = tape.matvec(vars.f0_w, z)?;
    let h = tape.add(h, vars.f0_b)?;
    let h = tape.relu(h);
    let g = tape.matvec(vars.f1_w, h)?;
    let g = tape.add(g, vars.f1_b)?;
    let g = tape.sigmoid(g);
    tape.mul(x, g)
}

/// CBAM comparison block: SE-style channel gate with summed avg+max
/// squeezes, then a spatial gate from stacked channel-avg/channel-max maps
/// through a 7x7 conv.
#[derive(Debug, Clone)]
pub struct CbamParams {
    pub f0_w: usize,
    pub f0_b: usize,
    pub f1_w: usize,
    pub f1_b: usize,
    pub spatial_kernel: usize,
    pub r: usize,
}

impl CbamParams {
    pub fn init(
        set: &mut ParamSet,
        prefix: &str,
        channels: usize,
        r: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if r == 0 || channels % r != 0 {
            return Err(Error::Config(format!(
                "reduction ratio {r} must divide channel count {channels}"
            )));
        }
        let mid = channels / r;
        let f0_w = set.add(
            format!("{prefix}/f0_w"),
            init::he_uniform(rng, &[mid, channels], channels),
        )?;
        let f0_b = set.add(format!("{prefix}/f0_b"), crate::tensor::Tensor::zeros(&[mid]))?;
        let f1_w = set.add(
            format!("{prefix}/f1_w"),
            init::he_uniform(rng, &[channels, mid], mid),
        )?;
        let f1_b = set.add(
            format!("{prefix}/f1_b"),
            crate::tensor::Tensor::zeros(&[channels]),
        )?;
        let spatial_kernel = set.add(
            format!("{prefix}/spatial_conv"),
            init::he_uniform(rng, &[7, 7, 2, 1], 7 * 7 * 2),
        )?;
        Ok(CbamParams {
            f0_w,
            f0_b,
            f1_w,
            f1_b,
            spatial_kernel,
            r,
        })
    }

    pub fn register(&self, tape: &mut Tape, set: &ParamSet) -> CbamVars {
        CbamVars {
            f0_w: tape.param(set, self.f0_w),
            f0_b: tape.param(set, self.f0_b),
            f1_w: tape.param(set, self.f1_w),
            f1_b: tape.param(set, self.f1_b),
            spatial_kernel: tape.param(set, self.spatial_kernel),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CbamVars {
    pub f0_w: Var,
    pub f0_b: Var,
    pub f1_w: Var,
    pub f1_b: Var,
    pub spatial_kernel: Var,
}

pub fn cbam_block(tape: &mut Tape, x: Var, vars: &CbamVars) -> Result<Var> {
    // Channel gate: shared MLP over GAP and global-max squeezes, summed.
    let mlp = |tape: &mut Tape, z: Var| -> Result<Var> {
        let h = tape.matvec(vars.f0_w, z)?;
        let h = tape.add(h, vars.f0_b)?;
        let h = tape.relu(h);
        let g = tape.matvec(vars.f1_w, h)?;
        tape.add(g, vars.f1_b)
    };
    let avg = tape.gap(x)?;
    let mx = tape.max_positions(x)?;
    let ga = mlp(tape, avg)?;
    let gm = mlp(tape, mx)?;
    let g = tape.add(ga, gm)?;
    let g = tape.sigmoid(g);
    let x1 = tape.mul(x, g)?;

    // Spatial gate: [avg_c | max_c] -> 7x7 conv -> sigmoid.
    let am = tape.mean_channels(x1)?;
    let mm = tape.max_channels(x1)?;
    let cat = tape.concat_last(&[am, mm])?;
    let s = tape.conv2d(cat, vars.spatial_kernel, 1, crate::autodiff::Padding::Same)?;
    let s = tape.sigmoid(s);
    tape.mul(x1, s)
}

/// Late fusion: elementwise mean of two force series.
pub fn ensemble_average(pred_a: &[f64], pred_b: &[f64]) -> Result<Vec<f64>> {
    if pred_a.len() != pred_b.len() {
        return Err(Error::Shape(format!(
            "ensemble length mismatch: {} vs {}",
            pred_a.len(),
            pred_b.len()
        )));
    }
    Ok(pred_a
        .iter()
        .zip(pred_b)
        .map(|(a, b)| 0.5 * (a + b))
        .collect())
}
