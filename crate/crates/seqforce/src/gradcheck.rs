//! Named gradient-check blocks covering every differentiable building
//! block, compared against central differences. Used by the CLI and the
//! acceptance suite.

use crate::attention::{
    cbam_block, scam_forward, se_block, ssam_forward, CbamParams, FrameStack, ScamParams,
    SeParams, SsamParams,
};
use crate::autodiff::{grad_check, Padding, ParamSet, Tape, Var};
use crate::error::Result;
use crate::init;
use crate::temporal::{blstm_forward, lstm_step, predict_force, BlstmParams, HeadParams, LstmParams};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative-error threshold below which a block passes.
pub const THRESHOLD: f64 = 1e-4;

/// Step size for the central differences.
pub const EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct BlockReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub scalar_count: usize,
    pub passed: bool,
}

fn rand_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor {
    Tensor::new(
        vec![h, w, c],
        (0..h * w * c).map(|_| rng.gen_range(0.1..1.0)).collect(),
    )
    .unwrap()
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::new(vec![n], (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap()
}

type BlockFn = Box<dyn FnMut(&mut Tape, &ParamSet) -> Result<Var>>;

fn block(name: &'static str, mut set: ParamSet, mut f: BlockFn) -> Result<BlockReport> {
    let report = grad_check(&mut set, EPS, |tape, set| f(tape, set))?;
    Ok(BlockReport {
        name,
        max_rel_err: report.max_rel_err,
        scalar_count: report.scalar_count,
        passed: report.max_rel_err < THRESHOLD,
    })
}

/// Gradient-check every block; each entry reports the worst relative error
/// between reverse-mode and central-difference gradients.
pub fn run_all(seed: u64) -> Result<Vec<BlockReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    // convolution with bias and relu
    {
        let mut set = ParamSet::new();
        let k = set.add("kernel", init::he_uniform(&mut rng, &[3, 3, 2, 3], 18))?;
        let b = set.add("bias", rand_vec(&mut rng, 3))?;
        let x = rand_map(&mut rng, 6, 6, 2);
        reports.push(block(
            "conv3x3",
            set,
            Box::new(move |tape, set| {
                let xv = tape.leaf(x.clone());
                let kv = tape.param(set, k);
                let bv = tape.param(set, b);
                let y = tape.conv2d(xv, kv, 1, Padding::Same)?;
                let y = tape.add(y, bv)?;
                let y = tape.relu(y);
                Ok(tape.mean(y))
            }),
        )?);
    }

    // max pooling fed by a parameter so gradients route through the argmax
    {
        let mut set = ParamSet::new();
        let p = set.add("input", rand_map(&mut rng, 6, 6, 2))?;
        reports.push(block(
            "maxpool2",
            set,
            Box::new(move |tape, set| {
                let xv = tape.param(set, p);
                let y = tape.maxpool2(xv)?;
                Ok(tape.mean(y))
            }),
        )?);
    }

    // global average pooling
    {
        let mut set = ParamSet::new();
        let p = set.add("input", rand_map(&mut rng, 4, 4, 3))?;
        let w = rand_vec(&mut rng, 3);
        reports.push(block(
            "gap",
            set,
            Box::new(move |tape, set| {
                let xv = tape.param(set, p);
                let g = tape.gap(xv)?;
                let wv = tape.leaf(w.clone());
                let y = tape.mul(g, wv)?;
                Ok(tape.sum(y))
            }),
        )?);
    }

    // weighted average pooling, both orientations
    {
        let mut set = ParamSet::new();
        let w = set.add("weights", rand_vec(&mut rng, 4))?;
        let x = rand_map(&mut rng, 3, 3, 4);
        reports.push(block(
            "wap_channels",
            set,
            Box::new(move |tape, set| {
                let xv = tape.leaf(x.clone());
                let wv = tape.param(set, w);
                let y = tape.wap_channels(xv, wv)?;
                Ok(tape.mean(y))
            }),
        )?);
    }
    {
        let mut set = ParamSet::new();
        let w = set.add("weights", rand_vec(&mut rng, 9))?;
        let x = rand_map(&mut rng, 3, 3, 4);
        reports.push(block(
            "wap_positions",
            set,
            Box::new(move |tape, set| {
                let xv = tape.leaf(x.clone());
                let wv = tape.param(set, w);
                let y = tape.wap_positions(xv, wv)?;
                Ok(tape.mean(y))
            }),
        )?);
    }

    // spatial attention over a two-frame stack
    {
        let mut set = ParamSet::new();
        let params = SsamParams::init(&mut set, "ssam", 8, &mut rng)?;
        let a = rand_map(&mut rng, 3, 3, 4);
        let b = rand_map(&mut rng, 3, 3, 4);
        reports.push(block(
            "ssam",
            set,
            Box::new(move |tape, set| {
                let av = tape.leaf(a.clone());
                let bv = tape.leaf(b.clone());
                let vars = params.register(tape, set);
                let stack = FrameStack::concat(tape, &[av, bv])?;
                let y = ssam_forward(tape, &stack, &vars)?;
                Ok(tape.mean(y))
            }),
        )?);
    }

    // channel attention over a two-frame stack
    {
        let mut set = ParamSet::new();
        let params = ScamParams::init(&mut set, "scam", 9, 8, 2, &mut rng)?;
        let a = rand_map(&mut rng, 3, 3, 4);
        let b = rand_map(&mut rng, 3, 3, 4);
        reports.push(block(
            "scam",
            set,
            Box::new(move |tape, set| {
                let av = tape.leaf(a.clone());
                let bv = tape.leaf(b.clone());
                let vars = params.register(tape, set);
                let stack = FrameStack::concat(tape, &[av, bv])?;
                let y = scam_forward(tape, &stack, &vars)?;
                Ok(tape.mean(y))
            }),
        )?);
    }

    // single-frame channel gate
    {
        let mut set = ParamSet::new();
        let params = SeParams::init(&mut set, "se", 4, 2, &mut rng)?;
        let x = rand_map(&mut rng, 3, 3, 4);
        reports.push(block(
            "se",
            set,
            Box::new(move |tape, set| {
                let xv = tape.leaf(x.clone());
                let vars = params.register(tape, set);
                let y = se_block(tape, xv, &vars)?;
                Ok(tape.mean(y))
            }),
        )?);
    }

    // single-frame channel-then-spatial gate
    {
        let mut set = ParamSet::new();
        let params = CbamParams::init(&mut set, "cbam", 4, 2, &mut rng)?;
        let x = rand_map(&mut rng, 8, 8, 4);
        reports.push(block(
            "cbam",
            set,
            Box::new(move |tape, set| {
                let xv = tape.leaf(x.clone());
                let vars = params.register(tape, set);
                let y = cbam_block(tape, xv, &vars)?;
                Ok(tape.mean(y))
            }),
        )?);
    }

    // one recurrent step
    {
        let mut set = ParamSet::new();
        let params = LstmParams::init(&mut set, "lstm", 3, 4, &mut rng)?;
        let x = rand_vec(&mut rng, 3);
        let h0 = rand_vec(&mut rng, 4);
        let c0 = rand_vec(&mut rng, 4);
        reports.push(block(
            "lstm_step",
            set,
            Box::new(move |tape, set| {
                let xv = tape.leaf(x.clone());
                let hv = tape.leaf(h0.clone());
                let cv = tape.leaf(c0.clone());
                let vars = params.register(tape, set);
                let (h1, c1) = lstm_step(tape, &vars, xv, hv, cv)?;
                let hm = tape.mean(h1);
                let cm = tape.mean(c1);
                tape.add(hm, cm)
            }),
        )?);
    }

    // both directions over a short sequence
    {
        let mut set = ParamSet::new();
        let params = BlstmParams::init(&mut set, "blstm", 3, 4, &mut rng)?;
        let xs: Vec<Tensor> = (0..3).map(|_| rand_vec(&mut rng, 3)).collect();
        reports.push(block(
            "blstm",
            set,
            Box::new(move |tape, set| {
                let seq: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
                let vars = params.register(tape, set);
                let fused = blstm_forward(tape, &vars, &seq)?;
                Ok(tape.mean(fused))
            }),
        )?);
    }

    // fc + regressor head
    {
        let mut set = ParamSet::new();
        let params = HeadParams::init(&mut set, "head", 6, 5, &mut rng)?;
        let fused = rand_vec(&mut rng, 6);
        reports.push(block(
            "head",
            set,
            Box::new(move |tape, set| {
                let fv = tape.leaf(fused.clone());
                let vars = params.register(tape, set);
                predict_force(tape, &vars, fv)
            }),
        )?);
    }

    // squared-error loss against a fixed target
    {
        let mut set = ParamSet::new();
        let p = set.add("pred", Tensor::scalar(0.7))?;
        reports.push(block(
            "loss",
            set,
            Box::new(move |tape, set| {
                let pv = tape.param(set, p);
                let t = tape.leaf(Tensor::scalar(0.25));
                let d = tape.sub(pv, t)?;
                tape.mul(d, d)
            }),
        )?);
    }

    Ok(reports)
}

/// True when every block passed.
pub fn all_passed(reports: &[BlockReport]) -> bool {
    reports.iter().all(|r| r.passed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_block_passes() {
        let reports = run_all(42).unwrap();
        assert_eq!(reports.len(), 13);
        for r in &reports {
            assert!(
                r.passed,
                "block {} failed with max rel err {}",
                r.name, r.max_rel_err
            );
            assert!(r.scalar_count > 0);
        }
        assert!(all_passed(&reports));
    }

    #[test]
    fn block_names_are_unique() {
        let reports = run_all(1).unwrap();
        let mut names: Vec<&str> = reports.iter().map(|r| r.name).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), 13);
    }
}
