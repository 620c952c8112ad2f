//! Sequence modeling: bidirectional LSTM over per-frame feature vectors,
//! last-step fusion, FC head, linear force regressor.

use crate::autodiff::{ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::init;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

/// One direction's gate weights: input/forget/output/candidate, each with
/// an input-to-hidden matrix, a hidden-to-hidden matrix and a bias.
#[derive(Debug, Clone)]
pub struct LstmParams {
    /// (W_x, W_h, b) slots for gates i, f, o, g in that order.
    pub gates: [(usize, usize, usize); 4],
    pub input_size: usize,
    pub hidden_size: usize,
}

impl LstmParams {
    pub fn init(
        set: &mut ParamSet,
        prefix: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let names = ["i", "f", "o", "g"];
        let mut gates = [(0, 0, 0); 4];
        for (gi, name) in names.iter().enumerate() {
            let wx = set.add(
                format!("{prefix}/{name}/wx"),
                init::recurrent_uniform(rng, &[hidden_size, input_size], hidden_size),
            )?;
            let wh = set.add(
                format!("{prefix}/{name}/wh"),
                init::recurrent_uniform(rng, &[hidden_size, hidden_size], hidden_size),
            )?;
            let b = set.add(format!("{prefix}/{name}/b"), Tensor::zeros(&[hidden_size]))?;
            gates[gi] = (wx, wh, b);
        }
        Ok(LstmParams {
            gates,
            input_size,
            hidden_size,
        })
    }

    pub fn register(&self, tape: &mut Tape, set: &ParamSet) -> LstmVars {
        LstmVars {
            gates: self
                .gates
                .map(|(wx, wh, b)| (tape.param(set, wx), tape.param(set, wh), tape.param(set, b))),
            hidden_size: self.hidden_size,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub gates: [(Var, Var, Var); 4],
    pub hidden_size: usize,
}

/// Canonical LSTM update: i,f,o = sigmoid gates, g = tanh candidate,
/// c' = f.c + i.g, h' = o.tanh(c').
pub fn lstm_step(
    tape: &mut Tape,
    vars: &LstmVars,
    x: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let mut pre = [None; 4];
    for (gi, (wx, wh, b)) in vars.gates.iter().enumerate() {
        let a = tape.matvec(*wx, x)?;
        let u = tape.matvec(*wh, h)?;
        let s = tape.add(a, u)?;
        pre[gi] = Some(tape.add(s, *b)?);
    }
    let i = tape.sigmoid(pre[0].unwrap());
    let f = tape.sigmoid(pre[1].unwrap());
    let o = tape.sigmoid(pre[2].unwrap());
    let g = tape.tanh(pre[3].unwrap());
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next);
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// Both directions' parameters.
#[derive(Debug, Clone)]
pub struct BlstmParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

impl BlstmParams {
    pub fn init(
        set: &mut ParamSet,
        prefix: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(BlstmParams {
            fwd: LstmParams::init(set, &format!("{prefix}/fwd"), input_size, hidden_size, rng)?,
            bwd: LstmParams::init(set, &format!("{prefix}/bwd"), input_size, hidden_size, rng)?,
        })
    }

    pub fn register(&self, tape: &mut Tape, set: &ParamSet) -> BlstmVars {
        BlstmVars {
            fwd: self.fwd.register(tape, set),
            bwd: self.bwd.register(tape, set),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlstmVars {
    pub fwd: LstmVars,
    pub bwd: LstmVars,
}

/// Scan the sequence in both directions from zero initial states and
/// concatenate the two final hidden states into a fused vector of twice
/// the hidden size.
pub fn blstm_forward(tape: &mut Tape, vars: &BlstmVars, sequence: &[Var]) -> Result<Var> {
    if sequence.is_empty() {
        return Err(Error::Contract("blstm_forward needs at least one step".into()));
    }
    let scan = |tape: &mut Tape, dir: &LstmVars, steps: &mut dyn Iterator<Item = Var>| -> Result<Var> {
        let mut h = tape.leaf(Tensor::zeros(&[dir.hidden_size]));
        let mut c = tape.leaf(Tensor::zeros(&[dir.hidden_size]));
        for x in steps {
            let (h2, c2) = lstm_step(tape, dir, x, h, c)?;
            h = h2;
            c = c2;
        }
        Ok(h)
    };
    let h_fwd = scan(tape, &vars.fwd, &mut sequence.iter().copied())?;
    let h_bwd = scan(tape, &vars.bwd, &mut sequence.iter().rev().copied())?;
    tape.concat_last(&[h_fwd, h_bwd])
}

/// FC + linear regressor on the fused BLSTM vector.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub fc_w: usize,
    pub fc_b: usize,
    pub reg_w: usize,
    pub reg_b: usize,
}

impl HeadParams {
    pub fn init(
        set: &mut ParamSet,
        prefix: &str,
        fused_size: usize,
        fc_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(HeadParams {
            fc_w: set.add(
                format!("{prefix}/fc/w"),
                init::he_uniform(rng, &[fc_size, fused_size], fused_size),
            )?,
            fc_b: set.add(format!("{prefix}/fc/b"), Tensor::zeros(&[fc_size]))?,
            reg_w: set.add(
                format!("{prefix}/reg/w"),
                init::he_uniform(rng, &[1, fc_size], fc_size),
            )?,
            reg_b: set.add(format!("{prefix}/reg/b"), Tensor::zeros(&[1]))?,
        })
    }

    pub fn register(&self, tape: &mut Tape, set: &ParamSet) -> HeadVars {
        HeadVars {
            fc_w: tape.param(set, self.fc_w),
            fc_b: tape.param(set, self.fc_b),
            reg_w: tape.param(set, self.reg_w),
            reg_b: tape.param(set, self.reg_b),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub fc_w: Var,
    pub fc_b: Var,
    pub reg_w: Var,
    pub reg_b: Var,
}

/// `regressor(relu(fc(fused)))`, a scalar force prediction attributed to
/// the window's last frame.
pub fn predict_force(tape: &mut Tape, vars: &HeadVars, fused: Var) -> Result<Var> {
    let h = tape.matvec(vars.fc_w, fused)?;
    let h = tape.add(h, vars.fc_b)?;
    let h = tape.relu(h);
    let y = tape.matvec(vars.reg_w, h)?;
    tape.add(y, vars.reg_b)
}
